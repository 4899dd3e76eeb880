//! Bayesian regression model: prior, likelihood, posterior, gradients, MAP
//! estimation, and the deep-ensemble baseline.
//!
//! The model places an isotropic standard normal prior on the network
//! parameters and a truncated standard normal prior (restricted to the
//! positive real line) on the likelihood scale `sigma`. The scale is handled
//! in the unconstrained parameterization `log_sigma`, with the Jacobian term
//! `+log_sigma` included in the log prior so that gradient-based samplers can
//! work on all of R^(d+1).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::Matrix;
use crate::net::{Architecture, ParamLayout};
use crate::sampler::LogDensity;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// One point of the augmented parameter space: network parameters plus the
/// unconstrained likelihood scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub theta: Vec<f64>,
    pub log_sigma: f64,
}

impl ParamState {
    pub fn new(theta: Vec<f64>, log_sigma: f64) -> Self {
        Self { theta, log_sigma }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.log_sigma.is_finite() && self.theta.iter().all(|v| v.is_finite())
    }

    /// Draws from the prior: `theta ~ N(0, I)`, `sigma ~ |N(0, 1)|`.
    ///
    /// The scale draw is floored at 1e-3 so that a freakishly tiny sigma
    /// cannot produce a degenerate (-inf log posterior) chain start.
    pub fn prior_draw<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let d = crate::net::param_dim(arch);
        let theta = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma = rng.sample::<f64, _>(StandardNormal).abs().max(1e-3);
        Self {
            theta,
            log_sigma: sigma.ln(),
        }
    }

    /// Flat layout: theta entries in layout order, then `log_sigma`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.push(self.log_sigma);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let (&log_sigma, theta) = flat.split_last().ok_or_else(|| {
            Error::DimensionMismatch("flat parameter state must have length >= 1".into())
        })?;
        Ok(Self {
            theta: theta.to_vec(),
            log_sigma,
        })
    }
}

/// A supervised regression dataset with `N x n` features and `N x m` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub x: Matrix,
    pub y: Matrix,
}

impl RegressionData {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "feature rows ({}) and target rows ({}) differ",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.data().iter().chain(y.data()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset contains non-finite entries".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_arch(&self, arch: &Architecture) -> Result<()> {
        if self.x.ncols() != arch.input_dim() || self.y.ncols() != arch.output_dim() {
            return Err(Error::DimensionMismatch(format!(
                "data has {} features / {} targets, architecture expects {} / {}",
                self.x.ncols(),
                self.y.ncols(),
                arch.input_dim(),
                arch.output_dim()
            )));
        }
        Ok(())
    }

    pub fn concat(&self, other: &RegressionData) -> Result<RegressionData> {
        RegressionData::new(self.x.vstack(&other.x)?, self.y.vstack(&other.y)?)
    }
}

/// Log prior: `log N(theta | 0, I) + log[2 N(sigma; 0, 1)] + log_sigma`.
pub fn log_prior(state: &ParamState) -> f64 {
    let d = state.theta.len() as f64;
    let sq_norm: f64 = state.theta.iter().map(|v| v * v).sum();
    let sigma = state.sigma();
    let theta_term = -0.5 * d * LN_2PI - 0.5 * sq_norm;
    let sigma_term = 2f64.ln() - 0.5 * LN_2PI - 0.5 * sigma * sigma;
    theta_term + sigma_term + state.log_sigma
}

/// Per-layer activations for one forward pass, reused across data points.
#[derive(Debug, Clone, Default)]
struct BackpropBuffers {
    /// `activations[l-1]` holds `z_l` (with `z_1 = x`).
    activations: Vec<Vec<f64>>,
    /// `deltas[l-2]` holds the back-propagated error at layer `l`'s
    /// pre-activations.
    deltas: Vec<Vec<f64>>,
}

impl BackpropBuffers {
    fn for_arch(arch: &Architecture) -> Self {
        Self {
            activations: arch.layer_widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: arch.layer_widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

/// Shared likelihood engine. Returns `(log_likelihood, sse)` and, when
/// `grad_theta` is given, accumulates `d log_likelihood / d theta` into it.
fn likelihood_core(
    arch: &Architecture,
    layout: &ParamLayout,
    theta: &[f64],
    sigma: f64,
    data: &RegressionData,
    bufs: &mut BackpropBuffers,
    mut grad_theta: Option<&mut [f64]>,
) -> Result<(f64, f64)> {
    data.check_arch(arch)?;
    let k = arch.num_layers();
    let m = arch.output_dim();
    let n = data.len();
    let sigma_sq = sigma * sigma;
    let inv_sigma_sq = 1.0 / sigma_sq;

    let mut sse = 0.0;
    for point in 0..n {
        // Forward pass with stored activations.
        bufs.activations[0].copy_from_slice(data.x.row(point));
        for l in 2..=k {
            let width = arch.width(l);
            let prev_width = arch.width(l - 1);
            let weights = &theta[layout.weight_block(l)..][..width * prev_width];
            let biases = &theta[layout.bias_block(l)..][..width];
            let (prev, cur) = bufs.activations.split_at_mut(l - 1);
            let prev = &prev[l - 2];
            let cur = &mut cur[0];
            for (i, (out, row)) in cur.iter_mut().zip(weights.chunks_exact(prev_width)).enumerate()
            {
                let mut pre = biases[i];
                for (w, z) in row.iter().zip(prev.iter()) {
                    pre += w * z;
                }
                *out = if l < k {
                    arch.hidden_activation.apply(pre)
                } else {
                    pre
                };
            }
        }

        let y = data.y.row(point);
        let y_hat = &bufs.activations[k - 1];
        let mut point_sse = 0.0;
        for (o, &t) in y_hat.iter().zip(y) {
            let r = o - t;
            point_sse += r * r;
        }
        sse += point_sse;

        if let Some(grad) = grad_theta.as_deref_mut() {
            // delta at the (linear) output layer: d loglik / d y_hat.
            for ((d, &o), &t) in bufs.deltas[k - 2].iter_mut().zip(&bufs.activations[k - 1]).zip(y)
            {
                *d = -(o - t) * inv_sigma_sq;
            }
            // Weights precede biases in the flat layout.
            let bias_region = layout.bias_block(2);
            let (grad_weights, grad_biases) = grad.split_at_mut(bias_region);
            for l in (2..=k).rev() {
                let width = arch.width(l);
                let prev_width = arch.width(l - 1);
                let w0 = layout.weight_block(l);
                let weights = &theta[w0..][..width * prev_width];
                let activations = &bufs.activations[l - 2];
                {
                    let delta_cur = &bufs.deltas[l - 2];
                    let grad_w = &mut grad_weights[w0..][..width * prev_width];
                    for (row, &delta) in grad_w.chunks_exact_mut(prev_width).zip(delta_cur) {
                        for (g, &z) in row.iter_mut().zip(activations.iter()) {
                            *g += delta * z;
                        }
                    }
                    let b0 = layout.bias_block(l) - bias_region;
                    let grad_b = &mut grad_biases[b0..][..width];
                    for (g, &delta) in grad_b.iter_mut().zip(delta_cur) {
                        *g += delta;
                    }
                }
                if l > 2 {
                    let (lower, upper) = bufs.deltas.split_at_mut(l - 2);
                    let delta_prev = &mut lower[l - 3];
                    let delta_cur = &upper[0];
                    for (j, (dp, &z)) in delta_prev.iter_mut().zip(activations.iter()).enumerate()
                    {
                        let mut acc = 0.0;
                        for (row, &d) in weights.chunks_exact(prev_width).zip(delta_cur) {
                            acc += row[j] * d;
                        }
                        *dp = acc * arch.hidden_activation.grad_from_output(z);
                    }
                }
            }
        }
    }

    let loglik =
        -0.5 * (n * m) as f64 * LN_2PI - (n * m) as f64 * sigma.ln() - 0.5 * sse * inv_sigma_sq;
    Ok((loglik, sse))
}

/// Log likelihood `sum_i log N(y_i | f_theta(x_i), sigma^2 I)`.
pub fn log_likelihood(state: &ParamState, data: &RegressionData, arch: &Architecture) -> Result<f64> {
    let layout = arch.layout();
    let mut bufs = BackpropBuffers::for_arch(arch);
    let (loglik, _) = likelihood_core(arch, &layout, &state.theta, state.sigma(), data, &mut bufs, None)?;
    Ok(loglik)
}

/// Unnormalized log posterior (log prior + log likelihood).
pub fn log_posterior(state: &ParamState, data: &RegressionData, arch: &Architecture) -> Result<f64> {
    Ok(log_prior(state) + log_likelihood(state, data, arch)?)
}

/// Exact reverse-mode gradient of the log posterior with respect to
/// `(theta, log_sigma)`. Layout: `d` theta entries followed by the
/// `log_sigma` component.
pub fn grad_log_posterior(
    state: &ParamState,
    data: &RegressionData,
    arch: &Architecture,
) -> Result<Vec<f64>> {
    let layout = arch.layout();
    let d = layout.dim();
    if state.theta.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "state has {} parameters, architecture needs {d}",
            state.theta.len()
        )));
    }
    let mut bufs = BackpropBuffers::for_arch(arch);
    let mut grad = vec![0.0; d + 1];
    let sigma = state.sigma();
    let (_, sse) = likelihood_core(
        arch,
        &layout,
        &state.theta,
        sigma,
        data,
        &mut bufs,
        Some(&mut grad[..d]),
    )?;
    // Prior score on theta.
    for (g, &t) in grad[..d].iter_mut().zip(&state.theta) {
        *g -= t;
    }
    // Likelihood and prior scores on log_sigma.
    let nm = (data.len() * arch.output_dim()) as f64;
    grad[d] = -nm + sse / (sigma * sigma) - sigma * sigma + 1.0;
    Ok(grad)
}

/// The augmented posterior density over `(theta, log_sigma)`, usable as an
/// MCMC target. Cloning shares the borrowed data and re-allocates scratch.
#[derive(Debug, Clone)]
pub struct PosteriorDensity<'a> {
    arch: &'a Architecture,
    layout: ParamLayout,
    data: &'a RegressionData,
    bufs: BackpropBuffers,
}

impl<'a> PosteriorDensity<'a> {
    pub fn new(arch: &'a Architecture, data: &'a RegressionData) -> Result<Self> {
        data.check_arch(arch)?;
        Ok(Self {
            arch,
            layout: arch.layout(),
            data,
            bufs: BackpropBuffers::for_arch(arch),
        })
    }

    pub fn param_dim(&self) -> usize {
        self.layout.dim()
    }
}

impl LogDensity for PosteriorDensity<'_> {
    fn dim(&self) -> usize {
        self.layout.dim() + 1
    }

    fn log_density_grad(&mut self, position: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.layout.dim();
        debug_assert_eq!(position.len(), d + 1);
        let theta = &position[..d];
        let log_sigma = position[d];
        let sigma = log_sigma.exp();
        if !sigma.is_finite() || sigma <= 0.0 {
            grad.fill(0.0);
            return f64::NEG_INFINITY;
        }
        grad.fill(0.0);
        let (loglik, sse) = match likelihood_core(
            self.arch,
            &self.layout,
            theta,
            sigma,
            self.data,
            &mut self.bufs,
            Some(&mut grad[..d]),
        ) {
            Ok(v) => v,
            Err(_) => {
                grad.fill(0.0);
                return f64::NEG_INFINITY;
            }
        };
        let mut sq_norm = 0.0;
        for (g, &t) in grad[..d].iter_mut().zip(theta) {
            *g -= t;
            sq_norm += t * t;
        }
        let nm = (self.data.len() * self.arch.output_dim()) as f64;
        grad[d] = -nm + sse / (sigma * sigma) - sigma * sigma + 1.0;

        let log_prior = -0.5 * (d as f64) * LN_2PI - 0.5 * sq_norm + 2f64.ln()
            - 0.5 * LN_2PI
            - 0.5 * sigma * sigma
            + log_sigma;
        loglik + log_prior
    }
}

/// MAP optimizer settings: full-batch RMSProp with a constant learning rate.
#[derive(Debug, Clone)]
pub struct MapConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-4,
        }
    }
}

const RMSPROP_DECAY: f64 = 0.9;
const RMSPROP_EPS: f64 = 1e-8;
/// Best-so-far loss is recorded every this many steps.
const MAP_TRACE_STRIDE: usize = 50;

/// Result of a MAP run: the best-loss iterate and bookkeeping.
#[derive(Debug, Clone)]
pub struct MapRun {
    pub state: ParamState,
    pub loss: f64,
    /// Running best loss, recorded every [`MAP_TRACE_STRIDE`] steps.
    pub loss_trace: Vec<f64>,
}

/// MAP loss `sse / (2 sigma^2) + N m log(sigma) + theta' theta / 2`.
fn map_loss(sse: f64, sigma: f64, nm: f64, sq_norm: f64) -> f64 {
    0.5 * sse / (sigma * sigma) + nm * sigma.ln() + 0.5 * sq_norm
}

/// Minimizes the negative log posterior with full-batch RMSProp and returns
/// the best-loss iterate.
pub fn map_estimate(
    data: &RegressionData,
    arch: &Architecture,
    init: &ParamState,
    config: &MapConfig,
) -> Result<MapRun> {
    if config.steps == 0 {
        return Err(Error::InvalidInput("MAP requires at least one step".into()));
    }
    if !init.is_finite() {
        return Err(Error::NonFinite("MAP initial state is not finite".into()));
    }
    data.check_arch(arch)?;
    let layout = arch.layout();
    let d = layout.dim();
    if init.theta.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} parameters, architecture needs {d}",
            init.theta.len()
        )));
    }
    let nm = (data.len() * arch.output_dim()) as f64;
    let mut bufs = BackpropBuffers::for_arch(arch);

    let mut params = init.to_flat();
    let mut grad = vec![0.0; d + 1];
    let mut accum = vec![0.0; d + 1];
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut trace = Vec::new();

    for step in 0..config.steps {
        let sigma = params[d].exp();
        grad.fill(0.0);
        let (_, sse) = likelihood_core(
            arch,
            &layout,
            &params[..d],
            sigma,
            data,
            &mut bufs,
            Some(&mut grad[..d]),
        )?;
        let mut sq_norm = 0.0;
        // Loss gradient: negative likelihood score plus the ridge term.
        for (g, &t) in grad[..d].iter_mut().zip(&params[..d]) {
            *g = -*g + t;
            sq_norm += t * t;
        }
        grad[d] = nm - sse / (sigma * sigma);

        let loss = map_loss(sse, sigma, nm, sq_norm);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "MAP loss became non-finite at step {step} (sigma = {sigma:.3e})"
            )));
        }
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(&params);
        }
        if step % MAP_TRACE_STRIDE == 0 {
            trace.push(best_loss);
        }

        for i in 0..=d {
            accum[i] = RMSPROP_DECAY * accum[i] + (1.0 - RMSPROP_DECAY) * grad[i] * grad[i];
            params[i] -= config.learning_rate * grad[i] / (accum[i].sqrt() + RMSPROP_EPS);
        }
    }
    trace.push(best_loss);

    Ok(MapRun {
        state: ParamState::from_flat(&best)?,
        loss: best_loss,
        loss_trace: trace,
    })
}

/// Deep ensemble: independent MAP runs from per-seed prior initializations,
/// no bootstrapping.
pub fn deep_ensemble(
    data: &RegressionData,
    arch: &Architecture,
    seeds: &[u64],
    config: &MapConfig,
) -> Result<Vec<MapRun>> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("ensemble needs at least one member".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = ParamState::prior_draw(arch, &mut rng);
            map_estimate(data, arch, &init, config)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{param_dim, Activation};
    use crate::symmetry::{apply_transform, random_transform};

    fn tanh_arch(widths: &[usize]) -> Architecture {
        Architecture::new(widths.to_vec(), Activation::Tanh).unwrap()
    }

    fn random_state(arch: &Architecture, seed: u64) -> ParamState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..param_dim(arch))
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        ParamState::new(theta, 0.3 * rng.sample::<f64, _>(StandardNormal))
    }

    fn random_data(arch: &Architecture, n: usize, seed: u64) -> RegressionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_rows(
            &(0..n)
                .map(|_| {
                    (0..arch.input_dim())
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let y = Matrix::from_rows(
            &(0..n)
                .map(|_| {
                    (0..arch.output_dim())
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        RegressionData::new(x, y).unwrap()
    }

    #[test]
    fn log_prior_hand_computed() {
        let state = ParamState::new(vec![0.0], 0.0);
        let expected = (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln()
            + (2.0 / (2.0 * std::f64::consts::PI).sqrt() * (-0.5f64).exp()).ln();
        assert!((log_prior(&state) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_prior_invariant_under_transforms() {
        let arch = tanh_arch(&[2, 4, 4, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let state = random_state(&arch, rng.random());
            let e = random_transform(&arch, &mut rng).unwrap();
            let transformed = ParamState::new(
                apply_transform(&arch, &state.theta, &e).unwrap(),
                state.log_sigma,
            );
            assert!((log_prior(&state) - log_prior(&transformed)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prior_decreases_when_scaling_up() {
        let state = ParamState::new(vec![0.4, -1.1, 0.2], -0.1);
        let scaled = ParamState::new(state.theta.iter().map(|v| 2.0 * v).collect(), -0.1);
        assert!(log_prior(&scaled) < log_prior(&state));
    }

    #[test]
    fn perfect_fit_likelihood() {
        // [1,1] net: y = w x + b fits y = 2x + 1 exactly.
        let arch = tanh_arch(&[1, 1]);
        let state = ParamState::new(vec![2.0, 1.0], 0.0);
        let n = 13;
        let x = Matrix::from_rows(
            &(0..n).map(|i| vec![i as f64 * 0.1]).collect::<Vec<_>>(),
        )
        .unwrap();
        let y = Matrix::from_rows(
            &(0..n).map(|i| vec![2.0 * (i as f64 * 0.1) + 1.0]).collect::<Vec<_>>(),
        )
        .unwrap();
        let data = RegressionData::new(x, y).unwrap();
        let expected = n as f64 * (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((log_likelihood(&state, &data, &arch).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn single_point_residual_formula() {
        let arch = tanh_arch(&[1, 1]);
        // w = 0, b = 0 so y_hat = 0 and the residual is -y.
        let sigma = 0.7f64;
        let state = ParamState::new(vec![0.0, 0.0], sigma.ln());
        let r = 1.9;
        let data = RegressionData::new(
            Matrix::from_rows(&[vec![0.5]]).unwrap(),
            Matrix::from_rows(&[vec![r]]).unwrap(),
        )
        .unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
            - r * r / (2.0 * sigma * sigma);
        assert!((log_likelihood(&state, &data, &arch).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn likelihood_invariant_under_transforms() {
        let arch = tanh_arch(&[1, 3, 1]);
        let data = random_data(&arch, 16, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let state = random_state(&arch, rng.random());
            let e = random_transform(&arch, &mut rng).unwrap();
            let transformed = ParamState::new(
                apply_transform(&arch, &state.theta, &e).unwrap(),
                state.log_sigma,
            );
            let a = log_likelihood(&state, &data, &arch).unwrap();
            let b = log_likelihood(&transformed, &data, &arch).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn likelihood_is_additive_over_concatenation() {
        let arch = tanh_arch(&[2, 3, 2]);
        let state = random_state(&arch, 41);
        let d1 = random_data(&arch, 7, 42);
        let d2 = random_data(&arch, 5, 43);
        let joint = d1.concat(&d2).unwrap();
        let sum = log_likelihood(&state, &d1, &arch).unwrap()
            + log_likelihood(&state, &d2, &arch).unwrap();
        let whole = log_likelihood(&state, &joint, &arch).unwrap();
        assert!((sum - whole).abs() < 1e-12);
    }

    #[test]
    fn posterior_equals_prior_without_data() {
        let arch = tanh_arch(&[1, 2, 1]);
        let state = random_state(&arch, 51);
        let empty = RegressionData::new(Matrix::zeros(0, 1), Matrix::zeros(0, 1)).unwrap();
        let lp = log_posterior(&state, &empty, &arch).unwrap();
        assert!((lp - log_prior(&state)).abs() < 1e-14);
    }

    #[test]
    fn posterior_invariant_under_transforms() {
        let arch = tanh_arch(&[2, 4, 4, 1]);
        let data = random_data(&arch, 32, 61);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..100 {
            let state = random_state(&arch, rng.random());
            let e = random_transform(&arch, &mut rng).unwrap();
            let transformed = ParamState::new(
                apply_transform(&arch, &state.theta, &e).unwrap(),
                state.log_sigma,
            );
            let a = log_posterior(&state, &data, &arch).unwrap();
            let b = log_posterior(&transformed, &data, &arch).unwrap();
            assert!((a - b).abs() < 1e-8, "posterior invariance violated: {a} vs {b}");
        }
    }

    /// Central-difference oracle for the posterior gradient.
    fn finite_difference_grad(
        state: &ParamState,
        data: &RegressionData,
        arch: &Architecture,
        h: f64,
    ) -> Vec<f64> {
        let flat = state.to_flat();
        (0..flat.len())
            .map(|i| {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[i] += h;
                minus[i] -= h;
                let lp_plus =
                    log_posterior(&ParamState::from_flat(&plus).unwrap(), data, arch).unwrap();
                let lp_minus =
                    log_posterior(&ParamState::from_flat(&minus).unwrap(), data, arch).unwrap();
                (lp_plus - lp_minus) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (arch, seed) in [(tanh_arch(&[1, 3, 1]), 71u64), (tanh_arch(&[2, 4, 4, 1]), 72)] {
            let data = random_data(&arch, 8, seed);
            for case in 0..10 {
                let state = random_state(&arch, seed * 100 + case);
                let analytic = grad_log_posterior(&state, &data, &arch).unwrap();
                let numeric = finite_difference_grad(&state, &data, &arch, 1e-5);
                let err = max_rel_err(&analytic, &numeric);
                assert!(err < 1e-5, "gradient mismatch {err} for seed {seed} case {case}");
            }
        }
    }

    #[test]
    fn zero_data_gradient_is_prior_score() {
        let arch = tanh_arch(&[1, 3, 1]);
        let state = random_state(&arch, 81);
        let empty = RegressionData::new(Matrix::zeros(0, 1), Matrix::zeros(0, 1)).unwrap();
        let grad = grad_log_posterior(&state, &empty, &arch).unwrap();
        for (g, t) in grad[..state.theta.len()].iter().zip(&state.theta) {
            assert!((g + t).abs() < 1e-14);
        }
        let sigma = state.sigma();
        assert!((grad[state.theta.len()] - (1.0 - sigma * sigma)).abs() < 1e-12);
    }

    /// Joint ridge + scale fixed point, iterated to convergence: the closed
    /// form the MAP optimizer must approach on a linear model.
    fn ridge_scale_fixed_point(data: &RegressionData) -> (f64, f64, f64) {
        let n = data.len() as f64;
        let (mut sxx, mut sx, mut sxy, mut sy) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..data.len() {
            let x = data.x.row(i)[0];
            let y = data.y.row(i)[0];
            sxx += x * x;
            sx += x;
            sxy += x * y;
            sy += y;
        }
        let (mut w, mut b, mut sigma_sq) = (0.0, 0.0, 1.0);
        for _ in 0..200 {
            // Ridge solve with lambda = sigma^2.
            let a11 = sxx + sigma_sq;
            let a12 = sx;
            let a22 = n + sigma_sq;
            let det = a11 * a22 - a12 * a12;
            w = (sxy * a22 - sy * a12) / det;
            b = (sy * a11 - sxy * a12) / det;
            let mut sse = 0.0;
            for i in 0..data.len() {
                let r = w * data.x.row(i)[0] + b - data.y.row(i)[0];
                sse += r * r;
            }
            sigma_sq = sse / n;
        }
        (w, b, sigma_sq.sqrt())
    }

    #[test]
    fn map_recovers_ridge_solution_on_linear_data() {
        let arch = tanh_arch(&[1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let n = 64;
        let rows_x: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let rows_y: Vec<Vec<f64>> = rows_x
            .iter()
            .map(|x| vec![1.7 * x[0] - 0.4 + 0.1 * rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let data = RegressionData::new(
            Matrix::from_rows(&rows_x).unwrap(),
            Matrix::from_rows(&rows_y).unwrap(),
        )
        .unwrap();

        let init = ParamState::new(vec![0.0, 0.0], 0.0);
        let coarse = map_estimate(&data, &arch, &init, &MapConfig { steps: 60_000, learning_rate: 1e-3 })
            .unwrap();
        let fine = map_estimate(
            &data,
            &arch,
            &coarse.state,
            &MapConfig { steps: 20_000, learning_rate: 1e-5 },
        )
        .unwrap();

        let (w_star, b_star, sigma_star) = ridge_scale_fixed_point(&data);
        let w = fine.state.theta[0];
        let b = fine.state.theta[1];
        assert!(
            (w - w_star).abs() / w_star.abs() < 0.05,
            "weight {w} vs ridge {w_star}"
        );
        assert!((b - b_star).abs() < 0.05);
        assert!((fine.state.sigma() - sigma_star).abs() / sigma_star < 0.2);
    }

    #[test]
    fn map_best_loss_trace_is_non_increasing() {
        let arch = tanh_arch(&[1, 3, 1]);
        let data = random_data(&arch, 24, 101);
        let init = random_state(&arch, 102);
        let run = map_estimate(&data, &arch, &init, &MapConfig { steps: 2_000, learning_rate: 1e-3 })
            .unwrap();
        assert!(run.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(run.loss, *run.loss_trace.last().unwrap());
    }

    #[test]
    fn map_gradient_small_after_polish() {
        let arch = tanh_arch(&[1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let rows_x: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 - 1.5]).collect();
        let rows_y: Vec<Vec<f64>> = rows_x
            .iter()
            .map(|x| vec![0.8 * x[0] + 0.05 * rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let data = RegressionData::new(
            Matrix::from_rows(&rows_x).unwrap(),
            Matrix::from_rows(&rows_y).unwrap(),
        )
        .unwrap();
        let init = ParamState::new(vec![0.0, 0.0], 0.0);
        let coarse = map_estimate(&data, &arch, &init, &MapConfig { steps: 50_000, learning_rate: 1e-3 })
            .unwrap();
        let fine = map_estimate(
            &data,
            &arch,
            &coarse.state,
            &MapConfig { steps: 200_000, learning_rate: 1e-6 },
        )
        .unwrap();
        // At the minimizer of the MAP loss, the posterior gradient equals the
        // (constant-offset) loss gradient, so it must be near zero.
        let grad = grad_log_posterior(&fine.state, &data, &arch).unwrap();
        // Remove the sigma-prior terms absent from the MAP loss.
        let d = fine.state.theta.len();
        let sigma = fine.state.sigma();
        let loss_grad_sigma = grad[d] + sigma * sigma - 1.0;
        let norm: f64 = grad[..d]
            .iter()
            .map(|g| g * g)
            .chain(std::iter::once(loss_grad_sigma * loss_grad_sigma))
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-4, "gradient norm {norm} at MAP point");
    }

    #[test]
    fn ensemble_single_member_matches_map() {
        let arch = tanh_arch(&[1, 2, 1]);
        let data = random_data(&arch, 16, 121);
        let config = MapConfig { steps: 500, learning_rate: 1e-4 };
        let ensemble = deep_ensemble(&data, &arch, &[7], &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let init = ParamState::prior_draw(&arch, &mut rng);
        let direct = map_estimate(&data, &arch, &init, &config).unwrap();
        assert_eq!(ensemble.len(), 1);
        assert_eq!(ensemble[0].state, direct.state);
    }

    #[test]
    fn equioutput_inits_reach_equal_losses() {
        let arch = tanh_arch(&[1, 3, 1]);
        let data = random_data(&arch, 16, 131);
        let mut rng = ChaCha8Rng::seed_from_u64(132);
        let init = random_state(&arch, 133);
        let config = MapConfig { steps: 3_000, learning_rate: 1e-3 };
        let base = map_estimate(&data, &arch, &init, &config).unwrap();
        for _ in 0..3 {
            let e = random_transform(&arch, &mut rng).unwrap();
            let init_t = ParamState::new(
                apply_transform(&arch, &init.theta, &e).unwrap(),
                init.log_sigma,
            );
            let run = map_estimate(&data, &arch, &init_t, &config).unwrap();
            assert!(
                (run.loss - base.loss).abs() < 1e-6,
                "losses diverged: {} vs {}",
                run.loss,
                base.loss
            );
        }
    }
}
