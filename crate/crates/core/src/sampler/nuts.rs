//! No-U-Turn transitions: leapfrog integration over a diagonal metric and
//! recursive trajectory doubling with slice sampling over the leaves
//! (Hoffman & Gelman 2014, Algorithm 3).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A differentiable (unnormalized) log density.
///
/// Implementations may keep internal scratch space, hence `&mut self`; each
/// chain owns its own instance.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Returns the log density at `position` and writes the gradient into
    /// `grad`. A return value of `-inf` marks an invalid region.
    fn log_density_grad(&mut self, position: &[f64], grad: &mut [f64]) -> f64;
}

/// Adapter exposing a closure as a [`LogDensity`], mainly for test targets.
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&mut self, position: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(position, grad)
    }
}

/// Energy error beyond which a trajectory is declared divergent.
pub(crate) const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// A phase-space point with cached gradient and log density.
#[derive(Debug, Clone)]
pub(crate) struct State {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub grad: Vec<f64>,
    pub log_density: f64,
}

/// Statistics of one transition, fed to warmup adaptation and diagnostics.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TransitionStats {
    pub accept_stat: f64,
    pub divergent: bool,
    pub depth: usize,
}

pub(crate) struct NutsKernel {
    /// Per-coordinate inverse mass (estimated posterior variance).
    pub inv_mass: Vec<f64>,
    pub max_depth: usize,
}

struct Tree {
    minus: State,
    plus: State,
    proposal: Vec<f64>,
    proposal_log_density: f64,
    proposal_grad: Vec<f64>,
    n_valid: f64,
    cont: bool,
    divergent: bool,
    accept_sum: f64,
    accept_count: u64,
}

impl NutsKernel {
    pub fn new(dim: usize, max_depth: usize) -> Self {
        Self {
            inv_mass: vec![1.0; dim],
            max_depth,
        }
    }

    fn kinetic(&self, momentum: &[f64]) -> f64 {
        0.5 * momentum
            .iter()
            .zip(&self.inv_mass)
            .map(|(&p, &v)| v * p * p)
            .sum::<f64>()
    }

    fn draw_momentum(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        use rand_distr::StandardNormal;
        self.inv_mass
            .iter()
            .map(|&v| rng.sample::<f64, _>(StandardNormal) / v.sqrt())
            .collect()
    }

    /// One leapfrog step of size `eps * direction`.
    fn leapfrog<T: LogDensity>(
        &self,
        target: &mut T,
        state: &State,
        eps: f64,
        direction: f64,
    ) -> State {
        let h = eps * direction;
        let dim = state.position.len();
        let mut momentum = state.momentum.clone();
        for i in 0..dim {
            momentum[i] += 0.5 * h * state.grad[i];
        }
        let mut position = state.position.clone();
        for i in 0..dim {
            position[i] += h * self.inv_mass[i] * momentum[i];
        }
        let mut grad = vec![0.0; dim];
        let log_density = target.log_density_grad(&position, &mut grad);
        for i in 0..dim {
            momentum[i] += 0.5 * h * grad[i];
        }
        State {
            position,
            momentum,
            grad,
            log_density,
        }
    }

    fn energy(&self, state: &State) -> f64 {
        if state.log_density.is_finite() {
            -state.log_density + self.kinetic(&state.momentum)
        } else {
            f64::INFINITY
        }
    }

    /// Crude step-size search: starting from `eps0`, doubles or halves until
    /// the one-step acceptance ratio crosses 1/2. Run at chain start and
    /// after each mass-matrix update so dual averaging begins near scale.
    pub fn find_reasonable_step_size<T: LogDensity>(
        &self,
        target: &mut T,
        position: &[f64],
        grad: &[f64],
        log_density: f64,
        eps0: f64,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let momentum = self.draw_momentum(rng);
        let start = State {
            position: position.to_vec(),
            momentum,
            grad: grad.to_vec(),
            log_density,
        };
        let h0 = self.energy(&start);
        let ratio = |kernel: &Self, target: &mut T, eps: f64| -> f64 {
            let next = kernel.leapfrog(target, &start, eps, 1.0);
            let r = (h0 - kernel.energy(&next)).exp();
            if r.is_nan() {
                0.0
            } else {
                r
            }
        };
        let mut eps = eps0;
        let direction = if ratio(self, target, eps) > 0.5 { 1.0 } else { -1.0 };
        for _ in 0..60 {
            eps *= 2f64.powf(direction);
            let r = ratio(self, target, eps);
            if (direction > 0.0 && r <= 0.5) || (direction < 0.0 && r >= 0.5) {
                break;
            }
            if !(1e-12..=1e12).contains(&eps) {
                break;
            }
        }
        // One step back on the doubling side so the search ends accepting.
        if direction > 0.0 {
            eps *= 0.5;
        }
        eps.clamp(1e-12, 1e12)
    }

    /// U-turn criterion across a trajectory segment: stop when the segment
    /// endpoints start moving toward each other (momenta are mass-weighted).
    fn no_u_turn(&self, minus: &State, plus: &State) -> bool {
        let mut dot_minus = 0.0;
        let mut dot_plus = 0.0;
        for i in 0..minus.position.len() {
            let span = plus.position[i] - minus.position[i];
            dot_minus += span * self.inv_mass[i] * minus.momentum[i];
            dot_plus += span * self.inv_mass[i] * plus.momentum[i];
        }
        dot_minus >= 0.0 && dot_plus >= 0.0
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree<T: LogDensity>(
        &self,
        target: &mut T,
        from: &State,
        log_slice: f64,
        direction: f64,
        depth: usize,
        eps: f64,
        h0: f64,
        rng: &mut ChaCha8Rng,
    ) -> Tree {
        if depth == 0 {
            let state = self.leapfrog(target, from, eps, direction);
            let h = if state.log_density.is_finite() {
                -state.log_density + self.kinetic(&state.momentum)
            } else {
                f64::INFINITY
            };
            let n_valid = if log_slice <= -h { 1.0 } else { 0.0 };
            let divergent = !(log_slice < DIVERGENCE_THRESHOLD - h);
            let accept = (h0 - h).exp().min(1.0);
            return Tree {
                proposal: state.position.clone(),
                proposal_log_density: state.log_density,
                proposal_grad: state.grad.clone(),
                minus: state.clone(),
                plus: state,
                n_valid,
                cont: !divergent,
                divergent,
                accept_sum: if accept.is_nan() { 0.0 } else { accept },
                accept_count: 1,
            };
        }

        let mut inner = self.build_tree(target, from, log_slice, direction, depth - 1, eps, h0, rng);
        if !inner.cont {
            return inner;
        }
        let grow_from = if direction > 0.0 {
            inner.plus.clone()
        } else {
            inner.minus.clone()
        };
        let outer = self.build_tree(target, &grow_from, log_slice, direction, depth - 1, eps, h0, rng);

        if direction > 0.0 {
            inner.plus = outer.plus;
        } else {
            inner.minus = outer.minus;
        }
        let total = inner.n_valid + outer.n_valid;
        if outer.n_valid > 0.0 && rng.random::<f64>() < outer.n_valid / total {
            inner.proposal = outer.proposal;
            inner.proposal_log_density = outer.proposal_log_density;
            inner.proposal_grad = outer.proposal_grad;
        }
        inner.n_valid = total;
        inner.accept_sum += outer.accept_sum;
        inner.accept_count += outer.accept_count;
        inner.divergent |= outer.divergent;
        inner.cont = outer.cont && self.no_u_turn(&inner.minus, &inner.plus);
        inner
    }

    /// Runs one NUTS transition from `position` (with its cached gradient and
    /// log density), writing the new point back in place.
    pub fn transition<T: LogDensity>(
        &self,
        target: &mut T,
        position: &mut Vec<f64>,
        grad: &mut Vec<f64>,
        log_density: &mut f64,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> TransitionStats {
        let momentum = self.draw_momentum(rng);
        let h0 = -*log_density + self.kinetic(&momentum);
        // u ~ Uniform(0, exp(-H0)) via log u = -H0 - Exp(1).
        let log_slice = -h0 - rng.sample::<f64, _>(rand_distr::Exp1);

        let start = State {
            position: position.clone(),
            momentum,
            grad: grad.clone(),
            log_density: *log_density,
        };
        let mut minus = start.clone();
        let mut plus = start.clone();
        let mut proposal = start.position.clone();
        let mut proposal_log_density = start.log_density;
        let mut proposal_grad = start.grad.clone();

        let mut n_valid = 1.0f64;
        let mut depth = 0usize;
        let mut divergent = false;
        let mut accept_sum = 0.0;
        let mut accept_count = 0u64;

        while depth < self.max_depth {
            let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let tree = if direction > 0.0 {
                self.build_tree(target, &plus, log_slice, direction, depth, eps, h0, rng)
            } else {
                self.build_tree(target, &minus, log_slice, direction, depth, eps, h0, rng)
            };
            if direction > 0.0 {
                plus = tree.plus;
            } else {
                minus = tree.minus;
            }
            accept_sum += tree.accept_sum;
            accept_count += tree.accept_count;
            divergent |= tree.divergent;

            if tree.cont && tree.n_valid > 0.0 && rng.random::<f64>() < tree.n_valid / n_valid {
                proposal = tree.proposal;
                proposal_log_density = tree.proposal_log_density;
                proposal_grad = tree.proposal_grad;
            }
            n_valid += tree.n_valid;
            depth += 1;
            if !(tree.cont && self.no_u_turn(&minus, &plus)) {
                break;
            }
        }

        *position = proposal;
        *grad = proposal_grad;
        *log_density = proposal_log_density;
        TransitionStats {
            accept_stat: if accept_count > 0 {
                accept_sum / accept_count as f64
            } else {
                0.0
            },
            divergent,
            depth,
        }
    }
}
