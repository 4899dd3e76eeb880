//! Post-hoc symmetry removal from posterior sample sets.
//!
//! Works layer by layer in reverse order. For each hidden layer the tanh
//! sign-flip symmetry is removed first: an unlabeled max-margin hyperplane is
//! fitted to the pooled neuron parameter vectors and every vector on its
//! negative side is sign-flipped (an exact equioutput write-back). The
//! permutation symmetry is then removed by iterating a greedy constrained
//! k-NN relabeling of each sample's neurons against the pooled, labeled
//! cloud, permuting neuron blocks to their assigned positions.
//!
//! Every write-back is an equioutput transformation, so the function
//! represented by each sample (and hence any predictive quantity) is
//! untouched.

use rand::prelude::*;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::net::{self};
use crate::sampler::SampleSet;
use crate::{Error, Result};

/// Removal hyperparameters.
#[derive(Debug, Clone, Serialize)]
pub struct RemovalConfig {
    /// Hinge cost `C` of the unlabeled SVM loss.
    pub cost: f64,
    /// Number of random hyperplane restarts.
    pub restarts: usize,
    /// k-NN neighbor count (clipped to the number of admissible neighbors).
    pub knn: usize,
    /// Maximum relabeling iterations per layer.
    pub iterations: usize,
    /// Scale of the Gaussian similarity used for k-NN voting.
    pub sim_sigma: f64,
}

impl Default for RemovalConfig {
    fn default() -> Self {
        Self {
            cost: 1.0,
            restarts: 8,
            knn: 1024,
            iterations: 256,
            sim_sigma: 1.0,
        }
    }
}

impl RemovalConfig {
    fn validate(&self) -> Result<()> {
        if !(self.cost > 0.0) || !(self.sim_sigma > 0.0) {
            return Err(Error::InvalidInput(
                "cost and sim_sigma must be positive".into(),
            ));
        }
        if self.restarts == 0 || self.knn == 0 || self.iterations == 0 {
            return Err(Error::InvalidInput(
                "restarts, knn, and iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Zero-centered separating hyperplane in neuron-parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    pub beta: Vec<f64>,
}

impl Hyperplane {
    pub fn margin(&self, phi: &[f64]) -> f64 {
        self.beta.iter().zip(phi).map(|(b, p)| b * p).sum()
    }
}

/// The neuron parameter vectors of one hidden layer across a sample set:
/// per-sample groups of `M_l` vectors plus the pooled view over all samples.
#[derive(Debug, Clone)]
pub struct NeuronCloud {
    pub layer: usize,
    pub width: usize,
    pub samples: usize,
    /// Flattened vectors in sample-major, neuron-minor order:
    /// `vectors[g * width + i]` belongs to sample `g`, neuron `i + 1`.
    pub vectors: Vec<Vec<f64>>,
}

impl NeuronCloud {
    pub fn from_samples(samples: &SampleSet, layer: usize) -> Result<Self> {
        let arch = &samples.arch;
        let width = arch.width(layer);
        let mut vectors = Vec::with_capacity(samples.len() * width);
        for state in &samples.states {
            for neuron in 1..=width {
                let phi = net::extract_neuron_vector(arch, &state.theta, layer, neuron)?;
                vectors.push(phi.to_flat());
            }
        }
        Ok(Self {
            layer,
            width,
            samples: samples.len(),
            vectors,
        })
    }

    pub fn pooled(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn member(&self, sample: usize, neuron_idx: usize) -> &[f64] {
        &self.vectors[sample * self.width + neuron_idx]
    }

    /// `(sample, neuron_idx)` of pooled entry `pool_idx`.
    pub fn origin(&self, pool_idx: usize) -> (usize, usize) {
        (pool_idx / self.width, pool_idx % self.width)
    }
}

/// Unlabeled hinge loss `beta' beta / 2 + C sum max(0, 1 - |beta' phi|)`.
pub fn svm_loss(beta: &[f64], pooled: &[Vec<f64>], cost: f64) -> f64 {
    let mut loss = 0.5 * beta.iter().map(|b| b * b).sum::<f64>();
    for phi in pooled {
        let margin: f64 = beta.iter().zip(phi).map(|(b, p)| b * p).sum();
        loss += cost * (1.0 - margin.abs()).max(0.0);
    }
    loss
}

const SUBGRADIENT_STEPS: usize = 2000;

/// Fits the max-margin hyperplane by subgradient descent with random
/// restarts, returning the restart with the lowest final loss.
pub fn fit_hyperplane<R: Rng>(
    pooled: &[Vec<f64>],
    config: &RemovalConfig,
    rng: &mut R,
) -> Result<Hyperplane> {
    config.validate()?;
    if pooled.is_empty() {
        return Err(Error::InvalidInput(
            "cannot fit a hyperplane to an empty cloud".into(),
        ));
    }
    let dim = pooled[0].len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..config.restarts {
        let mut beta: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut grad = vec![0.0; dim];
        for t in 1..=SUBGRADIENT_STEPS {
            grad.copy_from_slice(&beta);
            for phi in pooled {
                let margin: f64 = beta.iter().zip(phi).map(|(b, p)| b * p).sum();
                if margin.abs() < 1.0 {
                    // Subgradient of -|margin| (0 at the kink).
                    let sign = if margin > 0.0 {
                        1.0
                    } else if margin < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    for (g, p) in grad.iter_mut().zip(phi) {
                        *g -= config.cost * sign * p;
                    }
                }
            }
            let step = 0.1 / (t as f64).sqrt();
            for (b, g) in beta.iter_mut().zip(&grad) {
                *b -= step * g;
            }
        }
        let loss = svm_loss(&beta, pooled, config.cost);
        if !loss.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(l, _)| loss < *l) {
            best = Some((loss, beta));
        }
    }
    let (_, beta) = best.ok_or_else(|| {
        Error::NonFinite("all hyperplane restarts produced a non-finite loss".into())
    })?;
    Ok(Hyperplane { beta })
}

/// Outcome of the sign-flip stage for one layer.
#[derive(Debug, Clone, Serialize)]
pub struct TanhRemovalReport {
    pub layer: usize,
    pub flips: usize,
}

/// Removes tanh sign-flip symmetry from hidden layer `layer`: fits the
/// hyperplane on the pooled cloud and flips every neuron vector with a
/// negative margin, writing the negation back into its sample.
pub fn tanh_removal<R: Rng>(
    samples: &mut SampleSet,
    layer: usize,
    config: &RemovalConfig,
    rng: &mut R,
) -> Result<(TanhRemovalReport, Hyperplane)> {
    if samples.arch.hidden_activation != net::Activation::Tanh {
        return Err(Error::InvalidInput(
            "sign-flip removal applies to tanh networks only".into(),
        ));
    }
    let cloud = NeuronCloud::from_samples(samples, layer)?;
    let mut hyperplane = fit_hyperplane(cloud.pooled(), config, rng)?;
    // The loss is even in beta, so the fitted orientation is arbitrary.
    // Point it at the cloud's majority side: a cloud already on one side
    // then stays untouched, making the removal idempotent.
    let total_margin: f64 = cloud.pooled().iter().map(|phi| hyperplane.margin(phi)).sum();
    if total_margin < 0.0 {
        for b in hyperplane.beta.iter_mut() {
            *b = -*b;
        }
    }
    let arch = samples.arch.clone();
    let mut flips = 0;
    for (pool_idx, phi_flat) in cloud.pooled().iter().enumerate() {
        if hyperplane.margin(phi_flat) < 0.0 {
            let (sample, neuron_idx) = cloud.origin(pool_idx);
            let theta = &mut samples.states[sample].theta;
            let phi = net::extract_neuron_vector(&arch, theta, layer, neuron_idx + 1)?;
            net::write_neuron_vector(&arch, theta, &phi.negated())?;
            flips += 1;
        }
    }
    Ok((TanhRemovalReport { layer, flips }, hyperplane))
}

/// A pooled, labeled snapshot used during one relabeling iteration.
struct LabeledPool<'a> {
    cloud: &'a NeuronCloud,
    /// Current class label of each pooled vector (its neuron position).
    labels: Vec<usize>,
}

/// Gaussian-similarity-weighted k-NN class probabilities for `phi`,
/// excluding vectors that originate from sample `own_sample`.
fn knn_class_probs_pool(
    phi: &[f64],
    pool: &LabeledPool<'_>,
    own_sample: usize,
    k: usize,
    sim_sigma: f64,
) -> Result<Vec<f64>> {
    let width = pool.cloud.width;
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(pool.cloud.vectors.len());
    for (idx, other) in pool.cloud.vectors.iter().enumerate() {
        let (sample, _) = pool.cloud.origin(idx);
        if sample == own_sample {
            continue;
        }
        let dist_sq: f64 = phi
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        candidates.push((dist_sq, idx));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput(
            "no admissible neighbors after excluding the query's own sample".into(),
        ));
    }
    let k = k.min(candidates.len());
    // Deterministic ordering: distance, then pool index.
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut scores = vec![0.0; width];
    for &(dist_sq, idx) in candidates.iter().take(k) {
        let sim = (-dist_sq / (2.0 * sim_sigma * sim_sigma)).exp();
        scores[pool.labels[idx]] += sim;
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        for s in scores.iter_mut() {
            *s /= total;
        }
    } else {
        // All similarities underflowed; fall back to an uninformative vote.
        scores.fill(1.0 / width as f64);
    }
    Ok(scores)
}

/// Standalone k-NN classification over an explicitly labeled cloud.
///
/// `pool` pairs each vector with `(sample_id, label)`; vectors from
/// `own_sample` are excluded from the neighbor search.
pub fn knn_class_probs(
    phi: &[f64],
    pool: &[(usize, usize, Vec<f64>)],
    n_classes: usize,
    own_sample: usize,
    k: usize,
    sim_sigma: f64,
) -> Result<Vec<f64>> {
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for (idx, (sample, _, v)) in pool.iter().enumerate() {
        if *sample == own_sample {
            continue;
        }
        let dist_sq: f64 = phi.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        candidates.push((dist_sq, idx));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput(
            "no admissible neighbors after excluding the query's own sample".into(),
        ));
    }
    let k = k.min(candidates.len());
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut scores = vec![0.0; n_classes];
    for &(dist_sq, idx) in candidates.iter().take(k) {
        let sim = (-dist_sq / (2.0 * sim_sigma * sim_sigma)).exp();
        scores[pool[idx].1] += sim;
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        for s in scores.iter_mut() {
            *s /= total;
        }
    } else {
        scores.fill(1.0 / n_classes as f64);
    }
    Ok(scores)
}

/// Greedy constrained assignment: repeatedly takes the globally largest
/// remaining probability among unassigned vectors and untaken classes.
/// Ties break toward the lowest vector index, then the lowest class index.
/// The result is a bijection `assignment[vector] = class`.
pub fn greedy_assign(probs: &[Vec<f64>]) -> Vec<usize> {
    let n = probs.len();
    let mut assignment = vec![usize::MAX; n];
    let mut vector_taken = vec![false; n];
    let mut class_taken = vec![false; n];
    for _ in 0..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for (v, row) in probs.iter().enumerate() {
            if vector_taken[v] {
                continue;
            }
            for (c, &p) in row.iter().enumerate() {
                if class_taken[c] {
                    continue;
                }
                if best.as_ref().is_none_or(|&(bp, _, _)| p > bp) {
                    best = Some((p, v, c));
                }
            }
        }
        let (_, v, c) = best.expect("n unassigned pairs remain");
        assignment[v] = c;
        vector_taken[v] = true;
        class_taken[c] = true;
    }
    assignment
}

/// Outcome of the relabeling stage for one layer.
#[derive(Debug, Clone, Serialize)]
pub struct PermutationRemovalReport {
    pub layer: usize,
    pub iterations_run: usize,
    /// Total samples permuted across all iterations.
    pub permutation_changes: usize,
}

/// Removes permutation symmetry from hidden layer `layer` by iterative
/// greedy constrained k-NN relabeling.
///
/// Each iteration classifies every sample's neuron vectors against the
/// pooled cloud labeled by current neuron positions (frozen at iteration
/// start), then permutes neuron blocks to their assigned classes. Stops
/// early once an iteration changes nothing. A single-sample set has no
/// cross-sample information and is left untouched.
pub fn permutation_removal(
    samples: &mut SampleSet,
    layer: usize,
    config: &RemovalConfig,
) -> Result<PermutationRemovalReport> {
    config.validate()?;
    let width = samples.arch.width(layer);
    let mut report = PermutationRemovalReport {
        layer,
        iterations_run: 0,
        permutation_changes: 0,
    };
    if samples.len() < 2 || width < 2 {
        return Ok(report);
    }
    let arch = samples.arch.clone();
    for _ in 0..config.iterations {
        report.iterations_run += 1;
        let cloud = NeuronCloud::from_samples(samples, layer)?;
        let pool = LabeledPool {
            cloud: &cloud,
            labels: (0..cloud.vectors.len()).map(|i| i % width).collect(),
        };

        let assignments: Vec<Result<Vec<usize>>> = (0..samples.len())
            .into_par_iter()
            .map(|g| {
                let probs: Result<Vec<Vec<f64>>> = (0..width)
                    .map(|i| {
                        knn_class_probs_pool(
                            cloud.member(g, i),
                            &pool,
                            g,
                            config.knn,
                            config.sim_sigma,
                        )
                    })
                    .collect();
                Ok(greedy_assign(&probs?))
            })
            .collect();

        let mut changes = 0;
        for (g, assignment) in assignments.into_iter().enumerate() {
            let assignment = assignment?;
            let identity = assignment.iter().enumerate().all(|(v, &c)| v == c);
            if identity {
                continue;
            }
            // assignment[v] = c means vector v becomes neuron c, i.e. the
            // new block at position c is sourced from old position v.
            let mut perm = vec![0; width];
            for (v, &c) in assignment.iter().enumerate() {
                perm[c] = v;
            }
            let signs = vec![1.0; width];
            net::permute_hidden_neurons(&arch, &mut samples.states[g].theta, layer, &perm, &signs)?;
            changes += 1;
        }
        report.permutation_changes += changes;
        if changes == 0 {
            break;
        }
    }
    Ok(report)
}

/// Per-layer summary of the full pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct LayerRemovalReport {
    pub layer: usize,
    pub flips: usize,
    pub relabel_iterations: usize,
    pub permutation_changes: usize,
}

/// Full pipeline report.
#[derive(Debug, Clone, Serialize, Default)]
pub struct RemovalReport {
    pub layers: Vec<LayerRemovalReport>,
}

/// Complete geometry-respecting removal: for every hidden layer in reverse
/// order, sign-flip removal followed by permutation removal.
pub fn geometry_removal<R: Rng>(
    samples: &mut SampleSet,
    config: &RemovalConfig,
    rng: &mut R,
) -> Result<RemovalReport> {
    if samples.arch.hidden_activation != net::Activation::Tanh {
        return Err(Error::InvalidInput(
            "geometry removal applies to tanh networks only".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("sample set is empty".into()));
    }
    let mut report = RemovalReport::default();
    let hidden: Vec<usize> = samples.arch.hidden_layers().collect();
    for &layer in hidden.iter().rev() {
        let (tanh_report, _) = tanh_removal(samples, layer, config, rng)?;
        let perm_report = permutation_removal(samples, layer, config)?;
        report.layers.push(LayerRemovalReport {
            layer,
            flips: tanh_report.flips,
            relabel_iterations: perm_report.iterations_run,
            permutation_changes: perm_report.permutation_changes,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamState;
    use crate::net::{param_dim, Activation, Architecture};
    use crate::symmetry::{apply_transform, max_output_deviation, random_transform};
    use rand_chacha::ChaCha8Rng;

    fn tanh_arch(widths: &[usize]) -> Architecture {
        Architecture::new(widths.to_vec(), Activation::Tanh).unwrap()
    }

    fn small_config() -> RemovalConfig {
        RemovalConfig {
            restarts: 4,
            ..RemovalConfig::default()
        }
    }

    #[test]
    fn svm_loss_examples() {
        let phis = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        // beta = 0: every hinge term is max(0, 1) = 1.
        assert_eq!(svm_loss(&[0.0, 0.0], &phis, 1.0), 3.0);
        assert_eq!(svm_loss(&[0.0, 0.0], &phis, 2.5), 7.5);
        // All margins >= 1: only the regularizer remains.
        let beta = [2.0, 2.0];
        assert_eq!(svm_loss(&beta, &phis, 1.0), 0.5 * 8.0);
        // Single vector at margin 0.5.
        let phis = vec![vec![0.5, 0.0]];
        let beta = [1.0, 1.0];
        assert!((svm_loss(&beta, &phis, 1.0) - (1.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn hyperplane_separates_antipodal_pair() {
        let v = vec![8.0, 6.0]; // norm 10
        let phis = vec![v.clone(), v.iter().map(|x| -x).collect()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plane = fit_hyperplane(&phis, &small_config(), &mut rng).unwrap();
        let margin = plane.margin(&v).abs();
        assert!((0.9..=1.2).contains(&margin), "margin {margin}");
        let loss = svm_loss(&plane.beta, &phis, 1.0);
        // Analytic optimum: |beta| = 1/|v|, loss = 1/(2 |v|^2) = 0.005.
        assert!(loss < 0.008, "loss {loss}");
        // Sign symmetry of the loss.
        let negated: Vec<f64> = plane.beta.iter().map(|b| -b).collect();
        assert!((svm_loss(&negated, &phis, 1.0) - loss).abs() < 1e-12);
    }

    #[test]
    fn hyperplane_achieves_zero_hinge_on_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut phis = Vec::new();
        for _ in 0..40 {
            let jitter: f64 = rng.sample::<f64, _>(StandardNormal);
            phis.push(vec![5.0 + 0.1 * jitter, 1.0]);
            let jitter: f64 = rng.sample::<f64, _>(StandardNormal);
            phis.push(vec![-5.0 + 0.1 * jitter, -1.0]);
        }
        let plane = fit_hyperplane(&phis, &small_config(), &mut rng).unwrap();
        let hinge: f64 = phis
            .iter()
            .map(|p| (1.0 - plane.margin(p).abs()).max(0.0))
            .sum();
        assert!(hinge < 1e-6, "hinge residual {hinge}");
    }

    fn planted_samples(arch: &Architecture, bases: usize, copies: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = param_dim(arch);
        let mut states = Vec::new();
        for _ in 0..bases {
            let base: Vec<f64> = (0..d)
                .map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for _ in 0..copies {
                let e = random_transform(arch, &mut rng).unwrap();
                states.push(ParamState::new(
                    apply_transform(arch, &base, &e).unwrap(),
                    -1.0,
                ));
            }
        }
        SampleSet::synthetic(arch.clone(), states)
    }

    #[test]
    fn tanh_removal_halves_mirrored_cloud() {
        let arch = tanh_arch(&[1, 3, 1]);
        let mut samples = planted_samples(&arch, 2, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let before = samples.clone();
        let (report, plane) =
            tanh_removal(&mut samples, 2, &small_config(), &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap();
        assert!(report.flips > 0);

        // Post-condition: every pooled vector on the non-negative side.
        let cloud = NeuronCloud::from_samples(&samples, 2).unwrap();
        assert!(cloud.pooled().iter().all(|phi| plane.margin(phi) >= 0.0));

        // No antipodal pairs remain.
        let pool = cloud.pooled();
        for (i, a) in pool.iter().enumerate() {
            for b in pool.iter().skip(i + 1) {
                let antipodal = a.iter().zip(b).all(|(x, y)| (x + y).abs() < 1e-9);
                assert!(!antipodal, "antipodal pair survived");
            }
        }

        // Function preservation on every modified sample.
        for (orig, new) in before.states.iter().zip(&samples.states) {
            let dev =
                max_output_deviation(&arch, &orig.theta, &new.theta, 50, &mut rng).unwrap();
            assert!(dev < 1e-10, "function changed by {dev}");
        }

        // Re-running with the same seed flips nothing: the hinge loss (and
        // the whole descent trajectory) is invariant under member sign
        // flips, so the refit finds the same plane and the cloud is already
        // on its non-negative side.
        let (report2, _) =
            tanh_removal(&mut samples, 2, &small_config(), &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap();
        assert_eq!(report2.flips, 0);
    }

    #[test]
    fn knn_probs_unanimous_and_tied() {
        // All neighbors share one label.
        let pool: Vec<(usize, usize, Vec<f64>)> = (0..5)
            .map(|i| (i + 1, 2usize, vec![0.1 * i as f64, 0.0]))
            .collect();
        let probs = knn_class_probs(&[0.0, 0.0], &pool, 3, 0, 5, 1.0).unwrap();
        assert_eq!(probs, vec![0.0, 0.0, 1.0]);

        // Two classes at mirrored positions and equal counts.
        let pool = vec![
            (1, 0, vec![1.0, 0.0]),
            (2, 0, vec![1.0, 0.0]),
            (3, 1, vec![-1.0, 0.0]),
            (4, 1, vec![-1.0, 0.0]),
        ];
        let probs = knn_class_probs(&[0.0, 0.0], &pool, 2, 0, 4, 1.0).unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn knn_probs_planted_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pool = Vec::new();
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        for (label, center) in centers.iter().enumerate() {
            for s in 0..30 {
                let dx: f64 = rng.sample::<f64, _>(StandardNormal);
                let dy: f64 = rng.sample::<f64, _>(StandardNormal);
                pool.push((
                    s + 1,
                    label,
                    vec![center[0] + 0.5 * dx, center[1] + 0.5 * dy],
                ));
            }
        }
        let probs = knn_class_probs(&[9.8, 0.3], &pool, 3, 0, 16, 1.0).unwrap();
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 1);
    }

    #[test]
    fn knn_probs_empty_neighbors_is_error() {
        let pool = vec![(0, 0, vec![0.0]), (0, 1, vec![1.0])];
        assert!(knn_class_probs(&[0.0], &pool, 2, 0, 2, 1.0).is_err());
    }

    #[test]
    fn greedy_assign_examples() {
        // Identity-dominant matrix.
        let probs = vec![
            vec![0.9, 0.05, 0.05],
            vec![0.05, 0.9, 0.05],
            vec![0.05, 0.05, 0.9],
        ];
        assert_eq!(greedy_assign(&probs), vec![0, 1, 2]);

        // Hand trace: vector 2 takes class 1 first (0.9), vector 1 is forced
        // to class 2.
        let probs = vec![vec![0.6, 0.4], vec![0.9, 0.1]];
        assert_eq!(greedy_assign(&probs), vec![1, 0]);

        // A permutation matrix maps to itself.
        let probs = vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ];
        assert_eq!(greedy_assign(&probs), vec![1, 2, 0]);
    }

    #[test]
    fn greedy_assign_is_always_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(1..=6usize);
            let probs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
                .collect();
            let mut assignment = greedy_assign(&probs);
            assignment.sort_unstable();
            assert_eq!(assignment, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn permutation_removal_collapses_planted_permutations() {
        let arch = tanh_arch(&[1, 3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = param_dim(&arch);
        let base: Vec<f64> = (0..d)
            .map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        // Permutation-only copies (no sign flips).
        let mut states = Vec::new();
        for _ in 0..24 {
            let mut e = random_transform(&arch, &mut rng).unwrap();
            for s in e.hidden[0].signs.iter_mut() {
                *s = 1.0;
            }
            states.push(ParamState::new(
                apply_transform(&arch, &base, &e).unwrap(),
                0.0,
            ));
        }
        let mut samples = SampleSet::synthetic(arch.clone(), states);
        permutation_removal(&mut samples, 2, &small_config()).unwrap();
        for state in &samples.states {
            let max_diff = state
                .theta
                .iter()
                .zip(&samples.states[0].theta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-12, "draws did not collapse (diff {max_diff})");
        }
    }

    #[test]
    fn permutation_removal_early_exits_on_canonical_set() {
        let arch = tanh_arch(&[1, 3, 1]);
        // Identical samples are trivially canonical.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = param_dim(&arch);
        let base: Vec<f64> = (0..d)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let states = vec![ParamState::new(base, 0.0); 8];
        let mut samples = SampleSet::synthetic(arch, states);
        let report = permutation_removal(&mut samples, 2, &small_config()).unwrap();
        assert_eq!(report.iterations_run, 1);
        assert_eq!(report.permutation_changes, 0);
    }

    #[test]
    fn geometry_removal_collapses_planted_transforms() {
        let arch = tanh_arch(&[1, 3, 1]);
        let copies = 24;
        let mut samples = planted_samples(&arch, 3, copies, 9);
        let before = samples.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        geometry_removal(&mut samples, &small_config(), &mut rng).unwrap();

        // Function preservation everywhere.
        for (orig, new) in before.states.iter().zip(&samples.states) {
            let dev =
                max_output_deviation(&arch, &orig.theta, &new.theta, 50, &mut rng).unwrap();
            assert!(dev < 1e-10);
        }

        // Each origin group collapses onto one representative.
        let mut collapsed = 0;
        for group in 0..3 {
            let members: Vec<&ParamState> =
                samples.states[group * copies..(group + 1) * copies].iter().collect();
            for m in &members {
                let dist = m
                    .theta
                    .iter()
                    .zip(&members[0].theta)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if dist < 1e-6 {
                    collapsed += 1;
                }
            }
        }
        let frac = collapsed as f64 / (3 * copies) as f64;
        assert!(frac >= 0.95, "only {frac:.2} of draws collapsed");
    }

    #[test]
    fn geometry_removal_idempotent_on_planted_set() {
        let arch = tanh_arch(&[1, 3, 1]);
        let mut samples = planted_samples(&arch, 2, 16, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        geometry_removal(&mut samples, &small_config(), &mut rng).unwrap();
        let canonical = samples.clone();
        // Same removal config and seed: the second pass must be a no-op.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let report = geometry_removal(&mut samples, &small_config(), &mut rng).unwrap();
        assert_eq!(report.layers[0].flips, 0);
        for (a, b) in canonical.states.iter().zip(&samples.states) {
            assert_eq!(a.theta, b.theta);
        }
    }

    #[test]
    fn geometry_removal_single_sample_is_canonical() {
        let arch = tanh_arch(&[1, 3, 1]);
        let mut samples = planted_samples(&arch, 1, 1, 14);
        let before = samples.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        geometry_removal(&mut samples, &small_config(), &mut rng).unwrap();
        let dev = max_output_deviation(
            &arch,
            &before.states[0].theta,
            &samples.states[0].theta,
            50,
            &mut rng,
        )
        .unwrap();
        assert!(dev < 1e-10);
    }

    #[test]
    fn geometry_removal_preserves_log_posterior() {
        use crate::model::{log_posterior, RegressionData};
        use crate::matrix::Matrix;
        let arch = tanh_arch(&[1, 3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let rows_x: Vec<Vec<f64>> = (0..16)
            .map(|_| vec![rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let rows_y: Vec<Vec<f64>> = rows_x
            .iter()
            .map(|x| vec![x[0].sin() + 0.1 * rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let data = RegressionData::new(
            Matrix::from_rows(&rows_x).unwrap(),
            Matrix::from_rows(&rows_y).unwrap(),
        )
        .unwrap();
        let mut samples = planted_samples(&arch, 2, 8, 17);
        let before: Vec<f64> = samples
            .states
            .iter()
            .map(|s| log_posterior(s, &data, &arch).unwrap())
            .collect();
        geometry_removal(&mut samples, &small_config(), &mut rng).unwrap();
        for (state, lp) in samples.states.iter().zip(before) {
            let after = log_posterior(state, &data, &arch).unwrap();
            assert!((after - lp).abs() < 1e-8, "log posterior drifted: {lp} -> {after}");
        }
    }
}
