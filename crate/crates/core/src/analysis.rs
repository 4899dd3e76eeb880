//! Predictive evaluation: LPPD, posterior predictive grids, consecutive-KL
//! convergence tracking, and spectral clustering of canonicalized samples.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::matrix::Matrix;
use crate::model::RegressionData;
use crate::net::{self, ForwardScratch};
use crate::sampler::SampleSet;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;
/// Densities are floored here before any log, so empty grid cells cannot
/// produce infinities.
const DENSITY_FLOOR: f64 = 1e-300;

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-point LPPD values and their summary.
#[derive(Debug, Clone, Serialize)]
pub struct LppdResult {
    pub per_point: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

/// Log pointwise predictive density over a test set:
/// `log( (1/G) sum_g N(y* | f_g(x*), sigma_g^2 I) )` per point, via
/// log-sum-exp.
pub fn lppd(samples: &SampleSet, test: &RegressionData) -> Result<LppdResult> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("sample set is empty".into()));
    }
    test.check_arch(&samples.arch)?;
    let arch = &samples.arch;
    let layout = arch.layout();
    let m = arch.output_dim();
    let g = samples.len();
    let mut scratch = ForwardScratch::default();
    let mut y_hat = vec![0.0; m];
    let mut log_terms = vec![0.0; g];

    let mut per_point = Vec::with_capacity(test.len());
    for point in 0..test.len() {
        let x = test.x.row(point);
        let y = test.y.row(point);
        for (draw, state) in samples.states.iter().enumerate() {
            net::forward_into(arch, &layout, &state.theta, x, &mut y_hat, &mut scratch)?;
            let sigma = state.sigma();
            let mut sq = 0.0;
            for (&o, &t) in y_hat.iter().zip(y) {
                sq += (o - t) * (o - t);
            }
            log_terms[draw] =
                -0.5 * m as f64 * LN_2PI - m as f64 * sigma.ln() - 0.5 * sq / (sigma * sigma);
        }
        per_point.push(log_sum_exp(&log_terms) - (g as f64).ln());
    }

    let n = per_point.len() as f64;
    let mean = per_point.iter().sum::<f64>() / n;
    let var = per_point.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(LppdResult {
        per_point,
        mean,
        std_error: (var / n).sqrt(),
    })
}

/// Regular input/output grid for posterior predictive densities.
///
/// For networks with more than one input, the grid varies `slice_dim` and
/// holds the remaining inputs at `fixed_input` (zeros by default).
#[derive(Debug, Clone, Serialize)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub x_points: usize,
    pub y_range: (f64, f64),
    pub y_points: usize,
    pub slice_dim: usize,
    pub fixed_input: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: (-3.0, 3.0),
            x_points: 61,
            y_range: (-3.0, 3.0),
            y_points: 121,
            slice_dim: 0,
            fixed_input: Vec::new(),
        }
    }
}

impl GridSpec {
    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.x_points < 2 || self.y_points < 2 {
            return Err(Error::InvalidInput("grid needs at least 2 points per axis".into()));
        }
        if self.slice_dim >= input_dim {
            return Err(Error::InvalidInput(format!(
                "slice dimension {} out of range for input dimension {input_dim}",
                self.slice_dim
            )));
        }
        if !self.fixed_input.is_empty() && self.fixed_input.len() != input_dim {
            return Err(Error::DimensionMismatch(format!(
                "fixed_input has length {}, input dimension is {input_dim}",
                self.fixed_input.len()
            )));
        }
        Ok(())
    }

    pub fn x_grid(&self) -> Vec<f64> {
        linspace(self.x_range.0, self.x_range.1, self.x_points)
    }

    pub fn y_grid(&self) -> Vec<f64> {
        linspace(self.y_range.0, self.y_range.1, self.y_points)
    }

    pub fn y_cell(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / (self.y_points - 1) as f64
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| a + step * i as f64).collect()
}

/// Discretized posterior predictive density on a regular grid; each x-row is
/// renormalized so that `sum_y density * dy = 1`.
#[derive(Debug, Clone)]
pub struct PpdGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `density.get(xi, yi) = p(y_i | x_i)`, rows normalized over y.
    pub density: Matrix,
}

impl PpdGrid {
    pub fn y_cell(&self) -> f64 {
        (self.ys[self.ys.len() - 1] - self.ys[0]) / (self.ys.len() - 1) as f64
    }

    /// CSV rows `x,y,density` for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,density\n");
        for (xi, &x) in self.xs.iter().enumerate() {
            for (yi, &y) in self.ys.iter().enumerate() {
                out.push_str(&format!("{x},{y},{}\n", self.density.get(xi, yi)));
            }
        }
        out
    }
}

/// Accumulates unnormalized predictive mass for draws, one at a time.
struct GridAccumulator<'a> {
    samples: &'a SampleSet,
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Raw sums of per-draw likelihood values, x-major.
    sums: Matrix,
    drawn: usize,
    scratch: ForwardScratch,
    inputs: Vec<Vec<f64>>,
}

impl<'a> GridAccumulator<'a> {
    fn new(samples: &'a SampleSet, spec: &GridSpec) -> Result<Self> {
        let arch = &samples.arch;
        if arch.output_dim() != 1 {
            return Err(Error::InvalidInput(
                "predictive grids require a single-output network".into(),
            ));
        }
        spec.validate(arch.input_dim())?;
        let xs = spec.x_grid();
        let ys = spec.y_grid();
        let base = if spec.fixed_input.is_empty() {
            vec![0.0; arch.input_dim()]
        } else {
            spec.fixed_input.clone()
        };
        let inputs = xs
            .iter()
            .map(|&x| {
                let mut v = base.clone();
                v[spec.slice_dim] = x;
                v
            })
            .collect();
        Ok(Self {
            samples,
            sums: Matrix::zeros(xs.len(), ys.len()),
            xs,
            ys,
            drawn: 0,
            scratch: ForwardScratch::default(),
            inputs,
        })
    }

    fn add_draw(&mut self, draw: usize) -> Result<()> {
        let arch = &self.samples.arch;
        let layout = arch.layout();
        let state = &self.samples.states[draw];
        let sigma = state.sigma();
        let norm = -0.5 * LN_2PI - sigma.ln();
        let inv_two_sigma_sq = 0.5 / (sigma * sigma);
        let mut y_hat = vec![0.0];
        for (xi, input) in self.inputs.iter().enumerate() {
            net::forward_into(arch, &layout, &state.theta, input, &mut y_hat, &mut self.scratch)?;
            let mu = y_hat[0];
            let row = self.sums.row_mut(xi);
            for (yi, &y) in self.ys.iter().enumerate() {
                row[yi] += (norm - (y - mu) * (y - mu) * inv_two_sigma_sq).exp();
            }
        }
        self.drawn += 1;
        Ok(())
    }

    /// Snapshot of the current (renormalized) grid.
    fn grid(&self) -> PpdGrid {
        let dy = (self.ys[self.ys.len() - 1] - self.ys[0]) / (self.ys.len() - 1) as f64;
        let mut density = self.sums.clone();
        for xi in 0..self.xs.len() {
            let row = density.row_mut(xi);
            let mass: f64 = row.iter().sum::<f64>() * dy;
            if mass > 0.0 {
                for v in row.iter_mut() {
                    *v /= mass;
                }
            }
        }
        PpdGrid {
            xs: self.xs.clone(),
            ys: self.ys.clone(),
            density,
        }
    }
}

/// Posterior predictive density on a grid:
/// `p(y | x) = (1/G) sum_g N(y | f_g(x), sigma_g^2)`, renormalized per x.
pub fn ppd_grid(samples: &SampleSet, spec: &GridSpec) -> Result<PpdGrid> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("sample set is empty".into()));
    }
    let mut acc = GridAccumulator::new(samples, spec)?;
    for draw in 0..samples.len() {
        acc.add_draw(draw)?;
    }
    Ok(acc.grid())
}

/// Discrete KL divergence of two normalized density rows over cells of width
/// `cell`: `sum_y P log(P/Q)` with `P = p * cell`.
pub fn discrete_kl(p: &[f64], q: &[f64], cell: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pd, &qd)| {
            let pm = (pd * cell).max(DENSITY_FLOOR);
            let qm = (qd * cell).max(DENSITY_FLOOR);
            pm * (pm / qm).ln()
        })
        .sum()
}

/// Kullback-Leibler divergence between consecutive posterior predictive
/// densities: entry `g - 2` compares the PPD built from draws `1..g-1`
/// against the one from draws `1..g`, averaged over the x grid.
pub fn kl_consecutive(samples: &SampleSet, spec: &GridSpec) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput(
            "KL tracking needs at least two draws".into(),
        ));
    }
    let mut acc = GridAccumulator::new(samples, spec)?;
    acc.add_draw(0)?;
    let mut previous = acc.grid();
    let cell = previous.y_cell();
    let mut kls = Vec::with_capacity(samples.len() - 1);
    for draw in 1..samples.len() {
        acc.add_draw(draw)?;
        let current = acc.grid();
        let mut total = 0.0;
        for xi in 0..previous.xs.len() {
            total += discrete_kl(previous.density.row(xi), current.density.row(xi), cell);
        }
        kls.push(total / previous.xs.len() as f64);
        previous = current;
    }
    Ok(kls)
}

/// Gaussian similarity `exp(-||a-b||^2 / (2 sigma^2))`.
fn similarity(a: &[f64], b: &[f64], sim_sigma: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d / (2.0 * sim_sigma * sim_sigma)).exp()
}

/// Symmetrized k-NN affinity matrix with Gaussian weights and zero diagonal.
pub fn knn_graph(points: &[Vec<f64>], k: usize, sim_sigma: f64) -> Result<Matrix> {
    let n = points.len();
    if n < k + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least k+1 = {} points, got {n}",
            k + 1
        )));
    }
    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in dists.iter().take(k) {
            let s = similarity(&points[i], &points[j], sim_sigma);
            // Symmetrize by max: an edge exists if either endpoint selects it.
            let current = adjacency.get(i, j);
            adjacency.set(i, j, current.max(s));
            adjacency.set(j, i, current.max(s));
        }
    }
    Ok(adjacency)
}

/// Spectral clustering output.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterResult {
    /// Cluster id (0-based) per input point.
    pub labels: Vec<usize>,
    /// The `k_clusters` smallest eigenvalues of the normalized Laplacian.
    pub eigenvalues: Vec<f64>,
}

/// Spectral clustering knobs.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralConfig {
    pub k_neighbors: usize,
    pub sim_sigma: f64,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 4,
            sim_sigma: 1.0,
            kmeans_restarts: 32,
            seed: 0,
        }
    }
}

/// Spectral clustering on the symmetric normalized Laplacian
/// `D^(-1/2) (D - A) D^(-1/2)`: embeds points into the eigenvectors of the
/// `k_clusters` smallest eigenvalues, row-normalizes, and runs seeded
/// k-means++ with restarts.
pub fn spectral_cluster(
    points: &[Vec<f64>],
    k_clusters: usize,
    config: &SpectralConfig,
) -> Result<ClusterResult> {
    let n = points.len();
    if k_clusters == 0 {
        return Err(Error::InvalidInput("need at least one cluster".into()));
    }
    if n < k_clusters {
        return Err(Error::InvalidInput(format!(
            "cannot form {k_clusters} clusters from {n} points"
        )));
    }
    let adjacency = knn_graph(points, config.k_neighbors.min(n - 1), config.sim_sigma)?;

    // Normalized Laplacian; isolated vertices (zero degree) keep inv sqrt 0.
    let degrees: Vec<f64> = (0..n).map(|i| adjacency.row(i).iter().sum()).collect();
    let inv_sqrt: Vec<f64> = degrees
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let laplacian = DMatrix::from_fn(n, n, |i, j| {
        let l = if i == j {
            degrees[i] - adjacency.get(i, j)
        } else {
            -adjacency.get(i, j)
        };
        inv_sqrt[i] * l * inv_sqrt[j]
    });

    let eigen = SymmetricEigen::new(laplacian);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].partial_cmp(&eigen.eigenvalues[b]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().take(k_clusters).map(|&i| eigen.eigenvalues[i]).collect();

    // Row-normalized spectral embedding.
    let mut embedding: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            order
                .iter()
                .take(k_clusters)
                .map(|&col| eigen.eigenvectors[(i, col)])
                .collect()
        })
        .collect();
    for row in embedding.iter_mut() {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    let labels = kmeans(&embedding, k_clusters, config.kmeans_restarts, config.seed);
    Ok(ClusterResult { labels, eigenvalues })
}

/// Seeded k-means++ with restarts; returns the labeling with lowest inertia.
fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let dim = points[0].len();
    let mut best_labels = vec![0; n];
    let mut best_inertia = f64::INFINITY;

    for restart in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        // k-means++ seeding.
        let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
        let mut dist_sq: Vec<f64> = points
            .iter()
            .map(|p| squared_distance(p, &centers[0]))
            .collect();
        while centers.len() < k {
            let total: f64 = dist_sq.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &d) in dist_sq.iter().enumerate() {
                    if u < d {
                        chosen = i;
                        break;
                    }
                    u -= d;
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            centers.push(points[next].clone());
            for (i, p) in points.iter().enumerate() {
                dist_sq[i] = dist_sq[i].min(squared_distance(p, centers.last().unwrap()));
            }
        }

        // Lloyd iterations.
        let mut labels = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = squared_distance(p, center);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                if labels[i] != best {
                    labels[i] = best;
                    changed = true;
                }
            }
            let mut counts = vec![0usize; k];
            let mut sums = vec![vec![0.0; dim]; k];
            for (i, p) in points.iter().enumerate() {
                counts[labels[i]] += 1;
                for (s, &v) in sums[labels[i]].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    // Re-seed an empty cluster at the point farthest from its center.
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            squared_distance(&points[a], &centers[labels[a]])
                                .partial_cmp(&squared_distance(&points[b], &centers[labels[b]]))
                                .unwrap()
                        })
                        .unwrap();
                    centers[c] = points[far].clone();
                    changed = true;
                } else {
                    for (v, &s) in centers[c].iter_mut().zip(&sums[c]) {
                        *v = s / counts[c] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }

        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| squared_distance(p, &centers[l]))
            .sum();
        if inertia < best_inertia {
            best_inertia = inertia;
            best_labels = labels;
        }
    }
    best_labels
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
