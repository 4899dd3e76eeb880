//! How many independent chains are needed to visit every functionally
//! diverse posterior mode at least once.
//!
//! With mode-visit probabilities `pi_1..pi_nu`, the expected number of chains
//! is the generalized coupon-collector value
//!
//! ```text
//! E(G) = sum_{q=0}^{nu-1} (-1)^(nu-1-q) sum_{|J|=q} 1 / (1 - Pi_J),
//! ```
//!
//! and Markov's inequality turns it into the bound
//! `P(G < rho) >= 1 - E(G) / rho`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::{Error, Result};

/// Subset enumeration is exponential; the inclusion-exclusion sum also loses
/// precision for large `nu`. Few functional modes is the regime of interest.
pub const MAX_MODES: usize = 24;

/// Visit probabilities of the functionally diverse modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpec {
    probs: Vec<f64>,
}

impl ModeSpec {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("need at least one mode".into()));
        }
        if probs.len() > MAX_MODES {
            return Err(Error::InvalidInput(format!(
                "at most {MAX_MODES} modes supported, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput(
                "every mode probability must be positive and finite".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "mode probabilities must sum to 1 (got {total})"
            )));
        }
        Ok(Self { probs })
    }

    pub fn num_modes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Kahan-compensated accumulator; the inclusion-exclusion series alternates
/// and cancels heavily.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    fn add(&mut self, value: f64) {
        let y = value - self.compensation;
        let t = self.sum + y;
        self.compensation = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// Expected number of independent chains until every mode has been visited.
pub fn expected_chains(spec: &ModeSpec) -> Result<f64> {
    let nu = spec.num_modes();
    let probs = spec.probs();
    // Per-subset-size partial sums of 1 / (1 - Pi_J).
    let mut by_size = vec![KahanSum::default(); nu];
    for mask in 0u32..(1u32 << nu) {
        let size = mask.count_ones() as usize;
        if size == nu {
            continue;
        }
        let mut pi = 0.0;
        for (j, &p) in probs.iter().enumerate() {
            if mask & (1 << j) != 0 {
                pi += p;
            }
        }
        let remainder = 1.0 - pi;
        if remainder <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "subset probability mass reaches 1 before covering all modes \
                 (1 - Pi_J = {remainder:e}); some mode is numerically unreachable"
            )));
        }
        by_size[size].add(1.0 / remainder);
    }
    let mut total = KahanSum::default();
    for (q, partial) in by_size.iter().enumerate() {
        let sign = if (nu - 1 - q) % 2 == 0 { 1.0 } else { -1.0 };
        total.add(sign * partial.value());
    }
    Ok(total.value())
}

/// Lower bound on `P(G < rho)` from Markov's inequality: `1 - E(G) / rho`.
/// The bound can be negative for tiny `rho`; it is then valid but vacuous.
pub fn bound_probability(spec: &ModeSpec, rho: u64) -> Result<f64> {
    if rho == 0 {
        return Err(Error::InvalidInput("rho must be >= 1".into()));
    }
    Ok(1.0 - expected_chains(spec)? / rho as f64)
}

/// Smallest `rho` with `1 - E(G) / rho >= p_target`.
pub fn required_chains(spec: &ModeSpec, p_target: f64) -> Result<u64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::InvalidInput(format!(
            "target probability must lie in (0, 1), got {p_target}"
        )));
    }
    let expected = expected_chains(spec)?;
    let mut rho = (expected / (1.0 - p_target)).ceil().max(1.0) as u64;
    // Guard the ceiling against floating-point edge cases.
    while 1.0 - expected / (rho as f64) < p_target {
        rho += 1;
    }
    while rho > 1 && 1.0 - expected / ((rho - 1) as f64) >= p_target {
        rho -= 1;
    }
    Ok(rho)
}

/// Expected chains, the chain budget for a target probability, and the bound
/// that budget achieves.
#[derive(Debug, Clone, Serialize)]
pub struct BoundResult {
    pub expected_chains: f64,
    pub required_chains: u64,
    pub bound_probability: f64,
}

pub fn bound_result(spec: &ModeSpec, p_target: f64) -> Result<BoundResult> {
    let expected = expected_chains(spec)?;
    let required = required_chains(spec, p_target)?;
    Ok(BoundResult {
        expected_chains: expected,
        required_chains: required,
        bound_probability: 1.0 - expected / required as f64,
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: u64,
}

/// Simulates i.i.d. categorical draws until all modes are seen; the
/// independent oracle for [`expected_chains`].
///
/// Trials run in fixed-size blocks with per-block RNG streams, so the result
/// does not depend on the worker count.
pub fn mc_oracle_expected_chains(spec: &ModeSpec, n_trials: u64, seed: u64) -> Result<McEstimate> {
    if n_trials == 0 {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }
    const BLOCK: u64 = 8192;
    let nu = spec.num_modes();
    let probs = spec.probs().to_vec();
    let full_mask: u32 = (1u32 << nu) - 1;
    let n_blocks = n_trials.div_ceil(BLOCK);

    let (sum, sum_sq) = (0..n_blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(block));
            let trials = BLOCK.min(n_trials - block * BLOCK);
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for _ in 0..trials {
                let mut seen: u32 = 0;
                let mut draws = 0u64;
                while seen != full_mask {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut category = nu - 1;
                    for (j, &p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            category = j;
                            break;
                        }
                    }
                    seen |= 1 << category;
                    draws += 1;
                }
                sum += draws as f64;
                sum_sq += (draws * draws) as f64;
            }
            (sum, sum_sq)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));

    let n = n_trials as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        trials: n_trials,
    })
}
