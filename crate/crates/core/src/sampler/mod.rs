//! Gradient-based MCMC over parameter states and the multi-chain
//! orchestrator implementing the one-sample-per-chain regime.
//!
//! Each chain owns a ChaCha RNG seeded with `config.seed + chain_id`, so runs
//! replay bitwise under the same configuration and chains are independent of
//! launch order and worker count.

mod adapt;
mod nuts;

pub use nuts::{FnDensity, LogDensity};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::model::{ParamState, PosteriorDensity, RegressionData};
use crate::net::Architecture;
use crate::{Error, Result};

use adapt::{mass_update_schedule, DualAveraging, RunningVariance};
use nuts::NutsKernel;

/// NUTS configuration. The mass matrix is diagonal, initialized to the
/// identity, and adapted during warmup.
#[derive(Debug, Clone, Serialize)]
pub struct SamplerConfig {
    pub warmup_steps: usize,
    pub initial_step_size: f64,
    pub target_accept: f64,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 1024,
            initial_step_size: 1.0,
            target_accept: 0.8,
            max_depth: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::InvalidInput("warmup_steps must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidInput(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if !(self.initial_step_size > 0.0) {
            return Err(Error::InvalidInput("initial step size must be > 0".into()));
        }
        Ok(())
    }
}

/// Post-warmup health counters for one chain.
#[derive(Debug, Clone, Serialize)]
pub struct ChainDiagnostics {
    pub chain_id: u64,
    pub seed: u64,
    pub draws: usize,
    pub divergences: usize,
    pub mean_accept: f64,
    pub mean_depth: f64,
    pub step_size: f64,
    /// Set when more than 25% of post-warmup draws diverged.
    pub excessive_divergence: bool,
}

/// Draws and diagnostics of a single chain.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub draws: Vec<Vec<f64>>,
    pub diagnostics: ChainDiagnostics,
}

/// Runs warmup plus `n_draws` post-warmup NUTS draws from `init`.
pub fn sample_chain<T: LogDensity>(
    target: &mut T,
    config: &SamplerConfig,
    chain_id: u64,
    n_draws: usize,
    init: &[f64],
) -> Result<ChainRun> {
    let init = init.to_vec();
    sample_chain_with_init(target, config, chain_id, n_draws, move |_, _| init.clone())
}

/// As [`sample_chain`], but the initial point is produced from the chain's
/// own RNG, keeping the whole chain a pure function of `(config, chain_id)`.
pub fn sample_chain_with_init<T, F>(
    target: &mut T,
    config: &SamplerConfig,
    chain_id: u64,
    n_draws: usize,
    init_fn: F,
) -> Result<ChainRun>
where
    T: LogDensity,
    F: Fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
{
    config.validate()?;
    let dim = target.dim();
    let seed = config.seed.wrapping_add(chain_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut position = init_fn(&mut rng, dim);
    if position.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "initial point has dimension {}, target has {dim}",
            position.len()
        )));
    }
    if position.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial point is not finite".into()));
    }
    let mut grad = vec![0.0; dim];
    let mut log_density = target.log_density_grad(&position, &mut grad);
    if !log_density.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Sampler(format!(
            "chain {chain_id}: non-finite log density or gradient at the initial point"
        )));
    }

    let mut kernel = NutsKernel::new(dim, config.max_depth);
    let eps0 = kernel.find_reasonable_step_size(
        target,
        &position,
        &grad,
        log_density,
        config.initial_step_size,
        &mut rng,
    );
    let mut averaging = DualAveraging::new(eps0, config.target_accept);
    let windows = mass_update_schedule(config.warmup_steps);
    let mut variance = RunningVariance::new(dim);
    let mut window_idx = 0;

    for step in 0..config.warmup_steps {
        let eps = averaging.current();
        let stats = kernel.transition(
            target,
            &mut position,
            &mut grad,
            &mut log_density,
            eps,
            &mut rng,
        );
        averaging.update(stats.accept_stat);
        if window_idx < windows.len() {
            let (start, end) = windows[window_idx];
            if step >= start {
                variance.add(&position);
            }
            if step + 1 == end {
                if variance.count() > 1 {
                    kernel.inv_mass = variance.regularized_variance();
                }
                variance.reset();
                // The new metric changes the step-size scale; re-search
                // before dual averaging resumes.
                let eps = kernel.find_reasonable_step_size(
                    target,
                    &position,
                    &grad,
                    log_density,
                    averaging.current(),
                    &mut rng,
                );
                averaging = DualAveraging::restarted(eps, config.target_accept);
                window_idx += 1;
            }
        }
    }

    let step_size = averaging.adapted();
    let mut draws = Vec::with_capacity(n_draws);
    let mut divergences = 0usize;
    let mut accept_sum = 0.0;
    let mut depth_sum = 0usize;
    for _ in 0..n_draws {
        let stats = kernel.transition(
            target,
            &mut position,
            &mut grad,
            &mut log_density,
            step_size,
            &mut rng,
        );
        if stats.divergent {
            divergences += 1;
        }
        accept_sum += stats.accept_stat;
        depth_sum += stats.depth;
        draws.push(position.clone());
    }

    let diagnostics = ChainDiagnostics {
        chain_id,
        seed,
        draws: n_draws,
        divergences,
        mean_accept: if n_draws > 0 {
            accept_sum / n_draws as f64
        } else {
            0.0
        },
        mean_depth: if n_draws > 0 {
            depth_sum as f64 / n_draws as f64
        } else {
            0.0
        },
        step_size,
        excessive_divergence: n_draws > 0 && divergences * 4 > n_draws,
    };
    Ok(ChainRun { draws, diagnostics })
}

/// Aggregated outcome of a multi-chain run.
#[derive(Debug, Clone)]
pub struct MultiChainRun {
    /// Successful chains in chain-id order.
    pub chains: Vec<ChainRun>,
    /// `(chain_id, error)` for chains that aborted.
    pub failures: Vec<(u64, String)>,
}

/// Launches `n_chains` independent chains with seeds `config.seed + id`.
///
/// Chains run on the rayon pool; results are merged in chain-id order, so the
/// output is independent of the worker count. The run fails only if more
/// than 5% of chains abort.
pub fn run_chains<T, F>(
    target: &T,
    config: &SamplerConfig,
    n_chains: u64,
    draws_per_chain: usize,
    init_fn: F,
) -> Result<MultiChainRun>
where
    T: LogDensity + Clone + Send + Sync,
    F: Fn(&mut ChaCha8Rng, usize) -> Vec<f64> + Send + Sync,
{
    if n_chains == 0 {
        return Err(Error::InvalidInput("need at least one chain".into()));
    }
    let results: Vec<(u64, Result<ChainRun>)> = (0..n_chains)
        .into_par_iter()
        .map(|chain_id| {
            let mut chain_target = target.clone();
            let run = sample_chain_with_init(
                &mut chain_target,
                config,
                chain_id,
                draws_per_chain,
                &init_fn,
            );
            (chain_id, run)
        })
        .collect();

    let mut chains = Vec::with_capacity(n_chains as usize);
    let mut failures = Vec::new();
    for (chain_id, run) in results {
        match run {
            Ok(r) => chains.push(r),
            Err(e) => failures.push((chain_id, e.to_string())),
        }
    }
    if failures.len() * 20 > n_chains as usize {
        return Err(Error::Sampler(format!(
            "{} of {} chains aborted (> 5%); first failure: chain {} ({})",
            failures.len(),
            n_chains,
            failures[0].0,
            failures[0].1
        )));
    }
    Ok(MultiChainRun { chains, failures })
}

/// Per-draw provenance inside a [`SampleSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub chain_id: u64,
    pub seed: u64,
    pub draw_idx: usize,
}

/// Posterior draws with chain and seed provenance.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub arch: Architecture,
    pub states: Vec<ParamState>,
    pub provenance: Vec<Provenance>,
}

impl SampleSet {
    /// Wraps externally constructed states (planted test sets, transformed
    /// copies) with synthetic provenance.
    pub fn synthetic(arch: Architecture, states: Vec<ParamState>) -> Self {
        let provenance = (0..states.len())
            .map(|i| Provenance {
                chain_id: i as u64,
                seed: 0,
                draw_idx: 0,
            })
            .collect();
        Self {
            arch,
            states,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn param_dim(&self) -> usize {
        crate::net::param_dim(&self.arch)
    }

    /// CSV with header `chain_id,draw_idx,theta_1..theta_d,log_sigma`.
    ///
    /// Floats are written in shortest round-trip form, so writing and
    /// re-reading is bit-exact and byte-stable.
    pub fn to_csv(&self) -> String {
        let d = self.param_dim();
        let mut out = String::from("chain_id,draw_idx");
        for i in 1..=d {
            out.push_str(&format!(",theta_{i}"));
        }
        out.push_str(",log_sigma\n");
        for (state, prov) in self.states.iter().zip(&self.provenance) {
            out.push_str(&format!("{},{}", prov.chain_id, prov.draw_idx));
            for v in &state.theta {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", state.log_sigma));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str, arch: Architecture) -> Result<Self> {
        let d = crate::net::param_dim(&arch);
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty sample file".into()))?;
        let expected_cols = d + 3;
        let header_cols = header.split(',').count();
        if header_cols != expected_cols {
            return Err(Error::DimensionMismatch(format!(
                "sample file has {header_cols} columns, architecture needs {expected_cols}"
            )));
        }
        let mut states = Vec::new();
        let mut provenance = Vec::new();
        for (line_idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected_cols {
                return Err(Error::Parse {
                    line: line_idx + 1,
                    column: 1,
                    message: format!(
                        "row has {} fields, expected {expected_cols}",
                        fields.len()
                    ),
                });
            }
            let parse = |col: usize| -> Result<f64> {
                fields[col].trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: line_idx + 1,
                    column: col + 1,
                    message: e.to_string(),
                })
            };
            let chain_id = fields[0].trim().parse::<u64>().map_err(|e| Error::Parse {
                line: line_idx + 1,
                column: 1,
                message: e.to_string(),
            })?;
            let draw_idx = fields[1].trim().parse::<usize>().map_err(|e| Error::Parse {
                line: line_idx + 1,
                column: 2,
                message: e.to_string(),
            })?;
            let mut theta = Vec::with_capacity(d);
            for i in 0..d {
                theta.push(parse(2 + i)?);
            }
            let log_sigma = parse(2 + d)?;
            states.push(ParamState::new(theta, log_sigma));
            // Seeds are not part of the file format.
            provenance.push(Provenance {
                chain_id,
                seed: 0,
                draw_idx,
            });
        }
        Ok(Self {
            arch,
            states,
            provenance,
        })
    }

    pub fn read_csv(path: &std::path::Path, arch: Architecture) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(&text, arch)
    }
}

/// Whole-run diagnostics of a posterior sampling run.
#[derive(Debug, Clone, Serialize)]
pub struct RunDiagnostics {
    pub chains: Vec<ChainDiagnostics>,
    pub failed_chains: Vec<(u64, String)>,
    pub total_divergences: usize,
    /// More than 25% of all post-warmup draws diverged.
    pub excessive_divergence: bool,
}

/// Samples the BNN posterior with `n_chains` independent chains, starting
/// each chain from a prior draw made with its own RNG.
pub fn sample_posterior(
    arch: &Architecture,
    data: &RegressionData,
    config: &SamplerConfig,
    n_chains: u64,
    draws_per_chain: usize,
) -> Result<(SampleSet, RunDiagnostics)> {
    let target = PosteriorDensity::new(arch, data)?;
    let arch_for_init = arch.clone();
    let run = run_chains(&target, config, n_chains, draws_per_chain, move |rng, _| {
        ParamState::prior_draw(&arch_for_init, rng).to_flat()
    })?;

    let mut states = Vec::new();
    let mut provenance = Vec::new();
    let mut diagnostics = Vec::new();
    let mut total_divergences = 0;
    let mut total_draws = 0;
    for chain in run.chains {
        total_divergences += chain.diagnostics.divergences;
        total_draws += chain.draws.len();
        for (draw_idx, flat) in chain.draws.iter().enumerate() {
            states.push(ParamState::from_flat(flat)?);
            provenance.push(Provenance {
                chain_id: chain.diagnostics.chain_id,
                seed: chain.diagnostics.seed,
                draw_idx,
            });
        }
        diagnostics.push(chain.diagnostics);
    }
    let sample_set = SampleSet {
        arch: arch.clone(),
        states,
        provenance,
    };
    let diagnostics = RunDiagnostics {
        chains: diagnostics,
        failed_chains: run.failures,
        total_divergences,
        excessive_divergence: total_draws > 0 && total_divergences * 4 > total_draws,
    };
    Ok((sample_set, diagnostics))
}
