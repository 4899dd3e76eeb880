//! Command-line toolkit wiring dataset generation, posterior sampling, the
//! chain bound, symmetry removal, and predictive evaluation into
//! reproducible pipelines.
//!
//! Machine-readable JSON goes to stdout (or `--out`); human summaries go to
//! stderr. Every command is deterministic given its flags and seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use symmcmc::analysis::{kl_consecutive, lppd, ppd_grid, spectral_cluster, GridSpec, SpectralConfig};
use symmcmc::chains::{bound_result, mc_oracle_expected_chains, ModeSpec};
use symmcmc::data::{
    gen_regression2d, gen_sinusoidal, load_csv, split_standardize, Dataset, DatasetMeta,
    SinusoidalSpec,
};
use symmcmc::model::{deep_ensemble, map_estimate, MapConfig, ParamState, RegressionData};
use symmcmc::net::Architecture;
use symmcmc::removal::{geometry_removal, RemovalConfig};
use symmcmc::sampler::{sample_posterior, SampleSet, SamplerConfig};

#[derive(Parser)]
#[command(name = "symmcmc", version, about = "Symmetry-aware MCMC for small tanh MLPs")]
struct Cli {
    /// Worker threads for chain/oracle pools (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write a standardized train/test split.
    GenData(GenDataArgs),
    /// Run many independent NUTS chains over the BNN posterior.
    Sample(SampleArgs),
    /// Evaluate the chain-count bound for given mode probabilities.
    Bound(BoundArgs),
    /// Remove equioutput symmetries from a sample file post-hoc.
    RemoveSymmetries(RemoveArgs),
    /// Compute test LPPD (and optionally a predictive grid) from samples.
    Evaluate(EvaluateArgs),
    /// Track the KL divergence between consecutive predictive densities.
    KlTrack(KlTrackArgs),
    /// Spectral clustering of sampled parameter vectors.
    Cluster(ClusterArgs),
    /// Maximum-a-posteriori estimation.
    Map(MapArgs),
    /// Deep ensemble of independent MAP runs.
    Ensemble(EnsembleArgs),
    /// Run a full experiment described by a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Regression2d,
    Sinusoidal,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "regression2d")]
    kind: DataKind,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix: writes PREFIX_train.csv, PREFIX_test.csv, PREFIX_meta.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Skip splitting; write the raw dataset to PREFIX.csv instead.
    #[arg(long, default_value_t = false)]
    raw: bool,
    /// Sinusoidal x intervals as `a:b,c:d`.
    #[arg(long, default_value = "-1:1")]
    intervals: String,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.5)]
    frequency: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated target column names in the data CSV.
    #[arg(long, default_value = "y1")]
    targets: String,
    #[arg(long, default_value_t = 4)]
    chains: u64,
    #[arg(long, default_value_t = 1)]
    draws_per_chain: usize,
    #[arg(long, default_value_t = 1024)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    step_size: f64,
    #[arg(long, default_value_t = 0.8)]
    target_accept: f64,
    #[arg(long, default_value_t = 10)]
    max_depth: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    /// Comma-separated mode probabilities, e.g. `0.57,0.35,0.08`.
    #[arg(long)]
    pi: String,
    #[arg(long, default_value_t = 0.99)]
    target: f64,
    /// Also run the Monte Carlo oracle with this many trials.
    #[arg(long)]
    mc_trials: Option<u64>,
    #[arg(long, default_value_t = 0)]
    mc_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RemoveArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1024)]
    knn: usize,
    #[arg(long, default_value_t = 256)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 1.0)]
    cost: f64,
    #[arg(long, default_value_t = 1.0)]
    sim_sigma: f64,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = -3.0)]
    x_min: f64,
    #[arg(long, default_value_t = 3.0)]
    x_max: f64,
    #[arg(long, default_value_t = 61)]
    x_points: usize,
    #[arg(long, default_value_t = -3.0)]
    y_min: f64,
    #[arg(long, default_value_t = 3.0)]
    y_max: f64,
    #[arg(long, default_value_t = 121)]
    y_points: usize,
    /// Input dimension swept by the grid (others held at zero).
    #[arg(long, default_value_t = 0)]
    slice_dim: usize,
}

impl GridArgs {
    fn spec(&self) -> GridSpec {
        GridSpec {
            x_range: (self.x_min, self.x_max),
            x_points: self.x_points,
            y_range: (self.y_min, self.y_max),
            y_points: self.y_points,
            slice_dim: self.slice_dim,
            fixed_input: Vec::new(),
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "y1")]
    targets: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump the predictive grid as CSV (x, y, density).
    #[arg(long)]
    grid_out: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct KlTrackArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    /// Output CSV of (draw index, KL).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    knn: usize,
    #[arg(long, default_value_t = 1.0)]
    sim_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV of (draw index, cluster label).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y1")]
    targets: String,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV row of d+1 values (theta in layout order, then log_sigma).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y1")]
    targets: String,
    #[arg(long, default_value_t = 10)]
    members: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV: one row of d+1 values per member.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

/// A whole experiment: dataset, sampler, optional removal, optional bound.
#[derive(Debug, Deserialize)]
struct ExperimentConfig {
    arch: Architecture,
    dataset: DatasetSpec,
    #[serde(default = "default_train_fraction")]
    train_fraction: f64,
    chains: u64,
    #[serde(default = "default_draws")]
    draws_per_chain: usize,
    #[serde(default = "default_warmup")]
    warmup: usize,
    #[serde(default)]
    removal: Option<RemovalSettings>,
    #[serde(default)]
    bound: Option<BoundSpec>,
    out_dir: PathBuf,
    seed: u64,
}

fn default_train_fraction() -> f64 {
    0.8
}
fn default_draws() -> usize {
    1
}
fn default_warmup() -> usize {
    1024
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum DatasetSpec {
    Regression2d {
        n: usize,
    },
    Sinusoidal {
        n: usize,
        #[serde(flatten)]
        spec: SinusoidalSpec,
    },
    Csv {
        path: PathBuf,
        targets: Vec<String>,
    },
}

#[derive(Debug, Deserialize)]
struct RemovalSettings {
    #[serde(default = "default_cost")]
    cost: f64,
    #[serde(default = "default_restarts")]
    restarts: usize,
    #[serde(default = "default_knn")]
    knn: usize,
    #[serde(default = "default_iters")]
    iterations: usize,
    #[serde(default = "default_sigma")]
    sim_sigma: f64,
}

fn default_cost() -> f64 {
    1.0
}
fn default_restarts() -> usize {
    8
}
fn default_knn() -> usize {
    1024
}
fn default_iters() -> usize {
    256
}
fn default_sigma() -> f64 {
    1.0
}

impl RemovalSettings {
    fn config(&self) -> RemovalConfig {
        RemovalConfig {
            cost: self.cost,
            restarts: self.restarts,
            knn: self.knn,
            iterations: self.iterations,
            sim_sigma: self.sim_sigma,
        }
    }
}

#[derive(Debug, Deserialize)]
struct BoundSpec {
    pi: Vec<f64>,
    target: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        // Ignore failure: the pool may already exist in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let stage = stage_name(&cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let cause: Vec<String> = err.chain().map(|c| c.to_string()).collect();
            eprintln!(
                "{}",
                serde_json::to_string(&json!({"stage": stage, "cause": cause})).unwrap()
            );
            ExitCode::FAILURE
        }
    }
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::GenData(_) => "gen-data",
        Command::Sample(_) => "sample",
        Command::Bound(_) => "bound",
        Command::RemoveSymmetries(_) => "remove-symmetries",
        Command::Evaluate(_) => "evaluate",
        Command::KlTrack(_) => "kl-track",
        Command::Cluster(_) => "cluster",
        Command::Map(_) => "map",
        Command::Ensemble(_) => "ensemble",
        Command::Pipeline(_) => "pipeline",
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Bound(args) => cmd_bound(args),
        Command::RemoveSymmetries(args) => cmd_remove(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::KlTrack(args) => cmd_kl_track(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Map(args) => cmd_map(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    }
}

fn emit(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            std::fs::write(path, text + "\n").with_context(|| format!("writing {path:?}"))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn load_arch(path: &Path) -> Result<Architecture> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
    Ok(Architecture::from_json(&text)?)
}

fn parse_targets(spec: &str) -> Vec<String> {
    spec.split(',').map(|s| s.trim().to_string()).collect()
}

fn load_regression(path: &Path, targets: &str, arch: &Architecture) -> Result<RegressionData> {
    let ds = load_csv(path, &parse_targets(targets))
        .with_context(|| format!("loading dataset {path:?}"))?;
    let data = ds.regression()?;
    data.check_arch(arch)?;
    Ok(data)
}

fn parse_intervals(spec: &str) -> Result<Vec<(f64, f64)>> {
    spec.split(',')
        .map(|part| {
            let (a, b) = part
                .split_once(':')
                .with_context(|| format!("interval {part:?} is not of the form a:b"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn generate_dataset(args: &GenDataArgs) -> Result<Dataset> {
    Ok(match args.kind {
        DataKind::Regression2d => gen_regression2d(args.n, args.seed),
        DataKind::Sinusoidal => {
            let spec = SinusoidalSpec {
                intervals: parse_intervals(&args.intervals)?,
                amplitude: args.amplitude,
                frequency: args.frequency,
                noise_std: args.noise,
            };
            gen_sinusoidal(args.n, args.seed, &spec)?
        }
    })
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(suffix);
    prefix.with_file_name(name)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let ds = generate_dataset(&args)?;
    if args.raw {
        let path = prefixed(&args.out, ".csv");
        ds.write_csv(&path)?;
        eprintln!("wrote {} rows to {path:?}", ds.len());
        return emit(None, &json!({"name": ds.name, "n": ds.len(), "files": [path]}));
    }
    let split = split_standardize(&ds, args.train_fraction, args.seed)?;
    for col in &split.standardization.degenerate_columns {
        eprintln!("warning: column {col} has zero training variance; left unscaled");
    }
    let train_path = prefixed(&args.out, "_train.csv");
    let test_path = prefixed(&args.out, "_test.csv");
    let meta_path = prefixed(&args.out, "_meta.json");
    split.train.write_csv(&train_path)?;
    split.test.write_csv(&test_path)?;
    let meta = DatasetMeta {
        name: ds.name.clone(),
        seed: args.seed,
        train_fraction: args.train_fraction,
        n_train: split.train.len(),
        n_test: split.test.len(),
        standardization: split.standardization.clone(),
    };
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
    eprintln!(
        "wrote {} train / {} test rows (standardized) under {:?}",
        split.train.len(),
        split.test.len(),
        args.out
    );
    emit(
        None,
        &json!({
            "name": ds.name,
            "n": ds.len(),
            "n_train": split.train.len(),
            "n_test": split.test.len(),
            "files": [train_path, test_path, meta_path],
        }),
    )
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let data = load_regression(&args.data, &args.targets, &arch)?;
    let config = SamplerConfig {
        warmup_steps: args.warmup,
        initial_step_size: args.step_size,
        target_accept: args.target_accept,
        max_depth: args.max_depth,
        seed: args.seed,
    };
    let (samples, diagnostics) =
        sample_posterior(&arch, &data, &config, args.chains, args.draws_per_chain)?;
    samples.write_csv(&args.out)?;
    let mean_accept = diagnostics.chains.iter().map(|c| c.mean_accept).sum::<f64>()
        / diagnostics.chains.len().max(1) as f64;
    eprintln!(
        "sampled {} draws from {} chains -> {:?} (mean accept {mean_accept:.3})",
        samples.len(),
        args.chains,
        args.out
    );
    emit(
        None,
        &json!({
            "draws": samples.len(),
            "chains": args.chains,
            "failed_chains": diagnostics.failed_chains,
            "total_divergences": diagnostics.total_divergences,
            "excessive_divergence": diagnostics.excessive_divergence,
            "mean_accept": mean_accept,
            "out": args.out,
        }),
    )
}

fn cmd_bound(args: BoundArgs) -> Result<()> {
    let pi: Vec<f64> = args
        .pi
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad probability {p:?}")))
        .collect::<Result<_>>()?;
    let spec = ModeSpec::new(pi)?;
    let result = bound_result(&spec, args.target)?;
    let mut value = serde_json::to_value(&result)?;
    if let Some(trials) = args.mc_trials {
        let mc = mc_oracle_expected_chains(&spec, trials, args.mc_seed)?;
        value["mc_expected_chains"] = json!(mc.mean);
        value["mc_std_error"] = json!(mc.std_error);
        value["mc_trials"] = json!(mc.trials);
    }
    eprintln!(
        "E(G) = {:.4}; {} chains reach P >= {}",
        result.expected_chains, result.required_chains, args.target
    );
    emit(args.out.as_deref(), &value)
}

fn cmd_remove(args: RemoveArgs) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let mut samples = SampleSet::read_csv(&args.samples, arch)?;
    let config = RemovalConfig {
        cost: args.cost,
        restarts: args.restarts,
        knn: args.knn,
        iterations: args.iters,
        sim_sigma: args.sim_sigma,
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(args.seed);
    let report = geometry_removal(&mut samples, &config, &mut rng)?;
    samples.write_csv(&args.out)?;
    let report_value = serde_json::to_value(&report)?;
    if let Some(report_path) = &args.report {
        std::fs::write(report_path, serde_json::to_string_pretty(&report_value)? + "\n")?;
    }
    let flips: usize = report.layers.iter().map(|l| l.flips).sum();
    let perms: usize = report.layers.iter().map(|l| l.permutation_changes).sum();
    eprintln!(
        "canonicalized {} draws ({flips} sign flips, {perms} permutations) -> {:?}",
        samples.len(),
        args.out
    );
    emit(None, &json!({"out": args.out, "report": report_value}))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let samples = SampleSet::read_csv(&args.samples, arch.clone())?;
    let test = load_regression(&args.test, &args.targets, &arch)?;
    let result = lppd(&samples, &test)?;
    if let Some(grid_path) = &args.grid_out {
        let grid = ppd_grid(&samples, &args.grid.spec())?;
        std::fs::write(grid_path, grid.to_csv())?;
        eprintln!("wrote predictive grid to {grid_path:?}");
    }
    eprintln!(
        "mean LPPD {:.4} +- {:.4} over {} test points, {} draws",
        result.mean,
        result.std_error,
        result.per_point.len(),
        samples.len()
    );
    emit(
        args.out.as_deref(),
        &json!({
            "mean_lppd": result.mean,
            "se": result.std_error,
            "per_point": result.per_point,
        }),
    )
}

fn cmd_kl_track(args: KlTrackArgs) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let samples = SampleSet::read_csv(&args.samples, arch)?;
    let kls = kl_consecutive(&samples, &args.grid.spec())?;
    let mut csv = String::from("draw,kl\n");
    for (i, kl) in kls.iter().enumerate() {
        csv.push_str(&format!("{},{kl}\n", i + 2));
    }
    std::fs::write(&args.out, csv)?;
    eprintln!(
        "tracked {} consecutive-KL values (last = {:.3e}) -> {:?}",
        kls.len(),
        kls.last().unwrap(),
        args.out
    );
    emit(
        None,
        &json!({"draws": samples.len(), "final_kl": kls.last(), "out": args.out}),
    )
}

fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let samples = SampleSet::read_csv(&args.samples, arch)?;
    let points: Vec<Vec<f64>> = samples.states.iter().map(|s| s.theta.clone()).collect();
    let config = SpectralConfig {
        k_neighbors: args.knn,
        sim_sigma: args.sim_sigma,
        seed: args.seed,
        ..SpectralConfig::default()
    };
    let result = spectral_cluster(&points, args.k, &config)?;
    let mut csv = String::from("draw,cluster\n");
    for (i, label) in result.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{label}\n"));
    }
    std::fs::write(&args.out, csv)?;
    let mut counts = vec![0usize; args.k];
    for &l in &result.labels {
        counts[l] += 1;
    }
    eprintln!("clustered {} draws into {:?} -> {:?}", points.len(), counts, args.out);
    emit(
        None,
        &json!({"counts": counts, "eigenvalues": result.eigenvalues, "out": args.out}),
    )
}

fn param_state_csv(states: &[ParamState]) -> String {
    let mut out = String::new();
    for state in states {
        let row: Vec<String> = state.to_flat().iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn cmd_map(args: MapArgs) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let data = load_regression(&args.data, &args.targets, &arch)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(args.seed);
    let init = ParamState::prior_draw(&arch, &mut rng);
    let run = map_estimate(
        &data,
        &arch,
        &init,
        &MapConfig {
            steps: args.steps,
            learning_rate: args.lr,
        },
    )?;
    std::fs::write(&args.out, param_state_csv(std::slice::from_ref(&run.state)))?;
    eprintln!("MAP loss {:.6} (sigma {:.4}) -> {:?}", run.loss, run.state.sigma(), args.out);
    emit(
        None,
        &json!({"loss": run.loss, "sigma": run.state.sigma(), "out": args.out}),
    )
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<()> {
    if args.members == 0 {
        bail!("ensemble needs at least one member");
    }
    let arch = load_arch(&args.arch)?;
    let data = load_regression(&args.data, &args.targets, &arch)?;
    let seeds: Vec<u64> = (0..args.members as u64).map(|j| args.seed + j).collect();
    let runs = deep_ensemble(
        &data,
        &arch,
        &seeds,
        &MapConfig {
            steps: args.steps,
            learning_rate: args.lr,
        },
    )?;
    let states: Vec<ParamState> = runs.iter().map(|r| r.state.clone()).collect();
    std::fs::write(&args.out, param_state_csv(&states))?;
    let losses: Vec<f64> = runs.iter().map(|r| r.loss).collect();
    eprintln!("{} ensemble members -> {:?}", runs.len(), args.out);
    emit(None, &json!({"losses": losses, "out": args.out}))
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {:?}", args.config))?;
    let config: ExperimentConfig = serde_json::from_str(&text).context("parsing config")?;
    config.arch.validate()?;
    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {:?}", config.out_dir))?;
    let out = |name: &str| config.out_dir.join(name);

    // Stage 1: dataset.
    let raw = match &config.dataset {
        DatasetSpec::Regression2d { n } => gen_regression2d(*n, config.seed),
        DatasetSpec::Sinusoidal { n, spec } => gen_sinusoidal(*n, config.seed, spec)?,
        DatasetSpec::Csv { path, targets } => load_csv(path, targets)?,
    };
    let split = split_standardize(&raw, config.train_fraction, config.seed)?;
    split.train.write_csv(&out("train.csv"))?;
    split.test.write_csv(&out("test.csv"))?;
    std::fs::write(out("arch.json"), config.arch.to_json() + "\n")?;
    let meta = DatasetMeta {
        name: raw.name.clone(),
        seed: config.seed,
        train_fraction: config.train_fraction,
        n_train: split.train.len(),
        n_test: split.test.len(),
        standardization: split.standardization.clone(),
    };
    std::fs::write(out("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    let train = split.train.regression()?;
    let test = split.test.regression()?;
    train.check_arch(&config.arch)?;
    eprintln!("pipeline: dataset {} ({} train / {} test)", raw.name, train.len(), test.len());

    // Stage 2: sampling.
    let sampler_config = SamplerConfig {
        warmup_steps: config.warmup,
        seed: config.seed,
        ..SamplerConfig::default()
    };
    let (samples, diagnostics) = sample_posterior(
        &config.arch,
        &train,
        &sampler_config,
        config.chains,
        config.draws_per_chain,
    )?;
    samples.write_csv(&out("samples.csv"))?;
    eprintln!(
        "pipeline: {} draws sampled ({} failed chains)",
        samples.len(),
        diagnostics.failed_chains.len()
    );

    // Stage 3: optional symmetry removal.
    let removal_report = if let Some(settings) = &config.removal {
        let mut canonical = samples.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
        let report = geometry_removal(&mut canonical, &settings.config(), &mut rng)?;
        canonical.write_csv(&out("canonical.csv"))?;
        let value = serde_json::to_value(&report)?;
        std::fs::write(out("removal_report.json"), serde_json::to_string_pretty(&value)? + "\n")?;
        eprintln!("pipeline: symmetry removal done");
        Some(value)
    } else {
        None
    };

    // Stage 4: evaluation.
    let evaluation = lppd(&samples, &test)?;
    let eval_value = json!({
        "mean_lppd": evaluation.mean,
        "se": evaluation.std_error,
        "per_point": evaluation.per_point,
    });
    std::fs::write(out("evaluate.json"), serde_json::to_string_pretty(&eval_value)? + "\n")?;
    eprintln!(
        "pipeline: test LPPD {:.4} +- {:.4}",
        evaluation.mean, evaluation.std_error
    );

    // Stage 5: optional chain bound.
    let bound_value = if let Some(bound) = &config.bound {
        let spec = ModeSpec::new(bound.pi.clone())?;
        let result = bound_result(&spec, bound.target)?;
        let value = serde_json::to_value(&result)?;
        std::fs::write(out("bound.json"), serde_json::to_string_pretty(&value)? + "\n")?;
        Some(value)
    } else {
        None
    };

    emit(
        None,
        &json!({
            "out_dir": config.out_dir,
            "draws": samples.len(),
            "failed_chains": diagnostics.failed_chains.len(),
            "mean_lppd": evaluation.mean,
            "se": evaluation.std_error,
            "removal": removal_report.is_some(),
            "bound": bound_value,
        }),
    )
}
