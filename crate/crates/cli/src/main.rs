//! Command-line entry points: the full pipeline plus each phase standalone.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpmob_core::dp::allocate_budget;
use dpmob_core::evaluate::{full_report, EvalConfig, MetricReport};
use dpmob_core::generate::{generate_dataset, GenConfig};
use dpmob_core::geo::GridSpec;
use dpmob_core::model::{Hyper, ModelParams};
use dpmob_core::pipeline::{run_pipeline, Arm, DataSource, PipelineConfig};
use dpmob_core::preprocess::io as dataset_io;
use dpmob_core::preprocess::{discretize, extract_stay_points, Dataset};
use dpmob_core::pretrain::{
    build_transition_matrix, pretrain, privatize_transition, DpTransitionMatrix, PretrainConfig,
};
use dpmob_core::train::{dpsgd_train, TrainConfig};
use dpmob_core::{checkpoint, rng};

#[derive(Parser)]
#[command(name = "dpmob", version, about = "Differentially private mobility synthesis")]
struct Cli {
    /// Worker threads for parallel phases (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a privacy budget between pretraining and DP-SGD.
    Budget(BudgetArgs),
    /// Emit a synthetic ablation dataset (random or straight).
    SynthData(SynthArgs),
    /// Extract stay points from raw GPS traces and discretize them.
    Preprocess(PreprocessArgs),
    /// Release a private transition matrix and pretrain a model on it.
    Pretrain(PretrainArgs),
    /// DP-SGD training from a checkpoint.
    Train(TrainArgs),
    /// Sample synthetic trajectories from a trained checkpoint.
    Generate(GenerateArgs),
    /// Score a generated dataset against a real one.
    Evaluate(EvaluateArgs),
    /// Run the full pipeline.
    Run(Box<RunArgs>),
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    n_records: usize,
    #[arg(long, default_value_t = 2)]
    i_res: u8,
    #[arg(long, default_value_t = 0.018)]
    c: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// "random" or "straight".
    #[arg(long)]
    kind: String,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// CSV with header traj_id,lat,lon,unix_timestamp.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    min_lat: f64,
    #[arg(long)]
    min_lon: f64,
    #[arg(long)]
    max_lat: f64,
    #[arg(long)]
    max_lon: f64,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    n_time: usize,
    #[arg(long, default_value_t = 200.0)]
    radius_m: f64,
    #[arg(long, default_value_t = 10.0)]
    min_duration_min: f64,
    /// Horizon start (unix seconds); defaults to the earliest fix.
    #[arg(long)]
    t_start: Option<i64>,
    /// Horizon end (unix seconds, exclusive); defaults past the latest fix.
    #[arg(long)]
    t_end: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Budget spent on the transition release (ignored with --dptran).
    #[arg(long, default_value_t = 0.5)]
    epsilon2: f64,
    /// Reuse an already-released matrix instead of spending budget.
    #[arg(long)]
    dptran: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    i_res: u8,
    #[arg(long, default_value = "hrnet")]
    model_kind: String,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Where to store the released matrix (defaults next to the checkpoint).
    #[arg(long)]
    out_dptran: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint_in: PathBuf,
    #[arg(long)]
    epsilon1: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 10.0)]
    epochs: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = true)]
    multitask: bool,
    #[arg(long)]
    out: PathBuf,
    /// Training log destination.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset file to copy the bounding box from (unit box otherwise).
    #[arg(long)]
    grid_from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    gen: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5.0)]
    phi: f64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Write metrics.txt / metrics.csv here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key-value config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Discretized dataset file, or synthetic "random:w:count" /
    /// "straight:w:count".
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    arm: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_dim: Option<usize>,
    #[arg(long)]
    n_hidden: Option<usize>,
    #[arg(long)]
    n_key: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long)]
    n_time_dim: Option<usize>,
    #[arg(long)]
    i_res: Option<u8>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    pretrain_batch: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    gen_count: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::Budget(args) => {
            let budget = allocate_budget(args.epsilon, args.w, args.n_records, args.i_res, args.c)?;
            println!("epsilon_pretrain {:.6}", budget.epsilon_pretrain);
            println!("epsilon_sgd {:.6}", budget.epsilon_sgd);
            Ok(())
        }
        Command::SynthData(args) => {
            let ds = match args.kind.as_str() {
                "random" => {
                    dpmob_core::preprocess::gen_random_dataset(args.w, args.count, args.seed)?
                }
                "straight" => {
                    dpmob_core::preprocess::gen_straight_dataset(args.w, args.count, args.seed)?
                }
                other => return Err(format!("unknown dataset kind {other}").into()),
            };
            dataset_io::save_dataset(&ds, &args.out)?;
            println!("wrote {} trajectories to {}", ds.len(), args.out.display());
            Ok(())
        }
        Command::Preprocess(args) => {
            let raws = dataset_io::load_raw_csv(&args.input)?;
            let grid = GridSpec::with_width(
                args.min_lat,
                args.min_lon,
                args.max_lat,
                args.max_lon,
                args.w,
            )?;
            let t_start = args.t_start.unwrap_or_else(|| {
                raws.iter()
                    .filter_map(|r| r.points.first())
                    .map(|p| p.time)
                    .min()
                    .unwrap_or(0)
            });
            let t_end = args.t_end.unwrap_or_else(|| {
                raws.iter()
                    .filter_map(|r| r.points.last())
                    .map(|p| p.time)
                    .max()
                    .unwrap_or(0)
                    + 1
            });
            let mut trajectories = Vec::new();
            let mut dropped = 0usize;
            for raw in &raws {
                let stays = extract_stay_points(raw, args.radius_m, args.min_duration_min);
                let stays: Vec<_> = stays
                    .into_iter()
                    .filter(|s| {
                        grid.contains(s.lat, s.lon) && s.arrival >= t_start && s.arrival < t_end
                    })
                    .collect();
                match discretize(&stays, &grid, args.n_time, (t_start, t_end)) {
                    Ok(t) => trajectories.push(t),
                    Err(dpmob_core::Error::EmptyTrajectory) => dropped += 1,
                    Err(e) => return Err(e.into()),
                }
            }
            let ds = Dataset {
                grid,
                n_time: args.n_time,
                trajectories,
            };
            ds.validate()?;
            dataset_io::save_dataset(&ds, &args.out)?;
            println!(
                "wrote {} trajectories ({} traces dropped) to {}",
                ds.len(),
                dropped,
                args.out.display()
            );
            Ok(())
        }
        Command::Pretrain(args) => {
            let kind = dpmob_core::model::ModelKind::from_tag(&args.model_kind)?;
            let data = dataset_io::load_dataset(&args.data)?;
            let dptran = match &args.dptran {
                Some(path) => DpTransitionMatrix::load(path)?,
                None => {
                    let tran = build_transition_matrix(&data, args.i_res)?;
                    let mut noise_rng = rng::stream(rng::derive_seed(args.seed, "laplace"));
                    privatize_transition(&tran, args.epsilon2, 1e-4, &mut noise_rng)?
                }
            };
            let mut params = ModelParams::new(
                kind,
                Hyper::default(),
                data.grid.depth(),
                data.n_time,
                rng::derive_seed(args.seed, "init"),
            );
            let stats = pretrain(
                &mut params,
                &dptran,
                &PretrainConfig {
                    steps: args.steps,
                    batch: args.batch,
                    learning_rate: args.lr,
                    seed: rng::derive_seed(args.seed, "pretrain"),
                    eval_ratios: 100,
                },
            )?;
            checkpoint::save_model(&params, &args.out)?;
            let dptran_path = args
                .out_dptran
                .unwrap_or_else(|| args.out.with_extension("dptran"));
            dptran.save(&dptran_path)?;
            println!(
                "pretrained {} steps, mean one-hot KL {:.4} -> {:.4}; epsilon2 {}",
                stats.steps, stats.initial_kl, stats.final_kl, dptran.epsilon
            );
            Ok(())
        }
        Command::Train(args) => {
            let data = dataset_io::load_dataset(&args.data)?;
            let mut params = checkpoint::load_model::<f64>(&args.checkpoint_in)?;
            let config = TrainConfig {
                clip_norm: args.clip_norm,
                sigma: args.sigma,
                expected_batch: args.batch,
                max_epochs: args.epochs,
                learning_rate: args.lr,
                epsilon_sgd: args.epsilon1,
                delta: args.delta,
                seed: args.seed,
                multitask: args.multitask
                    && params.kind() == dpmob_core::model::ModelKind::Hierarchical,
                checkpoint_every: 0,
                checkpoint_dir: None,
            };
            let report = dpsgd_train(&mut params, &data, &config)?;
            checkpoint::save_model(&params, &args.out)?;
            if let Some(log) = &args.log {
                std::fs::write(log, report.log.join("\n") + "\n")?;
            }
            println!(
                "trained {} steps at sigma {:.4}, q {:.6}; epsilon spent {:.4} (delta {})",
                report.steps_run, report.sigma, report.sampling_rate, report.epsilon_spent,
                report.delta
            );
            Ok(())
        }
        Command::Generate(args) => {
            let params = checkpoint::load_model::<f64>(&args.checkpoint)?;
            let grid = match &args.grid_from {
                Some(path) => dataset_io::load_dataset(path)?.grid,
                None => GridSpec::with_width(0.0, 0.0, 1.0, 1.0, params.width())?,
            };
            let config = GenConfig {
                count: args.count,
                max_len: args.max_len,
                seed: args.seed,
                mask_current: true,
            };
            let ds = generate_dataset(&params, &grid, &config)?;
            dataset_io::save_dataset(&ds, &args.out)?;
            println!("wrote {} trajectories to {}", ds.len(), args.out.display());
            Ok(())
        }
        Command::Evaluate(args) => {
            let real = dataset_io::load_dataset(&args.real)?;
            let gen = dataset_io::load_dataset(&args.gen)?;
            let config = EvalConfig {
                seed: args.seed,
                phi: args.phi,
                n_bins: args.bins,
                ..EvalConfig::default()
            };
            let report = full_report(&real, &gen, &config)?;
            print!("{}", report.text_block());
            if let Some(dir) = &args.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("metrics.txt"), report.text_block())?;
                std::fs::write(
                    dir.join("metrics.csv"),
                    format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row()),
                )?;
            }
            Ok(())
        }
        Command::Run(args) => {
            let config = build_run_config(*args)?;
            let artifacts = run_pipeline(&config)?;
            print!("{}", artifacts.privacy_text);
            print!("{}", artifacts.metrics.text_block());
            Ok(())
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "data", "arm", "epsilon", "delta", "seed", "clip-norm", "sigma", "batch", "epochs", "lr",
    "n-dim", "n-hidden", "n-key", "mlp-hidden", "n-time-dim", "i-res", "pretrain-steps",
    "pretrain-batch", "pretrain-lr", "gen-count", "max-len", "out",
];

fn parse_config_file(
    path: &PathBuf,
) -> Result<HashMap<String, String>, Box<dyn std::error::Error>> {
    let mut map = HashMap::new();
    for (lineno, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(|c: char| c.is_whitespace() || c == '=')
            .ok_or_else(|| format!("{}:{}: expected 'key value'", path.display(), lineno + 1))?;
        if !CONFIG_KEYS.contains(&key) {
            return Err(
                format!("{}:{}: unknown config key {key}", path.display(), lineno + 1).into(),
            );
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn build_run_config(args: RunArgs) -> Result<PipelineConfig, Box<dyn std::error::Error>> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => HashMap::new(),
    };
    fn pick<T: std::str::FromStr>(
        flag: Option<T>,
        file: &HashMap<String, String>,
        key: &str,
    ) -> Result<Option<T>, Box<dyn std::error::Error>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match file.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| format!("bad config value for {key}: {raw}").into()),
            None => Ok(None),
        }
    }

    let data_spec = pick(args.data, &file, "data")?
        .ok_or("run needs --data (path or random:w:count / straight:w:count)")?;
    let data = parse_data_source(&data_spec)?;
    let arm = Arm::from_tag(&pick(args.arm, &file, "arm")?.unwrap_or_else(|| "full".into()))?;
    let epsilon = pick(args.epsilon, &file, "epsilon")?.unwrap_or(2.0);
    let delta = pick(args.delta, &file, "delta")?.unwrap_or(1e-5);
    let seed = pick(args.seed, &file, "seed")?.unwrap_or(0);

    let mut config = PipelineConfig::new(data, arm, epsilon, delta, seed);
    if let Some(v) = pick(args.clip_norm, &file, "clip-norm")? {
        config.clip_norm = v;
    }
    config.sigma = pick(args.sigma, &file, "sigma")?;
    if let Some(v) = pick(args.batch, &file, "batch")? {
        config.batch = v;
    }
    if let Some(v) = pick(args.epochs, &file, "epochs")? {
        config.epochs = v;
    }
    if let Some(v) = pick(args.lr, &file, "lr")? {
        config.learning_rate = v;
    }
    if let Some(v) = pick(args.n_dim, &file, "n-dim")? {
        config.hyper.n_dim = v;
    }
    if let Some(v) = pick(args.n_hidden, &file, "n-hidden")? {
        config.hyper.n_hidden = v;
    }
    if let Some(v) = pick(args.n_key, &file, "n-key")? {
        config.hyper.n_key = v;
    }
    if let Some(v) = pick(args.mlp_hidden, &file, "mlp-hidden")? {
        config.hyper.mlp_hidden = v;
    }
    if let Some(v) = pick(args.n_time_dim, &file, "n-time-dim")? {
        config.hyper.n_time_dim = v;
    }
    if let Some(v) = pick(args.i_res, &file, "i-res")? {
        config.i_res = v;
    }
    if let Some(v) = pick(args.pretrain_steps, &file, "pretrain-steps")? {
        config.pretrain_steps = v;
    }
    if let Some(v) = pick(args.pretrain_batch, &file, "pretrain-batch")? {
        config.pretrain_batch = v;
    }
    if let Some(v) = pick(args.pretrain_lr, &file, "pretrain-lr")? {
        config.pretrain_lr = v;
    }
    config.gen_count = pick(args.gen_count, &file, "gen-count")?;
    if let Some(v) = pick(args.max_len, &file, "max-len")? {
        config.gen_max_len = v;
    }
    config.out_dir = pick(args.out, &file, "out")?;
    config.eval.seed = seed;
    Ok(config)
}

fn parse_data_source(spec: &str) -> Result<DataSource, Box<dyn std::error::Error>> {
    if let Some(rest) = spec.strip_prefix("random:") {
        let (w, count) = rest.split_once(':').ok_or("expected random:w:count")?;
        return Ok(DataSource::Random {
            w: w.parse()?,
            count: count.parse()?,
        });
    }
    if let Some(rest) = spec.strip_prefix("straight:") {
        let (w, count) = rest.split_once(':').ok_or("expected straight:w:count")?;
        return Ok(DataSource::Straight {
            w: w.parse()?,
            count: count.parse()?,
        });
    }
    Ok(DataSource::Path(PathBuf::from(spec)))
}
