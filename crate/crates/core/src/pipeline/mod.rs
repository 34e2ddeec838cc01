//! End-to-end orchestration: budget split, private transition release,
//! pretraining, DP-SGD, synthesis, and evaluation, with per-phase seeds
//! derived from one master seed and an audit of raw-data touches.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::dp::{allocate_budget, privacy_report, NoiseParams, PrivacyBudget};
use crate::evaluate::{full_report, EvalConfig, MetricReport};
use crate::generate::{generate_dataset, GenConfig};
use crate::model::{Hyper, ModelKind, ModelParams};
use crate::preprocess::{gen_random_dataset, gen_straight_dataset, io as dataset_io, Dataset};
use crate::pretrain::{build_transition_matrix, privatize_transition, pretrain, PretrainConfig};
use crate::rng;
use crate::train::{dpsgd_train, TrainConfig, TrainReport};
use crate::{Error, Result};

/// The six ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    BaselinePretrain,
    Deconv,
    DeconvPretrain,
    DeconvMultitask,
    Full,
}

impl Arm {
    pub fn tag(&self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::BaselinePretrain => "baseline+pretrain",
            Arm::Deconv => "deconv",
            Arm::DeconvPretrain => "deconv+pretrain",
            Arm::DeconvMultitask => "deconv+multitask",
            Arm::Full => "full",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "baseline" => Arm::Baseline,
            "baseline+pretrain" => Arm::BaselinePretrain,
            "deconv" => Arm::Deconv,
            "deconv+pretrain" => Arm::DeconvPretrain,
            "deconv+multitask" => Arm::DeconvMultitask,
            "full" => Arm::Full,
            other => return Err(Error::Parse(format!("unknown arm {other}"))),
        })
    }

    pub fn model_kind(&self) -> ModelKind {
        match self {
            Arm::Baseline | Arm::BaselinePretrain => ModelKind::Baseline,
            _ => ModelKind::Hierarchical,
        }
    }

    pub fn multitask(&self) -> bool {
        matches!(self, Arm::DeconvMultitask | Arm::Full)
    }

    pub fn pretrains(&self) -> bool {
        matches!(self, Arm::BaselinePretrain | Arm::DeconvPretrain | Arm::Full)
    }

    pub fn all() -> [Arm; 6] {
        [
            Arm::Baseline,
            Arm::BaselinePretrain,
            Arm::Deconv,
            Arm::DeconvPretrain,
            Arm::DeconvMultitask,
            Arm::Full,
        ]
    }
}

/// Where the training data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// A discretized dataset file.
    Path(PathBuf),
    /// Synthetic: uniform length-2 trajectories.
    Random { w: usize, count: usize },
    /// Synthetic: length-3 straight columns.
    Straight { w: usize, count: usize },
}

/// Full pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub arm: Arm,
    pub epsilon_total: f64,
    pub delta: f64,
    pub seed: u64,
    pub hyper: Hyper,
    /// Transition-matrix resolution for pretraining.
    pub i_res: u8,
    /// Budget-split constant.
    pub snr_c: f64,
    pub smoothing: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub clip_norm: f64,
    pub sigma: Option<f64>,
    pub batch: usize,
    pub epochs: f64,
    pub learning_rate: f64,
    pub gen_count: Option<usize>,
    pub gen_max_len: usize,
    pub eval: EvalConfig,
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(data: DataSource, arm: Arm, epsilon_total: f64, delta: f64, seed: u64) -> Self {
        PipelineConfig {
            data,
            arm,
            epsilon_total,
            delta,
            seed,
            hyper: Hyper::default(),
            i_res: 2,
            snr_c: 0.018,
            smoothing: 1e-4,
            pretrain_steps: 3000,
            pretrain_batch: 32,
            pretrain_lr: 0.05,
            clip_norm: 1.0,
            sigma: None,
            batch: 64,
            epochs: 10.0,
            learning_rate: 0.1,
            gen_count: None,
            gen_max_len: 32,
            eval: EvalConfig::default(),
            out_dir: None,
        }
    }

    /// Flat key-value snapshot sufficient to reproduce the run.
    pub fn snapshot(&self) -> String {
        let data = match &self.data {
            DataSource::Path(p) => format!("data {}", p.display()),
            DataSource::Random { w, count } => format!("data random:{w}:{count}"),
            DataSource::Straight { w, count } => format!("data straight:{w}:{count}"),
        };
        format!(
            "{data}\narm {}\nepsilon {}\ndelta {}\nseed {}\nn_dim {}\nn_hidden {}\nn_key {}\nmlp_hidden {}\nn_time_dim {}\ni_res {}\nsnr_c {}\nsmoothing {}\npretrain_steps {}\npretrain_batch {}\npretrain_lr {}\nclip_norm {}\nsigma {}\nbatch {}\nepochs {}\nlr {}\ngen_count {}\ngen_max_len {}\neval_seed {}\n",
            self.arm.tag(),
            self.epsilon_total,
            self.delta,
            self.seed,
            self.hyper.n_dim,
            self.hyper.n_hidden,
            self.hyper.n_key,
            self.hyper.mlp_hidden,
            self.hyper.n_time_dim,
            self.i_res,
            self.snr_c,
            self.smoothing,
            self.pretrain_steps,
            self.pretrain_batch,
            self.pretrain_lr,
            self.clip_norm,
            self.sigma.map_or("auto".to_string(), |s| s.to_string()),
            self.batch,
            self.epochs,
            self.learning_rate,
            self.gen_count.map_or("auto".to_string(), |c| c.to_string()),
            self.gen_max_len,
            self.eval.seed,
        )
    }
}

/// Counts raw-dataset accesses per pipeline phase. The training data may be
/// touched by exactly two phases: transition-matrix counting and DP-SGD
/// sampling.
pub struct AuditedData {
    dataset: Dataset,
    reads: Mutex<BTreeMap<String, usize>>,
}

impl AuditedData {
    pub fn new(dataset: Dataset) -> Self {
        AuditedData {
            dataset,
            reads: Mutex::new(BTreeMap::new()),
        }
    }

    /// Grant access to the raw trajectories, recording the phase.
    pub fn read(&self, phase: &str) -> &Dataset {
        *self
            .reads
            .lock()
            .unwrap()
            .entry(phase.to_string())
            .or_default() += 1;
        &self.dataset
    }

    /// Metadata access (size, grid); not a raw-data touch.
    pub fn metadata(&self) -> (usize, crate::geo::GridSpec, usize) {
        (
            self.dataset.len(),
            self.dataset.grid.clone(),
            self.dataset.n_time,
        )
    }

    pub fn read_counts(&self) -> BTreeMap<String, usize> {
        self.reads.lock().unwrap().clone()
    }
}

/// Everything a pipeline run produces.
pub struct PipelineArtifacts {
    pub params: ModelParams,
    pub budget: PrivacyBudget,
    pub train_report: Option<TrainReport>,
    pub synthetic: Dataset,
    pub metrics: MetricReport,
    pub privacy_text: String,
    /// Raw-data reads per phase, for the audit invariant.
    pub data_reads: BTreeMap<String, usize>,
}

pub fn load_source(data: &DataSource, seed: u64) -> Result<Dataset> {
    match data {
        DataSource::Path(path) => dataset_io::load_dataset(path),
        DataSource::Random { w, count } => {
            gen_random_dataset(*w, *count, rng::derive_seed(seed, "data"))
        }
        DataSource::Straight { w, count } => {
            gen_straight_dataset(*w, *count, rng::derive_seed(seed, "data"))
        }
    }
}

/// Run the two-phase process end to end: split the budget, release the
/// transition matrix (pretraining arms), pretrain, DP-SGD, synthesize, and
/// score. Skipping pretraining folds its entire budget into DP-SGD.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineArtifacts> {
    let data = AuditedData::new(load_source(&config.data, config.seed)?);
    let (n_records, grid, n_time) = data.metadata();
    if n_records == 0 {
        return Err(Error::Range("empty training dataset".into()));
    }
    let arm = config.arm;

    // Budget split from public metadata only.
    let mut budget = if arm.pretrains() {
        let mut b = allocate_budget(
            config.epsilon_total,
            grid.width(),
            n_records,
            config.i_res,
            config.snr_c,
        )?;
        b.delta = config.delta;
        b
    } else {
        PrivacyBudget {
            epsilon_total: config.epsilon_total,
            epsilon_sgd: config.epsilon_total,
            epsilon_pretrain: 0.0,
            delta: config.delta,
        }
    };

    // Fail fast if no noise level can reach the training budget.
    let q = (config.batch as f64 / n_records as f64).min(1.0);
    let max_steps = ((config.epochs * n_records as f64) / config.batch as f64).ceil() as usize;
    let planned_sigma = if budget.sgd_exhausted() {
        None
    } else {
        Some(match config.sigma {
            Some(s) => s,
            None => crate::train::plan_noise(budget.epsilon_sgd, config.delta, q, max_steps.max(1))?,
        })
    };

    let mut params = ModelParams::new(
        arm.model_kind(),
        config.hyper,
        grid.depth(),
        n_time,
        rng::derive_seed(config.seed, "init"),
    );

    // Phase 1: private transition release + pretraining.
    if arm.pretrains() {
        let tran = build_transition_matrix(data.read("transition"), config.i_res)?;
        let mut noise_rng = rng::stream(rng::derive_seed(config.seed, "laplace"));
        let dptran = privatize_transition(
            &tran,
            budget.epsilon_pretrain,
            config.smoothing,
            &mut noise_rng,
        )?;
        if let Some(dir) = &config.out_dir {
            std::fs::create_dir_all(dir)?;
            dptran.save(&dir.join("transition.dptran"))?;
        }
        pretrain(
            &mut params,
            &dptran,
            &PretrainConfig {
                steps: config.pretrain_steps,
                batch: config.pretrain_batch,
                learning_rate: config.pretrain_lr,
                seed: rng::derive_seed(config.seed, "pretrain"),
                eval_ratios: 32,
            },
        )?;
    }

    // Phase 2: DP-SGD.
    let train_report = if budget.sgd_exhausted() {
        // The split left nothing for training; release the pretrained model.
        None
    } else {
        let train_config = TrainConfig {
            clip_norm: config.clip_norm,
            sigma: planned_sigma,
            expected_batch: config.batch,
            max_epochs: config.epochs,
            learning_rate: config.learning_rate,
            epsilon_sgd: budget.epsilon_sgd,
            delta: config.delta,
            seed: rng::derive_seed(config.seed, "dpsgd"),
            multitask: arm.multitask(),
            checkpoint_every: 0,
            checkpoint_dir: None,
        };
        let report = dpsgd_train(&mut params, data.read("dpsgd"), &train_config)?;
        // Report what the accountant actually charged.
        budget.epsilon_sgd = report.epsilon_spent;
        Some(report)
    };

    // Phase 3: synthesis (parameters only).
    let gen_config = GenConfig {
        count: config.gen_count.unwrap_or(n_records),
        max_len: config.gen_max_len,
        seed: rng::derive_seed(config.seed, "generate"),
        mask_current: true,
    };
    let synthetic = generate_dataset(&params, &grid, &gen_config)?;

    // Phase 4: evaluation against the real data (analysis, not release).
    let metrics = full_report(data.read("evaluate"), &synthetic, &config.eval)?;

    let noise = NoiseParams {
        clip_norm: config.clip_norm,
        sigma: train_report.as_ref().map_or(0.0, |r| r.sigma),
        sampling_rate: train_report.as_ref().map_or(0.0, |r| r.sampling_rate),
        steps: train_report.as_ref().map_or(0, |r| r.steps_run),
    };
    let privacy_text = privacy_report(&budget, &noise);

    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        write_artifacts(dir, config, &params, &synthetic, &metrics, &privacy_text, &train_report)?;
    }

    Ok(PipelineArtifacts {
        params,
        budget,
        train_report,
        synthetic,
        metrics,
        privacy_text,
        data_reads: data.read_counts(),
    })
}

fn write_artifacts(
    dir: &Path,
    config: &PipelineConfig,
    params: &ModelParams,
    synthetic: &Dataset,
    metrics: &MetricReport,
    privacy_text: &str,
    train_report: &Option<TrainReport>,
) -> Result<()> {
    std::fs::write(dir.join("config.snapshot"), config.snapshot())?;
    crate::checkpoint::save_model(params, &dir.join("model.ckpt"))?;
    dataset_io::save_dataset(synthetic, &dir.join("synthetic.traj"))?;
    std::fs::write(dir.join("metrics.txt"), metrics.text_block())?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
    writeln!(csv, "arm,seed,epsilon,{}", MetricReport::csv_header())?;
    writeln!(
        csv,
        "{},{},{},{}",
        config.arm.tag(),
        config.seed,
        config.epsilon_total,
        metrics.csv_row()
    )?;
    csv.flush()?;
    std::fs::write(dir.join("privacy.txt"), privacy_text)?;
    if let Some(report) = train_report {
        std::fs::write(dir.join("train.log"), report.log.join("\n") + "\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(arm: Arm, seed: u64) -> PipelineConfig {
        let mut config = PipelineConfig::new(
            DataSource::Straight { w: 8, count: 300 },
            arm,
            2.0,
            1e-5,
            seed,
        );
        config.hyper = Hyper {
            n_dim: 4,
            n_hidden: 6,
            n_key: 4,
            mlp_hidden: 4,
            n_time_dim: 2,
        };
        config.i_res = 1;
        config.pretrain_steps = 20;
        config.pretrain_batch = 4;
        config.batch = 30;
        config.epochs = 1.0;
        config.gen_count = Some(50);
        config.gen_max_len = 5;
        config.eval.n_density_queries = 20;
        config
    }

    #[test]
    fn arm_wiring() {
        assert_eq!(Arm::Baseline.model_kind(), ModelKind::Baseline);
        assert!(!Arm::Baseline.multitask());
        assert!(!Arm::Baseline.pretrains());
        assert!(Arm::BaselinePretrain.pretrains());
        assert_eq!(Arm::Deconv.model_kind(), ModelKind::Hierarchical);
        assert!(!Arm::Deconv.multitask());
        assert!(Arm::DeconvMultitask.multitask());
        assert!(!Arm::DeconvMultitask.pretrains());
        assert!(Arm::DeconvPretrain.pretrains() && !Arm::DeconvPretrain.multitask());
        assert!(Arm::Full.multitask() && Arm::Full.pretrains());
        for arm in Arm::all() {
            assert_eq!(Arm::from_tag(arm.tag()).unwrap(), arm);
        }
    }

    #[test]
    fn baseline_arm_folds_budget_into_sgd() {
        let artifacts = run_pipeline(&tiny_config(Arm::Baseline, 1)).unwrap();
        assert_eq!(artifacts.budget.epsilon_pretrain, 0.0);
        assert!(artifacts.budget.epsilon_sgd <= 2.0);
        assert!(artifacts.train_report.is_some());
        // Only DP-SGD and evaluation touched the data.
        let reads = artifacts.data_reads;
        assert_eq!(reads.get("transition"), None);
        assert_eq!(reads.get("dpsgd"), Some(&1));
        assert_eq!(reads.get("evaluate"), Some(&1));
        assert_eq!(reads.len(), 2);
    }

    #[test]
    fn pretrained_arm_reads_data_twice_and_never_in_pretrain() {
        let artifacts = run_pipeline(&tiny_config(Arm::Full, 2)).unwrap();
        assert!(artifacts.budget.epsilon_pretrain > 0.0);
        let reads = artifacts.data_reads;
        assert_eq!(reads.get("transition"), Some(&1));
        assert_eq!(reads.get("dpsgd"), Some(&1));
        assert_eq!(reads.get("evaluate"), Some(&1));
        // No phase outside {transition, dpsgd, evaluate} saw the data.
        assert_eq!(reads.len(), 3);
        // Budget ledger: components sum exactly to the reported total.
        let (total, _) = crate::dp::total_privacy(
            artifacts.budget.epsilon_sgd,
            artifacts.budget.epsilon_pretrain,
            artifacts.budget.delta,
        );
        assert_eq!(total, artifacts.budget.total());
        assert!(total <= 2.0 + 1e-12);
    }

    #[test]
    fn artifacts_land_in_the_output_directory() {
        let dir = std::env::temp_dir().join("dpmob-pipeline-test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut config = tiny_config(Arm::Deconv, 3);
        config.out_dir = Some(dir.clone());
        run_pipeline(&config).unwrap();
        for name in [
            "config.snapshot",
            "model.ckpt",
            "synthetic.traj",
            "metrics.txt",
            "metrics.csv",
            "privacy.txt",
            "train.log",
        ] {
            assert!(dir.join(name).exists(), "missing {name}");
        }
        let privacy = std::fs::read_to_string(dir.join("privacy.txt")).unwrap();
        assert!(privacy.contains("accountant rdp"));
        let synth = dataset_io::load_dataset(&dir.join("synthetic.traj")).unwrap();
        synth.validate().unwrap();
    }
}
