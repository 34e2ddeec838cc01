// Scratch harness for tuning the end-to-end runs (not shipped).

use dpmob_core::evaluate::{full_report, EvalConfig};
use dpmob_core::model::{Hyper, InferenceCache};
use dpmob_core::pipeline::{load_source, run_pipeline, Arm, DataSource, PipelineConfig};
use dpmob_core::preprocess::gen_straight_dataset;

fn held_out_next_cell_prob(params: &dpmob_core::model::ModelParams, w: usize) -> f64 {
    // Fresh straight trajectories not behind the training seed.
    let held = gen_straight_dataset(w, 200, 999_999).unwrap();
    let cache = InferenceCache::build(params).unwrap();
    let mut total = 0.0;
    let mut count = 0.0;
    for t in &held.trajectories {
        let mut state = params.initial_state();
        params.advance(&cache, &mut state, None).unwrap();
        for i in 0..t.len() - 1 {
            params
                .advance(&cache, &mut state, Some(t.visits()[i]))
                .unwrap();
            let (cells, _) = params.next_distribution(&cache, &state).unwrap();
            total += cells.probs[t.visits()[i + 1].cell];
            count += 1.0;
        }
    }
    total / count
}

fn straight_fraction(ds: &dpmob_core::preprocess::Dataset, w: usize) -> f64 {
    let ok = ds
        .trajectories
        .iter()
        .filter(|t| {
            t.len() == 3
                && t.visits()[1].cell == t.visits()[0].cell + w
                && t.visits()[2].cell == t.visits()[1].cell + w
        })
        .count();
    ok as f64 / ds.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.get(1).map(|s| s.as_str()) == Some("nonprivate") {
        return nonprivate_probe();
    }
    let arm = Arm::from_tag(args.get(1).map(|s| s.as_str()).unwrap_or("full")).unwrap();
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dataset_kind = args.get(3).map(|s| s.as_str()).unwrap_or("straight");
    let w = 16usize;
    let n = 10_000usize;

    let data = match dataset_kind {
        "straight" => DataSource::Straight { w, count: n },
        "random" => DataSource::Random { w, count: n },
        _ => panic!("straight|random"),
    };
    let mut config = PipelineConfig::new(data, arm, 2.0, 1e-5, seed);
    config.hyper = Hyper {
        n_dim: std::env::var("NDIM").ok().and_then(|v| v.parse().ok()).unwrap_or(16),
        n_hidden: std::env::var("NHID").ok().and_then(|v| v.parse().ok()).unwrap_or(32),
        n_key: 16,
        mlp_hidden: 16,
        n_time_dim: 4,
    };
    config.batch = std::env::var("BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(96);
    config.epochs = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(4.0);
    config.learning_rate = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.3);
    config.pretrain_steps = std::env::var("PSTEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(600);
    config.pretrain_batch = 16;
    config.pretrain_lr = std::env::var("PLR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.05);
    config.gen_count = Some(10_000);
    config.gen_max_len = 8;
    config.eval = EvalConfig {
        seed,
        ..EvalConfig::default()
    };

    let t0 = std::time::Instant::now();
    let artifacts = run_pipeline(&config).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();

    let report = artifacts.train_report.as_ref().unwrap();
    println!(
        "arm={} seed={seed} data={dataset_kind} steps={} sigma={:.3} eps_spent={:.4} eps2={:.4} final_loss={:.4} elapsed={elapsed:.1}s",
        arm.tag(),
        report.steps_run,
        report.sigma,
        report.epsilon_spent,
        artifacts.budget.epsilon_pretrain,
        report.final_loss,
    );
    println!(
        "  transition_js={:.4} destination_js={:.4} waypoint_js={:.4}",
        artifacts.metrics.transition, artifacts.metrics.destination, artifacts.metrics.waypoint
    );
    if dataset_kind == "straight" {
        println!(
            "  next_cell_prob={:.4} straight_frac={:.4}",
            held_out_next_cell_prob(&artifacts.params, w),
            straight_fraction(&artifacts.synthetic, w)
        );
    }
    // Re-evaluate against a fresh real sample for sanity.
    let real = load_source(&config.data, config.seed).unwrap();
    let rep = full_report(&real, &artifacts.synthetic, &config.eval).unwrap();
    println!("  (recheck transition_js={:.4})", rep.transition);
}

fn nonprivate_probe() {
    use dpmob_core::model::{ModelKind, ModelParams};
    use dpmob_core::train::{dpsgd_train, TrainConfig};
    let w = 16usize;
    let ds = gen_straight_dataset(w, 10_000, 42).unwrap();
    let hyper = Hyper {
        n_dim: std::env::var("NDIM").ok().and_then(|v| v.parse().ok()).unwrap_or(16),
        n_hidden: std::env::var("NHID").ok().and_then(|v| v.parse().ok()).unwrap_or(32),
        n_key: 16,
        mlp_hidden: 16,
        n_time_dim: 4,
    };
    let mut params = ModelParams::new(ModelKind::Hierarchical, hyper, 4, ds.n_time, 7);
    let config = TrainConfig {
        clip_norm: std::env::var("CLIP").ok().and_then(|v| v.parse().ok()).unwrap_or(f64::INFINITY),
        sigma: Some(0.0),
        expected_batch: std::env::var("BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(96),
        max_epochs: std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(4.0),
        learning_rate: std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.3),
        epsilon_sgd: f64::INFINITY,
        delta: 1e-5,
        seed: 1,
        multitask: true,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let report = dpsgd_train(&mut params, &ds, &config).unwrap();
    println!(
        "nonprivate: steps={} final_loss={:.4} elapsed={:.1}s next_cell_prob={:.4}",
        report.steps_run,
        report.final_loss,
        t0.elapsed().as_secs_f64(),
        held_out_next_cell_prob(&params, w)
    );
    for line in report.log.iter().step_by(report.log.len().max(10) / 10) {
        println!("  {line}");
    }
}
