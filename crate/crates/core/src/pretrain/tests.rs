use rand::Rng;

use super::*;
use crate::model::{Hyper, ModelKind};
use crate::preprocess::{synthetic_grid, Trajectory, Visit};
use crate::rng::stream;

fn toy_dataset(w: usize, trajs: Vec<Vec<usize>>) -> Dataset {
    let trajectories = trajs
        .into_iter()
        .map(|cells| {
            Trajectory(
                cells
                    .into_iter()
                    .enumerate()
                    .map(|(slot, cell)| Visit { cell, slot })
                    .collect(),
            )
        })
        .collect();
    Dataset {
        grid: synthetic_grid(w).unwrap(),
        n_time: 64,
        trajectories,
    }
}

#[test]
fn single_transition_weighted_by_length() {
    // (a, b) with |v| = 2: the one entry (up(a), b) holds 1/2.
    let ds = toy_dataset(4, vec![vec![5, 10]]);
    let tran = build_transition_matrix(&ds, 1).unwrap();
    let from = up_res(CellId::new(5, 2).unwrap(), 1).unwrap().index;
    let total: f64 = tran.matrix.data().iter().sum();
    assert_eq!(tran.matrix.at2(from, 10), 0.5);
    assert_eq!(total, 0.5);
}

#[test]
fn repeated_transition_counts_once_per_trajectory() {
    // (a, b, a, b): distinct pairs {(up(a), b), (up(b), a)} at 1/4 each.
    let ds = toy_dataset(4, vec![vec![5, 10, 5, 10]]);
    let tran = build_transition_matrix(&ds, 1).unwrap();
    let up_a = up_res(CellId::new(5, 2).unwrap(), 1).unwrap().index;
    let up_b = up_res(CellId::new(10, 2).unwrap(), 1).unwrap().index;
    assert_eq!(tran.matrix.at2(up_a, 10), 0.25);
    assert_eq!(tran.matrix.at2(up_b, 5), 0.25);
    let total: f64 = tran.matrix.data().iter().sum();
    assert_eq!(total, 0.5);
}

#[test]
fn transition_matrix_matches_naive_enumeration() {
    let mut rng = stream(8);
    let w = 8usize;
    let mut trajs = Vec::new();
    for _ in 0..200 {
        let len = rng.gen_range(1..8);
        let mut cells = Vec::with_capacity(len);
        let mut prev = usize::MAX;
        for _ in 0..len {
            let mut c = rng.gen_range(0..w * w);
            while c == prev {
                c = rng.gen_range(0..w * w);
            }
            cells.push(c);
            prev = c;
        }
        trajs.push(cells);
    }
    let ds = toy_dataset(w, trajs.clone());
    let tran = build_transition_matrix(&ds, 2).unwrap();

    // Naive double loop: enumerate distinct pairs per trajectory.
    let mut expect = vec![vec![0.0f64; w * w]; 16];
    for cells in &trajs {
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for i in 0..cells.len().saturating_sub(1) {
            let row = cells[i] / w;
            let col = cells[i] % w;
            let region = (row / 2) * 4 + col / 2;
            if !pairs.contains(&(region, cells[i + 1])) {
                pairs.push((region, cells[i + 1]));
            }
        }
        for (r, c) in pairs {
            expect[r][c] += 1.0 / cells.len() as f64;
        }
    }
    for r in 0..16 {
        for c in 0..w * w {
            assert!((tran.matrix.at2(r, c) - expect[r][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn per_trajectory_contribution_below_one() {
    let mut rng = stream(9);
    for _ in 0..500 {
        let len = rng.gen_range(1..=20);
        let mut cells = Vec::with_capacity(len);
        let mut prev = usize::MAX;
        for _ in 0..len {
            let mut c = rng.gen_range(0..64);
            while c == prev {
                c = rng.gen_range(0..64);
            }
            cells.push(c);
            prev = c;
        }
        let ds = toy_dataset(8, vec![cells.clone()]);
        let tran = build_transition_matrix(&ds, 2).unwrap();
        let distinct: std::collections::BTreeSet<(usize, usize)> = cells
            .windows(2)
            .map(|p| {
                let region = ((p[0] / 8) / 2) * 4 + (p[0] % 8) / 2;
                (region, p[1])
            })
            .collect();
        // Every touched entry is exactly 1/len and there are fewer touched
        // entries than visits, so the total stays below 1.
        let nonzero: Vec<f64> = tran
            .matrix
            .data()
            .iter()
            .copied()
            .filter(|v| *v != 0.0)
            .collect();
        assert_eq!(nonzero.len(), distinct.len());
        assert!(nonzero.iter().all(|v| *v == 1.0 / len as f64));
        assert!(distinct.len() < len || len == 1);
    }
}

#[test]
fn privatize_high_epsilon_recovers_normalized_rows() {
    let ds = toy_dataset(4, vec![vec![0, 5], vec![0, 7], vec![1, 5]]);
    let tran = build_transition_matrix(&ds, 1).unwrap();
    let mut rng = stream(10);
    let dp = privatize_transition(&tran, 1e9, 1e-9, &mut rng).unwrap();
    for r in 0..4 {
        let raw_total: f64 = (0..16).map(|c| tran.matrix.at2(r, c)).sum();
        if raw_total == 0.0 {
            continue;
        }
        for c in 0..16 {
            let expect = tran.matrix.at2(r, c) / raw_total;
            assert!((dp.rows.at2(r, c) - expect).abs() < 1e-4);
        }
    }
}

#[test]
fn privatize_zero_matrix_tends_uniform() {
    let tran = TransitionMatrix {
        res: 1,
        matrix: Tensor::zeros(&[4, 16]),
    };
    let mut rng = stream(11);
    let dp = privatize_transition(&tran, 1e9, 1e-4, &mut rng).unwrap();
    for v in dp.rows.data() {
        assert!((v - 1.0 / 16.0).abs() < 1e-3);
    }
}

#[test]
fn privatize_rejects_bad_epsilon() {
    let tran = TransitionMatrix {
        res: 0,
        matrix: Tensor::zeros(&[1, 4]),
    };
    let mut rng = stream(12);
    assert!(privatize_transition(&tran, 0.0, 1e-4, &mut rng).is_err());
    assert!(privatize_transition(&tran, -1.0, 1e-4, &mut rng).is_err());
}

#[test]
fn laplace_noise_variance_matches_scale() {
    // One entry privatized many times: variance ~ 2 / eps^2.
    let tran = TransitionMatrix {
        res: 0,
        matrix: Tensor::from_vec(&[1, 1], vec![0.3]),
    };
    let eps = 0.5f64;
    let mut rng = stream(13);
    let n = 1_000_000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let dp = privatize_transition(&tran, eps, 1e-4, &mut rng).unwrap();
        let noise = dp.noised.at2(0, 0) - 0.3;
        sum += noise;
        sq += noise * noise;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let expect = 2.0 / (eps * eps);
    assert!((var - expect).abs() / expect < 0.02);
}

fn toy_dptran(seed: u64) -> DpTransitionMatrix {
    let ds = toy_dataset(
        4,
        vec![vec![0, 5, 2], vec![7, 3], vec![12, 9, 14, 1], vec![4, 8]],
    );
    let tran = build_transition_matrix(&ds, 1).unwrap();
    let mut rng = stream(seed);
    privatize_transition(&tran, 2.0, 1e-4, &mut rng).unwrap()
}

#[test]
fn mixed_target_one_hot_and_uniform() {
    let dp = toy_dptran(14);
    let row2 = mixed_target(&dp, &MixRatio::one_hot(4, 2)).unwrap();
    assert_eq!(row2.data(), dp.row(2).data());

    let uniform = mixed_target(&dp, &MixRatio(vec![0.25; 4])).unwrap();
    for c in 0..16 {
        let mean: f64 = (0..4).map(|r| dp.rows.at2(r, c)).sum::<f64>() / 4.0;
        assert!((uniform.data()[c] - mean).abs() < 1e-12);
    }
}

#[test]
fn mixed_target_matches_naive_weighted_sum() {
    let dp = toy_dptran(15);
    let mut rng = stream(16);
    for _ in 0..50 {
        let ratio = MixRatio(crate::rng::dirichlet_uniform(&mut rng, 4));
        let got = mixed_target(&dp, &ratio).unwrap();
        for c in 0..16 {
            let expect: f64 = (0..4).map(|r| ratio.0[r] * dp.rows.at2(r, c)).sum();
            assert!((got.data()[c] - expect).abs() < 1e-12);
        }
    }
}

fn small_model(seed: u64) -> ModelParams {
    let hyper = Hyper {
        n_dim: 6,
        n_hidden: 8,
        n_key: 5,
        mlp_hidden: 6,
        n_time_dim: 3,
    };
    ModelParams::new(ModelKind::Hierarchical, hyper, 2, 4, seed)
}

#[test]
fn mixed_input_one_hot_is_the_region_encoding() {
    let params = small_model(17);
    let maps = params.encoding_maps().unwrap();
    let got = mixed_input(&params, &maps, &MixRatio::one_hot(4, 3), 1).unwrap();
    let expect = params.hiencode(&maps, CellId::new(3, 1).unwrap()).unwrap();
    assert_eq!(got.data(), expect.data());
}

#[test]
fn mixed_input_is_linear() {
    let params = small_model(18);
    let maps = params.encoding_maps().unwrap();
    let mut rng = stream(19);
    let r1 = MixRatio(crate::rng::dirichlet_uniform(&mut rng, 16));
    let r2 = MixRatio(crate::rng::dirichlet_uniform(&mut rng, 16));
    let (a, b) = (0.3, 0.7);
    let blended = MixRatio(
        r1.0.iter()
            .zip(&r2.0)
            .map(|(x, y)| a * x + b * y)
            .collect(),
    );
    let lhs = mixed_input(&params, &maps, &blended, 2).unwrap();
    let mut rhs = mixed_input(&params, &maps, &r1, 2).unwrap();
    rhs.scale(a);
    rhs.axpy(b, &mixed_input(&params, &maps, &r2, 2).unwrap());
    for (x, y) in lhs.data().iter().zip(rhs.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn mixed_input_matches_naive_weighted_sum() {
    let params = small_model(20);
    let maps = params.encoding_maps().unwrap();
    let mut rng = stream(21);
    let ratio = MixRatio(crate::rng::dirichlet_uniform(&mut rng, 4));
    let got = mixed_input(&params, &maps, &ratio, 1).unwrap();
    for k in 0..params.hyper.n_dim {
        let mut expect = 0.0;
        for region in 0..4 {
            let enc = params
                .hiencode(&maps, CellId::new(region, 1).unwrap())
                .unwrap();
            expect += ratio.0[region] * enc.data()[k];
        }
        assert!((got.data()[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn zero_steps_leaves_params_unchanged() {
    let mut params = small_model(22);
    let before = params.clone();
    let dp = toy_dptran(23);
    let stats = pretrain(
        &mut params,
        &dp,
        &PretrainConfig {
            steps: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(stats.steps, 0);
    assert_eq!(stats.initial_kl, stats.final_kl);
    for (id, _, tensor) in before.store.iter() {
        assert_eq!(params.store.get(id).data(), tensor.data());
    }
}

#[test]
fn identical_rows_reduce_kl() {
    // All regions share one target row; pretraining should at least improve
    // on the random initialization.
    let noised = Tensor::from_vec(
        &[4, 16],
        (0..4)
            .flat_map(|_| (0..16).map(|c| if c < 4 { 0.2 } else { 0.01 }))
            .collect(),
    );
    let dp = DpTransitionMatrix {
        res: 1,
        epsilon: 1.0,
        smoothing: 1e-4,
        rows: super::post_process(&noised, 1e-4),
        noised,
    };
    let mut params = small_model(24);
    let stats = pretrain(
        &mut params,
        &dp,
        &PretrainConfig {
            steps: 200,
            batch: 8,
            learning_rate: 0.05,
            seed: 3,
            eval_ratios: 32,
        },
    )
    .unwrap();
    assert!(
        stats.final_kl < stats.initial_kl,
        "KL {} -> {}",
        stats.initial_kl,
        stats.final_kl
    );
}

#[test]
fn dptran_file_round_trips() {
    let dir = std::env::temp_dir().join("dpmob-dptran-test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("t.dptran");
    let dp = toy_dptran(25);
    dp.save(&path).unwrap();
    let loaded = DpTransitionMatrix::load(&path).unwrap();
    assert_eq!(loaded.res, dp.res);
    assert_eq!(loaded.epsilon, dp.epsilon);
    assert_eq!(loaded.noised.data(), dp.noised.data());
    assert_eq!(loaded.rows.data(), dp.rows.data());
}
