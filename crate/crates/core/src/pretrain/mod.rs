//! Private pretraining from a coarse transition matrix.
//!
//! The only data-derived input is the Laplace-noised region-to-cell
//! transition matrix, so everything after the release is post-processing:
//! the trainer samples Dirichlet mixing ratios over the coarse regions,
//! forms the matching mixed target rows and mixed region encodings, and fits
//! the encoding/scoring path through a stand-in for the GRU with a KL
//! objective and plain gradient descent. The stand-in is discarded; the
//! encoding and scoring parameters are kept as the warm start.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::dp::laplace_mechanism;
use crate::geo::{up_res, CellId};
use crate::model::{
    deconv_chain, mlp_apply, mlp_apply_rows, mlp_node_ids, register_mlp, LocationHead, MlpNodes,
    ModelParams,
};
use crate::preprocess::Dataset;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Region-to-cell first-order transition frequencies, length-normalized so
/// one trajectory contributes strictly less than 1 in total.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    pub res: u8,
    /// Shape `(4^res, n_cells)`.
    pub matrix: Tensor<f64>,
}

/// The privatized release plus its post-processed per-row distributions.
#[derive(Debug, Clone)]
pub struct DpTransitionMatrix {
    pub res: u8,
    pub epsilon: f64,
    pub smoothing: f64,
    /// Laplace-noised matrix as released.
    pub noised: Tensor<f64>,
    /// Rows clamped at zero, smoothed, and normalized; every entry positive.
    pub rows: Tensor<f64>,
}

/// A mixing ratio over the coarse regions: nonnegative, sums to 1.
#[derive(Debug, Clone)]
pub struct MixRatio(pub Vec<f64>);

impl MixRatio {
    pub fn validate(&self) -> Result<()> {
        crate::autodiff::validate_distribution(&self.0)
    }

    pub fn one_hot(n: usize, region: usize) -> Self {
        let mut v = vec![0.0; n];
        v[region] = 1.0;
        MixRatio(v)
    }
}

/// Count distinct region-to-cell transitions per trajectory, each weighted
/// by the inverse trajectory length.
pub fn build_transition_matrix(dataset: &Dataset, i_res: u8) -> Result<TransitionMatrix> {
    let depth = dataset.grid.depth();
    if i_res > depth {
        return Err(Error::InvalidResolution(format!(
            "transition resolution {i_res} exceeds grid depth {depth}"
        )));
    }
    let n_regions = 1usize << (2 * i_res as usize);
    let n_cells = dataset.grid.n_poi();
    let mut matrix = Tensor::zeros(&[n_regions, n_cells]);
    for traj in &dataset.trajectories {
        let weight = 1.0 / traj.len() as f64;
        // The indicator is per trajectory: a repeated transition within one
        // trajectory contributes once.
        let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
        for pair in traj.visits().windows(2) {
            let from = up_res(CellId::new(pair[0].cell, depth)?, i_res)?.index;
            seen.insert((from, pair[1].cell));
        }
        for (from, to) in seen {
            let v = matrix.at2(from, to) + weight;
            matrix.set2(from, to, v);
        }
    }
    Ok(TransitionMatrix { res: i_res, matrix })
}

/// Laplace-noise the matrix at scale `1 / epsilon` (L1 sensitivity 1), then
/// post-process rows into full-support distributions: clamp negatives, add
/// the smoothing constant, normalize.
pub fn privatize_transition(
    tran: &TransitionMatrix,
    epsilon: f64,
    smoothing: f64,
    rng: &mut impl Rng,
) -> Result<DpTransitionMatrix> {
    if !(smoothing > 0.0) {
        return Err(Error::Privacy(format!("smoothing {smoothing} must be positive")));
    }
    let noised = laplace_mechanism(&tran.matrix, 1.0, epsilon, rng)?;
    let rows = post_process(&noised, smoothing);
    Ok(DpTransitionMatrix {
        res: tran.res,
        epsilon,
        smoothing,
        noised,
        rows,
    })
}

fn post_process(noised: &Tensor<f64>, smoothing: f64) -> Tensor<f64> {
    let (n_regions, n_cells) = (noised.dims()[0], noised.dims()[1]);
    let mut rows = Tensor::zeros(&[n_regions, n_cells]);
    for r in 0..n_regions {
        let mut total = 0.0;
        for c in 0..n_cells {
            let v = noised.at2(r, c).max(0.0) + smoothing;
            rows.set2(r, c, v);
            total += v;
        }
        for c in 0..n_cells {
            rows.set2(r, c, rows.at2(r, c) / total);
        }
    }
    rows
}

impl DpTransitionMatrix {
    pub fn n_regions(&self) -> usize {
        self.rows.dims()[0]
    }

    pub fn n_cells(&self) -> usize {
        self.rows.dims()[1]
    }

    /// Post-processed distribution of one region row.
    pub fn row(&self, region: usize) -> Tensor<f64> {
        self.rows.row(region)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "i_res {}", self.res)?;
        writeln!(out, "n_poi {}", self.n_cells())?;
        writeln!(out, "epsilon2 {}", self.epsilon)?;
        writeln!(out, "smoothing {}", self.smoothing)?;
        writeln!(out)?;
        for r in 0..self.n_regions() {
            let line: Vec<String> = (0..self.n_cells())
                .map(|c| format!("{}", self.noised.at2(r, c)))
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Load a released matrix; post-processing is recomputed, so reruns of
    /// pretraining spend no additional budget.
    pub fn load(path: &Path) -> Result<Self> {
        let file = BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let mut header = std::collections::HashMap::new();
        for line in lines.by_ref() {
            let line = line?;
            if line.trim().is_empty() {
                break;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("bad header line {line}")))?;
            header.insert(k.to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            header
                .get(k)
                .ok_or_else(|| Error::Parse(format!("missing header key {k}")))
        };
        let res: u8 = parse(get("i_res")?)?;
        let n_cells: usize = parse(get("n_poi")?)?;
        let epsilon: f64 = parse(get("epsilon2")?)?;
        let smoothing: f64 = parse(get("smoothing")?)?;
        let mut values = Vec::new();
        let mut n_rows = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(parse)
                .collect::<Result<_>>()?;
            if row.len() != n_cells {
                return Err(Error::Parse(format!(
                    "row has {} entries, header says {n_cells}",
                    row.len()
                )));
            }
            values.extend(row);
            n_rows += 1;
        }
        if n_rows != 1usize << (2 * res as usize) {
            return Err(Error::Parse(format!(
                "matrix has {n_rows} rows, resolution {res} needs {}",
                1usize << (2 * res as usize)
            )));
        }
        let noised = Tensor::from_vec(&[n_rows, n_cells], values);
        let rows = post_process(&noised, smoothing);
        Ok(DpTransitionMatrix {
            res,
            epsilon,
            smoothing,
            noised,
            rows,
        })
    }
}

fn parse<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad value {v}")))
}

/// Target distribution for a mixing ratio: the `r`-weighted sum of the
/// post-processed rows.
pub fn mixed_target(dptran: &DpTransitionMatrix, ratio: &MixRatio) -> Result<Tensor<f64>> {
    ratio.validate()?;
    if ratio.0.len() != dptran.n_regions() {
        return Err(Error::Dimension(format!(
            "ratio over {} regions, matrix has {}",
            ratio.0.len(),
            dptran.n_regions()
        )));
    }
    let mut out = Tensor::zeros(&[dptran.n_cells()]);
    for (region, &weight) in ratio.0.iter().enumerate() {
        out.axpy(weight, &dptran.row(region));
    }
    Ok(out)
}

/// Mixed region encoding: the `r`-weighted sum of the coarse-resolution
/// encodings (hierarchical generators).
pub fn mixed_input(
    params: &ModelParams,
    maps: &[Tensor<f64>],
    ratio: &MixRatio,
    i_res: u8,
) -> Result<Tensor<f64>> {
    ratio.validate()?;
    let n_regions = 1usize << (2 * i_res as usize);
    if ratio.0.len() != n_regions {
        return Err(Error::Dimension(format!(
            "ratio over {} regions, resolution {i_res} has {n_regions}",
            ratio.0.len()
        )));
    }
    let mut out = Tensor::zeros(&[params.hyper.n_dim]);
    for (region, &weight) in ratio.0.iter().enumerate() {
        let enc = params.hiencode(maps, CellId::new(region, i_res)?)?;
        out.axpy(weight, &enc);
    }
    Ok(out)
}

/// Pretraining schedule.
#[derive(Debug, Clone, Copy)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Ratios evaluated for the before/after KL statistic.
    pub eval_ratios: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch: 32,
            learning_rate: 0.05,
            seed: 0,
            eval_ratios: 100,
        }
    }
}

/// Mean KL against one-hot region targets before and after pretraining.
#[derive(Debug, Clone, Copy)]
pub struct PretrainStats {
    pub initial_kl: f64,
    pub final_kl: f64,
    pub steps: usize,
}

/// Parameters trained during the pretraining phase: a scratch store holding
/// copies of the model's encoding/scoring tensors plus the temporary GRU
/// stand-in. The model's own store is untouched until write-back.
struct PretrainSpace {
    store: ParamStore<f64>,
    /// (model id, scratch id) pairs written back after training.
    shared: Vec<(ParamId, ParamId)>,
    temp: crate::model::MlpIds,
    head: ScratchHead,
}

enum ScratchHead {
    Hierarchical {
        theta_root: ParamId,
        kernels: Vec<ParamId>,
        f_query: crate::model::MlpIds,
        f_key: crate::model::MlpIds,
    },
    Baseline {
        g_poi_w: ParamId,
        g_poi_b: ParamId,
    },
}

fn build_space(params: &ModelParams, dptran: &DpTransitionMatrix, seed: u64) -> PretrainSpace {
    let mut store = ParamStore::new();
    let mut shared = Vec::new();
    let copy = |store: &mut ParamStore<f64>,
                    shared: &mut Vec<(ParamId, ParamId)>,
                    model_id: ParamId|
     -> ParamId {
        let scratch = store.register(
            params.store.name(model_id),
            params.store.get(model_id).clone(),
        );
        shared.push((model_id, scratch));
        scratch
    };
    let mut init_rng = rng::stream(rng::derive_seed(seed, "pretrain-temp-init"));
    match &params.head {
        LocationHead::Hierarchical {
            theta_root,
            kernels,
            f_query,
            f_key,
            ..
        } => {
            let theta_root = copy(&mut store, &mut shared, *theta_root);
            let kernels = kernels
                .iter()
                .map(|k| copy(&mut store, &mut shared, *k))
                .collect();
            let f_query = crate::model::MlpIds {
                w1: copy(&mut store, &mut shared, f_query.w1),
                b1: copy(&mut store, &mut shared, f_query.b1),
                w2: copy(&mut store, &mut shared, f_query.w2),
                b2: copy(&mut store, &mut shared, f_query.b2),
            };
            let f_key = crate::model::MlpIds {
                w1: copy(&mut store, &mut shared, f_key.w1),
                b1: copy(&mut store, &mut shared, f_key.b1),
                w2: copy(&mut store, &mut shared, f_key.w2),
                b2: copy(&mut store, &mut shared, f_key.b2),
            };
            // The stand-in consumes a mixed location encoding.
            let temp = register_mlp(
                &mut store,
                "temp",
                params.hyper.n_dim,
                params.hyper.mlp_hidden,
                params.hyper.n_hidden,
                &mut init_rng,
            );
            PretrainSpace {
                store,
                shared,
                temp,
                head: ScratchHead::Hierarchical {
                    theta_root,
                    kernels,
                    f_query,
                    f_key,
                },
            }
        }
        LocationHead::Baseline {
            g_poi_w, g_poi_b, ..
        } => {
            let g_poi_w = copy(&mut store, &mut shared, *g_poi_w);
            let g_poi_b = copy(&mut store, &mut shared, *g_poi_b);
            // Without coarse region embeddings the stand-in consumes the
            // mixing ratio itself (the mixture of one-hot region vectors).
            let temp = register_mlp(
                &mut store,
                "temp",
                dptran.n_regions(),
                params.hyper.mlp_hidden,
                params.hyper.n_hidden,
                &mut init_rng,
            );
            PretrainSpace {
                store,
                shared,
                temp,
                head: ScratchHead::Baseline { g_poi_w, g_poi_b },
            }
        }
    }
}

/// Graph nodes shared across one pretraining batch.
struct BatchNodes {
    temp: MlpNodes,
    head: BatchHead,
}

enum BatchHead {
    Hierarchical {
        region_encodings: Vec<NodeId>,
        f_query: MlpNodes,
        /// `(n_cells, n_key)` key matrix over the finest-resolution cells.
        keys: NodeId,
    },
    Baseline {
        g_poi_w: NodeId,
        g_poi_b: NodeId,
        n_cells: usize,
    },
}

fn instantiate(space: &PretrainSpace, g: &mut Graph<f64>, i_res: u8) -> Result<BatchNodes> {
    let temp = mlp_node_ids(g, &space.store, &space.temp);
    let head = match &space.head {
        ScratchHead::Hierarchical {
            theta_root,
            kernels,
            f_query,
            f_key,
        } => {
            let root = g.param(&space.store, *theta_root);
            let kernel_nodes: Vec<NodeId> =
                kernels.iter().map(|k| g.param(&space.store, *k)).collect();
            let maps = deconv_chain(g, root, &kernel_nodes)?;
            let coarse = maps[i_res as usize];
            let side = 1usize << i_res;
            let mut region_encodings = Vec::with_capacity(side * side);
            for row in 0..side {
                for col in 0..side {
                    region_encodings.push(g.slice_vec(coarse, row, col)?);
                }
            }
            let f_key_nodes = mlp_node_ids(g, &space.store, f_key);
            let finest = *maps.last().unwrap();
            let encodings = g.flatten_map(finest)?;
            let keys = mlp_apply_rows(g, &f_key_nodes, encodings)?;
            BatchHead::Hierarchical {
                region_encodings,
                f_query: mlp_node_ids(g, &space.store, f_query),
                keys,
            }
        }
        ScratchHead::Baseline { g_poi_w, g_poi_b } => BatchHead::Baseline {
            g_poi_w: g.param(&space.store, *g_poi_w),
            g_poi_b: g.param(&space.store, *g_poi_b),
            n_cells: space.store.get(*g_poi_b).len() - 1,
        },
    };
    Ok(BatchNodes { temp, head })
}

/// One sample's KL term given its mixing ratio and target row.
fn sample_loss(
    g: &mut Graph<f64>,
    nodes: &BatchNodes,
    ratio: &MixRatio,
    target: Tensor<f64>,
) -> Result<NodeId> {
    let x = match &nodes.head {
        BatchHead::Hierarchical {
            region_encodings, ..
        } => g.weighted_sum(region_encodings, &ratio.0)?,
        BatchHead::Baseline { .. } => {
            g.constant(Tensor::from_vec(&[ratio.0.len()], ratio.0.clone()))
        }
    };
    let h = mlp_apply(g, &nodes.temp, x)?;
    let logits = match &nodes.head {
        BatchHead::Hierarchical { f_query, keys, .. } => {
            let query = mlp_apply(g, f_query, h)?;
            g.matvec(*keys, query)?
        }
        BatchHead::Baseline {
            g_poi_w,
            g_poi_b,
            n_cells,
        } => {
            let full = g.affine(*g_poi_w, h, *g_poi_b)?;
            // EOS is not a transition target; score cells only.
            g.slice_range(full, 0, *n_cells)?
        }
    };
    g.kl_from_logits(target, logits)
}

fn mean_kl(
    space: &PretrainSpace,
    dptran: &DpTransitionMatrix,
    i_res: u8,
    ratios: &[MixRatio],
) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = instantiate(space, &mut g, i_res)?;
    let mut total = 0.0;
    for ratio in ratios {
        let target = mixed_target(dptran, ratio)?;
        let term = sample_loss(&mut g, &nodes, ratio, target)?;
        total += g.value(term).item();
    }
    Ok(total / ratios.len() as f64)
}

/// Fit the encoding/scoring path to the released transition matrix.
///
/// Takes no dataset: the matrix is the only data-derived input, so the whole
/// phase is post-processing of the release. The temporary stand-in is
/// dropped; the shared parameters are written back to `params`.
pub fn pretrain(
    params: &mut ModelParams,
    dptran: &DpTransitionMatrix,
    config: &PretrainConfig,
) -> Result<PretrainStats> {
    let i_res = dptran.res;
    if params.kind() == crate::model::ModelKind::Hierarchical && i_res > params.depth {
        return Err(Error::InvalidResolution(format!(
            "matrix resolution {i_res} exceeds model depth {}",
            params.depth
        )));
    }
    if dptran.n_cells() != params.n_cells() {
        return Err(Error::Dimension(format!(
            "matrix over {} cells, model has {}",
            dptran.n_cells(),
            params.n_cells()
        )));
    }
    let mut space = build_space(params, dptran, config.seed);
    let n_regions = dptran.n_regions();

    let eval_ratios: Vec<MixRatio> = {
        let mut r = rng::stream(rng::derive_seed(config.seed, "pretrain-eval"));
        (0..config.eval_ratios)
            .map(|_| MixRatio::one_hot(n_regions, r.gen_range(0..n_regions)))
            .collect()
    };
    let initial_kl = mean_kl(&space, dptran, i_res, &eval_ratios)?;

    let mut batch_rng = rng::stream(rng::derive_seed(config.seed, "pretrain-batch"));
    let scale = 1.0 / config.batch as f64;
    for _ in 0..config.steps {
        let mut g = Graph::new();
        let nodes = instantiate(&space, &mut g, i_res)?;
        let mut terms = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let ratio = MixRatio(rng::dirichlet_uniform(&mut batch_rng, n_regions));
            let target = mixed_target(dptran, &ratio)?;
            terms.push(sample_loss(&mut g, &nodes, &ratio, target)?);
        }
        let total = g.sum(&terms)?;
        let grads = g.backward(total, &space.store);
        let n_params = space.store.len();
        for i in 0..n_params {
            let id = ParamId(i);
            space
                .store
                .get_mut(id)
                .axpy(-config.learning_rate * scale, grads.grad(id));
        }
    }

    let final_kl = mean_kl(&space, dptran, i_res, &eval_ratios)?;
    for &(model_id, scratch_id) in &space.shared {
        *params.store.get_mut(model_id) = space.store.get(scratch_id).clone();
    }
    Ok(PretrainStats {
        initial_kl,
        final_kl,
        steps: config.steps,
    })
}

#[cfg(test)]
mod tests;
