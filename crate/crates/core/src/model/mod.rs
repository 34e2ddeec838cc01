//! The two trajectory generators.
//!
//! Both share a GRU prefix encoder over `[time embedding, location encoding,
//! special-token flag]` inputs and an affine time head. They differ in how
//! locations are encoded and scored:
//!
//! * the baseline holds one trainable vector per cell (`m_poi`) and a direct
//!   affine scoring head (`g_poi`), so its size grows with the grid;
//! * the hierarchical generator grows a `(2^d, 2^d, n_dim)` encoding map out
//!   of a single root vector through `d` stride-2 transposed convolutions
//!   and scores cells by query/key dot products, so its size grows with `d`
//!   only. The intermediate maps double as coarse-resolution encodings for
//!   multi-task training.

pub mod infer;

pub use infer::{GruState, InferenceCache, ResolutionDistribution};

use rand::Rng;

use crate::autodiff::{
    gru_cell, Graph, GruCellNodes, NodeId, ParamId, ParamStore,
};
use crate::geo::{up_res, CellId};
use crate::preprocess::{Trajectory, Visit};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Architecture constants shared by both generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hyper {
    /// Location encoding channels.
    pub n_dim: usize,
    /// GRU hidden size.
    pub n_hidden: usize,
    /// Query/key vector size.
    pub n_key: usize,
    /// Hidden width of the query/key feed-forward maps.
    pub mlp_hidden: usize,
    /// Time embedding size.
    pub n_time_dim: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            n_dim: 64,
            n_hidden: 128,
            n_key: 64,
            mlp_hidden: 64,
            n_time_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Baseline,
    Hierarchical,
}

impl ModelKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Hierarchical => "hrnet",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "baseline" => Ok(ModelKind::Baseline),
            "hrnet" => Ok(ModelKind::Hierarchical),
            other => Err(Error::Parse(format!("unknown model kind {other}"))),
        }
    }
}

/// GRU weight ids: `w_*` act on the input, `u_*` on the previous hidden.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
}

/// One-hidden-layer tanh MLP parameter ids.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Location encoding / scoring parameters specific to the generator kind.
#[derive(Debug, Clone)]
pub enum LocationHead {
    Baseline {
        /// `(n_cells, n_dim)` embedding matrix.
        m_poi: ParamId,
        /// `(n_cells + 1, n_hidden)` scoring map; the last row scores EOS.
        g_poi_w: ParamId,
        g_poi_b: ParamId,
    },
    Hierarchical {
        /// Root vector stored as a `(1, 1, n_dim)` map.
        theta_root: ParamId,
        /// `kernels[k]` expands the resolution-`k` map to `k + 1`.
        kernels: Vec<ParamId>,
        f_query: MlpIds,
        f_key: MlpIds,
        /// EOS pseudo-location fed through `f_key` at the finest resolution.
        eos_emb: ParamId,
    },
}

/// A generator: hyperparameters, grid dimensions, and the parameter store.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar = f64> {
    pub hyper: Hyper,
    pub depth: u8,
    pub n_time: usize,
    pub store: ParamStore<S>,
    pub gru: GruParams,
    /// `(n_time, n_time_dim)` time embedding matrix.
    pub m_time: ParamId,
    /// Affine time head `(n_time, n_hidden)` + bias.
    pub g_time_w: ParamId,
    pub g_time_b: ParamId,
    /// Start-of-sequence embedding (time part; location part is zero).
    pub sos_emb: ParamId,
    pub head: LocationHead,
}

fn uniform_init<S: Scalar, R: Rng>(rng: &mut R, dims: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = dims.iter().product();
    let data = (0..len)
        .map(|_| S::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(dims, data)
}

/// Register a one-hidden-layer tanh MLP `n_in -> hidden -> n_out`.
pub fn register_mlp<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    prefix: &str,
    n_in: usize,
    hidden: usize,
    n_out: usize,
    rng: &mut R,
) -> MlpIds {
    MlpIds {
        w1: store.register(format!("{prefix}.w1"), uniform_init(rng, &[hidden, n_in], n_in)),
        b1: store.register(format!("{prefix}.b1"), uniform_init(rng, &[hidden], n_in)),
        w2: store.register(
            format!("{prefix}.w2"),
            uniform_init(rng, &[n_out, hidden], hidden),
        ),
        b2: store.register(format!("{prefix}.b2"), uniform_init(rng, &[n_out], hidden)),
    }
}

impl<S: Scalar> ModelParams<S> {
    pub fn new(kind: ModelKind, hyper: Hyper, depth: u8, n_time: usize, seed: u64) -> Self {
        let mut r = rng::stream(rng::derive_seed(seed, "model-init"));
        let mut store = ParamStore::new();
        let n_cells = 1usize << (2 * depth as usize);
        let n_in = hyper.n_time_dim + hyper.n_dim + 1;

        let gru = GruParams {
            w_update: store.register("gru.w_update", uniform_init(&mut r, &[hyper.n_hidden, n_in], n_in)),
            u_update: store.register(
                "gru.u_update",
                uniform_init(&mut r, &[hyper.n_hidden, hyper.n_hidden], hyper.n_hidden),
            ),
            b_update: store.register("gru.b_update", uniform_init(&mut r, &[hyper.n_hidden], n_in)),
            w_reset: store.register("gru.w_reset", uniform_init(&mut r, &[hyper.n_hidden, n_in], n_in)),
            u_reset: store.register(
                "gru.u_reset",
                uniform_init(&mut r, &[hyper.n_hidden, hyper.n_hidden], hyper.n_hidden),
            ),
            b_reset: store.register("gru.b_reset", uniform_init(&mut r, &[hyper.n_hidden], n_in)),
            w_cand: store.register("gru.w_cand", uniform_init(&mut r, &[hyper.n_hidden, n_in], n_in)),
            u_cand: store.register(
                "gru.u_cand",
                uniform_init(&mut r, &[hyper.n_hidden, hyper.n_hidden], hyper.n_hidden),
            ),
            b_cand: store.register("gru.b_cand", uniform_init(&mut r, &[hyper.n_hidden], n_in)),
        };
        let m_time = store.register(
            "m_time",
            uniform_init(&mut r, &[n_time, hyper.n_time_dim], hyper.n_time_dim),
        );
        let g_time_w = store.register(
            "g_time.w",
            uniform_init(&mut r, &[n_time, hyper.n_hidden], hyper.n_hidden),
        );
        let g_time_b = store.register("g_time.b", uniform_init(&mut r, &[n_time], hyper.n_hidden));
        let sos_emb = store.register(
            "sos_emb",
            uniform_init(&mut r, &[hyper.n_time_dim], hyper.n_time_dim),
        );

        let head = match kind {
            ModelKind::Baseline => LocationHead::Baseline {
                m_poi: store.register(
                    "m_poi",
                    uniform_init(&mut r, &[n_cells, hyper.n_dim], hyper.n_dim),
                ),
                g_poi_w: store.register(
                    "g_poi.w",
                    uniform_init(&mut r, &[n_cells + 1, hyper.n_hidden], hyper.n_hidden),
                ),
                g_poi_b: store.register(
                    "g_poi.b",
                    uniform_init(&mut r, &[n_cells + 1], hyper.n_hidden),
                ),
            },
            ModelKind::Hierarchical => {
                let root_data = (0..hyper.n_dim)
                    .map(|_| {
                        let z: f64 = r.sample(rand_distr::StandardNormal);
                        S::from_f64_lossy(0.1 * z)
                    })
                    .collect();
                let theta_root = store.register(
                    "theta_root",
                    Tensor::from_vec(&[1, 1, hyper.n_dim], root_data),
                );
                let kernels = (0..depth)
                    .map(|k| {
                        store.register(
                            format!("kernel.{k}"),
                            uniform_init(
                                &mut r,
                                &[hyper.n_dim, 2, 2, hyper.n_dim],
                                hyper.n_dim,
                            ),
                        )
                    })
                    .collect();
                let f_query = register_mlp(
                    &mut store,
                    "f_query",
                    hyper.n_hidden,
                    hyper.mlp_hidden,
                    hyper.n_key,
                    &mut r,
                );
                let f_key = register_mlp(
                    &mut store,
                    "f_key",
                    hyper.n_dim,
                    hyper.mlp_hidden,
                    hyper.n_key,
                    &mut r,
                );
                let eos_emb = store.register(
                    "eos_emb",
                    uniform_init(&mut r, &[hyper.n_dim], hyper.n_dim),
                );
                LocationHead::Hierarchical {
                    theta_root,
                    kernels,
                    f_query,
                    f_key,
                    eos_emb,
                }
            }
        };

        ModelParams {
            hyper,
            depth,
            n_time,
            store,
            gru,
            m_time,
            g_time_w,
            g_time_b,
            sos_emb,
            head,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self.head {
            LocationHead::Baseline { .. } => ModelKind::Baseline,
            LocationHead::Hierarchical { .. } => ModelKind::Hierarchical,
        }
    }

    pub fn n_cells(&self) -> usize {
        1 << (2 * self.depth as usize)
    }

    /// Index of the end-of-sequence slot in finest-resolution score vectors.
    pub fn eos_index(&self) -> usize {
        self.n_cells()
    }

    pub fn width(&self) -> usize {
        1 << self.depth
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.store.n_scalars()
    }

    /// Plain-tensor encoding maps per resolution (`maps[r]` has shape
    /// `(2^r, 2^r, n_dim)`); hierarchical generators only.
    pub fn encoding_maps(&self) -> Result<Vec<Tensor<S>>> {
        let LocationHead::Hierarchical {
            theta_root,
            kernels,
            ..
        } = &self.head
        else {
            return Err(Error::InvalidResolution(
                "baseline generator has no hierarchical encodings".into(),
            ));
        };
        let mut maps = vec![self.store.get(*theta_root).clone()];
        for k in kernels {
            let next = crate::autodiff::quad_deconv_forward(
                maps.last().unwrap(),
                self.store.get(*k),
            )?;
            maps.push(next);
        }
        Ok(maps)
    }

    /// Encoding of one cell at a resolution: the `(row, col)` fiber of the
    /// `i_res`-fold deconvolution of the root. Pass the cached `maps` from
    /// [`ModelParams::encoding_maps`].
    pub fn hiencode(&self, maps: &[Tensor<S>], cell: CellId) -> Result<Tensor<S>> {
        if cell.res > self.depth {
            return Err(Error::InvalidResolution(format!(
                "resolution {} exceeds depth {}",
                cell.res, self.depth
            )));
        }
        Ok(maps[cell.res as usize].fiber(cell.row(), cell.col()))
    }
}

/// MLP node ids inside one graph.
#[derive(Debug, Clone, Copy)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn mlp_node_ids<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    ids: &MlpIds,
) -> MlpNodes {
    MlpNodes {
        w1: g.param(store, ids.w1),
        b1: g.param(store, ids.b1),
        w2: g.param(store, ids.w2),
        b2: g.param(store, ids.b2),
    }
}

/// `W2 tanh(W1 x + b1) + b2`.
pub fn mlp_apply<S: Scalar>(g: &mut Graph<S>, mlp: &MlpNodes, x: NodeId) -> Result<NodeId> {
    let pre = g.affine(mlp.w1, x, mlp.b1)?;
    let act = g.tanh(pre);
    g.affine(mlp.w2, act, mlp.b2)
}

/// The MLP applied to every row of a matrix of encodings in one pass.
pub fn mlp_apply_rows<S: Scalar>(
    g: &mut Graph<S>,
    mlp: &MlpNodes,
    rows: NodeId,
) -> Result<NodeId> {
    let pre = g.matmul_t(rows, mlp.w1)?;
    let pre = g.add_row(pre, mlp.b1)?;
    let act = g.tanh(pre);
    let out = g.matmul_t(act, mlp.w2)?;
    g.add_row(out, mlp.b2)
}

/// Build the deconvolution chain as graph nodes; `maps[r]` is the
/// resolution-`r` encoding map.
pub fn deconv_chain<S: Scalar>(
    g: &mut Graph<S>,
    root: NodeId,
    kernels: &[NodeId],
) -> Result<Vec<NodeId>> {
    let mut maps = vec![root];
    for &k in kernels {
        let next = g.quad_deconv(*maps.last().unwrap(), k)?;
        maps.push(next);
    }
    Ok(maps)
}

/// Per-graph instantiation of a generator's parameters, with the encoding
/// maps and key bank built once and shared across sequence positions.
pub struct LossGraph<S: Scalar = f64> {
    pub graph: Graph<S>,
    gru: GruCellNodes,
    m_time: NodeId,
    g_time_w: NodeId,
    g_time_b: NodeId,
    sos_emb: NodeId,
    n_dim: usize,
    head: HeadNodes,
}

enum HeadNodes {
    Baseline {
        m_poi: NodeId,
        g_poi_w: NodeId,
        g_poi_b: NodeId,
    },
    Hierarchical {
        maps: Vec<NodeId>,
        f_query: MlpNodes,
        /// `keys[r]` is the `(4^r, n_key)` key matrix of resolution `r`
        /// (only the requested levels are populated).
        keys: Vec<Option<NodeId>>,
        eos_key: NodeId,
    },
}

impl<S: Scalar> LossGraph<S> {
    /// Instantiate the parameters and precompute encodings/keys.
    ///
    /// `resolutions` lists the coarse-to-fine scoring levels to prepare
    /// (hierarchical only; the finest level is always required).
    pub fn new(params: &ModelParams<S>, resolutions: &[u8]) -> Result<Self> {
        let mut g = Graph::new();
        let store = &params.store;
        let gru = GruCellNodes {
            w_update: g.param(store, params.gru.w_update),
            u_update: g.param(store, params.gru.u_update),
            b_update: g.param(store, params.gru.b_update),
            w_reset: g.param(store, params.gru.w_reset),
            u_reset: g.param(store, params.gru.u_reset),
            b_reset: g.param(store, params.gru.b_reset),
            w_cand: g.param(store, params.gru.w_cand),
            u_cand: g.param(store, params.gru.u_cand),
            b_cand: g.param(store, params.gru.b_cand),
        };
        let m_time = g.param(store, params.m_time);
        let g_time_w = g.param(store, params.g_time_w);
        let g_time_b = g.param(store, params.g_time_b);
        let sos_emb = g.param(store, params.sos_emb);

        let head = match &params.head {
            LocationHead::Baseline {
                m_poi,
                g_poi_w,
                g_poi_b,
            } => HeadNodes::Baseline {
                m_poi: g.param(store, *m_poi),
                g_poi_w: g.param(store, *g_poi_w),
                g_poi_b: g.param(store, *g_poi_b),
            },
            LocationHead::Hierarchical {
                theta_root,
                kernels,
                f_query,
                f_key,
                eos_emb,
            } => {
                let root = g.param(store, *theta_root);
                let kernel_nodes: Vec<NodeId> =
                    kernels.iter().map(|k| g.param(store, *k)).collect();
                let maps = deconv_chain(&mut g, root, &kernel_nodes)?;
                let f_query = mlp_node_ids(&mut g, store, f_query);
                let f_key_nodes = mlp_node_ids(&mut g, store, f_key);
                let mut keys: Vec<Option<NodeId>> = vec![None; params.depth as usize + 1];
                let mut wanted: Vec<u8> = resolutions.to_vec();
                if !wanted.contains(&params.depth) {
                    wanted.push(params.depth);
                }
                for &r in &wanted {
                    let encodings = g.flatten_map(maps[r as usize])?;
                    keys[r as usize] =
                        Some(mlp_apply_rows(&mut g, &f_key_nodes, encodings)?);
                }
                let eos_node = g.param(store, *eos_emb);
                let eos_key = mlp_apply(&mut g, &f_key_nodes, eos_node)?;
                HeadNodes::Hierarchical {
                    maps,
                    f_query,
                    keys,
                    eos_key,
                }
            }
        };

        Ok(LossGraph {
            graph: g,
            gru,
            m_time,
            g_time_w,
            g_time_b,
            sos_emb,
            n_dim: params.hyper.n_dim,
            head,
        })
    }

    /// GRU input for a visit: `[m_time[slot], location encoding, 0]`.
    pub fn visit_input(&mut self, v: Visit) -> Result<NodeId> {
        let time_part = self.graph.slice_row(self.m_time, v.slot)?;
        let loc_part = match &self.head {
            HeadNodes::Baseline { m_poi, .. } => self.graph.slice_row(*m_poi, v.cell)?,
            HeadNodes::Hierarchical { maps, .. } => {
                let finest = *maps.last().unwrap();
                let side = self.graph.value(finest).dims()[0];
                self.graph.slice_vec(finest, v.cell / side, v.cell % side)?
            }
        };
        let joined = self.graph.concat(time_part, loc_part);
        let flag = self.graph.constant(Tensor::from_vec(&[1], vec![S::zero()]));
        Ok(self.graph.concat(joined, flag))
    }

    /// GRU input for the start token: `[sos_emb, zero location, 1]`.
    pub fn sos_input(&mut self) -> NodeId {
        let zeros = self.graph.constant(Tensor::zeros(&[self.n_dim]));
        let joined = self.graph.concat(self.sos_emb, zeros);
        let flag = self.graph.constant(Tensor::from_vec(&[1], vec![S::one()]));
        self.graph.concat(joined, flag)
    }

    pub fn gru_step(&mut self, h: NodeId, input: NodeId) -> Result<NodeId> {
        gru_cell(&mut self.graph, &self.gru, h, input)
    }

    pub fn initial_hidden(&mut self, n_hidden: usize) -> NodeId {
        self.graph.constant(Tensor::zeros(&[n_hidden]))
    }

    pub fn time_logits(&mut self, h: NodeId) -> Result<NodeId> {
        self.graph.affine(self.g_time_w, h, self.g_time_b)
    }

    /// Score vector over cells at a resolution; the finest resolution gets
    /// an extra trailing EOS entry.
    pub fn location_logits(&mut self, h: NodeId, res: u8, finest: bool) -> Result<NodeId> {
        match &self.head {
            HeadNodes::Baseline {
                g_poi_w, g_poi_b, ..
            } => {
                debug_assert!(finest, "baseline scores only the finest resolution");
                self.graph.affine(*g_poi_w, h, *g_poi_b)
            }
            HeadNodes::Hierarchical {
                f_query,
                keys,
                eos_key,
                ..
            } => {
                let f_query = *f_query;
                let eos_key = *eos_key;
                let level = keys[res as usize].expect("key bank missing resolution");
                let query = mlp_apply(&mut self.graph, &f_query, h)?;
                let scores = self.graph.matvec(level, query)?;
                if finest {
                    let eos_score = self.graph.dot(query, eos_key)?;
                    Ok(self.graph.concat(scores, eos_score))
                } else {
                    Ok(scores)
                }
            }
        }
    }
}

/// Which coarse-to-fine tasks a training step optimizes.
pub fn loss_resolutions(depth: u8, multitask: bool) -> Vec<u8> {
    if multitask {
        (1..=depth).collect()
    } else {
        vec![depth]
    }
}

/// Build the sequence loss for one trajectory.
///
/// Positions run over `[SOS, v_0, ..., v_{n-1}]`; after consuming position
/// `i` the model is scored against `v_i` at every requested resolution (the
/// coarse targets are the covering cells) plus the time head, and after the
/// final visit it is scored against EOS at the finest resolution only.
pub fn sequence_loss<S: Scalar>(
    params: &ModelParams<S>,
    traj: &Trajectory,
    multitask: bool,
) -> Result<(LossGraph<S>, NodeId)> {
    if traj.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let resolutions = loss_resolutions(params.depth, multitask);
    let mut lg = LossGraph::new(params, &resolutions)?;
    let mut terms = Vec::new();
    let mut h = lg.initial_hidden(params.hyper.n_hidden);

    for i in 0..=traj.len() {
        let input = if i == 0 {
            lg.sos_input()
        } else {
            lg.visit_input(traj.visits()[i - 1])?
        };
        h = lg.gru_step(h, input)?;

        if i < traj.len() {
            let target = traj.visits()[i];
            let cell = CellId::new(target.cell, params.depth)?;
            for &res in &resolutions {
                let finest = res == params.depth;
                let logits = lg.location_logits(h, res, finest)?;
                let target_idx = up_res(cell, res)?.index;
                terms.push(lg.graph.cross_entropy(logits, target_idx)?);
            }
            let tl = lg.time_logits(h)?;
            terms.push(lg.graph.cross_entropy(tl, target.slot)?);
        } else {
            let logits = lg.location_logits(h, params.depth, true)?;
            terms.push(lg.graph.cross_entropy(logits, params.eos_index())?);
        }
    }
    let loss = lg.graph.sum(&terms)?;
    Ok((lg, loss))
}
