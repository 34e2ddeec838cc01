//! Forward-only evaluation of a trained generator.
//!
//! Everything that depends only on the parameters (encoding maps, key
//! vectors) is computed once into an [`InferenceCache`]; stepping a
//! trajectory then costs one GRU update and one query per position. Kept as
//! plain tensor math so sampling never pays graph-construction overhead; the
//! tests pin it against the training-graph forward pass.

use crate::autodiff::validate_distribution;
use crate::geo::CellId;
use crate::model::{GruParams, LocationHead, MlpIds, ModelParams};
use crate::preprocess::Visit;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// A probability vector over the cells of one resolution level; at the
/// finest level it carries a trailing end-of-sequence entry.
#[derive(Debug, Clone)]
pub struct ResolutionDistribution<S: Scalar = f64> {
    pub res: u8,
    pub probs: Vec<S>,
    pub includes_eos: bool,
}

impl<S: Scalar> ResolutionDistribution<S> {
    pub fn new(res: u8, probs: Vec<S>, includes_eos: bool) -> Result<Self> {
        let cells = 1usize << (2 * res as usize);
        let expect = cells + usize::from(includes_eos);
        if probs.len() != expect {
            return Err(Error::Dimension(format!(
                "distribution over {} entries at resolution {res}, expected {expect}",
                probs.len()
            )));
        }
        validate_distribution(&probs)?;
        Ok(ResolutionDistribution {
            res,
            probs,
            includes_eos,
        })
    }

    /// Probability of the EOS token (0 when not scored).
    pub fn eos_prob(&self) -> S {
        if self.includes_eos {
            *self.probs.last().unwrap()
        } else {
            S::zero()
        }
    }
}

/// Parameter-only precomputation: encoding maps and key matrices per level.
#[derive(Debug, Clone)]
pub struct InferenceCache<S: Scalar = f64> {
    /// Hierarchical: `maps[r]` is the `(2^r, 2^r, n_dim)` encoding map.
    pub maps: Vec<Tensor<S>>,
    /// Hierarchical: `keys[r]` is the `(4^r, n_key)` key matrix; the finest
    /// level carries one extra trailing row for the EOS token.
    keys: Vec<Tensor<S>>,
}

impl<S: Scalar> InferenceCache<S> {
    pub fn build(params: &ModelParams<S>) -> Result<Self> {
        match &params.head {
            LocationHead::Baseline { .. } => Ok(InferenceCache {
                maps: Vec::new(),
                keys: Vec::new(),
            }),
            LocationHead::Hierarchical { f_key, eos_emb, .. } => {
                let maps = params.encoding_maps()?;
                let n_key = params.hyper.n_key;
                let mut keys = Vec::with_capacity(params.depth as usize + 1);
                for (r, map) in maps.iter().enumerate() {
                    let side = 1usize << r;
                    let finest = r == params.depth as usize;
                    let rows = side * side + usize::from(finest);
                    let mut matrix = Tensor::zeros(&[rows, n_key]);
                    for row in 0..side {
                        for col in 0..side {
                            let key = mlp_forward(params, f_key, &map.fiber(row, col))?;
                            let cell = row * side + col;
                            matrix.data_mut()[cell * n_key..(cell + 1) * n_key]
                                .copy_from_slice(key.data());
                        }
                    }
                    if finest {
                        let eos = mlp_forward(params, f_key, params.store.get(*eos_emb))?;
                        let last = rows - 1;
                        matrix.data_mut()[last * n_key..]
                            .copy_from_slice(eos.data());
                    }
                    keys.push(matrix);
                }
                Ok(InferenceCache { maps, keys })
            }
        }
    }
}

/// GRU hidden state while rolling a trajectory forward.
#[derive(Debug, Clone)]
pub struct GruState<S: Scalar = f64> {
    pub h: Tensor<S>,
}

/// Plain-tensor MLP forward: `W2 tanh(W1 x + b1) + b2`.
pub fn mlp_forward<S: Scalar>(
    params: &ModelParams<S>,
    ids: &MlpIds,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let store = &params.store;
    let mut hidden = tensor::matvec(store.get(ids.w1), x)?;
    hidden.axpy(S::one(), store.get(ids.b1));
    for v in hidden.data_mut() {
        *v = v.tanh();
    }
    let mut out = tensor::matvec(store.get(ids.w2), &hidden)?;
    out.axpy(S::one(), store.get(ids.b2));
    Ok(out)
}

fn gru_forward<S: Scalar>(
    params: &ModelParams<S>,
    gru: &GruParams,
    h: &Tensor<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let store = &params.store;
    let gate = |w, u, b| -> Result<Tensor<S>> {
        let mut pre = tensor::matvec(store.get(w), x)?;
        pre.axpy(S::one(), &tensor::matvec(store.get(u), h)?);
        pre.axpy(S::one(), store.get(b));
        Ok(pre)
    };
    let mut z = gate(gru.w_update, gru.u_update, gru.b_update)?;
    for v in z.data_mut() {
        *v = tensor::sigmoid(*v);
    }
    let mut r = gate(gru.w_reset, gru.u_reset, gru.b_reset)?;
    for v in r.data_mut() {
        *v = tensor::sigmoid(*v);
    }
    let gated = Tensor::from_vec(
        h.dims(),
        r.data().iter().zip(h.data()).map(|(a, b)| *a * *b).collect(),
    );
    let mut cand = tensor::matvec(store.get(gru.w_cand), x)?;
    cand.axpy(S::one(), &tensor::matvec(store.get(gru.u_cand), &gated)?);
    cand.axpy(S::one(), store.get(gru.b_cand));
    for v in cand.data_mut() {
        *v = v.tanh();
    }
    let data = h
        .data()
        .iter()
        .zip(z.data())
        .zip(cand.data())
        .map(|((hp, zi), ci)| (S::one() - *zi) * *hp + *zi * *ci)
        .collect();
    Ok(Tensor::from_vec(h.dims(), data))
}

impl<S: Scalar> ModelParams<S> {
    pub fn initial_state(&self) -> GruState<S> {
        GruState {
            h: Tensor::zeros(&[self.hyper.n_hidden]),
        }
    }

    /// Consume one input (`None` is the start token) and update the state.
    pub fn advance(
        &self,
        cache: &InferenceCache<S>,
        state: &mut GruState<S>,
        input: Option<Visit>,
    ) -> Result<()> {
        let x = match input {
            None => {
                let mut data = self.store.get(self.sos_emb).data().to_vec();
                data.extend(std::iter::repeat(S::zero()).take(self.hyper.n_dim));
                data.push(S::one());
                Tensor::from_vec(&[data.len()], data)
            }
            Some(v) => {
                if v.slot >= self.n_time {
                    return Err(Error::Range(format!(
                        "slot {} >= n_time {}",
                        v.slot, self.n_time
                    )));
                }
                if v.cell >= self.n_cells() {
                    return Err(Error::InvalidCell(format!(
                        "cell {} out of {}",
                        v.cell,
                        self.n_cells()
                    )));
                }
                let mut data = self.store.get(self.m_time).row(v.slot).into_data();
                let loc = match &self.head {
                    LocationHead::Baseline { m_poi, .. } => {
                        self.store.get(*m_poi).row(v.cell)
                    }
                    LocationHead::Hierarchical { .. } => {
                        let side = self.width();
                        cache.maps[self.depth as usize].fiber(v.cell / side, v.cell % side)
                    }
                };
                data.extend_from_slice(loc.data());
                data.push(S::zero());
                Tensor::from_vec(&[data.len()], data)
            }
        };
        state.h = gru_forward(self, &self.gru, &state.h, &x)?;
        Ok(())
    }

    /// Distribution over the cells of one resolution given the hidden state;
    /// the finest resolution also scores EOS.
    pub fn score_resolution(
        &self,
        cache: &InferenceCache<S>,
        state: &GruState<S>,
        res: u8,
    ) -> Result<ResolutionDistribution<S>> {
        if res > self.depth {
            return Err(Error::InvalidResolution(format!(
                "resolution {res} exceeds depth {}",
                self.depth
            )));
        }
        let finest = res == self.depth;
        let logits = match &self.head {
            LocationHead::Baseline {
                g_poi_w, g_poi_b, ..
            } => {
                if !finest {
                    return Err(Error::InvalidResolution(
                        "baseline scores only the finest resolution".into(),
                    ));
                }
                let mut logits = tensor::matvec(self.store.get(*g_poi_w), &state.h)?;
                logits.axpy(S::one(), self.store.get(*g_poi_b));
                logits.into_data()
            }
            LocationHead::Hierarchical { f_query, .. } => {
                let query = mlp_forward(self, f_query, &state.h)?;
                tensor::matvec(&cache.keys[res as usize], &query)?.into_data()
            }
        };
        ResolutionDistribution::new(res, tensor::softmax(&logits), finest)
    }

    /// The factorized next-visit law: a finest-resolution cell distribution
    /// (with EOS) and a time-slot distribution.
    pub fn next_distribution(
        &self,
        cache: &InferenceCache<S>,
        state: &GruState<S>,
    ) -> Result<(ResolutionDistribution<S>, Vec<S>)> {
        let cells = self.score_resolution(cache, state, self.depth)?;
        let mut logits = tensor::matvec(self.store.get(self.g_time_w), &state.h)?;
        logits.axpy(S::one(), self.store.get(self.g_time_b));
        Ok((cells, tensor::softmax(logits.data())))
    }

    /// Convenience: roll the state over a whole prefix from the start token.
    pub fn encode_prefix(
        &self,
        cache: &InferenceCache<S>,
        prefix: &[Visit],
    ) -> Result<GruState<S>> {
        let mut state = self.initial_state();
        self.advance(cache, &mut state, None)?;
        for &v in prefix {
            self.advance(cache, &mut state, Some(v))?;
        }
        Ok(state)
    }

    /// Encoding of one cell at a resolution from the cache (hierarchical).
    pub fn cached_encoding(
        &self,
        cache: &InferenceCache<S>,
        cell: CellId,
    ) -> Result<Tensor<S>> {
        if cell.res > self.depth {
            return Err(Error::InvalidResolution(format!(
                "resolution {} exceeds depth {}",
                cell.res, self.depth
            )));
        }
        if cache.maps.is_empty() {
            return Err(Error::InvalidResolution(
                "baseline generator has no hierarchical encodings".into(),
            ));
        }
        Ok(cache.maps[cell.res as usize].fiber(cell.row(), cell.col()))
    }
}
