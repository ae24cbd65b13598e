//! History fusion: the current prompt cross-attends over one earlier
//! (prompt, image) pair through a stack of pre-norm residual blocks.

use crate::autodiff::{KeyMask, Var};
use crate::encoders::{ImageEmbedding, TextEmbedding};
use crate::error::{Result, VistaError};
use crate::nn::{attention, FeedForward, LayerNorm, Linear};
use crate::param::{Ctx, ParamStore, Role};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Key/value sequence built from one history pair, text rows first.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryContext {
    pub emb: Tensor<f32>,
    pub valid: Vec<bool>,
    pub pair_index: usize,
}

impl HistoryContext {
    pub fn len(&self) -> usize {
        self.emb.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.emb.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.emb.last_dim()
    }
}

fn join(parts: &[(&Tensor<f32>, Vec<bool>)], pair_index: usize) -> Result<HistoryContext> {
    let d = parts[0].0.last_dim();
    if parts.iter().any(|(t, _)| t.ndim() != 2 || t.last_dim() != d) {
        return Err(VistaError::dim("history parts must share the embedding width"));
    }
    let mut data = Vec::new();
    let mut valid = Vec::new();
    for (t, v) in parts {
        data.extend_from_slice(t.data());
        valid.extend_from_slice(v);
    }
    Ok(HistoryContext {
        emb: Tensor::new(&[valid.len(), d], data)?,
        valid,
        pair_index,
    })
}

pub fn concat_history(cp: &TextEmbedding, ci: &ImageEmbedding, pair_index: usize) -> Result<HistoryContext> {
    join(
        &[(&cp.emb, cp.valid.clone()), (&ci.emb, vec![true; ci.emb.rows()])],
        pair_index,
    )
}

pub fn text_only_history(cp: &TextEmbedding, pair_index: usize) -> Result<HistoryContext> {
    join(&[(&cp.emb, cp.valid.clone())], pair_index)
}

pub fn image_only_history(ci: &ImageEmbedding, pair_index: usize) -> Result<HistoryContext> {
    join(&[(&ci.emb, vec![true; ci.emb.rows()])], pair_index)
}

/// Fusion output, one row per current-prompt position. PAD rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionFeature {
    pub emb: Tensor<f32>,
    pub valid: Vec<bool>,
    pub source: usize,
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

fn near_identity<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    d: usize,
    noise: f64,
    rng: &mut RngStream,
) -> Linear {
    let mut w = Tensor::<S>::identity(d);
    for x in w.data_mut() {
        *x = *x + S::lit(noise * rng.normal());
    }
    Linear {
        w: store.add(&format!("{name}.w"), w, Role::Fusion),
        b: None,
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub dim: usize,
    pub blocks: Vec<FusionBlock>,
}

/// Batched fusion output and per-block pre-softmax logits `[B, Lq, Lh]`.
pub struct FusionOutput {
    pub features: Var,
    pub logits: Vec<Var>,
}

impl FusionModel {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, dim: usize, depth: usize, rng: &mut RngStream) -> Self {
        let r = Role::Fusion;
        let blocks = (0..depth)
            .map(|i| {
                let n = format!("fusion.block{i}");
                FusionBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), dim, r),
                    q: near_identity(store, &format!("{n}.q"), dim, 0.02, rng),
                    k: near_identity(store, &format!("{n}.k"), dim, 0.02, rng),
                    v: near_identity(store, &format!("{n}.v"), dim, 0.02, rng),
                    o: Linear::new(store, &format!("{n}.o"), dim, dim, true, 0.1, r, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), dim, r),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), dim, 4 * dim, 0.1, r, rng),
                }
            })
            .collect();
        Self { dim, blocks }
    }

    /// `current` is `[B, Lq, D]` with `query_valid` flags; `history` is
    /// `[B, Lh, D]` masked by `history_mask`.
    pub fn forward<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        current: Var,
        query_valid: &[bool],
        history: Var,
        history_mask: &KeyMask,
    ) -> Result<FusionOutput> {
        let hs = ctx.tape.shape(history).to_vec();
        if hs.len() != 3 || hs[1] == 0 {
            return Err(VistaError::EmptyContext("fusion over an empty history".into()));
        }
        if hs[2] != self.dim || ctx.tape.shape(current).last() != Some(&self.dim) {
            return Err(VistaError::dim("fusion inputs must have the model width"));
        }
        let mut x = current;
        let mut logits = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = b.ln1.forward(ctx, x)?;
            let q = b.q.forward(ctx, h)?;
            let k = b.k.forward(ctx, history)?;
            let v = b.v.forward(ctx, history)?;
            let (a, l) = attention(&mut ctx.tape, q, k, v, Some(history_mask))?;
            logits.push(l);
            let a = b.o.forward(ctx, a)?;
            x = ctx.tape.add(x, a)?;
            let h = b.ln2.forward(ctx, x)?;
            let f = b.ffn.forward(ctx, h)?;
            x = ctx.tape.add(x, f)?;
        }
        let features = ctx.tape.mask_rows(x, query_valid)?;
        Ok(FusionOutput { features, logits })
    }

    /// Fuse one current prompt against several histories in one batch.
    pub fn fuse_all(
        &self,
        store: &ParamStore<f32>,
        current: &TextEmbedding,
        histories: &[HistoryContext],
    ) -> Result<Vec<(FusionFeature, Tensor<f32>)>> {
        if histories.is_empty() {
            return Err(VistaError::EmptyContext("no history pairs to fuse".into()));
        }
        if current.is_null() {
            return Err(VistaError::EmptyContext("fusion query has no valid tokens".into()));
        }
        let mut out = Vec::with_capacity(histories.len());
        // Group by length so each group is one batched forward.
        let mut order: Vec<usize> = (0..histories.len()).collect();
        order.sort_by_key(|&i| histories[i].len());
        let mut results: Vec<Option<(FusionFeature, Tensor<f32>)>> = vec![None; histories.len()];
        let mut start = 0;
        while start < order.len() {
            let len = histories[order[start]].len();
            let end = order[start..]
                .iter()
                .position(|&i| histories[i].len() != len)
                .map_or(order.len(), |p| start + p);
            let group = &order[start..end];
            let b = group.len();
            let lq = current.emb.rows();
            let mut ctx = Ctx::inference(store);
            let cur = Tensor::stack(&vec![&current.emb; b])?;
            let cur = ctx.constant(cur);
            let hist = Tensor::stack(&group.iter().map(|&i| &histories[i].emb).collect::<Vec<_>>())?;
            let hist = ctx.constant(hist);
            let mask = KeyMask::new(b, len, group.iter().flat_map(|&i| histories[i].valid.clone()).collect())?;
            let qv: Vec<bool> = (0..b).flat_map(|_| current.valid.clone()).collect();
            let o = self.forward(&mut ctx, cur, &qv, hist, &mask)?;
            let feats = ctx.tape.value(o.features);
            let l1 = ctx.tape.value(o.logits[0]);
            for (j, &i) in group.iter().enumerate() {
                results[i] = Some((
                    FusionFeature {
                        emb: feats.slice_first(j, j + 1)?.reshape(&[lq, self.dim])?,
                        valid: current.valid.clone(),
                        source: histories[i].pair_index,
                    },
                    l1.slice_first(j, j + 1)?.reshape(&[lq, len])?,
                ));
            }
            start = end;
        }
        for r in results {
            out.push(r.expect("every history assigned to a group"));
        }
        Ok(out)
    }

    pub fn fuse(
        &self,
        store: &ParamStore<f32>,
        current: &TextEmbedding,
        history: &HistoryContext,
    ) -> Result<(FusionFeature, Tensor<f32>)> {
        Ok(self.fuse_all(store, current, std::slice::from_ref(history))?.remove(0))
    }
}
