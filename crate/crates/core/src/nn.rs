//! Small reusable layers built on the tape: linear maps, layer norm, and
//! single-head scaled dot-product attention.

use crate::autodiff::{KeyMask, Tape, Var};
use crate::error::{Result, VistaError};
use crate::ops::LN_EPS;
use crate::param::{Ctx, ParamId, ParamStore, Role};
use crate::rng::RngStream;
use crate::tensor::Scalar;

/// `softmax(q·kᵀ/√d [masked])·v` over `[.., Lq, d]`, `[.., Lk, d]`, `[.., Lk, dv]`.
/// Returns `(out, logits)` where logits are pre-softmax and already scaled.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&KeyMask>,
) -> Result<(Var, Var)> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    let vs = tape.shape(v).to_vec();
    if qs.len() < 2 || ks.len() != qs.len() || vs.len() != qs.len() {
        return Err(VistaError::dim(format!("attention ranks {qs:?} {ks:?} {vs:?}")));
    }
    let d = *qs.last().unwrap();
    let lk = ks[ks.len() - 2];
    if lk == 0 {
        return Err(VistaError::EmptyContext("attention over zero keys".into()));
    }
    if *ks.last().unwrap() != d || vs[vs.len() - 2] != lk {
        return Err(VistaError::dim(format!("attention shapes {qs:?} {ks:?} {vs:?}")));
    }
    let raw = tape.bmm(q, k, false, true)?;
    let logits = tape.scale(raw, S::lit(1.0 / (d as f64).sqrt()));
    let probs = tape.softmax(logits, mask)?;
    let out = tape.bmm(probs, v, false, false)?;
    Ok((out, logits))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weight `[fan_in, fan_out]` with std `scale/√fan_in`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        scale: f64,
        role: Role,
        rng: &mut RngStream,
    ) -> Self {
        let w = store.add_normal(
            &format!("{name}.w"),
            &[fan_in, fan_out],
            scale / (fan_in as f64).sqrt(),
            role,
            rng,
        );
        let b = bias.then(|| store.add_zeros(&format!("{name}.b"), &[fan_out], role));
        Self { w, b }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, role: Role) -> Self {
        Self {
            gain: store.add_ones(&format!("{name}.g"), &[dim], role),
            bias: store.add_zeros(&format!("{name}.b"), &[dim], role),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gain);
        let b = ctx.p(self.bias);
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer GELU feed-forward `dim -> hidden -> dim`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        out_scale: f64,
        role: Role,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, 1.0, role, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, out_scale, role, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.down.forward(ctx, h)
    }
}
