//! Tensor-level entry points for the primitive ops. Each one records onto a
//! throwaway tape, so forward values come from exactly the same code the
//! differentiable path uses.

use crate::autodiff::{KeyMask, Tape};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn softmax_lastdim<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.softmax(v, None)?;
    Ok(tape.value(out).clone())
}

/// `softmax(Q·Kᵀ/√d)·V`, also returning the pre-softmax logits `Q·Kᵀ/√d`.
pub fn scaled_dot_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut tape = Tape::new();
    let (vq, vk, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (out, logits) = crate::nn::attention(&mut tape, vq, vk, vv, None)?;
    Ok((tape.value(out).clone(), tape.value(logits).clone()))
}

pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let out = tape.layer_norm(vx, vg, vb, LN_EPS)?;
    Ok(tape.value(out).clone())
}

pub fn masked_softmax<S: Scalar>(x: &Tensor<S>, mask: &KeyMask) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.softmax(v, Some(mask))?;
    Ok(tape.value(out).clone())
}
