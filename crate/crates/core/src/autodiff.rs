//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation together with whatever it needs for the
//! backward pass. Values are immutable once recorded. Buffers needed only for
//! gradients (im2col columns, normalized activations) are kept only when some
//! input of the op requires a gradient, so inference on a tape with no
//! trainable leaves stays lean.

use std::rc::Rc;

use crate::error::{Result, VistaError};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-batch key validity for masked softmax: `valid[b * keys + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMask {
    pub batch: usize,
    pub keys: usize,
    pub valid: Vec<bool>,
}

impl KeyMask {
    pub fn new(batch: usize, keys: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * keys {
            return Err(VistaError::dim(format!(
                "key mask of {} entries for {batch}x{keys}",
                valid.len()
            )));
        }
        Ok(Self { batch, keys, valid })
    }

    pub fn all_valid(batch: usize, keys: usize) -> Self {
        Self {
            batch,
            keys,
            valid: vec![true; batch * keys],
        }
    }
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias(Var, Var),
    MulBias(Var, Var),
    AddBroadcast(Var, Var),
    MulScalar(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    GroupNorm { x: Var, gain: Var, bias: Var, groups: usize, xhat: Vec<S>, rstd: Vec<S> },
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Conv { x: Var, w: Var, b: Var, k: usize, cols: Option<Vec<S>> },
    AvgPool2(Var),
    Upsample2(Var),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    ConcatLast(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    MaskRows { x: Var, keep: Rc<Vec<bool>> },
    MaskedMean { x: Var, mask: Rc<Vec<bool>>, counts: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<S> },
    Mse { x: Var, target: Tensor<S> },
    SoftmaxXent { logits: Var, targets: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
    off: usize,
}

impl View {
    fn dense(rows: usize, cols: usize, off: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
            off,
        }
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            off: self.off,
        }
    }

    fn maybe_t(self, t: bool) -> Self {
        if t {
            self.t()
        } else {
            self
        }
    }
}

/// `c[coff..] (rows x cols dense) = a·b + beta·c`.
fn gemm_view<S: Scalar>(a: &[S], va: View, b: &[S], vb: View, beta: S, c: &mut [S], coff: usize) {
    debug_assert_eq!(va.cols, vb.rows);
    let m = va.rows;
    let n = vb.cols;
    S::gemm(
        m,
        va.cols,
        n,
        S::one(),
        &a[va.off..],
        va.rs,
        va.cs,
        &b[vb.off..],
        vb.rs,
        vb.cs,
        beta,
        &mut c[coff..coff + m * n],
        n as isize,
    );
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let y = half * x * (S::one() + th);
    let dinner = c * (S::one() + S::lit(3.0) * k * x * x);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * dinner;
    (y, dy)
}

fn shape4(t: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if t.len() != 4 {
        return Err(VistaError::dim(format!("{what}: expected [B,H,W,C], got {t:?}")));
    }
    Ok((t[0], t[1], t[2], t[3]))
}

/// Batch/row/col decomposition of a matmul operand with rank >= 2.
fn mat_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(VistaError::dim(format!("matmul operand needs rank >= 2, got {shape:?}")));
    }
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    let batch = shape[..shape.len() - 2].iter().product();
    Ok((batch, r, c))
}

#[derive(Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn check_finite(&self, v: Var, site: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(VistaError::numeric(format!("non-finite activations at {site}")))
        }
    }

    /// Batched matrix product over the last two axes. `b` is either rank 2
    /// (shared across the batch) or has the same leading shape as `a`.
    /// `ta`/`tb` transpose the last two axes of the stored operand.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let (ba, ar, ac) = mat_dims(&ashape)?;
        let (bb, br, bc) = mat_dims(&bshape)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(VistaError::dim(format!(
                "matmul inner dims differ: {ashape:?} x {bshape:?} (ta={ta}, tb={tb})"
            )));
        }
        let shared = bshape.len() == 2;
        if !shared && (bb != ba || bshape[..bshape.len() - 2] != ashape[..ashape.len() - 2]) {
            return Err(VistaError::dim(format!(
                "matmul batch dims differ: {ashape:?} x {bshape:?}"
            )));
        }
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![S::zero(); ba * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared && !ta {
                let va = View::dense(ba * m, k, 0);
                let vb = View::dense(br, bc, 0).maybe_t(tb);
                gemm_view(av, va, bv, vb, S::zero(), &mut out, 0);
            } else {
                for i in 0..ba {
                    let va = View::dense(ar, ac, i * ar * ac).maybe_t(ta);
                    let boff = if shared { 0 } else { i * br * bc };
                    let vb = View::dense(br, bc, boff).maybe_t(tb);
                    gemm_view(av, va, bv, vb, S::zero(), &mut out, i * m * n);
                }
            }
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul { a, b, ta, tb },
            needs,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, false, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(VistaError::dim(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).scale(s);
        let needs = self.ng(a);
        self.push(v, Op::Scale(a, s), needs)
    }

    /// `x[..., d] + b[d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(b) != [d] {
            return Err(VistaError::dim(format!(
                "bias shape {:?} for last dim {d}",
                self.shape(b)
            )));
        }
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(&bv) {
                *o = *o + bb;
            }
        }
        let needs = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddBias(x, b), needs))
    }

    /// `x[..., d] * g[d]`.
    pub fn mul_bias(&mut self, x: Var, g: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(g) != [d] {
            return Err(VistaError::dim("gain shape mismatch"));
        }
        let gv = self.value(g).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (o, &gg) in row.iter_mut().zip(&gv) {
                *o = *o * gg;
            }
        }
        let needs = self.ng(x) || self.ng(g);
        Ok(self.push(v, Op::MulBias(x, g), needs))
    }

    /// `x[b, ..., c] + e[b, c]`, broadcasting over the middle axes.
    pub fn add_broadcast(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if es.len() != 2 || xs.len() < 2 || xs[0] != es[0] || *xs.last().unwrap() != es[1] {
            return Err(VistaError::dim(format!("add_broadcast {xs:?} + {es:?}")));
        }
        let c = es[1];
        let per = self.value(x).len() / xs[0];
        let mut v = self.value(x).clone();
        {
            let ev = self.value(e).data();
            for (bi, chunk) in v.data_mut().chunks_mut(per).enumerate() {
                let erow = &ev[bi * c..(bi + 1) * c];
                for row in chunk.chunks_mut(c) {
                    for (o, &ee) in row.iter_mut().zip(erow) {
                        *o = *o + ee;
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(e);
        Ok(self.push(v, Op::AddBroadcast(x, e), needs))
    }

    /// Multiply every element by a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(VistaError::dim("mul_scalar expects a 1-element scale"));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).scale(sv);
        let needs = self.ng(x) || self.ng(s);
        Ok(self.push(v, Op::MulScalar(x, s), needs))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        let needs = self.ng(x);
        self.push(v, Op::Exp(x), needs)
    }

    /// Softmax over the last axis with max subtraction. With a mask, masked
    /// keys get probability exactly zero; rows are grouped into `mask.batch`
    /// equal consecutive blocks.
    pub fn softmax(&mut self, x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.ndim() == 0 || d == 0 {
            return Err(VistaError::dim("softmax over an empty last dimension"));
        }
        let rows = xv.rows();
        if let Some(m) = mask {
            if m.keys != d || m.batch == 0 || !rows.is_multiple_of(m.batch) {
                return Err(VistaError::dim(format!(
                    "mask {}x{} incompatible with {:?}",
                    m.batch,
                    m.keys,
                    xv.shape()
                )));
            }
        }
        let per_batch = mask.map_or(rows, |m| rows / m.batch);
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let valid = mask.map(|m| {
                let b = r / per_batch;
                &m.valid[b * d..(b + 1) * d]
            });
            let mut mx = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if valid.is_none_or(|vm| vm[j]) && v > mx {
                    mx = v;
                }
            }
            if mx == S::neg_infinity() {
                return Err(VistaError::EmptyContext(
                    "softmax row has no valid keys".into(),
                ));
            }
            let mut total = S::zero();
            for (j, v) in row.iter_mut().enumerate() {
                if valid.is_none_or(|vm| vm[j]) {
                    *v = (*v - mx).exp();
                    total = total + *v;
                } else {
                    *v = S::zero();
                }
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let needs = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    /// Layer norm over the last axis, eps inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 {
            return Err(VistaError::dim("layer_norm over empty dim"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(VistaError::dim(format!(
                "layer_norm gain/bias must be [{d}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        let eps = S::lit(eps);
        let dn = S::from_usize(d).unwrap();
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        let (xhat, rstd) = if needs { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Group norm on `[B, ..., C]` (channels-last), statistics per sample and
    /// channel group over all spatial positions.
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap_or(&0);
        if xs.len() < 2 || groups == 0 || !c.is_multiple_of(groups) {
            return Err(VistaError::dim(format!("group_norm {xs:?} with {groups} groups")));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(VistaError::dim("group_norm gain/bias shape"));
        }
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        let b = xs[0];
        let per = self.value(x).len() / b;
        let n = per / c;
        let cg = c / groups;
        let cnt = S::from_usize(n * cg).unwrap();
        let eps = S::lit(eps);
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let xv = self.value(x).data();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); b * groups];
        let mut out = vec![S::zero(); xv.len()];
        for bi in 0..b {
            let base = bi * per;
            for g in 0..groups {
                let mut sum = S::zero();
                for p in 0..n {
                    let o = base + p * c + g * cg;
                    for j in 0..cg {
                        sum = sum + xv[o + j];
                    }
                }
                let mean = sum / cnt;
                let mut var = S::zero();
                for p in 0..n {
                    let o = base + p * c + g * cg;
                    for j in 0..cg {
                        let dlt = xv[o + j] - mean;
                        var = var + dlt * dlt;
                    }
                }
                let rs = S::one() / (var / cnt + eps).sqrt();
                rstd[bi * groups + g] = rs;
                for p in 0..n {
                    let o = base + p * c + g * cg;
                    for j in 0..cg {
                        let ch = g * cg + j;
                        let h = (xv[o + j] - mean) * rs;
                        xhat[o + j] = h;
                        out[o + j] = h * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let (xhat, rstd) = if needs { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            Tensor::new(&xs, out)?,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| gelu_parts(a).0);
        let needs = self.ng(x);
        self.push(v, Op::Gelu(x), needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let needs = self.ng(x);
        self.push(v, Op::Silu(x), needs)
    }

    /// Same-padded stride-1 convolution on `[B, H, W, Cin]` with an odd
    /// square kernel. `w` is `[k*k*Cin, Cout]` with rows ordered (ky, kx, cin).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Result<Var> {
        let (bn, h, wd, cin) = shape4(self.shape(x), "conv2d")?;
        let ws = self.shape(w).to_vec();
        if k.is_multiple_of(2) || ws.len() != 2 || ws[0] != k * k * cin {
            return Err(VistaError::dim(format!(
                "conv2d weight {ws:?} for k={k}, cin={cin}"
            )));
        }
        let cout = ws[1];
        if self.shape(b) != [cout] {
            return Err(VistaError::dim("conv2d bias shape"));
        }
        let rows = bn * h * wd;
        let kk = k * k * cin;
        let cols = if k == 1 {
            None
        } else {
            Some(im2col(self.value(x).data(), bn, h, wd, cin, k))
        };
        let mut out = vec![S::zero(); rows * cout];
        {
            let src = cols.as_deref().unwrap_or(self.value(x).data());
            gemm_view(
                src,
                View::dense(rows, kk, 0),
                self.value(w).data(),
                View::dense(kk, cout, 0),
                S::zero(),
                &mut out,
                0,
            );
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o = *o + bb;
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        let keep_cols = if self.ng(w) { cols } else { None };
        Ok(self.push(
            Tensor::new(&[bn, h, wd, cout], out)?,
            Op::Conv {
                x,
                w,
                b,
                k,
                cols: keep_cols,
            },
            needs,
        ))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (bn, h, w, c) = shape4(self.shape(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(VistaError::dim("avg_pool2 needs even spatial dims"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let q = S::lit(0.25);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); bn * ho * wo * c];
        for bi in 0..bn {
            for y in 0..ho {
                for xx in 0..wo {
                    let o = ((bi * ho + y) * wo + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[o + ch] = out[o + ch] + xv[i + ch] * q;
                        }
                    }
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(&[bn, ho, wo, c], out)?, Op::AvgPool2(x), needs))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (bn, h, w, c) = shape4(self.shape(x), "upsample2")?;
        let (ho, wo) = (h * 2, w * 2);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); bn * ho * wo * c];
        for bi in 0..bn {
            for y in 0..ho {
                for xx in 0..wo {
                    let o = ((bi * ho + y) * wo + xx) * c;
                    let i = ((bi * h + y / 2) * w + xx / 2) * c;
                    out[o..o + c].copy_from_slice(&xv[i..i + c]);
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(&[bn, ho, wo, c], out)?, Op::Upsample2(x), needs))
    }

    /// `[B, H, W, C] -> [B, H/f, W/f, f*f*C]`, channel order (dy, dx, c).
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Result<Var> {
        let (bn, h, w, c) = shape4(self.shape(x), "space_to_depth")?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(VistaError::dim("space_to_depth factor must divide H and W"));
        }
        let out = s2d(self.value(x).data(), bn, h, w, c, f);
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::new(&[bn, h / f, w / f, c * f * f], out)?,
            Op::SpaceToDepth(x, f),
            needs,
        ))
    }

    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Result<Var> {
        let (bn, h, w, cf) = shape4(self.shape(x), "depth_to_space")?;
        if f == 0 || cf % (f * f) != 0 {
            return Err(VistaError::dim("depth_to_space channels not divisible"));
        }
        let out = d2s(self.value(x).data(), bn, h, w, cf / (f * f), f);
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::new(&[bn, h * f, w * f, cf / (f * f)], out)?,
            Op::DepthToSpace(x, f),
            needs,
        ))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| VistaError::dim("concat of nothing"))?).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if &s[..s.len() - 1] != lead {
                return Err(VistaError::dim(format!("concat_last {first:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wdt) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * wdt..(r + 1) * wdt]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let needs = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatLast(xs.to_vec()), needs))
    }

    /// Concatenate `[.., L_i, D]` tensors along the sequence axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| VistaError::dim("concat of nothing"))?).to_vec();
        if first.len() < 2 {
            return Err(VistaError::dim("concat_rows needs rank >= 2"));
        }
        let n = first.len();
        let d = first[n - 1];
        let mut flat = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v).to_vec();
            if s.len() != n || s[n - 1] != d || s[..n - 2] != first[..n - 2] {
                return Err(VistaError::dim(format!("concat_rows {first:?} vs {s:?}")));
            }
            total += s[n - 2];
            let mut fs = s[..n - 2].to_vec();
            fs.push(s[n - 2] * d);
            flat.push(self.reshape(v, &fs)?);
        }
        let joined = self.concat_last(&flat)?;
        let mut shape = first[..n - 2].to_vec();
        shape.extend([total, d]);
        self.reshape(joined, &shape)
    }

    /// Row lookup into a `[V, D]` table, producing `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(VistaError::dim("gather_rows table must be rank 2"));
        }
        let d = ts[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= ts[0] {
                return Err(VistaError::dim(format!("row id {i} out of range {}", ts[0])));
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let needs = self.ng(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let needs = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), needs))
    }

    /// Zero every last-axis row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != keep.len() {
            return Err(VistaError::dim(format!(
                "mask_rows: {} flags for {} rows",
                keep.len(),
                xv.rows()
            )));
        }
        let d = xv.last_dim();
        let mut v = xv.clone();
        for (row, &k) in v.data_mut().chunks_mut(d).zip(keep) {
            if !k {
                row.iter_mut().for_each(|e| *e = S::zero());
            }
        }
        let needs = self.ng(x);
        Ok(self.push(
            v,
            Op::MaskRows {
                x,
                keep: Rc::new(keep.to_vec()),
            },
            needs,
        ))
    }

    /// Mean over valid positions of `[B, L, D]` giving `[B, D]`.
    pub fn masked_mean(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || valid.len() != xs[0] * xs[1] {
            return Err(VistaError::dim(format!("masked_mean {xs:?} with {} flags", valid.len())));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); b * d];
        let mut counts = vec![0usize; b];
        for bi in 0..b {
            for li in 0..l {
                if valid[bi * l + li] {
                    counts[bi] += 1;
                    let o = (bi * l + li) * d;
                    for j in 0..d {
                        out[bi * d + j] = out[bi * d + j] + xv[o + j];
                    }
                }
            }
            if counts[bi] == 0 {
                return Err(VistaError::EmptyContext(
                    "pooling over a sequence with no valid positions".into(),
                ));
            }
            let cn = S::from_usize(counts[bi]).unwrap();
            for j in 0..d {
                out[bi * d + j] = out[bi * d + j] / cn;
            }
        }
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::new(&[b, d], out)?,
            Op::MaskedMean {
                x,
                mask: Rc::new(valid.to_vec()),
                counts,
            },
            needs,
        ))
    }

    /// Normalize every last-axis row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut v = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        let floor = S::lit(1e-12);
        for row in v.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&a| a * a).sum::<S>().sqrt().max(floor);
            norms.push(n);
            row.iter_mut().for_each(|a| *a = *a / n);
        }
        let needs = self.ng(x);
        self.push(v, Op::L2Normalize { x, norms }, needs)
    }

    /// Mean squared error against a constant target, as a 1-element tensor.
    pub fn mse(&mut self, x: Var, target: &Tensor<S>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(VistaError::dim(format!(
                "mse shape {:?} vs target {:?}",
                xv.shape(),
                target.shape()
            )));
        }
        let n = S::from_usize(xv.len().max(1)).unwrap();
        let loss = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &t)| (a - t) * (a - t))
            .sum::<S>()
            / n;
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::new(&[1], vec![loss])?,
            Op::Mse {
                x,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// Mean cross-entropy of row-wise softmax over `[N, C]` logits.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != targets.len() {
            return Err(VistaError::dim("softmax_xent expects [N, C] with N targets"));
        }
        let c = lv.shape()[1];
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(VistaError::dim("target class out of range"));
            }
            let row = lv.row(r);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln() + mx;
            total = total + lse - row[t];
        }
        let n = S::from_usize(targets.len().max(1)).unwrap();
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::new(&[1], vec![total / n])?,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.ng(x);
        self.push(Tensor::full(&[1], s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let needs = self.ng(x);
        self.push(Tensor::full(&[1], s), Op::Mean(x), needs)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).len() != 1 {
            return Err(VistaError::dim("backward needs a one-element loss"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop(&self, node: &Node<S>, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let dyv = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, dy, grads),
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.scale(-S::one()));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let g = dy.zip_map(self.value(*b), |g, y| g * y)?;
                    self.acc(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = dy.zip_map(self.value(*a), |g, x| g * x)?;
                    self.acc(grads, *b, g);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, dy.scale(*s)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, dy.clone());
                let d = self.value(*b).len();
                self.acc_with(grads, *b, |gb| {
                    for row in dyv.chunks(d) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                });
            }
            Op::MulBias(x, g) => {
                let d = self.value(*g).len();
                if self.ng(*x) {
                    let gv = self.value(*g).data();
                    let mut gx = dy.clone();
                    for row in gx.data_mut().chunks_mut(d) {
                        for (o, &gg) in row.iter_mut().zip(gv) {
                            *o = *o * gg;
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                let xv = self.value(*x).data();
                self.acc_with(grads, *g, |gg| {
                    for (row, xr) in dyv.chunks(d).zip(xv.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + row[j] * xr[j];
                        }
                    }
                });
            }
            Op::AddBroadcast(x, e) => {
                self.acc(grads, *x, dy.clone());
                let es = self.shape(*e);
                let (b, c) = (es[0], es[1]);
                let per = dy.len() / b;
                self.acc_with(grads, *e, |ge| {
                    for (bi, chunk) in dyv.chunks(per).enumerate() {
                        for row in chunk.chunks(c) {
                            for j in 0..c {
                                ge[bi * c + j] = ge[bi * c + j] + row[j];
                            }
                        }
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                if self.ng(*x) {
                    self.acc(grads, *x, dy.scale(sv));
                }
                if self.ng(*s) {
                    let dot: S = dyv.iter().zip(self.value(*x).data()).map(|(&g, &v)| g * v).sum();
                    self.acc(grads, *s, Tensor::full(self.shape(*s), dot));
                }
            }
            Op::Exp(x) => {
                let g = dy.zip_map(&node.value, |g, y| g * y)?;
                self.acc(grads, *x, g);
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut gx = dy.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(node.value.data().chunks(d)) {
                    let dot: S = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for (g, &y) in grow.iter_mut().zip(yrow) {
                        *g = y * (*g - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.ng(*x) {
                    let dn = S::from_usize(d).unwrap();
                    let mut gx = vec![S::zero(); dyv.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let o = r * d;
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let dh = dyv[o + j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[o + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dh = dyv[o + j] * gv[j];
                            gx[o + j] = *rs * (dh - m1 - xhat[o + j] * m2);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
                self.acc_with(grads, *gain, |gg| {
                    for (row, hr) in dyv.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + row[j] * hr[j];
                        }
                    }
                });
                self.acc_with(grads, *bias, |gb| {
                    for row in dyv.chunks(d) {
                        for j in 0..d {
                            gb[j] = gb[j] + row[j];
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                rstd,
            } => {
                let xs = self.shape(*x);
                let c = *xs.last().unwrap();
                let b = xs[0];
                let per = dy.len() / b;
                let n = per / c;
                let cg = c / groups;
                let cnt = S::from_usize(n * cg).unwrap();
                let gv = self.value(*gain).data();
                if self.ng(*x) {
                    let mut gx = vec![S::zero(); dyv.len()];
                    for bi in 0..b {
                        for g in 0..*groups {
                            let rs = rstd[bi * groups + g];
                            let mut m1 = S::zero();
                            let mut m2 = S::zero();
                            for p in 0..n {
                                let o = bi * per + p * c + g * cg;
                                for j in 0..cg {
                                    let dh = dyv[o + j] * gv[g * cg + j];
                                    m1 = m1 + dh;
                                    m2 = m2 + dh * xhat[o + j];
                                }
                            }
                            m1 = m1 / cnt;
                            m2 = m2 / cnt;
                            for p in 0..n {
                                let o = bi * per + p * c + g * cg;
                                for j in 0..cg {
                                    let dh = dyv[o + j] * gv[g * cg + j];
                                    gx[o + j] = rs * (dh - m1 - xhat[o + j] * m2);
                                }
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(xs, gx)?);
                }
                self.acc_with(grads, *gain, |gg| {
                    for (row, hr) in dyv.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + row[j] * hr[j];
                        }
                    }
                });
                self.acc_with(grads, *bias, |gb| {
                    for row in dyv.chunks(c) {
                        for j in 0..c {
                            gb[j] = gb[j] + row[j];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let g = dy.zip_map(self.value(*x), |g, a| g * gelu_parts(a).1)?;
                self.acc(grads, *x, g);
            }
            Op::Silu(x) => {
                let g = dy.zip_map(self.value(*x), |g, a| {
                    let s = sigmoid(a);
                    g * s * (S::one() + a * (S::one() - s))
                })?;
                self.acc(grads, *x, g);
            }
            Op::Conv { x, w, b, k, cols } => {
                let (bn, h, wd, cin) = shape4(self.shape(*x), "conv2d")?;
                let cout = self.shape(*w)[1];
                let rows = bn * h * wd;
                let kk = k * k * cin;
                if self.ng(*w) {
                    let src = cols.as_deref().unwrap_or(self.value(*x).data());
                    self.acc_with(grads, *w, |gw| {
                        gemm_view(
                            src,
                            View::dense(rows, kk, 0).t(),
                            dyv,
                            View::dense(rows, cout, 0),
                            S::one(),
                            gw,
                            0,
                        );
                    });
                }
                self.acc_with(grads, *b, |gb| {
                    for row in dyv.chunks(cout) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                });
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    if *k == 1 {
                        self.acc_with(grads, *x, |gx| {
                            gemm_view(
                                dyv,
                                View::dense(rows, cout, 0),
                                wv,
                                View::dense(kk, cout, 0).t(),
                                S::one(),
                                gx,
                                0,
                            );
                        });
                    } else {
                        let mut dcols = vec![S::zero(); rows * kk];
                        gemm_view(
                            dyv,
                            View::dense(rows, cout, 0),
                            wv,
                            View::dense(kk, cout, 0).t(),
                            S::zero(),
                            &mut dcols,
                            0,
                        );
                        self.acc_with(grads, *x, |gx| col2im(&dcols, gx, bn, h, wd, cin, *k));
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (bn, h, w, c) = shape4(self.shape(*x), "avg_pool2")?;
                let (ho, wo) = (h / 2, w / 2);
                let q = S::lit(0.25);
                self.acc_with(grads, *x, |gx| {
                    for bi in 0..bn {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let o = ((bi * ho + y) * wo + xx) * c;
                                for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let i = ((bi * h + 2 * y + dy_) * w + 2 * xx + dx_) * c;
                                    for ch in 0..c {
                                        gx[i + ch] = gx[i + ch] + dyv[o + ch] * q;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (bn, h, w, c) = shape4(self.shape(*x), "upsample2")?;
                let (ho, wo) = (h * 2, w * 2);
                self.acc_with(grads, *x, |gx| {
                    for bi in 0..bn {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let o = ((bi * ho + y) * wo + xx) * c;
                                let i = ((bi * h + y / 2) * w + xx / 2) * c;
                                for ch in 0..c {
                                    gx[i + ch] = gx[i + ch] + dyv[o + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::SpaceToDepth(x, f) => {
                let (bn, h, w, c) = shape4(self.shape(*x), "space_to_depth")?;
                let back = d2s(dyv, bn, h / f, w / f, c, *f);
                self.acc(grads, *x, Tensor::new(&[bn, h, w, c], back)?);
            }
            Op::DepthToSpace(x, f) => {
                let (bn, h, w, cf) = shape4(self.shape(*x), "depth_to_space")?;
                let back = s2d(dyv, bn, h * f, w * f, cf / (f * f), *f);
                self.acc(grads, *x, Tensor::new(&[bn, h, w, cf], back)?);
            }
            Op::ConcatLast(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total;
                let mut off = 0;
                for (&v, &wdt) in xs.iter().zip(&widths) {
                    self.acc_with(grads, v, |gv| {
                        for r in 0..rows {
                            let src = &dyv[r * total + off..r * total + off + wdt];
                            for (g, &s) in gv[r * wdt..(r + 1) * wdt].iter_mut().zip(src) {
                                *g = *g + s;
                            }
                        }
                    });
                    off += wdt;
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).last_dim();
                self.acc_with(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + dyv[r * d + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let g = dy.clone().reshape(self.shape(*x))?;
                self.acc(grads, *x, g);
            }
            Op::MaskRows { x, keep } => {
                let d = dy.last_dim();
                let mut g = dy.clone();
                for (row, &k) in g.data_mut().chunks_mut(d).zip(keep.iter()) {
                    if !k {
                        row.iter_mut().for_each(|e| *e = S::zero());
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::MaskedMean { x, mask, counts } => {
                let xs = self.shape(*x);
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                self.acc_with(grads, *x, |gx| {
                    for bi in 0..b {
                        let cn = S::from_usize(counts[bi]).unwrap();
                        for li in 0..l {
                            if mask[bi * l + li] {
                                let o = (bi * l + li) * d;
                                for j in 0..d {
                                    gx[o + j] = gx[o + j] + dyv[bi * d + j] / cn;
                                }
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = dy.last_dim();
                let yv = node.value.data();
                let mut g = vec![S::zero(); dyv.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let o = r * d;
                    let dot: S = (0..d).map(|j| yv[o + j] * dyv[o + j]).sum();
                    for j in 0..d {
                        g[o + j] = (dyv[o + j] - yv[o + j] * dot) / n;
                    }
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), g)?);
            }
            Op::Mse { x, target } => {
                let s = dyv[0] * S::lit(2.0) / S::from_usize(target.len().max(1)).unwrap();
                let g = self.value(*x).zip_map(target, |a, t| (a - t) * s)?;
                self.acc(grads, *x, g);
            }
            Op::SoftmaxXent { logits, targets } => {
                let lv = self.value(*logits);
                let c = lv.shape()[1];
                let s = dyv[0] / S::from_usize(targets.len().max(1)).unwrap();
                let mut g = vec![S::zero(); lv.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = lv.row(r);
                    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / z;
                        let onehot = if j == t { S::one() } else { S::zero() };
                        g[r * c + j] = (p - onehot) * s;
                    }
                }
                self.acc(grads, *logits, Tensor::new(lv.shape(), g)?);
            }
            Op::Sum(x) => {
                let g = Tensor::full(self.shape(*x), dyv[0]);
                self.acc(grads, *x, g);
            }
            Op::Mean(x) => {
                let n = S::from_usize(self.value(*x).len().max(1)).unwrap();
                let g = Tensor::full(self.shape(*x), dyv[0] / n);
                self.acc(grads, *x, g);
            }
        }
        Ok(())
    }

    fn backprop_matmul(&self, a: Var, b: Var, ta: bool, tb: bool, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let ashape = self.shape(a);
        let bshape = self.shape(b);
        let (ba, ar, ac) = mat_dims(ashape).expect("validated in forward");
        let (_, br, bc) = mat_dims(bshape).expect("validated in forward");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let n = if tb { br } else { bc };
        let shared = bshape.len() == 2;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let dyv = dy.data();
        if self.ng(a) {
            self.acc_with(grads, a, |ga| {
                if shared && !ta {
                    // dA[(B*M) x K] = dC · Bᵀ
                    let vb = View::dense(br, bc, 0).maybe_t(tb);
                    gemm_view(dyv, View::dense(ba * m, n, 0), bv, vb.t(), S::one(), ga, 0);
                } else {
                    for i in 0..ba {
                        let boff = if shared { 0 } else { i * br * bc };
                        let vb = View::dense(br, bc, boff).maybe_t(tb);
                        let vdc = View::dense(m, n, i * m * n);
                        if ta {
                            // stored A is K x M: dA = B · dCᵀ
                            gemm_view(bv, vb, dyv, vdc.t(), S::one(), ga, i * ar * ac);
                        } else {
                            gemm_view(dyv, vdc, bv, vb.t(), S::one(), ga, i * ar * ac);
                        }
                    }
                }
            });
        }
        if self.ng(b) {
            self.acc_with(grads, b, |gb| {
                if shared && !ta {
                    let va = View::dense(ba * m, k, 0);
                    let vdc = View::dense(ba * m, n, 0);
                    if tb {
                        gemm_view(dyv, vdc.t(), av, va, S::one(), gb, 0);
                    } else {
                        gemm_view(av, va.t(), dyv, vdc, S::one(), gb, 0);
                    }
                } else {
                    for i in 0..ba {
                        let va = View::dense(ar, ac, i * ar * ac).maybe_t(ta);
                        let vdc = View::dense(m, n, i * m * n);
                        let boff = if shared { 0 } else { i * br * bc };
                        if tb {
                            gemm_view(dyv, vdc.t(), av, va, S::one(), gb, boff);
                        } else {
                            gemm_view(av, va.t(), dyv, vdc, S::one(), gb, boff);
                        }
                    }
                }
            });
        }
    }
}

fn im2col<S: Scalar>(x: &[S], bn: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let kk = k * k * c;
    let mut cols = vec![S::zero(); bn * h * w * kk];
    for bi in 0..bn {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * kk;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], gx: &mut [S], bn: usize, h: usize, w: usize, c: usize, k: usize) {
    let pad = (k / 2) as isize;
    let kk = k * k * c;
    for bi in 0..bn {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * kk;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            gx[dst + ch] = gx[dst + ch] + cols[src + ch];
                        }
                    }
                }
            }
        }
    }
}

fn s2d<S: Scalar>(x: &[S], bn: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<S> {
    let (ho, wo) = (h / f, w / f);
    let co = c * f * f;
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..bn {
        for y in 0..h {
            for xx in 0..w {
                let src = ((bi * h + y) * w + xx) * c;
                let dst = ((bi * ho + y / f) * wo + xx / f) * co + ((y % f) * f + xx % f) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

fn d2s<S: Scalar>(x: &[S], bn: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<S> {
    // x is [bn, h, w, c*f*f]; output [bn, h*f, w*f, c]
    let (ho, wo) = (h * f, w * f);
    let ci = c * f * f;
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..bn {
        for y in 0..ho {
            for xx in 0..wo {
                let dst = ((bi * ho + y) * wo + xx) * c;
                let src = ((bi * h + y / f) * w + xx / f) * ci + ((y % f) * f + xx % f) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}
