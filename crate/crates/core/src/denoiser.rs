//! Pixel-space U-Net noise predictor with text cross-attention, plus the
//! history adapter: a parallel attention branch over the fusion feature that
//! shares each site's queries and is mixed in as `Z + λ·Zc`.

use crate::autodiff::{KeyMask, Tape, Var};
use crate::dataset::{CHANNELS, IMG};
use crate::error::{Result, VistaError};
use crate::nn::{attention, LayerNorm, Linear};
use crate::param::{Ctx, ParamId, ParamStore, Role};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

const GN_GROUPS: usize = 8;
const GN_EPS: f64 = 1e-5;
const TEMB_IN: usize = 64;
const TEMB: usize = 128;

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl Conv {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        scale: f64,
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = k * k * cin;
        Self {
            w: store.add_normal(&format!("{name}.w"), &[fan_in, cout], scale / (fan_in as f64).sqrt(), Role::Base, rng),
            b: store.add_zeros(&format!("{name}.b"), &[cout], Role::Base),
            k,
        }
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.tape.conv2d(x, w, b, self.k)
    }
}

#[derive(Clone, Debug)]
struct GroupNorm {
    gain: ParamId,
    bias: ParamId,
}

impl GroupNorm {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize) -> Self {
        Self {
            gain: store.add_ones(&format!("{name}.g"), &[c], Role::Base),
            bias: store.add_zeros(&format!("{name}.b"), &[c], Role::Base),
        }
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gain);
        let b = ctx.p(self.bias);
        ctx.tape.group_norm(x, g, b, GN_GROUPS, GN_EPS)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cin: usize, cout: usize, rng: &mut RngStream) -> Self {
        Self {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), cin),
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1.4, rng),
            temb: Linear::new(store, &format!("{name}.temb"), TEMB, cout, true, 1.0, Role::Base, rng),
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), cout),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 0.3, rng),
            skip: (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1.0, rng)),
        }
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var, temb: Var) -> Result<Var> {
        let h = self.gn1.forward(ctx, x)?;
        let h = ctx.tape.silu(h);
        let h = self.conv1.forward(ctx, h)?;
        let e = self.temb.forward(ctx, temb)?;
        let h = ctx.tape.add_broadcast(h, e)?;
        let h = self.gn2.forward(ctx, h)?;
        let h = ctx.tape.silu(h);
        let h = self.conv2.forward(ctx, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(s, h)
    }
}

/// One text cross-attention site of the base network.
#[derive(Clone, Debug)]
pub struct AttnSite {
    pub name: String,
    pub channels: usize,
    pub ln: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnSite {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize, ctx_dim: usize, rng: &mut RngStream) -> Self {
        let n = format!("unet.{name}");
        let r = Role::Base;
        Self {
            name: name.to_owned(),
            channels: c,
            ln: LayerNorm::new(store, &format!("{n}.ln"), c, r),
            q: Linear::new(store, &format!("{n}.q"), c, c, false, 1.0, r, rng),
            k: Linear::new(store, &format!("{n}.k"), ctx_dim, c, false, 1.0, r, rng),
            v: Linear::new(store, &format!("{n}.v"), ctx_dim, c, false, 1.0, r, rng),
            o: Linear::new(store, &format!("{n}.o"), c, c, true, 0.3, r, rng),
        }
    }
}

/// The adapter twin of an [`AttnSite`]: key/value projections from `c^F`.
#[derive(Clone, Debug)]
pub struct AdapterSite {
    pub name: String,
    pub k: Linear,
    pub v: Linear,
}

/// Token-level context handed to every site.
pub struct SiteContext<'a> {
    /// `[B, L+1, D]`: prompt rows plus the null token.
    pub text: Var,
    pub text_mask: &'a KeyMask,
    /// `[B, Lf, D]` fusion feature with its mask, or `None` when absent.
    pub fusion: Option<(Var, &'a KeyMask)>,
    pub lambda: f64,
}

/// `Attention(latent·W_q, cP·W_k, cP·W_v)` with PAD keys masked.
pub fn base_cross_attention<S: Scalar>(
    ctx: &mut Ctx<S>,
    site: &AttnSite,
    q: Var,
    text: Var,
    mask: &KeyMask,
) -> Result<Var> {
    let k = site.k.forward(ctx, text)?;
    let v = site.v.forward(ctx, text)?;
    Ok(attention(&mut ctx.tape, q, k, v, Some(mask))?.0)
}

/// `Attention(latent·W_q, cF·W'_k, cF·W'_v)` sharing the base query.
pub fn history_cross_attention<S: Scalar>(
    ctx: &mut Ctx<S>,
    site: &AdapterSite,
    q: Var,
    fusion: Var,
    mask: &KeyMask,
) -> Result<Var> {
    let k = site.k.forward(ctx, fusion)?;
    let v = site.v.forward(ctx, fusion)?;
    Ok(attention(&mut ctx.tape, q, k, v, Some(mask))?.0)
}

/// `Z' = Z + λ·Zc` on the tape.
pub fn mix_var<S: Scalar>(tape: &mut Tape<S>, z: Var, zc: Var, lambda: f64) -> Result<Var> {
    let scaled = tape.scale(zc, S::lit(lambda));
    tape.add(z, scaled)
}

pub fn mix<S: Scalar>(z: &Tensor<S>, zc: &Tensor<S>, lambda: f64) -> Result<Tensor<S>> {
    let l = S::lit(lambda);
    z.zip_map(zc, |a, b| a + l * b)
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub ctx_dim: usize,
    stem: Conv,
    temb1: Linear,
    temb2: Linear,
    down1: ResBlock,
    down2: ResBlock,
    mid1: ResBlock,
    mid2: ResBlock,
    up2: ResBlock,
    up1: ResBlock,
    gn_out: GroupNorm,
    conv_out: Conv,
    pub null_ctx: ParamId,
    pub sites: Vec<AttnSite>,
}

pub const SITE_NAMES: [&str; 5] = ["down1.attn", "down2.attn", "mid.attn", "up2.attn", "up1.attn"];

impl UNet {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, ctx_dim: usize, rng: &mut RngStream) -> Self {
        let (c1, c2, c3) = (32, 64, 128);
        let cin = CHANNELS * 4;
        let u = |n: &str| format!("unet.{n}");
        let stem = Conv::new(store, &u("stem"), cin, c1, 3, 1.0, rng);
        let temb1 = Linear::new(store, &u("temb1"), TEMB_IN, TEMB, true, 1.0, Role::Base, rng);
        let temb2 = Linear::new(store, &u("temb2"), TEMB, TEMB, true, 1.0, Role::Base, rng);
        let down1 = ResBlock::new(store, &u("down1.res"), c1, c1, rng);
        let down2 = ResBlock::new(store, &u("down2.res"), c1, c2, rng);
        let mid1 = ResBlock::new(store, &u("mid.res1"), c2, c3, rng);
        let mid2 = ResBlock::new(store, &u("mid.res2"), c3, c3, rng);
        let up2 = ResBlock::new(store, &u("up2.res"), c3 + c2, c2, rng);
        let up1 = ResBlock::new(store, &u("up1.res"), c2 + c1, c1, rng);
        let gn_out = GroupNorm::new(store, &u("out.gn"), c1);
        let conv_out = Conv::new(store, &u("out.conv"), c1, cin, 3, 0.3, rng);
        let null_ctx = store.add_normal(&u("null_ctx"), &[1, ctx_dim], 1.0, Role::Base, rng);
        let sites = SITE_NAMES
            .iter()
            .zip([c1, c2, c3, c2, c1])
            .map(|(n, c)| AttnSite::new(store, n, c, ctx_dim, rng))
            .collect();
        Self {
            ctx_dim,
            stem,
            temb1,
            temb2,
            down1,
            down2,
            mid1,
            mid2,
            up2,
            up1,
            gn_out,
            conv_out,
            null_ctx,
            sites,
        }
    }

    fn time_embedding<S: Scalar>(&self, ctx: &mut Ctx<S>, t: &[usize]) -> Result<Var> {
        let half = TEMB_IN / 2;
        let mut data = Vec::with_capacity(t.len() * TEMB_IN);
        for &ti in t {
            for i in 0..half {
                let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                data.push(S::lit((ti as f64 * f).sin()));
            }
            for i in 0..half {
                let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                data.push(S::lit((ti as f64 * f).cos()));
            }
        }
        let e = ctx.constant(Tensor::new(&[t.len(), TEMB_IN], data)?);
        let h = self.temb1.forward(ctx, e)?;
        let h = ctx.tape.silu(h);
        let h = self.temb2.forward(ctx, h)?;
        Ok(ctx.tape.silu(h))
    }

    /// Prompt context with the null token appended; the null key is valid only
    /// for items whose prompt has no valid token.
    pub fn text_context<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        text: Var,
        text_valid: &[bool],
    ) -> Result<(Var, KeyMask)> {
        let s = ctx.tape.shape(text).to_vec();
        if s.len() != 3 || s[2] != self.ctx_dim || text_valid.len() != s[0] * s[1] {
            return Err(VistaError::dim(format!("text context {s:?} with {} flags", text_valid.len())));
        }
        let (b, l) = (s[0], s[1]);
        let null = ctx.p(self.null_ctx);
        let nulls = ctx.tape.gather_rows(null, &vec![0; b])?;
        let nulls = ctx.tape.reshape(nulls, &[b, 1, self.ctx_dim])?;
        let full = ctx.tape.concat_rows(&[text, nulls])?;
        let mut valid = Vec::with_capacity(b * (l + 1));
        for row in text_valid.chunks(l) {
            valid.extend_from_slice(row);
            valid.push(row.iter().all(|v| !v));
        }
        Ok((full, KeyMask::new(b, l + 1, valid)?))
    }

    fn site<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        idx: usize,
        adapter: Option<&Adapter>,
        x: Var,
        sc: &SiteContext,
    ) -> Result<Var> {
        let site = &self.sites[idx];
        let s = ctx.tape.shape(x).to_vec();
        let (b, n, c) = (s[0], s[1] * s[2], s[3]);
        let tokens = ctx.tape.reshape(x, &[b, n, c])?;
        let h = site.ln.forward(ctx, tokens)?;
        let q = site.q.forward(ctx, h)?;
        let mut z = base_cross_attention(ctx, site, q, sc.text, sc.text_mask)?;
        if let (Some(ad), Some((f, fmask))) = (adapter, sc.fusion) {
            if sc.lambda != 0.0 {
                let zc = history_cross_attention(ctx, &ad.sites[idx], q, f, fmask)?;
                z = mix_var(&mut ctx.tape, z, zc, sc.lambda)?;
            }
        }
        let o = site.o.forward(ctx, z)?;
        let out = ctx.tape.add(tokens, o)?;
        ctx.tape.check_finite(out, &site.name)?;
        ctx.tape.reshape(out, &s)
    }

    /// Predicted noise for `x` (`[B, 32, 32, 3]`, values in `[-1, 1]`).
    pub fn forward<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        adapter: Option<&Adapter>,
        x: Var,
        t: &[usize],
        sc: &SiteContext,
    ) -> Result<Var> {
        let xs = ctx.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != [IMG, IMG, CHANNELS] || xs[0] != t.len() {
            return Err(VistaError::dim(format!("denoiser input {xs:?} with {} timesteps", t.len())));
        }
        let temb = self.time_embedding(ctx, t)?;
        let h = ctx.tape.space_to_depth(x, 2)?;
        let h = self.stem.forward(ctx, h)?;
        let h = self.down1.forward(ctx, h, temb)?;
        let h1 = self.site(ctx, 0, adapter, h, sc)?;
        let h = ctx.tape.avg_pool2(h1)?;
        let h = self.down2.forward(ctx, h, temb)?;
        let h2 = self.site(ctx, 1, adapter, h, sc)?;
        let h = ctx.tape.avg_pool2(h2)?;
        let h = self.mid1.forward(ctx, h, temb)?;
        let h = self.site(ctx, 2, adapter, h, sc)?;
        let h = self.mid2.forward(ctx, h, temb)?;
        let h = ctx.tape.upsample2(h)?;
        let h = ctx.tape.concat_last(&[h, h2])?;
        let h = self.up2.forward(ctx, h, temb)?;
        let h = self.site(ctx, 3, adapter, h, sc)?;
        let h = ctx.tape.upsample2(h)?;
        let h = ctx.tape.concat_last(&[h, h1])?;
        let h = self.up1.forward(ctx, h, temb)?;
        let h = self.site(ctx, 4, adapter, h, sc)?;
        let h = self.gn_out.forward(ctx, h)?;
        let h = ctx.tape.silu(h);
        let h = self.conv_out.forward(ctx, h)?;
        let out = ctx.tape.depth_to_space(h, 2)?;
        ctx.tape.check_finite(out, "unet.out")?;
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub sites: Vec<AdapterSite>,
}

impl Adapter {
    /// One twin per base site. With `copy_base`, the twin starts from the
    /// base site's key/value weights; otherwise from a fresh small init.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, unet: &UNet, copy_base: bool, rng: &mut RngStream) -> Self {
        let sites = unet
            .sites
            .iter()
            .map(|s| {
                let mk = |store: &mut ParamStore<S>, which: &str, src: &Linear, rng: &mut RngStream| {
                    let name = format!("adapter.{}.{which}.w", s.name);
                    let id = if copy_base {
                        let v = store.get(src.w).value.clone();
                        store.add(&name, v, Role::Adapter)
                    } else {
                        store.add_normal(&name, &[unet.ctx_dim, s.channels], 0.1 / (unet.ctx_dim as f64).sqrt(), Role::Adapter, rng)
                    };
                    Linear { w: id, b: None }
                };
                AdapterSite {
                    name: s.name.clone(),
                    k: mk(store, "k", &s.k, rng),
                    v: mk(store, "v", &s.v, rng),
                }
            })
            .collect();
        Self { sites }
    }
}

/// Tensor-level conditioning for one denoiser call.
#[derive(Clone, Debug)]
pub struct CondBatch {
    /// `[B, L, D]` prompt embeddings.
    pub text: Tensor<f32>,
    pub text_valid: Vec<bool>,
    /// `[B, Lf, D]` fusion features and flags, or `None` for ABSENT.
    pub fusion: Option<(Tensor<f32>, Vec<bool>)>,
    pub lambda: f64,
}

/// Inference forward over tensors.
pub fn denoise_forward(
    store: &ParamStore<f32>,
    unet: &UNet,
    adapter: Option<&Adapter>,
    x: &Tensor<f32>,
    t: &[usize],
    cond: &CondBatch,
) -> Result<Tensor<f32>> {
    let mut ctx = Ctx::inference(store);
    let xv = ctx.constant(x.clone());
    let text = ctx.constant(cond.text.clone());
    let (tctx, tmask) = unet.text_context(&mut ctx, text, &cond.text_valid)?;
    let fusion = match &cond.fusion {
        Some((f, valid)) => {
            let s = f.shape().to_vec();
            if s.len() != 3 || valid.len() != s[0] * s[1] {
                return Err(VistaError::dim(format!("fusion feature {s:?} with {} flags", valid.len())));
            }
            Some((ctx.constant(f.clone()), KeyMask::new(s[0], s[1], valid.clone())?))
        }
        None => None,
    };
    let sc = SiteContext {
        text: tctx,
        text_mask: &tmask,
        fusion: fusion.as_ref().map(|(v, m)| (*v, m)),
        lambda: cond.lambda,
    };
    let out = unet.forward(&mut ctx, adapter, xv, t, &sc)?;
    Ok(ctx.tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::encoders::MAX_LEN;
    use crate::rng::streams;

    fn build() -> (ParamStore<f32>, UNet, Adapter) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0, streams::INIT);
        let unet = UNet::new(&mut store, 64, &mut rng);
        let ad = Adapter::new(&mut store, &unet, false, &mut rng);
        (store, unet, ad)
    }

    fn cond(rng: &mut RngStream, b: usize, lambda: f64) -> CondBatch {
        let valid: Vec<bool> = (0..b).flat_map(|_| (0..MAX_LEN).map(|i| i < 12)).collect();
        CondBatch {
            text: rng.normal_tensor(&[b, MAX_LEN, 64]),
            text_valid: valid.clone(),
            fusion: Some((rng.normal_tensor(&[b, MAX_LEN, 64]), valid)),
            lambda,
        }
    }

    #[test]
    fn mix_examples() {
        let z = Tensor::<f32>::new(&[2], vec![1.5, -2.0]).unwrap();
        let zc = Tensor::<f32>::new(&[2], vec![7.0, 3.0]).unwrap();
        assert_eq!(mix(&z, &zc, 0.0).unwrap(), z);
        assert_eq!(mix(&z, &z, 1.0).unwrap().data(), &[3.0, -4.0]);
        assert!(mix(&z, &Tensor::zeros(&[3]), 0.5).is_err());
    }

    #[test]
    fn output_shape_and_lambda_zero_equivalence() {
        let (store, unet, ad) = build();
        let mut rng = RngStream::new(1, streams::GRADCHECK);
        let x: Tensor<f32> = rng.normal_tensor(&[2, IMG, IMG, 3]);
        let c = cond(&mut rng, 2, 0.0);
        let mixed = denoise_forward(&store, &unet, Some(&ad), &x, &[10, 500], &c).unwrap();
        assert_eq!(mixed.shape(), x.shape());
        let mut base_c = c.clone();
        base_c.fusion = None;
        let base = denoise_forward(&store, &unet, None, &x, &[10, 500], &base_c).unwrap();
        assert!(mixed.data().iter().zip(base.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn fusion_and_timestep_sensitivity() {
        let (store, unet, ad) = build();
        let mut rng = RngStream::new(2, streams::GRADCHECK);
        let x: Tensor<f32> = rng.normal_tensor(&[1, IMG, IMG, 3]);
        let c = cond(&mut rng, 1, 0.5);
        let a = denoise_forward(&store, &unet, Some(&ad), &x, &[100], &c).unwrap();
        let mut c2 = c.clone();
        if let Some((f, _)) = &mut c2.fusion {
            f.data_mut()[5] += 1.0;
        }
        let b = denoise_forward(&store, &unet, Some(&ad), &x, &[100], &c2).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        let t2 = denoise_forward(&store, &unet, Some(&ad), &x, &[700], &c).unwrap();
        assert!(a.max_abs_diff(&t2) > 1e-4);
    }

    #[test]
    fn null_prompt_uses_null_token() {
        let (store, unet, _) = build();
        let mut rng = RngStream::new(3, streams::GRADCHECK);
        let x: Tensor<f32> = rng.normal_tensor(&[1, IMG, IMG, 3]);
        let c = CondBatch {
            text: rng.normal_tensor(&[1, MAX_LEN, 64]),
            text_valid: vec![false; MAX_LEN],
            fusion: None,
            lambda: 0.0,
        };
        let a = denoise_forward(&store, &unet, None, &x, &[5], &c).unwrap();
        let mut c2 = c.clone();
        c2.text = rng.normal_tensor(&[1, MAX_LEN, 64]);
        let b = denoise_forward(&store, &unet, None, &x, &[5], &c2).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn adapter_copies_base_projections() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = RngStream::new(0, streams::INIT);
        let unet = UNet::new(&mut store, 64, &mut rng);
        let ad = Adapter::new(&mut store, &unet, true, &mut rng);
        assert_eq!(ad.sites.len(), unet.sites.len());
        for (a, s) in ad.sites.iter().zip(&unet.sites) {
            assert_eq!(store.get(a.k.w).value, store.get(s.k.w).value);
            assert_eq!(store.get(a.k.w).role, Role::Adapter);
        }
    }

    fn site_store(c: usize, d: usize) -> (ParamStore<f64>, AttnSite, AdapterSite) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(4, streams::INIT);
        let site = AttnSite::new(&mut store, "s", c, d, &mut rng);
        let twin = AdapterSite {
            name: "s".into(),
            k: Linear::new(&mut store, "a.k", d, c, false, 1.0, Role::Adapter, &mut rng),
            v: Linear::new(&mut store, "a.v", d, c, false, 1.0, Role::Adapter, &mut rng),
        };
        (store, site, twin)
    }

    fn run_base(store: &ParamStore<f64>, site: &AttnSite, q: &Tensor<f64>, text: &Tensor<f64>, valid: Vec<bool>) -> Tensor<f64> {
        let mut ctx = Ctx::inference(store);
        let (b, l) = (text.shape()[0], text.shape()[1]);
        let (qv, tv) = (ctx.constant(q.clone()), ctx.constant(text.clone()));
        let mask = KeyMask::new(b, l, valid).unwrap();
        let z = base_cross_attention(&mut ctx, site, qv, tv, &mask).unwrap();
        ctx.tape.value(z).clone()
    }

    fn project(store: &ParamStore<f64>, lin: &Linear, row: &[f64]) -> Vec<f64> {
        let w = &store.get(lin.w).value;
        let (i, o) = (w.shape()[0], w.shape()[1]);
        (0..o).map(|c| (0..i).map(|r| row[r] * w.data()[r * o + c]).sum()).collect()
    }

    #[test]
    fn single_valid_token_gives_its_value_row() {
        let (store, site, _) = site_store(4, 3);
        let mut rng = RngStream::new(5, streams::GRADCHECK);
        let q: Tensor<f64> = rng.normal_tensor(&[1, 6, 4]);
        let text: Tensor<f64> = rng.normal_tensor(&[1, 5, 3]);
        let z = run_base(&store, &site, &q, &text, vec![false, false, true, false, false]);
        let want = project(&store, &site.v, &text.data()[6..9]);
        for r in 0..6 {
            for c in 0..4 {
                assert!((z.data()[r * 4 + c] - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masking_pad_equals_removing_it() {
        let (store, site, _) = site_store(4, 3);
        let mut rng = RngStream::new(6, streams::GRADCHECK);
        let q: Tensor<f64> = rng.normal_tensor(&[1, 5, 4]);
        let text: Tensor<f64> = rng.normal_tensor(&[1, 7, 3]);
        let masked = run_base(&store, &site, &q, &text, (0..7).map(|i| i < 4).collect());
        let short = Tensor::new(&[1, 4, 3], text.data()[..12].to_vec()).unwrap();
        let removed = run_base(&store, &site, &q, &short, vec![true; 4]);
        assert!(masked.max_abs_diff(&removed) < 1e-6);
    }

    #[test]
    fn key_projection_gradient() {
        let (mut store, site, _) = site_store(4, 3);
        let mut rng = RngStream::new(7, streams::GRADCHECK);
        let q: Tensor<f64> = rng.normal_tensor(&[2, 3, 4]);
        let text: Tensor<f64> = rng.normal_tensor(&[2, 5, 3]);
        let valid: Vec<bool> = (0..10).map(|i| i % 5 != 4).collect();
        for id in store.ids_with_role(Role::Base) {
            store.get_mut(id).frozen = id != site.k.w;
        }
        let r = grad_check(
            &mut store,
            &[Role::Base],
            |ctx| {
                let (qv, tv) = (ctx.constant(q.clone()), ctx.constant(text.clone()));
                let mask = KeyMask::new(2, 5, valid.clone()).unwrap();
                let z = base_cross_attention(ctx, &site, qv, tv, &mask)?;
                let sq = ctx.tape.mul(z, z)?;
                Ok(ctx.tape.sum(sq))
            },
            1e-4,
            12,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.checked, 12);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn history_branch_degenerate_and_zero_cases() {
        let (mut store, _, twin) = site_store(4, 3);
        let mut rng = RngStream::new(8, streams::GRADCHECK);
        let q: Tensor<f64> = rng.normal_tensor(&[1, 3, 4]);
        let mut cf = Tensor::<f64>::zeros(&[1, 4, 3]);
        cf.data_mut()[3..6].copy_from_slice(&[0.5, -1.0, 2.0]);
        let run = |store: &ParamStore<f64>, cf: &Tensor<f64>, valid: Vec<bool>| {
            let mut ctx = Ctx::inference(store);
            let (qv, fv) = (ctx.constant(q.clone()), ctx.constant(cf.clone()));
            let mask = KeyMask::new(1, 4, valid).unwrap();
            let zc = history_cross_attention(&mut ctx, &twin, qv, fv, &mask).unwrap();
            ctx.tape.value(zc).clone()
        };
        let zc = run(&store, &cf, vec![false, true, false, false]);
        let want = project(&store, &twin.v, &[0.5, -1.0, 2.0]);
        for r in 0..3 {
            for c in 0..4 {
                assert!((zc.data()[r * 4 + c] - want[c]).abs() < 1e-12);
            }
        }
        store.get_mut(twin.v.w).value = Tensor::zeros(&[3, 4]);
        let random: Tensor<f64> = rng.normal_tensor(&[1, 4, 3]);
        assert!(run(&store, &random, vec![true; 4]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn history_branch_matches_loop_oracle() {
        let (store, _, twin) = site_store(3, 2);
        let mut rng = RngStream::new(9, streams::GRADCHECK);
        let q: Tensor<f64> = rng.normal_tensor(&[1, 2, 3]);
        let cf: Tensor<f64> = rng.normal_tensor(&[1, 3, 2]);
        let mut ctx = Ctx::inference(&store);
        let (qv, fv) = (ctx.constant(q.clone()), ctx.constant(cf.clone()));
        let mask = KeyMask::all_valid(1, 3);
        let zc = history_cross_attention(&mut ctx, &twin, qv, fv, &mask).unwrap();
        let got = ctx.tape.value(zc).clone();
        let keys: Vec<Vec<f64>> = (0..3).map(|j| project(&store, &twin.k, &cf.data()[j * 2..j * 2 + 2])).collect();
        let vals: Vec<Vec<f64>> = (0..3).map(|j| project(&store, &twin.v, &cf.data()[j * 2..j * 2 + 2])).collect();
        for i in 0..2 {
            let qi = &q.data()[i * 3..i * 3 + 3];
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(qi).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..3 {
                let want: f64 = (0..3).map(|j| e[j] / z * vals[j][c]).sum();
                assert!((got.data()[i * 3 + c] - want).abs() < 1e-12);
            }
        }
    }

}
