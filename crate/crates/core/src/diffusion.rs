//! Noise schedule, forward diffusion, the denoising objective and a
//! deterministic DDIM sampler with classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{KeyMask, Var};
use crate::denoiser::{Adapter, SiteContext, UNet};
use crate::error::{Result, VistaError};
use crate::fusion::FusionModel;
use crate::param::Ctx;
use crate::rng::{streams, RngStream};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_T: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(VistaError::Config(format!(
                "bad schedule: {steps} steps, beta {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(VistaError::numeric(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }

    pub fn ab(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_T, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Per-item sample size of a `[B, ...]` tensor.
fn item_len(x: &Tensor<f32>, b: usize) -> Result<usize> {
    if b == 0 || x.shape().first() != Some(&b) {
        return Err(VistaError::dim(format!("expected leading batch {b}, got {:?}", x.shape())));
    }
    Ok(x.len() / b)
}

/// `x_t = sqrt(ab_t)·x0 + sqrt(1−ab_t)·eps`, one timestep per batch item.
pub fn forward_diffuse(x0: &Tensor<f32>, t: &[usize], eps: &Tensor<f32>, s: &NoiseSchedule) -> Result<Tensor<f32>> {
    if x0.shape() != eps.shape() {
        return Err(VistaError::dim("x0 and eps shapes differ"));
    }
    let n = item_len(x0, t.len())?;
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        let ab = s.ab(ti)?;
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let range = i * n..(i + 1) * n;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// Unclipped `x̂0 = (x_t − sqrt(1−ab_t)·ε̂) / sqrt(ab_t)`.
pub fn predict_x0(xt: &Tensor<f32>, eps: &Tensor<f32>, t: usize, s: &NoiseSchedule) -> Result<Tensor<f32>> {
    let ab = s.ab(t)?;
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    xt.zip_map(eps, |x, e| (x - b * e) / a)
}

pub fn cfg_combine(uncond: &Tensor<f32>, cond: &Tensor<f32>, w: f64) -> Result<Tensor<f32>> {
    let w = w as f32;
    uncond.zip_map(cond, |u, c| u + w * (c - u))
}

/// One deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    xt: &Tensor<f32>,
    eps: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    eta: f64,
) -> Result<Tensor<f32>> {
    if eta != 0.0 {
        return Err(VistaError::Config("only eta = 0 sampling is supported".into()));
    }
    if t_prev > t {
        return Err(VistaError::numeric(format!("ddim step must go backwards, got {t} -> {t_prev}")));
    }
    let x0 = predict_x0(xt, eps, t, s)?.map(|v| v.clamp(-1.0, 1.0));
    let ab = s.ab(t_prev)?;
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `steps` evenly spaced timesteps from `T−1` down to `0`.
pub fn timesteps(steps: usize, t_max: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(VistaError::Config(format!("sampler steps {steps} must be in 1..={t_max}")));
    }
    if steps == 1 {
        return Ok(vec![t_max - 1]);
    }
    let last = (t_max - 1) as f64;
    Ok((0..steps)
        .map(|i| (last * (steps - 1 - i) as f64 / (steps - 1) as f64).round() as usize)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 5.0,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > s.len() {
            return Err(VistaError::Config(format!("sampler steps {} outside 1..={}", self.steps, s.len())));
        }
        if !(self.guidance >= 0.0) {
            return Err(VistaError::Config("guidance scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Starting noise for one item; each item owns its seed so results do not
/// depend on how items are batched.
pub fn initial_noise(seed: u64, shape: &[usize]) -> Tensor<f32> {
    RngStream::new(seed, streams::SAMPLE).normal_tensor(shape)
}

/// DDIM with guidance. `denoise(x, t)` returns `(uncond, cond)` predictions.
pub fn sample_guided<F>(x_t: Tensor<f32>, cfg: &SamplerConfig, s: &NoiseSchedule, mut denoise: F) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>, usize) -> Result<(Tensor<f32>, Tensor<f32>)>,
{
    cfg.validate(s)?;
    sample_unguided(x_t, cfg, s, |x, t| {
        let (u, c) = denoise(x, t)?;
        cfg_combine(&u, &c, cfg.guidance)
    })
}

/// DDIM with a single prediction per step.
pub fn sample_unguided<F>(mut x: Tensor<f32>, cfg: &SamplerConfig, s: &NoiseSchedule, mut denoise: F) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
{
    cfg.validate(s)?;
    let ts = timesteps(cfg.steps, s.len())?;
    for (i, &t) in ts.iter().enumerate() {
        let eps = denoise(&x, t).map_err(|e| match e {
            VistaError::Numeric(m) => VistaError::numeric(format!("sampling step {i} (t={t}): {m}")),
            other => other,
        })?;
        if !eps.all_finite() {
            return Err(VistaError::numeric(format!("non-finite prediction at sampling step {i} (t={t})")));
        }
        match ts.get(i + 1) {
            Some(&tp) => x = ddim_step(&x, &eps, t, tp, s, cfg.eta)?,
            None => x = predict_x0(&x, &eps, t, s)?,
        }
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

pub fn to_signed(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| 2.0 * v - 1.0)
}

pub fn to_unit(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn eps_mse(eps: &Tensor<f32>, pred: &Tensor<f32>) -> Result<f64> {
    let d = eps.zip_map(pred, |a, b| a - b)?;
    Ok(d.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d.len().max(1) as f64)
}

/// One training batch of four-tuples. The current prompt is `P_{k+1}`, the
/// history is the concatenated `(P_k, I_k)` context and `x0` is `I_{k+1}`.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x0: Tensor<f32>,
    pub text: Tensor<f32>,
    pub text_valid: Vec<bool>,
    pub history: Option<(Tensor<f32>, Vec<bool>)>,
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
    /// Items whose conditioning (prompt and history) is dropped for guidance.
    pub drop: Vec<bool>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Trainable pieces of the history branch.
#[derive(Clone, Copy)]
pub struct HistoryBranch<'a> {
    pub fusion: &'a FusionModel,
    pub adapter: &'a Adapter,
    pub lambda: f64,
}

/// Mean squared error between the true noise and the prediction. Without a
/// history branch only the prompt conditions the denoiser.
pub fn training_loss<S: Scalar>(
    ctx: &mut Ctx<S>,
    sched: &NoiseSchedule,
    unet: &UNet,
    branch: Option<HistoryBranch>,
    batch: &TrainBatch,
) -> Result<Var> {
    let b = batch.len();
    let ts = batch.text.shape().to_vec();
    if ts.len() != 3 || ts[0] != b || batch.drop.len() != b || batch.text_valid.len() != b * ts[1] {
        return Err(VistaError::dim("inconsistent training batch"));
    }
    let l = ts[1];
    let xt = forward_diffuse(&batch.x0, &batch.t, &batch.eps, sched)?;
    let xv = ctx.constant(xt.cast());
    let text = ctx.constant(batch.text.cast());
    let text_valid: Vec<bool> = batch
        .text_valid
        .iter()
        .enumerate()
        .map(|(i, &v)| v && !batch.drop[i / l])
        .collect();
    let (tctx, tmask) = unet.text_context(ctx, text, &text_valid)?;

    let mut fusion = None;
    let mut lambda = 0.0;
    let mut adapter = None;
    if let (Some(br), Some((hist, hvalid))) = (branch, &batch.history) {
        let hs = hist.shape().to_vec();
        let hmask = KeyMask::new(b, hs[1], hvalid.clone())?;
        let h = ctx.constant(hist.cast());
        let out = br.fusion.forward(ctx, text, &batch.text_valid, h, &hmask)?;
        let keep: Vec<bool> = (0..b * l).map(|i| !batch.drop[i / l]).collect();
        let f = ctx.tape.mask_rows(out.features, &keep)?;
        // Dropped items see zero fusion rows through an all-valid mask.
        let fvalid: Vec<bool> = (0..b * l)
            .map(|i| batch.drop[i / l] || batch.text_valid[i])
            .collect();
        fusion = Some((f, KeyMask::new(b, l, fvalid)?));
        lambda = br.lambda;
        adapter = Some(br.adapter);
    }
    let sc = SiteContext {
        text: tctx,
        text_mask: &tmask,
        fusion: fusion.as_ref().map(|(v, m)| (*v, m)),
        lambda,
    };
    let pred = unet.forward(ctx, adapter, xv, &batch.t, &sc)?;
    let loss = ctx.tape.mse(pred, &batch.eps.cast())?;
    ctx.tape.check_finite(loss, "training loss")?;
    Ok(loss)
}
