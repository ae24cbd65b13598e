//! The three training stages: contrastive encoders, the base denoiser, and
//! the fusion model plus history adapter on top of the frozen base.

use std::time::Instant;

use crate::config::Config;
use crate::dataset::{extract_four_tuples, Corpus, Frame, Split, CHANNELS, IMG};
use crate::diffusion::{to_signed, training_loss, HistoryBranch, TrainBatch};
use crate::encoders::{contrastive_pretrain, PretrainConfig};
use crate::error::{Result, VistaError};
use crate::fusion::concat_history;
use crate::model::Vista;
use crate::param::{AdamW, Ctx, ParamId, Role};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

/// `(step, loss)` for every optimizer step.
pub type LossCurve = Vec<(usize, f32)>;

pub fn curve_csv(curve: &LossCurve) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve {
        s.push_str(&format!("{step},{loss}\n"));
    }
    s
}

/// Mean loss over the first and last `window` entries.
pub fn curve_endpoints(curve: &LossCurve, window: usize) -> Option<(f64, f64)> {
    if curve.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(curve.len());
    let mean = |xs: &[(usize, f32)]| xs.iter().map(|&(_, l)| l as f64).sum::<f64>() / xs.len() as f64;
    Some((mean(&curve[..w]), mean(&curve[curve.len() - w..])))
}

fn warm_lr(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

fn train_frames(corpus: &Corpus) -> Vec<&Frame> {
    corpus.split(Split::Train).flat_map(|s| s.frames.iter()).collect()
}

/// Stage 0: symmetric contrastive training of the dual encoder.
pub fn train_encoders(model: &mut Vista, corpus: &Corpus, cfg: &Config) -> Result<LossCurve> {
    let frames = train_frames(corpus);
    let pc = PretrainConfig {
        steps: cfg.stage0_steps,
        batch: cfg.stage0_batch,
        opt: cfg.adamw(cfg.stage0_lr),
        log_every: cfg.log_every,
    };
    let mut rng = RngStream::new(cfg.seed, streams::BATCH).fork(0);
    contrastive_pretrain(&mut model.store, &model.encoder, &model.vocab, &frames, &pc, &mut rng)
}

fn noise_and_times(model: &Vista, rng: &mut RngStream, b: usize, drop_p: f64) -> (Vec<usize>, Tensor<f32>, Vec<bool>) {
    let t = (0..b).map(|_| rng.below(model.schedule.len())).collect();
    let eps = rng.normal_tensor(&[b, IMG, IMG, CHANNELS]);
    let drop = (0..b).map(|_| rng.bernoulli(drop_p)).collect();
    (t, eps, drop)
}

fn stack_images(frames: &[&Frame]) -> Result<Tensor<f32>> {
    let signed: Vec<Tensor<f32>> = frames.iter().map(|f| to_signed(&f.image)).collect();
    Tensor::stack(&signed.iter().collect::<Vec<_>>())
}

/// A prompt-only batch of single frames for base training.
pub fn base_batch(model: &Vista, frames: &[&Frame], rng: &mut RngStream, drop_p: f64) -> Result<TrainBatch> {
    let captions: Vec<&str> = frames.iter().map(|f| f.caption.as_str()).collect();
    let texts = model.embed_texts(&captions)?;
    let (text, text_valid) = Vista::stack_text(&texts.iter().collect::<Vec<_>>())?;
    let (t, eps, drop) = noise_and_times(model, rng, frames.len(), drop_p);
    Ok(TrainBatch {
        x0: stack_images(frames)?,
        text,
        text_valid,
        history: None,
        t,
        eps,
        drop,
    })
}

/// A four-tuple batch: query `P_{k+1}`, history `(P_k, I_k)`, target `I_{k+1}`.
pub fn tuple_batch(model: &Vista, tuples: &[(&Frame, &Frame)], rng: &mut RngStream, drop_p: f64) -> Result<TrainBatch> {
    let prev_caps: Vec<&str> = tuples.iter().map(|(p, _)| p.caption.as_str()).collect();
    let next_caps: Vec<&str> = tuples.iter().map(|(_, n)| n.caption.as_str()).collect();
    let prev_texts = model.embed_texts(&prev_caps)?;
    let prev_imgs = model.embed_images(&tuples.iter().map(|(p, _)| &p.image).collect::<Vec<_>>())?;
    let next_texts = model.embed_texts(&next_caps)?;
    let (text, text_valid) = Vista::stack_text(&next_texts.iter().collect::<Vec<_>>())?;
    let hist: Vec<_> = prev_texts
        .iter()
        .zip(&prev_imgs)
        .map(|(t, i)| concat_history(t, i, 0))
        .collect::<Result<_>>()?;
    let h = Tensor::stack(&hist.iter().map(|h| &h.emb).collect::<Vec<_>>())?;
    let hv: Vec<bool> = hist.iter().flat_map(|h| h.valid.iter().copied()).collect();
    let (t, eps, drop) = noise_and_times(model, rng, tuples.len(), drop_p);
    let targets: Vec<&Frame> = tuples.iter().map(|(_, n)| *n).collect();
    Ok(TrainBatch {
        x0: stack_images(&targets)?,
        text,
        text_valid,
        history: Some((h, hv)),
        t,
        eps,
        drop,
    })
}

fn optimizer_step(model: &mut Vista, grads: Vec<(ParamId, Tensor<f32>)>, roles: &[Role], lr: f64, wd: f64, t: u64) -> Result<()> {
    model.store.zero_grads();
    model.store.accumulate(grads)?;
    let opt = AdamW {
        lr,
        weight_decay: wd,
        ..Default::default()
    };
    model.store.step(roles, &opt, t)
}

/// Stage 1: the base denoiser on prompt-only conditioning.
pub fn train_base(
    model: &mut Vista,
    corpus: &Corpus,
    cfg: &Config,
    mut on_checkpoint: impl FnMut(usize, &Vista) -> Result<()>,
) -> Result<LossCurve> {
    let frames = train_frames(corpus);
    if frames.is_empty() {
        return Err(VistaError::Data("no training frames".into()));
    }
    let mut rng = RngStream::new(cfg.seed, streams::BATCH).fork(1);
    let mut curve = Vec::with_capacity(cfg.stage1_steps);
    let started = Instant::now();
    for step in 0..cfg.stage1_steps {
        let picked: Vec<&Frame> = (0..cfg.stage1_batch).map(|_| frames[rng.below(frames.len())]).collect();
        let batch = base_batch(model, &picked, &mut rng, cfg.cfg_drop)?;
        let (loss, grads) = {
            let mut ctx = Ctx::training(&model.store, &[Role::Base]);
            let loss = training_loss(&mut ctx, &model.schedule, &model.unet, None, &batch)?;
            (ctx.tape.value(loss).data()[0], ctx.backward(loss)?)
        };
        curve.push((step, loss));
        let lr = warm_lr(cfg.stage1_lr, step, cfg.warmup);
        optimizer_step(model, grads, &[Role::Base], lr, cfg.weight_decay, step as u64 + 1)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("stage1 step {step} loss {loss:.4} ({:.0}s)", started.elapsed().as_secs_f64());
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, model)?;
        }
    }
    Ok(curve)
}

/// Stage 2: fusion model and adapter with the base and encoders frozen.
pub fn train_adapter(
    model: &mut Vista,
    corpus: &Corpus,
    cfg: &Config,
    mut on_checkpoint: impl FnMut(usize, &Vista) -> Result<()>,
) -> Result<LossCurve> {
    model.store.freeze_role(Role::Base);
    model.store.freeze_role(Role::Encoder);
    let tuples: Vec<(&Frame, &Frame)> = extract_four_tuples(corpus.split(Split::Train))
        .into_iter()
        .map(|t| (t.prev, t.next))
        .collect();
    if tuples.is_empty() {
        return Err(VistaError::Data("no training four-tuples".into()));
    }
    let roles = [Role::Fusion, Role::Adapter];
    let mut rng = RngStream::new(cfg.seed, streams::BATCH).fork(2);
    let mut curve = Vec::with_capacity(cfg.stage2_steps);
    let started = Instant::now();
    for step in 0..cfg.stage2_steps {
        let picked: Vec<(&Frame, &Frame)> = (0..cfg.stage2_batch).map(|_| tuples[rng.below(tuples.len())]).collect();
        let batch = tuple_batch(model, &picked, &mut rng, cfg.cfg_drop)?;
        let (loss, grads) = {
            let mut ctx = Ctx::training(&model.store, &roles);
            let branch = HistoryBranch {
                fusion: &model.fusion,
                adapter: &model.adapter,
                lambda: cfg.lambda,
            };
            let loss = training_loss(&mut ctx, &model.schedule, &model.unet, Some(branch), &batch)?;
            (ctx.tape.value(loss).data()[0], ctx.backward(loss)?)
        };
        curve.push((step, loss));
        let lr = warm_lr(cfg.stage2_lr, step, cfg.warmup);
        optimizer_step(model, grads, &roles, lr, cfg.weight_decay, step as u64 + 1)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("stage2 step {step} loss {loss:.4} ({:.0}s)", started.elapsed().as_secs_f64());
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, model)?;
        }
    }
    Ok(curve)
}
