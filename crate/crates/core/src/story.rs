//! Auto-regressive story continuation with salient history selection.
//!
//! For frame `k+1` every earlier pair `(P_i, I_i)` is fused against the
//! current prompt. The first fusion block's pre-softmax logits of all pairs are
//! normalized by one joint softmax per query row, so the attention mass that
//! lands on each pair is comparable across pairs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{CHANNELS, IMG};
use crate::denoiser::{denoise_forward, CondBatch};
use crate::diffusion::{sample_guided, to_unit, SamplerConfig};
use crate::encoders::{ImageEmbedding, TextEmbedding, MAX_LEN};
use crate::error::{Result, VistaError};
use crate::fusion::{concat_history, image_only_history, FusionFeature, FusionModel, HistoryContext};
use crate::model::Vista;
use crate::param::ParamStore;
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalienceReport {
    pub scores: Vec<f64>,
    pub chosen: usize,
    /// Per pair: largest and mean valid block-1 logit.
    pub logit_max: Vec<f64>,
    pub logit_mean: Vec<f64>,
}

/// Joint-softmax salience over per-pair logits `[Lq, Lh_i]`.
pub fn salience(logits: &[&Tensor<f32>], key_valid: &[&[bool]], query_valid: &[bool]) -> Result<SalienceReport> {
    if logits.is_empty() {
        return Err(VistaError::EmptyContext("salience needs at least one history pair".into()));
    }
    if key_valid.len() != logits.len() {
        return Err(VistaError::dim("one key mask per history pair"));
    }
    let lq = query_valid.len();
    for (l, m) in logits.iter().zip(key_valid) {
        if l.ndim() != 2 || l.shape()[0] != lq || l.shape()[1] != m.len() {
            return Err(VistaError::dim(format!("logits {:?} vs {lq} queries, {} keys", l.shape(), m.len())));
        }
    }
    let n_q = query_valid.iter().filter(|&&v| v).count();
    if n_q == 0 {
        return Err(VistaError::EmptyContext("current prompt has no valid tokens".into()));
    }
    if key_valid.iter().all(|m| m.iter().all(|v| !v)) {
        return Err(VistaError::EmptyContext("no valid history keys".into()));
    }
    let k = logits.len();
    let mut scores = vec![0.0f64; k];
    let mut mass = vec![0.0f64; k];
    for q in (0..lq).filter(|&q| query_valid[q]) {
        let mut max = f64::NEG_INFINITY;
        for (l, m) in logits.iter().zip(key_valid) {
            for (j, &x) in l.row(q).iter().enumerate() {
                if m[j] {
                    max = max.max(x as f64);
                }
            }
        }
        let mut total = 0.0;
        for (i, (l, m)) in logits.iter().zip(key_valid).enumerate() {
            mass[i] = l
                .row(q)
                .iter()
                .zip(m.iter())
                .filter(|(_, &v)| v)
                .map(|(&x, _)| (x as f64 - max).exp())
                .sum();
            total += mass[i];
        }
        for i in 0..k {
            scores[i] += mass[i] / total;
        }
    }
    for s in &mut scores {
        *s /= n_q as f64;
    }
    let chosen = argmax_first(&scores);
    let mut logit_max = Vec::with_capacity(k);
    let mut logit_mean = Vec::with_capacity(k);
    for (l, m) in logits.iter().zip(key_valid) {
        let vals: Vec<f64> = (0..lq)
            .filter(|&q| query_valid[q])
            .flat_map(|q| l.row(q).iter().zip(m.iter()).filter(|(_, &v)| v).map(|(&x, _)| x as f64).collect::<Vec<_>>())
            .collect();
        logit_max.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        logit_mean.push(if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 });
    }
    Ok(SalienceReport {
        scores,
        chosen,
        logit_max,
        logit_mean,
    })
}

/// Index of the largest value; the earliest wins ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fuse the current prompt with every history pair and keep the most salient
/// fusion feature.
pub fn select_salient_history(
    store: &ParamStore<f32>,
    fusion: &FusionModel,
    current: &TextEmbedding,
    histories: &[HistoryContext],
) -> Result<(FusionFeature, SalienceReport, Vec<FusionFeature>)> {
    let fused = fusion.fuse_all(store, current, histories)?;
    let logits: Vec<&Tensor<f32>> = fused.iter().map(|(_, l)| l).collect();
    let masks: Vec<&[bool]> = histories.iter().map(|h| h.valid.as_slice()).collect();
    let report = salience(&logits, &masks, &current.valid)?;
    let features: Vec<FusionFeature> = fused.into_iter().map(|(f, _)| f).collect();
    Ok((features[report.chosen].clone(), report, features))
}

/// Which history drives the adapter branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryMode {
    /// The single most salient pair.
    Salient,
    /// Mean of all pairs' fusion features.
    AllMean,
    /// Salient selection with the history prompts masked out.
    TextMasked,
}

impl HistoryMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "salient" => Ok(Self::Salient),
            "all-mean" => Ok(Self::AllMean),
            "text-masked" => Ok(Self::TextMasked),
            other => Err(VistaError::Config(format!("unknown history mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Salient => "salient",
            Self::AllMean => "all-mean",
            Self::TextMasked => "text-masked",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub lambda: f64,
    pub mode: HistoryMode,
    pub sampler: SamplerConfig,
    /// Stories sampled together in one denoiser batch.
    pub batch: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            mode: HistoryMode::Salient,
            sampler: SamplerConfig::default(),
            batch: 16,
        }
    }
}

/// A story in progress. `images[0]` is the real first frame; images are in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Story {
    pub id: u64,
    pub prompts: Vec<String>,
    pub images: Vec<Tensor<f32>>,
}

impl Story {
    pub fn new(id: u64, prompts: Vec<String>, first_image: Tensor<f32>) -> Result<Self> {
        if prompts.len() < 2 {
            return Err(VistaError::Sequencing(format!("story {id} has {} prompts, nothing to generate", prompts.len())));
        }
        if first_image.shape() != [IMG, IMG, CHANNELS] {
            return Err(VistaError::dim(format!("first image of story {id} has shape {:?}", first_image.shape())));
        }
        Ok(Self {
            id,
            prompts,
            images: vec![first_image],
        })
    }

    pub fn is_complete(&self) -> bool {
        self.images.len() == self.prompts.len()
    }
}

/// One run-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub story_id: u64,
    pub frame: usize,
    pub chosen: usize,
    pub scores: Vec<f64>,
    pub logit_max: Vec<f64>,
    pub logit_mean: Vec<f64>,
    pub seed: u64,
    pub lambda: f64,
    pub mode: HistoryMode,
    pub sampler: SamplerConfig,
}

pub fn write_run_log<W: Write>(mut w: W, records: &[FrameRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_run_log(text: &str) -> Result<Vec<FrameRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Starting noise for frame `frame` of story `story`.
pub fn frame_noise(seed: u64, story: u64, frame: usize) -> Tensor<f32> {
    RngStream::new(seed, streams::SAMPLE)
        .fork(story)
        .fork(frame as u64)
        .normal_tensor(&[1, IMG, IMG, CHANNELS])
}

/// Conditioning for one item of a sampling batch.
pub struct FrameCondition {
    pub text: TextEmbedding,
    pub fusion: Option<FusionFeature>,
    pub noise: Tensor<f32>,
}

/// Guided DDIM over a batch of items. Conditional rows see the prompt and the
/// fusion feature; unconditional rows see the null prompt and no history.
/// With `lambda == 0` or no fusion features the adapter is never evaluated.
pub fn sample_frames(model: &Vista, items: &[FrameCondition], lambda: f64, sampler: &SamplerConfig) -> Result<Vec<Tensor<f32>>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let n = items.len();
    let d = model.config.dim;
    let use_history = lambda != 0.0 && items.iter().all(|i| i.fusion.is_some());
    let (text, text_valid) = {
        let mut embs: Vec<&TextEmbedding> = items.iter().map(|i| &i.text).collect();
        let null = TextEmbedding::null(d);
        let nulls = vec![&null; n];
        embs.extend(nulls);
        Vista::stack_text(&embs)?
    };
    let fusion = if use_history {
        let zeros = Tensor::zeros(&[MAX_LEN, d]);
        let mut parts: Vec<&Tensor<f32>> = items.iter().map(|i| &i.fusion.as_ref().unwrap().emb).collect();
        parts.extend(std::iter::repeat_n(&zeros, n));
        let mut valid: Vec<bool> = items
            .iter()
            .flat_map(|i| i.fusion.as_ref().unwrap().valid.iter().copied())
            .collect();
        valid.extend(std::iter::repeat_n(true, n * MAX_LEN));
        Some((Tensor::stack(&parts)?, valid))
    } else {
        None
    };
    let cond = CondBatch {
        text,
        text_valid,
        fusion,
        lambda: if use_history { lambda } else { 0.0 },
    };
    let adapter = use_history.then_some(&model.adapter);
    let x_t = Tensor::concat_first(&items.iter().map(|i| &i.noise).collect::<Vec<_>>())?;
    let out = sample_guided(x_t, sampler, &model.schedule, |x, t| {
        let both = Tensor::concat_first(&[x, x])?;
        let eps = denoise_forward(&model.store, &model.unet, adapter, &both, &vec![t; 2 * n], &cond)?;
        Ok((eps.slice_first(n, 2 * n)?, eps.slice_first(0, n)?))
    })?;
    (0..n)
        .map(|i| Ok(to_unit(&out.slice_first(i, i + 1)?.reshape(&[IMG, IMG, CHANNELS])?)))
        .collect()
}

fn history_contexts(
    mode: HistoryMode,
    texts: &[TextEmbedding],
    images: &[ImageEmbedding],
) -> Result<Vec<HistoryContext>> {
    texts
        .iter()
        .zip(images)
        .enumerate()
        .map(|(i, (t, im))| match mode {
            HistoryMode::TextMasked => image_only_history(im, i),
            _ => concat_history(t, im, i),
        })
        .collect()
}

/// Generate the next frame of every story in `stories`, each of which must
/// still have prompts left. Returns one record per generated frame.
pub fn generate_next_frames(model: &Vista, stories: &mut [Story], cfg: &GenerationConfig) -> Result<Vec<FrameRecord>> {
    if cfg.batch == 0 {
        return Err(VistaError::Config("generation batch must be positive".into()));
    }
    let mut conds = Vec::with_capacity(stories.len());
    let mut records = Vec::with_capacity(stories.len());
    for story in stories.iter() {
        let k = story.images.len();
        if k == 0 {
            return Err(VistaError::Sequencing(format!("story {} has no first frame", story.id)));
        }
        if k >= story.prompts.len() {
            return Err(VistaError::Sequencing(format!("story {} is already complete", story.id)));
        }
        let captions: Vec<&str> = story.prompts[..=k].iter().map(String::as_str).collect();
        let mut texts = model.embed_texts(&captions)?;
        let current = texts.pop().expect("k + 1 captions embedded");
        let images = model.embed_images(&story.images.iter().collect::<Vec<_>>())?;
        let histories = history_contexts(cfg.mode, &texts, &images)?;
        let (chosen, report, all) = select_salient_history(&model.store, &model.fusion, &current, &histories)?;
        let fusion = match cfg.mode {
            HistoryMode::AllMean => {
                let mut mean = Tensor::zeros(chosen.emb.shape());
                for f in &all {
                    mean.add_assign(&f.emb);
                }
                FusionFeature {
                    emb: mean.scale(1.0 / all.len() as f32),
                    valid: chosen.valid.clone(),
                    source: chosen.source,
                }
            }
            _ => chosen,
        };
        records.push(FrameRecord {
            story_id: story.id,
            frame: k,
            chosen: report.chosen,
            scores: report.scores,
            logit_max: report.logit_max,
            logit_mean: report.logit_mean,
            seed: cfg.sampler.seed,
            lambda: cfg.lambda,
            mode: cfg.mode,
            sampler: cfg.sampler.clone(),
        });
        conds.push(FrameCondition {
            text: current,
            fusion: Some(fusion),
            noise: frame_noise(cfg.sampler.seed, story.id, k),
        });
    }
    let mut frames = Vec::with_capacity(conds.len());
    for chunk in conds.chunks(cfg.batch) {
        frames.extend(sample_frames(model, chunk, cfg.lambda, &cfg.sampler)?);
    }
    for (story, frame) in stories.iter_mut().zip(frames) {
        story.images.push(frame);
    }
    Ok(records)
}

/// Materialize every story. Stories of different lengths are fine; shorter
/// ones drop out of later batches.
pub fn continue_stories(model: &Vista, stories: &mut [Story], cfg: &GenerationConfig) -> Result<Vec<FrameRecord>> {
    if let Some(s) = stories.iter().find(|s| s.prompts.len() < 2 || s.images.is_empty()) {
        return Err(VistaError::Sequencing(format!("story {} cannot be continued", s.id)));
    }
    let mut log = Vec::new();
    loop {
        let mut pending: Vec<Story> = Vec::new();
        let mut slots = Vec::new();
        for (i, s) in stories.iter_mut().enumerate() {
            if !s.is_complete() {
                slots.push(i);
                pending.push(std::mem::replace(
                    s,
                    Story {
                        id: 0,
                        prompts: Vec::new(),
                        images: Vec::new(),
                    },
                ));
            }
        }
        if pending.is_empty() {
            break;
        }
        let step = generate_next_frames(model, &mut pending, cfg);
        for (i, s) in slots.into_iter().zip(pending) {
            stories[i] = s;
        }
        log.extend(step?);
        log::info!("generated frame batch, {} records so far", log.len());
    }
    log.sort_by_key(|r| (r.story_id, r.frame));
    Ok(log)
}

/// Frames sampled from the prompt alone, without any history branch.
pub fn sample_base_only(model: &Vista, prompts: &[&str], seeds: &[(u64, u64, usize)], sampler: &SamplerConfig) -> Result<Vec<Tensor<f32>>> {
    let texts = model.embed_texts(prompts)?;
    let items: Vec<FrameCondition> = texts
        .into_iter()
        .zip(seeds)
        .map(|(text, &(seed, story, frame))| FrameCondition {
            text,
            fusion: None,
            noise: frame_noise(seed, story, frame),
        })
        .collect();
    sample_frames(model, &items, 0.0, sampler)
}
