//! Small dual text/image encoder sharing one embedding width, trained with a
//! symmetric contrastive objective and frozen afterwards.

use std::collections::HashSet;

use log::warn;

use crate::autodiff::{KeyMask, Var};
use crate::dataset::{self, caption_words, Frame, CHANNELS, IMG};
use crate::error::{Result, VistaError};
use crate::nn::{attention, FeedForward, LayerNorm, Linear};
use crate::param::{AdamW, Ctx, ParamId, ParamStore, Role};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

pub const MAX_LEN: usize = 32;
pub const PATCH: usize = 4;
pub const PATCHES: usize = (IMG / PATCH) * (IMG / PATCH);
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn grammar() -> Self {
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(dataset::grammar_words())
            .map(str::to_owned)
            .collect();
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.tokens.iter().position(|t| t == word).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        let unique: HashSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() || tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(VistaError::Data("invalid vocabulary file".into()));
        }
        Ok(Self { tokens })
    }
}

/// `BOS words EOS PAD…`, always `MAX_LEN` long.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD).collect()
    }

    pub fn len_non_pad(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD).count()
    }
}

pub fn tokenize(caption: &str, vocab: &Vocabulary) -> TokenSequence {
    let words = caption_words(caption);
    let room = MAX_LEN - 2;
    let truncated = words.len() > room;
    if truncated {
        warn!("caption of {} words truncated to {room}", words.len());
    }
    let mut ids = Vec::with_capacity(MAX_LEN);
    ids.push(BOS);
    ids.extend(words.iter().take(room).map(|w| vocab.id(w)));
    ids.push(EOS);
    ids.resize(MAX_LEN, PAD);
    TokenSequence { ids, truncated }
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in &seq.ids {
        if matches!(id, PAD | BOS | EOS) {
            continue;
        }
        let w = vocab.token(id).unwrap_or("<unk>");
        if !out.is_empty() && w != "," {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

/// Token-level text features with the PAD mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub emb: Tensor<f32>,
    pub valid: Vec<bool>,
}

impl TextEmbedding {
    /// The unconditional context: every position masked.
    pub fn null(dim: usize) -> Self {
        Self {
            emb: Tensor::zeros(&[MAX_LEN, dim]),
            valid: vec![false; MAX_LEN],
        }
    }

    pub fn is_null(&self) -> bool {
        self.valid.iter().all(|v| !v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub emb: Tensor<f32>,
}

#[derive(Clone, Debug)]
struct SelfBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl SelfBlock {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, rng: &mut RngStream) -> Self {
        let r = Role::Encoder;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, r),
            q: Linear::new(store, &format!("{name}.q"), d, d, false, 1.0, r, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, 1.0, r, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, false, 1.0, r, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, 0.5, r, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, r),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, 2 * d, 0.5, r, rng),
        }
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let q = self.q.forward(ctx, h)?;
        let k = self.k.forward(ctx, h)?;
        let v = self.v.forward(ctx, h)?;
        let (a, _) = attention(&mut ctx.tape, q, k, v, mask)?;
        let a = self.o.forward(ctx, a)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, h)?;
        ctx.tape.add(x, f)
    }
}

#[derive(Clone, Debug)]
struct Tower {
    blocks: Vec<SelfBlock>,
    ln: LayerNorm,
    head: Linear,
}

impl Tower {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, depth: usize, rng: &mut RngStream) -> Self {
        Self {
            blocks: (0..depth)
                .map(|i| SelfBlock::new(store, &format!("{name}.block{i}"), d, rng))
                .collect(),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d, Role::Encoder),
            head: Linear::new(store, &format!("{name}.head"), d, d, true, 1.0, Role::Encoder, rng),
        }
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, mut x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(ctx, x, mask)?;
        }
        let x = self.ln.forward(ctx, x)?;
        self.head.forward(ctx, x)
    }
}

/// The dual encoder. Parameters live in a shared store under `enc.`.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub dim: usize,
    tokens: ParamId,
    text_pos: ParamId,
    text: Tower,
    patch: Linear,
    image_pos: ParamId,
    image: Tower,
    pub logit_scale: ParamId,
}

impl DualEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, vocab: &Vocabulary, dim: usize, rng: &mut RngStream) -> Self {
        let r = Role::Encoder;
        let tokens = store.add_normal("enc.tokens", &[vocab.len(), dim], 1.0, r, rng);
        let text_pos = store.add_normal("enc.text_pos", &[MAX_LEN, dim], 0.3, r, rng);
        let text = Tower::new(store, "enc.text", dim, 2, rng);
        let patch = Linear::new(store, "enc.patch", PATCH_DIM, dim, true, 1.0, r, rng);
        let image_pos = store.add_normal("enc.image_pos", &[PATCHES, dim], 0.3, r, rng);
        let image = Tower::new(store, "enc.image", dim, 2, rng);
        let logit_scale = store.add("enc.logit_scale", Tensor::full(&[1], S::lit(10f64.ln())), r);
        Self {
            dim,
            tokens,
            text_pos,
            text,
            patch,
            image_pos,
            image,
            logit_scale,
        }
    }

    fn positions<S: Scalar>(&self, ctx: &mut Ctx<S>, table: ParamId, b: usize, l: usize) -> Result<Var> {
        let t = ctx.p(table);
        let ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let g = ctx.tape.gather_rows(t, &ids)?;
        ctx.tape.reshape(g, &[b, l, self.dim])
    }

    /// `[B, MAX_LEN, D]` with PAD rows zeroed.
    pub fn encode_text_batch<S: Scalar>(&self, ctx: &mut Ctx<S>, seqs: &[&TokenSequence]) -> Result<Var> {
        let b = seqs.len();
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let table = ctx.p(self.tokens);
        let e = ctx.tape.gather_rows(table, &ids)?;
        let e = ctx.tape.reshape(e, &[b, MAX_LEN, self.dim])?;
        let pos = self.positions(ctx, self.text_pos, b, MAX_LEN)?;
        let x = ctx.tape.add(e, pos)?;
        let mask = KeyMask::new(b, MAX_LEN, valid.clone())?;
        let y = self.text.forward(ctx, x, Some(&mask))?;
        ctx.tape.mask_rows(y, &valid)
    }

    /// Images `[B, 32, 32, 3]` in `[0, 1]` to `[B, PATCHES, D]`.
    pub fn encode_image_batch<S: Scalar>(&self, ctx: &mut Ctx<S>, images: Var) -> Result<Var> {
        let s = ctx.tape.shape(images).to_vec();
        if s.len() != 4 || s[1..] != [IMG, IMG, CHANNELS] {
            return Err(VistaError::dim(format!("image encoder expects [B,{IMG},{IMG},{CHANNELS}], got {s:?}")));
        }
        let b = s[0];
        let p = ctx.tape.space_to_depth(images, PATCH)?;
        let p = ctx.tape.reshape(p, &[b, PATCHES, PATCH_DIM])?;
        let x = self.patch.forward(ctx, p)?;
        let pos = self.positions(ctx, self.image_pos, b, PATCHES)?;
        let x = ctx.tape.add(x, pos)?;
        self.image.forward(ctx, x, None)
    }

    pub fn encode_text(&self, store: &ParamStore<f32>, seq: &TokenSequence) -> Result<TextEmbedding> {
        let mut ctx = Ctx::inference(store);
        let v = self.encode_text_batch(&mut ctx, &[seq])?;
        let t = ctx.tape.value(v).clone().reshape(&[MAX_LEN, self.dim])?;
        Ok(TextEmbedding {
            emb: t,
            valid: seq.valid(),
        })
    }

    pub fn encode_image(&self, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<ImageEmbedding> {
        let mut ctx = Ctx::inference(store);
        let x = ctx.constant(image.clone().reshape(&[1, IMG, IMG, CHANNELS]).map_err(|_| {
            VistaError::dim(format!("image of shape {:?}", image.shape()))
        })?);
        let v = self.encode_image_batch(&mut ctx, x)?;
        Ok(ImageEmbedding {
            emb: ctx.tape.value(v).clone().reshape(&[PATCHES, self.dim])?,
        })
    }

    /// Batched inference encoding of captions.
    pub fn encode_texts(&self, store: &ParamStore<f32>, seqs: &[&TokenSequence]) -> Result<Vec<TextEmbedding>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let mut ctx = Ctx::inference(store);
            let v = self.encode_text_batch(&mut ctx, chunk)?;
            let t = ctx.tape.value(v);
            for (i, s) in chunk.iter().enumerate() {
                out.push(TextEmbedding {
                    emb: t.slice_first(i, i + 1)?.reshape(&[MAX_LEN, self.dim])?,
                    valid: s.valid(),
                });
            }
        }
        Ok(out)
    }

    /// Batched inference encoding of images.
    pub fn encode_images(&self, store: &ParamStore<f32>, images: &[&Tensor<f32>]) -> Result<Vec<ImageEmbedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut ctx = Ctx::inference(store);
            let x = ctx.constant(Tensor::stack(chunk)?);
            let v = self.encode_image_batch(&mut ctx, x)?;
            let t = ctx.tape.value(v);
            for i in 0..chunk.len() {
                out.push(ImageEmbedding {
                    emb: t.slice_first(i, i + 1)?.reshape(&[PATCHES, self.dim])?,
                });
            }
        }
        Ok(out)
    }

    /// Symmetric InfoNCE over a batch of distinct pairs.
    pub fn contrastive_loss<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        seqs: &[&TokenSequence],
        images: Tensor<S>,
    ) -> Result<Var> {
        let b = seqs.len();
        let valid: Vec<bool> = seqs.iter().flat_map(|s| s.valid()).collect();
        let t = self.encode_text_batch(ctx, seqs)?;
        let t = ctx.tape.masked_mean(t, &valid)?;
        let t = ctx.tape.l2_normalize(t);
        let x = ctx.constant(images);
        let i = self.encode_image_batch(ctx, x)?;
        let i = ctx.tape.masked_mean(i, &vec![true; b * PATCHES])?;
        let i = ctx.tape.l2_normalize(i);
        let ls = ctx.p(self.logit_scale);
        let scale = ctx.tape.exp(ls);
        let ti = ctx.tape.bmm(t, i, false, true)?;
        let ti = ctx.tape.mul_scalar(ti, scale)?;
        let it = ctx.tape.bmm(i, t, false, true)?;
        let it = ctx.tape.mul_scalar(it, scale)?;
        let targets: Vec<usize> = (0..b).collect();
        let a = ctx.tape.softmax_xent(ti, &targets)?;
        let c = ctx.tape.softmax_xent(it, &targets)?;
        let sum = ctx.tape.add(a, c)?;
        Ok(ctx.tape.scale(sum, S::lit(0.5)))
    }
}

/// Masked mean over positions, then L2 normalization.
pub fn pooled_embedding(emb: &Tensor<f32>, valid: &[bool]) -> Result<Vec<f32>> {
    let (l, d) = (emb.rows(), emb.last_dim());
    if valid.len() != l {
        return Err(VistaError::dim(format!("{} flags for {l} rows", valid.len())));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(VistaError::EmptyContext("pooling an all-PAD sequence".into()));
    }
    let mut acc = vec![0f64; d];
    for (r, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for (a, &x) in acc.iter_mut().zip(emb.row(r)) {
            *a += x as f64;
        }
    }
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    Ok(acc.iter().map(|a| (a / norm) as f32).collect())
}

pub fn pooled_text(e: &TextEmbedding) -> Result<Vec<f32>> {
    pooled_embedding(&e.emb, &e.valid)
}

pub fn pooled_image(e: &ImageEmbedding) -> Result<Vec<f32>> {
    pooled_embedding(&e.emb, &vec![true; e.emb.rows()])
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub opt: AdamW,
    pub log_every: usize,
}

/// Stage-0 training loop. Returns `(step, loss)` for every applied step;
/// batches with fewer than two distinct captions are skipped.
pub fn contrastive_pretrain(
    store: &mut ParamStore<f32>,
    enc: &DualEncoder,
    vocab: &Vocabulary,
    frames: &[&Frame],
    cfg: &PretrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<(usize, f32)>> {
    if frames.len() < 2 {
        return Err(VistaError::Data("contrastive pretraining needs at least two frames".into()));
    }
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut t = 0u64;
    for step in 0..cfg.steps {
        let mut seen = HashSet::new();
        let mut picked = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let f = frames[rng.below(frames.len())];
            if seen.insert(f.caption.as_str()) {
                picked.push(f);
            }
        }
        if picked.len() < 2 {
            warn!("step {step}: degenerate batch of identical captions skipped");
            continue;
        }
        let seqs: Vec<TokenSequence> = picked.iter().map(|f| tokenize(&f.caption, vocab)).collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let images = Tensor::stack(&picked.iter().map(|f| &f.image).collect::<Vec<_>>())?;
        let grads = {
            let mut ctx = Ctx::training(store, &[Role::Encoder]);
            let loss = enc.contrastive_loss(&mut ctx, &refs, images)?;
            ctx.tape.check_finite(loss, "contrastive loss")?;
            curve.push((step, ctx.tape.value(loss).data()[0]));
            ctx.backward(loss)?
        };
        store.zero_grads();
        store.accumulate(grads)?;
        t += 1;
        store.step(&[Role::Encoder], &cfg.opt, t)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("stage0 step {step} loss {:.4}", curve.last().unwrap().1);
        }
    }
    Ok(curve)
}

/// Fraction of captions whose own image ranks first among `way` candidates,
/// and fraction of pairs whose matched similarity beats a mismatched one.
pub fn retrieval_stats(
    store: &ParamStore<f32>,
    enc: &DualEncoder,
    vocab: &Vocabulary,
    frames: &[&Frame],
    way: usize,
) -> Result<(f64, f64)> {
    let seqs: Vec<TokenSequence> = frames.iter().map(|f| tokenize(&f.caption, vocab)).collect();
    let texts = enc.encode_texts(store, &seqs.iter().collect::<Vec<_>>())?;
    let images = enc.encode_images(store, &frames.iter().map(|f| &f.image).collect::<Vec<_>>())?;
    let pt: Vec<Vec<f32>> = texts.iter().map(pooled_text).collect::<Result<_>>()?;
    let pi: Vec<Vec<f32>> = images.iter().map(pooled_image).collect::<Result<_>>()?;
    let mut hits = 0;
    let mut total = 0;
    for group in (0..frames.len()).collect::<Vec<_>>().chunks(way) {
        if group.len() < way {
            break;
        }
        for &i in group {
            let best = group
                .iter()
                .map(|&j| (j, cosine(&pt[i], &pi[j])))
                .fold((usize::MAX, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
            hits += usize::from(best.0 == i || frames[best.0].caption == frames[i].caption);
            total += 1;
        }
    }
    let n = frames.len();
    let mut better = 0;
    let mut pairs = 0;
    for i in 0..n {
        let j = (i + n / 2 + 1) % n;
        if frames[j].caption == frames[i].caption {
            continue;
        }
        better += usize::from(cosine(&pt[i], &pi[i]) > cosine(&pt[i], &pi[j]));
        pairs += 1;
    }
    Ok((hits as f64 / total.max(1) as f64, better as f64 / pairs.max(1) as f64))
}
