//! The command implementations behind the `vista` binary. Every command
//! writes a self-describing run directory: the resolved config, the hashes of
//! everything it read, and its outputs.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::dataset::{extract_four_tuples, parse_caption, render_scene, Corpus, Manifest, Split, CHANNELS, IMG};
use crate::encoders::{cosine, pooled_image, pooled_text};
use crate::error::{Result, VistaError};
use crate::eval::{fid, tifa_score, MetricReport, StoryMetrics};
use crate::model::Vista;
use crate::param::Role;
use crate::story::{continue_stories, write_run_log, FrameRecord, Story};
use crate::tensor::Tensor;
use crate::train::{curve_csv, curve_endpoints, train_adapter, train_base, train_encoders, LossCurve};

/// Window for the first/last loss means in stage summaries.
pub const LOSS_WINDOW: usize = 100;

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(VistaError::Data(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn gen_data(seed: u64, train: usize, test: usize, frames: usize, out: &Path, force: bool) -> Result<Manifest> {
    prepare_out(out, force)?;
    let corpus = Corpus::generate(seed, train, test, frames)?;
    corpus.save(out)
}

pub fn tuple_count(corpus: &Corpus, split: Split) -> usize {
    extract_four_tuples(corpus.split(split)).len()
}

fn load_corpus(dir: &Path) -> Result<(Corpus, Manifest)> {
    let (corpus, manifest) = Corpus::load(dir)?;
    if corpus.stories.is_empty() {
        return Err(VistaError::Data(format!("corpus {} has no stories", dir.display())));
    }
    Ok((corpus, manifest))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub steps: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub seconds: f64,
}

fn stage_summary(stage: &str, curve: &LossCurve, seconds: f64) -> StageSummary {
    let (loss_first, loss_last) = curve_endpoints(curve, LOSS_WINDOW).unwrap_or((f64::NAN, f64::NAN));
    StageSummary {
        stage: stage.into(),
        steps: curve.len(),
        loss_first,
        loss_last,
        seconds,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub corpus_hash: String,
    pub input_checkpoint_hash: Option<String>,
    pub checkpoint_hash: String,
    pub base_params: usize,
    pub trainable_params: usize,
    pub base_role_hash_before: String,
    pub base_role_hash_after: String,
    pub stages: Vec<StageSummary>,
}

fn checkpoint_meta(cfg: &Config, stage: &str, corpus_hash: &str) -> serde_json::Value {
    serde_json::json!({
        "stage": stage,
        "config": cfg.to_text(),
        "config_hash": cfg.hash(),
        "corpus_hash": corpus_hash,
    })
}

fn save_model(model: &Vista, path: &Path, cfg: &Config, stage: &str, corpus_hash: &str) -> Result<String> {
    Checkpoint::from_store(&model.store, checkpoint_meta(cfg, stage, corpus_hash)).save(path)
}

/// Rebuild a model from a checkpoint. Returns the model, the config recorded
/// in the checkpoint and the checkpoint's file hash.
pub fn load_model(path: &Path) -> Result<(Vista, Config, String)> {
    let (ck, hash) = Checkpoint::load(path)?;
    let text = ck.header.meta["config"]
        .as_str()
        .ok_or_else(|| VistaError::Data(format!("checkpoint {} has no recorded config", path.display())))?;
    let cfg = Config::parse(text)?;
    let mut model = Vista::new(&cfg.model(), cfg.seed)?;
    ck.apply(&mut model.store)?;
    Ok((model, cfg, hash))
}

fn periodic_dir(out: &Path) -> Result<PathBuf> {
    let d = out.join("checkpoints");
    fs::create_dir_all(&d)?;
    Ok(d)
}

/// Stages 0 and 1: contrastive encoders, then the base denoiser.
pub fn pretrain(corpus_dir: &Path, out: &Path, cfg: &Config, force: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let (corpus, manifest) = load_corpus(corpus_dir)?;
    prepare_out(out, force)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let mut model = Vista::new(&cfg.model(), cfg.seed)?;
    let base_before = model.store.role_hash(Role::Base);

    let started = Instant::now();
    let c0 = train_encoders(&mut model, &corpus, cfg)?;
    let s0 = stage_summary("encoders", &c0, started.elapsed().as_secs_f64());
    fs::write(out.join("stage0_loss.csv"), curve_csv(&c0))?;
    model.store.freeze_role(Role::Encoder);

    let started = Instant::now();
    let periodic = periodic_dir(out)?;
    let corpus_hash = manifest.data_sha256.clone();
    let c1 = train_base(&mut model, &corpus, cfg, |step, m| {
        save_model(m, &periodic.join(format!("base-{step:06}.ckpt")), cfg, "base", &corpus_hash).map(|_| ())
    })?;
    let s1 = stage_summary("base", &c1, started.elapsed().as_secs_f64());
    fs::write(out.join("stage1_loss.csv"), curve_csv(&c1))?;
    model.store.freeze_role(Role::Base);

    let hash = save_model(&model, &out.join("base.ckpt"), cfg, "base", &corpus_hash)?;
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        corpus_hash,
        input_checkpoint_hash: None,
        checkpoint_hash: hash,
        base_params: model.base_count(),
        trainable_params: model.trainable_count(),
        base_role_hash_before: base_before,
        base_role_hash_after: model.store.role_hash(Role::Base),
        stages: vec![s0, s1],
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// The run config for a command that starts from a checkpoint: the recorded
/// config with command-line overrides on top.
pub fn resolve_config(recorded: Config, config_file: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = recorded;
    if let Some(p) = config_file {
        let text = fs::read_to_string(p)?;
        let mut lines = vec![];
        for line in text.lines() {
            let l = line.split('#').next().unwrap_or("").trim();
            if !l.is_empty() {
                lines.push(l.to_string());
            }
        }
        cfg = cfg.with_overrides(&lines)?;
    }
    cfg.with_overrides(overrides)
}

/// Architecture keys must agree with the checkpoint being loaded.
fn check_architecture(recorded: &Config, cfg: &Config) -> Result<()> {
    if recorded.model() != cfg.model() || recorded.seed != cfg.seed {
        return Err(VistaError::Config(
            "architecture keys (dim, fusion_blocks, timesteps, betas, seed, adapter_copy_base) differ from the checkpoint"
                .into(),
        ));
    }
    Ok(())
}

/// Stage 2: fusion model and history adapter on top of a frozen base.
pub fn train_adapter_stage(
    corpus_dir: &Path,
    base: &Path,
    out: &Path,
    config_file: Option<&Path>,
    overrides: &[String],
    force: bool,
) -> Result<TrainSummary> {
    let (corpus, manifest) = load_corpus(corpus_dir)?;
    let (mut model, recorded, base_hash) = load_model(base)?;
    let cfg = resolve_config(recorded.clone(), config_file, overrides)?;
    check_architecture(&recorded, &cfg)?;
    prepare_out(out, force)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    if cfg.adapter_copy_base {
        model.copy_base_into_adapter();
    }
    let before = model.store.role_hash(Role::Base);
    log::info!(
        "trainable parameters {} vs frozen base {}",
        model.trainable_count(),
        model.base_count()
    );
    let started = Instant::now();
    let periodic = periodic_dir(out)?;
    let corpus_hash = manifest.data_sha256.clone();
    let curve = train_adapter(&mut model, &corpus, &cfg, |step, m| {
        save_model(m, &periodic.join(format!("adapter-{step:06}.ckpt")), &cfg, "adapter", &corpus_hash).map(|_| ())
    })?;
    let s2 = stage_summary("adapter", &curve, started.elapsed().as_secs_f64());
    fs::write(out.join("stage2_loss.csv"), curve_csv(&curve))?;
    let after = model.store.role_hash(Role::Base);
    if after != before {
        return Err(VistaError::FrozenViolation("base weights changed during adapter training".into()));
    }
    let hash = save_model(&model, &out.join("model.ckpt"), &cfg, "adapter", &corpus_hash)?;
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        corpus_hash,
        input_checkpoint_hash: Some(base_hash),
        checkpoint_hash: hash,
        base_params: model.base_count(),
        trainable_params: model.trainable_count(),
        base_role_hash_before: before,
        base_role_hash_after: after,
        stages: vec![s2],
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Where a story's first frame comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstFrame {
    /// Frame 0 of a corpus story.
    Corpus(u32),
    /// A raw little-endian f32 `32×32×3` file in `[0, 1]`.
    Raw(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorySpec {
    pub id: u64,
    pub prompts: Vec<String>,
    #[serde(default)]
    pub first_frame: Option<FirstFrame>,
}

/// Story file: a JSON array of [`StorySpec`].
pub fn read_story_file(path: &Path) -> Result<Vec<StorySpec>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// The first `n` test stories of a corpus as continuation specs.
pub fn test_story_specs(corpus: &Corpus, n: usize) -> Vec<StorySpec> {
    corpus
        .split(Split::Test)
        .take(n)
        .map(|s| StorySpec {
            id: s.id as u64,
            prompts: s.frames.iter().map(|f| f.caption.clone()).collect(),
            first_frame: Some(FirstFrame::Corpus(s.id)),
        })
        .collect()
}

fn resolve_first_frame(spec: &StorySpec, corpus: &Corpus, base_dir: &Path) -> Result<Tensor<f32>> {
    match &spec.first_frame {
        None => Err(VistaError::Sequencing(format!(
            "story {} is missing its first frame (continuation needs the real first image)",
            spec.id
        ))),
        Some(FirstFrame::Corpus(id)) => corpus
            .story(*id)
            .map(|s| s.frames[0].image.clone())
            .ok_or_else(|| VistaError::Data(format!("story {} refers to missing corpus story {id}", spec.id))),
        Some(FirstFrame::Raw(p)) => {
            let p = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            Tensor::from_le_bytes(&[IMG, IMG, CHANNELS], &fs::read(&p)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedStory {
    pub id: u64,
    pub prompts: Vec<String>,
}

/// `generated.json`. `frames.bin` holds every frame of every story in order,
/// frame 0 being the given real frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedManifest {
    pub stories: Vec<GeneratedStory>,
    pub image_shape: [usize; 3],
    pub dtype: String,
    pub frames_sha256: String,
    pub ground_truth: bool,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_hash: Option<String>,
    pub corpus_hash: String,
    pub config: String,
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub mode: Option<String>,
    pub overrides: Vec<String>,
    pub ground_truth: bool,
    pub force: bool,
}

/// Ground truth for a prompt: the render of its parsed scene graph.
pub fn ground_truth_frame(prompt: &str) -> Result<Tensor<f32>> {
    Ok(render_scene(&parse_caption(prompt)?))
}

pub fn frames_bytes(stories: &[Story]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in stories {
        for im in &s.images {
            out.extend_from_slice(&im.to_le_bytes());
        }
    }
    out
}

/// PPM grid, one story per row, at most eight rows.
pub fn preview_ppm(stories: &[Story]) -> Vec<u8> {
    let rows = stories.len().min(8);
    let cols = stories.iter().take(rows).map(|s| s.images.len()).max().unwrap_or(0);
    let (w, h) = (cols * (IMG + 1) + 1, rows * (IMG + 1) + 1);
    let mut px = vec![40u8; w * h * 3];
    for (r, s) in stories.iter().take(rows).enumerate() {
        for (c, im) in s.images.iter().enumerate() {
            let d = im.data();
            for y in 0..IMG {
                for x in 0..IMG {
                    let o = ((r * (IMG + 1) + 1 + y) * w + c * (IMG + 1) + 1 + x) * 3;
                    for ch in 0..CHANNELS {
                        px[o + ch] = (d[(y * IMG + x) * CHANNELS + ch].clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    out
}

pub fn generate(
    ckpt: Option<&Path>,
    corpus_dir: &Path,
    specs: &[StorySpec],
    specs_dir: &Path,
    out: &Path,
    opts: &GenerateOptions,
) -> Result<(GeneratedManifest, Vec<FrameRecord>)> {
    let (corpus, manifest) = load_corpus(corpus_dir)?;
    let mut stories = specs
        .iter()
        .map(|s| Story::new(s.id, s.prompts.clone(), resolve_first_frame(s, &corpus, specs_dir)?))
        .collect::<Result<Vec<_>>>()?;
    let loaded = match ckpt {
        Some(p) => Some(load_model(p)?),
        None if opts.ground_truth => None,
        None => return Err(VistaError::Config("generate needs --ckpt unless --ground-truth".into())),
    };
    let mut cfg = loaded.as_ref().map(|(_, c, _)| c.clone()).unwrap_or_default();
    if let Some(s) = opts.seed {
        cfg.set("sample_seed", &s.to_string())?;
    }
    if let Some(l) = opts.lambda {
        cfg.set("lambda", &l.to_string())?;
    }
    if let Some(m) = &opts.mode {
        cfg.set("history_mode", m)?;
    }
    cfg = cfg.with_overrides(&opts.overrides)?;
    if let Some((_, recorded, _)) = &loaded {
        check_architecture(recorded, &cfg)?;
    }
    prepare_out(out, opts.force)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;

    let records = if opts.ground_truth {
        for s in &mut stories {
            for p in &s.prompts[1..] {
                s.images.push(ground_truth_frame(p)?);
            }
        }
        Vec::new()
    } else {
        let (model, _, _) = loaded.as_ref().expect("checked above");
        continue_stories(model, &mut stories, &cfg.generation())?
    };

    let bytes = frames_bytes(&stories);
    fs::write(out.join("frames.bin"), &bytes)?;
    fs::write(out.join("preview.ppm"), preview_ppm(&stories))?;
    write_run_log(BufWriter::new(fs::File::create(out.join("salience.jsonl"))?), &records)?;
    let gm = GeneratedManifest {
        stories: stories
            .iter()
            .map(|s| GeneratedStory {
                id: s.id,
                prompts: s.prompts.clone(),
            })
            .collect(),
        image_shape: [IMG, IMG, CHANNELS],
        dtype: "f32le".into(),
        frames_sha256: hex::encode(Sha256::digest(&bytes)),
        ground_truth: opts.ground_truth,
        checkpoint: ckpt.map(Path::to_path_buf),
        checkpoint_hash: loaded.as_ref().map(|(_, _, h)| h.clone()),
        corpus_hash: manifest.data_sha256,
        config: cfg.to_text(),
    };
    write_json(&out.join("generated.json"), &gm)?;
    Ok((gm, records))
}

/// Read a generation directory back into stories.
pub fn read_generated(dir: &Path) -> Result<(GeneratedManifest, Vec<Story>)> {
    let gm: GeneratedManifest = serde_json::from_str(&fs::read_to_string(dir.join("generated.json"))?)?;
    let bytes = fs::read(dir.join("frames.bin"))?;
    if hex::encode(Sha256::digest(&bytes)) != gm.frames_sha256 {
        return Err(VistaError::Data("frames.bin hash does not match generated.json".into()));
    }
    let frame = IMG * IMG * CHANNELS * 4;
    let total: usize = gm.stories.iter().map(|s| s.prompts.len()).sum();
    if bytes.len() != total * frame {
        return Err(VistaError::Format {
            offset: bytes.len() as u64,
            msg: format!("frames.bin holds {} bytes, expected {}", bytes.len(), total * frame),
        });
    }
    let mut at = 0;
    let mut stories = Vec::with_capacity(gm.stories.len());
    for s in &gm.stories {
        let mut images = Vec::with_capacity(s.prompts.len());
        for _ in &s.prompts {
            images.push(Tensor::from_le_bytes(&[IMG, IMG, CHANNELS], &bytes[at..at + frame])?);
            at += frame;
        }
        stories.push(Story {
            id: s.id,
            prompts: s.prompts.clone(),
            images,
        });
    }
    Ok((gm, stories))
}

/// Score generated frames `1..K` of every story. Ground truth is the render
/// of each prompt's parsed scene graph; embeddings come from the frozen
/// image and text encoders of `ckpt`.
pub fn evaluate(generated: &Path, corpus_dir: &Path, ckpt: Option<&Path>, report: &Path) -> Result<MetricReport> {
    let (gm, stories) = read_generated(generated)?;
    let (_, manifest) = load_corpus(corpus_dir)?;
    if manifest.data_sha256 != gm.corpus_hash {
        return Err(VistaError::Data("generated frames come from a different corpus".into()));
    }
    let ckpt = ckpt
        .map(Path::to_path_buf)
        .or_else(|| gm.checkpoint.clone())
        .ok_or_else(|| VistaError::Config("evaluate needs --ckpt for the embedding encoders".into()))?;
    let (model, _, ckpt_hash) = load_model(&ckpt)?;

    let mut per_story = Vec::with_capacity(stories.len());
    let (mut gen_feats, mut real_feats) = (Vec::new(), Vec::new());
    let (mut tifa_all, mut t_all, mut i_all, mut r_all, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for s in &stories {
        let prompts: Vec<&str> = s.prompts[1..].iter().map(String::as_str).collect();
        let graphs = prompts.iter().map(|p| parse_caption(p)).collect::<Result<Vec<_>>>()?;
        let truth: Vec<Tensor<f32>> = graphs.iter().map(render_scene).collect();
        let gen: Vec<&Tensor<f32>> = s.images[1..].iter().collect();
        if gen.is_empty() {
            continue;
        }
        let tifa = tifa_score(&gen, &graphs.iter().collect::<Vec<_>>())?;
        let texts = model.embed_texts(&prompts)?;
        let mut imgs: Vec<&Tensor<f32>> = gen.clone();
        imgs.extend(truth.iter());
        imgs.push(&s.images[0]);
        let embs = model.embed_images(&imgs)?;
        let pooled = embs.iter().map(pooled_image).collect::<Result<Vec<_>>>()?;
        let k = gen.len();
        let reference = &pooled[2 * k];
        let (mut ct, mut ci, mut cr) = (0.0, 0.0, 0.0);
        for j in 0..k {
            ct += cosine(&pooled[j], &pooled_text(&texts[j])?);
            ci += cosine(&pooled[j], &pooled[k + j]);
            cr += cosine(&pooled[j], reference);
            gen_feats.push(pooled[j].iter().map(|&v| v as f64).collect::<Vec<_>>());
            real_feats.push(pooled[k + j].iter().map(|&v| v as f64).collect::<Vec<_>>());
        }
        let kf = k as f64;
        per_story.push(StoryMetrics {
            story_id: s.id,
            tifa,
            clip_t: ct / kf,
            clip_i: ci / kf,
            clip_i_ref: cr / kf,
        });
        tifa_all += tifa * kf;
        t_all += ct;
        i_all += ci;
        r_all += cr;
        n += k;
    }
    if n == 0 {
        return Err(VistaError::Data("no generated frames to evaluate".into()));
    }
    let f = fid(&gen_feats, &real_feats)?;
    let nf = n as f64;
    let rep = MetricReport {
        tifa: tifa_all / nf,
        clip_t: t_all / nf,
        clip_i: i_all / nf,
        clip_i_ref: r_all / nf,
        fid: f.value,
        fid_regularized: f.regularized,
        frames: n,
        per_story,
        corpus_hash: manifest.data_sha256,
        config: serde_json::json!({
            "generation": gm.config,
            "generated_frames_sha256": gm.frames_sha256,
            "ground_truth": gm.ground_truth,
            "embedding_checkpoint": ckpt,
            "embedding_checkpoint_hash": ckpt_hash,
        }),
    };
    if let Some(parent) = report.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_json(report, &rep)?;
    Ok(rep)
}
