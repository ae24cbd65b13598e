//! End-to-end acceptance checks.
//!
//! The full-scale run (corpus, both training stages, three generation
//! variants) is cached under the cargo target dir and reused when its key
//! matches. `VISTA_ACCEPTANCE_RERUN=1` forces a fresh run and
//! `VISTA_ACCEPTANCE_RUN=<dir>` points at an existing run directory.
//! Pass `--prepare` to only build the cache.
//!
//! Trend checks are reported but do not fail the process unless
//! `VISTA_ACCEPTANCE_STRICT=1` is set.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde_json::json;
use sha2::{Digest, Sha256};
use vista_core::checkpoint::{file_hash, Checkpoint};
use vista_core::config::Config;
use vista_core::dataset::{
    all_graphs, caption_from_graph, parse_caption, render_scene, Corpus, SceneGraph, Split, CHANNELS, IMG,
};
use vista_core::denoiser::{denoise_forward, CondBatch};
use vista_core::diffusion::{
    forward_diffuse, predict_x0, sample_unguided, training_loss, HistoryBranch, NoiseSchedule, SamplerConfig,
};
use vista_core::encoders::{retrieval_stats, MAX_LEN};
use vista_core::eval::{fid, sign_test, tifa_score, MetricReport};
use vista_core::fusion::concat_history;
use vista_core::gradcheck::grad_check;
use vista_core::model::Vista;
use vista_core::param::{AdamW, Role};
use vista_core::pipeline::{load_model, read_generated, tuple_count, TrainSummary};
use vista_core::rng::{streams, RngStream};
use vista_core::story::{salience, sample_base_only, select_salient_history};
use vista_core::train::tuple_batch;
use vista_core::{Tensor, VistaError};

/// Bump when a code change invalidates cached runs.
const RUN_VERSION: u32 = 1;
const EVAL_STORIES: usize = 50;
const REGEN_STORIES: usize = 16;
const TINY: &[&str] = &[
    "stage0_steps=8",
    "stage0_batch=8",
    "stage1_steps=6",
    "stage1_batch=4",
    "stage2_steps=6",
    "stage2_batch=4",
    "checkpoint_every=0",
    "sampler_steps=4",
    "gen_batch=2",
    "log_every=0",
];

type Outcome = Result<(bool, String), String>;

struct Line {
    id: &'static str,
    name: &'static str,
    trend: bool,
    pass: bool,
    detail: String,
}

struct Run {
    dir: PathBuf,
}

impl Run {
    fn corpus(&self) -> PathBuf {
        self.dir.join("corpus")
    }
    fn base(&self) -> PathBuf {
        self.dir.join("pre/base.ckpt")
    }
    fn model(&self) -> PathBuf {
        self.dir.join("ad/model.ckpt")
    }
    fn gen(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
    fn timings(&self) -> serde_json::Value {
        fs::read_to_string(self.dir.join("timings.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or(serde_json::Value::Null)
    }
    fn report(&self, name: &str) -> Result<MetricReport, String> {
        let text = fs::read_to_string(self.gen(name).join("report.json")).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}

fn vista(args: &[&str], log: Option<&Path>) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vista"));
    cmd.args(args);
    if log.is_none() {
        cmd.env("RUST_LOG", "warn");
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if let Some(path) = log {
        let mut text = fs::read(path).unwrap_or_default();
        text.extend_from_slice(&out.stderr);
        fs::write(path, text).map_err(|e| e.to_string())?;
    }
    if !out.status.success() {
        return Err(format!(
            "vista {} exited with {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn run_key() -> String {
    let mut h = Sha256::new();
    h.update(RUN_VERSION.to_le_bytes());
    h.update(Config::default().to_text());
    h.update(EVAL_STORIES.to_le_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

/// Execute the full pipeline into `dir`, timing each step.
fn full_run(dir: &Path) -> Result<(), String> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| e.to_string())?;
    }
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let log = dir.join("pipeline.log");
    let run = Run { dir: dir.to_path_buf() };
    let cfg = Config::default();
    let mut times = serde_json::Map::new();
    let start = Instant::now();
    let mut step = |name: &str, args: Vec<String>| -> Result<(), String> {
        eprintln!("acceptance: running {name}");
        let t = Instant::now();
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        vista(&argv, Some(&log))?;
        times.insert(name.into(), json!(t.elapsed().as_secs_f64()));
        Ok(())
    };
    let v = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let n = EVAL_STORIES.to_string();
    step(
        "gen_data",
        v(&[
            "gen-data",
            "--seed",
            &cfg.seed.to_string(),
            "--stories",
            &cfg.train_stories.to_string(),
            "--test-stories",
            &cfg.test_stories.to_string(),
            "--frames",
            &cfg.frames.to_string(),
            "--out",
            s(&run.corpus()),
        ]),
    )?;
    step("pretrain", v(&["pretrain", "--corpus", s(&run.corpus()), "--out", s(&dir.join("pre"))]))?;
    let base_before = file_hash(&run.base()).map_err(|e| e.to_string())?;
    step(
        "train_adapter",
        v(&["train-adapter", "--corpus", s(&run.corpus()), "--base", s(&run.base()), "--out", s(&dir.join("ad"))]),
    )?;
    let base_after = file_hash(&run.base()).map_err(|e| e.to_string())?;
    let generate = |out: &str, extra: &[&str]| {
        let mut a = v(&["generate", "--ckpt", s(&run.model()), "--corpus", s(&run.corpus()), "--test-stories", &n, "--out", s(&run.gen(out))]);
        a.extend(v(extra));
        a
    };
    let evaluate = |out: &str| {
        let g = run.gen(out);
        v(&["evaluate", "--generated", s(&g), "--corpus", s(&run.corpus()), "--report", s(&g.join("report.json"))])
    };
    step("generate", generate("g_vista", &[]))?;
    step("evaluate", evaluate("g_vista"))?;
    let pipeline = start.elapsed().as_secs_f64();
    step("generate_lambda0", generate("g_l0", &["--lambda", "0"]))?;
    step("evaluate_lambda0", evaluate("g_l0"))?;
    step("generate_text_masked", generate("g_tm", &["--mode", "text-masked"]))?;
    step("evaluate_text_masked", evaluate("g_tm"))?;
    times.insert("pipeline".into(), json!(pipeline));
    let record = json!({
        "key": run_key(),
        "seconds": times,
        "base_file_hash_before": base_before,
        "base_file_hash_after": base_after,
    });
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&record).unwrap()).map_err(|e| e.to_string())
}

fn prepare() -> Result<Run, String> {
    if let Ok(dir) = std::env::var("VISTA_ACCEPTANCE_RUN") {
        return Ok(Run { dir: dir.into() });
    }
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(run_key());
    let rerun = std::env::var("VISTA_ACCEPTANCE_RERUN").is_ok_and(|v| v == "1");
    if rerun || !dir.join("timings.json").exists() {
        eprintln!("acceptance: building the full run in {}", dir.display());
        full_run(&dir)?;
    } else {
        eprintln!("acceptance: reusing the full run in {}", dir.display());
    }
    Ok(Run { dir })
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn load(path: &Path) -> Result<(Vista, Config), String> {
    let (m, c, _) = load_model(path).map_err(e2s)?;
    Ok((m, c))
}

// 1
fn gradient_correctness(run: &Run) -> Outcome {
    let t0 = Instant::now();
    let (model, _) = load(&run.model())?;
    let (corpus, _) = Corpus::load(&run.corpus()).map_err(e2s)?;
    let story = corpus.split(Split::Test).next().ok_or("empty test split")?;
    let mut rng = RngStream::new(11, streams::BATCH);
    let mut batch = tuple_batch(&model, &[(&story.frames[0], &story.frames[1])], &mut rng, 0.0).map_err(e2s)?;
    batch.t = vec![450];
    let mut store = model.store.cast::<f64>();
    let mut grng = RngStream::new(12, streams::GRADCHECK);
    let r = grad_check(
        &mut store,
        &[Role::Fusion, Role::Adapter],
        |ctx| {
            let branch = HistoryBranch {
                fusion: &model.fusion,
                adapter: &model.adapter,
                lambda: 0.5,
            };
            training_loss(ctx, &model.schedule, &model.unet, Some(branch), &batch)
        },
        1e-4,
        2,
        &mut grng,
    )
    .map_err(e2s)?;
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        r.max_rel_err < 1e-4 && secs < 120.0 && r.checked > 0,
        format!("max rel err {:.2e} over {} coordinates, {secs:.1}s", r.max_rel_err, r.checked),
    ))
}

// 2
fn lambda_zero_equivalence(run: &Run) -> Outcome {
    let (model, cfg) = load(&run.model())?;
    let mut rng = RngStream::new(21, streams::EVAL);
    let d = model.config.dim;
    let mut identical = 0;
    for i in 0..10 {
        let x: Tensor<f32> = rng.normal_tensor(&[1, IMG, IMG, CHANNELS]);
        let n_valid = 2 + rng.below(MAX_LEN - 2);
        let valid: Vec<bool> = (0..MAX_LEN).map(|j| j < n_valid).collect();
        let mixed = CondBatch {
            text: rng.normal_tensor(&[1, MAX_LEN, d]),
            text_valid: valid.clone(),
            fusion: Some((rng.normal_tensor(&[1, MAX_LEN, d]), valid)),
            lambda: 0.0,
        };
        let mut base = mixed.clone();
        base.fusion = None;
        let t = [rng.below(model.schedule.len())];
        let a = denoise_forward(&model.store, &model.unet, Some(&model.adapter), &x, &t, &mixed).map_err(e2s)?;
        let b = denoise_forward(&model.store, &model.unet, None, &x, &t, &base).map_err(e2s)?;
        if a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()) {
            identical += 1;
        } else {
            eprintln!("input {i} differs by {:.3e}", a.max_abs_diff(&b));
        }
    }
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let out = tmp.path().join("g0");
    vista(
        &["generate", "--ckpt", s(&run.model()), "--corpus", s(&run.corpus()), "--test-stories", "3", "--lambda", "0", "--out", s(&out)],
        None,
    )?;
    let (_, stories) = read_generated(&out).map_err(e2s)?;
    let sampler = cfg.sampler();
    let mut frames = 0;
    let mut same = 0;
    let k = stories.iter().map(|s| s.prompts.len()).max().unwrap_or(0);
    for f in 1..k {
        for chunk in stories.chunks(cfg.gen_batch) {
            let live: Vec<_> = chunk.iter().filter(|s| s.prompts.len() > f).collect();
            let prompts: Vec<&str> = live.iter().map(|s| s.prompts[f].as_str()).collect();
            let seeds: Vec<_> = live.iter().map(|s| (sampler.seed, s.id, f)).collect();
            let base = sample_base_only(&model, &prompts, &seeds, &sampler).map_err(e2s)?;
            for (s, im) in live.iter().zip(&base) {
                frames += 1;
                same += usize::from(s.images[f].data().iter().zip(im.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }
    Ok((
        identical == 10 && frames > 0 && same == frames,
        format!("{identical}/10 forward passes bit-identical, {same}/{frames} generated frames match base-only sampling"),
    ))
}

// 3
fn frozen_base(run: &Run) -> Outcome {
    let summary: TrainSummary =
        serde_json::from_str(&fs::read_to_string(run.dir.join("ad/summary.json")).map_err(e2s)?).map_err(e2s)?;
    let t = run.timings();
    let file_before = t["base_file_hash_before"].as_str().unwrap_or("");
    let file_after = t["base_file_hash_after"].as_str().unwrap_or("");
    let file_now = file_hash(&run.base()).map_err(e2s)?;
    let files_ok = !file_before.is_empty() && file_before == file_after && file_after == file_now;
    let (base, _) = load(&run.base())?;
    let (mut full, _) = load(&run.model())?;
    let roles_ok = summary.base_role_hash_before == summary.base_role_hash_after
        && base.store.role_hash(Role::Base) == full.store.role_hash(Role::Base)
        && summary.input_checkpoint_hash.as_deref() == Some(file_now.as_str());
    let id = full.store.ids_with_role(Role::Base)[0];
    let shape = full.store.get(id).value.shape().to_vec();
    let stored_frozen = full.store.iter().filter(|(_, p)| p.role == Role::Base).all(|(_, p)| p.frozen);
    full.store.freeze_role(Role::Base);
    let before = full.store.role_hash(Role::Base);
    let refused = matches!(
        full.store.accumulate(vec![(id, Tensor::full(&shape, 1.0))]),
        Err(VistaError::FrozenViolation(_))
    );
    let err = full.store.step(&[Role::Base], &AdamW::default(), 1);
    let aborted = stored_frozen
        && refused
        && matches!(err, Err(VistaError::FrozenViolation(_))) && full.store.role_hash(Role::Base) == before;
    Ok((
        files_ok && roles_ok && aborted,
        format!(
            "base file hash {} ({}), role hash {}, frozen step {}",
            &file_now[..12],
            if files_ok { "unchanged" } else { "CHANGED or unrecorded" },
            if roles_ok { "unchanged" } else { "CHANGED" },
            match err {
                Err(e) => format!("aborted with exit code {}", e.exit_code()),
                Ok(()) => "was allowed".into(),
            }
        ),
    ))
}

fn history_for(model: &Vista, caption: &str, image: &Tensor<f32>, i: usize) -> Result<vista_core::fusion::HistoryContext, String> {
    let t = model.embed_texts(&[caption]).map_err(e2s)?;
    let im = model.embed_images(&[image]).map_err(e2s)?;
    concat_history(&t[0], &im[0], i).map_err(e2s)
}

// 4
fn salience_contract(run: &Run) -> Outcome {
    let (model, _) = load(&run.model())?;
    let (corpus, _) = Corpus::load(&run.corpus()).map_err(e2s)?;
    let mut worst_sum = 0.0f64;
    let mut singles = 0;
    let mut ties = 0;
    let mut shifts = 0;
    let mut cases = 0;
    for story in corpus.split(Split::Test).take(20) {
        let k = story.frames.len() - 1;
        let current = &model.embed_texts(&[&story.frames[k].caption]).map_err(e2s)?[0];
        let hs: Vec<_> = (0..k)
            .map(|i| history_for(&model, &story.frames[i].caption, &story.frames[i].image, i))
            .collect::<Result<_, _>>()?;
        cases += 1;
        let (_, rep, _) = select_salient_history(&model.store, &model.fusion, current, &hs).map_err(e2s)?;
        worst_sum = worst_sum.max((rep.scores.iter().sum::<f64>() - 1.0).abs());
        if rep.scores.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            worst_sum = f64::INFINITY;
        }
        let (_, one, _) = select_salient_history(&model.store, &model.fusion, current, &hs[..1]).map_err(e2s)?;
        singles += usize::from(one.scores == vec![1.0] && one.chosen == 0);
        let twin = vec![hs[k - 1].clone(), hs[k - 1].clone()];
        let (_, tie, _) = select_salient_history(&model.store, &model.fusion, current, &twin).map_err(e2s)?;
        ties += usize::from(tie.chosen == 0 && tie.scores[0] == tie.scores[1]);
        let fused = model.fusion.fuse_all(&model.store, current, &hs).map_err(e2s)?;
        let shifted: Vec<Tensor<f32>> = fused.iter().map(|(_, l)| l.map(|v| v + 3.0)).collect();
        let masks: Vec<&[bool]> = hs.iter().map(|h| h.valid.as_slice()).collect();
        let moved = salience(&shifted.iter().collect::<Vec<_>>(), &masks, &current.valid).map_err(e2s)?;
        shifts += usize::from(moved.chosen == rep.chosen);
    }
    Ok((
        worst_sum <= 1e-6 && singles == cases && ties == cases && shifts == cases,
        format!(
            "{cases} stories: max |sum-1| {worst_sum:.1e}, single-history {singles}/{cases}, tie to first {ties}/{cases}, offset-invariant argmax {shifts}/{cases}"
        ),
    ))
}

/// Current prompt plus one history sharing its protagonist and one with no
/// content word in common.
fn crafted_case(graphs: &[SceneGraph], rng: &mut RngStream) -> (SceneGraph, SceneGraph, SceneGraph) {
    let solo: Vec<&SceneGraph> = graphs.iter().filter(|g| g.companion.is_none()).collect();
    let current = *solo[rng.below(solo.len())];
    let sharing: Vec<&&SceneGraph> = solo
        .iter()
        .filter(|g| g.protagonist == current.protagonist && **g != &current)
        .collect();
    let share = **sharing[rng.below(sharing.len())];
    let disjoint: Vec<&&SceneGraph> = solo
        .iter()
        .filter(|g| {
            let (p, q) = (g.protagonist, current.protagonist);
            p.shape != q.shape
                && p.color != q.color
                && p.size != q.size
                && g.background != current.background
                && g.cell != current.cell
                && g.verb != current.verb
        })
        .collect();
    let other = **disjoint[rng.below(disjoint.len())];
    (current, share, other)
}

// 5
fn salient_relevance(run: &Run) -> Outcome {
    let t0 = Instant::now();
    let (model, _) = load(&run.model())?;
    let graphs = all_graphs();
    let mut rng = RngStream::new(51, streams::EVAL);
    let mut hits = 0;
    let n = 100;
    for _ in 0..n {
        let (cur, share, other) = crafted_case(&graphs, &mut rng);
        let first_is_share = rng.bernoulli(0.5);
        let order = if first_is_share { [share, other] } else { [other, share] };
        let current = &model.embed_texts(&[&caption_from_graph(&cur)]).map_err(e2s)?[0];
        let hs: Vec<_> = order
            .iter()
            .enumerate()
            .map(|(i, g)| history_for(&model, &caption_from_graph(g), &render_scene(g), i))
            .collect::<Result<_, _>>()?;
        let (_, rep, _) = select_salient_history(&model.store, &model.fusion, current, &hs).map_err(e2s)?;
        hits += usize::from(rep.chosen == usize::from(!first_is_share));
    }
    let secs = t0.elapsed().as_secs_f64();
    let rate = hits as f64 / n as f64;
    Ok((rate >= 0.9 && secs < 300.0, format!("sharing pair chosen {hits}/{n} ({rate:.2}), {secs:.1}s")))
}

// 6
fn consistency_trend(run: &Run) -> Outcome {
    let vista = run.report("g_vista")?;
    let base = run.report("g_l0")?;
    let a: Vec<f64> = base.per_story.iter().map(|s| s.clip_i_ref).collect();
    let b: Vec<f64> = vista.per_story.iter().map(|s| s.clip_i_ref).collect();
    if vista.per_story.iter().map(|s| s.story_id).ne(base.per_story.iter().map(|s| s.story_id)) {
        return Err("reports cover different stories".into());
    }
    let margin = vista.clip_i_ref - base.clip_i_ref;
    let st = sign_test(&a, &b).map_err(e2s)?;
    Ok((
        margin > 0.0 && st.p_value < 0.05,
        format!(
            "{} stories: reference similarity {:.4} (lambda 0.5) vs {:.4} (lambda 0), margin {margin:+.4}, sign test {}/{}/{} p = {:.3e}",
            b.len(),
            vista.clip_i_ref,
            base.clip_i_ref,
            st.wins,
            st.losses,
            st.ties,
            st.p_value
        ),
    ))
}

// 7
fn faithfulness_trend(run: &Run) -> Outcome {
    let full = run.report("g_vista")?;
    let masked = run.report("g_tm")?;
    Ok((
        full.tifa > masked.tifa,
        format!("tifa {:.4} with text and image history vs {:.4} text-masked over {} frames", full.tifa, masked.tifa, full.frames),
    ))
}

// 8
fn diffusion_numerics(run: &Run) -> Outcome {
    let s = NoiseSchedule::default();
    let abs: Vec<f64> = (0..s.len()).map(|t| s.ab(t)).collect::<Result<_, _>>().map_err(e2s)?;
    let monotone = abs.windows(2).all(|w| w[1] < w[0]) && abs[0] < 1.0 && *abs.last().unwrap() > 0.0;
    let mut rng = RngStream::new(81, streams::EVAL);
    let x0: Tensor<f32> = rng.uniform_tensor(&[2, IMG, IMG, CHANNELS], -1.0, 1.0);
    let eps: Tensor<f32> = rng.normal_tensor(&[2, IMG, IMG, CHANNELS]);
    let mut inv = 0.0f64;
    for t in [0, 1, 250, 500, 750, 999] {
        let xt = forward_diffuse(&x0, &[t, t], &eps, &s).map_err(e2s)?;
        inv = inv.max(predict_x0(&xt, &eps, t, &s).map_err(e2s)?.max_abs_diff(&x0));
    }
    // A denoiser that knows x0 exactly must walk DDIM back to it.
    let xt: Tensor<f32> = rng.normal_tensor(&[2, IMG, IMG, CHANNELS]);
    let oracle = |x: &Tensor<f32>, t: usize| -> vista_core::Result<Tensor<f32>> {
        let ab = s.ab(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x.zip_map(&x0, |xv, x0v| ((xv as f64 - a * x0v as f64) / b) as f32)
    };
    let cfg = SamplerConfig { steps: 50, ..SamplerConfig::default() };
    let walked = sample_unguided(xt, &cfg, &s, oracle).map_err(e2s)?.max_abs_diff(&x0);
    let (model, mcfg) = load(&run.model())?;
    let sampler = SamplerConfig { steps: 50, ..mcfg.sampler() };
    let prompt = "the large red circle sits on the blue background";
    let a = sample_base_only(&model, &[prompt], &[(3, 0, 1)], &sampler).map_err(e2s)?;
    let b = sample_base_only(&model, &[prompt], &[(3, 0, 1)], &sampler).map_err(e2s)?;
    let repro = a[0].data().iter().zip(b[0].data()).all(|(p, q)| p.to_bits() == q.to_bits());
    Ok((
        monotone && inv < 1e-4 && walked < 1e-4 && repro,
        format!(
            "alpha-bar monotone {monotone}, stub inversion err {inv:.1e}, oracle DDIM err {walked:.1e}, 50-step trajectory reproducible {repro}"
        ),
    ))
}

fn gaussian(rng: &mut RngStream, n: usize, mu: &[f64]) -> Vec<Vec<f64>> {
    (0..n).map(|_| mu.iter().map(|m| m + rng.normal()).collect()).collect()
}

/// Rows whose sample mean is `mu` and sample covariance is exactly
/// `diag(sd²)`, built from the non-constant columns of a 4×4 Hadamard matrix.
fn hadamard_set(mu: &[f64; 3], sd: &[f64; 3]) -> Vec<Vec<f64>> {
    const H: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0]];
    let k = (3.0f64 / 4.0).sqrt();
    H.iter().map(|r| (0..3).map(|j| mu[j] + sd[j] * k * r[j]).collect()).collect()
}

// 9
fn fid_numerics(_: &Run) -> Outcome {
    let mut rng = RngStream::new(91, streams::EVAL);
    let x = gaussian(&mut rng, 2000, &[0.0; 4]);
    let self_fid = fid(&x, &x).map_err(e2s)?.value;
    let n = 100_000;
    let mu = [1.0, -0.5, 0.75, 0.25];
    let want: f64 = mu.iter().map(|m| m * m).sum();
    let a = gaussian(&mut rng, n, &[0.0; 4]);
    let b = gaussian(&mut rng, n, &mu);
    let shift = fid(&a, &b).map_err(e2s)?.value;
    let rel = (shift - want).abs() / want;
    let (sa, sb) = ([1.0, 2.0, 0.5], [1.5, 1.0, 0.5]);
    let (ma, mb) = ([0.0, 1.0, 0.0], [0.5, 1.0, -1.0]);
    let diag = fid(&hadamard_set(&ma, &sa), &hadamard_set(&mb, &sb)).map_err(e2s)?.value;
    let closed: f64 = (0..3).map(|j| (ma[j] - mb[j]).powi(2) + (sa[j] - sb[j]).powi(2)).sum();
    let derr = (diag - closed).abs();
    Ok((
        self_fid.abs() <= 1e-6 && rel < 0.05 && derr < 1e-4,
        format!("fid(X,X) {self_fid:.1e}, mean shift {shift:.4} vs {want:.4} ({:.2}%), diagonal {diag:.6} vs {closed:.6}", 100.0 * rel),
    ))
}

// 10
fn oracle_closure(run: &Run) -> Outcome {
    let (corpus, _) = Corpus::load(&run.corpus()).map_err(e2s)?;
    let frames: Vec<_> = corpus.split(Split::Test).flat_map(|s| s.frames.iter()).collect();
    let renders: Vec<Tensor<f32>> = frames
        .iter()
        .map(|f| parse_caption(&f.caption).map(|g| render_scene(&g)))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let graphs: Vec<&SceneGraph> = frames.iter().map(|f| &f.graph).collect();
    let score = tifa_score(&renders.iter().collect::<Vec<_>>(), &graphs).map_err(e2s)?;
    let all = all_graphs();
    let parsed = all
        .iter()
        .filter(|g| parse_caption(&caption_from_graph(g)).is_ok_and(|p| p == **g))
        .count();
    Ok((
        score == 1.0 && parsed == all.len(),
        format!("tifa {score} over {} test frames, {parsed}/{} scene graphs recovered from captions", frames.len(), all.len()),
    ))
}

// 11
fn training_viability(run: &Run) -> Outcome {
    let summary: TrainSummary =
        serde_json::from_str(&fs::read_to_string(run.dir.join("ad/summary.json")).map_err(e2s)?).map_err(e2s)?;
    let st = summary.stages.iter().find(|s| s.stage == "adapter").ok_or("no stage 2 summary")?;
    let (corpus, _) = Corpus::load(&run.corpus()).map_err(e2s)?;
    let ratio = st.loss_last / st.loss_first;
    let minutes = run.timings()["seconds"]["pipeline"].as_f64().map(|s| s / 60.0);
    let within = minutes.is_some_and(|m| m < 90.0);
    Ok((
        ratio < 0.7 && st.steps <= 5000 && corpus.count(Split::Train) == 2000 && within,
        format!(
            "stage 2 windowed loss {:.4} -> {:.4} (x{ratio:.3}) in {} steps on {} tuples, pipeline {}",
            st.loss_first,
            st.loss_last,
            st.steps,
            tuple_count(&corpus, Split::Train),
            minutes.map_or("time not recorded".into(), |m| format!("{m:.1} min"))
        ),
    ))
}

fn tiny_pipeline(root: &Path) -> Result<Vec<u8>, String> {
    let corpus = root.join("corpus");
    vista(&["gen-data", "--seed", "6", "--stories", "10", "--test-stories", "2", "--frames", "4", "--out", s(&corpus)], None)?;
    let mut pre = vec!["pretrain", "--corpus", s(&corpus), "--out"];
    let pre_dir = root.join("pre");
    pre.push(s(&pre_dir));
    for t in TINY {
        pre.extend(["--set", t]);
    }
    vista(&pre, None)?;
    let ad = root.join("ad");
    vista(&["train-adapter", "--corpus", s(&corpus), "--base", s(&pre_dir.join("base.ckpt")), "--out", s(&ad)], None)?;
    let g = root.join("g");
    vista(&["generate", "--ckpt", s(&ad.join("model.ckpt")), "--corpus", s(&corpus), "--test-stories", "2", "--out", s(&g)], None)?;
    fs::read(g.join("frames.bin")).map_err(e2s)
}

// 12
fn persistence(run: &Run) -> Outcome {
    let mut ckpt_ok = true;
    for p in [run.base(), run.model()] {
        let bytes = fs::read(&p).map_err(e2s)?;
        ckpt_ok &= Checkpoint::from_bytes(&bytes).map_err(e2s)?.to_bytes().map_err(e2s)? == bytes;
    }
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let (corpus, _) = Corpus::load(&run.corpus()).map_err(e2s)?;
    let copy = tmp.path().join("corpus");
    corpus.save(&copy).map_err(e2s)?;
    let corpus_ok = ["stories.bin", "manifest.json"]
        .iter()
        .all(|f| fs::read(run.corpus().join(f)).ok() == fs::read(copy.join(f)).ok());
    let a = tiny_pipeline(&tmp.path().join("a"))?;
    let b = tiny_pipeline(&tmp.path().join("b"))?;
    let tiny_ok = !a.is_empty() && a == b;

    let (gm, stories) = read_generated(&run.gen("g_vista")).map_err(e2s)?;
    let ckpt = gm.checkpoint.clone().ok_or("generated run has no checkpoint")?;
    let hash_ok = gm.checkpoint_hash.as_deref() == Some(file_hash(&ckpt).map_err(e2s)?.as_str());
    let recorded = Config::parse(&gm.config).map_err(e2s)?;
    let sets = [
        format!("lambda={}", recorded.lambda),
        format!("history_mode={}", recorded.history_mode.name()),
        format!("sampler_steps={}", recorded.sampler_steps),
        format!("guidance={}", recorded.guidance),
        format!("sample_seed={}", recorded.sample_seed),
        format!("gen_batch={}", recorded.gen_batch),
    ];
    let out = tmp.path().join("regen");
    let n = REGEN_STORIES.to_string();
    let corpus_dir = run.corpus();
    let mut args = vec!["generate", "--ckpt", s(&ckpt), "--corpus", s(&corpus_dir), "--test-stories", &n, "--out", s(&out)];
    for x in &sets {
        args.extend(["--set", x.as_str()]);
    }
    vista(&args, None)?;
    let (gm2, again) = read_generated(&out).map_err(e2s)?;
    let regen_ok = gm2.config == gm.config
        && gm2.corpus_hash == gm.corpus_hash
        && again.len() == REGEN_STORIES
        && again.iter().zip(&stories).all(|(x, y)| x == y);
    Ok((
        ckpt_ok && corpus_ok && tiny_ok && hash_ok && regen_ok,
        format!(
            "checkpoint bytes {}, corpus bytes {}, tiny pipeline rerun {}, regenerated {} stories from recorded config {}",
            ok_word(ckpt_ok),
            ok_word(corpus_ok),
            ok_word(tiny_ok),
            REGEN_STORIES,
            ok_word(hash_ok && regen_ok)
        ),
    ))
}

fn ok_word(b: bool) -> &'static str {
    if b {
        "identical"
    } else {
        "DIFFER"
    }
}

fn encoder_retrieval(run: &Run) -> Outcome {
    let (model, _) = load(&run.model())?;
    let (corpus, _) = Corpus::load(&run.corpus()).map_err(e2s)?;
    let frames: Vec<_> = corpus.split(Split::Test).flat_map(|s| s.frames.iter()).collect();
    let (top1, matched) = retrieval_stats(&model.store, &model.encoder, &model.vocab, &frames, 64).map_err(e2s)?;
    Ok((
        top1 > 0.9 && matched >= 0.95,
        format!("64-way top-1 {top1:.3}, matched beats mismatched {matched:.3} on {} held-out frames", frames.len()),
    ))
}

fn main() {
    let prepare_only = std::env::args().any(|a| a == "--prepare");
    let strict = std::env::var("VISTA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let run = match prepare() {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL  full run could not be built: {e}");
            std::process::exit(1);
        }
    };
    if prepare_only {
        println!("acceptance run ready in {}", run.dir.display());
        return;
    }
    let checks: Vec<(&str, &str, bool, fn(&Run) -> Outcome)> = vec![
        ("1", "gradient correctness", false, gradient_correctness),
        ("2", "lambda 0 base equivalence", false, lambda_zero_equivalence),
        ("3", "frozen base integrity", false, frozen_base),
        ("4", "salience contract", false, salience_contract),
        ("5", "salient relevance", true, salient_relevance),
        ("6", "consistency trend", true, consistency_trend),
        ("7", "faithfulness trend", true, faithfulness_trend),
        ("8", "diffusion numerics", false, diffusion_numerics),
        ("9", "fid numerics", false, fid_numerics),
        ("10", "oracle closure", false, oracle_closure),
        ("11", "training viability", true, training_viability),
        ("12", "persistence", false, persistence),
        ("enc", "encoder retrieval", true, encoder_retrieval),
    ];
    let mut lines = Vec::new();
    for (id, name, trend, f) in checks {
        let t = Instant::now();
        let (pass, detail) = match f(&run) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let line = Line { id, name, trend, pass, detail };
        println!(
            "{} {:>3}  {:<26} {} [{:.1}s]",
            if line.pass { "PASS" } else { "FAIL" },
            line.id,
            line.name,
            line.detail,
            t.elapsed().as_secs_f64()
        );
        lines.push(line);
    }
    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    println!("acceptance: {} of {} passed", lines.len() - failed.len(), lines.len());
    if failed.iter().any(|l| strict || !l.trend) {
        std::process::exit(1);
    }
}
