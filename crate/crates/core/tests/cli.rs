use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use vista_core::checkpoint::{file_hash, Checkpoint};
use vista_core::eval::MetricReport;
use vista_core::param::Role;
use vista_core::pipeline::{load_model, read_generated, FirstFrame, StorySpec};
use vista_core::story::{read_run_log, sample_base_only};

const TINY: &[&str] = &[
    "stage0_steps=8",
    "stage0_batch=8",
    "stage1_steps=6",
    "stage1_batch=4",
    "stage2_steps=6",
    "stage2_batch=4",
    "checkpoint_every=3",
    "sampler_steps=4",
    "gen_batch=2",
    "log_every=0",
];

fn vista(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vista"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("VISTA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vista(args);
    assert!(
        out.status.success(),
        "vista {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_sets<'a>(mut args: Vec<&'a str>, sets: &[&'a str]) -> Vec<&'a str> {
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    args
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn base(&self) -> PathBuf {
        self.root.join("pre/base.ckpt")
    }
    fn model(&self) -> PathBuf {
        self.root.join("ad/model.ckpt")
    }
}

/// gen-data, pretrain and train-adapter at toy scale, shared by the tests.
fn trained() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        ok(&["gen-data", "--seed", "4", "--stories", "12", "--test-stories", "3", "--frames", "4", "--out", p(&corpus)]);
        let pre = root.join("pre");
        ok(&with_sets(vec!["pretrain", "--corpus", p(&corpus), "--out", p(&pre)], TINY));
        let ad = root.join("ad");
        let out = ok(&["train-adapter", "--corpus", p(&corpus), "--base", p(&pre.join("base.ckpt")), "--out", p(&ad)]);
        fs::write(root.join("train-adapter.txt"), out).unwrap();
        Run { _dir: dir, root }
    })
}

#[test]
fn gen_data_is_reproducible_and_guards_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| vec!["gen-data", "--seed", "9", "--stories", "20", "--test-stories", "4", "--frames", "8", "--out"]
        .into_iter()
        .map(String::from)
        .chain([out.to_str().unwrap().to_string()])
        .collect::<Vec<_>>();
    let run = |out: &Path| {
        let v = args(out);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let sa = run(&a);
    assert!(sa.contains("stories train=20 test=4 frames=8"), "{sa}");
    assert!(sa.contains("tuples train=140 test=28"), "{sa}");
    let sb = run(&b);
    assert_eq!(sa, sb);
    assert_eq!(fs::read(a.join("stories.bin")).unwrap(), fs::read(b.join("stories.bin")).unwrap());

    let v = args(&a);
    let again = vista(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(again.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let mut forced: Vec<&str> = v.iter().map(String::as_str).collect();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    ok(&["gen-data", "--stories", "2", "--test-stories", "1", "--frames", "3", "--out", p(&corpus)]);
    let out = vista(&["pretrain", "--corpus", p(&corpus), "--out", p(&dir.path().join("o")), "--set", "lamda=0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "guidance = loud\n").unwrap();
    let out = vista(&["pretrain", "--corpus", p(&corpus), "--out", p(&dir.path().join("o2")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_runs_are_self_describing_and_keep_the_base_frozen() {
    let r = trained();
    let printed = fs::read_to_string(r.root.join("train-adapter.txt")).unwrap();
    let hashes: Vec<&str> = printed
        .lines()
        .filter(|l| l.starts_with("base role sha256"))
        .map(|l| l.split_whitespace().last().unwrap())
        .collect();
    assert_eq!(hashes.len(), 2);
    assert_eq!(hashes[0], hashes[1]);
    let counts: Vec<usize> = printed
        .lines()
        .find(|l| l.starts_with("trainable params"))
        .unwrap()
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    assert!(counts[0] * 2 < counts[1], "{counts:?}");

    let (base, _, base_hash) = load_model(&r.base()).unwrap();
    let (full, cfg, _) = load_model(&r.model()).unwrap();
    assert_eq!(base_hash, file_hash(&r.base()).unwrap());
    assert_eq!(base.store.role_hash(Role::Base), full.store.role_hash(Role::Base));
    assert_eq!(base.store.role_hash(Role::Encoder), full.store.role_hash(Role::Encoder));
    assert_ne!(base.store.role_hash(Role::Adapter), full.store.role_hash(Role::Adapter));
    assert_eq!(cfg.stage1_steps, 6);
    for f in ["config.txt", "stage0_loss.csv", "stage1_loss.csv", "summary.json", "checkpoints/base-000003.ckpt"] {
        assert!(r.root.join("pre").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(r.root.join("ad/stage2_loss.csv")).unwrap().lines().count(), 7);

    let bytes = fs::read(r.model()).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
}

fn story_file(dir: &Path, corpus_story: Option<u32>) -> PathBuf {
    let (c, _) = vista_core::dataset::Corpus::load(&trained().corpus()).unwrap();
    let s = c.story(13).unwrap();
    let spec = StorySpec {
        id: 13,
        prompts: s.frames.iter().map(|f| f.caption.clone()).collect(),
        first_frame: corpus_story.map(FirstFrame::Corpus),
    };
    let path = dir.join("stories.json");
    fs::write(&path, serde_json::to_string(&vec![spec]).unwrap()).unwrap();
    path
}

#[test]
fn generate_writes_frames_and_salience_logs() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let sf = story_file(dir.path(), Some(13));
    let out = dir.path().join("gen");
    let printed = ok(&["generate", "--ckpt", p(&r.model()), "--corpus", p(&r.corpus()), "--story-file", p(&sf), "--seed", "3", "--out", p(&out)]);
    assert!(printed.contains("stories 1 generated frames 3 salience records 3"), "{printed}");
    let log = read_run_log(&fs::read_to_string(out.join("salience.jsonl")).unwrap()).unwrap();
    assert_eq!(log.iter().map(|r| r.frame).collect::<Vec<_>>(), vec![1, 2, 3]);
    let (gm, stories) = read_generated(&out).unwrap();
    assert_eq!(stories[0].images.len(), 4);
    assert!(gm.config.contains("sample_seed = 3"));
    let ppm = fs::read(out.join("preview.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n133 34\n255\n"));

    let again = dir.path().join("again");
    ok(&["generate", "--ckpt", p(&r.model()), "--corpus", p(&r.corpus()), "--story-file", p(&sf), "--seed", "3", "--out", p(&again)]);
    assert_eq!(fs::read(out.join("frames.bin")).unwrap(), fs::read(again.join("frames.bin")).unwrap());
}

#[test]
fn missing_first_frame_is_a_data_error() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let sf = story_file(dir.path(), None);
    let out = vista(&["generate", "--ckpt", p(&r.model()), "--corpus", p(&r.corpus()), "--story-file", p(&sf), "--out", p(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("first frame"));
}

#[test]
fn lambda_zero_generation_is_base_only_sampling() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g0");
    ok(&["generate", "--ckpt", p(&r.model()), "--corpus", p(&r.corpus()), "--test-stories", "2", "--lambda", "0", "--seed", "5", "--out", p(&out)]);
    let (_, stories) = read_generated(&out).unwrap();
    let (model, cfg, _) = load_model(&r.model()).unwrap();
    let mut sampler = cfg.sampler();
    sampler.seed = 5;
    for k in 1..4 {
        let prompts: Vec<&str> = stories.iter().map(|s| s.prompts[k].as_str()).collect();
        let seeds: Vec<_> = stories.iter().map(|s| (5, s.id, k)).collect();
        let base = sample_base_only(&model, &prompts, &seeds, &sampler).unwrap();
        for (s, im) in stories.iter().zip(&base) {
            assert!(s.images[k].data().iter().zip(im.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn ground_truth_evaluation_closes_the_loop() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gt");
    ok(&["generate", "--corpus", p(&r.corpus()), "--test-stories", "3", "--ground-truth", "--out", p(&out)]);
    let report = dir.path().join("gt.json");
    ok(&["evaluate", "--generated", p(&out), "--corpus", p(&r.corpus()), "--ckpt", p(&r.model()), "--report", p(&report)]);
    let rep: MetricReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep.tifa, 1.0);
    assert_eq!(rep.frames, 9);
    assert!(rep.fid.abs() < 1e-6, "fid {}", rep.fid);
    assert!((rep.clip_i - 1.0).abs() < 1e-6);
    let report2 = dir.path().join("gt2.json");
    ok(&["evaluate", "--generated", p(&out), "--corpus", p(&r.corpus()), "--ckpt", p(&r.model()), "--report", p(&report2)]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&report2).unwrap());

    let out = vista(&["evaluate", "--generated", p(&out), "--corpus", p(&r.corpus()), "--report", p(&report2)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_version_mismatch_fails_loudly() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = fs::read(r.model()).unwrap();
    bytes[4] = 7;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = vista(&["generate", "--ckpt", p(&bad), "--corpus", p(&r.corpus()), "--test-stories", "1", "--out", p(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));
}
