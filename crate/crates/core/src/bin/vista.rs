use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vista_core::config::Config;
use vista_core::dataset::{Corpus, Split};
use vista_core::pipeline::{self, GenerateOptions};
use vista_core::{Result, VistaError};

#[derive(Parser)]
#[command(name = "vista", about = "Desk-scale visual story continuation", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic story corpus.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        stories: usize,
        #[arg(long, default_value_t = 200)]
        test_stories: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the encoders and the base denoiser.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` config override, repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Train the fusion model and history adapter on a frozen base.
    TrainAdapter {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Continue stories from their first real frame.
    Generate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// JSON array of `{id, prompts, first_frame}`.
        #[arg(long, conflicts_with = "test_stories")]
        story_file: Option<PathBuf>,
        /// Use the first N test stories of the corpus.
        #[arg(long)]
        test_stories: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// salient, all-mean or text-masked.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Write ground-truth renders instead of sampling.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a generation directory.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Encoder checkpoint; defaults to the one that generated the frames.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
}

fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let base = match file {
        Some(p) => Config::parse(&std::fs::read_to_string(p)?)?,
        None => Config::default(),
    };
    base.with_overrides(overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            seed,
            stories,
            test_stories,
            frames,
            out,
            force,
        } => {
            let m = pipeline::gen_data(seed, stories, test_stories, frames, &out, force)?;
            let (corpus, _) = Corpus::load(&out)?;
            println!("stories train={} test={} frames={}", m.train_stories, m.test_stories, m.frames_per_story);
            println!(
                "tuples train={} test={}",
                pipeline::tuple_count(&corpus, Split::Train),
                pipeline::tuple_count(&corpus, Split::Test)
            );
            println!("corpus sha256 {}", m.data_sha256);
        }
        Cmd::Pretrain {
            corpus,
            out,
            config,
            overrides,
            force,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let s = pipeline::pretrain(&corpus, &out, &cfg, force)?;
            for st in &s.stages {
                println!("{} steps={} loss {:.4} -> {:.4} ({:.0}s)", st.stage, st.steps, st.loss_first, st.loss_last, st.seconds);
            }
            println!("base params {}", s.base_params);
            println!("checkpoint sha256 {}", s.checkpoint_hash);
        }
        Cmd::TrainAdapter {
            corpus,
            base,
            out,
            config,
            overrides,
            force,
        } => {
            let s = pipeline::train_adapter_stage(&corpus, &base, &out, config.as_deref(), &overrides, force)?;
            println!("trainable params {} (base {})", s.trainable_params, s.base_params);
            for st in &s.stages {
                println!("{} steps={} loss {:.4} -> {:.4} ({:.0}s)", st.stage, st.steps, st.loss_first, st.loss_last, st.seconds);
            }
            println!("base role sha256 before {}", s.base_role_hash_before);
            println!("base role sha256 after  {}", s.base_role_hash_after);
            println!("checkpoint sha256 {}", s.checkpoint_hash);
        }
        Cmd::Generate {
            ckpt,
            corpus,
            story_file,
            test_stories,
            seed,
            lambda,
            mode,
            overrides,
            ground_truth,
            out,
            force,
        } => {
            let (specs, dir) = match (&story_file, test_stories) {
                (Some(p), _) => (
                    pipeline::read_story_file(p)?,
                    p.parent().map(Path::to_path_buf).unwrap_or_default(),
                ),
                (None, Some(n)) => (pipeline::test_story_specs(&Corpus::load(&corpus)?.0, n), PathBuf::new()),
                (None, None) => return Err(VistaError::Config("generate needs --story-file or --test-stories".into())),
            };
            let opts = GenerateOptions {
                seed,
                lambda,
                mode,
                overrides,
                ground_truth,
                force,
            };
            let (gm, records) = pipeline::generate(ckpt.as_deref(), &corpus, &specs, &dir, &out, &opts)?;
            let frames: usize = gm.stories.iter().map(|s| s.prompts.len() - 1).sum();
            println!("stories {} generated frames {} salience records {}", gm.stories.len(), frames, records.len());
            println!("frames sha256 {}", gm.frames_sha256);
        }
        Cmd::Evaluate {
            generated,
            corpus,
            ckpt,
            report,
        } => {
            let r = pipeline::evaluate(&generated, &corpus, ckpt.as_deref(), &report)?;
            println!(
                "frames {} tifa {:.4} clip_t {:.4} clip_i {:.4} clip_i_ref {:.4} fid {:.4}{}",
                r.frames,
                r.tifa,
                r.clip_t,
                r.clip_i,
                r.clip_i_ref,
                r.fid,
                if r.fid_regularized { " (regularized)" } else { "" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("VISTA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
