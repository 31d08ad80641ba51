//! Command-line harness for the identity-conditioned video model.
//!
//! Five subcommands cover the workflow end to end: `gen-data` materializes
//! the synthetic dataset, `train` runs stage A (base model) or stage B
//! (adapters only), `sample` renders a video from a reference image,
//! `ablate` trains and scores the three-variant comparison, and `bench`
//! reports analytic costs plus measured cache timings. Every command reads
//! the same sectioned `key = value` config and accepts repeated
//! `--set section.key=value` overrides.
//!
//! Commands print a human summary to stdout and append machine-readable
//! JSON lines to `<train.out_dir>/run.jsonl`. All randomness is seeded, so
//! rerunning a command reproduces its artifacts byte for byte; only `bench`
//! rows carry wall-clock fields.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 data or
//! I/O error, 4 numeric failure (non-finite loss or activation).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use refdit_core::data::{self, MOTION_CLASSES};
use refdit_core::dit::Model;
use refdit_core::error::{CoreError, Result};
use refdit_core::flow::{sample, NoiseSchedule};
use refdit_core::metrics::{bench_cache, count_flops, identity_similarity, ArchSpec};
use refdit_core::rng::Rng;
use refdit_core::runcfg::{RunConfig, Stage};
use refdit_core::stin;
use refdit_core::train::{
    checkpoint_path, load_training_set, run_ablation, run_training, AblationEvent,
};
use refdit_core::{Real, Tensor32};

/// Nearest-neighbor upscale factor for the preview image.
const PREVIEW_SCALE: usize = 8;

#[derive(Parser)]
#[command(
    name = "refdit",
    version,
    about = "Identity-conditioned miniature video diffusion: data, training, sampling, ablations, benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic identity-video dataset.
    GenData(CommonArgs),
    /// Train stage A (base model) or stage B (adapters), per `train.stage`.
    Train(CommonArgs),
    /// Sample a video from a reference image and a motion prompt.
    Sample(SampleArgs),
    /// Train and evaluate the full / no-adapter / no-position-mapping comparison.
    Ablate(CommonArgs),
    /// Write the analytic cost report plus measured cache timings.
    Bench(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run-configuration file; built-in defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.lr=0.002 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Reference image tensor (.stin): pixels `[ref_px, ref_px, 3]` or an
    /// already-pooled latent `[h_ref, w_ref, 3]`.
    #[arg(long = "ref", value_name = "PATH")]
    reference: PathBuf,
    /// Motion prompt: a class name (left, right, up, down, rotate-cw,
    /// rotate-ccw) or a numeric id.
    #[arg(long, value_name = "NAME|ID")]
    prompt: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Numeric(_) => 4,
        CoreError::Data(_) | CoreError::Io(_) | CoreError::Format(_) => 3,
        CoreError::Config(_) | CoreError::Invalid(_) | CoreError::Shape(_) | CoreError::Cache(_) => {
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(&load_config(&args)?),
        Cmd::Train(args) => cmd_train(&load_config(&args)?),
        Cmd::Sample(args) => {
            cmd_sample(&load_config(&args.common)?, &args.reference, &args.prompt)
        }
        Cmd::Ablate(args) => cmd_ablate(&load_config(&args)?),
        Cmd::Bench(args) => cmd_bench(&load_config(&args)?),
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &common.set {
        cfg.apply_set(assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Append-per-event JSON-lines log under the run directory. Each command
/// truncates and rewrites it, so a rerun leaves identical bytes.
struct RunLog {
    file: std::io::BufWriter<fs::File>,
}

impl RunLog {
    fn create(out_dir: &Path) -> Result<RunLog> {
        fs::create_dir_all(out_dir)?;
        let file = fs::File::create(out_dir.join("run.jsonl"))?;
        Ok(RunLog { file: std::io::BufWriter::new(file) })
    }

    fn row(&mut self, value: serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.file, &value)
            .map_err(|e| CoreError::Format(format!("log row: {e}")))?;
        writeln!(self.file)?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let root = PathBuf::from(&cfg.data.root);
    let manifest = data::make_dataset(&root, &cfg.to_data_config(), cfg.data.n, cfg.data.seed)?;
    let mut log = RunLog::create(Path::new(&cfg.train.out_dir))?;
    log.row(json!({
        "event": "dataset",
        "root": cfg.data.root,
        "n": manifest.n,
        "held_out": manifest.held_out_entries().count(),
        "config_hash": cfg.content_hash(),
    }))?;
    log.finish()?;
    let path = root.join("manifest.json");
    println!(
        "wrote {} samples ({} held out) under {}",
        manifest.n,
        manifest.held_out_entries().count(),
        root.display()
    );
    println!("manifest {}", path.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    if cfg.train.stage == Stage::B && cfg.ablation.disable_rsa {
        return Err(CoreError::Config(
            "ablation.disable_rsa removes the trainable adapters; stage B would have nothing to train"
                .into(),
        ));
    }
    let out_dir = PathBuf::from(&cfg.train.out_dir);
    let mut log = RunLog::create(&out_dir)?;
    log.row(json!({
        "event": "start",
        "command": "train",
        "stage": cfg.train.stage.to_string(),
        "config_hash": cfg.content_hash(),
    }))?;
    let every = cfg.train.log_every.max(1);
    let stage = cfg.train.stage;
    let summary = run_training::<Real>(cfg, &mut |step, loss| {
        if step % every == 0 {
            println!("stage {stage} step {step}: loss {loss:.6}");
            log.row(json!({
                "event": "loss",
                "stage": stage.to_string(),
                "step": step,
                "loss": loss,
            }))?;
        }
        Ok(())
    })?;
    log.row(json!({
        "event": "checkpoint",
        "stage": summary.stage,
        "path": summary.checkpoint.display().to_string(),
        "start_step": summary.start_step,
        "end_step": summary.end_step,
        "final_loss": summary.final_loss,
        "resumed": summary.resumed,
        "freeze_verified": summary.freeze_verified,
    }))?;
    log.finish()?;
    if let (Some(first), Some(last)) = (summary.first_loss, summary.final_loss) {
        println!(
            "stage {stage} steps {}..{}: loss {first:.6} -> {last:.6}",
            summary.start_step, summary.end_step
        );
    } else {
        println!("stage {stage}: nothing left to train (resumed at completion)");
    }
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}

fn resolve_prompt(prompt: &str, vocab: usize) -> Result<usize> {
    let id = match prompt.parse::<usize>() {
        Ok(v) => v,
        Err(_) => {
            MOTION_CLASSES.iter().position(|m| *m == prompt).ok_or_else(|| {
                CoreError::Config(format!(
                    "unknown prompt {prompt:?}; use a numeric id or one of {MOTION_CLASSES:?}"
                ))
            })?
        }
    };
    if id >= vocab {
        return Err(CoreError::Config(format!(
            "prompt id {id} is outside the model vocabulary of {vocab}"
        )));
    }
    Ok(id)
}

/// Accepts a reference either at pixel resolution (pooled here) or already
/// in latent space.
fn reference_to_latent(pixels: &Tensor32, cfg: &RunConfig) -> Result<Tensor32> {
    let m = &cfg.model;
    let latent = [m.h_ref, m.w_ref, m.channels];
    let full = [m.h_ref * cfg.data.pool, m.w_ref * cfg.data.pool, m.channels];
    if pixels.shape() == latent {
        Ok(pixels.clone())
    } else if pixels.shape() == full {
        data::downsample_latent(pixels, cfg.data.pool)
    } else {
        Err(CoreError::Invalid(format!(
            "reference shape {:?} matches neither pixel {full:?} nor latent {latent:?}",
            pixels.shape()
        )))
    }
}

/// Writes the sampled latent video as a row of frames, upscaled for
/// legibility, values clamped to [0, 1].
fn write_preview(path: &Path, video: &Tensor32) -> Result<()> {
    let (f, h, w, c) =
        (video.shape()[0], video.shape()[1], video.shape()[2], video.shape()[3]);
    let width = f * w * PREVIEW_SCALE;
    let height = h * PREVIEW_SCALE;
    let mut rgb = vec![0u8; width * height * 3];
    let data = video.data();
    for fi in 0..f {
        for y in 0..height {
            for x in 0..w * PREVIEW_SCALE {
                let (sy, sx) = (y / PREVIEW_SCALE, x / PREVIEW_SCALE);
                for ch in 0..3 {
                    let v = data[((fi * h + sy) * w + sx) * c + ch].clamp(0.0, 1.0);
                    rgb[(y * width + fi * w * PREVIEW_SCALE + x) * 3 + ch] =
                        (v * 255.0).round() as u8;
                }
            }
        }
    }
    stin::write_ppm(path, width, height, &rgb)
}

/// Newest-stage checkpoint: prefer tuned stage-B weights, fall back to the
/// stage-A base.
fn find_checkpoint(out_dir: &Path) -> Result<(PathBuf, Stage)> {
    for stage in [Stage::B, Stage::A] {
        let path = checkpoint_path(out_dir, stage);
        if path.exists() {
            return Ok((path, stage));
        }
    }
    Err(CoreError::Config(format!(
        "no checkpoint under {}; run `refdit train` first",
        out_dir.display()
    )))
}

fn zero_adapters(model: &mut Model<Real>) {
    model.weights.visit_mut(&mut |name, t| {
        if name.contains(".lora_") && name.ends_with(".B") {
            *t = Tensor32::zeros(t.shape());
        }
    });
}

fn cmd_sample(cfg: &RunConfig, reference: &Path, prompt: &str) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.train.out_dir);
    let (ckpt, ckpt_stage) = find_checkpoint(&out_dir)?;
    let mut model = Model::<Real>::load(&ckpt)?;
    if model.cfg != cfg.model {
        return Err(CoreError::Config(format!(
            "checkpoint {} was built with a different model configuration",
            ckpt.display()
        )));
    }
    if cfg.ablation.disable_rsa {
        zero_adapters(&mut model);
    }
    let prompt_id = resolve_prompt(prompt, cfg.model.prompt_vocab)?;
    let ref_pixels = stin::read_tensor(reference)?;
    let ref_latent = reference_to_latent(&ref_pixels, cfg)?;
    let schedule = NoiseSchedule::uniform(cfg.sampler.steps)?;
    let mut rng = Rng::new(cfg.sampler.seed);
    let video = sample(
        &model,
        Some(&ref_latent),
        &[prompt_id],
        &schedule,
        &mut rng,
        cfg.sampler.use_cache,
        None,
    )?;

    let dir = out_dir.join("sample");
    fs::create_dir_all(&dir)?;
    let latent_path = dir.join("latent.stin");
    let preview_path = dir.join("preview.ppm");
    stin::write_tensor(&latent_path, &video)?;
    write_preview(&preview_path, &video)?;
    // Informative only: fails (e.g. an all-white reference) without failing
    // the command.
    let similarity = identity_similarity(&ref_latent, &video).ok();
    let manifest = json!({
        "checkpoint": ckpt.display().to_string(),
        "checkpoint_stage": ckpt_stage.to_string(),
        "reference": reference.display().to_string(),
        "prompt_id": prompt_id,
        "prompt_name": MOTION_CLASSES.get(prompt_id),
        "seed": cfg.sampler.seed,
        "steps": cfg.sampler.steps,
        "use_cache": cfg.sampler.use_cache,
        "position_mapping": model.cpm,
        "adapters_removed": cfg.ablation.disable_rsa,
        "identity_similarity": similarity,
        "outputs": { "latent": latent_path.display().to_string(),
                     "preview": preview_path.display().to_string() },
    });
    let manifest_path = dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| CoreError::Format(format!("manifest: {e}")))?
            + "\n",
    )?;
    let mut log = RunLog::create(&out_dir)?;
    log.row(json!({
        "event": "sample",
        "config_hash": cfg.content_hash(),
        "manifest": manifest_path.display().to_string(),
        "prompt_id": prompt_id,
        "identity_similarity": similarity,
    }))?;
    log.finish()?;
    println!("latent  {latent_path}", latent_path = latent_path.display());
    println!("preview {preview_path}", preview_path = preview_path.display());
    if let Some(sim) = similarity {
        println!("identity similarity vs reference: {sim:.4}");
    }
    println!("manifest {}", manifest_path.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.train.out_dir);
    let base_path = checkpoint_path(&out_dir, Stage::A);
    if !base_path.exists() {
        return Err(CoreError::Config(format!(
            "the comparison starts from a stage-A checkpoint at {}; run `refdit train --set train.stage=A` first",
            base_path.display()
        )));
    }
    let base = Model::<Real>::load(&base_path)?;
    if base.cfg != cfg.model {
        return Err(CoreError::Config(
            "stage-A checkpoint was built with a different model configuration".into(),
        ));
    }
    let (train_items, eval_items) = load_training_set::<Real>(cfg)?;
    let mut log = RunLog::create(&out_dir)?;
    log.row(json!({
        "event": "start",
        "command": "ablate",
        "config_hash": cfg.content_hash(),
        "seeds": cfg.ablation.seeds,
    }))?;
    let every = cfg.train.log_every.max(1);
    let report = run_ablation(cfg, &base, &train_items, &eval_items, &mut |ev| {
        match ev {
            AblationEvent::StageBStep { variant, seed_index, step, loss } => {
                if step % every == 0 {
                    println!("{variant} seed {seed_index} step {step}: loss {loss:.6}");
                    log.row(json!({
                        "event": "loss",
                        "variant": variant,
                        "seed_index": seed_index,
                        "step": step,
                        "loss": loss,
                    }))?;
                }
            }
            AblationEvent::Eval { variant, seed_index, similarity } => {
                println!("{variant} seed {seed_index}: held-out similarity {similarity:.4}");
                log.row(json!({
                    "event": "eval",
                    "variant": variant,
                    "seed_index": seed_index,
                    "similarity": similarity,
                }))?;
            }
        }
        Ok(())
    })?;
    let report_path = out_dir.join("ablation.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report)
            .map_err(|e| CoreError::Format(format!("report: {e}")))?
            + "\n",
    )?;
    for row in &report.rows {
        println!(
            "{variant:<12} median {median:.4}  per-seed {per_seed:?}",
            variant = row.variant,
            median = row.median,
            per_seed = row.per_seed
        );
        log.row(json!({
            "event": "row",
            "variant": row.variant,
            "median": row.median,
            "per_seed": row.per_seed,
        }))?;
    }
    log.finish()?;
    println!("report {}", report_path.display());
    Ok(())
}

/// Flattens a serialized struct into `{name, value, spec_hash, version}`
/// report rows.
fn report_rows(
    prefix: &str,
    value: &serde_json::Value,
    spec_hash: &str,
    out: &mut Vec<serde_json::Value>,
) {
    let obj = value.as_object().expect("reports serialize to objects");
    for (k, v) in obj {
        out.push(json!({
            "name": format!("{prefix}.{k}"),
            "value": v,
            "spec_hash": spec_hash,
            "version": env!("CARGO_PKG_VERSION"),
        }));
    }
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.train.out_dir);
    let (ckpt, _) = find_checkpoint(&out_dir)?;
    let model = Model::<Real>::load(&ckpt)?;
    if model.cfg != cfg.model {
        return Err(CoreError::Config(format!(
            "checkpoint {} was built with a different model configuration",
            ckpt.display()
        )));
    }
    let spec_hash = cfg.content_hash();
    let spec = ArchSpec::from_model_config(&cfg.model, cfg.sampler.steps as u64);
    let configured = count_flops(&spec)?;
    let reference_scale = count_flops(&ArchSpec::production_scale())?;

    // Timing probe: a rendered reference at dataset geometry, pooled to
    // latent space.
    let identity = data::generate_identity(cfg.data.seed, cfg.data.glyph_px)?;
    let ref_pixels = data::render_reference(&identity, cfg.data.ref_px, cfg.data.ref_px)?;
    let ref_latent = data::downsample_latent(&ref_pixels, cfg.data.pool)?;
    let schedule = NoiseSchedule::uniform(cfg.sampler.steps)?;
    let timings = bench_cache(&model, &ref_latent, &[0], &schedule, 5)?;

    let mut rows = Vec::new();
    let to_value = |e: serde_json::Result<serde_json::Value>| {
        e.map_err(|e| CoreError::Format(format!("report: {e}")))
    };
    report_rows("model", &to_value(serde_json::to_value(&configured))?, &spec_hash, &mut rows);
    report_rows(
        "reference_scale",
        &to_value(serde_json::to_value(&reference_scale))?,
        &spec_hash,
        &mut rows,
    );
    report_rows("bench", &to_value(serde_json::to_value(&timings))?, &spec_hash, &mut rows);

    fs::create_dir_all(&out_dir)?;
    let report_path = out_dir.join("report.jsonl");
    let mut text = String::new();
    for row in &rows {
        text.push_str(
            &serde_json::to_string(row).map_err(|e| CoreError::Format(format!("report: {e}")))?,
        );
        text.push('\n');
    }
    fs::write(&report_path, text)?;

    let mut log = RunLog::create(&out_dir)?;
    log.row(json!({
        "event": "bench",
        "config_hash": spec_hash,
        "report": report_path.display().to_string(),
    }))?;
    log.finish()?;

    println!(
        "configured model: {} params ({} trainable), branch overhead {:.2}% uncached / {:.3}% cached",
        configured.total_params,
        configured.trainable_params,
        configured.overhead_uncached * 100.0,
        configured.overhead_cached * 100.0
    );
    println!(
        "reference scale: {} params ({} trainable), branch overhead {:.2}% uncached / {:.3}% cached",
        reference_scale.total_params,
        reference_scale.trainable_params,
        reference_scale.overhead_uncached * 100.0,
        reference_scale.overhead_cached * 100.0
    );
    println!(
        "sampling: cached {:.1} ms vs uncached {:.1} ms median over {} reps",
        timings.cached_median_ms, timings.uncached_median_ms, timings.reps
    );
    println!("report {}", report_path.display());
    Ok(())
}
