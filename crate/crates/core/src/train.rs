//! Two-stage training, checkpointing, evaluation, and the ablation driver.
//!
//! Stage A pretrains the full video model on reference-free batches — the
//! image-stream adapters receive no gradient there because no image tokens
//! exist, so the checkpoint carries them at their zero-initialized no-op
//! state. Stage B attaches references and optimizes only the adapters;
//! everything else is frozen, and the freeze is verified by hashing the
//! non-adapter tensors before and after the run.
//!
//! Reproducibility: every stochastic choice at step `k` (batch indices, path
//! positions, noise draws) comes from an independent substream keyed by the
//! stage seed and `k`, never from a sequential generator. Resuming from a
//! checkpoint at step `k` therefore reproduces the continuous run's step-`k`
//! batch — and its loss — exactly. Optimizer moments are not checkpointed:
//! a resumed run re-accumulates them, which alters later updates slightly
//! but never the first resumed step's loss.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{load_manifest, load_sample};
use crate::dit::{is_trainable, GradMap, Model, TrainScope, Weights};
use crate::error::{CoreError, Result};
use crate::flow::{sample, training_loss, NoiseSchedule, TrainBatch, TrainItem};
use crate::metrics::identity_similarity;
use crate::rng::{gaussian, substream, Rng};
use crate::runcfg::{RunConfig, Stage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam defaults; the betas follow the documented training recipe and are
/// deliberately not configurable.
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Seed-derivation tags (see module docs): stages draw from disjoint
/// substreams of `train.seed`.
const TAG_INIT: u64 = 12;
const TAG_STAGE_A: u64 = 10;
const TAG_STAGE_B: u64 = 11;

/// Adam optimizer over named weight tensors. Moments are allocated lazily
/// per gradient entry; weights whose gradient is absent from a step's map
/// (structurally zero or out of scope) are left untouched.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    lr: f64,
    step_count: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, step_count: 0, moments: BTreeMap::new() }
    }

    /// Applies one update from `grads`. Every gradient name must match a
    /// weight tensor of the same shape.
    pub fn step(&mut self, weights: &mut Weights<T>, grads: &GradMap<T>) -> Result<()> {
        self.step_count += 1;
        let c1 = 1.0 - BETA1.powi(self.step_count as i32);
        let c2 = 1.0 - BETA2.powi(self.step_count as i32);
        let mut applied = 0usize;
        let mut err: Option<CoreError> = None;
        weights.visit_mut(&mut |name, w| {
            if err.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else {
                return;
            };
            if g.shape() != w.shape() {
                err = Some(CoreError::Shape(format!(
                    "gradient for {name} has shape {:?}, weight has {:?}",
                    g.shape(),
                    w.shape()
                )));
                return;
            }
            applied += 1;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(w.shape()), Tensor::zeros(w.shape())));
            let gd = g.data();
            let mut md = m.data().to_vec();
            let mut vd = v.data().to_vec();
            let mut wd = w.data().to_vec();
            for i in 0..gd.len() {
                let gi = gd[i].as_f64();
                let mi = BETA1 * md[i].as_f64() + (1.0 - BETA1) * gi;
                let vi = BETA2 * vd[i].as_f64() + (1.0 - BETA2) * gi * gi;
                md[i] = T::of(mi);
                vd[i] = T::of(vi);
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
                wd[i] = T::of(wd[i].as_f64() - update);
            }
            *m = Tensor::new(w.shape(), md).expect("moment keeps weight shape");
            *v = Tensor::new(w.shape(), vd).expect("moment keeps weight shape");
            *w = Tensor::new(w.shape(), wd).expect("update keeps weight shape");
        });
        if let Some(e) = err {
            return Err(e);
        }
        if applied != grads.len() {
            return Err(CoreError::Invalid(format!(
                "{} gradient entries matched no weight tensor",
                grads.len() - applied
            )));
        }
        Ok(())
    }
}

/// One training/evaluation sample in latent space.
#[derive(Debug, Clone)]
pub struct LatentSample<T: Scalar> {
    /// Clean video latent `[F, h_lat, w_lat, c]`.
    pub x0: Tensor<T>,
    /// Reference latent `[h_ref, w_ref, c]`.
    pub ref_latent: Tensor<T>,
    pub prompt_ids: Vec<usize>,
}

/// Loads the dataset under `cfg.data.root` into latent space and splits it
/// into (training, held-out) by the manifest's identity split. Fails if the
/// on-disk generation parameters disagree with the run config.
pub fn load_training_set<T: Scalar>(
    cfg: &RunConfig,
) -> Result<(Vec<LatentSample<T>>, Vec<LatentSample<T>>)> {
    let root = Path::new(&cfg.data.root);
    let manifest = load_manifest(root)?;
    let expect = cfg.to_data_config();
    if manifest.config != expect {
        return Err(CoreError::Config(format!(
            "dataset at {} was generated with {:?}, run config expects {:?}",
            root.display(),
            manifest.config,
            expect
        )));
    }
    if manifest.n != cfg.data.n {
        return Err(CoreError::Config(format!(
            "dataset has {} samples, run config expects {}",
            manifest.n, cfg.data.n
        )));
    }
    if cfg.model.prompt_len != 1 {
        return Err(CoreError::Config(
            "the synthetic pipeline emits exactly one prompt token per sample".into(),
        ));
    }
    let m = &cfg.model;
    let video_shape = [m.frames, m.h_lat, m.w_lat, m.channels];
    let ref_shape = [m.h_ref, m.w_ref, m.channels];
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for entry in &manifest.entries {
        let loaded = load_sample(root, entry)?;
        if loaded.meta.prompt_id >= m.prompt_vocab {
            return Err(CoreError::Config(format!(
                "sample {} uses prompt id {}, model vocabulary is {}",
                entry.id, loaded.meta.prompt_id, m.prompt_vocab
            )));
        }
        let x0 = crate::data::downsample_latent(&loaded.video, cfg.data.pool)?.cast::<T>();
        let ref_latent =
            crate::data::downsample_latent(&loaded.reference, cfg.data.pool)?.cast::<T>();
        if x0.shape() != video_shape || ref_latent.shape() != ref_shape {
            return Err(CoreError::Data(format!(
                "sample {} latents have shapes {:?}/{:?}, expected {video_shape:?}/{ref_shape:?}",
                entry.id,
                x0.shape(),
                ref_latent.shape()
            )));
        }
        let item =
            LatentSample { x0, ref_latent, prompt_ids: vec![loaded.meta.prompt_id] };
        if entry.held_out {
            held_out.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, held_out))
}

/// Draws one batch: indices uniform with replacement, path positions
/// strictly inside (0,1), and fresh noise per item.
fn assemble_batch<T: Scalar>(
    items: &[LatentSample<T>],
    batch: usize,
    with_ref: bool,
    rng: &mut Rng,
) -> Result<TrainBatch<T>> {
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let idx = rng.below(items.len() as u64) as usize;
        let it = &items[idx];
        let s = loop {
            let v = rng.next_f64();
            if v > 0.0 {
                break v;
            }
        };
        let eps = gaussian(rng, it.x0.shape())?;
        out.push(TrainItem {
            x0: it.x0.clone(),
            ref_latent: with_ref.then(|| it.ref_latent.clone()),
            prompt_ids: it.prompt_ids.clone(),
            s,
            eps,
        });
    }
    Ok(TrainBatch { items: out })
}

/// Options for one stage run over `steps` (a resume passes a nonzero start).
#[derive(Debug, Clone)]
pub struct StageOpts<'a> {
    pub stage: Stage,
    pub steps: Range<usize>,
    pub batch: usize,
    pub lr: f64,
    /// Stage seed; step `k` draws from `substream(seed, k)`.
    pub seed: u64,
    /// Intermediate-checkpoint cadence; 0 disables.
    pub checkpoint_every: usize,
    /// Directory for intermediate checkpoints (required when cadence > 0).
    pub checkpoint_dir: Option<&'a Path>,
}

fn stage_tag(stage: Stage) -> &'static str {
    match stage {
        Stage::A => "a",
        Stage::B => "b",
    }
}

/// Final checkpoint path for a stage.
pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("stage_{}.stin", stage_tag(stage)))
}

fn intermediate_path(dir: &Path, stage: Stage, step: usize) -> PathBuf {
    dir.join(format!("stage_{}_step{step:06}.stin", stage_tag(stage)))
}

/// Newest intermediate checkpoint of `stage` in `dir`, with its step.
pub fn latest_intermediate(dir: &Path, stage: Stage) -> Result<Option<(PathBuf, usize)>> {
    let prefix = format!("stage_{}_step", stage_tag(stage));
    let mut best: Option<(PathBuf, usize)> = None;
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(None),
    };
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix(&prefix) else { continue };
        let Some(digits) = rest.strip_suffix(".stin") else { continue };
        let Ok(step) = digits.parse::<usize>() else { continue };
        if best.as_ref().is_none_or(|(_, s)| step > *s) {
            best = Some((entry.path(), step));
        }
    }
    Ok(best)
}

/// Runs one training stage in place. Stage A optimizes everything reachable
/// on reference-free batches; stage B optimizes only the adapters on
/// reference-conditioned batches and verifies the freeze by hash.
/// `on_step(step, loss)` fires for every step, in order.
pub fn train_stage<T: Scalar>(
    model: &mut Model<T>,
    items: &[LatentSample<T>],
    opts: &StageOpts<'_>,
    on_step: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<()> {
    if items.is_empty() {
        return Err(CoreError::Data("training set is empty".into()));
    }
    if opts.batch == 0 {
        return Err(CoreError::Config("batch size must be positive".into()));
    }
    let (scope, with_ref) = match opts.stage {
        Stage::A => (TrainScope::All, false),
        Stage::B => (TrainScope::LoraOnly, true),
    };
    let frozen = |name: &str| !is_trainable(TrainScope::LoraOnly, name);
    let frozen_before =
        (opts.stage == Stage::B).then(|| digest_weights(&model.weights, &frozen));
    let mut adam = Adam::new(opts.lr);
    for step in opts.steps.clone() {
        let mut rng = Rng::new(substream(opts.seed, step as u64));
        let batch = assemble_batch(items, opts.batch, with_ref, &mut rng)?;
        let (loss, grads) = training_loss(model, &batch, scope)?;
        if !loss.as_f64().is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite loss {} at stage-{} step {step} (lr {}, batch {}, seed {})",
                loss.as_f64(),
                opts.stage,
                opts.lr,
                opts.batch,
                opts.seed
            )));
        }
        adam.step(&mut model.weights, &grads)?;
        on_step(step, loss.as_f64())?;
        if opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 {
            let dir = opts.checkpoint_dir.ok_or_else(|| {
                CoreError::Config("checkpoint cadence set without a directory".into())
            })?;
            model.save(&intermediate_path(dir, opts.stage, step + 1))?;
        }
    }
    if let Some(before) = frozen_before {
        let after = digest_weights(&model.weights, &frozen);
        if before != after {
            return Err(CoreError::Invalid(
                "stage-B freeze violated: non-adapter weights changed".into(),
            ));
        }
    }
    Ok(())
}

/// SHA-256 over the name, shape, and exact bit pattern of every weight
/// tensor accepted by `filter`, in canonical order. Hex-encoded.
pub fn digest_weights<T: Scalar>(weights: &Weights<T>, filter: &dyn Fn(&str) -> bool) -> String {
    let mut hasher = Sha256::new();
    weights.visit(&mut |name, t| {
        if !filter(name) {
            return;
        }
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            hasher.update(v.bits().to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Summary of a [`run_training`] invocation.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub stage: String,
    pub checkpoint: PathBuf,
    pub start_step: usize,
    pub end_step: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub resumed: bool,
    /// Stage B only: the non-adapter tensors hashed identically before and
    /// after training (enforced; a violation aborts the run).
    pub freeze_verified: bool,
}

/// End-to-end training command: loads the dataset, initializes or loads the
/// model for `cfg.train.stage`, trains, and writes the final checkpoint to
/// `cfg.train.out_dir`. Stage B starts from the stage-A checkpoint and
/// honors `ablation.disable_cpm` as its retraining flag.
pub fn run_training<T: Scalar>(
    cfg: &RunConfig,
    on_step: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_items, _) = load_training_set::<T>(cfg)?;
    let out_dir = Path::new(&cfg.train.out_dir);
    std::fs::create_dir_all(out_dir)?;
    let stage = cfg.train.stage;
    let (total_steps, stage_seed) = match stage {
        Stage::A => (cfg.train.steps_a, substream(cfg.train.seed, TAG_STAGE_A)),
        Stage::B => (cfg.train.steps_b, substream(cfg.train.seed, TAG_STAGE_B)),
    };

    let mut resumed = false;
    let mut start_step = 0usize;
    let mut model: Model<T> = match stage {
        Stage::A => Model::init(cfg.model.clone(), true, substream(cfg.train.seed, TAG_INIT))?,
        Stage::B => {
            let base_path = checkpoint_path(out_dir, Stage::A);
            if !base_path.exists() {
                return Err(CoreError::Config(format!(
                    "stage B requires a stage-A checkpoint at {}; run stage A first",
                    base_path.display()
                )));
            }
            let mut m = Model::load(&base_path)?;
            m.cpm = !cfg.ablation.disable_cpm;
            m
        }
    };
    if cfg.train.resume {
        if let Some((path, step)) = latest_intermediate(out_dir, stage)? {
            if step > total_steps {
                return Err(CoreError::Config(format!(
                    "checkpoint {} is past the configured {} steps",
                    path.display(),
                    total_steps
                )));
            }
            model = Model::load(&path)?;
            start_step = step;
            resumed = true;
        }
    }
    if model.cfg != cfg.model {
        return Err(CoreError::Config(
            "checkpoint was built with a different model configuration".into(),
        ));
    }

    let mut first_loss = None;
    let mut final_loss = None;
    let opts = StageOpts {
        stage,
        steps: start_step..total_steps,
        batch: cfg.train.batch,
        lr: cfg.train.lr,
        seed: stage_seed,
        checkpoint_every: cfg.train.checkpoint_every,
        checkpoint_dir: Some(out_dir),
    };
    train_stage(&mut model, &train_items, &opts, &mut |step, loss| {
        if first_loss.is_none() {
            first_loss = Some(loss);
        }
        final_loss = Some(loss);
        on_step(step, loss)
    })?;
    let checkpoint = checkpoint_path(out_dir, stage);
    model.save(&checkpoint)?;
    Ok(TrainSummary {
        stage: stage.to_string(),
        checkpoint,
        start_step,
        end_step: total_steps,
        first_loss,
        final_loss,
        resumed,
        freeze_verified: stage == Stage::B,
    })
}

/// Mean identity similarity of videos sampled for `samples` (up to `limit`;
/// 0 means all). Sample `i` always draws its noise from `substream(seed, i)`
/// so different model variants are compared on identical noise.
pub fn eval_identity<T: Scalar>(
    model: &Model<T>,
    samples: &[LatentSample<T>],
    steps: usize,
    seed: u64,
    use_cache: bool,
    limit: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::Invalid("no evaluation samples".into()));
    }
    let n = if limit == 0 { samples.len() } else { limit.min(samples.len()) };
    let schedule = NoiseSchedule::uniform(steps)?;
    let mut total = 0.0;
    for (i, s) in samples[..n].iter().enumerate() {
        let mut rng = Rng::new(substream(seed, i as u64));
        let video = sample(
            model,
            Some(&s.ref_latent),
            &s.prompt_ids,
            &schedule,
            &mut rng,
            use_cache,
            None,
        )?;
        total += identity_similarity(&s.ref_latent, &video)?;
    }
    Ok(total / n as f64)
}

/// Progress events emitted by [`run_ablation`].
#[derive(Debug, Clone, Copy)]
pub enum AblationEvent<'a> {
    StageBStep { variant: &'a str, seed_index: usize, step: usize, loss: f64 },
    Eval { variant: &'a str, seed_index: usize, similarity: f64 },
}

/// One report row: a variant with its per-seed held-out similarities.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub per_seed: Vec<f64>,
    pub median: f64,
}

/// Three-variant comparison produced by [`run_ablation`].
#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("similarities are finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs the three-variant comparison on top of a shared stage-A model:
///
/// * `full` — stage-B adapter training with position mapping, per seed;
/// * `disable_rsa` — no adapter training at all: the stage-A weights sample
///   with the reference attached, so identity information can flow only
///   through the training-free restricted attention (the zero-initialized
///   adapters are exact no-ops);
/// * `disable_cpm` — stage-B retraining with image tokens sharing the video
///   coordinate rules instead of the conditional position mapping.
///
/// Trained variants repeat over `cfg.ablation.seeds` independent seeds and
/// report the median; `disable_rsa` has no training randomness and is
/// evaluated once. Evaluation noise is paired across variants.
pub fn run_ablation<T: Scalar>(
    cfg: &RunConfig,
    base: &Model<T>,
    train_items: &[LatentSample<T>],
    eval_items: &[LatentSample<T>],
    on_event: &mut dyn FnMut(AblationEvent<'_>) -> Result<()>,
) -> Result<AblationReport> {
    if base.cfg != cfg.model {
        return Err(CoreError::Config(
            "stage-A model was built with a different configuration".into(),
        ));
    }
    let evaluate = |m: &Model<T>| {
        eval_identity(
            m,
            eval_items,
            cfg.sampler.steps,
            cfg.sampler.seed,
            cfg.sampler.use_cache,
            cfg.ablation.eval_samples,
        )
    };

    let mut rows = Vec::with_capacity(3);

    // Trained variants: (name, position mapping enabled, variant tag).
    for (name, cpm, tag) in [("full", true, 1u64), ("disable_cpm", false, 2u64)] {
        let mut per_seed = Vec::with_capacity(cfg.ablation.seeds);
        for k in 0..cfg.ablation.seeds {
            let mut model = base.clone();
            model.cpm = cpm;
            let opts = StageOpts {
                stage: Stage::B,
                steps: 0..cfg.train.steps_b,
                batch: cfg.train.batch,
                lr: cfg.train.lr,
                seed: substream(cfg.train.seed, tag * 1000 + k as u64),
                checkpoint_every: 0,
                checkpoint_dir: None,
            };
            train_stage(&mut model, train_items, &opts, &mut |step, loss| {
                on_event(AblationEvent::StageBStep {
                    variant: name,
                    seed_index: k,
                    step,
                    loss,
                })
            })?;
            let sim = evaluate(&model)?;
            on_event(AblationEvent::Eval { variant: name, seed_index: k, similarity: sim })?;
            per_seed.push(sim);
        }
        rows.push(AblationRow { variant: name.into(), median: median(&per_seed), per_seed });
    }

    // Training-free variant: stage-A weights, reference attached at sampling.
    let sim = evaluate(base)?;
    on_event(AblationEvent::Eval { variant: "disable_rsa", seed_index: 0, similarity: sim })?;
    rows.insert(
        1,
        AblationRow { variant: "disable_rsa".into(), per_seed: vec![sim], median: sim },
    );

    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_dataset;
    use crate::dit::ModelConfig;
    use crate::rope::RoPEConfig;
    use crate::runcfg::{AblationSection, DataSection, SamplerSection, TrainSection};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_blocks: 2,
            heads: 2,
            head_dim: 8,
            ffn_mult: 2,
            patch: (1, 2, 2),
            frames: 2,
            h_lat: 8,
            w_lat: 8,
            h_ref: 4,
            w_ref: 4,
            channels: 3,
            prompt_vocab: 6,
            prompt_len: 1,
            rope: RoPEConfig::for_head_dim(8).unwrap(),
            lora_rank: 2,
            lora_alpha: 2.0,
            modulate_image: true,
        }
    }

    fn tiny_run_config(root: &Path, out_dir: &Path) -> RunConfig {
        RunConfig {
            model: tiny_cfg(),
            data: DataSection {
                root: root.to_str().unwrap().into(),
                n: 8,
                seed: 5,
                glyph_px: 4,
                ref_px: 8,
                video_px: 16,
                pool: 2,
            },
            train: TrainSection {
                stage: Stage::A,
                steps_a: 4,
                steps_b: 3,
                batch: 2,
                lr: 1e-2,
                seed: 21,
                log_every: 1,
                checkpoint_every: 0,
                resume: false,
                out_dir: out_dir.to_str().unwrap().into(),
            },
            sampler: SamplerSection { steps: 3, seed: 33, use_cache: true },
            ablation: AblationSection {
                disable_rsa: false,
                disable_cpm: false,
                seeds: 2,
                eval_samples: 0,
            },
        }
    }

    fn synthetic_items(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<LatentSample<f32>> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| LatentSample {
                x0: gaussian(&mut rng, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels])
                    .unwrap(),
                ref_latent: gaussian(&mut rng, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap(),
                prompt_ids: vec![i % cfg.prompt_vocab],
            })
            .collect()
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // For any constant gradient g, the bias-corrected first step is
        // lr * g/|g| / (1 + eps/|g|) ~= lr * sign(g).
        let cfg = tiny_cfg();
        let mut model = Model::<f64>::init(cfg, true, 1).unwrap();
        let name = "block0.attn.wq";
        let mut before = None;
        model.weights.visit(&mut |n, t| {
            if n == name {
                before = Some(t.clone());
            }
        });
        let before = before.unwrap();
        let mut grads: GradMap<f64> = GradMap::new();
        grads.insert(name.into(), Tensor::full(before.shape(), 1.0));
        let mut adam = Adam::new(0.05);
        adam.step(&mut model.weights, &grads).unwrap();
        let mut checked = false;
        model.weights.visit(&mut |n, t| {
            if n == name {
                let diff = t.sub(&before).unwrap();
                for &d in diff.data() {
                    assert!((d + 0.05).abs() < 1e-8, "step was {d}, expected -0.05");
                }
                checked = true;
            } else {
                assert!(!grads.contains_key(n));
            }
        });
        assert!(checked);
    }

    #[test]
    fn adam_constant_gradient_accumulates_linearly() {
        let cfg = tiny_cfg();
        let mut model = Model::<f64>::init(cfg, true, 2).unwrap();
        let name = "block1.ffn.w1";
        let mut start = None;
        model.weights.visit(&mut |n, t| {
            if n == name {
                start = Some(t.clone());
            }
        });
        let start = start.unwrap();
        let mut grads: GradMap<f64> = GradMap::new();
        grads.insert(name.into(), Tensor::full(start.shape(), 2.0));
        let mut adam = Adam::new(0.01);
        for _ in 0..5 {
            adam.step(&mut model.weights, &grads).unwrap();
        }
        model.weights.visit(&mut |n, t| {
            if n == name {
                let diff = t.sub(&start).unwrap();
                for &d in diff.data() {
                    assert!((d + 0.05).abs() < 1e-6, "five steps moved {d}, expected -0.05");
                }
            }
        });
    }

    #[test]
    fn adam_rejects_bad_gradient_maps() {
        let cfg = tiny_cfg();
        let mut model = Model::<f32>::init(cfg, true, 3).unwrap();
        let mut grads: GradMap<f32> = GradMap::new();
        grads.insert("block0.attn.wq".into(), Tensor::zeros(&[2, 2]));
        assert!(matches!(
            Adam::new(0.01).step(&mut model.weights, &grads),
            Err(CoreError::Shape(_))
        ));
        let mut grads: GradMap<f32> = GradMap::new();
        grads.insert("no.such.tensor".into(), Tensor::zeros(&[2, 2]));
        assert!(matches!(
            Adam::new(0.01).step(&mut model.weights, &grads),
            Err(CoreError::Invalid(_))
        ));
    }

    #[test]
    fn stage_a_training_is_deterministic_and_reduces_loss() {
        // One fixed clean video makes the velocity a deterministic function
        // of (state, path position), so the loss is genuinely reducible;
        // per-step losses stay noisy (fresh noise each step), so compare
        // ten-step averages instead of single draws.
        let cfg = tiny_cfg();
        let items = synthetic_items(&cfg, 1, 17);
        let run = || {
            let mut model =
                Model::<f32>::init(cfg.clone(), true, 4).unwrap();
            let mut losses = Vec::new();
            let opts = StageOpts {
                stage: Stage::A,
                steps: 0..80,
                batch: 4,
                lr: 1e-2,
                seed: 99,
                checkpoint_every: 0,
                checkpoint_dir: None,
            };
            train_stage(&mut model, &items, &opts, &mut |_, loss| {
                losses.push(loss);
                Ok(())
            })
            .unwrap();
            (model, losses)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2, "same seed must reproduce the loss curve bitwise");
        let mut identical = true;
        let mut pairs = Vec::new();
        m1.weights.visit(&mut |_, t| pairs.push(t.clone()));
        let mut i = 0;
        m2.weights.visit(&mut |_, t| {
            identical &= t.bit_eq(&pairs[i]);
            i += 1;
        });
        assert!(identical, "same seed must reproduce final weights bitwise");
        let head: f64 = l1[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = l1[l1.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head - 0.05,
            "late losses (mean {tail}) should clearly undercut early ones (mean {head})"
        );
    }

    #[test]
    fn resume_reproduces_the_next_step_loss_exactly() {
        let cfg = tiny_cfg();
        let items = synthetic_items(&cfg, 5, 23);
        let opts = |steps: Range<usize>| StageOpts {
            stage: Stage::A,
            steps,
            batch: 2,
            lr: 5e-3,
            seed: 101,
            checkpoint_every: 0,
            checkpoint_dir: None,
        };
        // Continuous run, recording every loss.
        let mut continuous = Model::<f32>::init(cfg.clone(), true, 7).unwrap();
        let mut losses = Vec::new();
        train_stage(&mut continuous, &items, &opts(0..6), &mut |_, l| {
            losses.push(l);
            Ok(())
        })
        .unwrap();
        // Interrupted run: stop after 3 steps, round-trip through a
        // checkpoint file, resume at step 3.
        let mut first_half = Model::<f32>::init(cfg.clone(), true, 7).unwrap();
        train_stage(&mut first_half, &items, &opts(0..3), &mut |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.stin");
        first_half.save(&path).unwrap();
        let mut resumed = Model::<f32>::load(&path).unwrap();
        let mut next_loss = None;
        train_stage(&mut resumed, &items, &opts(3..4), &mut |step, l| {
            assert_eq!(step, 3);
            next_loss = Some(l);
            Ok(())
        })
        .unwrap();
        assert_eq!(next_loss.unwrap(), losses[3], "resumed step-3 loss must match exactly");
    }

    #[test]
    fn stage_b_trains_adapters_and_freezes_everything_else() {
        let cfg = tiny_cfg();
        let items = synthetic_items(&cfg, 5, 31);
        let mut model = Model::<f32>::init(cfg.clone(), true, 8).unwrap();
        {
            let mut rng = Rng::new(9);
            model.weights.jitter(&mut rng, 0.05).unwrap();
        }
        let frozen = |n: &str| !is_trainable(TrainScope::LoraOnly, n);
        let adapters = |n: &str| is_trainable(TrainScope::LoraOnly, n);
        let frozen_before = digest_weights(&model.weights, &frozen);
        let adapters_before = digest_weights(&model.weights, &adapters);
        let opts = StageOpts {
            stage: Stage::B,
            steps: 0..4,
            batch: 2,
            lr: 1e-2,
            seed: 55,
            checkpoint_every: 0,
            checkpoint_dir: None,
        };
        train_stage(&mut model, &items, &opts, &mut |_, _| Ok(())).unwrap();
        assert_eq!(frozen_before, digest_weights(&model.weights, &frozen));
        assert_ne!(adapters_before, digest_weights(&model.weights, &adapters));
    }

    #[test]
    fn dataset_loads_into_model_shaped_latents() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let cfg = tiny_run_config(&root, &dir.path().join("runs"));
        make_dataset(&root, &cfg.to_data_config(), cfg.data.n, cfg.data.seed).unwrap();
        let (train, held) = load_training_set::<f32>(&cfg).unwrap();
        assert_eq!(train.len() + held.len(), 8);
        assert_eq!(held.len(), 1);
        for it in train.iter().chain(&held) {
            assert_eq!(it.x0.shape(), [2, 8, 8, 3]);
            assert_eq!(it.ref_latent.shape(), [4, 4, 3]);
            assert_eq!(it.prompt_ids.len(), 1);
            assert!(it.prompt_ids[0] < 6);
        }
        // A drifted generation config is refused.
        let mut other = cfg.clone();
        other.data.glyph_px = 6;
        assert!(matches!(load_training_set::<f32>(&other), Err(CoreError::Config(_))));
    }

    #[test]
    fn run_training_writes_reproducible_checkpoints_and_stage_b_needs_a() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let out = dir.path().join("runs");
        let mut cfg = tiny_run_config(&root, &out);
        make_dataset(&root, &cfg.to_data_config(), cfg.data.n, cfg.data.seed).unwrap();

        // Stage B before stage A is a config error.
        cfg.train.stage = Stage::B;
        assert!(matches!(
            run_training::<f32>(&cfg, &mut |_, _| Ok(())),
            Err(CoreError::Config(_))
        ));

        cfg.train.stage = Stage::A;
        let s1 = run_training::<f32>(&cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(s1.start_step, 0);
        assert_eq!(s1.end_step, 4);
        assert!(s1.final_loss.is_some());
        let bytes1 = std::fs::read(&s1.checkpoint).unwrap();
        // Rerunning from scratch reproduces the checkpoint byte-for-byte.
        let s2 = run_training::<f32>(&cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(bytes1, std::fs::read(&s2.checkpoint).unwrap());

        cfg.train.stage = Stage::B;
        let sb = run_training::<f32>(&cfg, &mut |_, _| Ok(())).unwrap();
        assert!(sb.freeze_verified);
        assert!(sb.checkpoint.ends_with("stage_b.stin"));
        let base = Model::<f32>::load(&s1.checkpoint).unwrap();
        let tuned = Model::<f32>::load(&sb.checkpoint).unwrap();
        let frozen = |n: &str| !is_trainable(TrainScope::LoraOnly, n);
        assert_eq!(
            digest_weights(&base.weights, &frozen),
            digest_weights(&tuned.weights, &frozen)
        );
    }

    #[test]
    fn run_training_resumes_from_intermediates_when_asked() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let out = dir.path().join("runs");
        let mut cfg = tiny_run_config(&root, &out);
        cfg.train.checkpoint_every = 2;
        make_dataset(&root, &cfg.to_data_config(), cfg.data.n, cfg.data.seed).unwrap();
        let mut steps_seen = Vec::new();
        run_training::<f32>(&cfg, &mut |s, _| {
            steps_seen.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(steps_seen, vec![0, 1, 2, 3]);
        assert!(out.join("stage_a_step000002.stin").exists());
        assert!(out.join("stage_a_step000004.stin").exists());
        // Resume picks up from the newest intermediate (here: completion).
        cfg.train.resume = true;
        let resumed = run_training::<f32>(&cfg, &mut |_, _| {
            panic!("nothing left to train");
        })
        .unwrap();
        assert!(resumed.resumed);
        assert_eq!(resumed.start_step, 4);
        // Remove the newest intermediate and resume mid-run.
        std::fs::remove_file(out.join("stage_a_step000004.stin")).unwrap();
        let mut steps_resumed = Vec::new();
        run_training::<f32>(&cfg, &mut |s, _| {
            steps_resumed.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(steps_resumed, vec![2, 3]);
    }

    #[test]
    fn ablation_produces_three_rows_with_paired_eval() {
        let cfg_model = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(&dir.path().join("d"), &dir.path().join("r"));
        cfg.train.steps_b = 2;
        cfg.ablation.seeds = 2;
        let base = Model::<f32>::init(cfg_model.clone(), true, 12).unwrap();
        let train_items = synthetic_items(&cfg_model, 4, 41);
        let eval_items: Vec<LatentSample<f32>> = {
            // Evaluation wants glyph-bearing references (all-white fails),
            // so build them from the real generator.
            let identity = crate::data::generate_identity(5, 2).unwrap();
            let reference = crate::data::render_reference(&identity, 4, 4).unwrap();
            vec![LatentSample {
                x0: Tensor::zeros(&[2, 8, 8, 3]),
                ref_latent: reference.cast::<f32>(),
                prompt_ids: vec![0],
            }]
        };
        let mut events = 0usize;
        let report = run_ablation(&cfg, &base, &train_items, &eval_items, &mut |_| {
            events += 1;
            Ok(())
        })
        .unwrap();
        assert!(events > 0);
        assert_eq!(report.rows.len(), 3);
        let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["full", "disable_rsa", "disable_cpm"]);
        for row in &report.rows {
            assert!((-1.0..=1.0).contains(&row.median), "{} median", row.variant);
            for &v in &row.per_seed {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
        assert_eq!(report.rows[0].per_seed.len(), 2);
        assert_eq!(report.rows[1].per_seed.len(), 1);
        assert_eq!(report.rows[2].per_seed.len(), 2);
    }

    #[test]
    fn median_handles_odd_and_even_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
