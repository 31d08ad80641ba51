//! Run configuration: a flat, diffable `key = value` text format.
//!
//! The format has `[section]` headers and one `key = value` pair per line;
//! `#` starts a comment. Parsing is strict — every known key must appear
//! exactly once, unknown keys and sections are rejected — so a config file
//! is always a complete, self-describing record of a run. Overrides are
//! applied with `section.key=value` assignments (the CLI's `--set`).
//! Serialization emits sections and keys in a fixed order, and
//! `parse(serialize(c))` reproduces `c` exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::DataConfig;
use crate::dit::ModelConfig;
use crate::error::{CoreError, Result};

/// Training stage. `A` pretrains the full video model on reference-free
/// batches; `B` attaches references and trains only the image-stream
/// adapters on top of a stage-A checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    A,
    B,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::A => "A",
            Stage::B => "B",
        })
    }
}

impl FromStr for Stage {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "A" => Ok(Stage::A),
            "B" => Ok(Stage::B),
            other => Err(CoreError::Config(format!("stage must be A or B, got {other:?}"))),
        }
    }
}

/// Dataset location and generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    /// Dataset root directory.
    pub root: String,
    /// Number of samples to generate.
    pub n: usize,
    /// Generator seed.
    pub seed: u64,
    /// Glyph side length in pixels.
    pub glyph_px: usize,
    /// Reference canvas side length in pixels.
    pub ref_px: usize,
    /// Video side length in pixels.
    pub video_px: usize,
    /// Average-pooling factor from pixels to latents.
    pub pool: usize,
}

/// Training hyperparameters shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub stage: Stage,
    /// Optimization steps for stage A.
    pub steps_a: usize,
    /// Optimization steps for stage B.
    pub steps_b: usize,
    pub batch: usize,
    pub lr: f64,
    /// Seed for batch selection, timesteps, and noise draws.
    pub seed: u64,
    /// Loss-log cadence in steps (the first and last step always log).
    pub log_every: usize,
    /// Mid-run checkpoint cadence in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Continue from the newest intermediate checkpoint of this stage if one
    /// exists. Off by default so reruns reproduce a run byte-for-byte.
    pub resume: bool,
    /// Directory receiving checkpoints and logs.
    pub out_dir: String,
}

/// Sampling-session parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSection {
    /// Number of solver steps per session.
    pub steps: usize,
    pub seed: u64,
    /// Reuse the image-branch K/V across steps.
    pub use_cache: bool,
}

/// Ablation switches and evaluation scope.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSection {
    /// Drop the trained adapters: sample from the stage-A weights with the
    /// reference attached, exercising only the training-free attention path.
    pub disable_rsa: bool,
    /// Retrain stage B with image tokens sharing the video coordinate rules
    /// instead of the conditional position mapping.
    pub disable_cpm: bool,
    /// Independent training seeds; reports use the per-variant median.
    pub seeds: usize,
    /// Held-out samples evaluated per variant; 0 means all of them.
    pub eval_samples: usize,
}

/// Complete, validated description of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk_default(),
            data: DataSection {
                root: "data".into(),
                n: 256,
                seed: 7,
                glyph_px: 12,
                ref_px: 16,
                video_px: 24,
                pool: 2,
            },
            train: TrainSection {
                stage: Stage::A,
                steps_a: 3000,
                steps_b: 2000,
                batch: 4,
                lr: 1e-3,
                seed: 11,
                log_every: 50,
                checkpoint_every: 0,
                resume: false,
                out_dir: "runs".into(),
            },
            sampler: SamplerSection { steps: 20, seed: 33, use_cache: true },
            ablation: AblationSection {
                disable_rsa: false,
                disable_cpm: false,
                seeds: 3,
                eval_samples: 0,
            },
        }
    }
}

/// Typed rendering/parsing for the config value grammar.
trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_cfg(raw: &str, at: &str) -> Result<Self>;
}

macro_rules! impl_config_value_via_fromstr {
    ($($t:ty => $what:literal),* $(,)?) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse_cfg(raw: &str, at: &str) -> Result<Self> {
                raw.parse().map_err(|_| {
                    CoreError::Config(format!("{at}: expected {}, got {raw:?}", $what))
                })
            }
        }
    )*};
}

impl_config_value_via_fromstr! {
    usize => "a non-negative integer",
    u64 => "a non-negative integer",
    f64 => "a number",
    bool => "true or false",
}

impl ConfigValue for String {
    fn render(&self) -> String {
        self.clone()
    }

    fn parse_cfg(raw: &str, _at: &str) -> Result<Self> {
        Ok(raw.to_string())
    }
}

impl ConfigValue for Stage {
    fn render(&self) -> String {
        self.to_string()
    }

    fn parse_cfg(raw: &str, at: &str) -> Result<Self> {
        raw.parse().map_err(|_| CoreError::Config(format!("{at}: stage must be A or B")))
    }
}

struct FieldSpec {
    section: &'static str,
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<()>,
}

macro_rules! field {
    ($sec:literal, $key:literal, $($path:tt).+) => {
        FieldSpec {
            section: $sec,
            key: $key,
            get: |c: &RunConfig| ConfigValue::render(&c.$($path).+),
            set: |c: &mut RunConfig, raw: &str| {
                c.$($path).+ = ConfigValue::parse_cfg(raw, concat!($sec, ".", $key))?;
                Ok(())
            },
        }
    };
}

/// Canonical field list: serialization order and the set of legal keys.
/// `model.rope.head_dim` is deliberately absent — it always tracks
/// `model.head_dim` (see [`RunConfig::normalize`]).
fn field_table() -> Vec<FieldSpec> {
    vec![
        field!("model", "d_model", model.d_model),
        field!("model", "n_blocks", model.n_blocks),
        field!("model", "heads", model.heads),
        field!("model", "head_dim", model.head_dim),
        field!("model", "ffn_mult", model.ffn_mult),
        field!("model", "patch_t", model.patch.0),
        field!("model", "patch_h", model.patch.1),
        field!("model", "patch_w", model.patch.2),
        field!("model", "frames", model.frames),
        field!("model", "h_lat", model.h_lat),
        field!("model", "w_lat", model.w_lat),
        field!("model", "h_ref", model.h_ref),
        field!("model", "w_ref", model.w_ref),
        field!("model", "channels", model.channels),
        field!("model", "prompt_vocab", model.prompt_vocab),
        field!("model", "prompt_len", model.prompt_len),
        field!("model", "rope_base", model.rope.base),
        field!("model", "rope_split_t", model.rope.split.0),
        field!("model", "rope_split_h", model.rope.split.1),
        field!("model", "rope_split_w", model.rope.split.2),
        field!("model", "lora_rank", model.lora_rank),
        field!("model", "lora_alpha", model.lora_alpha),
        field!("model", "modulate_image", model.modulate_image),
        field!("data", "root", data.root),
        field!("data", "n", data.n),
        field!("data", "seed", data.seed),
        field!("data", "glyph_px", data.glyph_px),
        field!("data", "ref_px", data.ref_px),
        field!("data", "video_px", data.video_px),
        field!("data", "pool", data.pool),
        field!("train", "stage", train.stage),
        field!("train", "steps_a", train.steps_a),
        field!("train", "steps_b", train.steps_b),
        field!("train", "batch", train.batch),
        field!("train", "lr", train.lr),
        field!("train", "seed", train.seed),
        field!("train", "log_every", train.log_every),
        field!("train", "checkpoint_every", train.checkpoint_every),
        field!("train", "resume", train.resume),
        field!("train", "out_dir", train.out_dir),
        field!("sampler", "steps", sampler.steps),
        field!("sampler", "seed", sampler.seed),
        field!("sampler", "use_cache", sampler.use_cache),
        field!("ablation", "disable_rsa", ablation.disable_rsa),
        field!("ablation", "disable_cpm", ablation.disable_cpm),
        field!("ablation", "seeds", ablation.seeds),
        field!("ablation", "eval_samples", ablation.eval_samples),
    ]
}

impl RunConfig {
    /// Renders the config in canonical section/key order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for f in field_table() {
            if f.section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push('[');
                out.push_str(f.section);
                out.push_str("]\n");
                current = f.section;
            }
            out.push_str(f.key);
            out.push_str(" = ");
            out.push_str(&(f.get)(self));
            out.push('\n');
        }
        out
    }

    /// Parses the canonical format. Every key must appear exactly once.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let table = field_table();
        let mut cfg = RunConfig::default();
        let mut seen = vec![false; table.len()];
        let mut section: Option<String> = None;
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    CoreError::Config(format!("line {lineno}: malformed section header {line:?}"))
                })?;
                if !table.iter().any(|f| f.section == name) {
                    return Err(CoreError::Config(format!(
                        "line {lineno}: unknown section [{name}]"
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {lineno}: expected `key = value`, got {line:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.as_deref().ok_or_else(|| {
                CoreError::Config(format!("line {lineno}: key {key:?} before any [section]"))
            })?;
            let pos = table
                .iter()
                .position(|f| f.section == sec && f.key == key)
                .ok_or_else(|| {
                    CoreError::Config(format!("line {lineno}: unknown key {sec}.{key}"))
                })?;
            if seen[pos] {
                return Err(CoreError::Config(format!("line {lineno}: duplicate key {sec}.{key}")));
            }
            seen[pos] = true;
            (table[pos].set)(&mut cfg, value)?;
        }
        for (pos, f) in table.iter().enumerate() {
            if !seen[pos] {
                return Err(CoreError::Config(format!("missing key {}.{}", f.section, f.key)));
            }
        }
        cfg.normalize();
        Ok(cfg)
    }

    /// SHA-256 of the canonical serialization, hex-encoded. Reports carry it
    /// so rows from different configurations can never be conflated.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.serialize().as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        RunConfig::parse(&text)
    }

    /// Applies one `section.key=value` override.
    pub fn apply_set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment.split_once('=').ok_or_else(|| {
            CoreError::Config(format!("override must be section.key=value, got {assignment:?}"))
        })?;
        let (sec, key) = path.trim().split_once('.').ok_or_else(|| {
            CoreError::Config(format!("override key must be section.key, got {path:?}"))
        })?;
        let table = field_table();
        let f = table
            .iter()
            .find(|f| f.section == sec && f.key == key)
            .ok_or_else(|| CoreError::Config(format!("unknown key {sec}.{key}")))?;
        (f.set)(self, value.trim())?;
        self.normalize();
        Ok(())
    }

    /// Re-establishes derived fields after any mutation: the rotation table
    /// width always equals the attention head width.
    fn normalize(&mut self) {
        self.model.rope.head_dim = self.model.head_dim;
    }

    /// Dataset-generator view of this config. Frame count comes from the
    /// model so the two can never disagree.
    pub fn to_data_config(&self) -> DataConfig {
        DataConfig {
            glyph: self.data.glyph_px,
            ref_px: self.data.ref_px,
            frames: self.model.frames,
            video_px: self.data.video_px,
            pool: self.data.pool,
        }
    }

    /// Full cross-section validation.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.to_data_config().validate()?;
        if self.data.n == 0 {
            return Err(CoreError::Config("data.n must be positive".into()));
        }
        let d = &self.data;
        let m = &self.model;
        let coherent = [
            ("video_px / pool", d.video_px / d.pool, "h_lat", m.h_lat),
            ("video_px / pool", d.video_px / d.pool, "w_lat", m.w_lat),
            ("ref_px / pool", d.ref_px / d.pool, "h_ref", m.h_ref),
            ("ref_px / pool", d.ref_px / d.pool, "w_ref", m.w_ref),
        ];
        for (dn, dv, mn, mv) in coherent {
            if dv != mv {
                return Err(CoreError::Config(format!(
                    "data {dn} = {dv} does not match model {mn} = {mv}"
                )));
            }
        }
        if m.channels != 3 {
            return Err(CoreError::Config(format!(
                "the pixel pipeline produces 3 latent channels, model has {}",
                m.channels
            )));
        }
        let t = &self.train;
        if t.steps_a == 0 || t.steps_b == 0 || t.batch == 0 || t.log_every == 0 {
            return Err(CoreError::Config(
                "train.steps_a, steps_b, batch and log_every must be positive".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(CoreError::Config(format!(
                "train.lr must be positive and finite, got {}",
                t.lr
            )));
        }
        if self.sampler.steps == 0 {
            return Err(CoreError::Config("sampler.steps must be positive".into()));
        }
        if self.ablation.seeds == 0 {
            return Err(CoreError::Config("ablation.seeds must be positive".into()));
        }
        Ok(())
    }
}
