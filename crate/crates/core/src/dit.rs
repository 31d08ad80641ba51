//! Miniature diffusion transformer with a conditional image branch.
//!
//! The denoiser is a stack of DiT blocks over patchified video latents:
//! per block, adaLN modulation from the timestep embedding gates a
//! self-attention sub-layer, an unmodulated cross-attention sub-layer over
//! prompt-embedding tokens, and a gated feed-forward sub-layer. A reference
//! image enters as extra tokens that share every weight with the video path,
//! with three deviations that define the mechanism:
//!
//! - the image stream is always conditioned at timestep 0;
//! - self-attention is restricted: image tokens attend only to image tokens,
//!   video tokens attend to the concatenation of both streams;
//! - the image-token Q/K/V projections carry low-rank adapters, the only
//!   weights trained during identity adaptation.
//!
//! Image tokens are positioned by conditional position mapping (timestep −1,
//! spatial coordinates offset past the video grid) and are discarded before
//! the output head, so the prediction depends on them only through attention.
//!
//! The forward pass exists once, as tape operations ([`crate::autodiff`]):
//! recording tapes train, non-recording tapes sample, and the per-block image
//! K/V can be captured into a [`SessionCache`] on the first sampler step and
//! reused afterwards.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::attention::{KvCacheEntry, LoraAdapter, ProjectionWeights};
use crate::autodiff::{Grads, Tape, Var};
use crate::error::{CoreError, Result};
use crate::rng::{gaussian, Rng};
use crate::rope::{
    build_position_grid, image_coords_without_mapping, Coord3D, RoPEConfig, RopeTable,
};
use crate::scalar::Scalar;
use crate::stin;
use crate::tensor::Tensor;

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-6;
/// Timesteps in [0,1] are scaled by this factor before the sinusoid.
const TIME_SCALE: f64 = 1000.0;
/// Standard deviation for gaussian weight init.
const INIT_STD: f64 = 0.02;
const HEADER_FORMAT: &str = "refdit-checkpoint";
const HEADER_VERSION: u32 = 1;

/// Named gradients (or parameter updates) in deterministic name order.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Architecture hyperparameters. `cpm` (conditional position mapping) is a
/// property of the positioning scheme, not the weights, and lives on
/// [`Model`] instead.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    /// Patch sizes `(p_t, p_h, p_w)`.
    pub patch: (usize, usize, usize),
    pub frames: usize,
    pub h_lat: usize,
    pub w_lat: usize,
    pub h_ref: usize,
    pub w_ref: usize,
    /// Latent channels.
    pub channels: usize,
    pub prompt_vocab: usize,
    pub prompt_len: usize,
    pub rope: RoPEConfig,
    /// 0 disables the adapters entirely.
    pub lora_rank: usize,
    /// Adapter scaling numerator (effective scale is `lora_alpha / lora_rank`).
    pub lora_alpha: f64,
    /// Whether the image stream is modulated with the timestep-0 embedding
    /// (the alternative bypasses modulation for image tokens).
    pub modulate_image: bool,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on one CPU core.
    pub fn desk_default() -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_blocks: 4,
            heads: 4,
            head_dim: 16,
            ffn_mult: 4,
            patch: (1, 2, 2),
            frames: 4,
            h_lat: 12,
            w_lat: 12,
            h_ref: 8,
            w_ref: 8,
            channels: 3,
            prompt_vocab: 6,
            prompt_len: 1,
            // Desk-scale calibration rather than the (hd/2, hd/4, hd/4) @ 1e4
            // convention: on a 12-cell grid the conventional split leaves one
            // useful frequency per spatial axis, so position-keyed attention
            // aliases every ~2pi cells. Three spatial frequencies at a small
            // base give a single sharp peak across the mapped-offset range.
            rope: RoPEConfig { head_dim: 16, split: (4, 6, 6), base: 20.0 },
            lora_rank: 8,
            lora_alpha: 8.0,
            modulate_image: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.d_model != self.heads * self.head_dim {
            return Err(CoreError::Config(format!(
                "d_model {} must equal heads {} x head_dim {}",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(CoreError::Config(format!(
                "rope head_dim {} differs from model head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        self.rope.validate()?;
        if self.n_blocks == 0 || self.ffn_mult == 0 || self.channels == 0 {
            return Err(CoreError::Config(
                "n_blocks, ffn_mult and channels must be positive".into(),
            ));
        }
        let (pt, ph, pw) = self.patch;
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(CoreError::Config("patch sizes must be positive".into()));
        }
        for (name, dim, p) in [
            ("frames", self.frames, pt),
            ("h_lat", self.h_lat, ph),
            ("w_lat", self.w_lat, pw),
            ("h_ref", self.h_ref, ph),
            ("w_ref", self.w_ref, pw),
        ] {
            if dim == 0 || dim % p != 0 {
                return Err(CoreError::Config(format!(
                    "{name}={dim} must be a positive multiple of its patch size {p}"
                )));
            }
        }
        if self.prompt_vocab == 0 || self.prompt_len == 0 {
            return Err(CoreError::Config("prompt vocab and length must be positive".into()));
        }
        if self.lora_rank > 0 && !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(CoreError::Config(format!(
                "lora_alpha must be positive and finite, got {}",
                self.lora_alpha
            )));
        }
        Ok(())
    }

    /// Flattened patch width consumed by the shared patch embedding.
    pub fn d_in(&self) -> usize {
        self.patch.0 * self.patch.1 * self.patch.2 * self.channels
    }

    /// Video token grid `(f, h, w)` after patching.
    pub fn video_grid(&self) -> (usize, usize, usize) {
        (self.frames / self.patch.0, self.h_lat / self.patch.1, self.w_lat / self.patch.2)
    }

    /// Image token grid `(h, w)` after patching.
    pub fn image_grid(&self) -> (usize, usize) {
        (self.h_ref / self.patch.1, self.w_ref / self.patch.2)
    }

    pub fn n_video_tokens(&self) -> usize {
        let (f, h, w) = self.video_grid();
        f * h * w
    }

    pub fn n_image_tokens(&self) -> usize {
        let (h, w) = self.image_grid();
        h * w
    }

    /// Serializes the config (plus the position-mapping flag) as the
    /// checkpoint header. Key order is fixed so outputs are byte-stable.
    pub fn to_header(&self, cpm: bool) -> String {
        let (pt, ph, pw) = self.patch;
        let (rt, rh, rw) = self.rope.split;
        format!(
            "format={HEADER_FORMAT}\nversion={HEADER_VERSION}\n\
             d_model={}\nn_blocks={}\nheads={}\nhead_dim={}\nffn_mult={}\n\
             patch_t={pt}\npatch_h={ph}\npatch_w={pw}\n\
             frames={}\nh_lat={}\nw_lat={}\nh_ref={}\nw_ref={}\nchannels={}\n\
             prompt_vocab={}\nprompt_len={}\n\
             rope_base={}\nrope_split_t={rt}\nrope_split_h={rh}\nrope_split_w={rw}\n\
             lora_rank={}\nlora_alpha={}\nmodulate_image={}\ncpm={cpm}\n",
            self.d_model,
            self.n_blocks,
            self.heads,
            self.head_dim,
            self.ffn_mult,
            self.frames,
            self.h_lat,
            self.w_lat,
            self.h_ref,
            self.w_ref,
            self.channels,
            self.prompt_vocab,
            self.prompt_len,
            self.rope.base,
            self.lora_rank,
            self.lora_alpha,
            self.modulate_image,
        )
    }

    /// Parses [`Self::to_header`] output. Returns the config and the
    /// position-mapping flag.
    pub fn parse_header(text: &str) -> Result<(ModelConfig, bool)> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Format(format!("header line '{line}' is not key=value")))?;
            if map.insert(k, v).is_some() {
                return Err(CoreError::Format(format!("duplicate header key '{k}'")));
            }
        }
        fn get<'a>(map: &BTreeMap<&str, &'a str>, k: &str) -> Result<&'a str> {
            map.get(k).copied().ok_or_else(|| CoreError::Format(format!("missing header key '{k}'")))
        }
        fn get_usize(map: &BTreeMap<&str, &str>, k: &str) -> Result<usize> {
            get(map, k)?
                .parse()
                .map_err(|_| CoreError::Format(format!("header key '{k}' is not an integer")))
        }
        fn get_f64(map: &BTreeMap<&str, &str>, k: &str) -> Result<f64> {
            get(map, k)?
                .parse()
                .map_err(|_| CoreError::Format(format!("header key '{k}' is not a number")))
        }
        fn get_bool(map: &BTreeMap<&str, &str>, k: &str) -> Result<bool> {
            match get(map, k)? {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(CoreError::Format(format!("header key '{k}'={other} is not a bool"))),
            }
        }
        if get(&map, "format")? != HEADER_FORMAT {
            return Err(CoreError::Format("not a model checkpoint header".into()));
        }
        if get_usize(&map, "version")? as u32 != HEADER_VERSION {
            return Err(CoreError::Format("unsupported checkpoint version".into()));
        }
        let cfg = ModelConfig {
            d_model: get_usize(&map, "d_model")?,
            n_blocks: get_usize(&map, "n_blocks")?,
            heads: get_usize(&map, "heads")?,
            head_dim: get_usize(&map, "head_dim")?,
            ffn_mult: get_usize(&map, "ffn_mult")?,
            patch: (get_usize(&map, "patch_t")?, get_usize(&map, "patch_h")?, get_usize(&map, "patch_w")?),
            frames: get_usize(&map, "frames")?,
            h_lat: get_usize(&map, "h_lat")?,
            w_lat: get_usize(&map, "w_lat")?,
            h_ref: get_usize(&map, "h_ref")?,
            w_ref: get_usize(&map, "w_ref")?,
            channels: get_usize(&map, "channels")?,
            prompt_vocab: get_usize(&map, "prompt_vocab")?,
            prompt_len: get_usize(&map, "prompt_len")?,
            rope: RoPEConfig {
                head_dim: get_usize(&map, "head_dim")?,
                split: (
                    get_usize(&map, "rope_split_t")?,
                    get_usize(&map, "rope_split_h")?,
                    get_usize(&map, "rope_split_w")?,
                ),
                base: get_f64(&map, "rope_base")?,
            },
            lora_rank: get_usize(&map, "lora_rank")?,
            lora_alpha: get_f64(&map, "lora_alpha")?,
            modulate_image: get_bool(&map, "modulate_image")?,
        };
        let cpm = get_bool(&map, "cpm")?;
        if map.len() != 26 {
            return Err(CoreError::Format(format!(
                "header has {} keys, expected 26",
                map.len()
            )));
        }
        cfg.validate()?;
        Ok((cfg, cpm))
    }
}

/// Timesteps for the two streams. The reference stream is pinned to 0 by
/// construction; `s` is the video timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepPair {
    pub s: f64,
    s_ref: f64,
}

impl TimestepPair {
    pub fn new(s: f64) -> Result<Self> {
        if !s.is_finite() || !(0.0..=1.0).contains(&s) {
            return Err(CoreError::Invalid(format!("timestep s={s} must be in [0,1]")));
        }
        Ok(TimestepPair { s, s_ref: 0.0 })
    }

    pub fn s_ref(&self) -> f64 {
        self.s_ref
    }
}

/// Sinusoidal features of `s·1000`: `[sin(x·f_0)…sin(x·f_{h−1}),
/// cos(x·f_0)…cos(x·f_{h−1})]` with `f_j = 10000^(−j/h)`, `h = dim/2`.
pub fn timestep_sinusoid<T: Scalar>(s: f64, dim: usize) -> Result<Tensor<T>> {
    if !s.is_finite() || !(0.0..=1.0).contains(&s) {
        return Err(CoreError::Invalid(format!("timestep s={s} must be in [0,1]")));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(CoreError::Invalid(format!("sinusoid dim {dim} must be positive and even")));
    }
    let half = dim / 2;
    let x = s * TIME_SCALE;
    let mut out = vec![T::zero(); dim];
    for j in 0..half {
        let angle = x * 10_000f64.powf(-(j as f64) / half as f64);
        out[j] = T::of(angle.sin());
        out[half + j] = T::of(angle.cos());
    }
    Tensor::new(&[dim], out)
}

// ---------------------------------------------------------------------------
// Patch rearrangement
// ---------------------------------------------------------------------------

/// Index table mapping token-major layout to `[f,h,w,c]`-flat indices:
/// `tokens.flat[j] = latent.flat[table[j]]`. Tokens are grid row-major;
/// within a patch, values follow `(dt, dh, dw, channel)` row-major order.
fn patch_table(f: usize, h: usize, w: usize, c: usize, patch: (usize, usize, usize)) -> Vec<usize> {
    let (pt, ph, pw) = patch;
    let mut table = Vec::with_capacity(f * h * w * c);
    for ft in 0..f / pt {
        for fh in 0..h / ph {
            for fw in 0..w / pw {
                for dt in 0..pt {
                    for dh in 0..ph {
                        for dw in 0..pw {
                            for ch in 0..c {
                                let (t, hh, ww) = (ft * pt + dt, fh * ph + dh, fw * pw + dw);
                                table.push(((t * h + hh) * w + ww) * c + ch);
                            }
                        }
                    }
                }
            }
        }
    }
    table
}

/// The reference latent is a single frame; when the temporal patch size is
/// greater than one, the frame is replicated across the temporal patch so the
/// image tokens have the same flattened width as video tokens and can share
/// the patch embedding.
fn ref_patch_table(h: usize, w: usize, c: usize, patch: (usize, usize, usize)) -> Vec<usize> {
    let (pt, ph, pw) = patch;
    let mut table = Vec::with_capacity(pt * h * w * c);
    for fh in 0..h / ph {
        for fw in 0..w / pw {
            for _dt in 0..pt {
                for dh in 0..ph {
                    for dw in 0..pw {
                        for ch in 0..c {
                            table.push((((fh * ph + dh) * w) + fw * pw + dw) * c + ch);
                        }
                    }
                }
            }
        }
    }
    table
}

fn invert_table(table: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; table.len()];
    for (i, &src) in table.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

/// Rearranges a `[F,H,W,c]` latent into non-overlapping patch tokens
/// `[n, p_t·p_h·p_w·c]` (pure permutation, no projection). Returns the token
/// grid dims `(f, h, w)`.
pub fn patchify<T: Scalar>(
    latent: &Tensor<T>,
    patch: (usize, usize, usize),
) -> Result<(Tensor<T>, (usize, usize, usize))> {
    if latent.ndim() != 4 {
        return Err(CoreError::Shape(format!(
            "patchify expects [F,H,W,c], got {:?}",
            latent.shape()
        )));
    }
    let (f, h, w, c) = (latent.dim(0), latent.dim(1), latent.dim(2), latent.dim(3));
    let (pt, ph, pw) = patch;
    if pt == 0 || ph == 0 || pw == 0 {
        return Err(CoreError::Invalid("patch sizes must be positive".into()));
    }
    if f % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(CoreError::Invalid(format!(
            "latent dims ({f},{h},{w}) not divisible by patch ({pt},{ph},{pw})"
        )));
    }
    let grid = (f / pt, h / ph, w / pw);
    let n = grid.0 * grid.1 * grid.2;
    let table = patch_table(f, h, w, c, patch);
    Ok((latent.reindex(&table, &[n, pt * ph * pw * c])?, grid))
}

/// Exact inverse of [`patchify`]'s rearrangement.
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    grid: (usize, usize, usize),
    patch: (usize, usize, usize),
    channels: usize,
) -> Result<Tensor<T>> {
    let (pt, ph, pw) = patch;
    let n = grid.0 * grid.1 * grid.2;
    let d_in = pt * ph * pw * channels;
    if tokens.ndim() != 2 || tokens.dim(0) != n || tokens.dim(1) != d_in {
        return Err(CoreError::Shape(format!(
            "unpatchify expects [{n}, {d_in}] tokens for grid {grid:?}, got {:?}",
            tokens.shape()
        )));
    }
    let (f, h, w) = (grid.0 * pt, grid.1 * ph, grid.2 * pw);
    let table = invert_table(&patch_table(f, h, w, channels, patch));
    tokens.reindex(&table, &[f, h, w, channels])
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LinearW<T: Scalar> {
    /// `[in, out]`.
    pub w: Tensor<T>,
    /// `[out]`.
    pub b: Tensor<T>,
}

/// Low-rank adapters for the three image-token projections of one block.
#[derive(Debug, Clone)]
pub struct LoraQkv<T: Scalar> {
    pub q: LoraAdapter<T>,
    pub k: LoraAdapter<T>,
    pub v: LoraAdapter<T>,
}

#[derive(Debug, Clone)]
pub struct BlockWeights<T: Scalar> {
    pub attn: ProjectionWeights<T>,
    /// Present iff `lora_rank > 0`.
    pub lora: Option<LoraQkv<T>>,
    pub cross: ProjectionWeights<T>,
    /// `[d, 3d]` map from timestep embedding to (shift, scale, gate) for the
    /// self-attention sub-layer.
    pub mod_attn: LinearW<T>,
    /// Same for the feed-forward sub-layer.
    pub mod_ffn: LinearW<T>,
    pub ffn1: LinearW<T>,
    pub ffn2: LinearW<T>,
}

#[derive(Debug, Clone)]
pub struct Weights<T: Scalar> {
    pub patch_embed: LinearW<T>,
    pub t_mlp1: LinearW<T>,
    pub t_mlp2: LinearW<T>,
    /// `[prompt_vocab, d]` embedding table.
    pub prompt_table: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub head: LinearW<T>,
}

/// Canonical `(name, shape)` listing of every weight tensor, in traversal
/// order. This is the single source of truth for init, validation,
/// checkpoint I/O and optimizer ordering.
pub fn expected_entries(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let d_in = cfg.d_in();
    let m = cfg.ffn_mult * d;
    let r = cfg.lora_rank;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("embed.patch.w".into(), vec![d_in, d]),
        ("embed.patch.b".into(), vec![d]),
        ("embed.t_mlp1.w".into(), vec![d, d]),
        ("embed.t_mlp1.b".into(), vec![d]),
        ("embed.t_mlp2.w".into(), vec![d, d]),
        ("embed.t_mlp2.b".into(), vec![d]),
        ("embed.prompt.table".into(), vec![cfg.prompt_vocab, d]),
    ];
    for i in 0..cfg.n_blocks {
        for n in ["wq", "wk", "wv", "wo"] {
            v.push((format!("block{i}.attn.{n}"), vec![d, d]));
        }
        if r > 0 {
            for p in ["q", "k", "v"] {
                v.push((format!("block{i}.lora_{p}.A"), vec![d, r]));
                v.push((format!("block{i}.lora_{p}.B"), vec![r, d]));
            }
        }
        for n in ["wq", "wk", "wv", "wo"] {
            v.push((format!("block{i}.cross.{n}"), vec![d, d]));
        }
        v.push((format!("block{i}.mod_attn.w"), vec![d, 3 * d]));
        v.push((format!("block{i}.mod_attn.b"), vec![3 * d]));
        v.push((format!("block{i}.mod_ffn.w"), vec![d, 3 * d]));
        v.push((format!("block{i}.mod_ffn.b"), vec![3 * d]));
        v.push((format!("block{i}.ffn.w1"), vec![d, m]));
        v.push((format!("block{i}.ffn.b1"), vec![m]));
        v.push((format!("block{i}.ffn.w2"), vec![m, d]));
        v.push((format!("block{i}.ffn.b2"), vec![d]));
    }
    v.push(("head.w".into(), vec![d, d_in]));
    v.push(("head.b".into(), vec![d_in]));
    v
}

/// Zero-initialized tensors: all biases, both modulation maps, the cross
/// output projection, the head, and adapter `B` matrices. Modulation and
/// head zeros make a fresh model compute exactly zero velocity; adapter `B`
/// zeros make fresh adapters exact no-ops.
fn init_is_zero(name: &str) -> bool {
    name.ends_with(".b")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
        || name.ends_with(".B")
        || name.contains(".mod_attn.")
        || name.contains(".mod_ffn.")
        || name.starts_with("head.")
        || name.ends_with("cross.wo")
}

impl<T: Scalar> Weights<T> {
    /// Seeded init; gaussian draws happen in canonical entry order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Weights<T>> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut map: GradMap<T> = GradMap::new();
        for (name, shape) in expected_entries(cfg) {
            let t = if init_is_zero(&name) {
                Tensor::zeros(&shape)
            } else {
                gaussian::<T>(&mut rng, &shape)?.scale(T::of(INIT_STD))
            };
            map.insert(name, t);
        }
        Weights::from_map(cfg, map)
    }

    /// Assembles weights from named tensors, validating the exact expected
    /// name set and every shape.
    pub fn from_map(cfg: &ModelConfig, mut map: GradMap<T>) -> Result<Weights<T>> {
        cfg.validate()?;
        let expected = expected_entries(cfg);
        for (name, shape) in &expected {
            match map.get(name) {
                None => return Err(CoreError::Format(format!("missing weight tensor '{name}'"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(CoreError::Format(format!(
                        "weight '{name}': expected shape {shape:?}, got {:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if map.len() != expected.len() {
            let extra: Vec<&String> = map
                .keys()
                .filter(|k| !expected.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(CoreError::Format(format!("unexpected weight tensors: {extra:?}")));
        }
        let mut take = |name: String| map.remove(&name).expect("validated above");
        let alpha = T::of(cfg.lora_alpha);
        let patch_embed =
            LinearW { w: take("embed.patch.w".into()), b: take("embed.patch.b".into()) };
        let t_mlp1 = LinearW { w: take("embed.t_mlp1.w".into()), b: take("embed.t_mlp1.b".into()) };
        let t_mlp2 = LinearW { w: take("embed.t_mlp2.w".into()), b: take("embed.t_mlp2.b".into()) };
        let prompt_table = take("embed.prompt.table".into());
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let attn = ProjectionWeights {
                w_q: take(format!("block{i}.attn.wq")),
                w_k: take(format!("block{i}.attn.wk")),
                w_v: take(format!("block{i}.attn.wv")),
                w_o: take(format!("block{i}.attn.wo")),
                heads: cfg.heads,
            };
            let lora = if cfg.lora_rank > 0 {
                let mut adapter = |p: &str| -> Result<LoraAdapter<T>> {
                    Ok(LoraAdapter {
                        a: take(format!("block{i}.lora_{p}.A")),
                        b: take(format!("block{i}.lora_{p}.B")),
                        rank: cfg.lora_rank,
                        alpha,
                    })
                };
                Some(LoraQkv { q: adapter("q")?, k: adapter("k")?, v: adapter("v")? })
            } else {
                None
            };
            let cross = ProjectionWeights {
                w_q: take(format!("block{i}.cross.wq")),
                w_k: take(format!("block{i}.cross.wk")),
                w_v: take(format!("block{i}.cross.wv")),
                w_o: take(format!("block{i}.cross.wo")),
                heads: cfg.heads,
            };
            let mod_attn = LinearW {
                w: take(format!("block{i}.mod_attn.w")),
                b: take(format!("block{i}.mod_attn.b")),
            };
            let mod_ffn = LinearW {
                w: take(format!("block{i}.mod_ffn.w")),
                b: take(format!("block{i}.mod_ffn.b")),
            };
            let ffn1 =
                LinearW { w: take(format!("block{i}.ffn.w1")), b: take(format!("block{i}.ffn.b1")) };
            let ffn2 =
                LinearW { w: take(format!("block{i}.ffn.w2")), b: take(format!("block{i}.ffn.b2")) };
            blocks.push(BlockWeights { attn, lora, cross, mod_attn, mod_ffn, ffn1, ffn2 });
        }
        let head = LinearW { w: take("head.w".into()), b: take("head.b".into()) };
        Ok(Weights { patch_embed, t_mlp1, t_mlp2, prompt_table, blocks, head })
    }

    /// Visits every tensor with its canonical name, in canonical order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("embed.patch.w", &self.patch_embed.w);
        f("embed.patch.b", &self.patch_embed.b);
        f("embed.t_mlp1.w", &self.t_mlp1.w);
        f("embed.t_mlp1.b", &self.t_mlp1.b);
        f("embed.t_mlp2.w", &self.t_mlp2.w);
        f("embed.t_mlp2.b", &self.t_mlp2.b);
        f("embed.prompt.table", &self.prompt_table);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.attn.wq"), &b.attn.w_q);
            f(&format!("block{i}.attn.wk"), &b.attn.w_k);
            f(&format!("block{i}.attn.wv"), &b.attn.w_v);
            f(&format!("block{i}.attn.wo"), &b.attn.w_o);
            if let Some(l) = &b.lora {
                for (p, a) in [("q", &l.q), ("k", &l.k), ("v", &l.v)] {
                    f(&format!("block{i}.lora_{p}.A"), &a.a);
                    f(&format!("block{i}.lora_{p}.B"), &a.b);
                }
            }
            f(&format!("block{i}.cross.wq"), &b.cross.w_q);
            f(&format!("block{i}.cross.wk"), &b.cross.w_k);
            f(&format!("block{i}.cross.wv"), &b.cross.w_v);
            f(&format!("block{i}.cross.wo"), &b.cross.w_o);
            f(&format!("block{i}.mod_attn.w"), &b.mod_attn.w);
            f(&format!("block{i}.mod_attn.b"), &b.mod_attn.b);
            f(&format!("block{i}.mod_ffn.w"), &b.mod_ffn.w);
            f(&format!("block{i}.mod_ffn.b"), &b.mod_ffn.b);
            f(&format!("block{i}.ffn.w1"), &b.ffn1.w);
            f(&format!("block{i}.ffn.b1"), &b.ffn1.b);
            f(&format!("block{i}.ffn.w2"), &b.ffn2.w);
            f(&format!("block{i}.ffn.b2"), &b.ffn2.b);
        }
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
    }

    /// Mutable canonical traversal (optimizer updates, test perturbations).
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("embed.patch.w", &mut self.patch_embed.w);
        f("embed.patch.b", &mut self.patch_embed.b);
        f("embed.t_mlp1.w", &mut self.t_mlp1.w);
        f("embed.t_mlp1.b", &mut self.t_mlp1.b);
        f("embed.t_mlp2.w", &mut self.t_mlp2.w);
        f("embed.t_mlp2.b", &mut self.t_mlp2.b);
        f("embed.prompt.table", &mut self.prompt_table);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.attn.wq"), &mut b.attn.w_q);
            f(&format!("block{i}.attn.wk"), &mut b.attn.w_k);
            f(&format!("block{i}.attn.wv"), &mut b.attn.w_v);
            f(&format!("block{i}.attn.wo"), &mut b.attn.w_o);
            if let Some(l) = &mut b.lora {
                for (p, a) in [("q", &mut l.q), ("k", &mut l.k), ("v", &mut l.v)] {
                    f(&format!("block{i}.lora_{p}.A"), &mut a.a);
                    f(&format!("block{i}.lora_{p}.B"), &mut a.b);
                }
            }
            f(&format!("block{i}.cross.wq"), &mut b.cross.w_q);
            f(&format!("block{i}.cross.wk"), &mut b.cross.w_k);
            f(&format!("block{i}.cross.wv"), &mut b.cross.w_v);
            f(&format!("block{i}.cross.wo"), &mut b.cross.w_o);
            f(&format!("block{i}.mod_attn.w"), &mut b.mod_attn.w);
            f(&format!("block{i}.mod_attn.b"), &mut b.mod_attn.b);
            f(&format!("block{i}.mod_ffn.w"), &mut b.mod_ffn.w);
            f(&format!("block{i}.mod_ffn.b"), &mut b.mod_ffn.b);
            f(&format!("block{i}.ffn.w1"), &mut b.ffn1.w);
            f(&format!("block{i}.ffn.b1"), &mut b.ffn1.b);
            f(&format!("block{i}.ffn.w2"), &mut b.ffn2.w);
            f(&format!("block{i}.ffn.b2"), &mut b.ffn2.b);
        }
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Checks the full weight layout against a config.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let expected = expected_entries(cfg);
        let mut seen: Vec<(String, Vec<usize>)> = Vec::with_capacity(expected.len());
        self.visit(&mut |n, t| seen.push((n.to_string(), t.shape().to_vec())));
        if seen != expected {
            return Err(CoreError::Config(
                "weight layout does not match the configuration".into(),
            ));
        }
        for b in &self.blocks {
            if b.attn.heads != cfg.heads || b.cross.heads != cfg.heads {
                return Err(CoreError::Config("projection head count mismatch".into()));
            }
            if let Some(l) = &b.lora {
                for a in [&l.q, &l.k, &l.v] {
                    a.validate(cfg.d_model)?;
                    if a.rank != cfg.lora_rank {
                        return Err(CoreError::Config("adapter rank mismatch".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds seeded gaussian noise (std `std`) to every tensor. Used to move
    /// a freshly initialized model off its zero-output point in gradient
    /// tests.
    pub fn jitter(&mut self, rng: &mut Rng, std: f64) -> Result<()> {
        let mut err: Option<CoreError> = None;
        self.visit_mut(&mut |_, t| {
            if err.is_some() {
                return;
            }
            match gaussian::<T>(rng, t.shape()) {
                Ok(g) => *t = t.add_scaled(&g, T::of(std)).expect("same shape"),
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// KV cache and instrumentation
// ---------------------------------------------------------------------------

/// Per-session image K/V cache, one optional entry per block. Filled exactly
/// once; refilling or reading before filling is a cache error.
#[derive(Debug, Clone)]
pub struct SessionCache<T: Scalar> {
    pub(crate) entries: Vec<Option<KvCacheEntry<T>>>,
    pub(crate) filled: bool,
}

impl<T: Scalar> SessionCache<T> {
    pub fn new(n_blocks: usize) -> Self {
        SessionCache { entries: (0..n_blocks).map(|_| None).collect(), filled: false }
    }

    pub fn is_filled(&self) -> bool {
        self.filled
    }

    pub fn n_blocks(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Option<KvCacheEntry<T>>] {
        &self.entries
    }
}

/// How a forward pass interacts with a [`SessionCache`].
pub enum CacheCtl<'a, T: Scalar> {
    /// Compute everything, cache nothing.
    Off,
    /// Compute the image stream and capture per-block K/V (first step).
    Fill(&'a mut SessionCache<T>),
    /// Skip the image stream; read per-block K/V (subsequent steps).
    Read(&'a SessionCache<T>),
}

/// Instrumentation counters for cost claims.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounters {
    /// Number of model forward evaluations.
    pub model_evals: u64,
    /// Number of evaluations that ran the image stream's pre-attention work
    /// (patchify/embed/projections); cached steps skip it.
    pub image_preattn_evals: u64,
    /// Number of per-block image K/V computations, counted where the work
    /// happens. A cached sampling session performs exactly `n_blocks` of
    /// these; an uncached one performs `n_steps x n_blocks`.
    pub image_block_preattn: u64,
}

// ---------------------------------------------------------------------------
// Tape mirrors of the weights
// ---------------------------------------------------------------------------

/// Which parameters receive gradients when the forward pass is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Base pretraining: everything is trainable.
    All,
    /// Identity adaptation: only adapter tensors are trainable.
    LoraOnly,
}

/// Whether a canonical weight name is trainable under a scope.
pub fn is_trainable(scope: TrainScope, name: &str) -> bool {
    match scope {
        TrainScope::All => true,
        TrainScope::LoraOnly => name.contains(".lora_"),
    }
}

#[derive(Clone, Copy)]
pub(crate) struct LinearV {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy)]
pub(crate) struct ProjVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
}

#[derive(Clone, Copy)]
pub(crate) struct LoraPairVars {
    a: Var,
    b: Var,
}

#[derive(Clone, Copy)]
pub(crate) struct LoraQkvVars {
    q: LoraPairVars,
    k: LoraPairVars,
    v: LoraPairVars,
}

pub(crate) struct BlockVars {
    attn: ProjVars,
    lora: Option<LoraQkvVars>,
    cross: ProjVars,
    mod_attn: LinearV,
    mod_ffn: LinearV,
    ffn1: LinearV,
    ffn2: LinearV,
}

/// Weights lifted onto a tape as leaves, with their canonical names. Built
/// only by [`Model::lift_weights`], so the name↔tensor association has a
/// single construction point.
pub struct WeightVars {
    patch_embed: LinearV,
    t_mlp1: LinearV,
    t_mlp2: LinearV,
    prompt_table: Var,
    blocks: Vec<BlockVars>,
    head: LinearV,
    named: Vec<(String, Var)>,
}

impl WeightVars {
    pub fn named(&self) -> &[(String, Var)] {
        &self.named
    }

    /// Extracts leaf gradients keyed by canonical name (absent names had no
    /// gradient, e.g. frozen weights).
    pub fn grads_by_name<T: Scalar>(&self, grads: &mut Grads<T>) -> GradMap<T> {
        let mut map = GradMap::new();
        for (name, var) in &self.named {
            if let Some(g) = grads.take(*var) {
                map.insert(name.clone(), g);
            }
        }
        map
    }
}

fn lift_tensor<T: Scalar>(
    tape: &mut Tape<T>,
    scope: TrainScope,
    name: String,
    t: &Tensor<T>,
    named: &mut Vec<(String, Var)>,
) -> Var {
    let v = tape.leaf(t.clone(), is_trainable(scope, &name));
    named.push((name, v));
    v
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Per-block cache control resolved inside the block loop.
enum BlockCache<'a, T: Scalar> {
    Off,
    Fill(&'a mut Option<KvCacheEntry<T>>),
    Read(Option<&'a KvCacheEntry<T>>),
}

/// (shift, 1+scale, gate) rows for one sub-layer.
#[derive(Clone, Copy)]
struct ModRows {
    shift: Var,
    scale1p: Var,
    gate: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    /// Conditional position mapping for image tokens; disabling it is the
    /// position-mapping ablation (image tokens at t=0, zero-based spatial
    /// coordinates overlapping the video grid).
    pub cpm: bool,
    pub weights: Weights<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, cpm: bool, weights: Weights<T>) -> Result<Model<T>> {
        weights.validate(&cfg)?;
        Ok(Model { cfg, cpm, weights })
    }

    /// Seeded initialization. A fresh model predicts exactly zero velocity
    /// (zero modulation maps and zero output head).
    pub fn init(cfg: ModelConfig, cpm: bool, seed: u64) -> Result<Model<T>> {
        let weights = Weights::init(&cfg, seed)?;
        Ok(Model { cfg, cpm, weights })
    }

    pub fn n_params(&self) -> usize {
        self.weights.n_params()
    }

    /// Lifts every weight tensor onto the tape as a leaf, marking leaves
    /// trainable according to `scope`.
    pub fn lift_weights(&self, tape: &mut Tape<T>, scope: TrainScope) -> WeightVars {
        let w = &self.weights;
        let mut named = Vec::new();
        let lin = |tape: &mut Tape<T>, nw: String, nb: String, l: &LinearW<T>, named: &mut Vec<(String, Var)>| {
            LinearV {
                w: lift_tensor(tape, scope, nw, &l.w, named),
                b: lift_tensor(tape, scope, nb, &l.b, named),
            }
        };
        let patch_embed =
            lin(tape, "embed.patch.w".into(), "embed.patch.b".into(), &w.patch_embed, &mut named);
        let t_mlp1 =
            lin(tape, "embed.t_mlp1.w".into(), "embed.t_mlp1.b".into(), &w.t_mlp1, &mut named);
        let t_mlp2 =
            lin(tape, "embed.t_mlp2.w".into(), "embed.t_mlp2.b".into(), &w.t_mlp2, &mut named);
        let prompt_table =
            lift_tensor(tape, scope, "embed.prompt.table".into(), &w.prompt_table, &mut named);
        let mut blocks = Vec::with_capacity(w.blocks.len());
        for (i, b) in w.blocks.iter().enumerate() {
            let attn = ProjVars {
                wq: lift_tensor(tape, scope, format!("block{i}.attn.wq"), &b.attn.w_q, &mut named),
                wk: lift_tensor(tape, scope, format!("block{i}.attn.wk"), &b.attn.w_k, &mut named),
                wv: lift_tensor(tape, scope, format!("block{i}.attn.wv"), &b.attn.w_v, &mut named),
                wo: lift_tensor(tape, scope, format!("block{i}.attn.wo"), &b.attn.w_o, &mut named),
            };
            let lora = b.lora.as_ref().map(|l| {
                let mut pair = |p: &str, a: &LoraAdapter<T>, named: &mut Vec<(String, Var)>| LoraPairVars {
                    a: lift_tensor(tape, scope, format!("block{i}.lora_{p}.A"), &a.a, named),
                    b: lift_tensor(tape, scope, format!("block{i}.lora_{p}.B"), &a.b, named),
                };
                LoraQkvVars {
                    q: pair("q", &l.q, &mut named),
                    k: pair("k", &l.k, &mut named),
                    v: pair("v", &l.v, &mut named),
                }
            });
            let cross = ProjVars {
                wq: lift_tensor(tape, scope, format!("block{i}.cross.wq"), &b.cross.w_q, &mut named),
                wk: lift_tensor(tape, scope, format!("block{i}.cross.wk"), &b.cross.w_k, &mut named),
                wv: lift_tensor(tape, scope, format!("block{i}.cross.wv"), &b.cross.w_v, &mut named),
                wo: lift_tensor(tape, scope, format!("block{i}.cross.wo"), &b.cross.w_o, &mut named),
            };
            let mod_attn = lin(
                tape,
                format!("block{i}.mod_attn.w"),
                format!("block{i}.mod_attn.b"),
                &b.mod_attn,
                &mut named,
            );
            let mod_ffn = lin(
                tape,
                format!("block{i}.mod_ffn.w"),
                format!("block{i}.mod_ffn.b"),
                &b.mod_ffn,
                &mut named,
            );
            let ffn1 = lin(
                tape,
                format!("block{i}.ffn.w1"),
                format!("block{i}.ffn.b1"),
                &b.ffn1,
                &mut named,
            );
            let ffn2 = lin(
                tape,
                format!("block{i}.ffn.w2"),
                format!("block{i}.ffn.b2"),
                &b.ffn2,
                &mut named,
            );
            blocks.push(BlockVars { attn, lora, cross, mod_attn, mod_ffn, ffn1, ffn2 });
        }
        let head = lin(tape, "head.w".into(), "head.b".into(), &w.head, &mut named);
        WeightVars { patch_embed, t_mlp1, t_mlp2, prompt_table, blocks, head, named }
    }

    /// Full forward pass: noisy latent `[F,H,W,c]` (+ optional reference
    /// latent `[H_ref,W_ref,c]`) to predicted velocity `[F,H,W,c]`.
    pub fn forward(
        &self,
        noisy: &Tensor<T>,
        ref_latent: Option<&Tensor<T>>,
        prompt_ids: &[usize],
        s: f64,
        cache: CacheCtl<'_, T>,
        counters: Option<&mut EvalCounters>,
    ) -> Result<Tensor<T>> {
        let mut counters = counters;
        let image_work = ref_latent.is_some() && !matches!(cache, CacheCtl::Read(_));
        let mut tape = Tape::new(false);
        let wv = self.lift_weights(&mut tape, TrainScope::All);
        let out = self.build_graph(
            &mut tape,
            &wv,
            noisy,
            ref_latent,
            prompt_ids,
            s,
            cache,
            counters.as_deref_mut(),
        )?;
        if let Some(c) = counters {
            c.model_evals += 1;
            if image_work {
                c.image_preattn_evals += 1;
            }
        }
        Ok(tape.value(out).clone())
    }

    /// Builds the forward graph on a caller-owned tape (no cache). This is
    /// the training entry point: record the tape, take `backward` of a loss
    /// derived from the returned velocity.
    pub fn traced_velocity(
        &self,
        tape: &mut Tape<T>,
        wv: &WeightVars,
        noisy: &Tensor<T>,
        ref_latent: Option<&Tensor<T>>,
        prompt_ids: &[usize],
        s: f64,
    ) -> Result<Var> {
        self.build_graph(tape, wv, noisy, ref_latent, prompt_ids, s, CacheCtl::Off, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_graph(
        &self,
        tape: &mut Tape<T>,
        wv: &WeightVars,
        noisy: &Tensor<T>,
        ref_latent: Option<&Tensor<T>>,
        prompt_ids: &[usize],
        s: f64,
        mut cache: CacheCtl<'_, T>,
        mut counters: Option<&mut EvalCounters>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let pair = TimestepPair::new(s)?;
        if noisy.shape() != [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels] {
            return Err(CoreError::Shape(format!(
                "noisy latent must be [{},{},{},{}], got {:?}",
                cfg.frames,
                cfg.h_lat,
                cfg.w_lat,
                cfg.channels,
                noisy.shape()
            )));
        }
        if let Some(r) = ref_latent {
            if r.shape() != [cfg.h_ref, cfg.w_ref, cfg.channels] {
                return Err(CoreError::Shape(format!(
                    "reference latent must be [{},{},{}], got {:?}",
                    cfg.h_ref,
                    cfg.w_ref,
                    cfg.channels,
                    r.shape()
                )));
            }
        }
        if prompt_ids.len() != cfg.prompt_len {
            return Err(CoreError::Invalid(format!(
                "expected {} prompt ids, got {}",
                cfg.prompt_len,
                prompt_ids.len()
            )));
        }
        if let Some(&bad) = prompt_ids.iter().find(|&&i| i >= cfg.prompt_vocab) {
            return Err(CoreError::Invalid(format!(
                "prompt id {bad} out of range (vocab {})",
                cfg.prompt_vocab
            )));
        }
        if tape.recording() && !matches!(cache, CacheCtl::Off) {
            return Err(CoreError::Invalid(
                "the KV cache is an inference mechanism; it cannot be used while recording gradients"
                    .into(),
            ));
        }
        match &cache {
            CacheCtl::Fill(c) => {
                if c.filled {
                    return Err(CoreError::Cache(
                        "cache already filled; each sampling session fills once".into(),
                    ));
                }
                if c.n_blocks() != cfg.n_blocks {
                    return Err(CoreError::Cache(format!(
                        "cache sized for {} blocks, model has {}",
                        c.n_blocks(),
                        cfg.n_blocks
                    )));
                }
            }
            CacheCtl::Read(c) => {
                if !c.filled {
                    return Err(CoreError::Cache("reading from an unfilled cache".into()));
                }
                if c.n_blocks() != cfg.n_blocks {
                    return Err(CoreError::Cache(format!(
                        "cache sized for {} blocks, model has {}",
                        c.n_blocks(),
                        cfg.n_blocks
                    )));
                }
                if c.entries.iter().any(|e| e.is_some() != ref_latent.is_some()) {
                    return Err(CoreError::Cache(
                        "cache entries do not match the presence of a reference latent".into(),
                    ));
                }
            }
            CacheCtl::Off => {}
        }

        let d = cfg.d_model;
        let img_compute = ref_latent.is_some() && !matches!(cache, CacheCtl::Read(_));

        // Timestep embeddings (the image stream is always conditioned at 0).
        let emb_v = self.t_embed(tape, wv, pair.s)?;
        let emb_i = if img_compute && cfg.modulate_image {
            Some(self.t_embed(tape, wv, pair.s_ref())?)
        } else {
            None
        };

        // Patchify and embed both streams with the shared projection.
        let n_v = cfg.n_video_tokens();
        let n_i = cfg.n_image_tokens();
        let vid_table = Arc::new(patch_table(
            cfg.frames,
            cfg.h_lat,
            cfg.w_lat,
            cfg.channels,
            cfg.patch,
        ));
        let noisy_leaf = tape.leaf(noisy.clone(), false);
        let tok_v = tape.reindex(noisy_leaf, &vid_table, &[n_v, cfg.d_in()])?;
        let mut x_v = linear(tape, tok_v, &wv.patch_embed)?;
        let mut x_i: Option<Var> = if img_compute {
            let r = ref_latent.expect("img_compute implies a reference");
            let table = Arc::new(ref_patch_table(cfg.h_ref, cfg.w_ref, cfg.channels, cfg.patch));
            let leaf = tape.leaf(r.clone(), false);
            let tok_i = tape.reindex(leaf, &table, &[n_i, cfg.d_in()])?;
            Some(linear(tape, tok_i, &wv.patch_embed)?)
        } else {
            None
        };

        let prompt = tape.gather_rows(wv.prompt_table, prompt_ids)?;

        // Position tables: video grid row-major; image tokens either mapped
        // past the video grid at t=-1 (CPM) or overlapping it (ablation).
        let (gf, gh, gw) = cfg.video_grid();
        let (ih, iw) = cfg.image_grid();
        let coords = build_position_grid(gf, gh, gw, ih, iw)?;
        let table_v = Arc::new(RopeTable::<T>::build(&cfg.rope, &coords[..n_v])?);
        let table_i = if img_compute {
            let ic: Vec<Coord3D> = if self.cpm {
                coords[n_v..].to_vec()
            } else {
                image_coords_without_mapping(ih, iw)
            };
            Some(Arc::new(RopeTable::<T>::build(&cfg.rope, &ic)?))
        } else {
            None
        };

        let ones = tape.leaf(Tensor::full(&[d], T::one()), false);

        for i in 0..cfg.n_blocks {
            let bc = match &mut cache {
                CacheCtl::Off => BlockCache::Off,
                CacheCtl::Fill(c) => BlockCache::Fill(&mut c.entries[i]),
                CacheCtl::Read(c) => BlockCache::Read(c.entries[i].as_ref()),
            };
            let (nv, ni) = self.block_graph(
                tape,
                &wv.blocks[i],
                x_v,
                x_i,
                prompt,
                emb_v,
                emb_i,
                ones,
                &table_v,
                table_i.as_ref(),
                bc,
                counters.as_deref_mut(),
            )?;
            x_v = nv;
            x_i = ni;
        }
        if let CacheCtl::Fill(c) = cache {
            c.filled = true;
        }

        // Image tokens are discarded here: only video tokens reach the head.
        let y = tape.layer_norm(x_v, T::of(LN_EPS))?;
        let y = linear(tape, y, &wv.head)?;
        let unpatch = Arc::new(invert_table(&vid_table));
        tape.reindex(y, &unpatch, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels])
    }

    fn t_embed(&self, tape: &mut Tape<T>, wv: &WeightVars, s: f64) -> Result<Var> {
        let d = self.cfg.d_model;
        let sin = timestep_sinusoid::<T>(s, d)?.reshape(&[1, d])?;
        let x = tape.leaf(sin, false);
        let h = linear(tape, x, &wv.t_mlp1)?;
        let h = tape.silu(h);
        linear(tape, h, &wv.t_mlp2)
    }

    /// One transformer block over explicit token matrices. `video` is
    /// `[n_video, d]`, `image` (optional) `[n_image, d]`, `prompt_tokens`
    /// `[len, d]` already embedded. Supplying `cache` replaces the image
    /// stream with stored K/V (so `image` must be `None` and no image tokens
    /// are returned).
    pub fn block_forward(
        &self,
        index: usize,
        video: &Tensor<T>,
        image: Option<&Tensor<T>>,
        prompt_tokens: &Tensor<T>,
        pair: TimestepPair,
        cache: Option<&KvCacheEntry<T>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let cfg = &self.cfg;
        if index >= cfg.n_blocks {
            return Err(CoreError::Invalid(format!(
                "block index {index} out of range ({} blocks)",
                cfg.n_blocks
            )));
        }
        if cache.is_some() && image.is_some() {
            return Err(CoreError::Invalid(
                "image tokens must not be supplied when reading cached K/V".into(),
            ));
        }
        let d = cfg.d_model;
        if video.shape() != [cfg.n_video_tokens(), d] {
            return Err(CoreError::Shape(format!(
                "video tokens must be [{}, {d}], got {:?}",
                cfg.n_video_tokens(),
                video.shape()
            )));
        }
        if let Some(img) = image {
            if img.shape() != [cfg.n_image_tokens(), d] {
                return Err(CoreError::Shape(format!(
                    "image tokens must be [{}, {d}], got {:?}",
                    cfg.n_image_tokens(),
                    img.shape()
                )));
            }
        }
        if prompt_tokens.ndim() != 2 || prompt_tokens.dim(1) != d {
            return Err(CoreError::Shape(format!(
                "prompt tokens must be [len, {d}], got {:?}",
                prompt_tokens.shape()
            )));
        }
        let mut tape = Tape::new(false);
        let wv = self.lift_weights(&mut tape, TrainScope::All);
        let emb_v = self.t_embed(&mut tape, &wv, pair.s)?;
        let emb_i = if image.is_some() && cfg.modulate_image {
            Some(self.t_embed(&mut tape, &wv, pair.s_ref())?)
        } else {
            None
        };
        let (gf, gh, gw) = cfg.video_grid();
        let (ih, iw) = cfg.image_grid();
        let coords = build_position_grid(gf, gh, gw, ih, iw)?;
        let n_v = cfg.n_video_tokens();
        let table_v = Arc::new(RopeTable::<T>::build(&cfg.rope, &coords[..n_v])?);
        let table_i = if image.is_some() {
            let ic: Vec<Coord3D> = if self.cpm {
                coords[n_v..].to_vec()
            } else {
                image_coords_without_mapping(ih, iw)
            };
            Some(Arc::new(RopeTable::<T>::build(&cfg.rope, &ic)?))
        } else {
            None
        };
        let ones = tape.leaf(Tensor::full(&[d], T::one()), false);
        let x_v = tape.leaf(video.clone(), false);
        let x_i = match image {
            Some(img) => Some(tape.leaf(img.clone(), false)),
            None => None,
        };
        let p = tape.leaf(prompt_tokens.clone(), false);
        let bc = match cache {
            Some(e) => BlockCache::Read(Some(e)),
            None => BlockCache::Off,
        };
        let (ov, oi) = self.block_graph(
            &mut tape,
            &wv.blocks[index],
            x_v,
            x_i,
            p,
            emb_v,
            emb_i,
            ones,
            &table_v,
            table_i.as_ref(),
            bc,
            None,
        )?;
        Ok((tape.value(ov).clone(), oi.map(|v| tape.value(v).clone())))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_graph(
        &self,
        tape: &mut Tape<T>,
        bv: &BlockVars,
        x_v: Var,
        x_i: Option<Var>,
        prompt: Var,
        emb_v: Var,
        emb_i: Option<Var>,
        ones: Var,
        table_v: &Arc<RopeTable<T>>,
        table_i: Option<&Arc<RopeTable<T>>>,
        cache: BlockCache<'_, T>,
        counters: Option<&mut EvalCounters>,
    ) -> Result<(Var, Option<Var>)> {
        let cfg = &self.cfg;
        let heads = cfg.heads;
        let d = cfg.d_model;
        let eps = T::of(LN_EPS);
        let lora_scale = T::of(cfg.lora_alpha / cfg.lora_rank.max(1) as f64);
        let (mut read_entry, mut fill_slot) = (None, None);
        match cache {
            BlockCache::Off => {}
            BlockCache::Read(e) => read_entry = Some(e),
            BlockCache::Fill(s) => fill_slot = Some(s),
        }

        let mv_attn = mod_rows(tape, &bv.mod_attn, emb_v, d, ones)?;
        let mi_attn = match emb_i {
            Some(e) => Some(mod_rows(tape, &bv.mod_attn, e, d, ones)?),
            None => None,
        };

        // --- restricted self-attention ---
        let h_v = modulated_norm(tape, x_v, &mv_attn, eps)?;
        let q_v = tape.matmul(h_v, bv.attn.wq)?;
        let q_v = tape.rope(q_v, table_v, heads)?;
        let k_v = tape.matmul(h_v, bv.attn.wk)?;
        let k_v = tape.rope(k_v, table_v, heads)?;
        let v_v = tape.matmul(h_v, bv.attn.wv)?;

        let mut kv_i: Option<(Var, Var)> = None; // rotated image K, image V
        let mut q_i: Option<Var> = None;
        if let Some(entry) = read_entry {
            if x_i.is_some() {
                return Err(CoreError::Invalid(
                    "image tokens must not be supplied when reading cached K/V".into(),
                ));
            }
            if let Some(e) = entry {
                let n_i = cfg.n_image_tokens();
                if e.k_rot.shape() != [n_i, heads, cfg.head_dim] {
                    return Err(CoreError::Cache(format!(
                        "cache entry shape {:?} does not match [{n_i}, {heads}, {}]",
                        e.k_rot.shape(),
                        cfg.head_dim
                    )));
                }
                let k = tape.leaf(e.k_rot.reshape(&[n_i, d])?, false);
                let v = tape.leaf(e.v.reshape(&[n_i, d])?, false);
                kv_i = Some((k, v));
            }
        } else if let Some(xi) = x_i {
            if let Some(c) = counters {
                c.image_block_preattn += 1;
            }
            let table_i = table_i.expect("image rope table exists when image tokens do");
            let h_i = match &mi_attn {
                Some(m) => modulated_norm(tape, xi, m, eps)?,
                None => tape.layer_norm(xi, eps)?,
            };
            let lora = bv.lora.as_ref();
            let qi = lora_matmul(tape, h_i, bv.attn.wq, lora.map(|l| l.q), lora_scale)?;
            let qi = tape.rope(qi, table_i, heads)?;
            let ki = lora_matmul(tape, h_i, bv.attn.wk, lora.map(|l| l.k), lora_scale)?;
            let ki = tape.rope(ki, table_i, heads)?;
            let vi = lora_matmul(tape, h_i, bv.attn.wv, lora.map(|l| l.v), lora_scale)?;
            if let Some(slot) = fill_slot {
                if slot.is_some() {
                    return Err(CoreError::Cache("cache slot already filled".into()));
                }
                let n_i = cfg.n_image_tokens();
                *slot = Some(KvCacheEntry::new(
                    tape.value(ki).reshape(&[n_i, heads, cfg.head_dim])?,
                    tape.value(vi).reshape(&[n_i, heads, cfg.head_dim])?,
                )?);
            }
            kv_i = Some((ki, vi));
            q_i = Some(qi);
        }

        // Video queries see both streams' keys; image queries see image only.
        let (k_all, v_all) = match kv_i {
            Some((ki, vi)) => (tape.concat_rows(k_v, ki)?, tape.concat_rows(v_v, vi)?),
            None => (k_v, v_v),
        };
        let o_v = tape.attention(q_v, k_all, v_all, heads)?;
        let o_v = tape.matmul(o_v, bv.attn.wo)?;
        let o_v = tape.mul_row(o_v, mv_attn.gate)?;
        let mut out_v = tape.add(x_v, o_v)?;

        let mut out_i: Option<Var> = None;
        if let (Some(xi), Some(qi), Some((ki, vi))) = (x_i, q_i, kv_i) {
            let o_i = tape.attention(qi, ki, vi, heads)?;
            let o_i = tape.matmul(o_i, bv.attn.wo)?;
            let o_i = match &mi_attn {
                Some(m) => tape.mul_row(o_i, m.gate)?,
                None => o_i,
            };
            out_i = Some(tape.add(xi, o_i)?);
        }

        // --- cross-attention to prompt tokens (both streams, unmodulated) ---
        out_v = cross_graph(tape, &bv.cross, out_v, prompt, heads, eps)?;
        if let Some(xi) = out_i {
            out_i = Some(cross_graph(tape, &bv.cross, xi, prompt, heads, eps)?);
        }

        // --- feed-forward ---
        let mv_ffn = mod_rows(tape, &bv.mod_ffn, emb_v, d, ones)?;
        {
            let h = modulated_norm(tape, out_v, &mv_ffn, eps)?;
            let f = ffn_graph(tape, bv, h)?;
            let f = tape.mul_row(f, mv_ffn.gate)?;
            out_v = tape.add(out_v, f)?;
        }
        if let Some(xi) = out_i {
            let next = match emb_i {
                Some(e) => {
                    let mi_ffn = mod_rows(tape, &bv.mod_ffn, e, d, ones)?;
                    let h = modulated_norm(tape, xi, &mi_ffn, eps)?;
                    let f = ffn_graph(tape, bv, h)?;
                    let f = tape.mul_row(f, mi_ffn.gate)?;
                    tape.add(xi, f)?
                }
                None => {
                    let h = tape.layer_norm(xi, eps)?;
                    let f = ffn_graph(tape, bv, h)?;
                    tape.add(xi, f)?
                }
            };
            out_i = Some(next);
        }
        Ok((out_v, out_i))
    }

    /// Writes the model (config header + all weights, f32 payload) to one
    /// container file. Byte-stable for identical models.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = self.cfg.to_header(self.cpm);
        let mut owned: Vec<(String, Tensor<f32>)> = Vec::new();
        self.weights.visit(&mut |name, t| owned.push((name.to_string(), t.cast::<f32>())));
        let entries: Vec<(String, &Tensor<f32>)> =
            owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        stin::write_container(path, &header, &entries)
    }

    /// Loads a model saved by [`Model::save`], validating the header and
    /// every tensor name and shape.
    pub fn load(path: &Path) -> Result<Model<T>> {
        let (header, entries) = stin::read_container(path)?;
        let (cfg, cpm) = ModelConfig::parse_header(&header)?;
        let mut map: GradMap<T> = GradMap::new();
        for (name, t) in entries {
            if map.insert(name.clone(), t.cast::<T>()).is_some() {
                return Err(CoreError::Format(format!("duplicate tensor '{name}' in checkpoint")));
            }
        }
        let weights = Weights::from_map(&cfg, map)?;
        Model::new(cfg, cpm, weights)
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, l: &LinearV) -> Result<Var> {
    let y = tape.matmul(x, l.w)?;
    tape.add_row(y, l.b)
}

/// Computes (shift, 1+scale, gate) rows from a `[1,d]` embedding through a
/// `[d,3d]` modulation map.
fn mod_rows<T: Scalar>(
    tape: &mut Tape<T>,
    map: &LinearV,
    emb: Var,
    d: usize,
    ones: Var,
) -> Result<ModRows> {
    let m = linear(tape, emb, map)?; // [1, 3d]
    let shift = tape.slice_cols(m, 0, d)?;
    let shift = tape.reshape(shift, &[d])?;
    let scale = tape.slice_cols(m, d, d)?;
    let scale = tape.reshape(scale, &[d])?;
    let scale1p = tape.add(scale, ones)?;
    let gate = tape.slice_cols(m, 2 * d, d)?;
    let gate = tape.reshape(gate, &[d])?;
    Ok(ModRows { shift, scale1p, gate })
}

/// `LN(x)·(1+scale) + shift`, broadcast over rows.
fn modulated_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, m: &ModRows, eps: T) -> Result<Var> {
    let h = tape.layer_norm(x, eps)?;
    let h = tape.mul_row(h, m.scale1p)?;
    tape.add_row(h, m.shift)
}

/// `x·W` plus the low-rank delta `scale·(x·A)·B` when an adapter is present.
fn lora_matmul<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    lora: Option<LoraPairVars>,
    scale: T,
) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    match lora {
        None => Ok(base),
        Some(l) => {
            let xa = tape.matmul(x, l.a)?;
            let xab = tape.matmul(xa, l.b)?;
            let delta = tape.scale(xab, scale);
            tape.add(base, delta)
        }
    }
}

fn cross_graph<T: Scalar>(
    tape: &mut Tape<T>,
    cw: &ProjVars,
    x: Var,
    prompt: Var,
    heads: usize,
    eps: T,
) -> Result<Var> {
    let h = tape.layer_norm(x, eps)?;
    let q = tape.matmul(h, cw.wq)?;
    let k = tape.matmul(prompt, cw.wk)?;
    let v = tape.matmul(prompt, cw.wv)?;
    let o = tape.attention(q, k, v, heads)?;
    let o = tape.matmul(o, cw.wo)?;
    tape.add(x, o)
}

fn ffn_graph<T: Scalar>(tape: &mut Tape<T>, bv: &BlockVars, h: Var) -> Result<Var> {
    let a = linear(tape, h, &bv.ffn1)?;
    let a = tape.silu(a);
    linear(tape, a, &bv.ffn2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 6,
            n_blocks: 1,
            heads: 3,
            head_dim: 2,
            ffn_mult: 2,
            patch: (1, 2, 2),
            frames: 1,
            h_lat: 4,
            w_lat: 4,
            h_ref: 4,
            w_ref: 4,
            channels: 1,
            prompt_vocab: 2,
            prompt_len: 1,
            rope: RoPEConfig { head_dim: 2, split: (2, 0, 0), base: 10_000.0 },
            lora_rank: 1,
            lora_alpha: 1.0,
            modulate_image: true,
        }
    }

    fn rand_inputs(cfg: &ModelConfig, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = Rng::new(seed);
        let noisy = gaussian(&mut rng, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels]).unwrap();
        let refl = gaussian(&mut rng, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap();
        (noisy, refl)
    }

    #[test]
    fn patchify_single_patch_row_major() {
        let latent = Tensor::<f64>::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (tokens, grid) = patchify(&latent, (1, 2, 2)).unwrap();
        assert_eq!(grid, (1, 1, 1));
        assert_eq!(tokens.shape(), [1, 4]);
        assert_eq!(tokens.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patchify_round_trip_and_counts() {
        let mut rng = Rng::new(7);
        let latent: Tensor<f64> = gaussian(&mut rng, &[8, 16, 16, 3]).unwrap();
        let (tokens, grid) = patchify(&latent, (1, 2, 2)).unwrap();
        assert_eq!(grid, (8, 8, 8));
        assert_eq!(tokens.shape(), [512, 12]);
        let back = unpatchify(&tokens, grid, (1, 2, 2), 3).unwrap();
        assert!(back.bit_eq(&latent));
        // temporal patching too
        let (tokens2, grid2) = patchify(&latent, (2, 4, 2)).unwrap();
        assert_eq!(grid2, (4, 4, 8));
        let back2 = unpatchify(&tokens2, grid2, (2, 4, 2), 3).unwrap();
        assert!(back2.bit_eq(&latent));
    }

    #[test]
    fn patchify_rejects_indivisible_and_count_mismatch() {
        let latent = Tensor::<f64>::zeros(&[3, 4, 4, 1]);
        assert!(patchify(&latent, (2, 2, 2)).is_err());
        let tokens = Tensor::<f64>::zeros(&[5, 4]);
        assert!(unpatchify(&tokens, (1, 2, 2), (1, 2, 2), 1).is_err());
    }

    #[test]
    fn ref_patch_table_replicates_frame_across_temporal_patch() {
        // h=w=2, c=1, patch (2,2,2): one token of width 8, the frame twice.
        let table = ref_patch_table(2, 2, 1, (2, 2, 2));
        assert_eq!(table, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn sinusoid_matches_closed_form() {
        let t: Tensor<f64> = timestep_sinusoid(0.0, 8).unwrap();
        assert_eq!(&t.data()[..4], &[0.0; 4]);
        assert_eq!(&t.data()[4..], &[1.0; 4]);
        // s=0.5 → x=500, freqs 1, 1/10, 1/100, 1/1000.
        let t: Tensor<f64> = timestep_sinusoid(0.5, 8).unwrap();
        let expect = [
            500f64.sin(),
            50f64.sin(),
            5f64.sin(),
            0.5f64.sin(),
            500f64.cos(),
            50f64.cos(),
            5f64.cos(),
            0.5f64.cos(),
        ];
        for (a, b) in t.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(timestep_sinusoid::<f64>(1.5, 8).is_err());
        assert!(timestep_sinusoid::<f64>(0.5, 7).is_err());
    }

    #[test]
    fn timestep_pair_pins_reference_to_zero() {
        let p = TimestepPair::new(0.7).unwrap();
        assert_eq!(p.s, 0.7);
        assert_eq!(p.s_ref(), 0.0);
        assert!(TimestepPair::new(-0.1).is_err());
        assert!(TimestepPair::new(1.1).is_err());
        assert!(TimestepPair::new(f64::NAN).is_err());
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = ModelConfig::desk_default();
        assert!(cfg.validate().is_ok());
        cfg.d_model = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk_default();
        cfg.h_lat = 15;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk_default();
        cfg.rope.head_dim = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn canonical_name_streams_agree() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(cfg.clone(), true, 1).unwrap();
        let expected: Vec<String> = expected_entries(&cfg).into_iter().map(|(n, _)| n).collect();
        let mut visited = Vec::new();
        model.weights.visit(&mut |n, _| visited.push(n.to_string()));
        assert_eq!(visited, expected);
        let mut tape = Tape::new(false);
        let wv = model.lift_weights(&mut tape, TrainScope::All);
        let lifted: Vec<String> = wv.named().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(lifted, expected);
    }

    #[test]
    fn tiny_config_fits_gradcheck_budget() {
        let model = Model::<f64>::init(tiny_cfg(), true, 1).unwrap();
        assert_eq!(model.n_params(), 892);
        assert!(model.n_params() <= 1000);
    }

    #[test]
    fn fresh_model_predicts_exactly_zero() {
        let cfg = ModelConfig::desk_default();
        let model = Model::<f32>::init(cfg.clone(), true, 42).unwrap();
        let mut rng = Rng::new(5);
        let noisy: Tensor<f32> =
            gaussian(&mut rng, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels]).unwrap();
        let refl: Tensor<f32> = gaussian(&mut rng, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap();
        let out = model.forward(&noisy, Some(&refl), &[3], 0.5, CacheCtl::Off, None).unwrap();
        assert_eq!(out.shape(), noisy.shape());
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let mut m1 = Model::<f64>::init(cfg.clone(), true, 9).unwrap();
        let mut m2 = Model::<f64>::init(cfg.clone(), true, 9).unwrap();
        let m3 = Model::<f64>::init(cfg.clone(), true, 10).unwrap();
        let mut rng = Rng::new(1);
        m1.weights.jitter(&mut rng, 0.2).unwrap();
        let mut rng = Rng::new(1);
        m2.weights.jitter(&mut rng, 0.2).unwrap();
        let (noisy, refl) = rand_inputs(&cfg, 2);
        let a = m1.forward(&noisy, Some(&refl), &[1], 0.3, CacheCtl::Off, None).unwrap();
        let b = m2.forward(&noisy, Some(&refl), &[1], 0.3, CacheCtl::Off, None).unwrap();
        assert!(a.bit_eq(&b));
        let mut differs = false;
        let mut it = Vec::new();
        m3.weights.visit(&mut |_, t| it.push(t.clone()));
        let mut it1 = Vec::new();
        m1.weights.visit(&mut |_, t| it1.push(t.clone()));
        for (x, y) in it.iter().zip(it1.iter()) {
            if !x.bit_eq(y) {
                differs = true;
            }
        }
        assert!(differs, "different seeds must give different weights");
    }

    #[test]
    fn block_image_stream_ignores_video_tokens() {
        let cfg = tiny_cfg();
        let mut model = Model::<f64>::init(cfg.clone(), true, 3).unwrap();
        let mut rng = Rng::new(4);
        model.weights.jitter(&mut rng, 0.3).unwrap();
        let n_v = cfg.n_video_tokens();
        let n_i = cfg.n_image_tokens();
        let video_a: Tensor<f64> = gaussian(&mut rng, &[n_v, cfg.d_model]).unwrap();
        let video_b: Tensor<f64> = gaussian(&mut rng, &[n_v, cfg.d_model]).unwrap();
        let image: Tensor<f64> = gaussian(&mut rng, &[n_i, cfg.d_model]).unwrap();
        let prompt = model.weights.prompt_table.gather_rows(&[0]).unwrap();
        let pair = TimestepPair::new(0.6).unwrap();
        let (_, ia) = model.block_forward(0, &video_a, Some(&image), &prompt, pair, None).unwrap();
        let (_, ib) = model.block_forward(0, &video_b, Some(&image), &prompt, pair, None).unwrap();
        assert!(ia.unwrap().bit_eq(&ib.unwrap()), "image stream must not depend on video tokens");
    }

    #[test]
    fn block_cached_matches_uncached() {
        let cfg = ModelConfig::desk_default();
        let mut model = Model::<f32>::init(cfg.clone(), true, 11).unwrap();
        let mut rng = Rng::new(12);
        model.weights.jitter(&mut rng, 0.1).unwrap();
        let (noisy, refl) = {
            let mut r2 = Rng::new(13);
            let n: Tensor<f32> =
                gaussian(&mut r2, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels]).unwrap();
            let rf: Tensor<f32> = gaussian(&mut r2, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap();
            (n, rf)
        };
        // Fill a session cache with one forward pass.
        let mut cache = SessionCache::new(cfg.n_blocks);
        let mut counters = EvalCounters::default();
        let full = model
            .forward(&noisy, Some(&refl), &[2], 0.8, CacheCtl::Fill(&mut cache), Some(&mut counters))
            .unwrap();
        assert!(cache.is_filled());
        let expected = EvalCounters {
            model_evals: 1,
            image_preattn_evals: 1,
            image_block_preattn: cfg.n_blocks as u64,
        };
        assert_eq!(counters, expected);
        // Now drive one block both ways on identical token inputs.
        let n_v = cfg.n_video_tokens();
        let video: Tensor<f32> = gaussian(&mut rng, &[n_v, cfg.d_model]).unwrap();
        let prompt = model.weights.prompt_table.gather_rows(&[2]).unwrap();
        let pair = TimestepPair::new(0.8).unwrap();
        // Build the cache entry that the uncached path would produce: run the
        // block uncached first, then read the same K/V from the filled cache
        // produced by a forward whose block-0 image tokens match.
        // Simpler equivalence: use the model-level cache for the same inputs.
        let read = model
            .forward(&noisy, Some(&refl), &[2], 0.8, CacheCtl::Read(&cache), None)
            .unwrap();
        assert!(
            full.max_abs_diff(&read) < 1e-6,
            "cached and uncached forward disagree: {}",
            full.max_abs_diff(&read)
        );
        // And the block-level API roundtrip: cached call with entry 0.
        let entry = cache.entries()[0].clone().unwrap();
        let (v_cached, none_img) =
            model.block_forward(0, &video, None, &prompt, pair, Some(&entry)).unwrap();
        assert!(none_img.is_none());
        // Uncached block with the true block-0 image tokens would require
        // reconstructing them; instead verify the cached path is deterministic
        // and consistent across calls.
        let (v_cached2, _) =
            model.block_forward(0, &video, None, &prompt, pair, Some(&entry)).unwrap();
        assert!(v_cached.bit_eq(&v_cached2));
    }

    #[test]
    fn cache_misuse_is_an_error() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(cfg.clone(), true, 21).unwrap();
        let (noisy, refl) = rand_inputs(&cfg, 22);
        let mut cache = SessionCache::new(cfg.n_blocks);
        // Reading before filling.
        let err = model
            .forward(&noisy, Some(&refl), &[0], 0.5, CacheCtl::Read(&cache), None)
            .unwrap_err();
        assert!(matches!(err, CoreError::Cache(_)));
        // Filling twice.
        model
            .forward(&noisy, Some(&refl), &[0], 0.5, CacheCtl::Fill(&mut cache), None)
            .unwrap();
        let err = model
            .forward(&noisy, Some(&refl), &[0], 0.5, CacheCtl::Fill(&mut cache), None)
            .unwrap_err();
        assert!(matches!(err, CoreError::Cache(_)));
        // Reading with a reference mismatch (cache has image entries).
        let err =
            model.forward(&noisy, None, &[0], 0.5, CacheCtl::Read(&cache), None).unwrap_err();
        assert!(matches!(err, CoreError::Cache(_)));
        // Wrong-shape cache entry at the block level.
        let bad = KvCacheEntry::new(
            Tensor::<f64>::zeros(&[3, cfg.heads, cfg.head_dim]),
            Tensor::<f64>::zeros(&[3, cfg.heads, cfg.head_dim]),
        )
        .unwrap();
        let video = Tensor::<f64>::zeros(&[cfg.n_video_tokens(), cfg.d_model]);
        let prompt = Tensor::<f64>::zeros(&[1, cfg.d_model]);
        let pair = TimestepPair::new(0.5).unwrap();
        let err = model.block_forward(0, &video, None, &prompt, pair, Some(&bad)).unwrap_err();
        assert!(matches!(err, CoreError::Cache(_)));
    }

    #[test]
    fn video_only_model_runs_without_reference() {
        let mut cfg = tiny_cfg();
        cfg.lora_rank = 0;
        let model = Model::<f64>::init(cfg.clone(), true, 31).unwrap();
        // No adapter tensors exist in the vanilla configuration.
        let mut names = Vec::new();
        model.weights.visit(&mut |n, _| names.push(n.to_string()));
        assert!(names.iter().all(|n| !n.contains(".lora_")));
        let (noisy, _) = rand_inputs(&cfg, 32);
        let out = model.forward(&noisy, None, &[1], 0.4, CacheCtl::Off, None).unwrap();
        assert_eq!(out.shape(), noisy.shape());
    }

    #[test]
    fn lora_only_scope_trains_exactly_the_adapters() {
        // Two blocks so block-0 Q adapters influence the loss through the
        // downstream image stream. Final-block Q adapters are structurally
        // gradient-free: the last image-attention output is discarded, so
        // only that block's K/V adapters reach the video stream.
        let mut cfg = tiny_cfg();
        cfg.n_blocks = 2;
        let mut model = Model::<f64>::init(cfg.clone(), true, 41).unwrap();
        let mut rng = Rng::new(42);
        model.weights.jitter(&mut rng, 0.3).unwrap();
        let (noisy, refl) = rand_inputs(&cfg, 43);
        let mut tape = Tape::new(true);
        let wv = model.lift_weights(&mut tape, TrainScope::LoraOnly);
        let out = model.traced_velocity(&mut tape, &wv, &noisy, Some(&refl), &[1], 0.5).unwrap();
        let loss = tape.sum_sq(out);
        let mut grads = tape.backward(loss).unwrap();
        let map = wv.grads_by_name(&mut grads);
        let keys: Vec<String> = map.keys().cloned().collect();
        let want: Vec<String> = [
            "block0.lora_q.A",
            "block0.lora_q.B",
            "block0.lora_k.A",
            "block0.lora_k.B",
            "block0.lora_v.A",
            "block0.lora_v.B",
            "block1.lora_k.A",
            "block1.lora_k.B",
            "block1.lora_v.A",
            "block1.lora_v.B",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut want_sorted = want;
        want_sorted.sort();
        assert_eq!(keys, want_sorted, "adapter gradient key set");
        assert!(
            map.values().any(|g| g.data().iter().any(|&x| x != 0.0)),
            "jittered model must give nonzero adapter gradients"
        );
        // Full scope: every tensor except the final block's Q adapters.
        let mut tape = Tape::new(true);
        let wv = model.lift_weights(&mut tape, TrainScope::All);
        let out = model.traced_velocity(&mut tape, &wv, &noisy, Some(&refl), &[1], 0.5).unwrap();
        let loss = tape.sum_sq(out);
        let mut grads = tape.backward(loss).unwrap();
        let map = wv.grads_by_name(&mut grads);
        assert_eq!(map.len(), expected_entries(&cfg).len() - 2);
        assert!(!map.contains_key("block1.lora_q.A"));
        assert!(!map.contains_key("block1.lora_q.B"));
    }

    #[test]
    fn backprop_matches_finite_differences_on_sampled_weights() {
        let cfg = tiny_cfg();
        let mut model = Model::<f64>::init(cfg.clone(), true, 51).unwrap();
        let mut rng = Rng::new(52);
        model.weights.jitter(&mut rng, 0.4).unwrap();
        let (noisy, refl) = rand_inputs(&cfg, 53);
        let mut trng = Rng::new(54);
        let target: Tensor<f64> =
            gaussian(&mut trng, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels]).unwrap();
        let loss_of = |m: &Model<f64>| -> f64 {
            let mut tape = Tape::new(false);
            let wv = m.lift_weights(&mut tape, TrainScope::All);
            let out = m.traced_velocity(&mut tape, &wv, &noisy, Some(&refl), &[1], 0.5).unwrap();
            let t = tape.leaf(target.clone(), false);
            let d = tape.sub(out, t).unwrap();
            let ss = tape.sum_sq(d);
            tape.value(ss).data()[0] / target.numel() as f64
        };
        // Analytic gradients.
        let mut tape = Tape::new(true);
        let wv = model.lift_weights(&mut tape, TrainScope::All);
        let out = model.traced_velocity(&mut tape, &wv, &noisy, Some(&refl), &[1], 0.5).unwrap();
        let t = tape.leaf(target.clone(), false);
        let d = tape.sub(out, t).unwrap();
        let ss = tape.sum_sq(d);
        let loss = tape.scale(ss, 1.0 / target.numel() as f64);
        let mut grads = tape.backward(loss).unwrap();
        let map = wv.grads_by_name(&mut grads);
        // Check one coordinate in a handful of structurally distinct tensors.
        let probes = [
            "embed.patch.w",
            "block0.attn.wq",
            "block0.lora_k.A",
            "block0.mod_attn.w",
            "block0.ffn.w1",
            "head.w",
        ];
        let h = 1e-5;
        for name in probes {
            let g = &map[name];
            let idx = g.numel() / 2;
            let analytic = g.data()[idx];
            let mut plus = model.clone();
            plus.weights.visit_mut(&mut |n, t| {
                if n == name {
                    let mut d = t.data().to_vec();
                    d[idx] += h;
                    *t = Tensor::new(t.shape(), d).unwrap();
                }
            });
            let mut minus = model.clone();
            minus.weights.visit_mut(&mut |n, t| {
                if n == name {
                    let mut d = t.data().to_vec();
                    d[idx] -= h;
                    *t = Tensor::new(t.shape(), d).unwrap();
                }
            });
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let denom = numeric.abs().max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3,
                "{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.stnc");
        let cfg = tiny_cfg();
        let mut model = Model::<f32>::init(cfg.clone(), false, 61).unwrap();
        let mut rng = Rng::new(62);
        model.weights.jitter(&mut rng, 0.2).unwrap();
        model.save(&path).unwrap();
        let loaded = Model::<f32>::load(&path).unwrap();
        assert_eq!(loaded.cfg, cfg);
        assert!(!loaded.cpm);
        let mut orig = Vec::new();
        model.weights.visit(&mut |_, t| orig.push(t.clone()));
        let mut back = Vec::new();
        loaded.weights.visit(&mut |_, t| back.push(t.clone()));
        assert_eq!(orig.len(), back.len());
        for (a, b) in orig.iter().zip(back.iter()) {
            assert!(a.bit_eq(b));
        }
        // Saving twice is byte-identical.
        let path2 = dir.path().join("model2.stnc");
        model.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_with_missing_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.stnc");
        let model = Model::<f32>::init(tiny_cfg(), true, 71).unwrap();
        model.save(&path).unwrap();
        let (header, mut entries) = stin::read_container(&path).unwrap();
        entries.remove(3);
        let bad = dir.path().join("bad.stnc");
        let refs: Vec<(String, &Tensor<f32>)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        stin::write_container(&bad, &header, &refs).unwrap();
        let err = Model::<f32>::load(&bad).unwrap_err();
        assert!(matches!(err, CoreError::Format(_)), "got {err:?}");
    }

    #[test]
    fn header_round_trip_and_rejects_garbage() {
        let cfg = ModelConfig::desk_default();
        let (parsed, cpm) = ModelConfig::parse_header(&cfg.to_header(true)).unwrap();
        assert_eq!(parsed, cfg);
        assert!(cpm);
        assert!(ModelConfig::parse_header("nonsense").is_err());
        let mut broken = cfg.to_header(true);
        broken.push_str("extra=1\n");
        assert!(ModelConfig::parse_header(&broken).is_err());
    }

    #[test]
    fn prompt_validation() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(cfg.clone(), true, 81).unwrap();
        let (noisy, refl) = rand_inputs(&cfg, 82);
        let err =
            model.forward(&noisy, Some(&refl), &[5], 0.5, CacheCtl::Off, None).unwrap_err();
        assert!(matches!(err, CoreError::Invalid(_)));
        let err = model.forward(&noisy, Some(&refl), &[], 0.5, CacheCtl::Off, None).unwrap_err();
        assert!(matches!(err, CoreError::Invalid(_)));
    }

    #[test]
    fn jitter_moves_every_tensor() {
        let cfg = tiny_cfg();
        let mut model = Model::<f64>::init(cfg, true, 91).unwrap();
        let before = model.weights.clone();
        let mut rng = Rng::new(92);
        model.weights.jitter(&mut rng, 0.1).unwrap();
        let mut moved = 0;
        let mut total = 0;
        let mut b = Vec::new();
        before.visit(&mut |_, t| b.push(t.clone()));
        let mut a = Vec::new();
        model.weights.visit(&mut |_, t| a.push(t.clone()));
        for (x, y) in b.iter().zip(a.iter()) {
            total += 1;
            if !x.bit_eq(y) {
                moved += 1;
            }
        }
        assert_eq!(moved, total);
    }
}
