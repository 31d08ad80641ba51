//! Procedural identity-glyph dataset.
//!
//! Each identity is a small seeded random color grid (a "glyph"). The
//! reference image places the glyph centered on an exactly-white canvas, so it
//! carries zero background information. Videos composite the same glyph onto
//! seeded low-frequency clutter along one of six motion classes (four
//! translations, two rotations); the prompt id is the motion class and fully
//! determines the trajectory, so the only per-sample randomness is the
//! identity itself and the clutter. Pixel tensors are downsampled by average
//! pooling into the latents the model consumes.
//!
//! Everything is a pure function of `(seed, config)`: regenerating a dataset
//! reproduces every file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{substream, Rng};
use crate::stin;
use crate::tensor::Tensor;

/// Bump when generated bytes change meaning.
pub const GENERATOR_VERSION: u32 = 1;

/// Motion classes, indexed by prompt id.
pub const MOTION_CLASSES: [&str; 6] = ["left", "right", "up", "down", "rotate-cw", "rotate-ccw"];

/// Minimum RGB distance at which two glyph cells count as distinguishable.
const CELL_DISTANCE: f64 = 0.05;
/// Fraction of cells that must be distinguishable from their nearest neighbor.
const DISTINGUISHABLE_FRACTION: f64 = 0.25;
/// Rejection-resampling budget for [`generate_identity`].
const MAX_REJECTS: u64 = 16;
/// Clutter values stay inside [CLUTTER_MIN, CLUTTER_MAX]: bounded away from
/// white so the background is never confusable with the reference canvas, and
/// low-contrast so the unpredictable background does not drown the identity
/// signal the reference branch is supposed to supply.
const CLUTTER_MIN: f32 = 0.65;
/// Upper clutter bound (kept off pure white).
const CLUTTER_MAX: f32 = 0.80;
/// Coarse clutter grid resolution (per axis) before bilinear upsampling.
const CLUTTER_GRID: usize = 4;
/// Per-frame displacement of the translation classes, in pixels.
const TRANSLATE_STEP: usize = 2;
/// Perpendicular offset of the translation paths from the frame center, in
/// pixels, keeping the moving glyph clear of the centered reference placement.
const PERP_OFFSET: usize = 4;

/// Generation parameters. Defaults match the desk-scale model configuration
/// after 2x pooling (reference 16 px -> 8, video 32 px -> 16).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Glyph side length in pixels.
    pub glyph: usize,
    /// Reference canvas side length in pixels.
    pub ref_px: usize,
    /// Frames per video.
    pub frames: usize,
    /// Video side length in pixels.
    pub video_px: usize,
    /// Average-pooling factor from pixels to latents.
    pub pool: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { glyph: 8, ref_px: 16, frames: 8, video_px: 32, pool: 2 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.glyph == 0 || self.frames == 0 || self.pool == 0 {
            return Err(CoreError::Config(
                "glyph, frames and pool must all be positive".into(),
            ));
        }
        if self.glyph > self.ref_px {
            return Err(CoreError::Config(format!(
                "glyph {} does not fit the {} px reference canvas",
                self.glyph, self.ref_px
            )));
        }
        if self.glyph > self.video_px {
            return Err(CoreError::Config(format!(
                "glyph {} does not fit the {} px video frame",
                self.glyph, self.video_px
            )));
        }
        if self.ref_px % self.pool != 0 || self.video_px % self.pool != 0 {
            return Err(CoreError::Config(format!(
                "canvas sizes ({}, {}) must be divisible by the pooling factor {}",
                self.ref_px, self.video_px, self.pool
            )));
        }
        Ok(())
    }
}

/// A seeded glyph: the identity each sample must preserve.
#[derive(Debug, Clone)]
pub struct Identity {
    pub seed: u64,
    /// `[g, g, 3]` colors in [0, 1].
    pub glyph: Tensor<f32>,
}

fn distinguishable_fraction(glyph: &Tensor<f32>) -> f64 {
    let g = glyph.dim(0);
    let cells = g * g;
    let data = glyph.data();
    let mut ok = 0usize;
    for i in 0..cells {
        let mut nearest = f64::INFINITY;
        for j in 0..cells {
            if i == j {
                continue;
            }
            let mut d2 = 0.0f64;
            for ch in 0..3 {
                let diff = (data[i * 3 + ch] - data[j * 3 + ch]) as f64;
                d2 += diff * diff;
            }
            nearest = nearest.min(d2.sqrt());
        }
        if nearest >= CELL_DISTANCE {
            ok += 1;
        }
    }
    ok as f64 / cells as f64
}

/// Draws a `g x g` random color grid, rejecting draws whose cells are too
/// similar (fewer than 25% distinguishable from their nearest neighbor).
/// Rejection reseeds deterministically, so the result is a pure function of
/// the seed.
pub fn generate_identity(seed: u64, g: usize) -> Result<Identity> {
    if g == 0 {
        return Err(CoreError::Invalid("glyph size must be positive".into()));
    }
    for attempt in 0..MAX_REJECTS {
        let mut rng = Rng::new(substream(seed, attempt));
        let data: Vec<f32> = (0..g * g * 3).map(|_| rng.next_f64() as f32).collect();
        let glyph = Tensor::new(&[g, g, 3], data)?;
        if g == 1 || distinguishable_fraction(&glyph) >= DISTINGUISHABLE_FRACTION {
            return Ok(Identity { seed, glyph });
        }
    }
    Err(CoreError::Data(format!(
        "identity seed {seed}: no distinguishable glyph within {MAX_REJECTS} draws"
    )))
}

/// Centers the glyph on an exactly-white `h x w` canvas.
pub fn render_reference(id: &Identity, h_px: usize, w_px: usize) -> Result<Tensor<f32>> {
    let g = id.glyph.dim(0);
    if g > h_px || g > w_px {
        return Err(CoreError::Invalid(format!(
            "glyph {g} px does not fit a {h_px}x{w_px} canvas"
        )));
    }
    let (top, left) = ((h_px - g) / 2, (w_px - g) / 2);
    let mut data = vec![1.0f32; h_px * w_px * 3];
    let glyph = id.glyph.data();
    for y in 0..g {
        for x in 0..g {
            for ch in 0..3 {
                data[((top + y) * w_px + left + x) * 3 + ch] = glyph[(y * g + x) * 3 + ch];
            }
        }
    }
    Tensor::new(&[h_px, w_px, 3], data)
}

/// Low-frequency clutter: a coarse random grid bilinearly upsampled, with
/// values confined to the low-contrast band [`CLUTTER_MIN`, `CLUTTER_MAX`].
fn clutter_background(rng: &mut Rng, h: usize, w: usize) -> Vec<f32> {
    let gh = CLUTTER_GRID.min(h);
    let gw = CLUTTER_GRID.min(w);
    let coarse: Vec<f32> = (0..gh * gw * 3)
        .map(|_| CLUTTER_MIN + rng.next_f64() as f32 * (CLUTTER_MAX - CLUTTER_MIN))
        .collect();
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        // Sample coarse cell centers (half-pixel convention), clamped at the edges.
        let fy = ((y as f64 + 0.5) * gh as f64 / h as f64 - 0.5).clamp(0.0, (gh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * gw as f64 / w as f64 - 0.5).clamp(0.0, (gw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let tx = (fx - x0 as f64) as f32;
            for ch in 0..3 {
                let c00 = coarse[(y0 * gw + x0) * 3 + ch];
                let c01 = coarse[(y0 * gw + x1) * 3 + ch];
                let c10 = coarse[(y1 * gw + x0) * 3 + ch];
                let c11 = coarse[(y1 * gw + x1) * 3 + ch];
                let top = c00 + (c01 - c00) * tx;
                let bot = c10 + (c11 - c10) * tx;
                out[(y * w + x) * 3 + ch] = (top + (bot - top) * ty).min(CLUTTER_MAX);
            }
        }
    }
    out
}

fn translation_trajectory(
    prompt_id: usize,
    frames: usize,
    limit_h: usize,
    limit_w: usize,
) -> Result<Vec<(usize, usize)>> {
    let span = TRANSLATE_STEP * (frames - 1);
    let (limit_primary, limit_perp) = match prompt_id {
        0 | 1 => (limit_w, limit_h), // horizontal motion
        _ => (limit_h, limit_w),     // vertical motion
    };
    if span > limit_primary {
        return Err(CoreError::Invalid(format!(
            "translation span {span} px exceeds the available {limit_primary} px"
        )));
    }
    // Deterministic placement: the travel is centered on the primary axis and
    // offset from center on the perpendicular axis, so each motion class puts
    // the glyph on its own repeatable path that never coincides with the
    // centered reference placement.
    let start = (limit_primary - span) / 2;
    let perp = (limit_perp / 2 + PERP_OFFSET).min(limit_perp);
    let mut traj = Vec::with_capacity(frames);
    for f in 0..frames {
        let primary = match prompt_id {
            1 | 3 => start + TRANSLATE_STEP * f,        // right, down: increasing
            _ => start + span - TRANSLATE_STEP * f,     // left, up: decreasing
        };
        traj.push(match prompt_id {
            0 | 1 => (perp, primary), // (h, w)
            _ => (primary, perp),
        });
    }
    Ok(traj)
}

fn rotation_trajectory(
    clockwise: bool,
    frames: usize,
    g: usize,
    h: usize,
    w: usize,
) -> Result<Vec<(usize, usize)>> {
    let radius = (h.min(w) / 4) as f64;
    let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
    let phase = 0.0;
    let dir = if clockwise { 1.0 } else { -1.0 };
    let mut traj = Vec::with_capacity(frames);
    for f in 0..frames {
        let theta = phase + dir * std::f64::consts::TAU * f as f64 / frames as f64;
        let top = ch + radius * theta.sin() - g as f64 / 2.0;
        let left = cw + radius * theta.cos() - g as f64 / 2.0;
        let (top, left) = (top.round() as i64, left.round() as i64);
        if top < 0 || left < 0 || top as usize + g > h || left as usize + g > w {
            return Err(CoreError::Invalid(format!(
                "rotation radius {radius} px pushes the glyph outside the {h}x{w} frame"
            )));
        }
        traj.push((top as usize, left as usize));
    }
    Ok(traj)
}

/// Composites the glyph over seeded clutter along the motion class's
/// deterministic trajectory. Returns the `[F, H, W, 3]` video and the
/// per-frame glyph top-left corners. Compositing overwrites, so the glyph
/// patch can be recovered exactly from any frame; only the identity and the
/// clutter vary with the seed.
pub fn render_video(
    id: &Identity,
    prompt_id: usize,
    rng: &mut Rng,
    frames: usize,
    h_px: usize,
    w_px: usize,
) -> Result<(Tensor<f32>, Vec<(usize, usize)>)> {
    if prompt_id >= MOTION_CLASSES.len() {
        return Err(CoreError::Invalid(format!(
            "prompt id {prompt_id} out of range ({} motion classes)",
            MOTION_CLASSES.len()
        )));
    }
    if frames == 0 {
        return Err(CoreError::Invalid("video needs at least one frame".into()));
    }
    let g = id.glyph.dim(0);
    if g > h_px || g > w_px {
        return Err(CoreError::Invalid(format!(
            "glyph {g} px does not fit a {h_px}x{w_px} frame"
        )));
    }
    let (limit_h, limit_w) = (h_px - g, w_px - g);
    let background = clutter_background(rng, h_px, w_px);
    let traj = match prompt_id {
        0..=3 => translation_trajectory(prompt_id, frames, limit_h, limit_w)?,
        4 => rotation_trajectory(true, frames, g, h_px, w_px)?,
        _ => rotation_trajectory(false, frames, g, h_px, w_px)?,
    };
    let glyph = id.glyph.data();
    let mut data = Vec::with_capacity(frames * h_px * w_px * 3);
    for &(top, left) in &traj {
        let mut frame = background.clone();
        for y in 0..g {
            for x in 0..g {
                for ch in 0..3 {
                    frame[((top + y) * w_px + left + x) * 3 + ch] = glyph[(y * g + x) * 3 + ch];
                }
            }
        }
        data.extend_from_slice(&frame);
    }
    Ok((Tensor::new(&[frames, h_px, w_px, 3], data)?, traj))
}

/// Average-pools the spatial dimensions of a `[H,W,c]` image or `[F,H,W,c]`
/// video by `pool`. Constant regions (like the white reference background)
/// keep their exact value.
pub fn downsample_latent(pixels: &Tensor<f32>, pool: usize) -> Result<Tensor<f32>> {
    if pool == 0 {
        return Err(CoreError::Invalid("pooling factor must be positive".into()));
    }
    let (frames, h, w, c, is_video) = match pixels.ndim() {
        3 => (1, pixels.dim(0), pixels.dim(1), pixels.dim(2), false),
        4 => (pixels.dim(0), pixels.dim(1), pixels.dim(2), pixels.dim(3), true),
        _ => {
            return Err(CoreError::Shape(format!(
                "expected [H,W,c] or [F,H,W,c], got {:?}",
                pixels.shape()
            )))
        }
    };
    if h % pool != 0 || w % pool != 0 {
        return Err(CoreError::Invalid(format!(
            "spatial dims ({h}, {w}) not divisible by pooling factor {pool}"
        )));
    }
    let (oh, ow) = (h / pool, w / pool);
    let src = pixels.data();
    let inv = 1.0f32 / (pool * pool) as f32;
    let mut out = Vec::with_capacity(frames * oh * ow * c);
    for f in 0..frames {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for dy in 0..pool {
                        for dx in 0..pool {
                            acc += src[((f * h + y * pool + dy) * w + x * pool + dx) * c + ch];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
    }
    if is_video {
        Tensor::new(&[frames, oh, ow, c], out)
    } else {
        Tensor::new(&[oh, ow, c], out)
    }
}

/// Per-sample metadata stored next to the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: usize,
    pub prompt_id: usize,
    pub id_seed: u64,
    pub video_seed: u64,
    pub held_out: bool,
    /// Per-frame glyph top-left corner `(h, w)` in pixels.
    pub trajectory: Vec<(usize, usize)>,
}

/// One manifest line per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub dir: String,
    pub prompt_id: usize,
    pub id_seed: u64,
    pub video_seed: u64,
    pub held_out: bool,
}

/// Dataset-level index: counts, seeds, split assignment, generator version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub n: usize,
    pub config: DataConfig,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn train_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| !e.held_out)
    }

    pub fn held_out_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.held_out)
    }
}

/// Directory for one sample, under the dataset root.
pub fn sample_dir(root: &Path, entry: &ManifestEntry) -> PathBuf {
    root.join(&entry.dir)
}

/// Generates `n` samples under `root`: one identity per sample, prompt id
/// cycling through the motion classes, the last `max(1, n/8)` identities held
/// out (a 7:1 split). Layout: `root/<id>/{ref.stin, video.stin, meta.json}`
/// plus `root/manifest.json`. Bit-identical across regenerations.
pub fn make_dataset(root: &Path, cfg: &DataConfig, n: usize, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    if n == 0 {
        return Err(CoreError::Invalid("dataset needs at least one sample".into()));
    }
    let held_out_from = n - (n / 8).max(1).min(n);
    fs::create_dir_all(root)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id_seed = substream(seed, 2 * i as u64);
        let video_seed = substream(seed, 2 * i as u64 + 1);
        let prompt_id = i % MOTION_CLASSES.len();
        let identity = generate_identity(id_seed, cfg.glyph)?;
        let reference = render_reference(&identity, cfg.ref_px, cfg.ref_px)?;
        let mut vrng = Rng::new(video_seed);
        let (video, trajectory) =
            render_video(&identity, prompt_id, &mut vrng, cfg.frames, cfg.video_px, cfg.video_px)?;
        let dir_name = format!("{i:04}");
        let dir = root.join(&dir_name);
        fs::create_dir_all(&dir)?;
        stin::write_tensor(&dir.join("ref.stin"), &reference)?;
        stin::write_tensor(&dir.join("video.stin"), &video)?;
        let meta = SampleMeta {
            id: i,
            prompt_id,
            id_seed,
            video_seed,
            held_out: i >= held_out_from,
            trajectory,
        };
        let meta_json = serde_json::to_string_pretty(&meta)
            .map_err(|e| CoreError::Format(format!("meta serialization: {e}")))?;
        fs::write(dir.join("meta.json"), meta_json + "\n")?;
        entries.push(ManifestEntry {
            id: i,
            dir: dir_name,
            prompt_id,
            id_seed,
            video_seed,
            held_out: i >= held_out_from,
        });
    }
    let manifest =
        DatasetManifest { version: GENERATOR_VERSION, seed, n, config: cfg.clone(), entries };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Format(format!("manifest serialization: {e}")))?;
    fs::write(root.join("manifest.json"), manifest_json + "\n")?;
    Ok(manifest)
}

/// Reads `root/manifest.json`.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CoreError::Data(format!("{}: malformed manifest: {e}", path.display())))
}

/// A sample loaded back from disk (pixel space).
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub reference: Tensor<f32>,
    pub video: Tensor<f32>,
    pub meta: SampleMeta,
}

/// Reads one sample directory written by [`make_dataset`].
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<LoadedSample> {
    let dir = sample_dir(root, entry);
    let reference = stin::read_tensor(&dir.join("ref.stin"))?;
    let video = stin::read_tensor(&dir.join("video.stin"))?;
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| CoreError::Data(format!("{}: {e}", meta_path.display())))?;
    let meta: SampleMeta = serde_json::from_str(&text)
        .map_err(|e| CoreError::Data(format!("{}: malformed meta: {e}", meta_path.display())))?;
    Ok(LoadedSample { reference, video, meta })
}
