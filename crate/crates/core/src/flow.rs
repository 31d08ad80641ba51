//! Rectified-flow training objective and Euler sampler with KV caching.
//!
//! Training pairs a clean latent `x0` with gaussian noise `ε` along the
//! straight path `x_s = (1−s)·x0 + s·ε` and regresses the model onto the
//! constant path velocity `ε − x0`. Sampling starts from pure noise at `s=1`
//! and Euler-integrates the learned velocity down to `s=0`; because the
//! reference image never changes across steps, its per-block K/V can be
//! computed on the first step and reused on every subsequent one.
//!
//! [`sample_inpaint`] is the region-conditioned variant: cells where the mask
//! is 0 are pinned to the forward-interpolated known video before every model
//! evaluation (and to the known video itself at the end), while cells where
//! the mask is 1 are generated under reference conditioning.

use crate::dit::{CacheCtl, EvalCounters, GradMap, Model, SessionCache, TrainScope};
use crate::error::{CoreError, Result};
use crate::rng::{gaussian, Rng};
use crate::scalar::Scalar;
use crate::autodiff::Tape;
use crate::tensor::{select, Tensor};

/// Integration timesteps, largest first, all in `(0, 1]`. The sampler
/// evaluates the model at each listed `s` and lands exactly at `s = 0` after
/// the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: Vec<f64>,
}

impl NoiseSchedule {
    /// Uniform `n`-step schedule: `1, (n−1)/n, …, 1/n`.
    pub fn uniform(n: usize) -> Result<NoiseSchedule> {
        if n == 0 {
            return Err(CoreError::Invalid("schedule needs at least one step".into()));
        }
        NoiseSchedule::from_timesteps((0..n).map(|k| (n - k) as f64 / n as f64).collect())
    }

    /// Validates a custom schedule: nonempty, strictly decreasing, in (0,1].
    pub fn from_timesteps(timesteps: Vec<f64>) -> Result<NoiseSchedule> {
        if timesteps.is_empty() {
            return Err(CoreError::Invalid("schedule needs at least one step".into()));
        }
        for &s in &timesteps {
            if !s.is_finite() || !(s > 0.0 && s <= 1.0) {
                return Err(CoreError::Invalid(format!("timestep {s} outside (0, 1]")));
            }
        }
        if timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(CoreError::Invalid("timesteps must be strictly decreasing".into()));
        }
        Ok(NoiseSchedule { timesteps })
    }

    pub fn n_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }
}

/// One training example: clean latent, optional reference, prompt, noise
/// draw and path position.
#[derive(Debug, Clone)]
pub struct TrainItem<T: Scalar> {
    /// Clean video latent `[F,H,W,c]`.
    pub x0: Tensor<T>,
    /// Reference latent `[H_ref,W_ref,c]`; `None` trains the plain video path.
    pub ref_latent: Option<Tensor<T>>,
    pub prompt_ids: Vec<usize>,
    /// Path position, strictly inside (0,1) during training.
    pub s: f64,
    /// Noise draw, same shape as `x0`.
    pub eps: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct TrainBatch<T: Scalar> {
    pub items: Vec<TrainItem<T>>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn validate(&self, model: &Model<T>) -> Result<()> {
        if self.items.is_empty() {
            return Err(CoreError::Invalid("training batch is empty".into()));
        }
        let cfg = &model.cfg;
        let video_shape = [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels];
        for (i, item) in self.items.iter().enumerate() {
            if item.x0.shape() != video_shape {
                return Err(CoreError::Shape(format!(
                    "batch item {i}: x0 shape {:?}, expected {video_shape:?}",
                    item.x0.shape()
                )));
            }
            if item.eps.shape() != video_shape {
                return Err(CoreError::Shape(format!(
                    "batch item {i}: eps shape {:?}, expected {video_shape:?}",
                    item.eps.shape()
                )));
            }
            if let Some(r) = &item.ref_latent {
                if r.shape() != [cfg.h_ref, cfg.w_ref, cfg.channels] {
                    return Err(CoreError::Shape(format!(
                        "batch item {i}: reference shape {:?}, expected [{},{},{}]",
                        r.shape(),
                        cfg.h_ref,
                        cfg.w_ref,
                        cfg.channels
                    )));
                }
            }
            if !(item.s > 0.0 && item.s < 1.0) {
                return Err(CoreError::Invalid(format!(
                    "batch item {i}: s={} must lie strictly inside (0,1)",
                    item.s
                )));
            }
        }
        Ok(())
    }
}

/// Straight-path interpolation `x_s = (1−s)·x0 + s·eps`. The endpoints are
/// returned bit-for-bit (`s=0` gives `x0`, `s=1` gives `eps`).
pub fn interpolate<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(CoreError::Shape(format!(
            "interpolate needs equal shapes, got {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if !s.is_finite() || !(0.0..=1.0).contains(&s) {
        return Err(CoreError::Invalid(format!("interpolation s={s} must be in [0,1]")));
    }
    if s == 0.0 {
        return Ok(x0.clone());
    }
    if s == 1.0 {
        return Ok(eps.clone());
    }
    x0.scale(T::of(1.0 - s)).add_scaled(eps, T::of(s))
}

/// Mean-squared velocity-matching loss over a batch, with gradients for the
/// parameters selected by `scope` (everything in base pretraining, adapters
/// only in identity adaptation). The loss and gradients are averaged over
/// items in order; parameters outside the scope — or structurally
/// disconnected from the loss — are absent from the map, i.e. have exactly
/// zero gradient.
pub fn training_loss<T: Scalar>(
    model: &Model<T>,
    batch: &TrainBatch<T>,
    scope: TrainScope,
) -> Result<(T, GradMap<T>)> {
    batch.validate(model)?;
    let inv_b = T::of(1.0 / batch.items.len() as f64);
    let mut total = T::zero();
    let mut acc: GradMap<T> = GradMap::new();
    for (i, item) in batch.items.iter().enumerate() {
        let noisy = interpolate(&item.x0, &item.eps, item.s)?;
        let target = item.eps.sub(&item.x0)?;
        let mut tape = Tape::new(true);
        let wv = model.lift_weights(&mut tape, scope);
        let out = model.traced_velocity(
            &mut tape,
            &wv,
            &noisy,
            item.ref_latent.as_ref(),
            &item.prompt_ids,
            item.s,
        )?;
        let t = tape.leaf(target.clone(), false);
        let diff = tape.sub(out, t)?;
        let ss = tape.sum_sq(diff);
        let loss = tape.scale(ss, T::of(1.0 / target.numel() as f64));
        let loss_val = tape.value(loss).data()[0];
        if !loss_val.as_f64().is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite training loss {} at batch item {i} (s={})",
                loss_val.as_f64(),
                item.s
            )));
        }
        total = total + loss_val * inv_b;
        let mut grads = tape.backward(loss)?;
        for (name, g) in wv.grads_by_name(&mut grads) {
            match acc.remove(&name) {
                Some(prev) => {
                    acc.insert(name, prev.add_scaled(&g, inv_b)?);
                }
                None => {
                    acc.insert(name, g.scale(inv_b));
                }
            }
        }
    }
    Ok((total, acc))
}

/// Euler sampler: starts from seeded gaussian noise at `s=1` and integrates
/// the predicted velocity down to `s=0` along `schedule`. With `use_cache`,
/// the reference K/V are computed on the first step and read from the session
/// cache afterwards; the result matches the uncached path within float
/// reduction-order slack.
pub fn sample<T: Scalar>(
    model: &Model<T>,
    ref_latent: Option<&Tensor<T>>,
    prompt_ids: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    use_cache: bool,
    mut counters: Option<&mut EvalCounters>,
) -> Result<Tensor<T>> {
    let cfg = &model.cfg;
    let mut x: Tensor<T> =
        gaussian(rng, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels])?;
    let mut cache = use_cache.then(|| SessionCache::new(cfg.n_blocks));
    let steps = schedule.timesteps();
    for (i, &s_cur) in steps.iter().enumerate() {
        let s_next = steps.get(i + 1).copied().unwrap_or(0.0);
        let ctl = match &mut cache {
            None => CacheCtl::Off,
            Some(c) if i == 0 => CacheCtl::Fill(c),
            Some(c) => CacheCtl::Read(c),
        };
        let v = model.forward(&x, ref_latent, prompt_ids, s_cur, ctl, counters.as_deref_mut())?;
        x = x.add_scaled(&v, T::of(s_next - s_cur))?;
    }
    x.check_finite("sampled latent")?;
    Ok(x)
}

/// Region-conditioned sampling. `mask` has the latent's shape with entries
/// exactly 0 or 1: cells at 1 are generated, cells at 0 are pinned to
/// `known_video`. Before every model evaluation the pinned region is replaced
/// by the forward-interpolated known video at the current `s` (sharing the
/// session's initial noise), and after the final step by the known video
/// itself, so pinned cells match it bit-for-bit. An all-ones mask reproduces
/// [`sample`] with caching enabled, bit-for-bit. The reference K/V cache is
/// always used internally.
pub fn sample_inpaint<T: Scalar>(
    model: &Model<T>,
    ref_latent: Option<&Tensor<T>>,
    prompt_ids: &[usize],
    known_video: &Tensor<T>,
    mask: &Tensor<T>,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    mut counters: Option<&mut EvalCounters>,
) -> Result<Tensor<T>> {
    let cfg = &model.cfg;
    let video_shape = [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels];
    if known_video.shape() != video_shape {
        return Err(CoreError::Shape(format!(
            "known video shape {:?}, expected {video_shape:?}",
            known_video.shape()
        )));
    }
    if mask.shape() != known_video.shape() {
        return Err(CoreError::Shape(format!(
            "mask shape {:?} does not match the video {:?}",
            mask.shape(),
            known_video.shape()
        )));
    }
    let eps0: Tensor<T> = gaussian(rng, &video_shape)?;
    let mut x = eps0.clone();
    let mut cache = SessionCache::new(cfg.n_blocks);
    let steps = schedule.timesteps();
    for (i, &s_cur) in steps.iter().enumerate() {
        let s_next = steps.get(i + 1).copied().unwrap_or(0.0);
        let pinned = interpolate(known_video, &eps0, s_cur)?;
        x = select(mask, &x, &pinned)?;
        let ctl = if i == 0 { CacheCtl::Fill(&mut cache) } else { CacheCtl::Read(&cache) };
        let v = model.forward(&x, ref_latent, prompt_ids, s_cur, ctl, counters.as_deref_mut())?;
        x = x.add_scaled(&v, T::of(s_next - s_cur))?;
    }
    let x = select(mask, &x, known_video)?;
    x.check_finite("inpainted latent")?;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;
    use crate::rope::RoPEConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 6,
            n_blocks: 2,
            heads: 3,
            head_dim: 2,
            ffn_mult: 2,
            patch: (1, 2, 2),
            frames: 2,
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

    fn jittered_model(cfg: &ModelConfig, seed: u64) -> Model<f64> {
        let mut model = Model::init(cfg.clone(), true, seed).unwrap();
        let mut rng = Rng::new(seed ^ 0x9e37_79b9);
        model.weights.jitter(&mut rng, 0.15).unwrap();
        model
    }

    fn batch_for(model: &Model<f64>, seed: u64, n: usize) -> TrainBatch<f64> {
        let cfg = &model.cfg;
        let mut rng = Rng::new(seed);
        let items = (0..n)
            .map(|_| {
                let x0 =
                    gaussian(&mut rng, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels]).unwrap();
                let eps =
                    gaussian(&mut rng, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels]).unwrap();
                let refl = gaussian(&mut rng, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap();
                TrainItem { x0, ref_latent: Some(refl), prompt_ids: vec![1], s: 0.43, eps }
            })
            .collect();
        TrainBatch { items }
    }

    #[test]
    fn uniform_schedule_shape() {
        let sched = NoiseSchedule::uniform(20).unwrap();
        assert_eq!(sched.n_steps(), 20);
        assert_eq!(sched.timesteps()[0], 1.0);
        assert!((sched.timesteps()[19] - 0.05).abs() < 1e-15);
        assert!(sched.timesteps().windows(2).all(|w| w[1] < w[0]));
        assert!(NoiseSchedule::uniform(0).is_err());
        assert!(NoiseSchedule::from_timesteps(vec![0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_timesteps(vec![1.2]).is_err());
        assert!(NoiseSchedule::from_timesteps(vec![0.5, 0.0]).is_err());
        assert!(NoiseSchedule::from_timesteps(vec![]).is_err());
    }

    #[test]
    fn interpolate_endpoints_are_bitwise_exact() {
        let mut rng = Rng::new(1);
        let x0: Tensor<f64> = gaussian(&mut rng, &[2, 3]).unwrap();
        let eps: Tensor<f64> = gaussian(&mut rng, &[2, 3]).unwrap();
        assert!(interpolate(&x0, &eps, 0.0).unwrap().bit_eq(&x0));
        assert!(interpolate(&x0, &eps, 1.0).unwrap().bit_eq(&eps));
        let x0 = Tensor::<f64>::zeros(&[4]);
        let eps = Tensor::<f64>::full(&[4], 4.0);
        let mid = interpolate(&x0, &eps, 0.25).unwrap();
        assert!(mid.data().iter().all(|&v| v == 1.0));
        let bad = Tensor::<f64>::zeros(&[5]);
        assert!(interpolate(&x0, &bad, 0.5).is_err());
        assert!(interpolate(&x0, &eps, 1.5).is_err());
    }

    #[test]
    fn zero_model_unit_noise_gives_unit_loss() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(cfg.clone(), true, 5).unwrap();
        let shape = [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels];
        let item = TrainItem {
            x0: Tensor::zeros(&shape),
            ref_latent: None,
            prompt_ids: vec![0],
            s: 0.5,
            eps: Tensor::full(&shape, 1.0),
        };
        let batch = TrainBatch { items: vec![item] };
        let (loss, grads) = training_loss(&model, &batch, TrainScope::All).unwrap();
        assert_eq!(loss, 1.0);
        assert!(!grads.is_empty());
    }

    #[test]
    fn matched_model_gives_zero_loss() {
        // eps == x0 makes the target velocity zero; a fresh model outputs
        // exactly zero, so the loss is exactly zero.
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(cfg.clone(), true, 6).unwrap();
        let shape = [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels];
        let mut rng = Rng::new(7);
        let x0: Tensor<f64> = gaussian(&mut rng, &shape).unwrap();
        let item = TrainItem {
            x0: x0.clone(),
            ref_latent: None,
            prompt_ids: vec![0],
            s: 0.5,
            eps: x0,
        };
        let batch = TrainBatch { items: vec![item] };
        let (loss, _) = training_loss(&model, &batch, TrainScope::All).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn adapter_scope_gradients_stay_on_adapters() {
        let cfg = tiny_cfg();
        let model = jittered_model(&cfg, 11);
        let batch = batch_for(&model, 12, 2);
        let (_, grads) = training_loss(&model, &batch, TrainScope::LoraOnly).unwrap();
        assert!(!grads.is_empty());
        assert!(grads.keys().all(|k| k.contains(".lora_")));
        let (_, full) = training_loss(&model, &batch, TrainScope::All).unwrap();
        assert!(full.len() > grads.len());
        assert!(full.contains_key("embed.patch.w"));
    }

    #[test]
    fn batch_gradients_average_item_gradients() {
        let cfg = tiny_cfg();
        let model = jittered_model(&cfg, 21);
        let batch = batch_for(&model, 22, 2);
        let (loss, grads) = training_loss(&model, &batch, TrainScope::All).unwrap();
        let single_a = TrainBatch { items: vec![batch.items[0].clone()] };
        let single_b = TrainBatch { items: vec![batch.items[1].clone()] };
        let (la, ga) = training_loss(&model, &single_a, TrainScope::All).unwrap();
        let (lb, gb) = training_loss(&model, &single_b, TrainScope::All).unwrap();
        assert!((loss - 0.5 * (la + lb)).abs() < 1e-12);
        for (name, g) in &grads {
            let avg = match (ga.get(name), gb.get(name)) {
                (Some(a), Some(b)) => a.add(b).unwrap().scale(0.5),
                (Some(a), None) => a.scale(0.5),
                (None, Some(b)) => b.scale(0.5),
                (None, None) => panic!("gradient {name} missing from both items"),
            };
            assert!(g.max_abs_diff(&avg) < 1e-12, "{name} not averaged");
        }
    }

    #[test]
    fn non_finite_loss_is_reported_with_diagnostics() {
        let cfg = tiny_cfg();
        let mut model = jittered_model(&cfg, 31);
        model.weights.visit_mut(&mut |name, t| {
            if name == "embed.patch.w" {
                *t = Tensor::full(t.shape(), 1e308);
            }
        });
        let batch = batch_for(&model, 32, 1);
        let err = training_loss(&model, &batch, TrainScope::All).unwrap_err();
        match err {
            CoreError::Numeric(msg) => assert!(msg.contains("item 0"), "diagnostics: {msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn one_step_zero_model_returns_initial_noise() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(cfg.clone(), true, 41).unwrap();
        let sched = NoiseSchedule::uniform(1).unwrap();
        let mut rng = Rng::new(42);
        let mut rng_probe = Rng::new(42);
        let expected: Tensor<f64> =
            gaussian(&mut rng_probe, &[cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels]).unwrap();
        let refl: Tensor<f64> = {
            let mut r = Rng::new(43);
            gaussian(&mut r, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap()
        };
        let out = sample(&model, Some(&refl), &[0], &sched, &mut rng, false, None).unwrap();
        assert!(out.bit_eq(&expected));
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let cfg = tiny_cfg();
        let model = jittered_model(&cfg, 51);
        let sched = NoiseSchedule::uniform(4).unwrap();
        let refl: Tensor<f64> = {
            let mut r = Rng::new(52);
            gaussian(&mut r, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap()
        };
        let a = sample(&model, Some(&refl), &[1], &sched, &mut Rng::new(9), true, None).unwrap();
        let b = sample(&model, Some(&refl), &[1], &sched, &mut Rng::new(9), true, None).unwrap();
        let c = sample(&model, Some(&refl), &[1], &sched, &mut Rng::new(10), true, None).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c), "different seeds should draw different noise");
    }

    #[test]
    fn cached_and_uncached_sampling_agree() {
        let cfg = tiny_cfg();
        let model = jittered_model(&cfg, 61);
        let sched = NoiseSchedule::uniform(5).unwrap();
        let refl: Tensor<f64> = {
            let mut r = Rng::new(62);
            gaussian(&mut r, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap()
        };
        let mut c_on = EvalCounters::default();
        let mut c_off = EvalCounters::default();
        let on = sample(&model, Some(&refl), &[1], &sched, &mut Rng::new(63), true, Some(&mut c_on))
            .unwrap();
        let off =
            sample(&model, Some(&refl), &[1], &sched, &mut Rng::new(63), false, Some(&mut c_off))
                .unwrap();
        assert!(on.max_abs_diff(&off) <= 1e-5, "diff {}", on.max_abs_diff(&off));
        let want_on =
            EvalCounters { model_evals: 5, image_preattn_evals: 1, image_block_preattn: 2 };
        let want_off =
            EvalCounters { model_evals: 5, image_preattn_evals: 5, image_block_preattn: 10 };
        assert_eq!(c_on, want_on);
        assert_eq!(c_off, want_off);
    }

    #[test]
    fn all_ones_mask_reproduces_plain_sampling_bitwise() {
        let cfg = tiny_cfg();
        let model = jittered_model(&cfg, 71);
        let sched = NoiseSchedule::uniform(4).unwrap();
        let shape = [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels];
        let refl: Tensor<f64> = {
            let mut r = Rng::new(72);
            gaussian(&mut r, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap()
        };
        let known = Tensor::<f64>::zeros(&shape);
        let mask = Tensor::<f64>::full(&shape, 1.0);
        let plain =
            sample(&model, Some(&refl), &[1], &sched, &mut Rng::new(73), true, None).unwrap();
        let inpaint = sample_inpaint(
            &model,
            Some(&refl),
            &[1],
            &known,
            &mask,
            &sched,
            &mut Rng::new(73),
            None,
        )
        .unwrap();
        assert!(plain.bit_eq(&inpaint));
    }

    #[test]
    fn all_zeros_mask_returns_known_video_exactly() {
        let cfg = tiny_cfg();
        let model = jittered_model(&cfg, 81);
        let sched = NoiseSchedule::uniform(3).unwrap();
        let shape = [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels];
        let known: Tensor<f64> = {
            let mut r = Rng::new(82);
            gaussian(&mut r, &shape).unwrap()
        };
        let mask = Tensor::<f64>::zeros(&shape);
        let out = sample_inpaint(
            &model,
            None,
            &[0],
            &known,
            &mask,
            &sched,
            &mut Rng::new(83),
            None,
        )
        .unwrap();
        assert!(out.bit_eq(&known));
    }

    #[test]
    fn checker_mask_pins_known_cells_and_generates_the_rest() {
        let cfg = tiny_cfg();
        let model = jittered_model(&cfg, 91);
        let sched = NoiseSchedule::uniform(4).unwrap();
        let shape = [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels];
        let known: Tensor<f64> = {
            let mut r = Rng::new(92);
            gaussian(&mut r, &shape).unwrap()
        };
        let n = known.numel();
        let mask =
            Tensor::<f64>::new(&shape, (0..n).map(|i| (i % 2) as f64).collect()).unwrap();
        let refl: Tensor<f64> = {
            let mut r = Rng::new(93);
            gaussian(&mut r, &[cfg.h_ref, cfg.w_ref, cfg.channels]).unwrap()
        };
        let mut counters = EvalCounters::default();
        let out = sample_inpaint(
            &model,
            Some(&refl),
            &[1],
            &known,
            &mask,
            &sched,
            &mut Rng::new(94),
            Some(&mut counters),
        )
        .unwrap();
        let mut pinned_match = true;
        let mut masked_same = 0usize;
        for i in 0..n {
            if mask.data()[i] == 0.0 {
                if (out.data()[i] - known.data()[i]).abs() > 1e-5 {
                    pinned_match = false;
                }
            } else if out.data()[i] == known.data()[i] {
                masked_same += 1;
            }
        }
        assert!(pinned_match, "pinned cells must match the known video");
        assert!(masked_same < n / 4, "generated cells should not copy the known video");
        assert_eq!(counters.model_evals, 4);
        assert_eq!(counters.image_preattn_evals, 1);
        assert_eq!(counters.image_block_preattn, cfg.n_blocks as u64);
    }

    #[test]
    fn inpaint_validates_mask_and_shapes() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(cfg.clone(), true, 95).unwrap();
        let sched = NoiseSchedule::uniform(2).unwrap();
        let shape = [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels];
        let known = Tensor::<f64>::zeros(&shape);
        let half = Tensor::<f64>::full(&shape, 0.5);
        let err = sample_inpaint(
            &model,
            None,
            &[0],
            &known,
            &half,
            &sched,
            &mut Rng::new(96),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Invalid(_)));
        let short = Tensor::<f64>::zeros(&[1, 2, 2, 1]);
        let err = sample_inpaint(
            &model,
            None,
            &[0],
            &known,
            &short,
            &sched,
            &mut Rng::new(97),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Shape(_)));
        let err = sample_inpaint(
            &model,
            None,
            &[0],
            &short,
            &short,
            &sched,
            &mut Rng::new(98),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Shape(_)));
    }

    #[test]
    fn batch_validation_rejects_bad_items() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(cfg.clone(), true, 99).unwrap();
        let shape = [cfg.frames, cfg.h_lat, cfg.w_lat, cfg.channels];
        let good = TrainItem {
            x0: Tensor::zeros(&shape),
            ref_latent: None,
            prompt_ids: vec![0],
            s: 0.5,
            eps: Tensor::zeros(&shape),
        };
        assert!(TrainBatch { items: vec![] }.validate(&model).is_err());
        let mut bad_s = good.clone();
        bad_s.s = 1.0;
        assert!(TrainBatch { items: vec![bad_s] }.validate(&model).is_err());
        let mut bad_shape = good.clone();
        bad_shape.x0 = Tensor::zeros(&[1, 2, 2, 1]);
        assert!(TrainBatch { items: vec![bad_shape] }.validate(&model).is_err());
        assert!(TrainBatch { items: vec![good] }.validate(&model).is_ok());
    }
}
