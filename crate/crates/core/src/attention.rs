//! Restricted self-attention between the video stream and the reference-image
//! stream, with LoRA-adapted image projections.
//!
//! Image and video tokens are projected independently (the image path adds a
//! low-rank delta to each of the Q/K/V projections). Attention is then
//! asymmetric: image queries see only image keys, while video queries see the
//! concatenation of video and image keys/values. This makes the image stream
//! a pure function of the reference image — nothing from the video leaks in —
//! while the video stream can read identity information out of it.
//!
//! Tensors at this layer are head-split: `[n, heads, head_dim]`. The same
//! row-major buffer viewed as `[n, heads·head_dim]` is what the transformer
//! blocks use internally, so reshapes between the two are free.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{softmax_row, Tensor};

/// Base Q/K/V/O projection weights of one attention layer.
#[derive(Debug, Clone)]
pub struct ProjectionWeights<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> ProjectionWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.shape() != [d, d] {
                return Err(CoreError::Shape(format!(
                    "{name} must be [{d}, {d}], got {:?}",
                    w.shape()
                )));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(CoreError::Invalid(format!(
                "heads {} must divide d_model {d}",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_q.dim(0)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }
}

/// Low-rank adapter: effective delta `(alpha/r)·A·B` on a frozen base map.
/// `B` starts at zero, so a freshly initialized adapter is an exact no-op;
/// `A` and `B` are the only tensors updated during identity training.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: T,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Standard init: `A ~ N(0, 0.02²)` (seeded), `B = 0`.
    pub fn init(d: usize, rank: usize, alpha: T, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(CoreError::Invalid("lora rank must be >= 1".into()));
        }
        let a = crate::rng::gaussian::<T>(rng, &[d, rank])?.scale(T::of(0.02));
        let b = Tensor::zeros(&[rank, d]);
        Ok(LoraAdapter { a, b, rank, alpha })
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(CoreError::Invalid("lora rank must be >= 1".into()));
        }
        if self.a.shape() != [d, self.rank] || self.b.shape() != [self.rank, d] {
            return Err(CoreError::Shape(format!(
                "lora tensors must be [{d}, {r}] and [{r}, {d}], got {:?} and {:?}",
                self.a.shape(),
                self.b.shape(),
                r = self.rank
            )));
        }
        Ok(())
    }

    /// `alpha / rank`, the scale applied to `x·A·B`.
    pub fn scaling(&self) -> T {
        self.alpha / T::of(self.rank as f64)
    }

    /// `x·W + (alpha/r)·(x·A)·B`.
    pub fn apply(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let base = x.matmul(w)?;
        let delta = x.matmul(&self.a)?.matmul(&self.b)?;
        base.add_scaled(&delta, self.scaling())
    }
}

/// Per-block cached image keys (post-rotation) and values for one sampling
/// session. Populated exactly once, immutable afterwards.
#[derive(Debug, Clone)]
pub struct KvCacheEntry<T: Scalar> {
    /// `[n_I, heads, head_dim]`, rotated.
    pub k_rot: Tensor<T>,
    /// `[n_I, heads, head_dim]`.
    pub v: Tensor<T>,
}

impl<T: Scalar> KvCacheEntry<T> {
    pub fn new(k_rot: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        if k_rot.ndim() != 3 || k_rot.shape() != v.shape() {
            return Err(CoreError::Cache(format!(
                "cache entry shapes must match [n, heads, head_dim], got {:?} and {:?}",
                k_rot.shape(),
                v.shape()
            )));
        }
        Ok(KvCacheEntry { k_rot, v })
    }
}

/// Checks `[n, heads, head_dim]` layout and returns `(n, heads, head_dim)`.
fn heads_dims<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(CoreError::Shape(format!(
            "{what} must be [n, heads, head_dim], got {:?}",
            x.shape()
        )));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2)))
}

fn split_heads<T: Scalar>(x: Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (n, d) = (x.dim(0), x.dim(1));
    x.reshape(&[n, heads, d / heads])
}

/// Projects video tokens `x [n_V × d]` to head-split Q, K, V.
pub fn project_qkv_video<T: Scalar>(
    x: &Tensor<T>,
    w: &ProjectionWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    w.validate()?;
    let q = split_heads(x.matmul(&w.w_q)?, w.heads)?;
    let k = split_heads(x.matmul(&w.w_k)?, w.heads)?;
    let v = split_heads(x.matmul(&w.w_v)?, w.heads)?;
    Ok((q, k, v))
}

/// Projects image tokens with the LoRA-adapted maps:
/// `Q_I = x·(W_q + (alpha/r)·A_q·B_q)`, analogously for K and V.
pub fn project_qkv_image<T: Scalar>(
    x: &Tensor<T>,
    w: &ProjectionWeights<T>,
    lora_q: &LoraAdapter<T>,
    lora_k: &LoraAdapter<T>,
    lora_v: &LoraAdapter<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    w.validate()?;
    let d = w.d_model();
    lora_q.validate(d)?;
    lora_k.validate(d)?;
    lora_v.validate(d)?;
    let q = split_heads(lora_q.apply(x, &w.w_q)?, w.heads)?;
    let k = split_heads(lora_k.apply(x, &w.w_k)?, w.heads)?;
    let v = split_heads(lora_v.apply(x, &w.w_v)?, w.heads)?;
    Ok((q, k, v))
}

/// Multihead scaled-dot-product attention forward over flat `[n, heads·hd]`
/// buffers. Returns the output buffer and (when `keep_weights`) the softmax
/// weights stacked `[heads·n_q, n_k]` for the backward pass.
pub(crate) fn mha_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n_q: usize,
    n_k: usize,
    heads: usize,
    hd: usize,
    scale: T,
    keep_weights: bool,
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); n_q * heads * hd];
    let mut weights = if keep_weights { vec![T::zero(); heads * n_q * n_k] } else { Vec::new() };
    let mut qh = vec![T::zero(); n_q * hd];
    let mut kh = vec![T::zero(); n_k * hd];
    let mut vh = vec![T::zero(); n_k * hd];
    let mut w_h = vec![T::zero(); n_q * n_k];
    for h in 0..heads {
        gather_head(q, &mut qh, n_q, heads, hd, h);
        gather_head(k, &mut kh, n_k, heads, hd, h);
        gather_head(v, &mut vh, n_k, heads, hd, h);
        // scores = scale · Qh · Khᵀ, softmax per row, then weights · Vh
        let mut scores = crate::tensor::mm_nt(&qh, &kh, n_q, hd, n_k);
        for s in scores.iter_mut() {
            *s = *s * scale;
        }
        for i in 0..n_q {
            let row = &scores[i * n_k..(i + 1) * n_k];
            softmax_row(row, &mut w_h[i * n_k..(i + 1) * n_k]);
        }
        let oh = crate::tensor::mm_nn(&w_h, &vh, n_q, n_k, hd);
        scatter_head(&oh, &mut out, n_q, heads, hd, h);
        if keep_weights {
            weights[h * n_q * n_k..(h + 1) * n_q * n_k].copy_from_slice(&w_h);
        }
    }
    (out, weights)
}

pub(crate) fn gather_head<T: Scalar>(
    x: &[T],
    dst: &mut [T],
    n: usize,
    heads: usize,
    hd: usize,
    h: usize,
) {
    for i in 0..n {
        let src = &x[(i * heads + h) * hd..(i * heads + h + 1) * hd];
        dst[i * hd..(i + 1) * hd].copy_from_slice(src);
    }
}

pub(crate) fn scatter_head<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    n: usize,
    heads: usize,
    hd: usize,
    h: usize,
) {
    for i in 0..n {
        dst[(i * heads + h) * hd..(i * heads + h + 1) * hd]
            .copy_from_slice(&src[i * hd..(i + 1) * hd]);
    }
}

/// Restricted self-attention over already-rotated inputs:
///
/// * `Out_I = Attention(Q'_I, K'_I, V_I)` — image queries see image keys only;
/// * `Out_V = Attention(Q'_V, [K'_V, K'_I], [V_V, V_I])` — video queries see both.
///
/// All six inputs are `[n, heads, head_dim]`; the pre-softmax scale is
/// `1/√head_dim`. Returns `(Out_I, Out_V)` in the same layout.
pub fn restricted_attention<T: Scalar>(
    q_i: &Tensor<T>,
    k_i: &Tensor<T>,
    v_i: &Tensor<T>,
    q_v: &Tensor<T>,
    k_v: &Tensor<T>,
    v_v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n_i, heads, hd) = heads_dims(q_i, "q_i")?;
    let (n_v, _, _) = heads_dims(q_v, "q_v")?;
    for (name, t, n) in [
        ("k_i", k_i, n_i),
        ("v_i", v_i, n_i),
        ("q_v", q_v, n_v),
        ("k_v", k_v, n_v),
        ("v_v", v_v, n_v),
    ] {
        let dims = heads_dims(t, name)?;
        if dims != (n, heads, hd) {
            return Err(CoreError::Shape(format!(
                "{name} is {dims:?}, expected ({n}, {heads}, {hd})"
            )));
        }
    }
    let scale = T::one() / T::of((hd as f64).sqrt());
    let (out_i, _) = mha_forward(q_i.data(), k_i.data(), v_i.data(), n_i, n_i, heads, hd, scale, false);
    let k_all = k_v.concat_rows(k_i)?;
    let v_all = v_v.concat_rows(v_i)?;
    let (out_v, _) = mha_forward(
        q_v.data(),
        k_all.data(),
        v_all.data(),
        n_v,
        n_v + n_i,
        heads,
        hd,
        scale,
        false,
    );
    Ok((
        Tensor::new(&[n_i, heads, hd], out_i)?,
        Tensor::new(&[n_v, heads, hd], out_v)?,
    ))
}

/// Naive masked-attention oracle over a combined token sequence.
///
/// `mask` is row-major `[n × n]` booleans with `true = blocked`. This is an
/// independent reference implementation (plain per-query loops, no shared
/// kernels) used to cross-check `restricted_attention`; keep it simple, not
/// fast. A fully blocked query row is a validation error.
pub fn masked_attention_oracle<T: Scalar>(
    all_q: &Tensor<T>,
    all_k: &Tensor<T>,
    all_v: &Tensor<T>,
    mask: &[bool],
) -> Result<Tensor<T>> {
    let (n, heads, hd) = heads_dims(all_q, "all_q")?;
    if heads_dims(all_k, "all_k")? != (n, heads, hd) || heads_dims(all_v, "all_v")? != (n, heads, hd)
    {
        return Err(CoreError::Shape("oracle q/k/v shapes must match".into()));
    }
    if mask.len() != n * n {
        return Err(CoreError::Shape(format!(
            "mask must have {n}×{n} entries, got {}",
            mask.len()
        )));
    }
    for i in 0..n {
        if mask[i * n..(i + 1) * n].iter().all(|&b| b) {
            return Err(CoreError::Invalid(format!("query row {i} is fully blocked")));
        }
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let q = all_q.data();
    let k = all_k.data();
    let v = all_v.data();
    let mut out = vec![T::zero(); n * heads * hd];
    for h in 0..heads {
        for i in 0..n {
            let qi = &q[(i * heads + h) * hd..(i * heads + h + 1) * hd];
            // Logits over the allowed set, in f64 for an independent route.
            let mut logits = vec![f64::NEG_INFINITY; n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if mask[i * n + j] {
                    continue;
                }
                let kj = &k[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                let mut dot = 0.0f64;
                for c in 0..hd {
                    dot += qi[c].as_f64() * kj[c].as_f64();
                }
                let l = dot * scale;
                logits[j] = l;
                if l > max {
                    max = l;
                }
            }
            let mut denom = 0.0f64;
            for j in 0..n {
                if logits[j].is_finite() {
                    denom += (logits[j] - max).exp();
                }
            }
            let o = &mut out[(i * heads + h) * hd..(i * heads + h + 1) * hd];
            for j in 0..n {
                if !logits[j].is_finite() {
                    continue;
                }
                let w = (logits[j] - max).exp() / denom;
                let vj = &v[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                for c in 0..hd {
                    o[c] = o[c] + T::of(w * vj[c].as_f64());
                }
            }
        }
    }
    Tensor::new(&[n, heads, hd], out)
}

/// The canonical mask for the restricted pattern over a `[video; image]`
/// sequence: image queries may not attend to video keys; everything else is
/// allowed. `true = blocked`.
pub fn restriction_mask(n_video: usize, n_image: usize) -> Vec<bool> {
    let n = n_video + n_image;
    let mut mask = vec![false; n * n];
    for i in n_video..n {
        for j in 0..n_video {
            mask[i * n + j] = true;
        }
    }
    mask
}
