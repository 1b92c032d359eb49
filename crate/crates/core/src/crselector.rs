//! Critical-region-selector attention.
//!
//! The pipeline has two halves. Guidance derives a per-pixel offset field and
//! a per-window keep/drop mask from the feature map plus a texture map
//! extracted from the original image. Self-attention then runs independently
//! inside each MxM window over the mask-selected content and is added back
//! onto the input as a residual.

use crate::error::{Error, Result};
use crate::rng::{streams, RngState};
use crate::tensor::{
    concat_channels, conv1x1, relu, softmax_rows, tanh_map, window_merge, window_partition,
    Conv1x1Params, Matrix, Scalar, Shape, Tensor,
};

#[derive(Debug, Clone)]
pub struct CRSelectorParams<S: Scalar = f32> {
    /// Texture extraction from the image: two 1x1 convolutions with ReLU between.
    pub gti_conv1: Conv1x1Params<S>,
    pub gti_conv2: Conv1x1Params<S>,
    /// Local content projection of the feature map.
    pub v_conv: Conv1x1Params<S>,
    /// Offset prediction head; always two output channels (dx, dy).
    pub offset_conv: Conv1x1Params<S>,
    /// Bias-free fusion of content and texture down to `c_reduced` channels,
    /// feeding the mask logits.
    pub reduce_conv: Conv1x1Params<S>,
    /// (m^2 * c_reduced) x 2 map from flattened window features to keep/drop logits.
    pub w_mask: Matrix<S>,
    /// c x c query/key projections applied on the right of each pixel's feature row.
    pub w_q: Matrix<S>,
    pub w_k: Matrix<S>,
    /// Output projection of the attention result back to the feature width.
    pub out_conv: Conv1x1Params<S>,
    /// Window size in pixels per side.
    pub m: usize,
    /// Offset scaling factor; offsets live in [-r, r].
    pub r: S,
    /// Gumbel-Softmax temperature.
    pub tau: S,
    /// Straight-through hard one-hot mask vs soft probabilities.
    pub hard_mask: bool,
    /// Attention scale divisor, set to the channel count.
    pub d: usize,
}

impl<S: Scalar> CRSelectorParams<S> {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParam("window size m must be >= 1".into()));
        }
        if self.r < S::zero() {
            return Err(Error::InvalidParam("offset scale r must be >= 0".into()));
        }
        if self.tau <= S::zero() {
            return Err(Error::InvalidParam("tau must be > 0".into()));
        }
        if self.offset_conv.c_out != 2 {
            return Err(Error::InvalidParam(format!(
                "offset conv must have 2 output channels, got {}",
                self.offset_conv.c_out
            )));
        }
        if self.w_q.rows != self.w_q.cols || self.w_k.rows != self.w_k.cols {
            return Err(Error::InvalidParam("w_q / w_k must be square".into()));
        }
        if self.w_q.rows != self.w_k.rows {
            return Err(Error::InvalidParam("w_q and w_k side mismatch".into()));
        }
        if self.w_mask.cols != 2 {
            return Err(Error::InvalidParam("w_mask must have 2 columns".into()));
        }
        if self.w_mask.rows != self.m * self.m * self.reduce_conv.c_out {
            return Err(Error::InvalidParam(format!(
                "w_mask rows {} != m^2 * c_reduced = {}",
                self.w_mask.rows,
                self.m * self.m * self.reduce_conv.c_out
            )));
        }
        if self.reduce_conv.bias.iter().any(|b| *b != S::zero()) {
            return Err(Error::InvalidParam("reduce conv must be bias-free".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidParam("attention divisor d must be >= 1".into()));
        }
        if self.out_conv.c_in != self.v_conv.c_out {
            return Err(Error::InvalidParam(format!(
                "out conv c_in {} != v conv c_out {}",
                self.out_conv.c_in, self.v_conv.c_out
            )));
        }
        Ok(())
    }

    /// Random small-weight parameters for a feature map of `c_x` channels and
    /// an image of `c_img` channels. Texture and content widths default to
    /// `c_x`; the mask fusion reduces to one channel; r defaults to m.
    pub fn seeded(c_x: usize, c_img: usize, m: usize, rng: &RngState) -> Self {
        let s = rng.stream(streams::PARAMS);
        let scale = |fan_in: usize| 0.5 / (fan_in as f64).sqrt();
        let mk = |c_in: usize, c_out: usize, sub: u64| {
            Conv1x1Params::new(
                c_in,
                c_out,
                s.stream(streams::PARAMS + sub).uniform_vec(c_out * c_in, scale(c_in)),
                s.stream(streams::PARAMS + sub + 100).uniform_vec(c_out, 0.1),
            )
            .expect("seeded conv dims")
        };
        let c = c_x;
        let mut reduce_conv = mk(c + c, 1, 5);
        reduce_conv.bias = vec![S::zero()];
        CRSelectorParams {
            gti_conv1: mk(c_img, c, 1),
            gti_conv2: mk(c, c, 2),
            v_conv: mk(c_x, c, 3),
            offset_conv: mk(c_x + c, 2, 4),
            reduce_conv,
            w_mask: Matrix::new(
                m * m,
                2,
                s.stream(streams::PARAMS + 6).uniform_vec(m * m * 2, scale(m * m)),
            )
            .expect("w_mask dims"),
            w_q: Matrix::new(c, c, s.stream(streams::PARAMS + 7).uniform_vec(c * c, scale(c)))
                .expect("w_q dims"),
            w_k: Matrix::new(c, c, s.stream(streams::PARAMS + 8).uniform_vec(c * c, scale(c)))
                .expect("w_k dims"),
            out_conv: mk(c, c_x, 9),
            m,
            r: S::from_f64(m as f64),
            tau: S::one(),
            hard_mask: true,
            d: c,
        }
    }

    pub fn cast<T: Scalar>(&self) -> CRSelectorParams<T> {
        CRSelectorParams {
            gti_conv1: self.gti_conv1.cast(),
            gti_conv2: self.gti_conv2.cast(),
            v_conv: self.v_conv.cast(),
            offset_conv: self.offset_conv.cast(),
            reduce_conv: self.reduce_conv.cast(),
            w_mask: self.w_mask.cast(),
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            out_conv: self.out_conv.cast(),
            m: self.m,
            r: T::from_f64(self.r.to_f64()),
            tau: T::from_f64(self.tau.to_f64()),
            hard_mask: self.hard_mask,
            d: self.d,
        }
    }
}

/// One keep value per window, batch-major then window-row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMask<S: Scalar = f32> {
    pub batch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Forward values: keep probability (soft) or {0,1} indicator (hard).
    pub values: Vec<S>,
    /// Soft keep probabilities; equals `values` in soft mode, and is the
    /// straight-through surrogate in hard mode.
    pub soft: Vec<S>,
    pub hard: bool,
}

impl<S: Scalar> KeyMask<S> {
    pub fn num_windows(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    #[inline]
    pub fn at(&self, n: usize, wi: usize, wj: usize) -> S {
        self.values[(n * self.grid_h + wi) * self.grid_w + wj]
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceOutput<S: Scalar = f32> {
    pub offset: Tensor<S>,
    pub offset_map: Tensor<S>,
    pub keymask: KeyMask<S>,
}

/// GTI = conv2(relu(conv1(image)))
pub fn compute_gti<S: Scalar>(image: &Tensor<S>, p: &CRSelectorParams<S>) -> Result<Tensor<S>> {
    let g1 = conv1x1(image, &p.gti_conv1)?;
    conv1x1(&relu(&g1), &p.gti_conv2)
}

/// offset = tanh(conv(relu(concat(x, gti)))) * r, two channels (dx, dy).
pub fn compute_offset<S: Scalar>(
    x: &Tensor<S>,
    gti: &Tensor<S>,
    p: &CRSelectorParams<S>,
) -> Result<Tensor<S>> {
    let cat = concat_channels(x, gti)?;
    let pre = conv1x1(&relu(&cat), &p.offset_conv)?;
    let r = p.r;
    Ok(tanh_map(&pre).map(|v| v * r))
}

/// Bilinear resample of `x` at (j + dx, i + dy) with border clamping.
/// Offset channel 0 is the horizontal displacement, channel 1 vertical.
pub fn warp_bilinear<S: Scalar>(x: &Tensor<S>, offset: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    let os = offset.shape();
    if os.c != 2 {
        return Err(Error::ChannelMismatch {
            expected: 2,
            got: os.c,
        });
    }
    if os.n != s.n || os.h != s.h || os.w != s.w {
        return Err(Error::ShapeMismatch(format!(
            "offset {os} does not match feature {s}"
        )));
    }
    let mut data = vec![S::zero(); s.len()];
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                let sx = (S::from_f64(j as f64) + offset.get(n, 0, i, j))
                    .max(S::zero())
                    .min(S::from_f64((s.w - 1) as f64));
                let sy = (S::from_f64(i as f64) + offset.get(n, 1, i, j))
                    .max(S::zero())
                    .min(S::from_f64((s.h - 1) as f64));
                let x0 = sx.floor().to_f64() as usize;
                let y0 = sy.floor().to_f64() as usize;
                let x1 = (x0 + 1).min(s.w - 1);
                let y1 = (y0 + 1).min(s.h - 1);
                let fx = sx - S::from_f64(x0 as f64);
                let fy = sy - S::from_f64(y0 as f64);
                for c in 0..s.c {
                    let a = x.get(n, c, y0, x0);
                    let b = x.get(n, c, y0, x1);
                    let cc = x.get(n, c, y1, x0);
                    let d = x.get(n, c, y1, x1);
                    let top = a + (b - a) * fx;
                    let bot = cc + (d - cc) * fx;
                    data[x.idx(n, c, i, j)] = top + (bot - top) * fy;
                }
            }
        }
    }
    Ok(Tensor::from_parts(s, data))
}

/// Per-window keep/drop logits before Gumbel noise: fuse content and texture,
/// reduce channels, flatten each window, multiply by w_mask.
pub fn keymask_logits<S: Scalar>(
    v: &Tensor<S>,
    gti: &Tensor<S>,
    p: &CRSelectorParams<S>,
) -> Result<(Vec<[S; 2]>, usize, usize, usize)> {
    let cat = concat_channels(v, gti)?;
    let reduced = conv1x1(&cat, &p.reduce_conv)?;
    let wins = window_partition(&reduced, p.m)?;
    let flat_len = wins.tokens() * wins.channels;
    if flat_len != p.w_mask.rows {
        return Err(Error::ShapeMismatch(format!(
            "window feature length {flat_len} != w_mask rows {}",
            p.w_mask.rows
        )));
    }
    let mut logits = Vec::with_capacity(wins.num_windows());
    for win in 0..wins.num_windows() {
        let start = win * flat_len;
        let flat = &wins.data[start..start + flat_len];
        let mut l = [S::zero(); 2];
        for (row, &f) in flat.iter().enumerate() {
            l[0] = l[0] + f * p.w_mask.at(row, 0);
            l[1] = l[1] + f * p.w_mask.at(row, 1);
        }
        logits.push(l);
    }
    Ok((logits, wins.batch, wins.grid_h, wins.grid_w))
}

/// Gumbel-Softmax over the keep/drop logits, one decision per window.
///
/// Noise is drawn from the `gumbel` sub-stream of `rng` in a fixed order
/// (two samples per window, batch then row-major windows), so the same state
/// always replays the same mask.
pub fn compute_keymask<S: Scalar>(
    v: &Tensor<S>,
    gti: &Tensor<S>,
    p: &CRSelectorParams<S>,
    rng: &RngState,
) -> Result<KeyMask<S>> {
    let (logits, batch, grid_h, grid_w) = keymask_logits(v, gti, p)?;
    let noise = rng.stream(streams::GUMBEL).gumbel_noise(2 * logits.len());
    let mut values = Vec::with_capacity(logits.len());
    let mut soft = Vec::with_capacity(logits.len());
    for (win, l) in logits.iter().enumerate() {
        let zk = (l[0] + S::from_f64(noise[2 * win])) / p.tau;
        let zd = (l[1] + S::from_f64(noise[2 * win + 1])) / p.tau;
        let mx = zk.max(zd);
        let ek = (zk - mx).exp();
        let ed = (zd - mx).exp();
        let keep = ek / (ek + ed);
        soft.push(keep);
        if p.hard_mask {
            values.push(if zk >= zd { S::one() } else { S::zero() });
        } else {
            values.push(keep);
        }
    }
    Ok(KeyMask {
        batch,
        grid_h,
        grid_w,
        values,
        soft,
        hard: p.hard_mask,
    })
}

fn broadcast_mul<S: Scalar>(
    x: &Tensor<S>,
    mask: &KeyMask<S>,
    m: usize,
    complement: bool,
) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.n != mask.batch || s.h != mask.grid_h * m || s.w != mask.grid_w * m {
        return Err(Error::ShapeMismatch(format!(
            "mask grid {}x{}x{} (m={m}) does not cover tensor {s}",
            mask.batch, mask.grid_h, mask.grid_w
        )));
    }
    Ok(Tensor::from_fn(s, |n, c, i, j| {
        let k = mask.at(n, i / m, j / m);
        let k = if complement { S::one() - k } else { k };
        x.get(n, c, i, j) * k
    }))
}

/// Split the deformed map and the content into critical / normal parts:
/// k_tilde = offset_map (*) keymask, v_c = v (*) keymask, v_n = v (*) (1 - keymask).
pub fn partition_regions<S: Scalar>(
    offset_map: &Tensor<S>,
    v: &Tensor<S>,
    keymask: &KeyMask<S>,
    m: usize,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let k_tilde = broadcast_mul(offset_map, keymask, m, false)?;
    let v_c = broadcast_mul(v, keymask, m, false)?;
    let v_n = broadcast_mul(v, keymask, m, true)?;
    Ok((k_tilde, v_c, v_n))
}

fn apply_right_matrix<S: Scalar>(x: &Tensor<S>, w: &Matrix<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if w.rows != s.c {
        return Err(Error::ChannelMismatch {
            expected: w.rows,
            got: s.c,
        });
    }
    let out_shape = Shape::new(s.n, w.cols, s.h, s.w);
    Ok(Tensor::from_fn(out_shape, |n, o, i, j| {
        let mut sum = S::zero();
        for k in 0..s.c {
            sum = sum + x.get(n, k, i, j) * w.at(k, o);
        }
        sum
    }))
}

/// q_tilde = k_tilde W_q, k_proj = k_tilde W_k, per pixel in channel space.
pub fn project_qk<S: Scalar>(
    k_tilde: &Tensor<S>,
    p: &CRSelectorParams<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    Ok((
        apply_right_matrix(k_tilde, &p.w_q)?,
        apply_right_matrix(k_tilde, &p.w_k)?,
    ))
}

/// Per-window attention before the output projection. Tokens are the m^2
/// pixels of each window; nothing mixes across windows.
pub fn windowed_attention_raw<S: Scalar>(
    q_tilde: &Tensor<S>,
    k_proj: &Tensor<S>,
    v_c: &Tensor<S>,
    p: &CRSelectorParams<S>,
) -> Result<Tensor<S>> {
    let qw = window_partition(q_tilde, p.m)?;
    let kw = window_partition(k_proj, p.m)?;
    let vw = window_partition(v_c, p.m)?;
    if qw.num_windows() != kw.num_windows() || qw.num_windows() != vw.num_windows() {
        return Err(Error::ShapeMismatch("q/k/v window count mismatch".into()));
    }
    let t = qw.tokens();
    let scale = S::from_f64(1.0 / (p.d as f64).sqrt());
    let mut out = vw.clone();
    for win in 0..qw.num_windows() {
        let q = qw.window_matrix(win);
        let k = kw.window_matrix(win);
        let v = vw.window_matrix(win);
        let mut scores = Matrix::zeros(t, t);
        for a in 0..t {
            for b in 0..t {
                let mut dot = S::zero();
                for ch in 0..q.cols {
                    dot = dot + q.at(a, ch) * k.at(b, ch);
                }
                scores.data[a * t + b] = dot * scale;
            }
        }
        let attn = softmax_rows(&scores);
        for a in 0..t {
            for ch in 0..v.cols {
                let mut sum = S::zero();
                for b in 0..t {
                    sum = sum + attn.at(a, b) * v.at(b, ch);
                }
                let at = out.idx(win, a, ch);
                out.data[at] = sum;
            }
        }
    }
    window_merge(&out)
}

/// Full Eq-6 step: per-window attention followed by the 1x1 output projection.
pub fn windowed_attention<S: Scalar>(
    q_tilde: &Tensor<S>,
    k_proj: &Tensor<S>,
    v_c: &Tensor<S>,
    p: &CRSelectorParams<S>,
) -> Result<Tensor<S>> {
    let raw = windowed_attention_raw(q_tilde, k_proj, v_c, p)?;
    conv1x1(&raw, &p.out_conv)
}

/// Nearest-neighbor spatial resize (used to bring the image down to the
/// feature map's grid).
pub fn resize_nearest<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, i, j| {
        let si = (i * s.h) / h;
        let sj = (j * s.w) / w;
        x.get(n, c, si, sj)
    })
}

/// Every intermediate of the forward pass, kept for the gradient checker's
/// 64-bit replay.
#[derive(Debug, Clone)]
pub struct CRSelectorTrace<S: Scalar = f32> {
    pub image_resized: Tensor<S>,
    pub gti_pre: Tensor<S>,
    pub gti: Tensor<S>,
    pub offset_cat: Tensor<S>,
    pub offset_pre: Tensor<S>,
    pub offset: Tensor<S>,
    pub offset_map: Tensor<S>,
    pub v: Tensor<S>,
    pub keymask: KeyMask<S>,
    pub k_tilde: Tensor<S>,
    pub v_c: Tensor<S>,
    pub v_n: Tensor<S>,
    pub q_tilde: Tensor<S>,
    pub k_proj: Tensor<S>,
    pub attn_raw: Tensor<S>,
    pub x_prime: Tensor<S>,
    pub out: Tensor<S>,
}

pub fn crselector_forward_traced<S: Scalar>(
    x: &Tensor<S>,
    image: &Tensor<S>,
    p: &CRSelectorParams<S>,
    rng: &RngState,
) -> Result<CRSelectorTrace<S>> {
    p.validate()?;
    let s = x.shape();
    let image_resized = if image.shape().h == s.h && image.shape().w == s.w {
        image.clone()
    } else {
        resize_nearest(image, s.h, s.w)
    };
    let gti_pre = conv1x1(&image_resized, &p.gti_conv1)?;
    let gti = conv1x1(&relu(&gti_pre), &p.gti_conv2)?;

    let offset_cat = concat_channels(x, &gti)?;
    let offset_pre = conv1x1(&relu(&offset_cat), &p.offset_conv)?;
    let r = p.r;
    let offset = tanh_map(&offset_pre).map(|t| t * r);
    let offset_map = warp_bilinear(x, &offset)?;

    let v = conv1x1(x, &p.v_conv)?;
    let keymask = compute_keymask(&v, &gti, p, rng)?;
    let (k_tilde, v_c, v_n) = partition_regions(&offset_map, &v, &keymask, p.m)?;
    let (q_tilde, k_proj) = project_qk(&k_tilde, p)?;
    let attn_raw = windowed_attention_raw(&q_tilde, &k_proj, &v_c, p)?;
    let x_prime = conv1x1(&attn_raw, &p.out_conv)?;
    let out = x.add(&x_prime)?;
    Ok(CRSelectorTrace {
        image_resized,
        gti_pre,
        gti,
        offset_cat,
        offset_pre,
        offset,
        offset_map,
        v,
        keymask,
        k_tilde,
        v_c,
        v_n,
        q_tilde,
        k_proj,
        attn_raw,
        x_prime,
        out,
    })
}

/// Whole pipeline, returning x + x'.
pub fn crselector_forward<S: Scalar>(
    x: &Tensor<S>,
    image: &Tensor<S>,
    p: &CRSelectorParams<S>,
    rng: &RngState,
) -> Result<Tensor<S>> {
    Ok(crselector_forward_traced(x, image, p, rng)?.out)
}
