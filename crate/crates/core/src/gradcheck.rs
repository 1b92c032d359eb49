//! Analytic backward passes for every differentiable operator, verified
//! against central finite differences.
//!
//! Checks run entirely in f64: inputs are built in f64, the forward path is
//! the same generic code the f32 pipeline uses, and the Gumbel noise is drawn
//! from a value-typed `RngState`, so re-evaluating the loss during a central
//! difference replays identical noise. Check sites near ReLU / hard-sigmoid
//! kinks or bilinear cell boundaries are excluded; configurations are
//! re-drawn until every remaining site is smooth.

use crate::crselector::{
    crselector_forward, crselector_forward_traced, CRSelectorParams,
    CRSelectorTrace, KeyMask,
};
use crate::error::{Error, Result};
use crate::rng::{streams, RngState};
use crate::sca::{sca_forward, PyramidFeatures, ScAParams};
use crate::tensor::{
    concat_channels, conv1x1, hard_sigmoid, relu, softmax_rows, tanh_map, window_merge,
    window_partition, Conv1x1Params, Matrix, Shape, Tensor,
};

/// Relative-error threshold for general (curved) ops.
pub const REL_TOL: f64 = 1e-3;
/// Tighter threshold for purely linear ops.
pub const LINEAR_TOL: f64 = 1e-5;
/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Kink / cell-boundary exclusion margin.
pub const KINK_MARGIN: f64 = 1e-3;
/// Perturbation sites per tensor are capped for runtime.
pub const MAX_SITES: usize = 64;

const REL_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub param_path: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_EPS)
}

/// Central difference (f(x+h) - f(x-h)) / (2h) per coordinate.
pub fn finite_diff(loss: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    (0..point.len())
        .map(|i| finite_diff_at(&loss, point, i, step))
        .collect()
}

fn finite_diff_at(loss: &impl Fn(&[f64]) -> f64, point: &[f64], i: usize, step: f64) -> f64 {
    let mut p = point.to_vec();
    p[i] = point[i] + step;
    let up = loss(&p);
    p[i] = point[i] - step;
    let down = loss(&p);
    (up - down) / (2.0 * step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleId {
    TensorCore,
    CRSelector,
    ScaHead,
}

impl std::str::FromStr for ModuleId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor-core" => Ok(ModuleId::TensorCore),
            "crselector" => Ok(ModuleId::CRSelector),
            "sca-head" => Ok(ModuleId::ScaHead),
            other => Err(Error::UnsupportedOp(other.into())),
        }
    }
}

// ---------------------------------------------------------------------------
// explicit backward functions (f64)
// ---------------------------------------------------------------------------

pub type T64 = Tensor<f64>;

pub fn conv1x1_backward(
    x: &T64,
    p: &Conv1x1Params<f64>,
    dy: &T64,
) -> (T64, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let mut dx = vec![0.0; s.len()];
    let mut dw = vec![0.0; p.c_out * p.c_in];
    let mut db = vec![0.0; p.c_out];
    for n in 0..s.n {
        for o in 0..p.c_out {
            for i in 0..s.h {
                for j in 0..s.w {
                    let g = dy.get(n, o, i, j);
                    db[o] += g;
                    for k in 0..p.c_in {
                        dw[o * p.c_in + k] += g * x.get(n, k, i, j);
                        dx[x.idx(n, k, i, j)] += g * p.w(o, k);
                    }
                }
            }
        }
    }
    (Tensor::from_parts(s, dx), dw, db)
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(x: &T64, dy: &T64) -> T64 {
    Tensor::from_parts(
        x.shape(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

/// Takes the forward output y = tanh(x).
pub fn tanh_backward(y: &T64, dy: &T64) -> T64 {
    Tensor::from_parts(
        y.shape(),
        y.data()
            .iter()
            .zip(dy.data())
            .map(|(&t, &g)| g * (1.0 - t * t))
            .collect(),
    )
}

/// Subgradient 0 at the kinks x = -1 and x = 1.
pub fn hard_sigmoid_backward(x: &T64, dy: &T64) -> T64 {
    Tensor::from_parts(
        x.shape(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if v > -1.0 && v < 1.0 { 0.5 * g } else { 0.0 })
            .collect(),
    )
}

/// Takes the forward output probabilities; dx_i = p_i (dy_i - sum_j dy_j p_j).
pub fn softmax_rows_backward(probs: &Matrix<f64>, dy: &Matrix<f64>) -> Matrix<f64> {
    let mut out = Matrix::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let mut dot = 0.0;
        for c in 0..probs.cols {
            dot += dy.at(r, c) * probs.at(r, c);
        }
        for c in 0..probs.cols {
            out.data[r * probs.cols + c] = probs.at(r, c) * (dy.at(r, c) - dot);
        }
    }
    out
}

/// Gradients w.r.t. both the sampled tensor and the offsets. Where a sample
/// coordinate is clamped at the border, its derivative w.r.t. the offset is
/// zero, matching the forward clamp.
pub fn warp_bilinear_backward(x: &T64, offset: &T64, dy: &T64) -> (T64, T64) {
    let s = x.shape();
    let mut dx = vec![0.0; s.len()];
    let mut doff = vec![0.0; offset.shape().len()];
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                let raw_x = j as f64 + offset.get(n, 0, i, j);
                let raw_y = i as f64 + offset.get(n, 1, i, j);
                let sx = raw_x.clamp(0.0, (s.w - 1) as f64);
                let sy = raw_y.clamp(0.0, (s.h - 1) as f64);
                let inside_x = raw_x > 0.0 && raw_x < (s.w - 1) as f64;
                let inside_y = raw_y > 0.0 && raw_y < (s.h - 1) as f64;
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(s.w - 1);
                let y1 = (y0 + 1).min(s.h - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                for c in 0..s.c {
                    let g = dy.get(n, c, i, j);
                    let a = x.get(n, c, y0, x0);
                    let b = x.get(n, c, y0, x1);
                    let cc = x.get(n, c, y1, x0);
                    let d = x.get(n, c, y1, x1);
                    dx[x.idx(n, c, y0, x0)] += g * (1.0 - fx) * (1.0 - fy);
                    dx[x.idx(n, c, y0, x1)] += g * fx * (1.0 - fy);
                    dx[x.idx(n, c, y1, x0)] += g * (1.0 - fx) * fy;
                    dx[x.idx(n, c, y1, x1)] += g * fx * fy;
                    if inside_x {
                        let dv_dsx = (1.0 - fy) * (b - a) + fy * (d - cc);
                        doff[offset.idx(n, 0, i, j)] += g * dv_dsx;
                    }
                    if inside_y {
                        let dv_dsy = (1.0 - fx) * (cc - a) + fx * (d - b);
                        doff[offset.idx(n, 1, i, j)] += g * dv_dsy;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(s, dx),
        Tensor::from_parts(offset.shape(), doff),
    )
}

/// Backward of y = x W applied per pixel in channel space (w_q / w_k).
pub fn right_matrix_backward(x: &T64, w: &Matrix<f64>, dy: &T64) -> (T64, Vec<f64>) {
    let s = x.shape();
    let mut dx = vec![0.0; s.len()];
    let mut dw = vec![0.0; w.rows * w.cols];
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                for o in 0..w.cols {
                    let g = dy.get(n, o, i, j);
                    for k in 0..w.rows {
                        dx[x.idx(n, k, i, j)] += g * w.at(k, o);
                        dw[k * w.cols + o] += g * x.get(n, k, i, j);
                    }
                }
            }
        }
    }
    (Tensor::from_parts(s, dx), dw)
}

/// Backward of per-window attention (before the output projection).
pub fn windowed_attention_backward(
    q_tilde: &T64,
    k_proj: &T64,
    v_c: &T64,
    m: usize,
    d: usize,
    dy: &T64,
) -> Result<(T64, T64, T64)> {
    let qw = window_partition(q_tilde, m)?;
    let kw = window_partition(k_proj, m)?;
    let vw = window_partition(v_c, m)?;
    let gw = window_partition(dy, m)?;
    let t = qw.tokens();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dqw = qw.clone();
    let mut dkw = kw.clone();
    let mut dvw = vw.clone();
    dqw.data.iter_mut().for_each(|v| *v = 0.0);
    dkw.data.iter_mut().for_each(|v| *v = 0.0);
    dvw.data.iter_mut().for_each(|v| *v = 0.0);
    for win in 0..qw.num_windows() {
        let q = qw.window_matrix(win);
        let k = kw.window_matrix(win);
        let v = vw.window_matrix(win);
        let g = gw.window_matrix(win);
        let c = q.cols;
        // recompute scores and attention
        let mut scores = Matrix::zeros(t, t);
        for a in 0..t {
            for b in 0..t {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += q.at(a, ch) * k.at(b, ch);
                }
                scores.data[a * t + b] = dot * scale;
            }
        }
        let attn = softmax_rows(&scores);
        // dV = A^T g
        for b in 0..t {
            for ch in 0..v.cols {
                let mut sum = 0.0;
                for a in 0..t {
                    sum += attn.at(a, b) * g.at(a, ch);
                }
                let at = dvw.idx(win, b, ch);
                dvw.data[at] += sum;
            }
        }
        // dA = g V^T, then through softmax
        let mut da = Matrix::zeros(t, t);
        for a in 0..t {
            for b in 0..t {
                let mut sum = 0.0;
                for ch in 0..v.cols {
                    sum += g.at(a, ch) * v.at(b, ch);
                }
                da.data[a * t + b] = sum;
            }
        }
        let ds = softmax_rows_backward(&attn, &da);
        // dQ = dS K * scale ; dK = dS^T Q * scale
        for a in 0..t {
            for ch in 0..c {
                let mut sq = 0.0;
                for b in 0..t {
                    sq += ds.at(a, b) * k.at(b, ch);
                }
                let at = dqw.idx(win, a, ch);
                dqw.data[at] += sq * scale;
            }
        }
        for b in 0..t {
            for ch in 0..c {
                let mut sk = 0.0;
                for a in 0..t {
                    sk += ds.at(a, b) * q.at(a, ch);
                }
                let at = dkw.idx(win, b, ch);
                dkw.data[at] += sk * scale;
            }
        }
    }
    Ok((window_merge(&dqw)?, window_merge(&dkw)?, window_merge(&dvw)?))
}

/// Soft Gumbel-Softmax backward: for keep probability p at temperature tau,
/// d keep / d logit_keep = p(1-p)/tau and d keep / d logit_drop = -p(1-p)/tau.
/// The hard straight-through path reuses this as its surrogate.
pub fn gumbel_soft_backward(keymask: &KeyMask<f64>, tau: f64, d_keep: &[f64]) -> Vec<[f64; 2]> {
    keymask
        .soft
        .iter()
        .zip(d_keep)
        .map(|(&p, &g)| {
            let j = p * (1.0 - p) / tau;
            [g * j, -g * j]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// full-pipeline backward for the critical-region selector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CRSelectorGrads {
    pub x: T64,
    pub image: T64,
    pub gti1_w: Vec<f64>,
    pub gti1_b: Vec<f64>,
    pub gti2_w: Vec<f64>,
    pub gti2_b: Vec<f64>,
    pub v_w: Vec<f64>,
    pub v_b: Vec<f64>,
    pub off_w: Vec<f64>,
    pub off_b: Vec<f64>,
    pub red_w: Vec<f64>,
    pub w_mask: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

fn window_index(mask: &KeyMask<f64>, n: usize, i: usize, j: usize, m: usize) -> usize {
    (n * mask.grid_h + (i / m)) * mask.grid_w + (j / m)
}

/// Chain the per-stage backwards through the whole traced forward pass. The
/// image must already share the feature map's spatial dims (the checker
/// builds its inputs that way, so the nearest resize is the identity).
pub fn crselector_backward(
    x: &T64,
    p: &CRSelectorParams<f64>,
    tr: &CRSelectorTrace<f64>,
    dy: &T64,
) -> Result<CRSelectorGrads> {
    let s = x.shape();
    let m = p.m;
    let mask = &tr.keymask;

    // residual
    let mut dx = dy.data().to_vec();

    // out projection
    let (d_attn_raw, out_w, out_b) = conv1x1_backward(&tr.attn_raw, &p.out_conv, dy);

    // attention
    let (dq, dk, dvc) =
        windowed_attention_backward(&tr.q_tilde, &tr.k_proj, &tr.v_c, m, p.d, &d_attn_raw)?;

    // q/k projections share k_tilde
    let (dkt_q, w_q) = right_matrix_backward(&tr.k_tilde, &p.w_q, &dq);
    let (dkt_k, w_k) = right_matrix_backward(&tr.k_tilde, &p.w_k, &dk);
    let d_ktilde = dkt_q.add(&dkt_k)?;

    // masked partition: k_tilde = omap*km, v_c = v*km
    let mut d_omap = vec![0.0; s.len()];
    let mut d_v = vec![0.0; s.len()];
    let mut d_km = vec![0.0; mask.num_windows()];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    let win = window_index(mask, n, i, j, m);
                    let km = mask.values[win];
                    let idx = tr.offset_map.idx(n, c, i, j);
                    d_omap[idx] += d_ktilde.data()[idx] * km;
                    d_km[win] += d_ktilde.data()[idx] * tr.offset_map.data()[idx];
                    d_v[idx] += dvc.data()[idx] * km;
                    d_km[win] += dvc.data()[idx] * tr.v.data()[idx];
                }
            }
        }
    }
    let d_omap = Tensor::from_parts(s, d_omap);
    let mut d_v = Tensor::from_parts(tr.v.shape(), d_v);

    // keymask -> logits (soft path / straight-through surrogate)
    let d_logits = gumbel_soft_backward(mask, p.tau, &d_km);

    // logits -> flattened window features and w_mask
    let reduce_cat = concat_channels(&tr.v, &tr.gti)?;
    let reduced = conv1x1(&reduce_cat, &p.reduce_conv)?;
    let red_wins = window_partition(&reduced, m)?;
    let flat_len = red_wins.tokens() * red_wins.channels;
    let mut w_mask = vec![0.0; p.w_mask.rows * p.w_mask.cols];
    let mut d_red_wins = red_wins.clone();
    d_red_wins.data.iter_mut().for_each(|v| *v = 0.0);
    for win in 0..red_wins.num_windows() {
        let dl = d_logits[win];
        for row in 0..flat_len {
            let f = red_wins.data[win * flat_len + row];
            d_red_wins.data[win * flat_len + row] =
                dl[0] * p.w_mask.at(row, 0) + dl[1] * p.w_mask.at(row, 1);
            w_mask[row * 2] += f * dl[0];
            w_mask[row * 2 + 1] += f * dl[1];
        }
    }
    let d_reduced = window_merge(&d_red_wins)?;

    // reduce conv (bias-free)
    let (d_red_cat, red_w, _red_b) = conv1x1_backward(&reduce_cat, &p.reduce_conv, &d_reduced);
    let cv = tr.v.shape().c;
    d_v = d_v.add(&d_red_cat.channel_slice(0, cv)?)?;
    let mut d_gti = d_red_cat.channel_slice(cv, tr.gti.shape().c)?;

    // warp
    let (d_x_warp, d_offset) = warp_bilinear_backward(x, &tr.offset, &d_omap);
    for (a, b) in dx.iter_mut().zip(d_x_warp.data()) {
        *a += b;
    }

    // offset head: tanh(conv(relu(cat))) * r
    let t = tanh_map(&tr.offset_pre);
    let d_pre = Tensor::from_parts(
        t.shape(),
        t.data()
            .iter()
            .zip(d_offset.data())
            .map(|(&tv, &g)| g * p.r * (1.0 - tv * tv))
            .collect(),
    );
    let relu_cat = relu(&tr.offset_cat);
    let (d_relu_cat, off_w, off_b) = conv1x1_backward(&relu_cat, &p.offset_conv, &d_pre);
    let d_cat = relu_backward(&tr.offset_cat, &d_relu_cat);
    let d_cat_x = d_cat.channel_slice(0, s.c)?;
    for (a, b) in dx.iter_mut().zip(d_cat_x.data()) {
        *a += b;
    }
    d_gti = d_gti.add(&d_cat.channel_slice(s.c, tr.gti.shape().c)?)?;

    // content projection
    let (d_x_v, v_w, v_b) = conv1x1_backward(x, &p.v_conv, &d_v);
    for (a, b) in dx.iter_mut().zip(d_x_v.data()) {
        *a += b;
    }

    // texture extraction
    let relu_g1 = relu(&tr.gti_pre);
    let (d_relu_g1, gti2_w, gti2_b) = conv1x1_backward(&relu_g1, &p.gti_conv2, &d_gti);
    let d_g1 = relu_backward(&tr.gti_pre, &d_relu_g1);
    let (d_image, gti1_w, gti1_b) = conv1x1_backward(&tr.image_resized, &p.gti_conv1, &d_g1);

    Ok(CRSelectorGrads {
        x: Tensor::from_parts(s, dx),
        image: d_image,
        gti1_w,
        gti1_b,
        gti2_w,
        gti2_b,
        v_w,
        v_b,
        off_w,
        off_b,
        red_w,
        w_mask,
        w_q,
        w_k,
        out_w,
        out_b,
    })
}

// ---------------------------------------------------------------------------
// scale-aware head backward
// ---------------------------------------------------------------------------

pub struct ScaGrads {
    pub levels: Vec<T64>,
    pub gate_w: Vec<f64>,
    pub gate_b: Vec<f64>,
}

pub fn sca_backward(
    f: &PyramidFeatures<f64>,
    p: &ScAParams<f64>,
    dy_levels: &[T64],
) -> Result<ScaGrads> {
    let batch = f.batch();
    let c = f.channels();
    let mut gate_w = vec![0.0; c];
    let mut gate_b = vec![0.0; 1];
    let mut d_levels = Vec::with_capacity(f.num_levels());
    for (h, lvl) in f.levels().iter().enumerate() {
        let s = lvl.shape();
        let dy = &dy_levels[h];
        let plane = (s.h * s.w) as f64;
        let mut d_lvl = vec![0.0; s.len()];
        for n in 0..batch {
            // recompute the gate chain for this (level, batch element)
            let mut pre = p.gate_conv.bias[0];
            let mut means = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for i in 0..s.h {
                    for j in 0..s.w {
                        sum += lvl.get(n, ch, i, j);
                    }
                }
                means[ch] = sum / plane;
                pre += p.gate_conv.w(0, ch) * means[ch];
            }
            let u = pre.max(0.0);
            let gamma = ((u + 1.0) / 2.0).clamp(0.0, 1.0);
            // residual path and d gamma
            let mut d_gamma = 0.0;
            for ch in 0..c {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let g = dy.get(n, ch, i, j);
                        d_lvl[lvl.idx(n, ch, i, j)] += g * (1.0 + gamma);
                        d_gamma += g * lvl.get(n, ch, i, j);
                    }
                }
            }
            // gamma = phi(relu(pre)); u >= 0 so the phi kink sits at u = 1
            let dphi = if u < 1.0 { 0.5 } else { 0.0 };
            let drelu = if pre > 0.0 { 1.0 } else { 0.0 };
            let d_pre = d_gamma * dphi * drelu;
            gate_b[0] += d_pre;
            for ch in 0..c {
                gate_w[ch] += d_pre * means[ch];
                let per_pixel = d_pre * p.gate_conv.w(0, ch) / plane;
                for i in 0..s.h {
                    for j in 0..s.w {
                        d_lvl[lvl.idx(n, ch, i, j)] += per_pixel;
                    }
                }
            }
        }
        d_levels.push(Tensor::from_parts(s, d_lvl));
    }
    Ok(ScaGrads {
        levels: d_levels,
        gate_w,
        gate_b,
    })
}

// ---------------------------------------------------------------------------
// check harness
// ---------------------------------------------------------------------------

struct Harness {
    rng: RngState,
    counter: u64,
    reports: Vec<GradCheckReport>,
}

impl Harness {
    fn new(seed: u64) -> Self {
        Harness {
            rng: RngState::new(seed).stream(streams::GRADCHECK),
            counter: 0,
            reports: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn check(
        &mut self,
        op: &str,
        path: &str,
        point: &[f64],
        analytic: &[f64],
        loss: &dyn Fn(&[f64]) -> f64,
        tol: f64,
        exclude: &dyn Fn(usize) -> bool,
    ) {
        assert_eq!(point.len(), analytic.len());
        self.counter += 1;
        let sites = self
            .rng
            .stream(streams::GRADCHECK + self.counter)
            .choose(point.len(), MAX_SITES);
        for coord in sites {
            if exclude(coord) {
                continue;
            }
            let numeric = finite_diff_at(&loss, point, coord, STEP);
            let a = analytic[coord];
            let e = rel_err(a, numeric);
            // tiny gradients on both sides are compared absolutely
            let pass = e < tol || (a.abs() < 1e-10 && numeric.abs() < 1e-7);
            self.reports.push(GradCheckReport {
                op_name: op.into(),
                param_path: path.into(),
                coord,
                analytic: a,
                numeric,
                rel_err: e,
                pass,
            });
        }
    }

    fn finish(mut self) -> Vec<GradCheckReport> {
        self.reports.sort_by(|a, b| {
            (&a.op_name, &a.param_path, a.coord).cmp(&(&b.op_name, &b.param_path, b.coord))
        });
        self.reports
    }
}

fn weighted_loss(out: &[f64], lw: &[f64]) -> f64 {
    out.iter().zip(lw).map(|(a, b)| a * b).sum()
}

fn t64(shape: Shape, data: &[f64]) -> T64 {
    Tensor::from_parts(shape, data.to_vec())
}

fn no_exclude(_: usize) -> bool {
    false
}

// -------------------- tensor-core op checks --------------------

fn check_tensor_core(h: &mut Harness, seed: u64) {
    let rng = RngState::new(seed);

    // conv1x1 (linear)
    {
        let xs = Shape::new(1, 3, 3, 3);
        let x: T64 = rng.stream(10).uniform_tensor(xs, 1.0);
        let p = Conv1x1Params::new(
            3,
            2,
            rng.stream(11).uniform_vec(6, 1.0),
            rng.stream(12).uniform_vec(2, 1.0),
        )
        .unwrap();
        let lw: Vec<f64> = rng.stream(13).uniform_vec(2 * 9, 1.0);
        let dy = t64(Shape::new(1, 2, 3, 3), &lw);
        let (dx, dw, db) = conv1x1_backward(&x, &p, &dy);
        let loss_x = |v: &[f64]| weighted_loss(conv1x1(&t64(xs, v), &p).unwrap().data(), &lw);
        h.check("conv1x1", "x", x.data(), dx.data(), &loss_x, LINEAR_TOL, &no_exclude);
        let loss_w = |v: &[f64]| {
            let mut p2 = p.clone();
            p2.weight = v.to_vec();
            weighted_loss(conv1x1(&x, &p2).unwrap().data(), &lw)
        };
        h.check("conv1x1", "weight", &p.weight, &dw, &loss_w, LINEAR_TOL, &no_exclude);
        let loss_b = |v: &[f64]| {
            let mut p2 = p.clone();
            p2.bias = v.to_vec();
            weighted_loss(conv1x1(&x, &p2).unwrap().data(), &lw)
        };
        h.check("conv1x1", "bias", &p.bias, &db, &loss_b, LINEAR_TOL, &no_exclude);
    }

    // activations
    {
        let xs = Shape::new(1, 2, 4, 4);
        let x: T64 = rng.stream(20).uniform_tensor(xs, 2.0);
        let lw: Vec<f64> = rng.stream(21).uniform_vec(xs.len(), 1.0);
        let dy = t64(xs, &lw);

        let d = relu_backward(&x, &dy);
        let loss = |v: &[f64]| weighted_loss(relu(&t64(xs, v)).data(), &lw);
        let xd = x.data().to_vec();
        h.check("relu", "x", x.data(), d.data(), &loss, REL_TOL, &|i| {
            xd[i].abs() < KINK_MARGIN
        });

        let y = tanh_map(&x);
        let d = tanh_backward(&y, &dy);
        let loss = |v: &[f64]| weighted_loss(tanh_map(&t64(xs, v)).data(), &lw);
        h.check("tanh", "x", x.data(), d.data(), &loss, REL_TOL, &no_exclude);

        let d = hard_sigmoid_backward(&x, &dy);
        let loss = |v: &[f64]| weighted_loss(hard_sigmoid(&t64(xs, v)).data(), &lw);
        h.check("hard_sigmoid", "x", x.data(), d.data(), &loss, REL_TOL, &|i| {
            (xd[i].abs() - 1.0).abs() < KINK_MARGIN
        });
    }

    // softmax rows
    {
        let m = Matrix::new(4, 5, rng.stream(30).uniform_vec(20, 2.0)).unwrap();
        let lw: Vec<f64> = rng.stream(31).uniform_vec(20, 1.0);
        let dy = Matrix::new(4, 5, lw.clone()).unwrap();
        let probs = softmax_rows(&m);
        let d = softmax_rows_backward(&probs, &dy);
        let loss = |v: &[f64]| {
            let mm = Matrix::new(4, 5, v.to_vec()).unwrap();
            weighted_loss(&softmax_rows(&mm).data, &lw)
        };
        h.check("softmax_rows", "logits", &m.data, &d.data, &loss, REL_TOL, &no_exclude);
    }

    // window partition/merge (a permutation, so linear)
    {
        let xs = Shape::new(1, 2, 4, 4);
        let x: T64 = rng.stream(40).uniform_tensor(xs, 1.0);
        let lw: Vec<f64> = rng.stream(41).uniform_vec(xs.len(), 1.0);
        let loss = |v: &[f64]| {
            let wins = window_partition(&t64(xs, v), 2).unwrap();
            weighted_loss(&wins.data, &lw)
        };
        // analytic: the permutation transpose routes each weight back
        let wins_of_lw = window_partition(&t64(xs, &lw), 2).unwrap();
        let mut back = wins_of_lw.clone();
        let probe = window_partition(
            &Tensor::from_fn(xs, |n, c, i, j| {
                (((n * xs.c + c) * xs.h + i) * xs.w + j) as f64
            }),
            2,
        )
        .unwrap();
        for (slot, &src) in probe.data.iter().enumerate() {
            back.data[slot] = lw[slot];
            let _ = src;
        }
        let mut analytic = vec![0.0; xs.len()];
        for (slot, &src) in probe.data.iter().enumerate() {
            analytic[src as usize] = lw[slot];
        }
        h.check("window_partition", "x", x.data(), &analytic, &loss, LINEAR_TOL, &no_exclude);
    }

    // bilinear warp
    {
        let xs = Shape::new(1, 2, 5, 5);
        let os = Shape::new(1, 2, 5, 5);
        let mut attempt = 0u64;
        let (x, off): (T64, T64) = loop {
            let x: T64 = rng.stream(50 + attempt).uniform_tensor(xs, 1.0);
            let off: T64 = rng.stream(60 + attempt).uniform_tensor(os, 0.45);
            if warp_sites_smooth(&x, &off) {
                break (x, off);
            }
            attempt += 1;
            assert!(attempt < 200, "no smooth warp configuration found");
        };
        let lw: Vec<f64> = rng.stream(70).uniform_vec(xs.len(), 1.0);
        let dy = t64(xs, &lw);
        let (dx, doff) = warp_bilinear_backward(&x, &off, &dy);
        let loss_x = |v: &[f64]| {
            weighted_loss(
                crate::crselector::warp_bilinear(&t64(xs, v), &off).unwrap().data(),
                &lw,
            )
        };
        h.check("warp_bilinear", "x", x.data(), dx.data(), &loss_x, REL_TOL, &no_exclude);
        let loss_o = |v: &[f64]| {
            weighted_loss(
                crate::crselector::warp_bilinear(&x, &t64(os, v)).unwrap().data(),
                &lw,
            )
        };
        h.check("warp_bilinear", "offset", off.data(), doff.data(), &loss_o, REL_TOL, &no_exclude);
    }

    // per-pixel right-matrix projection (w_q / w_k path, linear)
    {
        let xs = Shape::new(1, 2, 4, 4);
        let x: T64 = rng.stream(80).uniform_tensor(xs, 1.0);
        let w = Matrix::new(2, 2, rng.stream(81).uniform_vec(4, 1.0)).unwrap();
        let lw: Vec<f64> = rng.stream(82).uniform_vec(xs.len(), 1.0);
        let dy = t64(xs, &lw);
        let (dx, dw) = right_matrix_backward(&x, &w, &dy);
        let apply = |xv: &T64, wv: &Matrix<f64>| {
            Tensor::from_fn(xs, |n, o, i, j| {
                (0..2).map(|k| xv.get(n, k, i, j) * wv.at(k, o)).sum()
            })
        };
        let loss_x = |v: &[f64]| weighted_loss(apply(&t64(xs, v), &w).data(), &lw);
        h.check("project_qk", "x", x.data(), dx.data(), &loss_x, LINEAR_TOL, &no_exclude);
        let loss_w = |v: &[f64]| {
            let wm = Matrix::new(2, 2, v.to_vec()).unwrap();
            weighted_loss(apply(&x, &wm).data(), &lw)
        };
        h.check("project_qk", "w", &w.data, &dw, &loss_w, LINEAR_TOL, &no_exclude);
    }

    // windowed attention core
    {
        let xs = Shape::new(1, 2, 4, 4);
        let q: T64 = rng.stream(90).uniform_tensor(xs, 1.0);
        let k: T64 = rng.stream(91).uniform_tensor(xs, 1.0);
        let v: T64 = rng.stream(92).uniform_tensor(xs, 1.0);
        let lw: Vec<f64> = rng.stream(93).uniform_vec(xs.len(), 1.0);
        let dy = t64(xs, &lw);
        let (dq, dk, dv) = windowed_attention_backward(&q, &k, &v, 2, 2, &dy).unwrap();
        let p = attn_params();
        let run = |qv: &T64, kv: &T64, vv: &T64| {
            crate::crselector::windowed_attention_raw(qv, kv, vv, &p).unwrap()
        };
        let loss_q = |val: &[f64]| weighted_loss(run(&t64(xs, val), &k, &v).data(), &lw);
        h.check("windowed_attention", "q", q.data(), dq.data(), &loss_q, REL_TOL, &no_exclude);
        let loss_k = |val: &[f64]| weighted_loss(run(&q, &t64(xs, val), &v).data(), &lw);
        h.check("windowed_attention", "k", k.data(), dk.data(), &loss_k, REL_TOL, &no_exclude);
        let loss_v = |val: &[f64]| weighted_loss(run(&q, &k, &t64(xs, val)).data(), &lw);
        h.check("windowed_attention", "v", v.data(), dv.data(), &loss_v, REL_TOL, &no_exclude);
    }

    // soft Gumbel keymask w.r.t. the logits, frozen noise
    {
        let n_win = 8;
        let logits: Vec<f64> = rng.stream(100).uniform_vec(2 * n_win, 1.0);
        let noise = rng.stream(101).gumbel_noise(2 * n_win);
        let tau = 0.7;
        let lw: Vec<f64> = rng.stream(102).uniform_vec(n_win, 1.0);
        let soft = |l: &[f64]| -> Vec<f64> {
            (0..n_win)
                .map(|w| {
                    let zk = (l[2 * w] + noise[2 * w]) / tau;
                    let zd = (l[2 * w + 1] + noise[2 * w + 1]) / tau;
                    let mx = zk.max(zd);
                    (zk - mx).exp() / ((zk - mx).exp() + (zd - mx).exp())
                })
                .collect()
        };
        let keep = soft(&logits);
        let mask = KeyMask {
            batch: 1,
            grid_h: 2,
            grid_w: 4,
            values: keep.clone(),
            soft: keep,
            hard: false,
        };
        let dl = gumbel_soft_backward(&mask, tau, &lw);
        let analytic: Vec<f64> = dl.iter().flat_map(|p| [p[0], p[1]]).collect();
        let loss = |l: &[f64]| weighted_loss(&soft(l), &lw);
        h.check("gumbel_softmax", "logits", &logits, &analytic, &loss, REL_TOL, &no_exclude);

        // straight-through hard path: its surrogate gradient must equal the
        // soft gradient exactly (analytic vs analytic-of-soft, no finite diff)
        let mut st_mask = mask.clone();
        st_mask.hard = true;
        st_mask.values = st_mask.soft.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
        let st = gumbel_soft_backward(&st_mask, tau, &lw);
        for (w, (a, b)) in dl.iter().zip(&st).enumerate() {
            for k in 0..2 {
                let e = rel_err(a[k], b[k]);
                h.reports.push(GradCheckReport {
                    op_name: "gumbel_softmax_st".into(),
                    param_path: "logits".into(),
                    coord: 2 * w + k,
                    analytic: a[k],
                    numeric: b[k],
                    rel_err: e,
                    pass: e < REL_TOL,
                });
            }
        }
    }
}

fn attn_params() -> CRSelectorParams<f64> {
    let mut p = CRSelectorParams::seeded(2, 1, 2, &RngState::new(0));
    p.d = 2;
    p
}

fn warp_sites_smooth(x: &T64, off: &T64) -> bool {
    let s = x.shape();
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                let raw_x = j as f64 + off.get(n, 0, i, j);
                let raw_y = i as f64 + off.get(n, 1, i, j);
                for (raw, limit) in [(raw_x, (s.w - 1) as f64), (raw_y, (s.h - 1) as f64)] {
                    // away from the clamp boundaries
                    if (raw - 0.0).abs() < 2.0 * KINK_MARGIN
                        || (raw - limit).abs() < 2.0 * KINK_MARGIN
                    {
                        return false;
                    }
                    if raw > 0.0 && raw < limit {
                        let frac = raw - raw.floor();
                        if frac < 2.0 * KINK_MARGIN || frac > 1.0 - 2.0 * KINK_MARGIN {
                            return false;
                        }
                    }
                }
            }
        }
    }
    true
}

// -------------------- crselector composite check --------------------

struct CrSetup {
    x: T64,
    image: T64,
    p: CRSelectorParams<f64>,
    rng: RngState,
    lw: Vec<f64>,
}

fn cr_trace_smooth(tr: &crate::crselector::CRSelectorTrace<f64>, x: &T64) -> bool {
    if tr.offset_cat.data().iter().any(|v| v.abs() < 2.0 * KINK_MARGIN) {
        return false;
    }
    if tr.gti_pre.data().iter().any(|v| v.abs() < 2.0 * KINK_MARGIN) {
        return false;
    }
    warp_sites_smooth(x, &tr.offset)
}

fn cr_setup(seed: u64) -> CrSetup {
    let xs = Shape::new(1, 2, 4, 4);
    let is = Shape::new(1, 1, 4, 4);
    for attempt in 0..300 {
        let s = seed + attempt * 1000;
        let x: T64 = RngState::new(s + 1).uniform_tensor(xs, 1.0);
        let image: T64 = RngState::new(s + 2).uniform_tensor(is, 1.0);
        let mut p = CRSelectorParams::<f64>::seeded(2, 1, 2, &RngState::new(s + 3));
        p.hard_mask = false;
        p.r = 0.4;
        let rng = RngState::new(s + 4);
        let tr = crselector_forward_traced(&x, &image, &p, &rng).unwrap();
        if cr_trace_smooth(&tr, &x) {
            let lw = RngState::new(s + 5).uniform_vec(xs.len(), 1.0);
            return CrSetup { x, image, p, rng, lw };
        }
    }
    panic!("no smooth crselector configuration found");
}

fn cr_loss(setup: &CrSetup, target: &str, vals: &[f64]) -> f64 {
    let mut x = setup.x.clone();
    let mut image = setup.image.clone();
    let mut p = setup.p.clone();
    match target {
        "x" => x = t64(x.shape(), vals),
        "image" => image = t64(image.shape(), vals),
        "gti1.weight" => p.gti_conv1.weight = vals.to_vec(),
        "gti1.bias" => p.gti_conv1.bias = vals.to_vec(),
        "gti2.weight" => p.gti_conv2.weight = vals.to_vec(),
        "gti2.bias" => p.gti_conv2.bias = vals.to_vec(),
        "v.weight" => p.v_conv.weight = vals.to_vec(),
        "v.bias" => p.v_conv.bias = vals.to_vec(),
        "offset.weight" => p.offset_conv.weight = vals.to_vec(),
        "offset.bias" => p.offset_conv.bias = vals.to_vec(),
        "reduce.weight" => p.reduce_conv.weight = vals.to_vec(),
        "w_mask" => p.w_mask.data = vals.to_vec(),
        "w_q" => p.w_q.data = vals.to_vec(),
        "w_k" => p.w_k.data = vals.to_vec(),
        "out.weight" => p.out_conv.weight = vals.to_vec(),
        "out.bias" => p.out_conv.bias = vals.to_vec(),
        other => panic!("unknown target {other}"),
    }
    let out = crselector_forward(&x, &image, &p, &setup.rng).unwrap();
    weighted_loss(out.data(), &setup.lw)
}

fn check_crselector(h: &mut Harness, seed: u64) {
    let setup = cr_setup(seed.wrapping_mul(31).wrapping_add(7));
    let tr = crselector_forward_traced(&setup.x, &setup.image, &setup.p, &setup.rng).unwrap();
    let dy = t64(setup.x.shape(), &setup.lw);
    let g = crselector_backward(&setup.x, &setup.p, &tr, &dy).unwrap();

    let targets: Vec<(&str, &[f64], &[f64])> = vec![
        ("x", setup.x.data(), g.x.data()),
        ("image", setup.image.data(), g.image.data()),
        ("gti1.weight", &setup.p.gti_conv1.weight, &g.gti1_w),
        ("gti1.bias", &setup.p.gti_conv1.bias, &g.gti1_b),
        ("gti2.weight", &setup.p.gti_conv2.weight, &g.gti2_w),
        ("gti2.bias", &setup.p.gti_conv2.bias, &g.gti2_b),
        ("v.weight", &setup.p.v_conv.weight, &g.v_w),
        ("v.bias", &setup.p.v_conv.bias, &g.v_b),
        ("offset.weight", &setup.p.offset_conv.weight, &g.off_w),
        ("offset.bias", &setup.p.offset_conv.bias, &g.off_b),
        ("reduce.weight", &setup.p.reduce_conv.weight, &g.red_w),
        ("w_mask", &setup.p.w_mask.data, &g.w_mask),
        ("w_q", &setup.p.w_q.data, &g.w_q),
        ("w_k", &setup.p.w_k.data, &g.w_k),
        ("out.weight", &setup.p.out_conv.weight, &g.out_w),
        ("out.bias", &setup.p.out_conv.bias, &g.out_b),
    ];
    for (path, point, analytic) in targets {
        let loss = |v: &[f64]| cr_loss(&setup, path, v);
        h.check("crselector_forward", path, point, analytic, &loss, REL_TOL, &no_exclude);
    }
}

// -------------------- scale-aware head check --------------------

fn check_sca(h: &mut Harness, seed: u64) {
    let rng = RngState::new(seed.wrapping_mul(77).wrapping_add(3));
    let dims = [(4usize, 4usize), (2, 2)];
    let mut attempt = 0u64;
    let (f, p) = loop {
        let levels: Vec<T64> = dims
            .iter()
            .enumerate()
            .map(|(i, &(hh, ww))| {
                rng.stream(200 + attempt * 10 + i as u64)
                    .uniform_tensor(Shape::new(2, 3, hh, ww), 1.0)
            })
            .collect();
        let f = PyramidFeatures::new(levels).unwrap();
        let p = ScAParams::new(
            Conv1x1Params::new(
                3,
                1,
                rng.stream(250 + attempt).uniform_vec(3, 1.0),
                rng.stream(251 + attempt).uniform_vec(1, 0.5),
            )
            .unwrap(),
        )
        .unwrap();
        // exclude relu and phi kinks in the scalar gate chain
        let smooth = f.levels().iter().all(|lvl| {
            let pooled = crate::tensor::global_avg_pool(lvl);
            let pre = conv1x1(&pooled, &p.gate_conv).unwrap();
            pre.data()
                .iter()
                .all(|&v| v.abs() > 2.0 * KINK_MARGIN && (v - 1.0).abs() > 2.0 * KINK_MARGIN)
        });
        if smooth {
            break (f, p);
        }
        attempt += 1;
        assert!(attempt < 200, "no smooth sca configuration found");
    };

    let lw: Vec<Vec<f64>> = f
        .levels()
        .iter()
        .enumerate()
        .map(|(i, lvl)| rng.stream(300 + i as u64).uniform_vec(lvl.shape().len(), 1.0))
        .collect();
    let dy: Vec<T64> = f
        .levels()
        .iter()
        .zip(&lw)
        .map(|(lvl, w)| t64(lvl.shape(), w))
        .collect();
    let g = sca_backward(&f, &p, &dy).unwrap();

    let run_loss = |f2: &PyramidFeatures<f64>, p2: &ScAParams<f64>| {
        let (out, _) = sca_forward(f2, p2).unwrap();
        out.levels()
            .iter()
            .zip(&lw)
            .map(|(lvl, w)| weighted_loss(lvl.data(), w))
            .sum::<f64>()
    };

    for (i, lvl) in f.levels().iter().enumerate() {
        let loss = |v: &[f64]| {
            let mut levels: Vec<T64> = f.levels().to_vec();
            levels[i] = t64(lvl.shape(), v);
            run_loss(&PyramidFeatures::new(levels).unwrap(), &p)
        };
        h.check(
            "sca_forward",
            &format!("level{i}"),
            lvl.data(),
            g.levels[i].data(),
            &loss,
            REL_TOL,
            &no_exclude,
        );
    }
    let loss_w = |v: &[f64]| {
        let mut p2 = p.clone();
        p2.gate_conv.weight = v.to_vec();
        run_loss(&f, &p2)
    };
    h.check("sca_forward", "gate.weight", &p.gate_conv.weight, &g.gate_w, &loss_w, REL_TOL, &no_exclude);
    let loss_b = |v: &[f64]| {
        let mut p2 = p.clone();
        p2.gate_conv.bias = v.to_vec();
        run_loss(&f, &p2)
    };
    h.check("sca_forward", "gate.bias", &p.gate_conv.bias, &g.gate_b, &loss_b, REL_TOL, &no_exclude);
}

/// Run the full check suite for one module. Reports are order-stable (sorted
/// by op, path, coordinate).
pub fn check_module(module: ModuleId, seed: u64) -> Vec<GradCheckReport> {
    let mut h = Harness::new(seed);
    match module {
        ModuleId::TensorCore => check_tensor_core(&mut h, seed),
        ModuleId::CRSelector => check_crselector(&mut h, seed),
        ModuleId::ScaHead => check_sca(&mut h, seed),
    }
    h.finish()
}

/// All modules in a fixed order.
pub fn check_all(seed: u64) -> Vec<GradCheckReport> {
    let mut out = check_module(ModuleId::TensorCore, seed);
    out.extend(check_module(ModuleId::CRSelector, seed));
    out.extend(check_module(ModuleId::ScaHead, seed));
    out
}

/// Dispatch by module name; unknown names error.
pub fn check_named(module: &str, seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(check_module(module.parse()?, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_square_and_sum() {
        let g = finite_diff(|x| x[0] * x[0], &[3.0], STEP);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff(|x| x.iter().sum(), &[1.0, -2.0, 5.0], STEP);
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn relu_backward_at_two() {
        let x = t64(Shape::new(1, 1, 1, 1), &[2.0]);
        let dy = t64(Shape::new(1, 1, 1, 1), &[1.0]);
        assert_eq!(relu_backward(&x, &dy).data(), &[1.0]);
    }

    #[test]
    fn softmax_backward_equal_logits_jacobian() {
        let m = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let probs = softmax_rows(&m);
        let dy = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let d = softmax_rows_backward(&probs, &dy);
        assert!((d.at(0, 0) - 0.25).abs() < 1e-12);
        assert!((d.at(0, 1) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn conv_weight_grad_scalar_case() {
        let x = t64(Shape::new(1, 1, 1, 1), &[3.0]);
        let p = Conv1x1Params::new(1, 1, vec![2.0], vec![0.0]).unwrap();
        let dy = t64(Shape::new(1, 1, 1, 1), &[1.0]);
        let (_, dw, db) = conv1x1_backward(&x, &p, &dy);
        assert_eq!(dw, vec![3.0]);
        assert_eq!(db, vec![1.0]);
    }

    #[test]
    fn tensor_core_checks_pass() {
        let reports = check_module(ModuleId::TensorCore, 42);
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(
                r.pass,
                "{} {} coord {}: analytic {} numeric {} rel {}",
                r.op_name, r.param_path, r.coord, r.analytic, r.numeric, r.rel_err
            );
        }
    }

    #[test]
    fn crselector_soft_mask_checks_pass() {
        let reports = check_module(ModuleId::CRSelector, 42);
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(
                r.pass,
                "{} {} coord {}: analytic {} numeric {} rel {}",
                r.op_name, r.param_path, r.coord, r.analytic, r.numeric, r.rel_err
            );
        }
    }

    #[test]
    fn sca_checks_pass() {
        let reports = check_module(ModuleId::ScaHead, 42);
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(
                r.pass,
                "{} {} coord {}: analytic {} numeric {} rel {}",
                r.op_name, r.param_path, r.coord, r.analytic, r.numeric, r.rel_err
            );
        }
    }

    #[test]
    fn unknown_module_name_rejected() {
        assert!(check_named("nonsense", 0).is_err());
    }

    #[test]
    fn reports_are_order_stable() {
        let a = check_module(ModuleId::ScaHead, 5);
        let b = check_module(ModuleId::ScaHead, 5);
        let key = |r: &GradCheckReport| (r.op_name.clone(), r.param_path.clone(), r.coord);
        assert_eq!(
            a.iter().map(key).collect::<Vec<_>>(),
            b.iter().map(key).collect::<Vec<_>>()
        );
        let mut sorted = a.iter().map(key).collect::<Vec<_>>();
        sorted.sort();
        assert_eq!(sorted, a.iter().map(key).collect::<Vec<_>>());
    }
}
