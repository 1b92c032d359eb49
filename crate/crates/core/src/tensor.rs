//! Dense NCHW tensors and the primitive numeric operations the attention
//! modules are built from: 1x1 convolution, activations, row softmax,
//! global average pooling, and window partition/merge.
//!
//! Tensors are immutable after construction and every operation is a pure
//! function, so everything here is safe to call concurrently.

use crate::error::{Error, Result};

/// Scalar abstraction so the forward path runs in f32 while the gradient
/// checker replays it in f64.
pub trait Scalar: num_traits::Float + std::fmt::Debug + Copy + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array, batch-channel-row-col, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::InvalidTensor(format!(
                "all dims must be >= 1, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::InvalidTensor(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor("non-finite value in tensor".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// Construction bypass for op outputs whose finiteness follows from the
    /// math; shape/length must still agree.
    pub(crate) fn from_parts(shape: Shape, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::from_parts(shape, vec![S::zero(); shape.len()])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for i in 0..shape.h {
                    for j in 0..shape.w {
                        data.push(f(n, c, i, j));
                    }
                }
            }
        }
        Tensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + i) * self.shape.w + j
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> S {
        self.data[self.idx(n, c, i, j)]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{} vs {}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape, data))
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Slice out a contiguous channel range.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Tensor<S>> {
        if start + count > self.shape.c {
            return Err(Error::ShapeMismatch(format!(
                "channel slice {start}..{} out of {} channels",
                start + count,
                self.shape.c
            )));
        }
        let out_shape = Shape::new(self.shape.n, count, self.shape.h, self.shape.w);
        let out = Tensor::from_fn(out_shape, |n, c, i, j| self.get(n, c + start, i, j));
        Ok(out)
    }

    /// Cast between scalar widths (f32 forward path vs f64 replay).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape,
            self.data.iter().map(|v| T::from_f64(Scalar::to_f64(*v))).collect(),
        )
    }
}

/// 1x1 convolution weights: a per-pixel channel-space affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1Params<S: Scalar = f32> {
    pub c_in: usize,
    pub c_out: usize,
    /// Row-major c_out x c_in.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Conv1x1Params<S> {
    pub fn new(c_in: usize, c_out: usize, weight: Vec<S>, bias: Vec<S>) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::InvalidParam("conv1x1 channels must be >= 1".into()));
        }
        if weight.len() != c_out * c_in {
            return Err(Error::InvalidParam(format!(
                "conv1x1 weight length {} != {c_out}x{c_in}",
                weight.len()
            )));
        }
        if bias.len() != c_out {
            return Err(Error::InvalidParam(format!(
                "conv1x1 bias length {} != {c_out}",
                bias.len()
            )));
        }
        Ok(Conv1x1Params {
            c_in,
            c_out,
            weight,
            bias,
        })
    }

    pub fn identity(c: usize) -> Self {
        let mut weight = vec![S::zero(); c * c];
        for k in 0..c {
            weight[k * c + k] = S::one();
        }
        Conv1x1Params {
            c_in: c,
            c_out: c,
            weight,
            bias: vec![S::zero(); c],
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Conv1x1Params {
            c_in,
            c_out,
            weight: vec![S::zero(); c_out * c_in],
            bias: vec![S::zero(); c_out],
        }
    }

    #[inline]
    pub fn w(&self, o: usize, k: usize) -> S {
        self.weight[o * self.c_in + k]
    }

    pub fn cast<T: Scalar>(&self) -> Conv1x1Params<T> {
        Conv1x1Params {
            c_in: self.c_in,
            c_out: self.c_out,
            weight: self.weight.iter().map(|v| T::from_f64(Scalar::to_f64(*v))).collect(),
            bias: self.bias.iter().map(|v| T::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }
}

/// Small dense matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S: Scalar = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(side: usize) -> Self {
        let mut m = Matrix::zeros(side, side);
        for i in 0..side {
            m.data[i * side + i] = S::one();
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }
}

pub fn conv1x1<S: Scalar>(x: &Tensor<S>, p: &Conv1x1Params<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.c != p.c_in {
        return Err(Error::ChannelMismatch {
            expected: p.c_in,
            got: s.c,
        });
    }
    let out_shape = Shape::new(s.n, p.c_out, s.h, s.w);
    let mut data = vec![S::zero(); out_shape.len()];
    let plane = s.h * s.w;
    for n in 0..s.n {
        for o in 0..p.c_out {
            let base = (n * p.c_out + o) * plane;
            for px in 0..plane {
                data[base + px] = p.bias[o];
            }
            for k in 0..p.c_in {
                let wk = p.w(o, k);
                let xin = (n * s.c + k) * plane;
                for px in 0..plane {
                    data[base + px] = data[base + px] + wk * x.data()[xin + px];
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn tanh_map<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.tanh())
}

/// phi(x) = max(0, min(1, (x + 1) / 2))
pub fn hard_sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let half = S::from_f64(0.5);
    x.map(|v| {
        let y = (v + S::one()) * half;
        y.max(S::zero()).min(S::one())
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(m: &Matrix<S>) -> Matrix<S> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = &m.data[r * m.cols..(r + 1) * m.cols];
        let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for c in 0..m.cols {
            let e = (row[c] - mx).exp();
            out.data[r * m.cols + c] = e;
            sum = sum + e;
        }
        for c in 0..m.cols {
            out.data[r * m.cols + c] = out.data[r * m.cols + c] / sum;
        }
    }
    out
}

pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::ShapeMismatch(format!(
            "concat spatial/batch mismatch: {sa} vs {sb}"
        )));
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let out = Tensor::from_fn(out_shape, |n, c, i, j| {
        if c < sa.c {
            a.get(n, c, i, j)
        } else {
            b.get(n, c - sa.c, i, j)
        }
    });
    Ok(out)
}

pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    let inv = S::from_f64(1.0 / (s.h * s.w) as f64);
    let out_shape = Shape::new(s.n, s.c, 1, 1);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let mut sum = S::zero();
            for i in 0..s.h {
                for j in 0..s.w {
                    sum = sum + x.get(n, c, i, j);
                }
            }
            data.push(sum * inv);
        }
    }
    Tensor::from_parts(out_shape, data)
}

/// Tensor rearranged into non-overlapping m x m windows.
///
/// Window order is batch, then window-row, then window-col; within a window
/// tokens are the m*m pixels in row-major order, each carrying its channel
/// vector. Layout: [window][token][channel].
#[derive(Debug, Clone, PartialEq)]
pub struct Windows<S: Scalar = f32> {
    pub m: usize,
    pub channels: usize,
    pub batch: usize,
    /// Windows per column (h / m).
    pub grid_h: usize,
    /// Windows per row (w / m).
    pub grid_w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Windows<S> {
    pub fn num_windows(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    pub fn tokens(&self) -> usize {
        self.m * self.m
    }

    #[inline]
    pub fn idx(&self, win: usize, token: usize, ch: usize) -> usize {
        (win * self.tokens() + token) * self.channels + ch
    }

    /// One window as a tokens x channels matrix.
    pub fn window_matrix(&self, win: usize) -> Matrix<S> {
        let t = self.tokens();
        let start = win * t * self.channels;
        Matrix {
            rows: t,
            cols: self.channels,
            data: self.data[start..start + t * self.channels].to_vec(),
        }
    }
}

pub fn window_partition<S: Scalar>(x: &Tensor<S>, m: usize) -> Result<Windows<S>> {
    let s = x.shape();
    if m == 0 {
        return Err(Error::InvalidParam("window size must be >= 1".into()));
    }
    if s.h % m != 0 || s.w % m != 0 {
        return Err(Error::WindowNotDivisible { h: s.h, w: s.w, m });
    }
    let grid_h = s.h / m;
    let grid_w = s.w / m;
    let mut data = vec![S::zero(); s.len()];
    let tokens = m * m;
    for n in 0..s.n {
        for wi in 0..grid_h {
            for wj in 0..grid_w {
                let win = (n * grid_h + wi) * grid_w + wj;
                for ti in 0..m {
                    for tj in 0..m {
                        let token = ti * m + tj;
                        for c in 0..s.c {
                            data[(win * tokens + token) * s.c + c] =
                                x.get(n, c, wi * m + ti, wj * m + tj);
                        }
                    }
                }
            }
        }
    }
    Ok(Windows {
        m,
        channels: s.c,
        batch: s.n,
        grid_h,
        grid_w,
        data,
    })
}

pub fn window_merge<S: Scalar>(wins: &Windows<S>) -> Result<Tensor<S>> {
    let m = wins.m;
    let shape = Shape::new(
        wins.batch,
        wins.channels,
        wins.grid_h * m,
        wins.grid_w * m,
    );
    if wins.data.len() != shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "window data length {} inconsistent with {shape}",
            wins.data.len()
        )));
    }
    let tokens = m * m;
    let mut data = vec![S::zero(); shape.len()];
    for n in 0..shape.n {
        for wi in 0..wins.grid_h {
            for wj in 0..wins.grid_w {
                let win = (n * wins.grid_h + wi) * wins.grid_w + wj;
                for ti in 0..m {
                    for tj in 0..m {
                        let token = ti * m + tj;
                        for c in 0..shape.c {
                            let dst = ((n * shape.c + c) * shape.h + wi * m + ti) * shape.w
                                + wj * m
                                + tj;
                            data[dst] = wins.data[(win * tokens + token) * shape.c + c];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Partition with bottom/right zero padding for non-divisible dims. The
/// original spatial dims are returned so `window_merge_cropped` can undo it.
pub fn window_partition_padded<S: Scalar>(
    x: &Tensor<S>,
    m: usize,
) -> Result<(Windows<S>, usize, usize)> {
    let s = x.shape();
    if s.h % m == 0 && s.w % m == 0 {
        return Ok((window_partition(x, m)?, s.h, s.w));
    }
    let ph = s.h.div_ceil(m) * m;
    let pw = s.w.div_ceil(m) * m;
    let padded = Tensor::from_fn(Shape::new(s.n, s.c, ph, pw), |n, c, i, j| {
        if i < s.h && j < s.w {
            x.get(n, c, i, j)
        } else {
            S::zero()
        }
    });
    Ok((window_partition(&padded, m)?, s.h, s.w))
}

pub fn window_merge_cropped<S: Scalar>(wins: &Windows<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let full = window_merge(wins)?;
    let s = full.shape();
    if h > s.h || w > s.w {
        return Err(Error::ShapeMismatch(format!(
            "crop {h}x{w} exceeds merged {0}x{1}",
            s.h, s.w
        )));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, i, j| {
        full.get(n, c, i, j)
    }))
}
