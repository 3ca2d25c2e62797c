//! Dense row-major tensors and the small set of kernels the rest of the crate
//! is built on: direct convolution (with its backward pass), elementwise
//! activations, Sobel magnitude, windowed max, Gaussian blur and flips.
//!
//! Storage is generic over [`Real`] so the same code runs in `f32` for
//! production paths and in `f64` for finite-difference checks. Reductions and
//! convolutions always accumulate in `f64`.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(
            "tensor",
            format!("expected 1-4 dims, got {}", shape.len()),
        ));
    }
    if shape.contains(&0) {
        return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {n} elements but data has {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds an `h`×`w` map from a function of `(row, col)`.
    pub fn from_fn2(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self::new(vec![h, w], data).expect("invalid map size")
    }

    pub fn scalar_map(h: usize, w: usize, value: f64) -> Self {
        Self::full(&[h, w], T::of(value))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(H, W)` of a 2-D map.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(
                "dims2",
                format!("expected H×W map, got {:?}", self.shape),
            )),
        }
    }

    /// `(C, H, W)`; a 2-D map is viewed as a single channel.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((1, h, w)),
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "dims3",
                format!("expected C×H×W tensor, got {:?}", self.shape),
            )),
        }
    }

    /// Spatial extent of the last two dimensions.
    pub fn spatial(&self) -> (usize, usize) {
        let n = self.shape.len();
        if n >= 2 {
            (self.shape[n - 2], self.shape[n - 1])
        } else {
            (1, self.shape[0])
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    #[inline]
    pub fn at2(&self, y: usize, x: usize) -> T {
        let w = self.shape[self.shape.len() - 1];
        self.data[y * w + x]
    }

    #[inline]
    pub fn set2(&mut self, y: usize, x: usize, v: T) {
        let w = self.shape[self.shape.len() - 1];
        self.data[y * w + x] = v;
    }

    /// Channel `c` of a C×H×W tensor as an H×W map.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (ch, h, w) = self.dims3()?;
        if c >= ch {
            return Err(Error::shape(
                "channel",
                format!("channel {c} out of range for {ch} channels"),
            ));
        }
        Ok(Self {
            shape: vec![h, w],
            data: self.data[c * h * w..(c + 1) * h * w].to_vec(),
        })
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of an H×W or C×H×W tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if self.shape.len() < 2 {
            return Err(Error::shape(
                "crop",
                format!("needs a spatial tensor, got {:?}", self.shape),
            ));
        }
        let (ih, iw) = self.spatial();
        if y0 + h > ih || x0 + w > iw {
            return Err(Error::shape(
                "crop",
                format!("window {h}×{w} at ({y0}, {x0}) outside {:?}", self.shape),
            ));
        }
        let planes = self.data.len() / (ih * iw).max(1);
        let mut data = Vec::with_capacity(planes * h * w);
        for c in 0..planes {
            for y in y0..y0 + h {
                let row = c * ih * iw + y * iw;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape[n - 2] = h;
        shape[n - 1] = w;
        Ok(Self { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for (i, p) in parts.iter().enumerate() {
            if p.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!(
                        "part {i} has shape {:?}, expected {:?}",
                        p.shape, first.shape
                    ),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    /// Concatenates C×H×W tensors (or H×W maps) along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
            .dims3()?;
        let mut data = Vec::new();
        let mut c_total = 0;
        for (i, p) in parts.iter().enumerate() {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("part {i} is {ph}×{pw}, expected {h}×{w}"),
                ));
            }
            c_total += c;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![c_total, h, w], data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::of(sigmoid_scalar(v.as_f64())))
}

pub fn softplus<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::of(softplus_scalar(v.as_f64())))
}

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding, output keeps the input's spatial size.
    Same,
    Valid,
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    padding: Padding,
) -> Result<ConvGeometry> {
    let (c_in, h, w) = input.dims3()?;
    let [c_out, wc_in, kh, kw] = weights.shape()[..] else {
        return Err(Error::shape(
            "conv2d",
            format!("weights must be C_out×C_in×k×k, got {:?}", weights.shape()),
        ));
    };
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels but weights expect C_in={wc_in}"),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square with odd k, got {kh}×{kw}"),
        ));
    }
    let k = kh;
    let pad = match padding {
        Padding::Same => k / 2,
        Padding::Valid => 0,
    };
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(
            "conv2d",
            format!("input {h}×{w} smaller than kernel {k}×{k}"),
        ));
    }
    Ok(ConvGeometry {
        c_in,
        c_out,
        k,
        h,
        w,
        pad,
        ho: h + 2 * pad - k + 1,
        wo: w + 2 * pad - k + 1,
    })
}

impl ConvGeometry {
    /// Range of output columns whose tap `kx` lands inside the input.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = self.wo.min((self.w + self.pad).saturating_sub(kx));
        (lo, hi.max(lo))
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Output row ranges sized so one im2col block stays small.
    fn row_blocks(&self) -> Vec<(usize, usize)> {
        let rows = (4096 / self.wo.max(1)).max(1);
        (0..self.ho)
            .step_by(rows)
            .map(|r| (r, (r + rows).min(self.ho)))
            .collect()
    }

    /// Patch matrix for output rows `r0..r1`: row `j = (c·k + ky)·k + kx`
    /// holds that tap for every output pixel, zero where it falls in padding.
    /// A 1×1 kernel borrows the input directly.
    fn im2col<'a>(&self, x: &'a [f64], r0: usize, r1: usize, col: &'a mut Vec<f64>) -> &'a [f64] {
        let (k, h, w, wo) = (self.k, self.h, self.w, self.wo);
        let np = (r1 - r0) * wo;
        if k == 1 && self.pad == 0 && np == h * w {
            return x;
        }
        col.clear();
        col.resize(self.c_in * k * k * np, 0f64);
        for c in 0..self.c_in {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let j = (c * k + ky) * k + kx;
                    let (lo, hi) = self.col_range(kx);
                    for oy in r0..r1 {
                        let Some(iy) = self.input_row(oy, ky) else {
                            continue;
                        };
                        let base = iy * w + lo + kx - self.pad;
                        let dst = j * np + (oy - r0) * wo;
                        col[dst + lo..dst + hi].copy_from_slice(&plane[base..base + (hi - lo)]);
                    }
                }
            }
        }
        col
    }

    /// Scatter-adds a patch-matrix gradient back onto the input planes.
    fn col2im(&self, gcol: &[f64], r0: usize, r1: usize, g_in: &mut [f64]) {
        let (k, h, w, wo) = (self.k, self.h, self.w, self.wo);
        let np = (r1 - r0) * wo;
        for c in 0..self.c_in {
            let plane = &mut g_in[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let j = (c * k + ky) * k + kx;
                    let (lo, hi) = self.col_range(kx);
                    for oy in r0..r1 {
                        let Some(iy) = self.input_row(oy, ky) else {
                            continue;
                        };
                        let base = iy * w + lo + kx - self.pad;
                        let src = &gcol[j * np + (oy - r0) * wo + lo..j * np + (oy - r0) * wo + hi];
                        for (g, &v) in plane[base..base + (hi - lo)].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Direct 2-D convolution (cross-correlation, as in every conv layer).
///
/// `input` is C_in×H×W (an H×W map counts as one channel), `weights` is
/// C_out×C_in×k×k with odd `k`, `bias` has C_out entries.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weights, padding)?;
    if bias.len() != g.c_out {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias has {} entries, expected C_out={}",
                bias.len(),
                g.c_out
            ),
        ));
    }
    let (ho, wo) = (g.ho, g.wo);
    let x: Vec<f64> = input.data().iter().map(|v| v.as_f64()).collect();
    let wts: Vec<f64> = weights.data().iter().map(|v| v.as_f64()).collect();
    let taps = g.c_in * g.k * g.k;
    let mut out = vec![0f64; g.c_out * ho * wo];
    let mut col = Vec::new();
    for (r0, r1) in g.row_blocks() {
        let np = (r1 - r0) * wo;
        let cols = g.im2col(&x, r0, r1, &mut col);
        for o in 0..g.c_out {
            let acc = &mut out[o * ho * wo + r0 * wo..o * ho * wo + r1 * wo];
            acc.fill(bias[o].as_f64());
            let wrow = &wts[o * taps..(o + 1) * taps];
            for (j, &wv) in wrow.iter().enumerate() {
                for (a, &v) in acc.iter_mut().zip(&cols[j * np..(j + 1) * np]) {
                    *a += wv * v;
                }
            }
        }
    }
    let out = out.into_iter().map(T::of).collect();
    Tensor::new(vec![g.c_out, ho, wo], out)
}

/// Gradients of a [`conv2d`] call with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Backward pass of [`conv2d`] given the upstream gradient `grad_out`
/// (C_out×H'×W').
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, weights, padding)?;
    let (k, h, w, ho, wo) = (g.k, g.h, g.w, g.ho, g.wo);
    if grad_out.dims3()? != (g.c_out, ho, wo) {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out is {:?}, expected [{}, {ho}, {wo}]",
                grad_out.shape(),
                g.c_out
            ),
        ));
    }
    let x: Vec<f64> = input.data().iter().map(|v| v.as_f64()).collect();
    let wts: Vec<f64> = weights.data().iter().map(|v| v.as_f64()).collect();
    let gout: Vec<f64> = grad_out.data().iter().map(|v| v.as_f64()).collect();
    let taps = g.c_in * k * k;
    let mut g_in = vec![0f64; g.c_in * h * w];
    let mut g_w = vec![0f64; wts.len()];
    let g_b: Vec<f64> = gout.chunks(ho * wo).map(|go| go.iter().sum()).collect();
    let mut col = Vec::new();
    let mut gcol = Vec::new();
    for (r0, r1) in g.row_blocks() {
        let np = (r1 - r0) * wo;
        let cols = g.im2col(&x, r0, r1, &mut col);
        gcol.clear();
        gcol.resize(taps * np, 0f64);
        for o in 0..g.c_out {
            let go = &gout[o * ho * wo + r0 * wo..o * ho * wo + r1 * wo];
            for j in 0..taps {
                let cj = &cols[j * np..(j + 1) * np];
                g_w[o * taps + j] += dot(go, cj);
                let wv = wts[o * taps + j];
                for (gc, &d) in gcol[j * np..(j + 1) * np].iter_mut().zip(go) {
                    *gc += wv * d;
                }
            }
        }
        g.col2im(&gcol, r0, r1, &mut g_in);
    }
    let to_t = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), to_t(g_in))?,
        weights: Tensor::new(weights.shape().to_vec(), to_t(g_w))?,
        bias: to_t(g_b),
    })
}

/// A convolution layer: weights, bias and padding mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub padding: Padding,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize, padding: Padding) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: vec![T::zero(); c_out],
            padding,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(input, &self.weight, &self.bias, self.padding)
    }

    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        conv2d_backward(input, &self.weight, grad_out, self.padding)
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&b| U::of(b.as_f64())).collect(),
            padding: self.padding,
        }
    }
}

// ---------------------------------------------------------------------------
// Image-space filters (replicate padding)

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Sobel gradient magnitude of an H×W map, clamped to `[0, 1]`.
pub fn sobel_mag<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = m.dims2()?;
    let px = |y: isize, x: isize| m.at2(clamp_idx(y, h), clamp_idx(x, w)).as_f64();
    let out = Tensor::from_fn2(h, w, |y, x| {
        let (y, x) = (y as isize, x as isize);
        let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
            - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
        let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
            - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
        T::of((gx * gx + gy * gy).sqrt().clamp(0.0, 1.0))
    });
    Ok(out)
}

/// k×k sliding maximum with output size equal to input size.
pub fn maxpool_same<T: Real>(m: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (h, w) = m.dims2()?;
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "maxpool window must be odd, got {k}"
        )));
    }
    let r = (k / 2) as isize;
    // Separable: rows then columns.
    let mut rows = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut best = T::neg_infinity();
            for dx in -r..=r {
                best = best.max(m.at2(y, clamp_idx(x as isize + dx, w)));
            }
            rows.set2(y, x, best);
        }
    }
    Ok(Tensor::from_fn2(h, w, |y, x| {
        let mut best = T::neg_infinity();
        for dy in -r..=r {
            best = best.max(rows.at2(clamp_idx(y as isize + dy, h), x));
        }
        best
    }))
}

/// Normalized 1-D Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn separable_replicate<T: Real>(m: &Tensor<T>, taps: &[f64]) -> Result<Tensor<T>> {
    let (h, w) = m.dims2()?;
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * m.at2(y, clamp_idx(x as isize + i as isize - r, w)).as_f64())
                .sum();
        }
    }
    Ok(Tensor::from_fn2(h, w, |y, x| {
        T::of(
            taps.iter()
                .enumerate()
                .map(|(i, t)| t * tmp[clamp_idx(y as isize + i as isize - r, h) * w + x])
                .sum(),
        )
    }))
}

/// Gaussian smoothing; `sigma == 0` returns the input unchanged.
pub fn gaussian_blur<T: Real>(p: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    p.dims2()?;
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    separable_replicate(p, &gaussian_kernel(sigma))
}

/// 3×3 mean filter with replicate padding (the logit mixer).
pub fn box_mean3<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    separable_replicate(m, &[1.0 / 3.0; 3])
}

/// Non-overlapping `factor`×`factor` average pooling of an H×W map.
pub fn avg_pool<T: Real>(m: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (h, w) = m.dims2()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("{h}×{w} is not divisible by factor {factor}"),
        ));
    }
    let norm = 1.0 / (factor * factor) as f64;
    Ok(Tensor::from_fn2(h / factor, w / factor, |y, x| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += m.at2(y * factor + dy, x * factor + dx).as_f64();
            }
        }
        T::of(s * norm)
    }))
}

// ---------------------------------------------------------------------------
// Flips

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    /// Mirror columns.
    H,
    /// Mirror rows.
    V,
    HV,
}

/// Flips the last two axes; works on H×W maps and stacked C×H×W tensors.
pub fn flip<T: Real>(t: &Tensor<T>, mode: FlipMode) -> Tensor<T> {
    let (h, w) = t.spatial();
    let plane = h * w;
    let (fh, fv) = match mode {
        FlipMode::H => (true, false),
        FlipMode::V => (false, true),
        FlipMode::HV => (true, true),
    };
    let mut data = Vec::with_capacity(t.len());
    for chunk in t.data().chunks(plane) {
        for y in 0..h {
            let sy = if fv { h - 1 - y } else { y };
            let row = &chunk[sy * w..(sy + 1) * w];
            if fh {
                data.extend(row.iter().rev());
            } else {
                data.extend_from_slice(row);
            }
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Quadruple-loop reference convolution with explicit zero padding.
    fn naive_conv(
        input: &Tensor<f32>,
        weights: &Tensor<f32>,
        bias: &[f32],
        pad: usize,
    ) -> Tensor<f32> {
        let (ci, h, w) = input.dims3().unwrap();
        let (co, k) = (weights.shape()[0], weights.shape()[2]);
        let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let mut out = vec![0f32; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias[o] as f64;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += weights.data()[((o * ci + c) * k + ky) * k + kx] as f64
                                    * input.data()[(c * h + iy as usize) * w + ix as usize] as f64;
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = s as f32;
                }
            }
        }
        Tensor::new(vec![co, ho, wo], out).unwrap()
    }

    #[test]
    fn crop_windows() {
        let t = Tensor::<f32>::new(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0, 18.0, 19.0, 22.0, 23.0]);
        assert!(t.crop(2, 0, 2, 2).is_err());
        assert!(Tensor::<f32>::zeros(&[5]).crop(0, 0, 1, 1).is_err());
    }

    #[test]
    fn identity_kernel_leaves_input_unchanged() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, &[0.0], Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn box_kernel_on_constant_input() {
        let x = Tensor::full(&[1, 5, 5], 5.0f32);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0f32 / 9.0);
        let y = conv2d(&x, &k, &[0.0], Padding::Same).unwrap();
        assert!((y.data()[2 * 5 + 2] - 5.0).abs() < 1e-5);
        // Corner window sees 4 of 9 taps.
        assert!((y.data()[0] - 5.0 * 4.0 / 9.0).abs() < 1e-5);
        assert!((y.data()[4] - 5.0 * 4.0 / 9.0).abs() < 1e-5);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[2, 8, 8]);
        let wt = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = [0.1, -0.2, 0.3];
        let same = conv2d(&x, &wt, &b, Padding::Same).unwrap();
        assert!(same.max_abs_diff(&naive_conv(&x, &wt, &b, 1)) < 1e-5);
        let valid = conv2d(&x, &wt, &b, Padding::Valid).unwrap();
        assert_eq!(valid.shape(), &[3, 6, 6]);
        assert!(valid.max_abs_diff(&naive_conv(&x, &wt, &b, 0)) < 1e-5);
    }

    #[test]
    fn conv_shape_errors_name_dims() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let wt = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &wt, &[0.0], Padding::Same)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("2 channels") && err.contains("C_in=3"),
            "{err}"
        );
        let even = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &even, &[0.0], Padding::Same).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = random_tensor(&mut rng, &[2, 5, 4]).cast();
        let wt: Tensor<f64> = random_tensor(&mut rng, &[2, 2, 3, 3]).cast();
        let b = vec![0.05, -0.1];
        let up: Tensor<f64> = random_tensor(&mut rng, &[2, 5, 4]).cast();
        let f = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &[f64]| {
            let y = conv2d(x, wt, b, Padding::Same).unwrap();
            y.data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let g = conv2d_backward(&x, &wt, &up, Padding::Same).unwrap();
        let h = 1e-4;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (f(&xp, &wt, &b) - f(&xm, &wt, &b)) / (2.0 * h);
            assert!((fd - g.input.data()[i]).abs() < 1e-8);
        }
        for i in 0..wt.len() {
            let (mut wp, mut wm) = (wt.clone(), wt.clone());
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            let fd = (f(&x, &wp, &b) - f(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - g.weights.data()[i]).abs() < 1e-8);
        }
        let fd = (f(&x, &wt, &[b[0] + h, b[1]]) - f(&x, &wt, &[b[0] - h, b[1]])) / (2.0 * h);
        assert!((fd - g.bias[0]).abs() < 1e-8);
    }

    #[test]
    fn activations_at_reference_points() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        let r = relu(&Tensor::new(vec![1], vec![-0.02f32]).unwrap());
        assert_eq!(r.data()[0], 0.0);
        assert!(sigmoid_scalar(-88.0) > 0.0 && sigmoid_scalar(88.0) <= 1.0);
        assert!(softplus_scalar(-800.0) >= 0.0 && softplus_scalar(800.0) == 800.0);
    }

    #[test]
    fn sobel_on_constant_and_step() {
        let c = Tensor::scalar_map(6, 6, 0.3);
        assert!(sobel_mag::<f32>(&c)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let step = Tensor::<f32>::from_fn2(6, 8, |_, x| if x >= 4 { 1.0 } else { 0.0 });
        let s = sobel_mag(&step).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let nz = s.at2(y, x) != 0.0;
                assert_eq!(nz, x == 3 || x == 4, "({y},{x})");
            }
        }
        // Interior response at x=3: gx = (1 + 2 + 1) - 0 = 4, clamped to 1.
        assert_eq!(s.at2(2, 3), 1.0);

        // A low-contrast step stays below the clamp: gx = 4·0.1.
        let soft = Tensor::<f64>::from_fn2(5, 5, |_, x| if x >= 3 { 0.1 } else { 0.0 });
        let s = sobel_mag(&soft).unwrap();
        assert!((s.at2(2, 2) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn maxpool_identity_and_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_tensor(&mut rng, &[7, 9]);
        assert_eq!(maxpool_same(&m, 1).unwrap(), m);

        let mut d = Tensor::<f32>::zeros(&[9, 9]);
        d.set2(4, 4, 1.0);
        let p = maxpool_same(&d, 5).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let inside = (2..=6).contains(&y) && (2..=6).contains(&x);
                assert_eq!(p.at2(y, x), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn maxpool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_tensor(&mut rng, &[10, 7]);
        let p = maxpool_same(&m, 5).unwrap();
        for y in 0..10isize {
            for x in 0..7isize {
                let mut best = f32::NEG_INFINITY;
                for yy in (y - 2).max(0)..=(y + 2).min(9) {
                    for xx in (x - 2).max(0)..=(x + 2).min(6) {
                        best = best.max(m.at2(yy as usize, xx as usize));
                    }
                }
                assert_eq!(p.at2(y as usize, x as usize), best);
            }
        }
    }

    #[test]
    fn gaussian_blur_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_tensor(&mut rng, &[6, 6]);
        let same = gaussian_blur(&m, 0.0).unwrap();
        assert!(same
            .data()
            .iter()
            .zip(m.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let c = Tensor::<f32>::scalar_map(8, 8, 0.37);
        for s in [0.5, 1.0, 1.5, 3.0] {
            let b = gaussian_blur(&c, s).unwrap();
            assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
        }

        // Delta in the middle of a 15×15 map: value = (normalized center tap)².
        let mut d = Tensor::<f64>::zeros(&[15, 15]);
        d.set2(7, 7, 1.0);
        let b = gaussian_blur(&d, 1.0).unwrap();
        let raw: Vec<f64> = (-3..=3)
            .map(|i: i32| (-(i * i) as f64 / 2.0).exp())
            .collect();
        let center = 1.0 / raw.iter().sum::<f64>();
        assert!((b.at2(7, 7) - center * center).abs() < 1e-12);
        assert!(gaussian_blur(&d, -1.0).is_err());
    }

    #[test]
    fn flip_examples() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flip(&t, FlipMode::H).data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(flip(&t, FlipMode::V).data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(flip(&t, FlipMode::HV).data(), &[4.0, 3.0, 2.0, 1.0]);
        let sym = Tensor::new(vec![2, 2], vec![1.0f32, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(flip(&sym, FlipMode::HV), sym);
    }

    #[test]
    fn box_mean_preserves_constant() {
        let c = Tensor::<f32>::scalar_map(5, 4, -1.25);
        assert_eq!(box_mean3(&c).unwrap(), c);
    }

    proptest! {
        #[test]
        fn conv_matches_oracle_on_small_shapes(
            ci in 1usize..4, co in 1usize..4, h in 3usize..16, w in 3usize..16,
            k in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[ci, h, w]);
            let wt = random_tensor(&mut rng, &[co, ci, k, k]);
            let b: Vec<f32> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv2d(&x, &wt, &b, Padding::Same).unwrap();
            prop_assert!(y.max_abs_diff(&naive_conv(&x, &wt, &b, k / 2)) < 1e-5);
        }

        #[test]
        fn flip_is_an_involution(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(&mut rng, &[2, h, w]);
            for mode in [FlipMode::H, FlipMode::V, FlipMode::HV] {
                prop_assert_eq!(flip(&flip(&t, mode), mode), t.clone());
            }
        }

        #[test]
        fn activations_are_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(sigmoid_scalar(lo) <= sigmoid_scalar(hi));
            prop_assert!(softplus_scalar(lo) <= softplus_scalar(hi));
            prop_assert!(lo.max(0.0) <= hi.max(0.0));
        }
    }
}
