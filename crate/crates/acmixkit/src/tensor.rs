//! Dense rank-4 NCHW tensor and the numerical primitives everything else
//! builds on. All reductions run in a fixed iteration order so a given
//! build produces bit-identical results whether or not the `parallel`
//! feature is enabled.

use crate::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// (batch, channels, height, width) extents of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "all shape dimensions must be >= 1, got {batch}x{channels}x{height}x{width}"
            )));
        }
        Ok(Shape {
            batch,
            channels,
            height,
            width,
        })
    }

    pub fn elem_count(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }
}

/// Dense f32 feature map in batch-major, then channel, row, column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting NaN/Inf values.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.elem_count() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape element count {}",
                data.len(),
                shape.elem_count()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            data: vec![0.0; shape.elem_count()],
            shape,
        }
    }

    /// Internal constructor for values produced by this crate's own ops.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.elem_count());
        Tensor { shape, data }
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + i) * self.shape.width + j
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, i: usize, j: usize) -> f32 {
        self.data[self.idx(b, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: f32) {
        let idx = self.idx(b, c, i, j);
        self.data[idx] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Learnable weights of a standard convolution, laid out
/// `[out_channels, in_channels, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub k: usize,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        k: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {k}")));
        }
        if weights.len() != out_channels * in_channels * k * k {
            return Err(Error::ShapeMismatch(format!(
                "kernel weight length {} != {}x{}x{}x{}",
                weights.len(),
                out_channels,
                in_channels,
                k,
                k
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::ShapeMismatch(format!(
                    "bias length {} != out_channels {}",
                    b.len(),
                    out_channels
                )));
            }
        }
        if weights.iter().chain(bias.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite kernel weight".into()));
        }
        Ok(ConvKernel {
            out_channels,
            in_channels,
            k,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Self {
        ConvKernel {
            out_channels,
            in_channels,
            k,
            weights: vec![0.0; out_channels * in_channels * k * k],
            bias: None,
        }
    }

    #[inline]
    pub fn w(&self, oc: usize, ic: usize, p: usize, q: usize) -> f32 {
        self.weights[((oc * self.in_channels + ic) * self.k + p) * self.k + q]
    }
}

/// Spatial displacement (dx over rows, dy over columns) for [`shift`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelOffset {
    pub dx: isize,
    pub dy: isize,
}

/// Inference-mode batch normalization parameters, one entry per channel.
#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Relu,
}

/// Runs `f` once per `plane_len`-sized chunk of `out`, fanning out over
/// rayon when the `parallel` feature is enabled. Each chunk is computed
/// independently with its own fixed-order reductions.
pub(crate) fn for_each_plane<F>(out: &mut [f32], plane_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(plane_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
}

pub(crate) fn for_each_plane_seq<F>(out: &mut [f32], plane_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]),
{
    out.chunks_mut(plane_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn conv2d_impl(x: &Tensor, kernel: &ConvKernel, stride: usize, zero_pad: usize, parallel: bool) -> Result<Tensor> {
    if x.shape.channels != kernel.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input channels {} != kernel in_channels {}",
            x.shape.channels, kernel.in_channels
        )));
    }
    if kernel.k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {}", kernel.k)));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let (h, w, k) = (x.shape.height, x.shape.width, kernel.k);
    if h + 2 * zero_pad < k || w + 2 * zero_pad < k {
        return Err(Error::InvalidArgument(format!(
            "kernel {k} larger than padded input {}x{}",
            h + 2 * zero_pad,
            w + 2 * zero_pad
        )));
    }
    let oh = conv_out_dim(h, k, stride, zero_pad);
    let ow = conv_out_dim(w, k, stride, zero_pad);
    let out_shape = Shape::new(x.shape.batch, kernel.out_channels, oh, ow)?;
    let mut out = vec![0.0f32; out_shape.elem_count()];

    // one chunk = one (batch, out_channel) plane
    let plane = oh * ow;
    let kernel_fn = |plane_idx: usize, chunk: &mut [f32]| {
        let b = plane_idx / kernel.out_channels;
        let oc = plane_idx % kernel.out_channels;
        let bias = kernel.bias.as_ref().map_or(0.0, |bv| bv[oc]);
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = bias;
                for ic in 0..kernel.in_channels {
                    for p in 0..k {
                        let ii = (oi * stride + p) as isize - zero_pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for q in 0..k {
                            let jj = (oj * stride + q) as isize - zero_pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            acc += kernel.w(oc, ic, p, q) * x.at(b, ic, ii as usize, jj as usize);
                        }
                    }
                }
                chunk[oi * ow + oj] = acc;
            }
        }
    };
    if parallel {
        for_each_plane(&mut out, plane, kernel_fn);
    } else {
        for_each_plane_seq(&mut out, plane, kernel_fn);
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Direct dense convolution with zero padding.
pub fn conv2d_direct(x: &Tensor, kernel: &ConvKernel, stride: usize, zero_pad: usize) -> Result<Tensor> {
    conv2d_impl(x, kernel, stride, zero_pad, true)
}

/// Always-sequential variant, kept public for the benchmark suite.
#[doc(hidden)]
pub fn conv2d_direct_seq(x: &Tensor, kernel: &ConvKernel, stride: usize, zero_pad: usize) -> Result<Tensor> {
    conv2d_impl(x, kernel, stride, zero_pad, false)
}

/// Same-padded stride-1 convolution (pad = k/2), the common case in blocks.
pub fn conv2d_same(x: &Tensor, kernel: &ConvKernel, stride: usize) -> Result<Tensor> {
    conv2d_direct(x, kernel, stride, kernel.k / 2)
}

/// Spatial translation with zero fill: `out[i,j] = x[i+dx, j+dy]`.
pub fn shift(x: &Tensor, off: KernelOffset) -> Tensor {
    let Shape {
        channels: c,
        height: h,
        width: w,
        ..
    } = x.shape;
    let mut out = vec![0.0f32; x.shape.elem_count()];
    for_each_plane(&mut out, h * w, |plane_idx, chunk| {
        let b = plane_idx / c;
        let ch = plane_idx % c;
        for i in 0..h {
            let si = i as isize + off.dx;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let sj = j as isize + off.dy;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                chunk[i * w + j] = x.at(b, ch, si as usize, sj as usize);
            }
        }
    });
    Tensor::from_raw(x.shape, out)
}

/// Axis identifiers for [`softmax_axis`]: 0=batch, 1=channels, 2=height, 3=width.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis > 3 {
        return Err(Error::InvalidArgument(format!("axis must be 0..=3, got {axis}")));
    }
    let dims = [x.shape.batch, x.shape.channels, x.shape.height, x.shape.width];
    let strides = [
        x.shape.channels * x.shape.height * x.shape.width,
        x.shape.height * x.shape.width,
        x.shape.width,
        1,
    ];
    let n = dims[axis];
    let stride = strides[axis];
    let mut out = vec![0.0f32; x.shape.elem_count()];
    // iterate every slice along `axis`
    let mut slice_starts = Vec::new();
    let mut outer = [0usize; 3];
    let other: Vec<usize> = (0..4).filter(|&d| d != axis).collect();
    loop {
        let mut base = 0;
        for (o, &d) in outer.iter().zip(other.iter()) {
            base += o * strides[d];
        }
        slice_starts.push(base);
        // odometer increment over the three non-axis dims
        let mut d = 2usize;
        loop {
            outer[d] += 1;
            if outer[d] < dims[other[d]] {
                break;
            }
            outer[d] = 0;
            if d == 0 {
                // full wrap: done
                let done = slice_starts.len() == x.shape.elem_count() / n;
                debug_assert!(done);
                for &start in &slice_starts {
                    softmax_slice(&x.data, &mut out, start, n, stride);
                }
                return Ok(Tensor::from_raw(x.shape, out));
            }
            d -= 1;
        }
    }
}

fn softmax_slice(input: &[f32], out: &mut [f32], start: usize, n: usize, stride: usize) {
    let mut max = f32::NEG_INFINITY;
    for t in 0..n {
        max = max.max(input[start + t * stride]);
    }
    let mut sum = 0.0f32;
    for t in 0..n {
        sum += (input[start + t * stride] - max).exp();
    }
    for t in 0..n {
        out[start + t * stride] = (input[start + t * stride] - max).exp() / sum;
    }
}

/// Max pooling with window `k` and the given stride (no padding).
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    maxpool2d_padded(x, k, stride, 0)
}

/// Max pooling with zero-size-neutral padding: padded positions are
/// ignored rather than contributing a fill value.
pub fn maxpool2d_padded(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (h, w) = (x.shape.height, x.shape.width);
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool window and stride must be >= 1".into()));
    }
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(Error::InvalidArgument(format!(
            "pool window {k} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let out_shape = Shape::new(x.shape.batch, x.shape.channels, oh, ow)?;
    let mut out = vec![0.0f32; out_shape.elem_count()];
    let c = x.shape.channels;
    for_each_plane(&mut out, oh * ow, |plane_idx, chunk| {
        let b = plane_idx / c;
        let ch = plane_idx % c;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for p in 0..k {
                    let ii = (oi * stride + p) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for q in 0..k {
                        let jj = (oj * stride + q) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        m = m.max(x.at(b, ch, ii as usize, jj as usize));
                    }
                }
                chunk[oi * ow + oj] = m;
            }
        }
    });
    Ok(Tensor::from_raw(out_shape, out))
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise activation; silu(v) = v * sigmoid(v).
pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Silu => x.map(|v| v * sigmoid(v)),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Relu => x.map(|v| v.max(0.0)),
    }
}

/// Inference-mode batch norm: `(v - mean)/sqrt(var + eps) * gamma + beta`.
pub fn batchnorm_infer(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    if p.channels() != x.shape.channels {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm channels {} != tensor channels {}",
            p.channels(),
            x.shape.channels
        )));
    }
    let (c, hw) = (x.shape.channels, x.shape.height * x.shape.width);
    let mut out = vec![0.0f32; x.shape.elem_count()];
    for_each_plane(&mut out, hw, |plane_idx, chunk| {
        let ch = plane_idx % c;
        let scale = p.gamma[ch] / (p.running_var[ch] + p.epsilon).sqrt();
        let offset = p.beta[ch] - p.running_mean[ch] * scale;
        let src = &x.data[plane_idx * hw..(plane_idx + 1) * hw];
        for (o, &v) in chunk.iter_mut().zip(src) {
            *o = v * scale + offset;
        }
    });
    Ok(Tensor::from_raw(x.shape, out))
}

/// Per-pixel fully connected map (equivalent to a 1x1 convolution).
/// `weights` is row-major `[out_channels, in_channels]`.
pub fn linear_pointwise(
    x: &Tensor,
    weights: &[f32],
    out_channels: usize,
    bias: Option<&[f32]>,
) -> Result<Tensor> {
    let cin = x.shape.channels;
    if weights.len() != out_channels * cin {
        return Err(Error::ShapeMismatch(format!(
            "pointwise weight length {} != {}x{}",
            weights.len(),
            out_channels,
            cin
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_channels {
            return Err(Error::ShapeMismatch("pointwise bias length mismatch".into()));
        }
    }
    let out_shape = Shape::new(x.shape.batch, out_channels, x.shape.height, x.shape.width)?;
    let hw = x.shape.height * x.shape.width;
    let mut out = vec![0.0f32; out_shape.elem_count()];
    for_each_plane(&mut out, hw, |plane_idx, chunk| {
        let b = plane_idx / out_channels;
        let oc = plane_idx % out_channels;
        let bias_v = bias.map_or(0.0, |bv| bv[oc]);
        let row = &weights[oc * cin..(oc + 1) * cin];
        for pix in 0..hw {
            let mut acc = bias_v;
            for (ic, &wv) in row.iter().enumerate() {
                acc += wv * x.data[(b * cin + ic) * hw + pix];
            }
            chunk[pix] = acc;
        }
    });
    Ok(Tensor::from_raw(out_shape, out))
}

/// Channel-wise concatenation; inputs must agree on batch/height/width.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (b, h, w) = (first.shape.batch, first.shape.height, first.shape.width);
    let mut total_c = 0;
    for x in xs {
        if x.shape.batch != b || x.shape.height != h || x.shape.width != w {
            return Err(Error::ShapeMismatch(
                "concat inputs disagree on batch or spatial dims".into(),
            ));
        }
        total_c += x.shape.channels;
    }
    let out_shape = Shape::new(b, total_c, h, w)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(out_shape.elem_count());
    for bi in 0..b {
        for x in xs {
            let c = x.shape.channels;
            out.extend_from_slice(&x.data[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Splits channels back out; inverse of [`concat_channels`].
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if sizes.iter().sum::<usize>() != x.shape.channels {
        return Err(Error::ShapeMismatch("split sizes do not sum to channel count".into()));
    }
    let hw = x.shape.height * x.shape.width;
    let mut parts: Vec<Tensor> = sizes
        .iter()
        .map(|&c| {
            Tensor::zeros(Shape {
                channels: c,
                ..x.shape
            })
        })
        .collect();
    for b in 0..x.shape.batch {
        let mut c0 = 0;
        for (part, &c) in parts.iter_mut().zip(sizes) {
            let src = &x.data[(b * x.shape.channels + c0) * hw..(b * x.shape.channels + c0 + c) * hw];
            part.data[b * c * hw..(b + 1) * c * hw].copy_from_slice(src);
            c0 += c;
        }
    }
    Ok(parts)
}

/// Nearest-neighbor upsampling: every pixel becomes a factor x factor block.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let (h, w, c) = (x.shape.height, x.shape.width, x.shape.channels);
    let out_shape = Shape::new(x.shape.batch, c, h * factor, w * factor)?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0f32; out_shape.elem_count()];
    for_each_plane(&mut out, oh * ow, |plane_idx, chunk| {
        let b = plane_idx / c;
        let ch = plane_idx % c;
        for oi in 0..oh {
            for oj in 0..ow {
                chunk[oi * ow + oj] = x.at(b, ch, oi / factor, oj / factor);
            }
        }
    });
    Ok(Tensor::from_raw(out_shape, out))
}

/// Elementwise sum of two same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch("add of differently shaped tensors".into()));
    }
    Ok(Tensor::from_raw(
        a.shape,
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    ))
}
