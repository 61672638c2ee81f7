//! ACmix hybrid operator: shared 1x1 projections feed both a shift-sum
//! convolution path and a windowed multi-head self-attention path, fused
//! by two learnable scalars as `alpha * F_att + beta * F_conv`.

use crate::tensor::{
    concat_channels, for_each_plane, linear_pointwise, shift, ConvKernel, KernelOffset, Shape,
    Tensor,
};
use crate::{Error, Result};

use rand::Rng;

/// Windowed multi-head self-attention parameters. The q/k/v matrices are
/// C x C with the per-head blocks stacked along the output rows; the
/// split into heads happens at aggregation time.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub w_v: Vec<f32>,
    pub window: usize,
    pub head_dim: usize,
    pub channels: usize,
}

impl AttentionParams {
    pub fn new(channels: usize, heads: usize, window: usize, w_q: Vec<f32>, w_k: Vec<f32>, w_v: Vec<f32>) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {channels} must be divisible by heads {heads}"
            )));
        }
        if window % 2 == 0 {
            return Err(Error::InvalidArgument(format!("attention window must be odd, got {window}")));
        }
        for m in [&w_q, &w_k, &w_v] {
            if m.len() != channels * channels {
                return Err(Error::ShapeMismatch(format!(
                    "projection matrix length {} != {channels}x{channels}",
                    m.len()
                )));
            }
        }
        Ok(AttentionParams {
            heads,
            w_q,
            w_k,
            w_v,
            window,
            head_dim: channels / heads,
            channels,
        })
    }
}

/// Full ACmix parameter set. The attention projections double as the
/// shared 1x1 projections feeding the convolution path.
#[derive(Debug, Clone)]
pub struct AcmixParams {
    pub attn: AttentionParams,
    /// Per-pixel FC of the conv path: rows k*k*C, columns 3C.
    pub conv_fc: Vec<f32>,
    pub alpha: f32,
    pub beta: f32,
    pub kernel_k: usize,
}

impl AcmixParams {
    pub fn new(attn: AttentionParams, conv_fc: Vec<f32>, alpha: f32, beta: f32, kernel_k: usize) -> Result<Self> {
        if kernel_k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel_k must be odd, got {kernel_k}")));
        }
        let c = attn.channels;
        if conv_fc.len() != kernel_k * kernel_k * c * 3 * c {
            return Err(Error::ShapeMismatch(format!(
                "conv_fc length {} != (k^2 C) x 3C = {}",
                conv_fc.len(),
                kernel_k * kernel_k * c * 3 * c
            )));
        }
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidArgument("alpha/beta must be finite".into()));
        }
        Ok(AcmixParams {
            attn,
            conv_fc,
            alpha,
            beta,
            kernel_k,
        })
    }

    pub fn channels(&self) -> usize {
        self.attn.channels
    }

    /// Seeded random initialization with alpha = beta = 1.
    pub fn init(channels: usize, heads: usize, kernel_k: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (channels as f32).sqrt();
        let mat = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let attn = AttentionParams::new(
            channels,
            heads,
            kernel_k,
            mat(rng, channels * channels),
            mat(rng, channels * channels),
            mat(rng, channels * channels),
        )?;
        let fc_bound = 1.0 / (3.0 * channels as f32).sqrt();
        let conv_fc = (0..kernel_k * kernel_k * channels * 3 * channels)
            .map(|_| rng.gen_range(-fc_bound..fc_bound))
            .collect();
        AcmixParams::new(attn, conv_fc, 1.0, 1.0, kernel_k)
    }
}

/// Expresses a same-padded stride-1 convolution as k^2 pointwise maps
/// followed by per-offset shifts and a sum. Agrees with `conv2d_direct`
/// to composite tolerance.
pub fn conv_as_shift_sum(x: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    if x.shape.channels != kernel.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input channels {} != kernel in_channels {}",
            x.shape.channels, kernel.in_channels
        )));
    }
    let k = kernel.k;
    let c_half = (k / 2) as isize;
    let out_shape = Shape::new(x.shape.batch, kernel.out_channels, x.shape.height, x.shape.width)?;
    let mut acc = Tensor::zeros(out_shape);
    for p in 0..k {
        for q in 0..k {
            // Stage I: per-pixel map by the (p,q) kernel slice
            let mut w = vec![0.0f32; kernel.out_channels * kernel.in_channels];
            for oc in 0..kernel.out_channels {
                for ic in 0..kernel.in_channels {
                    w[oc * kernel.in_channels + ic] = kernel.w(oc, ic, p, q);
                }
            }
            let mapped = linear_pointwise(x, &w, kernel.out_channels, None)?;
            // Stage II: shift by the offset of this kernel position
            let shifted = shift(
                &mapped,
                KernelOffset {
                    dx: p as isize - c_half,
                    dy: q as isize - c_half,
                },
            );
            for (a, s) in acc.data.iter_mut().zip(&shifted.data) {
                *a += s;
            }
        }
    }
    if let Some(bias) = &kernel.bias {
        let hw = x.shape.height * x.shape.width;
        for (plane_idx, chunk) in acc.data.chunks_mut(hw).enumerate() {
            let oc = plane_idx % kernel.out_channels;
            for v in chunk {
                *v += bias[oc];
            }
        }
    }
    Ok(acc)
}

/// Windowed multi-head attention aggregation over pre-projected q/k/v.
/// Out-of-bounds window positions are excluded from the softmax support.
pub fn multihead_local_attention(q: &Tensor, k: &Tensor, v: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    if q.shape != k.shape || q.shape != v.shape {
        return Err(Error::ShapeMismatch("q/k/v must share a shape".into()));
    }
    if q.shape.channels != params.channels {
        return Err(Error::ShapeMismatch(format!(
            "q channels {} != attention channels {}",
            q.shape.channels, params.channels
        )));
    }
    if params.window % 2 == 0 {
        return Err(Error::InvalidArgument("attention window must be odd".into()));
    }
    let Shape {
        batch: _,
        channels,
        height,
        width,
    } = q.shape;
    let d = params.head_dim;
    let half = (params.window / 2) as isize;
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let hw = height * width;
    let mut out = vec![0.0f32; q.shape.elem_count()];
    // one chunk = all channels of one batch item; pixels within it are
    // processed in a fixed order
    for_each_plane(&mut out, channels * hw, |b, chunk| {
        let mut logits: Vec<f32> = Vec::with_capacity(params.window * params.window);
        let mut neigh: Vec<(usize, usize)> = Vec::with_capacity(params.window * params.window);
        for i in 0..height {
            for j in 0..width {
                neigh.clear();
                for di in -half..=half {
                    let a = i as isize + di;
                    if a < 0 || a >= height as isize {
                        continue;
                    }
                    for dj in -half..=half {
                        let bb = j as isize + dj;
                        if bb < 0 || bb >= width as isize {
                            continue;
                        }
                        neigh.push((a as usize, bb as usize));
                    }
                }
                for l in 0..params.heads {
                    let c0 = l * d;
                    logits.clear();
                    for &(a, bb) in &neigh {
                        let mut dot = 0.0f32;
                        for t in 0..d {
                            dot += q.at(b, c0 + t, i, j) * k.at(b, c0 + t, a, bb);
                        }
                        logits.push(dot * inv_sqrt_d);
                    }
                    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0f32;
                    for lv in logits.iter_mut() {
                        *lv = (*lv - max).exp();
                        sum += *lv;
                    }
                    for t in 0..d {
                        let mut acc = 0.0f32;
                        for (widx, &(a, bb)) in neigh.iter().enumerate() {
                            acc += logits[widx] / sum * v.at(b, c0 + t, a, bb);
                        }
                        chunk[(c0 + t) * hw + i * width + j] = acc;
                    }
                }
            }
        }
    });
    Ok(Tensor::from_raw(q.shape, out))
}

fn project(x: &Tensor, m: &[f32], c: usize) -> Result<Tensor> {
    linear_pointwise(x, m, c, None)
}

/// Both path outputs before fusion: (F_att, F_conv).
pub fn acmix_path_outputs(x: &Tensor, p: &AcmixParams) -> Result<(Tensor, Tensor)> {
    let c = p.channels();
    if x.shape.channels != c {
        return Err(Error::ShapeMismatch(format!(
            "input channels {} != acmix channels {c}",
            x.shape.channels
        )));
    }
    // shared 1x1 projections, computed once
    let q = project(x, &p.attn.w_q, c)?;
    let k = project(x, &p.attn.w_k, c)?;
    let v = project(x, &p.attn.w_v, c)?;

    let f_att = multihead_local_attention(&q, &k, &v, &p.attn)?;

    // conv path: concat(q,k,v) -> per-pixel FC to k^2 groups of C channels
    // -> shift each group by its kernel offset -> sum
    let qkv = concat_channels(&[&q, &k, &v])?;
    let kk = p.kernel_k;
    let mapped = linear_pointwise(&qkv, &p.conv_fc, kk * kk * c, None)?;
    let groups = crate::tensor::split_channels(&mapped, &vec![c; kk * kk])?;
    let half = (kk / 2) as isize;
    let mut f_conv = Tensor::zeros(x.shape);
    for (g, group) in groups.iter().enumerate() {
        let (pp, qq) = (g / kk, g % kk);
        let shifted = shift(
            group,
            KernelOffset {
                dx: pp as isize - half,
                dy: qq as isize - half,
            },
        );
        for (a, s) in f_conv.data.iter_mut().zip(&shifted.data) {
            *a += s;
        }
    }
    Ok((f_att, f_conv))
}

/// Fused operator output: `alpha * F_att + beta * F_conv`.
pub fn acmix_forward(x: &Tensor, p: &AcmixParams) -> Result<Tensor> {
    let (f_att, f_conv) = acmix_path_outputs(x, p)?;
    let data = f_att
        .data
        .iter()
        .zip(&f_conv.data)
        .map(|(a, cv)| p.alpha * a + p.beta * cv)
        .collect();
    Ok(Tensor::from_raw(x.shape, data))
}
