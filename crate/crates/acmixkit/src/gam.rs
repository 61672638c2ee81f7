//! Global attention: a channel gate (per-position two-layer MLP plus
//! sigmoid) followed by a spatial gate (two 7x7 convolutions plus
//! sigmoid), each multiplied elementwise onto the input.

use crate::tensor::{
    activation, batchnorm_infer, conv2d_same, for_each_plane, sigmoid, Activation, BatchNormParams,
    ConvKernel, Tensor,
};
use crate::{Error, Result};

use rand::Rng;

#[derive(Debug, Clone)]
pub struct GamParams {
    pub reduction: usize,
    /// (C/r) x C
    pub mlp_w1: Vec<f32>,
    /// C x (C/r)
    pub mlp_w2: Vec<f32>,
    pub spatial_conv1: ConvKernel,
    pub spatial_bn: BatchNormParams,
    pub spatial_conv2: ConvKernel,
    pub channels: usize,
}

impl GamParams {
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {channels} must be divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let b1 = 1.0 / (channels as f32).sqrt();
        let b2 = 1.0 / (hidden as f32).sqrt();
        let bc = 1.0 / ((channels * 49) as f32).sqrt();
        let bh = 1.0 / ((hidden * 49) as f32).sqrt();
        Ok(GamParams {
            reduction,
            mlp_w1: (0..hidden * channels).map(|_| rng.gen_range(-b1..b1)).collect(),
            mlp_w2: (0..channels * hidden).map(|_| rng.gen_range(-b2..b2)).collect(),
            spatial_conv1: ConvKernel::new(
                hidden,
                channels,
                7,
                (0..hidden * channels * 49).map(|_| rng.gen_range(-bc..bc)).collect(),
                None,
            )?,
            spatial_bn: BatchNormParams::identity(hidden),
            spatial_conv2: ConvKernel::new(
                channels,
                hidden,
                7,
                (0..channels * hidden * 49).map(|_| rng.gen_range(-bh..bh)).collect(),
                None,
            )?,
            channels,
        })
    }
}

/// Channel gate: per spatial position, MLP C -> C/r -> C with ReLU
/// between, sigmoid, multiplied onto the input.
pub fn channel_attention(x: &Tensor, p: &GamParams) -> Result<Tensor> {
    let c = x.shape.channels;
    if c != p.channels {
        return Err(Error::ShapeMismatch(format!(
            "input channels {c} != gam channels {}",
            p.channels
        )));
    }
    let hidden = c / p.reduction;
    let hw = x.shape.height * x.shape.width;
    let mut out = vec![0.0f32; x.shape.elem_count()];
    for_each_plane(&mut out, c * hw, |b, chunk| {
        let mut h = vec![0.0f32; hidden];
        for pix in 0..hw {
            for (t, hv) in h.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for ic in 0..c {
                    acc += p.mlp_w1[t * c + ic] * x.data[(b * c + ic) * hw + pix];
                }
                *hv = acc.max(0.0);
            }
            for oc in 0..c {
                let mut acc = 0.0f32;
                for (t, &hv) in h.iter().enumerate() {
                    acc += p.mlp_w2[oc * hidden + t] * hv;
                }
                chunk[oc * hw + pix] = sigmoid(acc) * x.data[(b * c + oc) * hw + pix];
            }
        }
    });
    Ok(Tensor::from_raw(x.shape, out))
}

/// Spatial gate: conv7 -> BN -> ReLU -> conv7 -> sigmoid, multiplied
/// onto the input.
pub fn spatial_attention(x: &Tensor, p: &GamParams) -> Result<Tensor> {
    if x.shape.channels != p.channels {
        return Err(Error::ShapeMismatch(format!(
            "input channels {} != gam channels {}",
            x.shape.channels, p.channels
        )));
    }
    let h1 = conv2d_same(x, &p.spatial_conv1, 1)?;
    let h1 = batchnorm_infer(&h1, &p.spatial_bn)?;
    let h1 = activation(&h1, Activation::Relu);
    let gate = conv2d_same(&h1, &p.spatial_conv2, 1)?;
    let data = gate
        .data
        .iter()
        .zip(&x.data)
        .map(|(g, v)| sigmoid(*g) * v)
        .collect();
    Ok(Tensor::from_raw(x.shape, data))
}

/// Channel gate first, then spatial gate.
pub fn gam_forward(x: &Tensor, p: &GamParams) -> Result<Tensor> {
    spatial_attention(&channel_attention(x, p)?, p)
}
