//! Composite detector building blocks: CBS, MP1/MP2, Sppcspc, the Rep
//! multi-branch block with exact fusion into one 3x3 convolution,
//! AC-E-ELAN and the ResNet-ACmix bottleneck.

use crate::acmix::{acmix_forward, AcmixParams};
use crate::tensor::{
    activation, add, batchnorm_infer, concat_channels, conv2d_same, linear_pointwise,
    maxpool2d, maxpool2d_padded, Activation, BatchNormParams, ConvKernel, Tensor,
};
use crate::{Error, Result};

use rand::Rng;

fn rand_kernel(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> ConvKernel {
    let bound = 1.0 / ((in_c * k * k) as f32).sqrt();
    ConvKernel::new(
        out_c,
        in_c,
        k,
        (0..out_c * in_c * k * k).map(|_| rng.gen_range(-bound..bound)).collect(),
        None,
    )
    .expect("odd k")
}

/// Convolution -> batch norm -> SiLU.
#[derive(Debug, Clone)]
pub struct CbsParams {
    pub kernel: ConvKernel,
    pub bn: BatchNormParams,
    pub stride: usize,
}

impl CbsParams {
    pub fn init(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        CbsParams {
            kernel: rand_kernel(out_c, in_c, k, rng),
            bn: BatchNormParams::identity(out_c),
            stride,
        }
    }
}

pub fn cbs_forward(x: &Tensor, p: &CbsParams) -> Result<Tensor> {
    let y = conv2d_same(x, &p.kernel, p.stride)?;
    let y = batchnorm_infer(&y, &p.bn)?;
    Ok(activation(&y, Activation::Silu))
}

/// Channel policy of the downsampling MP block: MP1 preserves the input
/// width, MP2 doubles it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpKind {
    Mp1,
    Mp2,
}

#[derive(Debug, Clone)]
pub struct MpParams {
    pub kind: MpKind,
    pub upper_cbs: CbsParams,
    pub lower_cbs1: CbsParams,
    pub lower_cbs2: CbsParams,
}

impl MpParams {
    pub fn init(in_c: usize, kind: MpKind, rng: &mut impl Rng) -> Self {
        let mid = match kind {
            MpKind::Mp1 => in_c / 2,
            MpKind::Mp2 => in_c,
        };
        MpParams {
            kind,
            upper_cbs: CbsParams::init(in_c, mid, 1, 1, rng),
            lower_cbs1: CbsParams::init(in_c, mid, 1, 1, rng),
            lower_cbs2: CbsParams::init(mid, mid, 3, 2, rng),
        }
    }

    pub fn out_channels(&self, in_c: usize) -> usize {
        match self.kind {
            MpKind::Mp1 => in_c,
            MpKind::Mp2 => in_c * 2,
        }
    }
}

/// Halves the spatial dims via a maxpool branch and a strided-conv
/// branch, concatenated.
pub fn mp_forward(x: &Tensor, p: &MpParams) -> Result<Tensor> {
    if x.shape.height % 2 != 0 || x.shape.width % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "MP requires even spatial dims, got {}x{}",
            x.shape.height, x.shape.width
        )));
    }
    let upper = maxpool2d(x, 2, 2)?;
    let upper = cbs_forward(&upper, &p.upper_cbs)?;
    let lower = cbs_forward(x, &p.lower_cbs1)?;
    let lower = cbs_forward(&lower, &p.lower_cbs2)?;
    concat_channels(&[&upper, &lower])
}

/// CSP-wrapped spatial pyramid pooling with pool windows {5, 9, 13}.
#[derive(Debug, Clone)]
pub struct SppcspcParams {
    pub residual_cbs: CbsParams,
    pub inner_in_cbs: CbsParams,
    pub inner_fuse_cbs: CbsParams,
    pub merge_cbs: CbsParams,
    pub pool_windows: [usize; 3],
    pub hidden: usize,
}

impl SppcspcParams {
    pub fn init(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        let hidden = (out_c / 2).max(1);
        SppcspcParams {
            residual_cbs: CbsParams::init(in_c, hidden, 1, 1, rng),
            inner_in_cbs: CbsParams::init(in_c, hidden, 1, 1, rng),
            inner_fuse_cbs: CbsParams::init(hidden * 4, hidden, 1, 1, rng),
            merge_cbs: CbsParams::init(hidden * 2, out_c, 1, 1, rng),
            pool_windows: [5, 9, 13],
            hidden,
        }
    }
}

pub fn sppcspc_forward(x: &Tensor, p: &SppcspcParams) -> Result<Tensor> {
    let residual = cbs_forward(x, &p.residual_cbs)?;
    let inner = cbs_forward(x, &p.inner_in_cbs)?;
    let mut branches = vec![inner.clone()];
    for &k in &p.pool_windows {
        branches.push(maxpool2d_padded(&inner, k, 1, k / 2)?);
    }
    let refs: Vec<&Tensor> = branches.iter().collect();
    let pooled = concat_channels(&refs)?;
    let fused = cbs_forward(&pooled, &p.inner_fuse_cbs)?;
    let merged = concat_channels(&[&fused, &residual])?;
    cbs_forward(&merged, &p.merge_cbs)
}

/// Training-shape Rep block: parallel 3x3+BN, 1x1+BN and optional
/// identity-BN branches summed. `identity_bn` exists only when the
/// channel counts match at stride 1.
#[derive(Debug, Clone)]
pub struct RepBranchParams {
    pub conv3: ConvKernel,
    pub bn3: BatchNormParams,
    pub conv1: ConvKernel,
    pub bn1: BatchNormParams,
    pub identity_bn: Option<BatchNormParams>,
}

impl RepBranchParams {
    pub fn init(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        RepBranchParams {
            conv3: rand_kernel(out_c, in_c, 3, rng),
            bn3: BatchNormParams::identity(out_c),
            conv1: rand_kernel(out_c, in_c, 1, rng),
            bn1: BatchNormParams::identity(out_c),
            identity_bn: (in_c == out_c).then(|| BatchNormParams::identity(out_c)),
        }
    }
}

pub fn rep_forward_train(x: &Tensor, p: &RepBranchParams) -> Result<Tensor> {
    if p.identity_bn.is_some() && p.conv3.in_channels != p.conv3.out_channels {
        return Err(Error::InvalidArgument(
            "identity branch requires matching channel counts".into(),
        ));
    }
    let b3 = batchnorm_infer(&conv2d_same(x, &p.conv3, 1)?, &p.bn3)?;
    let b1 = batchnorm_infer(&conv2d_same(x, &p.conv1, 1)?, &p.bn1)?;
    let mut out = add(&b3, &b1)?;
    if let Some(bn) = &p.identity_bn {
        out = add(&out, &batchnorm_infer(x, bn)?)?;
    }
    Ok(out)
}

fn fold_branch(kernel: &ConvKernel, bn: &BatchNormParams) -> Result<(Vec<f32>, Vec<f32>)> {
    // 3x3-padded weights scaled by gamma/sqrt(var+eps), bias absorbing
    // the BN shift
    let (oc_n, ic_n) = (kernel.out_channels, kernel.in_channels);
    let mut w = vec![0.0f32; oc_n * ic_n * 9];
    let mut b = vec![0.0f32; oc_n];
    let pad = (3 - kernel.k) / 2;
    for oc in 0..oc_n {
        let var = bn.running_var[oc];
        if var <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "non-positive running variance {var} in channel {oc}"
            )));
        }
        let scale = bn.gamma[oc] / (var + bn.epsilon).sqrt();
        for ic in 0..ic_n {
            for p in 0..kernel.k {
                for q in 0..kernel.k {
                    w[((oc * ic_n + ic) * 3 + p + pad) * 3 + q + pad] = kernel.w(oc, ic, p, q) * scale;
                }
            }
        }
        let conv_bias = kernel.bias.as_ref().map_or(0.0, |bv| bv[oc]);
        b[oc] = bn.beta[oc] + (conv_bias - bn.running_mean[oc]) * scale;
    }
    Ok((w, b))
}

/// Fuses all Rep branches into one equivalent 3x3 kernel with bias.
pub fn rep_reparameterize(p: &RepBranchParams) -> Result<ConvKernel> {
    let (oc_n, ic_n) = (p.conv3.out_channels, p.conv3.in_channels);
    let (mut w, mut b) = fold_branch(&p.conv3, &p.bn3)?;
    let (w1, b1) = fold_branch(&p.conv1, &p.bn1)?;
    for (a, v) in w.iter_mut().zip(&w1) {
        *a += v;
    }
    for (a, v) in b.iter_mut().zip(&b1) {
        *a += v;
    }
    if let Some(bn) = &p.identity_bn {
        // identity as a center-Dirac 3x3 kernel, BN folded the same way
        let mut dirac = ConvKernel::zeros(oc_n, ic_n, 3);
        for c in 0..oc_n {
            dirac.weights[((c * ic_n + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let (wi, bi) = fold_branch(&dirac, bn)?;
        for (a, v) in w.iter_mut().zip(&wi) {
            *a += v;
        }
        for (a, v) in b.iter_mut().zip(&bi) {
            *a += v;
        }
    }
    ConvKernel::new(oc_n, ic_n, 3, w, Some(b))
}

/// One ACmixBlock stage of AC-E-ELAN: the ACmix operator with a parallel
/// 1x1-conv branch and a BN identity jump, Rep style.
#[derive(Debug, Clone)]
pub struct AcmixBlockStage {
    pub acmix: AcmixParams,
    /// 1x1 branch, row-major C x C.
    pub conv1: Vec<f32>,
    pub jump_bn: BatchNormParams,
    pub channels: usize,
}

impl AcmixBlockStage {
    pub fn init(channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (channels as f32).sqrt();
        Ok(AcmixBlockStage {
            acmix: AcmixParams::init(channels, heads, 3, rng)?,
            conv1: (0..channels * channels).map(|_| rng.gen_range(-bound..bound)).collect(),
            jump_bn: BatchNormParams::identity(channels),
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = acmix_forward(x, &self.acmix)?;
        let c = linear_pointwise(x, &self.conv1, self.channels, None)?;
        let j = batchnorm_infer(x, &self.jump_bn)?;
        add(&add(&a, &c)?, &j)
    }
}

/// AC-E-ELAN: two 1x1 CBS split branches, one passing through serial
/// ACmixBlock stages; the split branches and every stage output are
/// concatenated and fused by a final 1x1 CBS.
#[derive(Debug, Clone)]
pub struct AcEElanParams {
    pub branch_a_cbs: CbsParams,
    pub branch_b_cbs: CbsParams,
    pub stages: Vec<AcmixBlockStage>,
    pub fuse_cbs: CbsParams,
    pub width: usize,
}

impl AcEElanParams {
    /// `stages` is 2 for AC-E-ELAN proper; the ELAN-H head variant uses 3.
    pub fn init(in_c: usize, out_c: usize, stages: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if out_c % 2 != 0 {
            return Err(Error::InvalidArgument(format!("out_channels {out_c} must be even")));
        }
        let width = out_c / 2;
        if width % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "branch width {width} must be divisible by heads {heads}"
            )));
        }
        Ok(AcEElanParams {
            branch_a_cbs: CbsParams::init(in_c, width, 1, 1, rng),
            branch_b_cbs: CbsParams::init(in_c, width, 1, 1, rng),
            stages: (0..stages)
                .map(|_| AcmixBlockStage::init(width, heads, rng))
                .collect::<Result<_>>()?,
            fuse_cbs: CbsParams::init(width * (2 + stages), out_c, 1, 1, rng),
            width,
        })
    }

    pub fn tap_count(&self) -> usize {
        2 + self.stages.len()
    }
}

pub fn ac_e_elan_forward(x: &Tensor, p: &AcEElanParams) -> Result<Tensor> {
    let a = cbs_forward(x, &p.branch_a_cbs)?;
    let b = cbs_forward(x, &p.branch_b_cbs)?;
    let mut taps = vec![a, b];
    for stage in &p.stages {
        let prev = taps.last().unwrap();
        let next = stage.forward(prev)?;
        taps.push(next);
    }
    let refs: Vec<&Tensor> = taps.iter().collect();
    let cat = concat_channels(&refs)?;
    cbs_forward(&cat, &p.fuse_cbs)
}

/// ResNet bottleneck with the 3x3 conv replaced by ACmix; residual add
/// then SiLU.
#[derive(Debug, Clone)]
pub struct ResnetAcmixParams {
    pub reduce_cbs: CbsParams,
    pub acmix: AcmixParams,
    pub expand_cbs: CbsParams,
}

impl ResnetAcmixParams {
    pub fn init(channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = (channels / 2).max(heads);
        if hidden % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "bottleneck width {hidden} must be divisible by heads {heads}"
            )));
        }
        Ok(ResnetAcmixParams {
            reduce_cbs: CbsParams::init(channels, hidden, 1, 1, rng),
            acmix: AcmixParams::init(hidden, heads, 3, rng)?,
            expand_cbs: CbsParams::init(hidden, channels, 1, 1, rng),
        })
    }
}

pub fn resnet_acmix_forward(x: &Tensor, p: &ResnetAcmixParams) -> Result<Tensor> {
    let main = cbs_forward(x, &p.reduce_cbs)?;
    let main = acmix_forward(&main, &p.acmix)?;
    let main = cbs_forward(&main, &p.expand_cbs)?;
    let sum = add(&main, x)?;
    Ok(activation(&sum, Activation::Silu))
}
