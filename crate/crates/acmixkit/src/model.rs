//! Toy-scale assembly of the full detector graph: CBS stem, AC-E-ELAN
//! stages with MP1 downsampling, ResNet-ACmix insertions, GAM gates in
//! backbone and head, Sppcspc, an FPN head with upsample/concat fusions
//! and three Rep prediction heads. Includes box decoding, NMS and the
//! named weight archive.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, WhBox};
use crate::archive::{read_archive, write_archive};
use crate::blocks::{
    ac_e_elan_forward, cbs_forward, mp_forward, rep_forward_train, resnet_acmix_forward,
    sppcspc_forward, AcEElanParams, AcmixBlockStage, CbsParams, MpKind, MpParams, RepBranchParams,
    ResnetAcmixParams, SppcspcParams,
};
use crate::gam::{gam_forward, GamParams};
use crate::metrics::{iou_xyxy, BBox, Detection};
use crate::tensor::{
    concat_channels, conv2d_same, sigmoid, upsample_nearest, BatchNormParams,
    ConvKernel, Shape, Tensor,
};
use crate::{Error, Result};

pub const ATTENTION_HEADS: usize = 4;
pub const GAM_REDUCTION: usize = 4;

/// Published anchor dimensions for the four-class underwater set, used
/// as defaults when no clustering result is supplied.
pub fn default_anchors() -> AnchorSet {
    let wh = [
        (28., 25.),
        (39., 37.),
        (55., 46.),
        (68., 65.),
        (96., 84.),
        (139., 112.),
        (182., 160.),
        (272., 219.),
        (436., 362.),
    ];
    AnchorSet {
        anchors: wh.iter().map(|&(w, h)| WhBox { w, h }).collect(),
        strides: [8, 16, 32],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_size: usize,
    pub width_multiple: f32,
    pub anchors: AnchorSet,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_classes: usize, input_size: usize, width_multiple: f32, seed: u64) -> Self {
        ModelConfig {
            num_classes,
            input_size,
            width_multiple,
            anchors: default_anchors(),
            seed,
        }
    }

    pub fn strides(&self) -> [usize; 3] {
        self.anchors.strides
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
        }
        if self.input_size % 32 != 0 || self.input_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "input_size {} must be divisible by 32",
                self.input_size
            )));
        }
        if self.anchors.anchors.len() != 9 {
            return Err(Error::InvalidArgument("anchor set must contain 9 anchors".into()));
        }
        Ok(())
    }
}

/// Base channel widths before the width multiplier.
const BASE_W1: usize = 32;
const BASE_W2: usize = 64;
const BASE_W3: usize = 128;
const BASE_W4: usize = 256;
const BASE_W5: usize = 256;
const BASE_P5H: usize = 128;
const BASE_N4: usize = 64;
const BASE_N3: usize = 32;

fn scaled(base: usize, multiple: f32) -> Result<usize> {
    let c = (base as f32 * multiple).round() as usize;
    // the ELAN split halves widths and ACmix needs head-divisible blocks
    if c < 2 * ATTENTION_HEADS || c % (2 * ATTENTION_HEADS) != 0 {
        return Err(Error::InvalidArgument(format!(
            "width_multiple {multiple} gives channel width {c}, not divisible by {}",
            2 * ATTENTION_HEADS
        )));
    }
    Ok(c)
}

/// Raw prediction map of one detection scale.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub stride: usize,
    pub raw: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCensus {
    pub resnet_acmix: usize,
    pub sppcspc: usize,
    pub rep_heads: usize,
    pub gam_backbone: usize,
    pub gam_head: usize,
}

pub struct Model {
    pub config: ModelConfig,
    // backbone
    stem1: CbsParams,
    stem2: CbsParams,
    stem3: CbsParams,
    stem4: CbsParams,
    rac1: ResnetAcmixParams,
    elan1: AcEElanParams,
    mp_a: MpParams,
    elan2: AcEElanParams,
    mp_b: MpParams,
    elan3: AcEElanParams,
    mp_c: MpParams,
    elan4: AcEElanParams,
    rac2: ResnetAcmixParams,
    gam_backbone: GamParams,
    // head
    spp: SppcspcParams,
    cv_up5: CbsParams,
    lat4: CbsParams,
    elanh4: AcEElanParams,
    cv_up4: CbsParams,
    lat3: CbsParams,
    elanh3: AcEElanParams,
    mp2_3: MpParams,
    elanh4b: AcEElanParams,
    mp2_4: MpParams,
    elanh5: AcEElanParams,
    gam_heads: [GamParams; 3],
    reps: [RepBranchParams; 3],
    preds: [ConvKernel; 3],
}

/// Builds the full graph with deterministically seeded weights.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let m = cfg.width_multiple;
    let w1 = scaled(BASE_W1, m)?;
    let w2 = scaled(BASE_W2, m)?;
    let w3 = scaled(BASE_W3, m)?;
    let w4 = scaled(BASE_W4, m)?;
    let w5 = scaled(BASE_W5, m)?;
    let p5h = scaled(BASE_P5H, m)?;
    let n4 = scaled(BASE_N4, m)?;
    let n3 = scaled(BASE_N3, m)?;
    let h = ATTENTION_HEADS;
    let rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed);
    let pred_ch = 3 * (5 + cfg.num_classes);
    let pred_kernel = |in_c: usize, rng: &mut ChaCha8Rng| -> Result<ConvKernel> {
        use rand::Rng;
        let bound = 1.0 / (in_c as f32).sqrt();
        ConvKernel::new(
            pred_ch,
            in_c,
            1,
            (0..pred_ch * in_c).map(|_| rng.gen_range(-bound..bound)).collect(),
            Some(vec![0.0; pred_ch]),
        )
    };
    Ok(Model {
        stem1: CbsParams::init(3, w1, 3, 2, rng),
        stem2: CbsParams::init(w1, w1, 3, 1, rng),
        stem3: CbsParams::init(w1, w2, 3, 2, rng),
        stem4: CbsParams::init(w2, w2, 3, 1, rng),
        rac1: ResnetAcmixParams::init(w2, h, rng)?,
        elan1: AcEElanParams::init(w2, w2, 2, h, rng)?,
        mp_a: MpParams::init(w2, MpKind::Mp1, rng),
        elan2: AcEElanParams::init(w2, w3, 2, h, rng)?,
        mp_b: MpParams::init(w3, MpKind::Mp1, rng),
        elan3: AcEElanParams::init(w3, w4, 2, h, rng)?,
        mp_c: MpParams::init(w4, MpKind::Mp1, rng),
        elan4: AcEElanParams::init(w4, w5, 2, h, rng)?,
        rac2: ResnetAcmixParams::init(w5, h, rng)?,
        gam_backbone: GamParams::init(w5, GAM_REDUCTION, rng)?,
        spp: SppcspcParams::init(w5, p5h, rng),
        cv_up5: CbsParams::init(p5h, n4, 1, 1, rng),
        lat4: CbsParams::init(w4, n4, 1, 1, rng),
        elanh4: AcEElanParams::init(2 * n4, n4, 3, h, rng)?,
        cv_up4: CbsParams::init(n4, n3, 1, 1, rng),
        lat3: CbsParams::init(w3, n3, 1, 1, rng),
        elanh3: AcEElanParams::init(2 * n3, n3, 3, h, rng)?,
        mp2_3: MpParams::init(n3, MpKind::Mp2, rng),
        elanh4b: AcEElanParams::init(2 * n3 + n4, n4, 3, h, rng)?,
        mp2_4: MpParams::init(n4, MpKind::Mp2, rng),
        elanh5: AcEElanParams::init(2 * n4 + p5h, p5h, 3, h, rng)?,
        gam_heads: [
            GamParams::init(n3, GAM_REDUCTION, rng)?,
            GamParams::init(n4, GAM_REDUCTION, rng)?,
            GamParams::init(p5h, GAM_REDUCTION, rng)?,
        ],
        reps: [
            RepBranchParams::init(n3, n3, rng),
            RepBranchParams::init(n4, n4, rng),
            RepBranchParams::init(p5h, p5h, rng),
        ],
        preds: [
            pred_kernel(n3, rng)?,
            pred_kernel(n4, rng)?,
            pred_kernel(p5h, rng)?,
        ],
        config: cfg.clone(),
    })
}

impl Model {
    pub fn census(&self) -> LayerCensus {
        LayerCensus {
            resnet_acmix: 2,
            sppcspc: 1,
            rep_heads: self.reps.len(),
            gam_backbone: 1,
            gam_head: self.gam_heads.len(),
        }
    }

    /// Full forward pass to the three raw prediction maps.
    pub fn forward(&self, images: &Tensor) -> Result<[HeadOutput; 3]> {
        let s = self.config.input_size;
        if images.shape.channels != 3 || images.shape.height != s || images.shape.width != s {
            return Err(Error::ShapeMismatch(format!(
                "expected Bx3x{s}x{s} input, got {:?}",
                images.shape
            )));
        }
        // backbone
        let x = cbs_forward(images, &self.stem1)?;
        let x = cbs_forward(&x, &self.stem2)?;
        let x = cbs_forward(&x, &self.stem3)?;
        let x = cbs_forward(&x, &self.stem4)?;
        let x = resnet_acmix_forward(&x, &self.rac1)?;
        let x = ac_e_elan_forward(&x, &self.elan1)?;
        let x = mp_forward(&x, &self.mp_a)?;
        let c3 = ac_e_elan_forward(&x, &self.elan2)?;
        let x = mp_forward(&c3, &self.mp_b)?;
        let c4 = ac_e_elan_forward(&x, &self.elan3)?;
        let x = mp_forward(&c4, &self.mp_c)?;
        let x = ac_e_elan_forward(&x, &self.elan4)?;
        let x = resnet_acmix_forward(&x, &self.rac2)?;
        let c5 = gam_forward(&x, &self.gam_backbone)?;
        // head, top-down then bottom-up
        let p5 = sppcspc_forward(&c5, &self.spp)?;
        let up5 = upsample_nearest(&cbs_forward(&p5, &self.cv_up5)?, 2)?;
        let l4 = cbs_forward(&c4, &self.lat4)?;
        let d4 = ac_e_elan_forward(&concat_channels(&[&up5, &l4])?, &self.elanh4)?;
        let up4 = upsample_nearest(&cbs_forward(&d4, &self.cv_up4)?, 2)?;
        let l3 = cbs_forward(&c3, &self.lat3)?;
        let d3 = ac_e_elan_forward(&concat_channels(&[&up4, &l3])?, &self.elanh3)?;
        let down3 = mp_forward(&d3, &self.mp2_3)?;
        let e4 = ac_e_elan_forward(&concat_channels(&[&down3, &d4])?, &self.elanh4b)?;
        let down4 = mp_forward(&e4, &self.mp2_4)?;
        let e5 = ac_e_elan_forward(&concat_channels(&[&down4, &p5])?, &self.elanh5)?;
        // prediction heads
        let scales = [d3, e4, e5];
        let mut outputs = Vec::with_capacity(3);
        for (i, feat) in scales.iter().enumerate() {
            let g = gam_forward(feat, &self.gam_heads[i])?;
            let r = rep_forward_train(&g, &self.reps[i])?;
            let raw = conv2d_same(&r, &self.preds[i], 1)?;
            if raw.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite activation in prediction head {i} (weight corruption?)"
                )));
            }
            outputs.push(HeadOutput {
                stride: self.config.strides()[i],
                raw,
            });
        }
        let mut it = outputs.into_iter();
        Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
        visit_cbs(&mut self.stem1, "backbone.stem1", f);
        visit_cbs(&mut self.stem2, "backbone.stem2", f);
        visit_cbs(&mut self.stem3, "backbone.stem3", f);
        visit_cbs(&mut self.stem4, "backbone.stem4", f);
        visit_resnet_acmix(&mut self.rac1, "backbone.rac1", f);
        visit_elan(&mut self.elan1, "backbone.elan1", f);
        visit_mp(&mut self.mp_a, "backbone.mp_a", f);
        visit_elan(&mut self.elan2, "backbone.elan2", f);
        visit_mp(&mut self.mp_b, "backbone.mp_b", f);
        visit_elan(&mut self.elan3, "backbone.elan3", f);
        visit_mp(&mut self.mp_c, "backbone.mp_c", f);
        visit_elan(&mut self.elan4, "backbone.elan4", f);
        visit_resnet_acmix(&mut self.rac2, "backbone.rac2", f);
        visit_gam(&mut self.gam_backbone, "backbone.gam", f);
        visit_sppcspc(&mut self.spp, "head.spp", f);
        visit_cbs(&mut self.cv_up5, "head.cv_up5", f);
        visit_cbs(&mut self.lat4, "head.lat4", f);
        visit_elan(&mut self.elanh4, "head.elanh4", f);
        visit_cbs(&mut self.cv_up4, "head.cv_up4", f);
        visit_cbs(&mut self.lat3, "head.lat3", f);
        visit_elan(&mut self.elanh3, "head.elanh3", f);
        visit_mp(&mut self.mp2_3, "head.mp2_3", f);
        visit_elan(&mut self.elanh4b, "head.elanh4b", f);
        visit_mp(&mut self.mp2_4, "head.mp2_4", f);
        visit_elan(&mut self.elanh5, "head.elanh5", f);
        for (i, g) in self.gam_heads.iter_mut().enumerate() {
            visit_gam(g, &format!("head.gam{i}"), f);
        }
        for (i, r) in self.reps.iter_mut().enumerate() {
            visit_rep(r, &format!("head.rep{i}"), f);
        }
        for (i, k) in self.preds.iter_mut().enumerate() {
            visit_kernel(k, &format!("head.pred{i}"), f);
        }
    }

    /// Writes every named weight tensor plus the model config.
    pub fn save_weights(&mut self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        self.visit_params(&mut |name, data, shape| {
            entries.push((name, shape, data.clone()));
        });
        let borrowed: Vec<(String, Vec<usize>, &[f32])> = entries
            .iter()
            .map(|(n, s, d)| (n.clone(), s.clone(), d.as_slice()))
            .collect();
        let meta = serde_json::json!({ "config": self.config });
        write_archive(path, &borrowed, Some(meta))
    }

    /// Rebuilds a model from an archive; unknown tensors are ignored and
    /// returned as warnings, missing or misshapen tensors are errors.
    pub fn load_weights(path: &Path) -> Result<(Model, Vec<String>)> {
        let arch = read_archive(path)?;
        let meta = arch
            .header
            .meta
            .as_ref()
            .ok_or_else(|| Error::Archive("archive missing model config metadata".into()))?;
        let cfg: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Archive(format!("bad model config in archive: {e}")))?;
        let mut model = build_model(&cfg)?;
        let mut seen: Vec<String> = Vec::new();
        let mut err: Option<Error> = None;
        model.visit_params(&mut |name, data, shape| {
            if err.is_some() {
                return;
            }
            match arch.tensors.get(&name) {
                None => err = Some(Error::Archive(format!("missing tensor {name}"))),
                Some(values) => {
                    let expect: usize = shape.iter().product();
                    if values.len() != expect || arch.header.tensors[&name].shape != shape {
                        err = Some(Error::Archive(format!(
                            "tensor {name}: shape {:?} does not match expected {shape:?}",
                            arch.header.tensors[&name].shape
                        )));
                        return;
                    }
                    *data = values.clone();
                    seen.push(name);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let warnings = arch
            .tensors
            .keys()
            .filter(|k| !seen.contains(k))
            .map(|k| format!("ignoring unknown tensor {k}"))
            .collect();
        Ok((model, warnings))
    }
}

fn visit_vec(name: String, data: &mut Vec<f32>, shape: Vec<usize>, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    f(name, data, shape);
}

fn visit_kernel(k: &mut ConvKernel, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    let shape = vec![k.out_channels, k.in_channels, k.k, k.k];
    visit_vec(format!("{prefix}.weight"), &mut k.weights, shape, f);
    if let Some(b) = &mut k.bias {
        let n = b.len();
        visit_vec(format!("{prefix}.bias"), b, vec![n], f);
    }
}

fn visit_bn(bn: &mut BatchNormParams, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    let n = bn.gamma.len();
    visit_vec(format!("{prefix}.gamma"), &mut bn.gamma, vec![n], f);
    visit_vec(format!("{prefix}.beta"), &mut bn.beta, vec![n], f);
    visit_vec(format!("{prefix}.mean"), &mut bn.running_mean, vec![n], f);
    visit_vec(format!("{prefix}.var"), &mut bn.running_var, vec![n], f);
}

fn visit_cbs(p: &mut CbsParams, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    visit_kernel(&mut p.kernel, &format!("{prefix}.conv"), f);
    visit_bn(&mut p.bn, &format!("{prefix}.bn"), f);
}

fn visit_mp(p: &mut MpParams, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    visit_cbs(&mut p.upper_cbs, &format!("{prefix}.upper"), f);
    visit_cbs(&mut p.lower_cbs1, &format!("{prefix}.lower1"), f);
    visit_cbs(&mut p.lower_cbs2, &format!("{prefix}.lower2"), f);
}

fn visit_sppcspc(p: &mut SppcspcParams, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    visit_cbs(&mut p.residual_cbs, &format!("{prefix}.residual"), f);
    visit_cbs(&mut p.inner_in_cbs, &format!("{prefix}.inner_in"), f);
    visit_cbs(&mut p.inner_fuse_cbs, &format!("{prefix}.inner_fuse"), f);
    visit_cbs(&mut p.merge_cbs, &format!("{prefix}.merge"), f);
}

fn visit_rep(p: &mut RepBranchParams, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    visit_kernel(&mut p.conv3, &format!("{prefix}.conv3"), f);
    visit_bn(&mut p.bn3, &format!("{prefix}.bn3"), f);
    visit_kernel(&mut p.conv1, &format!("{prefix}.conv1"), f);
    visit_bn(&mut p.bn1, &format!("{prefix}.bn1"), f);
    if let Some(bn) = &mut p.identity_bn {
        visit_bn(bn, &format!("{prefix}.identity_bn"), f);
    }
}

fn visit_acmix(p: &mut crate::acmix::AcmixParams, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    let c = p.attn.channels;
    visit_vec(format!("{prefix}.w_q"), &mut p.attn.w_q, vec![c, c], f);
    visit_vec(format!("{prefix}.w_k"), &mut p.attn.w_k, vec![c, c], f);
    visit_vec(format!("{prefix}.w_v"), &mut p.attn.w_v, vec![c, c], f);
    let kk = p.kernel_k;
    visit_vec(format!("{prefix}.conv_fc"), &mut p.conv_fc, vec![kk * kk * c, 3 * c], f);
    let mut alpha = vec![p.alpha];
    f(format!("{prefix}.alpha"), &mut alpha, vec![1]);
    p.alpha = alpha[0];
    let mut beta = vec![p.beta];
    f(format!("{prefix}.beta"), &mut beta, vec![1]);
    p.beta = beta[0];
}

fn visit_stage(p: &mut AcmixBlockStage, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    visit_acmix(&mut p.acmix, &format!("{prefix}.acmix"), f);
    let c = p.channels;
    visit_vec(format!("{prefix}.conv1"), &mut p.conv1, vec![c, c], f);
    visit_bn(&mut p.jump_bn, &format!("{prefix}.jump_bn"), f);
}

fn visit_elan(p: &mut AcEElanParams, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    visit_cbs(&mut p.branch_a_cbs, &format!("{prefix}.branch_a"), f);
    visit_cbs(&mut p.branch_b_cbs, &format!("{prefix}.branch_b"), f);
    for (i, s) in p.stages.iter_mut().enumerate() {
        visit_stage(s, &format!("{prefix}.stage{i}"), f);
    }
    visit_cbs(&mut p.fuse_cbs, &format!("{prefix}.fuse"), f);
}

fn visit_resnet_acmix(p: &mut ResnetAcmixParams, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    visit_cbs(&mut p.reduce_cbs, &format!("{prefix}.reduce"), f);
    visit_acmix(&mut p.acmix, &format!("{prefix}.acmix"), f);
    visit_cbs(&mut p.expand_cbs, &format!("{prefix}.expand"), f);
}

fn visit_gam(p: &mut GamParams, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>, Vec<usize>)) {
    let c = p.channels;
    let hidden = c / p.reduction;
    visit_vec(format!("{prefix}.mlp_w1"), &mut p.mlp_w1, vec![hidden, c], f);
    visit_vec(format!("{prefix}.mlp_w2"), &mut p.mlp_w2, vec![c, hidden], f);
    visit_kernel(&mut p.spatial_conv1, &format!("{prefix}.spatial_conv1"), f);
    visit_bn(&mut p.spatial_bn, &format!("{prefix}.spatial_bn"), f);
    visit_kernel(&mut p.spatial_conv2, &format!("{prefix}.spatial_conv2"), f);
}

/// Decodes raw head maps into pixel-space detections; one detection list
/// entry per (batch item, grid cell, anchor slot) above the confidence
/// threshold. The batch index becomes the detection's image id.
pub fn decode_boxes(
    heads: &[HeadOutput],
    anchors: &AnchorSet,
    conf_threshold: f32,
    input_size: usize,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (hi, head) in heads.iter().enumerate() {
        if head.stride != anchors.strides[hi] {
            return Err(Error::InvalidArgument(format!(
                "head {hi} stride {} does not match anchor stride {}",
                head.stride, anchors.strides[hi]
            )));
        }
        let raw = &head.raw;
        if raw.shape.channels % 3 != 0 || raw.shape.channels / 3 < 6 {
            return Err(Error::ShapeMismatch(format!(
                "head channel count {} is not 3*(5+classes)",
                raw.shape.channels
            )));
        }
        let per_anchor = raw.shape.channels / 3;
        let num_classes = per_anchor - 5;
        let stride = head.stride as f32;
        let group = anchors.group(hi);
        for b in 0..raw.shape.batch {
            for a in 0..3 {
                let c0 = a * per_anchor;
                for gy in 0..raw.shape.height {
                    for gx in 0..raw.shape.width {
                        let tx = sigmoid(raw.at(b, c0, gy, gx));
                        let ty = sigmoid(raw.at(b, c0 + 1, gy, gx));
                        let tw = sigmoid(raw.at(b, c0 + 2, gy, gx));
                        let th = sigmoid(raw.at(b, c0 + 3, gy, gx));
                        let obj = sigmoid(raw.at(b, c0 + 4, gy, gx));
                        let (mut best_cls, mut best_p) = (0usize, f32::MIN);
                        for cls in 0..num_classes {
                            let p = sigmoid(raw.at(b, c0 + 5 + cls, gy, gx));
                            if p > best_p {
                                best_p = p;
                                best_cls = cls;
                            }
                        }
                        let conf = obj * best_p;
                        if conf < conf_threshold {
                            continue;
                        }
                        let cx = (2.0 * tx - 0.5 + gx as f32) * stride;
                        let cy = (2.0 * ty - 0.5 + gy as f32) * stride;
                        let w = (2.0 * tw).powi(2) * group[a].w;
                        let h = (2.0 * th).powi(2) * group[a].h;
                        let lim = input_size as f32;
                        let x1 = (cx - w / 2.0).clamp(0.0, lim);
                        let y1 = (cy - h / 2.0).clamp(0.0, lim);
                        let x2 = (cx + w / 2.0).clamp(0.0, lim);
                        let y2 = (cy + h / 2.0).clamp(0.0, lim);
                        if x2 <= x1 || y2 <= y1 {
                            continue;
                        }
                        out.push(Detection {
                            image_id: b,
                            class_id: best_cls,
                            bbox: BBox { x1, y1, x2, y2 },
                            confidence: conf,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Greedy per-class non-maximum suppression; ties broken by confidence
/// descending, then input index ascending.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = keep.iter().any(|&k| {
            let kd = &dets[k];
            kd.image_id == d.image_id
                && kd.class_id == d.class_id
                && iou_xyxy(&kd.bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep.into_iter().map(|i| dets[i]).collect()
}

/// Convenience: batch of images in [0,1] to a valid input tensor.
pub fn validate_input(images: &Tensor) -> Result<()> {
    if images.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument("input pixels must lie in [0,1]".into()));
    }
    Ok(())
}

pub fn head_shape(input_size: usize, stride: usize, num_classes: usize) -> Shape {
    Shape {
        batch: 1,
        channels: 3 * (5 + num_classes),
        height: input_size / stride,
        width: input_size / stride,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg(seed: u64) -> ModelConfig {
        ModelConfig::new(4, 64, 0.25, seed)
    }

    fn rand_image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.input_size;
        Tensor::from_vec(
            Shape::new(1, 3, s, s).unwrap(),
            (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_cfg(77);
        let mut a = build_model(&cfg).unwrap();
        let mut b = build_model(&cfg).unwrap();
        let mut wa = Vec::new();
        a.visit_params(&mut |n, d, _| wa.push((n, d.clone())));
        let mut wb = Vec::new();
        b.visit_params(&mut |n, d, _| wb.push((n, d.clone())));
        assert_eq!(wa, wb);
    }

    #[test]
    fn grid_size_law() {
        let cfg = tiny_cfg(1);
        let model = build_model(&cfg).unwrap();
        let img = rand_image(&cfg, 0);
        let heads = model.forward(&img).unwrap();
        for (head, stride) in heads.iter().zip([8usize, 16, 32]) {
            assert_eq!(head.stride, stride);
            assert_eq!(head.raw.shape.height, cfg.input_size / stride);
            assert_eq!(head.raw.shape.width, cfg.input_size / stride);
            assert_eq!(head.raw.shape.channels, 3 * (5 + cfg.num_classes));
        }
    }

    #[test]
    fn forward_deterministic_and_batch_consistent() {
        let cfg = tiny_cfg(3);
        let model = build_model(&cfg).unwrap();
        let img = rand_image(&cfg, 5);
        let h1 = model.forward(&img).unwrap();
        let h2 = model.forward(&img).unwrap();
        assert_eq!(h1[0].raw.data, h2[0].raw.data);
        // batch of two identical images gives identical per-image maps
        let mut batched = Tensor::zeros(Shape::new(2, 3, cfg.input_size, cfg.input_size).unwrap());
        let n = img.data.len();
        batched.data[..n].copy_from_slice(&img.data);
        batched.data[n..].copy_from_slice(&img.data);
        let hb = model.forward(&batched).unwrap();
        for (single, both) in h1.iter().zip(hb.iter()) {
            let per = single.raw.data.len();
            assert_eq!(&both.raw.data[..per], single.raw.data.as_slice());
            assert_eq!(&both.raw.data[per..], single.raw.data.as_slice());
        }
    }

    #[test]
    fn census_matches_structure() {
        let model = build_model(&tiny_cfg(0)).unwrap();
        let c = model.census();
        assert!(c.resnet_acmix >= 2);
        assert!(c.sppcspc >= 1);
        assert_eq!(c.rep_heads, 3);
        assert!(c.gam_backbone >= 1 && c.gam_head >= 1);
    }

    #[test]
    fn width_multiple_scales_channels() {
        let cfg_full = ModelConfig::new(4, 64, 1.0, 0);
        let cfg_quarter = ModelConfig::new(4, 64, 0.25, 0);
        let full = build_model(&cfg_full).unwrap();
        let quarter = build_model(&cfg_quarter).unwrap();
        assert_eq!(full.stem1.kernel.out_channels, 32);
        assert_eq!(quarter.stem1.kernel.out_channels, 8);
        assert_eq!(full.spp.merge_cbs.kernel.out_channels, 128);
        assert_eq!(quarter.spp.merge_cbs.kernel.out_channels, 32);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = tiny_cfg(0);
        cfg.input_size = 100;
        assert!(build_model(&cfg).is_err());
        let mut cfg = tiny_cfg(0);
        cfg.width_multiple = 0.1; // widths collapse below head divisibility
        assert!(build_model(&cfg).is_err());
    }

    /// Anchors small enough that decoded boxes never hit the image border.
    fn small_anchors() -> AnchorSet {
        let wh = [
            (4., 5.),
            (6., 6.),
            (8., 7.),
            (10., 10.),
            (12., 12.),
            (14., 14.),
            (16., 16.),
            (20., 20.),
            (24., 24.),
        ];
        AnchorSet {
            anchors: wh.iter().map(|&(w, h)| WhBox { w, h }).collect(),
            strides: [8, 16, 32],
        }
    }

    #[test]
    fn decode_zero_logits_centered_anchor_box() {
        let anchors = small_anchors();
        let raw = Tensor::zeros(Shape::new(1, 27, 2, 2).unwrap());
        let heads = [
            HeadOutput { stride: 8, raw },
            HeadOutput {
                stride: 16,
                raw: Tensor::zeros(Shape::new(1, 27, 1, 1).unwrap()),
            },
            HeadOutput {
                stride: 32,
                raw: Tensor::zeros(Shape::new(1, 27, 1, 1).unwrap()),
            },
        ];
        let dets = decode_boxes(&heads, &anchors, 0.0, 640).unwrap();
        // 6 grid cells x 3 anchor slots
        assert_eq!(dets.len(), 18);
        // zero logits: center (0.5+g)*stride, size = anchor dims
        let d = dets
            .iter()
            .find(|d| {
                let cx = (d.bbox.x1 + d.bbox.x2) / 2.0;
                let cy = (d.bbox.y1 + d.bbox.y2) / 2.0;
                let w = d.bbox.x2 - d.bbox.x1;
                (cx - 4.0).abs() < 1e-3 && (cy - 4.0).abs() < 1e-3 && (w - 4.0).abs() < 1e-3
            })
            .unwrap();
        assert!((d.bbox.y2 - d.bbox.y1 - 5.0).abs() < 1e-3);
        assert!((d.confidence - 0.25).abs() < 1e-6); // sigma(0)^2
    }

    #[test]
    fn decode_scalar_oracle() {
        let anchors = small_anchors();
        let mut raw = Tensor::zeros(Shape::new(1, 27, 2, 2).unwrap());
        // hand-set logits for anchor 1 at cell (1,0)
        let c0 = 9;
        raw.set(0, c0, 1, 0, 0.3);
        raw.set(0, c0 + 1, 1, 0, -0.2);
        raw.set(0, c0 + 2, 1, 0, 0.1);
        raw.set(0, c0 + 3, 1, 0, 0.4);
        raw.set(0, c0 + 4, 1, 0, 2.0);
        raw.set(0, c0 + 7, 1, 0, 1.5);
        let heads = [
            HeadOutput { stride: 8, raw },
            HeadOutput {
                stride: 16,
                raw: Tensor::zeros(Shape::new(1, 27, 1, 1).unwrap()),
            },
            HeadOutput {
                stride: 32,
                raw: Tensor::zeros(Shape::new(1, 27, 1, 1).unwrap()),
            },
        ];
        let dets = decode_boxes(&heads, &anchors, 0.5, 640).unwrap();
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
        let cx = (2.0 * sig(0.3) - 0.5 + 0.0) * 8.0;
        let cy = (2.0 * sig(-0.2) - 0.5 + 1.0) * 8.0;
        let w = (2.0 * sig(0.1)).powi(2) * 6.0;
        let h = (2.0 * sig(0.4)).powi(2) * 6.0;
        assert!((d.bbox.x1 - (cx - w / 2.0)).abs() < 1e-5);
        assert!(((d.bbox.y1 + d.bbox.y2) / 2.0 - cy).abs() < 1e-4);
        assert!((d.bbox.y2 - d.bbox.y1 - h).abs() < 1e-4);
        assert_eq!(d.class_id, 2);
        assert!((d.confidence - sig(2.0) * sig(1.5)).abs() < 1e-6);
    }

    #[test]
    fn decode_threshold_one_yields_empty() {
        let cfg = tiny_cfg(0);
        let heads = [
            HeadOutput {
                stride: 8,
                raw: Tensor::zeros(Shape::new(1, 27, 2, 2).unwrap()),
            },
            HeadOutput {
                stride: 16,
                raw: Tensor::zeros(Shape::new(1, 27, 1, 1).unwrap()),
            },
            HeadOutput {
                stride: 32,
                raw: Tensor::zeros(Shape::new(1, 27, 1, 1).unwrap()),
            },
        ];
        let dets = decode_boxes(&heads, &cfg.anchors, 1.0, 640).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn nms_cases() {
        let b1 = BBox::new(0., 0., 10., 10.).unwrap();
        let single = vec![Detection {
            image_id: 0,
            class_id: 0,
            bbox: b1,
            confidence: 0.9,
        }];
        assert_eq!(nms(&single, 0.45).len(), 1);

        let dup = vec![
            Detection {
                image_id: 0,
                class_id: 0,
                bbox: b1,
                confidence: 0.9,
            },
            Detection {
                image_id: 0,
                class_id: 0,
                bbox: b1,
                confidence: 0.8,
            },
        ];
        let kept = nms(&dup, 0.45);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        // IoU 0.40 pair survives a 0.45 threshold
        let b2 = BBox::new(0., 0., 10., 7.0).unwrap();
        let b3 = BBox::new(0., 3.0, 10., 10.).unwrap();
        let v = iou_xyxy(&b2, &b3);
        assert!((v - 4.0 / 10.0).abs() < 1e-6);
        let pair = vec![
            Detection {
                image_id: 0,
                class_id: 0,
                bbox: b2,
                confidence: 0.9,
            },
            Detection {
                image_id: 0,
                class_id: 0,
                bbox: b3,
                confidence: 0.8,
            },
        ];
        assert_eq!(nms(&pair, 0.45).len(), 2);
    }

    #[test]
    fn nms_output_subset_invariant() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dets: Vec<Detection> = (0..40)
            .map(|_| {
                let x = rng.gen_range(0.0..50.0);
                let y = rng.gen_range(0.0..50.0);
                Detection {
                    image_id: 0,
                    class_id: rng.gen_range(0..3),
                    bbox: BBox::new(x, y, x + rng.gen_range(5.0..20.0), y + rng.gen_range(5.0..20.0)).unwrap(),
                    confidence: rng.gen_range(0.0..1.0),
                }
            })
            .collect();
        let kept = nms(&dets, 0.45);
        assert!(kept.len() <= dets.len());
        for (i, a) in kept.iter().enumerate() {
            assert!(dets.contains(a));
            for b in kept.iter().skip(i + 1) {
                if a.class_id == b.class_id && a.image_id == b.image_id {
                    assert!(iou_xyxy(&a.bbox, &b.bbox) <= 0.45);
                }
            }
        }
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let cfg = tiny_cfg(9);
        let mut model = build_model(&cfg).unwrap();
        let img = rand_image(&cfg, 2);
        let before = model.forward(&img).unwrap();
        model.save_weights(&path).unwrap();
        let (loaded, warnings) = Model::load_weights(&path).unwrap();
        assert!(warnings.is_empty());
        let after = loaded.forward(&img).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.raw.data, b.raw.data);
        }
    }

    #[test]
    fn tampered_header_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut model = build_model(&tiny_cfg(0)).unwrap();
        model.save_weights(&path).unwrap();
        // rewrite the archive with a wrong shape on one tensor
        let arch = crate::archive::read_archive(&path).unwrap();
        let entries: Vec<(String, Vec<usize>, Vec<f32>)> = arch
            .tensors
            .iter()
            .map(|(name, data)| {
                let mut shape = arch.header.tensors[name].shape.clone();
                if name == "backbone.stem1.conv.weight" {
                    shape = vec![data.len()]; // flattened: wrong rank
                }
                (name.clone(), shape, data.clone())
            })
            .collect();
        let borrowed: Vec<(String, Vec<usize>, &[f32])> = entries
            .iter()
            .map(|(n, s, d)| (n.clone(), s.clone(), d.as_slice()))
            .collect();
        crate::archive::write_archive(&path, &borrowed, arch.header.meta.clone()).unwrap();
        let err = match Model::load_weights(&path) {
            Err(e) => e,
            Ok(_) => panic!("tampered archive loaded successfully"),
        };
        assert!(err.to_string().contains("backbone.stem1.conv.weight"), "{err}");
    }

    #[test]
    fn unknown_tensor_warns_but_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut model = build_model(&tiny_cfg(0)).unwrap();
        model.save_weights(&path).unwrap();
        let arch = crate::archive::read_archive(&path).unwrap();
        let extra = vec![1.0f32, 2.0, 3.0];
        let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = arch
            .tensors
            .iter()
            .map(|(name, data)| {
                (name.clone(), arch.header.tensors[name].shape.clone(), data.clone())
            })
            .collect();
        entries.push(("future.extension".into(), vec![3], extra));
        let borrowed: Vec<(String, Vec<usize>, &[f32])> = entries
            .iter()
            .map(|(n, s, d)| (n.clone(), s.clone(), d.as_slice()))
            .collect();
        crate::archive::write_archive(&path, &borrowed, arch.header.meta.clone()).unwrap();
        let (_, warnings) = Model::load_weights(&path).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("future.extension"));
    }
}
