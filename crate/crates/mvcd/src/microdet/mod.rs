//! A micro two-stage detector that keeps Faster R-CNN's structural
//! interfaces — stride-2 backbone, RPN conv with an SE block, anchor
//! grid, RoI max pooling, classification and regression heads — at a
//! size that trains on a CPU in seconds. All gradients are hand-derived;
//! the layer primitives live in [`layers`].

pub mod layers;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{se_forward_cached, ChannelAttentionVector, SECache, SEWeights};
use crate::boxes::{decode_deltas, encode_deltas, iou, BBox};
use crate::rngutil::normal_sample;
use crate::tensor::Tensor;
use crate::{Error, Result};
use layers::*;

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
/// Backbone: two stride-2 convs, 3 → 8 → 16 channels.
pub const BACKBONE_MID: usize = 8;
pub const FEAT_CHANNELS: usize = 16;
pub const FEAT_SIZE: usize = 16;
pub const STRIDE: usize = 4;
pub const ANCHOR_SIDE: f64 = 16.0;
pub const ROI_SIZE: usize = 4;
pub const ROI_HIDDEN: usize = 64;
pub const SE_REDUCTION: usize = 4;
pub const MAX_PROPOSALS: usize = 32;
/// RPN anchor matching thresholds.
pub const ANCHOR_POS_IOU: f64 = 0.5;
pub const ANCHOR_NEG_IOU: f64 = 0.3;
/// Head foreground threshold.
pub const ROI_FG_IOU: f64 = 0.5;

/// A ground-truth or pseudo-label object: class plus box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

/// One detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// The trainable tensors, grouped; also reused as the container for
/// gradients and momentum buffers since those are shape-parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub rpn_w: Tensor,
    pub rpn_b: Tensor,
    pub se_w1: Tensor,
    pub se_b1: Tensor,
    pub se_w2: Tensor,
    pub se_b2: Tensor,
    pub obj_w: Tensor,
    pub obj_b: Tensor,
    pub box_w: Tensor,
    pub box_b: Tensor,
    pub roi_w: Tensor,
    pub roi_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub reg_w: Tensor,
    pub reg_b: Tensor,
}

macro_rules! for_each_param {
    ($macro_self:expr, $f:expr) => {{
        let s = $macro_self;
        $f("backbone.conv1.w", &s.conv1_w);
        $f("backbone.conv1.b", &s.conv1_b);
        $f("backbone.conv2.w", &s.conv2_w);
        $f("backbone.conv2.b", &s.conv2_b);
        $f("rpn.conv.w", &s.rpn_w);
        $f("rpn.conv.b", &s.rpn_b);
        $f("rpn.se.w1", &s.se_w1);
        $f("rpn.se.b1", &s.se_b1);
        $f("rpn.se.w2", &s.se_w2);
        $f("rpn.se.b2", &s.se_b2);
        $f("rpn.obj.w", &s.obj_w);
        $f("rpn.obj.b", &s.obj_b);
        $f("rpn.box.w", &s.box_w);
        $f("rpn.box.b", &s.box_b);
        $f("head.fc.w", &s.roi_w);
        $f("head.fc.b", &s.roi_b);
        $f("head.cls.w", &s.cls_w);
        $f("head.cls.b", &s.cls_b);
        $f("head.reg.w", &s.reg_w);
        $f("head.reg.b", &s.reg_b);
    }};
}

impl ParamSet {
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(20);
        for_each_param!(self, |name, t| out.push((name, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("backbone.conv1.w", &mut self.conv1_w),
            ("backbone.conv1.b", &mut self.conv1_b),
            ("backbone.conv2.w", &mut self.conv2_w),
            ("backbone.conv2.b", &mut self.conv2_b),
            ("rpn.conv.w", &mut self.rpn_w),
            ("rpn.conv.b", &mut self.rpn_b),
            ("rpn.se.w1", &mut self.se_w1),
            ("rpn.se.b1", &mut self.se_b1),
            ("rpn.se.w2", &mut self.se_w2),
            ("rpn.se.b2", &mut self.se_b2),
            ("rpn.obj.w", &mut self.obj_w),
            ("rpn.obj.b", &mut self.obj_b),
            ("rpn.box.w", &mut self.box_w),
            ("rpn.box.b", &mut self.box_b),
            ("head.fc.w", &mut self.roi_w),
            ("head.fc.b", &mut self.roi_b),
            ("head.cls.w", &mut self.cls_w),
            ("head.cls.b", &mut self.cls_b),
            ("head.reg.w", &mut self.reg_w),
            ("head.reg.b", &mut self.reg_b),
        ]
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            conv1_w: Tensor::zeros_like(&self.conv1_w),
            conv1_b: Tensor::zeros_like(&self.conv1_b),
            conv2_w: Tensor::zeros_like(&self.conv2_w),
            conv2_b: Tensor::zeros_like(&self.conv2_b),
            rpn_w: Tensor::zeros_like(&self.rpn_w),
            rpn_b: Tensor::zeros_like(&self.rpn_b),
            se_w1: Tensor::zeros_like(&self.se_w1),
            se_b1: Tensor::zeros_like(&self.se_b1),
            se_w2: Tensor::zeros_like(&self.se_w2),
            se_b2: Tensor::zeros_like(&self.se_b2),
            obj_w: Tensor::zeros_like(&self.obj_w),
            obj_b: Tensor::zeros_like(&self.obj_b),
            box_w: Tensor::zeros_like(&self.box_w),
            box_b: Tensor::zeros_like(&self.box_b),
            roi_w: Tensor::zeros_like(&self.roi_w),
            roi_b: Tensor::zeros_like(&self.roi_b),
            cls_w: Tensor::zeros_like(&self.cls_w),
            cls_b: Tensor::zeros_like(&self.cls_b),
            reg_w: Tensor::zeros_like(&self.reg_w),
            reg_b: Tensor::zeros_like(&self.reg_b),
        }
    }

    fn se_weights(&self) -> SEWeights {
        SEWeights {
            w1: self.se_w1.clone(),
            b1: self.se_b1.clone(),
            w2: self.se_w2.clone(),
            b2: self.se_b2.clone(),
        }
    }
}

/// Full detector state: architecture tensors plus class metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub set: ParamSet,
}

impl DetectorParams {
    /// Seeded initialization. Backbone/RPN weights use He-style scales,
    /// classifier and regressor start near zero (σ = 0.01).
    pub fn init(class_names: &[String], seed: u64) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::invalid("detector needs at least one class"));
        }
        let n = class_names.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = ParamSet {
            conv1_w: init_tensor(
                vec![BACKBONE_MID, IMAGE_CHANNELS, 3, 3],
                he_std(IMAGE_CHANNELS * 9),
                &mut rng,
            ),
            conv1_b: Tensor::zeros(vec![BACKBONE_MID]),
            conv2_w: init_tensor(
                vec![FEAT_CHANNELS, BACKBONE_MID, 3, 3],
                he_std(BACKBONE_MID * 9),
                &mut rng,
            ),
            conv2_b: Tensor::zeros(vec![FEAT_CHANNELS]),
            rpn_w: init_tensor(
                vec![FEAT_CHANNELS, FEAT_CHANNELS, 3, 3],
                he_std(FEAT_CHANNELS * 9),
                &mut rng,
            ),
            rpn_b: Tensor::zeros(vec![FEAT_CHANNELS]),
            se_w1: init_tensor(
                vec![FEAT_CHANNELS / SE_REDUCTION, FEAT_CHANNELS],
                he_std(FEAT_CHANNELS),
                &mut rng,
            ),
            se_b1: Tensor::zeros(vec![FEAT_CHANNELS / SE_REDUCTION]),
            se_w2: init_tensor(
                vec![FEAT_CHANNELS, FEAT_CHANNELS / SE_REDUCTION],
                he_std(FEAT_CHANNELS / SE_REDUCTION),
                &mut rng,
            ),
            se_b2: Tensor::zeros(vec![FEAT_CHANNELS]),
            obj_w: init_tensor(vec![1, FEAT_CHANNELS, 1, 1], he_std(FEAT_CHANNELS), &mut rng),
            obj_b: Tensor::zeros(vec![1]),
            box_w: init_tensor(vec![4, FEAT_CHANNELS, 1, 1], 0.01, &mut rng),
            box_b: Tensor::zeros(vec![4]),
            roi_w: init_tensor(
                vec![ROI_HIDDEN, FEAT_CHANNELS * ROI_SIZE * ROI_SIZE],
                he_std(FEAT_CHANNELS * ROI_SIZE * ROI_SIZE),
                &mut rng,
            ),
            roi_b: Tensor::zeros(vec![ROI_HIDDEN]),
            cls_w: init_tensor(vec![n + 1, ROI_HIDDEN], 0.01, &mut rng),
            cls_b: Tensor::zeros(vec![n + 1]),
            reg_w: init_tensor(vec![4 * n, ROI_HIDDEN], 0.01, &mut rng),
            reg_b: Tensor::zeros(vec![4 * n]),
        };
        Ok(DetectorParams {
            num_classes: n,
            class_names: class_names.to_vec(),
            seed,
            set,
        })
    }

    /// Widen the classifier/regressor for additional classes. Old rows
    /// are copied verbatim (bit-exact), new rows drawn from N(0, 0.01).
    pub fn expand_classes(&self, new_class_names: &[String], seed: u64) -> Result<Self> {
        for name in new_class_names {
            if self.class_names.contains(name) {
                return Err(Error::invalid(format!("class {name} already present")));
            }
        }
        let n_old = self.num_classes;
        let n = n_old + new_class_names.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = ROI_HIDDEN;
        let mut cls_w = Tensor::zeros(vec![n + 1, hidden]);
        cls_w.data_mut()[..(n_old + 1) * hidden].copy_from_slice(self.set.cls_w.data());
        for v in cls_w.data_mut()[(n_old + 1) * hidden..].iter_mut() {
            *v = normal_sample(&mut rng, 0.01);
        }
        let mut cls_b = Tensor::zeros(vec![n + 1]);
        cls_b.data_mut()[..n_old + 1].copy_from_slice(self.set.cls_b.data());
        for v in cls_b.data_mut()[n_old + 1..].iter_mut() {
            *v = normal_sample(&mut rng, 0.01);
        }
        let mut reg_w = Tensor::zeros(vec![4 * n, hidden]);
        reg_w.data_mut()[..4 * n_old * hidden].copy_from_slice(self.set.reg_w.data());
        for v in reg_w.data_mut()[4 * n_old * hidden..].iter_mut() {
            *v = normal_sample(&mut rng, 0.01);
        }
        let mut reg_b = Tensor::zeros(vec![4 * n]);
        reg_b.data_mut()[..4 * n_old].copy_from_slice(self.set.reg_b.data());
        for v in reg_b.data_mut()[4 * n_old..].iter_mut() {
            *v = normal_sample(&mut rng, 0.01);
        }
        let mut out = self.clone();
        out.num_classes = n;
        out.class_names.extend(new_class_names.iter().cloned());
        out.seed = seed;
        out.set.cls_w = cls_w;
        out.set.cls_b = cls_b;
        out.set.reg_w = reg_w;
        out.set.reg_b = reg_b;
        Ok(out)
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn init_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| normal_sample(rng, std))
}

/// Anchor box for a feature cell: a square of side [`ANCHOR_SIDE`]
/// centered on the cell.
pub fn anchor_box(gy: usize, gx: usize) -> BBox {
    let cx = (gx as f64 + 0.5) * STRIDE as f64;
    let cy = (gy as f64 + 0.5) * STRIDE as f64;
    let half = ANCHOR_SIDE / 2.0;
    BBox::new(cx - half, cy - half, cx + half, cy + half)
}

/// Everything the backbone-through-proposals pass computes.
#[derive(Debug, Clone)]
pub struct BaseForward {
    pub image: Tensor,
    pub c1_pre: Tensor,
    pub c1: Tensor,
    pub c2_pre: Tensor,
    pub c2: Tensor,
    pub rpn_pre: Tensor,
    pub rpn_post: Tensor,
    pub se: SECache,
    pub feature: Tensor,
    pub v: ChannelAttentionVector,
    pub obj_logits: Tensor,
    pub box_deltas: Tensor,
    pub proposals: Vec<BBox>,
}

/// Head pass over a fixed RoI list.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub rois: Vec<BBox>,
    pub pooled: Vec<Tensor>,
    pub pool_argmax: Vec<Vec<usize>>,
    pub hidden_pre: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub cls_logits: Tensor,
    pub reg_out: Tensor,
}

/// Image-level feature, its channel attention, and per-instance pooled
/// features — the tensors the distillation losses consume.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub image_feature: Tensor,
    pub v: ChannelAttentionVector,
    pub instance_features: Vec<Tensor>,
}

pub fn forward_base(params: &DetectorParams, image: &Tensor) -> Result<BaseForward> {
    if image.shape() != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::invalid(format!(
            "expected a {IMAGE_CHANNELS}×{IMAGE_SIZE}×{IMAGE_SIZE} image, got {:?}",
            image.shape()
        )));
    }
    let set = &params.set;
    let c1_pre = conv2d(image, &set.conv1_w, &set.conv1_b, 2, 1);
    let c1 = relu(&c1_pre);
    let c2_pre = conv2d(&c1, &set.conv2_w, &set.conv2_b, 2, 1);
    let c2 = relu(&c2_pre);
    let rpn_pre = conv2d(&c2, &set.rpn_w, &set.rpn_b, 1, 1);
    let rpn_post = relu(&rpn_pre);
    let (feature, v, se) = se_forward_cached(&rpn_post, &set.se_weights())?;
    let obj_logits = conv2d(&feature, &set.obj_w, &set.obj_b, 1, 0);
    let box_deltas = conv2d(&feature, &set.box_w, &set.box_b, 1, 0);

    // anchor cells whose objectness clears 0.5 (strictly), refined by the
    // box head, clipped, then top-K by objectness
    let mut candidates: Vec<(f64, usize, BBox)> = Vec::new();
    for gy in 0..FEAT_SIZE {
        for gx in 0..FEAT_SIZE {
            let logit = obj_logits.at3(0, gy, gx);
            if logit <= 0.0 {
                continue; // sigmoid(logit) ≤ 0.5
            }
            let deltas = [
                box_deltas.at3(0, gy, gx),
                box_deltas.at3(1, gy, gx),
                box_deltas.at3(2, gy, gx),
                box_deltas.at3(3, gy, gx),
            ];
            let decoded = decode_deltas(&anchor_box(gy, gx), &deltas).clip(IMAGE_SIZE as f64);
            if decoded.is_valid() {
                candidates.push((logit, gy * FEAT_SIZE + gx, decoded));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    candidates.truncate(MAX_PROPOSALS);
    let proposals = candidates.into_iter().map(|(_, _, b)| b).collect();

    Ok(BaseForward {
        image: image.clone(),
        c1_pre,
        c1,
        c2_pre,
        c2,
        rpn_pre,
        rpn_post,
        se,
        feature,
        v,
        obj_logits,
        box_deltas,
        proposals,
    })
}

pub fn forward_head(params: &DetectorParams, feature: &Tensor, rois: &[BBox]) -> Result<HeadForward> {
    let set = &params.set;
    let n = params.num_classes;
    let r = rois.len();
    let mut pooled = Vec::with_capacity(r);
    let mut pool_argmax = Vec::with_capacity(r);
    let mut hidden_pre = Vec::with_capacity(r);
    let mut hidden = Vec::with_capacity(r);
    let mut cls_logits = Tensor::zeros(vec![r, n + 1]);
    let mut reg_out = Tensor::zeros(vec![r, 4 * n]);
    for (i, roi) in rois.iter().enumerate() {
        let (pool, argmax) = roi_pool(feature, roi, STRIDE, ROI_SIZE, ROI_SIZE)?;
        let h_pre = dense(pool.data(), &set.roi_w, &set.roi_b);
        let h: Vec<f64> = h_pre.iter().map(|z| z.max(0.0)).collect();
        let cls = dense(&h, &set.cls_w, &set.cls_b);
        let reg = dense(&h, &set.reg_w, &set.reg_b);
        cls_logits.data_mut()[i * (n + 1)..(i + 1) * (n + 1)].copy_from_slice(&cls);
        reg_out.data_mut()[i * 4 * n..(i + 1) * 4 * n].copy_from_slice(&reg);
        pooled.push(pool);
        pool_argmax.push(argmax);
        hidden_pre.push(h_pre);
        hidden.push(h);
    }
    Ok(HeadForward {
        rois: rois.to_vec(),
        pooled,
        pool_argmax,
        hidden_pre,
        hidden,
        cls_logits,
        reg_out,
    })
}

/// Single-call forward: feature bundle, proposals, and head outputs on
/// the proposals.
pub fn forward(
    params: &DetectorParams,
    image: &Tensor,
) -> Result<(FeatureBundle, Vec<BBox>, Tensor, Tensor)> {
    let base = forward_base(params, image)?;
    let head = forward_head(params, &base.feature, &base.proposals)?;
    let bundle = FeatureBundle {
        image_feature: base.feature.clone(),
        v: base.v.clone(),
        instance_features: head.pooled.clone(),
    };
    Ok((bundle, base.proposals, head.cls_logits, head.reg_out))
}

/// Max-pool an image-space box out of a feature map into `ph`×`pw` bins.
/// Returns the pooled tensor and, per pooled element, the flat feature
/// index its max came from (first occurrence wins on ties).
pub fn roi_pool(
    feature: &Tensor,
    bbox: &BBox,
    stride: usize,
    ph: usize,
    pw: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (c, fh, fw) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let image_extent = (fw * stride) as f64;
    let clipped = bbox.clip(image_extent);
    if !clipped.is_valid() {
        return Err(Error::invalid(format!(
            "roi degenerate after clipping: {bbox:?}"
        )));
    }
    let s = stride as f64;
    let rx1 = ((clipped.x1 / s).floor() as usize).min(fw - 1);
    let rx2 = ((clipped.x2 / s).ceil() as usize).clamp(rx1 + 1, fw);
    let ry1 = ((clipped.y1 / s).floor() as usize).min(fh - 1);
    let ry2 = ((clipped.y2 / s).ceil() as usize).clamp(ry1 + 1, fh);
    let (rw, rh) = (rx2 - rx1, ry2 - ry1);
    let mut out = Tensor::zeros(vec![c, ph, pw]);
    let mut argmax = vec![0usize; c * ph * pw];
    for by in 0..ph {
        // integer bin boundaries; clamping keeps every bin nonempty
        let ys = (ry1 + by * rh / ph).min(ry2 - 1);
        let ye = (ry1 + (by + 1) * rh / ph).clamp(ys + 1, ry2);
        for bx in 0..pw {
            let xs = (rx1 + bx * rw / pw).min(rx2 - 1);
            let xe = (rx1 + (bx + 1) * rw / pw).clamp(xs + 1, rx2);
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for y in ys..ye {
                    for x in xs..xe {
                        let idx = feature.idx3(ch, y, x);
                        let v = feature.data()[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let oi = out.idx3(ch, by, bx);
                out.data_mut()[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Scatter a pooled-feature gradient back through the max routing.
pub fn roi_pool_backward(argmax: &[usize], d_pool: &Tensor, d_feature: &mut Tensor) {
    for (slot, g) in argmax.iter().zip(d_pool.data()) {
        d_feature.data_mut()[*slot] += g;
    }
}

/// Loss components of one training image.
#[derive(Debug, Clone, Default)]
pub struct FrcnnLossParts {
    pub total: f64,
    pub objectness: f64,
    pub rpn_reg: f64,
    pub cls: f64,
    pub head_reg: f64,
}

/// Gradients of the Faster R-CNN loss with respect to the raw head
/// outputs; the caller feeds them to [`backward`].
#[derive(Debug, Clone)]
pub struct FrcnnGrads {
    pub d_obj: Tensor,
    pub d_box: Tensor,
    pub d_cls: Tensor,
    pub d_reg: Tensor,
}

/// Standard two-stage detection loss at micro scale: balanced BCE on
/// anchor objectness, smooth-L1 on positive-anchor deltas, cross-entropy
/// on RoI classification, smooth-L1 on foreground RoI regression.
pub fn frcnn_loss(
    base: &BaseForward,
    head: &HeadForward,
    annotations: &[Annotation],
    num_classes: usize,
) -> Result<(FrcnnLossParts, FrcnnGrads)> {
    for a in annotations {
        if !a.bbox.is_valid() || a.class_id >= num_classes {
            return Err(Error::invalid("annotation with invalid box or class"));
        }
    }
    let mut parts = FrcnnLossParts::default();
    let mut d_obj = Tensor::zeros_like(&base.obj_logits);
    let mut d_box = Tensor::zeros_like(&base.box_deltas);

    // anchor assignment
    let mut positives: Vec<(usize, usize, usize)> = Vec::new(); // (gy, gx, gt index)
    let mut negatives: Vec<(usize, usize)> = Vec::new();
    for gy in 0..FEAT_SIZE {
        for gx in 0..FEAT_SIZE {
            let anchor = anchor_box(gy, gx);
            let mut best = 0.0;
            let mut best_gt = None;
            for (gi, ann) in annotations.iter().enumerate() {
                let v = iou(&anchor, &ann.bbox)?;
                if v > best {
                    best = v;
                    best_gt = Some(gi);
                }
            }
            if best >= ANCHOR_POS_IOU {
                positives.push((gy, gx, best_gt.unwrap()));
            } else if best < ANCHOR_NEG_IOU {
                negatives.push((gy, gx));
            }
        }
    }

    // objectness: positives and negatives get equal total weight so the
    // handful of positive anchors is not drowned out
    let n_pos = positives.len();
    let n_neg = negatives.len();
    let (w_pos, w_neg) = if n_pos > 0 {
        (0.5 / n_pos as f64, 0.5 / n_neg.max(1) as f64)
    } else {
        (0.0, 1.0 / n_neg.max(1) as f64)
    };
    for &(gy, gx, _) in &positives {
        let (l, g) = bce_with_logit(base.obj_logits.at3(0, gy, gx), 1.0);
        parts.objectness += w_pos * l;
        let idx = d_obj.idx3(0, gy, gx);
        d_obj.data_mut()[idx] += w_pos * g;
    }
    for &(gy, gx) in &negatives {
        let (l, g) = bce_with_logit(base.obj_logits.at3(0, gy, gx), 0.0);
        parts.objectness += w_neg * l;
        let idx = d_obj.idx3(0, gy, gx);
        d_obj.data_mut()[idx] += w_neg * g;
    }

    // anchor-box regression on positives
    if n_pos > 0 {
        let norm = 1.0 / (4 * n_pos) as f64;
        for &(gy, gx, gi) in &positives {
            let target = encode_deltas(&anchor_box(gy, gx), &annotations[gi].bbox);
            for comp in 0..4 {
                let pred = base.box_deltas.at3(comp, gy, gx);
                let (l, g) = smooth_l1(pred - target[comp]);
                parts.rpn_reg += norm * l;
                let idx = d_box.idx3(comp, gy, gx);
                d_box.data_mut()[idx] += norm * g;
            }
        }
    }

    // head classification and regression
    let r = head.rois.len();
    let n = num_classes;
    let mut d_cls = Tensor::zeros_like(&head.cls_logits);
    let mut d_reg = Tensor::zeros_like(&head.reg_out);
    if r > 0 {
        let mut fg: Vec<(usize, usize)> = Vec::new(); // (roi, gt)
        let mut labels = vec![0usize; r];
        for (i, roi) in head.rois.iter().enumerate() {
            let mut best = 0.0;
            let mut best_gt = None;
            for (gi, ann) in annotations.iter().enumerate() {
                let v = iou(roi, &ann.bbox)?;
                if v > best {
                    best = v;
                    best_gt = Some(gi);
                }
            }
            if best >= ROI_FG_IOU {
                let gi = best_gt.unwrap();
                labels[i] = annotations[gi].class_id + 1;
                fg.push((i, gi));
            }
        }
        let inv_r = 1.0 / r as f64;
        for i in 0..r {
            let row = &head.cls_logits.data()[i * (n + 1)..(i + 1) * (n + 1)];
            let (l, _, g) = softmax_cross_entropy(row, labels[i]);
            parts.cls += inv_r * l;
            for (j, gj) in g.iter().enumerate() {
                d_cls.data_mut()[i * (n + 1) + j] += inv_r * gj;
            }
        }
        if !fg.is_empty() {
            let norm = 1.0 / (4 * fg.len()) as f64;
            for &(i, gi) in &fg {
                let cls = annotations[gi].class_id;
                let target = encode_deltas(&head.rois[i], &annotations[gi].bbox);
                for comp in 0..4 {
                    let slot = i * 4 * n + 4 * cls + comp;
                    let (l, g) = smooth_l1(head.reg_out.data()[slot] - target[comp]);
                    parts.head_reg += norm * l;
                    d_reg.data_mut()[slot] += norm * g;
                }
            }
        }
    }

    parts.total = parts.objectness + parts.rpn_reg + parts.cls + parts.head_reg;
    Ok((
        parts,
        FrcnnGrads {
            d_obj,
            d_box,
            d_cls,
            d_reg,
        },
    ))
}

/// Backpropagate head/RPN/feature gradients into parameter gradients.
///
/// `d_feature_extra` carries gradients that attack the post-SE feature
/// directly (the correlation distillation terms); `d_cls`/`d_reg` cover
/// both the detection loss and output distillation. Proposal coordinates
/// are treated as constants, as in standard two-stage training.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    params: &DetectorParams,
    base: &BaseForward,
    head: &HeadForward,
    d_cls: &Tensor,
    d_reg: &Tensor,
    d_obj: &Tensor,
    d_box: &Tensor,
    d_feature_extra: Option<&Tensor>,
    grads: &mut ParamSet,
) {
    let set = &params.set;
    let n = params.num_classes;
    let mut d_feature = Tensor::zeros_like(&base.feature);

    // head
    for i in 0..head.rois.len() {
        let d_cls_row = &d_cls.data()[i * (n + 1)..(i + 1) * (n + 1)];
        let d_reg_row = &d_reg.data()[i * 4 * n..(i + 1) * 4 * n];
        let mut d_hidden =
            dense_backward(&head.hidden[i], &set.cls_w, d_cls_row, &mut grads.cls_w, &mut grads.cls_b);
        let d_hidden_reg =
            dense_backward(&head.hidden[i], &set.reg_w, d_reg_row, &mut grads.reg_w, &mut grads.reg_b);
        for (a, b) in d_hidden.iter_mut().zip(d_hidden_reg) {
            *a += b;
        }
        for (g, pre) in d_hidden.iter_mut().zip(&head.hidden_pre[i]) {
            if *pre <= 0.0 {
                *g = 0.0;
            }
        }
        let d_flat = dense_backward(
            head.pooled[i].data(),
            &set.roi_w,
            &d_hidden,
            &mut grads.roi_w,
            &mut grads.roi_b,
        );
        let d_pool = Tensor::new(head.pooled[i].shape().to_vec(), d_flat)
            .expect("pool gradient shape");
        roi_pool_backward(&head.pool_argmax[i], &d_pool, &mut d_feature);
    }

    // RPN heads (1×1 convs on the feature)
    let d_from_obj = conv2d_backward(
        &base.feature,
        &set.obj_w,
        1,
        0,
        d_obj,
        &mut grads.obj_w,
        &mut grads.obj_b,
    );
    let d_from_box = conv2d_backward(
        &base.feature,
        &set.box_w,
        1,
        0,
        d_box,
        &mut grads.box_w,
        &mut grads.box_b,
    );
    d_feature.axpy(1.0, &d_from_obj).expect("shape");
    d_feature.axpy(1.0, &d_from_box).expect("shape");
    if let Some(extra) = d_feature_extra {
        d_feature.axpy(1.0, extra).expect("shape");
    }

    // SE block: feature = v ⊙ rpn_post
    let (c, h, w) = (FEAT_CHANNELS, FEAT_SIZE, FEAT_SIZE);
    let hw = (h * w) as f64;
    let mut d_rr = Tensor::zeros_like(&base.rpn_post);
    let mut d_v = vec![0.0; c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let idx = d_feature.idx3(ch, y, x);
                let g = d_feature.data()[idx];
                d_rr.data_mut()[idx] = g * base.se.v[ch];
                d_v[ch] += g * base.rpn_post.data()[idx];
            }
        }
    }
    let hidden_dim = FEAT_CHANNELS / SE_REDUCTION;
    let mut d_z2 = vec![0.0; c];
    for ch in 0..c {
        let v = base.se.v[ch];
        d_z2[ch] = d_v[ch] * v * (1.0 - v);
    }
    let mut d_h = vec![0.0; hidden_dim];
    for ch in 0..c {
        grads.se_b2.data_mut()[ch] += d_z2[ch];
        for j in 0..hidden_dim {
            let wi = ch * hidden_dim + j;
            grads.se_w2.data_mut()[wi] += d_z2[ch] * base.se.hidden[j];
            d_h[j] += set.se_w2.data()[wi] * d_z2[ch];
        }
    }
    let mut d_z1 = vec![0.0; hidden_dim];
    for j in 0..hidden_dim {
        d_z1[j] = if base.se.hidden_pre[j] > 0.0 { d_h[j] } else { 0.0 };
    }
    let mut d_squeeze = vec![0.0; c];
    for j in 0..hidden_dim {
        grads.se_b1.data_mut()[j] += d_z1[j];
        for ch in 0..c {
            let wi = j * c + ch;
            grads.se_w1.data_mut()[wi] += d_z1[j] * base.se.squeeze[ch];
            d_squeeze[ch] += set.se_w1.data()[wi] * d_z1[j];
        }
    }
    for ch in 0..c {
        let spread = d_squeeze[ch] / hw;
        for y in 0..h {
            for x in 0..w {
                let idx = d_rr.idx3(ch, y, x);
                d_rr.data_mut()[idx] += spread;
            }
        }
    }

    // RPN conv and backbone
    let d_rpn_pre = relu_backward(&base.rpn_pre, &d_rr);
    let d_c2 = conv2d_backward(
        &base.c2,
        &set.rpn_w,
        1,
        1,
        &d_rpn_pre,
        &mut grads.rpn_w,
        &mut grads.rpn_b,
    );
    let d_c2_pre = relu_backward(&base.c2_pre, &d_c2);
    let d_c1 = conv2d_backward(
        &base.c1,
        &set.conv2_w,
        2,
        1,
        &d_c2_pre,
        &mut grads.conv2_w,
        &mut grads.conv2_b,
    );
    let d_c1_pre = relu_backward(&base.c1_pre, &d_c1);
    let _ = conv2d_backward(
        &base.image,
        &set.conv1_w,
        2,
        1,
        &d_c1_pre,
        &mut grads.conv1_w,
        &mut grads.conv1_b,
    );
}

/// Run detection: softmax scores, background dropped, confidence gate,
/// per-class greedy NMS (discard on IoU > `nms_iou`, ties to the lower
/// box index).
pub fn detect(
    params: &DetectorParams,
    image: &Tensor,
    conf: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let base = forward_base(params, image)?;
    let head = forward_head(params, &base.feature, &base.proposals)?;
    let n = params.num_classes;
    let mut out = Vec::new();
    for class in 0..n {
        let mut cands: Vec<(f64, BBox)> = Vec::new();
        for i in 0..head.rois.len() {
            let row = &head.cls_logits.data()[i * (n + 1)..(i + 1) * (n + 1)];
            let probs = softmax(row);
            let score = probs[class + 1];
            if score < conf {
                continue;
            }
            let reg_row = &head.reg_out.data()[i * 4 * n..(i + 1) * 4 * n];
            let deltas = [
                reg_row[4 * class],
                reg_row[4 * class + 1],
                reg_row[4 * class + 2],
                reg_row[4 * class + 3],
            ];
            let decoded = decode_deltas(&head.rois[i], &deltas).clip(IMAGE_SIZE as f64);
            if decoded.is_valid() {
                cands.push((score, decoded));
            }
        }
        // stable by descending score: equal scores keep lower index first
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| cands[b].0.partial_cmp(&cands[a].0).unwrap().then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        'cand: for &i in &order {
            for &k in &kept {
                if iou(&cands[i].1, &cands[k].1)? > nms_iou {
                    continue 'cand;
                }
            }
            kept.push(i);
        }
        for &i in &kept {
            out.push(Detection {
                bbox: cands[i].1,
                class_id: class,
                score: cands[i].0,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// checkpoint file format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    num_classes: usize,
    class_names: Vec<String>,
    seed: u64,
    params: BTreeMap<String, TensorRecord>,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Serialize to the checkpoint JSON format. serde_json prints the
/// shortest decimal that round-trips each f64, so save → load is
/// bit-exact.
pub fn checkpoint_to_string(params: &DetectorParams) -> String {
    let mut map = BTreeMap::new();
    for (name, t) in params.set.named() {
        map.insert(
            name.to_string(),
            TensorRecord {
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            },
        );
    }
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        num_classes: params.num_classes,
        class_names: params.class_names.clone(),
        seed: params.seed,
        params: map,
    };
    serde_json::to_string(&file).expect("checkpoint serialization")
}

pub fn save_checkpoint(params: &DetectorParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params))?;
    Ok(())
}

pub fn checkpoint_from_str(text: &str) -> Result<DetectorParams> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::format(format!("checkpoint: {e}")))?;
    if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint schema version {}",
            file.schema_version
        )));
    }
    if file.class_names.len() != file.num_classes {
        return Err(Error::format("class_names length != num_classes"));
    }
    let mut template = DetectorParams::init(&file.class_names, file.seed)?;
    for (name, tensor) in template.set.named_mut() {
        let rec = file
            .params
            .get(name)
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}")))?;
        if rec.shape != tensor.shape() {
            return Err(Error::format(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                rec.shape,
                tensor.shape()
            )));
        }
        *tensor = Tensor::new(rec.shape.clone(), rec.values.clone())?;
    }
    if file.params.len() != template.set.named().len() {
        return Err(Error::format("checkpoint contains unknown tensors"));
    }
    Ok(template)
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorParams> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    fn random_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], |_| {
            rng.gen_range(0.0..1.0)
        })
    }

    #[test]
    fn forward_is_deterministic() {
        let params = DetectorParams::init(&names(3), 9).unwrap();
        let image = random_image(1);
        let (b1, p1, c1, r1) = forward(&params, &image).unwrap();
        let (b2, p2, c2, r2) = forward(&params, &image).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(c1, c2);
        assert_eq!(r1, r2);
        assert_eq!(b1.image_feature, b2.image_feature);
    }

    #[test]
    fn zero_weights_yield_zero_proposals() {
        let mut params = DetectorParams::init(&names(2), 0).unwrap();
        params.set = params.set.zeros_like();
        let image = random_image(2);
        let (_, proposals, cls, _) = forward(&params, &image).unwrap();
        assert!(proposals.is_empty());
        assert_eq!(cls.shape()[0], 0);
    }

    #[test]
    fn cls_rows_match_proposal_count() {
        let params = DetectorParams::init(&names(4), 11).unwrap();
        let image = random_image(3);
        let (_, proposals, cls, reg) = forward(&params, &image).unwrap();
        assert_eq!(cls.shape(), [proposals.len(), 5]);
        assert_eq!(reg.shape(), [proposals.len(), 16]);
    }

    #[test]
    fn roi_pool_constant_feature() {
        let f = Tensor::from_fn(vec![2, 4, 4], |_| 3.25);
        let (pool, _) = roi_pool(&f, &BBox::new(0.0, 0.0, 16.0, 16.0), 4, 2, 2).unwrap();
        assert!(pool.data().iter().all(|v| *v == 3.25));
    }

    #[test]
    fn roi_pool_whole_image_global_max() {
        let mut f = Tensor::from_fn(vec![1, 4, 4], |i| i as f64 * 0.1);
        let idx = f.idx3(0, 2, 1);
        f.data_mut()[idx] = 9.0;
        let (pool, _) = roi_pool(&f, &BBox::new(0.0, 0.0, 16.0, 16.0), 4, 1, 1).unwrap();
        assert_eq!(pool.data(), &[9.0]);
    }

    #[test]
    fn roi_pool_iota_hand_case() {
        let f = Tensor::from_fn(vec![1, 4, 4], |i| i as f64);
        let (pool, argmax) = roi_pool(&f, &BBox::new(0.0, 0.0, 16.0, 16.0), 4, 2, 2).unwrap();
        assert_eq!(pool.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(argmax, vec![5, 7, 13, 15]);
    }

    #[test]
    fn roi_pool_rejects_degenerate_box() {
        let f = Tensor::zeros(vec![1, 4, 4]);
        assert!(roi_pool(&f, &BBox::new(-5.0, -5.0, -1.0, -1.0), 4, 2, 2).is_err());
    }

    #[test]
    fn roi_pool_never_exceeds_channel_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            // feature extent is 4·4 = 16 image pixels
            let f = Tensor::from_fn(vec![3, 4, 4], |_| rng.gen_range(-2.0..2.0));
            let x1 = rng.gen_range(0.0..10.0);
            let y1 = rng.gen_range(0.0..10.0);
            let bbox = BBox::new(x1, y1, x1 + rng.gen_range(2.0..6.0), y1 + rng.gen_range(2.0..6.0));
            let (pool, _) = roi_pool(&f, &bbox, 4, 2, 2).unwrap();
            for c in 0..3 {
                let cmax = f.data()[c * 16..(c + 1) * 16]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                for by in 0..2 {
                    for bx in 0..2 {
                        assert!(pool.at3(c, by, bx) <= cmax + 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn frcnn_loss_no_objects_is_negative_bce_only() {
        let params = DetectorParams::init(&names(2), 3).unwrap();
        let image = random_image(4);
        let base = forward_base(&params, &image).unwrap();
        let head = forward_head(&params, &base.feature, &base.proposals).unwrap();
        let (parts, _) = frcnn_loss(&base, &head, &[], 2).unwrap();
        assert_eq!(parts.rpn_reg, 0.0);
        assert_eq!(parts.head_reg, 0.0);
        assert!(parts.objectness > 0.0);
        // head rois all label background; cls term is still defined
        assert!(parts.cls >= 0.0);
    }

    #[test]
    fn detect_nms_suppresses_duplicates_and_keeps_disjoint() {
        // Synthetic candidates run through the same NMS rule detect uses:
        // exercised through detect() on a trained-ish scenario is slow, so
        // check the rule directly on hand data via a private replica.
        let a = BBox::new(10.0, 10.0, 20.0, 20.0);
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        let c = BBox::new(40.0, 40.0, 50.0, 50.0);
        let cands = [(0.9, a), (0.8, b), (0.7, c)];
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&x, &y| cands[y].0.partial_cmp(&cands[x].0).unwrap().then(x.cmp(&y)));
        let mut kept: Vec<usize> = Vec::new();
        'cand: for &i in &order {
            for &k in &kept {
                if iou(&cands[i].1, &cands[k].1).unwrap() > 0.3 {
                    continue 'cand;
                }
            }
            kept.push(i);
        }
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn class_expansion_preserves_old_logits_bitwise() {
        let old = DetectorParams::init(&names(3), 21).unwrap();
        let grown = old.expand_classes(&["extra0".into(), "extra1".into()], 99).unwrap();
        assert_eq!(grown.num_classes, 5);
        let image = random_image(6);
        let base_old = forward_base(&old, &image).unwrap();
        let base_new = forward_base(&grown, &image).unwrap();
        assert_eq!(base_old.proposals, base_new.proposals);
        let rois = vec![BBox::new(8.0, 8.0, 30.0, 30.0), BBox::new(20.0, 12.0, 60.0, 50.0)];
        let h_old = forward_head(&old, &base_old.feature, &rois).unwrap();
        let h_new = forward_head(&grown, &base_new.feature, &rois).unwrap();
        for i in 0..rois.len() {
            for j in 0..4 {
                // background + 3 old classes
                assert_eq!(
                    h_old.cls_logits.at2(i, j).to_bits(),
                    h_new.cls_logits.at2(i, j).to_bits()
                );
            }
            for j in 0..12 {
                assert_eq!(
                    h_old.reg_out.at2(i, j).to_bits(),
                    h_new.reg_out.at2(i, j).to_bits()
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params = DetectorParams::init(&names(4), 77).unwrap();
        let text = checkpoint_to_string(&params);
        let loaded = checkpoint_from_str(&text).unwrap();
        assert_eq!(params, loaded);
        let text2 = checkpoint_to_string(&loaded);
        assert_eq!(text, text2);
    }

    #[test]
    fn checkpoint_rejects_unknown_schema() {
        let params = DetectorParams::init(&names(1), 1).unwrap();
        let text = checkpoint_to_string(&params).replace("\"schema_version\":1", "\"schema_version\":9");
        assert!(checkpoint_from_str(&text).is_err());
    }

    /// End-to-end gradient check of the training loss against finite
    /// differences. The head runs on a fixed RoI set: proposal
    /// coordinates are non-differentiated by design (standard two-stage
    /// detachment), so letting them vary would make finite differences
    /// measure a path backprop intentionally ignores.
    #[test]
    fn network_gradients_match_finite_differences() {
        use crate::tensor::FD_STEP;
        let class_names = names(2);
        let params = DetectorParams::init(&class_names, 31).unwrap();
        let image = random_image(8);
        let annotations = vec![
            Annotation {
                class_id: 0,
                bbox: BBox::new(10.0, 12.0, 28.0, 30.0),
            },
            Annotation {
                class_id: 1,
                bbox: BBox::new(36.0, 34.0, 52.0, 54.0),
            },
        ];
        let mut rois: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();
        rois.push(BBox::new(2.0, 40.0, 20.0, 60.0)); // a background roi

        let loss_of = |p: &DetectorParams| -> f64 {
            let base = forward_base(p, &image).unwrap();
            let head = forward_head(p, &base.feature, &rois).unwrap();
            frcnn_loss(&base, &head, &annotations, 2).unwrap().0.total
        };

        let base = forward_base(&params, &image).unwrap();
        let head = forward_head(&params, &base.feature, &rois).unwrap();
        let (_, fg) = frcnn_loss(&base, &head, &annotations, 2).unwrap();
        let mut grads = params.set.zeros_like();
        backward(
            &params, &base, &head, &fg.d_cls, &fg.d_reg, &fg.d_obj, &fg.d_box, None, &mut grads,
        );

        let mut checked = 0;
        let mut mismatches = Vec::new();
        for (name, g) in grads.named() {
            let probes = [0usize, g.numel() / 3, g.numel() / 2, g.numel().saturating_sub(1)];
            for &pi in probes.iter() {
                if pi >= g.numel() {
                    continue;
                }
                let mut plus = params.clone();
                let mut minus = params.clone();
                for (n2, t) in plus.set.named_mut() {
                    if n2 == name {
                        t.data_mut()[pi] += FD_STEP;
                    }
                }
                for (n2, t) in minus.set.named_mut() {
                    if n2 == name {
                        t.data_mut()[pi] -= FD_STEP;
                    }
                }
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP);
                let an = g.data()[pi];
                checked += 1;
                let scale = an.abs().max(fd.abs()).max(1.0);
                if (an - fd).abs() / scale >= 1e-4 {
                    mismatches.push(format!("{name}[{pi}]: analytic {an:.8} vs fd {fd:.8}"));
                }
            }
        }
        assert!(checked >= 60, "expected to probe many parameters");
        assert!(
            mismatches.is_empty(),
            "gradient probes disagree with finite differences:\n{}",
            mismatches.join("\n")
        );
    }
}
