//! Dual-network incremental training: a frozen old detector teaches an
//! incremental detector on new-class data through pseudo-labels, output
//! distillation, and the three correlation distillation losses, while
//! the standard detection loss drives new-class learning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{select_important_channels, select_points, spatial_attention};
use crate::datagen::Dataset;
use crate::distill::{
    channel_correlation_loss, instance_correlation_loss, output_distillation_loss,
    point_correlation_loss,
};
use crate::evalkit::{DETECT_CONF, DETECT_NMS_IOU};
use crate::microdet::{
    backward, detect, forward_base, forward_head, frcnn_loss, roi_pool, roi_pool_backward,
    Annotation, DetectorParams, ParamSet, ROI_SIZE, STRIDE,
};
use crate::rngutil::mix_seed;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Channel-importance threshold on the min-max-normalized attention
/// vector.
pub const CHANNEL_TAU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_old: usize,
    pub epochs_incr: usize,
    pub lr_old: f64,
    pub lr_incr: f64,
    /// Learning rate decays by `lr_gamma` every this many epochs.
    pub lr_decay_every: usize,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub lambda: f64,
    /// Patch grid for the instance-wise loss.
    pub k: usize,
    pub theta_high: f64,
    pub theta_low: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_old: 30,
            epochs_incr: 15,
            lr_old: 0.01,
            // 1e-3 destabilizes the unnormalized point-wise loss at this
            // scale; 3e-4 trains every term to convergence
            lr_incr: 0.0003,
            lr_decay_every: 10,
            lr_gamma: 0.1,
            momentum: 0.9,
            lambda: 1.0,
            k: 2,
            theta_high: 0.8,
            theta_low: 0.1,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_old == 0 || self.epochs_incr == 0 {
            return Err(Error::invalid("epoch counts must be positive"));
        }
        if self.lr_old <= 0.0 || self.lr_incr <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.lr_decay_every == 0 || !(0.0..=1.0).contains(&self.lr_gamma) {
            return Err(Error::invalid("invalid learning-rate schedule"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be ≥ 0"));
        }
        if self.k == 0 || ROI_SIZE % self.k != 0 {
            return Err(Error::invalid(format!(
                "k must divide the {ROI_SIZE}×{ROI_SIZE} pooled feature"
            )));
        }
        if !(0.0..=1.0).contains(&self.theta_low)
            || !(0.0..=1.0).contains(&self.theta_high)
            || self.theta_low >= self.theta_high
        {
            return Err(Error::invalid("need 0 ≤ θ_low < θ_high ≤ 1"));
        }
        Ok(())
    }
}

/// Which teacher-guidance terms are active. Everything on is the full
/// method; everything off (pseudo-labels included) is the fine-tuning
/// collapse baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub dcc: bool,
    pub dpc: bool,
    pub dic: bool,
    pub dout: bool,
    pub pseudo_labels: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            dcc: true,
            dpc: true,
            dic: true,
            dout: true,
            pseudo_labels: true,
        }
    }
}

impl LossSwitches {
    pub fn fine_tuning() -> Self {
        LossSwitches {
            dcc: false,
            dpc: false,
            dic: false,
            dout: false,
            pseudo_labels: false,
        }
    }
}

/// One epoch of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_frcnn: f64,
    pub mean_dout: f64,
    pub mean_dcc: f64,
    pub mean_dpc: f64,
    pub mean_dic: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: DetectorParams,
    pub log: Vec<EpochRecord>,
}

pub fn epoch_log_jsonl(log: &[EpochRecord]) -> String {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec).expect("epoch record"));
        out.push('\n');
    }
    out
}

/// Learning rate for a 1-based epoch: `base · gamma^((epoch−1) / every)`.
pub fn lr_for_epoch(base: f64, epoch: usize, decay_every: usize, gamma: f64) -> f64 {
    base * gamma.powi(((epoch - 1) / decay_every) as i32)
}

/// Classic momentum update on one tensor: `m ← μm + g`, `p ← p − lr·m`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    state: &mut Tensor,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.shape() {
        return Err(Error::invalid("sgd_step shape mismatch"));
    }
    for ((p, g), m) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.data_mut())
    {
        *m = momentum * *m + g;
        *p -= lr * *m;
    }
    Ok(())
}

fn sgd_step_set(
    params: &mut ParamSet,
    grads: &ParamSet,
    lr: f64,
    momentum: f64,
    state: &mut ParamSet,
) -> Result<()> {
    for (((_, p), (_, g)), (_, m)) in params
        .named_mut()
        .into_iter()
        .zip(grads.named())
        .zip(state.named_mut())
    {
        sgd_step(p, g, lr, momentum, m)?;
    }
    Ok(())
}

/// Map dataset-global class ids onto a model's class list by name.
fn map_annotations(
    dataset: &Dataset,
    model_classes: &[String],
    context: &str,
) -> Result<Vec<Vec<Annotation>>> {
    let mut lookup = vec![None; dataset.class_names.len()];
    for (gid, name) in dataset.class_names.iter().enumerate() {
        lookup[gid] = model_classes.iter().position(|m| m == name);
    }
    dataset
        .annotations
        .iter()
        .map(|anns| {
            anns.iter()
                .map(|a| {
                    lookup[a.class_id]
                        .map(|class_id| Annotation {
                            class_id,
                            bbox: a.bbox,
                        })
                        .ok_or_else(|| {
                            Error::invalid(format!(
                                "{context}: annotation class {} not in model class list",
                                dataset.class_names[a.class_id]
                            ))
                        })
                })
                .collect()
        })
        .collect()
}

/// Run the frozen old model on an image and splice its confident
/// detections in as old-class ground truth next to the new-class labels.
pub fn pseudo_label_merge(
    old: &DetectorParams,
    image: &Tensor,
    gt_new: &[Annotation],
) -> Result<Vec<Annotation>> {
    debug_assert!(
        gt_new.iter().all(|a| a.class_id >= old.num_classes),
        "gt_new must contain only new-class labels"
    );
    let mut merged = gt_new.to_vec();
    for det in detect(old, image, DETECT_CONF, DETECT_NMS_IOU)? {
        merged.push(Annotation {
            class_id: det.class_id,
            bbox: det.bbox,
        });
    }
    Ok(merged)
}

/// One optimizer step on a single image; shared by old-model training
/// (`old_model` = None) and incremental training.
struct StepLosses {
    frcnn: f64,
    dout: f64,
    dcc: f64,
    dpc: f64,
    dic: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &DetectorParams,
    old_model: Option<&DetectorParams>,
    image: &Tensor,
    annotations: &[Annotation],
    cfg: &TrainConfig,
    switches: &LossSwitches,
    grads: &mut ParamSet,
) -> Result<StepLosses> {
    let base = forward_base(params, image)?;
    let mut rois: Vec<_> = annotations.iter().map(|a| a.bbox).collect();
    rois.extend(base.proposals.iter().cloned());
    let head = forward_head(params, &base.feature, &rois)?;
    let (parts, fg) = frcnn_loss(&base, &head, annotations, params.num_classes)?;

    let mut losses = StepLosses {
        frcnn: parts.total,
        dout: 0.0,
        dcc: 0.0,
        dpc: 0.0,
        dic: 0.0,
    };
    let mut d_cls = fg.d_cls;
    let mut d_reg = fg.d_reg;
    let mut d_feature_extra: Option<Tensor> = None;

    if let Some(old) = old_model {
        let base_old = forward_base(old, image)?;
        let n_old = old.num_classes;
        let r = rois.len();

        if switches.dout && r > 0 {
            let head_old = forward_head(old, &base_old.feature, &rois)?;
            // old-model output slices: background + old classes, and the
            // old-class regression block
            let mut cls_slice = Tensor::zeros(vec![r, n_old + 1]);
            let mut reg_slice = Tensor::zeros(vec![r, 4 * n_old]);
            for i in 0..r {
                for j in 0..=n_old {
                    let idx = cls_slice.idx2(i, j);
                    cls_slice.data_mut()[idx] = head.cls_logits.at2(i, j);
                }
                for j in 0..4 * n_old {
                    let idx = reg_slice.idx2(i, j);
                    reg_slice.data_mut()[idx] = head.reg_out.at2(i, j);
                }
            }
            let out = output_distillation_loss(
                &cls_slice,
                &head_old.cls_logits,
                &reg_slice,
                &head_old.reg_out,
            )?;
            losses.dout = out.value;
            for i in 0..r {
                for j in 0..=n_old {
                    let idx = d_cls.idx2(i, j);
                    d_cls.data_mut()[idx] += out.grad_cls.at2(i, j);
                }
                for j in 0..4 * n_old {
                    let idx = d_reg.idx2(i, j);
                    d_reg.data_mut()[idx] += out.grad_reg.at2(i, j);
                }
            }
        }

        if switches.dcc || switches.dpc || switches.dic {
            let mut extra = Tensor::zeros_like(&base.feature);
            if switches.dcc {
                // per-image channel selection from the old model's SE vector
                let idx = select_important_channels(&base_old.v, CHANNEL_TAU)?;
                let r = channel_correlation_loss(&base.feature, &base_old.feature, &idx)?;
                losses.dcc = r.value;
                extra.axpy(cfg.lambda, &r.grad)?;
            }
            if switches.dpc {
                let att = spatial_attention(&base_old.feature)?;
                let sel = select_points(&att, cfg.theta_high, cfg.theta_low)?;
                let r = point_correlation_loss(&base.feature, &base_old.feature, &sel)?;
                losses.dpc = r.value;
                extra.axpy(cfg.lambda, &r.grad)?;
            }
            if switches.dic && !annotations.is_empty() {
                let inv = 1.0 / annotations.len() as f64;
                for ann in annotations {
                    let (pool, argmax) =
                        roi_pool(&base.feature, &ann.bbox, STRIDE, ROI_SIZE, ROI_SIZE)?;
                    let (pool_old, _) =
                        roi_pool(&base_old.feature, &ann.bbox, STRIDE, ROI_SIZE, ROI_SIZE)?;
                    let r = instance_correlation_loss(&pool, &pool_old, cfg.k)?;
                    losses.dic += inv * r.value;
                    let mut scaled = r.grad;
                    scaled.scale(cfg.lambda * inv);
                    roi_pool_backward(&argmax, &scaled, &mut extra);
                }
            }
            d_feature_extra = Some(extra);
        }
    }

    backward(
        params,
        &base,
        &head,
        &d_cls,
        &d_reg,
        &fg.d_obj,
        &fg.d_box,
        d_feature_extra.as_ref(),
        grads,
    );
    Ok(losses)
}

fn run_epochs(
    mut params: DetectorParams,
    old_model: Option<&DetectorParams>,
    images: &[Tensor],
    annotations: &[Vec<Annotation>],
    cfg: &TrainConfig,
    switches: &LossSwitches,
    epochs: usize,
    base_lr: f64,
) -> Result<TrainOutput> {
    let n = images.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x50FF1E));
    let mut state = params.set.zeros_like();
    let mut log = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=epochs {
        let lr = lr_for_epoch(base_lr, epoch, cfg.lr_decay_every, cfg.lr_gamma);
        order.shuffle(&mut rng);
        let mut sums = StepLosses {
            frcnn: 0.0,
            dout: 0.0,
            dcc: 0.0,
            dpc: 0.0,
            dic: 0.0,
        };
        for &i in &order {
            let mut grads = params.set.zeros_like();
            let step = train_step(
                &params,
                old_model,
                &images[i],
                &annotations[i],
                cfg,
                switches,
                &mut grads,
            )?;
            sgd_step_set(&mut params.set, &grads, lr, cfg.momentum, &mut state)?;
            sums.frcnn += step.frcnn;
            sums.dout += step.dout;
            sums.dcc += step.dcc;
            sums.dpc += step.dpc;
            sums.dic += step.dic;
        }
        let inv = 1.0 / n as f64;
        let record = EpochRecord {
            epoch,
            mean_frcnn: sums.frcnn * inv,
            mean_dout: sums.dout * inv,
            mean_dcc: sums.dcc * inv,
            mean_dpc: sums.dpc * inv,
            mean_dic: sums.dic * inv,
            lr,
        };
        if !record.mean_frcnn.is_finite() {
            return Err(Error::numeric(format!(
                "training diverged at epoch {epoch}"
            )));
        }
        log.push(record);
    }
    Ok(TrainOutput { params, log })
}

/// Train the initial detector on old-class data with SGD + momentum.
pub fn train_old(
    dataset: &Dataset,
    classes_old: &[String],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train_old: empty dataset"));
    }
    let annotations = map_annotations(dataset, classes_old, "train_old")?;
    let params = DetectorParams::init(classes_old, cfg.seed)?;
    run_epochs(
        params,
        None,
        &dataset.images,
        &annotations,
        cfg,
        &LossSwitches::fine_tuning(),
        cfg.epochs_old,
        cfg.lr_old,
    )
}

/// Adapt a frozen old model to the full class list on new-class data.
///
/// Per image: pseudo-labels from the old model are merged with the
/// new-class ground truth, selection sets (important channels, high/low
/// points) are recomputed from the old model's post-SE feature, and the
/// total loss `L_frcnn + D_out + λ(D_cc + D_pc + D_ic)` drives updates
/// of the incremental parameters only.
pub fn train_incremental(
    old: &DetectorParams,
    dataset_new: &Dataset,
    classes_all: &[String],
    cfg: &TrainConfig,
    switches: &LossSwitches,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset_new.is_empty() {
        return Err(Error::invalid("train_incremental: empty dataset"));
    }
    for name in &old.class_names {
        if !classes_all.contains(name) {
            return Err(Error::invalid(format!(
                "classes_all is missing old class {name}"
            )));
        }
    }
    let new_names: Vec<String> = classes_all
        .iter()
        .filter(|n| !old.class_names.contains(n))
        .cloned()
        .collect();
    let incremental = old.expand_classes(&new_names, cfg.seed)?;

    let gt_new = map_annotations(dataset_new, &incremental.class_names, "train_incremental")?;
    // the teacher is frozen, so its pseudo-labels are the same every
    // epoch; compute them once
    let merged: Vec<Vec<Annotation>> = if switches.pseudo_labels {
        dataset_new
            .images
            .iter()
            .zip(&gt_new)
            .map(|(image, gt)| pseudo_label_merge(old, image, gt))
            .collect::<Result<_>>()?
    } else {
        gt_new
    };
    run_epochs(
        incremental,
        Some(old),
        &dataset_new.images,
        &merged,
        cfg,
        switches,
        cfg.epochs_incr,
        cfg.lr_incr,
    )
}
