//! Detection evaluation: greedy matching, per-class average precision
//! (all-point interpolation), mAP, and the Stability/Plasticity/SPmAP
//! metric for incremental detectors. Works on in-process results or on
//! JSON/CSV result files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::datagen::Dataset;
use crate::microdet::{detect, DetectorParams};
use crate::{Error, Result};

pub use crate::boxes::iou;

/// Detection confidence gate and NMS IoU used throughout evaluation and
/// pseudo-labeling.
pub const DETECT_CONF: f64 = 0.5;
pub const DETECT_NMS_IOU: f64 = 0.3;

/// One scored detection for a single class.
#[derive(Debug, Clone)]
pub struct ScoredBox {
    pub image_id: u64,
    pub score: f64,
    pub bbox: BBox,
}

/// Average precision for one class at an IoU threshold.
///
/// Detections are visited in descending score (ties keep submission
/// order); each matches at most one still-unmatched ground truth of its
/// image, preferring highest IoU then lowest index. AP integrates the
/// precision envelope over recall (all-point interpolation). No ground
/// truth means AP 0 by definition.
pub fn average_precision(dets: &[ScoredBox], gts: &[(u64, BBox)], iou_thr: f64) -> Result<f64> {
    let n_gt = gts.len();
    if n_gt == 0 {
        return Ok(0.0);
    }
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, (img, _)) in gts.iter().enumerate() {
        by_image.entry(*img).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; n_gt];
    let mut tp = vec![false; order.len()];
    for (rank, &di) in order.iter().enumerate() {
        let det = &dets[di];
        let mut best_iou = 0.0;
        let mut best_gt = None;
        if let Some(cands) = by_image.get(&det.image_id) {
            for &gi in cands {
                if matched[gi] {
                    continue;
                }
                let v = iou(&det.bbox, &gts[gi].1)?;
                if v > best_iou {
                    best_iou = v;
                    best_gt = Some(gi);
                }
            }
        }
        if best_iou >= iou_thr {
            if let Some(gi) = best_gt {
                matched[gi] = true;
                tp[rank] = true;
            }
        }
    }
    // precision/recall curve with right-to-left precision envelope
    let mut precisions = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    let mut tp_cum = 0usize;
    for (rank, hit) in tp.iter().enumerate() {
        if *hit {
            tp_cum += 1;
        }
        precisions.push(tp_cum as f64 / (rank + 1) as f64);
        recalls.push(tp_cum as f64 / n_gt as f64);
    }
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..envelope.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * envelope[i];
            prev_recall = recalls[i];
        }
    }
    Ok(ap)
}

/// SPmAP and its components. Negative entries are legitimate: the
/// incremental model may beat the up-bound on a class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpmapComponents {
    pub stability: f64,
    pub plasticity: f64,
    pub map_dif: f64,
    pub spmap: f64,
}

/// `SPmAP = ((Stability + Plasticity)/2 + mAP_dif)/2`, where Stability
/// is the mean up-bound-minus-incremental AP gap over the first `n_old`
/// classes, Plasticity the mean gap over the rest, and mAP_dif the mean
/// over all. Scale-covariant: feed percent to get percent out.
pub fn spmap(up: &[f64], inc: &[f64], n_old: usize) -> Result<SpmapComponents> {
    if up.len() != inc.len() {
        return Err(Error::invalid(format!(
            "UP and INC lengths differ: {} vs {}",
            up.len(),
            inc.len()
        )));
    }
    if n_old < 1 || n_old >= up.len() {
        return Err(Error::invalid(format!(
            "need 1 ≤ n_old < n_classes, got n_old={n_old}, n={}",
            up.len()
        )));
    }
    let n = up.len();
    let diff: Vec<f64> = up.iter().zip(inc).map(|(u, i)| u - i).collect();
    let stability = diff[..n_old].iter().sum::<f64>() / n_old as f64;
    let plasticity = diff[n_old..].iter().sum::<f64>() / (n - n_old) as f64;
    let map_dif = diff.iter().sum::<f64>() / n as f64;
    Ok(SpmapComponents {
        stability,
        plasticity,
        map_dif,
        spmap: ((stability + plasticity) / 2.0 + map_dif) / 2.0,
    })
}

/// Evaluation report; mirrors the JSON report schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<String, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// "fraction" or "percent": the unit per_class_ap/mAP are stated in.
    pub units: String,
    pub stability: Option<f64>,
    pub plasticity: Option<f64>,
    pub map_dif: Option<f64>,
    pub spmap: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Optional CSV companion: `class,ap` rows in report units.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap\n");
        for (name, ap) in &self.per_class_ap {
            out.push_str(&format!("{name},{ap}\n"));
        }
        out
    }

    pub fn mean_ap_over(&self, classes: &[String]) -> f64 {
        if classes.is_empty() {
            return 0.0;
        }
        classes
            .iter()
            .map(|c| self.per_class_ap.get(c).copied().unwrap_or(0.0))
            .sum::<f64>()
            / classes.len() as f64
    }
}

/// Detection-results file row: `{image_id, class, box, score}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetRecord {
    pub image_id: u64,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Ground-truth file row: `{image_id, class, box}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub image_id: u64,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Per-class AP and mAP over explicit detection/ground-truth records.
pub fn evaluate_detections(
    dets: &[DetRecord],
    gts: &[GtRecord],
    classes: &[String],
    iou_thr: f64,
) -> Result<EvalReport> {
    let mut per_class_ap = BTreeMap::new();
    for class in classes {
        let class_dets: Vec<ScoredBox> = dets
            .iter()
            .filter(|d| &d.class == class)
            .map(|d| ScoredBox {
                image_id: d.image_id,
                score: d.score,
                bbox: BBox::from_array(d.bbox),
            })
            .collect();
        let class_gts: Vec<(u64, BBox)> = gts
            .iter()
            .filter(|g| &g.class == class)
            .map(|g| (g.image_id, BBox::from_array(g.bbox)))
            .collect();
        per_class_ap.insert(
            class.clone(),
            average_precision(&class_dets, &class_gts, iou_thr)?,
        );
    }
    let map = if classes.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / classes.len() as f64
    };
    Ok(EvalReport {
        per_class_ap,
        map,
        units: "fraction".into(),
        stability: None,
        plasticity: None,
        map_dif: None,
        spmap: None,
    })
}

/// Run the detector over a dataset and score it against the dataset's
/// annotations for the named classes (0.5 IoU, standard thresholds).
pub fn evaluate_model(
    params: &DetectorParams,
    dataset: &Dataset,
    classes: &[String],
) -> Result<EvalReport> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for i in 0..dataset.len() {
        let image_id = dataset.image_ids[i];
        for d in detect(params, &dataset.images[i], DETECT_CONF, DETECT_NMS_IOU)? {
            dets.push(DetRecord {
                image_id,
                class: params.class_names[d.class_id].clone(),
                bbox: d.bbox.to_array(),
                score: d.score,
            });
        }
        for a in &dataset.annotations[i] {
            gts.push(GtRecord {
                image_id,
                class: dataset.class_names[a.class_id].clone(),
                bbox: a.bbox.to_array(),
            });
        }
    }
    evaluate_detections(&dets, &gts, classes, 0.5)
}

/// One `class,up,inc` row of an AP table (percent).
#[derive(Debug, Clone, PartialEq)]
pub struct ApTableRow {
    pub class: String,
    pub up: f64,
    pub inc: f64,
}

pub fn read_ap_table(path: &Path) -> Result<Vec<ApTableRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::format(format!("ap table: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(format!("ap table: {e}")))?
        .clone();
    let expected = ["class", "up", "inc"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::format(format!(
            "ap table must have header class,up,inc, got {headers:?}"
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(format!("ap table: {e}")))?;
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::format(format!("ap table value {:?}: {e}", &record[i])))
        };
        rows.push(ApTableRow {
            class: record[0].trim().to_string(),
            up: parse(1)?,
            inc: parse(2)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::format("ap table has no rows"));
    }
    Ok(rows)
}

/// SPmAP report from an AP table: rows are ordered old classes first.
pub fn spmap_report(rows: &[ApTableRow], n_old: usize) -> Result<EvalReport> {
    let up: Vec<f64> = rows.iter().map(|r| r.up).collect();
    let inc: Vec<f64> = rows.iter().map(|r| r.inc).collect();
    let comps = spmap(&up, &inc, n_old)?;
    let per_class_ap = rows.iter().map(|r| (r.class.clone(), r.inc)).collect();
    Ok(EvalReport {
        per_class_ap,
        map: inc.iter().sum::<f64>() / inc.len() as f64,
        units: "percent".into(),
        stability: Some(comps.stability),
        plasticity: Some(comps.plasticity),
        map_dif: Some(comps.map_dif),
        spmap: Some(comps.spmap),
    })
}
