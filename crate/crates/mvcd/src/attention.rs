//! Channel attention (squeeze-excitation) and activation-based spatial
//! attention, plus the selection rules that decide which channels and
//! which spatial points are worth distilling.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Weights of a squeeze-excitation gate: two dense layers with a ReLU in
/// between and a sigmoid on top. `w1` maps C → C/r, `w2` maps back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SEWeights {
    pub w1: Tensor, // (C/r) × C
    pub b1: Tensor, // C/r
    pub w2: Tensor, // C × (C/r)
    pub b2: Tensor, // C
}

impl SEWeights {
    pub fn channels(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let h = self.hidden();
        if h < 1
            || self.w1.shape() != [h, c]
            || self.b1.shape() != [h]
            || self.w2.shape() != [c, h]
            || self.b2.shape() != [c]
        {
            return Err(Error::invalid("inconsistent SE weight shapes"));
        }
        Ok(())
    }
}

/// Per-channel attention values in [0, 1] (sigmoid outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttentionVector(pub Vec<f64>);

impl ChannelAttentionVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Spatial points split into high- and low-response sets. Coordinates are
/// `(x, y)` = (column, row); the two sets are disjoint by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSelection {
    pub high: Vec<(usize, usize)>,
    pub low: Vec<(usize, usize)>,
}

impl PointSelection {
    pub fn n_high(&self) -> usize {
        self.high.len()
    }

    pub fn n_low(&self) -> usize {
        self.low.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.high.is_empty() || self.low.is_empty()
    }
}

/// Everything the SE backward pass needs that the forward pass already
/// computed.
#[derive(Debug, Clone)]
pub struct SECache {
    pub squeeze: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub v: Vec<f64>,
}

/// Squeeze-excitation forward: per-channel spatial mean, two dense layers
/// with ReLU and sigmoid, then channel-wise reweighting of the input.
pub fn se_forward(feature: &Tensor, weights: &SEWeights) -> Result<(Tensor, ChannelAttentionVector)> {
    let (out, v, _) = se_forward_cached(feature, weights)?;
    Ok((out, v))
}

/// [`se_forward`] but also returning intermediates for backpropagation.
pub fn se_forward_cached(
    feature: &Tensor,
    weights: &SEWeights,
) -> Result<(Tensor, ChannelAttentionVector, SECache)> {
    weights.validate()?;
    if feature.shape().len() != 3 {
        return Err(Error::invalid("se_forward expects a C×H×W tensor"));
    }
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    if c != weights.channels() {
        return Err(Error::invalid(format!(
            "se_forward channel mismatch: feature has {c}, weights expect {}",
            weights.channels()
        )));
    }
    let hw = (h * w) as f64;
    let squeeze: Vec<f64> = (0..c)
        .map(|ch| {
            let base = ch * h * w;
            feature.data()[base..base + h * w].iter().sum::<f64>() / hw
        })
        .collect();
    let hidden_dim = weights.hidden();
    let mut hidden_pre = vec![0.0; hidden_dim];
    for i in 0..hidden_dim {
        let mut acc = weights.b1.data()[i];
        for j in 0..c {
            acc += weights.w1.at2(i, j) * squeeze[j];
        }
        hidden_pre[i] = acc;
    }
    let hidden: Vec<f64> = hidden_pre.iter().map(|z| z.max(0.0)).collect();
    let mut v = vec![0.0; c];
    for i in 0..c {
        let mut acc = weights.b2.data()[i];
        for j in 0..hidden_dim {
            acc += weights.w2.at2(i, j) * hidden[j];
        }
        v[i] = sigmoid(acc);
    }
    let mut out = feature.clone();
    for ch in 0..c {
        let base = ch * h * w;
        for val in &mut out.data_mut()[base..base + h * w] {
            *val *= v[ch];
        }
    }
    let cache = SECache {
        squeeze,
        hidden_pre,
        hidden,
        v: v.clone(),
    };
    Ok((out, ChannelAttentionVector(v), cache))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Min-max normalize the attention vector and keep indices whose
/// normalized value is strictly greater than `tau`. A constant vector has
/// no ordering to exploit, so every channel is kept.
pub fn select_important_channels(v: &ChannelAttentionVector, tau: f64) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Err(Error::invalid("channel selection on an empty vector"));
    }
    let min = v.0.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok((0..v.len()).collect());
    }
    let range = max - min;
    Ok(v.0
        .iter()
        .enumerate()
        .filter(|(_, x)| (*x - min) / range > tau)
        .map(|(i, _)| i)
        .collect())
}

/// Activation-based spatial attention: per-position sum of absolute
/// channel values, min-max normalized to [0, 1]. A constant map (for
/// example from an all-zero feature) normalizes to all zeros.
pub fn spatial_attention(feature: &Tensor) -> Result<Tensor> {
    if feature.shape().len() != 3 || feature.shape()[0] == 0 {
        return Err(Error::invalid("spatial_attention expects C×H×W with C ≥ 1"));
    }
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let mut map = Tensor::zeros(vec![h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                map.data_mut()[idx] += feature.at3(ch, y, x).abs();
            }
        }
    }
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(Tensor::zeros(vec![h, w]));
    }
    let range = max - min;
    for v in map.data_mut() {
        *v = (*v - min) / range;
    }
    Ok(map)
}

/// Threshold a normalized attention map into high-response points
/// (`att ≥ θ_high`) and low-response points (`att ≤ θ_low`). A constant
/// map carries no contrast and yields two empty sets rather than
/// classifying everything as one kind.
pub fn select_points(att: &Tensor, theta_high: f64, theta_low: f64) -> Result<PointSelection> {
    if att.shape().len() != 2 {
        return Err(Error::invalid("select_points expects an H×W map"));
    }
    if !(0.0..=1.0).contains(&theta_low)
        || !(0.0..=1.0).contains(&theta_high)
        || theta_low >= theta_high
    {
        return Err(Error::invalid(format!(
            "point thresholds must satisfy 0 ≤ θ_low < θ_high ≤ 1, got ({theta_high}, {theta_low})"
        )));
    }
    let (h, w) = (att.shape()[0], att.shape()[1]);
    let min = att.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = att.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sel = PointSelection::default();
    if max == min {
        return Ok(sel);
    }
    for y in 0..h {
        for x in 0..w {
            let v = att.at2(y, x);
            if v >= theta_high {
                sel.high.push((x, y));
            } else if v <= theta_low {
                sel.low.push((x, y));
            }
        }
    }
    Ok(sel)
}
