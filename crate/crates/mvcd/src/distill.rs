//! Correlation distillation losses.
//!
//! Each loss compares pairwise cosine-similarity structure between the
//! incremental model's features and the frozen old model's features, and
//! returns both the scalar value and the analytic gradient with respect
//! to the incremental features (old features are constants). Gradients
//! use the sign(0) = 0 subgradient convention at absolute-value kinks.

use crate::attention::PointSelection;
use crate::tensor::{cosine_grad_wrt_a, cosine_similarity, Tensor};
use crate::{Error, Result};

/// Scalar loss plus its gradient with respect to the incremental input.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad: Tensor,
}

impl LossResult {
    fn zero_for(input: &Tensor) -> Self {
        Self {
            value: 0.0,
            grad: Tensor::zeros_like(input),
        }
    }
}

/// Output-layer distillation carries gradients for both heads.
#[derive(Debug, Clone)]
pub struct OutputLossResult {
    pub value: f64,
    pub grad_cls: Tensor,
    pub grad_reg: Tensor,
}

/// What the rows/columns of a correlation matrix index.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrelationKind {
    /// Square matrix over the listed channel indices.
    Channels(Vec<usize>),
    /// Rectangular: rows are high-response points, columns low-response.
    Points {
        high: Vec<(usize, usize)>,
        low: Vec<(usize, usize)>,
    },
    /// Square matrix over k×k spatial patches, row-major patch order.
    Patches(usize),
}

/// Pairwise cosine-similarity matrix with labeled axes.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub values: Tensor,
    pub kind: CorrelationKind,
}

impl CorrelationMatrix {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Extract per-channel vectors (flattened H×W) and their flat-index maps.
fn channel_vectors(f: &Tensor, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let hw = h * w;
    let mut vecs = Vec::with_capacity(idx.len());
    let mut maps = Vec::with_capacity(idx.len());
    for &c in idx {
        let base = c * hw;
        vecs.push(f.data()[base..base + hw].to_vec());
        maps.push((base..base + hw).collect());
    }
    (vecs, maps)
}

/// Extract per-point channel vectors (length C) and their flat-index maps.
fn point_vectors(f: &Tensor, pts: &[(usize, usize)]) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let c = f.shape()[0];
    let mut vecs = Vec::with_capacity(pts.len());
    let mut maps = Vec::with_capacity(pts.len());
    for &(x, y) in pts {
        let mut v = Vec::with_capacity(c);
        let mut m = Vec::with_capacity(c);
        for ch in 0..c {
            let idx = f.idx3(ch, y, x);
            v.push(f.data()[idx]);
            m.push(idx);
        }
        vecs.push(v);
        maps.push(m);
    }
    (vecs, maps)
}

/// Vectorize the k×k spatial patches of a pc×ph×pw tensor (row-major
/// patch grid, row-major elements within a patch).
fn patch_vectors(f: &Tensor, k: usize) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let (bh, bw) = (h / k, w / k);
    let mut vecs = Vec::with_capacity(k * k);
    let mut maps = Vec::with_capacity(k * k);
    for gy in 0..k {
        for gx in 0..k {
            let mut v = Vec::with_capacity(c * bh * bw);
            let mut m = Vec::with_capacity(c * bh * bw);
            for ch in 0..c {
                for y in gy * bh..(gy + 1) * bh {
                    for x in gx * bw..(gx + 1) * bw {
                        let idx = f.idx3(ch, y, x);
                        v.push(f.data()[idx]);
                        m.push(idx);
                    }
                }
            }
            vecs.push(v);
            maps.push(m);
        }
    }
    (vecs, maps)
}

fn square_similarity_matrix(vecs: &[Vec<f64>]) -> Result<Tensor> {
    let n = vecs.len();
    let mut s = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let idx = i * n + j;
            s.data_mut()[idx] = cosine_similarity(&vecs[i], &vecs[j])?;
        }
    }
    Ok(s)
}

fn cross_similarity_matrix(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> Result<Tensor> {
    let (nr, nc) = (rows.len(), cols.len());
    let mut s = Tensor::zeros(vec![nr, nc]);
    for i in 0..nr {
        for j in 0..nc {
            let idx = i * nc + j;
            s.data_mut()[idx] = cosine_similarity(&rows[i], &cols[j])?;
        }
    }
    Ok(s)
}

/// Correlation matrix over selected channels of one feature tensor.
pub fn channel_correlation_matrix(f: &Tensor, idx: &[usize]) -> Result<CorrelationMatrix> {
    let (vecs, _) = channel_vectors(f, idx);
    Ok(CorrelationMatrix {
        values: square_similarity_matrix(&vecs)?,
        kind: CorrelationKind::Channels(idx.to_vec()),
    })
}

/// Mean-absolute-difference loss between two square similarity matrices
/// built from paired vector sets; shared by the channel-wise and
/// instance-wise views.
fn abs_corr_loss(
    vecs: &[Vec<f64>],
    vecs_old: &[Vec<f64>],
    maps: &[Vec<usize>],
    grad: &mut Tensor,
) -> Result<f64> {
    let n = vecs.len();
    let s = square_similarity_matrix(vecs)?;
    let s_old = square_similarity_matrix(vecs_old)?;
    let norm = (n * n) as f64;
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = s.at2(i, j) - s_old.at2(i, j);
            value += d.abs();
            if i == j {
                // diagonal entries are both 1; no contribution either way
                continue;
            }
            let w = sign0(d) / norm;
            if w != 0.0 {
                let gi = cosine_grad_wrt_a(&vecs[i], &vecs[j]);
                for (slot, g) in maps[i].iter().zip(gi) {
                    grad.data_mut()[*slot] += w * g;
                }
                let gj = cosine_grad_wrt_a(&vecs[j], &vecs[i]);
                for (slot, g) in maps[j].iter().zip(gj) {
                    grad.data_mut()[*slot] += w * g;
                }
            }
        }
    }
    Ok(value / norm)
}

/// Channel-wise correlation distillation over the selected channels.
///
/// Both models' similarity matrices use the same channel indices (taken
/// from the old model's attention); the value is the mean absolute
/// entry-wise difference, diagonal included. An empty selection means no
/// important channels exist and contributes nothing.
pub fn channel_correlation_loss(
    f: &Tensor,
    f_old: &Tensor,
    idx: &[usize],
) -> Result<LossResult> {
    validate_feature_pair(f, f_old)?;
    if idx.is_empty() {
        return Ok(LossResult::zero_for(f));
    }
    let c = f.shape()[0];
    if idx.iter().any(|&i| i >= c) {
        return Err(Error::invalid(format!(
            "channel index out of range (C = {c})"
        )));
    }
    let (vecs, maps) = channel_vectors(f, idx);
    let (vecs_old, _) = channel_vectors(f_old, idx);
    let mut grad = Tensor::zeros_like(f);
    let value = abs_corr_loss(&vecs, &vecs_old, &maps, &mut grad)?;
    Ok(LossResult { value, grad })
}

/// Point-wise correlation distillation: squared Frobenius norm of the
/// difference between the two models' high-vs-low similarity matrices,
/// not normalized. Degenerate selections (either set empty) contribute
/// nothing.
pub fn point_correlation_loss(
    f: &Tensor,
    f_old: &Tensor,
    sel: &PointSelection,
) -> Result<LossResult> {
    validate_feature_pair(f, f_old)?;
    if sel.is_degenerate() {
        return Ok(LossResult::zero_for(f));
    }
    let (h, w) = (f.shape()[1], f.shape()[2]);
    if sel
        .high
        .iter()
        .chain(sel.low.iter())
        .any(|&(x, y)| x >= w || y >= h)
    {
        return Err(Error::invalid("point coordinates outside feature extent"));
    }
    let (high, high_maps) = point_vectors(f, &sel.high);
    let (low, low_maps) = point_vectors(f, &sel.low);
    let (high_old, _) = point_vectors(f_old, &sel.high);
    let (low_old, _) = point_vectors(f_old, &sel.low);
    let s = cross_similarity_matrix(&high, &low)?;
    let s_old = cross_similarity_matrix(&high_old, &low_old)?;
    let mut grad = Tensor::zeros_like(f);
    let mut value = 0.0;
    for i in 0..high.len() {
        for j in 0..low.len() {
            let d = s.at2(i, j) - s_old.at2(i, j);
            value += d * d;
            let w2 = 2.0 * d;
            if w2 != 0.0 {
                let gh = cosine_grad_wrt_a(&high[i], &low[j]);
                for (slot, g) in high_maps[i].iter().zip(gh) {
                    grad.data_mut()[*slot] += w2 * g;
                }
                let gl = cosine_grad_wrt_a(&low[j], &high[i]);
                for (slot, g) in low_maps[j].iter().zip(gl) {
                    grad.data_mut()[*slot] += w2 * g;
                }
            }
        }
    }
    Ok(LossResult { value, grad })
}

/// Instance-wise correlation distillation over the k×k spatial patches of
/// one pooled instance feature. Mean absolute difference over all
/// (k²)×(k²) matrix entries.
pub fn instance_correlation_loss(f_l: &Tensor, f_l_old: &Tensor, k: usize) -> Result<LossResult> {
    validate_feature_pair(f_l, f_l_old)?;
    let (h, w) = (f_l.shape()[1], f_l.shape()[2]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::invalid(format!(
            "spatial extent {h}×{w} not divisible into {k}×{k} patches"
        )));
    }
    let (vecs, maps) = patch_vectors(f_l, k);
    let (vecs_old, _) = patch_vectors(f_l_old, k);
    let mut grad = Tensor::zeros_like(f_l);
    let value = abs_corr_loss(&vecs, &vecs_old, &maps, &mut grad)?;
    Ok(LossResult { value, grad })
}

/// L1 distillation on the output layers: mean absolute difference over
/// the classification entries plus mean absolute difference over the
/// regression entries. Inputs are expected to be already sliced down to
/// the old-model output columns; new-class outputs stay unconstrained.
pub fn output_distillation_loss(
    cls: &Tensor,
    cls_old: &Tensor,
    reg: &Tensor,
    reg_old: &Tensor,
) -> Result<OutputLossResult> {
    if cls.shape() != cls_old.shape() || reg.shape() != reg_old.shape() {
        return Err(Error::invalid("output distillation shape mismatch"));
    }
    let mut value = 0.0;
    let mut grad_cls = Tensor::zeros_like(cls);
    let mut grad_reg = Tensor::zeros_like(reg);
    for (dst, t, t_old) in [
        (&mut grad_cls, cls, cls_old),
        (&mut grad_reg, reg, reg_old),
    ] {
        let n = t.numel();
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as f64;
        let mut acc = 0.0;
        for (i, (a, b)) in t.data().iter().zip(t_old.data()).enumerate() {
            let d = a - b;
            acc += d.abs();
            dst.data_mut()[i] = sign0(d) * inv;
        }
        value += acc * inv;
    }
    Ok(OutputLossResult {
        value,
        grad_cls,
        grad_reg,
    })
}

/// Total training objective: `frcnn + d_out + λ(d_cc + d_pc + d_ic)`.
pub fn total_loss(frcnn: f64, d_out: f64, d_cc: f64, d_pc: f64, d_ic: f64, lambda: f64) -> f64 {
    debug_assert!(
        [frcnn, d_out, d_cc, d_pc, d_ic, lambda]
            .iter()
            .all(|v| v.is_finite()),
        "total_loss expects finite inputs"
    );
    frcnn + d_out + lambda * (d_cc + d_pc + d_ic)
}

fn validate_feature_pair(f: &Tensor, f_old: &Tensor) -> Result<()> {
    if f.shape().len() != 3 {
        return Err(Error::invalid("distillation features must be C×H×W"));
    }
    if f.shape() != f_old.shape() {
        return Err(Error::invalid(format!(
            "feature shape mismatch: {:?} vs {:?}",
            f.shape(),
            f_old.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, grad_relative_error, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Independent double-loop reference: cosine and the losses written
    /// the naive way, sharing nothing with the implementation path.
    mod reference {
        use crate::attention::PointSelection;
        use crate::tensor::Tensor;

        fn cos(a: &[f64], b: &[f64]) -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot / (na * nb).max(1e-12)).clamp(-1.0, 1.0)
        }

        fn channel_vec(f: &Tensor, c: usize) -> Vec<f64> {
            let hw = f.shape()[1] * f.shape()[2];
            f.data()[c * hw..(c + 1) * hw].to_vec()
        }

        pub fn d_cc(f: &Tensor, f_old: &Tensor, idx: &[usize]) -> f64 {
            let n = idx.len();
            let mut acc = 0.0;
            for &i in idx {
                for &j in idx {
                    let s = cos(&channel_vec(f, i), &channel_vec(f, j));
                    let so = cos(&channel_vec(f_old, i), &channel_vec(f_old, j));
                    acc += (s - so).abs();
                }
            }
            acc / (n * n) as f64
        }

        fn point_vec(f: &Tensor, p: (usize, usize)) -> Vec<f64> {
            (0..f.shape()[0]).map(|c| f.at3(c, p.1, p.0)).collect()
        }

        pub fn d_pc(f: &Tensor, f_old: &Tensor, sel: &PointSelection) -> f64 {
            let mut acc = 0.0;
            for &h in &sel.high {
                for &l in &sel.low {
                    let s = cos(&point_vec(f, h), &point_vec(f, l));
                    let so = cos(&point_vec(f_old, h), &point_vec(f_old, l));
                    acc += (s - so) * (s - so);
                }
            }
            acc
        }

        fn patch_vec(f: &Tensor, k: usize, gy: usize, gx: usize) -> Vec<f64> {
            let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
            let (bh, bw) = (h / k, w / k);
            let mut v = Vec::new();
            for ch in 0..c {
                for y in gy * bh..(gy + 1) * bh {
                    for x in gx * bw..(gx + 1) * bw {
                        v.push(f.at3(ch, y, x));
                    }
                }
            }
            v
        }

        pub fn d_ic(f: &Tensor, f_old: &Tensor, k: usize) -> f64 {
            let n = k * k;
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    let (ay, ax) = (a / k, a % k);
                    let (by, bx) = (b / k, b % k);
                    let s = cos(&patch_vec(f, k, ay, ax), &patch_vec(f, k, by, bx));
                    let so = cos(
                        &patch_vec(f_old, k, ay, ax),
                        &patch_vec(f_old, k, by, bx),
                    );
                    acc += (s - so).abs();
                }
            }
            acc / (n * n) as f64
        }
    }

    #[test]
    fn all_losses_zero_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_tensor(&mut rng, vec![4, 3, 3]);
        let idx = vec![0, 2, 3];
        let cc = channel_correlation_loss(&f, &f, &idx).unwrap();
        assert_eq!(cc.value, 0.0);
        assert!(cc.grad.data().iter().all(|v| *v == 0.0));

        let sel = PointSelection {
            high: vec![(0, 0), (2, 1)],
            low: vec![(1, 2)],
        };
        let pc = point_correlation_loss(&f, &f, &sel).unwrap();
        assert_eq!(pc.value, 0.0);
        assert!(pc.grad.data().iter().all(|v| *v == 0.0));

        let fl = random_tensor(&mut rng, vec![3, 4, 4]);
        let ic = instance_correlation_loss(&fl, &fl, 2).unwrap();
        assert_eq!(ic.value, 0.0);
        assert!(ic.grad.data().iter().all(|v| *v == 0.0));

        let cls = random_tensor(&mut rng, vec![2, 3]);
        let reg = random_tensor(&mut rng, vec![2, 4]);
        let out = output_distillation_loss(&cls, &cls, &reg, &reg).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn channel_loss_sign_flip_oracle() {
        // C=2, H=W=1: single-element channel vectors make every cosine ±1.
        // Off-diagonal |1 − (−1)| = 2 twice, over 4 entries → 1.0.
        let f = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let f_old = Tensor::new(vec![2, 1, 1], vec![1.0, -1.0]).unwrap();
        let r = channel_correlation_loss(&f, &f_old, &[0, 1]).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn channel_loss_idx_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_tensor(&mut rng, vec![5, 2, 3]);
        let f_old = random_tensor(&mut rng, vec![5, 2, 3]);
        let a = channel_correlation_loss(&f, &f_old, &[0, 2, 4]).unwrap();
        let b = channel_correlation_loss(&f, &f_old, &[4, 0, 2]).unwrap();
        assert!((a.value - b.value).abs() < 1e-15);
    }

    #[test]
    fn channel_loss_empty_selection_is_zero() {
        let f = Tensor::zeros(vec![3, 2, 2]);
        let r = channel_correlation_loss(&f, &f, &[]).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn point_loss_single_entry_oracle() {
        // ψ = 1 for the incremental pair, ψ' = 0 for the old pair → 1².
        let f = Tensor::new(vec![2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let f_old = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let sel = PointSelection {
            high: vec![(0, 0)],
            low: vec![(1, 0)],
        };
        let r = point_correlation_loss(&f, &f_old, &sel).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f = random_tensor(&mut rng, vec![3, 2, 3]);
        let f_old = random_tensor(&mut rng, vec![3, 2, 3]);
        let sel = PointSelection {
            high: vec![(0, 0), (2, 1)],
            low: vec![(1, 1)],
        };
        let r = point_correlation_loss(&f, &f_old, &sel).unwrap();
        assert!((r.value - reference::d_pc(&f, &f_old, &sel)).abs() < 1e-12);
    }

    #[test]
    fn point_loss_degenerate_selection_is_zero() {
        let f = Tensor::zeros(vec![2, 2, 2]);
        let sel = PointSelection {
            high: vec![],
            low: vec![(0, 0)],
        };
        let r = point_correlation_loss(&f, &f, &sel).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn instance_loss_four_patch_sign_flip_oracle() {
        // Four 1-element patches, one sign flipped in the old model:
        // 6 of 16 matrix entries differ by 2 → 12/16 = 0.75.
        let f = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let f_old = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let r = instance_correlation_loss(&f, &f_old, 2).unwrap();
        assert_eq!(r.value, 0.75);
    }

    #[test]
    fn instance_loss_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f = random_tensor(&mut rng, vec![2, 4, 4]);
        let mut scaled = f.clone();
        scaled.scale(3.7);
        let r = instance_correlation_loss(&scaled, &f, 2).unwrap();
        assert!(r.value < 1e-12);
    }

    #[test]
    fn instance_loss_rejects_indivisible() {
        let f = Tensor::zeros(vec![1, 3, 4]);
        assert!(instance_correlation_loss(&f, &f, 2).is_err());
    }

    #[test]
    fn output_loss_hand_case() {
        let cls = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let cls_old = Tensor::new(vec![2], vec![0.0, 4.0]).unwrap();
        let reg = Tensor::zeros(vec![0]);
        let r = output_distillation_loss(&cls, &cls_old, &reg, &reg).unwrap();
        assert_eq!(r.value, 1.5);
        assert_eq!(r.grad_cls.data(), &[0.5, -0.5]);
    }

    #[test]
    fn output_loss_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(&mut rng, vec![3, 2]);
        let b = random_tensor(&mut rng, vec![3, 2]);
        let r = random_tensor(&mut rng, vec![3, 4]);
        let s = random_tensor(&mut rng, vec![3, 4]);
        let ab = output_distillation_loss(&a, &b, &r, &s).unwrap();
        let ba = output_distillation_loss(&b, &a, &s, &r).unwrap();
        assert!((ab.value - ba.value).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 0.0, 0.0, 0.0, 0.0, 1.0), 2.0);
        assert!((total_loss(1.0, 0.5, 0.1, 0.2, 0.3, 1.0) - 2.1).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 0.5, 0.1, 0.2, 0.3, 0.0), 1.5);
    }

    #[test]
    fn losses_match_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for _ in 0..100 {
            let c = rng.gen_range(2..=6);
            let h = rng.gen_range(1..=3);
            let w = rng.gen_range(1..=3);
            let f = random_tensor(&mut rng, vec![c, h, w]);
            let f_old = random_tensor(&mut rng, vec![c, h, w]);
            let idx: Vec<usize> = (0..c).filter(|_| rng.gen_bool(0.7)).collect();
            if !idx.is_empty() {
                let got = channel_correlation_loss(&f, &f_old, &idx).unwrap();
                assert!((got.value - reference::d_cc(&f, &f_old, &idx)).abs() < 1e-10);
            }
            let mut sel = PointSelection::default();
            for y in 0..h {
                for x in 0..w {
                    match rng.gen_range(0..3) {
                        0 => sel.high.push((x, y)),
                        1 => sel.low.push((x, y)),
                        _ => {}
                    }
                }
            }
            if !sel.is_degenerate() {
                let got = point_correlation_loss(&f, &f_old, &sel).unwrap();
                assert!((got.value - reference::d_pc(&f, &f_old, &sel)).abs() < 1e-10);
            }
            let fl = random_tensor(&mut rng, vec![2, 4, 4]);
            let fl_old = random_tensor(&mut rng, vec![2, 4, 4]);
            let got = instance_correlation_loss(&fl, &fl_old, 2).unwrap();
            assert!((got.value - reference::d_ic(&fl, &fl_old, 2)).abs() < 1e-10);
        }
    }

    #[test]
    fn rescaling_both_models_leaves_losses_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let f = random_tensor(&mut rng, vec![4, 2, 2]);
        let f_old = random_tensor(&mut rng, vec![4, 2, 2]);
        let idx = vec![0, 1, 3];
        let base = channel_correlation_loss(&f, &f_old, &idx).unwrap().value;
        // per-channel positive scales applied to both models
        let mut fs = f.clone();
        let mut fos = f_old.clone();
        let hw = 4;
        for c in 0..4 {
            let alpha = 0.3 + c as f64;
            for i in c * hw..(c + 1) * hw {
                fs.data_mut()[i] *= alpha;
                fos.data_mut()[i] *= alpha;
            }
        }
        let scaled = channel_correlation_loss(&fs, &fos, &idx).unwrap().value;
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn gradient_sparsity_outside_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let f = random_tensor(&mut rng, vec![5, 2, 2]);
        let f_old = random_tensor(&mut rng, vec![5, 2, 2]);
        let r = channel_correlation_loss(&f, &f_old, &[1, 3]).unwrap();
        let hw = 4;
        for c in [0usize, 2, 4] {
            assert!(r.grad.data()[c * hw..(c + 1) * hw]
                .iter()
                .all(|v| *v == 0.0));
        }

        let sel = PointSelection {
            high: vec![(0, 0)],
            low: vec![(1, 1)],
        };
        let r = point_correlation_loss(&f, &f_old, &sel).unwrap();
        for c in 0..5 {
            // (1,0) and (0,1) were never selected
            assert_eq!(r.grad.at3(c, 0, 1), 0.0);
            assert_eq!(r.grad.at3(c, 1, 0), 0.0);
        }
    }

    /// Gradient checks for every loss at a handful of seeds; the full
    /// 20-seed matrix runs in the acceptance suite.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let f = random_tensor(&mut rng, vec![4, 2, 2]);
            let f_old = random_tensor(&mut rng, vec![4, 2, 2]);
            let idx = vec![0, 1, 3];
            let analytic = channel_correlation_loss(&f, &f_old, &idx).unwrap();
            let numeric = finite_difference_grad(
                |t| channel_correlation_loss(t, &f_old, &idx).unwrap().value,
                &f,
                FD_STEP,
            )
            .unwrap();
            assert!(
                grad_relative_error(&analytic.grad, &numeric) < 1e-4,
                "d_cc gradient mismatch at seed {seed}"
            );

            let sel = PointSelection {
                high: vec![(0, 0), (1, 1)],
                low: vec![(1, 0), (0, 1)],
            };
            let analytic = point_correlation_loss(&f, &f_old, &sel).unwrap();
            let numeric = finite_difference_grad(
                |t| point_correlation_loss(t, &f_old, &sel).unwrap().value,
                &f,
                FD_STEP,
            )
            .unwrap();
            assert!(
                grad_relative_error(&analytic.grad, &numeric) < 1e-4,
                "d_pc gradient mismatch at seed {seed}"
            );

            let fl = random_tensor(&mut rng, vec![2, 4, 4]);
            let fl_old = random_tensor(&mut rng, vec![2, 4, 4]);
            let analytic = instance_correlation_loss(&fl, &fl_old, 2).unwrap();
            let numeric = finite_difference_grad(
                |t| instance_correlation_loss(t, &fl_old, 2).unwrap().value,
                &fl,
                FD_STEP,
            )
            .unwrap();
            assert!(
                grad_relative_error(&analytic.grad, &numeric) < 1e-4,
                "d_ic gradient mismatch at seed {seed}"
            );

            let cls = random_tensor(&mut rng, vec![3, 4]);
            let cls_old = random_tensor(&mut rng, vec![3, 4]);
            let reg = random_tensor(&mut rng, vec![3, 8]);
            let reg_old = random_tensor(&mut rng, vec![3, 8]);
            let analytic = output_distillation_loss(&cls, &cls_old, &reg, &reg_old).unwrap();
            let numeric = finite_difference_grad(
                |t| {
                    output_distillation_loss(t, &cls_old, &reg, &reg_old)
                        .unwrap()
                        .value
                },
                &cls,
                FD_STEP,
            )
            .unwrap();
            assert!(
                grad_relative_error(&analytic.grad_cls, &numeric) < 1e-4,
                "d_out cls gradient mismatch at seed {seed}"
            );
        }
    }

    #[test]
    fn correlation_matrix_square_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_tensor(&mut rng, vec![4, 3, 2]);
        let m = channel_correlation_matrix(&f, &[0, 1, 2, 3]).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 4));
        for i in 0..4 {
            assert!((m.values.at2(i, i) - 1.0).abs() < 1e-12);
            for j in 0..4 {
                let v = m.values.at2(i, j);
                assert!((-1.0..=1.0).contains(&v));
                assert!((v - m.values.at2(j, i)).abs() < 1e-12);
            }
        }
    }
}
