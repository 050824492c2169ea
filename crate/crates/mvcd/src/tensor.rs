//! Dense row-major tensors and the numeric primitives the rest of the
//! crate builds on: cosine similarity and a central-finite-difference
//! gradient oracle used to verify every hand-derived gradient.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Stabilizer for cosine similarity; a zero vector paired with anything
/// yields similarity 0 instead of NaN.
pub const COSINE_EPS: f64 = 1e-12;

/// Dense tensor of `f64` values in row-major order.
///
/// `product(shape) == data.len()` always holds, and construction rejects
/// non-finite values so NaN/Inf cannot leak into downstream math.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("tensor contains non-finite values"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index into a C×H×W tensor.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    /// Flat index into a rows×cols tensor.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        r * self.shape[1] + c
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx3(c, y, x)]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[self.idx2(r, c)]
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// `self += alpha * other`; shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "axpy shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }
}

/// Cosine similarity `a·b / max(‖a‖‖b‖, ε)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("cosine similarity of an empty vector"));
    }
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine similarity length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na.sqrt() * nb.sqrt()).max(COSINE_EPS);
    Ok((dot / denom).clamp(-1.0, 1.0))
}

/// Gradient of `cosine_similarity(a, b)` with respect to `a`.
///
/// With `ψ = a·b / (‖a‖‖b‖)`: `∂ψ/∂a = b/(‖a‖‖b‖) − ψ·a/‖a‖²`. When the
/// norm product falls below ε the denominator is the constant ε and the
/// gradient degenerates to `b/ε`. The [-1,1] clamp only binds at exact
/// colinearity, where the sub-differential 0 choice coincides with the
/// formula anyway (ψ(a,a) is constant in scale).
pub(crate) fn cosine_grad_wrt_a(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    let norm_prod = na2.sqrt() * nb2.sqrt();
    if norm_prod < COSINE_EPS {
        return b.iter().map(|y| y / COSINE_EPS).collect();
    }
    let psi = dot / norm_prod;
    a.iter()
        .zip(b)
        .map(|(x, y)| y / norm_prod - psi * x / na2.max(COSINE_EPS))
        .collect()
}

/// Central-difference gradient of a scalar function at `x`.
///
/// `grad[i] = (f(x + h·e_i) − f(x − h·e_i)) / 2h`, same shape as `x`.
/// Test oracle for all the analytic gradients in this crate.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::invalid("finite differences need a positive step"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite function value near element {i}"
            )));
        }
        grad.data[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Default step for [`finite_difference_grad`].
pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)` — the relative error used by all
/// gradient checks.
pub fn grad_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut diff: f64 = 0.0;
    let mut mag: f64 = 0.0;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        diff = diff.max((a - n).abs());
        mag = mag.max(a.abs()).max(n.abs());
    }
    diff / mag.max(1e-12)
}
