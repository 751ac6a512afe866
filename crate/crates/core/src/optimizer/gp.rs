//! Gaussian-process regression with a Matérn 5/2 kernel.

use crate::error::{Result, TcsError};

#[derive(Debug, Clone, PartialEq)]
pub struct GpHyper {
    pub signal_variance: f64,
    /// One per input dimension.
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl GpHyper {
    pub fn isotropic(dim: usize, length_scale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        GpHyper {
            signal_variance,
            length_scales: vec![length_scale; dim],
            noise_variance,
        }
    }
}

pub fn matern52(x: &[f64], y: &[f64], hyper: &GpHyper) -> f64 {
    let d2: f64 = x
        .iter()
        .zip(y)
        .zip(&hyper.length_scales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    let d = d2.sqrt();
    let s5 = 5f64.sqrt() * d;
    hyper.signal_variance * (1.0 + s5 + 5.0 / 3.0 * d2) * (-s5).exp()
}

/// Lower-triangular Cholesky factor of a row-major n x n matrix.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve L z = b.
fn forward(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * z[k]).sum();
        z[i] = (b[i] - s) / l[i * n + i];
    }
    z
}

/// Solve L^T x = z.
fn backward(l: &[f64], n: usize, z: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (z[i] - s) / l[i * n + i];
    }
    x
}

/// A fitted GP: zero prior mean on standardized targets.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    /// Diagonal jitter that was needed on top of the noise variance.
    pub jitter: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

impl GpModel {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Posterior mean and variance of the standardized target at `q`.
    pub fn posterior(&self, q: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let k: Vec<f64> = self.x.iter().map(|xi| matern52(xi, q, &self.hyper)).collect();
        let mean = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = forward(&self.chol, n, &k);
        let var = self.hyper.signal_variance - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0))
    }

    /// Posterior mean and variance in the original target units.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let (m, v) = self.posterior(q);
        (self.y_mean + self.y_std * m, v * self.y_std * self.y_std)
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }
}

/// Fit to `(x, y)`. Targets are standardized; a constant target set keeps unit scale.
/// Diagonal jitter escalates from 1e-12 up to 1e-4 if the factorization fails.
pub fn gp_fit(x: Vec<Vec<f64>>, y: &[f64], hyper: GpHyper) -> Result<GpModel> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(TcsError::invalid("gp", "need matching, non-empty inputs and targets"));
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();

    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = matern52(&x[i], &x[j], &hyper);
        }
        k[i * n + i] += hyper.noise_variance;
    }
    let mut jitter = 0.0;
    let chol = loop {
        let mut a = k.clone();
        for i in 0..n {
            a[i * n + i] += jitter * hyper.signal_variance;
        }
        if let Some(l) = cholesky(&a, n) {
            break l;
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > 1e-4 {
            return Err(TcsError::NotPositiveDefinite { jitter });
        }
    };
    let alpha = backward(&chol, n, &forward(&chol, n, &ys));
    Ok(GpModel {
        hyper,
        x,
        y: ys,
        y_mean,
        y_std,
        jitter,
        chol,
        alpha,
    })
}
