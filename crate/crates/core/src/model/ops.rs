//! Elementwise and row-wise primitives with explicit backward forms.

use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm cache: normalized activations and inverse std.
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// y = gain * (x - mean) / sqrt(var + eps) + bias, per row of width `h`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    h: usize,
) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / h;
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let hn = T::from_f64_lossy(h as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * h..(r + 1) * h];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / hn;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / hn;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for c in 0..h {
            let xh = (row[c] - mean) * istd;
            xhat[r * h + c] = xh;
            y[r * h + c] = gain[c] * xh + bias[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Backward of layer norm. Accumulates into `dgain`/`dbias`, returns dx.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    h: usize,
) -> Vec<T> {
    let rows = dy.len() / h;
    let hn = T::from_f64_lossy(h as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..rows {
        let dyr = &dy[r * h..(r + 1) * h];
        let xhr = &cache.xhat[r * h..(r + 1) * h];
        let istd = cache.inv_std[r];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for c in 0..h {
            dgain[c] += dyr[c] * xhr[c];
            dbias[c] += dyr[c];
            let dxhat = dyr[c] * gain[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhr[c];
        }
        let mean_dxhat = sum_dxhat / hn;
        let mean_dxhat_xhat = sum_dxhat_xhat / hn;
        for c in 0..h {
            let dxhat = dyr[c] * gain[c];
            dx[r * h + c] = istd * (dxhat - mean_dxhat - xhr[c] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_COEFF: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_COEFF);
    let half = T::from_f64_lossy(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * u * (T::one() + t)
}

pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_COEFF);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (u + k * u * u * u);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * u * sech2 * c * (T::one() + three * k * u * u)
}

/// In-place row-wise softmax over width `n`. `-inf` entries become
/// exactly zero.
pub fn softmax_rows<T: Scalar>(x: &mut [T], n: usize) {
    for row in x.chunks_mut(n) {
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Backward of row-wise softmax: ds = p * (dp - sum(dp * p)).
pub fn softmax_backward_row<T: Scalar>(probs: &[T], dprobs: &[T], dscores: &mut [T]) {
    let mut dot = T::zero();
    for (&p, &dp) in probs.iter().zip(dprobs.iter()) {
        dot += p * dp;
    }
    for i in 0..probs.len() {
        dscores[i] = probs[i] * (dprobs[i] - dot);
    }
}

/// Numerically stable log-sum-exp of a logit row, in f64.
pub fn log_sum_exp<T: Scalar>(logits: &[T]) -> f64 {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64_lossy()));
    let sum: f64 = logits
        .iter()
        .map(|&v| (v.to_f64_lossy() - max).exp())
        .sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0];
        softmax_rows(&mut x, 3);
        for row in x.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_neg_infinity_is_exactly_zero() {
        let mut x = vec![1.0f64, f64::NEG_INFINITY, 2.0];
        softmax_rows(&mut x, 3);
        assert_eq!(x[1], 0.0);
        assert!((x[0] + x[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &u in &[-3.0f64, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let eps = 1e-6;
            let fd = (gelu(u + eps) - gelu(u - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u = {u}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let h = 5;
        let x: Vec<f64> = vec![0.3, -1.2, 0.8, 2.0, -0.5];
        let gain: Vec<f64> = vec![1.1, 0.9, 1.0, 1.2, 0.8];
        let bias: Vec<f64> = vec![0.0, 0.1, -0.1, 0.2, 0.0];
        // scalar objective: weighted sum of outputs
        let w: Vec<f64> = vec![0.7, -0.3, 0.5, 0.2, -0.9];
        let objective = |x: &[f64]| -> f64 {
            let (y, _) = layer_norm_forward(x, &gain, &bias, h);
            y.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm_forward(&x, &gain, &bias, h);
        let mut dgain = vec![0.0; h];
        let mut dbias = vec![0.0; h];
        let dx = layer_norm_backward(&w, &cache, &gain, &mut dgain, &mut dbias, h);
        for i in 0..h {
            let eps = 1e-6;
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-7, "coord {i}: fd {fd} vs {}", dx[i]);
        }
    }
}
