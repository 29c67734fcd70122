//! Row-local numeric kernels shared by the autodiff graph and the
//! cached inference path. Every kernel computes output row `i` from input
//! row `i` alone, in a fixed accumulation order, so that evaluating a
//! prefix of rows gives bit-identical results to evaluating all of them.

pub const LAYER_NORM_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums let the compiler vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Normalizes one row to zero mean and unit variance (biased estimator).
/// Returns the inverse standard deviation used.
pub fn layer_norm_row(x: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

/// Backward of [`layer_norm_row`] given its output `y` and `inv`.
pub fn layer_norm_row_backward(y: &[f64], inv: f64, dy: &[f64], dx: &mut [f64]) {
    let n = y.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    for ((d, &g), &yv) in dx.iter_mut().zip(dy).zip(y) {
        *d += inv * (g - mean_dy - yv * mean_dyy);
    }
}

pub fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax over the entries of `x` whose `allowed` flag is set; the rest
/// are written as exact zeros. With `allowed = None` every entry counts.
pub fn softmax_row(x: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        if ok(j) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `ln Σ exp(x)` computed stably.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // b transposed is 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c2, c);
        // aᵀ (3x2) · c (2x2)
        let mut d = [0.0; 6];
        matmul_tn_acc(&a, &c, &mut d, 2, 3, 2);
        assert_eq!(d[0], 1.0 * 58.0 + 4.0 * 139.0);
    }

    #[test]
    fn masked_softmax_zeros_and_normalizes() {
        let mut out = [0.0; 3];
        softmax_row(&[1.0, 2.0, 100.0], Some(&[true, true, false]), &mut out);
        assert_eq!(out[2], 0.0);
        assert!((out[0] + out[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
