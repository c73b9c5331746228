//! Transformer-internal building blocks: layer norm, GELU, head splitting.

use crate::numkernel::Matrix;

pub const LN_EPS: f32 = 1e-5;

/// Per-row standardized values and reciprocal stddevs, kept for backprop.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Matrix,
    pub rstd: Vec<f32>,
}

/// Row-wise layer norm with learned gain/bias (1 x d each).
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let d = x.cols();
    assert_eq!(gain.cols(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut rstds = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds.push(rstd);
        let xh = xhat.row_mut(i);
        let o = out.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * rstd;
            o[j] = xh[j] * gain[(0, j)] + bias[(0, j)];
        }
    }
    (
        out,
        LnCache {
            xhat,
            rstd: rstds,
        },
    )
}

/// Backward pass of `layer_norm`. Accumulates gain/bias grads, returns dx.
pub fn layer_norm_backward(
    d_out: &Matrix,
    cache: &LnCache,
    gain: &Matrix,
    d_gain: &mut Matrix,
    d_bias: &mut Matrix,
) -> Matrix {
    let (rows, d) = (d_out.rows(), d_out.cols());
    let mut dx = Matrix::zeros(rows, d);
    for i in 0..rows {
        let dy = d_out.row(i);
        let xh = cache.xhat.row(i);
        let rstd = cache.rstd[i];
        let mut sum_dxh = 0.0f32;
        let mut sum_dxh_xh = 0.0f32;
        // dxhat = dy * gain
        for j in 0..d {
            let dxh = dy[j] * gain[(0, j)];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
            d_gain[(0, j)] += dy[j] * xh[j];
            d_bias[(0, j)] += dy[j];
        }
        let inv_d = 1.0 / d as f32;
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let dxh = dy[j] * gain[(0, j)];
            dxr[j] = rstd * (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
        }
    }
    dx
}

const GELU_S: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_C: f32 = 0.044_715;

/// tanh-approximation GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f32) -> f32 {
    let inner = GELU_S * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn gelu_matrix(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    out
}

/// Copies head `h` (width `head_dim`) out of a (rows x d) matrix.
pub fn head_slice(m: &Matrix, h: usize, head_dim: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), head_dim);
    let off = h * head_dim;
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[off..off + head_dim]);
    }
    out
}

/// Writes a per-head matrix back into the concatenated layout.
pub fn head_unslice(dst: &mut Matrix, src: &Matrix, h: usize, head_dim: usize) {
    let off = h * head_dim;
    for i in 0..src.rows() {
        dst.row_mut(i)[off..off + head_dim].copy_from_slice(src.row(i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rng::SplitMix64;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = SplitMix64::new(2);
        let x = Matrix::from_vec(3, 8, (0..24).map(|_| rng.normal_f32() * 3.0 + 1.0).collect());
        let g = Matrix::from_vec(1, 8, vec![1.0; 8]);
        let b = Matrix::zeros(1, 8);
        let (out, _) = layer_norm(&x, &g, &b);
        for i in 0..3 {
            let row = out.row(i);
            let mean: f32 = row.iter().sum::<f32>() / 8.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0f32, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-3f64;
            let xf = x as f64;
            let f = |v: f64| {
                let v = v as f32;
                gelu(v) as f64
            };
            let fd = (f(xf + h) - f(xf - h)) / (2.0 * h);
            let an = gelu_derivative(x) as f64;
            assert!((fd - an).abs() < 1e-3, "x={x}: {fd} vs {an}");
        }
    }

    #[test]
    fn head_slice_round_trips() {
        let mut rng = SplitMix64::new(4);
        let m = Matrix::from_vec(5, 12, (0..60).map(|_| rng.normal_f32()).collect());
        let mut rebuilt = Matrix::zeros(5, 12);
        for h in 0..3 {
            let s = head_slice(&m, h, 4);
            head_unslice(&mut rebuilt, &s, h, 4);
        }
        assert_eq!(m, rebuilt);
    }
}
