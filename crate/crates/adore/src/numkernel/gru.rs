//! Gated recurrent unit cell.
//!
//! Gate convention: with update gate z = 1 the cell keeps the previous
//! hidden state unchanged,
//!
//! ```text
//! z = sigmoid(Wz x + Uz h + bz)
//! r = sigmoid(Wr x + Ur h + br)
//! c = tanh(Wc x + Uc (r * h) + bc)
//! h' = z * h + (1 - z) * c
//! ```

use super::{dot, sigmoid, Matrix};
use crate::numkernel::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct GruCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Input weights, each hidden_dim x input_dim.
    pub w_update: Matrix,
    pub w_reset: Matrix,
    pub w_cand: Matrix,
    /// Recurrent weights, each hidden_dim x hidden_dim.
    pub u_update: Matrix,
    pub u_reset: Matrix,
    pub u_cand: Matrix,
    /// Biases, each 1 x hidden_dim.
    pub b_update: Matrix,
    pub b_reset: Matrix,
    pub b_cand: Matrix,
}

impl GruCellParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GruCellParams {
            input_dim,
            hidden_dim,
            w_update: Matrix::zeros(hidden_dim, input_dim),
            w_reset: Matrix::zeros(hidden_dim, input_dim),
            w_cand: Matrix::zeros(hidden_dim, input_dim),
            u_update: Matrix::zeros(hidden_dim, hidden_dim),
            u_reset: Matrix::zeros(hidden_dim, hidden_dim),
            u_cand: Matrix::zeros(hidden_dim, hidden_dim),
            b_update: Matrix::zeros(1, hidden_dim),
            b_reset: Matrix::zeros(1, hidden_dim),
            b_cand: Matrix::zeros(1, hidden_dim),
        }
    }

    pub fn random(input_dim: usize, hidden_dim: usize, rng: &mut SplitMix64) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        let si = 1.0 / (input_dim as f32).sqrt();
        let sh = 1.0 / (hidden_dim as f32).sqrt();
        for m in [&mut p.w_update, &mut p.w_reset, &mut p.w_cand] {
            m.data_mut().iter_mut().for_each(|x| *x = rng.normal_f32() * si);
        }
        for m in [&mut p.u_update, &mut p.u_reset, &mut p.u_cand] {
            m.data_mut().iter_mut().for_each(|x| *x = rng.normal_f32() * sh);
        }
        p
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("w_update", &self.w_update),
            ("w_reset", &self.w_reset),
            ("w_cand", &self.w_cand),
            ("u_update", &self.u_update),
            ("u_reset", &self.u_reset),
            ("u_cand", &self.u_cand),
            ("b_update", &self.b_update),
            ("b_reset", &self.b_reset),
            ("b_cand", &self.b_cand),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_update,
            &mut self.w_reset,
            &mut self.w_cand,
            &mut self.u_update,
            &mut self.u_reset,
            &mut self.u_cand,
            &mut self.b_update,
            &mut self.b_reset,
            &mut self.b_cand,
        ]
    }
}

/// Per-step values retained for backpropagation through time.
#[derive(Debug, Clone)]
pub struct GruCellCache {
    pub z: Vec<f32>,
    pub r: Vec<f32>,
    pub c: Vec<f32>,
    pub rh: Vec<f32>,
}

fn gate_preact(w: &Matrix, x: &[f32], u: &Matrix, h: &[f32], b: &Matrix) -> Vec<f32> {
    let hd = w.rows();
    let mut out = Vec::with_capacity(hd);
    for i in 0..hd {
        out.push(dot(w.row(i), x) + dot(u.row(i), h) + b[(0, i)]);
    }
    out
}

/// One GRU step. Panics if `x` or `h_prev` do not match the cell dims.
pub fn gru_cell(x: &[f32], h_prev: &[f32], p: &GruCellParams) -> Vec<f32> {
    gru_cell_cached(x, h_prev, p).0
}

pub fn gru_cell_cached(x: &[f32], h_prev: &[f32], p: &GruCellParams) -> (Vec<f32>, GruCellCache) {
    assert_eq!(x.len(), p.input_dim, "gru input dim mismatch");
    assert_eq!(h_prev.len(), p.hidden_dim, "gru hidden dim mismatch");
    let z: Vec<f32> = gate_preact(&p.w_update, x, &p.u_update, h_prev, &p.b_update)
        .iter()
        .map(|&a| sigmoid(a))
        .collect();
    let r: Vec<f32> = gate_preact(&p.w_reset, x, &p.u_reset, h_prev, &p.b_reset)
        .iter()
        .map(|&a| sigmoid(a))
        .collect();
    let rh: Vec<f32> = r.iter().zip(h_prev).map(|(ri, hi)| ri * hi).collect();
    let c: Vec<f32> = gate_preact(&p.w_cand, x, &p.u_cand, &rh, &p.b_cand)
        .iter()
        .map(|&a| a.tanh())
        .collect();
    let h: Vec<f32> = z
        .iter()
        .zip(h_prev)
        .zip(&c)
        .map(|((zi, hi), ci)| zi * hi + (1.0 - zi) * ci)
        .collect();
    debug_assert!(h.iter().all(|v| v.is_finite()), "gru produced non-finite");
    (h, GruCellCache { z, r, c, rh })
}

/// Gradients for one GRU step. `grads` accumulates parameter gradients;
/// returns (d_x, d_h_prev).
#[allow(clippy::too_many_arguments)]
pub fn gru_cell_backward(
    x: &[f32],
    h_prev: &[f32],
    p: &GruCellParams,
    cache: &GruCellCache,
    dh: &[f32],
    grads: &mut GruCellParams,
) -> (Vec<f32>, Vec<f32>) {
    let hd = p.hidden_dim;
    let id = p.input_dim;
    // h = z*h_prev + (1-z)*c
    let mut dz = vec![0.0f32; hd];
    let mut dc = vec![0.0f32; hd];
    let mut dh_prev = vec![0.0f32; hd];
    for i in 0..hd {
        dz[i] = dh[i] * (h_prev[i] - cache.c[i]);
        dc[i] = dh[i] * (1.0 - cache.z[i]);
        dh_prev[i] = dh[i] * cache.z[i];
    }
    // through tanh candidate
    let dc_pre: Vec<f32> = dc
        .iter()
        .zip(&cache.c)
        .map(|(d, c)| d * (1.0 - c * c))
        .collect();
    // through sigmoid gates
    let dz_pre: Vec<f32> = dz
        .iter()
        .zip(&cache.z)
        .map(|(d, z)| d * z * (1.0 - z))
        .collect();

    let mut dx = vec![0.0f32; id];
    let mut drh = vec![0.0f32; hd];
    accumulate_gate(
        &dc_pre, x, &cache.rh, &p.w_cand, &p.u_cand,
        &mut grads.w_cand, &mut grads.u_cand, &mut grads.b_cand,
        &mut dx, &mut drh,
    );
    // rh = r * h_prev
    let mut dr = vec![0.0f32; hd];
    for i in 0..hd {
        dr[i] = drh[i] * h_prev[i];
        dh_prev[i] += drh[i] * cache.r[i];
    }
    let dr_pre: Vec<f32> = dr
        .iter()
        .zip(&cache.r)
        .map(|(d, r)| d * r * (1.0 - r))
        .collect();

    accumulate_gate(
        &dz_pre, x, h_prev, &p.w_update, &p.u_update,
        &mut grads.w_update, &mut grads.u_update, &mut grads.b_update,
        &mut dx, &mut dh_prev,
    );
    accumulate_gate(
        &dr_pre, x, h_prev, &p.w_reset, &p.u_reset,
        &mut grads.w_reset, &mut grads.u_reset, &mut grads.b_reset,
        &mut dx, &mut dh_prev,
    );
    (dx, dh_prev)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_gate(
    d_pre: &[f32],
    x: &[f32],
    h_in: &[f32],
    w: &Matrix,
    u: &Matrix,
    gw: &mut Matrix,
    gu: &mut Matrix,
    gb: &mut Matrix,
    dx: &mut [f32],
    dh_in: &mut [f32],
) {
    for (i, &d) in d_pre.iter().enumerate() {
        gb[(0, i)] += d;
        let gwr = gw.row_mut(i);
        for (g, &xv) in gwr.iter_mut().zip(x) {
            *g += d * xv;
        }
        let gur = gu.row_mut(i);
        for (g, &hv) in gur.iter_mut().zip(h_in) {
            *g += d * hv;
        }
        let wr = w.row(i);
        for (o, &wv) in dx.iter_mut().zip(wr) {
            *o += d * wv;
        }
        let ur = u.row(i);
        for (o, &uv) in dh_in.iter_mut().zip(ur) {
            *o += d * uv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_give_zero_output() {
        let p = GruCellParams::zeros(4, 3);
        let h = gru_cell(&[1.0, -2.0, 0.5, 3.0], &[0.0; 3], &p);
        assert_eq!(h, vec![0.0; 3]);
    }

    #[test]
    fn saturated_update_gate_keeps_previous_hidden() {
        let mut p = GruCellParams::zeros(2, 3);
        p.b_update.fill(50.0); // z ~= 1
        let h_prev = [0.3, -0.7, 0.9];
        let h = gru_cell(&[1.0, 1.0], &h_prev, &p);
        for (a, b) in h.iter().zip(&h_prev) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    /// Step-by-step scalar recurrence written independently of the
    /// vectorized cell.
    fn gru_oracle(x: &[f32], h_prev: &[f32], p: &GruCellParams) -> Vec<f32> {
        let hd = p.hidden_dim;
        let mut out = Vec::new();
        for i in 0..hd {
            let mut az = p.b_update[(0, i)];
            let mut ar = p.b_reset[(0, i)];
            for (j, &xv) in x.iter().enumerate() {
                az += p.w_update[(i, j)] * xv;
                ar += p.w_reset[(i, j)] * xv;
            }
            for (j, &hv) in h_prev.iter().enumerate() {
                az += p.u_update[(i, j)] * hv;
                ar += p.u_reset[(i, j)] * hv;
            }
            let z = 1.0 / (1.0 + (-az).exp());
            let r = 1.0 / (1.0 + (-ar).exp());
            let mut ac = p.b_cand[(0, i)];
            for (j, &xv) in x.iter().enumerate() {
                ac += p.w_cand[(i, j)] * xv;
            }
            for j in 0..hd {
                // note: reset gate r_j of THAT coordinate
                let arj = {
                    let mut a = p.b_reset[(0, j)];
                    for (k, &xv) in x.iter().enumerate() {
                        a += p.w_reset[(j, k)] * xv;
                    }
                    for (k, &hv) in h_prev.iter().enumerate() {
                        a += p.u_reset[(j, k)] * hv;
                    }
                    a
                };
                let rj = 1.0 / (1.0 + (-arj).exp());
                ac += p.u_cand[(i, j)] * (rj * h_prev[j]);
            }
            let c = ac.tanh();
            out.push(z * h_prev[i] + (1.0 - z) * c);
            let _ = r;
        }
        out
    }

    #[test]
    fn matches_hand_unrolled_oracle() {
        let mut rng = SplitMix64::new(77);
        let p = GruCellParams::random(5, 4, &mut rng);
        let x: Vec<f32> = (0..5).map(|_| rng.normal_f32()).collect();
        let h: Vec<f32> = (0..4).map(|_| rng.normal_f32()).collect();
        let got = gru_cell(&x, &h, &p);
        let want = gru_oracle(&x, &h, &p);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn output_lies_in_open_unit_interval_from_zero_state() {
        let mut rng = SplitMix64::new(5);
        let p = GruCellParams::random(3, 6, &mut rng);
        let x: Vec<f32> = (0..3).map(|_| rng.normal_f32() * 3.0).collect();
        let h = gru_cell(&x, &[0.0; 6], &p);
        // From h_prev = 0 the output is (1-z)*tanh(..), strictly inside (-1, 1).
        for v in h {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    #[should_panic(expected = "dim mismatch")]
    fn rejects_dimension_mismatch() {
        let p = GruCellParams::zeros(4, 3);
        gru_cell(&[1.0; 3], &[0.0; 3], &p);
    }
}
