//! Adam optimizer step with bias correction.

use super::Matrix;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamState {
    pub fn zeros_like(p: &Matrix) -> Self {
        AdamState {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// In-place Adam update. `step` is 1-based and drives bias correction.
pub fn adam_update(
    params: &mut Matrix,
    grads: &Matrix,
    state: &mut AdamState,
    step: usize,
    lr: f32,
) -> Result<()> {
    assert!(step >= 1, "adam step must be >= 1");
    assert_eq!(
        (params.rows(), params.cols()),
        (grads.rows(), grads.cols()),
        "adam shape mismatch"
    );
    if !grads.is_finite() {
        return Err(Error::Numeric {
            context: "adam gradient",
            step,
        });
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let p = params.data_mut();
    let g = grads.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_moments_unchanged() {
        let mut p = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let g = Matrix::zeros(1, 3);
        let mut st = AdamState::zeros_like(&p);
        adam_update(&mut p, &g, &mut st, 1, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.m.data(), &[0.0; 3]);
        assert_eq!(st.v.data(), &[0.0; 3]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Matrix::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let g = Matrix::from_vec(1, 3, vec![0.7, -0.01, 3.0]);
        let mut st = AdamState::zeros_like(&p);
        let lr = 0.05;
        adam_update(&mut p, &g, &mut st, 1, lr).unwrap();
        for (val, gv) in p.data().iter().zip(g.data()) {
            let want = -lr * gv.signum();
            assert!(
                (val - want).abs() < lr * 1e-4,
                "bias-corrected first step should be -lr*sign(g): {val} vs {want}"
            );
        }
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_error() {
        let mut p = Matrix::zeros(1, 1);
        let g = Matrix::from_vec(1, 1, vec![f32::NAN]);
        let mut st = AdamState::zeros_like(&p);
        let err = adam_update(&mut p, &g, &mut st, 3, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: 3, .. }));
    }

    // 100 optimizer steps on f(w) = w^2 starting at w = 1 drive |w| well
    // below 0.5. Verified against an independently coded scalar recurrence.
    #[test]
    fn converges_on_scalar_quadratic() {
        let mut p = Matrix::from_vec(1, 1, vec![1.0]);
        let mut st = AdamState::zeros_like(&p);
        for step in 1..=100 {
            let g = Matrix::from_vec(1, 1, vec![2.0 * p[(0, 0)]]);
            adam_update(&mut p, &g, &mut st, step, 0.1).unwrap();
        }
        let w = p[(0, 0)];

        // independent scalar recurrence
        let (mut sw, mut sm, mut sv) = (1.0f32, 0.0f32, 0.0f32);
        for step in 1..=100i32 {
            let g = 2.0 * sw;
            sm = 0.9 * sm + 0.1 * g;
            sv = 0.999 * sv + 0.001 * g * g;
            let mh = sm / (1.0 - 0.9f32.powi(step));
            let vh = sv / (1.0 - 0.999f32.powi(step));
            sw -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w - sw).abs() < 1e-6, "{w} vs oracle {sw}");
        assert!(w.abs() < 0.5, "w after 100 steps: {w}");
    }
}
