use crate::error::{AtmError, Result};
use crate::numerics::Matrix;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Matrix,
    second: Matrix,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self::with_betas(rows, cols, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON)
    }

    pub fn for_param(param: &Matrix) -> Self {
        Self::new(param.rows(), param.cols())
    }

    pub fn with_betas(rows: usize, cols: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first: Matrix::zeros(rows, cols),
            second: Matrix::zeros(rows, cols),
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Matrix {
        &self.first
    }

    pub fn second_moment(&self) -> &Matrix {
        &self.second
    }

    /// Applies one Adam update to `param` in place.
    pub fn apply(&mut self, param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(AtmError::dim("adam_step", param.shape(), grad.shape()));
        }
        if param.shape() != self.first.shape() {
            return Err(AtmError::dim("adam_step", self.first.shape(), param.shape()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let m = self.first.data_mut();
        let v = self.second.data_mut();
        for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Matrix::from_rows(&[[1.5, -2.0], [0.25, 3.0]]);
        let before = p.clone();
        let mut s = AdamState::for_param(&p);
        for _ in 0..10 {
            s.apply(&mut p, &Matrix::zeros(2, 2), 0.1).unwrap();
        }
        assert!(p.bits_eq(&before));
        assert_eq!(s.step_count(), 10);
    }

    #[test]
    fn scalar_quadratic_converges() {
        // minimise (x - 3)^2 from x = 0; the plain scalar recurrence reaches
        // 3 to ~7e-12 after 500 steps
        let mut x = Matrix::from_rows(&[[0.0]]);
        let mut s = AdamState::for_param(&x);
        for _ in 0..500 {
            let g = Matrix::from_rows(&[[2.0 * (x.get(0, 0) - 3.0)]]);
            s.apply(&mut x, &g, 0.1).unwrap();
        }
        assert!((x.get(0, 0) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn first_step_uses_exact_bias_correction() {
        let mut p = Matrix::from_rows(&[[1.0, 1.0]]);
        let g = Matrix::from_rows(&[[0.5, -4.0]]);
        let mut s = AdamState::for_param(&p);
        s.apply(&mut p, &g, 0.01).unwrap();
        assert_eq!(s.step_count(), 1);
        for c in 0..2 {
            let gv = g.get(0, c);
            let m_hat = ((1.0 - DEFAULT_BETA1) * gv) / (1.0 - DEFAULT_BETA1);
            let v_hat = ((1.0 - DEFAULT_BETA2) * gv * gv) / (1.0 - DEFAULT_BETA2);
            let want = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + DEFAULT_EPSILON);
            assert_eq!(p.get(0, c), want);
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut p = Matrix::zeros(2, 2);
        let mut s = AdamState::for_param(&p);
        let err = s.apply(&mut p, &Matrix::zeros(1, 2), 0.1).unwrap_err();
        assert!(matches!(err, AtmError::Dimension { op: "adam_step", .. }));
    }
}
