use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for one flat parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_len("adam parameters", self.m.len(), params.len())?;
        check_len("adam gradients", self.m.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut st = AdamState::new(1);
        let mut p = [0.5];
        st.update(&mut p, &[1.0], 1e-3).unwrap();
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_never_moves() {
        let mut st = AdamState::new(3);
        let mut p = [1.0, -2.0, 3.5];
        for _ in 0..100 {
            st.update(&mut p, &[0.0; 3], 0.1).unwrap();
        }
        assert_eq!(p, [1.0, -2.0, 3.5]);
    }

    #[test]
    fn equal_histories_get_equal_updates() {
        let mut st = AdamState::new(2);
        let mut p = [0.0, 0.0];
        for k in 0..20 {
            let g = (k as f64).sin();
            st.update(&mut p, &[g, g], 1e-2).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn errors() {
        let mut st = AdamState::new(2);
        let mut p = [0.0, 0.0];
        assert!(matches!(
            st.update(&mut p, &[1.0], 1e-3),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            st.update(&mut p, &[1.0, f64::INFINITY], 1e-3),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(st.step, 0);
    }
}
