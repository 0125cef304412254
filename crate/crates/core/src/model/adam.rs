use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for one parameter tensor. No weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state has {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{} entries", grads.len())));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(1);
        let mut p = [0.0];
        s.step(&mut p, &[1.0], 0.1).unwrap();
        assert!((p[0] + 0.1).abs() <= 1e-6);
        assert!((p[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = AdamState::new(3);
        let mut p = [0.5, -2.0, 3.25];
        for _ in 0..10 {
            s.step(&mut p, &[0.0; 3], 0.1).unwrap();
        }
        assert_eq!(p, [0.5, -2.0, 3.25]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut s = AdamState::new(2);
        let mut p = [0.0, 0.0];
        assert!(matches!(s.step(&mut p, &[1.0], 0.1), Err(Error::ShapeMismatch(_))));
        assert!(matches!(s.step(&mut p, &[1.0, f64::NAN], 0.1), Err(Error::NonFiniteGradient(_))));
        assert!(s.step(&mut p, &[1.0, 1.0], -0.1).is_err());
        assert_eq!(s.steps(), 0);
    }
}
