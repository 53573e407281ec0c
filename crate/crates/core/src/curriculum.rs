//! Epoch-wise schedule of the loss coefficients.

use crate::error::{Error, Result};
use crate::losses::Coefficients;

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumState {
    pub mu_r: f64,
    pub mu_c: f64,
    pub mu_cons: f64,
    pub mu_u: f64,
    pub epoch: u64,
    /// Rate of the reliable-weight decay.
    pub alpha_r: f64,
    /// Exponential decay of the auxiliary weights per epoch.
    pub beta_decay: f64,
}

impl Default for CurriculumState {
    fn default() -> Self {
        Self {
            mu_r: 1.0,
            mu_c: 0.5,
            mu_cons: 0.5,
            mu_u: 0.5,
            epoch: 0,
            alpha_r: 0.005,
            beta_decay: 1e-4,
        }
    }
}

impl CurriculumState {
    pub fn coefficients(&self) -> Coefficients {
        Coefficients {
            mu_r: self.mu_r,
            mu_c: self.mu_c,
            mu_cons: self.mu_cons,
            mu_u: self.mu_u,
        }
    }

    /// `mu_r <- mu_r (1 - alpha exp(-1/d))` with difficulty `d = tau_u / tau_c`.
    pub fn step_mu_r(&self, tau_c: f64, tau_u: f64) -> Result<Self> {
        if !(tau_c > 0.0) {
            return Err(Error::InvalidArgument(format!("confidence threshold {tau_c} must be > 0")));
        }
        let d = tau_u / tau_c;
        let factor = if d <= 0.0 { 0.0 } else { (-1.0 / d).exp() };
        Ok(Self {
            mu_r: self.mu_r * (1.0 - self.alpha_r * factor),
            ..self.clone()
        })
    }

    /// Multiplies the auxiliary weights by `exp(-beta_decay)` and advances
    /// the epoch counter.
    pub fn decay_aux(&self) -> Self {
        let f = (-self.beta_decay).exp();
        Self {
            mu_c: self.mu_c * f,
            mu_cons: self.mu_cons * f,
            mu_u: self.mu_u * f,
            epoch: self.epoch + 1,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mu_r_examples() {
        let s = CurriculumState::default();
        assert_eq!(s.step_mu_r(0.8, 0.0).unwrap().mu_r, 1.0);
        let one = s.step_mu_r(0.5, 0.5).unwrap().mu_r;
        assert!((one - (1.0 - 0.005 * (-1f64).exp())).abs() < 1e-15);
        assert!((one - 0.998161).abs() < 1e-6);
        let big = s.step_mu_r(1e-12, 1e6).unwrap().mu_r;
        assert!((big - 0.995).abs() < 1e-9);
        assert!(s.step_mu_r(0.0, 0.1).is_err());
    }

    #[test]
    fn decay_examples() {
        let s = CurriculumState::default().decay_aux();
        assert!((s.mu_c - 0.5 * (-1e-4f64).exp()).abs() < 1e-15);
        assert!((s.mu_c - 0.499950).abs() < 1e-6);
        assert_eq!(s.epoch, 1);
        let frozen = CurriculumState {
            beta_decay: 0.0,
            ..CurriculumState::default()
        };
        assert_eq!(frozen.decay_aux().mu_u, 0.5);
    }
}
