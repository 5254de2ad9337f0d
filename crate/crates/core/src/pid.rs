//! Discrete PID controller with output clamping, one instance per axis.
//!
//! The law is per-iteration (gains absorb the loop period):
//! `u = kp*e + kd*(e - e_prev) + ki*sum(e)`, clamped to the output range.
//! The derivative term is zero on the first step after construction or
//! reset, and the integral freezes on steps where the raw output exceeds
//! the clamp (anti-windup).

use thiserror::Error;

pub const DEFAULT_KP: f64 = 0.5;
pub const DEFAULT_KI: f64 = 0.05;
pub const DEFAULT_KD: f64 = 0.5;
/// Commands are truncated to +/-100.
pub const OUTPUT_LIMIT: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum PidError {
    #[error("error input must be finite, got {0}")]
    NonFiniteError(f64),
}

/// Per-axis discrete PID state.
#[derive(Debug, Clone)]
pub struct PidController {
    kp: f64,
    ki: f64,
    kd: f64,
    out_min: f64,
    out_max: f64,
    integral: f64,
    prev_error: f64,
    first_step: bool,
}

impl PidController {
    /// Controller with the given gains and the +/-100 command clamp.
    pub fn new(kp: f64, ki: f64, kd: f64) -> Self {
        Self::with_limits(kp, ki, kd, -OUTPUT_LIMIT, OUTPUT_LIMIT)
    }

    pub fn with_limits(kp: f64, ki: f64, kd: f64, out_min: f64, out_max: f64) -> Self {
        assert!(out_min < out_max, "output clamp must be a nonempty range");
        Self {
            kp,
            ki,
            kd,
            out_min,
            out_max,
            integral: 0.0,
            prev_error: 0.0,
            first_step: true,
        }
    }

    pub fn gains(&self) -> (f64, f64, f64) {
        (self.kp, self.ki, self.kd)
    }

    pub fn limits(&self) -> (f64, f64) {
        (self.out_min, self.out_max)
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    /// Advance one control iteration and return the clamped command.
    pub fn step(&mut self, error: f64) -> Result<f64, PidError> {
        if !error.is_finite() {
            return Err(PidError::NonFiniteError(error));
        }
        let derivative = if self.first_step {
            0.0
        } else {
            error - self.prev_error
        };
        let candidate_integral = self.integral + error;
        let raw = self.kp * error + self.kd * derivative + self.ki * candidate_integral;
        let saturated = raw < self.out_min || raw > self.out_max;
        if !saturated {
            self.integral = candidate_integral;
        }
        self.prev_error = error;
        self.first_step = false;
        Ok(raw.clamp(self.out_min, self.out_max))
    }

    /// Zero the accumulated state; the next step is a first step again.
    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = 0.0;
        self.first_step = true;
    }
}

impl Default for PidController {
    fn default() -> Self {
        Self::new(DEFAULT_KP, DEFAULT_KI, DEFAULT_KD)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_tuning() {
        let pid = PidController::default();
        assert_eq!(pid.gains(), (0.5, 0.05, 0.5));
        assert_eq!(pid.limits(), (-100.0, 100.0));
    }

    #[test]
    fn zero_error_from_rest_is_zero() {
        let mut pid = PidController::default();
        assert_eq!(pid.step(0.0).unwrap(), 0.0);
    }

    #[test]
    fn hand_trace_proportional_derivative() {
        // kp = kd = 0.5, ki = 0: e=0 then e=10 -> 0.5*10 + 0.5*(10-0) = 10.0
        let mut pid = PidController::new(0.5, 0.0, 0.5);
        assert_eq!(pid.step(0.0).unwrap(), 0.0);
        assert_eq!(pid.step(10.0).unwrap(), 10.0);
    }

    #[test]
    fn clamps_large_errors() {
        let mut pid = PidController::default();
        assert_eq!(pid.step(10_000.0).unwrap(), 100.0);
        assert_eq!(pid.step(-10_000.0).unwrap(), -100.0);
    }

    #[test]
    fn integral_ramp() {
        let mut pid = PidController::new(0.0, 0.05, 0.0);
        let outs: Vec<f64> = (0..4).map(|_| pid.step(2.0).unwrap()).collect();
        for (k, out) in outs.iter().enumerate() {
            assert!((out - 0.1 * (k + 1) as f64).abs() < 1e-12, "{outs:?}");
        }
    }

    #[test]
    fn determinism_across_instances() {
        let errs = [3.0, -1.5, 8.0, 0.0, -20.0, 500.0, -0.25];
        let mut a = PidController::default();
        let mut b = PidController::default();
        for &e in &errs {
            assert_eq!(a.step(e).unwrap(), b.step(e).unwrap());
        }
    }

    #[test]
    fn reset_erases_state() {
        let mut pid = PidController::default();
        pid.step(5.0).unwrap();
        pid.reset();
        assert_eq!(pid.integral(), 0.0);
        assert_eq!(pid.step(0.0).unwrap(), 0.0);

        let mut fresh = PidController::default();
        let mut used = PidController::default();
        used.step(5.0).unwrap();
        used.reset();
        used.reset(); // idempotent
        assert_eq!(used.step(5.0).unwrap(), fresh.step(5.0).unwrap());
    }

    #[test]
    fn non_finite_error_rejected_state_unchanged() {
        let mut pid = PidController::default();
        pid.step(2.0).unwrap();
        let before = pid.integral();
        assert!(pid.step(f64::NAN).is_err());
        assert!(pid.step(f64::INFINITY).is_err());
        assert_eq!(pid.integral(), before);
        // next valid step behaves as if the bad input never happened
        let mut twin = PidController::default();
        twin.step(2.0).unwrap();
        assert_eq!(pid.step(3.0).unwrap(), twin.step(3.0).unwrap());
    }

    #[test]
    fn anti_windup_freezes_integral() {
        let mut pid = PidController::new(0.5, 0.05, 0.0);
        // drive into saturation
        let mut entry_integral = 0.0;
        for k in 0..50 {
            let out = pid.step(1_000.0).unwrap();
            assert_eq!(out, 100.0);
            if k == 0 {
                entry_integral = pid.integral();
            }
        }
        // integral must not have grown past saturation entry
        assert!(pid.integral() <= entry_integral);
        // error returns to zero: output bounded by the frozen integral term
        let out = pid.step(0.0).unwrap();
        let (_, ki, kd) = pid.gains();
        let bound = kd * 1_000.0 + ki * pid.integral().abs();
        assert!(out.abs() <= bound + 1e-9);
    }

    proptest! {
        #[test]
        fn output_always_clamped(errs in proptest::collection::vec(-1e9f64..1e9, 1..200)) {
            let mut pid = PidController::default();
            for e in errs {
                let out = pid.step(e).unwrap();
                prop_assert!((-100.0..=100.0).contains(&out));
            }
        }

        #[test]
        fn p_only_linearity(e in -50.0f64..50.0, alpha in 0.1f64..3.0) {
            // unclamped region only
            prop_assume!((e * alpha).abs() < 150.0);
            let mut a = PidController::new(0.5, 0.0, 0.0);
            let mut b = PidController::new(0.5, 0.0, 0.0);
            let ya = a.step(e).unwrap();
            let yb = b.step(alpha * e).unwrap();
            if ya.abs() < 100.0 && yb.abs() < 100.0 {
                prop_assert!((yb - alpha * ya).abs() < 1e-9);
            }
        }

        #[test]
        fn proportional_sign_matches_error(e in -1e6f64..1e6) {
            prop_assume!(e != 0.0);
            let mut pid = PidController::new(0.5, 0.0, 0.0);
            let out = pid.step(e).unwrap();
            prop_assert_eq!(out.signum(), e.signum());
        }
    }
}
