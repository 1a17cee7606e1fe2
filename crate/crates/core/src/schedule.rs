//! Teacher EMA and the burn-in / burn-up phase plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flattened model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                format!("params[{i}]"),
                "parameter is not finite",
            ));
        }
        Ok(ParamVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("ema_alpha", format!("{alpha} outside (0, 1)")));
    }
    if teacher.dimension() != student.dimension() {
        return Err(Error::invalid(
            "params",
            format!(
                "teacher has {} parameters, student has {}",
                teacher.dimension(),
                student.dimension()
            ),
        ));
    }
    Ok(ParamVector(
        teacher
            .0
            .iter()
            .zip(&student.0)
            .map(|(t, s)| alpha * t + (1.0 - alpha) * s)
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhasePlan {
    pub burn_in_iters: u64,
    pub burn_up_iters: u64,
    /// Fraction of burn-up after which proxy consistency is switched on.
    pub ptc_gate_frac: f64,
    /// Fraction of burn-up after which threshold adaptation is switched on.
    pub ait_gate_frac: f64,
    pub ema_alpha: f64,
}

impl Default for PhasePlan {
    fn default() -> Self {
        PhasePlan {
            burn_in_iters: 50_000,
            burn_up_iters: 50_000,
            ptc_gate_frac: 0.4,
            ait_gate_frac: 0.6,
            ema_alpha: 0.9996,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseFlags {
    pub in_burn_up: bool,
    pub ptc_enabled: bool,
    pub ait_enabled: bool,
}

impl PhasePlan {
    /// Same gate fractions and EMA rate with different iteration counts.
    pub fn scaled(burn_in_iters: u64, burn_up_iters: u64) -> Self {
        PhasePlan {
            burn_in_iters,
            burn_up_iters,
            ..PhasePlan::default()
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ptc_gate_frac) {
            return Err(Error::invalid(format!("{path}.ptc_gate_frac"), "must lie in [0, 1]"));
        }
        if !(self.ptc_gate_frac..=1.0).contains(&self.ait_gate_frac) {
            return Err(Error::invalid(
                format!("{path}.ait_gate_frac"),
                "must lie in [ptc_gate_frac, 1]",
            ));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return Err(Error::invalid(format!("{path}.ema_alpha"), "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Gate boundaries are inclusive. Progress is `done / burn_up_iters`,
    /// computed as a single division so that e.g. 20k/50k compares equal to
    /// 0.4.
    pub fn phase_at(&self, iteration: u64) -> PhaseFlags {
        if iteration < self.burn_in_iters {
            return PhaseFlags::default();
        }
        let done = iteration - self.burn_in_iters;
        let progress = if self.burn_up_iters == 0 {
            1.0
        } else {
            done as f64 / self.burn_up_iters as f64
        };
        PhaseFlags {
            in_burn_up: true,
            ptc_enabled: progress >= self.ptc_gate_frac,
            ait_enabled: progress >= self.ait_gate_frac,
        }
    }

    pub fn total_iters(&self) -> u64 {
        self.burn_in_iters + self.burn_up_iters
    }
}

pub fn phase_at(plan: &PhasePlan, iteration: u64) -> PhaseFlags {
    plan.phase_at(iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ema_fixtures() {
        assert_eq!(ema_update(&pv(&[2.0]), &pv(&[4.0]), 0.5).unwrap(), pv(&[3.0]));
        assert_eq!(ema_update(&pv(&[1.0]), &pv(&[0.0]), 0.9996).unwrap(), pv(&[0.9996]));
        let same = pv(&[0.3, -1.0, 7.0]);
        assert_eq!(ema_update(&same, &same, 0.37).unwrap(), same);
    }

    #[test]
    fn ema_errors() {
        assert!(ema_update(&pv(&[1.0]), &pv(&[1.0, 2.0]), 0.5).is_err());
        assert!(ema_update(&pv(&[1.0]), &pv(&[1.0]), 1.0).is_err());
        assert!(ema_update(&pv(&[1.0]), &pv(&[1.0]), 0.0).is_err());
        assert!(ParamVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn phase_fixtures() {
        let plan = PhasePlan::default();
        let f = |i| {
            let p = plan.phase_at(i);
            (p.in_burn_up, p.ptc_enabled, p.ait_enabled)
        };
        assert_eq!(f(0), (false, false, false));
        assert_eq!(f(49_999), (false, false, false));
        assert_eq!(f(50_000), (true, false, false));
        assert_eq!(f(69_999), (true, false, false));
        assert_eq!(f(70_000), (true, true, false));
        assert_eq!(f(79_999), (true, true, false));
        assert_eq!(f(80_000), (true, true, true));
    }

    #[test]
    fn plan_validation() {
        PhasePlan::default().validate("plan").unwrap();
        let bad = PhasePlan {
            ptc_gate_frac: 0.7,
            ..PhasePlan::default()
        };
        assert!(bad.validate("plan").unwrap_err().to_string().contains("plan.ait_gate_frac"));
    }

    proptest! {
        #[test]
        fn ema_contraction(
            pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..16),
            alpha in 0.01..0.99f64,
        ) {
            let t = pv(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let s = pv(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let out = ema_update(&t, &s, alpha).unwrap();
            let lhs = out.max_abs_diff(&s);
            let rhs = alpha * t.max_abs_diff(&s);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }

        #[test]
        fn flags_are_monotone(burn_in in 0u64..500, burn_up in 0u64..500, a in 0u64..1200, b in 0u64..1200) {
            let plan = PhasePlan::scaled(burn_in, burn_up);
            let (lo, hi) = (a.min(b), a.max(b));
            let (p, q) = (plan.phase_at(lo), plan.phase_at(hi));
            prop_assert!(!p.in_burn_up || q.in_burn_up);
            prop_assert!(!p.ptc_enabled || q.ptc_enabled);
            prop_assert!(!p.ait_enabled || q.ait_enabled);
            prop_assert!(!p.ait_enabled || p.ptc_enabled);
        }
    }
}
