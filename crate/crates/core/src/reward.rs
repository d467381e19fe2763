//! Polarity reward mapping, the trapezoid trust schedule and the composite
//! trajectory return `R_env + lambda(u) * sum_t g(z_t)`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::trajectory::{Polarity, Trajectory};

/// Breakpoint value standing for "never" (+infinity).
pub const NEVER: u64 = u64::MAX;

/// Four breakpoints `warmup_end <= ramp_end <= hold_end <= anneal_end`.
///
/// Phases: zero up to `warmup_end`, linear ramp to one up to `ramp_end`,
/// one up to `hold_end`, linear decay to zero up to `anneal_end`, zero after.
/// Equal consecutive breakpoints collapse the corresponding ramp into a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustSchedule {
    #[serde(with = "breakpoint")]
    pub warmup_end: u64,
    #[serde(with = "breakpoint")]
    pub ramp_end: u64,
    #[serde(with = "breakpoint")]
    pub hold_end: u64,
    #[serde(with = "breakpoint")]
    pub anneal_end: u64,
}

impl Default for TrustSchedule {
    fn default() -> Self {
        Self {
            warmup_end: 40,
            ramp_end: 50,
            hold_end: 70,
            anneal_end: 80,
        }
    }
}

impl TrustSchedule {
    pub fn new(warmup_end: u64, ramp_end: u64, hold_end: u64, anneal_end: u64) -> Result<Self> {
        let s = Self {
            warmup_end,
            ramp_end,
            hold_end,
            anneal_end,
        };
        s.validate()?;
        Ok(s)
    }

    /// lambda identically zero.
    pub fn disabled() -> Self {
        Self {
            warmup_end: NEVER,
            ramp_end: NEVER,
            hold_end: NEVER,
            anneal_end: NEVER,
        }
    }

    /// lambda = 1 for every stage after 0.
    pub fn immediate_full() -> Self {
        Self {
            warmup_end: 0,
            ramp_end: 0,
            hold_end: NEVER,
            anneal_end: NEVER,
        }
    }

    pub fn without_annealing(self) -> Self {
        Self {
            hold_end: NEVER,
            anneal_end: NEVER,
            ..self
        }
    }

    /// Moves the activation point to `entry`, keeping the ramp width. The
    /// hold and anneal breakpoints stay where they are unless the new ramp
    /// would overrun them.
    pub fn with_entry(self, entry: u64) -> Self {
        let width = self.ramp_end.saturating_sub(self.warmup_end);
        let ramp_end = entry.saturating_add(width);
        let hold_end = self.hold_end.max(ramp_end);
        Self {
            warmup_end: entry,
            ramp_end,
            hold_end,
            anneal_end: self.anneal_end.max(hold_end),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_end <= self.ramp_end
            && self.ramp_end <= self.hold_end
            && self.hold_end <= self.anneal_end)
        {
            return Err(Error::config(
                "schedule",
                format!(
                    "breakpoints must be non-decreasing, got ({}, {}, {}, {})",
                    fmt_bp(self.warmup_end),
                    fmt_bp(self.ramp_end),
                    fmt_bp(self.hold_end),
                    fmt_bp(self.anneal_end)
                ),
            ));
        }
        Ok(())
    }

    /// `lambda(u)` for a (possibly fractional) stage `u >= 0`.
    pub fn trust_coefficient(&self, u: f64) -> f64 {
        let [u1, u2, u3, u4] = [self.warmup_end, self.ramp_end, self.hold_end, self.anneal_end].map(to_f64);
        if u <= u1 {
            0.0
        } else if u <= u2 {
            // u1 < u <= u2 implies u2 > u1, so the ramp has positive width.
            (u - u1) / (u2 - u1)
        } else if u <= u3 {
            1.0
        } else if u <= u4 {
            (u4 - u) / (u4 - u3)
        } else {
            0.0
        }
    }

    pub fn at_step(&self, step: u64) -> f64 {
        self.trust_coefficient(step as f64)
    }
}

fn to_f64(bp: u64) -> f64 {
    if bp == NEVER {
        f64::INFINITY
    } else {
        bp as f64
    }
}

fn fmt_bp(bp: u64) -> String {
    if bp == NEVER {
        "inf".into()
    } else {
        bp.to_string()
    }
}

/// Config encoding of breakpoints: non-negative integers, `-1` for +infinity.
mod breakpoint {
    use super::*;

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if *v == NEVER {
            s.serialize_i64(-1)
        } else {
            s.serialize_u64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
        let v = i64::deserialize(d)?;
        match v {
            -1 => Ok(NEVER),
            v if v >= 0 => Ok(v as u64),
            v => Err(serde::de::Error::custom(format!(
                "breakpoint must be >= 0 or -1 (infinity), got {v}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeReturnConfig {
    #[serde(default = "default_magnitude")]
    pub polarity_magnitude: f64,
    #[serde(default)]
    pub schedule: TrustSchedule,
    /// Divide the summed guidance reward by the episode length.
    #[serde(default)]
    pub length_normalized: bool,
}

fn default_magnitude() -> f64 {
    0.1
}

impl Default for CompositeReturnConfig {
    fn default() -> Self {
        Self {
            polarity_magnitude: default_magnitude(),
            schedule: TrustSchedule::default(),
            length_normalized: false,
        }
    }
}

impl CompositeReturnConfig {
    pub fn with_schedule(schedule: TrustSchedule) -> Self {
        Self {
            schedule,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.polarity_magnitude.is_finite() && self.polarity_magnitude > 0.0) {
            return Err(Error::config(
                "polarity_magnitude",
                format!("must be finite and > 0, got {}", self.polarity_magnitude),
            ));
        }
        self.schedule.validate()
    }
}

pub fn polarity_to_reward(z: Polarity, cfg: &CompositeReturnConfig) -> f64 {
    match z {
        Polarity::Positive => cfg.polarity_magnitude,
        Polarity::Neutral => 0.0,
        Polarity::Negative => -cfg.polarity_magnitude,
    }
}

pub fn trust_coefficient(u: f64, schedule: &TrustSchedule) -> f64 {
    schedule.trust_coefficient(u)
}

/// Summed internal reward of a trajectory. Rollouts recorded without
/// guidance carry neutral placeholders and therefore sum to zero.
///
/// Computed as `m * (positives - negatives)`, so a trajectory whose
/// polarities share one sign gets exactly `m * T` (no accumulated rounding).
pub fn guidance_return(traj: &Trajectory, cfg: &CompositeReturnConfig) -> f64 {
    let net: i64 = traj.polarities().map(|z| z.sign() as i64).sum();
    let sum = cfg.polarity_magnitude * net as f64;
    if cfg.length_normalized && !traj.is_empty() {
        sum / traj.len() as f64
    } else {
        sum
    }
}

pub fn composite_return(traj: &Trajectory, u: f64, cfg: &CompositeReturnConfig) -> f64 {
    let lambda = cfg.schedule.trust_coefficient(u);
    if lambda == 0.0 {
        return traj.env_reward();
    }
    traj.env_reward() + lambda * guidance_return(traj, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::step_with;
    use crate::trajectory::Termination;

    fn traj(polarities: &[Polarity], env_reward: f64) -> Trajectory {
        let mut t = Trajectory::new("t", 0, 30, true);
        for (i, &p) in polarities.iter().enumerate() {
            t.push_step(step_with(p, (i % 4) as u32)).unwrap();
        }
        let term = if env_reward == 1.0 {
            Termination::Success
        } else {
            Termination::Failure
        };
        t.finish(term, env_reward).unwrap();
        t
    }

    use Polarity::*;

    #[test]
    fn polarity_mapping() {
        let cfg = CompositeReturnConfig::default();
        assert_eq!(polarity_to_reward(Positive, &cfg), 0.1);
        assert_eq!(polarity_to_reward(Neutral, &cfg), 0.0);
        assert_eq!(polarity_to_reward(Negative, &cfg), -0.1);
    }

    #[test]
    fn schedule_examples() {
        let s = TrustSchedule::default();
        // Oracle: the interpolation formulas written out by hand.
        let ramp = |u: f64| (u - 40.0) / (50.0 - 40.0);
        let anneal = |u: f64| (80.0 - u) / (80.0 - 70.0);
        assert_eq!(s.trust_coefficient(30.0), 0.0);
        assert_eq!(s.trust_coefficient(45.0), ramp(45.0));
        assert_eq!(s.trust_coefficient(45.0), 0.5);
        assert_eq!(s.trust_coefficient(60.0), 1.0);
        assert_eq!(s.trust_coefficient(75.0), anneal(75.0));
        assert_eq!(s.trust_coefficient(75.0), 0.5);
        assert_eq!(s.trust_coefficient(1000.0), 0.0);
    }

    #[test]
    fn degenerate_schedules() {
        let full = TrustSchedule::immediate_full();
        assert_eq!(full.trust_coefficient(0.0), 0.0);
        assert_eq!(full.trust_coefficient(1.0), 1.0);
        assert_eq!(full.trust_coefficient(1e9), 1.0);
        let off = TrustSchedule::disabled();
        assert_eq!(off.trust_coefficient(1e12), 0.0);
        let step = TrustSchedule::new(10, 10, 20, 20).unwrap();
        assert_eq!(step.trust_coefficient(10.0), 0.0);
        assert_eq!(step.trust_coefficient(10.5), 1.0);
        assert_eq!(step.trust_coefficient(20.0), 1.0);
        assert_eq!(step.trust_coefficient(20.5), 0.0);
    }

    #[test]
    fn early_entry_keeps_ramp_width() {
        let s = TrustSchedule::default().with_entry(15);
        assert_eq!(s, TrustSchedule::new(15, 25, 70, 80).unwrap());
        let s = TrustSchedule::default().with_entry(25);
        assert_eq!(s, TrustSchedule::new(25, 35, 70, 80).unwrap());
    }

    #[test]
    fn unordered_breakpoints_rejected() {
        assert!(TrustSchedule::new(50, 40, 70, 80).is_err());
    }

    #[test]
    fn sentinel_round_trip() {
        let s = TrustSchedule::default().without_annealing();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(
            json,
            r#"{"warmup_end":40,"ramp_end":50,"hold_end":-1,"anneal_end":-1}"#
        );
        let back: TrustSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<TrustSchedule>(
            r#"{"warmup_end":-2,"ramp_end":50,"hold_end":70,"anneal_end":80}"#
        )
        .is_err());
    }

    #[test]
    fn guidance_return_examples() {
        let cfg = CompositeReturnConfig::default();
        let hand_sum = 0.1 + 0.1 - 0.1;
        assert_eq!(guidance_return(&traj(&[Positive, Positive, Negative], 0.0), &cfg), hand_sum);
        assert_eq!(guidance_return(&traj(&[Neutral, Neutral, Neutral], 0.0), &cfg), 0.0);
        assert_eq!(guidance_return(&traj(&[Negative], 0.0), &cfg), -0.1);
    }

    #[test]
    fn length_normalized_variant() {
        let cfg = CompositeReturnConfig {
            length_normalized: true,
            ..Default::default()
        };
        let g = guidance_return(&traj(&[Positive, Positive, Neutral, Neutral], 0.0), &cfg);
        assert!((g - 0.05).abs() < 1e-15);
    }

    #[test]
    fn composite_examples() {
        let cfg = CompositeReturnConfig::default();
        let t = traj(&[Positive, Positive, Negative], 1.0);
        let expected = 1.0 + 1.0 * (0.1 + 0.1 - 0.1);
        assert_eq!(composite_return(&t, 60.0, &cfg), expected);
        assert!((composite_return(&t, 60.0, &cfg) - 1.1).abs() < 1e-15);
        assert_eq!(composite_return(&t, 0.0, &cfg), 1.0);
        let z = traj(&[Neutral, Neutral, Neutral], 0.0);
        for u in [0.0, 45.0, 60.0, 75.0, 200.0] {
            assert_eq!(composite_return(&z, u, &cfg), 0.0);
        }
    }
}
