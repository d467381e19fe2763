//! Experiment configuration: variant, trust schedule, clip settings,
//! training knobs and environment, loaded from JSON with `key=value`
//! overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::env::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::optimizer::{ClipConfig, ClipMode, LossAggregation, ObjectiveConfig};
use crate::reward::{CompositeReturnConfig, TrustSchedule};
use crate::rollout::{RolloutConfig, RolloutMode};

pub const DAPO_EPS_LOW: f64 = 0.2;
pub const DAPO_EPS_HIGH: f64 = 0.28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    /// Plain group-relative training; no guidance is generated.
    Baseline,
    /// Guidance-conditioned acting, internal reward never blended in.
    SgOnly,
    /// Guidance-conditioned acting with the trapezoid trust schedule.
    #[default]
    SgGr,
    /// Internal reward at full weight from the first step, never annealed.
    ImmediateFull,
    /// Schedule activation moved to step `k`.
    EarlyEntry(u64),
    /// Schedule holds at full weight instead of annealing.
    NoAnnealing,
    /// `SgGr` whose guidance head stops updating after step `k`.
    FrozenGuidance(u64),
    /// `SgGr` with the asymmetric clip.
    DapoSgGr,
}

impl Variant {
    /// Row order of the schedule ablation table.
    pub fn ablation_suite() -> [Variant; 7] {
        [
            Variant::Baseline,
            Variant::SgOnly,
            Variant::ImmediateFull,
            Variant::EarlyEntry(15),
            Variant::EarlyEntry(25),
            Variant::NoAnnealing,
            Variant::SgGr,
        ]
    }

    pub fn rollout_mode(self) -> RolloutMode {
        match self {
            Variant::Baseline => RolloutMode::BaselineNoGuidance,
            _ => RolloutMode::GuidanceConditioned,
        }
    }

    /// Schedule actually used, derived from the configured base schedule.
    pub fn schedule(self, base: TrustSchedule) -> TrustSchedule {
        match self {
            Variant::Baseline | Variant::SgOnly => TrustSchedule::disabled(),
            Variant::ImmediateFull => TrustSchedule::immediate_full(),
            Variant::EarlyEntry(k) => base.with_entry(k),
            Variant::NoAnnealing => base.without_annealing(),
            Variant::SgGr | Variant::FrozenGuidance(_) | Variant::DapoSgGr => base,
        }
    }

    /// Clip actually used. `DapoSgGr` switches to the asymmetric clip unless
    /// the configured clip already is asymmetric.
    pub fn clip(self, base: ClipConfig) -> ClipConfig {
        match self {
            Variant::DapoSgGr if base.mode != ClipMode::AsymmetricDapo => ClipConfig {
                eps_low: DAPO_EPS_LOW,
                eps_high: DAPO_EPS_HIGH,
                mode: ClipMode::AsymmetricDapo,
                ..base
            },
            _ => base,
        }
    }

    pub fn freeze_after(self) -> Option<u64> {
        match self {
            Variant::FrozenGuidance(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => f.write_str("baseline"),
            Variant::SgOnly => f.write_str("sg_only"),
            Variant::SgGr => f.write_str("sg_gr"),
            Variant::ImmediateFull => f.write_str("immediate_full"),
            Variant::EarlyEntry(k) => write!(f, "early_entry({k})"),
            Variant::NoAnnealing => f.write_str("no_annealing"),
            Variant::FrozenGuidance(k) => write!(f, "frozen_guidance({k})"),
            Variant::DapoSgGr => f.write_str("dapo_sg_gr"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `early_entry(15)`, `early_entry:15` and `early_entry15`
    /// (likewise for `frozen_guidance`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::config("variant", format!("unknown variant {s:?}"));
        let arg = |rest: &str| -> Result<u64> {
            let rest = rest.trim_start_matches([':', '(']).trim_end_matches(')');
            rest.parse()
                .map_err(|_| Error::config("variant", format!("bad step in {s:?}")))
        };
        Ok(match s.as_str() {
            "baseline" => Variant::Baseline,
            "sg_only" => Variant::SgOnly,
            "sg_gr" => Variant::SgGr,
            "immediate_full" => Variant::ImmediateFull,
            "no_annealing" => Variant::NoAnnealing,
            "dapo_sg_gr" => Variant::DapoSgGr,
            other => {
                if let Some(rest) = other.strip_prefix("early_entry") {
                    Variant::EarlyEntry(arg(rest)?)
                } else if let Some(rest) = other.strip_prefix("frozen_guidance") {
                    Variant::FrozenGuidance(arg(rest)?)
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|e: Error| serde::de::Error::custom(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Adam step size for the toy policy. The LLM-scale reference value is
    /// 1e-6; a linear-softmax policy needs a far larger step.
    pub learning_rate: f64,
    /// Adam denominator floor. Per-coordinate gradients well below it are
    /// damped instead of being normalized up to a full step.
    pub adam_epsilon: f64,
    pub seeds: Vec<u64>,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub group_size: usize,
    pub tasks_per_step: usize,
    pub max_parallel_episodes: usize,
    /// Gradient steps taken on each collected batch.
    pub update_epochs: usize,
    pub include_guidance_tokens: bool,
    pub aggregation: LossAggregation,
    pub temperature_rollout: f64,
    pub temperature_eval: f64,
    /// Scale of the initial guidance-head weights (0: uninformed guidance).
    pub guidance_prior: f64,
    pub polarity_magnitude: f64,
    pub length_normalized: bool,
    /// Save a resumable checkpoint every this many steps (0: never).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100,
            learning_rate: 5e-2,
            adam_epsilon: 1e-2,
            seeds: vec![1, 2, 3, 4, 5],
            eval_every: 10,
            eval_episodes: 64,
            group_size: 8,
            tasks_per_step: 8,
            max_parallel_episodes: 1,
            update_epochs: 1,
            include_guidance_tokens: true,
            aggregation: LossAggregation::TokenMean,
            temperature_rollout: 1.0,
            temperature_eval: 0.4,
            guidance_prior: 4.0,
            polarity_magnitude: 0.1,
            length_normalized: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("train.{k}");
        if self.total_steps == 0 {
            return Err(Error::config(key("total_steps"), "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config(key("seeds"), "must be non-empty"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(key("learning_rate"), "must be finite and > 0"));
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return Err(Error::config(key("adam_epsilon"), "must be finite and > 0"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config(key("eval_episodes"), "must be >= 1"));
        }
        if self.update_epochs == 0 {
            return Err(Error::config(key("update_epochs"), "must be >= 1"));
        }
        for (k, t) in [
            ("temperature_rollout", self.temperature_rollout),
            ("temperature_eval", self.temperature_eval),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config(key(k), "must be finite and > 0"));
            }
        }
        if !(self.guidance_prior.is_finite() && self.guidance_prior >= 0.0) {
            return Err(Error::config(key("guidance_prior"), "must be finite and >= 0"));
        }
        if !(self.polarity_magnitude.is_finite() && self.polarity_magnitude > 0.0) {
            return Err(Error::config(key("polarity_magnitude"), "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub variant: Variant,
    /// Base schedule; the variant may replace or reshape it.
    #[serde(default)]
    pub schedule: TrustSchedule,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_env")]
    pub env: EnvSpec,
}

fn default_env() -> EnvSpec {
    EnvSpec::default_for(EnvKind::KeyDoor)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::default(),
            schedule: TrustSchedule::default(),
            clip: ClipConfig::default(),
            train: TrainConfig::default(),
            env: default_env(),
        }
    }
}

impl ExperimentConfig {
    pub fn new(variant: Variant, env: EnvKind) -> Self {
        Self {
            variant,
            env: EnvSpec::default_for(env),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::config("<root>", e.to_string()))?,
            None => serde_json::to_value(Self::default())?,
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.effective_schedule().validate()?;
        self.effective_clip().validate()?;
        self.train.validate()?;
        self.env.validate()?;
        self.rollout_config().validate()
    }

    pub fn effective_schedule(&self) -> TrustSchedule {
        self.variant.schedule(self.schedule)
    }

    pub fn effective_clip(&self) -> ClipConfig {
        self.variant.clip(self.clip)
    }

    pub fn reward_config(&self) -> CompositeReturnConfig {
        CompositeReturnConfig {
            polarity_magnitude: self.train.polarity_magnitude,
            schedule: self.effective_schedule(),
            length_normalized: self.train.length_normalized,
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            clip: self.effective_clip(),
            include_guidance_tokens: self.train.include_guidance_tokens,
            aggregation: self.train.aggregation,
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            group_size: self.train.group_size,
            tasks_per_step: self.train.tasks_per_step,
            max_parallel_episodes: self.train.max_parallel_episodes,
            mode: self.variant.rollout_mode(),
        }
    }
}

/// Applies `a.b.c=value` to a JSON tree. The key must already exist so that
/// misspellings are reported; the value is read as JSON, falling back to a
/// plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let parsed: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::config(key, "unknown key"));
            }
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(key, "unknown key"))?;
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::NEVER;

    #[test]
    fn variant_names_round_trip() {
        for v in [
            Variant::Baseline,
            Variant::SgOnly,
            Variant::SgGr,
            Variant::ImmediateFull,
            Variant::EarlyEntry(15),
            Variant::NoAnnealing,
            Variant::FrozenGuidance(40),
            Variant::DapoSgGr,
        ] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("early_entry25".parse::<Variant>().unwrap(), Variant::EarlyEntry(25));
        assert_eq!("frozen_guidance:40".parse::<Variant>().unwrap(), Variant::FrozenGuidance(40));
        assert!("grpo".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_contracts() {
        let base = TrustSchedule::default();
        assert_eq!(Variant::Baseline.rollout_mode(), RolloutMode::BaselineNoGuidance);
        assert_eq!(Variant::SgOnly.rollout_mode(), RolloutMode::GuidanceConditioned);
        assert_eq!(Variant::SgOnly.schedule(base), TrustSchedule::disabled());
        let imm = Variant::ImmediateFull.schedule(base);
        assert_eq!(imm.at_step(1), 1.0);
        assert_eq!(imm.at_step(1000), 1.0);
        assert_eq!(Variant::SgGr.schedule(base), TrustSchedule::new(40, 50, 70, 80).unwrap());
        let early = Variant::EarlyEntry(15).schedule(base);
        assert_eq!((early.warmup_end, early.ramp_end, early.hold_end, early.anneal_end), (15, 25, 70, 80));
        let na = Variant::NoAnnealing.schedule(base);
        assert_eq!((na.hold_end, na.anneal_end), (NEVER, NEVER));
        let dapo = Variant::DapoSgGr.clip(ClipConfig::default());
        assert_eq!((dapo.eps_low, dapo.eps_high, dapo.mode), (0.2, 0.28, ClipMode::AsymmetricDapo));
        assert_eq!(Variant::SgGr.clip(ClipConfig::default()), ClipConfig::grpo(0.2));
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json_pretty().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let empty = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(empty, cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::load_with_overrides(
            None,
            &[
                "variant=early_entry(25)".into(),
                "train.total_steps=7".into(),
                "schedule.anneal_end=-1".into(),
                "clip.kl_coeff=0".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::EarlyEntry(25));
        assert_eq!(cfg.train.total_steps, 7);
        assert_eq!(cfg.schedule.anneal_end, NEVER);
        assert_eq!(cfg.clip.kl_coeff, 0.0);
    }

    fn config_key(r: Result<ExperimentConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        let key = config_key(ExperimentConfig::load_with_overrides(None, &["train.totl_steps=3".into()]));
        assert_eq!(key, "train.totl_steps");
        let key = config_key(ExperimentConfig::load_with_overrides(None, &["train.total_steps=abc".into()]));
        assert_eq!(key, "train.total_steps");
        let key = config_key(ExperimentConfig::from_json(r#"{"train":{"seeds":[]}}"#));
        assert_eq!(key, "train.seeds");
        let key = config_key(ExperimentConfig::from_json(r#"{"train":{"group_size":1}}"#));
        assert_eq!(key, "train.group_size");
        let key = config_key(ExperimentConfig::from_json(r#"{"clip":{"eps_low":0.2,"eps_high":0.3,"mode":"symmetric_grpo"}}"#));
        assert_eq!(key, "clip.eps_high");
        let key = config_key(ExperimentConfig::from_json(r#"{"bogus":1}"#));
        assert_eq!(key, "bogus");
    }
}
