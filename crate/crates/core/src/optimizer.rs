//! Group-relative policy optimization: composite group returns, standardized
//! advantages, the clipped surrogate (symmetric or asymmetric clip) with an
//! optional KL penalty, and its analytic gradient for the two-head policy.
//!
//! Ratios are taken per token (one guidance token and one action token per
//! step) and the trajectory advantage is broadcast to every token of that
//! trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{FeatureMap, PolicyParams};
use crate::reward::{composite_return, CompositeReturnConfig};
use crate::trajectory::{ActionId, Polarity, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    SymmetricGrpo,
    AsymmetricDapo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub mode: ClipMode,
    #[serde(default = "default_adv_epsilon")]
    pub adv_epsilon: f64,
    #[serde(default = "default_kl")]
    pub kl_coeff: f64,
}

fn default_adv_epsilon() -> f64 {
    1e-8
}

fn default_kl() -> f64 {
    0.01
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self::grpo(0.2)
    }
}

impl ClipConfig {
    pub fn grpo(eps: f64) -> Self {
        Self {
            eps_low: eps,
            eps_high: eps,
            mode: ClipMode::SymmetricGrpo,
            adv_epsilon: default_adv_epsilon(),
            kl_coeff: default_kl(),
        }
    }

    pub fn dapo(eps_low: f64, eps_high: f64) -> Self {
        Self {
            eps_low,
            eps_high,
            mode: ClipMode::AsymmetricDapo,
            adv_epsilon: default_adv_epsilon(),
            kl_coeff: default_kl(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.eps_low) {
            return Err(Error::config("clip.eps_low", "must be finite and > 0"));
        }
        if !positive(self.eps_high) {
            return Err(Error::config("clip.eps_high", "must be finite and > 0"));
        }
        if self.mode == ClipMode::SymmetricGrpo && self.eps_low != self.eps_high {
            return Err(Error::config(
                "clip.eps_high",
                "symmetric_grpo requires eps_low == eps_high",
            ));
        }
        if !positive(self.adv_epsilon) {
            return Err(Error::config("clip.adv_epsilon", "must be finite and > 0"));
        }
        if !(self.kl_coeff.is_finite() && self.kl_coeff >= 0.0) {
            return Err(Error::config("clip.kl_coeff", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn clip(&self, ratio: f64) -> f64 {
        ratio.clamp(1.0 - self.eps_low, 1.0 + self.eps_high)
    }
}

#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub task_id: String,
    pub trajectories: Vec<Trajectory>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::Group(format!(
                "group needs at least 2 trajectories, got {}",
                trajectories.len()
            )));
        }
        let task_id = trajectories[0].task_id.clone();
        if let Some(t) = trajectories.iter().find(|t| t.task_id != task_id) {
            return Err(Error::Group(format!(
                "mixed task ids in one group: {task_id} and {}",
                t.task_id
            )));
        }
        Ok(Self {
            task_id,
            trajectories,
            returns: Vec::new(),
            advantages: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Fills returns at stage `u` and the standardized advantages.
    pub fn score(&mut self, u: f64, cfg: &CompositeReturnConfig, adv_epsilon: f64) {
        self.returns = group_returns(&self.trajectories, u, cfg);
        self.advantages = group_advantages(&self.returns, adv_epsilon);
    }
}

pub fn group_returns(trajectories: &[Trajectory], u: f64, cfg: &CompositeReturnConfig) -> Vec<f64> {
    trajectories
        .iter()
        .map(|t| composite_return(t, u, cfg))
        .collect()
}

/// `(R_i - mean) / (std + eps)` with the population standard deviation.
///
/// Returns are first taken relative to `R_0`. Standardization does not
/// depend on that offset, and exact offsets (integer shifts, for example)
/// then give bitwise identical advantages.
pub fn group_advantages(returns: &[f64], adv_epsilon: f64) -> Vec<f64> {
    let Some(&r0) = returns.first() else {
        return Vec::new();
    };
    let n = returns.len() as f64;
    // `+ 0.0` folds a -0.0 difference into +0.0 so signed zeros cannot break shift invariance.
    let d: Vec<f64> = returns.iter().map(|r| (r - r0) + 0.0).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + adv_epsilon;
    d.iter().map(|x| (x - mean) / denom).collect()
}

pub fn importance_ratio(logp_new: f64, logp_old: f64) -> Result<f64> {
    if !logp_new.is_finite() || !logp_old.is_finite() {
        return Err(Error::InvalidValue(format!(
            "non-finite log-probability (new {logp_new}, old {logp_old})"
        )));
    }
    Ok((logp_new - logp_old).exp())
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = clip.clip(ratio) * advantage;
    unclipped.min(clipped)
}

/// Per-token estimator `logp_new - logp_ref`; its expectation under the
/// new policy is the forward KL. Scaled by `kl_coeff` in the objective.
pub fn kl_penalty(logp_new: f64, logp_ref: f64) -> f64 {
    logp_new - logp_ref
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAggregation {
    /// Every step in the group weighs the same.
    #[default]
    TokenMean,
    /// Every trajectory weighs the same; steps average within it.
    TrajectoryMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub clip: ClipConfig,
    pub include_guidance_tokens: bool,
    pub aggregation: LossAggregation,
}

impl ObjectiveConfig {
    pub fn new(clip: ClipConfig) -> Self {
        Self {
            clip,
            include_guidance_tokens: true,
            aggregation: LossAggregation::TokenMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStep {
    pub features: Vec<f64>,
    /// `None` for rollouts collected without guidance.
    pub guidance: Option<Polarity>,
    pub action: ActionId,
    pub admissible: Vec<ActionId>,
    pub logp_guidance_old: f64,
    pub logp_action_old: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTrajectory {
    pub steps: Vec<EncodedStep>,
    pub advantage: f64,
}

/// A scored group with features materialized once, ready for several
/// update epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGroup {
    pub trajectories: Vec<EncodedTrajectory>,
}

impl EncodedGroup {
    pub fn encode(group: &GroupBatch, fmap: &dyn FeatureMap) -> Result<Self> {
        if group.advantages.len() != group.trajectories.len() {
            return Err(Error::Group("advantages not computed for group".into()));
        }
        let trajectories = group
            .trajectories
            .iter()
            .zip(&group.advantages)
            .map(|(traj, &advantage)| {
                let steps = (0..traj.len())
                    .map(|i| {
                        let s = &traj.steps()[i];
                        let h = traj.history_prefix(i + 1)?;
                        Ok(EncodedStep {
                            features: fmap.encode(&h, &s.observation),
                            guidance: traj.guided.then_some(s.guidance.polarity),
                            action: s.action,
                            admissible: s.admissible.clone(),
                            logp_guidance_old: s.logp_guidance,
                            logp_action_old: s.logp_action,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncodedTrajectory { steps, advantage })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { trajectories })
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    fn step_weights(&self, aggregation: LossAggregation) -> Vec<f64> {
        match aggregation {
            LossAggregation::TokenMean => {
                let w = 1.0 / self.num_steps().max(1) as f64;
                vec![w; self.trajectories.len()]
            }
            LossAggregation::TrajectoryMean => {
                let g = self.trajectories.len() as f64;
                self.trajectories
                    .iter()
                    .map(|t| 1.0 / (g * t.steps.len().max(1) as f64))
                    .collect()
            }
        }
    }

    fn check(&self, params: &PolicyParams) -> Result<()> {
        if self.trajectories.len() < 2 {
            return Err(Error::Group(format!(
                "group needs at least 2 trajectories, got {}",
                self.trajectories.len()
            )));
        }
        for step in self.trajectories.iter().flat_map(|t| &t.steps) {
            if step.features.len() != params.feature_dim {
                return Err(Error::Dimension(format!(
                    "logged features have length {}, params expect {}",
                    step.features.len(),
                    params.feature_dim
                )));
            }
            if step.admissible.iter().any(|&a| a as usize >= params.num_actions) {
                return Err(Error::Dimension(format!(
                    "logged admissible set {:?} exceeds {} actions",
                    step.admissible, params.num_actions
                )));
            }
        }
        Ok(())
    }

    /// Objective value to be maximized: mean clipped surrogate minus the
    /// weighted KL estimate.
    pub fn objective(
        &self,
        params: &PolicyParams,
        reference: Option<&PolicyParams>,
        cfg: &ObjectiveConfig,
    ) -> Result<f64> {
        self.check(params)?;
        let temp = params.temperature_rollout;
        let weights = self.step_weights(cfg.aggregation);
        let kl = kl_reference(reference, cfg)?;
        let mut total = 0.0;
        for (traj, w) in self.trajectories.iter().zip(weights) {
            let adv = traj.advantage;
            for s in &traj.steps {
                let mut token = 0.0;
                let lp = params.log_prob_action(&s.features, s.guidance, s.action, &s.admissible, temp)?;
                token += clipped_surrogate(importance_ratio(lp, s.logp_action_old)?, adv, &cfg.clip);
                if let Some(r) = kl {
                    let lr = r.log_prob_action(&s.features, s.guidance, s.action, &s.admissible, temp)?;
                    token -= cfg.clip.kl_coeff * kl_penalty(lp, lr);
                }
                if let (Some(z), true) = (s.guidance, cfg.include_guidance_tokens) {
                    let lp = params.log_prob_guidance(&s.features, z, temp)?;
                    token += clipped_surrogate(importance_ratio(lp, s.logp_guidance_old)?, adv, &cfg.clip);
                    if let Some(r) = kl {
                        let lr = r.log_prob_guidance(&s.features, z, temp)?;
                        token -= cfg.clip.kl_coeff * kl_penalty(lp, lr);
                    }
                }
                total += w * token;
            }
        }
        Ok(total)
    }

    /// Gradient of [`Self::objective`] with respect to the flat parameters.
    pub fn gradient(
        &self,
        params: &PolicyParams,
        reference: Option<&PolicyParams>,
        cfg: &ObjectiveConfig,
    ) -> Result<Vec<f64>> {
        self.check(params)?;
        let temp = params.temperature_rollout;
        let weights = self.step_weights(cfg.aggregation);
        let kl_on = kl_reference(reference, cfg)?.is_some();
        let beta = cfg.clip.kl_coeff;
        let mut grad = vec![0.0; params.num_params()];
        for (traj, w) in self.trajectories.iter().zip(weights) {
            let adv = traj.advantage;
            for s in &traj.steps {
                let lp = params.log_prob_action(&s.features, s.guidance, s.action, &s.admissible, temp)?;
                let coeff = w * (surrogate_slope(lp, s.logp_action_old, adv, &cfg.clip)?
                    - if kl_on { beta } else { 0.0 });
                if coeff != 0.0 {
                    params.accumulate_grad_action(
                        &s.features,
                        s.guidance,
                        s.action,
                        &s.admissible,
                        temp,
                        coeff,
                        &mut grad,
                    )?;
                }
                if let (Some(z), true) = (s.guidance, cfg.include_guidance_tokens) {
                    let lp = params.log_prob_guidance(&s.features, z, temp)?;
                    let coeff = w * (surrogate_slope(lp, s.logp_guidance_old, adv, &cfg.clip)?
                        - if kl_on { beta } else { 0.0 });
                    if coeff != 0.0 {
                        params.accumulate_grad_guidance(&s.features, z, temp, coeff, &mut grad)?;
                    }
                }
            }
        }
        Ok(grad)
    }
}

fn kl_reference<'a>(reference: Option<&'a PolicyParams>, cfg: &ObjectiveConfig) -> Result<Option<&'a PolicyParams>> {
    if cfg.clip.kl_coeff == 0.0 {
        return Ok(None);
    }
    match reference {
        Some(r) => Ok(Some(r)),
        None => Err(Error::Policy("kl_coeff > 0 needs a reference policy".into())),
    }
}

/// d(clipped surrogate)/d(log pi): `ratio * A` on the unclipped branch of
/// the min, zero where the clipped branch is active.
fn surrogate_slope(logp_new: f64, logp_old: f64, adv: f64, clip: &ClipConfig) -> Result<f64> {
    let r = importance_ratio(logp_new, logp_old)?;
    if r * adv <= clip.clip(r) * adv {
        Ok(r * adv)
    } else {
        Ok(0.0)
    }
}

/// Scores, encodes and differentiates one group in a single call.
pub fn policy_gradient(
    group: &GroupBatch,
    fmap: &dyn FeatureMap,
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    cfg: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    if group.len() < 2 {
        return Err(Error::Group("group needs at least 2 trajectories".into()));
    }
    EncodedGroup::encode(group, fmap)?.gradient(params, reference, cfg)
}

/// Adam ascent on the flat parameter vector. Guidance-head coordinates are
/// skipped entirely (moments included) while that head is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<u32>,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: vec![0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &[f64]) -> Result<()> {
        if grad.len() != self.m.len() || params.num_params() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer has {} slots, params {}, gradient {}",
                self.m.len(),
                params.num_params(),
                grad.len()
            )));
        }
        let skip = if params.guidance_frozen {
            params.guidance_len()
        } else {
            0
        };
        let mut delta = vec![0.0; grad.len()];
        for i in skip..grad.len() {
            let g = grad[i];
            self.t[i] += 1;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(self.t[i] as i32));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(self.t[i] as i32));
            delta[i] = self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        params.apply_update(&delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_examples() {
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0, 1.0], 1e-8), vec![0.0; 4]);
        // mean 0.5, population std 0.5
        let a = group_advantages(&[0.0, 1.0], 1e-8);
        let expect = 0.5 / (0.5 + 1e-8);
        assert!((a[0] + expect).abs() < 1e-15 && (a[1] - expect).abs() < 1e-15);
        let a = group_advantages(&[0.0, 0.0, 1.0, 1.0], 1e-8);
        for (x, e) in a.iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((x - e).abs() < 1e-7);
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratio(-1.3, -1.3).unwrap(), 1.0);
        assert!((importance_ratio(-1.0 + 2f64.ln(), -1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((importance_ratio(-1.0 - 4f64.ln(), -1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(importance_ratio(f64::NAN, -1.0).is_err());
        assert!(importance_ratio(-1.0, f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn surrogate_examples() {
        let g = ClipConfig::grpo(0.2);
        assert_eq!(clipped_surrogate(1.0, 1.0, &g), 1.0);
        assert_eq!(clipped_surrogate(2.0, 1.0, &g), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, &g), -0.8);
        let d = ClipConfig::dapo(0.2, 0.28);
        assert_eq!(clipped_surrogate(2.0, 1.0, &d), 1.28);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_penalty(-0.7, -0.7), 0.0);
        assert!((0.01 * kl_penalty(-0.2, -0.5) - 0.003).abs() < 1e-15);
    }

    #[test]
    fn symmetric_mode_requires_equal_eps() {
        let mut c = ClipConfig::grpo(0.2);
        c.eps_high = 0.28;
        assert!(c.validate().is_err());
        assert!(ClipConfig::dapo(0.2, 0.28).validate().is_ok());
    }

    #[test]
    fn singleton_group_rejected() {
        let mut t = Trajectory::new("a", 0, 3, true);
        t.push_step(crate::trajectory::tests::step_with(Polarity::Neutral, 0))
            .unwrap();
        t.finish(crate::trajectory::Termination::Failure, 0.0).unwrap();
        assert!(GroupBatch::new(vec![t]).is_err());
    }

    #[test]
    fn adam_respects_freeze() {
        let mut p = PolicyParams::zeros(2, 2);
        p.freeze_guidance_head();
        let mut opt = Adam::new(p.num_params(), 0.05);
        let g = vec![1.0; p.num_params()];
        opt.step(&mut p, &g).unwrap();
        assert!(p.guidance_weights.iter().all(|&w| w == 0.0));
        assert!(p.action_weights.iter().all(|&w| (w - 0.05).abs() < 1e-9));
    }
}
