//! Grouped rollout collection with the two-stage guidance -> action protocol.
//!
//! Every episode draws from its own ChaCha stream keyed by
//! `(master seed, stage, task seed, rollout index)`, so collection order and
//! thread count cannot change any sampled value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{mix64, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::optimizer::GroupBatch;
use crate::policy::{FeatureMap, PolicyParams};
use crate::trajectory::{GuidanceSignal, History, Step, Termination, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    BaselineNoGuidance,
    GuidanceConditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub tasks_per_step: usize,
    pub max_parallel_episodes: usize,
    pub mode: RolloutMode,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            tasks_per_step: 8,
            max_parallel_episodes: 1,
            mode: RolloutMode::GuidanceConditioned,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("train.group_size", "must be >= 2"));
        }
        if self.tasks_per_step == 0 {
            return Err(Error::config("train.tasks_per_step", "must be >= 1"));
        }
        if self.max_parallel_episodes == 0 {
            return Err(Error::config("train.max_parallel_episodes", "must be >= 1"));
        }
        Ok(())
    }
}

/// Independent random stream for one episode.
pub fn episode_rng(master_seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let stream = key.iter().fold(0x5eed_u64, |acc, &k| mix64(acc ^ mix64(k)));
    rng.set_stream(stream);
    rng
}

/// Runs one episode from a fresh reset of `env` on `task_seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    env: &mut dyn Environment,
    fmap: &dyn FeatureMap,
    params: &PolicyParams,
    mode: RolloutMode,
    temperature: f64,
    task_id: &str,
    task_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let guided = mode == RolloutMode::GuidanceConditioned;
    let mut obs = env.reset(task_seed);
    let mut traj = Trajectory::new(task_id, task_seed, env.horizon_cap(), guided);
    loop {
        let t = traj.len() + 1;
        let x = fmap.encode(&History::from_steps(traj.steps()), &obs);
        let (guidance, logp_guidance) = if guided {
            let (z, lp) = params.sample_guidance_from_features(&x, temperature, rng)?;
            (GuidanceSignal::templated(z), lp)
        } else {
            (GuidanceSignal::placeholder(), 0.0)
        };
        let admissible = env.admissible_actions();
        let z = guided.then_some(guidance.polarity);
        let (action, logp_action) =
            params.sample_action_from_features(&x, z, &admissible, temperature, rng)?;
        let out = env
            .step(action)
            .map_err(|source| Error::EpisodeStep { step: t, source })?;
        traj.push_step(Step {
            observation: obs,
            guidance,
            action,
            logp_guidance,
            logp_action,
            admissible,
            events: out.info.events,
        })?;
        obs = out.observation;
        if out.done {
            let termination = if out.info.success {
                Termination::Success
            } else if traj.len() >= env.horizon_cap() {
                Termination::StepCap
            } else {
                Termination::Failure
            };
            traj.finish(termination, out.env_reward)?;
            return Ok(traj);
        }
    }
}

/// Collects rollout groups for a fixed environment spec and feature map.
pub struct RolloutEngine {
    spec: EnvSpec,
    fmap: Box<dyn FeatureMap>,
    cfg: RolloutConfig,
    pool: Option<rayon::ThreadPool>,
}

impl RolloutEngine {
    pub fn new(spec: EnvSpec, cfg: RolloutConfig) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let pool = if cfg.max_parallel_episodes > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.max_parallel_episodes)
                    .build()
                    .map_err(|e| Error::config("train.max_parallel_episodes", e.to_string()))?,
            )
        } else {
            None
        };
        let fmap = spec.feature_map();
        Ok(Self { spec, fmap, cfg, pool })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn feature_map(&self) -> &dyn FeatureMap {
        self.fmap.as_ref()
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.cfg
    }

    /// Runs independent episodes `(task_seed, stream key)` and returns them
    /// in input order.
    pub fn run_many(
        &self,
        jobs: &[(u64, Vec<u64>)],
        params: &PolicyParams,
        master_seed: u64,
        temperature: f64,
    ) -> Result<Vec<Trajectory>> {
        let run = |(task_seed, key): &(u64, Vec<u64>)| -> Result<Trajectory> {
            let mut env = self.spec.build();
            let mut rng = episode_rng(master_seed, key);
            run_episode(
                env.as_mut(),
                self.fmap.as_ref(),
                params,
                self.cfg.mode,
                temperature,
                &self.spec.task_id(*task_seed),
                *task_seed,
                &mut rng,
            )
        };
        match &self.pool {
            Some(pool) => pool.install(|| jobs.par_iter().map(run).collect()),
            None => jobs.iter().map(run).collect(),
        }
    }

    /// `G` rollouts on one task instance with distinct streams.
    pub fn collect_group(
        &self,
        task_seed: u64,
        params: &PolicyParams,
        master_seed: u64,
        stage: u64,
    ) -> Result<GroupBatch> {
        Ok(self
            .collect_groups(&[task_seed], params, master_seed, stage)?
            .pop()
            .expect("one group"))
    }

    pub fn collect_groups(
        &self,
        task_seeds: &[u64],
        params: &PolicyParams,
        master_seed: u64,
        stage: u64,
    ) -> Result<Vec<GroupBatch>> {
        let g = self.cfg.group_size;
        let jobs: Vec<(u64, Vec<u64>)> = task_seeds
            .iter()
            .flat_map(|&s| (0..g as u64).map(move |i| (s, vec![stage, s, i])))
            .collect();
        let mut trajectories = self
            .run_many(&jobs, params, master_seed, params.temperature_rollout)?
            .into_iter();
        task_seeds
            .iter()
            .map(|_| GroupBatch::new(trajectories.by_ref().take(g).collect()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;
    use crate::trajectory::Polarity;

    fn engine(mode: RolloutMode, group_size: usize, parallel: usize) -> RolloutEngine {
        RolloutEngine::new(
            EnvSpec::default_for(EnvKind::KeyDoor),
            RolloutConfig {
                group_size,
                tasks_per_step: 2,
                max_parallel_episodes: parallel,
                mode,
            },
        )
        .unwrap()
    }

    fn params(e: &RolloutEngine) -> PolicyParams {
        PolicyParams::initial(e.feature_map(), e.spec().num_actions(), 2.0)
    }

    #[test]
    fn baseline_records_neutral_placeholders() {
        let e = engine(RolloutMode::BaselineNoGuidance, 4, 1);
        let g = e.collect_group(3, &params(&e), 1, 1).unwrap();
        for t in &g.trajectories {
            assert!(!t.guided);
            assert!(t.polarities().all(|z| z == Polarity::Neutral));
            assert!(t.steps().iter().all(|s| s.logp_guidance == 0.0));
        }
    }

    #[test]
    fn group_shares_task_and_is_deterministic() {
        let e = engine(RolloutMode::GuidanceConditioned, 8, 1);
        let p = params(&e);
        let a = e.collect_group(42, &p, 7, 3).unwrap();
        let b = e.collect_group(42, &p, 7, 3).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.trajectories.iter().all(|t| t.task_id == "keydoor/42" && t.seed == 42));
        assert_eq!(a.trajectories, b.trajectories);
        let distinct = a
            .trajectories
            .iter()
            .filter(|t| **t != a.trajectories[0])
            .count();
        assert!(distinct > 0, "streams should differ across rollouts");
    }

    #[test]
    fn parallel_matches_serial() {
        let serial = engine(RolloutMode::GuidanceConditioned, 4, 1);
        let parallel = engine(RolloutMode::GuidanceConditioned, 4, 4);
        let p = params(&serial);
        let a = serial.collect_groups(&[1, 2, 3], &p, 9, 5).unwrap();
        let b = parallel.collect_groups(&[1, 2, 3], &p, 9, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.trajectories, y.trajectories);
        }
    }

    #[test]
    fn group_size_one_rejected() {
        let r = RolloutEngine::new(
            EnvSpec::default_for(EnvKind::KeyDoor),
            RolloutConfig {
                group_size: 1,
                ..Default::default()
            },
        );
        assert!(r.is_err());
    }

    #[test]
    fn step_cap_episode_terminates_with_cap() {
        // A policy that never picks up the key cannot succeed.
        let e = engine(RolloutMode::GuidanceConditioned, 2, 1);
        let mut p = params(&e);
        let cols = p.feature_dim + 3;
        p.action_weights[crate::env::keydoor::PICKUP as usize * cols] = -50.0;
        let g = e.collect_group(5, &p, 1, 1).unwrap();
        for t in &g.trajectories {
            assert_eq!(t.terminated(), Some(Termination::StepCap));
            assert_eq!(t.len(), 30);
            assert_eq!(t.env_reward(), 0.0);
        }
    }
}
