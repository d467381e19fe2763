//! Seedable sparse-reward toy environments behind one interface.
//!
//! * [`KeyDoor`]: fetch a key, open a door in a wall, reach the goal.
//! * [`ChainLab`]: perform an ordered procedure amid distractor actions.
//! * [`NoisyShop`]: search a noisy catalog, pick options, buy.
//!
//! Each environment also exposes `oracle_progress`, a ground-truth progress
//! measure used only by tests and analysis; policies never see it.

pub mod chainlab;
pub mod keydoor;
pub mod noisyshop;

pub use chainlab::{ChainLab, ChainLabFeatures, ChainLabSpec};
pub use keydoor::{KeyDoor, KeyDoorFeatures, KeyDoorSpec};
pub use noisyshop::{NoisyShop, NoisyShopFeatures, NoisyShopSpec};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EnvError, Error, Result};
use crate::policy::FeatureMap;
use crate::trajectory::{ActionId, Event, Observation, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    pub env_reward: f64,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    pub success: bool,
    pub events: Vec<Event>,
}

pub trait Environment: Send {
    fn kind(&self) -> EnvKind;

    fn reset(&mut self, seed: u64) -> Observation;

    fn step(&mut self, action: ActionId) -> Result<StepOutcome, EnvError>;

    fn admissible_actions(&self) -> Vec<ActionId>;

    fn horizon_cap(&self) -> usize;

    fn num_actions(&self) -> usize;

    fn action_name(&self, action: ActionId) -> String;

    /// Ground-truth task progress in `[0, 1]`; test and analysis use only.
    fn oracle_progress(&self) -> f64;

    /// Final task score in `[0, 1]` (partial credit where the environment
    /// defines it; otherwise equal to the success indicator).
    fn score(&self) -> f64;

    fn steps_taken(&self) -> usize;

    fn is_done(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    KeyDoor,
    ChainLab,
    NoisyShop,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::KeyDoor => "keydoor",
            EnvKind::ChainLab => "chainlab",
            EnvKind::NoisyShop => "noisyshop",
        }
    }

    /// Environments whose trajectories are analysed with the navigation-style
    /// error detectors.
    pub fn is_navigation(self) -> bool {
        !matches!(self, EnvKind::NoisyShop)
    }

    /// Environment named by a `"<env>/<seed>"` task id.
    pub fn from_task_id(task_id: &str) -> Option<Self> {
        task_id.split('/').next()?.parse().ok()
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "keydoor" => Ok(EnvKind::KeyDoor),
            "chainlab" => Ok(EnvKind::ChainLab),
            "noisyshop" => Ok(EnvKind::NoisyShop),
            other => Err(Error::config("env", format!("unknown environment {other:?}"))),
        }
    }
}

/// Serializable environment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    KeyDoor(KeyDoorSpec),
    ChainLab(ChainLabSpec),
    NoisyShop(NoisyShopSpec),
}

impl EnvSpec {
    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::KeyDoor => EnvSpec::KeyDoor(KeyDoorSpec::default()),
            EnvKind::ChainLab => EnvSpec::ChainLab(ChainLabSpec::default()),
            EnvKind::NoisyShop => EnvSpec::NoisyShop(NoisyShopSpec::default()),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvSpec::KeyDoor(_) => EnvKind::KeyDoor,
            EnvSpec::ChainLab(_) => EnvKind::ChainLab,
            EnvSpec::NoisyShop(_) => EnvKind::NoisyShop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvSpec::KeyDoor(s) => s.validate(),
            EnvSpec::ChainLab(s) => s.validate(),
            EnvSpec::NoisyShop(s) => s.validate(),
        }
    }

    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            EnvSpec::KeyDoor(s) => Box::new(KeyDoor::new(s.clone())),
            EnvSpec::ChainLab(s) => Box::new(ChainLab::new(s.clone())),
            EnvSpec::NoisyShop(s) => Box::new(NoisyShop::new(s.clone())),
        }
    }

    pub fn feature_map(&self) -> Box<dyn FeatureMap> {
        match self {
            EnvSpec::KeyDoor(s) => Box::new(KeyDoorFeatures::new(s)),
            EnvSpec::ChainLab(s) => Box::new(ChainLabFeatures::new(s)),
            EnvSpec::NoisyShop(s) => Box::new(NoisyShopFeatures::new(s)),
        }
    }

    pub fn num_actions(&self) -> usize {
        self.build().num_actions()
    }

    pub fn horizon_cap(&self) -> usize {
        self.build().horizon_cap()
    }

    pub fn task_id(&self, seed: u64) -> String {
        format!("{}/{}", self.kind(), seed)
    }
}

/// Oracle progress before the first step and after every step of `traj`,
/// obtained by replaying its actions on a fresh instance (length `T + 1`).
pub fn replay_progress(spec: &EnvSpec, traj: &Trajectory) -> Result<Vec<f64>> {
    let mut env = spec.build();
    env.reset(traj.seed);
    let mut progress = Vec::with_capacity(traj.len() + 1);
    progress.push(env.oracle_progress());
    for (i, a) in traj.actions().enumerate() {
        env.step(a)
            .map_err(|source| Error::EpisodeStep { step: i + 1, source })?;
        progress.push(env.oracle_progress());
    }
    Ok(progress)
}

/// splitmix64 finalizer; used to derive layout randomness from seeds.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn env_rng(seed: u64, salt: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(salt)))
}

/// Fraction of each of the `k` most recent actions in the history window.
pub(crate) fn recency_histogram(
    history: &crate::trajectory::History<'_>,
    num_actions: usize,
    window: usize,
    out: &mut Vec<f64>,
) {
    let start = out.len();
    out.resize(start + num_actions, 0.0);
    for a in history.recent_actions(window) {
        if (a as usize) < num_actions {
            out[start + a as usize] += 1.0 / window as f64;
        }
    }
}

pub const RECENCY_WINDOW: usize = 4;
