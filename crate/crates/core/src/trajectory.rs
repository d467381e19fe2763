//! Episode data model: interleaved observation / guidance / action steps,
//! history prefixes and the JSON-Lines trajectory log format.
//!
//! A [`Step`] always carries its guidance record next to its action, so the
//! "guidance before action" ordering is a property of the type rather than of
//! list positions. Log-probabilities are written once at sampling time and
//! are never recomputed or mutated afterwards.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ActionId = u32;

pub const DEFAULT_RATIONALE_MAX: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

    /// Row index in the guidance head and column offset in the action head.
    pub fn index(self) -> usize {
        match self {
            Polarity::Negative => 0,
            Polarity::Neutral => 1,
            Polarity::Positive => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Neutral => 0,
            Polarity::Positive => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Positive => "positive",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            "positive" => Ok(Polarity::Positive),
            other => Err(Error::InvalidValue(format!("unknown polarity label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GuidanceSignal {
    pub polarity: Polarity,
    pub rationale: String,
}

impl GuidanceSignal {
    pub fn new(polarity: Polarity, rationale: impl Into<String>) -> Result<Self> {
        Self::with_limit(polarity, rationale, DEFAULT_RATIONALE_MAX)
    }

    pub fn with_limit(polarity: Polarity, rationale: impl Into<String>, max_chars: usize) -> Result<Self> {
        let rationale = rationale.into();
        let len = rationale.chars().count();
        if len > max_chars {
            return Err(Error::Trajectory(format!(
                "rationale has {len} characters, limit is {max_chars}"
            )));
        }
        Ok(Self { polarity, rationale })
    }

    /// Templated rationale; only the polarity is ever machine-read.
    pub fn templated(polarity: Polarity) -> Self {
        let rationale = match polarity {
            Polarity::Positive => "the last step moved the task forward",
            Polarity::Neutral => "no clear progress either way",
            Polarity::Negative => "the last step did not help the task",
        };
        Self {
            polarity,
            rationale: rationale.to_string(),
        }
    }

    /// Recorded in place of sampled guidance when rollouts run without it.
    pub fn placeholder() -> Self {
        Self {
            polarity: Polarity::Neutral,
            rationale: String::new(),
        }
    }
}

/// Compact symbolic observation: a short key plus an integer state record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub key: String,
    pub state: Vec<i64>,
}

impl Observation {
    pub fn new(key: impl Into<String>, state: Vec<i64>) -> Self {
        Self { key: key.into(), state }
    }
}

/// Semantic events reported by an environment's info channel. The error
/// detectors read these instead of re-deriving semantics from action ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Visit { location: String, revisit: bool },
    Examine { object: String, relevant: bool },
    Pickup { object: String, target: bool },
    Use { object: String, relevant: bool },
    Open { object: String },
    Search { query: String },
    BackToSearch,
    Buy { premature: bool },
    NoOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StepRecord", into = "StepRecord")]
pub struct Step {
    pub observation: Observation,
    pub guidance: GuidanceSignal,
    pub action: ActionId,
    pub logp_guidance: f64,
    pub logp_action: f64,
    /// Admissible set at sampling time; needed to recompute the masked action
    /// distribution under new parameters.
    pub admissible: Vec<ActionId>,
    pub events: Vec<Event>,
}

impl Step {
    pub fn validate(&self) -> Result<()> {
        let nonpositive = |x: f64| x <= 0.0;
        if !nonpositive(self.logp_guidance) || !nonpositive(self.logp_action) {
            return Err(Error::Trajectory(format!(
                "log-probabilities must be finite and <= 0 (guidance {}, action {})",
                self.logp_guidance, self.logp_action
            )));
        }
        if !self.admissible.contains(&self.action) {
            return Err(Error::Trajectory(format!(
                "action {} not in admissible set {:?}",
                self.action, self.admissible
            )));
        }
        if self.guidance.rationale.chars().count() > DEFAULT_RATIONALE_MAX {
            return Err(Error::Trajectory("rationale exceeds length limit".into()));
        }
        Ok(())
    }
}

/// Flat wire form of a step: the polarity is a direct field of the record.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    observation: Observation,
    polarity: Option<Polarity>,
    #[serde(default)]
    rationale: String,
    action: ActionId,
    logp_guidance: f64,
    logp_action: f64,
    admissible: Vec<ActionId>,
    #[serde(default)]
    events: Vec<Event>,
}

impl TryFrom<StepRecord> for Step {
    type Error = Error;

    fn try_from(r: StepRecord) -> Result<Self> {
        let polarity = r
            .polarity
            .ok_or_else(|| Error::Trajectory("step has no guidance polarity".into()))?;
        let step = Step {
            observation: r.observation,
            guidance: GuidanceSignal {
                polarity,
                rationale: r.rationale,
            },
            action: r.action,
            logp_guidance: r.logp_guidance,
            logp_action: r.logp_action,
            admissible: r.admissible,
            events: r.events,
        };
        step.validate()?;
        Ok(step)
    }
}

impl From<Step> for StepRecord {
    fn from(s: Step) -> Self {
        StepRecord {
            observation: s.observation,
            polarity: Some(s.guidance.polarity),
            rationale: s.guidance.rationale,
            action: s.action,
            logp_guidance: s.logp_guidance,
            logp_action: s.logp_action,
            admissible: s.admissible,
            events: s.events,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Success,
    Failure,
    StepCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRecord", into = "TrajectoryRecord")]
pub struct Trajectory {
    pub task_id: String,
    pub seed: u64,
    pub horizon_cap: usize,
    /// False for rollouts collected without guidance; their placeholder
    /// guidance records are excluded from the objective.
    pub guided: bool,
    steps: Vec<Step>,
    env_reward: f64,
    terminated: Option<Termination>,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>, seed: u64, horizon_cap: usize, guided: bool) -> Self {
        Self {
            task_id: task_id.into(),
            seed,
            horizon_cap,
            guided,
            steps: Vec::new(),
            env_reward: 0.0,
            terminated: None,
        }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn env_reward(&self) -> f64 {
        self.env_reward
    }

    pub fn terminated(&self) -> Option<Termination> {
        self.terminated
    }

    pub fn is_success(&self) -> bool {
        self.terminated == Some(Termination::Success)
    }

    pub fn polarities(&self) -> impl Iterator<Item = Polarity> + '_ {
        self.steps.iter().map(|s| s.guidance.polarity)
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    pub fn append_step(mut self, step: Step) -> Result<Self> {
        self.push_step(step)?;
        Ok(self)
    }

    pub fn push_step(&mut self, step: Step) -> Result<()> {
        if let Some(t) = self.terminated {
            return Err(Error::Trajectory(format!(
                "cannot append to a trajectory terminated with {t:?}"
            )));
        }
        if self.steps.len() >= self.horizon_cap {
            return Err(Error::Trajectory(format!(
                "horizon cap {} reached",
                self.horizon_cap
            )));
        }
        self.steps.push(step);
        Ok(())
    }

    /// Seals the episode. Binary-reward environments must pass a reward of
    /// exactly 1 only together with `Termination::Success`.
    pub fn finish(&mut self, terminated: Termination, env_reward: f64) -> Result<()> {
        if self.terminated.is_some() {
            return Err(Error::Trajectory("trajectory already terminated".into()));
        }
        self.terminated = Some(terminated);
        self.env_reward = env_reward;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Trajectory("trajectory has no steps".into()));
        }
        if self.steps.len() > self.horizon_cap {
            return Err(Error::Trajectory(format!(
                "{} steps exceed horizon cap {}",
                self.steps.len(),
                self.horizon_cap
            )));
        }
        if !(0.0..=1.0).contains(&self.env_reward) {
            return Err(Error::Trajectory(format!(
                "env_reward {} outside [0, 1]",
                self.env_reward
            )));
        }
        if self.env_reward == 1.0 && self.terminated != Some(Termination::Success) {
            return Err(Error::Trajectory(
                "env_reward 1 requires terminated = success".into(),
            ));
        }
        for step in &self.steps {
            step.validate()?;
        }
        Ok(())
    }

    /// `h_{t-1}`: the first `t - 1` steps. Valid for `1 <= t <= len + 1`.
    pub fn history_prefix(&self, t: usize) -> Result<History<'_>> {
        if t == 0 || t > self.steps.len() + 1 {
            return Err(Error::HistoryIndex {
                t,
                len: self.steps.len(),
            });
        }
        Ok(History {
            steps: &self.steps[..t - 1],
        })
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    task_id: String,
    seed: u64,
    terminated: Option<Termination>,
    env_reward: f64,
    #[serde(default = "default_guided")]
    guided: bool,
    horizon_cap: Option<usize>,
    steps: Vec<Step>,
}

fn default_guided() -> bool {
    true
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRecord) -> Result<Self> {
        let terminated = r
            .terminated
            .ok_or_else(|| Error::Trajectory("logged trajectory is not terminated".into()))?;
        let traj = Trajectory {
            task_id: r.task_id,
            seed: r.seed,
            horizon_cap: r.horizon_cap.unwrap_or(r.steps.len()),
            guided: r.guided,
            steps: r.steps,
            env_reward: r.env_reward,
            terminated: Some(terminated),
        };
        traj.validate()?;
        Ok(traj)
    }
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        TrajectoryRecord {
            task_id: t.task_id,
            seed: t.seed,
            terminated: t.terminated,
            env_reward: t.env_reward,
            guided: t.guided,
            horizon_cap: Some(t.horizon_cap),
            steps: t.steps,
        }
    }
}

/// Borrowed view of the interaction context preceding a step.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    steps: &'a [Step],
}

impl<'a> History<'a> {
    pub fn empty() -> History<'static> {
        History { steps: &[] }
    }

    pub fn from_steps(steps: &'a [Step]) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &'a [Step] {
        self.steps
    }

    pub fn last(&self) -> Option<&'a Step> {
        self.steps.last()
    }

    /// The last `k` actions, oldest first.
    pub fn recent_actions(&self, k: usize) -> impl Iterator<Item = ActionId> + 'a {
        let start = self.steps.len().saturating_sub(k);
        self.steps[start..].iter().map(|s| s.action)
    }

    pub fn triples(&self) -> impl Iterator<Item = (&'a Observation, &'a GuidanceSignal, ActionId)> + 'a {
        self.steps
            .iter()
            .map(|s| (&s.observation, &s.guidance, s.action))
    }
}

pub fn write_jsonl<'a, W: Write>(
    mut out: W,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<()> {
    for t in trajectories {
        writeln!(out, "{}", t.to_json_line()?)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj = Trajectory::from_json_line(&line)
            .map_err(|e| Error::Trajectory(format!("line {}: {e}", i + 1)))?;
        out.push(traj);
    }
    Ok(out)
}
