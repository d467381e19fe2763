use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{env_rng, recency_histogram, EnvKind, Environment, StepInfo, StepOutcome, RECENCY_WINDOW};
use crate::error::{EnvError, Error, Result};
use crate::policy::FeatureMap;
use crate::trajectory::{ActionId, Event, History, Observation, Polarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainLabSpec {
    #[serde(default = "default_length")]
    pub procedure_len: usize,
    #[serde(default = "default_distractors")]
    pub distractors: usize,
    #[serde(default = "default_horizon")]
    pub horizon_cap: usize,
}

fn default_length() -> usize {
    6
}

fn default_distractors() -> usize {
    10
}

fn default_horizon() -> usize {
    30
}

impl Default for ChainLabSpec {
    fn default() -> Self {
        Self {
            procedure_len: default_length(),
            distractors: default_distractors(),
            horizon_cap: default_horizon(),
        }
    }
}

impl ChainLabSpec {
    pub fn validate(&self) -> Result<()> {
        if self.procedure_len == 0 {
            return Err(Error::config("env.procedure_len", "must be >= 1"));
        }
        if self.procedure_len > self.horizon_cap {
            return Err(Error::config(
                "env.procedure_len",
                format!("must not exceed horizon_cap {}", self.horizon_cap),
            ));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> usize {
        self.procedure_len + self.distractors
    }
}

/// Ordered-procedure task. The observation names the next required action
/// (the task instructions); any other action is a no-op. Success pays 1,
/// and the partial score is the completed fraction of the procedure.
#[derive(Debug, Clone)]
pub struct ChainLab {
    spec: ChainLabSpec,
    procedure: Vec<ActionId>,
    completed: usize,
    steps: usize,
    done: bool,
}

impl ChainLab {
    pub fn new(spec: ChainLabSpec) -> Self {
        Self {
            spec,
            procedure: Vec::new(),
            completed: 0,
            steps: 0,
            done: false,
        }
    }

    pub fn procedure(&self) -> &[ActionId] {
        &self.procedure
    }

    fn observation(&self) -> Observation {
        let next = self
            .procedure
            .get(self.completed)
            .map(|&a| a as i64)
            .unwrap_or(-1);
        Observation::new(
            format!("cl:step{}", self.completed),
            vec![self.completed as i64, self.procedure.len() as i64, next],
        )
    }

    fn object(action: ActionId) -> String {
        format!("obj{action}")
    }
}

impl Environment for ChainLab {
    fn kind(&self) -> EnvKind {
        EnvKind::ChainLab
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = env_rng(seed, 0x0063_6861_696e);
        let mut vocab: Vec<ActionId> = (0..self.spec.vocabulary() as ActionId).collect();
        vocab.shuffle(&mut rng);
        vocab.truncate(self.spec.procedure_len);
        self.procedure = vocab;
        self.completed = 0;
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: ActionId) -> Result<StepOutcome, EnvError> {
        if self.procedure.is_empty() {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if action as usize >= self.spec.vocabulary() {
            return Err(EnvError::Inadmissible { action });
        }
        let mut events = Vec::new();
        let object = Self::object(action);
        if self.procedure[self.completed] == action {
            self.completed += 1;
            events.push(Event::Use {
                object,
                relevant: true,
            });
        } else if self.procedure.contains(&action) {
            // Right object, wrong moment.
            events.push(Event::Use {
                object,
                relevant: true,
            });
            events.push(Event::NoOp);
        } else {
            if action.is_multiple_of(2) {
                events.push(Event::Examine {
                    object,
                    relevant: false,
                });
            } else {
                events.push(Event::Pickup {
                    object,
                    target: false,
                });
            }
            events.push(Event::NoOp);
        }
        self.steps += 1;
        let success = self.completed == self.procedure.len();
        if success || self.steps >= self.spec.horizon_cap {
            self.done = true;
        }
        Ok(StepOutcome {
            observation: self.observation(),
            done: self.done,
            env_reward: if success { 1.0 } else { 0.0 },
            info: StepInfo { success, events },
        })
    }

    fn admissible_actions(&self) -> Vec<ActionId> {
        if self.done || self.procedure.is_empty() {
            return Vec::new();
        }
        (0..self.spec.vocabulary() as ActionId).collect()
    }

    fn horizon_cap(&self) -> usize {
        self.spec.horizon_cap
    }

    fn num_actions(&self) -> usize {
        self.spec.vocabulary()
    }

    fn action_name(&self, action: ActionId) -> String {
        format!("use {}", Self::object(action))
    }

    fn oracle_progress(&self) -> f64 {
        if self.procedure.is_empty() {
            return 0.0;
        }
        self.completed as f64 / self.procedure.len() as f64
    }

    fn score(&self) -> f64 {
        self.oracle_progress()
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

/// Features: bias, one-hot of the instructed next action, completed
/// fraction, whether the last action advanced or was a no-op, and the
/// recency histogram.
#[derive(Debug, Clone)]
pub struct ChainLabFeatures {
    vocabulary: usize,
}

impl ChainLabFeatures {
    pub fn new(spec: &ChainLabSpec) -> Self {
        Self {
            vocabulary: spec.vocabulary(),
        }
    }

    fn advanced_index(&self) -> usize {
        self.vocabulary + 2
    }

    fn noop_index(&self) -> usize {
        self.vocabulary + 3
    }
}

impl FeatureMap for ChainLabFeatures {
    fn dim(&self) -> usize {
        1 + self.vocabulary + 3 + self.vocabulary
    }

    fn encode(&self, history: &History<'_>, observation: &Observation) -> Vec<f64> {
        let mut x = vec![0.0; 1 + self.vocabulary + 3];
        x[0] = 1.0;
        let s = &observation.state;
        if s.len() >= 3 {
            if s[2] >= 0 && (s[2] as usize) < self.vocabulary {
                x[1 + s[2] as usize] = 1.0;
            }
            if s[1] > 0 {
                x[1 + self.vocabulary] = s[0] as f64 / s[1] as f64;
            }
            if let Some(prev) = history.last() {
                if prev.observation.state.first().is_some_and(|&p| p < s[0]) {
                    x[self.advanced_index()] = 1.0;
                } else {
                    x[self.noop_index()] = 1.0;
                }
            }
        }
        recency_histogram(history, self.vocabulary, RECENCY_WINDOW, &mut x);
        x
    }

    fn guidance_prior(&self) -> Vec<(usize, Polarity, f64)> {
        vec![
            (self.advanced_index(), Polarity::Positive, 1.0),
            (self.noop_index(), Polarity::Negative, 1.0),
            (0, Polarity::Neutral, 0.5),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedure_is_distinct_and_seeded() {
        let mut a = ChainLab::new(ChainLabSpec::default());
        let mut b = ChainLab::new(ChainLabSpec::default());
        a.reset(4);
        b.reset(4);
        assert_eq!(a.procedure(), b.procedure());
        let mut sorted = a.procedure().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
    }

    #[test]
    fn wrong_action_is_noop() {
        let mut env = ChainLab::new(ChainLabSpec::default());
        env.reset(2);
        let wrong = (0..16).find(|a| !env.procedure().contains(a)).unwrap();
        let out = env.step(wrong).unwrap();
        assert_eq!(env.oracle_progress(), 0.0);
        assert!(out.info.events.contains(&Event::NoOp));
        assert!(!out.done);
    }

    #[test]
    fn out_of_range_action_rejected() {
        let mut env = ChainLab::new(ChainLabSpec::default());
        env.reset(2);
        assert!(env.step(16).is_err());
    }

    #[test]
    fn oversized_procedure_rejected() {
        let spec = ChainLabSpec {
            procedure_len: 31,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
