use std::collections::{HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{env_rng, recency_histogram, EnvKind, Environment, StepInfo, StepOutcome, RECENCY_WINDOW};
use crate::error::{EnvError, Error, Result};
use crate::policy::FeatureMap;
use crate::trajectory::{ActionId, Event, History, Observation, Polarity};

pub const UP: ActionId = 0;
pub const DOWN: ActionId = 1;
pub const LEFT: ActionId = 2;
pub const RIGHT: ActionId = 3;
pub const PICKUP: ActionId = 4;
pub const OPEN: ActionId = 5;
const NUM_ACTIONS: usize = 6;
const ACTION_NAMES: [&str; NUM_ACTIONS] = ["up", "down", "left", "right", "pickup", "open"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyDoorSpec {
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_horizon")]
    pub horizon_cap: usize,
}

fn default_size() -> usize {
    7
}

fn default_horizon() -> usize {
    30
}

impl Default for KeyDoorSpec {
    fn default() -> Self {
        Self {
            size: default_size(),
            horizon_cap: default_horizon(),
        }
    }
}

impl KeyDoorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 5 {
            return Err(Error::config("env.size", "grid must be at least 5x5"));
        }
        if self.horizon_cap < 4 * self.size {
            return Err(Error::config(
                "env.horizon_cap",
                format!("must be >= {} so every layout is solvable", 4 * self.size),
            ));
        }
        Ok(())
    }

    fn wall_x(&self) -> i64 {
        (self.size / 2) as i64
    }
}

type Pos = (i64, i64);

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    start: Pos,
    key: Pos,
    door: Pos,
    goal: Pos,
}

/// Grid split by a vertical wall with one door. The agent starts on the
/// left with the key; the goal lies on the right behind the door.
#[derive(Debug, Clone)]
pub struct KeyDoor {
    spec: KeyDoorSpec,
    layout: Option<Layout>,
    agent: Pos,
    has_key: bool,
    door_open: bool,
    steps: usize,
    done: bool,
    success: bool,
    visited: HashSet<Pos>,
    /// Reference costs of the three subgoals, fixed per layout.
    subgoal_costs: [usize; 3],
}

impl KeyDoor {
    pub fn new(spec: KeyDoorSpec) -> Self {
        Self {
            spec,
            layout: None,
            agent: (0, 0),
            has_key: false,
            door_open: false,
            steps: 0,
            done: false,
            success: false,
            visited: HashSet::new(),
            subgoal_costs: [1, 1, 1],
        }
    }

    fn layout(&self) -> &Layout {
        self.layout.as_ref().expect("reset before use")
    }

    fn generate(&self, seed: u64) -> Layout {
        let n = self.spec.size as i64;
        let wx = self.spec.wall_x();
        let mut rng = env_rng(seed, 0x6b65_7964);
        let door_y = rng.gen_range(0..n);
        let left = |rng: &mut rand_chacha::ChaCha8Rng| (rng.gen_range(0..wx), rng.gen_range(0..n));
        let start = left(&mut rng);
        let mut key = left(&mut rng);
        while key == start {
            key = left(&mut rng);
        }
        let goal = (rng.gen_range(wx + 1..n), rng.gen_range(0..n));
        Layout {
            start,
            key,
            door: (wx, door_y),
            goal,
        }
    }

    fn door_approach(&self) -> Pos {
        let d = self.layout().door;
        (d.0 - 1, d.1)
    }

    fn passable(&self, p: Pos, door_open: bool) -> bool {
        let n = self.spec.size as i64;
        if p.0 < 0 || p.1 < 0 || p.0 >= n || p.1 >= n {
            return false;
        }
        if p.0 == self.spec.wall_x() {
            return door_open && p.1 == self.layout().door.1;
        }
        true
    }

    fn bfs(&self, from: Pos, to: Pos, door_open: bool) -> Option<usize> {
        let mut seen = HashSet::from([from]);
        let mut queue = VecDeque::from([(from, 0usize)]);
        while let Some((p, d)) = queue.pop_front() {
            if p == to {
                return Some(d);
            }
            for (dx, dy) in [(0, -1), (0, 1), (-1, 0), (1, 0)] {
                let q = (p.0 + dx, p.1 + dy);
                if self.passable(q, door_open) && seen.insert(q) {
                    queue.push_back((q, d + 1));
                }
            }
        }
        None
    }

    fn subgoals_done(&self) -> usize {
        if self.success {
            3
        } else if self.door_open {
            2
        } else if self.has_key {
            1
        } else {
            0
        }
    }

    /// Actions still needed to finish the current subgoal.
    fn remaining_cost(&self) -> usize {
        let l = self.layout();
        match self.subgoals_done() {
            0 => self.bfs(self.agent, l.key, false).unwrap_or(usize::MAX - 1) + 1,
            1 => self.bfs(self.agent, self.door_approach(), false).unwrap_or(usize::MAX - 1) + 1,
            2 => self.bfs(self.agent, l.goal, true).unwrap_or(usize::MAX),
            _ => 0,
        }
    }

    /// Length of the shortest action sequence that solves the layout.
    pub fn optimal_length(&self) -> usize {
        self.subgoal_costs.iter().sum()
    }

    pub fn observation(&self) -> Observation {
        let l = self.layout();
        let key = match self.subgoals_done() {
            0 => "kd:key",
            1 => "kd:door",
            _ => "kd:goal",
        };
        Observation::new(
            key,
            vec![
                self.agent.0,
                self.agent.1,
                self.has_key as i64,
                self.door_open as i64,
                l.key.0,
                l.key.1,
                l.door.0,
                l.door.1,
                l.goal.0,
                l.goal.1,
            ],
        )
    }

    fn delta(action: ActionId) -> Option<Pos> {
        match action {
            UP => Some((0, -1)),
            DOWN => Some((0, 1)),
            LEFT => Some((-1, 0)),
            RIGHT => Some((1, 0)),
            _ => None,
        }
    }

    fn is_admissible(&self, action: ActionId) -> bool {
        let l = self.layout();
        match action {
            PICKUP => !self.has_key && self.agent == l.key,
            OPEN => self.has_key && !self.door_open && self.agent == self.door_approach(),
            a => match Self::delta(a) {
                Some((dx, dy)) => self.passable((self.agent.0 + dx, self.agent.1 + dy), self.door_open),
                None => false,
            },
        }
    }
}

impl Environment for KeyDoor {
    fn kind(&self) -> EnvKind {
        EnvKind::KeyDoor
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let layout = self.generate(seed);
        self.agent = layout.start;
        self.layout = Some(layout);
        self.has_key = false;
        self.door_open = false;
        self.steps = 0;
        self.done = false;
        self.success = false;
        self.visited = HashSet::from([self.agent]);
        let l = self.layout().clone();
        let approach = self.door_approach();
        self.subgoal_costs = [
            self.bfs(l.start, l.key, false).expect("left side is connected") + 1,
            self.bfs(l.key, approach, false).expect("left side is connected") + 1,
            self.bfs(approach, l.goal, true).expect("door connects both sides"),
        ];
        self.observation()
    }

    fn step(&mut self, action: ActionId) -> Result<StepOutcome, EnvError> {
        if self.layout.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if !self.is_admissible(action) {
            return Err(EnvError::Inadmissible { action });
        }
        let mut events = Vec::new();
        match action {
            PICKUP => {
                self.has_key = true;
                events.push(Event::Pickup {
                    object: "key".into(),
                    target: true,
                });
            }
            OPEN => {
                self.door_open = true;
                events.push(Event::Open {
                    object: "door".into(),
                });
            }
            a => {
                let (dx, dy) = Self::delta(a).expect("move action");
                self.agent = (self.agent.0 + dx, self.agent.1 + dy);
                let revisit = !self.visited.insert(self.agent);
                events.push(Event::Visit {
                    location: format!("{},{}", self.agent.0, self.agent.1),
                    revisit,
                });
            }
        }
        self.steps += 1;
        let mut reward = 0.0;
        if self.door_open && self.agent == self.layout().goal {
            self.success = true;
            self.done = true;
            reward = 1.0;
        } else if self.steps >= self.spec.horizon_cap {
            self.done = true;
        }
        Ok(StepOutcome {
            observation: self.observation(),
            done: self.done,
            env_reward: reward,
            info: StepInfo {
                success: self.success,
                events,
            },
        })
    }

    fn admissible_actions(&self) -> Vec<ActionId> {
        if self.done || self.layout.is_none() {
            return Vec::new();
        }
        (0..NUM_ACTIONS as ActionId)
            .filter(|&a| self.is_admissible(a))
            .collect()
    }

    fn horizon_cap(&self) -> usize {
        self.spec.horizon_cap
    }

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn action_name(&self, action: ActionId) -> String {
        ACTION_NAMES
            .get(action as usize)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("invalid({action})"))
    }

    fn oracle_progress(&self) -> f64 {
        let done = self.subgoals_done();
        if done == 3 {
            return 1.0;
        }
        let reference = self.subgoal_costs[done] as f64;
        let fraction = (1.0 - self.remaining_cost() as f64 / reference).clamp(0.0, 1.0);
        (done as f64 + fraction) / 3.0
    }

    fn score(&self) -> f64 {
        if self.success {
            1.0
        } else {
            0.0
        }
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

/// Features: bias, subgoal flags, direction to the current target, whether
/// an interaction is available, how the last move changed the distance to
/// the target, and a histogram of the last four actions.
#[derive(Debug, Clone)]
pub struct KeyDoorFeatures {
    wall_x: i64,
}

const F_BIAS: usize = 0;
const F_CLOSER: usize = 8;
const F_AWAY: usize = 9;
const F_SUBGOAL: usize = 10;
const KD_DIM: usize = 11 + NUM_ACTIONS;

struct View {
    agent: Pos,
    has_key: bool,
    door_open: bool,
    key: Pos,
    door: Pos,
    goal: Pos,
}

impl View {
    fn parse(obs: &Observation) -> Option<Self> {
        let s = &obs.state;
        if s.len() < 10 {
            return None;
        }
        Some(Self {
            agent: (s[0], s[1]),
            has_key: s[2] != 0,
            door_open: s[3] != 0,
            key: (s[4], s[5]),
            door: (s[6], s[7]),
            goal: (s[8], s[9]),
        })
    }

    fn stage(&self) -> u8 {
        self.has_key as u8 + self.door_open as u8
    }
}

impl KeyDoorFeatures {
    pub fn new(spec: &KeyDoorSpec) -> Self {
        Self {
            wall_x: spec.wall_x(),
        }
    }

    fn target(&self, v: &View) -> Pos {
        if !v.has_key {
            v.key
        } else if !v.door_open {
            (v.door.0 - 1, v.door.1)
        } else if v.agent.0 < self.wall_x {
            v.door
        } else {
            v.goal
        }
    }
}

fn manhattan(a: Pos, b: Pos) -> i64 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

impl FeatureMap for KeyDoorFeatures {
    fn dim(&self) -> usize {
        KD_DIM
    }

    fn encode(&self, history: &History<'_>, observation: &Observation) -> Vec<f64> {
        let mut x = Vec::with_capacity(KD_DIM);
        let Some(v) = View::parse(observation) else {
            x.resize(KD_DIM, 0.0);
            x[F_BIAS] = 1.0;
            return x;
        };
        let t = self.target(&v);
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let interact = (!v.has_key && v.agent == v.key)
            || (v.has_key && !v.door_open && v.agent == (v.door.0 - 1, v.door.1));
        x.extend([
            1.0,
            flag(v.has_key),
            flag(v.door_open),
            flag(t.0 > v.agent.0),
            flag(t.0 < v.agent.0),
            flag(t.1 > v.agent.1),
            flag(t.1 < v.agent.1),
            flag(interact),
        ]);
        let (mut closer, mut away, mut subgoal) = (0.0, 0.0, 0.0);
        if let Some(prev) = history.last().and_then(|s| View::parse(&s.observation)) {
            if prev.stage() != v.stage() {
                subgoal = 1.0;
            } else {
                let target = self.target(&prev);
                let before = manhattan(prev.agent, target);
                let after = manhattan(v.agent, target);
                if after < before {
                    closer = 1.0;
                } else if after > before {
                    away = 1.0;
                }
            }
        }
        x.extend([closer, away, subgoal]);
        recency_histogram(history, NUM_ACTIONS, RECENCY_WINDOW, &mut x);
        debug_assert_eq!(x.len(), KD_DIM);
        x
    }

    fn guidance_prior(&self) -> Vec<(usize, Polarity, f64)> {
        vec![
            (F_CLOSER, Polarity::Positive, 1.0),
            (F_SUBGOAL, Polarity::Positive, 1.0),
            (F_AWAY, Polarity::Negative, 1.0),
            (F_BIAS, Polarity::Neutral, 0.5),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(seed: u64) -> KeyDoor {
        let mut env = KeyDoor::new(KeyDoorSpec::default());
        env.reset(seed);
        env
    }

    #[test]
    fn layout_invariants() {
        for seed in 0..200 {
            let env = fresh(seed);
            let l = env.layout();
            assert_ne!(l.key, l.door);
            assert_ne!(l.key, l.goal);
            assert_ne!(l.door, l.goal);
            assert_ne!(l.start, l.key);
            assert!(env.optimal_length() <= env.horizon_cap());
        }
    }

    #[test]
    fn initial_progress_zero() {
        assert_eq!(fresh(3).oracle_progress(), 0.0);
    }

    #[test]
    fn inadmissible_and_post_done_rejected() {
        let mut env = fresh(1);
        assert_eq!(env.step(OPEN), Err(EnvError::Inadmissible { action: OPEN }));
        env.done = true;
        assert_eq!(env.step(UP), Err(EnvError::EpisodeDone));
        assert!(env.admissible_actions().is_empty());
    }

    #[test]
    fn step_cap_terminates() {
        let mut env = fresh(7);
        let mut last = None;
        while !env.is_done() {
            // Avoid pickup so the episode cannot succeed.
            let a = *env
                .admissible_actions()
                .iter()
                .find(|&&a| a != PICKUP)
                .unwrap();
            last = Some(env.step(a).unwrap());
        }
        let last = last.unwrap();
        assert_eq!(env.steps_taken(), 30);
        assert!(last.done);
        assert_eq!(last.env_reward, 0.0);
        assert!(!last.info.success);
    }

    #[test]
    fn feature_prior_reads_distance_change() {
        let spec = KeyDoorSpec::default();
        let fmap = KeyDoorFeatures::new(&spec);
        let mut env = KeyDoor::new(spec);
        let obs0 = env.reset(11);
        let v = View::parse(&obs0).unwrap();
        let toward = if v.key.0 > v.agent.0 {
            RIGHT
        } else if v.key.0 < v.agent.0 {
            LEFT
        } else if v.key.1 > v.agent.1 {
            DOWN
        } else {
            UP
        };
        let out = env.step(toward).unwrap();
        let step = crate::trajectory::Step {
            observation: obs0,
            guidance: crate::trajectory::GuidanceSignal::placeholder(),
            action: toward,
            logp_guidance: 0.0,
            logp_action: 0.0,
            admissible: vec![toward],
            events: vec![],
        };
        let steps = [step];
        let x = fmap.encode(&History::from_steps(&steps), &out.observation);
        assert!(x[F_CLOSER] == 1.0 || x[F_SUBGOAL] == 1.0);
        assert_eq!(x[F_AWAY], 0.0);
    }
}
