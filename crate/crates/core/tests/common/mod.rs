#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;

use guidelab::env::keydoor::{DOWN, LEFT, OPEN, PICKUP, RIGHT, UP};
use guidelab::env::{Environment, KeyDoor, KeyDoorSpec};
use guidelab::optimizer::{ClipConfig, EncodedGroup, EncodedStep, EncodedTrajectory, LossAggregation, ObjectiveConfig};
use guidelab::policy::PolicyParams;
use guidelab::trajectory::{ActionId, GuidanceSignal, Observation, Polarity, Step, Termination, Trajectory};

pub const POLARITIES: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

/// Valid trajectory of `len` steps with the given polarities (cycled).
pub fn trajectory_with(polarities: &[Polarity], len: usize, env_reward: f64) -> Trajectory {
    let mut t = Trajectory::new("keydoor/7", 7, len.max(1), true);
    for i in 0..len {
        t.push_step(Step {
            observation: Observation::new("o", vec![i as i64]),
            guidance: GuidanceSignal::templated(polarities[i % polarities.len()]),
            action: 0,
            logp_guidance: -1.0,
            logp_action: -0.5,
            admissible: vec![0, 1],
            events: vec![],
        })
        .unwrap();
    }
    let term = if env_reward == 1.0 {
        Termination::Success
    } else {
        Termination::StepCap
    };
    t.finish(term, env_reward).unwrap();
    t
}

pub fn random_trajectory<R: Rng>(rng: &mut R, max_len: usize) -> Trajectory {
    let len = rng.gen_range(1..=max_len);
    let pols: Vec<Polarity> = (0..len).map(|_| *POLARITIES.choose(rng).unwrap()).collect();
    let reward = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    trajectory_with(&pols, len, reward)
}

// ---------------------------------------------------------------------------
// Independent objective for the finite-difference oracle. Reads the flat
// parameter layout directly: guidance rows (3 x d) then action rows
// (A x (d + 3)), with polarity columns indexed negative, neutral, positive.

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn pol_index(z: Polarity) -> usize {
    match z {
        Polarity::Negative => 0,
        Polarity::Neutral => 1,
        Polarity::Positive => 2,
    }
}

pub fn oracle_logp_guidance(w: &[f64], d: usize, x: &[f64], z: Polarity, temp: f64) -> f64 {
    let logits: Vec<f64> = (0..3)
        .map(|k| (0..d).map(|f| w[k * d + f] * x[f]).sum::<f64>() / temp)
        .collect();
    logits[pol_index(z)] - lse(&logits)
}

pub fn oracle_logp_action(
    w: &[f64],
    d: usize,
    x: &[f64],
    z: Option<Polarity>,
    a: ActionId,
    admissible: &[ActionId],
    temp: f64,
) -> f64 {
    let off = 3 * d;
    let cols = d + 3;
    let logit = |b: ActionId| {
        let row = off + b as usize * cols;
        let mut l: f64 = (0..d).map(|f| w[row + f] * x[f]).sum();
        if let Some(z) = z {
            l += w[row + d + pol_index(z)];
        }
        l / temp
    };
    let logits: Vec<f64> = admissible.iter().map(|&b| logit(b)).collect();
    logit(a) - lse(&logits)
}

fn oracle_surrogate(r: f64, adv: f64, lo: f64, hi: f64) -> f64 {
    (r * adv).min(r.clamp(1.0 - lo, 1.0 + hi) * adv)
}

/// Mean clipped surrogate minus beta * (logp - logp_ref), written out
/// token by token from the flat weight vector.
pub fn oracle_objective(
    group: &EncodedGroup,
    w: &[f64],
    w_ref: &[f64],
    d: usize,
    temp: f64,
    cfg: &ObjectiveConfig,
) -> f64 {
    let n_steps: usize = group.trajectories.iter().map(|t| t.steps.len()).sum();
    let g = group.trajectories.len();
    let beta = cfg.clip.kl_coeff;
    let (lo, hi) = (cfg.clip.eps_low, cfg.clip.eps_high);
    let mut total = 0.0;
    for t in &group.trajectories {
        let weight = match cfg.aggregation {
            LossAggregation::TokenMean => 1.0 / n_steps as f64,
            LossAggregation::TrajectoryMean => 1.0 / (g * t.steps.len()) as f64,
        };
        for s in &t.steps {
            let lp = oracle_logp_action(w, d, &s.features, s.guidance, s.action, &s.admissible, temp);
            let lr = oracle_logp_action(w_ref, d, &s.features, s.guidance, s.action, &s.admissible, temp);
            let mut tok = oracle_surrogate((lp - s.logp_action_old).exp(), t.advantage, lo, hi) - beta * (lp - lr);
            if let (Some(z), true) = (s.guidance, cfg.include_guidance_tokens) {
                let lp = oracle_logp_guidance(w, d, &s.features, z, temp);
                let lr = oracle_logp_guidance(w_ref, d, &s.features, z, temp);
                tok += oracle_surrogate((lp - s.logp_guidance_old).exp(), t.advantage, lo, hi) - beta * (lp - lr);
            }
            total += weight * tok;
        }
    }
    total
}

pub struct GradInstance {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub group: EncodedGroup,
    pub cfg: ObjectiveConfig,
}

fn near_kink(r: f64, clip: &ClipConfig) -> bool {
    (r - (1.0 - clip.eps_low)).abs() < 1e-4 || (r - (1.0 + clip.eps_high)).abs() < 1e-4
}

/// Random instance with at most 20 parameters and at most 4 trajectories,
/// redrawn until no token ratio sits on a clip boundary (where the
/// objective is not differentiable).
pub fn random_grad_instance<R: Rng>(rng: &mut R) -> GradInstance {
    loop {
        let (d, na) = *[(1usize, 2usize), (1, 3), (1, 4), (2, 2)].choose(rng).unwrap();
        let mut params = PolicyParams::zeros(d, na);
        params.temperature_rollout = *[1.0, 0.7, 1.3].choose(rng).unwrap();
        assert!(params.num_params() <= 20);
        let flat: Vec<f64> = (0..params.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        params.set_flat(&flat).unwrap();
        let mut reference = params.clone();
        let rflat: Vec<f64> = flat.iter().map(|w| w + rng.gen_range(-0.3..0.3)).collect();
        reference.set_flat(&rflat).unwrap();

        let clip = if rng.gen_bool(0.5) {
            ClipConfig::grpo(0.2)
        } else {
            ClipConfig::dapo(0.2, 0.28)
        };
        let mut clip = clip;
        clip.kl_coeff = *[0.0, 0.01, 0.5].choose(rng).unwrap();
        let cfg = ObjectiveConfig {
            clip,
            include_guidance_tokens: rng.gen_bool(0.7),
            aggregation: if rng.gen_bool(0.5) {
                LossAggregation::TokenMean
            } else {
                LossAggregation::TrajectoryMean
            },
        };
        let temp = params.temperature_rollout;
        let guided = rng.gen_bool(0.7);
        let g = rng.gen_range(2..=4);
        let mut ok = true;
        let trajectories = (0..g)
            .map(|_| {
                let steps = (0..rng.gen_range(1..=3))
                    .map(|_| {
                        let features: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
                        let mut admissible: Vec<ActionId> = (0..na as ActionId).filter(|_| rng.gen_bool(0.7)).collect();
                        if admissible.is_empty() {
                            admissible.push(rng.gen_range(0..na as ActionId));
                        }
                        let action = *admissible.choose(rng).unwrap();
                        let guidance = guided.then(|| *POLARITIES.choose(rng).unwrap());
                        let lp_a = oracle_logp_action(&flat, d, &features, guidance, action, &admissible, temp);
                        let logp_action_old = lp_a + rng.gen_range(-0.4..0.4);
                        ok &= !near_kink((lp_a - logp_action_old).exp(), &clip);
                        let logp_guidance_old = match guidance {
                            Some(z) => {
                                let lp = oracle_logp_guidance(&flat, d, &features, z, temp);
                                let old = lp + rng.gen_range(-0.4..0.4);
                                ok &= !near_kink((lp - old).exp(), &clip);
                                old
                            }
                            None => 0.0,
                        };
                        EncodedStep {
                            features,
                            guidance,
                            action,
                            admissible,
                            logp_guidance_old,
                            logp_action_old,
                        }
                    })
                    .collect();
                EncodedTrajectory {
                    steps,
                    advantage: rng.gen_range(-2.0..2.0),
                }
            })
            .collect();
        if ok {
            return GradInstance {
                params,
                reference,
                group: EncodedGroup { trajectories },
                cfg,
            };
        }
    }
}

/// Max-norm relative error between the analytic gradient and central
/// differences of the independent objective.
pub fn gradient_relative_error(inst: &GradInstance) -> f64 {
    let analytic = inst
        .group
        .gradient(&inst.params, Some(&inst.reference), &inst.cfg)
        .unwrap();
    let d = inst.params.feature_dim;
    let temp = inst.params.temperature_rollout;
    let w0 = inst.params.to_flat();
    let wr = inst.reference.to_flat();
    let h = 1e-5;
    let mut num = vec![0.0; w0.len()];
    for i in 0..w0.len() {
        let mut wp = w0.clone();
        let mut wm = w0.clone();
        wp[i] += h;
        wm[i] -= h;
        num[i] = (oracle_objective(&inst.group, &wp, &wr, d, temp, &inst.cfg)
            - oracle_objective(&inst.group, &wm, &wr, d, temp, &inst.cfg))
            / (2.0 * h);
    }
    let scale = num.iter().chain(&analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = num.iter().zip(&analytic).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

// ---------------------------------------------------------------------------
// KeyDoor oracles. Everything is derived from the observation record
// [ax, ay, has_key, door_open, kx, ky, dx, dy, gx, gy] and the grid size.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KdState {
    pub pos: (i64, i64),
    pub has_key: bool,
    pub door_open: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct KdLayout {
    pub size: i64,
    pub key: (i64, i64),
    pub door: (i64, i64),
    pub goal: (i64, i64),
}

pub fn kd_parse(obs: &Observation, size: usize) -> (KdLayout, KdState) {
    let s = &obs.state;
    (
        KdLayout {
            size: size as i64,
            key: (s[4], s[5]),
            door: (s[6], s[7]),
            goal: (s[8], s[9]),
        },
        KdState {
            pos: (s[0], s[1]),
            has_key: s[2] != 0,
            door_open: s[3] != 0,
        },
    )
}

fn kd_free(l: &KdLayout, p: (i64, i64), door_open: bool) -> bool {
    if p.0 < 0 || p.1 < 0 || p.0 >= l.size || p.1 >= l.size {
        return false;
    }
    if p.0 == l.door.0 {
        return door_open && p.1 == l.door.1;
    }
    true
}

/// Successors of a state under every admissible action.
pub fn kd_moves(l: &KdLayout, s: KdState) -> Vec<(ActionId, KdState)> {
    let mut out = Vec::new();
    for (a, (dx, dy)) in [(UP, (0, -1)), (DOWN, (0, 1)), (LEFT, (-1, 0)), (RIGHT, (1, 0))] {
        let q = (s.pos.0 + dx, s.pos.1 + dy);
        if kd_free(l, q, s.door_open) {
            out.push((a, KdState { pos: q, ..s }));
        }
    }
    if !s.has_key && s.pos == l.key {
        out.push((PICKUP, KdState { has_key: true, ..s }));
    }
    if s.has_key && !s.door_open && s.pos == (l.door.0 - 1, l.door.1) {
        out.push((OPEN, KdState { door_open: true, ..s }));
    }
    out.sort_by_key(|(a, _)| *a);
    out
}

pub fn kd_solved(l: &KdLayout, s: KdState) -> bool {
    s.door_open && s.pos == l.goal
}

/// Shortest action sequence over the full (position, key, door) state space.
pub fn kd_bfs_plan(l: &KdLayout, start: KdState) -> Option<Vec<ActionId>> {
    let mut prev: HashMap<KdState, (KdState, ActionId)> = HashMap::new();
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        if kd_solved(l, s) {
            let mut plan = Vec::new();
            let mut cur = s;
            while let Some(&(p, a)) = prev.get(&cur) {
                plan.push(a);
                cur = p;
            }
            plan.reverse();
            return Some(plan);
        }
        for (a, n) in kd_moves(l, s) {
            if seen.insert(n) {
                prev.insert(n, (s, a));
                queue.push_back(n);
            }
        }
    }
    None
}

/// Exact success probability of the uniform-over-admissible policy within
/// `horizon` steps, by forward propagation of the state distribution.
pub fn kd_uniform_success(l: &KdLayout, start: KdState, horizon: usize) -> f64 {
    let mut dist: HashMap<KdState, f64> = HashMap::from([(start, 1.0)]);
    let mut solved = 0.0;
    for _ in 0..horizon {
        let mut next: HashMap<KdState, f64> = HashMap::new();
        for (s, p) in dist {
            let moves = kd_moves(l, s);
            let share = p / moves.len() as f64;
            for (_, n) in moves {
                if kd_solved(l, n) {
                    solved += share;
                } else {
                    *next.entry(n).or_default() += share;
                }
            }
        }
        dist = next;
    }
    solved
}

pub fn keydoor_reset(seed: u64) -> (KeyDoor, KdLayout, KdState) {
    let spec = KeyDoorSpec::default();
    let size = spec.size;
    let mut env = KeyDoor::new(spec);
    let obs = env.reset(seed);
    let (l, s) = kd_parse(&obs, size);
    (env, l, s)
}

/// Action head that walks straight at the current target (horizontal moves
/// first) and interacts as soon as it can. Feature layout: 3/4 target
/// right/left, 5/6 target below/above, 7 interaction available.
pub fn greedy_keydoor_policy() -> PolicyParams {
    let d = 11 + 6;
    let mut p = PolicyParams::zeros(d, 6);
    let cols = d + 3;
    let mut set = |a: ActionId, f: usize, w: f64| p.action_weights[a as usize * cols + f] = w;
    set(RIGHT, 3, 60.0);
    set(LEFT, 4, 60.0);
    set(DOWN, 5, 50.0);
    set(UP, 6, 50.0);
    set(PICKUP, 7, 100.0);
    set(OPEN, 7, 100.0);
    p
}

pub fn run_plan(env: &mut dyn Environment, plan: &[ActionId]) -> (f64, Vec<f64>) {
    let mut progress = vec![env.oracle_progress()];
    let mut reward = 0.0;
    for &a in plan {
        let out = env.step(a).unwrap();
        reward += out.env_reward;
        progress.push(env.oracle_progress());
    }
    (reward, progress)
}
