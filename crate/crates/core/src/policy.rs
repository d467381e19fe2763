//! Two-head linear-softmax policy.
//!
//! The guidance head maps features `x` to a distribution over the three
//! polarities; the action head maps `[x; onehot(z)]` to a masked
//! distribution over admissible actions. Both heads read the same feature
//! vector, so guidance and action share one feature map and one parameter
//! set. Parameters are laid out flat as `[guidance (3 x F) | action (A x (F+3))]`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{ActionId, GuidanceSignal, History, Observation, Polarity};

pub const NUM_POLARITIES: usize = 3;
pub const CHECKPOINT_FORMAT: &str = "guidelab-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encodes `(history, observation)` into a fixed-length feature vector.
pub trait FeatureMap: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, history: &History<'_>, observation: &Observation) -> Vec<f64>;

    /// Initial guidance-head weights as `(feature index, polarity, weight)`.
    /// Stands in for the assessment ability of a pretrained backbone.
    fn guidance_prior(&self) -> Vec<(usize, Polarity, f64)> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub feature_dim: usize,
    pub num_actions: usize,
    pub guidance_weights: Vec<f64>,
    pub action_weights: Vec<f64>,
    pub temperature_rollout: f64,
    pub temperature_eval: f64,
    #[serde(default)]
    pub guidance_frozen: bool,
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize, num_actions: usize) -> Self {
        Self {
            feature_dim,
            num_actions,
            guidance_weights: vec![0.0; NUM_POLARITIES * feature_dim],
            action_weights: vec![0.0; num_actions * (feature_dim + NUM_POLARITIES)],
            temperature_rollout: 1.0,
            temperature_eval: 0.4,
            guidance_frozen: false,
        }
    }

    /// Zero action head with the feature map's guidance prior scaled by
    /// `prior_strength`.
    pub fn initial(fmap: &dyn FeatureMap, num_actions: usize, prior_strength: f64) -> Self {
        let mut p = Self::zeros(fmap.dim(), num_actions);
        for (feature, z, w) in fmap.guidance_prior() {
            let idx = p.guidance_index(z, feature);
            p.guidance_weights[idx] = prior_strength * w;
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.guidance_weights.len() + self.action_weights.len()
    }

    pub fn guidance_len(&self) -> usize {
        self.guidance_weights.len()
    }

    fn action_cols(&self) -> usize {
        self.feature_dim + NUM_POLARITIES
    }

    fn guidance_index(&self, z: Polarity, feature: usize) -> usize {
        z.index() * self.feature_dim + feature
    }

    pub fn validate(&self) -> Result<()> {
        if self.guidance_weights.len() != NUM_POLARITIES * self.feature_dim
            || self.action_weights.len() != self.num_actions * self.action_cols()
        {
            return Err(Error::Dimension(format!(
                "weights do not match feature_dim {} and num_actions {}",
                self.feature_dim, self.num_actions
            )));
        }
        if !(self.temperature_rollout > 0.0 && self.temperature_eval > 0.0) {
            return Err(Error::Policy("temperatures must be > 0".into()));
        }
        if !self.flat().all(f64::is_finite) {
            return Err(Error::Policy("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.guidance_weights
            .iter()
            .chain(self.action_weights.iter())
            .copied()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.flat().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let g = self.guidance_len();
        self.guidance_weights.copy_from_slice(&flat[..g]);
        self.action_weights.copy_from_slice(&flat[g..]);
        Ok(())
    }

    pub fn get(&self, i: usize) -> f64 {
        let g = self.guidance_len();
        if i < g {
            self.guidance_weights[i]
        } else {
            self.action_weights[i - g]
        }
    }

    pub fn set(&mut self, i: usize, v: f64) {
        let g = self.guidance_len();
        if i < g {
            self.guidance_weights[i] = v;
        } else {
            self.action_weights[i - g] = v;
        }
    }

    pub fn freeze_guidance_head(&mut self) {
        self.guidance_frozen = true;
    }

    pub fn unfreeze_guidance_head(&mut self) {
        self.guidance_frozen = false;
    }

    /// Adds `delta` to the parameters. Guidance weights are left bitwise
    /// unchanged while the guidance head is frozen.
    pub fn apply_update(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "update has {} entries, policy has {}",
                delta.len(),
                self.num_params()
            )));
        }
        let g = self.guidance_len();
        if !self.guidance_frozen {
            for (w, d) in self.guidance_weights.iter_mut().zip(&delta[..g]) {
                *w += d;
            }
        }
        for (w, d) in self.action_weights.iter_mut().zip(&delta[g..]) {
            *w += d;
        }
        Ok(())
    }

    fn check_features(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::Dimension(format!(
                "feature vector has length {}, policy expects {}",
                x.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn guidance_logits(&self, x: &[f64], temperature: f64) -> Result<[f64; NUM_POLARITIES]> {
        self.check_features(x)?;
        let mut out = [0.0; NUM_POLARITIES];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.guidance_weights[k * self.feature_dim..(k + 1) * self.feature_dim];
            *o = dot(row, x) / temperature;
        }
        if !out.iter().all(|l| l.is_finite()) {
            return Err(Error::Policy(format!("non-finite guidance logits {out:?}")));
        }
        Ok(out)
    }

    pub fn guidance_probs(&self, x: &[f64], temperature: f64) -> Result<[f64; NUM_POLARITIES]> {
        let logits = self.guidance_logits(x, temperature)?;
        let mut p = [0.0; NUM_POLARITIES];
        softmax_into(&logits, &mut p);
        Ok(p)
    }

    fn action_logit(&self, x: &[f64], z: Option<Polarity>, a: ActionId) -> f64 {
        let cols = self.action_cols();
        let row = &self.action_weights[a as usize * cols..(a as usize + 1) * cols];
        let mut l = dot(&row[..self.feature_dim], x);
        if let Some(z) = z {
            l += row[self.feature_dim + z.index()];
        }
        l
    }

    fn check_admissible(&self, admissible: &[ActionId]) -> Result<()> {
        if admissible.is_empty() {
            return Err(Error::Policy("empty admissible action set".into()));
        }
        if let Some(&a) = admissible.iter().find(|&&a| a as usize >= self.num_actions) {
            return Err(Error::Dimension(format!(
                "action {a} out of range for {} actions",
                self.num_actions
            )));
        }
        Ok(())
    }

    /// Masked softmax over `admissible`, in the order given. `z = None`
    /// leaves the polarity columns unused (rollouts without guidance).
    pub fn action_probs(
        &self,
        x: &[f64],
        z: Option<Polarity>,
        admissible: &[ActionId],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        self.check_features(x)?;
        self.check_admissible(admissible)?;
        let logits: Vec<f64> = admissible
            .iter()
            .map(|&a| self.action_logit(x, z, a) / temperature)
            .collect();
        if !logits.iter().all(|l| l.is_finite()) {
            return Err(Error::Policy("non-finite action logits".into()));
        }
        let mut p = vec![0.0; logits.len()];
        softmax_into(&logits, &mut p);
        Ok(p)
    }

    pub fn log_prob_guidance(&self, x: &[f64], z: Polarity, temperature: f64) -> Result<f64> {
        let logits = self.guidance_logits(x, temperature)?;
        Ok(logits[z.index()] - log_sum_exp(&logits))
    }

    pub fn log_prob_action(
        &self,
        x: &[f64],
        z: Option<Polarity>,
        action: ActionId,
        admissible: &[ActionId],
        temperature: f64,
    ) -> Result<f64> {
        self.check_features(x)?;
        self.check_admissible(admissible)?;
        let pos = position(admissible, action)?;
        let logits: Vec<f64> = admissible
            .iter()
            .map(|&a| self.action_logit(x, z, a) / temperature)
            .collect();
        Ok(logits[pos] - log_sum_exp(&logits))
    }

    pub fn sample_guidance_from_features<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        temperature: f64,
        rng: &mut R,
    ) -> Result<(Polarity, f64)> {
        let p = self.guidance_probs(x, temperature)?;
        let k = sample_index(&p, rng);
        let z = Polarity::from_index(k).expect("three polarities");
        Ok((z, self.log_prob_guidance(x, z, temperature)?))
    }

    pub fn sample_action_from_features<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        z: Option<Polarity>,
        admissible: &[ActionId],
        temperature: f64,
        rng: &mut R,
    ) -> Result<(ActionId, f64)> {
        let p = self.action_probs(x, z, admissible, temperature)?;
        let k = sample_index(&p, rng);
        let a = admissible[k];
        Ok((a, self.log_prob_action(x, z, a, admissible, temperature)?))
    }

    /// `scale * d/dtheta log pi(z | x)` added into the flat gradient `out`.
    pub fn accumulate_grad_guidance(
        &self,
        x: &[f64],
        z: Polarity,
        temperature: f64,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let p = self.guidance_probs(x, temperature)?;
        let f = self.feature_dim;
        for (k, pk) in p.iter().enumerate() {
            let coeff = scale * (indicator(k == z.index()) - pk) / temperature;
            if coeff == 0.0 {
                continue;
            }
            for (o, xi) in out[k * f..(k + 1) * f].iter_mut().zip(x) {
                *o += coeff * xi;
            }
        }
        Ok(())
    }

    /// `scale * d/dtheta log pi(a | x, z)` added into the flat gradient `out`.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_grad_action(
        &self,
        x: &[f64],
        z: Option<Polarity>,
        action: ActionId,
        admissible: &[ActionId],
        temperature: f64,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let pos = position(admissible, action)?;
        let p = self.action_probs(x, z, admissible, temperature)?;
        let cols = self.action_cols();
        let base = self.guidance_len();
        for (j, (&a, pj)) in admissible.iter().zip(&p).enumerate() {
            let coeff = scale * (indicator(j == pos) - pj) / temperature;
            if coeff == 0.0 {
                continue;
            }
            let start = base + a as usize * cols;
            let row = &mut out[start..start + cols];
            for (o, xi) in row[..self.feature_dim].iter_mut().zip(x) {
                *o += coeff * xi;
            }
            if let Some(z) = z {
                row[self.feature_dim + z.index()] += coeff;
            }
        }
        Ok(())
    }

    pub fn grad_log_prob_guidance(&self, x: &[f64], z: Polarity, temperature: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.num_params()];
        self.accumulate_grad_guidance(x, z, temperature, 1.0, &mut g)?;
        Ok(g)
    }

    pub fn grad_log_prob_action(
        &self,
        x: &[f64],
        z: Option<Polarity>,
        action: ActionId,
        admissible: &[ActionId],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.num_params()];
        self.accumulate_grad_action(x, z, action, admissible, temperature, 1.0, &mut g)?;
        Ok(g)
    }

    pub fn sample_guidance<R: Rng + ?Sized>(
        &self,
        fmap: &dyn FeatureMap,
        history: &History<'_>,
        observation: &Observation,
        temperature: f64,
        rng: &mut R,
    ) -> Result<(GuidanceSignal, f64)> {
        let x = fmap.encode(history, observation);
        let (z, logp) = self.sample_guidance_from_features(&x, temperature, rng)?;
        Ok((GuidanceSignal::templated(z), logp))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        fmap: &dyn FeatureMap,
        history: &History<'_>,
        observation: &Observation,
        guidance: Option<&GuidanceSignal>,
        admissible: &[ActionId],
        temperature: f64,
        rng: &mut R,
    ) -> Result<(ActionId, f64)> {
        let x = fmap.encode(history, observation);
        self.sample_action_from_features(&x, guidance.map(|g| g.polarity), admissible, temperature, rng)
    }
}

fn position(admissible: &[ActionId], action: ActionId) -> Result<usize> {
    admissible
        .iter()
        .position(|&a| a == action)
        .ok_or_else(|| Error::Policy(format!("action {action} is not admissible")))
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` slightly below 1; fall back to the last class
    // with nonzero mass.
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub params: PolicyParams,
}

impl PolicyCheckpoint {
    pub fn new(params: PolicyParams, step: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            step,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Policy(format!("unknown checkpoint format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Policy(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, f: usize, a: usize) -> PolicyParams {
        let mut p = PolicyParams::zeros(f, a);
        for i in 0..p.num_params() {
            p.set(i, rng.gen_range(-1.5..1.5));
        }
        p
    }

    #[test]
    fn zero_weights_uniform_guidance() {
        let p = PolicyParams::zeros(4, 5);
        let probs = p.guidance_probs(&[1.0, 0.5, -2.0, 3.0], 1.0).unwrap();
        for q in probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn strong_positive_gap_dominates() {
        let mut p = PolicyParams::zeros(1, 2);
        let i = p.guidance_index(Polarity::Positive, 0);
        p.guidance_weights[i] = 20.0;
        let probs = p.guidance_probs(&[1.0], 1.0).unwrap();
        // Softmax bound: p(pos) = 1 / (1 + 2 e^-20) >= 1 - 2e^-20.
        assert!(probs[Polarity::Positive.index()] >= 1.0 - 1e-8);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut r, 3, 4);
        let x = [0.3, -1.0, 1.0];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = p.sample_guidance_from_features(&x, 1.0, &mut rng).unwrap();
            let a = p
                .sample_action_from_features(&x, Some(g.0), &[0, 2, 3], 1.0, &mut rng)
                .unwrap();
            (g, a)
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn single_admissible_action() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut r, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, logp) = p
            .sample_action_from_features(&[1.0, 2.0], Some(Polarity::Neutral), &[2], 1.0, &mut rng)
            .unwrap();
        assert_eq!(a, 2);
        assert_eq!(logp, 0.0);
    }

    #[test]
    fn zero_weights_uniform_actions() {
        let p = PolicyParams::zeros(2, 6);
        let lp = p
            .log_prob_action(&[1.0, 1.0], Some(Polarity::Positive), 3, &[0, 1, 3, 5], 1.0)
            .unwrap();
        assert!((lp - (0.25f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn polarity_flip_changes_actions() {
        let mut p = PolicyParams::zeros(1, 2);
        let cols = p.action_cols();
        p.action_weights[cols + 1 + Polarity::Positive.index()] = 1.5;
        let x = [1.0];
        let pos = p.action_probs(&x, Some(Polarity::Positive), &[0, 1], 1.0).unwrap();
        let neg = p.action_probs(&x, Some(Polarity::Negative), &[0, 1], 1.0).unwrap();
        assert!((pos[1] - neg[1]).abs() > 0.1);
    }

    #[test]
    fn conditioning_can_flip_argmax() {
        // Handcrafted: positive pushes towards action 0, negative towards 1.
        let mut p = PolicyParams::zeros(1, 2);
        let cols = p.action_cols();
        p.action_weights[1 + Polarity::Positive.index()] = 2.0;
        p.action_weights[cols + 1 + Polarity::Negative.index()] = 2.0;
        let argmax = |z| {
            let q = p.action_probs(&[1.0], Some(z), &[0, 1], 1.0).unwrap();
            if q[0] > q[1] {
                0
            } else {
                1
            }
        };
        assert_eq!(argmax(Polarity::Positive), 0);
        assert_eq!(argmax(Polarity::Negative), 1);
    }

    #[test]
    fn logged_logp_matches_recomputation() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut r, 3, 5);
        let x = [0.5, 1.0, -0.25];
        let adm = [0, 1, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (z, lz) = p.sample_guidance_from_features(&x, 1.0, &mut rng).unwrap();
        let (a, la) = p
            .sample_action_from_features(&x, Some(z), &adm, 1.0, &mut rng)
            .unwrap();
        assert!((p.log_prob_guidance(&x, z, 1.0).unwrap() - lz).abs() <= 1e-12);
        assert!((p.log_prob_action(&x, Some(z), a, &adm, 1.0).unwrap() - la).abs() <= 1e-12);
    }

    #[test]
    fn inadmissible_queries_rejected() {
        let p = PolicyParams::zeros(2, 4);
        assert!(p.log_prob_action(&[1.0, 0.0], None, 3, &[0, 1], 1.0).is_err());
        assert!(p.grad_log_prob_action(&[1.0, 0.0], None, 3, &[0, 1], 1.0).is_err());
        assert!(p.action_probs(&[1.0, 0.0], None, &[], 1.0).is_err());
    }

    #[test]
    fn uniform_gradient_closed_form() {
        let p = PolicyParams::zeros(2, 4);
        let x = [2.0, -1.0];
        let g = p.grad_log_prob_guidance(&x, Polarity::Neutral, 1.0).unwrap();
        for k in 0..3 {
            let expect = if k == 1 { 1.0 - 1.0 / 3.0 } else { -1.0 / 3.0 };
            for f in 0..2 {
                assert!((g[k * 2 + f] - x[f] * expect).abs() < 1e-15);
            }
        }
        assert!(g[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn freeze_contract() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_params(&mut r, 2, 3);
        let before = p.clone();
        p.freeze_guidance_head();
        let delta = vec![0.5; p.num_params()];
        p.apply_update(&delta).unwrap();
        assert_eq!(p.guidance_weights, before.guidance_weights);
        assert_ne!(p.action_weights, before.action_weights);
        p.unfreeze_guidance_head();
        p.apply_update(&delta).unwrap();
        assert_ne!(p.guidance_weights, before.guidance_weights);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&mut r, 3, 2);
        let ck = PolicyCheckpoint::new(p, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(PolicyCheckpoint::load(&path).unwrap(), ck);
        let bad = serde_json::to_string(&PolicyCheckpoint { version: 99, ..ck }).unwrap();
        assert!(PolicyCheckpoint::from_json(&bad).is_err());
    }
}
