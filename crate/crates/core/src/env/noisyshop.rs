use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{env_rng, recency_histogram, EnvKind, Environment, StepInfo, StepOutcome, RECENCY_WINDOW};
use crate::error::{EnvError, Error, Result};
use crate::policy::FeatureMap;
use crate::trajectory::{ActionId, Event, History, Observation, Polarity};

const SLOT_NAMES: [&str; 3] = ["color", "material", "style"];
const VALUE_NAMES: [[&str; 3]; 3] = [
    ["red", "blue", "green"],
    ["cotton", "wool", "linen"],
    ["casual", "formal", "sport"],
];
const OPTION_NAMES: [&str; 2] = ["size", "fit"];

/// Fixed attribute slots per item.
pub const SLOTS: usize = 3;
/// Selectable options per item; the target requires all of them.
pub const OPTIONS: usize = 2;
const VALUES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyShopSpec {
    #[serde(default = "default_catalog")]
    pub catalog_size: usize,
    #[serde(default = "default_page")]
    pub page_size: usize,
    #[serde(default = "default_noise")]
    pub ranking_noise: f64,
    #[serde(default = "default_horizon")]
    pub horizon_cap: usize,
}

fn default_catalog() -> usize {
    10
}

fn default_page() -> usize {
    4
}

fn default_noise() -> f64 {
    2.0
}

fn default_horizon() -> usize {
    15
}

impl Default for NoisyShopSpec {
    fn default() -> Self {
        Self {
            catalog_size: default_catalog(),
            page_size: default_page(),
            ranking_noise: default_noise(),
            horizon_cap: default_horizon(),
        }
    }
}

impl NoisyShopSpec {
    pub fn validate(&self) -> Result<()> {
        if self.catalog_size < 2 {
            return Err(Error::config("env.catalog_size", "must be >= 2"));
        }
        if self.page_size == 0 {
            return Err(Error::config("env.page_size", "must be >= 1"));
        }
        if !(self.ranking_noise >= 0.0 && self.ranking_noise.is_finite()) {
            return Err(Error::config("env.ranking_noise", "must be finite and >= 0"));
        }
        if self.horizon_cap < 5 {
            return Err(Error::config("env.horizon_cap", "must be >= 5"));
        }
        Ok(())
    }

    fn search_action(&self, slot: usize) -> ActionId {
        slot as ActionId
    }

    fn open_action(&self, rank: usize) -> ActionId {
        (SLOTS + rank) as ActionId
    }

    fn select_action(&self, option: usize) -> ActionId {
        (SLOTS + self.page_size + option) as ActionId
    }

    fn buy_action(&self) -> ActionId {
        (SLOTS + self.page_size + OPTIONS) as ActionId
    }

    fn back_action(&self) -> ActionId {
        self.buy_action() + 1
    }

    fn num_actions(&self) -> usize {
        SLOTS + self.page_size + OPTIONS + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Item {
    attrs: [usize; SLOTS],
    offers: [bool; OPTIONS],
}

#[derive(Debug, Clone, PartialEq)]
enum Page {
    Home,
    Results(Vec<usize>),
    Item { item: usize, selected: [bool; OPTIONS] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShopAction {
    Search(usize),
    Open(usize),
    Select(usize),
    Buy,
    Back,
}

/// Catalog search task with a noisy ranking. The instruction fixes the
/// target's attributes; the agent must find the matching item, select its
/// options and buy. Buying ends the episode with the matched-attribute
/// fraction as reward.
#[derive(Debug, Clone)]
pub struct NoisyShop {
    spec: NoisyShopSpec,
    catalog: Vec<Item>,
    target: [usize; SLOTS],
    rankings: Vec<Vec<usize>>,
    page: Page,
    steps: usize,
    done: bool,
    final_score: Option<f64>,
    ready: bool,
}

impl NoisyShop {
    pub fn new(spec: NoisyShopSpec) -> Self {
        Self {
            spec,
            catalog: Vec::new(),
            target: [0; SLOTS],
            rankings: Vec::new(),
            page: Page::Home,
            steps: 0,
            done: false,
            final_score: None,
            ready: false,
        }
    }

    pub fn decode(&self, action: ActionId) -> Option<ShopAction> {
        let a = action as usize;
        let p = self.spec.page_size;
        if a < SLOTS {
            Some(ShopAction::Search(a))
        } else if a < SLOTS + p {
            Some(ShopAction::Open(a - SLOTS))
        } else if a < SLOTS + p + OPTIONS {
            Some(ShopAction::Select(a - SLOTS - p))
        } else if action == self.spec.buy_action() {
            Some(ShopAction::Buy)
        } else if action == self.spec.back_action() {
            Some(ShopAction::Back)
        } else {
            None
        }
    }

    pub fn encode(&self, action: ShopAction) -> ActionId {
        match action {
            ShopAction::Search(s) => self.spec.search_action(s),
            ShopAction::Open(r) => self.spec.open_action(r),
            ShopAction::Select(o) => self.spec.select_action(o),
            ShopAction::Buy => self.spec.buy_action(),
            ShopAction::Back => self.spec.back_action(),
        }
    }

    fn fixed_matches(&self, item: usize) -> usize {
        let it = &self.catalog[item];
        (0..SLOTS).filter(|&s| it.attrs[s] == self.target[s]).count()
    }

    fn is_exact(&self, item: usize) -> bool {
        self.fixed_matches(item) == SLOTS && self.catalog[item].offers.iter().all(|&o| o)
    }

    /// Catalog index of the item that matches the target exactly.
    pub fn exact_item(&self) -> Option<usize> {
        (0..self.catalog.len()).find(|&i| self.is_exact(i))
    }

    pub fn query_text(&self, slot: usize) -> String {
        format!("{} {}", SLOT_NAMES[slot], VALUE_NAMES[slot][self.target[slot]])
    }

    fn purchase_score(&self, item: usize, selected: &[bool; OPTIONS]) -> f64 {
        let chosen = selected.iter().filter(|&&s| s).count();
        (self.fixed_matches(item) + chosen) as f64 / (SLOTS + OPTIONS) as f64
    }

    fn observation(&self) -> Observation {
        let p = self.spec.page_size;
        let mut state = Vec::with_capacity(2 + p + 1 + 2 * OPTIONS);
        let key;
        match &self.page {
            Page::Home => {
                key = "shop:home";
                state.push(0);
                state.extend(std::iter::repeat_n(-1, p + 1 + 2 * OPTIONS));
            }
            Page::Results(list) => {
                key = "shop:results";
                state.push(1);
                for r in 0..p {
                    state.push(list.get(r).map(|&i| self.score_hint(i)).unwrap_or(-1));
                }
                state.extend(std::iter::repeat_n(-1, 1 + 2 * OPTIONS));
            }
            Page::Item { item, selected } => {
                key = "shop:item";
                state.push(2);
                state.extend(std::iter::repeat_n(-1, p));
                state.push(self.fixed_matches(*item) as i64);
                state.extend(self.catalog[*item].offers.iter().map(|&o| o as i64));
                state.extend(selected.iter().map(|&s| s as i64));
            }
        }
        Observation::new(key, state)
    }

    /// What a result listing reveals: matched fixed attributes, plus
    /// `SLOTS + 1` when the item also offers every option.
    fn score_hint(&self, item: usize) -> i64 {
        if self.is_exact(item) {
            SLOTS as i64 + 1
        } else {
            self.fixed_matches(item) as i64
        }
    }
}

impl Environment for NoisyShop {
    fn kind(&self) -> EnvKind {
        EnvKind::NoisyShop
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = env_rng(seed, 0x7368_6f70);
        let n = self.spec.catalog_size;
        let target = [(); SLOTS].map(|_| rng.gen_range(0..VALUES));
        let exact_at = rng.gen_range(0..n);
        let mut catalog = Vec::with_capacity(n);
        for i in 0..n {
            if i == exact_at {
                catalog.push(Item {
                    attrs: target,
                    offers: [true; OPTIONS],
                });
            } else {
                let mut attrs = [(); SLOTS].map(|_| rng.gen_range(0..VALUES));
                let offers = [(); OPTIONS].map(|_| rng.gen_bool(0.6));
                if attrs == target && offers.iter().all(|&o| o) {
                    attrs[0] = (attrs[0] + 1) % VALUES;
                }
                catalog.push(Item { attrs, offers });
            }
        }
        self.catalog = catalog;
        self.target = target;
        // Noisy relevance ranking per search template; redrawn until the
        // exact item is listed for at least one template.
        let p = self.spec.page_size;
        loop {
            let rankings: Vec<Vec<usize>> = (0..SLOTS)
                .map(|slot| {
                    let mut scored: Vec<(f64, usize)> = (0..n)
                        .map(|i| {
                            let it = &self.catalog[i];
                            let on_query = if it.attrs[slot] == target[slot] { 2.0 } else { 0.0 };
                            let others = (0..SLOTS)
                                .filter(|&s| s != slot && it.attrs[s] == target[s])
                                .count() as f64;
                            let noise = rng.gen::<f64>() * self.spec.ranking_noise;
                            (on_query + others + noise, i)
                        })
                        .collect();
                    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                    scored.into_iter().take(p).map(|(_, i)| i).collect()
                })
                .collect();
            if rankings.iter().any(|r| r.contains(&exact_at)) {
                self.rankings = rankings;
                break;
            }
        }
        self.page = Page::Home;
        self.steps = 0;
        self.done = false;
        self.final_score = None;
        self.ready = true;
        self.observation()
    }

    fn step(&mut self, action: ActionId) -> Result<StepOutcome, EnvError> {
        if !self.ready {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if !self.admissible_actions().contains(&action) {
            return Err(EnvError::Inadmissible { action });
        }
        let mut events = Vec::new();
        let mut reward = 0.0;
        match self.decode(action).expect("admissible actions decode") {
            ShopAction::Search(slot) => {
                events.push(Event::Search {
                    query: self.query_text(slot),
                });
                self.page = Page::Results(self.rankings[slot].clone());
            }
            ShopAction::Open(rank) => {
                let Page::Results(list) = &self.page else { unreachable!() };
                self.page = Page::Item {
                    item: list[rank],
                    selected: [false; OPTIONS],
                };
            }
            ShopAction::Select(opt) => {
                let Page::Item { selected, .. } = &mut self.page else { unreachable!() };
                selected[opt] = true;
                events.push(Event::Examine {
                    object: OPTION_NAMES[opt].to_string(),
                    relevant: true,
                });
            }
            ShopAction::Buy => {
                let Page::Item { item, selected } = &self.page else { unreachable!() };
                let score = self.purchase_score(*item, selected);
                let premature = !selected.iter().any(|&s| s);
                events.push(Event::Buy { premature });
                self.final_score = Some(score);
                reward = score;
                self.done = true;
            }
            ShopAction::Back => {
                events.push(Event::BackToSearch);
                self.page = Page::Home;
            }
        }
        self.steps += 1;
        if self.steps >= self.spec.horizon_cap {
            self.done = true;
        }
        let success = self.final_score == Some(1.0);
        Ok(StepOutcome {
            observation: self.observation(),
            done: self.done,
            env_reward: reward,
            info: StepInfo { success, events },
        })
    }

    fn admissible_actions(&self) -> Vec<ActionId> {
        if self.done || !self.ready {
            return Vec::new();
        }
        let s = &self.spec;
        match &self.page {
            Page::Home => (0..SLOTS).map(|t| s.search_action(t)).collect(),
            Page::Results(list) => (0..list.len())
                .map(|r| s.open_action(r))
                .chain([s.back_action()])
                .collect(),
            Page::Item { item, selected } => (0..OPTIONS)
                .filter(|&o| self.catalog[*item].offers[o] && !selected[o])
                .map(|o| s.select_action(o))
                .chain([s.buy_action(), s.back_action()])
                .collect(),
        }
    }

    fn horizon_cap(&self) -> usize {
        self.spec.horizon_cap
    }

    fn num_actions(&self) -> usize {
        self.spec.num_actions()
    }

    fn action_name(&self, action: ActionId) -> String {
        match self.decode(action) {
            Some(ShopAction::Search(s)) => format!("search[{}]", SLOT_NAMES[s]),
            Some(ShopAction::Open(r)) => format!("click[result {r}]"),
            Some(ShopAction::Select(o)) => format!("click[{}]", OPTION_NAMES[o]),
            Some(ShopAction::Buy) => "click[buy now]".into(),
            Some(ShopAction::Back) => "click[back to search]".into(),
            None => format!("invalid({action})"),
        }
    }

    fn oracle_progress(&self) -> f64 {
        if let Some(score) = self.final_score {
            return score;
        }
        match &self.page {
            Page::Home => 0.0,
            Page::Results(list) => {
                if list.iter().any(|&i| self.is_exact(i)) {
                    0.2
                } else {
                    0.0
                }
            }
            Page::Item { item, selected } => {
                if self.is_exact(*item) {
                    let chosen = selected.iter().filter(|&&s| s).count() as f64;
                    0.4 + 0.4 * chosen / OPTIONS as f64
                } else {
                    0.0
                }
            }
        }
    }

    fn score(&self) -> f64 {
        self.final_score.unwrap_or(0.0)
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

/// Features: bias, page one-hot, per-result listing hints, opened-item
/// match, option availability, observable progress change, recency.
#[derive(Debug, Clone)]
pub struct NoisyShopFeatures {
    page_size: usize,
    num_actions: usize,
}

impl NoisyShopFeatures {
    pub fn new(spec: &NoisyShopSpec) -> Self {
        Self {
            page_size: spec.page_size,
            num_actions: spec.num_actions(),
        }
    }

    fn base_dim(&self) -> usize {
        1 + 3 + 2 * self.page_size + 2 + OPTIONS + 1 + 2
    }

    fn progressed_index(&self) -> usize {
        self.base_dim() - 2
    }

    fn regressed_index(&self) -> usize {
        self.base_dim() - 1
    }

    /// Observable stand-in for progress, computed from a listing alone.
    fn potential(&self, s: &[i64]) -> i64 {
        let p = self.page_size;
        let exact = SLOTS as i64 + 1;
        match s.first() {
            Some(1) => s[1..1 + p].contains(&exact) as i64,
            Some(2) => {
                let item_match = s[1 + p];
                let offers_all = s[2 + p..2 + p + OPTIONS].iter().all(|&o| o == 1);
                if item_match == SLOTS as i64 && offers_all {
                    2 + s[2 + p + OPTIONS..2 + p + 2 * OPTIONS].iter().sum::<i64>()
                } else {
                    0
                }
            }
            _ => 0,
        }
    }
}

impl FeatureMap for NoisyShopFeatures {
    fn dim(&self) -> usize {
        self.base_dim() + self.num_actions
    }

    fn encode(&self, history: &History<'_>, observation: &Observation) -> Vec<f64> {
        let p = self.page_size;
        let mut x = vec![0.0; self.base_dim()];
        x[0] = 1.0;
        let s = &observation.state;
        if s.len() == 2 + p + 2 * OPTIONS {
            let page = s[0].clamp(0, 2) as usize;
            x[1 + page] = 1.0;
            let exact = SLOTS as i64 + 1;
            for r in 0..p {
                let h = s[1 + r];
                if h == exact {
                    x[4 + r] = 1.0;
                }
                if h >= 0 {
                    x[4 + p + r] = h.min(SLOTS as i64) as f64 / SLOTS as f64;
                }
            }
            let base = 4 + 2 * p;
            if page == 2 {
                let m = s[1 + p];
                x[base] = (m == SLOTS as i64) as i64 as f64;
                x[base + 1] = m as f64 / SLOTS as f64;
                let mut chosen = 0.0;
                for o in 0..OPTIONS {
                    let offered = s[2 + p + o] == 1;
                    let sel = s[2 + p + OPTIONS + o] == 1;
                    if offered && !sel {
                        x[base + 2 + o] = 1.0;
                    }
                    if sel {
                        chosen += 1.0;
                    }
                }
                x[base + 2 + OPTIONS] = chosen / OPTIONS as f64;
            }
            if let Some(prev) = history.last() {
                if prev.observation.state.len() == s.len() {
                    let before = self.potential(&prev.observation.state);
                    let after = self.potential(s);
                    if after > before {
                        x[self.progressed_index()] = 1.0;
                    } else if after < before {
                        x[self.regressed_index()] = 1.0;
                    }
                }
            }
        }
        recency_histogram(history, self.num_actions, RECENCY_WINDOW, &mut x);
        x
    }

    fn guidance_prior(&self) -> Vec<(usize, Polarity, f64)> {
        vec![
            (self.progressed_index(), Polarity::Positive, 1.0),
            (self.regressed_index(), Polarity::Negative, 1.0),
            (0, Polarity::Neutral, 0.5),
        ]
    }
}
