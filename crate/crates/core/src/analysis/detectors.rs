//! Error-pattern detectors over single trajectories. Object and location
//! semantics come from the environment's step events, never from action ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::trajectory::{Event, Trajectory};

pub const LOOP_CONSECUTIVE: usize = 5;
pub const LOOP_SHARE: f64 = 0.5;
pub const REDUNDANT_REVISITS: usize = 8;
pub const SAME_OBJECT_EXAMINES: usize = 5;
pub const IRRELEVANT_EXAMINES: usize = 4;
pub const NON_TARGET_PICKUPS: usize = 7;
pub const QUERY_REPEATS: usize = 3;
pub const BACK_TO_SEARCH_CYCLES: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavFlags {
    pub looping: bool,
    pub redundant_exploration: bool,
    pub wrong_object_focus: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShopFlags {
    pub query_looping: bool,
    pub navigation_cycling: bool,
    pub premature_purchase: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ErrorFlags {
    Nav(NavFlags),
    Shop(ShopFlags),
}

impl ErrorFlags {
    /// `(name, raised)` pairs in report order.
    pub fn named(&self) -> Vec<(&'static str, bool)> {
        match self {
            ErrorFlags::Nav(f) => vec![
                ("looping", f.looping),
                ("redundant_exploration", f.redundant_exploration),
                ("wrong_object_focus", f.wrong_object_focus),
            ],
            ErrorFlags::Shop(f) => vec![
                ("query_looping", f.query_looping),
                ("navigation_cycling", f.navigation_cycling),
                ("premature_purchase", f.premature_purchase),
            ],
        }
    }
}

fn longest_run<T: PartialEq>(items: &[T]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for (i, x) in items.iter().enumerate() {
        run = if i > 0 && items[i - 1] == *x { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

fn events(traj: &Trajectory) -> impl Iterator<Item = &Event> {
    traj.steps().iter().flat_map(|s| s.events.iter())
}

pub fn detect_nav_errors(traj: &Trajectory) -> NavFlags {
    let actions: Vec<_> = traj.actions().collect();
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &a in &actions {
        *counts.entry(a).or_default() += 1;
    }
    let max_share = counts.values().copied().max().unwrap_or(0);
    let looping = longest_run(&actions) >= LOOP_CONSECUTIVE
        || (!actions.is_empty() && max_share as f64 >= LOOP_SHARE * actions.len() as f64);

    let mut revisits = 0;
    let mut examined: HashMap<&str, usize> = HashMap::new();
    let mut irrelevant_examined: HashMap<&str, usize> = HashMap::new();
    let mut non_target_pickups = 0;
    for e in events(traj) {
        match e {
            Event::Visit { revisit: true, .. } => revisits += 1,
            Event::Examine { object, relevant } => {
                *examined.entry(object).or_default() += 1;
                if !relevant {
                    *irrelevant_examined.entry(object).or_default() += 1;
                }
            }
            Event::Pickup { target: false, .. } => non_target_pickups += 1,
            _ => {}
        }
    }
    let redundant_exploration = revisits >= REDUNDANT_REVISITS
        || examined.values().any(|&n| n >= SAME_OBJECT_EXAMINES);
    let wrong_object_focus = irrelevant_examined.values().any(|&n| n >= IRRELEVANT_EXAMINES)
        || non_target_pickups >= NON_TARGET_PICKUPS;
    NavFlags {
        looping,
        redundant_exploration,
        wrong_object_focus,
    }
}

/// Case-folded, whitespace-collapsed query.
pub fn normalize_query(q: &str) -> String {
    q.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn detect_shop_errors(traj: &Trajectory) -> ShopFlags {
    let mut queries: HashMap<String, usize> = HashMap::new();
    let mut backs = 0;
    let mut bought = false;
    let mut premature_purchase = false;
    for e in events(traj) {
        match e {
            Event::Search { query } => *queries.entry(normalize_query(query)).or_default() += 1,
            Event::BackToSearch => backs += 1,
            Event::Buy { premature } => {
                bought = true;
                premature_purchase |= *premature;
            }
            _ => {}
        }
    }
    ShopFlags {
        query_looping: queries.values().any(|&n| n >= QUERY_REPEATS),
        navigation_cycling: backs >= BACK_TO_SEARCH_CYCLES && !bought,
        premature_purchase,
    }
}

pub fn detect_errors(traj: &Trajectory, navigation: bool) -> ErrorFlags {
    if navigation {
        ErrorFlags::Nav(detect_nav_errors(traj))
    } else {
        ErrorFlags::Shop(detect_shop_errors(traj))
    }
}
