//! Agreement between sampled guidance polarities and ground-truth progress.

use crate::env::{replay_progress, EnvSpec};
use crate::error::{Error, Result};
use crate::trajectory::{Polarity, Trajectory};

/// Polarity implied by a progress change; an exact zero is neutral.
pub fn delta_polarity(delta: f64) -> Polarity {
    if delta > 0.0 {
        Polarity::Positive
    } else if delta < 0.0 {
        Polarity::Negative
    } else {
        Polarity::Neutral
    }
}

/// Fraction of steps whose polarity matches the sign of that step's progress
/// change. `progress` holds the oracle value before the first step and after
/// every step (length `T + 1`).
pub fn guidance_accuracy(traj: &Trajectory, progress: &[f64]) -> Result<f64> {
    if progress.len() != traj.len() + 1 {
        return Err(Error::Dimension(format!(
            "progress has {} entries, trajectory needs {}",
            progress.len(),
            traj.len() + 1
        )));
    }
    if traj.is_empty() {
        return Ok(1.0);
    }
    let hits = traj
        .polarities()
        .zip(progress.windows(2))
        .filter(|(z, w)| *z == delta_polarity(w[1] - w[0]))
        .count();
    Ok(hits as f64 / traj.len() as f64)
}

/// [`guidance_accuracy`] with progress obtained by replaying the trajectory.
pub fn replay_guidance_accuracy(spec: &EnvSpec, traj: &Trajectory) -> Result<f64> {
    guidance_accuracy(traj, &replay_progress(spec, traj)?)
}
