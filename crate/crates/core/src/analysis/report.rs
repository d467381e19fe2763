//! Run-level aggregation and the CSV contracts: metrics, learning curves and
//! error reports.
//!
//! Floats are written with Rust's shortest round-trip `Display` form, which
//! never uses exponent notation and parses back to the identical value.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::detectors::{detect_errors, ErrorFlags};
use crate::env::EnvKind;
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "variant",
    "seed",
    "lambda",
    "mean_return",
    "success_rate",
    "mean_guidance_reward",
    "mean_length",
    "guidance_accuracy",
];
pub const CURVE_HEADER: [&str; 4] = ["step", "variant", "seed", "success_rate"];
pub const ERROR_REPORT_HEADER: [&str; 4] = ["variant", "env", "flag", "pct_of_failures"];

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::InvalidValue(format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| Error::InvalidValue(format!("column {name}: cannot parse {raw:?}")))
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::InvalidValue(format!(
            "unexpected CSV header {:?}, expected {:?}",
            header.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    Ok(())
}

/// One training step of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub variant: String,
    pub seed: u64,
    pub lambda: f64,
    pub mean_return: f64,
    pub success_rate: f64,
    /// Unweighted mean of summed polarity rewards per trajectory.
    pub mean_guidance_reward: f64,
    pub mean_length: f64,
    pub guidance_accuracy: f64,
}

impl MetricsRow {
    fn record(&self) -> [String; 9] {
        [
            self.step.to_string(),
            self.variant.clone(),
            self.seed.to_string(),
            fmt_f64(self.lambda),
            fmt_f64(self.mean_return),
            fmt_f64(self.success_rate),
            fmt_f64(self.mean_guidance_reward),
            fmt_f64(self.mean_length),
            fmt_f64(self.guidance_accuracy),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Result<Self> {
        Ok(Self {
            step: parse_field(rec, 0, "step")?,
            variant: parse_field(rec, 1, "variant")?,
            seed: parse_field(rec, 2, "seed")?,
            lambda: parse_field(rec, 3, "lambda")?,
            mean_return: parse_field(rec, 4, "mean_return")?,
            success_rate: parse_field(rec, 5, "success_rate")?,
            mean_guidance_reward: parse_field(rec, 6, "mean_guidance_reward")?,
            mean_length: parse_field(rec, 7, "mean_length")?,
            guidance_accuracy: parse_field(rec, 8, "guidance_accuracy")?,
        })
    }
}

/// Single-owner metrics sink. The header is written on creation.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(METRICS_HEADER)?;
        Ok(Self { inner })
    }

    /// Appends to a sink that already holds a header.
    pub fn append(w: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(w),
        }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.record())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut mw = MetricsWriter::new(w)?;
    for r in rows {
        mw.write(r)?;
    }
    mw.flush()
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &METRICS_HEADER)?;
    rdr.records().map(|rec| MetricsRow::parse(&rec?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub variant: String,
    pub seed: u64,
    pub success_rate: f64,
}

impl From<&MetricsRow> for CurvePoint {
    fn from(m: &MetricsRow) -> Self {
        Self {
            step: m.step,
            variant: m.variant.clone(),
            seed: m.seed,
            success_rate: m.success_rate,
        }
    }
}

pub fn write_curve_csv<W: Write>(w: W, points: &[CurvePoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(CURVE_HEADER)?;
    for p in points {
        wtr.write_record([
            p.step.to_string(),
            p.variant.clone(),
            p.seed.to_string(),
            fmt_f64(p.success_rate),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: Read>(r: R) -> Result<Vec<CurvePoint>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &CURVE_HEADER)?;
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(CurvePoint {
                step: parse_field(&rec, 0, "step")?,
                variant: parse_field(&rec, 1, "variant")?,
                seed: parse_field(&rec, 2, "seed")?,
                success_rate: parse_field(&rec, 3, "success_rate")?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryFlags {
    pub task_id: String,
    pub seed: u64,
    pub success: bool,
    pub flags: ErrorFlags,
}

/// Error-pattern counts for one variant on one environment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub variant: String,
    pub env: EnvKind,
    pub episodes: usize,
    pub failures: usize,
    /// `(flag, failed episodes carrying it)`; an episode may count under
    /// several flags.
    pub counts: Vec<(&'static str, usize)>,
    pub trajectories: Vec<TrajectoryFlags>,
}

impl ErrorReport {
    /// All trajectories must come from `env`. Per-trajectory flags are
    /// ordered by `(task_id, seed)` regardless of input order.
    pub fn from_trajectories(variant: &str, env: EnvKind, trajs: &[Trajectory]) -> Result<Self> {
        let mut trajectories = Vec::with_capacity(trajs.len());
        for t in trajs {
            if EnvKind::from_task_id(&t.task_id) != Some(env) {
                return Err(Error::InvalidValue(format!(
                    "trajectory {} does not belong to environment {env}",
                    t.task_id
                )));
            }
            trajectories.push(TrajectoryFlags {
                task_id: t.task_id.clone(),
                seed: t.seed,
                success: t.is_success(),
                flags: detect_errors(t, env.is_navigation()),
            });
        }
        trajectories.sort_by(|a, b| (&a.task_id, a.seed).cmp(&(&b.task_id, b.seed)));
        let names = match env.is_navigation() {
            true => ["looping", "redundant_exploration", "wrong_object_focus"],
            false => ["query_looping", "navigation_cycling", "premature_purchase"],
        };
        let mut counts: Vec<(&'static str, usize)> = names.iter().map(|&n| (n, 0)).collect();
        let mut failures = 0;
        for tf in trajectories.iter().filter(|tf| !tf.success) {
            failures += 1;
            for ((_, count), (_, raised)) in counts.iter_mut().zip(tf.flags.named()) {
                *count += raised as usize;
            }
        }
        Ok(Self {
            variant: variant.to_string(),
            env,
            episodes: trajectories.len(),
            failures,
            counts,
            trajectories,
        })
    }

    /// Groups a mixed log by environment (in `EnvKind` order).
    pub fn by_env(variant: &str, trajs: &[Trajectory]) -> Result<Vec<Self>> {
        let mut groups: BTreeMap<&'static str, (EnvKind, Vec<Trajectory>)> = BTreeMap::new();
        for t in trajs {
            let env = EnvKind::from_task_id(&t.task_id).ok_or_else(|| {
                Error::InvalidValue(format!("cannot infer environment from task id {:?}", t.task_id))
            })?;
            groups.entry(env.as_str()).or_insert_with(|| (env, Vec::new())).1.push(t.clone());
        }
        groups
            .into_values()
            .map(|(env, ts)| Self::from_trajectories(variant, env, &ts))
            .collect()
    }

    /// Percentage of failed episodes carrying each flag; 0 when nothing failed.
    pub fn percentages(&self) -> Vec<(&'static str, f64)> {
        self.counts
            .iter()
            .map(|&(name, n)| {
                let pct = if self.failures == 0 {
                    0.0
                } else {
                    100.0 * n as f64 / self.failures as f64
                };
                (name, pct)
            })
            .collect()
    }
}

pub fn write_error_report_csv<W: Write>(w: W, reports: &[ErrorReport]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(ERROR_REPORT_HEADER)?;
    for r in reports {
        for (flag, pct) in r.percentages() {
            wtr.write_record([r.variant.as_str(), r.env.as_str(), flag, &fmt_f64(pct)])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Event, GuidanceSignal, Observation, Step, Termination};

    fn shop_traj(seed: u64, events: Vec<Vec<Event>>, success: bool) -> Trajectory {
        let mut t = Trajectory::new(format!("noisyshop/{seed}"), seed, 15, true);
        for ev in events {
            t.push_step(Step {
                observation: Observation::new("shop:home", vec![]),
                guidance: GuidanceSignal::placeholder(),
                action: 0,
                logp_guidance: 0.0,
                logp_action: 0.0,
                admissible: vec![0],
                events: ev,
            })
            .unwrap();
        }
        let (term, r) = if success {
            (Termination::Success, 1.0)
        } else {
            (Termination::Failure, 0.4)
        };
        t.finish(term, r).unwrap();
        t
    }

    #[test]
    fn percentages_over_failures_only() {
        let q = || vec![Event::Search { query: "color red".into() }];
        let trajs = vec![
            shop_traj(1, vec![q(), q(), q(), vec![Event::Buy { premature: true }]], false),
            shop_traj(2, vec![vec![Event::Buy { premature: true }]], false),
            // A success with a looping pattern does not count.
            shop_traj(3, vec![q(), q(), q(), vec![Event::Buy { premature: false }]], true),
        ];
        let r = ErrorReport::from_trajectories("sg_gr", EnvKind::NoisyShop, &trajs).unwrap();
        assert_eq!(r.failures, 2);
        assert_eq!(
            r.percentages(),
            vec![
                ("query_looping", 50.0),
                ("navigation_cycling", 0.0),
                ("premature_purchase", 100.0)
            ]
        );
    }

    #[test]
    fn no_failures_gives_zero() {
        let trajs = vec![shop_traj(1, vec![vec![Event::Buy { premature: false }]], true)];
        let r = ErrorReport::from_trajectories("x", EnvKind::NoisyShop, &trajs).unwrap();
        assert!(r.percentages().iter().all(|&(_, p)| p == 0.0));
    }

    #[test]
    fn report_order_is_input_independent() {
        let a = shop_traj(1, vec![vec![Event::BackToSearch]], false);
        let b = shop_traj(2, vec![vec![Event::NoOp]], false);
        let r1 = ErrorReport::from_trajectories("x", EnvKind::NoisyShop, &[a.clone(), b.clone()]).unwrap();
        let r2 = ErrorReport::from_trajectories("x", EnvKind::NoisyShop, &[b, a]).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn wrong_env_rejected() {
        let t = shop_traj(1, vec![vec![Event::NoOp]], false);
        assert!(ErrorReport::from_trajectories("x", EnvKind::KeyDoor, &[t]).is_err());
    }

    #[test]
    fn metrics_round_trip_exactly() {
        let row = MetricsRow {
            step: 3,
            variant: "sg_gr".into(),
            seed: 2,
            lambda: 0.1 + 0.2,
            mean_return: 1e-17,
            success_rate: 0.125,
            mean_guidance_reward: -0.30000000000000004,
            mean_length: 29.875,
            guidance_accuracy: 2.0 / 3.0,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, std::slice::from_ref(&row)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&METRICS_HEADER.join(",")));
        assert!(!text.contains('e') || !text.lines().nth(1).unwrap().contains("e-"));
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), vec![row]);
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
