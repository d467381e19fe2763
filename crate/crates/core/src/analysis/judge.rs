//! Hindsight-judge rubric: scores a step's guidance label against the label
//! assigned with full-trajectory knowledge.
//!
//! Exact match scores 0.8, adjacent mismatch 0.2, opposite mismatch -0.8.
//! The reason then shifts the score by +0.2 (supports), -0.2 (contradicts)
//! or 0 (generic) before clipping to [-1, 1]. An invalid student label is
//! -1.0 regardless of the reason.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::trajectory::Polarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StudentLabel {
    Valid(Polarity),
    Invalid,
}

impl Serialize for StudentLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            StudentLabel::Valid(p) => p.serialize(s),
            StudentLabel::Invalid => s.serialize_str("invalid"),
        }
    }
}

impl<'de> Deserialize<'de> for StudentLabel {
    /// Anything other than the three polarity strings is an invalid label.
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        Ok(v.as_str()
            .and_then(|s| s.parse::<Polarity>().ok())
            .map(StudentLabel::Valid)
            .unwrap_or(StudentLabel::Invalid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasonQuality {
    Supports,
    Contradicts,
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeInput {
    pub student_label: StudentLabel,
    pub oracle_label: Polarity,
    pub reason_quality: ReasonQuality,
}

/// Rubric score in [-1, 1]. Computed in tenths so the result is the exact
/// decimal value.
pub fn hindsight_judge(j: &JudgeInput) -> f64 {
    let student = match j.student_label {
        StudentLabel::Invalid => return -1.0,
        StudentLabel::Valid(p) => p,
    };
    let base: i32 = match (student.sign() - j.oracle_label.sign()).abs() {
        0 => 8,
        1 => 2,
        _ => -8,
    };
    let adjust = match j.reason_quality {
        ReasonQuality::Supports => 2,
        ReasonQuality::Contradicts => -2,
        ReasonQuality::Generic => 0,
    };
    (base + adjust).clamp(-10, 10) as f64 / 10.0
}
