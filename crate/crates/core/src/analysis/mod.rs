//! Error-pattern detectors, the hindsight-judge rubric, guidance accuracy
//! and report emission.

pub mod accuracy;
pub mod detectors;
pub mod judge;
pub mod report;

pub use accuracy::{delta_polarity, guidance_accuracy, replay_guidance_accuracy};
pub use detectors::{detect_errors, detect_nav_errors, detect_shop_errors, ErrorFlags, NavFlags, ShopFlags};
pub use judge::{hindsight_judge, JudgeInput, ReasonQuality, StudentLabel};
pub use report::{CurvePoint, ErrorReport, MetricsRow, MetricsWriter};
