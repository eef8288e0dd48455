//! Channel scoring, global selection, and the prune–train schedule.

pub mod criteria;
pub mod lrp;
pub mod schedule;
pub mod select;

pub use criteria::{score_channels, ChannelScoreTable, Criterion, CriterionKind, Normalization};
pub use lrp::lrp_relevance;
pub use schedule::{metrics_tsv, run_schedule, Checkpoint, ScheduleConfig, METRICS_HEADER};
pub use select::{select_global, Selection};
