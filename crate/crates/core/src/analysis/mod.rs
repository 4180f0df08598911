//! FLOPs accounting and the synthetic miscalibration experiment.

mod calib;
mod flops;

pub use calib::{
    eval_alignment_recovery, gen_scenario, CalibScenario, QueryResult, RecoveryReport, Scenario,
    DEFAULT_RADIUS, LOW_CONFIDENCE_HIT_RATE,
};
pub use flops::{count_flops, count_flops_without_afs, FlopsReport};
