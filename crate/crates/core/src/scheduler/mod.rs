//! Interactive training: dynamic loss weighting, learning-rate schedules and
//! the alternating round loop.

pub mod lr;
pub mod plan;
pub mod train;
pub mod weights;

pub use lr::{poly_lr, PolySchedule};
pub use plan::{RoundPlan, WeightingConfig};
pub use train::{
    derive_seed, CsvLog, FreezeCheck, LogRow, LogSink, Phase, RoundReport, Scene, TrainSettings, TrainState, Trainer,
    WeightRecord,
};
pub use weights::{convergence_rate, dynamic_weights, weighting_strategy, RateHistory, Strategy};
