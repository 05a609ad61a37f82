//! Shared fixtures for the benchmarks: a small trained model and its data.

use motionmap::config::RunConfig;
use motionmap::pipeline::MotionMapModel;
use motionmap::train::{run_training, Dataset, TrainHooks};

pub struct Fixture {
    pub config: RunConfig,
    pub data: Dataset,
    pub model: MotionMapModel,
}

/// Trains the seconds-scale smoke configuration end to end.
pub fn trained_fixture() -> Fixture {
    let config = RunConfig::smoke();
    let data = Dataset::synthetic(&config).expect("smoke corpus");
    let checkpoint = run_training(&config, &data, None, &mut TrainHooks::default()).expect("smoke training");
    let model = checkpoint.model().expect("complete checkpoint");
    Fixture { config, data, model }
}
