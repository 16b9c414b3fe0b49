#![allow(dead_code)]

use framedistill::par::Execution;
use framedistill::synth::generate;
use framedistill::train::{Model, Prepared, TrainConfig};

/// Default geometry with a small dataset and short stages.
pub fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.num_train = 96;
    cfg.data.num_val = 40;
    cfg.teacher.steps = 12;
    cfg.student.steps = 12;
    cfg.teacher.batch_size = 8;
    cfg.student.batch_size = 8;
    cfg
}

pub fn prepare(cfg: &TrainConfig, exec: Execution) -> Prepared {
    let data = generate(&cfg.data, exec).unwrap();
    let encoder = Model::new(cfg).unwrap().encoder;
    Prepared::new(data, &encoder, exec).unwrap()
}
