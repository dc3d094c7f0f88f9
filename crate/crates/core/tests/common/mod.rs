#![allow(dead_code)]

use sam_core::experiment::ExperimentConfig;

/// Minutes-scale setup: every frozen network gets a handful of steps.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for s in [&mut c.age_schedule, &mut c.eval_schedule, &mut c.identity_schedule] {
        s.steps = 4;
        s.batch_size = 4;
    }
    c.inverter.schedule.steps = 4;
    c.inverter.schedule.batch_size = 4;
    c.train.steps = 6;
    c.train.batch_size = 2;
    c.train_size = 12;
    c.heldout_size = 3;
    c.eval.n_candidates = 5;
    c
}

pub const TINY_KV: &str = "\
age_steps=4
age_batch_size=4
eval_age_steps=4
eval_age_batch_size=4
identity_steps=4
identity_batch_size=4
inverter_steps=4
inverter_batch_size=4
steps=6
batch_size=2
train_size=12
heldout_size=3
eval_candidates=5
";
