#![allow(dead_code)]

use cassle_core::config::RunConfig;
use cassle_core::distill::SslMethod;
use cassle_core::scenario::Regime;
use cassle_core::train::Strategy;

/// A run small enough for debug builds.
pub fn tiny(method: SslMethod, strategy: Strategy, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(method, Regime::ClassInc, seed);
    c.strategy = strategy;
    c.data.n_classes = 4;
    c.data.samples_per_class = 30;
    c.data.input_dim = 8;
    c.arch.backbone_hidden = vec![16];
    c.arch.feature_dim = 8;
    c.arch.projector_hidden = 32;
    c.arch.proj_dim = 6;
    c.training.steps_per_task = 12;
    c.training.batch_size = 16;
    c.training.fisher_batches = 2;
    c.training.log_every = 4;
    c.probe.epochs = 3;
    c
}
