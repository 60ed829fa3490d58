//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::Path;

use sha2::{Digest, Sha256};

use vq2_core::codec::Level;
use vq2_core::pipeline::config::{RunConfig, SyntheticConfig};
use vq2_core::prior::{ConditionGrid, PriorConfig};
use vq2_core::rejection::ClassifierConfig;

/// A 16×16 two-level run small enough to train end to end in a few seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.codec.image_size = 16;
    cfg.codec.hidden_units = 8;
    cfg.codec.residual_units = 4;
    cfg.codec.residual_layers = 1;
    for level in &mut cfg.codec.levels {
        level.codebook_size = 8;
        level.code_dim = 4;
    }
    let prior = |h: usize, condition: Option<ConditionGrid>| PriorConfig {
        height: h,
        width: h,
        num_codes: 8,
        hidden_units: 8,
        residual_units: 8,
        layers: 2,
        attention_layers: usize::from(condition.is_none()),
        attention_period: 2,
        attention_heads: 2,
        filter_size: 3,
        dropout: 0.0,
        attention_dropout: 0.0,
        output_stack_layers: 1,
        conditioning_blocks: usize::from(condition.is_some()),
        num_classes: 2,
        condition,
    };
    cfg.priors.insert(Level::Top, prior(2, None));
    cfg.priors.insert(Level::Bottom, prior(4, Some(ConditionGrid { height: 2, width: 2, num_codes: 8 })));
    cfg.stage1.steps = 6;
    cfg.stage1.batch_size = 4;
    cfg.stage1.log_interval = 2;
    cfg.stage1.checkpoint_interval = 3;
    cfg.stage2.steps = 4;
    cfg.stage2.batch_size = 4;
    cfg.stage2.log_interval = 2;
    cfg.data.synthetic = Some(SyntheticConfig { count: 6, num_classes: 2, val_count: 2, seed: 3 });
    cfg.classifier = Some(ClassifierConfig { steps: 20, ..ClassifierConfig::new(16, 1, 2) });
    cfg.validate().expect("tiny config is consistent");
    cfg
}

pub fn sha256(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}
