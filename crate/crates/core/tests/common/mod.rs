#![allow(dead_code)]

use capreward_core::config::RunConfig;

/// A configuration small enough to run every stage in seconds.
pub const TINY_CONFIG: &str = r#"
seed = 11

[data]
scenes = 60
shifted_scenes = 10
max_len = 20

[model.captioner]
hidden = 16
heads = 2
encoder_layers = 1
decoder_layers = 1
ff_mult = 2

[model.encoder]
hidden = 16
heads = 2
layers = 1
ff_mult = 2
embed_dim = 16

[training.xe]
steps = 30
batch = 8
eval_every = 15

[training.xe.schedule]
warmup = 5
peak = 0.002
plateau_end = 20
decay_end = 30
floor = 0.0002

[training.encoder]
steps = 20
batch = 8
warmup = 5

[training.clean_encoder]
steps = 10
batch = 8
warmup = 2

[training.reward_captioner]
steps = 4
batch = 4
candidates = 2
eval_every = 2
eval_scenes = 4

[training.scst]
steps = 4
batch = 4
candidates = 2
eval_every = 2
eval_scenes = 4

[discriminator]
steps = 6
batch = 4
eval_every = 3
eval_scenes = 6

[metric]
batch = 16
samples = 2
"#;

pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY_CONFIG).expect("tiny config parses")
}
