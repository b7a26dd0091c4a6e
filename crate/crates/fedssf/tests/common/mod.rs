#![allow(dead_code)]

use fedssf::ExperimentConfig;

/// Small enough for a full CLI run in well under a second.
pub const TINY: &str = r#"
[seeds]
master = 3

[federation]
clients = 3
rounds = 2
epochs = 1
batch_size = 8

[attack]
iterations = 3

[model]
channels = [4, 8]
gn_groups = 2

[data]
image_size = 16
train = 30
val = 10
test = 12
lane = 24

[pretrain]
epochs = 1
batch_size = 8

[sweep]
clients = [2, 3]
norm_kinds = ["bn", "ln", "in", "gn", "rna"]
"#;

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}
