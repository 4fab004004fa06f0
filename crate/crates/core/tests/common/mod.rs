#![allow(dead_code)]

use std::path::Path;

use recoseg::config::{Profile, RunConfig};

/// Small, fast configuration for pipeline tests.
pub fn tiny_config() -> RunConfig {
    let text = r#"
seed = 3

[data.phantom]
subjects = 8
shape = [20, 32, 32]

[split]
ratios = [0.5, 0.25, 0.25]

[preprocess]
discard_top = 2
discard_bottom = 2
height = 16
width = 16

[diffusion.model]
base_width = 8
levels = 2
groups = 4

[diffusion.schedule]
timesteps = 20

[diffusion.train]
epochs = 3

[diffusion.sampling]
steps = 4
batch_size = 16

[segmentation.model]
base_width = 8
levels = 2
groups = 4

[segmentation.train]
epochs = 2
"#;
    RunConfig::resolve(Profile::Quick, Some(text)).expect("tiny config is valid")
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
