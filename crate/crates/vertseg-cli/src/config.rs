//! Optional TOML config file with one section per subcommand.
//!
//! Resolution order is: explicit flag, then config-file value, then the
//! built-in default. Every command echoes its fully-resolved configuration
//! into its output directory so a run can be reproduced from the echo
//! alone.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;
use vertseg_core::PhantomParams;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub synth: Option<SynthSection>,
    pub preprocess: Option<PreprocessSection>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
    pub predict: Option<PredictSection>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config file {}", p.display()))
            }
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub n_vertebrae: Option<usize>,
    pub aspect_range: Option<(f64, f64)>,
    pub height_range: Option<(f64, f64)>,
    pub fracture_prob: Option<f64>,
    pub texture_amplitude: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub hard_mode: Option<bool>,
    pub split_ratios: Option<(f64, f64, f64)>,
    pub no_split: Option<bool>,
}

impl SynthSection {
    /// Folds file values under a baseline parameter set; flags are applied
    /// on top by the caller.
    pub fn apply(&self, params: &mut PhantomParams) {
        if let Some(v) = self.seed {
            params.seed = v;
        }
        if let Some(v) = self.width {
            params.width = v;
        }
        if let Some(v) = self.height {
            params.height = v;
        }
        if let Some(v) = self.n_vertebrae {
            params.n_vertebrae = v;
        }
        if let Some(v) = self.aspect_range {
            params.aspect_range = v;
        }
        if let Some(v) = self.height_range {
            params.height_range = v;
        }
        if let Some(v) = self.fracture_prob {
            params.fracture_prob = v;
        }
        if let Some(v) = self.texture_amplitude {
            params.texture_amplitude = v;
        }
        if let Some(v) = self.noise_sigma {
            params.noise_sigma = v;
        }
        if let Some(v) = self.hard_mode {
            params.hard_mode = v;
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub clahe: Option<bool>,
    pub tiles_x: Option<usize>,
    pub tiles_y: Option<usize>,
    pub clip_limit: Option<f64>,
    pub bins: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub depth: Option<usize>,
    pub base_channels: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub plateau_patience: Option<usize>,
    pub plateau_min_delta: Option<f64>,
    pub augment: Option<bool>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub dice_smooth: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub split: Option<String>,
    pub threshold: Option<f64>,
    pub dice_smooth: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    pub threshold: Option<f64>,
}
