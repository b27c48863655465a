use std::fs;
use std::path::Path;

use jkoflow::datagen::PotentialOptions;
use jkoflow::ot::SinkhornOptions;
use jkoflow::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub kind: String,
    pub n_points: usize,
    /// Spread of trajectory clouds.
    pub sd: f64,
    pub split: String,
    pub corrupt_fraction: f64,
    pub noise_scale: f64,
    pub potential: PotentialOptions,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            kind: "quadratic".into(),
            n_points: 200,
            sd: jkoflow::datagen::TRAJECTORY_SD,
            split: "train".into(),
            corrupt_fraction: 0.0,
            noise_scale: 0.0,
            potential: PotentialOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub mode: String,
    pub epsilon: f64,
    pub sinkhorn: SinkhornOptions,
    /// Fail when the dataset has no labels.
    pub classes: bool,
    pub knn_k: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            mode: "both".into(),
            epsilon: 1.0,
            sinkhorn: SinkhornOptions::default(),
            classes: false,
            knn_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_min: -4.0,
            x_max: 4.0,
            y_min: -4.0,
            y_max: 4.0,
            resolution: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub grid: GridConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Prints the config and writes it to `path`.
    pub fn echo(&self, path: &Path) -> CliResult<()> {
        let text = self.to_toml();
        println!("# resolved config\n{text}");
        fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
