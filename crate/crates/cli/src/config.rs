//! Optional TOML config file. Every section is optional and unknown keys are
//! rejected; command-line flags override whatever the file sets.

use std::path::Path;

use repflow::bench::{BenchConfig, Width};
use repflow::toy::ExperimentConfig;
use serde::Deserialize;

use crate::error::{CliError, CliResult, EXIT_MALFORMED};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub flow: FlowSection,
    pub gradcheck: GradcheckSection,
    pub bench: Option<BenchConfig>,
    pub experiment: ExperimentConfig,
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub iterations: Option<usize>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub theta: Option<f64>,
    pub width: Option<Width>,
    pub per_channel: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub size: Option<usize>,
    pub step: Option<f64>,
    pub tolerance: Option<f64>,
    pub learn: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub axis: Option<String>,
    pub settings: Option<Vec<String>>,
}

pub fn load(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::new(
            EXIT_MALFORMED,
            format!("cannot read {}: {e}", path.display()),
        )
    })?;
    toml::from_str(&text)
        .map_err(|e| CliError::new(EXIT_MALFORMED, format!("config {}: {e}", path.display())))
}
