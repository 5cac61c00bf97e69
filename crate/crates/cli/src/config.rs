//! Experiment configuration: bundled defaults, JSON config files, dotted-path
//! overrides, and the merged-config echo.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ladderlab::model::LadderSpec;
use ladderlab::optim::OptimConfig;

use crate::error::{CliError, CliResult};

/// Bundled default configurations, one per experiment.
const DEFAULT_DENOISE1D: &str = include_str!("../../../configs/denoise1d.json");
const DEFAULT_ICA: &str = include_str!("../../../configs/ica.json");
const DEFAULT_VARIANCE: &str = include_str!("../../../configs/variance.json");
const DEFAULT_GRADCHECK: &str = include_str!("../../../configs/gradcheck.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Denoise1d,
    Ica,
    Variance,
    Gradcheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Denoise1d => "denoise1d",
            ExperimentKind::Ica => "ica",
            ExperimentKind::Variance => "variance",
            ExperimentKind::Gradcheck => "gradcheck",
        }
    }

    fn default_json(self) -> &'static str {
        match self {
            ExperimentKind::Denoise1d => DEFAULT_DENOISE1D,
            ExperimentKind::Ica => DEFAULT_ICA,
            ExperimentKind::Variance => DEFAULT_VARIANCE,
            ExperimentKind::Gradcheck => DEFAULT_GRADCHECK,
        }
    }
}

/// Settings for the scalar-denoiser experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseSection {
    /// Corruption noise std applied to all three source families.
    pub sigma: f64,
    pub samples: usize,
    pub xi0: [f64; 5],
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_step: f64,
}

/// Settings for the variance experiment's learning-speed study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedupSection {
    pub seeds: usize,
    pub epochs: usize,
    /// Epochs at which C^(0) is compared (full cost at the first vs
    /// baseline at the second).
    pub eval_epochs: [usize; 2],
}

/// Settings for the gradient-check runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    pub n_coords: usize,
    pub step: f64,
    /// Samples drawn for the check batches.
    pub samples: usize,
}

/// One experiment run, fully described. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Master seed: dataset generation derives from this directly.
    pub seed: u64,
    /// Output directory; when absent the CLI falls back to
    /// `$LADDERLAB_OUT/<experiment>` or `runs/<experiment>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<LadderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoise: Option<DenoiseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<SpeedupSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradCheckSection>,
}

impl ExperimentConfig {
    pub fn ladder(&self) -> CliResult<&LadderSpec> {
        self.ladder
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no `ladder` section".into()))
    }

    pub fn optim(&self) -> CliResult<&OptimConfig> {
        self.optim
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no `optim` section".into()))
    }
}

/// Load the bundled default config for an experiment.
pub fn default_config(kind: ExperimentKind) -> ExperimentConfig {
    serde_json::from_str(kind.default_json()).expect("bundled config is valid")
}

fn parse_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// Apply one `--set path.to.key=value` override to a JSON tree. The value is
/// parsed as JSON when possible and as a string otherwise. Intermediate
/// objects must already exist except at the final key.
fn apply_set(tree: &mut serde_json::Value, assignment: &str) -> CliResult<()> {
    let (path, raw_value) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!("--set needs key=value, got '{assignment}'"))
    })?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("--set path '{path}' has empty segments")));
    }
    let mut node = tree;
    for seg in &segments[..segments.len() - 1] {
        node = match node {
            serde_json::Value::Object(map) => map.get_mut(*seg).ok_or_else(|| {
                CliError::Config(format!("--set path '{path}': no such section '{seg}'"))
            })?,
            serde_json::Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| {
                    CliError::Config(format!("--set path '{path}': '{seg}' is not an index"))
                })?;
                items.get_mut(idx).ok_or_else(|| {
                    CliError::Config(format!("--set path '{path}': index {idx} out of range"))
                })?
            }
            _ => {
                return Err(CliError::Config(format!(
                    "--set path '{path}': '{seg}' is not an object"
                )))
            }
        };
    }
    let last = segments[segments.len() - 1];
    match node {
        serde_json::Value::Object(map) => {
            map.insert(last.to_string(), parse_value(raw_value));
            Ok(())
        }
        serde_json::Value::Array(items) => {
            let idx: usize = last.parse().map_err(|_| {
                CliError::Config(format!("--set path '{path}': '{last}' is not an index"))
            })?;
            let slot = items.get_mut(idx).ok_or_else(|| {
                CliError::Config(format!("--set path '{path}': index {idx} out of range"))
            })?;
            *slot = parse_value(raw_value);
            Ok(())
        }
        _ => Err(CliError::Config(format!(
            "--set path '{path}': parent is not an object"
        ))),
    }
}

/// Build the effective config: bundled default or `--config` file, then
/// `--seed`/`--out` flags, then `--set` overrides, then strict validation.
pub fn resolve_config(
    kind: ExperimentKind,
    config_path: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    sets: &[String],
) -> CliResult<ExperimentConfig> {
    let base_text = match config_path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => kind.default_json().to_string(),
    };
    let mut tree: serde_json::Value = serde_json::from_str(&base_text)
        .map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
    if let Some(s) = seed {
        apply_set(&mut tree, &format!("seed={s}"))?;
        // Re-derive the trainer seed unless the user pins it afterwards.
        if tree.get("optim").map(|o| o.is_object()).unwrap_or(false) {
            apply_set(&mut tree, &format!("optim.seed={}", s.wrapping_add(1)))?;
        }
    }
    if let Some(dir) = out {
        apply_set(&mut tree, &format!("out={}", serde_json::to_string(dir).map_err(|e| CliError::Config(e.to_string()))?))?;
    }
    for assignment in sets {
        apply_set(&mut tree, assignment)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    if cfg.experiment != kind {
        return Err(CliError::Config(format!(
            "config is for experiment '{}', expected '{}'",
            cfg.experiment.name(),
            kind.name()
        )));
    }
    Ok(cfg)
}

/// The normalized JSON text of the effective config, echoed into the run
/// directory. Rerunning with this exact file reproduces the run.
pub fn config_echo(cfg: &ExperimentConfig) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(cfg)
        .map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_defaults_parse() {
        for kind in [
            ExperimentKind::Denoise1d,
            ExperimentKind::Ica,
            ExperimentKind::Variance,
            ExperimentKind::Gradcheck,
        ] {
            let cfg = default_config(kind);
            assert_eq!(cfg.experiment, kind);
        }
    }

    #[test]
    fn set_overrides_apply() {
        let cfg = resolve_config(
            ExperimentKind::Ica,
            None,
            Some(5),
            None,
            &["optim.learning_rate=0.123".into(), "ladder.beta0=2.5".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.optim.as_ref().unwrap().seed, 6);
        assert!((cfg.optim.as_ref().unwrap().learning_rate - 0.123).abs() < 1e-15);
        assert!((cfg.ladder.as_ref().unwrap().beta0 - 2.5).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = resolve_config(
            ExperimentKind::Ica,
            None,
            None,
            None,
            &["bogus_key=1".into()],
        )
        .unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "got {err:?}");
        // Nested unknown keys too.
        let err = resolve_config(
            ExperimentKind::Ica,
            None,
            None,
            None,
            &["optim.nope=1".into()],
        )
        .unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn echo_roundtrips() {
        let cfg = default_config(ExperimentKind::Variance);
        let echo = config_echo(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&echo).unwrap();
        assert_eq!(back, cfg);
    }
}
