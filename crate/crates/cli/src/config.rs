//! Experiment configuration: TOML with a strict key schema.

use std::path::{Path, PathBuf};

use cclis::eval::{ProbeConfig, Scenario};
use cclis::model::ModelConfig;
use cclis::oracle::MseStudyConfig;
use cclis::tasks::{AugmentorConfig, SyntheticConfig};
use cclis::trainer::{Preset, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Syntax(String),
    UnknownKey { path: String, suggestion: Option<String> },
    Missing(String),
    Type { path: String, message: String },
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(p, e) => write!(f, "cannot read {}: {e}", p.display()),
            ConfigError::Syntax(m) => write!(f, "invalid TOML: {m}"),
            ConfigError::UnknownKey { path, suggestion: Some(s) } => {
                write!(f, "unknown key `{path}` (did you mean `{s}`?)")
            }
            ConfigError::UnknownKey { path, suggestion: None } => write!(f, "unknown key `{path}`"),
            ConfigError::Missing(k) => write!(f, "missing required key `{k}`"),
            ConfigError::Type { path, message } => write!(f, "bad value at `{path}`: {message}"),
            ConfigError::Invalid(m) => write!(f, "invalid configuration: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageStreamConfig {
    pub path: PathBuf,
    /// Source label ids of each task, in order.
    pub splits: Vec<Vec<u16>>,
}

/// Exactly one of `synthetic` and `image`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageStreamConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scenarios: Vec<Scenario>,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenarios: Scenario::BOTH.to_vec(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub mse: MseStudyConfig,
    /// Instance seeds written to the MSE table.
    pub instances: u64,
    pub sign_test_seeds: u64,
    pub sign_test_jm: usize,
    pub kl_sets: usize,
    pub kl_support: usize,
    pub kl_targets: usize,
    pub kl_random_points: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            mse: MseStudyConfig::default(),
            instances: 3,
            sign_test_seeds: 100,
            sign_test_jm: 4,
            kl_sets: 20,
            kl_support: 6,
            kl_targets: 4,
            kl_random_points: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub presets: Vec<Preset>,
    /// When set, every preset is run once per λ and a plot is written.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_sweep: Option<Vec<f64>>,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub study: StudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            seeds: vec![0],
            presets: vec![Preset::Full],
            lambda_sweep: None,
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.stream.synthetic, &self.stream.image) {
            (None, None) => return Err(ConfigError::Missing("stream.synthetic or stream.image".into())),
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid("give exactly one of stream.synthetic and stream.image".into()))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        if self.presets.is_empty() {
            return Err(ConfigError::Invalid("presets must not be empty".into()));
        }
        if self.eval.scenarios.is_empty() {
            return Err(ConfigError::Invalid("eval.scenarios must not be empty".into()));
        }
        if let Some(sweep) = &self.lambda_sweep {
            if sweep.is_empty() || sweep.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
                return Err(ConfigError::Invalid("lambda_sweep must hold finite non-negative values".into()));
            }
        }
        let wrap = |e: cclis::error::Error| ConfigError::Invalid(e.to_string());
        self.train.validate().map_err(wrap)?;
        self.eval.probe.validate().map_err(wrap)?;
        self.study.mse.validate().map_err(wrap)?;
        if self.study.kl_support < 2 || self.study.kl_targets == 0 {
            return Err(ConfigError::Invalid("study.kl_support must be ≥ 2 and study.kl_targets ≥ 1".into()));
        }
        Ok(())
    }

    /// The resolved configuration as TOML, every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}

/// Every accepted key, including those whose default is absent.
fn schema() -> toml::Value {
    let aug = AugmentorConfig {
        image_shape: Some([1, 1, 1]),
        ..AugmentorConfig::default()
    };
    let full = ExperimentConfig {
        lambda_sweep: Some(vec![0.0]),
        stream: StreamConfig {
            synthetic: Some(SyntheticConfig::default()),
            image: Some(ImageStreamConfig {
                path: PathBuf::new(),
                splits: vec![],
            }),
        },
        train: TrainConfig {
            aug: aug.clone(),
            score_aug: aug,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    toml::Value::try_from(&full).expect("schema serializes")
}

fn check_keys(value: &toml::Value, schema: &toml::Value, prefix: &str) -> Result<(), ConfigError> {
    let (toml::Value::Table(given), toml::Value::Table(known)) = (value, schema) else {
        return Ok(());
    };
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            Some(s) => check_keys(v, s, &path)?,
            None => {
                let suggestion = known
                    .keys()
                    .map(|c| (strsim::jaro_winkler(k, c), c))
                    .filter(|(score, _)| *score > 0.7)
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, c)| if prefix.is_empty() { c.clone() } else { format!("{prefix}.{c}") });
                return Err(ConfigError::UnknownKey { path, suggestion });
            }
        }
    }
    Ok(())
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let value: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    check_keys(&value, &schema(), "")?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Type {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[stream.synthetic]\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.train.lambda, 0.6);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.stream.synthetic, Some(SyntheticConfig::default()));
    }

    #[test]
    fn typo_names_nearest_key() {
        let e = parse_config_str("[stream.synthetic]\n[train]\nlamda = 0.3\n").unwrap_err();
        assert_eq!(e.to_string(), "unknown key `train.lamda` (did you mean `train.lambda`?)");
    }

    #[test]
    fn type_error_names_path() {
        let e = parse_config_str("[stream.synthetic]\n[train]\nbatch_size = \"big\"\n").unwrap_err();
        assert!(e.to_string().contains("train.batch_size"), "{e}");
    }

    #[test]
    fn stream_is_required_and_exclusive() {
        assert!(matches!(parse_config_str("seeds = [1]\n"), Err(ConfigError::Missing(_))));
        let both = "[stream.synthetic]\n[stream.image]\npath = \"x\"\nsplits = [[0]]\n";
        assert!(matches!(parse_config_str(both), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn nested_optional_keys_are_accepted() {
        let c = parse_config_str("lambda_sweep = [0.0, 0.6]\n[stream.synthetic]\n[train.aug]\nimage_shape = [2, 2, 1]\n").unwrap();
        assert_eq!(c.train.aug.image_shape, Some([2, 2, 1]));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = parse_config_str("seeds = [3, 4]\npresets = [\"full\", \"no_prd\"]\n[stream.synthetic]\ntasks = 3\n").unwrap();
        assert_eq!(parse_config_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn empty_seed_list_rejected() {
        assert!(parse_config_str("seeds = []\n[stream.synthetic]\n").is_err());
    }
}
