//! Experiment configuration (TOML, schema version 1).

use std::fmt;
use std::path::{Path, PathBuf};

use mdico::baselines::Variant;
use mdico::data::{generate_synthetic, load_dataset, Dataset, GenSpec};
use mdico::encoders::EncoderSpec;
use mdico::eval::CvSettings;
use mdico::losses::ContrastiveConfig;
use mdico::model::{LossWeighting, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const SNAPSHOT_FILE: &str = "config.toml";

/// Bad configuration or input; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// Dataset directory written by `gen-data` or by hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenSpec>,
    /// Generator seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Full]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub output_dir: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub encoder1: EncoderSpec,
    #[serde(default)]
    pub encoder2: EncoderSpec,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub eval: CvSettings,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| usage(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every check that does not need the dataset itself.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(usage(format!("unsupported config version {} (expected {SCHEMA_VERSION})", self.version)));
        }
        match (&self.data.path, &self.data.generator) {
            (Some(_), Some(_)) => return Err(usage("data: set either `path` or `generator`, not both")),
            (None, None) => return Err(usage("data: missing `path` or `generator`")),
            (None, Some(g)) => g.validate()?,
            (Some(_), None) => {}
        }
        self.encoder1.validate()?;
        self.encoder2.validate()?;
        self.contrastive.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.variants.is_empty() {
            return Err(usage("variants: list at least one variant"));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(usage(format!("variants: `{v}` listed twice")));
            }
        }
        Ok(())
    }

    pub fn generator(&self) -> anyhow::Result<&GenSpec> {
        self.data
            .generator
            .as_ref()
            .ok_or_else(|| usage("this command needs a `[data.generator]` section"))
    }

    pub fn dataset(&self) -> anyhow::Result<Dataset> {
        match (&self.data.path, &self.data.generator) {
            (Some(p), _) => Ok(load_dataset(p)?),
            (None, Some(g)) => Ok(generate_synthetic(g, self.data.seed)?),
            (None, None) => Err(usage("data: missing `path` or `generator`")),
        }
    }

    /// Model layout for `dataset` with the first configured variant.
    pub fn model_config(&self, dataset: &Dataset) -> anyhow::Result<ModelConfig> {
        let mut cfg = ModelConfig::new(
            dataset.task.clone(),
            dataset.mod1.clone(),
            dataset.mod2.clone(),
            self.encoder1.clone(),
        )
        .with_variant(self.variants[0]);
        cfg.encoder2 = self.encoder2.clone();
        cfg.contrastive = self.contrastive;
        cfg.kendall = self.train.loss_weighting == LossWeighting::Kendall;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Writes the effective configuration into an output directory.
    pub fn snapshot(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SNAPSHOT_FILE), self.to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
output_dir = "out"

[data.generator]
n = 100
shared_dim = 2
specific_dim = 2
nuisance_dim = 2
task = "multiclass"
num_classes = 3
sigma_x = 0.5
mod1 = { name = "a", layout = "timeseries", shape = [4, 3] }
mod2 = { name = "b", layout = "timeseries", shape = [4, 2] }
"#;

    fn with_top(extra: &str) -> String {
        MINIMAL.replace("output_dir = \"out\"", &format!("output_dir = \"out\"\n{extra}"))
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.variants, vec![Variant::Full]);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.eval, CvSettings::default());
        assert_eq!(cfg.encoder1, EncoderSpec::default());
    }

    #[test]
    fn snapshot_roundtrips() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let err = ExperimentConfig::parse(&with_top("bogus = 1")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::parse(&MINIMAL.replace("output_dir = \"out\"", "")).unwrap_err();
        assert!(err.to_string().contains("output_dir"), "{err}");
        let err = ExperimentConfig::parse(&MINIMAL.replace("num_classes = 3", "num_classes = 3\ncolor = 1")).unwrap_err();
        assert!(err.to_string().contains("color"), "{err}");
    }

    #[test]
    fn shipped_quickstart_parses() {
        let cfg = ExperimentConfig::parse(include_str!("../../../configs/quickstart.toml")).unwrap();
        assert_eq!(cfg.variants.len(), 3);
        assert!(cfg.eval.space_metrics);
    }

    #[test]
    fn semantic_checks() {
        assert!(ExperimentConfig::parse(&MINIMAL.replace("version = 1", "version = 2")).is_err());
        assert!(ExperimentConfig::parse(&with_top("variants = []")).is_err());
        assert!(ExperimentConfig::parse(&with_top("variants = [\"full\", \"full\"]")).is_err());
        assert!(ExperimentConfig::parse(&with_top("variants = [\"fancy\"]")).is_err());
        assert!(ExperimentConfig::parse(&MINIMAL.replace("n = 100", "n = 5")).is_err());
        let both = MINIMAL.replace("[data.generator]", "[data]\npath = \"x\"\n[data.generator]");
        assert!(ExperimentConfig::parse(&both).is_err());
    }
}
