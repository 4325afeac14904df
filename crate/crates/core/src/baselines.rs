//! Ablation variants and the single-modality baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality, ModalityConfig, TaskSpec};
use crate::encoders::{Encoder, EncoderRole, EncoderSpec};
use crate::error::{Error, Result};
use crate::eval::{run_variants, CvSettings, RunReport};
use crate::losses::{predictive_loss, predictive_node, LossBundle};
use crate::model::{
    check_layout, read_container, write_container, MDiCoModel, ModelConfig, PreparedSplit, Preprocessor, Step,
    StopCriterion, TrainConfig, Trainable,
};
use crate::nn::{Forward, Mode};
use crate::params::{init_linear, ParamBundle};
use crate::rng;
use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Individual,
    Full,
    NoModalityLoss,
    NoAuxLoss,
    NoContrastiveLoss,
    NoUnusedFeatures,
    UnpairedData,
    SharedEncoders,
    WeightedLoss,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Individual,
        Variant::Full,
        Variant::NoModalityLoss,
        Variant::NoAuxLoss,
        Variant::NoContrastiveLoss,
        Variant::NoUnusedFeatures,
        Variant::UnpairedData,
        Variant::SharedEncoders,
        Variant::WeightedLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Individual => "individual",
            Variant::Full => "full",
            Variant::NoModalityLoss => "no_modality_loss",
            Variant::NoAuxLoss => "no_aux_loss",
            Variant::NoContrastiveLoss => "no_contrastive_loss",
            Variant::NoUnusedFeatures => "no_unused_features",
            Variant::UnpairedData => "unpaired_data",
            Variant::SharedEncoders => "shared_encoders",
            Variant::WeightedLoss => "weighted_loss",
        }
    }

    pub fn is_joint(self) -> bool {
        self != Variant::Individual
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// A seeded permutation of `0..n` with no fixed points (a single cycle).
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Data(format!("cannot derange a batch of {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut r = rng::rng(seed);
    for i in (1..n).rev() {
        let j = r.random_range(0..i);
        perm.swap(i, j);
    }
    Ok(perm)
}

/// Configuration of a single-modality baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndividualConfig {
    pub task: TaskSpec,
    pub modality: Modality,
    pub input: ModalityConfig,
    pub encoder: EncoderSpec,
}

/// One trunk, one `d`-unit projection and a linear head trained with the
/// predictive loss only. Never touches the other modality.
#[derive(Debug, Clone)]
pub struct IndividualModel {
    pub config: IndividualConfig,
    pub params: ParamBundle,
    pub buffers: ParamBundle,
    pub preprocessor: Option<Preprocessor>,
    encoder: Encoder,
}

impl IndividualModel {
    pub fn new(config: IndividualConfig, seed: u64) -> Result<Self> {
        config.task.validate()?;
        let encoder = Encoder::new(config.encoder.clone(), config.input.clone(), "ind.enc", EncoderRole::Common)?;
        let mut params = ParamBundle::new();
        let mut buffers = ParamBundle::new();
        let mut r = rng::rng(rng::derive(seed, &[rng::tag("individual"), config.modality.number() as u64]));
        encoder.init(&mut params, &mut buffers, &mut r);
        init_linear(&mut params, &mut r, "ind.head", config.encoder.projection_dim, config.task.output_dim());
        params.quantize_f32();
        Ok(IndividualModel {
            config,
            params,
            buffers,
            preprocessor: None,
            encoder,
        })
    }

    pub fn modality(&self) -> Modality {
        self.config.modality
    }

    pub fn task(&self) -> TaskSpec {
        match &self.preprocessor {
            Some(p) => p.weighted_task(&self.config.task),
            None => self.config.task.clone(),
        }
    }

    fn logits(&self, f: &mut Forward<'_>, x: &Mat) -> Result<crate::tape::Var> {
        let xv = f.input(x.clone());
        let z = self.encoder.forward(f, xv)?[0];
        f.linear("ind.head", z)
    }

    /// Eval-mode head outputs from this model's modality.
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        let mut f = Forward::new(&self.params, &self.buffers, Mode::Eval);
        let out = self.logits(&mut f, x)?;
        Ok(f.graph.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "preprocessor": self.preprocessor,
        });
        write_container(path, "individual", &meta, &self.params, &self.buffers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        if c.kind != "individual" {
            return Err(Error::Checkpoint(format!(
                "{} holds a `{}` checkpoint, not an individual model",
                path.display(),
                c.kind
            )));
        }
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display()));
        let config: IndividualConfig = serde_json::from_value(c.meta["config"].clone()).map_err(bad)?;
        let preprocessor = serde_json::from_value(c.meta["preprocessor"].clone()).map_err(bad)?;
        let mut model = IndividualModel::new(config, 0)?;
        check_layout("parameter", &model.params, &c.params)?;
        check_layout("buffer", &model.buffers, &c.buffers)?;
        model.params = c.params;
        model.buffers = c.buffers;
        model.preprocessor = preprocessor;
        Ok(model)
    }
}

impl Trainable for IndividualModel {
    fn params(&self) -> &ParamBundle {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamBundle {
        &mut self.params
    }

    fn buffers(&self) -> &ParamBundle {
        &self.buffers
    }

    fn buffers_mut(&mut self) -> &mut ParamBundle {
        &mut self.buffers
    }

    fn step(&self, batch: &PreparedSplit, seed: u64) -> Result<Step> {
        let mut f = Forward::new(&self.params, &self.buffers, Mode::Train { seed });
        let logits = self.logits(&mut f, batch.input(self.modality())?)?;
        let loss = predictive_node(&mut f.graph, logits, &batch.targets, &self.task())?;
        let value = f.graph.scalar(loss);
        let grads = f.graph.backward(loss);
        let mut by_path: BTreeMap<String, Mat> = f.graph.param_grads(&grads);
        for (path, p) in self.params.iter() {
            by_path.entry(path.to_string()).or_insert_with(|| Mat::zeros(p.dim()));
        }
        Ok(Step {
            losses: LossBundle {
                main: value,
                total: value,
                ..Default::default()
            },
            grads: by_path,
            bn_updates: f.take_bn_updates(),
        })
    }

    /// Both criteria coincide: the predictive loss is the only term.
    fn validation_loss(&self, split: &PreparedSplit, _criterion: StopCriterion) -> Result<f64> {
        let logits = self.predict(split.input(self.modality())?)?;
        predictive_loss(&split.targets, &logits, &self.task())
    }
}

/// A model built for one variant.
#[derive(Debug, Clone)]
pub enum VariantModel {
    Joint(MDiCoModel),
    Individual(IndividualModel),
}

impl VariantModel {
    pub fn variant(&self) -> Variant {
        match self {
            VariantModel::Joint(m) => m.variant(),
            VariantModel::Individual(_) => Variant::Individual,
        }
    }

    /// Modalities this model predicts from.
    pub fn modalities(&self) -> Vec<Modality> {
        match self {
            VariantModel::Joint(_) => Modality::BOTH.to_vec(),
            VariantModel::Individual(m) => vec![m.modality()],
        }
    }

    pub fn set_preprocessor(&mut self, p: Preprocessor) {
        match self {
            VariantModel::Joint(m) => m.preprocessor = Some(p),
            VariantModel::Individual(m) => m.preprocessor = Some(p),
        }
    }

    pub fn preprocessor(&self) -> Option<&Preprocessor> {
        match self {
            VariantModel::Joint(m) => m.preprocessor.as_ref(),
            VariantModel::Individual(m) => m.preprocessor.as_ref(),
        }
    }

    /// Eval-mode head outputs for modality `m` (model space, not denormalized).
    pub fn predict(&self, m: Modality, x: &Mat) -> Result<Mat> {
        match self {
            VariantModel::Joint(model) => model.predict_single(m, x),
            VariantModel::Individual(model) if model.modality() == m => model.predict(x),
            VariantModel::Individual(model) => Err(Error::Config(format!(
                "individual model of modality {} cannot predict modality {m}",
                model.modality()
            ))),
        }
    }

    pub fn train(&mut self, train: &PreparedSplit, val: &PreparedSplit, cfg: &TrainConfig) -> Result<crate::model::TrainHistory> {
        match self {
            VariantModel::Joint(m) => crate::model::train(m, train, val, cfg),
            VariantModel::Individual(m) => crate::model::train(m, train, val, cfg),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            VariantModel::Joint(m) => m.save(path),
            VariantModel::Individual(m) => m.save(path),
        }
    }

    /// Loads either checkpoint kind.
    pub fn load(path: &Path) -> Result<Self> {
        let kind = read_container(path)?.kind;
        if kind == "individual" {
            Ok(VariantModel::Individual(IndividualModel::load(path)?))
        } else {
            Ok(VariantModel::Joint(MDiCoModel::load(path)?))
        }
    }
}

/// Builds `config.variant`; the individual baseline needs the modality it sees.
/// A weighted total from `train.loss_weighting` is folded into the joint config.
pub fn build_variant(config: &ModelConfig, modality: Option<Modality>, train: &TrainConfig, seed: u64) -> Result<VariantModel> {
    match (config.variant, modality) {
        (Variant::Individual, Some(m)) => Ok(VariantModel::Individual(IndividualModel::new(
            IndividualConfig {
                task: config.task.clone(),
                modality: m,
                input: config.modality(m).clone(),
                encoder: config.encoder(m).clone(),
            },
            seed,
        )?)),
        (Variant::Individual, None) => Err(Error::Config("the individual variant needs a modality".into())),
        (_, _) => {
            let mut cfg = config.clone();
            cfg.kendall |= train.loss_weighting == crate::model::LossWeighting::Kendall;
            Ok(VariantModel::Joint(MDiCoModel::new(cfg, seed)?))
        }
    }
}

/// Mean and spread of one variant on one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub variant: Variant,
    pub modality: Modality,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub report: RunReport,
    pub summary: Vec<AblationSummaryRow>,
}

impl AblationResult {
    /// Writes `ablation.csv` (one row per variant, modality, fold, run and
    /// metric) and `ablation_summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        crate::eval::write_metrics_csv(&self.report.records, &dir.join("ablation.csv"))?;
        let path = dir.join("ablation_summary.json");
        let text = serde_json::to_string_pretty(&self.summary).map_err(|source| Error::Json { path: path.clone(), source })?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn mean(&self, variant: Variant, modality: Modality) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.variant == variant && r.modality == modality)
            .map(|r| r.mean)
    }
}

/// Cross-validates every variant under identical splits and seeds.
pub fn run_ablation_suite(dataset: &Dataset, base: &ModelConfig, variants: &[Variant], train: &TrainConfig, cv: &CvSettings) -> Result<AblationResult> {
    if variants.is_empty() {
        return Err(Error::Config("ablation suite needs at least one variant".into()));
    }
    let report = run_variants(dataset, base, variants, train, cv)?;
    let summary = report
        .summary
        .iter()
        .filter(|s| s.is_headline())
        .map(|s| AblationSummaryRow {
            variant: s.variant,
            modality: s.modality,
            metric: s.metric.clone(),
            mean: s.mean,
            std: s.std,
            n: s.values.len(),
        })
        .collect();
    Ok(AblationResult { report, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_value(v).unwrap(), serde_json::json!(v.name()));
        }
        let err = "no_such".parse::<Variant>().unwrap_err();
        assert!(err.to_string().contains("weighted_loss"));
    }

    #[test]
    fn derangement_small() {
        assert_eq!(derangement(2, 5).unwrap(), vec![1, 0]);
        assert!(derangement(1, 0).is_err());
    }

    proptest! {
        #[test]
        fn derangement_has_no_fixed_points(n in 2usize..200, seed in any::<u64>()) {
            let p = derangement(n, seed).unwrap();
            let mut sorted = p.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }
}
