//! The co-learning model: per-modality common and unique encoders, per-modality
//! prediction heads over `[z_sha ‖ z_spe]`, a shared auxiliary head and two
//! modality classifiers.

mod checkpoint;
mod prep;
mod train;

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{derangement, Variant};
use crate::data::{Modality, ModalityConfig, Targets, TaskSpec};
use crate::encoders::{Encoder, EncoderRole, EncoderSpec};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_node, kendall_term_node, modality_ce_node, predictive_node, ContrastiveConfig, LossBundle, LossTerm,
};
use crate::nn::{Forward, Mode};
use crate::params::{init_linear, ParamBundle};
use crate::rng;
use crate::tape::{Mat, Var};

pub use checkpoint::{check_layout, read_container, write_container, Container, CHECKPOINT_VERSION, MAGIC};
pub use prep::{PreparedSplit, Preprocessor};
pub use train::{
    batch_indices, read_loss_trace, train, EpochRecord, LossWeighting, Step, StopCriterion, StopReason, TrainConfig, TrainHistory,
    Trainable,
};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: TaskSpec,
    pub mod1: ModalityConfig,
    pub mod2: ModalityConfig,
    pub encoder1: EncoderSpec,
    pub encoder2: EncoderSpec,
    pub variant: Variant,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    /// Uncertainty weighting of the total loss (implied by the weighted-loss variant).
    #[serde(default)]
    pub kendall: bool,
}

impl ModelConfig {
    pub fn new(task: TaskSpec, mod1: ModalityConfig, mod2: ModalityConfig, encoder: EncoderSpec) -> Self {
        ModelConfig {
            task,
            mod1,
            mod2,
            encoder1: encoder.clone(),
            encoder2: encoder,
            variant: Variant::Full,
            contrastive: ContrastiveConfig::default(),
            kendall: false,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..self.clone()
        }
    }

    pub fn modality(&self, m: Modality) -> &ModalityConfig {
        match m {
            Modality::One => &self.mod1,
            Modality::Two => &self.mod2,
        }
    }

    pub fn encoder(&self, m: Modality) -> &EncoderSpec {
        match m {
            Modality::One => &self.encoder1,
            Modality::Two => &self.encoder2,
        }
    }

    /// Shared-space width `d`.
    pub fn projection_dim(&self) -> usize {
        self.encoder1.projection_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.contrastive.validate()?;
        for m in Modality::BOTH {
            let spec = self.encoder(m);
            Encoder::new(spec.clone(), self.modality(m).clone(), "check", EncoderRole::Common)?;
        }
        if self.encoder1.projection_dim != self.encoder2.projection_dim {
            return Err(Error::Config(format!(
                "both encoders need the same projection_dim, got {} and {}",
                self.encoder1.projection_dim, self.encoder2.projection_dim
            )));
        }
        Ok(())
    }

    fn uses_kendall(&self) -> bool {
        self.kendall || self.variant == Variant::WeightedLoss
    }
}

/// Which loss the graph ends in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Total,
    Term(LossTerm),
}

/// Feature space used for prediction probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Shared,
    Specific,
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Space::Shared),
            "specific" => Ok(Space::Specific),
            other => Err(Error::Config(format!("unknown space `{other}` (expected shared or specific)"))),
        }
    }
}

/// Feature values of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub sha: Mat,
    pub spe: Mat,
    pub unu: Option<Mat>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pred: [Mat; 2],
    pub features: [Features; 2],
    pub losses: LossBundle,
}

#[derive(Debug, Clone)]
struct ModalityEncoders {
    common: Option<Encoder>,
    unique: Encoder,
}

#[derive(Clone, Copy)]
struct FeatureVars {
    sha: Var,
    spe: Var,
    unu: Option<Var>,
}

struct Graphed {
    pred: [Var; 2],
    feats: [FeatureVars; 2],
    loss: Var,
    bundle: LossBundle,
}

#[derive(Debug, Clone)]
pub struct MDiCoModel {
    pub config: ModelConfig,
    pub params: ParamBundle,
    pub buffers: ParamBundle,
    pub preprocessor: Option<Preprocessor>,
    encoders: [ModalityEncoders; 2],
}

fn head_name(m: Modality) -> String {
    format!("m{}.head", m.number())
}

impl MDiCoModel {
    /// Builds a freshly initialized model; identical `(config, seed)` give
    /// identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.variant == Variant::Individual {
            return Err(Error::Config("the individual variant is not a joint model; use IndividualModel".into()));
        }
        let encoders = Self::layout(&config)?;
        let mut params = ParamBundle::new();
        let mut buffers = ParamBundle::new();
        let d = config.projection_dim();
        let out = config.task.output_dim();
        for m in Modality::BOTH {
            let e = &encoders[m.index()];
            let mut r = rng::rng(rng::derive(seed, &[rng::tag("encoder"), m.number() as u64]));
            if let Some(c) = &e.common {
                c.init(&mut params, &mut buffers, &mut r);
            }
            e.unique.init(&mut params, &mut buffers, &mut r);
        }
        let mut r = rng::rng(rng::derive(seed, &[rng::tag("heads")]));
        for m in Modality::BOTH {
            init_linear(&mut params, &mut r, &head_name(m), 2 * d, out);
        }
        init_linear(&mut params, &mut r, "aux", d, out);
        init_linear(&mut params, &mut r, "cls_spe", d, 2);
        if config.variant != Variant::NoUnusedFeatures {
            init_linear(&mut params, &mut r, "cls_unu", d, 2);
        }
        if config.uses_kendall() {
            params.insert("kendall.log_var", Mat::zeros((1, 4)));
        }
        params.quantize_f32();
        Ok(MDiCoModel {
            config,
            params,
            buffers,
            preprocessor: None,
            encoders,
        })
    }

    fn layout(config: &ModelConfig) -> Result<[ModalityEncoders; 2]> {
        let build = |m: Modality| -> Result<ModalityEncoders> {
            let spec = config.encoder(m).clone();
            let cfg = config.modality(m).clone();
            let pre = format!("m{}", m.number());
            Ok(match config.variant {
                Variant::SharedEncoders => ModalityEncoders {
                    common: None,
                    unique: Encoder::new(spec, cfg, &format!("{pre}.enc"), EncoderRole::Combined)?,
                },
                v => ModalityEncoders {
                    common: Some(Encoder::new(spec.clone(), cfg.clone(), &format!("{pre}.com"), EncoderRole::Common)?),
                    unique: Encoder::new(
                        spec,
                        cfg,
                        &format!("{pre}.uni"),
                        if v == Variant::NoUnusedFeatures {
                            EncoderRole::UniqueSpecificOnly
                        } else {
                            EncoderRole::Unique
                        },
                    )?,
                },
            })
        };
        Ok([build(Modality::One)?, build(Modality::Two)?])
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    fn encode(&self, f: &mut Forward<'_>, m: Modality, x: &Mat) -> Result<FeatureVars> {
        let xv = f.input(x.clone());
        let e = &self.encoders[m.index()];
        match &e.common {
            None => {
                let outs = e.unique.forward(f, xv)?;
                Ok(FeatureVars { sha: outs[0], spe: outs[1], unu: Some(outs[2]) })
            }
            Some(common) => {
                let sha = common.forward(f, xv)?[0];
                let outs = e.unique.forward(f, xv)?;
                Ok(FeatureVars { sha, spe: outs[0], unu: outs.get(1).copied() })
            }
        }
    }

    fn predict_node(&self, f: &mut Forward<'_>, m: Modality, feats: FeatureVars) -> Result<Var> {
        let joined = f.graph.concat_cols(&[feats.sha, feats.spe]);
        f.linear(&head_name(m), joined)
    }

    fn graph(&self, f: &mut Forward<'_>, x: [&Mat; 2], targets: &Targets, objective: Objective) -> Result<Graphed> {
        if x[0].nrows() != x[1].nrows() || x[0].nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "batch sizes differ: {} / {} inputs, {} targets",
                x[0].nrows(),
                x[1].nrows(),
                targets.len()
            )));
        }
        let variant = self.config.variant;
        let task = self.task();
        let feats = [self.encode(f, Modality::One, x[0])?, self.encode(f, Modality::Two, x[1])?];
        let pred = [
            self.predict_node(f, Modality::One, feats[0])?,
            self.predict_node(f, Modality::Two, feats[1])?,
        ];

        let wants = |t: LossTerm| objective == Objective::Total || objective == Objective::Term(t);
        let mut terms: [Option<Var>; 4] = [None; 4];

        if wants(LossTerm::Main) {
            let a = predictive_node(&mut f.graph, pred[0], targets, &task)?;
            let b = predictive_node(&mut f.graph, pred[1], targets, &task)?;
            let s = f.graph.add(a, b);
            terms[0] = Some(f.graph.scale(s, 0.5));
        }
        if variant != Variant::NoAuxLoss && wants(LossTerm::Aux) {
            let mut parts = Vec::with_capacity(4);
            for fv in feats {
                for z in [fv.sha, fv.spe] {
                    let logits = f.linear("aux", z)?;
                    parts.push(predictive_node(&mut f.graph, logits, targets, &task)?);
                }
            }
            terms[1] = Some(self.half_sum(f, &parts));
        }
        if variant != Variant::NoContrastiveLoss && wants(LossTerm::Contrastive) {
            let mut z2 = feats[1].sha;
            if variant == Variant::UnpairedData {
                let seed = match f.mode() {
                    Mode::Train { seed } => rng::derive(seed, &[rng::tag("unpaired")]),
                    Mode::Eval => rng::tag("unpaired"),
                };
                let perm = derangement(x[1].nrows(), seed)?;
                z2 = f.graph.select_rows(z2, &perm);
            }
            terms[2] = Some(contrastive_node(&mut f.graph, feats[0].sha, z2, self.config.contrastive.temperature)?);
        }
        if variant != Variant::NoModalityLoss && wants(LossTerm::Modality) {
            let mut parts = Vec::with_capacity(4);
            for (m, fv) in feats.iter().enumerate() {
                let logits = f.linear("cls_spe", fv.spe)?;
                parts.push(modality_ce_node(&mut f.graph, logits, m));
                if let Some(unu) = fv.unu {
                    let logits = f.linear("cls_unu", unu)?;
                    parts.push(modality_ce_node(&mut f.graph, logits, m));
                }
            }
            terms[3] = Some(self.half_sum(f, &parts));
        }

        let value = |f: &Forward<'_>, v: Option<Var>| v.map_or(0.0, |v| f.graph.scalar(v));
        let mut bundle = LossBundle {
            main: value(f, terms[0]),
            aux: value(f, terms[1]),
            contrastive: value(f, terms[2]),
            modality: value(f, terms[3]),
            total: 0.0,
            kendall_log_vars: None,
        };
        let active: Vec<(usize, Var)> = terms.iter().enumerate().filter_map(|(i, t)| t.map(|v| (i, v))).collect();
        let loss = match objective {
            Objective::Term(t) => {
                let i = LossTerm::ALL.iter().position(|&x| x == t).expect("term listed");
                terms[i].ok_or_else(|| Error::Config(format!("variant {} has no {} loss", variant.name(), t.name())))?
            }
            Objective::Total if self.config.uses_kendall() => {
                let lv = f.param("kendall.log_var")?;
                let mut acc: Option<Var> = None;
                for (i, t) in active {
                    let s = f.graph.cols(lv, i, 1);
                    let w = kendall_term_node(&mut f.graph, t, s);
                    acc = Some(acc.map_or(w, |a| f.graph.add(a, w)));
                }
                let lv_vals = self.params.require("kendall.log_var")?;
                bundle.kendall_log_vars = Some([lv_vals[[0, 0]], lv_vals[[0, 1]], lv_vals[[0, 2]], lv_vals[[0, 3]]]);
                acc.expect("main loss is always active")
            }
            Objective::Total => {
                let mut acc = active[0].1;
                for &(_, t) in &active[1..] {
                    acc = f.graph.add(acc, t);
                }
                acc
            }
        };
        bundle.total = f.graph.scalar(loss);
        if let Some(term) = bundle.non_finite_term() {
            return Err(Error::NonFinite(format!("{term} loss")));
        }
        Ok(Graphed { pred, feats, loss, bundle })
    }

    fn half_sum(&self, f: &mut Forward<'_>, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = f.graph.add(acc, p);
        }
        f.graph.scale(acc, 0.5)
    }

    /// The task with fitted class weights, if a preprocessor is attached.
    pub fn task(&self) -> TaskSpec {
        match &self.preprocessor {
            Some(p) => p.weighted_task(&self.config.task),
            None => self.config.task.clone(),
        }
    }

    /// Predictions, features of both modalities and all loss terms of a batch.
    pub fn forward_train(&self, x1: &Mat, x2: &Mat, targets: &Targets, mode: Mode) -> Result<ForwardOutput> {
        let mut f = Forward::new(&self.params, &self.buffers, mode);
        let g = self.graph(&mut f, [x1, x2], targets, Objective::Total)?;
        let val = |v: Var| f.graph.value(v).clone();
        let feats = |fv: FeatureVars| Features {
            sha: val(fv.sha),
            spe: val(fv.spe),
            unu: fv.unu.map(val),
        };
        Ok(ForwardOutput {
            pred: [val(g.pred[0]), val(g.pred[1])],
            features: [feats(g.feats[0]), feats(g.feats[1])],
            losses: g.bundle,
        })
    }

    /// Loss value and parameter gradients of one objective.
    pub fn loss_and_grads(
        &self,
        batch: &PreparedSplit,
        mode: Mode,
        objective: Objective,
    ) -> Result<(LossBundle, BTreeMap<String, Mat>, Vec<(String, crate::tape::BatchStats)>)> {
        let mut f = Forward::new(&self.params, &self.buffers, mode);
        let x = [batch.input(Modality::One)?, batch.input(Modality::Two)?];
        let g = self.graph(&mut f, x, &batch.targets, objective)?;
        let grads = f.graph.backward(g.loss);
        let mut by_path = f.graph.param_grads(&grads);
        for (path, p) in self.params.iter() {
            by_path.entry(path.to_string()).or_insert_with(|| Mat::zeros(p.dim()));
        }
        Ok((g.bundle, by_path, f.take_bn_updates()))
    }

    /// Eval-mode features of one modality, computed from that modality alone.
    pub fn features(&self, m: Modality, x: &Mat) -> Result<Features> {
        let mut f = Forward::new(&self.params, &self.buffers, Mode::Eval);
        let fv = self.encode(&mut f, m, x)?;
        let val = |v: Var| f.graph.value(v).clone();
        Ok(Features {
            sha: val(fv.sha),
            spe: val(fv.spe),
            unu: fv.unu.map(val),
        })
    }

    /// Eval-mode head outputs for modality `m` from `x_m` alone.
    pub fn predict_single(&self, m: Modality, x: &Mat) -> Result<Mat> {
        let mut f = Forward::new(&self.params, &self.buffers, Mode::Eval);
        let fv = self.encode(&mut f, m, x)?;
        let out = self.predict_node(&mut f, m, fv)?;
        Ok(f.graph.value(out).clone())
    }

    /// Prediction from one feature space with the other block of the head input zeroed.
    pub fn predict_from_space(&self, m: Modality, x: &Mat, space: Space) -> Result<Mat> {
        let mut f = Forward::new(&self.params, &self.buffers, Mode::Eval);
        let fv = self.encode(&mut f, m, x)?;
        let zeros = f.input(Mat::zeros(f.graph.shape(fv.sha)));
        let masked = match space {
            Space::Shared => FeatureVars { spe: zeros, ..fv },
            Space::Specific => FeatureVars { sha: zeros, ..fv },
        };
        let out = self.predict_node(&mut f, m, masked)?;
        Ok(f.graph.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "preprocessor": self.preprocessor,
        });
        write_container(path, &format!("mdico:{}", self.config.variant.name()), &meta, &self.params, &self.buffers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        let Some(variant) = c.kind.strip_prefix("mdico:") else {
            return Err(Error::Checkpoint(format!(
                "{} holds a `{}` checkpoint, not a joint model",
                path.display(),
                c.kind
            )));
        };
        let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad model metadata: {e}", path.display())))?;
        if config.variant.name() != variant {
            return Err(Error::Checkpoint(format!("{}: variant tag mismatch", path.display())));
        }
        let preprocessor = serde_json::from_value(c.meta["preprocessor"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad preprocessor metadata: {e}", path.display())))?;
        let mut model = MDiCoModel::new(config, 0)?;
        check_layout("parameter", &model.params, &c.params)?;
        check_layout("buffer", &model.buffers, &c.buffers)?;
        model.params = c.params;
        model.buffers = c.buffers;
        model.preprocessor = preprocessor;
        Ok(model)
    }

    /// Loads a checkpoint and checks it was built from `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if model.config.projection_dim() != expected.projection_dim() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has projection_dim {}, expected {}",
                model.config.projection_dim(),
                expected.projection_dim()
            )));
        }
        if &model.config != expected {
            return Err(Error::Checkpoint("checkpoint configuration differs from the expected one".into()));
        }
        Ok(model)
    }
}

impl Trainable for MDiCoModel {
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
        let (losses, grads, bn_updates) = self.loss_and_grads(batch, Mode::Train { seed }, Objective::Total)?;
        Ok(Step { losses, grads, bn_updates })
    }

    fn validation_loss(&self, split: &PreparedSplit, criterion: StopCriterion) -> Result<f64> {
        if criterion == StopCriterion::Total {
            let out = self.forward_train(split.input(Modality::One)?, split.input(Modality::Two)?, &split.targets, Mode::Eval)?;
            return Ok(out.losses.total);
        }
        let task = self.task();
        let mut sum = 0.0;
        for m in Modality::BOTH {
            let logits = self.predict_single(m, split.input(m)?)?;
            sum += crate::losses::predictive_loss(&split.targets, &logits, &task)?;
        }
        Ok(0.5 * sum)
    }
}
