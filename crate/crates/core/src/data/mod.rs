//! Two-modality datasets: task description, modality layouts, samples, and the
//! helpers that turn samples into training matrices.

mod io;
mod normalize;
mod split;
mod synth;

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

pub(crate) use io::fmt_real;
pub use io::{load_dataset, save_dataset, DATASET_FORMAT_VERSION};
pub use normalize::{fit_normalizer, normalize_target, Normalizer, STD_FLOOR};
pub use split::{carve_validation, kfold_split, Fold};
pub use synth::{generate_planted, generate_synthetic, GenSpec, PlantedLatents};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Multilabel,
    Regression,
}

impl TaskKind {
    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::Regression)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Multiclass => "multiclass",
            TaskKind::Multilabel => "multilabel",
            TaskKind::Regression => "regression",
        }
    }
}

/// What is predicted and how losses and metrics specialize to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, num_classes: usize) -> Result<Self> {
        let spec = TaskSpec {
            kind,
            num_classes,
            class_weights: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn binary() -> Self {
        TaskSpec {
            kind: TaskKind::Binary,
            num_classes: 2,
            class_weights: None,
        }
    }

    pub fn multiclass(k: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Multiclass,
            num_classes: k,
            class_weights: None,
        }
    }

    pub fn multilabel(k: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Multilabel,
            num_classes: k,
            class_weights: None,
        }
    }

    pub fn regression() -> Self {
        TaskSpec {
            kind: TaskKind::Regression,
            num_classes: 1,
            class_weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.class_weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Regression => {
                if self.num_classes != 1 {
                    return Err(Error::Config("regression requires num_classes = 1".into()));
                }
                if self.class_weights.is_some() {
                    return Err(Error::Config("regression takes no class weights".into()));
                }
            }
            TaskKind::Binary if self.num_classes != 2 => {
                return Err(Error::Config("binary requires num_classes = 2".into()));
            }
            _ if self.num_classes < 2 => {
                return Err(Error::Config(format!(
                    "{} requires at least 2 classes",
                    self.kind.name()
                )));
            }
            _ => {}
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_classes {
                return Err(Error::Config(format!(
                    "{} class weights for {} classes",
                    w.len(),
                    self.num_classes
                )));
            }
            if let Some(bad) = w.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!("class weight {bad} is not positive")));
            }
        }
        Ok(())
    }

    /// Width of the prediction head output.
    pub fn output_dim(&self) -> usize {
        self.num_classes
    }

    /// Class weights, or all ones when unset.
    pub fn weights_or_unit(&self) -> Vec<f64> {
        self.class_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; self.num_classes])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Timeseries,
    Image,
}

/// Shape of one modality: `(steps, features)` for time series, `(channels, h, w)` for images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    pub layout: Layout,
    pub shape: Vec<usize>,
}

impl ModalityConfig {
    pub fn timeseries(name: &str, steps: usize, features: usize) -> Self {
        ModalityConfig {
            name: name.to_string(),
            layout: Layout::Timeseries,
            shape: vec![steps, features],
        }
    }

    pub fn image(name: &str, channels: usize, h: usize, w: usize) -> Self {
        ModalityConfig {
            name: name.to_string(),
            layout: Layout::Image,
            shape: vec![channels, h, w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rank = match self.layout {
            Layout::Timeseries => 2,
            Layout::Image => 3,
        };
        if self.shape.len() != rank {
            return Err(Error::Config(format!(
                "modality `{}`: {:?} layout needs {rank} shape entries, got {:?}",
                self.name, self.layout, self.shape
            )));
        }
        if self.shape.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "modality `{}`: shape entries must be >= 1, got {:?}",
                self.name, self.shape
            )));
        }
        Ok(())
    }

    /// Number of scalar values per sample.
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Which of the two modalities; serialized as 1 or 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Modality {
    One,
    Two,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::One, Modality::Two];

    pub fn from_number(m: usize) -> Result<Self> {
        match m {
            1 => Ok(Modality::One),
            2 => Ok(Modality::Two),
            other => Err(Error::Config(format!("modality index must be 1 or 2, got {other}"))),
        }
    }

    pub fn number(self) -> usize {
        match self {
            Modality::One => 1,
            Modality::Two => 2,
        }
    }

    /// Zero-based id used as the modality-classifier label.
    pub fn index(self) -> usize {
        self.number() - 1
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::One => Modality::Two,
            Modality::Two => Modality::One,
        }
    }
}

impl TryFrom<u8> for Modality {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Modality::from_number(v as usize).map_err(|e| e.to_string())
    }
}

impl From<Modality> for u8 {
    fn from(m: Modality) -> u8 {
        m.number() as u8
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Labels(Vec<u8>),
    Value(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub x1: Vec<f32>,
    pub x2: Vec<f32>,
    pub target: Target,
}

impl Sample {
    pub fn input(&self, m: Modality) -> &[f32] {
        match m {
            Modality::One => &self.x1,
            Modality::Two => &self.x2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskSpec,
    pub mod1: ModalityConfig,
    pub mod2: ModalityConfig,
    pub samples: Vec<Sample>,
    pub provenance: BTreeMap<String, serde_json::Value>,
}

/// Targets of a batch in the form the losses consume.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Multi(Mat),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Multi(m) => m.nrows(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
            Targets::Multi(m) => Targets::Multi(m.select(ndarray::Axis(0), rows)),
            Targets::Values(v) => Targets::Values(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modality(&self, m: Modality) -> &ModalityConfig {
        match m {
            Modality::One => &self.mod1,
            Modality::Two => &self.mod2,
        }
    }

    /// Checks ids, shapes, finiteness and target ranges.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.mod1.validate()?;
        self.mod2.validate()?;
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", s.id)));
            }
            for m in Modality::BOTH {
                let cfg = self.modality(m);
                let x = s.input(m);
                if x.len() != cfg.size() {
                    return Err(Error::Shape(format!(
                        "sample `{}`: modality `{}` has {} values, expected {}",
                        s.id,
                        cfg.name,
                        x.len(),
                        cfg.size()
                    )));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "sample `{}` modality `{}`",
                        s.id, cfg.name
                    )));
                }
            }
            self.check_target(&s.id, &s.target)?;
        }
        Ok(())
    }

    fn check_target(&self, id: &str, target: &Target) -> Result<()> {
        let k = self.task.num_classes;
        let ok = match (self.task.kind, target) {
            (TaskKind::Binary | TaskKind::Multiclass, Target::Class(c)) => *c < k,
            (TaskKind::Multilabel, Target::Labels(l)) => l.len() == k && l.iter().all(|&b| b <= 1),
            (TaskKind::Regression, Target::Value(v)) => v.is_finite(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "sample `{id}`: target {target:?} invalid for {} task with {k} classes",
                self.task.kind.name()
            )))
        }
    }

    /// `(rows.len(), size)` matrix of one modality's flattened inputs.
    pub fn inputs(&self, m: Modality, rows: &[usize]) -> Mat {
        let size = self.modality(m).size();
        let mut out = Array2::zeros((rows.len(), size));
        for (i, &r) in rows.iter().enumerate() {
            for (dst, &src) in out.row_mut(i).iter_mut().zip(self.samples[r].input(m)) {
                *dst = src as f64;
            }
        }
        out
    }

    /// Raw (un-normalized) targets of the given rows.
    pub fn targets(&self, rows: &[usize]) -> Targets {
        match self.task.kind {
            TaskKind::Binary | TaskKind::Multiclass => Targets::Classes(
                rows.iter()
                    .map(|&r| match self.samples[r].target {
                        Target::Class(c) => c,
                        _ => unreachable!("validated dataset"),
                    })
                    .collect(),
            ),
            TaskKind::Multilabel => {
                let k = self.task.num_classes;
                let mut m = Array2::zeros((rows.len(), k));
                for (i, &r) in rows.iter().enumerate() {
                    if let Target::Labels(l) = &self.samples[r].target {
                        for (j, &b) in l.iter().enumerate() {
                            m[[i, j]] = b as f64;
                        }
                    }
                }
                Targets::Multi(m)
            }
            TaskKind::Regression => Targets::Values(
                rows.iter()
                    .map(|&r| match self.samples[r].target {
                        Target::Value(v) => v as f64,
                        _ => unreachable!("validated dataset"),
                    })
                    .collect(),
            ),
        }
    }

    pub fn ids(&self, rows: &[usize]) -> Vec<String> {
        rows.iter().map(|&r| self.samples[r].id.clone()).collect()
    }
}

/// Per-class weights `w_k = N / (K * N_k)` from classification targets; for
/// multilabel targets `N_k` counts positives of label column `k`.
pub fn compute_class_weights(targets: &Targets, task: &TaskSpec) -> Result<Vec<f64>> {
    if !task.kind.is_classification() {
        return Err(Error::Config("class weights need a classification task".into()));
    }
    let k = task.num_classes;
    let (n, counts) = match targets {
        Targets::Classes(c) => {
            let mut counts = vec![0usize; k];
            for &label in c {
                if label >= k {
                    return Err(Error::Data(format!("label {label} out of range for {k} classes")));
                }
                counts[label] += 1;
            }
            (c.len(), counts)
        }
        Targets::Multi(m) => {
            if m.ncols() != k {
                return Err(Error::Shape(format!("{} label columns for {k} classes", m.ncols())));
            }
            let counts = (0..k)
                .map(|j| m.column(j).iter().filter(|&&v| v > 0.5).count())
                .collect();
            (m.nrows(), counts)
        }
        Targets::Values(_) => {
            return Err(Error::Data("regression targets have no classes".into()));
        }
    };
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {empty} has no samples")));
    }
    Ok(counts
        .iter()
        .map(|&c| n as f64 / (k as f64 * c as f64))
        .collect())
}
