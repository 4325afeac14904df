use serde::{Deserialize, Serialize};

use crate::data::{Targets, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::tape::Mat;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub const MULTILABEL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
    Weighted,
}

impl F1Average {
    pub fn metric_name(self) -> &'static str {
        match self {
            F1Average::Macro => "f1_macro",
            F1Average::Micro => "f1_micro",
            F1Average::Weighted => "f1_weighted",
        }
    }
}

/// Decoded model outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Classes(Vec<usize>),
    Multi(Mat),
    Values(Vec<f64>),
}

/// Argmax for single-label tasks, sigmoid at 0.5 for multilabel, identity for regression.
pub fn decode(logits: &Mat, task: &TaskSpec) -> Predictions {
    match task.kind {
        TaskKind::Binary | TaskKind::Multiclass => Predictions::Classes(
            logits
                .rows()
                .into_iter()
                .map(|r| argmax(&r.to_vec()))
                .collect(),
        ),
        TaskKind::Multilabel => Predictions::Multi(
            logits.mapv(|x| f64::from(u8::from(1.0 / (1.0 + (-x).exp()) >= MULTILABEL_THRESHOLD))),
        ),
        TaskKind::Regression => Predictions::Values(logits.column(0).to_vec()),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }

    fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

fn aggregate(counts: &[Counts], average: F1Average) -> f64 {
    match average {
        F1Average::Micro => {
            let total = counts.iter().fold(Counts::default(), |a, c| Counts {
                tp: a.tp + c.tp,
                fp: a.fp + c.fp,
                fn_: a.fn_ + c.fn_,
            });
            total.f1().unwrap_or(0.0)
        }
        F1Average::Macro => {
            let mut sum = 0.0;
            for (k, c) in counts.iter().enumerate() {
                sum += c.f1().unwrap_or_else(|| {
                    log::warn!("class {k} absent from truth and predictions; its F1 counts as 0");
                    0.0
                });
            }
            sum / counts.len() as f64
        }
        F1Average::Weighted => {
            let support: usize = counts.iter().map(Counts::support).sum();
            if support == 0 {
                return 0.0;
            }
            counts
                .iter()
                .map(|c| c.f1().unwrap_or(0.0) * c.support() as f64)
                .sum::<f64>()
                / support as f64
        }
    }
}

/// F1 of class predictions over `num_classes` classes.
pub fn f1_classes(truth: &[usize], pred: &[usize], num_classes: usize, average: F1Average) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Data("F1 needs at least one sample".into()));
    }
    let mut counts = vec![Counts::default(); num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Data(format!("label out of range for {num_classes} classes")));
        }
        if t == p {
            counts[t].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[t].fn_ += 1;
        }
    }
    Ok(aggregate(&counts, average))
}

/// F1 of 0/1 label matrices, one class per column.
pub fn f1_multilabel(truth: &Mat, pred: &Mat, average: F1Average) -> Result<f64> {
    if truth.dim() != pred.dim() {
        return Err(Error::Shape(format!("{:?} labels vs {:?} predictions", truth.dim(), pred.dim())));
    }
    if truth.nrows() == 0 {
        return Err(Error::Data("F1 needs at least one sample".into()));
    }
    let counts: Vec<Counts> = truth
        .columns()
        .into_iter()
        .zip(pred.columns())
        .map(|(t, p)| {
            let mut c = Counts::default();
            for (&a, &b) in t.iter().zip(p.iter()) {
                match (a > 0.5, b > 0.5) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, false) => {}
                }
            }
            c
        })
        .collect();
    Ok(aggregate(&counts, average))
}

/// F1 of decoded predictions against classification targets.
pub fn f1_score(truth: &Targets, pred: &Predictions, task: &TaskSpec, average: F1Average) -> Result<f64> {
    match (truth, pred) {
        (Targets::Classes(t), Predictions::Classes(p)) => f1_classes(t, p, task.num_classes, average),
        (Targets::Multi(t), Predictions::Multi(p)) => f1_multilabel(t, p, average),
        _ => Err(Error::Data(format!("F1 is undefined for a {} task", task.kind.name()))),
    }
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2_score(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", truth.len(), pred.len())));
    }
    if truth.len() < 2 {
        return Err(Error::Data("R² needs at least 2 samples".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Data("R² is undefined for constant targets".into()));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Task-appropriate score and its metric name.
pub fn score(truth: &Targets, logits: &Mat, task: &TaskSpec, average: F1Average) -> Result<(&'static str, f64)> {
    let pred = decode(logits, task);
    match (truth, pred) {
        (Targets::Values(t), Predictions::Values(p)) => Ok(("r2", r2_score(t, &p)?)),
        (_, pred) => Ok((average.metric_name(), f1_score(truth, &pred, task, average)?)),
    }
}
