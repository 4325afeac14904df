use serde::{Deserialize, Serialize};

use crate::data::{compute_class_weights, Dataset, Modality, Normalizer, Targets, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::tape::Mat;

/// Statistics fitted on training rows and applied to every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub inputs: [Option<Normalizer>; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Normalizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl Preprocessor {
    /// Fits input normalizers for `modalities`, the regression target scaler
    /// and inverse-frequency class weights (unless the task fixes its own).
    pub fn fit(dataset: &Dataset, rows: &[usize], modalities: &[Modality]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot fit preprocessing on 0 rows".into()));
        }
        let mut inputs = [None, None];
        for &m in modalities {
            inputs[m.index()] = Some(Normalizer::fit(&dataset.inputs(m, rows))?);
        }
        let targets = dataset.targets(rows);
        let (target, class_weights) = match (&dataset.task.kind, &targets) {
            (TaskKind::Regression, Targets::Values(v)) => {
                let (_, norm) = crate::data::normalize_target(v)?;
                (Some(norm), None)
            }
            _ => match &dataset.task.class_weights {
                Some(w) => (None, Some(w.clone())),
                None => (None, Some(compute_class_weights(&targets, &dataset.task)?)),
            },
        };
        Ok(Preprocessor {
            inputs,
            target,
            class_weights,
        })
    }

    /// The task with the fitted class weights attached.
    pub fn weighted_task(&self, task: &TaskSpec) -> TaskSpec {
        let mut t = task.clone();
        if task.kind.is_classification() {
            t.class_weights = self.class_weights.clone();
        }
        t
    }

    pub fn normalize_input(&self, m: Modality, x: &mut Mat) -> Result<()> {
        let norm = self.inputs[m.index()]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("no input normalizer fitted for modality {m}")))?;
        if norm.dim() != x.ncols() {
            return Err(Error::Shape(format!(
                "modality {m}: normalizer has {} features, input has {}",
                norm.dim(),
                x.ncols()
            )));
        }
        norm.apply(x);
        Ok(())
    }

    /// Maps model-space regression outputs back to target units.
    pub fn denormalize_predictions(&self, logits: &mut Mat) {
        if let Some(t) = &self.target {
            logits.mapv_inplace(|v| t.invert_scalar(v));
        }
    }

    fn normalize_targets(&self, targets: Targets) -> Targets {
        match (targets, &self.target) {
            (Targets::Values(v), Some(t)) => Targets::Values(v.iter().map(|&y| t.apply_scalar(y)).collect()),
            (other, _) => other,
        }
    }

    /// Normalized inputs of the fitted modalities and model-space targets.
    pub fn prepare(&self, dataset: &Dataset, rows: &[usize]) -> Result<PreparedSplit> {
        let mut x = [None, None];
        for m in Modality::BOTH {
            if self.inputs[m.index()].is_some() {
                let mut xm = dataset.inputs(m, rows);
                self.normalize_input(m, &mut xm)?;
                x[m.index()] = Some(xm);
            }
        }
        let raw = dataset.targets(rows);
        Ok(PreparedSplit {
            x,
            targets: self.normalize_targets(raw.clone()),
            raw_targets: raw,
        })
    }
}

/// Model-ready rows: normalized inputs (only for fitted modalities) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplit {
    pub x: [Option<Mat>; 2],
    pub targets: Targets,
    pub raw_targets: Targets,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, m: Modality) -> Result<&Mat> {
        self.x[m.index()]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("modality {m} was not prepared")))
    }

    pub fn select(&self, rows: &[usize]) -> PreparedSplit {
        PreparedSplit {
            x: [
                self.x[0].as_ref().map(|m| m.select(ndarray::Axis(0), rows)),
                self.x[1].as_ref().map(|m| m.select(ndarray::Axis(0), rows)),
            ],
            targets: self.targets.select(rows),
            raw_targets: self.raw_targets.select(rows),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GenSpec};

    #[test]
    fn fits_only_requested_modalities() {
        let d = generate_synthetic(&GenSpec::planted_multiclass(40, 3, 0.2), 1).unwrap();
        let rows: Vec<usize> = (0..30).collect();
        let p = Preprocessor::fit(&d, &rows, &[Modality::Two]).unwrap();
        assert!(p.inputs[0].is_none());
        let split = p.prepare(&d, &[30, 31]).unwrap();
        assert!(split.input(Modality::One).is_err());
        assert_eq!(split.input(Modality::Two).unwrap().dim(), (2, 24));
        assert_eq!(p.class_weights.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn regression_targets_are_zscored() {
        let mut spec = GenSpec::planted_multiclass(50, 1, 0.2);
        spec.task = TaskKind::Regression;
        spec.sigma_y = 0.1;
        let d = generate_synthetic(&spec, 2).unwrap();
        let rows: Vec<usize> = (0..50).collect();
        let p = Preprocessor::fit(&d, &rows, &Modality::BOTH).unwrap();
        let split = p.prepare(&d, &rows).unwrap();
        let Targets::Values(v) = &split.targets else { panic!() };
        let mean = v.iter().sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-9);
        assert!(p.class_weights.is_none());
    }
}
