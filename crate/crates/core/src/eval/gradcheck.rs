use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossTerm;
use crate::model::{MDiCoModel, Objective, PreparedSplit};
use crate::nn::Mode;
use crate::par;
use crate::params::ParamBundle;
use crate::tape::Mat;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub objective: String,
    /// Largest relative error per parameter block.
    pub blocks: BTreeMap<String, f64>,
    pub max_error: f64,
    pub worst_block: String,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error <= tolerance
    }
}

/// Central differences of `loss` against its analytic gradients, one entry
/// at a time over every parameter block. `max_per_block` checks an evenly
/// strided subset of each larger block instead of every entry.
pub fn gradcheck_fn<F>(objective: &str, params: &ParamBundle, step: f64, max_per_block: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamBundle) -> Result<(f64, BTreeMap<String, Mat>)> + Sync,
{
    let (_, analytic) = f(params)?;
    for (path, g) in &analytic {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::GradCheck(format!("non-finite analytic gradient in block `{path}`")));
        }
    }
    let entries: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(path, m)| {
            let stride = max_per_block.map_or(1, |k| m.len().div_ceil(k.max(1)));
            (0..m.len()).step_by(stride).map(move |i| (path.to_string(), i))
        })
        .collect();
    let count = entries.len();
    let errors = par::map(entries, |(path, i)| -> Result<(String, f64)> {
        let shifted = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            let m = p.get_mut(&path).expect("path from bundle");
            let cols = m.ncols();
            m[[i / cols, i % cols]] += delta;
            Ok(f(&p)?.0)
        };
        let numeric = (shifted(step)? - shifted(-step)?) / (2.0 * step);
        let m = params.get(&path).expect("path from bundle");
        let a = analytic.get(&path).map_or(0.0, |g| g[[i / m.ncols(), i % m.ncols()]]);
        if !numeric.is_finite() {
            return Err(Error::GradCheck(format!("non-finite numeric gradient in block `{path}`")));
        }
        Ok((path, relative_error(a, numeric)))
    });
    let mut blocks: BTreeMap<String, f64> = BTreeMap::new();
    for e in errors {
        let (path, err) = e?;
        let slot = blocks.entry(path).or_insert(0.0);
        *slot = slot.max(err);
    }
    let (worst_block, max_error) = blocks
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k.clone(), *v))
        .unwrap_or_default();
    Ok(GradCheckReport {
        objective: objective.to_string(),
        blocks,
        max_error,
        worst_block,
        entries_checked: count,
    })
}

pub fn objective_name(objective: Objective) -> &'static str {
    match objective {
        Objective::Total => "total",
        Objective::Term(t) => t.name(),
    }
}

/// Gradient check of one objective of a joint model on a fixed batch. The
/// batch-seeded train mode keeps dropout masks and batch statistics fixed.
pub fn gradcheck_model(model: &MDiCoModel, batch: &PreparedSplit, objective: Objective, seed: u64) -> Result<GradCheckReport> {
    gradcheck_model_sampled(model, batch, objective, seed, None)
}

/// [`gradcheck_model`] over at most `max_per_block` entries per block.
pub fn gradcheck_model_sampled(
    model: &MDiCoModel,
    batch: &PreparedSplit,
    objective: Objective,
    seed: u64,
    max_per_block: Option<usize>,
) -> Result<GradCheckReport> {
    let mode = Mode::Train { seed };
    gradcheck_fn(objective_name(objective), &model.params, GRADCHECK_STEP, max_per_block, |p| {
        let mut probe = model.clone();
        probe.params = p.clone();
        let (bundle, grads, _) = probe.loss_and_grads(batch, mode, objective)?;
        Ok((bundle.total_for(objective), grads))
    })
}

/// Every objective the model's variant defines.
pub fn objectives_of(model: &MDiCoModel) -> Vec<Objective> {
    use crate::baselines::Variant;
    let v = model.variant();
    let mut out = vec![Objective::Term(LossTerm::Main)];
    if v != Variant::NoAuxLoss {
        out.push(Objective::Term(LossTerm::Aux));
    }
    if v != Variant::NoContrastiveLoss {
        out.push(Objective::Term(LossTerm::Contrastive));
    }
    if v != Variant::NoModalityLoss {
        out.push(Objective::Term(LossTerm::Modality));
    }
    out.push(Objective::Total);
    out
}

trait TotalFor {
    fn total_for(&self, objective: Objective) -> f64;
}

impl TotalFor for crate::losses::LossBundle {
    fn total_for(&self, objective: Objective) -> f64 {
        match objective {
            Objective::Total => self.total,
            Objective::Term(t) => self.term(t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 2.1).abs() < 1e-12);
    }

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut p = ParamBundle::new();
        p.insert("w", array![[0.5, -1.5, 2.0]]);
        let good = gradcheck_fn("q", &p, 1e-5, None, |p| {
            let w = p.get("w").unwrap();
            let mut g = BTreeMap::new();
            g.insert("w".to_string(), w * 2.0);
            Ok((w.iter().map(|v| v * v).sum(), g))
        })
        .unwrap();
        assert!(good.passes(1e-6), "{good:?}");
        let bad = gradcheck_fn("q", &p, 1e-5, None, |p| {
            let w = p.get("w").unwrap();
            let mut g = BTreeMap::new();
            g.insert("w".to_string(), w * 2.1);
            Ok((w.iter().map(|v| v * v).sum(), g))
        })
        .unwrap();
        assert!(!bad.passes(1e-4));
        assert_eq!(bad.worst_block, "w");
    }

    #[test]
    fn sampling_strides_each_block() {
        let mut p = ParamBundle::new();
        p.insert("a", Mat::zeros((3, 4)));
        p.insert("b", Mat::zeros((1, 2)));
        let r = gradcheck_fn("zero", &p, 1e-5, Some(5), |_| Ok((0.0, BTreeMap::new()))).unwrap();
        // block a: stride 3 over 12 entries; block b: all 2
        assert_eq!(r.entries_checked, 4 + 2);
        assert_eq!(r.max_error, 0.0);
    }
}
