use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::prep::PreparedSplit;
use crate::data::fmt_real;
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::params::ParamBundle;
use crate::rng;
use crate::tape::{BatchStats, Mat};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    #[default]
    Uniform,
    Kendall,
}

/// Validation quantity monitored by early stopping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCriterion {
    #[default]
    Main,
    Total,
}

impl StopCriterion {
    pub fn name(self) -> &'static str {
        match self {
            StopCriterion::Main => "main",
            StopCriterion::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_weighting: LossWeighting,
    pub stop_on: StopCriterion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            loss_weighting: LossWeighting::Uniform,
            stop_on: StopCriterion::Main,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        Ok(())
    }
}

/// Loss values and parameter gradients of one training batch.
#[derive(Debug, Clone)]
pub struct Step {
    pub losses: LossBundle,
    pub grads: BTreeMap<String, Mat>,
    pub bn_updates: Vec<(String, BatchStats)>,
}

/// A model the generic training loop can fit.
pub trait Trainable {
    fn params(&self) -> &ParamBundle;
    fn params_mut(&mut self) -> &mut ParamBundle;
    fn buffers(&self) -> &ParamBundle;
    fn buffers_mut(&mut self) -> &mut ParamBundle;
    /// Training-mode forward and backward pass with masks drawn from `seed`.
    fn step(&self, batch: &PreparedSplit, seed: u64) -> Result<Step>;
    /// Eval-mode loss monitored by early stopping.
    fn validation_loss(&self, split: &PreparedSplit, criterion: StopCriterion) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBundle,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// Per-epoch training losses as CSV: `epoch,main,aux,contrastive,modality,total`.
    pub fn write_loss_trace(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(format!("write {}", path.display()), e);
        writeln!(w, "epoch,main,aux,contrastive,modality,total").map_err(io)?;
        for r in &self.epochs {
            let t = &r.train;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch,
                fmt_real(t.main),
                fmt_real(t.aux),
                fmt_real(t.contrastive),
                fmt_real(t.modality),
                fmt_real(t.total)
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads a loss trace written by [`TrainHistory::write_loss_trace`].
pub fn read_loss_trace(path: &Path) -> Result<Vec<(usize, LossBundle)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["epoch", "main", "aux", "contrastive", "modality", "total"] {
        return Err(Error::Data(format!("{}: not a loss trace (header {header:?})", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad value in column {i}", path.display())))
        };
        let epoch = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: bad epoch", path.display())))?;
        out.push((
            epoch,
            LossBundle {
                main: num(1)?,
                aux: num(2)?,
                contrastive: num(3)?,
                modality: num(4)?,
                total: num(5)?,
                kendall_log_vars: None,
            },
        ));
    }
    Ok(out)
}

struct Adam {
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
    t: i32,
}

impl Adam {
    fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut ParamBundle, grads: &BTreeMap<String, Mat>, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (path, p) in params.iter_mut() {
            let Some(g) = grads.get(path) else { continue };
            let m = self.m.entry(path.to_string()).or_insert_with(|| Mat::zeros(p.dim()));
            let v = self.v.entry(path.to_string()).or_insert_with(|| Mat::zeros(p.dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            });
        }
    }
}

/// Mini-batches of a shuffled permutation. A trailing batch of one sample is
/// merged into its predecessor so batch statistics stay defined.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng(seed));
    let mut batches: Vec<Vec<usize>> = perm.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Adam with early stopping on the validation loss picked by `stop_on`; the best epoch's
/// parameters and buffers are restored and rounded to `f32` at the end.
pub fn train<M: Trainable>(model: &mut M, train: &PreparedSplit, val: &PreparedSplit, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Data(format!("training needs at least 2 samples, got {}", train.len())));
    }
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut adam = Adam::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamBundle, ParamBundle)> = None;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite(term) => Error::Divergence { epoch, term },
            e => e,
        };
        let epoch_seed = rng::derive(cfg.seed, &[rng::tag("epoch"), epoch as u64]);
        let mut mean = LossBundle::default();
        let mut seen = 0.0;
        for (b, rows) in batch_indices(train.len(), cfg.batch_size, epoch_seed).iter().enumerate() {
            let batch = train.select(rows);
            let step = model.step(&batch, rng::derive(epoch_seed, &[b as u64])).map_err(diverged)?;
            if let Some(term) = step.losses.non_finite_term() {
                return Err(Error::Divergence { epoch, term: term.to_string() });
            }
            if step.grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { epoch, term: "gradient".into() });
            }
            adam.update(model.params_mut(), &step.grads, cfg);
            crate::nn::apply_bn_updates(model.buffers_mut(), &step.bn_updates);
            let w = rows.len() as f64;
            mean = mean.blend(seen, &step.losses, w);
            seen += w;
        }
        let validation = model.validation_loss(val, cfg.stop_on).map_err(diverged)?;
        if !validation.is_finite() {
            return Err(Error::Divergence { epoch, term: format!("validation {}", cfg.stop_on.name()) });
        }
        epochs.push(EpochRecord { epoch, train: mean, validation });
        log::debug!("epoch {epoch}: train total {:.5}, validation {validation:.5}", mean.total);

        let improved = best.as_ref().is_none_or(|(_, b, _, _)| validation < *b);
        if improved {
            best = Some((epoch, validation, model.params().clone(), model.buffers().clone()));
        } else if epoch - best.as_ref().expect("set on first epoch").0 >= cfg.patience {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    let (best_epoch, best_validation, params, buffers) = best.expect("at least one epoch");
    *model.params_mut() = params;
    *model.buffers_mut() = buffers;
    model.params_mut().quantize_f32();
    model.buffers_mut().quantize_f32();
    Ok(TrainHistory {
        epochs,
        best_epoch,
        best_validation,
        stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_everything_once() {
        for (n, bs) in [(10, 3), (10, 5), (9, 4), (129, 128), (5, 128)] {
            let batches = batch_indices(n, bs, 3);
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(batches.iter().all(|b| b.len() >= 2));
        }
        assert_eq!(batch_indices(20, 6, 1), batch_indices(20, 6, 1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for f in [
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.max_epochs = 0,
            |c: &mut TrainConfig| c.patience = 0,
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = ParamBundle::new();
        p.insert("w", Mat::from_elem((1, 2), 1.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), ndarray::array![[0.5, -2.0]]);
        let cfg = TrainConfig::default();
        let mut adam = Adam::new();
        adam.update(&mut p, &g, &cfg);
        let w = p.get("w").unwrap();
        assert!((w[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-8);
        assert!((w[[0, 1]] - (1.0 + 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn loss_trace_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let bundle = LossBundle { main: 1.5, aux: 0.0, contrastive: 2.25, modality: 0.5, total: 4.25, kendall_log_vars: None };
        let h = TrainHistory {
            epochs: vec![EpochRecord { epoch: 0, train: bundle, validation: 1.0 }],
            best_epoch: 0,
            best_validation: 1.0,
            stop_reason: StopReason::MaxEpochs,
        };
        h.write_loss_trace(&path).unwrap();
        let back = read_loss_trace(&path).unwrap();
        assert_eq!(back, vec![(0, bundle)]);
    }
}
