use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{score, F1Average};
use crate::baselines::{build_variant, Variant, VariantModel};
use crate::data::{carve_validation, kfold_split, Dataset, Fold, Modality};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preprocessor, Space, StopReason, TrainConfig, TrainHistory};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSettings {
    pub folds: usize,
    pub runs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub f1_average: F1Average,
    /// Also score joint models from the shared and specific blocks alone.
    pub space_metrics: bool,
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings {
            folds: 10,
            runs: 5,
            seed: 0,
            validation_fraction: 0.1,
            f1_average: F1Average::Macro,
            space_metrics: false,
        }
    }
}

impl CvSettings {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction {} not in (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// One metric of one trained model on one test fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variant: Variant,
    pub modality: Modality,
    pub fold: usize,
    pub run: usize,
    pub metric: String,
    pub value: f64,
}

/// Aggregate of one `(variant, modality, metric)` over folds and runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: Variant,
    pub modality: Modality,
    pub metric: String,
    /// Population mean and standard deviation over every fold of every run.
    pub mean: f64,
    pub std: f64,
    /// Per-run means (each over that run's folds) and their population std.
    pub run_means: Vec<f64>,
    pub run_std: f64,
    pub values: Vec<f64>,
}

impl MetricReport {
    /// Whether this is the plain test metric rather than a feature-space probe.
    pub fn is_headline(&self) -> bool {
        !self.metric.ends_with("_shared") && !self.metric.ends_with("_specific")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    pub run: usize,
    pub fold: usize,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub settings: CvSettings,
    pub records: Vec<MetricRecord>,
    pub summary: Vec<MetricReport>,
    pub histories: Vec<HistoryRecord>,
    /// Wall-clock seconds per phase; excluded from the deterministic artifacts.
    #[serde(skip)]
    pub timings: BTreeMap<String, f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups records by `(variant, modality, metric)` in first-seen order.
pub fn summarize(records: &[MetricRecord]) -> Vec<MetricReport> {
    let mut order: Vec<(Variant, Modality, String)> = Vec::new();
    let mut groups: BTreeMap<(Variant, Modality, String), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.variant, r.modality, r.metric.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &groups[&key];
            let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
            let (mean, std) = mean_std(&values);
            let mut per_run: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in rows {
                per_run.entry(r.run).or_default().push(r.value);
            }
            let run_means: Vec<f64> = per_run.values().map(|v| mean_std(v).0).collect();
            let run_std = mean_std(&run_means).1;
            MetricReport {
                variant: key.0,
                modality: key.1,
                metric: key.2,
                mean,
                std,
                run_means,
                run_std,
                values,
            }
        })
        .collect()
}

impl RunReport {
    pub fn find(&self, variant: Variant, modality: Modality, metric: &str) -> Option<&MetricReport> {
        self.summary
            .iter()
            .find(|s| s.variant == variant && s.modality == modality && s.metric == metric)
    }

    /// The headline metric of a variant on a modality.
    pub fn headline(&self, variant: Variant, modality: Modality) -> Option<&MetricReport> {
        self.summary
            .iter()
            .find(|s| s.variant == variant && s.modality == modality && s.is_headline())
    }

    /// Writes `metrics.csv`, `report.json` and per-model loss traces under
    /// `traces/`. Wall-clock timings are left out so reruns are byte-identical.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        write_metrics_csv(&self.records, &dir.join("metrics.csv"))?;
        let training: Vec<serde_json::Value> = self
            .histories
            .iter()
            .map(|h| {
                serde_json::json!({
                    "variant": h.variant,
                    "modality": h.modality,
                    "run": h.run,
                    "fold": h.fold,
                    "epochs": h.history.epochs.len(),
                    "best_epoch": h.history.best_epoch,
                    "best_validation": h.history.best_validation,
                    "stop_reason": h.history.stop_reason,
                })
            })
            .collect();
        let report = serde_json::json!({
            "settings": self.settings,
            "summary": self.summary,
            "training": training,
        });
        write_json(&dir.join("report.json"), &report)?;
        let traces = dir.join("traces");
        fs::create_dir_all(&traces).map_err(|e| Error::io(format!("create {}", traces.display()), e))?;
        for h in &self.histories {
            let m = h.modality.map_or(String::new(), |m| format!("_m{m}"));
            let name = format!("{}{m}_run{}_fold{}.csv", h.variant, h.run, h.fold);
            h.history.write_loss_trace(&traces.join(name))?;
        }
        Ok(())
    }

    pub fn write_timings(&self, path: &Path) -> Result<()> {
        write_json(path, &serde_json::to_value(&self.timings).expect("map serializes"))
    }
}

pub(crate) fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// `variant,modality,fold,run,metric_name,value`, one row per record. Values
/// use shortest round-trip formatting so summaries recompute exactly.
pub fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["variant", "modality", "fold", "run", "metric_name", "value"]).map_err(err)?;
    for r in records {
        w.write_record([
            r.variant.name().to_string(),
            r.modality.to_string(),
            r.fold.to_string(),
            r.run.to_string(),
            r.metric.clone(),
            r.value.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let bad = || Error::Data(format!("{}: malformed metrics row", path.display()));
        let field = |i: usize| rec.get(i).ok_or_else(bad);
        out.push(MetricRecord {
            variant: field(0)?.parse()?,
            modality: Modality::from_number(field(1)?.parse().map_err(|_| bad())?)?,
            fold: field(2)?.parse().map_err(|_| bad())?,
            run: field(3)?.parse().map_err(|_| bad())?,
            metric: field(4)?.to_string(),
            value: field(5)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Rows and seeds of one `(run, fold)` task. Every variant sees the same ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSplit {
    pub run: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub init_seed: u64,
    pub train_seed: u64,
}

fn run_folds(n: usize, cv: &CvSettings, run: usize) -> Result<Vec<Fold>> {
    kfold_split(n, cv.folds, rng::derive(cv.seed, &[rng::tag("folds"), run as u64]))
}

fn split_from_fold(fold: &Fold, cv: &CvSettings, run: usize, fold_index: usize) -> Result<CvSplit> {
    let (r, f) = (run as u64, fold_index as u64);
    let (train, validation) = carve_validation(&fold.train, cv.validation_fraction, rng::derive(cv.seed, &[rng::tag("val"), r, f]))?;
    Ok(CvSplit {
        run,
        fold: fold_index,
        train,
        validation,
        test: fold.test.clone(),
        init_seed: rng::derive(cv.seed, &[rng::tag("init"), r, f]),
        train_seed: rng::derive(cv.seed, &[rng::tag("train"), r, f]),
    })
}

/// The split cross-validation uses for `(run, fold)` on `n` samples.
pub fn cv_split(n: usize, cv: &CvSettings, run: usize, fold: usize) -> Result<CvSplit> {
    cv.validate()?;
    if run >= cv.runs || fold >= cv.folds {
        return Err(Error::Config(format!(
            "run {run} / fold {fold} outside {} runs x {} folds",
            cv.runs, cv.folds
        )));
    }
    let folds = run_folds(n, cv, run)?;
    split_from_fold(&folds[fold], cv, run, fold)
}

/// Scores a trained model's single-modality predictions on `test` rows, plus
/// the shared-only and specific-only probes when `space_metrics` is set.
pub fn evaluate_variant(
    model: &VariantModel,
    dataset: &Dataset,
    test: &[usize],
    run: usize,
    fold: usize,
    cv: &CvSettings,
) -> Result<Vec<MetricRecord>> {
    let prep = model
        .preprocessor()
        .ok_or_else(|| Error::Config("model has no fitted preprocessor".into()))?;
    let split = prep.prepare(dataset, test)?;
    let variant = model.variant();
    let mut records = Vec::new();
    let mut push = |m: Modality, metric: String, value: f64| {
        records.push(MetricRecord {
            variant,
            modality: m,
            fold,
            run,
            metric,
            value,
        })
    };
    for m in model.modalities() {
        let x = split.input(m)?;
        let mut logits = model.predict(m, x)?;
        prep.denormalize_predictions(&mut logits);
        let (name, value) = score(&split.raw_targets, &logits, &dataset.task, cv.f1_average)?;
        push(m, name.to_string(), value);
        if let (true, VariantModel::Joint(joint)) = (cv.space_metrics, model) {
            for (space, suffix) in [(Space::Shared, "shared"), (Space::Specific, "specific")] {
                let mut logits = joint.predict_from_space(m, x, space)?;
                prep.denormalize_predictions(&mut logits);
                let (name, value) = score(&split.raw_targets, &logits, &dataset.task, cv.f1_average)?;
                push(m, format!("{name}_{suffix}"), value);
            }
        }
    }
    Ok(records)
}

/// Fits the preprocessor on the split's training rows and trains one variant
/// (one modality for the individual baseline) with the split's seeds.
pub fn train_on_split(
    dataset: &Dataset,
    config: &ModelConfig,
    modality: Option<Modality>,
    split: &CvSplit,
    train_cfg: &TrainConfig,
) -> Result<(VariantModel, TrainHistory)> {
    let modalities = match modality {
        Some(m) => vec![m],
        None => Modality::BOTH.to_vec(),
    };
    let prep = Preprocessor::fit(dataset, &split.train, &modalities)?;
    let train_split = prep.prepare(dataset, &split.train)?;
    let val_split = prep.prepare(dataset, &split.validation)?;
    let mut model = build_variant(config, modality, train_cfg, split.init_seed)?;
    model.set_preprocessor(prep);
    let tcfg = TrainConfig {
        seed: split.train_seed,
        ..train_cfg.clone()
    };
    let history = model.train(&train_split, &val_split, &tcfg)?;
    Ok((model, history))
}

struct Task {
    variant: Variant,
    modality: Option<Modality>,
    split: CvSplit,
}

struct TaskOutput {
    records: Vec<MetricRecord>,
    history: HistoryRecord,
    train_secs: f64,
    eval_secs: f64,
}

fn run_task(dataset: &Dataset, base: &ModelConfig, task: &Task, train_cfg: &TrainConfig, cv: &CvSettings) -> Result<TaskOutput> {
    let split = &task.split;
    let config = base.with_variant(task.variant);
    let started = Instant::now();
    let (model, history) = train_on_split(dataset, &config, task.modality, split, train_cfg)?;
    let train_secs = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let records = evaluate_variant(&model, dataset, &split.test, split.run, split.fold, cv)?;
    let eval_secs = started.elapsed().as_secs_f64();
    log::info!(
        "{} run {} fold {}{}: {} epochs ({:?})",
        task.variant,
        split.run,
        split.fold,
        task.modality.map_or(String::new(), |m| format!(" modality {m}")),
        history.epochs.len(),
        history.stop_reason
    );
    Ok(TaskOutput {
        records,
        history: HistoryRecord {
            variant: task.variant,
            modality: task.modality,
            run: split.run,
            fold: split.fold,
            history,
        },
        train_secs,
        eval_secs,
    })
}

/// K-fold cross-validation of several variants, repeated `runs` times with
/// fresh fold assignments. Every variant sees the same splits and seeds.
pub fn run_variants(dataset: &Dataset, base: &ModelConfig, variants: &[Variant], train_cfg: &TrainConfig, cv: &CvSettings) -> Result<RunReport> {
    cv.validate()?;
    train_cfg.validate()?;
    base.validate()?;
    if dataset.task.kind != base.task.kind || dataset.task.num_classes != base.task.num_classes {
        return Err(Error::Config("model task does not match the dataset task".into()));
    }
    let wall = Instant::now();
    let mut tasks = Vec::new();
    for &variant in variants {
        for run in 0..cv.runs {
            for (fold_index, fold) in run_folds(dataset.len(), cv, run)?.iter().enumerate() {
                let split = split_from_fold(fold, cv, run, fold_index)?;
                let modalities = if variant.is_joint() {
                    vec![None]
                } else {
                    Modality::BOTH.iter().map(|&m| Some(m)).collect()
                };
                for modality in modalities {
                    tasks.push(Task {
                        variant,
                        modality,
                        split: split.clone(),
                    });
                }
            }
        }
    }
    let outputs = par::map(tasks, |t| run_task(dataset, base, &t, train_cfg, cv))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut histories = Vec::new();
    let mut timings = BTreeMap::new();
    for out in outputs {
        *timings.entry("train_task_seconds".to_string()).or_insert(0.0) += out.train_secs;
        *timings.entry("eval_task_seconds".to_string()).or_insert(0.0) += out.eval_secs;
        records.extend(out.records);
        histories.push(out.history);
    }
    timings.insert("wall_seconds".into(), wall.elapsed().as_secs_f64());
    Ok(RunReport {
        settings: cv.clone(),
        summary: summarize(&records),
        records,
        histories,
        timings,
    })
}

/// Cross-validates one variant.
pub fn run_cv(dataset: &Dataset, config: &ModelConfig, train_cfg: &TrainConfig, cv: &CvSettings) -> Result<RunReport> {
    run_variants(dataset, config, &[config.variant], train_cfg, cv)
}

/// Number of histories that stopped early.
pub fn early_stopped(report: &RunReport) -> usize {
    report
        .histories
        .iter()
        .filter(|h| h.history.stop_reason == StopReason::EarlyStopped)
        .count()
}
