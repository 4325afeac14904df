use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mdico::baselines::{run_ablation_suite, Variant, VariantModel};
use mdico::data::{save_dataset, Dataset, Modality, Target};
use mdico::eval::{
    cv_split, evaluate_variant, gradcheck_model_sampled, objective_name, objectives_of, train_on_split,
    write_metrics_csv, CvSplit, GradCheckReport, GRADCHECK_TOLERANCE,
};
use mdico::model::{MDiCoModel, Preprocessor};
use serde_json::json;

use crate::config::{usage, ExperimentConfig};

pub const CHECKPOINT_EXT: &str = "ckpt";

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("write {}", path.display()))
}

fn command_dir(cfg: &ExperimentConfig, name: &str) -> anyhow::Result<PathBuf> {
    let dir = cfg.output_dir.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("create {}", dir.display()))?;
    cfg.snapshot(&dir)?;
    Ok(dir)
}

/// The train/validation/test rows of cross-validation run 0, fold 0.
fn holdout(cfg: &ExperimentConfig, dataset: &Dataset) -> anyhow::Result<CvSplit> {
    Ok(cv_split(dataset.len(), &cfg.eval, 0, 0)?)
}

pub fn gen_data(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let spec = cfg.generator()?;
    let dataset = cfg.dataset()?;
    let dir = cfg.output_dir.join("dataset");
    save_dataset(&dataset, &dir)?;
    cfg.snapshot(&dir)?;
    println!(
        "generated {} samples ({} task, {} classes) with seed {}",
        dataset.len(),
        dataset.task.kind.name(),
        dataset.task.num_classes,
        cfg.data.seed
    );
    println!(
        "modality 1 `{}` {:?}, modality 2 `{}` {:?}; latents p={} q={} r={}, sigma_x={}",
        dataset.mod1.name, dataset.mod1.shape, dataset.mod2.name, dataset.mod2.shape, spec.shared_dim, spec.specific_dim,
        spec.nuisance_dim, spec.sigma_x
    );
    if dataset.task.kind.is_classification() {
        let mut counts = vec![0usize; dataset.task.num_classes];
        for s in &dataset.samples {
            match &s.target {
                Target::Class(c) => counts[*c] += 1,
                Target::Labels(l) => l.iter().zip(counts.iter_mut()).for_each(|(b, c)| *c += usize::from(*b)),
                Target::Value(_) => {}
            }
        }
        println!("class counts {counts:?}");
    }
    println!("wrote {}", dir.display());
    Ok(dir)
}

fn checkpoint_name(variant: Variant, modality: Option<Modality>) -> String {
    match modality {
        Some(m) => format!("{variant}_m{m}.{CHECKPOINT_EXT}"),
        None => format!("{variant}.{CHECKPOINT_EXT}"),
    }
}

pub fn train(cfg: &ExperimentConfig, variant: Option<Variant>) -> anyhow::Result<PathBuf> {
    let dataset = cfg.dataset()?;
    let variant = variant.unwrap_or(cfg.variants[0]);
    let model_cfg = cfg.model_config(&dataset)?.with_variant(variant);
    let split = holdout(cfg, &dataset)?;
    let dir = command_dir(cfg, "train")?;
    let modalities: Vec<Option<Modality>> = if variant.is_joint() {
        vec![None]
    } else {
        Modality::BOTH.iter().map(|&m| Some(m)).collect()
    };
    let mut histories = Vec::new();
    for modality in modalities {
        let (model, history) = train_on_split(&dataset, &model_cfg, modality, &split, &cfg.train)
            .with_context(|| format!("training {variant}"))?;
        let ckpt = dir.join(checkpoint_name(variant, modality));
        model.save(&ckpt)?;
        let suffix = modality.map_or(String::new(), |m| format!("_m{m}"));
        history.write_loss_trace(&dir.join(format!("loss_trace{suffix}.csv")))?;
        println!(
            "{variant}{}: {} epochs, best epoch {} (validation {} loss {:.6}), {:?}",
            modality.map_or(String::new(), |m| format!(" modality {m}")),
            history.epochs.len(),
            history.best_epoch,
            cfg.train.stop_on.name(),
            history.best_validation,
            history.stop_reason
        );
        histories.push(json!({
            "modality": modality,
            "checkpoint": ckpt.file_name().and_then(|n| n.to_str()),
            "history": history,
        }));
    }
    write_json(
        &dir.join("history.json"),
        &json!({
            "variant": variant,
            "split": {"train": split.train.len(), "validation": split.validation.len(), "test": split.test.len()},
            "models": histories,
        }),
    )?;
    println!("wrote {}", dir.display());
    Ok(dir)
}

fn check_compatible(model: &VariantModel, dataset: &Dataset, path: &Path) -> anyhow::Result<()> {
    let (task, mods) = match model {
        VariantModel::Joint(m) => (m.task(), vec![(Modality::One, &m.config.mod1), (Modality::Two, &m.config.mod2)]),
        VariantModel::Individual(m) => (m.task(), vec![(m.modality(), &m.config.input)]),
    };
    if task.kind != dataset.task.kind || task.num_classes != dataset.task.num_classes {
        return Err(usage(format!(
            "{}: checkpoint task {} with {} outputs does not match dataset task {} with {}",
            path.display(),
            task.kind.name(),
            task.num_classes,
            dataset.task.kind.name(),
            dataset.task.num_classes
        )));
    }
    for (m, input) in mods {
        if input.shape != dataset.modality(m).shape {
            return Err(usage(format!(
                "{}: checkpoint modality {m} shape {:?} does not match dataset shape {:?}",
                path.display(),
                input.shape,
                dataset.modality(m).shape
            )));
        }
    }
    Ok(())
}

/// Checkpoints in `dir`, sorted by name.
pub fn find_checkpoints(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| usage(format!("cannot list checkpoints in {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == CHECKPOINT_EXT))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(usage(format!("no .{CHECKPOINT_EXT} files in {}", dir.display())));
    }
    Ok(out)
}

pub fn eval(cfg: &ExperimentConfig, checkpoints: &[PathBuf], space_metrics: bool) -> anyhow::Result<PathBuf> {
    let dataset = cfg.dataset()?;
    let checkpoints = if checkpoints.is_empty() {
        find_checkpoints(&cfg.output_dir.join("train"))?
    } else {
        checkpoints.to_vec()
    };
    let mut settings = cfg.eval.clone();
    settings.space_metrics |= space_metrics;
    let split = holdout(cfg, &dataset)?;
    let mut models = Vec::new();
    for path in &checkpoints {
        let model = VariantModel::load(path)?;
        check_compatible(&model, &dataset, path)?;
        models.push(model);
    }
    let dir = command_dir(cfg, "eval")?;
    let mut records = Vec::new();
    for model in &models {
        records.extend(evaluate_variant(model, &dataset, &split.test, split.run, split.fold, &settings)?);
    }
    write_metrics_csv(&records, &dir.join("metrics.csv"))?;
    for r in &records {
        println!("{} modality {} {} = {:.4}", r.variant, r.modality, r.metric, r.value);
    }
    println!("wrote {}", dir.display());
    Ok(dir)
}

pub fn ablate(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dataset = cfg.dataset()?;
    let base = cfg.model_config(&dataset)?;
    let result = run_ablation_suite(&dataset, &base, &cfg.variants, &cfg.train, &cfg.eval)?;
    let dir = command_dir(cfg, "ablate")?;
    result.write(&dir)?;
    result.report.write(&dir)?;
    for row in &result.summary {
        println!(
            "{:<22} modality {} {} = {:.4} +/- {:.4} (n={})",
            row.variant.name(),
            row.modality,
            row.metric,
            row.mean,
            row.std,
            row.n
        );
    }
    for (k, v) in &result.report.timings {
        log::info!("{k}: {v:.2}");
    }
    println!("wrote {}", dir.display());
    Ok(dir)
}

/// Returns the output directory and whether every objective passed.
pub fn gradcheck(cfg: &ExperimentConfig, batch_size: usize, max_per_block: Option<usize>) -> anyhow::Result<(PathBuf, bool)> {
    let dataset = cfg.dataset()?;
    if batch_size < 2 || batch_size > dataset.len() {
        return Err(usage(format!("batch size {batch_size} must be in 2..={}", dataset.len())));
    }
    let base = cfg.model_config(&dataset)?;
    let rows: Vec<usize> = (0..batch_size).collect();
    let all: Vec<usize> = (0..dataset.len()).collect();
    let prep = Preprocessor::fit(&dataset, &all, &Modality::BOTH)?;
    let batch = prep.prepare(&dataset, &rows)?;
    let mut reports: Vec<(Variant, GradCheckReport)> = Vec::new();
    for &variant in &cfg.variants {
        if !variant.is_joint() {
            log::warn!("skipping `{variant}`: the gradient check covers the joint model");
            continue;
        }
        let model = MDiCoModel::new(base.with_variant(variant), cfg.eval.seed)?;
        for objective in objectives_of(&model) {
            let r = gradcheck_model_sampled(&model, &batch, objective, cfg.eval.seed, max_per_block)?;
            println!(
                "{variant} {}: max relative error {:.3e} in `{}` over {} entries",
                objective_name(objective),
                r.max_error,
                r.worst_block,
                r.entries_checked
            );
            reports.push((variant, r));
        }
    }
    if reports.is_empty() {
        return Err(usage("gradcheck needs at least one joint variant"));
    }
    let passed = reports.iter().all(|(_, r)| r.passes(GRADCHECK_TOLERANCE));
    let dir = command_dir(cfg, "gradcheck")?;
    write_json(
        &dir.join("gradcheck.json"),
        &json!({
            "tolerance": GRADCHECK_TOLERANCE,
            "batch_size": batch_size,
            "max_entries_per_block": max_per_block,
            "passed": passed,
            "reports": reports.iter().map(|(v, r)| json!({"variant": v, "report": r})).collect::<Vec<_>>(),
        }),
    )?;
    println!("wrote {}", dir.display());
    Ok((dir, passed))
}
