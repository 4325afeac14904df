//! Sequential versus rayon mapping of independent cross-validation tasks.
//! Each task fits a preprocessor and trains a small joint model on one fold.

use criterion::{criterion_group, criterion_main, Criterion};
use mdico::data::{generate_synthetic, kfold_split, Dataset, Fold, GenSpec, Modality, ModalityConfig};
use mdico::encoders::{Backbone, EncoderSpec};
use mdico::model::{train, MDiCoModel, ModelConfig, Preprocessor, TrainConfig};
use mdico::par;

fn setup() -> (Dataset, ModelConfig, Vec<Fold>) {
    let mut spec = GenSpec::planted_multiclass(400, 4, 0.5);
    spec.mod1 = ModalityConfig::timeseries("optical", 12, 4);
    spec.mod2 = ModalityConfig::timeseries("radar", 12, 2);
    let data = generate_synthetic(&spec, 0).expect("valid spec");
    let encoder = EncoderSpec {
        hidden_units: 32,
        projection_dim: 32,
        ..EncoderSpec::with_backbone(Backbone::Mlp)
    };
    let cfg = ModelConfig::new(data.task.clone(), data.mod1.clone(), data.mod2.clone(), encoder);
    let folds = kfold_split(data.len(), 4, 1).expect("valid split");
    (data, cfg, folds)
}

fn fold_task(data: &Dataset, cfg: &ModelConfig, fold: &Fold) -> f64 {
    let prep = Preprocessor::fit(data, &fold.train, &Modality::BOTH).expect("fit");
    let tr = prep.prepare(data, &fold.train).expect("prepare");
    let te = prep.prepare(data, &fold.test).expect("prepare");
    let mut model = MDiCoModel::new(cfg.clone(), 3).expect("model");
    let tcfg = TrainConfig {
        max_epochs: 2,
        ..Default::default()
    };
    train(&mut model, &tr, &te, &tcfg).expect("training").best_validation
}

fn bench(c: &mut Criterion) {
    let (data, cfg, folds) = setup();
    let mut group = c.benchmark_group("cv_fold_training");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(folds.clone(), |f| fold_task(&data, &cfg, &f)))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| {
        b.iter(|| par::map_parallel(folds.clone(), |f| fold_task(&data, &cfg, &f)))
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
