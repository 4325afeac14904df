//! Planted linear-Gaussian two-modality benchmark.
//!
//! Each sample draws a shared latent `s`, per-modality specific latents
//! `u1`, `u2` and nuisance latents `n1`, `n2`, all standard normal. The target
//! reads `A s + B1 u1 + B2 u2` through the task link (argmax, positive-part
//! threshold, or identity plus noise). Modality `m` observes
//! `M_m [s; u_m; n_m] + noise`, so neither modality alone carries the full
//! target signal.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, ModalityConfig, Sample, Target, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{self, ChaCha8Rng};
use crate::tape::Mat;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub n: usize,
    pub shared_dim: usize,
    pub specific_dim: usize,
    pub nuisance_dim: usize,
    pub task: TaskKind,
    pub num_classes: usize,
    pub mod1: ModalityConfig,
    pub mod2: ModalityConfig,
    pub sigma_x: f64,
    #[serde(default)]
    pub sigma_y: f64,
    /// Scale of the shared latent's target loading `A`.
    #[serde(default = "one")]
    pub shared_gain: f64,
    /// Scale of the specific latents' target loadings `B1`, `B2`.
    #[serde(default = "one")]
    pub specific_gain: f64,
    /// Amplitude of the nuisance latents in the observations.
    #[serde(default = "one")]
    pub nuisance_gain: f64,
}

impl GenSpec {
    /// Benchmark defaults: 4 shared/specific/nuisance factors, CropHarvest-like
    /// monthly series shapes.
    pub fn planted_multiclass(n: usize, k: usize, sigma_x: f64) -> Self {
        GenSpec {
            n,
            shared_dim: 4,
            specific_dim: 4,
            nuisance_dim: 4,
            task: TaskKind::Multiclass,
            num_classes: k,
            mod1: ModalityConfig::timeseries("optical", 12, 11),
            mod2: ModalityConfig::timeseries("radar", 12, 2),
            sigma_x,
            sigma_y: 0.0,
            shared_gain: 1.0,
            specific_gain: 1.0,
            nuisance_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("generator needs n >= 10, got {}", self.n)));
        }
        for (name, v) in [
            ("shared_dim", self.shared_dim),
            ("specific_dim", self.specific_dim),
            ("nuisance_dim", self.nuisance_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
            ("shared_gain", self.shared_gain),
            ("specific_gain", self.specific_gain),
            ("nuisance_gain", self.nuisance_gain),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        self.mod1.validate()?;
        self.mod2.validate()?;
        self.task_spec()?;
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        TaskSpec::new(self.task, self.num_classes)
    }

    fn latent_dim(&self) -> usize {
        self.shared_dim + self.specific_dim + self.nuisance_dim
    }

    fn provenance(&self, seed: u64) -> BTreeMap<String, serde_json::Value> {
        let mut p = BTreeMap::new();
        p.insert("generator".into(), "planted_linear_gaussian".into());
        p.insert("rng".into(), "chacha8".into());
        p.insert("seed".into(), seed.into());
        p.insert(
            "gen_spec".into(),
            serde_json::to_value(self).expect("GenSpec serializes"),
        );
        p
    }
}

/// The latent factors behind a generated dataset, one row per sample.
#[derive(Debug, Clone)]
pub struct PlantedLatents {
    pub shared: Mat,
    pub specific1: Mat,
    pub specific2: Mat,
    pub nuisance1: Mat,
    pub nuisance2: Mat,
}

fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn mat_vec(m: &Mat, parts: &[&[f64]]) -> Vec<f64> {
    let x: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    m.rows().into_iter().map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum()).collect()
}

/// Generates the dataset and returns the latents that produced it.
pub fn generate_planted(spec: &GenSpec, seed: u64) -> Result<(Dataset, PlantedLatents)> {
    spec.validate()?;
    let task = spec.task_spec()?;
    let (p, q, r) = (spec.shared_dim, spec.specific_dim, spec.nuisance_dim);
    let out = match spec.task {
        TaskKind::Regression => 1,
        _ => spec.num_classes,
    };

    let mut maps = rng::rng(rng::derive(seed, &[rng::tag("maps")]));
    let a = normal_mat(&mut maps, out, p, spec.shared_gain);
    let b1 = normal_mat(&mut maps, out, q, spec.specific_gain);
    let b2 = normal_mat(&mut maps, out, q, spec.specific_gain);
    let mix_scale = 1.0 / (spec.latent_dim() as f64).sqrt();
    let m1 = normal_mat(&mut maps, spec.mod1.size(), spec.latent_dim(), mix_scale);
    let m2 = normal_mat(&mut maps, spec.mod2.size(), spec.latent_dim(), mix_scale);

    let mut draws = rng::rng(rng::derive(seed, &[rng::tag("samples")]));
    let n = spec.n;
    let mut latents = PlantedLatents {
        shared: Mat::zeros((n, p)),
        specific1: Mat::zeros((n, q)),
        specific2: Mat::zeros((n, q)),
        nuisance1: Mat::zeros((n, r)),
        nuisance2: Mat::zeros((n, r)),
    };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = normal_vec(&mut draws, p);
        let u1 = normal_vec(&mut draws, q);
        let u2 = normal_vec(&mut draws, q);
        let n1 = normal_vec(&mut draws, r);
        let n2 = normal_vec(&mut draws, r);
        let (n1_obs, n2_obs): (Vec<f64>, Vec<f64>) = (
            n1.iter().map(|v| v * spec.nuisance_gain).collect(),
            n2.iter().map(|v| v * spec.nuisance_gain).collect(),
        );

        let observe = |m: &Mat, u: &[f64], nu: &[f64], rng: &mut ChaCha8Rng| -> Vec<f32> {
            mat_vec(m, &[&s, u, nu])
                .into_iter()
                .map(|v| (v + spec.sigma_x * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect()
        };
        let x1 = observe(&m1, &u1, &n1_obs, &mut draws);
        let x2 = observe(&m2, &u2, &n2_obs, &mut draws);
        let y_noise: f64 = draws.sample(StandardNormal);

        let logits: Vec<f64> = mat_vec(&a, &[&s])
            .into_iter()
            .zip(mat_vec(&b1, &[&u1]))
            .zip(mat_vec(&b2, &[&u2]))
            .map(|((x, y), z)| x + y + z)
            .collect();
        let target = match spec.task {
            TaskKind::Binary | TaskKind::Multiclass => Target::Class(crate::eval::argmax(&logits)),
            TaskKind::Multilabel => Target::Labels(logits.iter().map(|&v| u8::from(v > 0.0)).collect()),
            TaskKind::Regression => Target::Value((logits[0] + spec.sigma_y * y_noise) as f32),
        };

        for (dst, src) in [
            (&mut latents.shared, &s),
            (&mut latents.specific1, &u1),
            (&mut latents.specific2, &u2),
            (&mut latents.nuisance1, &n1),
            (&mut latents.nuisance2, &n2),
        ] {
            dst.row_mut(i).iter_mut().zip(src).for_each(|(d, s)| *d = *s);
        }
        samples.push(Sample {
            id: format!("s{i:06}"),
            x1,
            x2,
            target,
        });
    }

    let dataset = Dataset {
        task,
        mod1: spec.mod1.clone(),
        mod2: spec.mod2.clone(),
        samples,
        provenance: spec.provenance(seed),
    };
    dataset.validate()?;
    Ok((dataset, latents))
}

/// Deterministic synthetic dataset for `(spec, seed)`.
pub fn generate_synthetic(spec: &GenSpec, seed: u64) -> Result<Dataset> {
    generate_planted(spec, seed).map(|(d, _)| d)
}
