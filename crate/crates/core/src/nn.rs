//! Layer helpers on top of the tape: one forward pass over a parameter bundle.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamBundle;
use crate::rng::{self, ChaCha8Rng};
use crate::tape::{BatchStats, Graph, Mat, Var};

/// Forward-pass mode. Training mode enables dropout (masks drawn from the
/// given seed) and batch statistics in batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

pub struct Forward<'a> {
    pub graph: Graph,
    params: &'a ParamBundle,
    buffers: &'a ParamBundle,
    mode: Mode,
    dropout_rng: Option<ChaCha8Rng>,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamBundle, buffers: &'a ParamBundle, mode: Mode) -> Self {
        let dropout_rng = match mode {
            Mode::Train { seed } => Some(rng::rng(rng::derive(seed, &[rng::tag("dropout")]))),
            Mode::Eval => None,
        };
        Forward {
            graph: Graph::new(),
            params,
            buffers,
            mode,
            dropout_rng,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamBundle {
        self.params
    }

    pub fn input(&mut self, x: Mat) -> Var {
        self.graph.input(x)
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        let value = self.params.require(path)?;
        Ok(self.graph.param(path, value))
    }

    /// `x · W + b` with `{prefix}.w` of shape `(in, out)` and `{prefix}.b` of shape `(1, out)`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let (_, cols) = self.graph.shape(x);
        let (rows, _) = self.graph.shape(w);
        if cols != rows {
            return Err(Error::Shape(format!(
                "layer `{prefix}` expects {rows} input columns, got {cols}"
            )));
        }
        let xw = self.graph.matmul(x, w);
        Ok(self.graph.add_row(xw, b))
    }

    /// `x · W` without bias, for layers followed by batch norm.
    pub fn linear_no_bias(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let (_, cols) = self.graph.shape(x);
        let (rows, _) = self.graph.shape(w);
        if cols != rows {
            return Err(Error::Shape(format!(
                "layer `{prefix}` expects {rows} input columns, got {cols}"
            )));
        }
        Ok(self.graph.matmul(x, w))
    }

    /// Batch norm over rows. Training mode normalizes with batch statistics and
    /// records them for the running-average update.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        if self.mode.is_train() {
            let (y, stats) = self.graph.batch_norm_train(x, gamma, beta);
            self.bn_updates.push((prefix.to_string(), stats));
            Ok(y)
        } else {
            let mean = self.buffer(&format!("{prefix}.running_mean"))?;
            let var = self.buffer(&format!("{prefix}.running_var"))?;
            Ok(self.graph.batch_norm_eval(x, gamma, beta, &mean, &var))
        }
    }

    fn buffer(&self, path: &str) -> Result<Vec<f64>> {
        self.buffers
            .get(path)
            .map(|m| m.iter().copied().collect())
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{path}`")))
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        Ok(self.graph.layer_norm(x, gain, bias))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let dim = self.graph.shape(x);
        let mask = Array2::from_shape_fn(dim, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.graph.mul_const(x, mask)
    }

    /// Batch statistics gathered in training mode, keyed by batch-norm prefix.
    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Folds batch statistics into running buffers with [`BN_MOMENTUM`].
pub fn apply_bn_updates(buffers: &mut ParamBundle, updates: &[(String, BatchStats)]) {
    for (prefix, stats) in updates {
        for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            if let Some(buf) = buffers.get_mut(&format!("{prefix}.{suffix}")) {
                for (b, v) in buf.iter_mut().zip(values) {
                    *b = (1.0 - BN_MOMENTUM) * *b + BN_MOMENTUM * v;
                }
            }
        }
    }
}

/// Adds `{prefix}.gamma`/`.beta` parameters and running-stat buffers.
pub fn init_batch_norm(params: &mut ParamBundle, buffers: &mut ParamBundle, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.gamma"), Array2::ones((1, width)));
    params.insert(format!("{prefix}.beta"), Array2::zeros((1, width)));
    buffers.insert(format!("{prefix}.running_mean"), Array2::zeros((1, width)));
    buffers.insert(format!("{prefix}.running_var"), Array2::ones((1, width)));
}

pub fn init_layer_norm(params: &mut ParamBundle, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.gain"), Array2::ones((1, width)));
    params.insert(format!("{prefix}.bias"), Array2::zeros((1, width)));
}
