//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass on a tape. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradients of all leaf nodes (inputs and parameters). Every value is a
//! 2-D matrix; sequences are stored as `(batch * steps, channels)` with the
//! rows of one sample contiguous, scalars as `(1, 1)`.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Marks a zero entry in a [`Graph::gather`] index map.
pub const PAD: usize = usize::MAX;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        clamped: Vec<bool>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Gather(Var, Vec<usize>),
    MeanGroups(Var, usize),
    AddTiled(Var, Var),
    ConcatCols(Vec<Var>),
    Cols(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        steps: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Batch statistics produced by a training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of one backward pass, indexed by leaf node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

fn scalar(x: f64) -> Mat {
    Array2::from_elem((1, 1), x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn row_softmax_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push(scalar(x), Op::Input)
    }

    /// Registers a named parameter. Repeated calls with the same name return
    /// the same node so shared weights accumulate one gradient.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `(1, cols)` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a `(1, cols)` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) * self.value(row);
        self.push(value, Op::MulRow(x, row))
    }

    /// Multiplies `x` by a `(1, 1)` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let value = self.value(x) * self.scalar(s);
        self.push(value, Op::MulScalar(x, s))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c))
    }

    pub fn mul_const(&mut self, x: Var, c: Mat) -> Var {
        let value = self.value(x) * &c;
        self.push(value, Op::MulConst(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus);
        self.push(value, Op::Softplus(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let value = scalar(m.sum() / m.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(value, Op::LogSoftmax(x))
    }

    /// Selects column `index[i]` of row `i`, giving a `(rows, 1)` column.
    pub fn pick(&mut self, x: Var, index: Vec<usize>) -> Var {
        let m = self.value(x);
        assert_eq!(m.nrows(), index.len(), "pick: one index per row");
        let value = Array2::from_shape_fn((index.len(), 1), |(i, _)| m[[i, index[i]]]);
        self.push(value, Op::Pick(x, index))
    }

    /// Scales every row to unit L2 norm; norms below `floor` are clamped to it.
    pub fn normalize_rows(&mut self, x: Var, floor: f64) -> Var {
        let m = self.value(x);
        let mut value = m.clone();
        let mut norms = Vec::with_capacity(m.nrows());
        let mut clamped = Vec::with_capacity(m.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            let (n, c) = if n > floor { (n, false) } else { (floor, true) };
            row.mapv_inplace(|v| v / n);
            norms.push(n);
            clamped.push(c);
        }
        self.push(value, Op::NormalizeRows { x, norms, clamped })
    }

    /// Batch normalization over rows using the batch's own (biased) statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let m = self.value(x);
        let n = m.nrows() as f64;
        let mean = m.sum_axis(Axis(0)) / n;
        let centered = m - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
        };
        self.batch_norm_apply(x, gamma, beta, centered, inv_std, true, stats)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let m = self.value(x);
        let mean_row = ndarray::Array1::from(mean.to_vec());
        let centered = m - &mean_row;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
        };
        self.batch_norm_apply(x, gamma, beta, centered, inv_std, false, stats)
            .0
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mut xhat: Mat,
        inv_std: Vec<f64>,
        batch_stats: bool,
        stats: BatchStats,
    ) -> (Var, BatchStats) {
        for mut row in xhat.rows_mut() {
            Zip::from(&mut row).and(&inv_std).for_each(|v, &s| *v *= s);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        (v, stats)
    }

    /// Layer normalization over the columns of each row.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let m = self.value(x);
        let cols = m.ncols() as f64;
        let mut xhat = m.clone();
        let mut inv_std = Vec::with_capacity(m.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / cols;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(x);
        assert_eq!(m.len(), rows * cols, "reshape: element count");
        let value = Array2::from_shape_vec((rows, cols), m.iter().copied().collect())
            .expect("reshape: element count checked");
        self.push(value, Op::Reshape(x))
    }

    /// Builds a `(rows, cols)` matrix whose flat entry `j` is flat entry
    /// `index[j]` of `x` (row-major), or zero where `index[j] == PAD`.
    pub fn gather(&mut self, x: Var, rows: usize, cols: usize, index: Vec<usize>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather: index length");
        let src = self.value(x);
        let flat = src.as_slice().expect("tape values are contiguous");
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { flat[i] })
            .collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("gather shape");
        self.push(value, Op::Gather(x, index))
    }

    /// Selects whole rows of `x` in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let cols = self.value(x).ncols();
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(x, rows.len(), cols, index)
    }

    /// Averages consecutive groups of `group` rows.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Var {
        let m = self.value(x);
        assert!(group > 0 && m.nrows() % group == 0, "mean_groups: row count");
        let n = m.nrows() / group;
        let mut value = Array2::zeros((n, m.ncols()));
        for (i, mut out) in value.rows_mut().into_iter().enumerate() {
            let block = m.slice(s![i * group..(i + 1) * group, ..]);
            out.assign(&(block.sum_axis(Axis(0)) / group as f64));
        }
        self.push(value, Op::MeanGroups(x, group))
    }

    /// Adds a `(steps, cols)` table to each consecutive block of `steps` rows.
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Var {
        let t = self.value(table);
        let steps = t.nrows();
        let mut value = self.value(x).clone();
        assert!(value.nrows() % steps == 0, "add_tiled: row count");
        for (r, mut row) in value.rows_mut().into_iter().enumerate() {
            row += &t.row(r % steps);
        }
        self.push(value, Op::AddTiled(x, table))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(value, Op::Cols(x, start))
    }

    /// Multi-head scaled dot-product self-attention core. `q`, `k`, `v` are
    /// `(batch * steps, width)`; heads split the width evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, steps: usize, heads: usize) -> Var {
        let (rows, width) = self.shape(q);
        assert!(width % heads == 0 && rows % steps == 0, "attention: shapes");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / steps;
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((rows, width));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rs = s![b * steps..(b + 1) * steps, ..];
            for h in 0..heads {
                let cs = s![.., h * dh..(h + 1) * dh];
                let qb = qm.slice(rs).slice_move(cs);
                let kb = km.slice(rs).slice_move(cs);
                let vb = vm.slice(rs).slice_move(cs);
                let mut p = qb.dot(&kb.t()) * scale;
                row_softmax_inplace(&mut p);
                out.slice_mut(s![b * steps..(b + 1) * steps, h * dh..(h + 1) * dh])
                    .assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                steps,
                heads,
                probs,
            },
        )
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Input | Op::Param => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = gy.dot(self.value(*b));
                    let gb = gy.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, -gy);
                }
                Op::Mul(a, b) => {
                    let ga = &gy * self.value(*b);
                    let gb = &gy * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let gr = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, gy);
                    acc(&mut grads, *row, gr);
                }
                Op::MulRow(x, row) => {
                    let gr = (&gy * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gx = &gy * self.value(*row);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *row, gr);
                }
                Op::MulScalar(x, sv) => {
                    let gs = scalar((&gy * self.value(*x)).sum());
                    let gx = &gy * self.scalar(*sv);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *sv, gs);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, gy * *c),
                Op::MulConst(x, c) => acc(&mut grads, *x, gy * c),
                Op::Relu(x) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(y).for_each(|g, &y| {
                        if y <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(y).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(y).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *x, g);
                }
                Op::Exp(x) => acc(&mut grads, *x, gy * y),
                Op::Softplus(x) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(self.value(*x))
                        .for_each(|g, &x| *g *= sigmoid(x));
                    acc(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let g = Array2::from_elem(self.value(*x).dim(), gy[[0, 0]]);
                    acc(&mut grads, *x, g);
                }
                Op::Mean(x) => {
                    let dim = self.value(*x).dim();
                    let g = Array2::from_elem(dim, gy[[0, 0]] / (dim.0 * dim.1) as f64);
                    acc(&mut grads, *x, g);
                }
                Op::LogSoftmax(x) => {
                    let mut g = gy;
                    for (mut gr, yr) in g.rows_mut().into_iter().zip(y.rows()) {
                        let total = gr.sum();
                        Zip::from(&mut gr).and(&yr).for_each(|g, &l| *g -= l.exp() * total);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Pick(x, index) => {
                    let mut g = Array2::zeros(self.value(*x).dim());
                    for (i, &j) in index.iter().enumerate() {
                        g[[i, j]] = gy[[i, 0]];
                    }
                    acc(&mut grads, *x, g);
                }
                Op::NormalizeRows { x, norms, clamped } => {
                    let mut g = gy;
                    for (i, mut gr) in g.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        if !clamped[i] {
                            let d = gr.dot(&yr);
                            Zip::from(&mut gr).and(&yr).for_each(|g, &y| *g -= y * d);
                        }
                        gr.mapv_inplace(|v| v / norms[i]);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gbeta = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gamma_v = self.value(*gamma);
                    let dxhat = &gy * gamma_v;
                    let gx = if *batch_stats {
                        let n = dxhat.nrows() as f64;
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                        let mut gx = dxhat * n - &sum_d - &(xhat * &sum_dx);
                        for mut row in gx.rows_mut() {
                            Zip::from(&mut row).and(inv_std).for_each(|g, &s| *g *= s / n);
                        }
                        gx
                    } else {
                        let mut gx = dxhat;
                        for mut row in gx.rows_mut() {
                            Zip::from(&mut row).and(inv_std).for_each(|g, &s| *g *= s);
                        }
                        gx
                    };
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gbias = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggain = (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dxhat = &gy * self.value(*gain);
                    let n = dxhat.ncols() as f64;
                    for (i, mut row) in dxhat.rows_mut().into_iter().enumerate() {
                        let xr = xhat.row(i);
                        let sum_d = row.sum();
                        let sum_dx = row.dot(&xr);
                        let is = inv_std[i];
                        Zip::from(&mut row)
                            .and(&xr)
                            .for_each(|d, &xh| *d = is / n * (n * *d - sum_d - xh * sum_dx));
                    }
                    acc(&mut grads, *x, dxhat);
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                }
                Op::Reshape(x) => {
                    let dim = self.value(*x).dim();
                    let g = Array2::from_shape_vec(dim, gy.iter().copied().collect())
                        .expect("reshape backward");
                    acc(&mut grads, *x, g);
                }
                Op::Gather(x, index) => {
                    let dim = self.value(*x).dim();
                    let mut flat = vec![0.0; dim.0 * dim.1];
                    for (&i, &g) in index.iter().zip(gy.iter()) {
                        if i != PAD {
                            flat[i] += g;
                        }
                    }
                    let g = Array2::from_shape_vec(dim, flat).expect("gather backward");
                    acc(&mut grads, *x, g);
                }
                Op::MeanGroups(x, group) => {
                    let dim = self.value(*x).dim();
                    let inv = 1.0 / *group as f64;
                    let g = Array2::from_shape_fn(dim, |(r, c)| gy[[r / group, c]] * inv);
                    acc(&mut grads, *x, g);
                }
                Op::AddTiled(x, table) => {
                    let steps = self.value(*table).nrows();
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, row) in gy.rows().into_iter().enumerate() {
                        let mut t = gt.row_mut(r % steps);
                        t += &row;
                    }
                    acc(&mut grads, *x, gy);
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, gy.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Cols(x, start) => {
                    let mut g = Array2::zeros(self.value(*x).dim());
                    g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                    acc(&mut grads, *x, g);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    steps,
                    heads,
                    probs,
                } => {
                    let (rows, width) = self.shape(*q);
                    let dh = width / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut gq = Array2::zeros((rows, width));
                    let mut gk = Array2::zeros((rows, width));
                    let mut gv = Array2::zeros((rows, width));
                    for b in 0..rows / steps {
                        let rs = s![b * steps..(b + 1) * steps, ..];
                        for h in 0..*heads {
                            let cs = s![.., h * dh..(h + 1) * dh];
                            let block = s![b * steps..(b + 1) * steps, h * dh..(h + 1) * dh];
                            let p = &probs[b * heads + h];
                            let go = gy.slice(block);
                            let qb = qm.slice(rs).slice_move(cs);
                            let kb = km.slice(rs).slice_move(cs);
                            let vb = vm.slice(rs).slice_move(cs);
                            gv.slice_mut(block).assign(&p.t().dot(&go));
                            let dp = go.dot(&vb.t());
                            let mut ds = &dp * p;
                            for (mut r, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let total = r.sum();
                                Zip::from(&mut r).and(&pr).for_each(|d, &pv| *d -= pv * total);
                            }
                            ds *= scale;
                            gq.slice_mut(block).assign(&ds.dot(&kb));
                            gk.slice_mut(block).assign(&ds.t().dot(&qb));
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
            }
        }
        Grads { grads }
    }

    /// Gradients of every registered parameter; parameters the loss does not
    /// reach get zeros.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(self.value(v).dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Index map for a same-padded 1-D convolution unfold: `(batch * steps, channels)`
/// to `(batch * steps, kernel * channels)` with column `k * channels + c`.
pub fn im2col_1d_index(batch: usize, steps: usize, channels: usize, kernel: usize) -> Vec<usize> {
    let pad = (kernel - 1) / 2;
    let mut index = Vec::with_capacity(batch * steps * kernel * channels);
    for b in 0..batch {
        for t in 0..steps {
            for k in 0..kernel {
                let src = t as isize + k as isize - pad as isize;
                for c in 0..channels {
                    if src < 0 || src >= steps as isize {
                        index.push(PAD);
                    } else {
                        index.push((b * steps + src as usize) * channels + c);
                    }
                }
            }
        }
    }
    index
}

/// Output size of a padded strided convolution along one axis.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Index map for a 2-D convolution unfold of channels-last images
/// `(batch * h * w, channels)` to `(batch * ho * wo, kernel² * channels)`.
pub fn im2col_2d_index(
    batch: usize,
    (h, w): (usize, usize),
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<usize> {
    let ho = conv_out(h, kernel, stride, pad);
    let wo = conv_out(w, kernel, stride, pad);
    let mut index = Vec::with_capacity(batch * ho * wo * kernel * kernel * channels);
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                        for c in 0..channels {
                            if inside {
                                index.push(((b * h + iy as usize) * w + ix as usize) * channels + c);
                            } else {
                                index.push(PAD);
                            }
                        }
                    }
                }
            }
        }
    }
    index
}
