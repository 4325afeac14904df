//! The four training objectives and their combinations.
//!
//! Each loss exists as a graph builder (used by the model so gradients flow)
//! and as a value-level function for direct evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{Targets, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::tape::{Graph, Mat, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Main,
    Aux,
    Contrastive,
    Modality,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Main, LossTerm::Aux, LossTerm::Contrastive, LossTerm::Modality];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Main => "main",
            LossTerm::Aux => "aux",
            LossTerm::Contrastive => "contrastive",
            LossTerm::Modality => "modality",
        }
    }
}

/// Per-term loss values of one batch (or an epoch average).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub main: f64,
    pub aux: f64,
    pub contrastive: f64,
    pub modality: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kendall_log_vars: Option<[f64; 4]>,
}

impl LossBundle {
    pub fn term(&self, t: LossTerm) -> f64 {
        match t {
            LossTerm::Main => self.main,
            LossTerm::Aux => self.aux,
            LossTerm::Contrastive => self.contrastive,
            LossTerm::Modality => self.modality,
        }
    }

    pub fn terms(&self) -> [f64; 4] {
        [self.main, self.aux, self.contrastive, self.modality]
    }

    /// First non-finite entry, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        for t in LossTerm::ALL {
            if !self.term(t).is_finite() {
                return Some(t.name());
            }
        }
        (!self.total.is_finite()).then_some("total")
    }

    /// Weighted running mean helper: `self * wa + other * wb` over `wa + wb`.
    pub fn blend(&self, wa: f64, other: &LossBundle, wb: f64) -> LossBundle {
        let mix = |a: f64, b: f64| (a * wa + b * wb) / (wa + wb);
        LossBundle {
            main: mix(self.main, other.main),
            aux: mix(self.aux, other.aux),
            contrastive: mix(self.contrastive, other.contrastive),
            modality: mix(self.modality, other.modality),
            total: mix(self.total, other.total),
            kendall_log_vars: other.kendall_log_vars,
        }
    }
}

/// Unweighted sum of the four terms; errors name the first non-finite term.
pub fn total_loss(main: f64, aux: f64, contrastive: f64, modality: f64) -> Result<LossBundle> {
    let bundle = LossBundle {
        main,
        aux,
        contrastive,
        modality,
        total: main + aux + contrastive + modality,
        kendall_log_vars: None,
    };
    match bundle.non_finite_term() {
        Some(term) => Err(Error::NonFinite(format!("{term} loss"))),
        None => Ok(bundle),
    }
}

/// Uncertainty-weighted total `Σ exp(-σ_t) L_t + σ_t / 2`.
pub fn kendall_total(terms: [f64; 4], log_vars: [f64; 4]) -> f64 {
    terms
        .iter()
        .zip(log_vars)
        .map(|(l, s)| (-s).exp() * l + 0.5 * s)
        .sum()
}

/// Graph form of one Kendall-weighted term.
pub fn kendall_term_node(g: &mut Graph, loss: Var, log_var: Var) -> Var {
    let neg = g.scale(log_var, -1.0);
    let precision = g.exp(neg);
    let weighted = g.mul(precision, loss);
    let half = g.scale(log_var, 0.5);
    g.add(weighted, half)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_NORM_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_NORM_FLOOR);
    dot / (na * nb)
}

/// Mean over anchors of `-log softmax_j(S(a_i, c_j) / τ)[i]`, positive included
/// in the denominator.
pub fn info_nce_node(g: &mut Graph, anchors: Var, candidates: Var, temperature: f64) -> Result<Var> {
    let (ba, da) = g.shape(anchors);
    let (bc, dc) = g.shape(candidates);
    if ba == 0 {
        return Err(Error::Shape("InfoNCE needs a batch of at least one pair".into()));
    }
    if ba != bc || da != dc {
        return Err(Error::Shape(format!(
            "InfoNCE anchors {ba}x{da} vs candidates {bc}x{dc}"
        )));
    }
    let a = g.normalize_rows(anchors, COSINE_NORM_FLOOR);
    let c = g.normalize_rows(candidates, COSINE_NORM_FLOOR);
    let sim = g.matmul_t(a, c);
    let logits = g.scale(sim, 1.0 / temperature);
    let log_p = g.log_softmax(logits);
    let diag = g.pick(log_p, (0..ba).collect());
    let mean = g.mean(diag);
    Ok(g.scale(mean, -1.0))
}

/// `InfoNCE(z1, z2) + InfoNCE(z2, z1)`.
pub fn contrastive_node(g: &mut Graph, z1: Var, z2: Var, temperature: f64) -> Result<Var> {
    let a = info_nce_node(g, z1, z2, temperature)?;
    let b = info_nce_node(g, z2, z1, temperature)?;
    Ok(g.add(a, b))
}

/// Task loss of raw head outputs: class-weighted softmax cross-entropy,
/// class-weighted sigmoid BCE, or squared error on (z-scored) targets.
pub fn predictive_node(g: &mut Graph, logits: Var, targets: &Targets, task: &TaskSpec) -> Result<Var> {
    let (rows, cols) = g.shape(logits);
    if g.value(logits).iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("prediction logits".into()));
    }
    if rows != targets.len() {
        return Err(Error::Shape(format!("{rows} predictions for {} targets", targets.len())));
    }
    if rows == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if cols != task.output_dim() {
        return Err(Error::Shape(format!(
            "{cols} logits per sample for a {}-output {} task",
            task.output_dim(),
            task.kind.name()
        )));
    }
    match (task.kind, targets) {
        (TaskKind::Binary | TaskKind::Multiclass, Targets::Classes(labels)) => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
                return Err(Error::Data(format!("label {bad} out of range for {cols} classes")));
            }
            let w = task.weights_or_unit();
            let row_w: Vec<f64> = labels.iter().map(|&l| w[l]).collect();
            let norm: f64 = row_w.iter().sum();
            let log_p = g.log_softmax(logits);
            let picked = g.pick(log_p, labels.clone());
            let weighted = g.mul_const(picked, Mat::from_shape_vec((rows, 1), row_w).expect("column"));
            let s = g.sum(weighted);
            Ok(g.scale(s, -1.0 / norm))
        }
        (TaskKind::Multilabel, Targets::Multi(y)) => {
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data("multilabel targets must be 0 or 1".into()));
            }
            let w = task.weights_or_unit();
            let wmat = Mat::from_shape_fn((rows, cols), |(_, j)| w[j]);
            // BCE with logits: softplus(x) - y x
            let sp = g.softplus(logits);
            let yx = g.mul_const(logits, y.clone());
            let bce = g.sub(sp, yx);
            let weighted = g.mul_const(bce, wmat);
            Ok(g.mean(weighted))
        }
        (TaskKind::Regression, Targets::Values(y)) => {
            let target = g.input(Mat::from_shape_vec((rows, 1), y.clone()).expect("column"));
            let diff = g.sub(logits, target);
            let sq = g.mul(diff, diff);
            Ok(g.mean(sq))
        }
        _ => Err(Error::Data(format!(
            "targets do not match the {} task",
            task.kind.name()
        ))),
    }
}

/// Unweighted cross-entropy of modality-classifier logits against modality id `label`.
pub fn modality_ce_node(g: &mut Graph, logits: Var, label: usize) -> Var {
    let rows = g.shape(logits).0;
    let log_p = g.log_softmax(logits);
    let picked = g.pick(log_p, vec![label; rows]);
    let mean = g.mean(picked);
    g.scale(mean, -1.0)
}

/// Linear head weights `(in, out)` and bias `(1, out)`, for value-level loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: Mat,
    pub b: Mat,
}

impl LinearHead {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.w.nrows() {
            return Err(Error::Shape(format!(
                "head expects {} inputs, got {}",
                self.w.nrows(),
                g.shape(x).1
            )));
        }
        let w = g.input(self.w.clone());
        let b = g.input(self.b.clone());
        let xw = g.matmul(x, w);
        Ok(g.add_row(xw, b))
    }
}

pub fn info_nce(anchors: &Mat, candidates: &Mat, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.input(anchors.clone());
    let c = g.input(candidates.clone());
    let l = info_nce_node(&mut g, a, c, temperature)?;
    Ok(g.scalar(l))
}

pub fn contrastive_loss(z1: &Mat, z2: &Mat, temperature: f64) -> Result<f64> {
    if z1.nrows() != z2.nrows() {
        return Err(Error::Shape(format!(
            "contrastive batches have {} and {} rows",
            z1.nrows(),
            z2.nrows()
        )));
    }
    Ok(info_nce(z1, z2, temperature)? + info_nce(z2, z1, temperature)?)
}

pub fn predictive_loss(targets: &Targets, logits: &Mat, task: &TaskSpec) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let l = predictive_node(&mut g, x, targets, task)?;
    Ok(g.scalar(l))
}

/// `½ (L_pred(y, ŷ₁) + L_pred(y, ŷ₂))`.
pub fn main_loss(pred1: &Mat, pred2: &Mat, targets: &Targets, task: &TaskSpec) -> Result<f64> {
    Ok(0.5 * (predictive_loss(targets, pred1, task)? + predictive_loss(targets, pred2, task)?))
}

/// Shared and specific features of both modalities.
#[derive(Debug, Clone, Copy)]
pub struct AuxFeatures<'a> {
    pub sha1: Option<&'a Mat>,
    pub spe1: Option<&'a Mat>,
    pub sha2: Option<&'a Mat>,
    pub spe2: Option<&'a Mat>,
}

/// `½ Σ_m Σ_{s ∈ {sha, spe}} L_pred(y, P_aux(z_m^s))`.
pub fn aux_loss(head: &LinearHead, features: AuxFeatures<'_>, targets: &Targets, task: &TaskSpec) -> Result<f64> {
    let named = [
        ("shared features of modality 1", features.sha1),
        ("specific features of modality 1", features.spe1),
        ("shared features of modality 2", features.sha2),
        ("specific features of modality 2", features.spe2),
    ];
    let mut g = Graph::new();
    let mut sum = 0.0;
    for (name, z) in named {
        let z = z.ok_or_else(|| Error::Data(format!("aux loss is missing the {name}")))?;
        let zv = g.input(z.clone());
        let logits = head.apply(&mut g, zv)?;
        let l = predictive_node(&mut g, logits, targets, task)?;
        sum += g.scalar(l);
    }
    Ok(0.5 * sum)
}

/// `½ Σ_m Σ_{s ∈ {spe, unu}} CE(m, P^s(z_m^s))` with modality ids 0 and 1.
/// Absent unused features (no-unused variant) drop their two terms.
pub fn modality_loss(
    cls_spe: &LinearHead,
    cls_unu: Option<&LinearHead>,
    spe: [&Mat; 2],
    unu: [Option<&Mat>; 2],
) -> Result<f64> {
    let mut g = Graph::new();
    let mut sum = 0.0;
    for (m, z) in spe.iter().enumerate() {
        let zv = g.input((*z).clone());
        let logits = cls_spe.apply(&mut g, zv)?;
        check_two_logits(&g, logits)?;
        let l = modality_ce_node(&mut g, logits, m);
        sum += g.scalar(l);
    }
    for (m, z) in unu.iter().enumerate() {
        match (z, cls_unu) {
            (Some(z), Some(head)) => {
                let zv = g.input((*z).clone());
                let logits = head.apply(&mut g, zv)?;
                check_two_logits(&g, logits)?;
                let l = modality_ce_node(&mut g, logits, m);
                sum += g.scalar(l);
            }
            (None, _) => {}
            (Some(_), None) => return Err(Error::Data("unused features given without a classifier".into())),
        }
    }
    Ok(0.5 * sum)
}

fn check_two_logits(g: &Graph, logits: Var) -> Result<()> {
    match g.shape(logits).1 {
        2 => Ok(()),
        n => Err(Error::Shape(format!("modality classifier must output 2 logits, got {n}"))),
    }
}
