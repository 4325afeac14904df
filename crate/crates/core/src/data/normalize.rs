use serde::{Deserialize, Serialize};

use super::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::tape::Mat;

/// Floor applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-scoring with population statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits one statistic per column of `x`.
    pub fn fit(x: &Mat) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Data("cannot fit a normalizer on an empty slice".into()));
        }
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &mut Mat) {
        assert_eq!(x.ncols(), self.dim(), "normalizer width");
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn invert(&self, x: &mut Mat) {
        assert_eq!(x.ncols(), self.dim(), "normalizer width");
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
    }

    /// Forward transform of a scalar through the first feature.
    pub fn apply_scalar(&self, v: f64) -> f64 {
        (v - self.mean[0]) / self.std[0]
    }

    pub fn invert_scalar(&self, v: f64) -> f64 {
        v * self.std[0] + self.mean[0]
    }
}

/// Fits a normalizer on modality `m` of the given sample rows only.
pub fn fit_normalizer(dataset: &Dataset, rows: &[usize], m: Modality) -> Result<Normalizer> {
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "cannot fit normalizer for modality `{}` on an empty slice",
            dataset.modality(m).name
        )));
    }
    Normalizer::fit(&dataset.inputs(m, rows))
}

/// Z-scores regression targets; the returned normalizer inverts predictions.
pub fn normalize_target(targets: &[f64]) -> Result<(Vec<f64>, Normalizer)> {
    if targets.len() < 2 {
        return Err(Error::Data("target normalization needs at least 2 values".into()));
    }
    let first = targets[0];
    if targets.iter().all(|&v| v == first) {
        return Err(Error::Data("constant target vector has undefined scaling".into()));
    }
    let col = Mat::from_shape_vec((targets.len(), 1), targets.to_vec())
        .expect("column shape");
    let norm = Normalizer::fit(&col)?;
    let out = targets.iter().map(|&v| norm.apply_scalar(v)).collect();
    Ok((out, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn constant_column_hits_floor() {
        let x = array![[3.0, -1.0], [3.0, 1.0]];
        let n = Normalizer::fit(&x).unwrap();
        assert_eq!(n.mean, vec![3.0, 0.0]);
        assert_eq!(n.std[0], STD_FLOOR);
        assert_abs_diff_eq!(n.std[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_slice_errors() {
        assert!(Normalizer::fit(&Mat::zeros((0, 3))).is_err());
    }

    #[test]
    fn target_zscore_hand_values() {
        let (z, n) = normalize_target(&[10.0, 20.0, 30.0]).unwrap();
        assert_abs_diff_eq!(n.mean[0], 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.std[0], (200.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(n.std[0], 8.165, epsilon = 1e-3);
        assert_abs_diff_eq!(z[0], -1.2247, epsilon = 1e-4);
        assert_abs_diff_eq!(z[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[2], 1.2247, epsilon = 1e-4);
    }

    #[test]
    fn standardized_targets_are_fixed_points() {
        let y = [-1.224744871391589, 0.0, 1.224744871391589];
        let (z, _) = normalize_target(&y).unwrap();
        for (a, b) in z.iter().zip(y) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn constant_targets_error() {
        assert!(normalize_target(&[5.0, 5.0, 5.0]).is_err());
    }

    proptest! {
        #[test]
        fn zscore_moments_and_roundtrip(
            data in proptest::collection::vec(-1e3f64..1e3, 6..60),
            cols in 1usize..4,
        ) {
            let rows = data.len() / cols;
            prop_assume!(rows >= 2);
            let x = Mat::from_shape_vec((rows, cols), data[..rows * cols].to_vec()).unwrap();
            let n = Normalizer::fit(&x).unwrap();
            let mut z = x.clone();
            n.apply(&mut z);
            for (j, col) in z.columns().into_iter().enumerate() {
                if n.std[j] > 1e-6 {
                    let mu = col.sum() / rows as f64;
                    let sd = (col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / rows as f64).sqrt();
                    prop_assert!(mu.abs() < 1e-6);
                    prop_assert!((sd - 1.0).abs() < 1e-6);
                }
            }
            let mut back = z;
            n.invert(&mut back);
            for (a, b) in back.iter().zip(x.iter()) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn target_roundtrip(data in proptest::collection::vec(-1e4f64..1e4, 2..50)) {
            prop_assume!(data.iter().any(|&v| v != data[0]));
            let (z, n) = normalize_target(&data).unwrap();
            for (zi, yi) in z.iter().zip(&data) {
                let back = n.invert_scalar(*zi);
                prop_assert!((back - yi).abs() <= 1e-6 * (1.0 + yi.abs()));
            }
        }
    }
}
