use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{fmt_real, Dataset, Modality, Target};
use crate::error::{Error, Result};
use crate::model::MDiCoModel;
use crate::tape::Mat;

/// Projects rows onto the top-2 principal components of the centered data.
/// Each component's sign makes its largest-magnitude loading positive.
pub fn pca_2d(x: &Mat) -> Result<Mat> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Data(format!("PCA needs at least 2 samples, got {n}")));
    }
    if d < 2 {
        return Err(Error::Data(format!("PCA to 2 components needs at least 2 features, got {d}")));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let m = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = (m.transpose() * &m) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = Mat::zeros((n, 2));
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, row) in centered.rows().into_iter().enumerate() {
            out[[i, k]] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

fn target_text(t: &Target) -> String {
    match t {
        Target::Class(c) => c.to_string(),
        Target::Labels(l) => l.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(";"),
        Target::Value(v) => fmt_real(*v as f64),
    }
}

/// Writes `embeddings_m1.csv` and `embeddings_m2.csv` (`id,target,pc1,pc2`):
/// the 2-D PCA of each modality's `[z_sha ‖ z_spe]` over `rows`.
pub fn export_embeddings(model: &MDiCoModel, dataset: &Dataset, rows: &[usize], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.len() < 2 {
        return Err(Error::Data(format!("embedding export needs at least 2 samples, got {}", rows.len())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let mut written = Vec::new();
    for m in Modality::BOTH {
        let mut x = dataset.inputs(m, rows);
        if let Some(p) = &model.preprocessor {
            p.normalize_input(m, &mut x)?;
        }
        let f = model.features(m, &x)?;
        let joined = ndarray::concatenate(ndarray::Axis(1), &[f.sha.view(), f.spe.view()]).expect("same rows");
        let pcs = pca_2d(&joined)?;
        let path = dir.join(format!("embeddings_m{m}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(["id", "target", "pc1", "pc2"]).map_err(err)?;
        for (i, &r) in rows.iter().enumerate() {
            let s = &dataset.samples[r];
            w.write_record([s.id.clone(), target_text(&s.target), fmt_real(pcs[[i, 0]]), fmt_real(pcs[[i, 1]])])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        written.push(path);
    }
    Ok(written)
}
