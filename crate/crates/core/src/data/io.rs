//! On-disk dataset directory.
//!
//! ```text
//! <dir>/manifest.json   task, modality layouts and shapes, sample count, provenance
//! <dir>/mod1.csv        header f0,f1,...; one row-major flattened sample per row
//! <dir>/mod2.csv
//! <dir>/targets.csv     header y (or y0..y{K-1} for multilabel)
//! <dir>/ids.csv         header id
//! ```
//!
//! Reals are written with 9 significant digits, which round-trips `f32`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Modality, ModalityConfig, Sample, Target, TaskKind, TaskSpec};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    task: TaskSpec,
    mod1: ModalityConfig,
    mod2: ModalityConfig,
    num_samples: usize,
    provenance: BTreeMap<String, serde_json::Value>,
}

pub(crate) fn fmt_real(v: f64) -> String {
    format!("{:.8e}", v)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn write_rows<I, R>(path: &Path, header: Vec<String>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok((header, rows))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("refusing to save a dataset with 0 samples".into()));
    }
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;

    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        task: dataset.task.clone(),
        mod1: dataset.mod1.clone(),
        mod2: dataset.mod2.clone(),
        num_samples: dataset.len(),
        provenance: dataset.provenance.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(format!("write {}", path.display()), e))?;

    for (m, file) in [(Modality::One, "mod1.csv"), (Modality::Two, "mod2.csv")] {
        let size = dataset.modality(m).size();
        write_rows(
            &dir.join(file),
            (0..size).map(|i| format!("f{i}")).collect(),
            dataset
                .samples
                .iter()
                .map(|s| s.input(m).iter().map(|&v| fmt_real(v as f64)).collect::<Vec<_>>()),
        )?;
    }

    let target_header = match dataset.task.kind {
        TaskKind::Multilabel => (0..dataset.task.num_classes).map(|k| format!("y{k}")).collect(),
        _ => vec!["y".to_string()],
    };
    write_rows(
        &dir.join("targets.csv"),
        target_header,
        dataset.samples.iter().map(|s| match &s.target {
            Target::Class(c) => vec![c.to_string()],
            Target::Labels(l) => l.iter().map(|b| b.to_string()).collect(),
            Target::Value(v) => vec![fmt_real(*v as f64)],
        }),
    )?;
    write_rows(
        &dir.join("ids.csv"),
        vec!["id".to_string()],
        dataset.samples.iter().map(|s| vec![s.id.clone()]),
    )
}

fn parse_inputs(dir: &Path, file: &str, cfg: &ModalityConfig, n: usize) -> Result<Vec<Vec<f32>>> {
    let path = dir.join(file);
    let (header, rows) = read_rows(&path)?;
    let size = cfg.size();
    if header.len() != size {
        return Err(Error::Shape(format!(
            "modality `{}` declares shape {:?} ({size} values) but {file} has {} columns",
            cfg.name,
            cfg.shape,
            header.len()
        )));
    }
    if rows.len() != n {
        return Err(Error::Shape(format!(
            "modality `{}`: manifest declares {n} samples, {file} has {} rows",
            cfg.name,
            rows.len()
        )));
    }
    rows.iter()
        .enumerate()
        .map(|(i, rec)| {
            if rec.len() != size {
                return Err(Error::Shape(format!(
                    "modality `{}`: row {i} of {file} has {} values, expected {size}",
                    cfg.name,
                    rec.len()
                )));
            }
            rec.iter()
                .map(|field| {
                    let v: f32 = field.trim().parse().map_err(|_| {
                        Error::Data(format!("modality `{}`: row {i} has non-numeric `{field}`", cfg.name))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("modality `{}` row {i}", cfg.name)));
                    }
                    Ok(v)
                })
                .collect()
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::Data(format!("missing manifest {}", mpath.display())));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(format!("read {}", mpath.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset format version {} (expected {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.task.validate()?;
    manifest.mod1.validate()?;
    manifest.mod2.validate()?;
    let n = manifest.num_samples;

    let x1 = parse_inputs(dir, "mod1.csv", &manifest.mod1, n)?;
    let x2 = parse_inputs(dir, "mod2.csv", &manifest.mod2, n)?;

    let tpath = dir.join("targets.csv");
    let (_, trows) = read_rows(&tpath)?;
    if trows.len() != n {
        return Err(Error::Shape(format!("targets.csv has {} rows, expected {n}", trows.len())));
    }
    let k = manifest.task.num_classes;
    let targets = trows
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let bad = || Error::Data(format!("targets.csv row {i}: invalid target `{}`", rec.iter().collect::<Vec<_>>().join(",")));
            match manifest.task.kind {
                TaskKind::Binary | TaskKind::Multiclass => {
                    rec.get(0).and_then(|f| f.trim().parse().ok()).map(Target::Class).ok_or_else(bad)
                }
                TaskKind::Multilabel => {
                    if rec.len() != k {
                        return Err(bad());
                    }
                    rec.iter()
                        .map(|f| f.trim().parse::<u8>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()
                        .map(Target::Labels)
                }
                TaskKind::Regression => rec
                    .get(0)
                    .and_then(|f| f.trim().parse::<f32>().ok())
                    .map(Target::Value)
                    .ok_or_else(bad),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let ipath = dir.join("ids.csv");
    let (_, irows) = read_rows(&ipath)?;
    if irows.len() != n {
        return Err(Error::Shape(format!("ids.csv has {} rows, expected {n}", irows.len())));
    }

    let samples = x1
        .into_iter()
        .zip(x2)
        .zip(targets)
        .zip(irows)
        .map(|(((x1, x2), target), id)| Sample {
            id: id.get(0).unwrap_or_default().to_string(),
            x1,
            x2,
            target,
        })
        .collect();
    let dataset = Dataset {
        task: manifest.task,
        mod1: manifest.mod1,
        mod2: manifest.mod2,
        samples,
        provenance: manifest.provenance,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GenSpec};

    fn tiny() -> Dataset {
        let mut spec = GenSpec::planted_multiclass(20, 3, 0.3);
        spec.mod1 = ModalityConfig::timeseries("optical", 12, 11);
        generate_synthetic(&spec, 4).unwrap()
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn roundtrip_other_tasks() {
        for (kind, k) in [(TaskKind::Multilabel, 3), (TaskKind::Regression, 1)] {
            let mut spec = GenSpec::planted_multiclass(15, k, 0.3);
            spec.task = kind;
            spec.num_classes = k;
            spec.sigma_y = 0.2;
            let d = generate_synthetic(&spec, 5).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_dataset(&d, dir.path()).unwrap();
            assert_eq!(load_dataset(dir.path()).unwrap(), d);
        }
    }

    #[test]
    fn shape_mismatch_names_modality() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        save_dataset(&d, dir.path()).unwrap();
        // rewrite mod1.csv with 10 columns
        let rows: Vec<String> = std::iter::once((0..10).map(|i| format!("f{i}")).collect::<Vec<_>>().join(","))
            .chain((0..20).map(|_| vec!["0.5"; 10].join(",")))
            .collect();
        fs::write(dir.path().join("mod1.csv"), rows.join("\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("optical"), "{err}");
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("manifest"), "{err}");
    }

    #[test]
    fn non_finite_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        save_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join("mod2.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut fields: Vec<&str> = lines[3].split(',').collect();
        fields[0] = "NaN";
        lines[3] = fields.join(",");
        fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn empty_dataset_refused() {
        let mut d = tiny();
        d.samples.clear();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_dataset(&d, dir.path()).is_err());
    }
}
