use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn mdico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdico")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn config_text(out: &Path, classes: usize, extra_top: &str) -> String {
    format!(
        r#"version = 1
output_dir = "{out}"
variants = ["full", "individual"]
{extra_top}

[data]
seed = 3

[data.generator]
n = 200
shared_dim = 3
specific_dim = 3
nuisance_dim = 3
task = "multiclass"
num_classes = {classes}
sigma_x = 0.5
mod1 = {{ name = "optical", layout = "timeseries", shape = [6, 3] }}
mod2 = {{ name = "radar", layout = "timeseries", shape = [6, 2] }}

[encoder1]
backbone = "mlp"
hidden_units = 16
projection_dim = 8

[encoder2]
backbone = "mlp"
hidden_units = 16
projection_dim = 8

[train]
max_epochs = 3
batch_size = 32

[eval]
folds = 2
runs = 1
seed = 5
"#,
        out = out.display()
    )
}

fn write_config(dir: &Path, name: &str, classes: usize, extra_top: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, config_text(&dir.join("out"), classes, extra_top)).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible_and_snapshotted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", 3, "");
    let out = mdico(&["gen-data", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("200 samples"));
    let dir = tmp.path().join("out/dataset");
    assert!(dir.join("manifest.json").exists());
    assert!(dir.join("config.toml").exists());
    let first = fs::read(dir.join("mod1.csv")).unwrap();
    assert_eq!(code(&mdico(&["gen-data", "--config", s(&cfg)])), 0);
    assert_eq!(fs::read(dir.join("mod1.csv")).unwrap(), first);

    // the written dataset feeds a path-based config
    let text = config_text(&tmp.path().join("out2"), 3, "").replace(
        "[data]\nseed = 3\n",
        &format!("[data]\npath = \"{}\"\n", dir.display()),
    );
    let start = text.find("[data.generator]").unwrap();
    let end = text.find("[encoder1]").unwrap();
    let by_path = tmp.path().join("p.toml");
    fs::write(&by_path, format!("{}{}", &text[..start], &text[end..])).unwrap();
    let out = mdico(&["train", "--config", s(&by_path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.toml");
    fs::write(&missing, config_text(&tmp.path().join("o"), 3, "").replace("version = 1\n", "")).unwrap();
    let out = mdico(&["gen-data", "--config", s(&missing)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("version"), "{}", stderr(&out));

    let unknown = write_config(tmp.path(), "u.toml", 3, "colour = \"red\"");
    let out = mdico(&["train", "--config", s(&unknown)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("colour"), "{}", stderr(&out));

    let bad_variant = write_config(tmp.path(), "v.toml", 3, "");
    let text = fs::read_to_string(&bad_variant).unwrap().replace("\"individual\"", "\"mystery\"");
    fs::write(&bad_variant, text).unwrap();
    assert_eq!(code(&mdico(&["ablate", "--config", s(&bad_variant)])), 2);

    assert_eq!(code(&mdico(&["train", "--config", s(&tmp.path().join("nope.toml"))])), 2);
    assert_eq!(code(&mdico(&["no-such-command"])), 2);
}

#[test]
fn train_eval_roundtrip_matches_cross_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", 3, "");
    let start = Instant::now();
    let out = mdico(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(start.elapsed().as_secs() < 60);
    let train = tmp.path().join("out/train");
    assert!(train.join("full.ckpt").exists());
    assert!(train.join("config.toml").exists());
    let history: serde_json::Value = serde_json::from_str(&fs::read_to_string(train.join("history.json")).unwrap()).unwrap();
    let epochs = history["models"][0]["history"]["epochs"].as_array().unwrap().len();
    let trace = fs::read_to_string(train.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), epochs + 1);

    let out = mdico(&["train", "--config", s(&cfg), "--variant", "individual"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(train.join("individual_m1.ckpt").exists() && train.join("individual_m2.ckpt").exists());

    let out = mdico(&["eval", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(tmp.path().join("out/eval/metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{metrics}");
    assert!(!metrics.contains("_shared"));
    for v in ["full,1,", "full,2,", "individual,1,", "individual,2,"] {
        assert!(rows.iter().any(|r| r.starts_with(v)), "{v} missing in {metrics}");
    }

    let ckpt = train.join("full.ckpt");
    let out = mdico(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--space-metrics"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let spaced = fs::read_to_string(tmp.path().join("out/eval/metrics.csv")).unwrap();
    assert_eq!(spaced.lines().count(), 1 + 6);
    assert!(spaced.contains("f1_macro_shared") && spaced.contains("f1_macro_specific"));

    // cross-validation of the same config reports identical run-0 fold-0 values
    let out = mdico(&["ablate", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ablation = fs::read_to_string(tmp.path().join("out/ablate/ablation.csv")).unwrap();
    for row in &rows {
        let key: Vec<&str> = row.split(',').collect();
        let matching = ablation.lines().find(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[0] == key[0] && f[1] == key[1] && f[2] == "0" && f[3] == "0" && f[4] == key[4]
        });
        assert_eq!(matching, Some(*row), "{row}");
    }
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", 3, "");
    assert_eq!(code(&mdico(&["train", "--config", s(&cfg)])), 0);
    let other = write_config(tmp.path(), "four.toml", 4, "");
    let ckpt = tmp.path().join("out/train/full.ckpt");
    let out = mdico(&["eval", "--config", s(&other), "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));

    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&mdico(&["eval", "--config", s(&cfg), "--checkpoint", s(&junk)])), 2);
}

#[test]
fn ablate_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", 3, "");
    let read_all = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = walk(dir)
            .into_iter()
            .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    assert_eq!(code(&mdico(&["ablate", "--config", s(&cfg), "--jobs", "1"])), 0);
    let dir = tmp.path().join("out/ablate");
    let first = read_all(&dir);
    assert!(first.iter().any(|(n, _)| n == "ablation_summary.json"));
    assert!(first.iter().any(|(n, _)| n == "config.toml"));
    assert_eq!(code(&mdico(&["ablate", "--config", s(&cfg)])), 0);
    assert_eq!(read_all(&dir), first);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn gradcheck_command_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", 3, "");
    let text = fs::read_to_string(&cfg).unwrap().replace("projection_dim = 8", "projection_dim = 8\nprojection_dropout = 0.0");
    fs::write(&cfg, text).unwrap();
    let out = mdico(&["gradcheck", "--config", s(&cfg), "--max-entries-per-block", "6"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/gradcheck/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    // full: main, aux, contrastive, modality, total
    assert_eq!(report["reports"].as_array().unwrap().len(), 5);
    assert_eq!(code(&mdico(&["gradcheck", "--config", s(&cfg), "--batch-size", "1"])), 2);
}

#[test]
fn plot_losses_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace.csv");
    fs::write(
        &trace,
        "epoch,main,aux,contrastive,modality,total\n0,1.0,2.0,9.0,0.7,12.7\n1,0.8,1.5,8.0,0.3,10.6\n2,0.7,1.2,7.5,0.1,9.5\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("plot");
    let out = mdico(&["plot-losses", "--trace", s(&trace), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let tidy = fs::read_to_string(out_dir.join("losses_tidy.csv")).unwrap();
    assert_eq!(tidy.lines().count(), 1 + 4 * 3);
    assert!(tidy.starts_with("epoch,term,value\n0,main,1\n"));
    let svg = fs::read_to_string(out_dir.join("losses.svg")).unwrap();
    for term in ["main", "aux", "contrastive", "modality"] {
        assert!(svg.contains(&format!(">\n{term}\n<")), "label {term} missing");
    }
    assert!(out_dir.join("config.toml").exists());

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "epoch,main,aux,contrastive,modality,total\n").unwrap();
    assert_eq!(code(&mdico(&["plot-losses", "--trace", s(&empty), "--out", s(&out_dir)])), 2);
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "epoch,main\n0,abc\n").unwrap();
    assert_eq!(code(&mdico(&["plot-losses", "--trace", s(&bad), "--out", s(&out_dir)])), 2);
}

#[test]
fn divergence_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", 3, "");
    let text = fs::read_to_string(&cfg).unwrap().replace("max_epochs = 3", "max_epochs = 3\nlearning_rate = 1e300");
    fs::write(&cfg, text).unwrap();
    let out = mdico(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}
