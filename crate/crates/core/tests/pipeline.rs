use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use caltrain::dataset::{GaussianMixture, SplitSizes};
use caltrain::harness::{run_suite, train, ExperimentConfig, SelectionCriterion};
use caltrain::losses::{LossSpec, Strategy};
use caltrain::model::Architecture;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.generator = GaussianMixture {
        dim: 3,
        ..Default::default()
    };
    c.dataset.sizes = SplitSizes {
        train: 200,
        validation: 100,
        test: 100,
    };
    c.architecture = Architecture {
        input_dim: 3,
        hidden: 6,
        latent_dim: 2,
        classifier_hidden: 6,
        ..Default::default()
    };
    c.epochs = 3;
    c.seeds = vec![0, 1];
    c.uncertainty_samples = 5;
    c.conf_weight_samples = 5;
    c.output_dir = out.to_path_buf();
    c
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "svg") {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn conf_weight_floor_one_tracks_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    let split = c.dataset.load().unwrap();
    let base = train(&c.train_settings(), &LossSpec::new(Strategy::Baseline), &split.train, &split.validation, 4, None).unwrap();
    let cw = LossSpec::new(Strategy::ConfWeight).with("weight_floor", 1.0).unwrap();
    let cw = train(&c.train_settings(), &cw, &split.train, &split.validation, 4, None).unwrap();
    assert_eq!(base.history.len(), cw.history.len());
    for (a, b) in base.history.records.iter().zip(&cw.history.records) {
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert!((a.val_bacc - b.val_bacc).abs() < 1e-12);
        assert!((a.val_ece - b.val_ece).abs() < 1e-12);
    }
}

#[test]
fn suite_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_suite(&tiny(a.path())).unwrap();
    run_suite(&tiny(b.path())).unwrap();
    assert_eq!(ra.failed_cells(), 0);
    let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
    assert!(fa.contains_key("metrics.csv") && fa.contains_key("mcnemar.csv"));
    assert_eq!(fa, fb);
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );
    // 7 strategies x 2 seeds, both criteria evaluated for each.
    assert_eq!(ra.manifest.cells.len(), 14);
    assert_eq!(ra.evaluations.len(), 28);
}

#[test]
fn no_implicit_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.strategies = vec![LossSpec::new(Strategy::SoftEce)];
    c.seeds = vec![0];
    let r = run_suite(&c).unwrap();
    assert!(!dir.path().join("mcnemar.csv").exists());
    assert_eq!(r.manifest.cells.len(), 1);
    let sel = std::fs::read_to_string(dir.path().join("selection.csv")).unwrap();
    for crit in SelectionCriterion::ALL {
        assert!(sel.contains(crit.as_str()));
    }
}

#[test]
fn failed_cells_are_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.strategies = vec![LossSpec::new(Strategy::Baseline), LossSpec::new(Strategy::Mmce)];
    c.seeds = vec![0];
    c.lr_vae = 1e300;
    c.lr_classifier = 1e300;
    let r = run_suite(&c).unwrap();
    assert_eq!(r.failed_cells(), 2);
    assert!(r.manifest.cells.iter().all(|cell| cell.failure.is_some()));
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn cli_round_trip() {
    let exe = env!("CARGO_BIN_EXE_caltrain");
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let st = Command::new(exe)
        .args(["generate-data", "--dim", "3", "--train", "200", "--validation", "100", "--test", "100", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(data.join("manifest.json").exists());

    let cfg = tiny(Path::new("suite-out"));
    let cfg_path = root.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = Command::new(exe)
        .args(["suite", "--strategy", "baseline,soft-ece", "--seeds", "3", "--epochs", "2", "--config"])
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .env("CALTRAIN_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let suite_dir = root.path().join("suite-out");
    assert!(suite_dir.join("metrics.csv").exists());

    let report = Command::new(exe).arg("report").arg(&suite_dir).output().unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("soft-ece"));
    let plot = Command::new(exe).arg("plot").arg(&suite_dir).output().unwrap();
    assert!(plot.status.success());

    let bad = Command::new(exe)
        .args(["suite", "--lr-vae", "1e300", "--lr-classifier", "1e300", "--strategy", "baseline", "--seeds", "0", "--config"])
        .arg(&cfg_path)
        .env("CALTRAIN_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
