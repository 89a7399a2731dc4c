use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{aggregate, fmt, format_mean_std, mean_std, metric_values, write_csv, write_text, METRIC_COLUMNS};
use super::svg::reliability_svg;
use super::train::{select_model, train, EpochHistory};
use super::{ExperimentConfig, HarnessError, SelectionCriterion};
use crate::dataset::{MinMaxScaler, Sample};
use crate::losses::{LossSpec, Strategy};
use crate::metrics::{mcnemar, reliability_table, BinScheme, CalibrationReport, PredictionRecord, ReliabilityRow};
use crate::model::{input_matrix, VaeClassifier};
use crate::uncertainty::{uncertainty_records, UncertaintyKind, UncertaintyParams};

const EPISTEMIC_STREAM: u64 = 2;
const ALEATORIC_STREAM: u64 = 3;

/// Test-set evaluation of one selected model.
#[derive(Clone, Debug)]
pub struct RunEvaluation {
    pub label: String,
    pub seed: u64,
    pub criterion: SelectionCriterion,
    pub epoch: usize,
    pub val_bacc: f64,
    pub val_ece: f64,
    pub softmax: CalibrationReport,
    pub epistemic: CalibrationReport,
    pub aleatoric: CalibrationReport,
    pub records: Vec<PredictionRecord<f64>>,
    pub epistemic_c: Vec<f64>,
    pub aleatoric_c: Vec<f64>,
}

/// Softmax, epistemic and aleatoric evaluation on `test`. Uncertainty
/// sampling uses streams derived from `seed` only.
#[allow(clippy::type_complexity)]
pub fn evaluate_run(
    model: &VaeClassifier<f64>,
    scaler: &MinMaxScaler,
    test: &[Sample],
    params: UncertaintyParams,
    seed: u64,
) -> Result<(Vec<PredictionRecord<f64>>, Vec<PredictionRecord<f64>>, Vec<PredictionRecord<f64>>), HarnessError> {
    let probs = model.predict(&input_matrix::<f64>(test, scaler))?;
    let softmax: Vec<PredictionRecord<f64>> = test
        .iter()
        .enumerate()
        .map(|(i, s)| PredictionRecord::new([probs.get(i, 0), probs.get(i, 1)], s.label))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPISTEMIC_STREAM);
    let ep = uncertainty_records(model, scaler, test, UncertaintyKind::Epistemic, params, &mut rng)?;
    rng.set_stream(ALEATORIC_STREAM);
    rng.set_word_pos(0);
    let al = uncertainty_records(model, scaler, test, UncertaintyKind::Aleatoric, params, &mut rng)?;
    Ok((softmax, ep, al))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub strategy: String,
    pub spec: LossSpec,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub epochs_completed: usize,
    pub selected_epoch: BTreeMap<SelectionCriterion, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellRecord>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub manifest: SuiteManifest,
    pub evaluations: Vec<RunEvaluation>,
    pub histories: Vec<(String, u64, EpochHistory)>,
}

impl SuiteReport {
    pub fn failed_cells(&self) -> usize {
        self.manifest.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }

    pub fn evaluations_for<'a>(
        &'a self,
        label: &'a str,
        criterion: SelectionCriterion,
    ) -> impl Iterator<Item = &'a RunEvaluation> + 'a {
        self.evaluations
            .iter()
            .filter(move |e| e.label == label && e.criterion == criterion)
    }
}

/// Display names for the configured strategies; repeats get a numeric suffix.
pub fn strategy_labels(specs: &[LossSpec]) -> Vec<String> {
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for s in specs {
        *totals.entry(s.strategy.as_str()).or_default() += 1;
    }
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    specs
        .iter()
        .map(|s| {
            let name = s.strategy.as_str();
            let k = seen.entry(name).or_default();
            *k += 1;
            if totals[name] > 1 {
                format!("{name}-{k}")
            } else {
                name.to_string()
            }
        })
        .collect()
}

struct JobResult {
    cell: CellRecord,
    history: EpochHistory,
    evaluations: Vec<RunEvaluation>,
}

fn run_job(
    config: &ExperimentConfig,
    label: &str,
    spec: &LossSpec,
    seed: u64,
    train_set: &[Sample],
    validation: &[Sample],
    test: &[Sample],
) -> JobResult {
    let mut cell = CellRecord {
        strategy: label.to_string(),
        spec: spec.clone(),
        seed,
        status: CellStatus::Failed,
        failure: None,
        epochs_completed: 0,
        selected_epoch: BTreeMap::new(),
    };
    let run_dir = config.output_dir.join("runs").join(format!("{label}-seed{seed}"));
    let ckpt = config.save_checkpoints.then_some(run_dir.as_path());
    let outcome = match train(&config.train_settings(), spec, train_set, validation, seed, ckpt) {
        Ok(o) => o,
        Err(e) => {
            log::error!("{label} seed {seed}: {e}");
            cell.failure = Some(e.to_string());
            return JobResult {
                cell,
                history: EpochHistory::default(),
                evaluations: Vec::new(),
            };
        }
    };
    cell.epochs_completed = outcome.history.len();
    if let Some(f) = &outcome.history.failure {
        cell.failure = Some(f.clone());
        return JobResult {
            cell,
            history: outcome.history,
            evaluations: Vec::new(),
        };
    }
    let mut evaluations = Vec::new();
    let result = (|| -> Result<(), HarnessError> {
        for criterion in SelectionCriterion::ALL {
            let epoch = select_model(&outcome.history, criterion)?;
            let (_, model) = outcome.best(criterion).ok_or(HarnessError::EmptyHistory)?;
            let (softmax, ep, al) = evaluate_run(model, &outcome.scaler, test, config.uncertainty_params(), seed)?;
            let rec = &outcome.history.records[epoch];
            evaluations.push(RunEvaluation {
                label: label.to_string(),
                seed,
                criterion,
                epoch,
                val_bacc: rec.val_bacc,
                val_ece: rec.val_ece,
                softmax: CalibrationReport::compute(&softmax, config.bins)?,
                epistemic: CalibrationReport::compute(&ep, config.bins)?,
                aleatoric: CalibrationReport::compute(&al, config.bins)?,
                epistemic_c: ep.iter().map(|r| r.probs()[1]).collect(),
                aleatoric_c: al.iter().map(|r| r.probs()[1]).collect(),
                records: softmax,
            });
            cell.selected_epoch.insert(criterion, epoch);
        }
        Ok(())
    })();
    match result {
        Ok(()) => cell.status = CellStatus::Ok,
        Err(e) => {
            log::error!("{label} seed {seed}: {e}");
            cell.failure = Some(e.to_string());
            evaluations.clear();
        }
    }
    JobResult {
        cell,
        history: outcome.history,
        evaluations,
    }
}

fn metric_row(prefix: &[String], reports: &[CalibrationReport]) -> Vec<String> {
    let agg = aggregate(reports);
    let mut row = prefix.to_vec();
    row.push(agg.runs.to_string());
    row.extend((0..8).map(|k| format_mean_std(agg.mean[k], agg.std[k])));
    row
}

fn header<'a>(lead: &[&'a str]) -> Vec<&'a str> {
    let mut h = lead.to_vec();
    h.push("runs");
    h.extend(METRIC_COLUMNS);
    h
}

/// Trains every strategy for every seed, selects under both criteria and
/// writes the report bundle to `config.output_dir`. Failed cells are
/// recorded in the manifest and do not stop the suite.
pub fn run_suite(config: &ExperimentConfig) -> Result<SuiteReport, HarnessError> {
    config.validate()?;
    let split = config.dataset.load()?;
    let labels = strategy_labels(&config.strategies);
    let jobs: Vec<(usize, u64)> = (0..config.strategies.len())
        .flat_map(|s| config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let run = || -> Vec<JobResult> {
        jobs.par_iter()
            .map(|&(s, seed)| {
                log::info!("training {} seed {seed}", labels[s]);
                run_job(config, &labels[s], &config.strategies[s], seed, &split.train, &split.validation, &split.test)
            })
            .collect()
    };
    let results = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?
            .install(run),
        None => run(),
    };

    let out = &config.output_dir;
    let mut files: Vec<String> = Vec::new();
    let mut evaluations = Vec::new();
    let mut histories = Vec::new();
    let mut cells = Vec::new();
    for r in results {
        let dir = format!("runs/{}-seed{}", r.cell.strategy, r.cell.seed);
        let hist_rows: Vec<Vec<String>> = r
            .history
            .records
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    fmt(e.loss),
                    fmt(e.reconstruction),
                    fmt(e.kl),
                    fmt(e.classification),
                    e.extra.map(fmt).unwrap_or_default(),
                    fmt(e.val_bacc),
                    fmt(e.val_ece),
                    e.avuc_threshold.map(fmt).unwrap_or_default(),
                ]
            })
            .collect();
        let name = format!("{dir}/history.csv");
        write_csv(
            &out.join(&name),
            &["epoch", "loss", "reconstruction", "kl", "classification", "extra", "val_bacc", "val_ece", "avuc_threshold"],
            &hist_rows,
        )?;
        files.push(name);
        for e in &r.evaluations {
            let rows: Vec<Vec<String>> = e
                .records
                .iter()
                .enumerate()
                .map(|(i, rec)| {
                    vec![
                        i.to_string(),
                        rec.label().to_string(),
                        fmt(rec.probs()[1]),
                        fmt(e.epistemic_c[i]),
                        fmt(e.aleatoric_c[i]),
                    ]
                })
                .collect();
            let name = format!("{dir}/predictions-{}.csv", e.criterion);
            write_csv(&out.join(&name), &["index", "label", "p_positive", "epistemic_c", "aleatoric_c"], &rows)?;
            files.push(name);
        }
        if config.save_checkpoints && !r.history.is_empty() {
            for c in SelectionCriterion::ALL {
                files.push(format!("{dir}/best-{c}.json"));
                files.push(format!("{dir}/best-{c}.bin"));
            }
        }
        histories.push((r.cell.strategy.clone(), r.cell.seed, r.history));
        evaluations.extend(r.evaluations);
        cells.push(r.cell);
    }

    let group = |label: &str, c: SelectionCriterion| -> Vec<&RunEvaluation> {
        evaluations.iter().filter(|e| e.label == label && e.criterion == c).collect()
    };

    let mut per_run = Vec::new();
    for e in &evaluations {
        for (source, rep) in [("softmax", &e.softmax), ("epistemic", &e.epistemic), ("aleatoric", &e.aleatoric)] {
            let mut row = vec![e.label.clone(), e.seed.to_string(), e.criterion.to_string(), source.to_string(), e.epoch.to_string()];
            row.extend(metric_values(rep).iter().map(|&v| fmt(v)));
            per_run.push(row);
        }
    }
    let mut h = vec!["strategy", "seed", "criterion", "source", "epoch"];
    h.extend(METRIC_COLUMNS);
    write_csv(&out.join("runs.csv"), &h, &per_run)?;
    files.push("runs.csv".into());

    let mut metrics_rows = Vec::new();
    let mut unc_rows = Vec::new();
    let mut sel_rows = Vec::new();
    let mut rel_rows = Vec::new();
    for label in &labels {
        for c in SelectionCriterion::ALL {
            let g = group(label, c);
            let prefix = vec![label.clone(), c.to_string()];
            metrics_rows.push(metric_row(&prefix, &g.iter().map(|e| e.softmax).collect::<Vec<_>>()));
            for kind in [UncertaintyKind::Epistemic, UncertaintyKind::Aleatoric] {
                let reps: Vec<CalibrationReport> = g
                    .iter()
                    .map(|e| match kind {
                        UncertaintyKind::Epistemic => e.epistemic,
                        UncertaintyKind::Aleatoric => e.aleatoric,
                    })
                    .collect();
                let mut p = prefix.clone();
                p.push(kind.as_str().to_string());
                unc_rows.push(metric_row(&p, &reps));
            }
            let col = |f: &dyn Fn(&RunEvaluation) -> f64| {
                let (m, s) = mean_std(&g.iter().map(|e| f(e)).collect::<Vec<_>>());
                format_mean_std(m, s)
            };
            let epochs: Vec<String> = g.iter().map(|e| e.epoch.to_string()).collect();
            sel_rows.push(vec![
                label.clone(),
                c.to_string(),
                g.len().to_string(),
                epochs.join(" "),
                col(&|e| e.val_bacc),
                col(&|e| e.val_ece),
                col(&|e| e.softmax.bacc.unwrap_or(f64::NAN)),
                col(&|e| e.softmax.ece),
            ]);

            if g.is_empty() {
                continue;
            }
            let pooled: Vec<PredictionRecord<f64>> = g.iter().flat_map(|e| e.records.iter().copied()).collect();
            for scheme in [BinScheme::EqualWidth, BinScheme::Adaptive] {
                let rows = reliability_table(&pooled, scheme, config.bins)?;
                for r in &rows {
                    let o = |v: Option<f64>| v.map(fmt).unwrap_or_default();
                    rel_rows.push(vec![
                        label.clone(),
                        c.to_string(),
                        scheme.as_str().to_string(),
                        r.bin.to_string(),
                        o(r.lower),
                        o(r.upper),
                        r.count.to_string(),
                        o(r.confidence),
                        o(r.accuracy),
                    ]);
                }
                let name = format!("plots/reliability-{label}-{c}-{}.svg", scheme.as_str());
                let title = format!("{label} ({c}, {})", scheme.as_str());
                write_text(&out.join(&name), &reliability_svg(&rows, &title))?;
                files.push(name);
            }
        }
    }
    write_csv(&out.join("metrics.csv"), &header(&["strategy", "criterion"]), &metrics_rows)?;
    write_csv(&out.join("uncertainty.csv"), &header(&["strategy", "criterion", "kind"]), &unc_rows)?;
    write_csv(
        &out.join("selection.csv"),
        &["strategy", "criterion", "runs", "selected_epochs", "val_bacc", "val_ece", "test_bacc", "test_ece"],
        &sel_rows,
    )?;
    write_csv(
        &out.join("reliability.csv"),
        &["strategy", "criterion", "scheme", "bin", "lower", "upper", "count", "confidence", "accuracy"],
        &rel_rows,
    )?;
    files.extend(["metrics.csv", "uncertainty.csv", "selection.csv", "reliability.csv"].map(String::from));

    let baseline = config
        .strategies
        .iter()
        .position(|s| s.strategy == Strategy::Baseline)
        .map(|i| labels[i].clone());
    if let Some(base) = baseline {
        let mut rows = Vec::new();
        for label in labels.iter().filter(|l| **l != base) {
            for c in SelectionCriterion::ALL {
                for e in group(label, c) {
                    let Some(b) = group(&base, c).into_iter().find(|b| b.seed == e.seed) else {
                        continue;
                    };
                    let t = mcnemar(&e.records, &b.records)?;
                    rows.push(vec![
                        label.clone(),
                        c.to_string(),
                        e.seed.to_string(),
                        t.a_only.to_string(),
                        t.b_only.to_string(),
                        fmt(t.statistic),
                        fmt(t.p_value),
                    ]);
                }
            }
        }
        write_csv(
            &out.join("mcnemar.csv"),
            &["strategy", "criterion", "seed", "strategy_only", "baseline_only", "statistic", "p_value"],
            &rows,
        )?;
        files.push("mcnemar.csv".into());
    }

    let mut recorded = config.clone();
    recorded.output_dir = PathBuf::new();
    recorded.workers = None;
    let manifest = SuiteManifest {
        config_hash: config.hash(),
        config: recorded,
        seeds: config.seeds.clone(),
        cells,
        files,
    };
    write_text(&out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(SuiteReport {
        manifest,
        evaluations,
        histories,
    })
}

/// Reads a manifest written by `run_suite`.
pub fn read_manifest(dir: &Path) -> Result<SuiteManifest, HarnessError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the reliability SVGs of a finished suite from its
/// `reliability.csv`. Returns the written paths.
pub fn replot(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut reader = csv::Reader::from_path(dir.join("reliability.csv"))?;
    let mut groups: Vec<((String, String, String), Vec<ReliabilityRow>)> = Vec::new();
    let opt = |s: &str| -> Result<Option<f64>, HarnessError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| HarnessError::Config(format!("bad number `{s}` in reliability.csv")))
        }
    };
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let key = (field(0).to_string(), field(1).to_string(), field(2).to_string());
        let row = ReliabilityRow {
            bin: field(3).parse().map_err(|_| HarnessError::Config("bad bin index".into()))?,
            lower: opt(field(4))?,
            upper: opt(field(5))?,
            count: field(6).parse().map_err(|_| HarnessError::Config("bad bin count".into()))?,
            confidence: opt(field(7))?,
            accuracy: opt(field(8))?,
        };
        match groups.last_mut() {
            Some((k, rows)) if *k == key => rows.push(row),
            _ => groups.push((key, vec![row])),
        }
    }
    let mut written = Vec::new();
    for ((label, c, scheme), rows) in groups {
        let path = dir.join(format!("plots/reliability-{label}-{c}-{scheme}.svg"));
        write_text(&path, &reliability_svg(&rows, &format!("{label} ({c}, {scheme})")))?;
        written.push(path);
    }
    Ok(written)
}
