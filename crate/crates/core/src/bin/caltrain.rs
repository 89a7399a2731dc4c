use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use caltrain::dataset::{save_split, GaussianMixture, SplitSizes};
use caltrain::harness::{grid_search, read_manifest, replot, run_suite, train, ExperimentConfig, HarnessError, SelectionCriterion};
use caltrain::losses::{LossSpec, Strategy};

#[derive(Parser)]
#[command(name = "caltrain", version, about = "Calibration-aware training of VAE classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/validation/test split to a directory.
    GenerateData(GenerateArgs),
    /// Train a single strategy and write its history and checkpoints.
    Train(RunArgs),
    /// Inner-fold grid search for one strategy.
    Grid(RunArgs),
    /// Every strategy for every seed, plus the full report bundle.
    Suite(RunArgs),
    /// Print the summary tables of a finished suite.
    Report(DirArgs),
    /// Redraw reliability diagrams from a finished suite.
    Plot(DirArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    positive_fraction: Option<f64>,
    /// 9:1 negative-to-positive preset.
    #[arg(long)]
    imbalanced: bool,
    #[arg(long, default_value_t = 4000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    validation: usize,
    #[arg(long, default_value_t = 2000)]
    test: usize,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory; relative paths resolve under the output root.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, env = "CALTRAIN_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    /// Restrict to these strategies (comma separated).
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_vae: Option<f64>,
    #[arg(long)]
    lr_classifier: Option<f64>,
    #[arg(long)]
    selection: Option<SelectionCriterion>,
    #[arg(long)]
    workers: Option<usize>,
    /// Load data from a `generate-data` directory instead of generating it.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Hyperparameter override applied to every strategy, `key=value`.
    #[arg(long = "set", value_parser = parse_kv)]
    overrides: Vec<(String, f64)>,
}

#[derive(Args)]
struct DirArgs {
    dir: PathBuf,
}

fn parse_kv(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let v: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.trim().to_string(), v))
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.output_dir {
            c.output_dir = d.clone();
        }
        if let Some(root) = &self.output_root {
            if c.output_dir.is_relative() {
                c.output_dir = root.join(&c.output_dir);
            }
        }
        if !self.strategy.is_empty() {
            let mut picked: Vec<LossSpec> = Vec::new();
            for s in &self.strategy {
                match c.strategies.iter().find(|spec| spec.strategy == *s) {
                    Some(spec) => picked.push(spec.clone()),
                    None => picked.push(LossSpec::new(*s)),
                }
            }
            c.strategies = picked;
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.lr_vae = self.lr_vae.unwrap_or(c.lr_vae);
        c.lr_classifier = self.lr_classifier.unwrap_or(c.lr_classifier);
        c.selection = self.selection.unwrap_or(c.selection);
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        if let Some(d) = &self.data {
            c.dataset.path = Some(d.clone());
        }
        for (k, v) in &self.overrides {
            for spec in &mut c.strategies {
                spec.set(k, *v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn generate(a: &GenerateArgs) -> Result<(), HarnessError> {
    let mut g = if a.imbalanced {
        GaussianMixture::imbalanced()
    } else {
        GaussianMixture::default()
    };
    g.dim = a.dim.unwrap_or(g.dim);
    g.separation = a.separation.unwrap_or(g.separation);
    g.noise_rate = a.noise_rate.unwrap_or(g.noise_rate);
    g.positive_fraction = a.positive_fraction.unwrap_or(g.positive_fraction);
    let sizes = SplitSizes {
        train: a.train,
        validation: a.validation,
        test: a.test,
    };
    let split = g.generate(sizes, a.seed)?;
    save_split(&a.out, &split, &g, sizes)?;
    println!("wrote {} samples to {}", sizes.total(), a.out.display());
    Ok(())
}

fn train_cmd(c: &ExperimentConfig) -> Result<bool, HarnessError> {
    let split = c.dataset.load()?;
    let spec = &c.strategies[0];
    let seed = c.seeds[0];
    let dir = c.output_dir.join(format!("{}-seed{seed}", spec.strategy));
    let out = train(&c.train_settings(), spec, &split.train, &split.validation, seed, Some(&dir))?;
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::Io {
        path: dir.clone(),
        source: e,
    })?;
    let mut w = csv::Writer::from_path(dir.join("history.csv"))?;
    for r in &out.history.records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::Io {
        path: dir.join("history.csv"),
        source: e,
    })?;
    for crit in SelectionCriterion::ALL {
        if let Some((epoch, _)) = out.best(crit) {
            let r = &out.history.records[epoch];
            println!("{crit}: epoch {epoch} val_bacc {:.4} val_ece {:.4}", r.val_bacc, r.val_ece);
        }
    }
    if let Some(f) = &out.history.failure {
        eprintln!("training stopped: {f}");
        return Ok(false);
    }
    Ok(true)
}

fn grid_cmd(c: &ExperimentConfig) -> Result<bool, HarnessError> {
    let split = c.dataset.load()?;
    for spec in &c.strategies {
        let table = c.output_dir.join(format!("grid-{}.csv", spec.strategy));
        let out = grid_search(c, spec, &split.train, Some(&table))?;
        println!("{}: cell {} score {:.6}", spec.strategy, out.best_index, out.cells[out.best_index].score);
        println!("{}", serde_json::to_string(&out.best)?);
    }
    Ok(true)
}

fn suite_cmd(c: &ExperimentConfig) -> Result<bool, HarnessError> {
    let report = run_suite(c)?;
    let failed = report.failed_cells();
    println!("{} cells, {failed} failed; reports in {}", report.manifest.cells.len(), c.output_dir.display());
    print_table(&c.output_dir.join("metrics.csv"))?;
    Ok(failed == 0)
}

fn print_table(path: &Path) -> Result<(), HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows: Vec<Vec<String>> = vec![r.headers()?.iter().map(String::from).collect()];
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, s)| format!("{s:<w$}", w = widths[j]))
            .collect();
        println!("{}", line.join("  ").trim_end());
    }
    Ok(())
}

fn report_cmd(dir: &Path) -> Result<bool, HarnessError> {
    let manifest = read_manifest(dir)?;
    println!("config {}  seeds {:?}", manifest.config_hash, manifest.seeds);
    for name in ["metrics.csv", "uncertainty.csv", "selection.csv", "mcnemar.csv"] {
        let path = dir.join(name);
        if path.exists() {
            println!("\n{name}");
            print_table(&path)?;
        }
    }
    Ok(manifest.cells.iter().all(|c| c.failure.is_none()))
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::GenerateData(a) => generate(&a).map(|_| true),
        Command::Train(a) => train_cmd(&a.config()?),
        Command::Grid(a) => {
            let c = a.config()?;
            if c.grid.is_empty() {
                return Err(HarnessError::Config("config has an empty grid".into()));
            }
            grid_cmd(&c)
        }
        Command::Suite(a) => suite_cmd(&a.config()?),
        Command::Report(a) => report_cmd(&a.dir),
        Command::Plot(a) => {
            for p in replot(&a.dir)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
