use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::report::{fmt, write_csv};
use super::train::{select_model, train};
use super::{ExperimentConfig, HarnessError, SelectionCriterion};
use crate::dataset::Sample;
use crate::losses::LossSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub index: usize,
    pub values: BTreeMap<String, f64>,
    pub spec: LossSpec,
    /// Selected validation metric per inner fold (NaN for a failed fold).
    pub fold_scores: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub best_index: usize,
    pub best: LossSpec,
    pub cells: Vec<GridCell>,
}

/// Cartesian product of the grid applied to `base`, keys in sorted order
/// with the last key varying fastest.
pub fn grid_cells(base: &LossSpec, grid: &BTreeMap<String, Vec<f64>>) -> Result<Vec<(BTreeMap<String, f64>, LossSpec)>, HarnessError> {
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Err(HarnessError::Config("grid must have at least one value per key".into()));
    }
    for key in grid.keys() {
        if !base.is_relevant(key) {
            log::warn!("grid key `{key}` is not used by {}; cells still run", base.strategy);
        }
    }
    let mut cells = vec![(BTreeMap::new(), base.clone())];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for (assigned, spec) in &cells {
            for &v in values {
                let mut a = assigned.clone();
                a.insert(key.clone(), v);
                let mut s = spec.clone();
                s.set(key, v)?;
                next.push((a, s));
            }
        }
        cells = next;
    }
    for (_, spec) in &cells {
        spec.validate()?;
    }
    Ok(cells)
}

/// Stratified `k`-fold partition of `samples`, shuffled with `seed`.
pub fn inner_folds(samples: &[Sample], k: usize, seed: u64) -> Vec<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == class).collect();
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            folds[j % k].push(samples[i].clone());
        }
    }
    folds
}

fn fold_score(config: &ExperimentConfig, spec: &LossSpec, folds: &[Vec<Sample>], f: usize, seed: u64) -> f64 {
    let inner_train: Vec<Sample> = folds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != f)
        .flat_map(|(_, s)| s.iter().cloned())
        .collect();
    let out = match train(&config.train_settings(), spec, &inner_train, &folds[f], seed, None) {
        Ok(o) if !o.history.failed() => o,
        Ok(o) => {
            log::warn!("grid fold {f}: {}", o.history.failure.unwrap_or_default());
            return f64::NAN;
        }
        Err(e) => {
            log::warn!("grid fold {f}: {e}");
            return f64::NAN;
        }
    };
    match select_model(&out.history, config.selection) {
        Ok(i) => {
            let r = &out.history.records[i];
            match config.selection {
                SelectionCriterion::MaxValBacc => r.val_bacc,
                SelectionCriterion::MinValEce => r.val_ece,
            }
        }
        Err(_) => f64::NAN,
    }
}

/// Exhaustive inner-fold grid search over `config.grid` for `base` on the
/// training samples. Cells are scored by the mean selected validation
/// metric; the first best cell wins ties. Writes the per-cell table to
/// `table` when given.
pub fn grid_search(
    config: &ExperimentConfig,
    base: &LossSpec,
    train_set: &[Sample],
    table: Option<&Path>,
) -> Result<GridOutcome, HarnessError> {
    let specs = grid_cells(base, &config.grid)?;
    let seed = *config
        .seeds
        .first()
        .ok_or_else(|| HarnessError::Config("seeds must be nonempty".into()))?;
    let folds = inner_folds(train_set, config.inner_folds, config.dataset.seed);
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|c| (0..config.inner_folds).map(move |f| (c, f)))
        .collect();
    let run = || -> Vec<f64> {
        jobs.par_iter()
            .map(|&(c, f)| fold_score(config, &specs[c].1, &folds, f, seed))
            .collect()
    };
    let scores = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?
            .install(run),
        None => run(),
    };

    let cells: Vec<GridCell> = specs
        .into_iter()
        .enumerate()
        .map(|(index, (values, spec))| {
            let fold_scores = scores[index * config.inner_folds..(index + 1) * config.inner_folds].to_vec();
            let score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
            GridCell {
                index,
                values,
                spec,
                fold_scores,
                score,
            }
        })
        .collect();
    let mut best: Option<usize> = None;
    for c in &cells {
        match best {
            None if !c.score.is_nan() => best = Some(c.index),
            Some(b) if config.selection.improves(c.score, cells[b].score) => best = Some(c.index),
            _ => {}
        }
    }
    let best_index = best.ok_or_else(|| HarnessError::Config("every grid cell failed".into()))?;

    if let Some(path) = table {
        let keys: Vec<&str> = config.grid.keys().map(String::as_str).collect();
        let mut header = vec!["cell"];
        header.extend(&keys);
        let fold_names: Vec<String> = (0..config.inner_folds).map(|f| format!("fold{f}")).collect();
        header.extend(fold_names.iter().map(String::as_str));
        header.extend(["score", "selected"]);
        let rows: Vec<Vec<String>> = cells
            .iter()
            .map(|c| {
                let mut row = vec![c.index.to_string()];
                row.extend(keys.iter().map(|k| c.values[*k].to_string()));
                row.extend(c.fold_scores.iter().map(|&v| fmt(v)));
                row.push(fmt(c.score));
                row.push(u8::from(c.index == best_index).to_string());
                row
            })
            .collect();
        write_csv(path, &header, &rows)?;
    }
    Ok(GridOutcome {
        best_index,
        best: cells[best_index].spec.clone(),
        cells,
    })
}
