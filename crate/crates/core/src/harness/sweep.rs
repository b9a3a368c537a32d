use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::finetune::{finetune_seed, PreparedTask, RunResult, SeedResult};
use crate::harness::spec::{ExperimentSpec, Mode};
use crate::model::EncoderModel;

/// One grid cell after running: its aggregate, or why it failed.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub spec: ExperimentSpec,
    pub result: std::result::Result<RunResult, String>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::config("workers", "must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))
}

/// Runs every (cell, seed) job on up to `workers` threads. Jobs share
/// nothing mutable, so results do not depend on scheduling. A failing seed
/// fails its cell; the other cells still run.
pub fn run_grid(
    cells: &[ExperimentSpec],
    pretrained: &EncoderModel,
    task: &PreparedTask,
    workers: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<Vec<CellOutcome>> {
    if cells.is_empty() {
        return Err(Error::config("cells", "the grid is empty"));
    }
    cells.iter().try_for_each(ExperimentSpec::validate)?;
    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, spec)| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let total = jobs.len();
    let results: Vec<Result<SeedResult>> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let r = finetune_seed(&cells[c], seed, pretrained, task);
                match &r {
                    Ok(s) => progress(&format!(
                        "{} seed {seed}: f1 {:.4} ({:.1}s) [{total} jobs]",
                        cell_label(&cells[c]),
                        s.f1,
                        s.wall_s
                    )),
                    Err(e) => progress(&format!("{} seed {seed}: failed: {e}", cell_label(&cells[c]))),
                }
                r
            })
            .collect()
    });

    let mut by_cell: Vec<Vec<Result<SeedResult>>> = cells.iter().map(|_| Vec::new()).collect();
    for ((c, _), r) in jobs.into_iter().zip(results) {
        by_cell[c].push(r);
    }
    Ok(cells
        .iter()
        .zip(by_cell)
        .map(|(spec, rs)| {
            let result = rs
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .map(|seeds| RunResult::from_seeds(spec.clone(), seeds))
                .map_err(|e| e.to_string());
            CellOutcome {
                spec: spec.clone(),
                result,
            }
        })
        .collect())
}

/// Short human-readable name of a cell.
pub fn cell_label(spec: &ExperimentSpec) -> String {
    let mut s = match spec.mode {
        Mode::FinetuneWeights => "weights".to_string(),
        Mode::FinetuneStructure => "structure".to_string(),
    };
    if let Some(b) = spec.bits {
        s.push_str(&format!(" {b}-bit"));
    }
    if let Some(l) = spec.lambda {
        s.push_str(&format!(" lambda={l}"));
    }
    if let Some(k) = spec.keep_fraction {
        s.push_str(&format!(" keep={k}"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPoint {
    pub keep_fraction: f64,
    pub sparsity: f64,
    pub f1_mean: f64,
    pub f1_sd: f64,
}

/// One top-k structure run per keep fraction, all other knobs from `base`.
pub fn sparsity_sweep(
    base: &ExperimentSpec,
    keep_fractions: &[f64],
    pretrained: &EncoderModel,
    task: &PreparedTask,
    workers: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<(Vec<CellOutcome>, Vec<SparsityPoint>)> {
    if base.mode != Mode::FinetuneStructure {
        return Err(Error::config("mode", "sparsity sweeps run in structure mode"));
    }
    if keep_fractions.is_empty() {
        return Err(Error::config("keep_fractions", "needs at least one value"));
    }
    let cells: Vec<ExperimentSpec> = keep_fractions.iter().map(|&k| base.clone().with_keep(k)).collect();
    let outcomes = run_grid(&cells, pretrained, task, workers, progress)?;
    let points = outcomes
        .iter()
        .filter_map(|o| {
            let r = o.result.as_ref().ok()?;
            Some(SparsityPoint {
                keep_fraction: o.spec.keep_fraction?,
                sparsity: r.sparsity,
                f1_mean: r.f1_mean,
                f1_sd: r.f1_sd,
            })
        })
        .collect();
    Ok((outcomes, points))
}
