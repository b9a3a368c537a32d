use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::finetune::PreparedTask;
use crate::harness::lottery::{lottery_baseline, LotteryConfig, LotteryCurve};
use crate::harness::pretrain::pretrain_from_scratch;
use crate::harness::report::{
    aggregate_outcomes, lottery_rows, write_charts, write_csv, write_results, LOTTERY_CSV, MANIFEST_JSON,
};
use crate::harness::spec::{Source, SweepSpec};
use crate::harness::sweep::{run_grid, CellOutcome};
use crate::model::{Checkpoint, EncoderModel, ModelConfig};
use crate::tasks::{save_pairs, PairTask, TaskConfig};

pub const PRETRAINED_CKPT: &str = "pretrained.ckpt";

/// Everything needed to reproduce a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub spec: serde_json::Value,
    pub checkpoint_sha256: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, spec: impl Serialize, checkpoint: &Checkpoint, seeds: Vec<u64>) -> Result<Self> {
        Ok(Self {
            tool: "maskfit".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            spec: serde_json::to_value(spec)?,
            checkpoint_sha256: checkpoint.digest().iter().map(|b| format!("{b:02x}")).collect(),
            seeds,
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_JSON);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads a checkpoint and checks it against the expected model shape.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if let Some(cfg) = expected {
        if &ck.config != cfg {
            return Err(Error::Contract(format!(
                "checkpoint {} has config {:?}, expected {cfg:?}",
                path.display(),
                ck.config
            )));
        }
    }
    Ok(ck)
}

/// Pre-trains (saving `pretrained.ckpt` into `dir`) or loads the checkpoint
/// named by `source`.
pub fn resolve_source(
    source: &Source,
    model: &ModelConfig,
    task: &TaskConfig,
    dir: &Path,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<(EncoderModel, Checkpoint)> {
    match source {
        Source::Pretrain(cfg) => {
            progress(&format!("pre-training for {} steps", cfg.steps));
            let out = pretrain_from_scratch(model, &task.grammar, cfg)?;
            progress(&format!(
                "held-out masked-token loss {:.4} -> {:.4}",
                out.initial_loss, out.final_loss
            ));
            let ck = Checkpoint::from_model(&out.model);
            ck.save(dir.join(PRETRAINED_CKPT))?;
            Ok((out.model, ck))
        }
        Source::Checkpoint(path) => {
            let ck = load_checkpoint(path, Some(model))?;
            Ok((ck.to_model()?, ck))
        }
    }
}

/// Generates the task, writes `train.tsv` and `dev.tsv` into `dir`, and
/// packs it for `model`.
pub fn prepare_task(config: &TaskConfig, model: &ModelConfig, dir: &Path) -> Result<PreparedTask> {
    let task = PairTask::generate(config)?;
    save_pairs(dir.join("train.tsv"), &task.train)?;
    save_pairs(dir.join("dev.tsv"), &task.dev)?;
    PreparedTask::new(&task, model)
}

/// Runs a whole spec file into `dir`: weights, task, grid, CSVs, charts and
/// manifest.
pub fn run_sweep_spec(
    spec: &SweepSpec,
    dir: &Path,
    workers: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<Vec<CellOutcome>> {
    spec.validate()?;
    ensure_dir(dir)?;
    let (model, ck) = resolve_source(&spec.source, &spec.model, &spec.task, dir, progress)?;
    let task = prepare_task(&spec.task, &spec.model, dir)?;
    let outcomes = run_grid(&spec.cells, &model, &task, workers, progress)?;
    let agg = write_results(dir, &outcomes)?;
    let mut outputs = vec!["results.csv".to_string(), "aggregated.csv".to_string()];
    outputs.extend(write_charts(dir, &agg, None)?);
    let seeds = spec.cells.iter().flat_map(|c| c.seeds.iter().copied()).collect::<std::collections::BTreeSet<_>>();
    let mut manifest = Manifest::new("sweep", spec, &ck, seeds.into_iter().collect())?;
    manifest.outputs = outputs;
    manifest.write(dir)?;
    Ok(outcomes)
}

/// Spec file for the pruning baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LotterySpec {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskConfig,
    /// Weights to rewind to; a fresh `init(model, model.seed)` when absent.
    #[serde(default)]
    pub init: Option<Source>,
    #[serde(default)]
    pub lottery: LotteryConfig,
}

impl LotterySpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.task.grammar.check_model(&self.model)?;
        self.lottery.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: Self = serde_json::from_str(&text)?;
        if let Some(Source::Checkpoint(ck)) = &mut spec.init {
            if ck.is_relative() {
                if let Some(dir) = path.parent() {
                    *ck = dir.join(&*ck);
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub fn run_lottery_spec(spec: &LotterySpec, dir: &Path, progress: &(dyn Fn(&str) + Sync)) -> Result<LotteryCurve> {
    spec.validate()?;
    ensure_dir(dir)?;
    let (init, ck) = match &spec.init {
        Some(source) => resolve_source(source, &spec.model, &spec.task, dir, progress)?,
        None => {
            let m = EncoderModel::init(&spec.model, spec.model.seed)?;
            let ck = Checkpoint::from_model(&m);
            (m, ck)
        }
    };
    let task = prepare_task(&spec.task, &spec.model, dir)?;
    progress(&format!(
        "magnitude pruning: {} rounds at rate {}",
        spec.lottery.rounds, spec.lottery.prune_rate
    ));
    let curve = lottery_baseline(&init, &task, &spec.lottery)?;
    for p in &curve.points {
        progress(&format!("round {}: sparsity {:.4}, f1 {:.4}", p.round, p.sparsity, p.f1));
    }
    let rows = lottery_rows(&curve);
    write_csv(&dir.join(LOTTERY_CSV), &rows)?;
    let mut outputs = vec![LOTTERY_CSV.to_string()];
    outputs.extend(write_charts(dir, &aggregate_outcomes(&[]), Some(&rows))?);
    let mut manifest = Manifest::new("lottery", spec, &ck, vec![spec.lottery.seed])?;
    manifest.outputs = outputs;
    manifest.write(dir)?;
    Ok(curve)
}
