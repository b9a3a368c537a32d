use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use maskfit::harness::report::{
    aggregate_rows, read_csv, write_charts, write_csv, AggregateRow, LotteryRow, ResultRow, AGGREGATED_CSV,
    LOTTERY_CSV, RESULTS_CSV,
};
use maskfit::harness::{
    ensure_dir, load_checkpoint, pretrain_from_scratch, run_lottery_spec, run_sweep_spec, ExperimentSpec, LotterySpec,
    Manifest, Mode, PretrainConfig, Source, SweepSpec, TrainConfig,
};
use maskfit::model::Checkpoint;
use maskfit::tasks::TaskConfig;
use maskfit::ModelConfig;

#[derive(Parser, Debug)]
#[command(name = "maskfit", version, about = "Fine-tune a small encoder by learning binary masks over frozen weights")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Fine-tuning jobs run in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train on a synthetic corpus and save a checkpoint.
    Pretrain {
        /// JSON with optional `model`, `task` and `pretrain` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune one configuration over several seeds.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: CliMode,
        #[arg(long)]
        bits: Option<u8>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        keep: Option<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Run every cell of a sweep spec file.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Structure-mode F1 across top-k keep fractions.
    Sparsity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.75,0.5,0.25")]
        keeps: Vec<f64>,
        #[arg(long)]
        bits: Option<u8>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Iterative magnitude pruning with rewinding.
    Lottery {
        /// Lottery spec JSON; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rewind target instead of the one named in the config.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        prune_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild aggregated CSV or charts from a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Task JSON; the default pair task when absent.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CliMode {
    Structure,
    Weights,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Structure => Mode::FinetuneStructure,
            CliMode::Weights => Mode::FinetuneWeights,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Format {
    Csv,
    Svg,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainFile {
    model: ModelConfig,
    task: TaskConfig,
    pretrain: PretrainConfig,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn progress(msg: &str) {
    println!("{msg}");
}

fn train_config(steps: Option<usize>) -> TrainConfig {
    let mut t = TrainConfig::default();
    if let Some(s) = steps {
        t.steps = s;
    }
    t
}

/// Sweep over cells on an existing checkpoint, with the model shape taken
/// from the checkpoint itself.
fn checkpoint_sweep(ckpt: &Path, cells: Vec<ExperimentSpec>, common: &RunArgs, workers: usize) -> anyhow::Result<()> {
    let ck = load_checkpoint(ckpt, None)?;
    let task = match &common.task {
        Some(p) => read_json(p)?,
        None => TaskConfig::default(),
    };
    let spec = SweepSpec {
        model: ck.config,
        task,
        source: Source::Checkpoint(ckpt.to_path_buf()),
        cells,
    };
    spec.validate()?;
    run_sweep_spec(&spec, &common.out, workers, &progress)?;
    progress(&format!("wrote {}", common.out.display()));
    Ok(())
}

fn pretrain_cmd(config: Option<&Path>, corpus_seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut file: PretrainFile = match config {
        Some(p) => read_json(p)?,
        None => PretrainFile::default(),
    };
    if let Some(s) = corpus_seed {
        file.pretrain.corpus_seed = s;
    }
    file.model.validate()?;
    file.task.grammar.validate()?;
    file.task.grammar.check_model(&file.model)?;
    file.pretrain.validate()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    progress(&format!("pre-training for {} steps", file.pretrain.steps));
    let outcome = pretrain_from_scratch(&file.model, &file.task.grammar, &file.pretrain)?;
    progress(&format!(
        "held-out masked-token loss {:.4} -> {:.4}",
        outcome.initial_loss, outcome.final_loss
    ));
    let ck = Checkpoint::from_model(&outcome.model);
    ck.save(out)?;
    let mut manifest = Manifest::new("pretrain", &file, &ck, vec![file.pretrain.seed, file.pretrain.corpus_seed])?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.outputs = vec![name.clone()];
    let manifest_path = out.with_file_name(format!("{name}.manifest.json"));
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    progress(&format!("wrote {}", out.display()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn lottery_cmd(
    config: Option<&Path>,
    ckpt: Option<&Path>,
    rounds: Option<usize>,
    prune_rate: Option<f64>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut spec = match config {
        Some(p) => LotterySpec::load(p)?,
        None => LotterySpec {
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            init: None,
            lottery: Default::default(),
        },
    };
    if let Some(ck) = ckpt {
        spec.model = load_checkpoint(ck, None)?.config;
        spec.init = Some(Source::Checkpoint(ck.to_path_buf()));
    }
    if let Some(r) = rounds {
        spec.lottery.rounds = r;
    }
    if let Some(p) = prune_rate {
        spec.lottery.prune_rate = p;
    }
    if let Some(s) = seed {
        spec.lottery.seed = s;
    }
    if let Some(s) = steps {
        spec.lottery.train.steps = s;
    }
    run_lottery_spec(&spec, out, &progress)?;
    progress(&format!("wrote {}", out.display()));
    Ok(())
}

fn report_cmd(dir: &Path, format: Format) -> anyhow::Result<()> {
    let results = dir.join(RESULTS_CSV);
    let lottery_path = dir.join(LOTTERY_CSV);
    let agg: Vec<AggregateRow> = if results.exists() {
        aggregate_rows(&read_csv::<ResultRow>(&results)?)
    } else {
        Vec::new()
    };
    let lottery: Option<Vec<LotteryRow>> = if lottery_path.exists() {
        Some(read_csv(&lottery_path)?)
    } else {
        None
    };
    if agg.is_empty() && lottery.is_none() {
        anyhow::bail!("{} holds neither {RESULTS_CSV} nor {LOTTERY_CSV}", dir.display());
    }
    let written = match format {
        Format::Csv => {
            if agg.is_empty() {
                anyhow::bail!("{} has no {RESULTS_CSV} to aggregate", dir.display());
            }
            write_csv(&dir.join(AGGREGATED_CSV), &agg)?;
            vec![AGGREGATED_CSV.to_string()]
        }
        Format::Svg => write_charts(dir, &agg, lottery.as_deref())?,
    };
    if written.is_empty() {
        anyhow::bail!("nothing in {} can be charted", dir.display());
    }
    for name in written {
        progress(&format!("wrote {}", dir.join(name).display()));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Pretrain { config, corpus_seed, out } => pretrain_cmd(config.as_deref(), corpus_seed, &out),
        Command::Finetune {
            ckpt,
            mode,
            bits,
            lambda,
            keep,
            seeds,
            common,
        } => {
            let mut cell = ExperimentSpec::new(mode.into(), seeds).with_train(train_config(common.steps));
            cell.bits = bits;
            cell.lambda = lambda;
            cell.keep_fraction = keep;
            cell.validate()?;
            checkpoint_sweep(&ckpt, vec![cell], &common, workers)
        }
        Command::Sweep { spec, out } => {
            let spec = SweepSpec::load(&spec)?;
            run_sweep_spec(&spec, &out, workers, &progress)?;
            progress(&format!("wrote {}", out.display()));
            Ok(())
        }
        Command::Sparsity {
            ckpt,
            keeps,
            bits,
            seeds,
            common,
        } => {
            let cells = keeps
                .iter()
                .map(|&k| {
                    let mut c = ExperimentSpec::new(Mode::FinetuneStructure, seeds.clone())
                        .with_keep(k)
                        .with_train(train_config(common.steps));
                    c.bits = bits;
                    c
                })
                .collect();
            checkpoint_sweep(&ckpt, cells, &common, workers)
        }
        Command::Lottery {
            config,
            ckpt,
            rounds,
            prune_rate,
            seed,
            steps,
            out,
        } => lottery_cmd(config.as_deref(), ckpt.as_deref(), rounds, prune_rate, seed, steps, &out),
        Command::Report { input, format } => report_cmd(&input, format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::InvalidValue | ErrorKind::ValueValidation => 1,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.workers == 0 {
        eprintln!("error: invalid configuration `workers`: must be at least 1");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
