//! Experiment grids: pre-training, both fine-tuning modes, the pruning
//! baseline, storage accounting and reports.

mod finetune;
mod lottery;
mod pretrain;
pub mod report;
mod run;
mod spec;
mod storage;
mod sweep;


pub use finetune::{
    finetune, finetune_seed, mean_sd, starting_model, structure_model, PreparedTask, RunResult, SeedResult,
};
pub use lottery::{lottery_baseline, survivors_after, LotteryConfig, LotteryCurve, LotteryPoint};
pub use pretrain::{mask_documents, pretrain, pretrain_from_scratch, PretrainOutcome};
pub use run::{
    ensure_dir, load_checkpoint, prepare_task, resolve_source, run_lottery_spec, run_sweep_spec, LotterySpec, Manifest,
    PRETRAINED_CKPT,
};
pub use spec::{
    sub_seed, ExperimentSpec, Mode, PretrainConfig, Source, SweepSpec, TrainConfig, SCORES_LR, WEIGHTS_LR,
};
pub use storage::{storage_report, structure_storage, weights_storage, StorageReport, FLOAT_BITS};
pub use sweep::{cell_label, run_grid, sparsity_sweep, CellOutcome, SparsityPoint};
