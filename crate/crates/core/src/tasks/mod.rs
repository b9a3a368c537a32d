//! Synthetic corpus, the paraphrase-pair task and its metrics.

mod grammar;
mod metrics;
mod pairs;

#[cfg(test)]
mod tests;

pub use grammar::{gen_corpus, Grammar, GrammarParams, SyntheticCorpus, HELD_OUT_FRACTION};
pub use metrics::{accuracy, evaluate, f1_score, majority_baseline, majority_f1, EvalReport};
pub use pairs::{
    gen_pair_task, load_pairs, positive_count, read_pairs, save_pairs, write_pairs, Pair, PairTask, TaskConfig,
    Transform, DEFAULT_POSITIVE_FRACTION,
};
