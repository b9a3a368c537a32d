use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::spec::{sub_seed, PretrainConfig};
use crate::model::{vocab, Bindings, EncoderModel, MlmBatch, ModelConfig, ParamRole, TokenBatch};
use crate::ndgrad::{adam_step, AdamConfig, AdamState, Tape};
use crate::tasks::{gen_corpus, GrammarParams, SyntheticCorpus};

const EVAL_DOCS: usize = 256;
const EVAL_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;

/// Masks `mask_prob` of the content positions (at least one per document):
/// 80% become `[MASK]`, 10% a random content token, 10% stay unchanged.
pub fn mask_documents(rng: &mut ChaCha8Rng, docs: &[&Vec<usize>], mask_prob: f64, config: &ModelConfig) -> Result<MlmBatch> {
    let owned: Vec<Vec<usize>> = docs.iter().map(|d| d.to_vec()).collect();
    let mut batch = TokenBatch::new(&owned, config.max_len, config.vocab)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, doc) in docs.iter().enumerate() {
        let content: Vec<usize> = (0..doc.len()).filter(|&i| !vocab::is_special(doc[i])).collect();
        if content.is_empty() {
            continue;
        }
        let mut chosen: Vec<usize> = content.iter().copied().filter(|_| rng.random_bool(mask_prob)).collect();
        if chosen.is_empty() {
            chosen.push(content[rng.random_range(0..content.len())]);
        }
        for i in chosen {
            let row = b * batch.seq_len + i;
            rows.push(row);
            targets.push(doc[i]);
            let u: f64 = rng.random();
            if u < 0.8 {
                batch.tokens[row] = vocab::MASK;
            } else if u < 0.9 {
                batch.tokens[row] = rng.random_range(vocab::FIRST_CONTENT..config.vocab);
            }
        }
    }
    MlmBatch::new(batch, rows, targets)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: EncoderModel,
    /// Held-out masked-token loss before the first step.
    pub initial_loss: f64,
    /// Held-out masked-token loss after the last step.
    pub final_loss: f64,
    /// Training loss per step.
    pub losses: Vec<f64>,
}

/// Per-tensor Adam state for a subset of a model's parameters.
#[derive(Debug, Clone)]
pub(crate) struct ParamOptimizer {
    states: Vec<Option<AdamState>>,
}

impl ParamOptimizer {
    pub fn new(model: &EncoderModel, trainable: impl Fn(usize) -> bool) -> Self {
        Self {
            states: model
                .params()
                .iter()
                .enumerate()
                .map(|(i, p)| trainable(i).then(|| AdamState::new(p.len())))
                .collect(),
        }
    }

    pub fn step(&mut self, i: usize, values: &mut [f64], grad: &[f64], cfg: &AdamConfig) -> Result<()> {
        let state = self.states[i]
            .as_mut()
            .ok_or_else(|| Error::Contract(format!("parameter {i} has no optimizer state")))?;
        adam_step(values, grad, state, cfg)
    }
}

pub(crate) fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            reason: format!("loss is {loss}"),
        })
    }
}

fn eval_loss(model: &EncoderModel, batches: &[MlmBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        total += model.forward_mlm(b)? * b.target_rows.len() as f64;
        count += b.target_rows.len();
    }
    Ok(total / count as f64)
}

/// Masked-token training of a fresh `init(config, config.seed)` encoder on
/// `corpus.train`; every parameter except the classifier is updated.
pub fn pretrain(config: &ModelConfig, corpus: &SyntheticCorpus, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Data("corpus has no training documents".into()));
    }
    let mut model = EncoderModel::init(config, config.seed)?;

    let eval_docs: Vec<&Vec<usize>> = if corpus.held_out.is_empty() {
        corpus.train.iter().take(EVAL_DOCS).collect()
    } else {
        corpus.held_out.iter().take(EVAL_DOCS).collect()
    };
    let mut eval_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, EVAL_STREAM));
    let eval_batches = eval_docs
        .chunks(64)
        .map(|c| mask_documents(&mut eval_rng, c, cfg.mask_prob, config))
        .collect::<Result<Vec<_>>>()?;
    let initial_loss = eval_loss(&model, &eval_batches)?;

    let trainable = |p: &crate::model::Param| p.role != ParamRole::ClassifierHead;
    let mask: Vec<bool> = model.params().iter().map(trainable).collect();
    let mut opt = ParamOptimizer::new(&model, |i| mask[i]);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, ORDER_STREAM));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, MASK_STREAM));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..corpus.train.len()).collect();
            fresh.shuffle(&mut order_rng);
            order.extend(fresh);
        }
        let picked: Vec<&Vec<usize>> = order.drain(..cfg.batch_size.min(order.len())).map(|i| &corpus.train[i]).collect();
        let batch = mask_documents(&mut mask_rng, &picked, cfg.mask_prob, config)?;

        let mut tape = Tape::new();
        let b = Bindings::dense(&model, &mut tape, trainable);
        let loss = model.mlm_loss_on(&mut tape, &b, &batch)?;
        let value = tape.data(loss)[0];
        check_loss(step, value)?;
        losses.push(value);
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = b.grads(&tape).into_iter().map(|g| g.map(<[f64]>::to_vec)).collect();
        drop(tape);
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let values = model.params_mut()[i].value.data_mut();
                opt.step(i, values, &g, &adam)?;
            }
        }
    }

    let final_loss = eval_loss(&model, &eval_batches)?;
    check_loss(cfg.steps, final_loss)?;
    Ok(PretrainOutcome {
        model,
        initial_loss,
        final_loss,
        losses,
    })
}

/// Draws the corpus described by `cfg` over `grammar` and pre-trains on it.
pub fn pretrain_from_scratch(config: &ModelConfig, grammar: &GrammarParams, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    grammar.check_model(config)?;
    let corpus = gen_corpus(cfg.corpus_seed, cfg.corpus_size, grammar)?;
    pretrain(config, &corpus, cfg)
}
