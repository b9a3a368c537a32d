use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::pretrain::{check_loss, ParamOptimizer};
use crate::harness::spec::{sub_seed, ExperimentSpec, Mode, TrainConfig};
use crate::harness::storage::{structure_storage, weights_storage};
use crate::masking::{MaskRecord, MaskingPolicy};
use crate::model::{apply_masking, mix_weights, Bindings, EncoderModel, MaskedModel, ModelConfig, ParamRole, TokenBatch};
use crate::ndgrad::{AdamConfig, AdamState, Tape};
use crate::tasks::{evaluate, EvalReport, PairTask};

const RANDOM_STREAM: u64 = 11;
pub(crate) const HEAD_STREAM: u64 = 12;
const ORDER_STREAM: u64 = 13;
const EVAL_BATCH: usize = 128;

/// A pair task packed into model inputs once, shared by every run.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    config: ModelConfig,
    train: Vec<Vec<usize>>,
    train_labels: Vec<usize>,
    dev: Vec<TokenBatch>,
    dev_labels: Vec<bool>,
}

impl PreparedTask {
    pub fn new(task: &PairTask, config: &ModelConfig) -> Result<Self> {
        task.check_model(config)?;
        if task.train.is_empty() || task.dev.is_empty() {
            return Err(Error::Data("task needs train and dev pairs".into()));
        }
        let dev_seqs: Vec<Vec<usize>> = task.dev.iter().map(|p| p.packed()).collect();
        let dev = dev_seqs
            .chunks(EVAL_BATCH)
            .map(|c| TokenBatch::new(c, config.max_len, config.vocab))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: *config,
            train: task.train.iter().map(|p| p.packed()).collect(),
            train_labels: task.train.iter().map(|p| p.label()).collect(),
            dev,
            dev_labels: task.dev.iter().map(|p| p.positive).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dev_labels(&self) -> &[bool] {
        &self.dev_labels
    }

    /// Dev-set metrics; a pair is predicted positive when logit 1 beats logit 0.
    pub fn evaluate(&self, model: &EncoderModel) -> Result<EvalReport> {
        let mut predictions = Vec::with_capacity(self.dev_labels.len());
        for b in &self.dev {
            let logits = model.forward_classify(b)?;
            predictions.extend(logits.data().chunks(2).map(|l| l[1] > l[0]));
        }
        evaluate(&predictions, &self.dev_labels)
    }
}

/// Epoch-wise shuffled minibatches over the training pairs.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    n: usize,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, ORDER_STREAM)),
            order: Vec::new(),
            n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        if self.order.len() < size {
            let mut fresh: Vec<usize> = (0..self.n).collect();
            fresh.shuffle(&mut self.rng);
            self.order.extend(fresh);
        }
        self.order.drain(..size.min(self.order.len())).collect()
    }
}

fn minibatch(task: &PreparedTask, idx: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
    let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| task.train[i].clone()).collect();
    let labels = idx.iter().map(|&i| task.train_labels[i]).collect();
    Ok((TokenBatch::new(&seqs, task.config.max_len, task.config.vocab)?, labels))
}

fn is_eval_step(step: usize, train: &TrainConfig) -> bool {
    (step + 1).is_multiple_of(train.eval_every) || step + 1 == train.steps
}

/// Outcome of one seed of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Best dev F1 over the evaluation points.
    pub f1: f64,
    pub accuracy: f64,
    /// Mask sparsity at the selected evaluation point (0 in weights mode).
    pub sparsity: f64,
    pub storage_bits_per_param: f64,
    /// Step (1-based) of the selected evaluation point.
    pub best_step: usize,
    /// Frozen-weight digest before and after training (structure mode).
    pub theta_before: Option<String>,
    pub theta_after: Option<String>,
    pub wall_s: f64,
    #[serde(skip)]
    pub masks: Option<Vec<MaskRecord>>,
}

/// Aggregate over the seeds of one cell; the SD is the population SD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: ExperimentSpec,
    pub seeds: Vec<SeedResult>,
    pub f1_mean: f64,
    pub f1_sd: f64,
    pub sparsity: f64,
    pub storage_bits_per_param: f64,
    pub wall_s: f64,
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RunResult {
    pub fn from_seeds(spec: ExperimentSpec, seeds: Vec<SeedResult>) -> Self {
        let f1: Vec<f64> = seeds.iter().map(|s| s.f1).collect();
        let (f1_mean, f1_sd) = mean_sd(&f1);
        let sp: Vec<f64> = seeds.iter().map(|s| s.sparsity).collect();
        let storage = seeds.first().map_or(f64::NAN, |s| s.storage_bits_per_param);
        Self {
            spec,
            f1_mean,
            f1_sd,
            sparsity: mean_sd(&sp).0,
            storage_bits_per_param: storage,
            wall_s: seeds.iter().map(|s| s.wall_s).sum(),
            seeds,
        }
    }

    pub fn f1s(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.f1).collect()
    }
}

fn hex(d: [u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// The starting weights of a run: pre-trained, optionally mixed toward a
/// seed-specific random init, with a fresh classifier head.
pub fn starting_model(spec: &ExperimentSpec, seed: u64, pretrained: &EncoderModel) -> Result<EncoderModel> {
    let mut model = match spec.lambda {
        Some(l) => {
            let random = EncoderModel::init(pretrained.config(), sub_seed(seed, RANDOM_STREAM))?;
            mix_weights(pretrained, &random, l)?
        }
        None => pretrained.clone(),
    };
    model.reinit_classifier(sub_seed(seed, HEAD_STREAM));
    Ok(model)
}

/// The masked (and possibly quantized) model structure mode starts from.
pub fn structure_model(spec: &ExperimentSpec, seed: u64, pretrained: &EncoderModel) -> Result<MaskedModel> {
    let model = starting_model(spec, seed, pretrained)?;
    let mut masked = apply_masking(model, &MaskingPolicy::default(), spec.binarizer())?;
    if let Some(s) = spec.scheme() {
        masked.apply_quantization(s)?;
    }
    Ok(masked)
}

fn head_or_body(role: ParamRole, train: &TrainConfig) -> AdamConfig {
    if role == ParamRole::ClassifierHead {
        AdamConfig::with_lr(train.head_lr)
    } else {
        AdamConfig::with_lr(train.lr_for(Mode::FinetuneWeights))
    }
}

/// Dense weight training. Where `keep` holds a pattern, entries marked
/// `false` receive no gradient and so keep their current value.
pub(crate) fn train_dense(
    train: &TrainConfig,
    seed: u64,
    mut model: EncoderModel,
    keep: Option<&[Option<Vec<bool>>]>,
    task: &PreparedTask,
) -> Result<(EncoderModel, EvalReport, usize)> {
    let mut opt = ParamOptimizer::new(&model, |_| true);
    let mut sampler = Sampler::new(seed, task.train.len());
    let mut best: Option<(EvalReport, usize)> = None;

    for step in 0..train.steps {
        let (batch, labels) = minibatch(task, &sampler.next(train.batch_size))?;
        let mut tape = Tape::new();
        let b = Bindings::dense(&model, &mut tape, |_| true);
        let logits = model.classify_on(&mut tape, &b, &batch)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        check_loss(step, tape.data(loss)[0])?;
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = b.grads(&tape).into_iter().map(|g| g.map(<[f64]>::to_vec)).collect();
        drop(tape);
        for (i, g) in grads.into_iter().enumerate() {
            let Some(mut g) = g else { continue };
            if let Some(Some(pattern)) = keep.map(|k| &k[i]) {
                for (gv, &on) in g.iter_mut().zip(pattern) {
                    if !on {
                        *gv = 0.0;
                    }
                }
            }
            let p = &mut model.params_mut()[i];
            let cfg = head_or_body(p.role, train);
            opt.step(i, p.value.data_mut(), &g, &cfg)?;
        }
        if is_eval_step(step, train) {
            let r = task.evaluate(&model)?;
            if best.is_none_or(|(b, _)| r.f1 > b.f1) {
                best = Some((r, step + 1));
            }
        }
    }
    let (report, best_step) = best.expect("at least one evaluation");
    Ok((model, report, best_step))
}

fn run_weights(spec: &ExperimentSpec, seed: u64, pretrained: &EncoderModel, task: &PreparedTask) -> Result<SeedResult> {
    let start = Instant::now();
    let model = starting_model(spec, seed, pretrained)?;
    let storage = weights_storage(&model).bits_per_param();
    let (_, report, best_step) = train_dense(&spec.train, seed, model, None, task)?;
    Ok(SeedResult {
        seed,
        f1: report.f1,
        accuracy: report.accuracy,
        sparsity: 0.0,
        storage_bits_per_param: storage,
        best_step,
        theta_before: None,
        theta_after: None,
        wall_s: start.elapsed().as_secs_f64(),
        masks: None,
    })
}

fn run_structure(spec: &ExperimentSpec, seed: u64, pretrained: &EncoderModel, task: &PreparedTask) -> Result<SeedResult> {
    let start = Instant::now();
    let mut masked = structure_model(spec, seed, pretrained)?;
    let storage = structure_storage(&masked).bits_per_param();
    let theta_before = masked.theta_digest();

    let mut score_states: Vec<Option<AdamState>> =
        masked.slots().iter().map(|s| s.as_ref().map(|mp| AdamState::new(mp.len()))).collect();
    let mut head = ParamOptimizer::new(masked.base(), |i| masked.base().params()[i].role == ParamRole::ClassifierHead);
    let score_cfg = AdamConfig::with_lr(spec.train.lr_for(Mode::FinetuneStructure));
    let head_cfg = AdamConfig::with_lr(spec.train.head_lr);
    let mut sampler = Sampler::new(seed, task.train.len());
    let mut best: Option<(EvalReport, usize, f64, Vec<MaskRecord>)> = None;

    for step in 0..spec.train.steps {
        let (batch, labels) = minibatch(task, &sampler.next(spec.train.batch_size))?;
        let mut tape = Tape::new();
        let b = masked.bind(&mut tape, true)?;
        let logits = masked.base().classify_on(&mut tape, &b, &batch)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        check_loss(step, tape.data(loss)[0])?;
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = b.grads(&tape).into_iter().map(|g| g.map(<[f64]>::to_vec)).collect();
        drop(tape);

        let (slots, params) = masked.parts_mut();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match (&mut slots[i], &mut score_states[i]) {
                (Some(mp), Some(state)) => {
                    crate::ndgrad::adam_step(mp.scores_mut(), &g, state, &score_cfg)?;
                    mp.rebinarize()?;
                }
                _ => head.step(i, params[i].value.data_mut(), &g, &head_cfg)?,
            }
        }

        if is_eval_step(step, &spec.train) {
            let r = task.evaluate(&masked.to_dense())?;
            if best.as_ref().is_none_or(|(b, ..)| r.f1 > b.f1) {
                best = Some((r, step + 1, masked.sparsity(), masked.export_masks()));
            }
        }
    }

    let theta_after = masked.theta_digest();
    if theta_after != theta_before {
        return Err(Error::Contract("frozen weights changed during structure fine-tuning".into()));
    }
    let (report, best_step, sparsity, masks) = best.expect("at least one evaluation");
    Ok(SeedResult {
        seed,
        f1: report.f1,
        accuracy: report.accuracy,
        sparsity,
        storage_bits_per_param: storage,
        best_step,
        theta_before: Some(hex(theta_before)),
        theta_after: Some(hex(theta_after)),
        wall_s: start.elapsed().as_secs_f64(),
        masks: Some(masks),
    })
}

/// One seed of one cell, fully self-contained.
pub fn finetune_seed(spec: &ExperimentSpec, seed: u64, pretrained: &EncoderModel, task: &PreparedTask) -> Result<SeedResult> {
    spec.validate()?;
    if pretrained.config() != task.config() {
        return Err(Error::Contract(format!(
            "checkpoint config {:?} does not match task config {:?}",
            pretrained.config(),
            task.config()
        )));
    }
    match spec.mode {
        Mode::FinetuneWeights => run_weights(spec, seed, pretrained, task),
        Mode::FinetuneStructure => run_structure(spec, seed, pretrained, task),
    }
}

/// Every seed of `spec`, sequentially.
pub fn finetune(spec: &ExperimentSpec, pretrained: &EncoderModel, task: &PreparedTask) -> Result<RunResult> {
    let seeds = spec
        .seeds
        .iter()
        .map(|&s| finetune_seed(spec, s, pretrained, task))
        .collect::<Result<_>>()?;
    Ok(RunResult::from_seeds(spec.clone(), seeds))
}
