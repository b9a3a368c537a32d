use crate::error::{Error, Result};
use crate::model::batch::{MlmBatch, TokenBatch};
use crate::model::params::{EncoderModel, Param};
use crate::ndgrad::{DiffArray, Tape, Var};

const NORM_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

/// The tape variable standing in for each model parameter during one
/// forward pass, plus the leaf (if any) whose gradient trains it.
#[derive(Debug, Clone)]
pub struct Bindings {
    weights: Vec<Var>,
    leaves: Vec<Option<Var>>,
}

impl Bindings {
    pub fn new(weights: Vec<Var>, leaves: Vec<Option<Var>>) -> Self {
        assert_eq!(weights.len(), leaves.len());
        Self { weights, leaves }
    }

    /// Every parameter as a leaf; `trainable` decides which get gradients.
    pub fn dense(model: &EncoderModel, tape: &mut Tape, trainable: impl Fn(&Param) -> bool) -> Self {
        let mut weights = Vec::with_capacity(model.params().len());
        let mut leaves = Vec::with_capacity(model.params().len());
        for p in model.params() {
            let train = trainable(p);
            let v = tape.leaf(p.value.clone().with_requires_grad(train));
            weights.push(v);
            leaves.push(train.then_some(v));
        }
        Self { weights, leaves }
    }

    pub fn frozen(model: &EncoderModel, tape: &mut Tape) -> Self {
        Self::dense(model, tape, |_| false)
    }

    pub fn weight(&self, i: usize) -> Var {
        self.weights[i]
    }

    pub fn leaf(&self, i: usize) -> Option<Var> {
        self.leaves[i]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Gradient of each trainable leaf after `tape.backward`.
    pub fn grads<'t>(&self, tape: &'t Tape) -> Vec<Option<&'t [f64]>> {
        self.leaves.iter().map(|l| l.and_then(|v| tape.grad(v))).collect()
    }
}

/// Outputs of the encoder stack.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final-norm hidden states, `[batch * seq_len, d_model]`.
    pub hidden: Var,
    /// Attention probabilities per layer, `[batch * heads, seq_len, seq_len]`.
    pub attention: Vec<Var>,
}

fn linear(tape: &mut Tape, b: &Bindings, x: Var, (w, bias): (usize, usize)) -> Result<Var> {
    let y = tape.matmul(x, b.weight(w))?;
    tape.add_row(y, b.weight(bias))
}

fn norm(tape: &mut Tape, b: &Bindings, x: Var, (g, bias): (usize, usize)) -> Result<Var> {
    tape.layer_norm(x, b.weight(g), b.weight(bias), NORM_EPS)
}

impl EncoderModel {
    pub fn encode(&self, tape: &mut Tape, b: &Bindings, batch: &TokenBatch) -> Result<Encoded> {
        let cfg = self.config();
        if b.len() != self.params().len() {
            return Err(Error::Contract("bindings do not match model".into()));
        }
        if batch.seq_len > cfg.max_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, cfg.max_len
            )));
        }
        let ids = self.layout();
        let (bsz, seq, heads) = (batch.batch, batch.seq_len, cfg.heads);

        let tok = tape.gather(b.weight(ids.token), &batch.tokens)?;
        let pos = tape.gather(b.weight(ids.position), &batch.positions())?;
        let seg = tape.gather(b.weight(ids.segment), &batch.segments)?;
        let h = tape.add(tok, pos)?;
        let mut h = tape.add(h, seg)?;

        let key_mask = batch.pad.iter().any(|&p| p).then(|| {
            let mut m = vec![0.0; bsz * heads * seq * seq];
            for bi in 0..bsz {
                for hi in 0..heads {
                    for q in 0..seq {
                        let row = ((bi * heads + hi) * seq + q) * seq;
                        for k in 0..seq {
                            if batch.pad[bi * seq + k] {
                                m[row + k] = MASKED_SCORE;
                            }
                        }
                    }
                }
            }
            DiffArray::new(vec![bsz * heads, seq, seq], m).expect("mask shape")
        });
        let key_mask = key_mask.map(|m| tape.constant(m));
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

        let mut attention = Vec::with_capacity(ids.layers.len());
        for layer in &ids.layers {
            let a = norm(tape, b, h, layer.attn_norm)?;
            let q = linear(tape, b, a, layer.query)?;
            let k = linear(tape, b, a, layer.key)?;
            let v = linear(tape, b, a, layer.value)?;
            let q = tape.split_heads(q, bsz, seq, heads)?;
            let k = tape.split_heads(k, bsz, seq, heads)?;
            let v = tape.split_heads(v, bsz, seq, heads)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(m) = key_mask {
                scores = tape.add(scores, m)?;
            }
            let probs = tape.softmax(scores, 2)?;
            attention.push(probs);
            let ctx = tape.batch_matmul(probs, v, false)?;
            let ctx = tape.merge_heads(ctx, bsz, seq, heads)?;
            let o = linear(tape, b, ctx, layer.output)?;
            h = tape.add(h, o)?;

            let f = norm(tape, b, h, layer.ffn_norm)?;
            let f = linear(tape, b, f, layer.up)?;
            let f = tape.gelu(f)?;
            let f = linear(tape, b, f, layer.down)?;
            h = tape.add(h, f)?;
        }
        let hidden = norm(tape, b, h, ids.final_norm)?;
        Ok(Encoded { hidden, attention })
    }

    /// Cross-entropy over the masked positions only.
    pub fn mlm_loss_on(&self, tape: &mut Tape, b: &Bindings, batch: &MlmBatch) -> Result<Var> {
        if batch.target_rows.is_empty() {
            return Err(Error::Contract("masked-token loss needs at least one masked position".into()));
        }
        let enc = self.encode(tape, b, &batch.inputs)?;
        let picked = tape.select_rows(enc.hidden, &batch.target_rows)?;
        let logits = linear(tape, b, picked, self.layout().mlm)?;
        tape.cross_entropy(logits, &batch.target_tokens)
    }

    /// `[batch, 2]` logits from the first-position representation.
    pub fn classify_on(&self, tape: &mut Tape, b: &Bindings, batch: &TokenBatch) -> Result<Var> {
        let enc = self.encode(tape, b, batch)?;
        let pooled = tape.select_rows(enc.hidden, &batch.first_rows())?;
        linear(tape, b, pooled, self.layout().classifier)
    }

    pub fn forward_mlm(&self, batch: &MlmBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let b = Bindings::frozen(self, &mut tape);
        let loss = self.mlm_loss_on(&mut tape, &b, batch)?;
        Ok(tape.data(loss)[0])
    }

    pub fn forward_classify(&self, batch: &TokenBatch) -> Result<DiffArray> {
        let mut tape = Tape::new();
        let b = Bindings::frozen(self, &mut tape);
        let logits = self.classify_on(&mut tape, &b, batch)?;
        Ok(tape.value(logits).clone())
    }
}
