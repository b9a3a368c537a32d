use crate::error::{Error, Result};
use crate::model::vocab;

/// `[CLS] a [SEP] b [SEP]`.
pub fn pack_pair(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len() + 3);
    out.push(vocab::CLS);
    out.extend_from_slice(a);
    out.push(vocab::SEP);
    out.extend_from_slice(b);
    out.push(vocab::SEP);
    out
}

/// Segment id per position: 0 through the first `[SEP]`, 1 afterwards.
pub fn segment_ids(tokens: &[usize]) -> Vec<usize> {
    let mut seg = 0;
    tokens
        .iter()
        .map(|&t| {
            let s = seg;
            if t == vocab::SEP {
                seg = 1;
            }
            s
        })
        .collect()
}

/// Right-padded sequences flattened to `[batch * seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub pad: Vec<bool>,
}

impl TokenBatch {
    /// Pads to the longest sequence; fails if any exceeds `max_len` or uses
    /// an id outside `vocab`.
    pub fn new(seqs: &[Vec<usize>], max_len: usize, vocab_size: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::Data("empty sequence".into()));
        }
        if let Some(long) = seqs.iter().find(|s| s.len() > max_len) {
            return Err(Error::Data(format!(
                "sequence of length {} exceeds max_len {max_len}",
                long.len()
            )));
        }
        let n = seqs.len() * seq_len;
        let mut tokens = vec![vocab::PAD; n];
        let mut segments = vec![0; n];
        let mut pad = vec![true; n];
        for (i, s) in seqs.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: bad,
                    bound: vocab_size,
                });
            }
            let base = i * seq_len;
            tokens[base..base + s.len()].copy_from_slice(s);
            segments[base..base + s.len()].copy_from_slice(&segment_ids(s));
            pad[base..base + s.len()].fill(false);
        }
        Ok(Self {
            batch: seqs.len(),
            seq_len,
            tokens,
            segments,
            pad,
        })
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.seq_len).collect()
    }

    /// Flat row of the first position of every sequence.
    pub fn first_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len).collect()
    }
}

/// A token batch plus the flat rows whose original tokens must be predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub inputs: TokenBatch,
    pub target_rows: Vec<usize>,
    pub target_tokens: Vec<usize>,
}

impl MlmBatch {
    pub fn new(inputs: TokenBatch, target_rows: Vec<usize>, target_tokens: Vec<usize>) -> Result<Self> {
        if target_rows.len() != target_tokens.len() {
            return Err(Error::Dimension {
                op: "MlmBatch::new",
                left: vec![target_rows.len()],
                right: vec![target_tokens.len()],
            });
        }
        let n = inputs.tokens.len();
        if let Some(&r) = target_rows.iter().find(|&&r| r >= n || inputs.pad[r]) {
            return Err(Error::Index {
                what: "masked position",
                index: r,
                bound: n,
            });
        }
        Ok(Self {
            inputs,
            target_rows,
            target_tokens,
        })
    }
}
