use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pack_pair, vocab, ModelConfig};

/// Shape of the stochastic grammar behind both the corpus and the pair task.
///
/// Content tokens are grouped into `concepts`, each spelled by `synonyms`
/// interchangeable tokens. Sentences are Markov chains over concepts; every
/// concept has a few preferred successors plus a uniform `noise` floor, and
/// each step emits a uniformly chosen synonym.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarParams {
    pub concepts: usize,
    pub synonyms: usize,
    pub successors: usize,
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the second sentence of a corpus document restates
    /// the first instead of being drawn independently.
    pub restate_prob: f64,
    pub substitution: f64,
    pub swap: f64,
    pub seed: u64,
}

impl Default for GrammarParams {
    fn default() -> Self {
        Self {
            concepts: 20,
            synonyms: 3,
            successors: 3,
            noise: 0.1,
            min_len: 4,
            max_len: 8,
            restate_prob: 0.5,
            substitution: 0.5,
            swap: 0.15,
            seed: 0,
        }
    }
}

fn unit(field: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} is outside [0, 1]")))
    }
}

impl GrammarParams {
    pub fn content_tokens(&self) -> usize {
        self.concepts * self.synonyms
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts < 2 {
            return Err(Error::config("concepts", "needs at least 2"));
        }
        if self.synonyms == 0 {
            return Err(Error::config("synonyms", "must be positive"));
        }
        if self.successors == 0 || self.successors > self.concepts {
            return Err(Error::config("successors", format!("must be in 1..={}", self.concepts)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("min_len", format!("must be in 1..={}", self.max_len)));
        }
        unit("noise", self.noise)?;
        unit("restate_prob", self.restate_prob)?;
        unit("substitution", self.substitution)?;
        unit("swap", self.swap)
    }

    /// Checks that generated sequences fit `model`.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        if vocab::FIRST_CONTENT + self.content_tokens() > model.vocab {
            return Err(Error::config(
                "vocab",
                format!("{} content tokens need vocab ≥ {}", self.content_tokens(), vocab::FIRST_CONTENT + self.content_tokens()),
            ));
        }
        if 2 * self.max_len + 3 > model.max_len {
            return Err(Error::config(
                "max_len",
                format!("packed pairs reach {} positions", 2 * self.max_len + 3),
            ));
        }
        Ok(())
    }
}

/// A concrete grammar: the concept transition matrix drawn from `params.seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    params: GrammarParams,
    transitions: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
}

fn cumulative(row: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    row.iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

fn draw(rng: &mut ChaCha8Rng, cum: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * cum[cum.len() - 1];
    cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
}

impl Grammar {
    pub fn new(params: GrammarParams) -> Result<Self> {
        params.validate()?;
        let c = params.concepts;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut transitions = Vec::with_capacity(c);
        for _ in 0..c {
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(&mut rng);
            let weights: Vec<f64> = (0..params.successors).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = weights.iter().sum();
            let mut row = vec![params.noise / c as f64; c];
            for (&to, w) in order.iter().zip(&weights) {
                row[to] += (1.0 - params.noise) * w / total;
            }
            transitions.push(row);
        }
        let cumulative = transitions.iter().map(|r| cumulative(r)).collect();
        Ok(Self {
            params,
            transitions,
            cumulative,
        })
    }

    pub fn params(&self) -> &GrammarParams {
        &self.params
    }

    /// `P(next concept | concept)`, rows summing to 1.
    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    pub fn concept_of(&self, token: usize) -> Option<usize> {
        let off = token.checked_sub(vocab::FIRST_CONTENT)?;
        (off < self.params.content_tokens()).then(|| off / self.params.synonyms)
    }

    pub fn token(&self, concept: usize, synonym: usize) -> usize {
        vocab::FIRST_CONTENT + concept * self.params.synonyms + synonym
    }

    /// Starts uniformly over concepts, then follows the transition matrix.
    pub fn sample_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let p = &self.params;
        let len = rng.random_range(p.min_len..=p.max_len);
        let mut concept = rng.random_range(0..p.concepts);
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                concept = draw(rng, &self.cumulative[concept]);
            }
            out.push(self.token(concept, rng.random_range(0..p.synonyms)));
        }
        out
    }

    /// Synonym substitution followed by a left-to-right pass of adjacent
    /// swaps. The concept multiset is preserved.
    pub fn paraphrase(&self, rng: &mut ChaCha8Rng, sentence: &[usize], substitution: f64, swap: f64) -> Vec<usize> {
        let s = self.params.synonyms;
        let mut out: Vec<usize> = sentence
            .iter()
            .map(|&t| match self.concept_of(t) {
                Some(c) if s > 1 && rng.random_bool(substitution) => {
                    let cur = (t - vocab::FIRST_CONTENT) % s;
                    let shift = rng.random_range(1..s);
                    self.token(c, (cur + shift) % s)
                }
                _ => t,
            })
            .collect();
        let mut i = 0;
        while i + 1 < out.len() {
            if rng.random_bool(swap) {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        out
    }

    /// Concept multiset of a sentence as per-concept counts.
    pub fn concept_counts(&self, sentence: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.params.concepts];
        for c in sentence.iter().filter_map(|&t| self.concept_of(t)) {
            counts[c] += 1;
        }
        counts
    }
}

/// Packed two-sentence documents for masked-token pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<Vec<usize>>,
    pub held_out: Vec<Vec<usize>>,
}

pub const HELD_OUT_FRACTION: f64 = 0.1;

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.held_out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `size` documents `[CLS] s1 [SEP] s2 [SEP]`, where `s2` restates
/// `s1` with probability `restate_prob`, and splits off a held-out tenth.
/// Held-out documents that also occur in the training split are dropped.
pub fn gen_corpus(seed: u64, size: usize, params: &GrammarParams) -> Result<SyntheticCorpus> {
    if size == 0 {
        return Err(Error::config("size", "corpus needs at least one document"));
    }
    let g = Grammar::new(*params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs: Vec<Vec<usize>> = (0..size)
        .map(|_| {
            let a = g.sample_sentence(&mut rng);
            let b = if rng.random_bool(params.restate_prob) {
                g.paraphrase(&mut rng, &a, params.substitution, params.swap)
            } else {
                g.sample_sentence(&mut rng)
            };
            pack_pair(&a, &b)
        })
        .collect();
    let held = ((size as f64 * HELD_OUT_FRACTION).round() as usize).min(size - 1);
    let (train, rest) = docs.split_at(size - held);
    let seen: std::collections::HashSet<&Vec<usize>> = train.iter().collect();
    let held_out = rest.iter().filter(|d| !seen.contains(d)).cloned().collect();
    Ok(SyntheticCorpus {
        train: train.to_vec(),
        held_out,
    })
}
