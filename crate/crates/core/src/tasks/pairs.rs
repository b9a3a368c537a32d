use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pack_pair, ModelConfig};
use crate::tasks::grammar::{Grammar, GrammarParams};

pub const DEFAULT_POSITIVE_FRACTION: f64 = 0.684;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pair {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub positive: bool,
}

impl Pair {
    pub fn label(&self) -> usize {
        usize::from(self.positive)
    }

    pub fn packed(&self) -> Vec<usize> {
        pack_pair(&self.a, &self.b)
    }
}

/// How a positive `B` is derived from its `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Paraphrase,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub grammar: GrammarParams,
    pub train: usize,
    pub dev: usize,
    pub positive_fraction: f64,
    pub transform: Transform,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            grammar: GrammarParams::default(),
            train: 2000,
            dev: 400,
            positive_fraction: DEFAULT_POSITIVE_FRACTION,
            transform: Transform::Paraphrase,
            seed: 1,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        check_q(self.positive_fraction)?;
        if self.train == 0 {
            return Err(Error::config("train", "must be positive"));
        }
        if self.dev == 0 {
            return Err(Error::config("dev", "must be positive"));
        }
        Ok(())
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::config("positive_fraction", format!("{q} is outside (0, 1)")))
    }
}

/// Number of positives in a set of `n` pairs: `q·n` rounded half up.
pub fn positive_count(n: usize, q: f64) -> usize {
    ((q * n as f64) + 0.5).floor() as usize
}

fn make_pair(g: &Grammar, rng: &mut ChaCha8Rng, positive: bool, transform: Transform) -> Pair {
    let p = g.params();
    let a = g.sample_sentence(rng);
    let b = match (positive, transform) {
        (true, Transform::Paraphrase) => g.paraphrase(rng, &a, p.substitution, p.swap),
        (true, Transform::Identity) => a.clone(),
        (false, _) => g.sample_sentence(rng),
    };
    Pair { a, b, positive }
}

fn draw_pairs(
    g: &Grammar,
    rng: &mut ChaCha8Rng,
    n: usize,
    q: f64,
    transform: Transform,
    exclude: &HashSet<Pair>,
) -> Vec<Pair> {
    let pos = positive_count(n, q);
    let mut labels: Vec<bool> = (0..n).map(|i| i < pos).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .map(|positive| loop {
            let pair = make_pair(g, rng, positive, transform);
            if !exclude.contains(&pair) {
                break pair;
            }
        })
        .collect()
}

/// `n` labelled pairs, exactly [`positive_count`]`(n, q)` of them positive,
/// in shuffled order.
pub fn gen_pair_task(seed: u64, n: usize, q: f64, grammar: &GrammarParams, transform: Transform) -> Result<Vec<Pair>> {
    if n == 0 {
        return Err(Error::config("n", "needs at least one pair"));
    }
    check_q(q)?;
    let g = Grammar::new(*grammar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw_pairs(&g, &mut rng, n, q, transform, &HashSet::new()))
}

/// Train and dev pairs; no dev pair occurs in the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTask {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
}

impl PairTask {
    pub fn generate(config: &TaskConfig) -> Result<Self> {
        config.validate()?;
        let g = Grammar::new(config.grammar)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let q = config.positive_fraction;
        let train = draw_pairs(&g, &mut rng, config.train, q, config.transform, &HashSet::new());
        let seen: HashSet<Pair> = train.iter().cloned().collect();
        let dev = draw_pairs(&g, &mut rng, config.dev, q, config.transform, &seen);
        Ok(Self { train, dev })
    }

    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        for p in self.train.iter().chain(&self.dev) {
            let len = p.a.len() + p.b.len() + 3;
            if len > model.max_len {
                return Err(Error::Data(format!("pair of {len} positions exceeds max_len {}", model.max_len)));
            }
            if let Some(&t) = p.a.iter().chain(&p.b).find(|&&t| t >= model.vocab) {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    bound: model.vocab,
                });
            }
        }
        Ok(())
    }
}

fn ids(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// One pair per line: `A ids \t B ids \t label`, ids space-separated.
pub fn write_pairs(mut w: impl Write, pairs: &[Pair]) -> std::io::Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", ids(&p.a), ids(&p.b), p.label())?;
    }
    Ok(())
}

fn parse_ids(field: &str, line: usize) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("line {line}: bad token id `{t}`")))
        })
        .collect()
}

pub fn read_pairs(r: impl BufRead) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [a, b, label] = fields[..] else {
            return Err(Error::Format(format!("line {}: expected 3 tab-separated fields", i + 1)));
        };
        let positive = match label.trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::Format(format!("line {}: bad label `{other}`", i + 1))),
        };
        out.push(Pair {
            a: parse_ids(a, i + 1)?,
            b: parse_ids(b, i + 1)?,
            positive,
        });
    }
    Ok(out)
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[Pair]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_pairs(&mut w, pairs).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pairs(std::io::BufReader::new(file))
}
