use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::finetune::{train_dense, PreparedTask, HEAD_STREAM};
use crate::harness::spec::{sub_seed, TrainConfig};
use crate::masking::MaskingPolicy;
use crate::model::EncoderModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LotteryConfig {
    pub rounds: usize,
    pub prune_rate: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for LotteryConfig {
    fn default() -> Self {
        Self {
            rounds: 4,
            prune_rate: 0.2,
            seed: 1,
            train: TrainConfig::default(),
        }
    }
}

impl LotteryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if !(self.prune_rate > 0.0 && self.prune_rate < 1.0) {
            return Err(Error::config("prune_rate", format!("{} is outside (0, 1)", self.prune_rate)));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryPoint {
    pub round: usize,
    /// Pruned fraction of the prunable set.
    pub sparsity: f64,
    /// `1 − (1 − prune_rate)^round`.
    pub target_sparsity: f64,
    pub f1: f64,
    /// Digest of the surviving weights at the start of the round, taken
    /// from the live model and from the stored init.
    pub rewind_digest: String,
    pub init_digest: String,
}

impl LotteryPoint {
    pub fn rewound(&self) -> bool {
        self.rewind_digest == self.init_digest
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryCurve {
    pub prunable: usize,
    pub points: Vec<LotteryPoint>,
}

/// Survivors after `round` rounds: `n·(1−p)^round`, rounded to the nearest
/// integer, so the pruned fraction follows the closed form up to `1/(2n)`.
pub fn survivors_after(n: usize, prune_rate: f64, round: usize) -> usize {
    let exact = n as f64 * (1.0 - prune_rate).powi(round as i32);
    (exact.round() as usize).min(n)
}

fn survivor_digest(model: &EncoderModel, keep: &[Option<Vec<bool>>]) -> String {
    let mut h = Sha256::new();
    for (p, k) in model.params().iter().zip(keep) {
        if let Some(k) = k {
            h.update(p.name.as_bytes());
            for (v, &on) in p.value.data().iter().zip(k) {
                if on {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Rewinds every parameter to `init` and zeroes pruned entries.
fn rewind(init: &EncoderModel, keep: &[Option<Vec<bool>>]) -> EncoderModel {
    let mut m = init.clone();
    for (p, k) in m.params_mut().iter_mut().zip(keep) {
        if let Some(k) = k {
            for (v, &on) in p.value.data_mut().iter_mut().zip(k) {
                if !on {
                    *v = 0.0;
                }
            }
        }
    }
    m
}

/// Iterative magnitude pruning with rewinding. Round 0 trains the dense
/// model from `init`; each later round removes the smallest-magnitude
/// surviving weights, pooled over all masked-policy tensors, rewinds the
/// survivors to `init` and retrains.
pub fn lottery_baseline(init: &EncoderModel, task: &PreparedTask, cfg: &LotteryConfig) -> Result<LotteryCurve> {
    cfg.validate()?;
    let policy = MaskingPolicy::default();
    let mut init = init.clone();
    init.reinit_classifier(sub_seed(cfg.seed, HEAD_STREAM));
    let mut keep: Vec<Option<Vec<bool>>> = init
        .params()
        .iter()
        .map(|p| policy.is_masked(p.role).then(|| vec![true; p.len()]))
        .collect();
    let prunable: usize = keep.iter().flatten().map(Vec::len).sum();
    if prunable == 0 {
        return Err(Error::Contract("no prunable tensors under the masking policy".into()));
    }

    let mut points = Vec::with_capacity(cfg.rounds + 1);
    for round in 0..=cfg.rounds {
        let start = rewind(&init, &keep);
        let rewind_digest = survivor_digest(&start, &keep);
        let init_digest = survivor_digest(&init, &keep);
        if rewind_digest != init_digest {
            return Err(Error::Contract(format!("round {round}: survivors differ from init")));
        }
        let alive: usize = keep.iter().flatten().map(|k| k.iter().filter(|&&b| b).count()).sum();
        let (trained, report, _) = train_dense(&cfg.train, cfg.seed, start, Some(&keep), task)?;
        points.push(LotteryPoint {
            round,
            sparsity: 1.0 - alive as f64 / prunable as f64,
            target_sparsity: 1.0 - (1.0 - cfg.prune_rate).powi(round as i32),
            f1: report.f1,
            rewind_digest,
            init_digest,
        });
        if round == cfg.rounds {
            break;
        }

        let target = survivors_after(prunable, cfg.prune_rate, round + 1);
        let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(alive);
        for (t, (p, k)) in trained.params().iter().zip(&keep).enumerate() {
            if let Some(k) = k {
                for (i, (&v, &on)) in p.value.data().iter().zip(k).enumerate() {
                    if on {
                        ranked.push((v.abs(), t, i));
                    }
                }
            }
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, t, i) in &ranked[..alive - target] {
            if let Some(k) = &mut keep[t] {
                k[i] = false;
            }
        }
    }
    Ok(LotteryCurve { prunable, points })
}
