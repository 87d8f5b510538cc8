//! Minibatch training of the reward head.
//!
//! Update `t` consumes positions `t·B .. t·B + B` of an endless stream made
//! by concatenating per-epoch permutations of the training pairs. The
//! permutation for epoch `e` and the dropout masks for update `t` come from
//! independent seeded streams, so training resumed from a checkpoint follows
//! exactly the same trajectory as an uninterrupted run.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::pair_loss_from_delta;
use super::optim::{AdamW, AdamWConfig};
use super::{HeadArchitecture, HeadError, HeadParameters, MaskPolicy, RewardHead};
use crate::embedding::EmbeddingTable;
use crate::pairgen::ComparisonPair;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    /// Pairs per minibatch.
    pub batch_size: usize,
    pub total_updates: u64,
    pub seed: u64,
    pub dropout_enabled: bool,
    /// Use one dropout mask for both members of a pair.
    pub shared_dropout_mask: bool,
    /// Weight each image in a batch equally instead of each pair.
    pub per_image_weighting: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.01,
            batch_size: 64,
            total_updates: 20_000,
            seed: 0,
            dropout_enabled: true,
            shared_dropout_mask: false,
            per_image_weighting: false,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |m: String| Err(HeadError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} {b} outside (0, 1)"));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be > 0".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Comparison pairs resolved against embeddings: a dense matrix of distinct
/// caption vectors plus row indices per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    dim: usize,
    rows: Vec<f64>,
    pairs: Vec<(u32, u32)>,
    image_of: Vec<u32>,
}

impl PairData {
    pub fn build(pairs: &[ComparisonPair], table: &EmbeddingTable) -> Result<Self, HeadError> {
        let dim = table.dimension().unwrap_or(0);
        let mut row_of: HashMap<(&str, &str), u32> = HashMap::new();
        let mut image_ix: HashMap<&str, u32> = HashMap::new();
        let mut rows = Vec::new();
        let mut out = Vec::with_capacity(pairs.len());
        let mut image_of = Vec::with_capacity(pairs.len());
        let mut missing = Vec::new();
        let mut missing_count = 0;
        for p in pairs {
            let mut resolved = [None, None];
            for (slot, cap) in resolved.iter_mut().zip([&p.preferred, &p.dispreferred]) {
                let key = (p.image_id.as_str(), cap.as_str());
                *slot = match row_of.get(&key) {
                    Some(&r) => Some(r),
                    None => table.caption(&p.image_id, cap).map(|v| {
                        let r = (rows.len() / dim.max(1)) as u32;
                        rows.extend(v.iter().map(|&x| x as f64));
                        row_of.insert(key, r);
                        r
                    }),
                };
            }
            let [a, b] = resolved;
            match (a, b) {
                (Some(a), Some(b)) => {
                    out.push((a, b));
                    let next = image_ix.len() as u32;
                    image_of.push(*image_ix.entry(p.image_id.as_str()).or_insert(next));
                }
                _ => {
                    missing_count += 1;
                    if missing.len() < 5 {
                        missing.push(format!(
                            "{}:{}>{} ({})",
                            p.image_id, p.preferred, p.dispreferred, p.record_id
                        ));
                    }
                }
            }
        }
        if missing_count > 0 {
            return Err(HeadError::MissingEmbedding {
                count: missing_count,
                examples: missing,
            });
        }
        Ok(PairData {
            dim,
            rows,
            pairs: out,
            image_of,
        })
    }

    /// Builds pair data from preferred/dispreferred vectors directly.
    pub fn from_vectors(dim: usize, pairs: &[(Vec<f64>, Vec<f64>, u32)]) -> Result<Self, HeadError> {
        let mut rows = Vec::with_capacity(pairs.len() * 2 * dim);
        let mut out = Vec::with_capacity(pairs.len());
        let mut image_of = Vec::with_capacity(pairs.len());
        for (i, (a, b, img)) in pairs.iter().enumerate() {
            for v in [a, b] {
                if v.len() != dim {
                    return Err(HeadError::DimensionMismatch {
                        expected: dim,
                        found: v.len(),
                    });
                }
                rows.extend_from_slice(v);
            }
            out.push((2 * i as u32, 2 * i as u32 + 1));
            image_of.push(*img);
        }
        Ok(PairData {
            dim,
            rows,
            pairs: out,
            image_of,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    fn row(&self, r: u32) -> &[f64] {
        let r = r as usize;
        &self.rows[r * self.dim..(r + 1) * self.dim]
    }

    /// Fraction of pairs the head orders strictly correctly (eval mode).
    pub fn pairwise_accuracy(&self, head: &RewardHead) -> Result<f64, HeadError> {
        if self.pairs.is_empty() {
            return Ok(0.0);
        }
        let scores = head.score_rows(self.rows.clone())?;
        let correct = self
            .pairs
            .iter()
            .filter(|&&(a, b)| scores[a as usize] > scores[b as usize])
            .count();
        Ok(correct as f64 / self.pairs.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub update: u64,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_pairwise_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            s.push('\n');
        }
        s
    }
}

pub struct Trainer {
    head: RewardHead,
    opt: AdamW,
    config: TrainConfig,
    grads: HeadParameters,
    epoch: Option<(u64, Vec<u32>)>,
    loss_sum: f64,
    loss_count: u64,
}

impl Trainer {
    pub fn new(arch: HeadArchitecture, config: TrainConfig) -> Result<Self, HeadError> {
        config.validate()?;
        let head = RewardHead::init(arch, config.seed)?;
        let opt = AdamW::new(config.adamw(), head.architecture());
        Ok(Self::assemble(head, opt, config))
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, HeadError> {
        ckpt.config.validate()?;
        let Checkpoint {
            architecture,
            config,
            update,
            params,
            adam_m,
            adam_v,
        } = ckpt;
        let head = RewardHead::new(architecture, params)?;
        let opt = AdamW {
            config: config.adamw(),
            step: update,
            m: adam_m,
            v: adam_v,
        };
        Ok(Self::assemble(head, opt, config))
    }

    fn assemble(head: RewardHead, opt: AdamW, config: TrainConfig) -> Self {
        let grads = HeadParameters::zeros(head.architecture());
        Trainer {
            head,
            opt,
            config,
            grads,
            epoch: None,
            loss_sum: 0.0,
            loss_count: 0,
        }
    }

    pub fn head(&self) -> &RewardHead {
        &self.head
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Updates applied so far.
    pub fn update_count(&self) -> u64 {
        self.opt.step
    }

    /// Changes the stopping point, e.g. to extend a resumed run.
    pub fn set_total_updates(&mut self, total: u64) {
        self.config.total_updates = total;
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            architecture: self.head.architecture().clone(),
            config: self.config.clone(),
            update: self.opt.step,
            params: self.head.parameters().clone(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }

    fn pair_at(&mut self, position: u64, n: usize) -> u32 {
        let epoch = position / n as u64;
        let stale = !matches!(&self.epoch, Some((e, _)) if *e == epoch);
        if stale {
            let mut perm: Vec<u32> = (0..n as u32).collect();
            perm.shuffle(&mut rng::stream(self.config.seed, Domain::Epoch, epoch));
            self.epoch = Some((epoch, perm));
        }
        let perm = &self.epoch.as_ref().expect("permutation set above").1;
        perm[(position % n as u64) as usize]
    }

    /// One AdamW update on the next minibatch; returns the batch mean loss.
    pub fn step(&mut self, data: &PairData) -> Result<f64, HeadError> {
        let n = data.len();
        if n == 0 {
            return Err(HeadError::EmptyTrainingSet);
        }
        if data.dimension() != self.head.input_dim() {
            return Err(HeadError::DimensionMismatch {
                expected: self.head.input_dim(),
                found: data.dimension(),
            });
        }
        let t = self.opt.step;
        let b = self.config.batch_size;
        let start = t * b as u64;
        let batch: Vec<u32> = (0..b as u64).map(|i| self.pair_at(start + i, n)).collect();

        let d = data.dimension();
        let mut x = vec![0.0; 2 * b * d];
        for (i, &p) in batch.iter().enumerate() {
            let (pref, disp) = data.pairs[p as usize];
            x[i * d..(i + 1) * d].copy_from_slice(data.row(pref));
            x[(b + i) * d..(b + i + 1) * d].copy_from_slice(data.row(disp));
        }

        let weights = self.batch_weights(data, &batch);
        let mut drop_rng = rng::stream(self.config.seed, Domain::Dropout, t);
        let policy = if self.config.shared_dropout_mask {
            MaskPolicy::SharedPairs
        } else {
            MaskPolicy::Independent
        };
        let dropout = self
            .config
            .dropout_enabled
            .then_some((&mut drop_rng as &mut dyn rand::RngCore, policy));
        let (scores, cache) = self.head.forward_batch(x, dropout, true)?;

        let mut d_out = vec![0.0; 2 * b];
        let mut total = 0.0;
        for i in 0..b {
            let delta = scores[i] - scores[b + i];
            let (loss, g) = pair_loss_from_delta(delta)?;
            total += weights[i] * loss;
            d_out[i] = weights[i] * g;
            d_out[b + i] = -weights[i] * g;
        }
        self.head
            .backward_batch(&cache.expect("cache requested"), &d_out, &mut self.grads);
        if !self.grads.all_finite() {
            return Err(HeadError::NonFiniteLoss { delta: f64::NAN });
        }
        self.opt.update(self.head.parameters_mut(), &self.grads);
        self.loss_sum += total;
        self.loss_count += 1;
        Ok(total)
    }

    fn batch_weights(&self, data: &PairData, batch: &[u32]) -> Vec<f64> {
        let b = batch.len() as f64;
        if !self.config.per_image_weighting {
            return vec![1.0 / b; batch.len()];
        }
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &p in batch {
            *counts.entry(data.image_of[p as usize]).or_default() += 1;
        }
        let images = counts.len() as f64;
        batch
            .iter()
            .map(|&p| 1.0 / (images * counts[&data.image_of[p as usize]] as f64))
            .collect()
    }

    /// Trains until `total_updates`, logging every `log_every` updates.
    ///
    /// A non-finite loss or activation aborts with `DivergedTraining`
    /// carrying the state before the failing update.
    pub fn run(
        &mut self,
        train: &PairData,
        holdout: Option<&PairData>,
        log: &mut TrainLog,
    ) -> Result<(), HeadError> {
        while self.opt.step < self.config.total_updates {
            match self.step(train) {
                Ok(_) => {}
                // `step` fails before touching any state, so the current
                // state is the last finite one.
                Err(e @ (HeadError::NonFiniteLoss { .. } | HeadError::NonFiniteActivation { .. })) => {
                    tracing::error!("training diverged: {e}");
                    return Err(HeadError::DivergedTraining {
                        update: self.opt.step,
                        last_finite: Box::new(self.checkpoint()),
                    });
                }
                Err(e) => return Err(e),
            }
            if self.opt.step.is_multiple_of(self.config.log_every) || self.opt.step == self.config.total_updates {
                let entry = TrainLogEntry {
                    update: self.opt.step,
                    mean_loss: self.loss_sum / self.loss_count.max(1) as f64,
                    holdout_pairwise_accuracy: holdout
                        .filter(|h| !h.is_empty())
                        .map(|h| h.pairwise_accuracy(&self.head))
                        .transpose()?,
                };
                tracing::info!(
                    update = entry.update,
                    loss = entry.mean_loss,
                    holdout = ?entry.holdout_pairwise_accuracy,
                    "train"
                );
                log.entries.push(entry);
                self.loss_sum = 0.0;
                self.loss_count = 0;
            }
        }
        Ok(())
    }
}

/// Trains a freshly initialised head.
pub fn train(
    arch: HeadArchitecture,
    config: TrainConfig,
    train_pairs: &PairData,
    holdout: Option<&PairData>,
) -> Result<(Checkpoint, TrainLog), HeadError> {
    let mut trainer = Trainer::new(arch, config)?;
    let mut log = TrainLog::default();
    trainer.run(train_pairs, holdout, &mut log)?;
    Ok((trainer.checkpoint(), log))
}
