//! Policy-gradient training over frozen, pre-computed embeddings.
//!
//! Each step samples a group of masks per document, pools and rewards every
//! rollout with the inverse-retrieval NDCG, centers rewards within the
//! group to get advantages, and applies one advantage-weighted
//! log-likelihood update with decoupled weight decay, global-norm clipping,
//! and plateau-based learning-rate halving.
//!
//! Rollouts draw from counter-keyed random streams
//! `(seed, step, doc ordinal, rollout ordinal)` and all reductions run in a
//! fixed order, so a run is bitwise reproducible at any thread count.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{apply_update, clip_global_norm, AdamHyper, OptimizerState};
use crate::policy::{self, PolicyGrad, PolicyOutput, PolicyParams};
use crate::pooling::{self, KeepMask, PoolKind};
use crate::reward::{self, PooledSet, RankedList, RewardSpec};
use crate::rng::StreamRng;
use crate::store::{collection_dim, MultiVectorDoc, MultiVectorQuery, Qrels};

pub const OPTIMIZER_BIN: &str = "optimizer.bin";
pub const RUN_STATE_JSON: &str = "run_state.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Minimum validation improvement that resets plateau patience.
const PLATEAU_MIN_DELTA: f64 = 1e-4;
/// Greedy keep threshold used for validation-time compression.
const VALIDATE_THRESHOLD: f64 = 0.5;

/// All training hyperparameters. Every field can come from the run config
/// file; CLI flags override individual entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Rollouts sampled per document per step.
    pub group_size: usize,
    /// Documents per training step.
    pub batch_docs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 norm ceiling for the clipped gradient.
    pub clip_norm: f64,
    /// NDCG cutoff for both the reward and validation.
    pub ndcg_k: usize,
    /// `None` ranks rewards against every training query; `Some(n)` against
    /// all positives plus `n` sampled negatives.
    pub candidate_pool_size: Option<usize>,
    pub max_steps: usize,
    pub validate_every: usize,
    /// Validations without improvement before the learning rate halves.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub seed: u64,
    /// Divide centered advantages by the population std (off by default).
    pub advantage_std_normalize: bool,
    /// Optional entropy bonus coefficient (0 disables it).
    pub entropy_coeff: f64,
    pub pool: PoolKind,
    /// Attention heads in the policy.
    pub heads: usize,
    /// Fraction of documents held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 8,
            batch_docs: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            ndcg_k: 3,
            candidate_pool_size: None,
            max_steps: 2000,
            validate_every: 50,
            plateau_patience: 5,
            plateau_factor: 0.5,
            min_lr: 1e-6,
            seed: 42,
            advantage_std_normalize: false,
            entropy_coeff: 0.0,
            pool: PoolKind::Mean,
            heads: 8,
            val_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.batch_docs == 0 || self.max_steps == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "batch_docs, max_steps and validate_every must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.min_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0, 1)".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.ndcg_k == 0 || self.heads == 0 || self.plateau_patience == 0 {
            return Err(Error::Config(
                "ndcg_k, heads and plateau_patience must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("bad weight_decay or clip_norm".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    /// Hash of the canonical serialization; stored in checkpoints so a
    /// resume under a different configuration is rejected. The step budget
    /// is excluded: extending `max_steps` on resume continues the same run.
    pub fn config_hash(&self) -> String {
        let mut identity = self.clone();
        identity.max_steps = 0;
        let json = serde_json::to_string(&identity).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One sampled mask with its pooled vector, reward, and group advantage.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub mask: KeepMask,
    pub log_prob: f64,
    pub v_pool: Array1<f64>,
    pub reward: f64,
    pub advantage: f64,
}

/// Group-centered advantages; optionally divided by the population std.
pub fn compute_advantages(rewards: &[f64], std_normalize: bool) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if std_normalize {
        let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
        for a in &mut adv {
            *a /= std + 1e-8;
        }
    }
    adv
}

/// Replays the plateau rule over a validation history and returns the
/// learning rate after the last entry: the rate halves (down to `min_lr`)
/// whenever the best score fails to improve for `plateau_patience`
/// consecutive validations, and the patience counter resets on both
/// improvement and halving.
pub fn plateau_lr(history: &[f64], cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.learning_rate;
    let mut best = f64::NEG_INFINITY;
    let mut streak = 0usize;
    for &score in history {
        if score > best + PLATEAU_MIN_DELTA {
            best = score;
            streak = 0;
        } else {
            streak += 1;
            if streak >= cfg.plateau_patience {
                lr = (lr * cfg.plateau_factor).max(cfg.min_lr);
                streak = 0;
            }
        }
    }
    lr
}

/// Metrics emitted once per training step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub mean_reward: f64,
    pub kept_fraction: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub val_ndcg: Option<f64>,
}

/// Summary of a completed run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_val: Option<f64>,
    pub best_val: Option<f64>,
    pub val_history: Vec<f64>,
    pub initial_kept_fraction: f64,
    pub final_kept_fraction: f64,
    pub skipped_docs: usize,
}

#[derive(Serialize, Deserialize)]
struct RunState {
    step: u64,
    lr: f64,
    val_history: Vec<f64>,
    kept_history: Vec<f64>,
    skipped_docs: usize,
    config_hash: String,
    policy_sha256: String,
    optimizer_sha256: String,
}

struct DocStepOutcome {
    grad: PolicyGrad,
    loss: f64,
    reward_sum: f64,
    kept_sum: f64,
}

/// Owns the policy, optimizer, and frozen data for one training run.
pub struct Trainer {
    cfg: TrainConfig,
    params: PolicyParams,
    opt: OptimizerState,
    docs: Vec<MultiVectorDoc>,
    /// Positive query ids per document, aligned with `docs`.
    positives: Vec<BTreeSet<String>>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    train_pool: PooledSet,
    val_queries: Vec<MultiVectorQuery>,
    qrels: Qrels,
    completed: u64,
    lr: f64,
    val_history: Vec<f64>,
    kept_history: Vec<f64>,
    skipped_docs: usize,
}

impl Trainer {
    /// Builds a trainer: splits documents into train/validation with a
    /// seeded shuffle, pools the training-query candidate pool, and
    /// initializes the policy. Documents without positive queries are
    /// dropped from the training schedule with a warning.
    pub fn new(
        docs: Vec<MultiVectorDoc>,
        queries: Vec<MultiVectorQuery>,
        qrels: Qrels,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let dim = collection_dim(&docs)?;
        if qrels.is_empty() {
            return Err(Error::EmptyInput("no relevance judgments".into()));
        }

        let positives: Vec<BTreeSet<String>> = docs
            .iter()
            .map(|d| qrels.positives_for_doc(&d.doc_id))
            .collect();

        // seeded train/validation split over document ordinals
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut StreamRng::derive(cfg.seed, "split", &[]));
        let val_count = ((docs.len() as f64 * cfg.val_fraction).round() as usize)
            .clamp(1, docs.len().saturating_sub(1));
        let mut val_idx = order[..val_count].to_vec();
        let mut train_candidates = order[val_count..].to_vec();
        val_idx.sort_unstable();
        train_candidates.sort_unstable();

        let mut train_idx = Vec::with_capacity(train_candidates.len());
        let mut skipped = 0usize;
        for idx in train_candidates {
            if positives[idx].is_empty() {
                log::warn!("doc {} has no positive queries; skipped", docs[idx].doc_id);
                skipped += 1;
            } else {
                train_idx.push(idx);
            }
        }
        if train_idx.is_empty() {
            return Err(Error::Config(
                "no trainable documents with positive queries".into(),
            ));
        }

        let train_doc_ids: BTreeSet<&str> =
            train_idx.iter().map(|&i| docs[i].doc_id.as_str()).collect();
        let val_doc_ids: BTreeSet<&str> =
            val_idx.iter().map(|&i| docs[i].doc_id.as_str()).collect();

        let is_relevant_to = |q: &MultiVectorQuery, ids: &BTreeSet<&str>| {
            qrels
                .docs_for(&q.query_id)
                .is_some_and(|row| row.iter().any(|(d, g)| *g >= 1 && ids.contains(d.as_str())))
        };
        let train_queries: Vec<MultiVectorQuery> = queries
            .iter()
            .filter(|q| is_relevant_to(q, &train_doc_ids))
            .cloned()
            .collect();
        let val_queries: Vec<MultiVectorQuery> = queries
            .iter()
            .filter(|q| is_relevant_to(q, &val_doc_ids))
            .cloned()
            .collect();
        if train_queries.is_empty() {
            return Err(Error::Config(
                "no training queries resolve to training documents".into(),
            ));
        }
        if val_queries.is_empty() {
            return Err(Error::Config("validation split has no queries".into()));
        }
        let train_pool = PooledSet::from_queries(&train_queries, cfg.pool)?;
        if train_pool.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: train_pool.dim(),
            });
        }

        let params = PolicyParams::init(
            dim,
            cfg.heads,
            &mut StreamRng::derive(cfg.seed, "init", &[]),
        )?;
        let opt = OptimizerState::zeros(params.data().len());
        let lr = cfg.learning_rate;

        Ok(Trainer {
            cfg,
            params,
            opt,
            docs,
            positives,
            train_idx,
            val_idx,
            train_pool,
            val_queries,
            qrels,
            completed: 0,
            lr,
            val_history: Vec::new(),
            kept_history: Vec::new(),
            skipped_docs: skipped,
        })
    }

    /// Restores a run from a checkpoint directory. The stored config hash
    /// and per-file checksums must match.
    pub fn resume(
        docs: Vec<MultiVectorDoc>,
        queries: Vec<MultiVectorQuery>,
        qrels: Qrels,
        cfg: TrainConfig,
        checkpoint: &Path,
    ) -> Result<Self> {
        let state: RunState = serde_json::from_reader(std::io::BufReader::new(fs::File::open(
            checkpoint.join(RUN_STATE_JSON),
        )?))?;
        if state.config_hash != cfg.config_hash() {
            return Err(Error::IncompatibleCheckpoint(
                "config hash does not match the checkpoint".into(),
            ));
        }
        let policy_bytes = fs::read(checkpoint.join(policy::POLICY_BIN))?;
        if hex_digest(&policy_bytes) != state.policy_sha256 {
            return Err(Error::CorruptStore("policy.bin checksum mismatch".into()));
        }
        let opt_bytes = fs::read(checkpoint.join(OPTIMIZER_BIN))?;
        if hex_digest(&opt_bytes) != state.optimizer_sha256 {
            return Err(Error::CorruptStore(
                "optimizer.bin checksum mismatch".into(),
            ));
        }

        let mut trainer = Trainer::new(docs, queries, qrels, cfg)?;
        trainer.params = policy::load_policy(checkpoint)?;
        trainer.opt =
            OptimizerState::load(&checkpoint.join(OPTIMIZER_BIN), trainer.params.data().len())?;
        trainer.completed = state.step;
        trainer.lr = state.lr;
        trainer.val_history = state.val_history;
        trainer.kept_history = state.kept_history;
        trainer.skipped_docs = state.skipped_docs;
        Ok(trainer)
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// Mutable access to the policy, e.g. for warm starts.
    pub fn params_mut(&mut self) -> &mut PolicyParams {
        &mut self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn completed_steps(&self) -> u64 {
        self.completed
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn skipped_docs(&self) -> usize {
        self.skipped_docs
    }

    pub fn train_doc_count(&self) -> usize {
        self.train_idx.len()
    }

    pub fn val_doc_count(&self) -> usize {
        self.val_idx.len()
    }

    fn reward_spec(&self) -> RewardSpec {
        RewardSpec {
            k: self.cfg.ndcg_k,
            candidate_pool_size: self.cfg.candidate_pool_size,
        }
    }

    /// The documents scheduled for a given 0-based step: a seeded
    /// per-epoch shuffle consumed in fixed-size slices.
    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let per_epoch = self.train_idx.len().div_ceil(self.cfg.batch_docs) as u64;
        let epoch = step / per_epoch;
        let slot = (step % per_epoch) as usize;
        let mut order = self.train_idx.clone();
        order.shuffle(&mut StreamRng::derive(self.cfg.seed, "shuffle", &[epoch]));
        let lo = slot * self.cfg.batch_docs;
        let hi = (lo + self.cfg.batch_docs).min(order.len());
        order[lo..hi].to_vec()
    }

    /// Samples `group_size` rollouts for one document at one step and fills
    /// in group-centered advantages.
    pub fn rollout_group(&self, doc_idx: usize, step: u64) -> Result<Vec<Rollout>> {
        let out = policy::forward(&self.params, self.docs[doc_idx].vectors.view())?;
        self.rollout_group_from(&out, doc_idx, step)
    }

    fn rollout_group_from(
        &self,
        out: &PolicyOutput,
        doc_idx: usize,
        step: u64,
    ) -> Result<Vec<Rollout>> {
        let doc = &self.docs[doc_idx];
        let positives = &self.positives[doc_idx];
        if positives.is_empty() {
            return Err(Error::Validation(format!(
                "doc {} has no positive queries",
                doc.doc_id
            )));
        }
        let spec = self.reward_spec();
        let mut rollouts = Vec::with_capacity(self.cfg.group_size);
        for g in 0..self.cfg.group_size {
            let mut rng =
                StreamRng::derive(self.cfg.seed, "rollout", &[step, doc_idx as u64, g as u64]);
            let (mask, log_prob) = policy::sample_mask(out, &mut rng);
            let v_pool = pooling::pool(doc.vectors.view(), &mask, self.cfg.pool)?;
            // one candidate sample per (step, doc): the whole group ranks
            // against the same negatives
            let mut pool_rng = StreamRng::derive(self.cfg.seed, "negpool", &[step, doc_idx as u64]);
            let reward = reward::inverse_retrieval_reward(
                v_pool.view(),
                positives,
                &self.train_pool,
                &spec,
                &mut pool_rng,
            )?;
            rollouts.push(Rollout {
                mask,
                log_prob,
                v_pool,
                reward,
                advantage: 0.0,
            });
        }
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = compute_advantages(&rewards, self.cfg.advantage_std_normalize);
        for (r, a) in rollouts.iter_mut().zip(advantages) {
            r.advantage = a;
        }
        Ok(rollouts)
    }

    fn doc_step(&self, doc_idx: usize, step: u64) -> Result<DocStepOutcome> {
        let doc = &self.docs[doc_idx];
        let out = policy::forward(&self.params, doc.vectors.view())?;
        let rollouts = self.rollout_group_from(&out, doc_idx, step)?;

        let masks: Vec<KeepMask> = rollouts.iter().map(|r| r.mask.clone()).collect();
        let coeffs: Vec<f64> = rollouts.iter().map(|r| r.advantage).collect();
        let mut grad = policy::backward(&self.params, &out, &masks, &coeffs)?;

        let group = self.cfg.group_size as f64;
        let mut loss = -rollouts
            .iter()
            .map(|r| r.advantage * r.log_prob)
            .sum::<f64>()
            / group;

        if self.cfg.entropy_coeff != 0.0 {
            let n = out.len();
            let mut dlogits = Array1::<f64>::zeros(n);
            for t in 0..n {
                let l = out.logits[t];
                let p = out.keep_probs[t];
                // d(-coeff * entropy)/d logit = coeff * l * p * (1-p)
                dlogits[t] = self.cfg.entropy_coeff * l * p * (1.0 - p);
            }
            let ent_grad = policy::backward_logits(&self.params, &out, dlogits.view())?;
            grad.add_scaled(&ent_grad, 1.0);
            loss -= self.cfg.entropy_coeff * policy::total_entropy(&out);
        }

        Ok(DocStepOutcome {
            grad,
            loss,
            reward_sum: rollouts.iter().map(|r| r.reward).sum(),
            kept_sum: rollouts.iter().map(|r| r.mask.kept_fraction()).sum(),
        })
    }

    /// Runs one optimizer step over the scheduled batch. Rollouts and
    /// per-document gradients run in parallel; accumulation happens
    /// serially in batch order.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.completed;
        let batch = self.batch_indices(step);
        let outcomes: Vec<DocStepOutcome> = batch
            .par_iter()
            .map(|&doc_idx| self.doc_step(doc_idx, step))
            .collect::<Result<_>>()?;

        let batch_len = batch.len() as f64;
        let mut grad = PolicyGrad::zeros(self.params.dim());
        let mut loss = 0.0;
        let mut reward_sum = 0.0;
        let mut kept_sum = 0.0;
        for outcome in &outcomes {
            grad.add_scaled(&outcome.grad, 1.0 / batch_len);
            loss += outcome.loss / batch_len;
            reward_sum += outcome.reward_sum;
            kept_sum += outcome.kept_sum;
        }

        let grad_norm = clip_global_norm(grad.data_mut(), self.cfg.clip_norm);
        apply_update(
            &mut self.opt,
            self.params.data_mut(),
            grad.data(),
            self.lr,
            &self.cfg.adam(),
        )
        .map_err(|e| {
            log::error!("training halted at step {}: {e}", step + 1);
            e
        })?;

        self.completed += 1;
        let rollout_count = batch_len * self.cfg.group_size as f64;
        let kept_fraction = kept_sum / rollout_count;
        self.kept_history.push(kept_fraction);
        Ok(StepMetrics {
            step: self.completed,
            loss,
            mean_reward: reward_sum / rollout_count,
            kept_fraction,
            grad_norm,
            lr: self.lr,
            val_ndcg: None,
        })
    }

    /// Forward retrieval over the held-out split: validation documents are
    /// compressed with the greedy mask and retrieved by their pooled
    /// queries; returns mean NDCG@k over validation queries.
    ///
    /// Scoring is cosine (both sides L2-normalized). Masks of different
    /// sizes change the pooled norm, and raw inner products would rank by
    /// that artifact instead of direction; the scheduler needs a metric
    /// that tracks retrieval quality.
    pub fn validate(&self) -> Result<f64> {
        if self.val_idx.is_empty() || self.val_queries.is_empty() {
            return Err(Error::Config("empty validation set".into()));
        }
        let mut ids = Vec::with_capacity(self.val_idx.len());
        let mut vectors = ndarray::Array2::<f64>::zeros((self.val_idx.len(), self.params.dim()));
        for (row, &idx) in self.val_idx.iter().enumerate() {
            let doc = &self.docs[idx];
            let out = policy::forward(&self.params, doc.vectors.view())?;
            let mask = policy::greedy_mask(&out, VALIDATE_THRESHOLD)?;
            vectors
                .row_mut(row)
                .assign(&pooling::pool(doc.vectors.view(), &mask, self.cfg.pool)?);
            ids.push(doc.doc_id.clone());
        }
        let mut doc_pool = PooledSet::new(ids, vectors)?;
        doc_pool.normalize();
        let val_doc_ids: BTreeSet<&str> = self
            .val_idx
            .iter()
            .map(|&i| self.docs[i].doc_id.as_str())
            .collect();

        let mut query_pool = PooledSet::from_queries(&self.val_queries, self.cfg.pool)?;
        query_pool.normalize();
        let scores: Vec<f64> = (0..query_pool.len())
            .into_par_iter()
            .map(|qi| -> Result<f64> {
                let relevant: std::collections::BTreeMap<String, u32> = self
                    .qrels
                    .docs_for(&self.val_queries[qi].query_id)
                    .map(|row| {
                        row.iter()
                            .filter(|(d, _)| val_doc_ids.contains(d.as_str()))
                            .map(|(d, g)| (d.clone(), *g))
                            .collect()
                    })
                    .unwrap_or_default();
                let scored: Vec<(String, f64)> = (0..doc_pool.len())
                    .map(|di| {
                        reward::similarity(query_pool.vector(qi), doc_pool.vector(di))
                            .map(|s| (doc_pool.ids()[di].clone(), s))
                    })
                    .collect::<Result<_>>()?;
                let ranking = RankedList::from_scores(scored)?;
                Ok(reward::ndcg_at_k(&ranking, &relevant, self.cfg.ndcg_k))
            })
            .collect::<Result<_>>()?;
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Writes `policy.json`, `policy.bin`, `optimizer.bin`, and
    /// `run_state.json` under `dir` via write-temp-then-rename.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let staging = dir.join(".staging");
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;

        policy::save_policy(&self.params, &staging)?;
        self.opt.save(&staging.join(OPTIMIZER_BIN))?;
        let state = RunState {
            step: self.completed,
            lr: self.lr,
            val_history: self.val_history.clone(),
            kept_history: self.kept_history.clone(),
            skipped_docs: self.skipped_docs,
            config_hash: self.cfg.config_hash(),
            policy_sha256: hex_digest(&fs::read(staging.join(policy::POLICY_BIN))?),
            optimizer_sha256: hex_digest(&fs::read(staging.join(OPTIMIZER_BIN))?),
        };
        let mut sf = fs::File::create(staging.join(RUN_STATE_JSON))?;
        serde_json::to_writer_pretty(&mut sf, &state)?;
        sf.write_all(b"\n")?;
        sf.sync_all()?;

        for name in [
            policy::POLICY_JSON,
            policy::POLICY_BIN,
            OPTIMIZER_BIN,
            RUN_STATE_JSON,
        ] {
            fs::rename(staging.join(name), dir.join(name))?;
        }
        fs::remove_dir_all(&staging)?;
        Ok(())
    }

    /// Runs the loop up to `max_steps`, validating every `validate_every`
    /// steps, updating the learning rate from the plateau rule, appending
    /// metrics rows, and checkpointing at each validation and at the end.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainSummary> {
        let mut csv = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(METRICS_CSV);
                let fresh = !path.exists() || self.completed == 0;
                let mut file = fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)?;
                if fresh {
                    writeln!(
                        file,
                        "step,loss,mean_reward,kept_fraction,grad_norm,lr,val_ndcg3"
                    )?;
                }
                Some(file)
            }
            None => None,
        };

        while self.completed < self.cfg.max_steps as u64 {
            let mut metrics = self.train_step()?;
            if self
                .completed
                .is_multiple_of(self.cfg.validate_every as u64)
            {
                let val = self.validate()?;
                self.val_history.push(val);
                self.lr = plateau_lr(&self.val_history, &self.cfg);
                metrics.val_ndcg = Some(val);
                log::info!(
                    "step {}: val ndcg@{} {:.4}, lr {:.2e}",
                    self.completed,
                    self.cfg.ndcg_k,
                    val,
                    self.lr
                );
                if let Some(dir) = out_dir {
                    self.save_checkpoint(&dir.join(CHECKPOINT_DIR))?;
                }
            }
            if let Some(file) = csv.as_mut() {
                let val = metrics.val_ndcg.map(|v| v.to_string()).unwrap_or_default();
                writeln!(
                    file,
                    "{},{},{},{},{},{},{}",
                    metrics.step,
                    metrics.loss,
                    metrics.mean_reward,
                    metrics.kept_fraction,
                    metrics.grad_norm,
                    metrics.lr,
                    val
                )?;
            }
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(&dir.join(CHECKPOINT_DIR))?;
        }

        let window = 10usize.min(self.kept_history.len());
        let initial = self.kept_history.iter().take(window).sum::<f64>() / window.max(1) as f64;
        let final_kept =
            self.kept_history.iter().rev().take(window).sum::<f64>() / window.max(1) as f64;
        Ok(TrainSummary {
            steps: self.completed,
            final_val: self.val_history.last().copied(),
            best_val: self
                .val_history
                .iter()
                .copied()
                .fold(None, |acc: Option<f64>, v| {
                    Some(acc.map_or(v, |a| a.max(v)))
                }),
            val_history: self.val_history.clone(),
            initial_kept_fraction: initial,
            final_kept_fraction: final_kept,
            skipped_docs: self.skipped_docs,
        })
    }
}
