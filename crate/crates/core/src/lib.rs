//! Compression of multi-vector document embeddings into single-vector
//! indices via a learned filtering policy.
//!
//! A lightweight attention policy scores each token-level vector of a
//! document; kept vectors are mean- or max-pooled into one embedding that
//! drops into an ordinary single-vector index. The policy is trained with
//! group-relative policy gradients: per document, a group of masks is
//! sampled, each pooled vector is rewarded by how well it retrieves the
//! document's own queries (NDCG over an inverse-retrieval ranking), and
//! group-centered advantages weight the log-likelihood update.
//!
//! Modules:
//! - [`store`]: on-disk collections, qrels, and single-vector indices
//! - [`pooling`]: mean/max pooling under keep masks
//! - [`policy`]: the attention filter, sampling, and exact gradients
//! - [`reward`]: similarity, NDCG@k, and the inverse-retrieval reward
//! - [`optim`]: decoupled-weight-decay optimizer and gradient clipping
//! - [`trainer`]: the training loop, validation, and checkpointing
//! - [`eval`]: baseline and compressed-index retrieval evaluation
//! - [`synth`]: planted-signal benchmark generation
//! - [`rng`]: counter-keyed splittable random streams
//! - [`gradcheck`]: finite-difference verification of the backward pass

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod policy;
pub mod pooling;
pub mod reward;
pub mod rng;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{
    compress_corpus, compress_with_method, emit_report, evaluate, score_full_multivector,
    score_token_maxsim, Compressor, EvalMethod, EvalReport, MethodReport, ReportFormat,
};
pub use optim::{apply_update, clip_global_norm, AdamHyper, OptimizerState};
pub use policy::{
    backward, backward_logits, forward, greedy_mask, load_policy, sample_mask, save_policy,
    PolicyGrad, PolicyOutput, PolicyParams,
};
pub use pooling::{pool, pool_query, KeepMask, PoolKind};
pub use reward::{
    inverse_retrieval_reward, ndcg_at_k, similarity, PooledSet, RankedList, RewardSpec,
};
pub use rng::StreamRng;
pub use store::{
    embedding_cost, load_collection, load_qrels, load_query_collection, save_collection,
    save_query_collection, EmbeddingCost, MultiVectorDoc, MultiVectorQuery, Qrels,
    SingleVectorIndex,
};
pub use synth::{
    generate, geometry_report, load_dataset, oracle_eval, write_dataset, SynthConfig, SynthData,
};
pub use trainer::{
    compute_advantages, plateau_lr, Rollout, StepMetrics, TrainConfig, TrainSummary, Trainer,
};
