//! Planted-signal synthetic benchmark.
//!
//! Each topic gets a unit centroid; each document gets its own signal
//! direction drawn near its topic centroid, `signal_count` signal rows
//! scattered around that direction, and isotropic background rows, all
//! unit-normalized and shuffled with a recorded permutation. Queries are
//! drawn around the same per-document direction, so a document's own
//! queries are its only positives and topic-mates act as hard negatives.
//! The recorded signal positions form the oracle mask: pooling exactly the
//! signal rows is the ceiling any learned mask of the same sparsity can
//! reach, while full-mask pooling is diluted by the background.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::pooled_retrieval_scores;
use crate::pooling::{self, KeepMask, PoolKind};
use crate::reward::PooledSet;
use crate::rng::StreamRng;
use crate::store::{self, load_qrels, MultiVectorDoc, MultiVectorQuery, Qrels};

pub const CORPUS_DIR: &str = "corpus";
pub const QUERIES_DIR: &str = "queries";
pub const QRELS_FILE: &str = "qrels.tsv";
pub const ORACLE_MASKS_FILE: &str = "oracle_masks.json";

/// Generator parameters. Noise scales multiply per-coordinate standard
/// gaussians, so a perturbation's expected vector norm is
/// `scale * sqrt(dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_topics: usize,
    pub docs_per_topic: usize,
    pub vectors_per_doc: usize,
    /// Signal rows planted per document.
    pub signal_count: usize,
    pub dim: usize,
    /// Spread of signal rows around the document direction.
    pub signal_noise: f64,
    /// Scale of the isotropic background rows (immaterial after
    /// normalization, kept as an explicit knob).
    pub background_noise: f64,
    /// Spread of document directions around their topic centroid; controls
    /// how hard topic-mates are as negatives.
    pub doc_spread: f64,
    pub queries_per_doc: usize,
    /// Rows per query.
    pub query_tokens: usize,
    pub query_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_topics: 16,
            docs_per_topic: 12,
            vectors_per_doc: 64,
            signal_count: 8,
            dim: 32,
            signal_noise: 0.1,
            background_noise: 1.0,
            doc_spread: 0.1,
            queries_per_doc: 4,
            query_tokens: 1,
            query_noise: 0.1,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_topics < 2 {
            return Err(Error::Config("num_topics must be >= 2".into()));
        }
        if self.signal_count == 0 || self.signal_count > self.vectors_per_doc {
            return Err(Error::Config(format!(
                "signal_count {} must lie in 1..={}",
                self.signal_count, self.vectors_per_doc
            )));
        }
        if self.docs_per_topic == 0
            || self.dim == 0
            || self.queries_per_doc == 0
            || self.query_tokens == 0
        {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.signal_noise < 0.0
            || self.query_noise < 0.0
            || self.doc_spread < 0.0
            || self.background_noise <= 0.0
        {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn num_docs(&self) -> usize {
        self.num_topics * self.docs_per_topic
    }
}

/// A generated benchmark: corpus, queries, judgments, and the planted
/// signal positions per document.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub docs: Vec<MultiVectorDoc>,
    pub queries: Vec<MultiVectorQuery>,
    pub qrels: Qrels,
    pub oracle_masks: BTreeMap<String, KeepMask>,
}

fn gaussian(rng: &mut StreamRng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numeric("cannot normalize zero-length vector".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn unit_around(center: &[f64], noise: &[f64]) -> Result<Vec<f32>> {
    let raw: Vec<f64> = center.iter().zip(noise).map(|(c, n)| c + n).collect();
    Ok(unit(&raw)?.into_iter().map(|x| x as f32).collect())
}

/// Generates the benchmark as a pure function of the config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let d = cfg.dim;

    let centroids: Vec<Vec<f64>> = (0..cfg.num_topics)
        .map(|t| {
            let mut rng = StreamRng::derive(cfg.seed, "synth.topic", &[t as u64]);
            unit(&gaussian(&mut rng, d, 1.0))
        })
        .collect::<Result<_>>()?;

    let mut docs = Vec::with_capacity(cfg.num_docs());
    let mut queries = Vec::with_capacity(cfg.num_docs() * cfg.queries_per_doc);
    let mut qrels = Qrels::new();
    let mut oracle_masks = BTreeMap::new();

    for di in 0..cfg.num_docs() {
        let topic = di / cfg.docs_per_topic;
        let doc_id = format!("d{di:04}");
        let mut rng = StreamRng::derive(cfg.seed, "synth.doc", &[di as u64]);

        let direction = unit(
            &centroids[topic]
                .iter()
                .zip(gaussian(&mut rng, d, cfg.doc_spread))
                .map(|(c, n)| c + n)
                .collect::<Vec<f64>>(),
        )?;

        let mut rows: Vec<Vec<f32>> = Vec::with_capacity(cfg.vectors_per_doc);
        for _ in 0..cfg.signal_count {
            rows.push(unit_around(
                &direction,
                &gaussian(&mut rng, d, cfg.signal_noise),
            )?);
        }
        for _ in cfg.signal_count..cfg.vectors_per_doc {
            let bg = gaussian(&mut rng, d, cfg.background_noise);
            rows.push(unit(&bg)?.into_iter().map(|x| x as f32).collect());
        }

        let mut positions: Vec<usize> = (0..cfg.vectors_per_doc).collect();
        positions.shuffle(&mut StreamRng::derive(cfg.seed, "synth.perm", &[di as u64]));
        let mut flat = vec![0f32; cfg.vectors_per_doc * d];
        let mut mask_bits = vec![false; cfg.vectors_per_doc];
        for (src, &dst) in positions.iter().enumerate() {
            flat[dst * d..(dst + 1) * d].copy_from_slice(&rows[src]);
            if src < cfg.signal_count {
                mask_bits[dst] = true;
            }
        }
        let vectors =
            Array2::from_shape_vec((cfg.vectors_per_doc, d), flat).expect("row-major layout");
        docs.push(MultiVectorDoc::new(doc_id.clone(), vectors)?);
        oracle_masks.insert(doc_id.clone(), KeepMask::new(mask_bits));

        for qi in 0..cfg.queries_per_doc {
            let query_id = format!("q{di:04}-{qi}");
            let mut qrng = StreamRng::derive(cfg.seed, "synth.query", &[di as u64, qi as u64]);
            let mut qflat = Vec::with_capacity(cfg.query_tokens * d);
            for _ in 0..cfg.query_tokens {
                qflat.extend(unit_around(
                    &direction,
                    &gaussian(&mut qrng, d, cfg.query_noise),
                )?);
            }
            let vectors =
                Array2::from_shape_vec((cfg.query_tokens, d), qflat).expect("row-major layout");
            queries.push(MultiVectorQuery::new(query_id.clone(), vectors)?);
            qrels.insert(query_id, doc_id.clone(), 1)?;
        }
    }

    Ok(SynthData {
        docs,
        queries,
        qrels,
        oracle_masks,
    })
}

/// Writes a dataset directory: `corpus/`, `queries/`, `qrels.tsv`, and
/// `oracle_masks.json`.
pub fn write_dataset(data: &SynthData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    store::save_collection(&data.docs, &dir.join(CORPUS_DIR))?;
    store::save_query_collection(&data.queries, &dir.join(QUERIES_DIR))?;
    data.qrels.save(&dir.join(QRELS_FILE))?;

    let masks: BTreeMap<&str, Vec<u8>> = data
        .oracle_masks
        .iter()
        .map(|(id, m)| {
            (
                id.as_str(),
                m.as_slice().iter().map(|b| u8::from(*b)).collect(),
            )
        })
        .collect();
    let mut f = fs::File::create(dir.join(ORACLE_MASKS_FILE))?;
    serde_json::to_writer_pretty(&mut f, &masks)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// A dataset directory read back into memory. Oracle masks are optional so
/// externally produced datasets load too.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub docs: Vec<MultiVectorDoc>,
    pub queries: Vec<MultiVectorQuery>,
    pub qrels: Qrels,
    pub oracle_masks: Option<BTreeMap<String, KeepMask>>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let docs = store::load_collection(&dir.join(CORPUS_DIR))?;
    let queries = store::load_query_collection(&dir.join(QUERIES_DIR))?;
    let qrels = load_qrels(&dir.join(QRELS_FILE))?;
    let masks_path = dir.join(ORACLE_MASKS_FILE);
    let oracle_masks = if masks_path.exists() {
        let raw: BTreeMap<String, Vec<u8>> =
            serde_json::from_reader(std::io::BufReader::new(fs::File::open(masks_path)?))?;
        Some(
            raw.into_iter()
                .map(|(id, bits)| {
                    (
                        id,
                        KeepMask::new(bits.into_iter().map(|b| b != 0).collect()),
                    )
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(Dataset {
        docs,
        queries,
        qrels,
        oracle_masks,
    })
}

fn masked_pool_set(
    docs: &[MultiVectorDoc],
    masks: &BTreeMap<String, KeepMask>,
    kind: PoolKind,
) -> Result<PooledSet> {
    let dim = store::collection_dim(docs)?;
    let mut vectors = Array2::<f64>::zeros((docs.len(), dim));
    let mut ids = Vec::with_capacity(docs.len());
    for (row, doc) in docs.iter().enumerate() {
        let mask = masks
            .get(&doc.doc_id)
            .ok_or_else(|| Error::Shape(format!("no oracle mask for doc {}", doc.doc_id)))?;
        if mask.len() != doc.num_vectors() {
            return Err(Error::Shape(format!(
                "oracle mask length {} does not match doc {} with {} rows",
                mask.len(),
                doc.doc_id,
                doc.num_vectors()
            )));
        }
        vectors
            .row_mut(row)
            .assign(&pooling::pool(doc.vectors.view(), mask, kind)?);
        ids.push(doc.doc_id.clone());
    }
    PooledSet::new(ids, vectors)
}

/// Forward-retrieval NDCG@3 when every document is pooled with its oracle
/// mask: the ceiling for any learned mask of the same sparsity.
pub fn oracle_eval(
    docs: &[MultiVectorDoc],
    queries: &[MultiVectorQuery],
    qrels: &Qrels,
    masks: &BTreeMap<String, KeepMask>,
    kind: PoolKind,
) -> Result<f64> {
    masked_retrieval(docs, queries, qrels, masks, kind, false)
}

fn masked_retrieval(
    docs: &[MultiVectorDoc],
    queries: &[MultiVectorQuery],
    qrels: &Qrels,
    masks: &BTreeMap<String, KeepMask>,
    kind: PoolKind,
    normalize: bool,
) -> Result<f64> {
    let mut doc_pool = masked_pool_set(docs, masks, kind)?;
    let mut query_pool = PooledSet::from_queries(queries, kind)?;
    if normalize {
        doc_pool.normalize();
        query_pool.normalize();
    }
    mean_score(&pooled_retrieval_scores(&doc_pool, &query_pool, qrels, 3)?)
}

fn mean_score(scores: &[Option<f64>]) -> Result<f64> {
    let included: Vec<f64> = scores.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::EmptyInput("no judged queries".into()));
    }
    Ok(included.iter().sum::<f64>() / included.len() as f64)
}

/// Oracle-mask versus full-mask retrieval quality on one dataset.
#[derive(Debug, Clone, Copy)]
pub struct GeometryReport {
    pub oracle_ndcg3: f64,
    pub static_ndcg3: f64,
}

/// Measures the planted geometry: the oracle ceiling and the full-mask
/// baseline under the same pooling kind and scoring convention.
pub fn geometry_report(
    data: &SynthData,
    kind: PoolKind,
    normalize: bool,
) -> Result<GeometryReport> {
    let oracle = masked_retrieval(
        &data.docs,
        &data.queries,
        &data.qrels,
        &data.oracle_masks,
        kind,
        normalize,
    )?;
    let full_masks: BTreeMap<String, KeepMask> = data
        .docs
        .iter()
        .map(|d| (d.doc_id.clone(), KeepMask::all_ones(d.num_vectors())))
        .collect();
    let static_ = masked_retrieval(
        &data.docs,
        &data.queries,
        &data.qrels,
        &full_masks,
        kind,
        normalize,
    )?;
    Ok(GeometryReport {
        oracle_ndcg3: oracle,
        static_ndcg3: static_,
    })
}
