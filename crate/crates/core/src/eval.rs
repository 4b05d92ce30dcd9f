//! End-to-end retrieval evaluation: full multi-vector scoring, static
//! pooling, and policy-compressed indices ranked over the same corpus,
//! reported per subset with embedding-cost accounting.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::{self, PolicyParams};
use crate::pooling::{self, KeepMask, PoolKind};
use crate::reward::{self, PooledSet, RankedList};
use crate::store::{
    embedding_cost, format_count, MultiVectorDoc, MultiVectorQuery, Qrels, SingleVectorIndex,
};

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMethod {
    /// Pooled query scored against all document vectors by max inner
    /// product.
    FullMultiVector { query_pool: PoolKind },
    /// Token-level late interaction: sum over query rows of the max inner
    /// product over document rows.
    TokenMaxSim,
    /// Full-mask pooling on both sides.
    StaticPool { kind: PoolKind },
    /// Policy-filtered pooling from a checkpoint.
    ReinPool {
        kind: PoolKind,
        checkpoint: PathBuf,
        threshold: f64,
    },
}

impl EvalMethod {
    /// Parses a method name (`full-mean`, `full-max`, `maxsim`,
    /// `static-mean`, `static-max`, `reinpool-mean`, `reinpool-max`).
    pub fn parse(name: &str, checkpoint: Option<&std::path::Path>, threshold: f64) -> Result<Self> {
        let reinpool = |kind: PoolKind| -> Result<EvalMethod> {
            let checkpoint = checkpoint
                .ok_or_else(|| Error::Config(format!("method {name} needs a policy checkpoint")))?;
            Ok(EvalMethod::ReinPool {
                kind,
                checkpoint: checkpoint.to_path_buf(),
                threshold,
            })
        };
        match name {
            "full-mean" => Ok(EvalMethod::FullMultiVector {
                query_pool: PoolKind::Mean,
            }),
            "full-max" => Ok(EvalMethod::FullMultiVector {
                query_pool: PoolKind::Max,
            }),
            "maxsim" => Ok(EvalMethod::TokenMaxSim),
            "static-mean" => Ok(EvalMethod::StaticPool {
                kind: PoolKind::Mean,
            }),
            "static-max" => Ok(EvalMethod::StaticPool {
                kind: PoolKind::Max,
            }),
            "reinpool-mean" => reinpool(PoolKind::Mean),
            "reinpool-max" => reinpool(PoolKind::Max),
            other => Err(Error::Config(format!("unknown eval method `{other}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EvalMethod::FullMultiVector { .. } => "full".into(),
            EvalMethod::TokenMaxSim => "maxsim".into(),
            EvalMethod::StaticPool { .. } => "static".into(),
            EvalMethod::ReinPool { .. } => "reinpool".into(),
        }
    }

    fn query_pooling(&self) -> String {
        match self {
            EvalMethod::FullMultiVector { query_pool } => query_pool.to_string(),
            EvalMethod::TokenMaxSim => "-".into(),
            EvalMethod::StaticPool { kind } | EvalMethod::ReinPool { kind, .. } => kind.to_string(),
        }
    }

    fn corpus_pooling(&self) -> String {
        match self {
            EvalMethod::FullMultiVector { .. } | EvalMethod::TokenMaxSim => "-".into(),
            EvalMethod::StaticPool { kind } | EvalMethod::ReinPool { kind, .. } => kind.to_string(),
        }
    }
}

/// How a corpus is reduced to one vector per document.
pub enum Compressor<'a> {
    Static(PoolKind),
    Policy {
        params: &'a PolicyParams,
        threshold: f64,
        kind: PoolKind,
    },
}

/// Pools every document down to a single f32 row.
pub fn compress_corpus(
    docs: &[MultiVectorDoc],
    compressor: &Compressor<'_>,
) -> Result<SingleVectorIndex> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("cannot compress an empty corpus".into()));
    }
    let dim = crate::store::collection_dim(docs)?;
    if let Compressor::Policy { params, .. } = compressor {
        if params.dim() != dim {
            return Err(Error::Config(format!(
                "checkpoint dimension {} does not match corpus dimension {dim}",
                params.dim()
            )));
        }
    }
    let mut vectors = Array2::<f32>::zeros((docs.len(), dim));
    let mut ids = Vec::with_capacity(docs.len());
    let mut subsets = Vec::with_capacity(docs.len());
    for (row, doc) in docs.iter().enumerate() {
        let pooled = match compressor {
            Compressor::Static(kind) => pooling::pool(
                doc.vectors.view(),
                &KeepMask::all_ones(doc.num_vectors()),
                *kind,
            )?,
            Compressor::Policy {
                params,
                threshold,
                kind,
            } => {
                let out = policy::forward(params, doc.vectors.view())?;
                let mask = policy::greedy_mask(&out, *threshold)?;
                pooling::pool(doc.vectors.view(), &mask, *kind)?
            }
        };
        for (dst, src) in vectors.row_mut(row).iter_mut().zip(pooled.iter()) {
            *dst = *src as f32;
        }
        ids.push(doc.doc_id.clone());
        subsets.push(doc.subset.clone());
    }
    SingleVectorIndex::new(ids, vectors, subsets)
}

/// Builds the compressor for a pooling method, loading the policy
/// checkpoint when needed, and compresses the corpus.
pub fn compress_with_method(
    docs: &[MultiVectorDoc],
    method: &EvalMethod,
) -> Result<SingleVectorIndex> {
    match method {
        EvalMethod::StaticPool { kind } => compress_corpus(docs, &Compressor::Static(*kind)),
        EvalMethod::ReinPool {
            kind,
            checkpoint,
            threshold,
        } => {
            let params = policy::load_policy(checkpoint)?;
            compress_corpus(
                docs,
                &Compressor::Policy {
                    params: &params,
                    threshold: *threshold,
                    kind: *kind,
                },
            )
        }
        _ => Err(Error::Config(format!(
            "method {} does not produce a compressed index",
            method.label()
        ))),
    }
}

fn dot_query_row(query: ArrayView1<'_, f64>, row: ArrayView1<'_, f32>) -> f64 {
    let mut acc = 0.0;
    for (q, r) in query.iter().zip(row.iter()) {
        acc += q * f64::from(*r);
    }
    acc
}

/// Max over document rows of the inner product with a pooled query.
pub fn score_full_multivector(
    pooled_query: ArrayView1<'_, f64>,
    doc: &MultiVectorDoc,
) -> Result<f64> {
    if pooled_query.len() != doc.dim() {
        return Err(Error::DimensionMismatch {
            expected: doc.dim(),
            got: pooled_query.len(),
        });
    }
    let mut best = f64::NEG_INFINITY;
    for row in doc.vectors.rows() {
        let s = dot_query_row(pooled_query, row);
        if s > best {
            best = s;
        }
    }
    Ok(best)
}

/// Token-level late interaction: for each query row take its best match
/// over document rows, then sum over query rows.
pub fn score_token_maxsim(query: &MultiVectorQuery, doc: &MultiVectorDoc) -> Result<f64> {
    if query.dim() != doc.dim() {
        return Err(Error::DimensionMismatch {
            expected: doc.dim(),
            got: query.dim(),
        });
    }
    let mut total = 0.0;
    for qrow in query.vectors.rows() {
        let mut best = f64::NEG_INFINITY;
        for drow in doc.vectors.rows() {
            let mut acc = 0.0;
            for (q, d) in qrow.iter().zip(drow.iter()) {
                acc += f64::from(*q) * f64::from(*d);
            }
            if acc > best {
                best = acc;
            }
        }
        total += best;
    }
    Ok(total)
}

/// NDCG@k per pooled query against a pooled document set; `None` marks
/// queries without relevance judgments.
pub fn pooled_retrieval_scores(
    doc_pool: &PooledSet,
    query_pool: &PooledSet,
    qrels: &Qrels,
    k: usize,
) -> Result<Vec<Option<f64>>> {
    (0..query_pool.len())
        .into_par_iter()
        .map(|qi| -> Result<Option<f64>> {
            let qid = &query_pool.ids()[qi];
            let Some(relevant) = qrels.docs_for(qid) else {
                return Ok(None);
            };
            let scored: Vec<(String, f64)> = (0..doc_pool.len())
                .map(|di| {
                    reward::similarity(query_pool.vector(qi), doc_pool.vector(di))
                        .map(|s| (doc_pool.ids()[di].clone(), s))
                })
                .collect::<Result<_>>()?;
            let ranking = RankedList::from_scores(scored)?;
            Ok(Some(reward::ndcg_at_k(&ranking, relevant, k)))
        })
        .collect()
}

/// One row of the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub query_pooling: String,
    pub corpus_pooling: String,
    pub cost: String,
    pub compression_ratio: f64,
    pub per_subset: BTreeMap<String, f64>,
    pub average: f64,
}

/// Per-method NDCG@k with cost accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub k: usize,
    pub methods: Vec<MethodReport>,
    /// Queries without relevance judgments, excluded from every method.
    pub excluded_queries: usize,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn subset_label(q: &MultiVectorQuery) -> String {
    q.subset.clone().unwrap_or_else(|| "all".to_string())
}

fn aggregate(queries: &[MultiVectorQuery], scores: &[Option<f64>]) -> (BTreeMap<String, f64>, f64) {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (q, score) in queries.iter().zip(scores) {
        if let Some(s) = score {
            let entry = sums.entry(subset_label(q)).or_insert((0.0, 0));
            entry.0 += s;
            entry.1 += 1;
        }
    }
    let per_subset: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect();
    let average = if per_subset.is_empty() {
        0.0
    } else {
        per_subset.values().sum::<f64>() / per_subset.len() as f64
    };
    (per_subset, average)
}

fn widen_index(index: &SingleVectorIndex) -> Result<PooledSet> {
    PooledSet::new(index.ids.clone(), index.vectors.mapv(f64::from))
}

/// Runs every method over the corpus and aggregates NDCG@k per query
/// subset. With `normalize` set, pooled vectors on both sides are
/// L2-normalized before scoring.
pub fn evaluate(
    methods: &[EvalMethod],
    corpus: &[MultiVectorDoc],
    queries: &[MultiVectorQuery],
    qrels: &Qrels,
    k: usize,
    normalize: bool,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::Config("no evaluation methods requested".into()));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("no queries to evaluate".into()));
    }
    let cost = embedding_cost(corpus)?;

    let doc_ids: std::collections::BTreeSet<&str> =
        corpus.iter().map(|d| d.doc_id.as_str()).collect();
    let query_ids: std::collections::BTreeSet<&str> =
        queries.iter().map(|q| q.query_id.as_str()).collect();
    for (q, d, _) in qrels.iter() {
        if !doc_ids.contains(d.as_str()) {
            return Err(Error::Config(format!("qrels references unknown doc {d}")));
        }
        if !query_ids.contains(q.as_str()) {
            return Err(Error::Config(format!("qrels references unknown query {q}")));
        }
    }
    let excluded_queries = queries
        .iter()
        .filter(|q| qrels.docs_for(&q.query_id).is_none())
        .count();

    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let scores: Vec<Option<f64>> = match method {
            EvalMethod::FullMultiVector { query_pool } => {
                let mut pooled = PooledSet::from_queries(queries, *query_pool)?;
                if normalize {
                    pooled.normalize();
                }
                (0..queries.len())
                    .into_par_iter()
                    .map(|qi| -> Result<Option<f64>> {
                        let qid = &queries[qi].query_id;
                        let Some(relevant) = qrels.docs_for(qid) else {
                            return Ok(None);
                        };
                        let scored: Vec<(String, f64)> = corpus
                            .iter()
                            .map(|doc| {
                                score_full_multivector(pooled.vector(qi), doc)
                                    .map(|s| (doc.doc_id.clone(), s))
                            })
                            .collect::<Result<_>>()?;
                        let ranking = RankedList::from_scores(scored)?;
                        Ok(Some(reward::ndcg_at_k(&ranking, relevant, k)))
                    })
                    .collect::<Result<_>>()?
            }
            EvalMethod::TokenMaxSim => (0..queries.len())
                .into_par_iter()
                .map(|qi| -> Result<Option<f64>> {
                    let qid = &queries[qi].query_id;
                    let Some(relevant) = qrels.docs_for(qid) else {
                        return Ok(None);
                    };
                    let scored: Vec<(String, f64)> = corpus
                        .iter()
                        .map(|doc| {
                            score_token_maxsim(&queries[qi], doc).map(|s| (doc.doc_id.clone(), s))
                        })
                        .collect::<Result<_>>()?;
                    let ranking = RankedList::from_scores(scored)?;
                    Ok(Some(reward::ndcg_at_k(&ranking, relevant, k)))
                })
                .collect::<Result<_>>()?,
            EvalMethod::StaticPool { kind } | EvalMethod::ReinPool { kind, .. } => {
                let index = compress_with_method(corpus, method)?;
                let mut doc_pool = widen_index(&index)?;
                let mut query_pool = PooledSet::from_queries(queries, *kind)?;
                if normalize {
                    doc_pool.normalize();
                    query_pool.normalize();
                }
                pooled_retrieval_scores(&doc_pool, &query_pool, qrels, k)?
            }
        };

        let (per_subset, average) = aggregate(queries, &scores);
        let compressed = matches!(
            method,
            EvalMethod::StaticPool { .. } | EvalMethod::ReinPool { .. }
        );
        rows.push(MethodReport {
            method: method.label(),
            query_pooling: method.query_pooling(),
            corpus_pooling: method.corpus_pooling(),
            cost: if compressed {
                format!("1 x {}", cost.dim)
            } else {
                cost.to_string()
            },
            compression_ratio: if compressed { cost.ratio() } else { 1.0 },
            per_subset,
            average,
        });
    }

    Ok(EvalReport {
        k,
        methods: rows,
        excluded_queries,
    })
}

/// Output encodings for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

fn subset_columns(report: &EvalReport) -> Vec<String> {
    let mut cols: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for m in &report.methods {
        cols.extend(m.per_subset.keys().cloned());
    }
    cols.into_iter().collect()
}

/// Deterministic serialization of a report.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    if report.methods.is_empty() {
        return Err(Error::Config("report has no methods".into()));
    }
    let subsets = subset_columns(report);
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut out = String::new();
            out.push_str("method,query_pooling,corpus_pooling,cost,compression_ratio");
            for s in &subsets {
                out.push_str(&format!(",{s}"));
            }
            out.push_str(",avg\n");
            for m in &report.methods {
                out.push_str(&format!(
                    "{},{},{},{},{}",
                    m.method,
                    m.query_pooling,
                    m.corpus_pooling,
                    m.cost.replace(' ', ""),
                    format_count(m.compression_ratio)
                ));
                for s in &subsets {
                    match m.per_subset.get(s) {
                        Some(v) => out.push_str(&format!(",{v:.6}")),
                        None => out.push(','),
                    }
                }
                out.push_str(&format!(",{:.6}\n", m.average));
            }
            Ok(out)
        }
        ReportFormat::Table => {
            let mut header: Vec<String> = vec![
                "Method".into(),
                "Query Pooling".into(),
                "Corpus Pooling".into(),
                "Cost".into(),
                "Ratio".into(),
            ];
            header.extend(subsets.iter().map(|s| s.to_uppercase()));
            header.push(format!("AVG@{}", report.k));

            let mut body: Vec<Vec<String>> = Vec::new();
            for m in &report.methods {
                let mut row = vec![
                    m.method.clone(),
                    m.query_pooling.clone(),
                    m.corpus_pooling.clone(),
                    m.cost.clone(),
                    format!("{}x", format_count(m.compression_ratio)),
                ];
                for s in &subsets {
                    row.push(match m.per_subset.get(s) {
                        Some(v) => format!("{v:.4}"),
                        None => "-".into(),
                    });
                }
                row.push(format!("{:.4}", m.average));
                body.push(row);
            }

            let mut widths: Vec<usize> = header.iter().map(String::len).collect();
            for row in &body {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.len());
                }
            }
            let render = |row: &[String]| -> String {
                let cells: Vec<String> = row
                    .iter()
                    .zip(&widths)
                    .map(|(cell, w)| format!("{cell:<w$}"))
                    .collect();
                format!("| {} |", cells.join(" | "))
            };
            let rule = format!(
                "|{}|",
                widths
                    .iter()
                    .map(|w| "-".repeat(w + 2))
                    .collect::<Vec<_>>()
                    .join("|")
            );

            let mut out = String::new();
            out.push_str(&render(&header));
            out.push('\n');
            out.push_str(&rule);
            out.push('\n');
            for row in &body {
                out.push_str(&render(row));
                out.push('\n');
            }
            if report.excluded_queries > 0 {
                out.push_str(&format!(
                    "excluded queries without judgments: {}\n",
                    report.excluded_queries
                ));
            }
            Ok(out)
        }
    }
}
