//! Similarity scoring, graded NDCG@k, and the inverse-retrieval reward: a
//! pooled document vector queries a pool of pooled queries and is rewarded
//! by how highly it ranks its own positives.

use std::collections::{BTreeMap, BTreeSet};

#[cfg(test)]
use ndarray::Array1;
use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::pooling::{self, PoolKind};
use crate::rng::StreamRng;
use crate::store::MultiVectorQuery;

/// Reward shape: NDCG cutoff and optional negative sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardSpec {
    pub k: usize,
    /// `None` ranks against the whole pool; `Some(n)` ranks against all
    /// positives plus `n` sampled negatives.
    pub candidate_pool_size: Option<usize>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            k: 3,
            candidate_pool_size: None,
        }
    }
}

/// Candidates ordered by descending score; ties broken by ascending id so
/// rankings are deterministic across platforms.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Sorts scored candidates into ranked order.
    pub fn from_scores(mut scored: Vec<(String, f64)>) -> Result<Self> {
        if scored.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::Numeric("non-finite similarity score".into()));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(RankedList { entries: scored })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, f64)> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

/// Inner product with f64 accumulation.
pub fn similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

/// Graded NDCG@k with 1-based log2 rank discounts. Returns 0 when there is
/// no relevant mass (IDCG = 0).
pub fn ndcg_at_k(ranking: &RankedList, relevant: &BTreeMap<String, u32>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (rank, (id, _)) in ranking.iter().take(k).enumerate() {
        if let Some(&grade) = relevant.get(id) {
            dcg += f64::from(grade) / ((rank + 2) as f64).log2();
        }
    }
    let mut grades: Vec<u32> = relevant.values().copied().collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let mut idcg = 0.0;
    for (rank, grade) in grades.iter().take(k).enumerate() {
        idcg += f64::from(*grade) / ((rank + 2) as f64).log2();
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Pooled vectors addressable by id; the in-memory candidate pool for
/// inverse retrieval and forward evaluation.
#[derive(Debug, Clone)]
pub struct PooledSet {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    vectors: Array2<f64>,
}

impl PooledSet {
    pub fn new(ids: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} ids but {} rows",
                ids.len(),
                vectors.nrows()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Duplicate(format!("pooled id {id}")));
            }
        }
        Ok(PooledSet {
            ids,
            index,
            vectors,
        })
    }

    /// Pools each query with an all-ones mask.
    pub fn from_queries(queries: &[MultiVectorQuery], kind: PoolKind) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::EmptyInput("no queries to pool".into()));
        }
        let dim = queries[0].dim();
        let mut vectors = Array2::<f64>::zeros((queries.len(), dim));
        let mut ids = Vec::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if q.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: q.dim(),
                });
            }
            vectors.row_mut(i).assign(&pooling::pool_query(q, kind)?);
            ids.push(q.query_id.clone());
        }
        PooledSet::new(ids, vectors)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn vector(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    /// L2-normalizes every row in place; zero rows are left untouched.
    pub fn normalize(&mut self) {
        for mut row in self.vectors.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }
}

/// Scores `v_pool` against a candidate pool of pooled queries and returns
/// NDCG@k with grade 1 for the given positives.
///
/// With `candidate_pool_size = Some(n)`, ranking is restricted to all
/// positives plus `n` negatives sampled from `rng`; the caller is expected
/// to derive `rng` from a stable key so rewards stay reproducible.
pub fn inverse_retrieval_reward(
    v_pool: ArrayView1<'_, f64>,
    positives: &BTreeSet<String>,
    pool: &PooledSet,
    spec: &RewardSpec,
    rng: &mut StreamRng,
) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("empty candidate pool".into()));
    }
    if spec.k == 0 {
        return Err(Error::Config("reward cutoff k must be >= 1".into()));
    }
    for p in positives {
        if !pool.contains(p) {
            return Err(Error::Config(format!(
                "positive query {p} missing from pool"
            )));
        }
    }

    let candidate_idx: Vec<usize> = match spec.candidate_pool_size {
        Some(n) => {
            let negatives: Vec<usize> = (0..pool.len())
                .filter(|i| !positives.contains(&pool.ids()[*i]))
                .collect();
            let mut chosen: Vec<usize> = (0..pool.len())
                .filter(|i| positives.contains(&pool.ids()[*i]))
                .collect();
            if negatives.len() <= n {
                chosen.extend(negatives);
            } else {
                let picks = rand::seq::index::sample(rng, negatives.len(), n);
                chosen.extend(picks.iter().map(|i| negatives[i]));
            }
            chosen
        }
        None => (0..pool.len()).collect(),
    };

    let scored: Vec<(String, f64)> = candidate_idx
        .into_iter()
        .map(|i| similarity(v_pool, pool.vector(i)).map(|s| (pool.ids()[i].clone(), s)))
        .collect::<Result<_>>()?;
    let ranking = RankedList::from_scores(scored)?;
    let relevant: BTreeMap<String, u32> = positives.iter().map(|p| (p.clone(), 1)).collect();
    Ok(ndcg_at_k(&ranking, &relevant, spec.k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::RngCore;

    /// Independent NDCG oracle: explicit sort plus direct DCG summation.
    fn brute_force_ndcg(
        scored: &[(String, f64)],
        relevant: &BTreeMap<String, u32>,
        k: usize,
    ) -> f64 {
        let mut order: Vec<&(String, f64)> = scored.iter().collect();
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let mut dcg = 0.0;
        for (i, (id, _)) in order.iter().take(k).enumerate() {
            let g = relevant.get(id).copied().unwrap_or(0);
            dcg += f64::from(g) * std::f64::consts::LN_2 / ((i + 2) as f64).ln();
        }
        let mut grades: Vec<u32> = relevant.values().copied().collect();
        grades.sort_unstable();
        grades.reverse();
        let mut idcg = 0.0;
        for (i, g) in grades.iter().take(k).enumerate() {
            idcg += f64::from(*g) * std::f64::consts::LN_2 / ((i + 2) as f64).ln();
        }
        if idcg == 0.0 {
            0.0
        } else {
            dcg / idcg
        }
    }

    fn ranking_of(ids_scores: &[(&str, f64)]) -> RankedList {
        RankedList::from_scores(
            ids_scores
                .iter()
                .map(|(id, s)| (id.to_string(), *s))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(
            similarity(array![1.0, 0.0].view(), array![0.5, 0.5].view()).unwrap(),
            0.5
        );
        let unit = array![0.6, 0.8];
        assert_relative_eq!(
            similarity(unit.view(), unit.view()).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        assert_eq!(
            similarity(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(),
            0.0
        );
        assert!(similarity(array![1.0].view(), array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn ndcg_closed_forms() {
        let rel: BTreeMap<String, u32> = [("hit".to_string(), 1)].into();
        let top = ranking_of(&[("hit", 3.0), ("a", 2.0), ("b", 1.0), ("c", 0.5)]);
        assert_eq!(ndcg_at_k(&top, &rel, 3), 1.0);

        let third = ranking_of(&[("a", 3.0), ("b", 2.0), ("hit", 1.0), ("c", 0.5)]);
        assert_eq!(ndcg_at_k(&third, &rel, 3), 0.5);

        let fourth = ranking_of(&[("a", 3.0), ("b", 2.0), ("c", 1.0), ("hit", 0.5)]);
        assert_eq!(ndcg_at_k(&fourth, &rel, 3), 0.0);
    }

    #[test]
    fn ndcg_two_relevants_matches_oracle() {
        let rel: BTreeMap<String, u32> = [("r1".to_string(), 1), ("r2".to_string(), 1)].into();
        let scored = vec![
            ("r1".to_string(), 3.0),
            ("x".to_string(), 2.0),
            ("r2".to_string(), 1.0),
            ("y".to_string(), 0.5),
        ];
        let ranking = RankedList::from_scores(scored.clone()).unwrap();
        let got = ndcg_at_k(&ranking, &rel, 3);
        let expected = brute_force_ndcg(&scored, &rel, 3);
        assert_relative_eq!(got, expected, max_relative = 1e-15);
        // (1 + 1/log2(4)) / (1 + 1/log2(3))
        assert_relative_eq!(got, 0.9197207891481876, max_relative = 1e-12);
    }

    #[test]
    fn ndcg_matches_oracle_on_random_instances() {
        let mut rng = StreamRng::derive(7, "ndcg.rand", &[]);
        for case in 0..300 {
            let candidates = 2 + (rng.next_u64() % 40) as usize;
            let scored: Vec<(String, f64)> = (0..candidates)
                .map(|i| (format!("c{i:03}"), (rng.uniform() * 8.0).floor() / 2.0))
                .collect();
            let mut rel = BTreeMap::new();
            for (id, _) in &scored {
                if rng.uniform() < 0.3 {
                    rel.insert(id.clone(), (rng.next_u64() % 4) as u32);
                }
            }
            for k in [1usize, 3, 10] {
                let ranking = RankedList::from_scores(scored.clone()).unwrap();
                let got = ndcg_at_k(&ranking, &rel, k);
                let expected = brute_force_ndcg(&scored, &rel, k);
                assert!(
                    (got - expected).abs() < 1e-12,
                    "case {case} k {k}: {got} vs {expected}"
                );
                assert!((0.0..=1.0 + 1e-12).contains(&got));
            }
        }
    }

    #[test]
    fn empty_relevance_scores_zero() {
        let ranking = ranking_of(&[("a", 1.0)]);
        assert_eq!(ndcg_at_k(&ranking, &BTreeMap::new(), 3), 0.0);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let ranking = ranking_of(&[("b", 0.0), ("a", 0.0), ("c", 0.0)]);
        let ids: Vec<&str> = ranking.ids().collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    fn small_pool() -> PooledSet {
        PooledSet::new(
            vec!["qa".into(), "qb".into(), "qc".into(), "qd".into()],
            array![[1.0, 0.0], [0.0, 1.0], [0.7, 0.7], [-1.0, 0.0],],
        )
        .unwrap()
    }

    #[test]
    fn reward_is_one_when_positive_ranks_first() {
        let pool = small_pool();
        let positives: BTreeSet<String> = ["qa".to_string()].into();
        let mut rng = StreamRng::derive(1, "rw", &[]);
        let r = inverse_retrieval_reward(
            array![1.0, -0.5].view(),
            &positives,
            &pool,
            &RewardSpec::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn orthogonal_vector_falls_back_to_id_order() {
        let pool = PooledSet::new(
            vec!["qa".into(), "qb".into(), "qc".into()],
            array![[0.0, 1.0], [0.0, 2.0], [0.0, 3.0]],
        )
        .unwrap();
        let positives: BTreeSet<String> = ["qb".to_string()].into();
        let mut rng = StreamRng::derive(1, "rw", &[]);
        // all scores 0 -> ranking qa, qb, qc -> positive at rank 2
        let r = inverse_retrieval_reward(
            array![1.0, 0.0].view(),
            &positives,
            &pool,
            &RewardSpec::default(),
            &mut rng,
        )
        .unwrap();
        assert_relative_eq!(r, 1.0 / 3f64.log2(), max_relative = 1e-12);
    }

    #[test]
    fn missing_positive_is_config_error() {
        let pool = small_pool();
        let positives: BTreeSet<String> = ["nope".to_string()].into();
        let mut rng = StreamRng::derive(1, "rw", &[]);
        let err = inverse_retrieval_reward(
            array![1.0, 0.0].view(),
            &positives,
            &pool,
            &RewardSpec::default(),
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn scaling_query_leaves_ranking_unchanged() {
        let mut rng = StreamRng::derive(3, "scale", &[]);
        let pool = PooledSet::new(
            (0..16).map(|i| format!("q{i:02}")).collect(),
            Array2::from_shape_fn((16, 4), |_| rng.uniform() * 2.0 - 1.0),
        )
        .unwrap();
        let v = Array1::from_shape_fn(4, |_| rng.uniform() * 2.0 - 1.0);
        let scored = |vv: ArrayView1<'_, f64>| -> Vec<String> {
            let s: Vec<(String, f64)> = (0..pool.len())
                .map(|i| {
                    (
                        pool.ids()[i].clone(),
                        similarity(vv, pool.vector(i)).unwrap(),
                    )
                })
                .collect();
            RankedList::from_scores(s)
                .unwrap()
                .ids()
                .map(str::to_string)
                .collect()
        };
        let scaled = v.mapv(|x| x * 37.5);
        assert_eq!(scored(v.view()), scored(scaled.view()));
    }

    #[test]
    fn negative_sampling_is_deterministic_and_keeps_positives() {
        let mut rng = StreamRng::derive(5, "pool", &[]);
        let pool = PooledSet::new(
            (0..64).map(|i| format!("q{i:02}")).collect(),
            Array2::from_shape_fn((64, 4), |_| rng.uniform() * 2.0 - 1.0),
        )
        .unwrap();
        let positives: BTreeSet<String> = ["q07".to_string(), "q40".to_string()].into();
        let v = Array1::from_shape_fn(4, |_| rng.uniform() * 2.0 - 1.0);
        let spec = RewardSpec {
            k: 3,
            candidate_pool_size: Some(8),
        };

        let r1 = inverse_retrieval_reward(
            v.view(),
            &positives,
            &pool,
            &spec,
            &mut StreamRng::derive(9, "neg", &[1]),
        )
        .unwrap();
        let r2 = inverse_retrieval_reward(
            v.view(),
            &positives,
            &pool,
            &spec,
            &mut StreamRng::derive(9, "neg", &[1]),
        )
        .unwrap();
        assert_eq!(r1, r2);
        assert!((0.0..=1.0).contains(&r1));
    }

    #[test]
    fn full_pool_reward_matches_brute_force() {
        let mut rng = StreamRng::derive(11, "full", &[]);
        for _ in 0..50 {
            let pool = PooledSet::new(
                (0..64).map(|i| format!("q{i:02}")).collect(),
                Array2::from_shape_fn((64, 6), |_| rng.uniform() * 2.0 - 1.0),
            )
            .unwrap();
            let v = Array1::from_shape_fn(6, |_| rng.uniform() * 2.0 - 1.0);
            let positives: BTreeSet<String> =
                ["q03".to_string(), "q17".to_string(), "q44".to_string()].into();

            let got = inverse_retrieval_reward(
                v.view(),
                &positives,
                &pool,
                &RewardSpec::default(),
                &mut StreamRng::derive(1, "unused", &[]),
            )
            .unwrap();

            let scored: Vec<(String, f64)> = (0..pool.len())
                .map(|i| {
                    (
                        pool.ids()[i].clone(),
                        similarity(v.view(), pool.vector(i)).unwrap(),
                    )
                })
                .collect();
            let rel: BTreeMap<String, u32> = positives.iter().map(|p| (p.clone(), 1)).collect();
            let expected = brute_force_ndcg(&scored, &rel, 3);
            assert!((got - expected).abs() < 1e-12);
        }
    }
}
