//! Mean and max pooling of a (possibly filtered) vector set into one
//! vector. Accumulation is in f64 regardless of the f32 storage type.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::MultiVectorQuery;

/// Aggregation rule for a kept vector set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Mean,
    Max,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolKind::Mean => write!(f, "mean"),
            PoolKind::Max => write!(f, "max"),
        }
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(PoolKind::Mean),
            "max" => Ok(PoolKind::Max),
            other => Err(Error::Config(format!("unknown pooling kind `{other}`"))),
        }
    }
}

/// Per-row keep/discard decisions for one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepMask {
    bits: Vec<bool>,
}

impl KeepMask {
    pub fn new(bits: Vec<bool>) -> Self {
        KeepMask { bits }
    }

    pub fn all_ones(len: usize) -> Self {
        KeepMask {
            bits: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.kept() as f64 / self.bits.len() as f64
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.bits.iter().all(|b| !*b)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }
}

/// Pools the rows selected by `mask` into one f64 vector.
///
/// An all-zero mask falls back to pooling over every row, so the result is
/// always finite; the degenerate selection then scores exactly like the
/// unfiltered baseline.
pub fn pool(vectors: ArrayView2<'_, f32>, mask: &KeepMask, kind: PoolKind) -> Result<Array1<f64>> {
    let (n, d) = (vectors.nrows(), vectors.ncols());
    if mask.len() != n {
        return Err(Error::Shape(format!(
            "mask length {} does not match {} rows",
            mask.len(),
            n
        )));
    }
    if n == 0 || d == 0 {
        return Err(Error::Shape("cannot pool an empty matrix".into()));
    }
    if !vectors.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation("non-finite value in pooled input".into()));
    }

    let use_all = mask.is_all_zero();
    let mut out;
    match kind {
        PoolKind::Mean => {
            out = Array1::<f64>::zeros(d);
            let mut count = 0u64;
            for (i, row) in vectors.rows().into_iter().enumerate() {
                if use_all || mask.bit(i) {
                    for (acc, v) in out.iter_mut().zip(row) {
                        *acc += f64::from(*v);
                    }
                    count += 1;
                }
            }
            out.mapv_inplace(|v| v / count as f64);
        }
        PoolKind::Max => {
            out = Array1::<f64>::from_elem(d, f64::NEG_INFINITY);
            for (i, row) in vectors.rows().into_iter().enumerate() {
                if use_all || mask.bit(i) {
                    for (acc, v) in out.iter_mut().zip(row) {
                        *acc = acc.max(f64::from(*v));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pools every row of a query (an implicit all-ones mask).
pub fn pool_query(query: &MultiVectorQuery, kind: PoolKind) -> Result<Array1<f64>> {
    pool(
        query.vectors.view(),
        &KeepMask::all_ones(query.num_vectors()),
        kind,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn mean_over_full_mask() {
        let rows = array![[1.0f32, 2.0], [3.0, 4.0]];
        let out = pool(rows.view(), &KeepMask::all_ones(2), PoolKind::Mean).unwrap();
        assert_eq!(out, array![2.0, 3.0]);
    }

    #[test]
    fn max_over_full_mask() {
        let rows = array![[1.0f32, -2.0], [0.0, 5.0]];
        let out = pool(rows.view(), &KeepMask::all_ones(2), PoolKind::Max).unwrap();
        assert_eq!(out, array![1.0, 5.0]);
    }

    #[test]
    fn all_zero_mask_falls_back_to_all_rows() {
        let rows = array![[1.0f32, 2.0], [3.0, 4.0]];
        let out = pool(
            rows.view(),
            &KeepMask::new(vec![false, false]),
            PoolKind::Mean,
        )
        .unwrap();
        assert_eq!(out, array![2.0, 3.0]);
    }

    #[test]
    fn mask_excludes_rows() {
        let rows = array![[1.0f32, 2.0], [3.0, 4.0], [100.0, 100.0]];
        let out = pool(
            rows.view(),
            &KeepMask::new(vec![true, true, false]),
            PoolKind::Mean,
        )
        .unwrap();
        assert_eq!(out, array![2.0, 3.0]);
    }

    #[test]
    fn mask_length_mismatch_is_shape_error() {
        let rows = array![[1.0f32, 2.0]];
        let err = pool(rows.view(), &KeepMask::all_ones(3), PoolKind::Mean).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn non_finite_input_rejected() {
        let rows = array![[f32::NAN, 2.0]];
        let err = pool(rows.view(), &KeepMask::all_ones(1), PoolKind::Mean).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn query_pooling_examples() {
        let single = MultiVectorQuery::new("q", array![[0.25f32, -1.5]]).unwrap();
        assert_eq!(
            pool_query(&single, PoolKind::Mean).unwrap(),
            array![0.25, -1.5]
        );
        assert_eq!(
            pool_query(&single, PoolKind::Max).unwrap(),
            array![0.25, -1.5]
        );

        let two = MultiVectorQuery::new("q", array![[0.0f32, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(pool_query(&two, PoolKind::Mean).unwrap(), array![0.5, 0.5]);
        assert_eq!(pool_query(&two, PoolKind::Max).unwrap(), array![1.0, 1.0]);
    }

    #[test]
    fn single_kept_row_is_identity() {
        let rows = array![[0.5f32, -2.5, 7.0], [9.0, 9.0, 9.0]];
        for kind in [PoolKind::Mean, PoolKind::Max] {
            let out = pool(rows.view(), &KeepMask::new(vec![true, false]), kind).unwrap();
            assert_eq!(out, array![0.5, -2.5, 7.0]);
        }
    }

    #[test]
    fn pool_kind_parses() {
        assert_eq!("mean".parse::<PoolKind>().unwrap(), PoolKind::Mean);
        assert_eq!("Max".parse::<PoolKind>().unwrap(), PoolKind::Max);
        assert!("sum".parse::<PoolKind>().is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<bool>)> {
        (1usize..8, 1usize..5).prop_flat_map(|(n, d)| {
            (
                proptest::collection::vec(
                    proptest::collection::vec(-100.0f32..100.0, d..=d),
                    n..=n,
                ),
                proptest::collection::vec(any::<bool>(), n..=n),
            )
        })
    }

    proptest! {
        #[test]
        fn prop_permutation_invariance((rows, bits) in arb_case()) {
            let n = rows.len();
            let d = rows[0].len();
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            let m = ndarray::Array2::from_shape_vec((n, d), flat).unwrap();

            // reversal is a nontrivial permutation for n > 1
            let rev_rows: Vec<f32> = rows.iter().rev().flatten().copied().collect();
            let m_rev = ndarray::Array2::from_shape_vec((n, d), rev_rows).unwrap();
            let bits_rev: Vec<bool> = bits.iter().rev().copied().collect();

            for kind in [PoolKind::Mean, PoolKind::Max] {
                let a = pool(m.view(), &KeepMask::new(bits.clone()), kind).unwrap();
                let b = pool(m_rev.view(), &KeepMask::new(bits_rev.clone()), kind).unwrap();
                match kind {
                    // max is order-independent, so the match is exact
                    PoolKind::Max => prop_assert_eq!(&a, &b),
                    PoolKind::Mean => {
                        for (x, y) in a.iter().zip(b.iter()) {
                            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0));
                        }
                    }
                }
            }
        }

        #[test]
        fn prop_max_monotone_in_kept_set((rows, bits) in arb_case()) {
            let n = rows.len();
            let d = rows[0].len();
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            let m = ndarray::Array2::from_shape_vec((n, d), flat).unwrap();

            // adding one row to a non-empty kept set never lowers any coordinate
            prop_assume!(bits.iter().any(|b| *b));
            if let Some(off) = bits.iter().position(|b| !*b) {
                let base = pool(m.view(), &KeepMask::new(bits.clone()), PoolKind::Max).unwrap();
                let mut grown = bits.clone();
                grown[off] = true;
                let bigger = pool(m.view(), &KeepMask::new(grown), PoolKind::Max).unwrap();
                for (lo, hi) in base.iter().zip(bigger.iter()) {
                    prop_assert!(hi >= lo);
                }
            }
        }

        #[test]
        fn prop_full_mask_matches_static_baseline((rows, _) in arb_case()) {
            let n = rows.len();
            let d = rows[0].len();
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            let m = ndarray::Array2::from_shape_vec((n, d), flat).unwrap();
            for kind in [PoolKind::Mean, PoolKind::Max] {
                let full = pool(m.view(), &KeepMask::all_ones(n), kind).unwrap();
                let fallback = pool(m.view(), &KeepMask::new(vec![false; n]), kind).unwrap();
                prop_assert_eq!(full, fallback);
            }
        }
    }
}
