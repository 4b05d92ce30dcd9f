//! Persistence for multi-vector corpora, query collections, relevance
//! judgments, and compressed single-vector indices.
//!
//! A collection directory holds `manifest.json` plus `vectors.bin`, a
//! headerless blob of little-endian f32s. The manifest order is
//! authoritative and `offset_floats` entries are cumulative, so readers can
//! verify the binary payload byte-for-byte. Relevance judgments are a TSV
//! of `query_id<TAB>doc_id<TAB>grade` lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.bin";

/// One document's token-level embedding matrix (N rows of dimension d).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVectorDoc {
    pub doc_id: String,
    pub vectors: Array2<f32>,
    /// Optional evaluation subset tag carried through the manifest.
    pub subset: Option<String>,
}

/// A query's embedding matrix (M rows of dimension d; M = 1 for
/// single-vector queries).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVectorQuery {
    pub query_id: String,
    pub vectors: Array2<f32>,
    pub subset: Option<String>,
}

impl MultiVectorDoc {
    pub fn new(doc_id: impl Into<String>, vectors: Array2<f32>) -> Result<Self> {
        let doc_id = doc_id.into();
        validate_matrix(&doc_id, &vectors)?;
        Ok(MultiVectorDoc {
            doc_id,
            vectors,
            subset: None,
        })
    }

    pub fn num_vectors(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

impl MultiVectorQuery {
    pub fn new(query_id: impl Into<String>, vectors: Array2<f32>) -> Result<Self> {
        let query_id = query_id.into();
        validate_matrix(&query_id, &vectors)?;
        Ok(MultiVectorQuery {
            query_id,
            vectors,
            subset: None,
        })
    }

    pub fn num_vectors(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn validate_matrix(id: &str, vectors: &Array2<f32>) -> Result<()> {
    if vectors.nrows() == 0 || vectors.ncols() == 0 {
        return Err(Error::Validation(format!(
            "{id}: embedding matrix must have at least one row and one column"
        )));
    }
    if !vectors.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation(format!(
            "{id}: non-finite embedding value"
        )));
    }
    Ok(())
}

/// Graded relevance judgments keyed by (query id, doc id).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    by_query: BTreeMap<String, BTreeMap<String, u32>>,
    len: usize,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    /// Adds one judgment; duplicate (query, doc) pairs are rejected.
    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        doc_id: impl Into<String>,
        grade: u32,
    ) -> Result<()> {
        let query_id = query_id.into();
        let doc_id = doc_id.into();
        let row = self.by_query.entry(query_id.clone()).or_default();
        if row.contains_key(&doc_id) {
            return Err(Error::Duplicate(format!("({query_id}, {doc_id})")));
        }
        row.insert(doc_id, grade);
        self.len += 1;
        Ok(())
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.by_query
            .get(query_id)
            .and_then(|row| row.get(doc_id))
            .copied()
    }

    /// All judged documents for a query, with grades.
    pub fn docs_for(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.by_query.get(query_id)
    }

    /// Queries judged relevant (grade >= 1) for a document.
    pub fn positives_for_doc(&self, doc_id: &str) -> BTreeSet<String> {
        self.by_query
            .iter()
            .filter(|(_, row)| row.get(doc_id).is_some_and(|g| *g >= 1))
            .map(|(q, _)| q.clone())
            .collect()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &String> {
        self.by_query.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String, u32)> {
        self.by_query
            .iter()
            .flat_map(|(q, row)| row.iter().map(move |(d, g)| (q, d, *g)))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for (q, d, g) in self.iter() {
            writeln!(out, "{q}\t{d}\t{g}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Parses a `query_id<TAB>doc_id<TAB>grade` TSV file.
pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let text = fs::read_to_string(path)?;
    let mut qrels = Qrels::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let grade: i64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("grade `{}` is not an integer", fields[2]),
        })?;
        if grade < 0 {
            return Err(Error::Validation(format!(
                "line {lineno}: negative grade {grade}"
            )));
        }
        qrels.insert(fields[0], fields[1], grade as u32)?;
    }
    Ok(qrels)
}

/// A compressed corpus: one vector per document, row order matching `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleVectorIndex {
    pub ids: Vec<String>,
    pub vectors: Array2<f32>,
    pub subsets: Vec<Option<String>>,
}

impl SingleVectorIndex {
    pub fn new(
        ids: Vec<String>,
        vectors: Array2<f32>,
        subsets: Vec<Option<String>>,
    ) -> Result<Self> {
        if ids.len() != vectors.nrows() || ids.len() != subsets.len() {
            return Err(Error::Shape(format!(
                "index has {} ids but {} rows",
                ids.len(),
                vectors.nrows()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::Duplicate(format!("index id {id}")));
            }
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite index value".into()));
        }
        Ok(SingleVectorIndex {
            ids,
            vectors,
            subsets,
        })
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

    pub fn save(&self, dir: &Path) -> Result<()> {
        let entries: Vec<RawEntry<'_>> = self
            .ids
            .iter()
            .zip(self.vectors.rows())
            .zip(&self.subsets)
            .map(|((id, row), subset)| RawEntry {
                id,
                vectors: row.insert_axis(ndarray::Axis(0)).to_owned(),
                subset: subset.as_deref(),
            })
            .collect();
        save_raw(&entries, self.dim(), dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (dim, entries) = load_raw(dir)?;
        let mut ids = Vec::with_capacity(entries.len());
        let mut subsets = Vec::with_capacity(entries.len());
        let mut flat = Vec::with_capacity(entries.len() * dim);
        for (id, vectors, subset) in entries {
            if vectors.nrows() != 1 {
                return Err(Error::Validation(format!(
                    "{id}: single-vector index entry has {} rows",
                    vectors.nrows()
                )));
            }
            ids.push(id);
            subsets.push(subset);
            flat.extend(vectors.iter().copied());
        }
        let n = ids.len();
        let vectors = Array2::from_shape_vec((n, dim), flat)
            .map_err(|e| Error::CorruptStore(e.to_string()))?;
        SingleVectorIndex::new(ids, vectors, subsets)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    docs: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    num_vectors: usize,
    offset_floats: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subset: Option<String>,
}

struct RawEntry<'a> {
    id: &'a str,
    vectors: Array2<f32>,
    subset: Option<&'a str>,
}

fn save_raw(entries: &[RawEntry<'_>], dim: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        dim,
        docs: Vec::with_capacity(entries.len()),
    };
    let mut offset: u64 = 0;
    for e in entries {
        if e.vectors.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.vectors.ncols(),
            });
        }
        manifest.docs.push(ManifestEntry {
            id: e.id.to_string(),
            num_vectors: e.vectors.nrows(),
            offset_floats: offset,
            subset: e.subset.map(str::to_string),
        });
        offset += (e.vectors.nrows() * dim) as u64;
    }

    let mut bin = BufWriter::new(fs::File::create(dir.join(VECTORS_FILE))?);
    for e in entries {
        for v in e.vectors.iter() {
            bin.write_f32::<LittleEndian>(*v)?;
        }
    }
    bin.flush()?;

    let mut mf = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    mf.flush()?;
    Ok(())
}

type RawCollection = (usize, Vec<(String, Array2<f32>, Option<String>)>);

fn load_raw(dir: &Path) -> Result<RawCollection> {
    let manifest: Manifest =
        serde_json::from_reader(BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?))?;
    if manifest.dim == 0 {
        return Err(Error::CorruptStore("manifest dim is zero".into()));
    }

    let bytes = fs::read(dir.join(VECTORS_FILE))?;
    let total_floats: u64 = manifest
        .docs
        .iter()
        .map(|d| (d.num_vectors * manifest.dim) as u64)
        .sum();
    if bytes.len() as u64 != 4 * total_floats {
        return Err(Error::CorruptStore(format!(
            "vectors.bin holds {} bytes, manifest expects {}",
            bytes.len(),
            4 * total_floats
        )));
    }

    let mut cursor = &bytes[..];
    let mut expected_offset: u64 = 0;
    let mut out = Vec::with_capacity(manifest.docs.len());
    let mut seen = BTreeSet::new();
    for entry in manifest.docs {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Duplicate(format!("manifest id {}", entry.id)));
        }
        if entry.offset_floats != expected_offset {
            return Err(Error::CorruptStore(format!(
                "{}: offset {} does not match cumulative {}",
                entry.id, entry.offset_floats, expected_offset
            )));
        }
        if entry.num_vectors == 0 {
            return Err(Error::Validation(format!("{}: zero vectors", entry.id)));
        }
        let count = entry.num_vectors * manifest.dim;
        let mut flat = vec![0f32; count];
        cursor.read_f32_into::<LittleEndian>(&mut flat)?;
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "{}: non-finite stored value",
                entry.id
            )));
        }
        let vectors = Array2::from_shape_vec((entry.num_vectors, manifest.dim), flat)
            .map_err(|e| Error::CorruptStore(e.to_string()))?;
        out.push((entry.id, vectors, entry.subset));
        expected_offset += count as u64;
    }
    Ok((manifest.dim, out))
}

/// Writes a document collection as `manifest.json` + `vectors.bin`.
pub fn save_collection(docs: &[MultiVectorDoc], dir: &Path) -> Result<()> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("cannot save an empty collection".into()));
    }
    let dim = docs[0].dim();
    let entries: Vec<RawEntry<'_>> = docs
        .iter()
        .map(|d| RawEntry {
            id: &d.doc_id,
            vectors: d.vectors.clone(),
            subset: d.subset.as_deref(),
        })
        .collect();
    save_raw(&entries, dim, dir)
}

/// Loads a document collection in manifest order.
pub fn load_collection(dir: &Path) -> Result<Vec<MultiVectorDoc>> {
    let (_, entries) = load_raw(dir)?;
    entries
        .into_iter()
        .map(|(id, vectors, subset)| {
            let mut doc = MultiVectorDoc::new(id, vectors)?;
            doc.subset = subset;
            Ok(doc)
        })
        .collect()
}

/// Writes a query collection; same layout as document collections.
pub fn save_query_collection(queries: &[MultiVectorQuery], dir: &Path) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::EmptyInput(
            "cannot save an empty query collection".into(),
        ));
    }
    let dim = queries[0].dim();
    let entries: Vec<RawEntry<'_>> = queries
        .iter()
        .map(|q| RawEntry {
            id: &q.query_id,
            vectors: q.vectors.clone(),
            subset: q.subset.as_deref(),
        })
        .collect();
    save_raw(&entries, dim, dir)
}

pub fn load_query_collection(dir: &Path) -> Result<Vec<MultiVectorQuery>> {
    let (_, entries) = load_raw(dir)?;
    entries
        .into_iter()
        .map(|(id, vectors, subset)| {
            let mut q = MultiVectorQuery::new(id, vectors)?;
            q.subset = subset;
            Ok(q)
        })
        .collect()
}

/// Storage footprint of a collection: mean vectors per document times
/// dimension. The compression ratio of pooling to one vector per document
/// is `mean_vectors : 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingCost {
    pub mean_vectors: f64,
    pub dim: usize,
}

impl EmbeddingCost {
    pub fn ratio(&self) -> f64 {
        self.mean_vectors
    }
}

/// Formats a count, dropping the decimal part when it is integral.
pub fn format_count(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round() as i64)
    } else {
        format!("{x:.1}")
    }
}

impl std::fmt::Display for EmbeddingCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} x {}", format_count(self.mean_vectors), self.dim)
    }
}

/// Mean vectors per document and shared dimension for a corpus.
pub fn embedding_cost(docs: &[MultiVectorDoc]) -> Result<EmbeddingCost> {
    if docs.is_empty() {
        return Err(Error::EmptyInput(
            "embedding cost of an empty collection".into(),
        ));
    }
    let dim = docs[0].dim();
    for d in docs {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: d.dim(),
            });
        }
    }
    let mean = docs.iter().map(|d| d.num_vectors() as f64).sum::<f64>() / docs.len() as f64;
    Ok(EmbeddingCost {
        mean_vectors: mean,
        dim,
    })
}

/// Checks that all documents share one dimension and returns it.
pub fn collection_dim(docs: &[MultiVectorDoc]) -> Result<usize> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("empty collection".into()));
    }
    let dim = docs[0].dim();
    for d in docs {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: d.dim(),
            });
        }
    }
    Ok(dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn doc(id: &str, rows: Array2<f32>) -> MultiVectorDoc {
        MultiVectorDoc::new(id, rows).unwrap()
    }

    #[test]
    fn binary_format_is_raw_little_endian_f32() {
        let dir = tempdir().unwrap();
        let docs = vec![doc("a", array![[1.0, 2.0], [3.0, 4.0]])];
        save_collection(&docs, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(VECTORS_FILE)).unwrap();
        let mut expected = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 16);
    }

    #[test]
    fn round_trip_preserves_collection() {
        let dir = tempdir().unwrap();
        let docs = vec![
            doc("a", array![[1.0, 2.0], [3.0, 4.0]]),
            doc("b", array![[-0.5, 0.25]]),
        ];
        save_collection(&docs, dir.path()).unwrap();
        let loaded = load_collection(dir.path()).unwrap();
        assert_eq!(loaded, docs);
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let dir = tempdir().unwrap();
        let docs = vec![
            doc("a", Array2::zeros((2, 320))),
            doc("b", Array2::zeros((2, 128))),
        ];
        let err = save_collection(&docs, dir.path()).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 320,
                got: 128
            }
        ));
    }

    #[test]
    fn truncated_binary_is_corrupt() {
        let dir = tempdir().unwrap();
        let docs = vec![doc("a", array![[1.0, 2.0], [3.0, 4.0]])];
        save_collection(&docs, dir.path()).unwrap();
        let path = dir.path().join(VECTORS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_collection(dir.path()).unwrap_err();
        assert!(matches!(err, Error::CorruptStore(_)));
    }

    #[test]
    fn non_finite_value_rejected_on_load() {
        let dir = tempdir().unwrap();
        let docs = vec![doc("a", array![[1.0, 2.0]])];
        save_collection(&docs, dir.path()).unwrap();
        let path = dir.path().join(VECTORS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_collection(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn qrels_parse_and_duplicates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("qrels.tsv");
        fs::write(&path, "q1\td7\t1\n").unwrap();
        let qrels = load_qrels(&path).unwrap();
        assert_eq!(qrels.len(), 1);
        assert_eq!(qrels.grade("q1", "d7"), Some(1));

        fs::write(&path, "q1\td7\t1\nq1\td7\t1\n").unwrap();
        assert!(matches!(
            load_qrels(&path).unwrap_err(),
            Error::Duplicate(_)
        ));

        fs::write(&path, "q1\td7\t-1\n").unwrap();
        assert!(matches!(
            load_qrels(&path).unwrap_err(),
            Error::Validation(_)
        ));

        fs::write(&path, "q1 d7 1\n").unwrap();
        assert!(matches!(
            load_qrels(&path).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn qrels_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("qrels.tsv");
        let mut qrels = Qrels::new();
        qrels.insert("q2", "d1", 2).unwrap();
        qrels.insert("q1", "d1", 1).unwrap();
        qrels.insert("q1", "d9", 0).unwrap();
        qrels.save(&path).unwrap();
        assert_eq!(load_qrels(&path).unwrap(), qrels);
    }

    #[test]
    fn embedding_cost_reports_mean_and_ratio() {
        let docs = vec![
            doc("a", Array2::zeros((1249, 320))),
            doc("b", Array2::zeros((1249, 320))),
        ];
        let cost = embedding_cost(&docs).unwrap();
        assert_eq!(cost.mean_vectors, 1249.0);
        assert_eq!(cost.dim, 320);
        assert_eq!(cost.ratio(), 1249.0);
        assert_eq!(cost.to_string(), "1249 x 320");

        let single = vec![doc("a", Array2::zeros((1, 8)))];
        assert_eq!(embedding_cost(&single).unwrap().ratio(), 1.0);

        assert!(matches!(
            embedding_cost(&[]).unwrap_err(),
            Error::EmptyInput(_)
        ));
    }

    #[test]
    fn large_profile_round_trips_with_expected_cost() {
        let dir = tempdir().unwrap();
        let docs = vec![doc("t0", Array2::from_elem((1249, 320), 0.5))];
        save_collection(&docs, dir.path()).unwrap();
        let loaded = load_collection(dir.path()).unwrap();
        let cost = embedding_cost(&loaded).unwrap();
        assert_eq!(cost.to_string(), "1249 x 320");
        let size = fs::metadata(dir.path().join(VECTORS_FILE)).unwrap().len();
        assert_eq!(size, 4 * 1249 * 320);
    }

    #[test]
    fn single_vector_index_round_trip() {
        let dir = tempdir().unwrap();
        let index = SingleVectorIndex::new(
            vec!["a".into(), "b".into()],
            array![[1.0f32, 2.0], [3.0, 4.0]],
            vec![None, Some("eco".into())],
        )
        .unwrap();
        index.save(dir.path()).unwrap();
        assert_eq!(SingleVectorIndex::load(dir.path()).unwrap(), index);
    }

    fn arb_collection() -> impl Strategy<Value = Vec<MultiVectorDoc>> {
        (1usize..4, 1usize..5).prop_flat_map(|(num_docs, dim)| {
            proptest::collection::vec(
                (1usize..6, proptest::collection::vec(-1e6f32..1e6, 1..30)),
                num_docs..=num_docs,
            )
            .prop_map(move |specs| {
                specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (rows, mut data))| {
                        data.resize(rows * dim, 0.125);
                        MultiVectorDoc::new(
                            format!("doc{i}"),
                            Array2::from_shape_vec((rows, dim), data).unwrap(),
                        )
                        .unwrap()
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn prop_round_trip_bit_exact(docs in arb_collection()) {
            let dir = tempdir().unwrap();
            save_collection(&docs, dir.path()).unwrap();
            let loaded = load_collection(dir.path()).unwrap();
            prop_assert_eq!(&loaded, &docs);

            let total: usize = docs.iter().map(|d| d.num_vectors() * d.dim()).sum();
            let size = fs::metadata(dir.path().join(VECTORS_FILE)).unwrap().len();
            prop_assert_eq!(size, 4 * total as u64);
        }
    }
}
