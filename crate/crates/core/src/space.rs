//! The embedding gallery and exact k-nearest-neighbor classification.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::topk_accuracy;
use crate::network::NetworkParams;
use crate::scalar::{sq_dist, Scalar};
use crate::trainer::feature_matrix;
use crate::util::sha256_hex;

pub const DEFAULT_K: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub manifest_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Ranked class probabilities and the final decision for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult<T> {
    /// Classes with non-zero probability, most probable first.
    pub ranked: Vec<(usize, T)>,
    pub prediction: Label,
    /// Gallery rows that produced the decision, nearest first.
    pub neighbor_ids: Vec<usize>,
}

impl<T: Scalar> ClassificationResult<T> {
    pub fn probability(&self, class: usize) -> T {
        self.ranked.iter().find(|(c, _)| *c == class).map_or(T::zero(), |&(_, p)| p)
    }

    pub fn max_probability(&self) -> T {
        self.ranked.first().map_or(T::zero(), |&(_, p)| p)
    }
}

/// Training embeddings with their labels. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace<T> {
    embeddings: Matrix<T>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    provenance: Provenance,
}

/// A gallery row and its Euclidean distance to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    pub index: usize,
    pub distance: T,
}

impl<T: Scalar> EmbeddingSpace<T> {
    pub fn new(
        embeddings: Matrix<T>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", embeddings.rows()),
                found: format!("{}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidInput(format!("gallery label {bad} with only {} classes", class_names.len())));
        }
        if !embeddings.is_finite() {
            return Err(Error::NonFinite("gallery embeddings".into()));
        }
        Ok(Self { embeddings, labels, class_names, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// SHA-256 over dimensions, labels and embedding bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(16 + self.labels.len() * 8 + self.embeddings.as_slice().len() * 8);
        bytes.extend((self.len() as u64).to_le_bytes());
        bytes.extend((self.dim() as u64).to_le_bytes());
        for &l in &self.labels {
            bytes.extend((l as u64).to_le_bytes());
        }
        for v in self.embeddings.as_slice() {
            bytes.extend(v.as_f64().to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Largest pairwise Euclidean distance between gallery rows.
    pub fn diameter(&self) -> T {
        let mut best = T::zero();
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                best = best.max(sq_dist(self.embeddings.row(i), self.embeddings.row(j)));
            }
        }
        best.sqrt()
    }

    fn check_query(&self, query: &[T]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput("embedding space".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("query of length {}", self.dim()),
                found: format!("length {}", query.len()),
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query embedding".into()));
        }
        Ok(())
    }

    /// Every gallery row ordered by (distance, index).
    pub fn neighbors(&self, query: &[T]) -> Result<Vec<Neighbor<T>>> {
        self.check_query(query)?;
        let mut all: Vec<Neighbor<T>> = self
            .embeddings
            .iter_rows()
            .enumerate()
            .map(|(index, row)| Neighbor { index, distance: sq_dist(row, query).sqrt() })
            .collect();
        all.sort_by(cmp_neighbors);
        Ok(all)
    }

    /// Vote proportions over `neighbors`, ranked by probability, then smaller
    /// mean neighbor distance, then class index.
    pub(crate) fn rank_votes(&self, neighbors: &[Neighbor<T>]) -> Vec<(usize, T)> {
        let mut counts = vec![0usize; self.num_classes()];
        let mut dist_sum = vec![T::zero(); self.num_classes()];
        for nb in neighbors {
            let c = self.labels[nb.index];
            counts[c] += 1;
            dist_sum[c] = dist_sum[c] + nb.distance;
        }
        let total = T::from_usize_lossy(neighbors.len().max(1));
        let mut ranked: Vec<(usize, usize, T)> = counts
            .iter()
            .enumerate()
            .filter(|&(_, &n)| n > 0)
            .map(|(c, &n)| (c, n, dist_sum[c] / T::from_usize_lossy(n)))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.partial_cmp(&b.2).unwrap_or(Ordering::Equal)).then(a.0.cmp(&b.0)));
        ranked.into_iter().map(|(c, n, _)| (c, T::from_usize_lossy(n) / total)).collect()
    }

    pub(crate) fn knn_from_sorted(&self, sorted: &[Neighbor<T>], k: usize) -> ClassificationResult<T> {
        let nearest = &sorted[..k];
        let ranked = self.rank_votes(nearest);
        ClassificationResult {
            prediction: Label::Known(ranked[0].0),
            ranked,
            neighbor_ids: nearest.iter().map(|n| n.index).collect(),
        }
    }

    pub(crate) fn check_k(&self, k: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput("embedding space".into()));
        }
        if k == 0 || k > self.len() {
            return Err(Error::OutOfRange { name: "k", value: k as f64, range: "[1, gallery size]" });
        }
        Ok(())
    }

    /// Closed-set KNN: probability of a class is its share of the `k` nearest
    /// gallery rows; the prediction is the top-ranked class.
    pub fn knn_classify(&self, query: &[T], k: usize) -> Result<ClassificationResult<T>> {
        self.check_k(k)?;
        let sorted = self.neighbors(query)?;
        Ok(self.knn_from_sorted(&sorted, k))
    }

    pub fn knn_classify_all(&self, queries: &Matrix<T>, k: usize) -> Result<Vec<ClassificationResult<T>>> {
        self.check_k(k)?;
        (0..queries.rows()).into_par_iter().map(|i| self.knn_classify(queries.row(i), k)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.dim() {
            let _ = write!(out, ",e{j}");
        }
        out.push('\n');
        for (row, &l) in self.embeddings.iter_rows().zip(&self.labels) {
            out.push_str(&self.class_names[l]);
            for v in row {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Binary gallery: 8-byte magic, little-endian u64 header length, JSON
    /// header, then row-major little-endian `f64` embeddings.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let header = GalleryHeader {
            format_version: GALLERY_VERSION,
            n: self.dim(),
            count: self.len(),
            class_names: self.class_names.clone(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(GALLERY_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in self.embeddings.as_slice() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GALLERY_MAGIC {
            return Err(bad("not a gallery file"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: GalleryHeader = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
        if header.format_version != GALLERY_VERSION {
            return Err(Error::FormatVersion { found: header.format_version, expected: GALLERY_VERSION });
        }
        if header.labels.len() != header.count {
            return Err(bad("label count disagrees with header"));
        }
        let mut data = Vec::with_capacity(header.count * header.n);
        let mut buf = [0u8; 8];
        for _ in 0..header.count * header.n {
            r.read_exact(&mut buf)?;
            data.push(T::lit(f64::from_le_bytes(buf)));
        }
        let embeddings = Matrix::from_vec(header.count, header.n, data)?;
        Self::new(embeddings, header.labels, header.class_names, header.provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(f, path)
    }
}

const GALLERY_MAGIC: &[u8; 8] = b"OSGALLRY";
const GALLERY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GalleryHeader {
    format_version: u32,
    n: usize,
    #[serde(rename = "N")]
    count: usize,
    class_names: Vec<String>,
    labels: Vec<usize>,
    provenance: Provenance,
}

fn cmp_neighbors<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> Ordering {
    a.distance.partial_cmp(&b.distance).unwrap_or(Ordering::Equal).then(a.index.cmp(&b.index))
}

/// Embeds every sample of `ds` and returns the rows with their labels.
pub fn embed_dataset<T: Scalar>(params: &NetworkParams<T>, ds: &Dataset<T>) -> Result<(Matrix<T>, Vec<Label>)> {
    if ds.is_empty() {
        return Ok((Matrix::zeros(0, params.architecture.embedding_dim), Vec::new()));
    }
    let x = feature_matrix(ds)?;
    Ok((params.embed(&x)?, ds.labels()))
}

/// Embeds the training split into a gallery.
pub fn build_space<T: Scalar>(
    params: &NetworkParams<T>,
    train: &Dataset<T>,
    provenance: Provenance,
) -> Result<EmbeddingSpace<T>> {
    let (emb, labels) = embed_dataset(params, train)?;
    let labels = labels
        .into_iter()
        .zip(&train.samples)
        .map(|(l, s)| {
            l.known().ok_or_else(|| Error::InvalidInput(format!("gallery sample `{}` is labeled Novel", s.source_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSpace::new(emb, labels, train.class_names.clone(), provenance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub top1: f64,
    pub top3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweep {
    pub rows: Vec<KSweepRow>,
    /// Smallest k with the highest top-1 accuracy.
    pub best_k: usize,
}

impl KSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,top1,top3\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.k, r.top1, r.top3);
        }
        out
    }
}

/// Top-1 and top-3 KNN accuracy of `queries` for every k in `ks`.
pub fn sweep_k<T: Scalar>(
    space: &EmbeddingSpace<T>,
    queries: &Matrix<T>,
    truths: &[Label],
    ks: &[usize],
) -> Result<KSweep> {
    if queries.rows() == 0 {
        return Err(Error::EmptyInput("k-sweep test set".into()));
    }
    if queries.rows() != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} truths", queries.rows()),
            found: format!("{}", truths.len()),
        });
    }
    for &k in ks {
        space.check_k(k)?;
    }
    let max_k = ks.iter().copied().max().ok_or_else(|| Error::EmptyInput("k range".into()))?;
    let sorted: Vec<Vec<Neighbor<T>>> = (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let mut all = space.neighbors(queries.row(i))?;
            all.truncate(max_k);
            Ok(all)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let results: Vec<ClassificationResult<T>> = sorted.iter().map(|s| space.knn_from_sorted(s, k)).collect();
        rows.push(KSweepRow {
            k,
            top1: topk_accuracy(&results, truths, 1)?,
            top3: topk_accuracy(&results, truths, 3)?,
        });
    }
    let best_k = rows
        .iter()
        .fold(None, |best: Option<&KSweepRow>, r| match best {
            Some(b) if r.top1 <= b.top1 => Some(b),
            _ => Some(r),
        })
        .map(|r| r.k)
        .expect("non-empty k range");
    Ok(KSweep { rows, best_k })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(rows: &[&[f64]], labels: Vec<usize>, classes: usize) -> EmbeddingSpace<f64> {
        EmbeddingSpace::new(
            Matrix::from_rows(rows).unwrap(),
            labels,
            (0..classes).map(|c| format!("k{c}")).collect(),
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn self_query_k1() {
        let s = space(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]], vec![0, 1, 2], 3);
        let r = s.knn_classify(&[1.0, 0.0], 1).unwrap();
        assert_eq!(r.prediction, Label::Known(1));
        assert_eq!(r.ranked, vec![(1, 1.0)]);
        assert_eq!(r.neighbor_ids, vec![1]);
    }

    #[test]
    fn even_split_probabilities() {
        // A neighbors slightly closer on average, so A ranks first on the tie.
        let s = space(&[&[0.1], &[0.2], &[-0.15], &[-0.25], &[5.0]], vec![0, 0, 1, 1, 1], 2);
        let r = s.knn_classify(&[0.0], 4).unwrap();
        assert_eq!(r.ranked, vec![(0, 0.5), (1, 0.5)]);
        assert_eq!(r.prediction, Label::Known(0));
    }

    #[test]
    fn distance_ties_prefer_lower_index() {
        let s = space(&[&[1.0], &[-1.0], &[1.0]], vec![1, 0, 0], 2);
        let r = s.knn_classify(&[0.0], 1).unwrap();
        assert_eq!(r.neighbor_ids, vec![0]);
        assert_eq!(r.prediction, Label::Known(1));
    }

    #[test]
    fn k_out_of_range_and_empty() {
        let s = space(&[&[0.0]], vec![0], 1);
        assert!(s.knn_classify(&[0.0], 0).is_err());
        assert!(s.knn_classify(&[0.0], 2).is_err());
        let e =
            EmbeddingSpace::<f64>::new(Matrix::zeros(0, 1), vec![], vec!["a".into()], Provenance::default()).unwrap();
        assert!(matches!(e.knn_classify(&[0.0], 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn binary_roundtrip() {
        let s = EmbeddingSpace::new(
            Matrix::from_rows(&[[0.25, -1.5], [3.0, 1e-300]]).unwrap(),
            vec![1, 0],
            vec!["a".into(), "b".into()],
            Provenance { checkpoint_id: "ck".into(), manifest_id: "mf".into(), config_hash: Some("cfg".into()) },
        )
        .unwrap();
        let mut buf = Vec::new();
        s.write_binary(&mut buf).unwrap();
        let back = EmbeddingSpace::<f64>::read_binary(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.to_csv(), "label,e0,e1\nb,0.25,-1.5\na,3.0,1e-300\n");
    }
}
