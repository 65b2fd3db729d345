use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::scalar::{sq_dist, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection<T> {
    /// N × kept projected coordinates.
    pub coords: Matrix<T>,
    /// d × kept principal axes as unit columns.
    pub components: Matrix<T>,
    pub mean: Vec<T>,
    /// Variance share of each requested component (0 beyond the data rank).
    pub explained_variance_ratio: Vec<T>,
    /// True when fewer components than requested carry variance.
    pub reduced_rank: bool,
}

impl<T: Scalar> PcaProjection<T> {
    /// Maps coordinates back into the original space.
    pub fn reconstruct(&self, coords: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = coords.matmul(&self.components.transpose())?;
        for i in 0..out.rows() {
            for (v, &m) in out.row_mut(i).iter_mut().zip(&self.mean) {
                *v = *v + m;
            }
        }
        Ok(out)
    }
}

/// Projects mean-centered rows onto the leading eigenvectors of the sample
/// covariance. Each axis is signed so its largest-magnitude entry is positive.
pub fn pca_project<T: Scalar>(data: &Matrix<T>, components: usize) -> Result<PcaProjection<T>> {
    let (n, d) = (data.rows(), data.cols());
    if components == 0 || components > d {
        return Err(Error::OutOfRange { name: "components", value: components as f64, range: "[1, dimension]" });
    }
    if n < components {
        return Err(Error::InvalidInput(format!(
            "PCA with {components} components needs at least {components} rows, got {n}"
        )));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mean = data.column_means();
    let mut centered = data.clone();
    for i in 0..n {
        for (v, &m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v = *v - m;
        }
    }
    let denom = T::from_usize_lossy(n.saturating_sub(1).max(1));
    let mut cov = centered.transpose().matmul(&centered)?;
    for v in 0..d {
        for w in 0..d {
            cov[(v, w)] = cov[(v, w)] / denom;
        }
    }
    let eig = symmetric_eigen(&cov)?;
    let values: Vec<T> = eig.values.iter().map(|&v| v.max(T::zero())).collect();
    let total: T = values.iter().copied().sum();
    let tol = values[0] * T::epsilon().sqrt();
    let rank = values.iter().take_while(|&&v| v > tol).count();
    let kept = components.min(rank.max(1));
    let reduced_rank = kept < components;
    if reduced_rank {
        log::warn!("PCA: data rank {rank} is below the {components} requested components");
    }

    let mut axes = Matrix::zeros(d, kept);
    for c in 0..kept {
        let col: Vec<T> = (0..d).map(|r| eig.vectors[(r, c)]).collect();
        let pivot = col.iter().enumerate().fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        let sign = if col[pivot] < T::zero() { -T::one() } else { T::one() };
        for (r, &v) in col.iter().enumerate() {
            axes[(r, c)] = sign * v;
        }
    }
    let coords = centered.matmul(&axes)?;
    let explained_variance_ratio =
        (0..components).map(|c| if c >= kept || total == T::zero() { T::zero() } else { values[c] / total }).collect();
    Ok(PcaProjection { coords, components: axes, mean, explained_variance_ratio, reduced_rank })
}

/// Mean pairwise distance between class centroids divided by the mean
/// within-class radius (average distance of members to their centroid).
pub fn cluster_separation<T: Scalar>(points: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    if points.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", points.rows()),
            found: format!("{}", labels.len()),
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let d = points.cols();
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &l) in points.iter_rows().zip(labels) {
        counts[l] += 1;
        for (c, &v) in centroids[l].iter_mut().zip(row) {
            *c += v.as_f64();
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::InvalidInput("cluster separation needs two populated classes".into()));
    }
    for &c in &present {
        centroids[c].iter_mut().for_each(|v| *v /= counts[c] as f64);
    }
    let mut radius = vec![0.0; classes];
    for (row, &l) in points.iter_rows().zip(labels) {
        let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        radius[l] += sq_dist(&r, &centroids[l]).sqrt();
    }
    let mean_radius = present.iter().map(|&c| radius[c] / counts[c] as f64).sum::<f64>() / present.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            inter += sq_dist(&centroids[a], &centroids[b]).sqrt();
            pairs += 1;
        }
    }
    Ok((inter / pairs as f64) / mean_radius.max(f64::MIN_POSITIVE))
}
