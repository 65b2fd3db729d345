//! Gaussian blob generator used by examples, tests and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Dataset, FeatureShape, Label, LabeledSample, SplitTag};

/// Isotropic Gaussian clusters, one class per center, named `c0`, `c1`, ...
///
/// Samples are ordered class by class. Source ids are `blob<class>_<index>`.
pub fn gaussian_blobs<T: Scalar>(
    centers: &[Vec<f64>],
    per_class: usize,
    std_dev: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    let dim = centers.first().map(Vec::len).ok_or_else(|| Error::EmptyInput("no blob centers".into()))?;
    if centers.iter().any(|c| c.len() != dim) {
        return Err(Error::InvalidInput("blob centers differ in dimension".into()));
    }
    let noise = Normal::new(0.0, std_dev).map_err(|e| Error::InvalidInput(format!("blob std_dev {std_dev}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(centers.len() * per_class);
    for (class, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let features = center.iter().map(|&m| T::lit(m + noise.sample(&mut rng))).collect();
            samples.push(LabeledSample::new(
                features,
                FeatureShape::Flat(dim),
                Label::Known(class),
                format!("blob{class}_{i}"),
            )?);
        }
    }
    let class_names = (0..centers.len()).map(|c| format!("c{c}")).collect();
    Dataset::new(samples, class_names, SplitTag::Full)
}
