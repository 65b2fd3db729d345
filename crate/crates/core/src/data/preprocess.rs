use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{FeatureShape, LabeledSample};

/// Drops an alpha channel, resizes bilinearly to `target` = (height, width)
/// and scales values into [0, 1] by the sample's `value_max`.
pub fn preprocess<T: Scalar>(sample: &LabeledSample<T>, target: (usize, usize)) -> Result<LabeledSample<T>> {
    let FeatureShape::Image { channels, height, width } = sample.shape else {
        return Err(Error::UnsupportedOperation(format!(
            "preprocess needs an image, `{}` is a flat vector",
            sample.source_id
        )));
    };
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::InvalidInput(format!("`{}` has zero-sized shape {}", sample.source_id, sample.shape)));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::InvalidInput(format!("target size {}x{} must be positive", target.0, target.1)));
    }
    if !(sample.value_max > 0.0) {
        return Err(Error::InvalidInput(format!(
            "`{}` has non-positive value range {}",
            sample.source_id, sample.value_max
        )));
    }
    let kept = if channels == 4 { 3 } else { channels };
    let plane = height * width;
    let rgb = &sample.features[..kept * plane];
    let mut resized = resize_bilinear(rgb, kept, (height, width), target);
    let scale = T::lit(sample.value_max);
    for v in &mut resized {
        *v = (*v / scale).max(T::zero()).min(T::one());
    }
    Ok(LabeledSample {
        features: resized,
        shape: FeatureShape::Image { channels: kept, height: target.0, width: target.1 },
        label: sample.label,
        source_id: sample.source_id.clone(),
        value_max: 1.0,
    })
}

/// Bilinear resize of a channel-major image using pixel-center alignment.
///
/// Source coordinates are clamped to the image, so border pixels of the output
/// reproduce the source border values.
pub fn resize_bilinear<T: Scalar>(
    src: &[T],
    channels: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<T> {
    debug_assert_eq!(src.len(), channels * in_h * in_w);
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_vec();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, T::lit(pos - lo as f64))
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * in_h * in_w..(c + 1) * in_h * in_w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * in_w + x0] * (T::one() - fx) + plane[y0 * in_w + x1] * fx;
                let bottom = plane[y1 * in_w + x0] * (T::one() - fx) + plane[y1 * in_w + x1] * fx;
                out.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    out
}

fn image_dims<T>(s: &LabeledSample<T>) -> Result<(usize, usize, usize)> {
    match s.shape {
        FeatureShape::Image { channels, height, width } => Ok((channels, height, width)),
        FeatureShape::Flat(_) => {
            Err(Error::UnsupportedOperation(format!("flip needs an image, `{}` is a flat vector", s.source_id)))
        }
    }
}

/// Mirrors every row (reverses the width axis).
pub fn flip_horizontal<T: Scalar>(s: &LabeledSample<T>) -> Result<LabeledSample<T>> {
    let (c, h, w) = image_dims(s)?;
    let mut features = Vec::with_capacity(s.features.len());
    for row in s.features.chunks_exact(w).take(c * h) {
        features.extend(row.iter().rev());
    }
    Ok(LabeledSample { features, ..s.clone() })
}

/// Mirrors every column (reverses the height axis).
pub fn flip_vertical<T: Scalar>(s: &LabeledSample<T>) -> Result<LabeledSample<T>> {
    let (c, h, w) = image_dims(s)?;
    let mut features = Vec::with_capacity(s.features.len());
    for plane in s.features.chunks_exact(h * w).take(c) {
        for row in plane.chunks_exact(w).rev() {
            features.extend_from_slice(row);
        }
    }
    Ok(LabeledSample { features, ..s.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use proptest::prelude::*;

    fn img(c: usize, h: usize, w: usize, values: Vec<f64>) -> LabeledSample<f64> {
        LabeledSample::new(values, FeatureShape::Image { channels: c, height: h, width: w }, Label::Known(0), "img")
            .unwrap()
    }

    #[test]
    fn rgba_64_to_rgb_128() {
        let mut s = img(4, 64, 64, vec![100.0; 4 * 64 * 64]);
        s.value_max = 255.0;
        let out = preprocess(&s, (128, 128)).unwrap();
        assert_eq!(out.shape, FeatureShape::Image { channels: 3, height: 128, width: 128 });
        assert_eq!(out.features.len(), 3 * 128 * 128);
        assert!(out.features.iter().all(|&v| (v - 100.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn constant_255_scales_to_one() {
        let mut s = img(3, 128, 128, vec![255.0; 3 * 128 * 128]);
        s.value_max = 255.0;
        let out = preprocess(&s, (128, 128)).unwrap();
        assert_eq!(out.shape, s.shape);
        assert!(out.features.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkerboard_upscale_matches_hand_oracle() {
        // Pixel-center mapping for 2 -> 4: source coords (clamped) 0, 0.25, 0.75, 1.
        // Row/column weights along each axis are therefore [0, .25, .75, 1].
        let src = [0.0f64, 1.0, 1.0, 0.0];
        let out = resize_bilinear(&src, 1, (2, 2), (4, 4));
        let w = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let (fy, fx) = (w[y], w[x]);
                // f(x, y) = x(1-y) + y(1-x) for the checkerboard corners.
                let expected = fx * (1.0 - fy) + fy * (1.0 - fx);
                assert!((out[y * 4 + x] - expected).abs() < 1e-12, "({y},{x})");
            }
        }
        assert_eq!(out[0], 0.0);
        assert_eq!(out[3], 1.0);
        assert_eq!(out[12], 1.0);
        assert_eq!(out[15], 0.0);
    }

    #[test]
    fn rejects_flat_and_zero_sized() {
        let flat = LabeledSample::new(vec![1.0f64; 3], FeatureShape::Flat(3), Label::Known(0), "f").unwrap();
        assert!(matches!(preprocess(&flat, (4, 4)), Err(Error::UnsupportedOperation(_))));
        let empty = img(3, 0, 5, vec![]);
        assert!(matches!(preprocess(&empty, (4, 4)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn flips_on_2x2() {
        let s = img(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flip_horizontal(&s).unwrap().features, vec![2.0, 1.0, 4.0, 3.0]);
        assert_eq!(flip_vertical(&s).unwrap().features, vec![3.0, 4.0, 1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn flips_are_involutions(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let values: Vec<f64> = (0..c * h * w).map(|i| ((i as u64 * 31 + seed) % 97) as f64).collect();
            let s = img(c, h, w, values);
            prop_assert_eq!(&flip_horizontal(&flip_horizontal(&s).unwrap()).unwrap(), &s);
            prop_assert_eq!(&flip_vertical(&flip_vertical(&s).unwrap()).unwrap(), &s);
        }

        #[test]
        fn preprocess_output_in_unit_range(h in 1usize..9, w in 1usize..9, th in 1usize..12, tw in 1usize..12, seed in 0u64..1000) {
            let values: Vec<f64> = (0..3 * h * w).map(|i| ((i as u64 * 131 + seed) % 256) as f64).collect();
            let mut s = img(3, h, w, values);
            s.value_max = 255.0;
            let out = preprocess(&s, (th, tw)).unwrap();
            prop_assert!(out.features.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
}
