use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Dataset, FeatureShape, Label, LabeledSample, SplitTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `root/<class_name>/<image files>`
    ClassFolders,
    /// A single CSV file with header `label,f0,f1,...`.
    CsvTable,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm"];

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads a dataset from disk. Sample order is lexicographic by path for
/// class folders and row order for CSV; class names are sorted.
pub fn load_dataset<T: Scalar>(root: &Path, layout: Layout) -> Result<Dataset<T>> {
    if !root.exists() {
        return Err(load_err(root, "path does not exist"));
    }
    match layout {
        Layout::ClassFolders => load_class_folders(root),
        Layout::CsvTable => load_csv(root),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| load_err(dir, e.to_string()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| load_err(dir, e.to_string()))?;
    entries.sort();
    Ok(entries)
}

fn load_class_folders<T: Scalar>(root: &Path) -> Result<Dataset<T>> {
    if !root.is_dir() {
        return Err(load_err(root, "class-folders layout needs a directory"));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir() && !is_hidden(p)).collect();
    if class_dirs.is_empty() {
        return Err(load_err(root, "no class subdirectories"));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| load_err(dir, "class directory name is not valid UTF-8"))?
            .to_string();
        let files: Vec<PathBuf> =
            sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)).collect();
        if files.is_empty() {
            return Err(load_err(dir, format!("class directory `{name}` contains no images")));
        }
        for file in files {
            let rel = file.strip_prefix(root).unwrap_or(&file);
            let source_id = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            let mut sample = read_image::<T>(&file)?;
            sample.label = Label::Known(class_id);
            sample.source_id = source_id;
            samples.push(sample);
        }
        class_names.push(name);
    }
    Dataset::new(samples, class_names, SplitTag::Full)
}

fn is_hidden(p: &Path) -> bool {
    p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'))
}

fn is_image_file(p: &Path) -> bool {
    !is_hidden(p)
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes a PNG or PNM image into a channel-major tensor of raw values.
pub(crate) fn read_image<T: Scalar>(path: &Path) -> Result<LabeledSample<T>> {
    let img = image::open(path).map_err(|e| load_err(path, format!("unreadable image: {e}")))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    if width == 0 || height == 0 {
        return Err(load_err(path, "image has zero size"));
    }
    let (channels, value_max, interleaved): (usize, f64, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, 255.0, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageLumaA8(b) => (2, 255.0, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgb8(b) => (3, 255.0, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgba8(b) => (4, 255.0, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageLuma16(b) => (1, 65535.0, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageLumaA16(b) => (2, 65535.0, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgb16(b) => (3, 65535.0, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgba16(b) => (4, 65535.0, b.into_raw().into_iter().map(f64::from).collect()),
        other => (3, 255.0, other.to_rgb8().into_raw().into_iter().map(f64::from).collect()),
    };
    let plane = width * height;
    let mut features = vec![T::zero(); channels * plane];
    for (i, px) in interleaved.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            features[c * plane + i] = T::lit(v);
        }
    }
    Ok(LabeledSample {
        features,
        shape: FeatureShape::Image { channels, height, width },
        label: Label::Known(0),
        source_id: path.to_string_lossy().into_owned(),
        value_max,
    })
}

fn load_csv<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| load_err(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| load_err(path, e.to_string()))?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(load_err(path, "header must be `label,f0,f1,...`"));
    }
    let width = header.len();
    let mut rows: Vec<(String, Vec<T>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Line 1 is the header.
        let row = i + 2;
        let record = record.map_err(|e| load_err(path, format!("row {row}: {e}")))?;
        if record.len() != width {
            return Err(Error::RaggedRow { path: path.to_path_buf(), row, expected: width, found: record.len() });
        }
        let label = record[0].to_string();
        let features = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(col, field)| {
                field.parse::<f64>().ok().filter(|v| v.is_finite()).map(T::lit).ok_or_else(|| {
                    load_err(path, format!("row {row}, column f{col}: `{field}` is not a finite number"))
                })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push((label, features));
    }
    if rows.is_empty() {
        return Err(load_err(path, "no data rows"));
    }
    let mut class_names: Vec<String> = rows.iter().map(|(l, _)| l.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let samples = rows
        .into_iter()
        .enumerate()
        .map(|(i, (label, features))| {
            let class = class_names.binary_search(&label).expect("label collected above");
            LabeledSample {
                shape: FeatureShape::Flat(features.len()),
                features,
                label: Label::Known(class),
                source_id: format!("row{}", i + 2),
                value_max: 1.0,
            }
        })
        .collect();
    Dataset::new(samples, class_names, SplitTag::Full)
}
