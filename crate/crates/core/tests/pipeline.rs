//! End-to-end runs through the public API: files on disk → prepared splits →
//! training → gallery → open-set evaluation, in both precisions.

mod common;

use std::fs;
use std::path::Path;

use common::grad_check;
use image::{Rgb, RgbImage};
use openset_core::data::synthetic::gaussian_blobs;
use openset_core::data::{load_dataset, prepare, Layout, Manifest, PrepareOptions};
use openset_core::metrics::EvalReport;
use openset_core::network::init_params;
use openset_core::openset::{classify_all, sweep_thresholds, OpenSetConfig, OpenSetMethod};
use openset_core::space::{build_space, embed_dataset};
use openset_core::trainer::train;
use openset_core::triplet::MiningStrategy;
use openset_core::{
    Architecture, Checkpoint, Dataset32, Dataset64, Gallery, Label, Network, NetworkParams, OptimizerConfig,
    Provenance, SplitTag, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        classes_per_batch: 2,
        samples_per_class: 4,
        epochs: 3,
        seed,
        embedding_dim: 16,
        optimizer: OptimizerConfig::adam(1e-3),
        ..TrainConfig::default()
    }
}

/// Three colour classes of 12×12 RGB images, with a dominant channel per class.
fn write_image_tree(root: &Path, per_class: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (ci, name) in ["blue", "green", "red"].iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let img = RgbImage::from_fn(12, 12, |_, _| {
                let mut px = [0u8; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    *v = if c == 2 - ci { rng.random_range(180..=255) } else { rng.random_range(0..60) };
                }
                Rgb(px)
            });
            img.save(dir.join(format!("{i:03}.png"))).unwrap();
        }
    }
}

#[test]
fn image_folders_to_open_set_report() {
    let dir = tempfile::tempdir().unwrap();
    write_image_tree(dir.path(), 20);
    let full: Dataset64 = load_dataset(dir.path(), Layout::ClassFolders).unwrap();
    assert_eq!(full.class_names, ["blue", "green", "red"]);
    assert_eq!(full.len(), 60);

    let opts = PrepareOptions {
        target: Some((8, 8)),
        novel_class: Some("green".into()),
        seed: 9,
        ..PrepareOptions::default()
    };
    let p = prepare(&full, None, &opts).unwrap();
    assert_eq!(p.train.class_names, ["blue", "red"]);
    let test_b = p.test_b.as_ref().unwrap();
    assert_eq!(test_b.split, SplitTag::TestB);
    assert_eq!(test_b.samples.iter().filter(|s| s.label.is_novel()).count(), 20);
    assert!(p.train.samples.iter().all(|s| s.features.iter().all(|&v| (0.0..=1.0).contains(&v))));

    let manifest = Manifest::from_prepared(&p, opts.novel_class.as_deref()).unwrap();
    let mpath = dir.path().join("manifest.json");
    manifest.save(&mpath).unwrap();
    assert_eq!(Manifest::load(&mpath).unwrap().id(), manifest.id());

    let (params, history) = train(&small_config(1), &p.train, &p.validation).unwrap();
    assert_eq!(history.epochs.len(), 3);
    assert!((1..=3).contains(&history.best_epoch));

    let ck = Checkpoint::from_params(&params);
    let cpath = dir.path().join("checkpoint.json");
    ck.save(&cpath).unwrap();
    let restored: Network = Checkpoint::load(&cpath).unwrap().to_params().unwrap();
    assert_eq!(restored, params);

    let space = build_space(
        &params,
        &p.train,
        Provenance { checkpoint_id: ck.id(), manifest_id: manifest.id(), config_hash: None },
    )
    .unwrap();
    let gpath = dir.path().join("gallery.bin");
    space.save(&gpath).unwrap();
    let loaded = Gallery::load(&gpath).unwrap();
    assert_eq!(loaded, space);
    assert_eq!(loaded.provenance().checkpoint_id, ck.id());

    let (q, truths) = embed_dataset(&params, test_b).unwrap();
    let sweep = sweep_thresholds(&space, &q, &truths, OpenSetMethod::Distance, 0.01, 3).unwrap();
    assert_eq!(sweep.points.len(), 100);
    let cfg = OpenSetConfig { radius: sweep.chosen_threshold, k: 3, ..OpenSetConfig::default() };
    let results = classify_all(&space, &q, &cfg).unwrap();
    let report = EvalReport::build(&results, &truths, space.class_names(), true).unwrap();
    let populations: Vec<u64> = (0..report.confusion.classes.len()).map(|r| report.confusion.row_total(r)).collect();
    let expected: Vec<u64> = [Label::Known(0), Label::Known(1), Label::Novel]
        .iter()
        .map(|l| truths.iter().filter(|t| *t == l).count() as u64)
        .collect();
    assert_eq!(populations, expected);
    assert!(report.ncs.is_some() && report.mn.is_some());
}

#[test]
fn csv_table_runs_in_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.csv");
    let blobs: Dataset64 =
        gaussian_blobs(&[vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]], 30, 0.3, 4).unwrap();
    let mut text = String::from("label,f0,f1,f2\n");
    for s in &blobs.samples {
        let name = &blobs.class_names[s.label.known().unwrap()];
        text.push_str(&format!("{name},{},{},{}\n", s.features[0], s.features[1], s.features[2]));
    }
    fs::write(&path, text).unwrap();

    let full: Dataset32 = load_dataset(&path, Layout::CsvTable).unwrap();
    assert_eq!(full.len(), 90);
    let opts = PrepareOptions { target: None, seed: 2, ..PrepareOptions::default() };
    let p = prepare(&full, None, &opts).unwrap();
    let cfg = TrainConfig { classes_per_batch: 3, batch_size: 12, ..small_config(5) };
    let (params, _) = train(&cfg, &p.train, &p.validation).unwrap();
    let space = build_space(&params, &p.train, Provenance::default()).unwrap();
    let (q, truths) = embed_dataset(&params, &p.test_a).unwrap();
    for row in q.iter_rows() {
        let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
    let results = space.knn_classify_all(&q, 5).unwrap();
    let report = EvalReport::build(&results, &truths, space.class_names(), false).unwrap();
    assert!(report.top1 > 0.9, "top-1 {}", report.top1);
    assert!(report.top3 >= report.top1);
}

#[test]
fn mlp_gradients_match_finite_differences_for_both_miners() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for l2 in [false, true] {
        let arch = Architecture::default_tabular(5, 6, l2).unwrap();
        let params: NetworkParams<f64> = init_params(&arch, 3).unwrap();
        let x = common::matrix(&common::random_rows(&mut rng, 9, 5, 1.0));
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        for strategy in [MiningStrategy::BatchAll, MiningStrategy::BatchHard] {
            let g = grad_check(&mut rng, &params, &x, &labels, strategy, 0.2, 1e-5, 1e-4, 40);
            assert!(g.max_rel_error < 1e-5, "l2={l2} {strategy:?}: {}", g.max_rel_error);
            assert!(g.checked > 100);
        }
    }
}

#[test]
fn wrong_input_width_is_rejected_everywhere() {
    let arch = Architecture::default_tabular(4, 8, true).unwrap();
    let params: Network = init_params(&arch, 0).unwrap();
    assert!(params.embed_one(&[0.0; 3]).is_err());
    let ds: Dataset64 = gaussian_blobs(&[vec![0.0; 3], vec![1.0; 3]], 4, 0.1, 0).unwrap();
    assert!(build_space(&params, &ds, Provenance::default()).is_err());
}
