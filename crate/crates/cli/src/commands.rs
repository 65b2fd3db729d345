//! The seven pipeline commands. Each one re-derives the data splits from the
//! config (cheap and deterministic) and checks them against `manifest.json`
//! instead of persisting every split.

use std::fmt::Write as _;

use log::{info, warn};
use openset_core::data::{load_dataset, prepare, Manifest, Prepared};
use openset_core::metrics::{cluster_separation, pca_project};
use openset_core::openset::{classify_all, sweep_thresholds, OpenSetMethod, ThresholdSweep};
use openset_core::space::{build_space, embed_dataset, sweep_k, KSweep};
use openset_core::{
    Checkpoint, Dataset, EmbeddingSpace, EvalReport, Label, NetworkParams, Provenance, Scalar, TrainHistory,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::OutputDir;
use crate::config::{EvalSplit, ExperimentConfig, KSweepSplit};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Prepare,
    Train,
    Evaluate,
    SweepK,
    SweepThreshold,
    Pca,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::SweepK => "sweep-k",
            Command::SweepThreshold => "sweep-threshold",
            Command::Pca => "pca",
            Command::Report => "report",
        }
    }
}

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: OutputDir,
    /// `--threshold` as given on the command line; pins the sweep's operating point.
    pub threshold_flag: Option<f64>,
}

pub fn run<T: Scalar>(command: Command, mut ctx: Context<'_>) -> Result<()> {
    match command {
        Command::Prepare => cmd_prepare::<T>(&mut ctx)?,
        Command::Train => cmd_train::<T>(&mut ctx)?,
        Command::Evaluate => cmd_evaluate::<T>(&mut ctx)?,
        Command::SweepK => cmd_sweep_k::<T>(&mut ctx)?,
        Command::SweepThreshold => cmd_sweep_threshold::<T>(&mut ctx)?,
        Command::Pca => cmd_pca::<T>(&mut ctx)?,
        Command::Report => cmd_report(&mut ctx)?,
    }
    let Context { cfg, out, .. } = ctx;
    out.finish(command.name(), cfg)
}

fn build_splits<T: Scalar>(ctx: &Context<'_>) -> Result<(Prepared<T>, Manifest)> {
    let cfg = ctx.cfg;
    let ds = cfg.dataset();
    let full: Dataset<T> = load_dataset(&ds.path, ds.layout)?;
    let ood: Option<Dataset<T>> = cfg.ood.as_ref().map(|o| load_dataset(&o.path, o.layout)).transpose()?;
    let p = prepare(&full, ood.as_ref(), &cfg.prepare_options())?;
    let mut m = Manifest::from_prepared(&p, cfg.novel_class.as_deref())?;
    m.config_hash = Some(ctx.out.config_hash().to_string());
    Ok((p, m))
}

/// Splits for a downstream command, verified against the stored manifest.
fn verified_splits<T: Scalar>(ctx: &Context<'_>) -> Result<(Prepared<T>, Manifest)> {
    let path = ctx.out.require("manifest.json", "prepare")?;
    let stored = Manifest::load(&path)?;
    let (p, fresh) = build_splits::<T>(ctx)?;
    if stored.id() != fresh.id() {
        return Err(CliError::Stale {
            artifact: "manifest.json",
            reason: "the current config and data produce different splits".into(),
            command: "prepare",
        });
    }
    Ok((p, stored))
}

fn load_model<T: Scalar>(ctx: &Context<'_>, manifest: &Manifest) -> Result<(NetworkParams<T>, EmbeddingSpace<T>)> {
    let ck = Checkpoint::load(&ctx.out.require("checkpoint.json", "train")?)?;
    let space = EmbeddingSpace::<T>::load(&ctx.out.require("gallery.bin", "train")?)?;
    let prov = space.provenance();
    if prov.checkpoint_id != ck.id() {
        return Err(CliError::Stale {
            artifact: "gallery.bin",
            reason: "it was built from a different checkpoint".into(),
            command: "train",
        });
    }
    if prov.manifest_id != manifest.id() {
        return Err(CliError::Stale {
            artifact: "checkpoint.json",
            reason: "it was trained on different splits".into(),
            command: "train",
        });
    }
    Ok((ck.to_params()?, space))
}

fn eval_set<'p, T>(cfg: &ExperimentConfig, p: &'p Prepared<T>) -> (&'static str, &'p Dataset<T>) {
    match cfg.eval_split() {
        EvalSplit::TestA => ("testA", &p.test_a),
        EvalSplit::TestB => ("testB", p.test_b.as_ref().expect("novel_class is set")),
        EvalSplit::TestC => ("testC", p.test_c.as_ref().expect("ood is set")),
    }
}

fn cmd_prepare<T: Scalar>(ctx: &mut Context<'_>) -> Result<()> {
    let (p, manifest) = build_splits::<T>(ctx)?;
    for ds in p.splits() {
        info!("{}: {} samples", ds.split.as_str(), ds.len());
    }
    ctx.out.write_json("manifest.json", &manifest)
}

fn history_csv(h: &TrainHistory) -> String {
    // wall-clock seconds are logged, not written, so reruns stay byte-identical
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for e in &h.epochs {
        let _ = writeln!(s, "{},{:?},{:?}", e.epoch, e.train_loss, e.val_loss);
    }
    s
}

fn cmd_train<T: Scalar>(ctx: &mut Context<'_>) -> Result<()> {
    let (p, manifest) = verified_splits::<T>(ctx)?;
    let (params, history) = openset_core::trainer::train(&ctx.cfg.train, &p.train, &p.validation)?;
    let seconds: f64 = history.epochs.iter().map(|e| e.seconds).sum();
    info!(
        "trained {} epochs in {seconds:.1}s; best epoch {} (val loss {:?})",
        history.epochs.len(),
        history.best_epoch,
        history.best_val_loss()
    );
    let mut ck = Checkpoint::from_params(&params);
    ck.config_hash = Some(ctx.out.config_hash().to_string());
    let provenance =
        Provenance { checkpoint_id: ck.id(), manifest_id: manifest.id(), config_hash: ck.config_hash.clone() };
    let space = build_space(&params, &p.train, provenance)?;
    let mut gallery = Vec::new();
    space.write_binary(&mut gallery)?;

    ctx.out.write_bytes("checkpoint.json", ck.to_json().as_bytes())?;
    ctx.out.write_csv("history.csv", &history_csv(&history))?;
    ctx.out.write_bytes("gallery.bin", &gallery)?;
    ctx.out.write_csv("gallery.csv", &space.to_csv())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    split: &'a str,
    mode: &'a str,
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<OpenSetMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    report: &'a EvalReport,
}

fn cmd_evaluate<T: Scalar>(ctx: &mut Context<'_>) -> Result<()> {
    let (p, manifest) = verified_splits::<T>(ctx)?;
    let (params, space) = load_model::<T>(ctx, &manifest)?;
    let names = space.class_names().to_vec();

    // closed set: plain KNN on test A
    let (q, truths) = embed_dataset(&params, &p.test_a)?;
    let results = space.knn_classify_all(&q, ctx.cfg.k)?;
    let closed = EvalReport::build(&results, &truths, &names, false)?;
    info!("closed-set top-1 on testA: {:.2}%", 100.0 * closed.top1);
    let header = format!("closed-set KNN, k = {}, split testA\n\n", ctx.cfg.k);
    ctx.out.write_json(
        "eval_closed.json",
        &EvalOutput {
            split: "testA",
            mode: "closed_set",
            k: ctx.cfg.k,
            method: None,
            threshold: None,
            report: &closed,
        },
    )?;
    ctx.out.write_text("eval_closed.txt", &(header + &closed.to_text()))?;
    ctx.out.write_csv("confusion_closed.csv", &closed.confusion.to_csv())?;

    // open set on the configured split
    let os = ctx.cfg.open_set;
    let (split, ds) = eval_set(ctx.cfg, &p);
    let (q, truths) = embed_dataset(&params, ds)?;
    let results = classify_all(&space, &q, &os)?;
    let open = EvalReport::build(&results, &truths, &names, true)?;
    info!(
        "open-set ({}, threshold {}) on {split}: top-1 {:.2}%",
        os.method.as_str(),
        os.threshold(),
        100.0 * open.top1
    );
    let header = format!(
        "open-set, method {}, threshold {}, k = {}, split {split}\n\n",
        os.method.as_str(),
        os.threshold(),
        os.k
    );
    ctx.out.write_json(
        "eval_report.json",
        &EvalOutput {
            split,
            mode: "open_set",
            k: os.k,
            method: Some(os.method),
            threshold: Some(os.threshold()),
            report: &open,
        },
    )?;
    ctx.out.write_text("eval_report.txt", &(header + &open.to_text()))?;
    ctx.out.write_csv("confusion_open.csv", &open.confusion.to_csv())
}

#[derive(Serialize, Deserialize)]
struct KSweepOutput {
    split: String,
    #[serde(flatten)]
    sweep: KSweep,
}

fn cmd_sweep_k<T: Scalar>(ctx: &mut Context<'_>) -> Result<()> {
    let (p, manifest) = verified_splits::<T>(ctx)?;
    let (params, space) = load_model::<T>(ctx, &manifest)?;
    let (split, ds) = match ctx.cfg.k_sweep.split {
        KSweepSplit::Validation => ("validation", &p.validation),
        KSweepSplit::TestA => ("testA", &p.test_a),
    };
    let mut max_k = ctx.cfg.k_sweep.max_k;
    if max_k > space.len() {
        warn!("k_sweep.max_k = {max_k} exceeds the gallery size; capping at {}", space.len());
        max_k = space.len();
    }
    let ks: Vec<usize> = (1..=max_k).collect();
    let (q, truths) = embed_dataset(&params, ds)?;
    let sweep = sweep_k(&space, &q, &truths, &ks)?;
    info!("k sweep on {split}: best k = {}", sweep.best_k);
    ctx.out.write_csv("k_sweep.csv", &sweep.to_csv())?;
    ctx.out.write_json("k_sweep.json", &KSweepOutput { split: split.into(), sweep })
}

fn sweep_name(method: OpenSetMethod, ext: &str) -> String {
    format!("threshold_sweep_{}.{ext}", method.as_str())
}

fn cmd_sweep_threshold<T: Scalar>(ctx: &mut Context<'_>) -> Result<()> {
    let (p, manifest) = verified_splits::<T>(ctx)?;
    let (params, space) = load_model::<T>(ctx, &manifest)?;
    let (split, ds) = eval_set(ctx.cfg, &p);
    let (q, truths) = embed_dataset(&params, ds)?;
    let os = ctx.cfg.open_set;
    let mut sweep = sweep_thresholds(&space, &q, &truths, os.method, ctx.cfg.threshold_grid_step, os.k)?;
    if let Some(t) = ctx.threshold_flag {
        sweep.override_threshold(t)?;
    }
    info!("{} sweep on {split}: chosen threshold {} ({})", os.method.as_str(), sweep.chosen_threshold, sweep.rationale);
    ctx.out.write_csv(&sweep_name(os.method, "csv"), &sweep.to_csv())?;
    ctx.out.write_json(&sweep_name(os.method, "json"), &sweep)
}

#[derive(Serialize)]
struct PcaOutput {
    split: &'static str,
    explained_variance_ratio: Vec<f64>,
    reduced_rank: bool,
    cluster_separation: Option<f64>,
}

fn cmd_pca<T: Scalar>(ctx: &mut Context<'_>) -> Result<()> {
    let (p, manifest) = verified_splits::<T>(ctx)?;
    let (params, space) = load_model::<T>(ctx, &manifest)?;
    let (q, truths) = embed_dataset(&params, &p.test_a)?;
    let proj = pca_project(&q, q.cols().min(2))?;
    let names = space.class_names();
    let mut csv = String::from("class,pc1,pc2\n");
    for (row, t) in proj.coords.iter_rows().zip(&truths) {
        let class = match *t {
            Label::Known(c) => names[c].as_str(),
            Label::Novel => openset_core::metrics::NOVEL_NAME,
        };
        let pc2 = row.get(1).map_or(0.0, |v| v.as_f64());
        let _ = writeln!(csv, "{class},{:?},{pc2:?}", row[0].as_f64());
    }
    let labels: Option<Vec<usize>> = truths.iter().map(|t| t.known()).collect();
    let separation = labels.map(|l| cluster_separation(&proj.coords, &l)).transpose()?;
    if let Some(s) = separation {
        info!("PCA cluster separation on testA: {s:.3}");
    }
    ctx.out.write_csv("pca.csv", &csv)?;
    ctx.out.write_json(
        "pca.json",
        &PcaOutput {
            split: "testA",
            explained_variance_ratio: proj.explained_variance_ratio.iter().map(|v| v.as_f64()).collect(),
            reduced_rank: proj.reduced_rank,
            cluster_separation: separation,
        },
    )
}

fn cmd_report(ctx: &mut Context<'_>) -> Result<()> {
    let mut sweeps = Vec::new();
    for method in [OpenSetMethod::Distance, OpenSetMethod::Probability] {
        let name = sweep_name(method, "json");
        if ctx.out.path(&name).is_file() {
            sweeps.push(ctx.out.read_json::<ThresholdSweep>(&name, "sweep-threshold")?);
        }
    }
    if sweeps.is_empty() {
        ctx.out.require("threshold_sweep_<method>.json", "sweep-threshold")?;
    }

    let mut csv = String::from("method,threshold,class,sensitivity\n");
    let mut txt = String::new();
    for s in &sweeps {
        for line in s.to_csv().lines().skip(1) {
            let _ = writeln!(csv, "{},{line}", s.method.as_str());
        }
        let chosen = s.chosen_point();
        let _ = writeln!(
            txt,
            "{} (k = {}): chosen threshold {} ({})",
            s.method.as_str(),
            s.k,
            s.chosen_threshold,
            s.rationale
        );
        for (class, v) in s.classes.iter().zip(&chosen.sensitivity) {
            let v = v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
            let _ = writeln!(txt, "  {class:<20} {v:>8}");
        }
        txt.push('\n');
    }
    if ctx.out.path("k_sweep.json").is_file() {
        let k: KSweepOutput = ctx.out.read_json("k_sweep.json", "sweep-k")?;
        let _ = writeln!(txt, "k sweep on {}: best k = {}", k.split, k.sweep.best_k);
    }
    ctx.out.write_csv("report.csv", &csv)?;
    ctx.out.write_text("report.txt", &txt)
}
