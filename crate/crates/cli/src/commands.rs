use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use spine_cascade::metrics::{evaluate_prediction, report_table, segmentation_csv};
use spine_cascade::nets::{load_checkpoint, InstanceNet, NetKind, SemanticNet, UNet};
use spine_cascade::phantom::{generate_dataset, read_phantom, DatasetSpec, CentroidEntry};
use spine_cascade::pipeline::{read_bundle, run_cascade, write_bundle, CascadeParams};
use spine_cascade::train::{load_working_cases, save_stage, train_stage1, train_stage2, TrainConfig};
use spine_cascade::volume::{read_volume, write_atomic};

use crate::config::{load, UsageError};
use crate::{slices, Common};

pub const SEGMENTATION_FILE: &str = "segmentation.csv";
pub const LOCALIZATION_FILE: &str = "localization.csv";

fn require_out(common: &Common) -> anyhow::Result<&Path> {
    common.out.as_deref().ok_or_else(|| UsageError("--out is required".into()).into())
}

pub fn phantom_gen(common: &Common, count: usize) -> anyhow::Result<()> {
    let out = require_out(common)?;
    let (spec, _): (DatasetSpec, _) = load(common.config.as_deref())?;
    if count == 0 {
        bail!(UsageError("--count must be at least 1".into()));
    }
    spec.validate()?;
    let manifest = generate_dataset(&spec, common.seed.unwrap_or(0), count, out)?;
    eprintln!("wrote {} cases to {}", manifest.cases.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

pub fn train(common: &Common, stage: Stage) -> anyhow::Result<()> {
    let (mut cfg, base): (TrainConfig, PathBuf) = load(common.config.as_deref())?;
    cfg.resolve_paths(&base);
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.checkpoint = out.clone();
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let cases = load_working_cases(&cfg.dataset, cfg.working_mm).with_context(|| format!("dataset {}", cfg.dataset.display()))?;
    let every = (cfg.iterations / 20).max(1);
    let progress = |i: usize, loss: f64| {
        if i % every == 0 || i == cfg.iterations {
            eprintln!("iteration {i}/{}: loss {loss:.5}", cfg.iterations);
        }
    };
    match stage {
        Stage::One => {
            let (net, log) = train_stage1(&cfg, &cases, progress)?;
            save_stage(&net.0, NetKind::Semantic, &cfg, &log)?;
        }
        Stage::Two => {
            let (net, log) = train_stage2(&cfg, &cases, progress)?;
            save_stage(&net.0, NetKind::Instance, &cfg, &log)?;
        }
    }
    eprintln!("wrote {}", cfg.checkpoint.display());
    Ok(())
}

fn load_net(path: &Path, want: NetKind) -> anyhow::Result<UNet> {
    let (net, kind, _) = load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
    if kind != want {
        bail!("checkpoint {} holds a {kind:?} net, expected {want:?}", path.display());
    }
    Ok(net)
}

pub fn infer(common: &Common, volume: &Path, stage1: &Path, stage2: &Path, dump_slices: bool) -> anyhow::Result<()> {
    let out = require_out(common)?;
    let (params, _): (CascadeParams, _) = load(common.config.as_deref())?;
    let ct = read_volume(volume).with_context(|| format!("volume {}", volume.display()))?;
    let semantic = SemanticNet(load_net(stage1, NetKind::Semantic)?);
    let instance = InstanceNet(load_net(stage2, NetKind::Instance)?);
    let result = run_cascade(&semantic, &instance, &ct, &params)?;
    write_bundle(&result, out)?;
    if dump_slices {
        slices::dump(&ct, &result.instance_labels, out)?;
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    for i in &result.instances {
        let label = i.anatomical.map_or_else(|| "?".to_string(), |l| l.to_string());
        let [x, y, z] = i.centroid_mm;
        println!("{:>3} {:<4} {:<9} ({x:.1}, {y:.1}, {z:.1}) mm", i.id, label, i.class.name());
    }
    Ok(())
}

pub fn eval(common: &Common, preds: &[PathBuf], truths: &[PathBuf]) -> anyhow::Result<()> {
    let out = require_out(common)?;
    if preds.len() != truths.len() {
        bail!("{} prediction bundles but {} truth cases", preds.len(), truths.len());
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(truths) {
        let (report, pred_ids) = read_bundle(p).with_context(|| format!("prediction {}", p.display()))?;
        let truth = read_phantom(t).with_context(|| format!("truth {}", t.display()))?;
        let pred: Vec<CentroidEntry> = report
            .instances
            .iter()
            .filter_map(|i| i.anatomical.map(|label| CentroidEntry { label, centroid_mm: i.centroid_mm }))
            .collect();
        let e = evaluate_prediction(&pred_ids, &pred, &truth.instance_labels, &truth.centroid_entries())
            .with_context(|| format!("case {} vs {}", p.display(), t.display()))?;
        let name = t.file_name().map_or_else(|| t.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push((name, e));
    }
    let table = report_table(&rows.iter().map(|(_, e)| e.outcomes.clone()).collect::<Vec<_>>());
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join(SEGMENTATION_FILE), segmentation_csv(&rows).as_bytes())?;
    write_atomic(&out.join(LOCALIZATION_FILE), table.to_csv().as_bytes())?;
    print!("{}", table.to_text());
    Ok(())
}
