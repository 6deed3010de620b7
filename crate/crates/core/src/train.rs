//! Training loops for both stages and the held-out checks used to judge them.
//!
//! Stage 1 sees augmented random crops and minimizes bootstrapped cross entropy.
//! Stage 2 is teacher-forced: for a random target vertebra `k` the patch is
//! placed where inference would place it after finding vertebra `k - 1`, the
//! memory holds the true masks of vertebrae `1..k`, and the target is the true
//! mask of `k` (empty when `k` is past the last vertebra). Memory and target
//! travel through the augmentation as one label volume so they stay aligned.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{add_gaussian_noise, augment, crop_at, random_affine, AugmentError, AugmentSpec};
use crate::autodiff::{AdamConfig, Graph, Tensor};
use crate::derive_seed;
use crate::metrics::dice;
use crate::nets::{save_checkpoint, InstanceNet, NetConfig, NetError, NetKind, SemanticNet};
use crate::phantom::{read_dataset, PhantomError, PhantomTruth};
use crate::pipeline::{
    first_window, next_center, preprocess, spine_roi, stage1_infer, summarize, working_geometry, InstanceSegmenter,
    PipelineError, Window,
};
use crate::volume::{resample_labels_to, write_atomic, LabelVolume, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset has no usable cases")]
    EmptyDataset,
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Network layout; the stage default when absent.
    pub net: Option<NetConfig>,
    /// Crop size doubles as the stage-2 patch size.
    pub augment: AugmentSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Per-iteration loss log; next to the checkpoint when absent.
    pub loss_csv: Option<PathBuf>,
    /// Fraction of hardest voxels kept by the stage-1 loss.
    pub keep_fraction: f64,
    pub working_mm: f64,
    /// Stage-2 patch placement jitter, voxels per axis.
    pub jitter_vox: usize,
    pub roi_margin: usize,
    pub bridge_vox: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: None,
            augment: AugmentSpec::default(),
            lr: 1e-3,
            batch_size: 1,
            iterations: 1000,
            seed: 0,
            dataset: PathBuf::from("dataset"),
            checkpoint: PathBuf::from("checkpoint.json"),
            loss_csv: None,
            keep_fraction: 0.1,
            working_mm: 1.0,
            jitter_vox: 2,
            roi_margin: 8,
            bridge_vox: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return bad(format!("iterations ({}) and batch_size ({}) must be at least 1", self.iterations, self.batch_size));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad(format!("keep_fraction {} not in (0, 1]", self.keep_fraction));
        }
        if !(self.working_mm > 0.0 && self.working_mm.is_finite()) {
            return bad(format!("working_mm {}", self.working_mm));
        }
        self.augment.validate()?;
        if let Some(net) = &self.net {
            net.validate()?;
            net.check_spatial(&self.augment.crop_dims)?;
        }
        Ok(())
    }

    /// Resolve relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.checkpoint);
        if let Some(p) = &mut self.loss_csv {
            fix(p);
        }
    }

    pub fn loss_csv_path(&self) -> PathBuf {
        self.loss_csv.clone().unwrap_or_else(|| self.checkpoint.with_extension("loss.csv"))
    }

    fn net_for(&self, default: NetConfig) -> Result<NetConfig> {
        let net = self.net.clone().unwrap_or(default);
        net.validate()?;
        net.check_spatial(&self.augment.crop_dims)?;
        Ok(net)
    }
}

/// A case in working space: normalized image and its label volumes.
#[derive(Debug, Clone)]
pub struct WorkingCase {
    pub image: Volume,
    pub classes: LabelVolume,
    pub instances: LabelVolume,
    pub num_instances: usize,
}

impl WorkingCase {
    pub fn from_truth(t: &PhantomTruth, working_mm: f64) -> Result<Self> {
        let g = working_geometry(t.image.geometry(), working_mm);
        Ok(Self {
            image: preprocess(&t.image, working_mm)?,
            classes: resample_labels_to(&t.class_labels, &g)?,
            instances: resample_labels_to(&t.instance_labels, &g)?,
            num_instances: t.num_instances(),
        })
    }
}

pub fn load_working_cases(dataset: &Path, working_mm: f64) -> Result<Vec<WorkingCase>> {
    let cases: Vec<WorkingCase> =
        read_dataset(dataset)?.iter().map(|t| WorkingCase::from_truth(t, working_mm)).collect::<Result<_>>()?;
    if cases.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(cases)
}

/// Loss of every iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog(pub Vec<f64>);

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.0.iter().enumerate() {
            writeln!(out, "{},{l}", i + 1).expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(write_atomic(path, self.to_csv().as_bytes())?)
    }
}

const NET_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;

fn batch_tensor(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Tensor<f32> {
    let n = data.len() / (channels * dims.iter().product::<usize>());
    Tensor::new(vec![n, channels, dims[2], dims[1], dims[0]], data)
}

/// Train the stage-1 net. `progress` sees each iteration's loss.
pub fn train_stage1(cfg: &TrainConfig, cases: &[WorkingCase], mut progress: impl FnMut(usize, f64)) -> Result<(SemanticNet, LossLog)> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut net = SemanticNet::new(cfg.net_for(NetConfig::semantic())?, derive_seed(cfg.seed, NET_STREAM))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SAMPLE_STREAM));
    let adam = AdamConfig::with_lr(cfg.lr);
    let dims = cfg.augment.crop_dims;
    let mut log = LossLog::default();
    for it in 0..cfg.iterations {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..cfg.batch_size {
            let c = &cases[rng.random_range(0..cases.len())];
            let (img, lab) = augment(&c.image, &c.classes, &cfg.augment, &mut rng);
            x.extend(img.into_data());
            y.extend(lab.into_data());
        }
        let mut g = Graph::new();
        let xv = g.input(batch_tensor(1, dims, x));
        let (logits, pv) = net.0.forward_train(&mut g, xv)?;
        let loss = g.bootstrapped_ce(logits, &y, cfg.keep_fraction).map_err(NetError::from)?;
        let value = g.value(loss).item() as f64;
        g.backward(loss).map_err(NetError::from)?;
        net.0.collect_grads(&mut g, &pv);
        net.0.adam_step(&adam)?;
        log.0.push(value);
        progress(it + 1, value);
    }
    Ok((net, log))
}

/// Where inference would put the patch that should find vertebra `k` (1-based;
/// `k = n + 1` asks for the empty prediction after the last vertebra).
pub fn teacher_window(case: &WorkingCase, k: usize, patch: [usize; 3], roi_margin: usize, bridge: usize) -> Result<Window> {
    if k == 0 || k > case.num_instances + 1 {
        return Err(TrainError::InvalidConfig(format!("target {k} outside 1..={}", case.num_instances + 1)));
    }
    if k == 1 {
        let roi = spine_roi(&case.classes, roi_margin, bridge)?;
        return Ok(first_window(&roi.roi, patch));
    }
    let prev = (k - 1) as u16;
    let voxels: Vec<usize> = (0..case.instances.data().len()).filter(|&i| case.instances.data()[i] == prev).collect();
    if voxels.is_empty() {
        return Err(TrainError::InvalidConfig(format!("instance {prev} has no voxels in working space")));
    }
    let inst = summarize(voxels, case.instances.dims(), Window { lo: [0; 3], dims: patch });
    Ok(Window::centered(next_center(&inst), patch))
}

/// Memory and target of target `k` as one label volume: 1 for vertebrae
/// `1..k`, 2 for vertebra `k`, 0 elsewhere.
pub fn teacher_labels(case: &WorkingCase, k: usize) -> LabelVolume {
    let k = k as u16;
    case.instances.map(|id| match id {
        0 => 0,
        id if id < k => 1,
        id if id == k => 2,
        _ => 0,
    })
}

/// One stage-2 training sample: `(ct, memory, target)` patch buffers.
pub fn stage2_sample<R: Rng + ?Sized>(
    case: &WorkingCase,
    k: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let dims = cfg.augment.crop_dims;
    let mut w = teacher_window(case, k, dims, cfg.roi_margin, cfg.bridge_vox)?;
    let j = cfg.jitter_vox as i64;
    for a in 0..3 {
        w.lo[a] += rng.random_range(-j..=j) as isize;
    }
    let (img, lab) = crop_at(&case.image, &teacher_labels(case, k), w.lo, dims);
    let (img, lab) = random_affine(&img, &lab, &cfg.augment, rng);
    let img = add_gaussian_noise(&img, &cfg.augment, rng);
    let memory = lab.data().iter().map(|&l| f32::from(l == 1)).collect();
    let target = lab.data().iter().map(|&l| f32::from(l == 2)).collect();
    Ok((img.into_data(), memory, target))
}

/// Train the stage-2 net with teacher forcing.
pub fn train_stage2(cfg: &TrainConfig, cases: &[WorkingCase], mut progress: impl FnMut(usize, f64)) -> Result<(InstanceNet, LossLog)> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut net = InstanceNet::new(cfg.net_for(NetConfig::instance())?, derive_seed(cfg.seed, NET_STREAM))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SAMPLE_STREAM));
    let adam = AdamConfig::with_lr(cfg.lr);
    let dims = cfg.augment.crop_dims;
    let vox: usize = dims.iter().product();
    let mut log = LossLog::default();
    for it in 0..cfg.iterations {
        let mut x = Vec::with_capacity(2 * vox * cfg.batch_size);
        let mut y = Vec::with_capacity(vox * cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let c = &cases[rng.random_range(0..cases.len())];
            let k = rng.random_range(1..=c.num_instances + 1);
            let (ct, mem, target) = stage2_sample(c, k, cfg, &mut rng)?;
            x.extend(ct);
            x.extend(mem);
            y.extend(target);
        }
        let mut g = Graph::new();
        let xv = g.input(batch_tensor(2, dims, x));
        let (logits, pv) = net.0.forward_train(&mut g, xv)?;
        let p = g.sigmoid(logits);
        let loss = g.dice_loss(p, &y).map_err(NetError::from)?;
        let value = g.value(loss).item() as f64;
        g.backward(loss).map_err(NetError::from)?;
        net.0.collect_grads(&mut g, &pv);
        net.0.adam_step(&adam)?;
        log.0.push(value);
        progress(it + 1, value);
    }
    Ok((net, log))
}

/// Write a trained net and its loss log.
pub fn save_stage(net: &crate::nets::UNet, kind: NetKind, cfg: &TrainConfig, log: &LossLog) -> Result<()> {
    if let Some(dir) = cfg.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| VolumeError::Io { path: dir.to_path_buf(), source })?;
    }
    save_checkpoint(net, kind, &AdamConfig::with_lr(cfg.lr), &cfg.checkpoint)?;
    log.write(&cfg.loss_csv_path())
}

/// Dice of each foreground class present in either volume, in class order.
pub fn class_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<Vec<(u16, f64)>> {
    let mut out = Vec::new();
    for c in 1..crate::pipeline::NUM_CLASSES as u16 {
        let p = pred.map(|l| u16::from(l == c));
        let t = truth.map(|l| u16::from(l == c));
        if p.data().iter().chain(t.data()).any(|&v| v != 0) {
            out.push((c, dice(&p, &t).map_err(|_| VolumeError::GeometryMismatch)?));
        }
    }
    Ok(out)
}

/// Mean foreground per-class Dice of sliding-window stage-1 labels on one case.
pub fn stage1_case_dice(net: &SemanticNet, case: &WorkingCase, window: [usize; 3], overlap: f64) -> Result<f64> {
    let pred = stage1_infer(net, &case.image, window, overlap)?;
    let d = class_dice(&pred, &case.classes)?;
    Ok(d.iter().map(|x| x.1).sum::<f64>() / d.len().max(1) as f64)
}

/// Teacher-forced Dice of every vertebra of a case: the patch sits where
/// inference would put it, the memory holds the true preceding masks, and
/// the thresholded prediction is compared with the true mask inside the patch.
pub fn stage2_case_dice(seg: &dyn InstanceSegmenter, case: &WorkingCase, cfg: &TrainConfig, threshold: f32) -> Result<Vec<f64>> {
    let dims = cfg.augment.crop_dims;
    let mut out = Vec::with_capacity(case.num_instances);
    for k in 1..=case.num_instances {
        let w = teacher_window(case, k, dims, cfg.roi_margin, cfg.bridge_vox)?;
        let lab = teacher_labels(case, k);
        let (img, lab) = crop_at(&case.image, &lab, w.lo, dims);
        let memory: Vec<f32> = lab.data().iter().map(|&l| f32::from(l == 1)).collect();
        let prob = seg.predict_next(img.data(), &memory, &w)?;
        let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
        for (&p, &l) in prob.iter().zip(lab.data()) {
            let (p, t) = (p >= threshold, l == 2);
            inter += (p && t) as usize;
            np += p as usize;
            nt += t as usize;
        }
        out.push(if np + nt == 0 { 1.0 } else { 2.0 * inter as f64 / (np + nt) as f64 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::pipeline::OracleInstance;

    fn case(seed: u64) -> WorkingCase {
        let spec = PhantomSpec { first_label: "C6".parse().unwrap(), last_label: "T3".parse().unwrap(), seed, ..PhantomSpec::default() };
        WorkingCase::from_truth(&generate_phantom(&spec).unwrap(), 1.0).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            net: None,
            augment: AugmentSpec { crop_dims: [16, 16, 16], ..AugmentSpec::default() },
            iterations: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn memory_holds_exactly_the_preceding_instances() {
        let c = case(1);
        for k in 1..=c.num_instances + 1 {
            let lab = teacher_labels(&c, k);
            for (&id, &l) in c.instances.data().iter().zip(lab.data()) {
                let want = if id == 0 || id as usize > k { 0 } else if (id as usize) < k { 1 } else { 2 };
                assert_eq!(l, want);
            }
        }
    }

    #[test]
    fn unaugmented_sample_matches_teacher_window() {
        let c = case(2);
        let cfg = TrainConfig { augment: AugmentSpec::identity([32; 3]), jitter_vox: 0, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 1..=c.num_instances + 1 {
            let (ct, mem, target) = stage2_sample(&c, k, &cfg, &mut rng).unwrap();
            let w = teacher_window(&c, k, [32; 3], 8, 3).unwrap();
            assert_eq!(ct, c.image.window(w.lo, w.dims, -1.0));
            let ids = c.instances.window(w.lo, w.dims, 0);
            for ((&id, &m), &t) in ids.iter().zip(&mem).zip(&target) {
                assert_eq!(m, f32::from(id != 0 && (id as usize) < k));
                assert_eq!(t, f32::from(id as usize == k));
            }
            // the target is visible where inference would look for it
            if k <= c.num_instances {
                assert!(target.iter().sum::<f32>() > 0.0, "target {k} not in its window");
            } else {
                assert!(target.iter().all(|&t| t == 0.0));
            }
        }
    }

    #[test]
    fn oracle_scores_perfect_teacher_forced_dice() {
        let c = case(3);
        let cfg = TrainConfig::default();
        let oracle = OracleInstance { instances: c.instances.clone() };
        let d = stage2_case_dice(&oracle, &c, &cfg, 0.5).unwrap();
        assert_eq!(d.len(), c.num_instances);
        assert!(d.iter().all(|&x| x == 1.0), "{d:?}");
    }

    #[test]
    fn class_dice_of_truth_is_one() {
        let c = case(4);
        let d = class_dice(&c.classes, &c.classes).unwrap();
        assert_eq!(d, vec![(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn training_is_deterministic() {
        let cases = vec![case(5), case(6)];
        let cfg = tiny_cfg();
        let net_cfg = NetConfig { depth: 2, base_width: 2, ..NetConfig::semantic() };
        let cfg1 = TrainConfig { net: Some(net_cfg), ..cfg.clone() };
        let (a, la) = train_stage1(&cfg1, &cases, |_, _| {}).unwrap();
        let (b, lb) = train_stage1(&cfg1, &cases, |_, _| {}).unwrap();
        assert_eq!(a.0.params(), b.0.params());
        assert_eq!(la, lb);
        assert_eq!(la.0.len(), 2);
        let cfg2 = TrainConfig { net: Some(NetConfig { depth: 2, base_width: 2, ..NetConfig::instance() }), batch_size: 2, ..cfg };
        let (a, la) = train_stage2(&cfg2, &cases, |_, _| {}).unwrap();
        let (b, lb) = train_stage2(&cfg2, &cases, |_, _| {}).unwrap();
        assert_eq!(a.0.params(), b.0.params());
        assert_eq!(la, lb);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { iterations: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { keep_fraction: 1.5, ..TrainConfig::default() }.validate().is_err());
        let odd = TrainConfig { augment: AugmentSpec { crop_dims: [30, 32, 32], ..AugmentSpec::default() }, net: Some(NetConfig::semantic()), ..TrainConfig::default() };
        assert!(odd.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"iterations": 5, "dataset": "d"}"#).unwrap();
        assert_eq!(parsed.iterations, 5);
        assert_eq!(parsed.lr, 1e-3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iters": 5}"#).is_err());
    }

    #[test]
    fn paths_resolve_against_base() {
        let mut cfg = TrainConfig { loss_csv: Some("l.csv".into()), checkpoint: "/abs/c.json".into(), ..TrainConfig::default() };
        cfg.resolve_paths(Path::new("/cfg"));
        assert_eq!(cfg.dataset, Path::new("/cfg/dataset"));
        assert_eq!(cfg.checkpoint, Path::new("/abs/c.json"));
        assert_eq!(cfg.loss_csv_path(), Path::new("/cfg/l.csv"));
        assert_eq!(TrainConfig::default().loss_csv_path(), Path::new("checkpoint.loss.csv"));
    }

    #[test]
    fn loss_csv_has_one_row_per_iteration() {
        let log = LossLog(vec![0.5, 0.25, 0.125]);
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(2), Some("2,0.25"));
    }
}
