//! The two-stage cascade.
//!
//! Stage 1 labels every voxel as background, cervical, thoracic or lumbar with a
//! sliding window, and its foreground bounds the spine. Stage 2 walks down the
//! spine from the cranial end: each step shows the instance segmenter a CT patch
//! and a memory mask of the vertebrae found so far, and accepts the predicted
//! next vertebra. Instances then get a region class by majority vote and an
//! anatomical label by counting from a region boundary.
//!
//! All processing happens in a 1 mm isotropic working space; results are mapped
//! back to the input geometry at the end. Window corners are signed voxel
//! offsets into the working volume, and patch buffers are x-fastest, which is
//! also the memory order of a `[1, C, D, H, W]` tensor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::{AnatomicalLabel, VertebraClass};
use crate::augment::FILL_INTENSITY;
use crate::autodiff::Tensor;
use crate::nets::{InstanceNet, NetError, SemanticNet};
use crate::phantom::CentroidEntry;
use crate::volume::{
    clip_normalize, connected_components, isotropic_dims, label_centroids, largest_component, read_labels,
    resample_isotropic, resample_labels_to, write_atomic, write_labels, Connectivity, Geometry, Interp, LabelVolume,
    Volume, VolumeError, VoxelBox,
};

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no spine found: stage-1 labels are all background")]
    NoSpineFound,
    #[error("no instances to label")]
    NoInstances,
    #[error("invalid cascade parameters: {0}")]
    InvalidParams(String),
    #[error("segmenter returned {found} values, expected {expected}")]
    SegmenterOutput { expected: usize, found: usize },
    #[error("malformed report {path}: {reason}")]
    Report { path: String, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Placement of a patch in the working volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub lo: [isize; 3],
    pub dims: [usize; 3],
}

impl Window {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Window of `dims` whose center voxel is `center` (rounded).
    pub fn centered(center: [f64; 3], dims: [usize; 3]) -> Self {
        Self { lo: std::array::from_fn(|a| center[a].round() as isize - (dims[a] / 2) as isize), dims }
    }

    /// Linear working-volume index of every window voxel that lies inside `vol`,
    /// paired with its position in the window buffer.
    fn inside(&self, vol: [usize; 3]) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [wx, wy, wz] = self.dims;
        let lo = self.lo;
        (0..wz).flat_map(move |z| (0..wy).flat_map(move |y| (0..wx).map(move |x| (x, y, z)))).filter_map(move |(x, y, z)| {
            let p = [lo[0] + x as isize, lo[1] + y as isize, lo[2] + z as isize];
            if (0..3).any(|a| p[a] < 0 || p[a] >= vol[a] as isize) {
                return None;
            }
            let g = p[0] as usize + vol[0] * (p[1] as usize + vol[1] * p[2] as usize);
            Some((x + wx * (y + wy * z), g))
        })
    }
}

fn patch_tensor(dims: [usize; 3], channels: usize, data: Vec<f32>) -> Tensor<f32> {
    Tensor::new(vec![1, channels, dims[2], dims[1], dims[0]], data)
}

/// Stage-1 segmenter: class logits for one window.
pub trait SemanticSegmenter {
    /// `patch` holds normalized intensities of `window`; returns `NUM_CLASSES`
    /// channel-major logit maps of the same size.
    fn window_logits(&self, patch: &[f32], window: &Window) -> Result<Vec<f32>>;
}

/// Stage-2 segmenter: probability map of the next vertebra in one window.
pub trait InstanceSegmenter {
    fn predict_next(&self, ct: &[f32], memory: &[f32], window: &Window) -> Result<Vec<f32>>;
}

impl SemanticSegmenter for SemanticNet {
    fn window_logits(&self, patch: &[f32], window: &Window) -> Result<Vec<f32>> {
        Ok(self.logits(patch_tensor(window.dims, 1, patch.to_vec()))?.into_data())
    }
}

impl InstanceSegmenter for InstanceNet {
    fn predict_next(&self, ct: &[f32], memory: &[f32], window: &Window) -> Result<Vec<f32>> {
        let ct = patch_tensor(window.dims, 1, ct.to_vec());
        let mem = patch_tensor(window.dims, 1, memory.to_vec());
        Ok(self.forward_instance(&ct, &mem)?.into_data())
    }
}

/// Stage-1 stand-in that returns one-hot logits of known class labels.
pub struct OracleSemantic {
    pub classes: LabelVolume,
}

impl SemanticSegmenter for OracleSemantic {
    fn window_logits(&self, _patch: &[f32], window: &Window) -> Result<Vec<f32>> {
        let labels = self.classes.window(window.lo, window.dims, 0);
        let n = labels.len();
        let mut out = vec![0.0; NUM_CLASSES * n];
        for (i, &c) in labels.iter().enumerate() {
            out[c as usize * n + i] = 1.0;
        }
        Ok(out)
    }
}

/// Stage-2 stand-in that knows the instance labels (ids ascending cranial to
/// caudal). It returns the lowest-id instance visible in the window whose
/// visible voxels are mostly outside the memory.
pub struct OracleInstance {
    pub instances: LabelVolume,
}

impl InstanceSegmenter for OracleInstance {
    fn predict_next(&self, _ct: &[f32], memory: &[f32], window: &Window) -> Result<Vec<f32>> {
        let ids = self.instances.window(window.lo, window.dims, 0);
        let mut seen: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
        for (&id, &m) in ids.iter().zip(memory) {
            if id != 0 {
                let e = seen.entry(id).or_default();
                e.0 += 1;
                e.1 += (m > 0.5) as usize;
            }
        }
        let next = seen.iter().find(|(_, &(n, in_mem))| 2 * in_mem < n).map(|(&id, _)| id);
        Ok(ids.iter().map(|&id| if Some(id) == next { 1.0 } else { 0.0 }).collect())
    }
}

/// Both oracles from truth labels in input geometry, mapped into working space.
pub fn truth_oracles(classes: &LabelVolume, instances: &LabelVolume, working_mm: f64) -> Result<(OracleSemantic, OracleInstance)> {
    let work = working_geometry(classes.geometry(), working_mm);
    Ok((
        OracleSemantic { classes: resample_labels_to(classes, &work)? },
        OracleInstance { instances: resample_labels_to(instances, &work)? },
    ))
}

/// Corner offsets of sliding windows along one axis; the last window is clamped
/// inward so the union covers `n`.
pub fn window_starts(n: usize, w: usize, overlap: f64) -> Vec<isize> {
    if n <= w {
        return vec![0];
    }
    let stride = ((w as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<isize> = (0..=n - w).step_by(stride).map(|s| s as isize).collect();
    if *starts.last().expect("nonempty") != (n - w) as isize {
        starts.push((n - w) as isize);
    }
    starts
}

/// Averaged window logits over the whole volume, `NUM_CLASSES` maps.
pub fn stage1_logits(seg: &dyn SemanticSegmenter, v: &Volume, window: [usize; 3], overlap: f64) -> Result<Vec<f32>> {
    if window.contains(&0) || !(0.0..1.0).contains(&overlap) {
        return Err(PipelineError::InvalidParams(format!("window {window:?}, overlap {overlap}")));
    }
    let dims = v.dims();
    let n = v.geometry().len();
    let mut sum = vec![0f64; NUM_CLASSES * n];
    let mut count = vec![0u32; n];
    let starts: [Vec<isize>; 3] = std::array::from_fn(|a| window_starts(dims[a], window[a], overlap));
    for &z in &starts[2] {
        for &y in &starts[1] {
            for &x in &starts[0] {
                let w = Window { lo: [x, y, z], dims: window };
                let patch = v.window(w.lo, w.dims, FILL_INTENSITY);
                let logits = seg.window_logits(&patch, &w)?;
                let len = w.len();
                if logits.len() != NUM_CLASSES * len {
                    return Err(PipelineError::SegmenterOutput { expected: NUM_CLASSES * len, found: logits.len() });
                }
                for (wi, gi) in w.inside(dims) {
                    count[gi] += 1;
                    for c in 0..NUM_CLASSES {
                        sum[c * n + gi] += logits[c * len + wi] as f64;
                    }
                }
            }
        }
    }
    Ok(sum.iter().enumerate().map(|(i, &s)| (s / count[i % n] as f64) as f32).collect())
}

/// Sliding-window stage-1 labels (argmax of averaged logits; ties pick the lower class).
pub fn stage1_infer(seg: &dyn SemanticSegmenter, v: &Volume, window: [usize; 3], overlap: f64) -> Result<LabelVolume> {
    let logits = stage1_logits(seg, v, window, overlap)?;
    let n = v.geometry().len();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if logits[c * n + i] > logits[best * n + i] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    Ok(LabelVolume::new(v.geometry().clone(), labels)?)
}

/// Cleaned stage-1 labels and the boxes derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct SpineRoi {
    pub roi: VoxelBox,
    pub class_boxes: BTreeMap<VertebraClass, VoxelBox>,
    pub cleaned: LabelVolume,
}

/// Bridge gaps of up to `bridge` voxels along z (closing with a vertical segment).
fn close_z(mask: &LabelVolume, bridge: usize) -> LabelVolume {
    if bridge == 0 {
        return mask.clone();
    }
    let [nx, ny, nz] = mask.dims();
    let mut out = mask.clone();
    for y in 0..ny {
        for x in 0..nx {
            let mut last: Option<usize> = None;
            for z in 0..nz {
                if mask.get(x, y, z) == 0 {
                    continue;
                }
                if let Some(l) = last {
                    if z - l > 1 && z - l - 1 <= bridge {
                        for zz in l + 1..z {
                            out.set(x, y, zz, 1);
                        }
                    }
                }
                last = Some(z);
            }
        }
    }
    out
}

/// Keep, per class, the voxels of the largest 6-connected component after
/// bridging inter-vertebral gaps of up to `bridge` voxels along z; then box
/// each class and the union (grown by `margin`).
pub fn spine_roi(stage1: &LabelVolume, margin: usize, bridge: usize) -> Result<SpineRoi> {
    let mut cleaned = LabelVolume::filled(stage1.geometry().clone(), 0);
    for class in VertebraClass::ALL {
        let code = class.code();
        let mask = stage1.map(|c| u16::from(c == code));
        if mask.data().iter().all(|&m| m == 0) {
            continue;
        }
        let keep = largest_component(&close_z(&mask, bridge), Connectivity::Six);
        for ((o, &m), &k) in cleaned.data_mut().iter_mut().zip(mask.data()).zip(keep.data()) {
            if m != 0 && k != 0 {
                *o = code;
            }
        }
    }
    let boxes = crate::volume::class_bounding_boxes(&cleaned, 0);
    if boxes.is_empty() {
        return Err(PipelineError::NoSpineFound);
    }
    let dims = stage1.dims();
    let union = boxes.values().skip(1).fold(*boxes.values().next().expect("nonempty"), |acc, b| acc.union(b));
    let class_boxes = boxes
        .into_iter()
        .map(|(c, b)| (VertebraClass::from_code(c).expect("class code"), b.expand(margin, dims)))
        .collect();
    Ok(SpineRoi { roi: union.expand(margin, dims), class_boxes, cleaned })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Params {
    pub patch_dims: [usize; 3],
    pub prob_threshold: f32,
    pub min_voxels: usize,
    pub max_instances: usize,
    /// Keep only the largest 6-connected part of each prediction.
    pub largest_component: bool,
}

impl Default for Stage2Params {
    fn default() -> Self {
        Self { patch_dims: [32, 32, 32], prob_threshold: 0.5, min_voxels: 30, max_instances: 25, largest_component: true }
    }
}

/// A vertebra found by stage 2, in working space.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingInstance {
    /// Sorted linear indices into the working volume.
    pub voxels: Vec<usize>,
    /// Mean voxel index.
    pub centroid_vox: [f64; 3],
    /// Cranio-caudal extent in voxels.
    pub extent_z: usize,
    /// Window that produced the instance.
    pub window: Window,
}

pub(crate) fn summarize(voxels: Vec<usize>, dims: [usize; 3], window: Window) -> WorkingInstance {
    let mut sum = [0f64; 3];
    let (mut zmin, mut zmax) = (usize::MAX, 0);
    for &i in &voxels {
        let p = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        for a in 0..3 {
            sum[a] += p[a] as f64;
        }
        zmin = zmin.min(p[2]);
        zmax = zmax.max(p[2]);
    }
    let n = voxels.len() as f64;
    WorkingInstance { centroid_vox: sum.map(|s| s / n), extent_z: zmax + 1 - zmin, voxels, window }
}

/// Where stage 2 places its first patch: cranial end of the ROI, centered in-plane.
pub fn first_window(roi: &VoxelBox, patch: [usize; 3]) -> Window {
    let mut w = Window::centered(std::array::from_fn(|a| 0.5 * (roi.lo[a] + roi.hi[a]) as f64 - 0.5), patch);
    w.lo[2] = roi.lo[2] as isize;
    w
}

/// Where stage 2 places the patch after finding `prev`.
pub fn next_center(prev: &WorkingInstance) -> [f64; 3] {
    let c = prev.centroid_vox;
    [c[0], c[1], c[2] + prev.extent_z as f64]
}

/// Iterative instance segmentation inside `roi`, starting from `memory`
/// (nonzero = already segmented). Instances come back in discovery order.
pub fn stage2_iterate(
    seg: &dyn InstanceSegmenter,
    v: &Volume,
    roi: &VoxelBox,
    params: &Stage2Params,
    memory: Option<&LabelVolume>,
) -> Result<Vec<WorkingInstance>> {
    if params.patch_dims.contains(&0) || !(0.0..=1.0).contains(&params.prob_threshold) {
        return Err(PipelineError::InvalidParams(format!("stage-2 params {params:?}")));
    }
    let dims = v.dims();
    let mut mem = match memory {
        Some(m) if m.dims() == dims => m.map(|x| u16::from(x != 0)),
        Some(_) => return Err(PipelineError::Volume(VolumeError::GeometryMismatch)),
        None => LabelVolume::filled(v.geometry().clone(), 0),
    };
    let mut found = Vec::new();
    let mut window = first_window(roi, params.patch_dims);
    while found.len() < params.max_instances {
        let ct = v.window(window.lo, window.dims, FILL_INTENSITY);
        let mem_patch: Vec<f32> = mem.window(window.lo, window.dims, 0).into_iter().map(f32::from).collect();
        let prob = seg.predict_next(&ct, &mem_patch, &window)?;
        if prob.len() != window.len() {
            return Err(PipelineError::SegmenterOutput { expected: window.len(), found: prob.len() });
        }
        let mut picked: Vec<(usize, usize)> =
            window.inside(dims).filter(|&(wi, gi)| prob[wi] >= params.prob_threshold && mem.data()[gi] == 0).collect();
        if params.largest_component && !picked.is_empty() {
            picked = largest_in_window(&picked, window.dims);
        }
        if picked.len() < params.min_voxels || picked.is_empty() {
            break;
        }
        let mut voxels: Vec<usize> = picked.iter().map(|&(_, gi)| gi).collect();
        voxels.sort_unstable();
        for &gi in &voxels {
            mem.data_mut()[gi] = 1;
        }
        let inst = summarize(voxels, dims, window);
        let mut center = next_center(&inst);
        found.push(inst);
        // a cut vertebra at the caudal edge may sit less than one step below
        for a in 0..3 {
            center[a] = center[a].clamp(roi.lo[a] as f64, roi.hi[a] as f64 - 1.0);
        }
        window = Window::centered(center, params.patch_dims);
    }
    Ok(found)
}

fn largest_in_window(picked: &[(usize, usize)], wdims: [usize; 3]) -> Vec<(usize, usize)> {
    let mut m = LabelVolume::filled(Geometry::unit(wdims), 0);
    for &(wi, _) in picked {
        m.data_mut()[wi] = 1;
    }
    let (comp, sizes) = connected_components(&m, Connectivity::Six);
    let best = sizes.iter().enumerate().fold(0, |b, (i, &s)| if s > sizes[b] { i } else { b }) as u32 + 1;
    picked.iter().copied().filter(|&(wi, _)| comp[wi] == best).collect()
}

/// Majority stage-1 class of each instance. Ties go to the previous instance's
/// class when it is among the tied classes, else to the most cranial tied class.
/// Instances without any foreground overlap take the class of the nearest
/// classified instance (cranial side on ties).
pub fn assign_classes(instances: &[WorkingInstance], stage1: &LabelVolume, warnings: &mut Vec<String>) -> Vec<VertebraClass> {
    let mut out: Vec<Option<VertebraClass>> = Vec::with_capacity(instances.len());
    for inst in instances {
        let mut counts = [0usize; NUM_CLASSES];
        for &i in &inst.voxels {
            counts[stage1.data()[i] as usize] += 1;
        }
        let best = counts[1..].iter().copied().max().unwrap_or(0);
        if best == 0 {
            out.push(None);
            continue;
        }
        let tied: Vec<VertebraClass> = VertebraClass::ALL.into_iter().filter(|c| counts[c.code() as usize] == best).collect();
        let prev = out.last().copied().flatten();
        let class = match prev {
            Some(p) if tied.contains(&p) => p,
            _ => tied[0],
        };
        out.push(Some(class));
    }
    let known: Vec<(usize, VertebraClass)> = out.iter().enumerate().filter_map(|(i, c)| c.map(|c| (i, c))).collect();
    (0..out.len())
        .map(|i| {
            out[i].unwrap_or_else(|| {
                let nearest = known.iter().min_by_key(|(j, _)| (i.abs_diff(*j), *j)).map(|&(_, c)| c);
                warnings.push(format!("instance {} has no stage-1 foreground; class taken from its nearest neighbor", i + 1));
                nearest.unwrap_or(VertebraClass::Thoracic)
            })
        })
        .collect()
}

/// Closest class sequence that never goes back cranially (C <= T <= L),
/// changing as few entries as possible; ties resolve toward cranial classes.
pub fn monotone_classes(classes: &[VertebraClass]) -> Vec<VertebraClass> {
    let n = classes.len();
    if n == 0 {
        return Vec::new();
    }
    // cost[i][k]: changes among the first i+1 entries when entry i has class k
    let mut cost = vec![[usize::MAX; 3]; n];
    for i in 0..n {
        for k in 0..3 {
            let here = usize::from(classes[i].code() as usize - 1 != k);
            let prev = if i == 0 { 0 } else { (0..=k).map(|j| cost[i - 1][j]).min().expect("nonempty") };
            cost[i][k] = prev + here;
        }
    }
    let mut out = vec![VertebraClass::Cervical; n];
    let mut k = (0..3).min_by_key(|&k| (cost[n - 1][k], k)).expect("nonempty");
    for i in (0..n).rev() {
        out[i] = VertebraClass::ALL[k];
        if i > 0 {
            let here = usize::from(classes[i].code() as usize - 1 != k);
            k = (0..=k).find(|&j| cost[i - 1][j] + here == cost[i][k]).expect("consistent");
        }
    }
    out
}

/// Outcome of the counting rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    /// Classes after monotone repair.
    pub classes: Vec<VertebraClass>,
    pub labels: Vec<Option<AnatomicalLabel>>,
    pub anchored: bool,
    pub warnings: Vec<String>,
}

/// Count anatomical labels from a region boundary: C7/T1 when cervical and
/// thoracic instances meet, else T12/L1. Without a boundary the cranial-most
/// instance becomes the first vertebra of its region and nothing is anchored;
/// labels whose region then disagrees with the instance class are dropped.
pub fn assign_anatomical_labels(classes: &[VertebraClass]) -> Result<Labeling> {
    use VertebraClass::{Cervical as C, Lumbar as L, Thoracic as T};
    if classes.is_empty() {
        return Err(PipelineError::NoInstances);
    }
    let mut warnings = Vec::new();
    let repaired = monotone_classes(classes);
    let changed = repaired.iter().zip(classes).filter(|(a, b)| a != b).count();
    if changed > 0 {
        warnings.push(format!("class sequence not monotone; reassigned {changed} instance(s)"));
    }
    let boundary = |a: VertebraClass, b: VertebraClass| repaired.windows(2).position(|w| w[0] == a && w[1] == b);
    let ct = boundary(C, T);
    let tl = boundary(T, L);
    let count_t = repaired.iter().filter(|&&c| c == T).count();
    let (base, anchored) = match (ct, tl) {
        (Some(b), tl) => {
            if tl.is_some() && count_t != T.count() as usize {
                warnings.push(format!("{count_t} thoracic vertebrae between the region boundaries; counting from C7/T1"));
            }
            (C.last().ordinal() as i32 - b as i32, true)
        }
        (None, Some(b)) => (T.last().ordinal() as i32 - b as i32, true),
        (None, None) => {
            let regions = repaired.first().copied().into_iter().chain(repaired.last().copied());
            if regions.clone().any(|c| c == C) && regions.clone().any(|c| c == L) {
                warnings.push("cervical and lumbar instances without thoracic ones; labels unanchored".into());
            }
            (repaired[0].first().ordinal() as i32, false)
        }
    };
    let labels = repaired
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let ordinal = base + i as i32;
            match AnatomicalLabel::from_ordinal(ordinal) {
                None => {
                    warnings.push(format!("instance {} counts outside C1..L6; left unlabeled", i + 1));
                    None
                }
                Some(l) if !anchored && l.class() != c => {
                    warnings.push(format!("instance {} counts to {l} but was classified {c}; left unlabeled", i + 1));
                    None
                }
                Some(l) => Some(l),
            }
        })
        .collect();
    Ok(Labeling { classes: repaired, labels, anchored, warnings })
}

/// One vertebra of the final result, in input geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertebraInstance {
    /// Value of this instance in [`CascadeResult::instance_labels`].
    pub id: u16,
    pub class: VertebraClass,
    pub anatomical: Option<AnatomicalLabel>,
    pub anchored: bool,
    pub truncated: bool,
    pub centroid_mm: [f64; 3],
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeResult {
    /// Ordered cranial to caudal; ids run 1..=n in this order.
    pub instances: Vec<VertebraInstance>,
    pub stage1_labels: LabelVolume,
    /// Instance masks as one id volume (masks are disjoint).
    pub instance_labels: LabelVolume,
    pub warnings: Vec<String>,
}

impl CascadeResult {
    pub fn instance_mask(&self, id: u16) -> LabelVolume {
        self.instance_labels.map(|l| u16::from(l == id))
    }

    /// Labeled instances as centroid entries.
    pub fn centroid_entries(&self) -> Vec<CentroidEntry> {
        self.instances.iter().filter_map(|i| i.anatomical.map(|label| CentroidEntry { label, centroid_mm: i.centroid_mm })).collect()
    }
}

/// Per-instance attributes decided in working space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub voxels: Vec<usize>,
    pub class: VertebraClass,
    pub anatomical: Option<AnatomicalLabel>,
    pub anchored: bool,
}

fn touches_border(labels: &LabelVolume, id: u16) -> bool {
    let [nx, ny, nz] = labels.dims();
    labels.data().iter().enumerate().any(|(i, &l)| {
        if l != id {
            return false;
        }
        let p = [i % nx, (i / nx) % ny, i / (nx * ny)];
        p[0] == 0 || p[1] == 0 || p[2] == 0 || p[0] == nx - 1 || p[1] == ny - 1 || p[2] == nz - 1
    })
}

/// Map working-space instances onto the input geometry, compute centroids and
/// order cranial to caudal. Overlaps keep the earlier instance.
pub fn finalize(
    instances: &[LabeledInstance],
    working: &Geometry,
    stage1_working: &LabelVolume,
    input: &Geometry,
    mut warnings: Vec<String>,
) -> Result<CascadeResult> {
    let mut ids = LabelVolume::filled(working.clone(), 0);
    for (k, inst) in instances.iter().enumerate() {
        for &i in &inst.voxels {
            if ids.data()[i] == 0 {
                ids.data_mut()[i] = k as u16 + 1;
            }
        }
    }
    let mapped = resample_labels_to(&ids, input)?;
    let stats = label_centroids(&mapped);
    let mut order: Vec<(usize, [f64; 3], usize)> = Vec::new();
    for (k, _) in instances.iter().enumerate() {
        match stats.get(&(k as u16 + 1)) {
            Some(&(c, n)) => order.push((k, c, n)),
            None => warnings.push(format!("instance {} vanished at input resolution", k + 1)),
        }
    }
    order.sort_by(|a, b| a.1[2].total_cmp(&b.1[2]).then(a.0.cmp(&b.0)));
    let mut remap = vec![0u16; instances.len() + 1];
    for (new, &(k, _, _)) in order.iter().enumerate() {
        remap[k + 1] = new as u16 + 1;
    }
    let instance_labels = mapped.map(|l| remap[l as usize]);
    let out = order
        .iter()
        .enumerate()
        .map(|(new, &(k, centroid_mm, voxels))| {
            let inst = &instances[k];
            VertebraInstance {
                id: new as u16 + 1,
                class: inst.class,
                anatomical: inst.anatomical,
                anchored: inst.anchored,
                truncated: touches_border(&instance_labels, new as u16 + 1),
                centroid_mm,
                voxels,
            }
        })
        .collect();
    Ok(CascadeResult { instances: out, stage1_labels: resample_labels_to(stage1_working, input)?, instance_labels, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeParams {
    pub working_mm: f64,
    pub stage1_window: [usize; 3],
    pub overlap: f64,
    pub roi_margin: usize,
    /// Inter-vertebral gap bridged when cleaning stage-1 labels.
    pub bridge_vox: usize,
    pub stage2: Stage2Params,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self { working_mm: 1.0, stage1_window: [32, 32, 32], overlap: 0.5, roi_margin: 8, bridge_vox: 6, stage2: Stage2Params::default() }
    }
}

/// Geometry of the isotropic working space for an input geometry.
pub fn working_geometry(input: &Geometry, working_mm: f64) -> Geometry {
    Geometry { dims: isotropic_dims(input, working_mm), spacing: [working_mm; 3], origin: input.origin }
}

/// Clip, normalize and resample an HU volume into working space.
pub fn preprocess(ct: &Volume, working_mm: f64) -> Result<Volume> {
    Ok(resample_isotropic(&clip_normalize(ct), working_mm, Interp::Linear)?)
}

/// Full cascade on an HU volume in its own geometry.
pub fn run_cascade(
    semantic: &dyn SemanticSegmenter,
    instance: &dyn InstanceSegmenter,
    ct: &Volume,
    params: &CascadeParams,
) -> Result<CascadeResult> {
    let v = preprocess(ct, params.working_mm)?;
    let stage1 = stage1_infer(semantic, &v, params.stage1_window, params.overlap)?;
    let roi = spine_roi(&stage1, params.roi_margin, params.bridge_vox)?;
    let found = stage2_iterate(instance, &v, &roi.roi, &params.stage2, None)?;
    let mut warnings = Vec::new();
    if found.is_empty() {
        warnings.push("stage 2 found no vertebra".to_string());
        return finalize(&[], v.geometry(), &roi.cleaned, ct.geometry(), warnings);
    }
    let classes = assign_classes(&found, &roi.cleaned, &mut warnings);
    let labeling = assign_anatomical_labels(&classes)?;
    warnings.extend(labeling.warnings.iter().cloned());
    let labeled: Vec<LabeledInstance> = found
        .into_iter()
        .enumerate()
        .map(|(i, f)| LabeledInstance {
            voxels: f.voxels,
            class: labeling.classes[i],
            anatomical: labeling.labels[i],
            anchored: labeling.anchored,
        })
        .collect();
    finalize(&labeled, v.geometry(), &roi.cleaned, ct.geometry(), warnings)
}

/// JSON report of a cascade run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub instances: Vec<VertebraInstance>,
    pub warnings: Vec<String>,
}

pub const STAGE1_FILE: &str = "stage1.json";
pub const INSTANCE_FILE: &str = "instances.json";
pub const REPORT_FILE: &str = "report.json";

/// Write stage-1 labels, instance ids and the JSON report into `dir`.
pub fn write_bundle(result: &CascadeResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| VolumeError::Io { path: dir.to_path_buf(), source })?;
    write_labels(&result.stage1_labels, &dir.join(STAGE1_FILE))?;
    write_labels(&result.instance_labels, &dir.join(INSTANCE_FILE))?;
    let report = Report { instances: result.instances.clone(), warnings: result.warnings.clone() };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&dir.join(REPORT_FILE), text.as_bytes())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::Volume(VolumeError::MissingFile(path.to_path_buf())),
        _ => PipelineError::Volume(VolumeError::Io { path: path.to_path_buf(), source: e }),
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Report { path: path.display().to_string(), reason: e.to_string() })
}

/// Read a result bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<(Report, LabelVolume)> {
    let report = read_report(&dir.join(REPORT_FILE))?;
    let labels = read_labels(&dir.join(INSTANCE_FILE))?;
    Ok((report, labels))
}
