//! Synthetic spine phantoms with exact ground truth.
//!
//! A phantom is a stack of ellipsoidal vertebral bodies along a laterally curved
//! cranio-caudal axis (z, cranial at low z) inside a soft-tissue cylinder. Thoracic
//! vertebrae carry two rib stubs along x; region width differs per class. Geometry
//! is generated in voxel units and is independent of the spacing.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::{AnatomicalLabel, VertebraClass};
use crate::volume::{
    label_centroids, read_labels, read_volume, write_atomic, write_labels, write_volume, Geometry, LabelVolume,
    Volume, VolumeError, VoxelBox,
};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("phantom does not fit: {0}")]
    Infeasible(String),
    #[error("field of view {0:?} contains no vertebra")]
    EmptyFov(VoxelBox),
    #[error("malformed truth file {path}: {reason}")]
    Truth { path: PathBuf, reason: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub first_label: AnatomicalLabel,
    pub last_label: AnatomicalLabel,
    /// Body diameter along x and y and height along z, for a thoracic vertebra.
    pub vertebra_size_vox: [usize; 3],
    pub gap_vox: usize,
    pub curvature_amp_vox: f64,
    pub rib_length_vox: usize,
    pub intensity_bone: f64,
    pub intensity_soft: f64,
    pub intensity_air: f64,
    pub noise_sigma_hu: f64,
    /// In-plane scale of cervical, thoracic and lumbar bodies.
    pub class_scale: [f64; 3],
    /// Per-vertebra relative in-plane size jitter.
    pub size_jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [48, 48, 96],
            spacing: [1.0; 3],
            first_label: "C5".parse().expect("valid label"),
            last_label: "T5".parse().expect("valid label"),
            vertebra_size_vox: [14, 14, 8],
            gap_vox: 2,
            curvature_amp_vox: 2.0,
            rib_length_vox: 5,
            intensity_bone: 700.0,
            intensity_soft: 40.0,
            intensity_air: -1000.0,
            noise_sigma_hu: 20.0,
            class_scale: [0.7, 1.0, 1.25],
            size_jitter: 0.05,
            seed: 0,
        }
    }
}

const RIB_HALF_WIDTH: isize = 1;
const BODY_FRACTION: f64 = 0.46;

impl PhantomSpec {
    pub fn labels(&self) -> Vec<AnatomicalLabel> {
        (self.first_label.ordinal()..=self.last_label.ordinal())
            .map(|o| AnatomicalLabel::from_ordinal(o as i32).expect("ordinal in range"))
            .collect()
    }

    fn scale_of(&self, c: VertebraClass) -> f64 {
        self.class_scale[c.code() as usize - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.dims.contains(&0) {
            return bad(format!("dims {:?}", self.dims));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("spacing {:?}", self.spacing));
        }
        if self.first_label > self.last_label {
            return bad(format!("label range {}..{}", self.first_label, self.last_label));
        }
        if self.vertebra_size_vox.contains(&0) {
            return bad(format!("vertebra size {:?}", self.vertebra_size_vox));
        }
        if !(self.intensity_bone > self.intensity_soft && self.intensity_soft > self.intensity_air) {
            return bad("intensities must satisfy bone > soft > air".into());
        }
        if !(self.noise_sigma_hu >= 0.0 && self.curvature_amp_vox >= 0.0) {
            return bad("noise sigma and curvature must be nonnegative".into());
        }
        if self.class_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("class scale {:?}", self.class_scale));
        }
        if !(0.0..0.5).contains(&self.size_jitter) {
            return bad(format!("size jitter {}", self.size_jitter));
        }
        Ok(())
    }

    /// Check that the stack fits inside the volume with a one-voxel margin.
    pub fn check_feasible(&self) -> Result<()> {
        let labels = self.labels();
        let n = labels.len();
        let [nx, ny, nz] = self.dims;
        let [sx, sy, h] = self.vertebra_size_vox;
        let stack = n * h + (n - 1) * self.gap_vox;
        if stack + 2 > nz {
            return Err(PhantomError::Infeasible(format!("{n} vertebrae need {} slices, volume has {nz}", stack + 2)));
        }
        let grow = 1.0 + self.size_jitter;
        for l in &labels {
            let c = l.class();
            let ax = 0.5 * self.scale_of(c) * grow * sx as f64;
            let ay = 0.5 * self.scale_of(c) * grow * sy as f64;
            let rib = if c == VertebraClass::Thoracic { self.rib_length_vox as f64 } else { 0.0 };
            let need_x = 2.0 * (ax + rib + self.curvature_amp_vox) + 2.0;
            let need_y = 2.0 * ay + 2.0;
            if need_x > nx as f64 || need_y > ny as f64 {
                return Err(PhantomError::Infeasible(format!("{l} needs {need_x:.1}x{need_y:.1} voxels in-plane, volume has {nx}x{ny}")));
            }
        }
        Ok(())
    }
}

/// Ground truth of one phantom. Instance `i` (1-based id) is described by entry `i-1`
/// of the per-instance lists.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    /// Intensities in HU.
    pub image: Volume,
    /// 0 background, 1 cervical, 2 thoracic, 3 lumbar.
    pub class_labels: LabelVolume,
    /// Instance ids 1..=n, cranial to caudal.
    pub instance_labels: LabelVolume,
    pub anatomical: Vec<AnatomicalLabel>,
    pub centroids_mm: Vec<[f64; 3]>,
    /// Instance touches the field-of-view boundary after cropping.
    pub truncated: Vec<bool>,
}

impl PhantomTruth {
    pub fn num_instances(&self) -> usize {
        self.anatomical.len()
    }

    /// Binary mask of instance `id` (1-based).
    pub fn instance_mask(&self, id: u16) -> LabelVolume {
        self.instance_labels.map(|l| u16::from(l == id))
    }

    pub fn centroid_entries(&self) -> Vec<CentroidEntry> {
        self.anatomical.iter().zip(&self.centroids_mm).map(|(&label, &centroid_mm)| CentroidEntry { label, centroid_mm }).collect()
    }
}

/// Element of a centroid file: `[{"label":"T12","centroid_mm":[x,y,z]}, ...]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidEntry {
    pub label: AnatomicalLabel,
    pub centroid_mm: [f64; 3],
}

fn lateral_center(spec: &PhantomSpec, zc: f64, cycles: f64, phase: f64) -> f64 {
    0.5 * (spec.dims[0] as f64 - 1.0) + spec.curvature_amp_vox * (TAU * cycles * zc / spec.dims[2] as f64 + phase).sin()
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomTruth> {
    spec.validate()?;
    spec.check_feasible()?;
    let labels = spec.labels();
    let n = labels.len();
    let [nx, ny, nz] = spec.dims;
    let [sx, sy, h] = spec.vertebra_size_vox;
    let geometry = Geometry::new(spec.dims, spec.spacing, [0.0; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let stack = n * h + (n - 1) * spec.gap_vox;
    let z_start = rng.random_range(1..=nz - 1 - stack);
    let phase = rng.random_range(0.0..TAU);
    let cycles = rng.random_range(0.5..1.0);
    let cy = 0.5 * (ny as f64 - 1.0);

    let mut instances = LabelVolume::filled(geometry.clone(), 0);
    for (i, label) in labels.iter().enumerate() {
        let id = i as u16 + 1;
        let class = label.class();
        let z0 = z_start + i * (h + spec.gap_vox);
        let zc = z0 as f64 + 0.5 * (h as f64 - 1.0);
        let cx = lateral_center(spec, zc, cycles, phase);
        let jitter = |rng: &mut ChaCha8Rng| {
            if spec.size_jitter > 0.0 {
                rng.random_range(1.0 - spec.size_jitter..1.0 + spec.size_jitter)
            } else {
                1.0
            }
        };
        let ax = 0.5 * spec.scale_of(class) * sx as f64 * jitter(&mut rng);
        let ay = 0.5 * spec.scale_of(class) * sy as f64 * jitter(&mut rng);
        let az = 0.5 * h as f64;
        let x_lo = (cx - ax).floor().max(0.0) as usize;
        let x_hi = ((cx + ax).ceil() as usize).min(nx - 1);
        let y_lo = (cy - ay).floor().max(0.0) as usize;
        let y_hi = ((cy + ay).ceil() as usize).min(ny - 1);
        for z in z0..z0 + h {
            let dz = (z as f64 - zc) / az;
            for y in y_lo..=y_hi {
                let dy = (y as f64 - cy) / ay;
                for x in x_lo..=x_hi {
                    let dx = (x as f64 - cx) / ax;
                    if dx * dx + dy * dy + dz * dz <= 1.0 {
                        instances.set(x, y, z, id);
                    }
                }
            }
        }
        if class == VertebraClass::Thoracic && spec.rib_length_vox > 0 {
            // rib stubs start inside the body so the instance stays 6-connected
            let zr = (z0 + h / 2) as isize;
            let xc = cx.round() as isize;
            let inner = (0.5 * ax).floor() as isize;
            let outer = ax.ceil() as isize + spec.rib_length_vox as isize;
            let yc = cy.round() as isize;
            for side in [-1isize, 1] {
                for r in inner..=outer {
                    let x = xc + side * r;
                    for y in yc - RIB_HALF_WIDTH..=yc + RIB_HALF_WIDTH {
                        for z in zr - RIB_HALF_WIDTH..=zr + RIB_HALF_WIDTH {
                            if (0..nx as isize).contains(&x) && (0..ny as isize).contains(&y) && (0..nz as isize).contains(&z) {
                                instances.set(x as usize, y as usize, z as usize, id);
                            }
                        }
                    }
                }
            }
        }
    }

    let classes = instances.map(|id| if id == 0 { 0 } else { labels[id as usize - 1].class().code() });

    let (bx, by) = (BODY_FRACTION * nx as f64, BODY_FRACTION * ny as f64);
    let (mx, my) = (0.5 * (nx as f64 - 1.0), 0.5 * (ny as f64 - 1.0));
    let noise = Normal::new(0.0, spec.noise_sigma_hu).expect("validated sigma");
    let mut image = Volume::filled(geometry, 0.0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let base = if instances.get(x, y, z) != 0 {
                    spec.intensity_bone
                } else {
                    let (u, v) = ((x as f64 - mx) / bx, (y as f64 - my) / by);
                    if u * u + v * v <= 1.0 {
                        spec.intensity_soft
                    } else {
                        spec.intensity_air
                    }
                };
                let eps = if spec.noise_sigma_hu > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.set(x, y, z, (base + eps) as f32);
            }
        }
    }

    let centroids = label_centroids(&instances);
    let centroids_mm = (1..=n as u16).map(|id| centroids[&id].0).collect();
    Ok(PhantomTruth {
        image,
        class_labels: classes,
        instance_labels: instances,
        anatomical: labels,
        centroids_mm,
        truncated: vec![false; n],
    })
}

/// Restrict a phantom to a field of view. Instances with no voxel left are dropped
/// and the rest renumbered from 1; anatomical labels are kept, centroids are
/// recomputed from the visible voxels, and instances that lost voxels are flagged.
pub fn crop_phantom_fov(t: &PhantomTruth, fov: &VoxelBox) -> Result<PhantomTruth> {
    let image = t.image.crop(fov)?;
    let class_labels = t.class_labels.crop(fov)?;
    let cropped = t.instance_labels.crop(fov)?;
    let before = label_centroids(&t.instance_labels);
    let after = label_centroids(&cropped);
    if after.is_empty() {
        return Err(PhantomError::EmptyFov(*fov));
    }
    let mut remap = vec![0u16; t.num_instances() + 1];
    let mut anatomical = Vec::new();
    let mut centroids_mm = Vec::new();
    let mut truncated = Vec::new();
    for (&old, &(centroid, count)) in &after {
        remap[old as usize] = anatomical.len() as u16 + 1;
        let i = old as usize - 1;
        anatomical.push(t.anatomical[i]);
        centroids_mm.push(centroid);
        truncated.push(t.truncated[i] || count < before[&old].1);
    }
    let instance_labels = cropped.map(|l| remap[l as usize]);
    Ok(PhantomTruth { image, class_labels, instance_labels, anatomical, centroids_mm, truncated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthInstance {
    pub id: u16,
    pub label: AnatomicalLabel,
    pub class: VertebraClass,
    pub centroid_mm: [f64; 3],
    pub truncated: bool,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub instances: Vec<TruthInstance>,
}

pub const CT_FILE: &str = "ct.json";
pub const CLASSES_FILE: &str = "classes.json";
pub const INSTANCES_FILE: &str = "instances.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const CENTROIDS_FILE: &str = "centroids.json";

/// Write a phantom case directory: image, class and instance volumes, truth JSON
/// and centroid file.
pub fn write_phantom(t: &PhantomTruth, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| VolumeError::Io { path: dir.to_path_buf(), source })?;
    let counts = label_centroids(&t.instance_labels);
    let instances = (0..t.num_instances())
        .map(|i| TruthInstance {
            id: i as u16 + 1,
            label: t.anatomical[i],
            class: t.anatomical[i].class(),
            centroid_mm: t.centroids_mm[i],
            truncated: t.truncated[i],
            voxels: counts.get(&(i as u16 + 1)).map_or(0, |c| c.1),
        })
        .collect();
    write_volume(&t.image, &dir.join(CT_FILE))?;
    write_labels(&t.class_labels, &dir.join(CLASSES_FILE))?;
    write_labels(&t.instance_labels, &dir.join(INSTANCES_FILE))?;
    let truth = serde_json::to_string_pretty(&TruthFile { instances }).expect("truth serializes");
    write_atomic(&dir.join(TRUTH_FILE), truth.as_bytes())?;
    let centroids = serde_json::to_string_pretty(&t.centroid_entries()).expect("centroids serialize");
    write_atomic(&dir.join(CENTROIDS_FILE), centroids.as_bytes())?;
    Ok(())
}

pub fn read_truth_file(path: &Path) -> Result<TruthFile> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PhantomError::Volume(VolumeError::MissingFile(path.to_path_buf())),
        _ => PhantomError::Volume(VolumeError::Io { path: path.to_path_buf(), source: e }),
    })?;
    serde_json::from_str(&text).map_err(|e| PhantomError::Truth { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn read_phantom(dir: &Path) -> Result<PhantomTruth> {
    let truth_path = dir.join(TRUTH_FILE);
    let truth = read_truth_file(&truth_path)?;
    for (i, inst) in truth.instances.iter().enumerate() {
        if inst.id as usize != i + 1 {
            return Err(PhantomError::Truth { path: truth_path, reason: format!("instance ids must run 1..n, found {}", inst.id) });
        }
    }
    let image = read_volume(&dir.join(CT_FILE))?;
    let class_labels = read_labels(&dir.join(CLASSES_FILE))?;
    let instance_labels = read_labels(&dir.join(INSTANCES_FILE))?;
    if image.geometry() != class_labels.geometry() || image.geometry() != instance_labels.geometry() {
        return Err(PhantomError::Volume(VolumeError::GeometryMismatch));
    }
    Ok(PhantomTruth {
        image,
        class_labels,
        instance_labels,
        anatomical: truth.instances.iter().map(|i| i.label).collect(),
        centroids_mm: truth.instances.iter().map(|i| i.centroid_mm).collect(),
        truncated: truth.instances.iter().map(|i| i.truncated).collect(),
    })
}

/// Label windows used when generating a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeSampling {
    pub min_len: usize,
    pub max_len: usize,
    /// Labels are drawn from this inclusive range.
    pub pool: (AnatomicalLabel, AnatomicalLabel),
    /// Only windows that contain a region boundary.
    pub require_boundary: bool,
}

impl Default for RangeSampling {
    fn default() -> Self {
        Self {
            min_len: 6,
            max_len: 9,
            pool: ("C1".parse().expect("valid label"), "L5".parse().expect("valid label")),
            require_boundary: true,
        }
    }
}

fn has_boundary(first: u8, last: u8) -> bool {
    let spans = |a: &str, b: &str| {
        let (a, b): (AnatomicalLabel, AnatomicalLabel) = (a.parse().expect("label"), b.parse().expect("label"));
        first <= a.ordinal() && last >= b.ordinal()
    };
    spans("C7", "T1") || spans("T12", "L1")
}

/// Specification of a phantom dataset: a base spec whose seed (and, optionally,
/// label window) is varied per case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub phantom: PhantomSpec,
    pub ranges: Option<RangeSampling>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { phantom: PhantomSpec::default(), ranges: Some(RangeSampling::default()) }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if let Some(r) = &self.ranges {
            let pool_len = (r.pool.1.ordinal() as usize + 1).saturating_sub(r.pool.0.ordinal() as usize);
            if r.min_len == 0 || r.min_len > r.max_len || r.max_len > pool_len {
                return Err(PhantomError::InvalidSpec(format!("range lengths {}..={} in a pool of {pool_len}", r.min_len, r.max_len)));
            }
            if r.require_boundary && !has_boundary(r.pool.0.ordinal(), r.pool.1.ordinal()) {
                return Err(PhantomError::InvalidSpec("label pool contains no region boundary".into()));
            }
            let longest = PhantomSpec {
                first_label: r.pool.0,
                last_label: r.pool.0.offset(r.max_len as i32 - 1).expect("checked against pool"),
                ..self.phantom.clone()
            };
            longest.check_feasible()?;
        } else {
            self.phantom.check_feasible()?;
        }
        Ok(())
    }

    /// Spec of case `index` under `master_seed`.
    pub fn case_spec(&self, master_seed: u64, index: usize) -> PhantomSpec {
        let seed = crate::derive_seed(master_seed, index as u64);
        let mut spec = PhantomSpec { seed, ..self.phantom.clone() };
        if let Some(r) = &self.ranges {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, u64::MAX));
            let len = rng.random_range(r.min_len..=r.max_len) as u8;
            let (p0, p1) = (r.pool.0.ordinal(), r.pool.1.ordinal());
            let starts: Vec<u8> =
                (p0..=p1 + 1 - len).filter(|&s| !r.require_boundary || has_boundary(s, s + len - 1)).collect();
            let first = starts[rng.random_range(0..starts.len())];
            spec.first_label = AnatomicalLabel::from_ordinal(first as i32).expect("in pool");
            spec.last_label = AnatomicalLabel::from_ordinal((first + len - 1) as i32).expect("in pool");
        }
        spec
    }
}

/// `dataset.json` at the root of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub spec: DatasetSpec,
    /// Case directories relative to the dataset root.
    pub cases: Vec<String>,
}

pub const DATASET_FILE: &str = "dataset.json";

pub fn case_name(index: usize) -> String {
    format!("case_{index:04}")
}

/// Generate `count` cases under `dir`. Each case is written to a temporary
/// directory and renamed into place; the manifest is written last.
pub fn generate_dataset(spec: &DatasetSpec, master_seed: u64, count: usize, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let io = |source| PhantomError::Volume(VolumeError::Io { path: dir.to_path_buf(), source });
    fs::create_dir_all(dir).map_err(io)?;
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let truth = generate_phantom(&spec.case_spec(master_seed, i))?;
        let name = case_name(i);
        let tmp = dir.join(format!(".{name}.partial"));
        let dst = dir.join(&name);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io)?;
        }
        write_phantom(&truth, &tmp)?;
        if dst.exists() {
            fs::remove_dir_all(&dst).map_err(io)?;
        }
        fs::rename(&tmp, &dst).map_err(io)?;
        cases.push(name);
    }
    let manifest = DatasetManifest { master_seed, spec: spec.clone(), cases };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(DATASET_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PhantomError::Volume(VolumeError::MissingFile(path.clone())),
        _ => PhantomError::Volume(VolumeError::Io { path: path.clone(), source: e }),
    })?;
    serde_json::from_str(&text).map_err(|e| PhantomError::Truth { path, reason: e.to_string() })
}

/// Every case of a dataset, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<PhantomTruth>> {
    read_dataset_manifest(dir)?.cases.iter().map(|c| read_phantom(&dir.join(c))).collect()
}
