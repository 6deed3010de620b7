//! Dense 3D grids with physical geometry.
//!
//! A [`Grid`] stores voxels in x-fastest linear order: the voxel at `(x, y, z)`
//! lives at `x + nx * (y + ny * z)`. Physical coordinates use the voxel-center
//! convention `origin + (i + 0.5) * spacing`.
//!
//! The on-disk format is a small JSON header next to a raw little-endian payload:
//!
//! ```json
//! {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"origin":[ox,oy,oz],"dtype":"f32","data":"ct.raw"}
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed volume header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("dtype mismatch: file holds {found}, expected {expected}")]
    DtypeMismatch { expected: String, found: String },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("data length {found} does not match dims product {expected}")]
    DataLength { expected: usize, found: usize },
    #[error("non-finite voxel value at linear index {0}")]
    NonFinite(usize),
    #[error("geometry mismatch between volumes")]
    GeometryMismatch,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Voxel counts, spacing (mm) and origin (mm) of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Self { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// 1 mm isotropic geometry at the origin.
    pub fn unit(dims: [usize; 3]) -> Self {
        Self { dims, spacing: [1.0; 3], origin: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidGeometry(format!("zero extent in dims {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidGeometry("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Physical position (mm) of a voxel center.
    #[inline]
    pub fn voxel_center(&self, ijk: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (ijk[a] as f64 + 0.5) * self.spacing[a])
    }

    /// Physical extent along each axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a])
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::MIN, f64::max)
    }

    /// Geometry of a sub-box, keeping physical positions fixed.
    pub fn sub_box(&self, b: &VoxelBox) -> Geometry {
        Geometry {
            dims: b.dims(),
            spacing: self.spacing,
            origin: std::array::from_fn(|a| self.origin[a] + b.lo[a] as f64 * self.spacing[a]),
        }
    }
}

/// A voxel box with inclusive `lo` and exclusive `hi` corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl VoxelBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(VolumeError::InvalidGeometry(format!("empty box lo={lo:?} hi={hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { lo: [0; 3], hi: dims }
    }

    pub fn dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    pub fn fits_in(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] < self.hi[a] && self.hi[a] <= dims[a])
    }

    pub fn union(&self, other: &VoxelBox) -> VoxelBox {
        VoxelBox {
            lo: std::array::from_fn(|a| self.lo[a].min(other.lo[a])),
            hi: std::array::from_fn(|a| self.hi[a].max(other.hi[a])),
        }
    }

    pub fn intersect(&self, other: &VoxelBox) -> Option<VoxelBox> {
        let lo: [usize; 3] = std::array::from_fn(|a| self.lo[a].max(other.lo[a]));
        let hi: [usize; 3] = std::array::from_fn(|a| self.hi[a].min(other.hi[a]));
        VoxelBox::new(lo, hi).ok()
    }

    /// Grow by `margin` on every side, clamped to `[0, dims)`.
    pub fn expand(&self, margin: usize, dims: [usize; 3]) -> VoxelBox {
        VoxelBox {
            lo: std::array::from_fn(|a| self.lo[a].saturating_sub(margin)),
            hi: std::array::from_fn(|a| (self.hi[a] + margin).min(dims[a])),
        }
    }
}

/// Element types that can live in a [`Grid`] and be serialized to disk.
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn is_valid(&self) -> bool;
    fn write_le(&self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Voxel for u16 {
    const DTYPE: &'static str = "u16";
    const BYTES: usize = 2;
    fn is_valid(&self) -> bool {
        true
    }
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        u16::from_le_bytes([bytes[0], bytes[1]])
    }
}

/// Dense 3D grid sharing one [`Geometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T: Voxel> {
    geometry: Geometry,
    data: Vec<T>,
}

/// Intensity volume (HU or normalized).
pub type Volume = Grid<f32>;
/// Class labels or instance ids.
pub type LabelVolume = Grid<u16>;

impl<T: Voxel> Grid<T> {
    pub fn new(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(VolumeError::DataLength { expected: geometry.len(), found: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_valid()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: T) -> Self {
        let n = geometry.len();
        Self { geometry, data: vec![value; n] }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Mutable voxel access. Callers must keep values valid (finite for `f32`).
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geometry.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = v;
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { geometry: self.geometry.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Copy of a sub-box; origin shifts so physical positions are preserved.
    pub fn crop(&self, b: &VoxelBox) -> Result<Self> {
        if !b.fits_in(self.dims()) {
            return Err(VolumeError::InvalidGeometry(format!("box {b:?} outside dims {:?}", self.dims())));
        }
        let g = self.geometry.sub_box(b);
        let [bx, by, bz] = b.dims();
        let mut data = Vec::with_capacity(bx * by * bz);
        for z in b.lo[2]..b.hi[2] {
            for y in b.lo[1]..b.hi[1] {
                let start = self.geometry.index(b.lo[0], y, z);
                data.extend_from_slice(&self.data[start..start + bx]);
            }
        }
        Ok(Self { geometry: g, data })
    }

    /// Extract a window that may extend past the grid; outside voxels take `fill`.
    /// `lo` is the signed voxel offset of the window corner.
    pub fn window(&self, lo: [isize; 3], dims: [usize; 3], fill: T) -> Vec<T> {
        let [nx, ny, nz] = self.dims();
        let mut out = vec![fill; dims[0] * dims[1] * dims[2]];
        for wz in 0..dims[2] {
            let z = lo[2] + wz as isize;
            if z < 0 || z >= nz as isize {
                continue;
            }
            for wy in 0..dims[1] {
                let y = lo[1] + wy as isize;
                if y < 0 || y >= ny as isize {
                    continue;
                }
                let x0 = lo[0].max(0);
                let x1 = (lo[0] + dims[0] as isize).min(nx as isize);
                if x0 >= x1 {
                    continue;
                }
                let src = self.geometry.index(x0 as usize, y as usize, z as usize);
                let dst = (x0 - lo[0]) as usize + dims[0] * (wy + dims[1] * wz);
                let n = (x1 - x0) as usize;
                out[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
    data: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io { path: path.to_path_buf(), source }
}

/// Read a grid from its JSON header path.
pub fn read_grid<T: Voxel>(path: &Path) -> Result<Grid<T>> {
    if !path.exists() {
        return Err(VolumeError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| VolumeError::MalformedHeader { path: path.to_path_buf(), reason: e.to_string() })?;
    if header.dtype != T::DTYPE {
        return Err(VolumeError::DtypeMismatch { expected: T::DTYPE.into(), found: header.dtype });
    }
    let geometry = Geometry::new(header.dims, header.spacing, header.origin).map_err(|e| {
        VolumeError::MalformedHeader { path: path.to_path_buf(), reason: e.to_string() }
    })?;
    let raw_path = path.parent().unwrap_or(Path::new(".")).join(&header.data);
    if !raw_path.exists() {
        return Err(VolumeError::MissingFile(raw_path));
    }
    let bytes = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let expected = geometry.len() * T::BYTES;
    if bytes.len() != expected {
        return Err(VolumeError::PayloadLength { expected, found: bytes.len() });
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Grid::new(geometry, data)
}

/// Write a grid: header at `path`, payload next to it with a `.raw` extension.
/// Both files are written under temporary names and renamed on success.
pub fn write_grid<T: Voxel>(grid: &Grid<T>, path: &Path) -> Result<()> {
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .ok_or_else(|| VolumeError::InvalidGeometry(format!("bad output path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let g = grid.geometry();
    let header = Header {
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        dtype: T::DTYPE.into(),
        data: raw_name,
    };
    let mut payload = Vec::with_capacity(grid.data.len() * T::BYTES);
    for v in &grid.data {
        v.write_le(&mut payload);
    }
    let header_text = serde_json::to_string_pretty(&header).expect("header serializes");
    write_atomic(&raw_path, &payload)?;
    write_atomic(path, header_text.as_bytes())
}

/// Write `bytes` to a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        path.with_file_name(name)
    };
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().ok();
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    read_grid(path)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    write_grid(v, path)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    read_grid(path)
}

pub fn write_labels(v: &LabelVolume, path: &Path) -> Result<()> {
    write_grid(v, path)
}

pub const HU_MIN: f32 = -512.0;
pub const HU_MAX: f32 = 1024.0;

/// Clip to [-512, 1024] HU and map affinely onto [-1, 1].
pub fn clip_normalize(v: &Volume) -> Volume {
    let center = 0.5 * (HU_MIN + HU_MAX);
    let half = 0.5 * (HU_MAX - HU_MIN);
    v.map(|x| (x.clamp(HU_MIN, HU_MAX) - center) / half)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Linear,
    Nearest,
}

/// Output dims for isotropic resampling: round half away from zero, at least 1.
pub fn isotropic_dims(g: &Geometry, target_mm: f64) -> [usize; 3] {
    std::array::from_fn(|a| ((g.dims[a] as f64 * g.spacing[a] / target_mm).round() as usize).max(1))
}

/// Per-axis lookup table mapping output voxel index to a continuous source index.
fn source_positions(out: &Geometry, src: &Geometry, axis: usize) -> Vec<f64> {
    let ratio = out.spacing[axis] / src.spacing[axis];
    let shift = (out.origin[axis] - src.origin[axis]) / src.spacing[axis];
    (0..out.dims[axis]).map(|j| (j as f64 + 0.5) * ratio - 0.5 + shift).collect()
}

/// Linear weights `(i0, i1, w1)` with clamp-to-edge.
fn linear_taps(pos: &[f64], n: usize) -> Vec<(usize, usize, f64)> {
    pos.iter()
        .map(|&p| {
            let p = p.clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

/// Nearest source voxel: the voxel whose extent contains the sample, clamped.
fn nearest_taps(pos: &[f64], n: usize) -> Vec<usize> {
    pos.iter().map(|&p| ((p + 0.5).floor().max(0.0) as usize).min(n - 1)).collect()
}

fn resample_linear(v: &Volume, out: Geometry) -> Volume {
    let src = v.geometry();
    let tx = linear_taps(&source_positions(&out, src, 0), src.dims[0]);
    let ty = linear_taps(&source_positions(&out, src, 1), src.dims[1]);
    let tz = linear_taps(&source_positions(&out, src, 2), src.dims[2]);
    let mut data = Vec::with_capacity(out.len());
    for &(z0, z1, wz) in &tz {
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let at = |x, y, z| v.get(x, y, z) as f64;
                let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                data.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    Grid { geometry: out, data }
}

fn resample_nearest<T: Voxel>(v: &Grid<T>, out: Geometry) -> Grid<T> {
    let src = v.geometry();
    let tx = nearest_taps(&source_positions(&out, src, 0), src.dims[0]);
    let ty = nearest_taps(&source_positions(&out, src, 1), src.dims[1]);
    let tz = nearest_taps(&source_positions(&out, src, 2), src.dims[2]);
    let mut data = Vec::with_capacity(out.len());
    for &z in &tz {
        for &y in &ty {
            for &x in &tx {
                data.push(v.get(x, y, z));
            }
        }
    }
    Grid { geometry: out, data }
}

/// Resample onto a `target_mm` isotropic grid sharing the source origin.
pub fn resample_isotropic(v: &Volume, target_mm: f64, mode: Interp) -> Result<Volume> {
    if !(target_mm > 0.0) {
        return Err(VolumeError::InvalidGeometry(format!("target spacing must be positive, got {target_mm}")));
    }
    let g = v.geometry();
    let out = Geometry { dims: isotropic_dims(g, target_mm), spacing: [target_mm; 3], origin: g.origin };
    Ok(match mode {
        Interp::Linear => resample_linear(v, out),
        Interp::Nearest => resample_nearest(v, out),
    })
}

/// Nearest-neighbor mapping of labels onto another geometry (physical coordinates,
/// clamp-to-edge). Never introduces label values absent from the source.
pub fn resample_labels_to(src: &LabelVolume, target: &Geometry) -> Result<LabelVolume> {
    target.validate()?;
    if src.geometry() == target {
        return Ok(src.clone());
    }
    Ok(resample_nearest(src, target.clone()))
}

/// Tight box of each nonzero label, grown by `margin_vox` and clamped to dims.
pub fn class_bounding_boxes(labels: &LabelVolume, margin_vox: usize) -> BTreeMap<u16, VoxelBox> {
    let mut boxes: BTreeMap<u16, VoxelBox> = BTreeMap::new();
    let g = labels.geometry();
    for (i, &l) in labels.data().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let p = g.coords(i);
        boxes
            .entry(l)
            .and_modify(|b| {
                for a in 0..3 {
                    b.lo[a] = b.lo[a].min(p[a]);
                    b.hi[a] = b.hi[a].max(p[a] + 1);
                }
            })
            .or_insert(VoxelBox { lo: p, hi: [p[0] + 1, p[1] + 1, p[2] + 1] });
    }
    for b in boxes.values_mut() {
        *b = b.expand(margin_vox, g.dims);
    }
    boxes
}

/// Voxel count and physical centroid (mean voxel center, mm) of every nonzero label.
pub fn label_centroids(labels: &LabelVolume) -> BTreeMap<u16, ([f64; 3], usize)> {
    let g = labels.geometry();
    let mut sums: BTreeMap<u16, ([f64; 3], usize)> = BTreeMap::new();
    let [nx, ny, _] = g.dims;
    for (i, &l) in labels.data().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let p = [i % nx, (i / nx) % ny, i / (nx * ny)];
        let e = sums.entry(l).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            e.0[a] += p[a] as f64;
        }
        e.1 += 1;
    }
    for (sum, n) in sums.values_mut() {
        for a in 0..3 {
            sum[a] = g.origin[a] + (sum[a] / *n as f64 + 0.5) * g.spacing[a];
        }
    }
    sums
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut v = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => n == 1,
                        Connectivity::TwentySix => n > 0,
                    };
                    if keep {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    }
}

/// Label connected foreground components (nonzero voxels) in scan order of their
/// seed voxel. Returns per-voxel component ids (0 = background, 1-based) and sizes.
pub fn connected_components(mask: &LabelVolume, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let g = mask.geometry();
    let dims = g.dims;
    let offsets = conn.offsets();
    let mut comp = vec![0u32; g.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..g.len() {
        if mask.data()[seed] == 0 || comp[seed] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        comp[seed] = id;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = g.coords(i);
            for o in &offsets {
                let q: [isize; 3] = std::array::from_fn(|a| p[a] as isize + o[a]);
                if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as isize) {
                    continue;
                }
                let j = g.index(q[0] as usize, q[1] as usize, q[2] as usize);
                if mask.data()[j] != 0 && comp[j] == 0 {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Keep only the largest connected component of a binary mask. Equal sizes keep the
/// component whose seed comes first in scan order.
pub fn largest_component(mask: &LabelVolume, conn: Connectivity) -> LabelVolume {
    let (comp, sizes) = connected_components(mask, conn);
    let mut out = LabelVolume::filled(mask.geometry().clone(), 0);
    let Some(best) = sizes.iter().enumerate().fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
        Some((_, bs)) if bs >= s => acc,
        _ => Some((i, s)),
    }) else {
        return out;
    };
    let keep = best.0 as u32 + 1;
    for (o, &c) in out.data_mut().iter_mut().zip(&comp) {
        if c == keep {
            *o = 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Volume {
        Volume::new(Geometry::new(dims, spacing, [0.0; 3]).unwrap(), data).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        let g = Geometry::unit([2, 2, 2]);
        assert!(matches!(Volume::new(g.clone(), vec![0.0; 7]), Err(VolumeError::DataLength { .. })));
        assert!(matches!(Volume::new(g, vec![f32::NAN; 8]), Err(VolumeError::NonFinite(0))));
    }

    #[test]
    fn read_zero_volume_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zeros.json");
        write_volume(&vol([2, 2, 2], [1.0; 3], vec![0.0; 8]), &p).unwrap();
        let raw = fs::read(dir.path().join("zeros.raw")).unwrap();
        assert_eq!(raw, vec![0u8; 32]);
        let v = read_volume(&p).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));

        // truncated payload
        fs::write(dir.path().join("zeros.raw"), vec![0u8; 28]).unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::PayloadLength { expected: 32, found: 28 })));

        fs::write(&p, "{not json").unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::MalformedHeader { .. })));
        assert!(matches!(read_volume(&dir.path().join("nope.json")), Err(VolumeError::MissingFile(_))));
        assert!(matches!(read_labels(&dir.path().join("nope.json")), Err(VolumeError::MissingFile(_))));
    }

    #[test]
    fn dtype_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.json");
        write_labels(&LabelVolume::filled(Geometry::unit([2, 1, 1]), 3), &p).unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::DtypeMismatch { .. })));
        assert_eq!(read_labels(&p).unwrap().data(), &[3, 3]);
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let v = vol([1, 1, 1], [1.0; 3], vec![1.0]);
        let err = write_volume(&v, Path::new("/nonexistent-dir/sub/v.json")).unwrap_err();
        assert!(matches!(err, VolumeError::Io { .. }));
    }

    #[test]
    fn random_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..60).map(|_| rng.random_range(-2000.0..3000.0)).collect();
        let g = Geometry::new([5, 4, 3], [0.7, 0.8, 2.5], [-10.0, 3.5, 100.25]).unwrap();
        let v = Volume::new(g, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back.geometry(), v.geometry());
        let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn clip_normalize_endpoints() {
        let v = vol([5, 1, 1], [1.0; 3], vec![1024.0, -512.0, 256.0, 3000.0, -3000.0]);
        assert_eq!(clip_normalize(&v).data(), &[1.0, -1.0, 0.0, 1.0, -1.0]);
    }

    #[test]
    fn resample_constant_volume() {
        let v = vol([3, 4, 5], [1.5, 0.5, 2.0], vec![7.25; 60]);
        let r = resample_isotropic(&v, 1.0, Interp::Linear).unwrap();
        assert_eq!(r.dims(), [5, 2, 10]);
        assert!(r.data().iter().all(|&x| x == 7.25));
        assert_eq!(r.geometry().spacing, [1.0; 3]);
    }

    #[test]
    fn resample_ramp_matches_closed_form() {
        // f = source x index; output samples at x = j/2 - 0.25 clamped to [0, 3].
        let mut data = Vec::new();
        for _z in 0..4 {
            for _y in 0..4 {
                for x in 0..4 {
                    data.push(x as f32);
                }
            }
        }
        let v = vol([4, 4, 4], [2.0; 3], data);
        let r = resample_isotropic(&v, 1.0, Interp::Linear).unwrap();
        assert_eq!(r.dims(), [8, 8, 8]);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let expected = (x as f64 / 2.0 - 0.25).clamp(0.0, 3.0);
                    assert!((r.get(x, y, z) as f64 - expected).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn resample_same_spacing_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..120).map(|_| rng.random()).collect();
        let v = vol([4, 5, 6], [1.3; 3], data);
        for mode in [Interp::Linear, Interp::Nearest] {
            let r = resample_isotropic(&v, 1.3, mode).unwrap();
            assert_eq!(r.data(), v.data());
        }
        assert!(resample_isotropic(&v, 0.0, Interp::Linear).is_err());
    }

    #[test]
    fn label_upscale_of_single_voxel_is_block() {
        let mut src = LabelVolume::filled(Geometry::new([3, 3, 3], [2.0; 3], [0.0; 3]).unwrap(), 0);
        src.set(1, 1, 1, 5);
        let target = Geometry::new([6, 6, 6], [1.0; 3], [0.0; 3]).unwrap();
        let out = resample_labels_to(&src, &target).unwrap();
        // brute force: nearest source center for every target center
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let p = target.voxel_center([x, y, z]);
                    let mut best = (f64::MAX, 0);
                    for i in 0..27 {
                        let c = src.geometry().coords(i);
                        let q = src.geometry().voxel_center(c);
                        let d: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
                        if d < best.0 {
                            best = (d, src.data()[i]);
                        }
                    }
                    assert_eq!(out.get(x, y, z), best.1);
                }
            }
        }
        assert_eq!(out.data().iter().filter(|&&l| l == 5).count(), 8);
        assert_eq!(out.get(2, 2, 2), 5);
        assert_eq!(out.get(3, 3, 3), 5);
    }

    #[test]
    fn label_resample_identity_and_background() {
        let g = Geometry::unit([3, 2, 2]);
        let src = LabelVolume::new(g.clone(), (0..12).map(|i| i as u16).collect()).unwrap();
        assert_eq!(resample_labels_to(&src, &g).unwrap(), src);
        let bg = LabelVolume::filled(g, 0);
        let t = Geometry::new([7, 3, 9], [0.4, 0.9, 0.3], [0.1, 0.0, -0.2]).unwrap();
        assert!(resample_labels_to(&bg, &t).unwrap().data().iter().all(|&l| l == 0));
    }

    #[test]
    fn bounding_box_examples() {
        let mut l = LabelVolume::filled(Geometry::unit([10, 10, 10]), 0);
        l.set(3, 4, 5, 2);
        let b = class_bounding_boxes(&l, 0);
        assert_eq!(b.len(), 1);
        assert_eq!(b[&2], VoxelBox { lo: [3, 4, 5], hi: [4, 5, 6] });
        let b = class_bounding_boxes(&l, 2);
        assert_eq!(b[&2], VoxelBox { lo: [1, 2, 3], hi: [6, 7, 8] });
        let b = class_bounding_boxes(&l, 9);
        assert_eq!(b[&2], VoxelBox { lo: [0, 0, 0], hi: [10, 10, 10] });
        assert!(class_bounding_boxes(&LabelVolume::filled(Geometry::unit([2, 2, 2]), 0), 1).is_empty());
    }

    fn brute_boxes(l: &LabelVolume) -> BTreeMap<u16, VoxelBox> {
        let mut out = BTreeMap::new();
        for class in 1..=3u16 {
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            let [nx, ny, nz] = l.dims();
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if l.get(x, y, z) == class {
                            let p = [x, y, z];
                            for a in 0..3 {
                                lo[a] = lo[a].min(p[a]);
                                hi[a] = hi[a].max(p[a] + 1);
                            }
                        }
                    }
                }
            }
            if lo[0] != usize::MAX {
                out.insert(class, VoxelBox { lo, hi });
            }
        }
        out
    }

    #[test]
    fn bounding_boxes_match_brute_force_on_random_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let dims = [rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16)];
            let density: f64 = rng.random_range(0.0..0.2);
            let data = (0..dims[0] * dims[1] * dims[2])
                .map(|_| if rng.random_bool(density) { rng.random_range(1..=3) } else { 0 })
                .collect();
            let l = LabelVolume::new(Geometry::unit(dims), data).unwrap();
            assert_eq!(class_bounding_boxes(&l, 0), brute_boxes(&l));
        }
    }

    #[test]
    fn largest_component_cases() {
        let g = Geometry::unit([12, 4, 4]);
        let mut m = LabelVolume::filled(g.clone(), 0);
        for x in 0..10 {
            m.set(x, 1, 1, 1);
        }
        assert_eq!(largest_component(&m, Connectivity::Six), m);

        // add a detached 2-voxel blob; diagonal contact does not join under 6-connectivity
        m.set(10, 2, 2, 1);
        m.set(11, 2, 2, 1);
        let kept = largest_component(&m, Connectivity::Six);
        assert_eq!(kept.data().iter().filter(|&&v| v == 1).count(), 10);
        assert_eq!(kept.get(10, 2, 2), 0);
        // 26-connectivity merges them
        let kept26 = largest_component(&m, Connectivity::TwentySix);
        assert_eq!(kept26.data().iter().filter(|&&v| v == 1).count(), 12);

        let empty = LabelVolume::filled(g, 0);
        assert_eq!(largest_component(&empty, Connectivity::Six), empty);
    }

    #[test]
    fn largest_component_tie_keeps_first_seed() {
        let mut m = LabelVolume::filled(Geometry::unit([5, 1, 1]), 0);
        m.set(0, 0, 0, 1);
        m.set(4, 0, 0, 1);
        let kept = largest_component(&m, Connectivity::Six);
        assert_eq!(kept.data(), &[1, 0, 0, 0, 0]);
    }

    #[test]
    fn window_pads_with_fill() {
        let v = vol([2, 2, 1], [1.0; 3], vec![1.0, 2.0, 3.0, 4.0]);
        let w = v.window([-1, 0, 0], [3, 2, 1], -1.0);
        assert_eq!(w, vec![-1.0, 1.0, 2.0, -1.0, 3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn clip_normalize_is_idempotent_on_normalized_data(xs in proptest::collection::vec(-5000.0f32..5000.0, 1..64)) {
            let v = vol([xs.len(), 1, 1], [1.0; 3], xs);
            let once = clip_normalize(&v);
            prop_assert!(once.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
            // already-clipped HU values map through the same affine map
            let clipped = v.map(|x| x.clamp(HU_MIN, HU_MAX));
            let twice = clip_normalize(&clipped);
            prop_assert_eq!(twice.data(), once.data());
        }

        #[test]
        fn label_resampling_never_invents_labels(
            seed in 0u64..1000,
            sx in 0.3f64..3.0, sy in 0.3f64..3.0, sz in 0.3f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..8)];
            let data: Vec<u16> = (0..dims[0] * dims[1] * dims[2]).map(|_| rng.random_range(1..6) * 3).collect();
            let src = LabelVolume::new(Geometry::unit(dims), data).unwrap();
            let target = Geometry::new([rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..10)], [sx, sy, sz], [0.0; 3]).unwrap();
            let out = resample_labels_to(&src, &target).unwrap();
            let present: std::collections::BTreeSet<u16> = src.data().iter().cloned().collect();
            prop_assert!(out.data().iter().all(|l| present.contains(l)));
        }
    }
}
