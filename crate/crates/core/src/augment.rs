//! Seeded training-time augmentation: random crops, rotation plus isotropic
//! scaling about the volume center, and additive Gaussian noise.
//!
//! Volumes are expected in normalized units, so out-of-field voxels are filled
//! with [`FILL_INTENSITY`] and label 0.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Geometry, Grid, LabelVolume, Volume};

pub const FILL_INTENSITY: f32 = -1.0;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Rotation range in degrees, sampled independently per axis.
    pub rotation_deg: (f64, f64),
    /// Isotropic scale factor range.
    pub scale: (f64, f64),
    /// Noise standard deviation range in normalized intensity units.
    pub noise_sigma: (f64, f64),
    pub crop_dims: [usize; 3],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { rotation_deg: (-15.0, 15.0), scale: (0.8, 1.2), noise_sigma: (0.0, 50.0 / 1536.0), crop_dims: [32, 32, 32] }
    }
}

impl AugmentSpec {
    /// No rotation, no scaling, no noise.
    pub fn identity(crop_dims: [usize; 3]) -> Self {
        Self { rotation_deg: (0.0, 0.0), scale: (1.0, 1.0), noise_sigma: (0.0, 0.0), crop_dims }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let ranges = [("rotation_deg", self.rotation_deg), ("scale", self.scale), ("noise_sigma", self.noise_sigma)];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(AugmentError::InvalidSpec(format!("{name} range ({lo}, {hi})")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(AugmentError::InvalidSpec(format!("scale must be positive, got {:?}", self.scale)));
        }
        if self.noise_sigma.0 < 0.0 {
            return Err(AugmentError::InvalidSpec(format!("noise sigma must be nonnegative, got {:?}", self.noise_sigma)));
        }
        if self.crop_dims.contains(&0) {
            return Err(AugmentError::InvalidSpec(format!("crop dims {:?}", self.crop_dims)));
        }
        Ok(())
    }
}

fn sample<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn shifted_geometry(g: &Geometry, lo: [isize; 3], dims: [usize; 3]) -> Geometry {
    Geometry {
        dims,
        spacing: g.spacing,
        origin: std::array::from_fn(|a| g.origin[a] + lo[a] as f64 * g.spacing[a]),
    }
}

/// Aligned window of image and labels with its corner at `lo` (may lie outside).
pub fn crop_at(v: &Volume, labels: &LabelVolume, lo: [isize; 3], dims: [usize; 3]) -> (Volume, LabelVolume) {
    assert_eq!(v.dims(), labels.dims(), "image and labels must share dims");
    let g = shifted_geometry(v.geometry(), lo, dims);
    let img = Grid::new(g.clone(), v.window(lo, dims, FILL_INTENSITY)).expect("window matches geometry");
    let lab = Grid::new(g, labels.window(lo, dims, 0)).expect("window matches geometry");
    (img, lab)
}

/// Crop `dims` at a uniformly sampled offset. Axes shorter than the crop are
/// padded (intensity [`FILL_INTENSITY`], label 0) at a uniformly sampled placement.
///
/// # Panics
/// If image and labels differ in dims.
pub fn random_crop<R: Rng + ?Sized>(v: &Volume, labels: &LabelVolume, dims: [usize; 3], rng: &mut R) -> (Volume, LabelVolume) {
    let n = v.dims();
    let lo: [isize; 3] = std::array::from_fn(|a| {
        let slack = n[a] as i64 - dims[a] as i64;
        let (a0, a1) = if slack >= 0 { (0, slack) } else { (slack, 0) };
        rng.random_range(a0..=a1) as isize
    });
    crop_at(v, labels, lo, dims)
}

/// Parameters of one affine draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    /// Rotation about x, y and z in degrees, applied in that order.
    pub angles_deg: [f64; 3],
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: Self = Self { angles_deg: [0.0; 3], scale: 1.0 };

    pub fn sample<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> Self {
        let angles_deg = std::array::from_fn(|_| sample(rng, spec.rotation_deg));
        let scale = sample(rng, spec.scale);
        Self { angles_deg, scale }
    }

    /// Rotation matrix `Rz * Ry * Rx`.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.angles_deg.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&rz, &matmul3(&ry, &rx))
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rotate and scale image and labels about the volume center in physical space.
/// Output voxel `p` samples the source at `c + R^T (p - c) / s`.
pub fn apply_affine(v: &Volume, labels: &LabelVolume, params: &AffineParams) -> (Volume, LabelVolume) {
    assert_eq!(v.dims(), labels.dims(), "image and labels must share dims");
    if *params == AffineParams::IDENTITY {
        return (v.clone(), labels.clone());
    }
    let g = v.geometry();
    let [nx, ny, nz] = g.dims;
    let sp = g.spacing;
    let center: [f64; 3] = std::array::from_fn(|a| 0.5 * (g.dims[a] as f64 - 1.0) * sp[a]);
    let r = params.rotation();
    let inv_s = 1.0 / params.scale;
    let mut img = Vec::with_capacity(g.len());
    let mut lab = Vec::with_capacity(g.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = [x as f64 * sp[0] - center[0], y as f64 * sp[1] - center[1], z as f64 * sp[2] - center[2]];
                let q: [f64; 3] = std::array::from_fn(|a| {
                    let rotated = r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2];
                    (center[a] + rotated * inv_s) / sp[a]
                });
                img.push(trilinear(v, q).unwrap_or(FILL_INTENSITY));
                lab.push(nearest(labels, q).unwrap_or(0));
            }
        }
    }
    let out = g.clone();
    (Grid::new(out.clone(), img).expect("same geometry"), Grid::new(out, lab).expect("same geometry"))
}

const EDGE_TOL: f64 = 1e-9;

fn trilinear(v: &Volume, q: [f64; 3]) -> Option<f32> {
    let n = v.dims();
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut w = [0f64; 3];
    for a in 0..3 {
        let hi = (n[a] - 1) as f64;
        if q[a] < -EDGE_TOL || q[a] > hi + EDGE_TOL {
            return None;
        }
        let p = q[a].clamp(0.0, hi);
        i0[a] = p.floor() as usize;
        i1[a] = (i0[a] + 1).min(n[a] - 1);
        w[a] = p - i0[a] as f64;
    }
    let at = |x, y, z| v.get(x, y, z) as f64;
    let c00 = at(i0[0], i0[1], i0[2]) * (1.0 - w[0]) + at(i1[0], i0[1], i0[2]) * w[0];
    let c10 = at(i0[0], i1[1], i0[2]) * (1.0 - w[0]) + at(i1[0], i1[1], i0[2]) * w[0];
    let c01 = at(i0[0], i0[1], i1[2]) * (1.0 - w[0]) + at(i1[0], i0[1], i1[2]) * w[0];
    let c11 = at(i0[0], i1[1], i1[2]) * (1.0 - w[0]) + at(i1[0], i1[1], i1[2]) * w[0];
    let c0 = c00 * (1.0 - w[1]) + c10 * w[1];
    let c1 = c01 * (1.0 - w[1]) + c11 * w[1];
    Some((c0 * (1.0 - w[2]) + c1 * w[2]) as f32)
}

fn nearest(labels: &LabelVolume, q: [f64; 3]) -> Option<u16> {
    let n = labels.dims();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = q[a].round();
        if r < 0.0 || r > (n[a] - 1) as f64 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(labels.get(idx[0], idx[1], idx[2]))
}

/// Draw [`AffineParams`] from `spec` and apply them.
pub fn random_affine<R: Rng + ?Sized>(v: &Volume, labels: &LabelVolume, spec: &AugmentSpec, rng: &mut R) -> (Volume, LabelVolume) {
    let params = AffineParams::sample(spec, rng);
    apply_affine(v, labels, &params)
}

/// Add zero-mean Gaussian noise with `sigma ~ U(spec.noise_sigma)`. The result is not re-clipped.
pub fn add_gaussian_noise<R: Rng + ?Sized>(v: &Volume, spec: &AugmentSpec, rng: &mut R) -> Volume {
    let sigma = sample(rng, spec.noise_sigma);
    if sigma == 0.0 {
        return v.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite nonnegative sigma");
    let mut out = v.clone();
    for e in out.data_mut() {
        *e += normal.sample(rng) as f32;
    }
    out
}

/// Crop, then affine, then noise.
pub fn augment<R: Rng + ?Sized>(v: &Volume, labels: &LabelVolume, spec: &AugmentSpec, rng: &mut R) -> (Volume, LabelVolume) {
    let (img, lab) = random_crop(v, labels, spec.crop_dims, rng);
    let (img, lab) = random_affine(&img, &lab, spec, rng);
    (add_gaussian_noise(&img, spec, rng), lab)
}
