//! Brute-force reference implementations used as independent oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spine_cascade::volume::{Geometry, LabelVolume};

/// Foreground voxel centers (mm) that touch background or the border through a face.
pub fn surface_points(m: &LabelVolume) -> Vec<[f64; 3]> {
    let g = m.geometry();
    let [nx, ny, nz] = g.dims;
    let on = |x: isize, y: isize, z: isize| {
        x >= 0 && y >= 0 && z >= 0 && (x as usize) < nx && (y as usize) < ny && (z as usize) < nz && m.get(x as usize, y as usize, z as usize) != 0
    };
    let mut pts = Vec::new();
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                if !on(x, y, z) {
                    continue;
                }
                let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if nbrs.iter().any(|&(dx, dy, dz)| !on(x + dx, y + dy, z + dz)) {
                    pts.push(g.voxel_center([x as usize, y as usize, z as usize]));
                }
            }
        }
    }
    pts
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Nearest-surface distance of every point of `from` to the set `to`, by exhaustive search.
pub fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).collect()
}

pub fn assd(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let (sa, sb) = (surface_points(a), surface_points(b));
    let (ab, ba) = (directed(&sa, &sb), directed(&sb, &sa));
    (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64
}

pub fn hausdorff(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let (sa, sb) = (surface_points(a), surface_points(b));
    directed(&sa, &sb).into_iter().chain(directed(&sb, &sa)).fold(0.0, f64::max)
}

pub fn dice(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let mut inter = 0.0;
    let mut total = 0.0;
    for i in 0..a.data().len() {
        let (x, y) = (a.data()[i] != 0, b.data()[i] != 0);
        if x && y {
            inter += 1.0;
        }
        total += x as u8 as f64 + y as u8 as f64;
    }
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

/// A pair of nonempty random masks up to `max_extent` per axis, with random anisotropic spacing.
pub fn random_mask_pair(seed: u64, max_extent: usize) -> (LabelVolume, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [0; 3].map(|_| rng.random_range(1..=max_extent));
    let spacing = [0; 3].map(|_| rng.random_range(0.5..2.5));
    let g = Geometry::new(dims, spacing, [rng.random_range(-5.0..5.0), 0.0, 1.0]).unwrap();
    let make = |rng: &mut ChaCha8Rng| {
        let p = rng.random_range(0.02..0.7);
        let mut m = LabelVolume::filled(g.clone(), 0);
        for v in m.data_mut() {
            *v = rng.random_bool(p) as u16;
        }
        let n = m.data().len();
        let k = rng.random_range(0..n);
        m.data_mut()[k] = 1;
        m
    };
    let a = make(&mut rng);
    let b = make(&mut rng);
    (a, b)
}
