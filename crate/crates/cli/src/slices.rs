//! Grayscale PGM slice dumps with instances tinted by id.

use std::fmt::Write as _;
use std::path::Path;

use spine_cascade::volume::{clip_normalize, write_atomic, LabelVolume, Volume};

pub const AXIAL_FILE: &str = "axial_mid.pgm";
pub const SAGITTAL_FILE: &str = "sagittal_mid.pgm";

fn tint(id: u16) -> u8 {
    (96 + (id as u32 * 53) % 160) as u8
}

/// Binary PGM (`P5`) of a row-major `width x height` image.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut header = String::new();
    write!(header, "P5\n{width} {height}\n255\n").expect("string write");
    let mut out = header.into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn shade(ct: f32, id: u16) -> u8 {
    let gray = ((ct + 1.0) * 0.5 * 255.0).clamp(0.0, 255.0);
    if id == 0 {
        gray as u8
    } else {
        (0.35 * gray + 0.65 * tint(id) as f32) as u8
    }
}

/// Pixels of the middle axial (z) slice, rows along y.
pub fn axial(ct: &Volume, ids: &LabelVolume) -> (usize, usize, Vec<u8>) {
    let [nx, ny, nz] = ct.dims();
    let z = nz / 2;
    let px = (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).map(|(x, y)| shade(ct.get(x, y, z), ids.get(x, y, z))).collect();
    (nx, ny, px)
}

/// Pixels of the middle sagittal (x) slice, rows along z, columns along y.
pub fn sagittal(ct: &Volume, ids: &LabelVolume) -> (usize, usize, Vec<u8>) {
    let [nx, ny, nz] = ct.dims();
    let x = nx / 2;
    let px = (0..nz).flat_map(|z| (0..ny).map(move |y| (y, z))).map(|(y, z)| shade(ct.get(x, y, z), ids.get(x, y, z))).collect();
    (ny, nz, px)
}

/// Write both slices of an HU volume and its instance ids into `dir`.
pub fn dump(ct_hu: &Volume, ids: &LabelVolume, dir: &Path) -> anyhow::Result<()> {
    let ct = clip_normalize(ct_hu);
    for (name, (w, h, px)) in [(AXIAL_FILE, axial(&ct, ids)), (SAGITTAL_FILE, sagittal(&ct, ids))] {
        write_atomic(&dir.join(name), &encode_pgm(w, h, &px))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use spine_cascade::volume::Geometry;

    #[test]
    fn pgm_layout() {
        let bytes = encode_pgm(3, 2, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn slices_pick_the_middle_and_tint_instances() {
        let g = Geometry::unit([4, 3, 6]);
        let ct = Volume::filled(g.clone(), -1.0);
        let mut ids = LabelVolume::filled(g, 0);
        ids.set(1, 2, 3, 5);
        let (w, h, px) = axial(&ct, &ids);
        assert_eq!((w, h), (4, 3));
        assert_eq!(px.iter().filter(|&&p| p != 0).count(), 1);
        assert_eq!(px[1 + 4 * 2], (0.65 * tint(5) as f32) as u8);
        let (w, h, px) = sagittal(&ct, &ids);
        assert_eq!((w, h), (3, 6));
        assert!(px.iter().all(|&p| p == 0));
        assert_ne!(tint(1), tint(2));
    }
}
