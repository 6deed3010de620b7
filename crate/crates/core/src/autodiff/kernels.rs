//! Index plumbing for the 3D convolutions.
//!
//! Both convolutions are lowered to matrix products. `im2col_3` gathers every
//! 3x3x3 neighborhood (zero padding 1) of a range of z-planes into a
//! `[C*27, planes*H*W]` matrix; the 3x3x3 convolution runs slab by slab. The transposed convolution
//! uses the `[K*64, D*H*W]` layout indexed by the *input* voxel, where output voxel
//! `o = 2*i - 1 + k` along each axis.

use super::tensor::Scalar;

/// Shift a row by `k - 1` (k in 0..3): `dst[w] = src[w + k - 1]`, zero outside.
#[inline]
fn shifted_row<T: Scalar>(dst: &mut [T], src: &[T], k: usize) {
    let w = dst.len();
    match k {
        0 => {
            dst[0] = T::zero();
            dst[1..].copy_from_slice(&src[..w - 1]);
        }
        1 => dst.copy_from_slice(src),
        _ => {
            dst[..w - 1].copy_from_slice(&src[1..]);
            dst[w - 1] = T::zero();
        }
    }
}

#[cfg(test)]
#[inline]
fn add_shifted_row<T: Scalar>(dst: &mut [T], src: &[T], k: usize) {
    // adjoint of `shifted_row`: dst[w + k - 1] += src[w]
    let w = dst.len();
    match k {
        0 => {
            for i in 1..w {
                dst[i - 1] = dst[i - 1] + src[i];
            }
        }
        1 => {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
        _ => {
            for i in 0..w - 1 {
                dst[i + 1] = dst[i + 1] + src[i];
            }
        }
    }
}

/// Gather 3x3x3 neighborhoods of the z-planes `[z0, z1)` into `cols`, a
/// `[C*27, (z1-z0)*H*W]` row-major matrix.
pub(crate) fn im2col_3<T: Scalar>(x: &[T], channels: usize, dims: [usize; 3], z0: usize, z1: usize, cols: &mut [T]) {
    let [d, h, w] = dims;
    let v = d * h * w;
    let len = (z1 - z0) * h * w;
    debug_assert!(cols.len() >= channels * 27 * len);
    for c in 0..channels {
        let xc = &x[c * v..(c + 1) * v];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ((c * 3 + kd) * 3 + kh) * 3 + kw;
                    let dst = &mut cols[row * len..(row + 1) * len];
                    for z in z0..z1 {
                        let sz = z as isize + kd as isize - 1;
                        for y in 0..h {
                            let sy = y as isize + kh as isize - 1;
                            let o = ((z - z0) * h + y) * w;
                            let out = &mut dst[o..o + w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            let s = (sz as usize * h + sy as usize) * w;
                            shifted_row(out, &xc[s..s + w], kw);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_3`] over the whole volume (test reference).
#[cfg(test)]
pub(crate) fn col2im_3<T: Scalar>(cols: &[T], channels: usize, dims: [usize; 3], dx: &mut [T]) {
    let [d, h, w] = dims;
    let v = d * h * w;
    for c in 0..channels {
        let dxc = &mut dx[c * v..(c + 1) * v];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ((c * 3 + kd) * 3 + kh) * 3 + kw;
                    let src = &cols[row * v..(row + 1) * v];
                    for z in 0..d {
                        let sz = z as isize + kd as isize - 1;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + kh as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let s = (sz as usize * h + sy as usize) * w;
                            add_shifted_row(&mut dxc[s..s + w], &src[(z * h + y) * w..(z * h + y + 1) * w], kw);
                        }
                    }
                }
            }
        }
    }
}

/// Number of z-planes per im2col slab, keeping the column buffer cache-sized.
fn slab_planes(dims: [usize; 3]) -> usize {
    (SLAB_VOXELS / (dims[1] * dims[2])).clamp(1, dims[0])
}

const SLAB_VOXELS: usize = 1024;

/// `out[K, V] (+)= w[K, C*27] * im2col(x)`, processed in z-slabs.
pub(crate) fn conv3_forward<T: Scalar>(x: &[T], channels: usize, dims: [usize; 3], w: &[T], k: usize, out: &mut [T], accumulate: bool) {
    let [d, h, wd] = dims;
    let v = d * h * wd;
    let ck = channels * 27;
    let planes = slab_planes(dims);
    let mut cols = vec![T::zero(); ck * planes * h * wd];
    let mut z0 = 0;
    while z0 < d {
        let z1 = (z0 + planes).min(d);
        let len = (z1 - z0) * h * wd;
        im2col_3(x, channels, dims, z0, z1, &mut cols);
        let off = z0 * h * wd;
        gemm_rows(k, ck, len, w, ck, &cols, len, &mut out[off..], v, accumulate);
        z0 = z1;
    }
}

/// `gw[K, C*27] += gout[K, V] * im2col(x)^T`, processed in z-slabs.
pub(crate) fn conv3_weight_grad<T: Scalar>(x: &[T], channels: usize, dims: [usize; 3], gout: &[T], k: usize, gw: &mut [T]) {
    let [d, h, wd] = dims;
    let v = d * h * wd;
    let ck = channels * 27;
    let planes = slab_planes(dims);
    let mut cols = vec![T::zero(); ck * planes * h * wd];
    let mut z0 = 0;
    while z0 < d {
        let z1 = (z0 + planes).min(d);
        let len = (z1 - z0) * h * wd;
        im2col_3(x, channels, dims, z0, z1, &mut cols);
        let off = z0 * h * wd;
        // SAFETY: gout rows hold `v` entries starting at `off`, `len` of them are read;
        // cols is read as a transposed [len, ck] view of its leading `ck * len` entries.
        unsafe {
            T::gemm(
                k,
                len,
                ck,
                T::one(),
                gout[off..].as_ptr(),
                v as isize,
                1,
                cols.as_ptr(),
                1,
                len as isize,
                T::one(),
                gw.as_mut_ptr(),
                ck as isize,
                1,
            )
        }
        z0 = z1;
    }
}

/// Weight of the input-gradient convolution: `w'[c, k, t] = w[k, c, 26 - t]`.
pub(crate) fn flip_conv3_weight<T: Scalar>(w: &[T], k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for ki in 0..k {
        for ci in 0..c {
            for t in 0..27 {
                out[(ci * k + ki) * 27 + t] = w[(ki * c + ci) * 27 + 26 - t];
            }
        }
    }
    out
}

/// `c[m, n] (+)= a[m, kk] * b[kk, n]` with row strides `lda`, `ldb`, `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm_rows<T: Scalar>(m: usize, kk: usize, n: usize, a: &[T], lda: usize, b: &[T], ldb: usize, c: &mut [T], ldc: usize, accumulate: bool) {
    assert!(a.len() >= (m - 1) * lda + kk && b.len() >= (kk - 1) * ldb + n && c.len() >= (m - 1) * ldc + n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above.
    unsafe {
        T::gemm(m, kk, n, T::one(), a.as_ptr(), lda as isize, 1, b.as_ptr(), ldb as isize, 1, beta, c.as_mut_ptr(), ldc as isize, 1)
    }
}

/// Output index along one axis for input index `i` and kernel tap `k`.
#[inline]
fn up_index(i: usize, k: usize, out_len: usize) -> Option<usize> {
    let o = 2 * i as isize - 1 + k as isize;
    (o >= 0 && o < out_len as isize).then_some(o as usize)
}

/// Scatter-add `[K*64, Din*Hin*Win]` columns into a `[K, 2Din, 2Hin, 2Win]` block.
pub(crate) fn deconv_scatter<T: Scalar>(cols: &[T], out_channels: usize, in_dims: [usize; 3], out: &mut [T]) {
    let [d, h, w] = in_dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let vin = d * h * w;
    let vout = od * oh * ow;
    for k in 0..out_channels {
        let outk = &mut out[k * vout..(k + 1) * vout];
        for kd in 0..4 {
            for kh in 0..4 {
                for kw in 0..4 {
                    let row = ((k * 4 + kd) * 4 + kh) * 4 + kw;
                    let src = &cols[row * vin..(row + 1) * vin];
                    for z in 0..d {
                        let Some(oz) = up_index(z, kd, od) else { continue };
                        for y in 0..h {
                            let Some(oy) = up_index(y, kh, oh) else { continue };
                            let srow = &src[(z * h + y) * w..(z * h + y + 1) * w];
                            let base = (oz * oh + oy) * ow;
                            for (x, &s) in srow.iter().enumerate() {
                                if let Some(ox) = up_index(x, kw, ow) {
                                    outk[base + ox] = outk[base + ox] + s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`deconv_scatter`]: gather a `[K, 2D, 2H, 2W]` block into columns.
pub(crate) fn deconv_gather<T: Scalar>(g: &[T], out_channels: usize, in_dims: [usize; 3], cols: &mut [T]) {
    let [d, h, w] = in_dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let vin = d * h * w;
    let vout = od * oh * ow;
    for k in 0..out_channels {
        let gk = &g[k * vout..(k + 1) * vout];
        for kd in 0..4 {
            for kh in 0..4 {
                for kw in 0..4 {
                    let row = ((k * 4 + kd) * 4 + kh) * 4 + kw;
                    let dst = &mut cols[row * vin..(row + 1) * vin];
                    for z in 0..d {
                        for y in 0..h {
                            let drow = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            let (Some(oz), Some(oy)) = (up_index(z, kd, od), up_index(y, kh, oh)) else {
                                drow.fill(T::zero());
                                continue;
                            };
                            let base = (oz * oh + oy) * ow;
                            for (x, dv) in drow.iter_mut().enumerate() {
                                *dv = match up_index(x, kw, ow) {
                                    Some(ox) => gk[base + ox],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c
        let dims = [3, 2, 4];
        let ch = 2;
        let v = 24;
        let x: Vec<f64> = (0..ch * v).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..ch * 27 * v).map(|i| ((i * 13) % 17) as f64 - 8.0).collect();
        let mut cols = vec![0.0; ch * 27 * v];
        im2col_3(&x, ch, dims, 0, dims[0], &mut cols);
        let mut back = vec![0.0; ch * v];
        col2im_3(&c, ch, dims, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn slabbed_conv_matches_single_pass() {
        let dims = [5, 40, 30];
        let (c, k) = (2, 3);
        let v = 6000;
        let x: Vec<f64> = (0..c * v).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..k * c * 27).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let mut cols = vec![0.0; c * 27 * v];
        im2col_3(&x, c, dims, 0, dims[0], &mut cols);
        let mut reference = vec![0.0; k * v];
        crate::autodiff::tensor::matmul(k, c * 27, v, &w, false, &cols, false, &mut reference, false);
        let mut out = vec![0.0; k * v];
        conv3_forward(&x, c, dims, &w, k, &mut out, false);
        assert_eq!(out, reference);
    }

    #[test]
    fn deconv_gather_is_adjoint_of_scatter() {
        let dims = [2, 3, 1];
        let k = 2;
        let vin = 6;
        let vout = 48;
        let c: Vec<f64> = (0..k * 64 * vin).map(|i| ((i * 5) % 9) as f64 - 4.0).collect();
        let g: Vec<f64> = (0..k * vout).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
        let mut out = vec![0.0; k * vout];
        deconv_scatter(&c, k, dims, &mut out);
        let mut cols = vec![0.0; k * 64 * vin];
        deconv_gather(&g, k, dims, &mut cols);
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = c.iter().zip(&cols).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
