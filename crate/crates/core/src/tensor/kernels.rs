//! Numeric kernels shared by the tape operations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is (m, k) and `b` is (k, n) after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one (c, h, w) image into a (c*k*k, h*w) patch matrix for a
/// stride-1 convolution with zero "same" padding.
pub(crate) fn im2col(src: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into an image.
pub(crate) fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dst: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            prow[sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn square(op: &'static str, n: usize, values: &[f64]) -> Result<DMatrix<f64>> {
    if n * n != values.len() {
        return Err(Error::shape(op, &[n, n], &[values.len()]));
    }
    Ok(DMatrix::from_row_slice(n, n, values))
}

/// `log|det A|` of a row-major n×n matrix. Errors when `|det A| <= 1e-12`.
pub fn logabsdet(n: usize, values: &[f64]) -> Result<f64> {
    let det = square("logabsdet", n, values)?.lu().determinant();
    if !(det.abs() > 1e-12) {
        return Err(Error::NotInvertible(format!("|det W| = {:e}", det.abs())));
    }
    Ok(det.abs().ln())
}

/// Row-major inverse of a row-major n×n matrix.
pub fn matrix_inverse(n: usize, values: &[f64]) -> Result<Vec<f64>> {
    let m = square("matrix_inverse", n, values)?;
    let det = m.clone().lu().determinant();
    if !(det.abs() > 1e-12) {
        return Err(Error::NotInvertible(format!("|det W| = {:e}", det.abs())));
    }
    let inv = m
        .try_inverse()
        .ok_or_else(|| Error::NotInvertible(format!("|det W| = {:e}", det.abs())))?;
    // nalgebra is column-major; transpose to read rows.
    Ok(inv.transpose().as_slice().to_vec())
}
