//! Strided convolution kernels.
//!
//! A forward convolution and a transposed convolution share one index relation
//! between a "small" grid and a "big" grid:
//!
//! ```text
//! big[y] <-> small[s] at kernel tap k   iff   y = s * stride + k - pad
//! ```
//!
//! A forward convolution reads the big grid (its input) into the small grid (its
//! output); a transposed convolution scatters the small grid (its input) into the
//! big grid. In both cases the kernel is laid out `[C_small, C_big, kh, kw]`, which
//! is the usual `[C_out, C_in, ..]` for convolutions and `[C_in, C_out, ..]` for
//! transposed convolutions. Taps that fall outside the big grid are skipped, which
//! implements zero padding for convolutions and cropping for transposed ones.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geom {
    pub c_small: usize,
    pub h_small: usize,
    pub w_small: usize,
    pub c_big: usize,
    pub h_big: usize,
    pub w_big: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Geom {
    pub fn small_len(&self) -> usize {
        self.c_small * self.h_small * self.w_small
    }

    pub fn big_len(&self) -> usize {
        self.c_big * self.h_big * self.w_big
    }

    #[cfg(test)]
    pub fn kernel_len(&self) -> usize {
        self.c_small * self.c_big * self.kh * self.kw
    }
}

/// Small-grid indices `s` for which `s * stride + tap - pad` lands in `0..big`.
fn valid_range(small: usize, big: usize, stride: usize, tap: usize, pad: usize) -> Range<usize> {
    // s * stride >= pad - tap
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    // s * stride + tap - pad < big
    let hi = if big + pad > tap {
        (big + pad - tap).div_ceil(stride).min(small)
    } else {
        0
    };
    lo..hi.max(lo)
}

impl Geom {
    /// Rows of the patch matrix: one per `(big channel, tap)` pair.
    fn patch_rows(&self) -> usize {
        self.c_big * self.kh * self.kw
    }

    /// Columns of the patch matrix: one per small-grid position.
    fn patch_cols(&self) -> usize {
        self.h_small * self.w_small
    }
}

/// Visits every in-bounds `(patch element, big element)` pair of one patch row.
#[inline]
fn for_each_patch_entry(g: &Geom, cb: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
    let ys = valid_range(g.h_small, g.h_big, g.sh, ky, g.ph);
    let xs = valid_range(g.w_small, g.w_big, g.sw, kx, g.pw);
    for sy in ys {
        let by = sy * g.sh + ky - g.ph;
        let b_row = (cb * g.h_big + by) * g.w_big;
        for sx in xs.clone() {
            let bx = sx * g.sw + kx - g.pw;
            f(sy * g.w_small + sx, b_row + bx);
        }
    }
}

/// Unfolds `big` into the `[C_big·kh·kw, H_small·W_small]` patch matrix;
/// out-of-range taps stay zero.
fn im2col(g: &Geom, big: &[f64]) -> Vec<f64> {
    let cols = g.patch_cols();
    let mut out = vec![0.0; g.patch_rows() * cols];
    for cb in 0..g.c_big {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut out[((cb * g.kh + ky) * g.kw + kx) * cols..][..cols];
                for_each_patch_entry(g, cb, ky, kx, |p, b| row[p] = big[b]);
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates patch entries back onto `big`.
fn col2im(g: &Geom, patches: &[f64], big: &mut [f64]) {
    let cols = g.patch_cols();
    for cb in 0..g.c_big {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &patches[((cb * g.kh + ky) * g.kw + kx) * cols..][..cols];
                for_each_patch_entry(g, cb, ky, kx, |p, b| big[b] += row[p]);
            }
        }
    }
}

/// Row-major matrix operand: data plus whether to read it transposed.
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl Mat<'_> {
    /// Logical shape and (row, column) strides after the optional transpose.
    fn layout(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `c += a · b` with `c` row-major.
fn gemm_acc(a: Mat<'_>, b: Mat<'_>, c: &mut [f64]) {
    let (m, k, rsa, csa) = a.layout();
    let (kb, n, rsb, csb) = b.layout();
    assert_eq!(k, kb, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the assertions above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn kernel_mat<'a>(g: &Geom, kernel: &'a [f64], transposed: bool) -> Mat<'a> {
    Mat {
        data: kernel,
        rows: g.c_small,
        cols: g.patch_rows(),
        transposed,
    }
}

/// `small += conv(big, kernel)`: forward convolution / transposed-conv input gradient.
pub(crate) fn gather(g: &Geom, big: &[f64], kernel: &[f64], small: &mut [f64]) {
    let patches = im2col(g, big);
    let p = Mat {
        data: &patches,
        rows: g.patch_rows(),
        cols: g.patch_cols(),
        transposed: false,
    };
    gemm_acc(kernel_mat(g, kernel, false), p, small);
}

/// `big += conv_transpose(small, kernel)`: transposed convolution / conv input gradient.
pub(crate) fn scatter(g: &Geom, small: &[f64], kernel: &[f64], big: &mut [f64]) {
    let mut patches = vec![0.0; g.patch_rows() * g.patch_cols()];
    let s = Mat {
        data: small,
        rows: g.c_small,
        cols: g.patch_cols(),
        transposed: false,
    };
    gemm_acc(kernel_mat(g, kernel, true), s, &mut patches);
    col2im(g, &patches, big);
}

/// `kernel_grad += correlate(small, big)`: the kernel gradient of both directions.
pub(crate) fn kernel_grad(g: &Geom, small: &[f64], big: &[f64], kernel_grad: &mut [f64]) {
    let patches = im2col(g, big);
    let s = Mat {
        data: small,
        rows: g.c_small,
        cols: g.patch_cols(),
        transposed: false,
    };
    let p = Mat {
        data: &patches,
        rows: g.patch_rows(),
        cols: g.patch_cols(),
        transposed: true,
    };
    gemm_acc(s, p, kernel_grad);
}

/// Output size of a forward convolution along one axis, if the kernel fits.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Uncropped output size of a transposed convolution along one axis.
pub fn conv_transpose_base_len(input: usize, kernel: usize, stride: usize) -> usize {
    (input - 1) * stride + kernel
}
