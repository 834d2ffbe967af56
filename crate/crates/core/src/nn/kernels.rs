//! Low-level numeric kernels: strided GEMM and im2col/col2im for 2-D
//! convolutions in NCHW layout.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized m*k, k*n and m*n (checked above in debug builds,
    // and guaranteed by every caller in this crate); strides describe exactly
    // those row-major or transposed layouts.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry shared by a convolution and its transpose: `big` is the image the
/// kernel slides over, `small` is the strided output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.small_h * self.small_w
    }
}

/// Output extent of a strided convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn deconv_out(size: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    ((size - 1) * stride + kernel + out_pad).checked_sub(2 * pad)
}

/// Unfolds `img` (`channels x big_h x big_w`) into `col`
/// (`channels*k*k x small_h*small_w`).
pub fn im2col(img: &[f32], g: &ConvGeometry, col: &mut [f32]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.big_h * g.big_w..(c + 1) * g.big_h * g.big_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.small_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.small_w..(oy + 1) * g.small_w];
                    if iy < 0 || iy >= g.big_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.big_w..(iy as usize + 1) * g.big_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.big_w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters and accumulates `col` into `img`.
pub fn col2im(col: &[f32], g: &ConvGeometry, img: &mut [f32]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.big_h * g.big_w..(c + 1) * g.big_h * g.big_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.small_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.big_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.big_w..(iy as usize + 1) * g.big_w];
                    for ox in 0..g.small_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.big_w {
                            dst[ix as usize] += src[oy * g.small_w + ox];
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
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let at = |i: usize, j: usize, t: bool| if t { a[j * m + i] } else { a[i * k + j] };
        let bt = |i: usize, j: usize, t: bool| if t { b[j * k + i] } else { b[i * n + j] };
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, 1.0, &mut c);
                for i in 0..m {
                    for j in 0..n {
                        let want: f32 = 1.0 + (0..k).map(|p| at(i, p, ta) * bt(p, j, tb)).sum::<f32>();
                        assert!((c[i * n + j] - want).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry { channels: 2, big_h: 6, big_w: 5, small_h: 3, small_w: 3, kernel: 3, stride: 2, pad: 1 };
        let img: Vec<f32> = (0..2 * 30).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let col_probe: Vec<f32> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 3) % 5) as f32).collect();
        let mut col = vec![0.0; col_probe.len()];
        im2col(&img, &g, &mut col);
        let lhs: f64 = col.iter().zip(&col_probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; img.len()];
        col2im(&col_probe, &g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn output_extents() {
        assert_eq!(conv_out(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out(84, 3, 2, 1), Some(42));
        assert_eq!(deconv_out(16, 3, 2, 1, 1), Some(32));
        assert_eq!(deconv_out(4, 3, 2, 1, 1), Some(8));
    }
}
