//! Raw numeric kernels shared by forward and backward passes.

/// `C = A·B + beta·C` where `A` is `m×k` and `B` is `k×n`, all row-major.
/// `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the logical extents above
    // and the strides address exactly those extents.
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

/// Geometry of a 2-D convolution over `[N, C, H, W]` input with
/// replicate (edge) padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn src(&self, out: usize, k: usize, extent: usize) -> usize {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        pos.clamp(0, extent as isize - 1) as usize
    }
}

/// Unfolds the input into a `[C·kh·kw, N·Ho·Wo]` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let ncols = g.cols();
    let mut cols = vec![0.0; g.k() * ncols];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = g.src(oy, ky, g.h);
                        let base = n * p + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = g.src(ox, kx, g.w);
                            row[base + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.ho * g.wo;
    let ncols = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &dcols[r * ncols..(r + 1) * ncols];
                for n in 0..g.n {
                    let off = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = g.src(oy, ky, g.h);
                        let base = n * p + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = g.src(ox, kx, g.w);
                            dx[off + iy * g.w + ix] += row[base + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bin `[start, end)` of output cell `i` when adaptively pooling `extent` to `out`.
pub(crate) fn adaptive_bin(i: usize, extent: usize, out: usize) -> (usize, usize) {
    let start = (i * extent) / out;
    let end = ((i + 1) * extent).div_ceil(out);
    (start, end)
}
