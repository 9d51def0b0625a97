//! Raw numeric kernels behind the graph ops. Slices in, slices out.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where `op`
/// optionally transposes. `a` is `m x k` after `op`, `b` is `k x n`.
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the `m*k`, `k*n` and `m*n`
    // element buffers checked by the debug assertions.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C x H x W` image into a `(C*kh*kw) x (out_h*out_w)` matrix.
pub(crate) fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds column entries back into an image.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `input` is `N x C x H x W`, `kernel` is `O x C x kh x kw`.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    input: &[f64],
    kernel: &[f64],
) -> Vec<f64> {
    let k = g.cols_rows();
    let p = g.out_len();
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; batch * out_channels * p];
    for n in 0..batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(
            out_channels,
            k,
            p,
            kernel,
            false,
            &cols,
            false,
            0.0,
            &mut out[n * out_channels * p..(n + 1) * out_channels * p],
        );
    }
    out
}

/// Batched convolution backward. Returns `(d_input, d_kernel)`, each only
/// when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let k = g.cols_rows();
    let p = g.out_len();
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![0.0; k * p];
    let mut d_input = want_input.then(|| vec![0.0; batch * in_len]);
    let mut d_kernel = want_kernel.then(|| vec![0.0; out_channels * k]);
    for n in 0..batch {
        let dy = &d_out[n * out_channels * p..(n + 1) * out_channels * p];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(out_channels, p, k, dy, false, &cols, true, 1.0, dk);
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(k, out_channels, p, kernel, true, dy, false, 0.0, &mut cols);
            col2im_add(g, &cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (d_input, d_kernel)
}
