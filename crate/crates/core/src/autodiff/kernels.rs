//! Raw numeric kernels on row-major slices. No tape involvement.

use crate::parallel;

/// Geometry of a 2-D convolution over one `C×H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically `m×k` and `b` logically `k×n`.
/// `trans_a`/`trans_b` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe the stated logical shapes.
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

/// Unfolds one image into a `(C·k·k) × (OH·OW)` column matrix.
pub fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
pub fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution: `input` is `B×C×H×W`, `kernel` is `O×C×k×k`, returns `B×O×OH×OW`.
pub fn conv2d_forward(input: &[f64], batch: usize, g: &ConvGeom, kernel: &[f64], out_ch: usize) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_ch * g.col_cols();
    let mut out = vec![0.0; batch * out_len];
    parallel::for_each_chunk(&mut out, out_len, |b, dst| {
        let x = &input[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            gemm(out_ch, g.channels, g.col_cols(), kernel, false, x, false, dst, false);
        } else {
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            im2col(x, g, &mut cols);
            gemm(out_ch, g.col_rows(), g.col_cols(), kernel, false, &cols, false, dst, false);
        }
    });
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub fn conv2d_backward_input(grad_out: &[f64], batch: usize, g: &ConvGeom, kernel: &[f64], out_ch: usize) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_ch * g.col_cols();
    let mut dx = vec![0.0; batch * in_len];
    parallel::for_each_chunk(&mut dx, in_len, |b, dst| {
        let dy = &grad_out[b * out_len..(b + 1) * out_len];
        if g.is_pointwise() {
            gemm(g.channels, out_ch, g.col_cols(), kernel, true, dy, false, dst, false);
        } else {
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            gemm(g.col_rows(), out_ch, g.col_cols(), kernel, true, dy, false, &mut cols, false);
            col2im(&cols, g, dst);
        }
    });
    dx
}

/// Gradient of [`conv2d_forward`] with respect to its kernel. Per-image partials are
/// reduced in batch order.
pub fn conv2d_backward_kernel(grad_out: &[f64], input: &[f64], batch: usize, g: &ConvGeom, out_ch: usize) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_ch * g.col_cols();
    let klen = out_ch * g.col_rows();
    let partials = parallel::map_range(batch, |b| {
        let x = &input[b * in_len..(b + 1) * in_len];
        let dy = &grad_out[b * out_len..(b + 1) * out_len];
        let mut dw = vec![0.0; klen];
        if g.is_pointwise() {
            gemm(out_ch, g.col_cols(), g.channels, dy, false, x, true, &mut dw, false);
        } else {
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            im2col(x, g, &mut cols);
            gemm(out_ch, g.col_cols(), g.col_rows(), dy, false, &cols, true, &mut dw, false);
        }
        dw
    });
    sum_in_order(partials, klen)
}

/// Transposed convolution. `g` describes the *adjoint* convolution, i.e. one whose input
/// is the `O×OH×OW` output here and whose output is the `C×H×W` input here.
/// `kernel` is `C×O×k×k`.
pub fn conv_transpose2d_forward(input: &[f64], batch: usize, g: &ConvGeom, kernel: &[f64], in_ch: usize) -> Vec<f64> {
    // `in_ch` channels at resolution out_height × out_width of the adjoint geometry.
    let in_len = in_ch * g.col_cols();
    let out_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * out_len];
    parallel::for_each_chunk(&mut out, out_len, |b, dst| {
        let x = &input[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.channels, in_ch, g.col_cols(), kernel, true, x, false, dst, false);
        } else {
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            gemm(g.col_rows(), in_ch, g.col_cols(), kernel, true, x, false, &mut cols, false);
            col2im(&cols, g, dst);
        }
    });
    out
}

pub(crate) fn sum_in_order(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Row-wise numerically stable softmax over the trailing axis of length `k`.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, padding: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
