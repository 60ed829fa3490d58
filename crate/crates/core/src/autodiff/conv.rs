use super::kernels::{self, ConvGeom};
use super::{Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

impl Tape {
    /// 2-D cross-correlation. `x` is `[B, C, H, W]`, `kernel` is `[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        ensure!(xs.len() == 4 && ks.len() == 4, Dimension, "conv2d: input {xs:?}, kernel {ks:?}");
        ensure!(ks[1] == xs[1], Dimension, "conv2d: input has {} channels, kernel expects {}", xs[1], ks[1]);
        ensure!(ks[2] == ks[3], Dimension, "conv2d: kernel must be square, got {ks:?}");
        ensure!(stride >= 1, Config, "conv2d: stride must be ≥ 1");
        let k = ks[2];
        ensure!(
            k <= xs[2] + 2 * padding && k <= xs[3] + 2 * padding,
            Dimension,
            "conv2d: kernel {k} larger than padded input {xs:?} (padding {padding})"
        );
        let g = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kernel: k, stride, padding };
        let (batch, out_ch) = (xs[0], ks[0]);
        let out = kernels::conv2d_forward(self.value(x).data(), batch, &g, self.value(kernel).data(), out_ch);
        let value = Tensor::new(&[batch, out_ch, g.out_height(), g.out_width()], out)?;
        self.push(
            "conv2d",
            value,
            vec![x, kernel],
            Box::new(move |ctx| {
                let (xv, kv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs[0].then(|| kernels::conv2d_backward_input(ctx.grad, batch, &g, kv, out_ch)),
                    ctx.needs[1].then(|| kernels::conv2d_backward_kernel(ctx.grad, xv, batch, &g, out_ch)),
                ]
            }),
        )
    }

    /// Transposed convolution (the input-adjoint of [`Tape::conv2d`]). `x` is `[B, C, H, W]`,
    /// `kernel` is `[C, O, k, k]`; output extent is `(H − 1)·stride − 2·padding + k`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        ensure!(xs.len() == 4 && ks.len() == 4, Dimension, "conv_transpose2d: input {xs:?}, kernel {ks:?}");
        ensure!(
            ks[0] == xs[1],
            Dimension,
            "conv_transpose2d: input has {} channels, kernel expects {}",
            xs[1],
            ks[0]
        );
        ensure!(ks[2] == ks[3], Dimension, "conv_transpose2d: kernel must be square, got {ks:?}");
        ensure!(stride >= 1, Config, "conv_transpose2d: stride must be ≥ 1");
        let k = ks[2];
        let oh = ((xs[2] - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let ow = ((xs[3] - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(crate::error::Error::Dimension(format!(
                "conv_transpose2d: padding {padding} too large for input {xs:?} and kernel {k}"
            )));
        };
        // The adjoint convolution maps [O, oh, ow] to [C, H, W].
        let g = ConvGeom { channels: ks[1], height: oh, width: ow, kernel: k, stride, padding };
        ensure!(
            g.out_height() == xs[2] && g.out_width() == xs[3],
            Dimension,
            "conv_transpose2d: inconsistent geometry for input {xs:?}"
        );
        let (batch, in_ch, out_ch) = (xs[0], xs[1], ks[1]);
        let out = kernels::conv_transpose2d_forward(self.value(x).data(), batch, &g, self.value(kernel).data(), in_ch);
        let value = Tensor::new(&[batch, out_ch, oh, ow], out)?;
        self.push(
            "conv_transpose2d",
            value,
            vec![x, kernel],
            Box::new(move |ctx| {
                let (xv, kv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                // dx is a plain convolution of the upstream gradient; dK mirrors conv2d's kernel grad
                // with the roles of input and gradient swapped.
                vec![
                    ctx.needs[0].then(|| kernels::conv2d_forward(ctx.grad, batch, &g, kv, in_ch)),
                    ctx.needs[1].then(|| kernels::conv2d_backward_kernel(xv, ctx.grad, batch, &g, in_ch)),
                ]
            }),
        )
    }
}
