//! Raster-order masked convolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::nn::Conv;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskType {
    /// Center tap excluded: output at `p` sees inputs strictly before `p`.
    A,
    /// Center tap included: output at `p` sees inputs up to and including `p`.
    B,
}

/// `k × k` mask: rows above the center, plus taps left of the center on its row
/// (and the center itself for type B).
pub fn kernel_mask(k: usize, kind: MaskType) -> Vec<f64> {
    let c = k / 2;
    let mut m = vec![0.0; k * k];
    for r in 0..k {
        for col in 0..k {
            let active = r < c || (r == c && col < c) || (r == c && col == c && kind == MaskType::B);
            if active {
                m[r * k + col] = 1.0;
            }
        }
    }
    m
}

/// A same-padded convolution whose kernel is multiplied by a fixed raster mask on every forward.
#[derive(Clone, Debug)]
pub struct MaskedConv {
    pub conv: Conv,
    pub kind: MaskType,
    mask: Tensor,
}

impl MaskedConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        kind: MaskType,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(kernel % 2 == 1, Config, "masked convolution needs an odd filter size, got {kernel}");
        let conv = Conv::same(store, name, in_ch, out_ch, kernel, rng)?;
        let plane = kernel_mask(kernel, kind);
        let data = (0..out_ch * in_ch).flat_map(|_| plane.iter().copied()).collect();
        let mask = Tensor::new(&[out_ch, in_ch, kernel, kernel], data)?;
        Ok(Self { conv, kind, mask })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.conv.weight);
        let masked = tape.mul_const(w, &self.mask)?;
        self.conv.forward_with_kernel(tape, store, x, masked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn type_a_3x3_has_four_taps() {
        let m = kernel_mask(3, MaskType::A);
        assert_eq!(m, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(kernel_mask(3, MaskType::B).iter().sum::<f64>(), 5.0);
    }

    #[test]
    fn even_filter_is_config_error() {
        let mut store = ParamStore::new();
        let r = MaskedConv::new(&mut store, "m", 1, 1, 4, MaskType::A, &mut seeded(0));
        assert!(matches!(r, Err(crate::error::Error::Config(_))));
    }

    #[test]
    fn type_b_sees_its_own_position() {
        let mut store = ParamStore::new();
        let mc = MaskedConv::new(&mut store, "m", 1, 1, 3, MaskType::B, &mut seeded(3)).unwrap();
        let run = |x: Tensor| {
            let mut tape = Tape::new_inference();
            let xv = tape.constant(x);
            let y = mc.forward(&mut tape, &store, xv).unwrap();
            tape.value(y).clone()
        };
        let base = run(Tensor::zeros(&[1, 1, 3, 3]));
        let mut x = Tensor::zeros(&[1, 1, 3, 3]);
        x.data_mut()[4] = 1.0;
        let moved = run(x);
        assert_ne!(base.data()[4], moved.data()[4]);
        // Earlier positions stay put.
        assert_eq!(&base.data()[..4], &moved.data()[..4]);
    }
}
