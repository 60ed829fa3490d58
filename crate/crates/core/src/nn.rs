//! Layer building blocks shared by the codec, the priors and the classifier.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Convolution with bias. `transpose` selects a transposed convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub transpose: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_he(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], None, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[out_ch])?;
        Ok(Self { weight, bias, stride, padding, transpose: false })
    }

    /// Transposed convolution with kernel `[in_ch, out_ch, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new_transpose<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // Each output receives roughly in_ch·k²/stride² contributions.
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        let weight = store.add_he(format!("{name}.weight"), &[in_ch, out_ch, kernel, kernel], Some(fan_in), rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[out_ch])?;
        Ok(Self { weight, bias, stride, padding, transpose: true })
    }

    /// Same-size convolution with odd kernel.
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, kernel, 1, kernel / 2, rng)
    }

    /// Stride-2 4×4 downsampling conv (halves H and W).
    pub fn down2<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 4, 2, 1, rng)
    }

    /// Stride-2 transposed conv (doubles H and W) with kernel `k` (even, ≥ 2).
    pub fn up2<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new_transpose(store, name, in_ch, out_ch, kernel, 2, (kernel - 2) / 2, rng)
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        self.forward_with_kernel(tape, store, x, w)
    }

    /// Applies the layer with an externally supplied kernel var (e.g. a masked kernel).
    pub fn forward_with_kernel(&self, tape: &mut Tape, store: &ParamStore, x: Var, w: Var) -> Result<Var> {
        let b = tape.param(store, self.bias);
        let y = if self.transpose {
            tape.conv_transpose2d(x, w, self.stride, self.padding)?
        } else {
            tape.conv2d(x, w, self.stride, self.padding)?
        };
        tape.add_channel_bias(y, b)
    }
}

/// `x + conv1×1(relu(conv3×3(relu(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv3: Conv,
    pub conv1: Conv,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv3: Conv::same(store, &format!("{name}.conv3"), channels, hidden, 3, rng)?,
            conv1: Conv::same(store, &format!("{name}.conv1"), hidden, channels, 1, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = tape.relu(x)?;
        let h = self.conv3.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = self.conv1.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Residual stack followed by a final ReLU.
#[derive(Clone, Debug)]
pub struct ResStack {
    pub blocks: Vec<ResBlock>,
}

impl ResStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..count)
            .map(|i| ResBlock::new(store, &format!("{name}.{i}"), channels, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, store, x)?;
        }
        tape.relu(x)
    }
}

/// Inverted-dropout keep mask: entries are `0` or `1 / (1 − rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 - rate;
    let mut m = Tensor::zeros(shape);
    for v in m.data_mut() {
        *v = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    m
}

/// Number of stride-2 stages needed for an integer power-of-two factor.
pub fn log2_factor(factor: usize) -> Option<usize> {
    (factor >= 2 && factor.is_power_of_two()).then(|| factor.trailing_zeros() as usize)
}
