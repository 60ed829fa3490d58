//! Causal multi-head self-attention over a raster-ordered grid.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::nn::{dropout_mask, Conv};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CausalAttention {
    pub heads: usize,
    pub channels: usize,
    /// Learned additive position embedding `[C, H, W]`.
    pub position: ParamId,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub output: Conv,
}

impl CausalAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            heads >= 1 && channels.is_multiple_of(heads),
            Config,
            "attention width {channels} not divisible by {heads} heads"
        );
        let position = store.add(format!("{name}.position"), Tensor::randn(&[channels, height, width], 0.02, rng))?;
        Ok(Self {
            heads,
            channels,
            position,
            query: Conv::same(store, &format!("{name}.query"), channels, channels, 1, rng)?,
            key: Conv::same(store, &format!("{name}.key"), channels, channels, 1, rng)?,
            value: Conv::same(store, &format!("{name}.value"), channels, channels, 1, rng)?,
            output: Conv::same(store, &format!("{name}.output"), channels, channels, 1, rng)?,
        })
    }

    fn projections(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var, Var)> {
        let s = tape.shape(x).to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.channels,
            Dimension,
            "attention expects [B, {}, H, W], got {s:?}",
            self.channels
        );
        let pos = tape.param(store, self.position);
        let h = tape.add_batch_broadcast(x, pos)?;
        // [B, C, H, W] is laid out as [B, heads, C/heads, HW]: a pure reshape groups heads.
        let grouped = [s[0] * self.heads, self.channels / self.heads, s[2] * s[3]];
        let q = self.query.forward(tape, store, h)?;
        let q = tape.reshape(q, &grouped)?;
        let k = self.key.forward(tape, store, h)?;
        let k = tape.reshape(k, &grouped)?;
        let v = self.value.forward(tape, store, h)?;
        let v = tape.reshape(v, &grouped)?;
        Ok((q, k, v))
    }

    fn scores(&self, tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
        let dh = (self.channels / self.heads) as f64;
        let s = tape.bmm(q, k, true, false)?;
        tape.scale(s, 1.0 / dh.sqrt())
    }

    /// Attention matrices `[B·heads, HW, HW]` (eval mode, no logit dropout).
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (q, k, _) = self.projections(tape, store, x)?;
        let s = self.scores(tape, q, k)?;
        tape.causal_softmax(s)
    }

    /// `x + W_o · attend(x)`. With `dropout = Some((rate, rng))` the logits are dropped out.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (q, k, v) = self.projections(tape, store, x)?;
        let mut logits = self.scores(tape, q, k)?;
        if let Some((rate, rng)) = dropout {
            if rate > 0.0 {
                let mask = dropout_mask(tape.shape(logits), rate, rng);
                logits = tape.mul_const(logits, &mask)?;
            }
        }
        let attn = tape.causal_softmax(logits)?;
        // out[d, i] = Σ_j v[d, j] · attn[i, j]
        let out = tape.bmm(v, attn, false, true)?;
        let out = tape.reshape(out, &s)?;
        let out = self.output.forward(tape, store, out)?;
        tape.add(x, out)
    }
}
