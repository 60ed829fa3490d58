//! Stage 2: autoregressive priors over code grids.
//!
//! A prior embeds the code grid, applies one type-A masked convolution and a stack of gated
//! residual blocks built from type-B masked convolutions, optionally interleaved with causal
//! self-attention, then a 1×1 residual output stack and a final projection to `K` logits per
//! position. Lower-level priors additionally receive features from an unmasked conditioning
//! stack over the codes of the level above; class-conditional priors receive a learned class
//! bias in every gated block.

mod attention;
mod masked;
mod sample;

use serde::{Deserialize, Serialize};

pub use attention::CausalAttention;
pub use masked::{kernel_mask, MaskType, MaskedConv};
pub use sample::sample_categorical;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{dropout_mask, log2_factor, Conv, ResBlock};
use crate::params::{Adam, ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::vq::CodeGrid;

/// Shape and vocabulary of the conditioning level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionGrid {
    pub height: usize,
    pub width: usize,
    pub num_codes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub height: usize,
    pub width: usize,
    pub num_codes: usize,
    pub hidden_units: usize,
    /// Width of the 1×1 residual layers in the output and conditioning stacks.
    pub residual_units: usize,
    /// Number of gated residual blocks.
    pub layers: usize,
    #[serde(default)]
    pub attention_layers: usize,
    #[serde(default = "default_attention_period")]
    pub attention_period: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    #[serde(default = "default_filter")]
    pub filter_size: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub attention_dropout: f64,
    #[serde(default)]
    pub output_stack_layers: usize,
    #[serde(default)]
    pub conditioning_blocks: usize,
    /// 0 means unconditional.
    #[serde(default)]
    pub num_classes: usize,
    /// Present for every level below the top.
    #[serde(default)]
    pub condition: Option<ConditionGrid>,
}

fn default_attention_period() -> usize {
    5
}
fn default_heads() -> usize {
    4
}
fn default_filter() -> usize {
    5
}

impl PriorConfig {
    /// 4×4 top prior: 6 gated blocks with attention after every third, 4 heads, width 64.
    pub fn desk_top() -> Self {
        Self {
            height: 4,
            width: 4,
            num_codes: 64,
            hidden_units: 64,
            residual_units: 64,
            layers: 6,
            attention_layers: 2,
            attention_period: 3,
            attention_heads: 4,
            filter_size: 5,
            dropout: 0.1,
            attention_dropout: 0.1,
            output_stack_layers: 2,
            conditioning_blocks: 0,
            num_classes: 0,
            condition: None,
        }
    }

    /// 8×8 bottom prior conditioned on the 4×4 top grid; no attention.
    pub fn desk_bottom() -> Self {
        Self {
            height: 8,
            width: 8,
            attention_layers: 0,
            output_stack_layers: 0,
            conditioning_blocks: 2,
            condition: Some(ConditionGrid { height: 4, width: 4, num_codes: 64 }),
            ..Self::desk_top()
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Blocks after which an attention layer follows.
    pub fn attention_after(&self) -> Vec<usize> {
        if self.attention_layers == 0 {
            return Vec::new();
        }
        (0..self.layers).filter(|i| (i + 1) % self.attention_period == 0).take(self.attention_layers).collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.height >= 1 && self.width >= 1, Config, "prior grid must be non-empty");
        ensure!(self.num_codes >= 1, Config, "prior vocabulary must be non-empty");
        ensure!(self.hidden_units >= 1 && self.residual_units >= 1, Config, "prior widths must be ≥ 1");
        ensure!(self.filter_size % 2 == 1, Config, "prior filter size must be odd, got {}", self.filter_size);
        ensure!((0.0..1.0).contains(&self.dropout), Config, "dropout must lie in [0, 1), got {}", self.dropout);
        ensure!(
            (0.0..1.0).contains(&self.attention_dropout),
            Config,
            "attention dropout must lie in [0, 1), got {}",
            self.attention_dropout
        );
        ensure!(
            self.attention_layers <= self.layers,
            Config,
            "{} attention layers exceed {} layers",
            self.attention_layers,
            self.layers
        );
        if self.attention_layers > 0 {
            ensure!(self.attention_period >= 1, Config, "attention period must be ≥ 1");
            ensure!(
                self.attention_after().len() == self.attention_layers,
                Config,
                "{} attention layers do not fit {} layers with period {}",
                self.attention_layers,
                self.layers,
                self.attention_period
            );
            ensure!(
                self.attention_heads >= 1 && self.hidden_units.is_multiple_of(self.attention_heads),
                Config,
                "hidden width {} not divisible by {} attention heads",
                self.hidden_units,
                self.attention_heads
            );
        }
        if let Some(c) = self.condition {
            ensure!(c.num_codes >= 1, Config, "conditioning vocabulary must be non-empty");
            ensure!(
                self.height.is_multiple_of(c.height) && self.width.is_multiple_of(c.width),
                Config,
                "conditioning grid {}×{} does not divide {}×{}",
                c.height,
                c.width,
                self.height,
                self.width
            );
            let (fh, fw) = (self.height / c.height, self.width / c.width);
            ensure!(
                fh == fw && (fh == 1 || log2_factor(fh).is_some()),
                Config,
                "conditioning upsampling factor {fh}×{fw} must be a square power of two"
            );
        } else {
            ensure!(self.conditioning_blocks == 0, Config, "conditioning blocks configured without a conditioning grid");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct GatedBlock {
    conv: MaskedConv,
    cond: Option<Conv>,
    class_embed: Option<ParamId>,
}

/// `x + conv1×1(relu(conv1×1(relu(x))))`.
#[derive(Clone, Debug)]
struct PointwiseBlock {
    inner: Conv,
    outer: Conv,
}

#[derive(Clone, Debug)]
struct ConditioningStack {
    embed: ParamId,
    ups: Vec<Conv>,
    blocks: Vec<ResBlock>,
}

/// How the conditioning level is supplied to a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Condition<'a> {
    None,
    Codes(&'a [CodeGrid]),
    /// Precomputed conditioning-stack output `[B, hidden, H, W]`.
    Features(&'a Tensor),
}

#[derive(Clone, Debug)]
pub struct PriorNetwork {
    pub config: PriorConfig,
    pub params: ParamStore,
    embed: ParamId,
    input: MaskedConv,
    blocks: Vec<GatedBlock>,
    attention: Vec<Option<CausalAttention>>,
    output_stack: Vec<PointwiseBlock>,
    output: Conv,
    conditioning: Option<ConditioningStack>,
}

impl PriorNetwork {
    /// Builds a prior whose final projection is zero, so every position starts uniform.
    pub fn new(config: PriorConfig, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (h, r, k) = (config.hidden_units, config.residual_units, config.filter_size);
        let embed = store.add("embed", Tensor::randn(&[config.num_codes, h], 1.0, rng))?;
        let input = MaskedConv::new(&mut store, "input", h, h, k, MaskType::A, rng)?;
        let attend_after = config.attention_after();
        let mut blocks = Vec::with_capacity(config.layers);
        let mut attention = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let conv = MaskedConv::new(&mut store, &format!("block{i}.conv"), h, 2 * h, k, MaskType::B, rng)?;
            let cond = match config.condition {
                Some(_) => Some(Conv::same(&mut store, &format!("block{i}.cond"), h, 2 * h, 1, rng)?),
                None => None,
            };
            let class_embed = if config.num_classes > 0 {
                Some(store.add(format!("block{i}.class"), Tensor::randn(&[config.num_classes, 2 * h], 0.1, rng))?)
            } else {
                None
            };
            blocks.push(GatedBlock { conv, cond, class_embed });
            attention.push(if attend_after.contains(&i) {
                Some(CausalAttention::new(
                    &mut store,
                    &format!("attn{i}"),
                    h,
                    config.attention_heads,
                    config.height,
                    config.width,
                    rng,
                )?)
            } else {
                None
            });
        }
        let output_stack = (0..config.output_stack_layers)
            .map(|i| {
                Ok(PointwiseBlock {
                    inner: Conv::same(&mut store, &format!("out{i}.inner"), h, r, 1, rng)?,
                    outer: Conv::same(&mut store, &format!("out{i}.outer"), r, h, 1, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output = Conv::same(&mut store, "output", h, config.num_codes, 1, rng)?;
        output.zero_init(&mut store);
        let conditioning = match config.condition {
            Some(c) => {
                let embed = store.add("cond.embed", Tensor::randn(&[c.num_codes, h], 1.0, rng))?;
                let steps = log2_factor(config.height / c.height).unwrap_or(0);
                let ups = (0..steps)
                    .map(|s| Conv::up2(&mut store, &format!("cond.up{s}"), h, h, 4, rng))
                    .collect::<Result<Vec<_>>>()?;
                let blocks = (0..config.conditioning_blocks)
                    .map(|i| ResBlock::new(&mut store, &format!("cond.res{i}"), h, r, rng))
                    .collect::<Result<Vec<_>>>()?;
                Some(ConditioningStack { embed, ups, blocks })
            }
            None => None,
        };
        Ok(Self { config, params: store, embed, input, blocks, attention, output_stack, output, conditioning })
    }

    /// Replaces the zero output projection with random weights (used to probe causality).
    pub fn randomize_output(&mut self, rng: &mut Rng64) {
        let w = self.params.get_mut(self.output.weight);
        let std = (2.0 / self.config.hidden_units as f64).sqrt();
        *w = Tensor::randn(w.shape(), std, rng);
    }

    fn check_grids(&self, grids: &[CodeGrid], h: usize, w: usize, k: usize, what: &str) -> Result<Vec<usize>> {
        ensure!(!grids.is_empty(), Contract, "empty batch of {what} codes");
        let mut flat = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            ensure!(
                g.height == h && g.width == w,
                Dimension,
                "{what} grid is {}×{}, prior expects {h}×{w}",
                g.height,
                g.width
            );
            if let Some(&bad) = g.indices.iter().find(|&&i| i >= k) {
                return Err(Error::Index(format!("{what} code {bad} out of range for vocabulary {k}")));
            }
            flat.extend_from_slice(&g.indices);
        }
        Ok(flat)
    }

    fn check_labels(&self, labels: Option<&[usize]>, batch: usize) -> Result<()> {
        if self.config.num_classes == 0 {
            return Ok(());
        }
        let labels = labels.ok_or_else(|| Error::Contract("class-conditional prior needs labels".into()))?;
        ensure!(labels.len() == batch, Dimension, "{} labels for batch of {batch}", labels.len());
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Index(format!("class {bad} out of range for {} classes", self.config.num_classes)));
        }
        Ok(())
    }

    /// Conditioning-stack output for a batch of higher-level grids.
    pub fn condition_features_with(&self, tape: &mut Tape, store: &ParamStore, above: &[CodeGrid]) -> Result<Var> {
        let (Some(stack), Some(c)) = (&self.conditioning, self.config.condition) else {
            return Err(Error::Contract("prior has no conditioning stack".into()));
        };
        let flat = self.check_grids(above, c.height, c.width, c.num_codes, "conditioning")?;
        let table = tape.param(store, stack.embed);
        let mut x = tape.gather_rows(table, &flat, above.len(), c.height, c.width)?;
        for (i, up) in stack.ups.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x)?;
            }
            x = up.forward(tape, store, x)?;
        }
        for b in &stack.blocks {
            x = b.forward(tape, store, x)?;
        }
        Ok(x)
    }

    /// Evaluates the conditioning stack once, for reuse across sampling steps.
    pub fn condition_features(&self, above: &[CodeGrid]) -> Result<Tensor> {
        let mut tape = Tape::new_inference();
        let v = self.condition_features_with(&mut tape, &self.params, above)?;
        Ok(tape.value(v).clone())
    }

    /// Teacher-forced logits `[B, H, W, K]` with parameters from `store`. Passing `rng`
    /// selects training mode (dropout active).
    pub fn logits_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        codes: &[CodeGrid],
        labels: Option<&[usize]>,
        condition: Condition<'_>,
        mut rng: Option<&mut Rng64>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let flat = self.check_grids(codes, cfg.height, cfg.width, cfg.num_codes, "input")?;
        let b = codes.len();
        self.check_labels(labels, b)?;
        let cond = match (cfg.condition, condition) {
            (None, _) => None,
            (Some(_), Condition::Codes(above)) => {
                ensure!(above.len() == b, Dimension, "{} conditioning grids for batch of {b}", above.len());
                Some(self.condition_features_with(tape, store, above)?)
            }
            (Some(_), Condition::Features(f)) => {
                ensure!(
                    f.shape() == [b, cfg.hidden_units, cfg.height, cfg.width],
                    Dimension,
                    "conditioning features {:?} do not match the prior",
                    f.shape()
                );
                Some(tape.constant(f.clone()))
            }
            (Some(_), Condition::None) => {
                return Err(Error::Contract("this prior is conditioned on the level above".into()));
            }
        };

        let table = tape.param(store, self.embed);
        let x = tape.gather_rows(table, &flat, b, cfg.height, cfg.width)?;
        let mut x = self.input.forward(tape, store, x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = self.gated(tape, store, block, x, cond, labels)?;
            if let Some(r) = rng.as_deref_mut() {
                if cfg.dropout > 0.0 {
                    let mask = dropout_mask(tape.shape(x), cfg.dropout, r);
                    x = tape.mul_const(x, &mask)?;
                }
            }
            if let Some(att) = &self.attention[i] {
                let dropout = rng.as_deref_mut().map(|r| (cfg.attention_dropout, r));
                x = att.forward(tape, store, x, dropout)?;
            }
        }
        for pb in &self.output_stack {
            let h = tape.relu(x)?;
            let h = pb.inner.forward(tape, store, h)?;
            let h = tape.relu(h)?;
            let h = pb.outer.forward(tape, store, h)?;
            x = tape.add(x, h)?;
        }
        let x = tape.relu(x)?;
        let logits = self.output.forward(tape, store, x)?;
        tape.channels_last(logits)
    }

    /// `x + tanh(a + cond_a) ⊙ sigmoid(b + cond_b)` where `(a, b)` split a type-B masked conv.
    fn gated(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &GatedBlock,
        x: Var,
        cond: Option<Var>,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let h = self.config.hidden_units;
        let mut y = block.conv.forward(tape, store, x)?;
        if let (Some(proj), Some(c)) = (&block.cond, cond) {
            let c = proj.forward(tape, store, c)?;
            y = tape.add(y, c)?;
        }
        if let (Some(id), Some(labels)) = (block.class_embed, labels) {
            let table = tape.param(store, id);
            let bias = tape.gather_rows(table, labels, labels.len(), 1, 1)?;
            let bias = tape.reshape(bias, &[labels.len(), 2 * h])?;
            y = tape.add_spatial_constant(y, bias)?;
        }
        let a = tape.slice_channels(y, 0, h)?;
        let g = tape.slice_channels(y, h, h)?;
        let a = tape.tanh(a)?;
        let g = tape.sigmoid(g)?;
        let gated = tape.mul(a, g)?;
        tape.add(x, gated)
    }

    /// Eval-mode gated block output, exposed for layer-level tests.
    pub fn gated_block_output(&self, index: usize, x: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
        ensure!(index < self.blocks.len(), Index, "block {index} out of range");
        let mut tape = Tape::new_inference();
        let xv = tape.constant(x.clone());
        let y = self.gated(&mut tape, &self.params, &self.blocks[index], xv, None, labels)?;
        Ok(tape.value(y).clone())
    }

    pub fn logits(&self, codes: &[CodeGrid], labels: Option<&[usize]>, condition: Condition<'_>) -> Result<Tensor> {
        let mut tape = Tape::new_inference();
        let v = self.logits_with(&mut tape, &self.params, codes, labels, condition, None)?;
        Ok(tape.value(v).clone())
    }

    /// Mean negative log-likelihood in nats per position, recorded on `tape`.
    pub fn nll_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        codes: &[CodeGrid],
        labels: Option<&[usize]>,
        condition: Condition<'_>,
        rng: Option<&mut Rng64>,
    ) -> Result<Var> {
        let logits = self.logits_with(tape, store, codes, labels, condition, rng)?;
        let targets: Vec<usize> = codes.iter().flat_map(|g| g.indices.iter().copied()).collect();
        tape.softmax_cross_entropy(logits, &targets)
    }

    /// Eval-mode NLL over a dataset, processed in chunks of `batch_size`.
    pub fn nll(
        &self,
        codes: &[CodeGrid],
        labels: Option<&[usize]>,
        condition: Option<&[CodeGrid]>,
        batch_size: usize,
    ) -> Result<Nll> {
        ensure!(!codes.is_empty(), Contract, "NLL of an empty code set");
        ensure!(batch_size >= 1, Config, "batch size must be ≥ 1");
        let mut total = 0.0;
        for start in (0..codes.len()).step_by(batch_size) {
            let end = (start + batch_size).min(codes.len());
            let cond = match condition {
                Some(c) => Condition::Codes(&c[start..end]),
                None => Condition::None,
            };
            let mut tape = Tape::new_inference();
            let l = self.nll_with(&mut tape, &self.params, &codes[start..end], labels.map(|l| &l[start..end]), cond, None)?;
            total += tape.value(l).item()? * (end - start) as f64;
        }
        Ok(Nll::from_nats(total / codes.len() as f64))
    }

    /// Per-position log-probabilities `[B, H, W, K]`.
    pub fn log_probs(&self, codes: &[CodeGrid], labels: Option<&[usize]>, condition: Condition<'_>) -> Result<Tensor> {
        let logits = self.logits(codes, labels, condition)?;
        let k = self.config.num_codes;
        let mut out = logits.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Tensor::new(logits.shape(), out)
    }

    /// One optimizer step on the teacher-forced NLL; returns the batch NLL in nats.
    pub fn train_step(
        &mut self,
        codes: &[CodeGrid],
        labels: Option<&[usize]>,
        condition: Option<&[CodeGrid]>,
        optimizer: &mut Adam,
        rng: &mut Rng64,
        step: u64,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let cond = condition.map_or(Condition::None, Condition::Codes);
        let loss = self.nll_with(&mut tape, &self.params, codes, labels, cond, Some(rng))?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = tape.backward(loss)?.param_grads(&self.params);
        optimizer.update(&mut self.params, &grads);
        Ok(value)
    }
}

/// Negative log-likelihood per latent position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nll {
    pub nats: f64,
    pub bits: f64,
}

impl Nll {
    pub fn from_nats(nats: f64) -> Self {
        Self { nats, bits: nats / std::f64::consts::LN_2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng::seeded;

    pub(crate) fn tiny(cond: bool) -> PriorConfig {
        PriorConfig {
            height: 4,
            width: 4,
            num_codes: 5,
            hidden_units: 4,
            residual_units: 4,
            layers: 2,
            attention_layers: 1,
            attention_period: 2,
            attention_heads: 2,
            filter_size: 3,
            dropout: 0.0,
            attention_dropout: 0.0,
            output_stack_layers: 1,
            conditioning_blocks: usize::from(cond),
            num_classes: 0,
            condition: cond.then_some(ConditionGrid { height: 2, width: 2, num_codes: 3 }),
        }
    }

    fn grids(n: usize, h: usize, w: usize, k: usize, rng: &mut Rng64) -> Vec<CodeGrid> {
        (0..n).map(|_| CodeGrid::new(h, w, k, (0..h * w).map(|_| rng.gen_range(0..k)).collect()).unwrap()).collect()
    }

    #[test]
    fn desk_configs_validate() {
        PriorConfig::desk_top().validate().unwrap();
        PriorConfig::desk_bottom().validate().unwrap();
        assert_eq!(PriorConfig::desk_top().attention_after(), vec![2, 5]);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = tiny(false);
        c.filter_size = 4;
        assert!(c.validate().is_err());
        let mut c = tiny(false);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny(false);
        c.attention_layers = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(false);
        c.attention_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn untrained_prior_is_uniform() {
        let mut rng = seeded(0);
        let p = PriorNetwork::new(tiny(false), &mut rng).unwrap();
        let g = grids(3, 4, 4, 5, &mut rng);
        let nll = p.nll(&g, None, None, 2).unwrap();
        assert!((nll.nats - 5f64.ln()).abs() < 1e-12);
        assert!((nll.bits - 5f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn logits_shape_is_channels_last() {
        let mut rng = seeded(1);
        let p = PriorNetwork::new(tiny(true), &mut rng).unwrap();
        let g = grids(2, 4, 4, 5, &mut rng);
        let above = grids(2, 2, 2, 3, &mut rng);
        let l = p.logits(&g, None, Condition::Codes(&above)).unwrap();
        assert_eq!(l.shape(), &[2, 4, 4, 5]);
        assert!(matches!(p.logits(&g, None, Condition::None), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_class_is_index_error() {
        let mut rng = seeded(2);
        let mut c = tiny(false);
        c.num_classes = 3;
        let p = PriorNetwork::new(c, &mut rng).unwrap();
        let g = grids(1, 4, 4, 5, &mut rng);
        assert!(matches!(p.logits(&g, Some(&[3]), Condition::None), Err(Error::Index(_))));
        assert!(p.logits(&g, Some(&[2]), Condition::None).is_ok());
    }

    #[test]
    fn zero_weights_make_gated_block_identity() {
        let mut rng = seeded(3);
        let mut p = PriorNetwork::new(tiny(false), &mut rng).unwrap();
        let ids: Vec<ParamId> = p.params.ids().collect();
        for id in ids {
            p.params.get_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        assert_eq!(p.gated_block_output(0, &x, None).unwrap(), x);
    }

    #[test]
    fn training_reduces_nll() {
        let mut rng = seeded(4);
        let mut p = PriorNetwork::new(tiny(false), &mut rng).unwrap();
        let g = grids(1, 4, 4, 5, &mut rng);
        let mut opt = Adam::new(crate::params::AdamConfig { lr: 1e-2, ..Default::default() }, &p.params);
        let first = p.train_step(&g, None, None, &mut opt, &mut rng, 0).unwrap();
        let mut last = first;
        for s in 1..60 {
            last = p.train_step(&g, None, None, &mut opt, &mut rng, s).unwrap();
        }
        assert!(last < 0.5 * first, "{first} → {last}");
    }
}
