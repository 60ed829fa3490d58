//! Gradient-check suite over every differentiable op and the composed codec and prior.

use crate::autodiff::{Tape, Var};
use crate::codec::{CodecConfig, HierarchicalCodec, LevelConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
use crate::params::ParamId;
use crate::prior::{Condition, ConditionGrid, PriorConfig, PriorNetwork};
use crate::rng::{seeded, Rng64};
use crate::tensor::Tensor;
use crate::vq::CodeGrid;

/// One suite entry. Entries with `expect_mismatch` exercise paths that are deliberately not
/// true gradients (stop-gradient, straight-through) and pass when the checker flags them.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub expect_mismatch: bool,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed() != self.expect_mismatch
    }
}

/// Values bounded away from zero so ReLU kinks stay outside the finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut Rng64) -> Tensor {
    let t = Tensor::randn(shape, 1.0, rng);
    t.map(|v| if v.abs() < 0.1 { v + 0.2 * v.signum() } else { v })
}

/// `Σ y ⊙ w` for a fixed random `w`, turning any output into a scalar with a generic gradient.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

struct Suite {
    opts: GradCheckOptions,
    rng: Rng64,
    entries: Vec<SuiteEntry>,
}

impl Suite {
    fn randn(&mut self, shape: &[usize]) -> Tensor {
        away_from_zero(shape, &mut self.rng)
    }

    /// Checks `x ↦ Σ op(x) ⊙ w` where `op` builds a tensor from the input variable.
    fn op<F>(&mut self, name: &str, x: Tensor, op: F) -> Result<()>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let mut probe = Tape::new();
        let xv = probe.leaf(x.clone(), true);
        let y = op(&mut probe, xv)?;
        let shape = probe.shape(y).to_vec();
        let w = self.randn(&shape);
        let report = grad_check(
            |t, v| {
                let y = op(t, v)?;
                project(t, y, &w)
            },
            &x,
            &self.opts,
        )?;
        self.entries.push(SuiteEntry { name: name.into(), expect_mismatch: false, report });
        Ok(())
    }

    fn scalar<F>(&mut self, name: &str, x: Tensor, expect_mismatch: bool, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let report = grad_check(f, &x, &self.opts)?;
        self.entries.push(SuiteEntry { name: name.into(), expect_mismatch, report });
        Ok(())
    }
}

/// Runs the suite with `h = 1e-5`, relative tolerance `1e-4`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
    let mut s = Suite { opts, rng: seeded(seed), entries: Vec::new() };
    elementwise_ops(&mut s)?;
    structural_ops(&mut s)?;
    conv_ops(&mut s)?;
    attention_ops(&mut s)?;
    intentional_mismatches(&mut s)?;
    composed_codec(&mut s)?;
    composed_prior(&mut s)?;
    Ok(s.entries)
}

fn elementwise_ops(s: &mut Suite) -> Result<()> {
    let c = s.randn(&[2, 3, 2, 2]);
    let x = s.randn(&[2, 3, 2, 2]);
    let k = c.clone();
    s.op("add", x.clone(), move |t, v| {
        let c = t.constant(k.clone());
        t.add(v, c)
    })?;
    let k = c.clone();
    s.op("sub", x.clone(), move |t, v| {
        let c = t.constant(k.clone());
        t.sub(c, v)
    })?;
    let k = c.clone();
    s.op("mul", x.clone(), move |t, v| {
        let c = t.constant(k.clone());
        t.mul(v, c)
    })?;
    s.op("mul (same operand)", x.clone(), |t, v| t.mul(v, v))?;
    s.op("scale", x.clone(), |t, v| t.scale(v, -1.7))?;
    let k = c.clone();
    s.op("mul_const", x.clone(), move |t, v| t.mul_const(v, &k))?;
    s.op("relu", x.clone(), |t, v| t.relu(v))?;
    s.op("tanh", x.clone(), |t, v| t.tanh(v))?;
    s.op("sigmoid", x.clone(), |t, v| t.sigmoid(v))?;
    s.scalar("sum", x.clone(), false, |t, v| {
        let q = t.mul(v, v)?;
        t.sum(q)
    })?;
    s.scalar("mean", x.clone(), false, |t, v| {
        let q = t.mul(v, v)?;
        t.mean(q)
    })?;
    let k = c;
    s.scalar("mse", x, false, move |t, v| {
        let c = t.constant(k.clone());
        t.mse(v, c)
    })
}

fn structural_ops(s: &mut Suite) -> Result<()> {
    let x = s.randn(&[2, 3, 2, 2]);
    s.op("reshape", x.clone(), |t, v| t.reshape(v, &[4, 6]))?;
    let bias = s.randn(&[3]);
    let xb = x.clone();
    s.op("add_channel_bias (x)", x.clone(), {
        let bias = bias.clone();
        move |t, v| {
            let b = t.constant(bias.clone());
            t.add_channel_bias(v, b)
        }
    })?;
    s.op("add_channel_bias (bias)", bias, move |t, b| {
        let x = t.constant(xb.clone());
        t.add_channel_bias(x, b)
    })?;
    let sc = s.randn(&[2, 3]);
    let xs = x.clone();
    s.op("add_spatial_constant (x)", x.clone(), {
        let sc = sc.clone();
        move |t, v| {
            let c = t.constant(sc.clone());
            t.add_spatial_constant(v, c)
        }
    })?;
    s.op("add_spatial_constant (v)", sc, move |t, c| {
        let x = t.constant(xs.clone());
        t.add_spatial_constant(x, c)
    })?;
    let pos = s.randn(&[3, 2, 2]);
    let xp = x.clone();
    s.op("add_batch_broadcast (p)", pos, move |t, p| {
        let x = t.constant(xp.clone());
        t.add_batch_broadcast(x, p)
    })?;
    let other = s.randn(&[2, 1, 2, 2]);
    s.op("concat_channels", x.clone(), move |t, v| {
        let o = t.constant(other.clone());
        t.concat_channels(&[o, v, v])
    })?;
    s.op("slice_channels", x.clone(), |t, v| t.slice_channels(v, 1, 2))?;
    s.op("channels_last", x.clone(), |t, v| t.channels_last(v))?;
    s.op("mean_spatial", x, |t, v| t.mean_spatial(v))?;
    let table = s.randn(&[4, 3]);
    s.op("gather_rows", table, |t, tb| t.gather_rows(tb, &[0, 3, 3, 1, 2, 0, 0, 1], 2, 2, 2))?;
    let logits = s.randn(&[3, 4]);
    s.scalar("softmax_cross_entropy", logits, false, |t, l| t.softmax_cross_entropy(l, &[1, 3, 0]))
}

fn conv_ops(s: &mut Suite) -> Result<()> {
    let x = s.randn(&[2, 2, 5, 5]);
    let k = s.randn(&[3, 2, 3, 3]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let kk = k.clone();
        s.op(&format!("conv2d s{stride} p{pad} (x)"), x.clone(), move |t, v| {
            let w = t.constant(kk.clone());
            t.conv2d(v, w, stride, pad)
        })?;
        let xx = x.clone();
        s.op(&format!("conv2d s{stride} p{pad} (kernel)"), k.clone(), move |t, w| {
            let v = t.constant(xx.clone());
            t.conv2d(v, w, stride, pad)
        })?;
    }
    let x = s.randn(&[2, 2, 3, 3]);
    let k = s.randn(&[2, 3, 4, 4]);
    let kk = k.clone();
    s.op("conv_transpose2d (x)", x.clone(), move |t, v| {
        let w = t.constant(kk.clone());
        t.conv_transpose2d(v, w, 2, 1)
    })?;
    s.op("conv_transpose2d (kernel)", k, move |t, w| {
        let v = t.constant(x.clone());
        t.conv_transpose2d(v, w, 2, 1)
    })
}

fn attention_ops(s: &mut Suite) -> Result<()> {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = s.randn(&if ta { [2, 4, 3] } else { [2, 3, 4] });
        let b = s.randn(&if tb { [2, 5, 4] } else { [2, 4, 5] });
        let bb = b.clone();
        s.op(&format!("bmm ta={ta} tb={tb} (a)"), a.clone(), move |t, v| {
            let b = t.constant(bb.clone());
            t.bmm(v, b, ta, tb)
        })?;
        s.op(&format!("bmm ta={ta} tb={tb} (b)"), b, move |t, v| {
            let a = t.constant(a.clone());
            t.bmm(a, v, ta, tb)
        })?;
    }
    let scores = s.randn(&[2, 4, 4]);
    s.op("causal_softmax", scores, |t, v| t.causal_softmax(v))
}

fn intentional_mismatches(s: &mut Suite) -> Result<()> {
    s.scalar("stop_gradient (blocked, expected to disagree)", Tensor::scalar(3.0), true, |t, v| {
        let sg = t.stop_gradient(v)?;
        t.mul(sg, v)
    })?;
    let e = s.randn(&[4]);
    let z = s.randn(&[4]);
    s.scalar("straight_through (expected to disagree)", z, true, move |t, z| {
        let e = t.constant(e.clone());
        let st = t.straight_through(z, e)?;
        let q = t.mul(st, st)?;
        t.sum(q)
    })
}

fn tiny_codec_config() -> CodecConfig {
    CodecConfig {
        image_size: 8,
        channels: 1,
        levels: vec![
            LevelConfig { downsample: 4, codebook_size: 4, code_dim: 2 },
            LevelConfig { downsample: 2, codebook_size: 4, code_dim: 2 },
        ],
        hidden_units: 4,
        residual_units: 2,
        residual_layers: 1,
        ..CodecConfig::desk()
    }
}

fn ids_with_prefix(store: &crate::params::ParamStore, prefixes: &[&str]) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre))).map(|(id, _)| id).collect()
}

/// Composed stage-1 checks. Each loss is chosen so that no straight-through edge lies
/// between it and the checked parameters, which makes the analytic gradient a true one.
fn composed_codec(s: &mut Suite) -> Result<()> {
    let codec = HierarchicalCodec::new(tiny_codec_config(), &mut s.rng)?;
    let x = Tensor::rand_uniform(&[2, 1, 8, 8], -0.5, 0.5, &mut s.rng);
    let opts = GradCheckOptions { max_elements: Some(8), ..s.opts.clone() };
    let decoder = codec.decoder_param_ids();
    let xr = x.clone();
    let report = grad_check_params(
        &codec.params,
        &decoder,
        |t, store| {
            let xv = t.constant(xr.clone());
            let fwd = codec.forward_with(t, store, xv)?;
            t.mse(xv, fwd.x_hat)
        },
        &opts,
    )?;
    s.entries.push(SuiteEntry { name: "codec: reconstruction wrt decoder".into(), expect_mismatch: false, report });

    let top = codec.num_levels() - 1;
    let beta = codec.config.beta;
    let encoder = codec.encoder_param_ids();
    let xr = x.clone();
    let report = grad_check_params(
        &codec.params,
        &encoder,
        |t, store| {
            let xv = t.constant(xr.clone());
            let fwd = codec.forward_with(t, store, xv)?;
            crate::vq::commitment_loss(t, fwd.levels[top].z, fwd.levels[top].e_q, beta)
        },
        &opts,
    )?;
    s.entries.push(SuiteEntry { name: "codec: top commitment wrt encoder".into(), expect_mismatch: false, report });

    let bottom_only = ids_with_prefix(&codec.params, &["enc.bottom.cond_up", "enc.bottom.pre_quant"]);
    let report = grad_check_params(
        &codec.params,
        &bottom_only,
        |t, store| {
            let xv = t.constant(x.clone());
            let fwd = codec.forward_with(t, store, xv)?;
            crate::vq::commitment_loss(t, fwd.levels[0].z, fwd.levels[0].e_q, beta)
        },
        &opts,
    )?;
    s.entries.push(SuiteEntry {
        name: "codec: bottom commitment wrt conditioning and pre-quantization".into(),
        expect_mismatch: false,
        report,
    });
    Ok(())
}

fn composed_prior(s: &mut Suite) -> Result<()> {
    let config = PriorConfig {
        height: 4,
        width: 4,
        num_codes: 3,
        hidden_units: 4,
        residual_units: 2,
        layers: 2,
        attention_layers: 1,
        attention_period: 2,
        attention_heads: 2,
        filter_size: 3,
        dropout: 0.1,
        attention_dropout: 0.1,
        output_stack_layers: 1,
        conditioning_blocks: 1,
        num_classes: 2,
        condition: Some(ConditionGrid { height: 2, width: 2, num_codes: 3 }),
    };
    let mut prior = PriorNetwork::new(config, &mut s.rng)?;
    prior.randomize_output(&mut s.rng);
    let grid = |v: Vec<usize>, n: usize| CodeGrid::new(n, n, 3, v);
    let codes = vec![
        grid(vec![0, 1, 2, 1, 2, 2, 0, 0, 1, 1, 0, 2, 2, 1, 0, 1], 4)?,
        grid(vec![2, 2, 1, 0, 0, 1, 2, 1, 0, 0, 2, 1, 1, 2, 0, 2], 4)?,
    ];
    let above = vec![grid(vec![0, 2, 1, 1], 2)?, grid(vec![2, 0, 0, 1], 2)?];
    let labels = [0, 1];
    let ids: Vec<ParamId> = prior.params.ids().collect();
    let opts = GradCheckOptions { max_elements: Some(6), ..s.opts.clone() };
    let report = grad_check_params(
        &prior.params,
        &ids,
        |t, store| prior.nll_with(t, store, &codes, Some(&labels), Condition::Codes(&above), None),
        &opts,
    )?;
    s.entries.push(SuiteEntry { name: "prior: NLL wrt all parameters".into(), expect_mismatch: false, report });
    Ok(())
}
