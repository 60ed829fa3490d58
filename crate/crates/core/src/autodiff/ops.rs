use super::{Ctx, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

fn same_shape(tape: &Tape, a: Var, b: Var, op: &str) -> Result<()> {
    ensure!(
        tape.shape(a) == tape.shape(b),
        Dimension,
        "{op}: shapes {:?} and {:?} differ",
        tape.shape(a),
        tape.shape(b)
    );
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl Tape {
    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        backward: impl Fn(&Ctx<'_>) -> Vec<f64> + 'static,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, value, vec![x], Box::new(move |ctx| vec![Some(backward(ctx))]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let value = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a), value)?;
        self.push(
            "add",
            value,
            vec![a, b],
            Box::new(|ctx| vec![ctx.needs[0].then(|| ctx.grad.to_vec()), ctx.needs[1].then(|| ctx.grad.to_vec())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let value = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.shape(a), value)?;
        self.push(
            "sub",
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.to_vec()),
                    ctx.needs[1].then(|| ctx.grad.iter().map(|g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let value = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a), value)?;
        self.push(
            "mul",
            value,
            vec![a, b],
            Box::new(|ctx| {
                let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs[0].then(|| zip_map(ctx.grad, y, |g, v| g * v)),
                    ctx.needs[1].then(|| zip_map(ctx.grad, x, |g, v| g * v)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, move |v| v * c, move |ctx| ctx.grad.iter().map(|g| g * c).collect())
    }

    /// Elementwise product with a fixed (non-differentiable) tensor, e.g. a mask.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        ensure!(
            self.shape(x) == c.shape(),
            Dimension,
            "mul_const: {:?} vs {:?}",
            self.shape(x),
            c.shape()
        );
        let value = Tensor::new(self.shape(x), zip_map(self.value(x).data(), c.data(), |a, b| a * b))?;
        let c = c.data().to_vec();
        self.push("mul_const", value, vec![x], Box::new(move |ctx| vec![Some(zip_map(ctx.grad, &c, |g, m| g * m))]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), |ctx| {
            zip_map(ctx.grad, ctx.inputs[0].data(), |g, v| if v > 0.0 { g } else { 0.0 })
        })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, |ctx| zip_map(ctx.grad, ctx.output.data(), |g, t| g * (1.0 - t * t)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), |ctx| {
            zip_map(ctx.grad, ctx.output.data(), |g, s| g * s * (1.0 - s))
        })
    }

    /// Identity forward; contributes no gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push_detached("stop_gradient", value)
    }

    /// Forward value is `e_q` exactly; the backward pass copies the incoming gradient onto `z`
    /// unchanged and sends nothing to `e_q`.
    pub fn straight_through(&mut self, z: Var, e_q: Var) -> Result<Var> {
        same_shape(self, z, e_q, "straight_through")?;
        let value = self.value(e_q).clone();
        self.push("straight_through", value, vec![z], Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(
            "sum",
            Tensor::scalar(s),
            vec![x],
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n;
        self.push(
            "mean",
            Tensor::scalar(s),
            vec![x],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0] / n; ctx.inputs[0].len()])]),
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, vec![x], Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// `x[B, C, ...] + bias[C]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(
            xs.len() >= 2 && self.shape(bias) == [xs[1]],
            Dimension,
            "add_channel_bias: x {:?}, bias {:?}",
            xs,
            self.shape(bias)
        );
        let (c, inner) = (xs[1], xs[2..].iter().product::<usize>());
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.push(
            "add_channel_bias",
            Tensor::new(&xs, out)?,
            vec![x, bias],
            Box::new(move |ctx| {
                let db = ctx.needs[1].then(|| {
                    let mut db = vec![0.0; c];
                    for (i, chunk) in ctx.grad.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    db
                });
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), db]
            }),
        )
    }

    /// `x[B, C, H, W] + v[B, C]`, broadcasting `v` over spatial positions.
    pub fn add_spatial_constant(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(
            xs.len() == 4 && self.shape(v) == [xs[0], xs[1]],
            Dimension,
            "add_spatial_constant: x {:?}, v {:?}",
            xs,
            self.shape(v)
        );
        let inner = xs[2] * xs[3];
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|o| *o += vv[i]);
        }
        self.push(
            "add_spatial_constant",
            Tensor::new(&xs, out)?,
            vec![x, v],
            Box::new(move |ctx| {
                let dv = ctx.needs[1].then(|| ctx.grad.chunks(inner).map(|c| c.iter().sum()).collect());
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), dv]
            }),
        )
    }

    /// `x[B, ...] + p[...]`, broadcasting `p` over the batch axis.
    pub fn add_batch_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let per: usize = xs[1..].iter().product();
        ensure!(
            self.value(p).len() == per,
            Dimension,
            "add_batch_broadcast: x {:?}, p {:?}",
            xs,
            self.shape(p)
        );
        let mut out = self.value(x).data().to_vec();
        let pv = self.value(p).data();
        for chunk in out.chunks_mut(per) {
            chunk.iter_mut().zip(pv).for_each(|(o, q)| *o += q);
        }
        self.push(
            "add_batch_broadcast",
            Tensor::new(&xs, out)?,
            vec![x, p],
            Box::new(move |ctx| {
                let dp = ctx.needs[1].then(|| {
                    let mut dp = vec![0.0; per];
                    for chunk in ctx.grad.chunks(per) {
                        dp.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                    dp
                });
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), dp]
            }),
        )
    }

    /// Concatenates `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), Contract, "concat_channels of nothing");
        let s0 = self.shape(xs[0]).to_vec();
        ensure!(s0.len() >= 2, Dimension, "concat_channels needs rank ≥ 2, got {s0:?}");
        let inner: usize = s0[2..].iter().product();
        let mut chans = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            ensure!(
                s.len() == s0.len() && s[0] == s0[0] && s[2..] == s0[2..],
                Dimension,
                "concat_channels: {:?} vs {:?}",
                s,
                s0
            );
            chans.push(s[1]);
        }
        let total: usize = chans.iter().sum();
        let batch = s0[0];
        let mut out = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for (&v, &c) in xs.iter().zip(&chans) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total;
        self.push(
            "concat_channels",
            Tensor::new(&shape, out)?,
            xs.to_vec(),
            Box::new(move |ctx| {
                let mut grads: Vec<Option<Vec<f64>>> = chans
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&c, &need)| need.then(|| Vec::with_capacity(batch * c * inner)))
                    .collect();
                for b in 0..batch {
                    let mut offset = b * total * inner;
                    for (g, &c) in grads.iter_mut().zip(&chans) {
                        if let Some(g) = g {
                            g.extend_from_slice(&ctx.grad[offset..offset + c * inner]);
                        }
                        offset += c * inner;
                    }
                }
                grads
            }),
        )
    }

    /// Channels `start..start + len` of a `[B, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(
            xs.len() >= 2 && len > 0 && start + len <= xs[1],
            Index,
            "slice_channels {start}..{} of {:?}",
            start + len,
            xs
        );
        let (c, inner) = (xs[1], xs[2..].iter().product::<usize>());
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(xs[0] * len * inner);
        for b in 0..xs[0] {
            let base = (b * c + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = xs.clone();
        shape[1] = len;
        let batch = xs[0];
        self.push(
            "slice_channels",
            Tensor::new(&shape, out)?,
            vec![x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; batch * c * inner];
                for b in 0..batch {
                    let base = (b * c + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&ctx.grad[b * len * inner..(b + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Permutes `[B, C, H, W]` to `[B, H, W, C]`.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 4, Dimension, "channels_last needs rank 4, got {xs:?}");
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    out[(bi * hw + p) * c + ci] = d[(bi * c + ci) * hw + p];
                }
            }
        }
        self.push(
            "channels_last",
            Tensor::new(&[b, xs[2], xs[3], c], out)?,
            vec![x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.grad.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            g[(bi * c + ci) * hw + p] = ctx.grad[(bi * hw + p) * c + ci];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Embedding lookup: rows of `table[K, E]` selected by `indices` (length `B·H·W`),
    /// laid out as `[B, E, H, W]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize], batch: usize, h: usize, w: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        ensure!(ts.len() == 2, Dimension, "gather_rows: table must be rank 2, got {ts:?}");
        ensure!(indices.len() == batch * h * w, Dimension, "gather_rows: {} indices for {batch}×{h}×{w}", indices.len());
        let (k, e) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(crate::error::Error::Index(format!("code {bad} out of range for table with {k} rows")));
        }
        let hw = h * w;
        let t = self.value(table).data();
        let mut out = vec![0.0; batch * e * hw];
        for bi in 0..batch {
            for p in 0..hw {
                let row = &t[indices[bi * hw + p] * e..][..e];
                for (ei, &v) in row.iter().enumerate() {
                    out[(bi * e + ei) * hw + p] = v;
                }
            }
        }
        let idx = indices.to_vec();
        self.push(
            "gather_rows",
            Tensor::new(&[batch, e, h, w], out)?,
            vec![table],
            Box::new(move |ctx| {
                let mut g = vec![0.0; k * e];
                for bi in 0..batch {
                    for p in 0..hw {
                        let row = idx[bi * hw + p];
                        for ei in 0..e {
                            g[row * e + ei] += ctx.grad[(bi * e + ei) * hw + p];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Spatial mean `[B, C, H, W] → [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 4, Dimension, "mean_spatial needs rank 4, got {xs:?}");
        let hw = xs[2] * xs[3];
        let out: Vec<f64> = self.value(x).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        self.push(
            "mean_spatial",
            Tensor::new(&[xs[0], xs[1]], out)?,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.iter().flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw)).collect();
                vec![Some(g)]
            }),
        )
    }
}
