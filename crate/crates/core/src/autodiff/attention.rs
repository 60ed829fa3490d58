use super::kernels::gemm;
use super::{Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Batched matrix product over a leading group axis: `op(a)[G, M, K] · op(b)[G, K, N]`,
    /// where `op` optionally transposes the trailing two axes of the stored operand.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        ensure!(as_.len() == 3 && bs.len() == 3 && as_[0] == bs[0], Dimension, "bmm: {as_:?} × {bs:?}");
        let (m, ka) = if trans_a { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        ensure!(ka == kb, Dimension, "bmm: inner extents {ka} and {kb} differ ({as_:?} × {bs:?})");
        let (groups, k) = (as_[0], ka);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; groups * m * n];
        for gi in 0..groups {
            gemm(
                m,
                k,
                n,
                &av[gi * m * k..(gi + 1) * m * k],
                trans_a,
                &bv[gi * k * n..(gi + 1) * k * n],
                trans_b,
                &mut out[gi * m * n..(gi + 1) * m * n],
                false,
            );
        }
        self.push(
            "bmm",
            Tensor::new(&[groups, m, n], out)?,
            vec![a, b],
            Box::new(move |ctx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let da = ctx.needs[0].then(|| {
                    let mut da = vec![0.0; groups * m * k];
                    for gi in 0..groups {
                        let dc = &ctx.grad[gi * m * n..(gi + 1) * m * n];
                        let bg = &bv[gi * k * n..(gi + 1) * k * n];
                        let dst = &mut da[gi * m * k..(gi + 1) * m * k];
                        if trans_a {
                            // stored a is [K, M]: dA_stored = op(b) · dCᵀ
                            gemm(k, n, m, bg, trans_b, dc, true, dst, false);
                        } else {
                            // dA = dC · op(b)ᵀ
                            gemm(m, n, k, dc, false, bg, !trans_b, dst, false);
                        }
                    }
                    da
                });
                let db = ctx.needs[1].then(|| {
                    let mut db = vec![0.0; groups * k * n];
                    for gi in 0..groups {
                        let dc = &ctx.grad[gi * m * n..(gi + 1) * m * n];
                        let ag = &av[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            // stored b is [N, K]: dB_stored = dCᵀ · op(a)
                            gemm(n, m, k, dc, true, ag, trans_a, dst, false);
                        } else {
                            // dB = op(a)ᵀ · dC
                            gemm(k, m, n, ag, !trans_a, dc, false, dst, false);
                        }
                    }
                    db
                });
                vec![da, db]
            }),
        )
    }

    /// Softmax over the last axis of `[G, L, L]` scores with entries `j > i` masked out
    /// (probability exactly zero).
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        ensure!(s.len() == 3 && s[1] == s[2], Dimension, "causal_softmax needs [G, L, L], got {s:?}");
        let l = s[1];
        let x = self.value(scores).data();
        let mut out = vec![0.0; x.len()];
        for (row_idx, (src, dst)) in x.chunks(l).zip(out.chunks_mut(l)).enumerate() {
            let i = row_idx % l;
            let visible = &src[..=i];
            let max = visible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                dst[j] = (src[j] - max).exp();
                z += dst[j];
            }
            for d in &mut dst[..=i] {
                *d /= z;
            }
        }
        self.push(
            "causal_softmax",
            Tensor::new(&s, out)?,
            vec![scores],
            Box::new(move |ctx| {
                let p = ctx.output.data();
                let mut g = vec![0.0; p.len()];
                for ((pr, gr), dst) in p.chunks(l).zip(ctx.grad.chunks(l)).zip(g.chunks_mut(l)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..l {
                        dst[j] = pr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}
