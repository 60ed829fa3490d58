use super::kernels::softmax_rows;
use super::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Mean over rows of `−log softmax(logits)[target]`. `logits` is `[N, K]` (or any shape
    /// whose trailing axis is `K`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let k = *s.last().unwrap();
        let n = self.value(logits).len() / k;
        ensure!(targets.len() == n, Dimension, "softmax_cross_entropy: {n} rows but {} targets", targets.len());
        if let Some((row, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
            return Err(Error::Index(format!("target {t} at row {row} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &t) in x.chunks(k).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= n as f64;
        let targets = targets.to_vec();
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |ctx| {
                let scale = ctx.grad[0] / n as f64;
                let mut g = softmax_rows(ctx.inputs[0].data(), k);
                for (row, &t) in g.chunks_mut(k).zip(&targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(g)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 8]), true);
        let l = tape.softmax_cross_entropy(x, &[3]).unwrap();
        assert!((tape.value(l).data()[0] - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logit_gives_small_loss() {
        // Independent scalar evaluation: -ln(e^10 / (e^10 + 2)).
        let expected = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 3], vec![10.0, 0.0, 0.0]).unwrap(), true);
        let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
        let v = tape.value(l).data()[0];
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 9.08e-5).abs() < 1e-7);
    }

    #[test]
    fn loss_vanishes_as_gap_grows() {
        let mut prev = f64::INFINITY;
        for gap in [1.0, 10.0, 50.0, 700.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[1, 2], vec![gap, 0.0]).unwrap(), true);
            let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
            let v = tape.value(l).data()[0];
            assert!(v <= prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot_over_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4]), true);
        let l = tape.softmax_cross_entropy(x, &[1, 3]).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.wrt(x).unwrap();
        assert!((g[1] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g[0] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_target_is_index_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4]), true);
        assert!(matches!(tape.softmax_cross_entropy(x, &[4]), Err(Error::Index(_))));
    }
}
