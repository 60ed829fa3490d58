//! Central-difference gradient verification.
//!
//! Mismatches are reported, not raised: paths such as `stop_gradient` or the
//! straight-through estimator intentionally disagree with finite differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor for the relative error: `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, floor: 1e-6, max_elements: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.mismatches.extend(other.mismatches);
    }

    fn empty() -> Self {
        Self { checked: 0, max_rel_err: 0.0, max_abs_err: 0.0, mismatches: Vec::new() }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} elements, max rel err {:.3e}, max abs err {:.3e}, {} mismatches",
            self.checked,
            self.max_rel_err,
            self.max_abs_err,
            self.mismatches.len()
        )
    }
}

fn chosen_indices(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_elements {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn compare(
    name: &str,
    analytic: &[f64],
    indices: &[usize],
    opts: &GradCheckOptions,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::empty();
    for &i in indices {
        let plus = eval(i, opts.h)?;
        let minus = eval(i, -opts.h)?;
        let numeric = (plus - minus) / (2.0 * opts.h);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel > opts.tol {
            report.mismatches.push(Mismatch { tensor: name.to_string(), index: i, analytic: a, numeric, rel_err: rel });
        }
    }
    Ok(report)
}

/// Checks the gradient of scalar `f` with respect to its single input `x`.
pub fn grad_check<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.wrt_or_zeros(&tape, xv);
    let eval_at = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(probe.clone(), true);
        let y = f(&mut tape, xv)?;
        tape.value(y).item()
    };
    let indices = chosen_indices(x.len(), opts, 0);
    let mut probe = x.clone();
    compare("x", &analytic, &indices, opts, |i, delta| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let v = eval_at(&probe);
        probe.data_mut()[i] = orig;
        v
    })
}

/// Checks gradients of scalar `f` with respect to the listed parameters in `store`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    let grads = tape.backward(y)?.param_grads(store);
    let mut report = GradCheckReport::empty();
    let mut probe = store.clone();
    for &id in ids {
        let indices = chosen_indices(store.get(id).len(), opts, id.index() as u64 + 1);
        let name = store.name(id).to_string();
        let part = compare(&name, grads.get(id), &indices, opts, |i, delta| {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + delta;
            let mut tape = Tape::new();
            let v = f(&mut tape, &probe).and_then(|y| tape.value(y).item());
            probe.get_mut(id).data_mut()[i] = orig;
            v
        })?;
        report.merge(part);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[10], 1.0, &mut rng);
        let opts = GradCheckOptions { tol: 1e-9, ..Default::default() };
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            &opts,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn stop_gradient_is_flagged() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let s = t.stop_gradient(x)?;
                let p = t.mul(s, s)?;
                t.sum(p)
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.mismatches.len(), 3);
        assert!(r.mismatches.iter().all(|m| m.analytic == 0.0 && m.numeric.abs() > 1.0));
    }
}
