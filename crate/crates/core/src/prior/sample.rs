//! Ancestral sampling in raster order.

use rand::Rng;

use super::{Condition, PriorNetwork};
use crate::error::{ensure, Error, Result};
use crate::parallel;
use crate::rng::{self, Rng64};
use crate::vq::CodeGrid;

/// Draws an index from `softmax(logits / temperature)`. A `+∞` logit is chosen with
/// probability one (the first one if several).
pub fn sample_categorical(logits: &[f64], temperature: f64, rng: &mut Rng64) -> Result<usize> {
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        Config,
        "temperature must be positive and finite, got {temperature}"
    );
    ensure!(!logits.is_empty(), Contract, "sampling from an empty distribution");
    if let Some(i) = logits.iter().position(|&l| l == f64::INFINITY) {
        return Ok(i);
    }
    if logits.iter().any(|l| l.is_nan()) {
        return Err(Error::NonFinite { op: "sample_categorical" });
    }
    let max = logits.iter().map(|l| l / temperature).fold(f64::NEG_INFINITY, f64::max);
    ensure!(max.is_finite(), Contract, "all logits are −∞");
    let weights: Vec<f64> = logits.iter().map(|l| (l / temperature - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last = i;
        }
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last)
}

impl PriorNetwork {
    /// Samples one grid position by position; each step is a full teacher-forced forward
    /// pass over the partially sampled grid (`H·W` evaluations).
    pub fn sample_one(
        &self,
        label: Option<usize>,
        above: Option<&CodeGrid>,
        temperature: f64,
        rng: &mut Rng64,
    ) -> Result<CodeGrid> {
        ensure!(temperature > 0.0, Config, "temperature must be positive, got {temperature}");
        let cfg = &self.config;
        let features = match (cfg.condition, above) {
            (Some(_), Some(a)) => Some(self.condition_features(std::slice::from_ref(a))?),
            (Some(_), None) => return Err(Error::Contract("this prior is conditioned on the level above".into())),
            (None, _) => None,
        };
        let labels = label.map(|l| [l]);
        let k = cfg.num_codes;
        let mut grid = CodeGrid::filled(cfg.height, cfg.width, k, 0)?;
        for p in 0..cfg.positions() {
            let cond = features.as_ref().map_or(Condition::None, Condition::Features);
            let logits = self.logits(std::slice::from_ref(&grid), labels.as_ref().map(|l| &l[..]), cond)?;
            grid.indices[p] = sample_categorical(&logits.data()[p * k..(p + 1) * k], temperature, rng)?;
        }
        Ok(grid)
    }

    /// Samples `labels.len()` grids (or `n` for an unconditional prior). Sample `i` draws from
    /// its own stream of `seed`, so the result does not depend on the thread count.
    pub fn sample(
        &self,
        n: usize,
        labels: Option<&[usize]>,
        above: Option<&[CodeGrid]>,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<CodeGrid>> {
        if let Some(l) = labels {
            ensure!(l.len() == n, Dimension, "{} labels for {n} samples", l.len());
        }
        if let Some(a) = above {
            ensure!(a.len() == n, Dimension, "{} conditioning grids for {n} samples", a.len());
        }
        parallel::try_map_range(n, |i| {
            let mut rng = rng::stream(seed, i as u64);
            self.sample_one(labels.map(|l| l[i]), above.map(|a| &a[i]), temperature, &mut rng)
        })
    }
}
