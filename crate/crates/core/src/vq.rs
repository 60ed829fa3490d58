//! Vector quantization: nearest-prototype lookup, the straight-through and
//! commitment terms, and exponential-moving-average codebook maintenance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Laplace smoothing constant applied to EMA cluster counts.
pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_GAMMA: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    num_codes: usize,
    dim: usize,
    /// `K × D` prototypes.
    embeddings: Tensor,
    /// EMA cluster counts `N_i`.
    cluster_size: Vec<f64>,
    /// EMA cluster sums `m_i`, `K × D`.
    ema_sum: Tensor,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Codebook {
    /// Gaussian N(0, 1) prototypes; accumulators start at `N = 0`, `m = e`.
    pub fn new<R: Rng + ?Sized>(num_codes: usize, dim: usize, gamma: f64, epsilon: f64, rng: &mut R) -> Result<Self> {
        let embeddings = Tensor::randn(&[num_codes, dim], 1.0, rng);
        Self::from_embeddings(embeddings, gamma, epsilon)
    }

    pub fn from_embeddings(embeddings: Tensor, gamma: f64, epsilon: f64) -> Result<Self> {
        ensure!(embeddings.ndim() == 2, Dimension, "codebook must be K×D, got {:?}", embeddings.shape());
        let (k, d) = (embeddings.dim(0), embeddings.dim(1));
        let cb = Self {
            num_codes: k,
            dim: d,
            cluster_size: vec![0.0; k],
            ema_sum: embeddings.clone(),
            embeddings,
            gamma,
            epsilon,
        };
        cb.validate()?;
        Ok(cb)
    }

    /// Builds a codebook with explicit EMA state.
    pub fn from_parts(embeddings: Tensor, cluster_size: Vec<f64>, ema_sum: Tensor, gamma: f64, epsilon: f64) -> Result<Self> {
        ensure!(embeddings.ndim() == 2, Dimension, "codebook must be K×D, got {:?}", embeddings.shape());
        let (k, d) = (embeddings.dim(0), embeddings.dim(1));
        ensure!(cluster_size.len() == k, Dimension, "{} cluster sizes for {k} codes", cluster_size.len());
        ensure!(ema_sum.shape() == [k, d], Dimension, "EMA sums {:?}, expected [{k}, {d}]", ema_sum.shape());
        let cb = Self { num_codes: k, dim: d, embeddings, cluster_size, ema_sum, gamma, epsilon };
        cb.validate()?;
        Ok(cb)
    }

    fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.gamma), Config, "gamma {} outside [0, 1]", self.gamma);
        ensure!(self.epsilon > 0.0, Config, "epsilon must be positive, got {}", self.epsilon);
        ensure!(self.embeddings.is_finite(), Format, "non-finite prototype");
        ensure!(self.cluster_size.iter().all(|&n| n >= 0.0), Format, "negative cluster size");
        Ok(())
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Tensor {
        &mut self.embeddings
    }

    pub fn cluster_size(&self) -> &[f64] {
        &self.cluster_size
    }

    pub fn ema_sum(&self) -> &Tensor {
        &self.ema_sum
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        &self.embeddings.data()[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest prototype by squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.num_codes {
            let d: f64 = self.prototype(j).iter().zip(v).map(|(e, x)| (x - e) * (x - e)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// The Laplace-smoothed cluster counts used as EMA denominators.
    pub fn smoothed_counts(&self) -> Vec<f64> {
        let total: f64 = self.cluster_size.iter().sum();
        let k = self.num_codes as f64;
        self.cluster_size
            .iter()
            .map(|&n| (n + self.epsilon) / (total + k * self.epsilon) * total)
            .collect()
    }

    /// One EMA step from a batch of encoder outputs `z` (`[B, D, H, W]`) and their assignments:
    /// `N ← γN + (1−γ)n`, `m ← γm + (1−γ)Σz`, `e ← m / smoothed(N)`.
    /// With `γ = 1` the state is frozen and nothing changes.
    pub fn ema_update(&mut self, z: &Tensor, codes: &[CodeGrid]) -> Result<()> {
        let (counts, sums) = self.assignment_stats(z, codes)?;
        if self.gamma == 1.0 {
            return Ok(());
        }
        let g = self.gamma;
        for (n, c) in self.cluster_size.iter_mut().zip(&counts) {
            *n = g * *n + (1.0 - g) * c;
        }
        for (m, s) in self.ema_sum.data_mut().iter_mut().zip(&sums) {
            *m = g * *m + (1.0 - g) * s;
        }
        let denom = self.smoothed_counts();
        let d = self.dim;
        let m = self.ema_sum.data().to_vec();
        for (i, row) in self.embeddings.data_mut().chunks_mut(d).enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = m[i * d + j] / denom[i];
            }
        }
        ensure!(self.embeddings.is_finite(), Format, "EMA update produced non-finite prototypes");
        Ok(())
    }

    /// Per-code assignment counts `n_i` and vector sums `Σ_j z_{i,j}` for a batch.
    pub fn assignment_stats(&self, z: &Tensor, codes: &[CodeGrid]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (b, h, w) = check_latent(z, self.dim)?;
        ensure!(codes.len() == b, Dimension, "{} code grids for batch of {b}", codes.len());
        let hw = h * w;
        let d = self.dim;
        let mut counts = vec![0.0; self.num_codes];
        let mut sums = vec![0.0; self.num_codes * d];
        let zd = z.data();
        for (bi, grid) in codes.iter().enumerate() {
            ensure!(grid.height == h && grid.width == w, Dimension, "code grid {}×{} vs latent {h}×{w}", grid.height, grid.width);
            for p in 0..hw {
                let idx = grid.indices[p];
                ensure!(idx < self.num_codes, Index, "code {idx} out of range for {} codes", self.num_codes);
                counts[idx] += 1.0;
                for c in 0..d {
                    sums[idx * d + c] += zd[(bi * d + c) * hw + p];
                }
            }
        }
        Ok((counts, sums))
    }
}

/// One grid of code indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeGrid {
    pub height: usize,
    pub width: usize,
    /// Vocabulary size of the codebook that produced the grid.
    pub num_codes: usize,
    pub indices: Vec<usize>,
}

impl CodeGrid {
    pub fn new(height: usize, width: usize, num_codes: usize, indices: Vec<usize>) -> Result<Self> {
        ensure!(indices.len() == height * width, Dimension, "{} indices for a {height}×{width} grid", indices.len());
        if let Some(&bad) = indices.iter().find(|&&i| i >= num_codes) {
            return Err(crate::error::Error::Index(format!("code {bad} out of range for {num_codes} codes")));
        }
        Ok(Self { height, width, num_codes, indices })
    }

    pub fn filled(height: usize, width: usize, num_codes: usize, value: usize) -> Result<Self> {
        Self::new(height, width, num_codes, vec![value; height * width])
    }

    pub fn get(&self, h: usize, w: usize) -> usize {
        self.indices[h * self.width + w]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_latent(z: &Tensor, dim: usize) -> Result<(usize, usize, usize)> {
    ensure!(z.ndim() == 4, Dimension, "latent must be [B, D, H, W], got {:?}", z.shape());
    ensure!(z.dim(1) == dim, Dimension, "latent has {} channels, codebook dimension is {dim}", z.dim(1));
    Ok((z.dim(0), z.dim(2), z.dim(3)))
}

/// Nearest-prototype quantization of `z` (`[B, D, H, W]`). Returns one grid per batch item and
/// the selected prototypes laid out like `z`.
pub fn quantize(z: &Tensor, cb: &Codebook) -> Result<(Vec<CodeGrid>, Tensor)> {
    let (b, h, w) = check_latent(z, cb.dim)?;
    let (d, hw) = (cb.dim, h * w);
    let zd = z.data();
    let per_item = parallel::map_range(b, |bi| {
        let mut idx = Vec::with_capacity(hw);
        let mut eq = vec![0.0; d * hw];
        let mut v = vec![0.0; d];
        for p in 0..hw {
            for c in 0..d {
                v[c] = zd[(bi * d + c) * hw + p];
            }
            let (j, _) = cb.nearest(&v);
            idx.push(j);
            for (c, &e) in cb.prototype(j).iter().enumerate() {
                eq[c * hw + p] = e;
            }
        }
        (idx, eq)
    });
    let mut grids = Vec::with_capacity(b);
    let mut eq_all = Vec::with_capacity(zd.len());
    for (idx, eq) in per_item {
        grids.push(CodeGrid { height: h, width: w, num_codes: cb.num_codes, indices: idx });
        eq_all.extend(eq);
    }
    Ok((grids, Tensor::new(z.shape(), eq_all)?))
}

/// Looks up prototypes for given grids, `[B, D, H, W]`.
pub fn lookup(grids: &[CodeGrid], cb: &Codebook) -> Result<Tensor> {
    ensure!(!grids.is_empty(), Contract, "lookup of no grids");
    let (h, w) = (grids[0].height, grids[0].width);
    let (d, hw) = (cb.dim, h * w);
    let mut out = vec![0.0; grids.len() * d * hw];
    for (bi, g) in grids.iter().enumerate() {
        ensure!(g.height == h && g.width == w, Dimension, "mixed grid sizes in batch");
        for p in 0..hw {
            let j = g.indices[p];
            ensure!(j < cb.num_codes, Index, "code {j} out of range for {} codes", cb.num_codes);
            for (c, &e) in cb.prototype(j).iter().enumerate() {
                out[(bi * d + c) * hw + p] = e;
            }
        }
    }
    Tensor::new(&[grids.len(), d, h, w], out)
}

/// `β · mean((sg(e_q) − z)²)`; the gradient reaches only `z`.
pub fn commitment_loss(tape: &mut Tape, z: Var, e_q: Var, beta: f64) -> Result<Var> {
    ensure!(beta >= 0.0, Config, "beta must be non-negative, got {beta}");
    let target = tape.stop_gradient(e_q)?;
    let m = tape.mse(target, z)?;
    tape.scale(m, beta)
}

/// `mean((sg(z) − e)²)`; the gradient reaches only the prototypes.
pub fn codebook_loss(tape: &mut Tape, z: Var, e_q: Var) -> Result<Var> {
    let target = tape.stop_gradient(z)?;
    tape.mse(target, e_q)
}

/// Forward value `e_q`, gradient copied onto `z`.
pub fn straight_through(tape: &mut Tape, z: Var, e_q: Var) -> Result<Var> {
    tape.straight_through(z, e_q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookUsage {
    pub histogram: Vec<u64>,
    pub perplexity: f64,
}

impl CodebookUsage {
    pub fn dead_codes(&self) -> usize {
        self.histogram.iter().filter(|&&c| c == 0).count()
    }
}

/// Histogram over `num_codes` and `exp(entropy)` of the empirical code distribution.
pub fn codebook_usage(grids: &[CodeGrid], num_codes: usize) -> CodebookUsage {
    let mut histogram = vec![0u64; num_codes];
    for g in grids {
        for &i in &g.indices {
            histogram[i] += 1;
        }
    }
    let total: u64 = histogram.iter().sum();
    let entropy = if total == 0 {
        0.0
    } else {
        -histogram
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                p * p.ln()
            })
            .sum::<f64>()
    };
    CodebookUsage { histogram, perplexity: entropy.exp() }
}
