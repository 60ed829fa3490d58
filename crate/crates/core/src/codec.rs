//! Stage 1: the hierarchical VQ-VAE.
//!
//! Levels are ordered bottom → top. Each level's encoder consumes the features of the
//! level below (the bottom level consumes pixels) and downsamples by a power of two.
//! Quantization runs top-down: every non-top level concatenates its features with the
//! upsampled quantized output of the level above before its pre-quantization 1×1 conv.
//! The decoder upsamples every level's quantized map to bottom resolution, concatenates
//! them and decodes back to pixels with transposed convolutions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{log2_factor, Conv, ResStack};
use crate::params::{Adam, ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::vq::{self, codebook_usage, CodeGrid, Codebook};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Bottom,
    Middle,
    Top,
}

impl Level {
    /// Level names for a hierarchy of `n` levels, bottom first.
    pub fn all(n: usize) -> &'static [Level] {
        match n {
            2 => &[Level::Bottom, Level::Top],
            3 => &[Level::Bottom, Level::Middle, Level::Top],
            _ => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Bottom => "bottom",
            Level::Middle => "middle",
            Level::Top => "top",
        }
    }

    /// Position of this level in a hierarchy of `n` levels (0 = bottom).
    pub fn index(self, n: usize) -> Option<usize> {
        Level::all(n).iter().position(|&l| l == self)
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom" => Ok(Level::Bottom),
            "middle" => Ok(Level::Middle),
            "top" => Ok(Level::Top),
            other => Err(Error::Config(format!("unknown level `{other}` (expected top, middle or bottom)"))),
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    /// Downsampling factor relative to the level below (or to pixels for the bottom level).
    pub downsample: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Bottom → top.
    pub levels: Vec<LevelConfig>,
    pub hidden_units: usize,
    pub residual_units: usize,
    pub residual_layers: usize,
    #[serde(default = "default_encoder_filter")]
    pub encoder_filter: usize,
    #[serde(default = "default_upsample_filter")]
    pub upsample_filter: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Train prototypes with the gradient codebook loss instead of EMA updates.
    #[serde(default)]
    pub codebook_loss: bool,
}

fn default_encoder_filter() -> usize {
    3
}
fn default_upsample_filter() -> usize {
    4
}
fn default_beta() -> f64 {
    0.25
}
fn default_gamma() -> f64 {
    vq::DEFAULT_GAMMA
}
fn default_epsilon() -> f64 {
    vq::DEFAULT_EPSILON
}

impl CodecConfig {
    /// 32×32 inputs, bottom 8×8 and top 4×4 grids.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            levels: vec![
                LevelConfig { downsample: 4, codebook_size: 64, code_dim: 16 },
                LevelConfig { downsample: 2, codebook_size: 64, code_dim: 16 },
            ],
            hidden_units: 32,
            residual_units: 16,
            residual_layers: 2,
            encoder_filter: 3,
            upsample_filter: 4,
            beta: 0.25,
            gamma: vq::DEFAULT_GAMMA,
            epsilon: vq::DEFAULT_EPSILON,
            codebook_loss: false,
        }
    }

    /// ImageNet-256 settings: 64×64 bottom and 32×32 top grids, K = 512, D = 64.
    pub fn imagenet256() -> Self {
        Self {
            image_size: 256,
            channels: 3,
            levels: vec![
                LevelConfig { downsample: 4, codebook_size: 512, code_dim: 64 },
                LevelConfig { downsample: 2, codebook_size: 512, code_dim: 64 },
            ],
            hidden_units: 128,
            residual_units: 64,
            residual_layers: 2,
            encoder_filter: 3,
            upsample_filter: 4,
            beta: 0.25,
            gamma: vq::DEFAULT_GAMMA,
            epsilon: vq::DEFAULT_EPSILON,
            codebook_loss: false,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_names(&self) -> &'static [Level] {
        Level::all(self.levels.len())
    }

    /// Grid side of level `l` (0 = bottom).
    pub fn grid_size(&self, l: usize) -> usize {
        let f: usize = self.levels[..=l].iter().map(|c| c.downsample).product();
        self.image_size / f
    }

    pub fn level_index(&self, level: Level) -> Result<usize> {
        level
            .index(self.num_levels())
            .ok_or_else(|| Error::Config(format!("level `{level}` not present in a {}-level hierarchy", self.num_levels())))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (2..=3).contains(&self.levels.len()),
            Config,
            "hierarchy must have 2 or 3 levels, got {}",
            self.levels.len()
        );
        ensure!(self.channels >= 1, Config, "channels must be ≥ 1");
        ensure!(self.hidden_units >= 2 && self.hidden_units.is_multiple_of(2), Config, "hidden_units must be even and ≥ 2");
        ensure!(self.residual_units >= 1, Config, "residual_units must be ≥ 1");
        ensure!(self.encoder_filter % 2 == 1, Config, "encoder_filter must be odd, got {}", self.encoder_filter);
        ensure!(
            self.upsample_filter >= 2 && self.upsample_filter.is_multiple_of(2),
            Config,
            "upsample_filter must be even and ≥ 2, got {}",
            self.upsample_filter
        );
        ensure!(self.beta >= 0.0, Config, "beta must be non-negative");
        ensure!((0.0..=1.0).contains(&self.gamma), Config, "gamma must lie in [0, 1]");
        ensure!(self.epsilon > 0.0, Config, "epsilon must be positive");
        let mut size = self.image_size;
        for (l, lc) in self.levels.iter().enumerate() {
            ensure!(
                log2_factor(lc.downsample).is_some(),
                Config,
                "level {l}: downsample {} is not a power of two ≥ 2",
                lc.downsample
            );
            ensure!(
                size.is_multiple_of(lc.downsample),
                Config,
                "level {l}: size {size} not divisible by downsample {}",
                lc.downsample
            );
            size /= lc.downsample;
            ensure!(lc.codebook_size >= 1 && lc.codebook_size <= u16::MAX as usize, Config, "level {l}: bad codebook size");
            ensure!(lc.code_dim >= 1, Config, "level {l}: code_dim must be ≥ 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LevelEncoder {
    downs: Vec<Conv>,
    conv: Conv,
    res: ResStack,
    /// Upsamples the quantized map of the level above (absent on the top level).
    cond_up: Vec<Conv>,
    pre_quant: Conv,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Per level ≥ 1: transposed convs bringing that level to bottom resolution.
    level_up: Vec<Vec<Conv>>,
    conv_in: Conv,
    res: ResStack,
    ups: Vec<Conv>,
}

/// Per-level output of a differentiable forward pass.
#[derive(Clone, Debug)]
pub struct LevelForward {
    /// Pre-quantization encoder output.
    pub z: Var,
    /// Selected prototypes.
    pub e_q: Var,
    /// Straight-through output fed downstream (value of `e_q`, gradient to `z`).
    pub st: Var,
    pub codes: Vec<CodeGrid>,
}

#[derive(Clone, Debug)]
pub struct CodecForward {
    /// Bottom → top.
    pub levels: Vec<LevelForward>,
    pub x_hat: Var,
}

/// Which terms of the stage-1 objective to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerms {
    All,
    Reconstruction,
    Commitment,
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub reconstruction: Var,
    pub commitment: Vec<Var>,
}

/// Discrete codes and quantized maps for every level, bottom → top.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentHierarchy {
    pub codes: Vec<Vec<CodeGrid>>,
    pub quantized: Vec<Tensor>,
}

impl LatentHierarchy {
    pub fn batch_size(&self) -> usize {
        self.codes.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug)]
pub struct HierarchicalCodec {
    pub config: CodecConfig,
    pub params: ParamStore,
    pub codebooks: Vec<Codebook>,
    /// Prototype parameters when the gradient codebook loss replaces EMA.
    codebook_params: Option<Vec<ParamId>>,
    encoders: Vec<LevelEncoder>,
    decoder: Decoder,
}

impl HierarchicalCodec {
    pub fn new(config: CodecConfig, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let n = config.num_levels();
        let names = config.level_names();
        let (h, r) = (config.hidden_units, config.residual_units);
        let mut encoders = Vec::with_capacity(n);
        for (l, lc) in config.levels.iter().enumerate() {
            let prefix = format!("enc.{}", names[l]);
            let steps = log2_factor(lc.downsample).unwrap();
            let mut downs = Vec::with_capacity(steps);
            for s in 0..steps {
                let in_ch = match (l, s) {
                    (0, 0) => config.channels,
                    (0, _) => h / 2,
                    _ => h,
                };
                let out_ch = if l == 0 && s + 1 < steps { h / 2 } else { h };
                downs.push(Conv::down2(&mut store, &format!("{prefix}.down{s}"), in_ch, out_ch, rng)?);
            }
            let conv = Conv::same(&mut store, &format!("{prefix}.conv"), h, h, config.encoder_filter, rng)?;
            let res = ResStack::new(&mut store, &format!("{prefix}.res"), h, r, config.residual_layers, rng)?;
            let (cond_up, pre_in) = if l + 1 < n {
                let above = &config.levels[l + 1];
                let d = above.code_dim;
                let ups = (0..log2_factor(above.downsample).unwrap())
                    .map(|s| Conv::up2(&mut store, &format!("{prefix}.cond_up{s}"), d, d, config.upsample_filter, rng))
                    .collect::<Result<Vec<_>>>()?;
                (ups, h + d)
            } else {
                (Vec::new(), h)
            };
            let pre_quant = Conv::same(&mut store, &format!("{prefix}.pre_quant"), pre_in, lc.code_dim, 1, rng)?;
            encoders.push(LevelEncoder { downs, conv, res, cond_up, pre_quant });
        }

        let mut level_up = Vec::with_capacity(n);
        let mut total_dim = config.levels[0].code_dim;
        level_up.push(Vec::new());
        for l in 1..n {
            let d = config.levels[l].code_dim;
            total_dim += d;
            let factor: usize = config.levels[1..=l].iter().map(|c| c.downsample).product();
            let ups = (0..log2_factor(factor).unwrap())
                .map(|s| Conv::up2(&mut store, &format!("dec.{}.up{s}", names[l]), d, d, config.upsample_filter, rng))
                .collect::<Result<Vec<_>>>()?;
            level_up.push(ups);
        }
        let conv_in = Conv::same(&mut store, "dec.conv_in", total_dim, h, config.encoder_filter, rng)?;
        let res = ResStack::new(&mut store, "dec.res", h, r, config.residual_layers, rng)?;
        let steps = log2_factor(config.levels[0].downsample).unwrap();
        let mut ups = Vec::with_capacity(steps);
        for s in 0..steps {
            let in_ch = if s == 0 { h } else { h / 2 };
            let out_ch = if s + 1 == steps { config.channels } else { h / 2 };
            ups.push(Conv::up2(&mut store, &format!("dec.up{s}"), in_ch, out_ch, config.upsample_filter, rng)?);
        }

        let mut codebooks = Vec::with_capacity(n);
        for lc in &config.levels {
            codebooks.push(Codebook::new(lc.codebook_size, lc.code_dim, config.gamma, config.epsilon, rng)?);
        }
        let codebook_params = if config.codebook_loss {
            let ids = codebooks
                .iter()
                .zip(names)
                .map(|(cb, name)| store.add(format!("codebook.{name}"), cb.embeddings().clone()))
                .collect::<Result<Vec<_>>>()?;
            Some(ids)
        } else {
            None
        };
        Ok(Self { config, params: store, codebooks, codebook_params, encoders, decoder: Decoder { level_up, conv_in, res, ups } })
    }

    pub fn num_levels(&self) -> usize {
        self.config.num_levels()
    }

    /// Parameters that belong to the decoder (names prefixed `dec.`).
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, p)| p.name.starts_with("dec.")).map(|(id, _)| id).collect()
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, p)| p.name.starts_with("enc.")).map(|(id, _)| id).collect()
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        let c = &self.config;
        ensure!(
            x.len() == 4 && x[1] == c.channels && x[2] == c.image_size && x[3] == c.image_size,
            Dimension,
            "codec expects [B, {}, {}, {}], got {x:?}",
            c.channels,
            c.image_size,
            c.image_size
        );
        Ok(())
    }

    /// Encoder feature stacks for every level (before conditioning and pre-quantization).
    fn features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.num_levels());
        let mut h = x;
        for enc in &self.encoders {
            for (i, down) in enc.downs.iter().enumerate() {
                if i > 0 || !feats.is_empty() {
                    h = tape.relu(h)?;
                }
                h = down.forward(tape, store, h)?;
            }
            h = tape.relu(h)?;
            h = enc.conv.forward(tape, store, h)?;
            h = enc.res.forward(tape, store, h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    fn upsample_chain(tape: &mut Tape, store: &ParamStore, convs: &[Conv], mut x: Var) -> Result<Var> {
        for (i, c) in convs.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x)?;
            }
            x = c.forward(tape, store, x)?;
        }
        Ok(x)
    }

    /// Pre-quantization output of level `l` given its features and the quantized level above.
    fn pre_quantize(&self, tape: &mut Tape, store: &ParamStore, l: usize, feat: Var, above: Option<Var>) -> Result<Var> {
        let enc = &self.encoders[l];
        let input = match above {
            Some(a) => {
                let up = Self::upsample_chain(tape, store, &enc.cond_up, a)?;
                tape.concat_channels(&[feat, up])?
            }
            None => feat,
        };
        enc.pre_quant.forward(tape, store, input)
    }

    fn codebook_var(&self, tape: &mut Tape, store: &ParamStore, l: usize) -> Option<Var> {
        self.codebook_params.as_ref().map(|ids| tape.param(store, ids[l]))
    }

    /// Quantizes a tape value against the current codebook of level `l`.
    fn quantize_level(&self, tape: &mut Tape, store: &ParamStore, l: usize, z: Var) -> Result<LevelForward> {
        let (codes, e_q_value) = match &self.codebook_params {
            Some(ids) => {
                let cb = Codebook::from_embeddings(store.get(ids[l]).clone(), 1.0, self.config.epsilon)?;
                vq::quantize(tape.value(z), &cb)?
            }
            None => vq::quantize(tape.value(z), &self.codebooks[l])?,
        };
        let e_q = match self.codebook_var(tape, store, l) {
            Some(table) => {
                let s = tape.shape(z).to_vec();
                let flat: Vec<usize> = codes.iter().flat_map(|g| g.indices.iter().copied()).collect();
                tape.gather_rows(table, &flat, s[0], s[2], s[3])?
            }
            None => tape.constant(e_q_value),
        };
        let st = vq::straight_through(tape, z, e_q)?;
        Ok(LevelForward { z, e_q, st, codes })
    }

    /// Full differentiable forward pass with parameters taken from `store`.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<CodecForward> {
        self.check_input(tape.shape(x))?;
        let feats = self.features(tape, store, x)?;
        let n = self.num_levels();
        let mut levels: Vec<Option<LevelForward>> = vec![None; n];
        let mut above: Option<Var> = None;
        for l in (0..n).rev() {
            let z = self.pre_quantize(tape, store, l, feats[l], above)?;
            let lf = self.quantize_level(tape, store, l, z)?;
            above = Some(lf.st);
            levels[l] = Some(lf);
        }
        let levels: Vec<LevelForward> = levels.into_iter().map(Option::unwrap).collect();
        let sts: Vec<Var> = levels.iter().map(|lf| lf.st).collect();
        let x_hat = self.decode_vars(tape, store, &sts)?;
        Ok(CodecForward { levels, x_hat })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<CodecForward> {
        self.forward_with(tape, &self.params, x)
    }

    fn decode_vars(&self, tape: &mut Tape, store: &ParamStore, quantized: &[Var]) -> Result<Var> {
        ensure!(
            quantized.len() == self.num_levels(),
            Contract,
            "decode needs {} levels, got {}",
            self.num_levels(),
            quantized.len()
        );
        let mut parts = Vec::with_capacity(quantized.len());
        parts.push(quantized[0]);
        for (l, &q) in quantized.iter().enumerate().skip(1) {
            parts.push(Self::upsample_chain(tape, store, &self.decoder.level_up[l], q)?);
        }
        let x = tape.concat_channels(&parts)?;
        let mut h = self.decoder.conv_in.forward(tape, store, x)?;
        h = self.decoder.res.forward(tape, store, h)?;
        for (i, up) in self.decoder.ups.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            h = up.forward(tape, store, h)?;
        }
        Ok(h)
    }

    /// `mean((x − x̂)²) + Σ_levels β·mean((sg(e) − z)²)` (plus the codebook term when enabled).
    pub fn loss(&self, tape: &mut Tape, x: Var, fwd: &CodecForward, terms: LossTerms) -> Result<LossParts> {
        let reconstruction = tape.mse(x, fwd.x_hat)?;
        let mut commitment = Vec::with_capacity(fwd.levels.len());
        for lf in &fwd.levels {
            commitment.push(vq::commitment_loss(tape, lf.z, lf.e_q, self.config.beta)?);
        }
        let mut total = match terms {
            LossTerms::Reconstruction => reconstruction,
            LossTerms::Commitment => sum_vars(tape, &commitment)?,
            LossTerms::All => {
                let c = sum_vars(tape, &commitment)?;
                tape.add(reconstruction, c)?
            }
        };
        if self.codebook_params.is_some() && terms == LossTerms::All {
            for lf in &fwd.levels {
                let cl = vq::codebook_loss(tape, lf.z, lf.e_q)?;
                total = tape.add(total, cl)?;
            }
        }
        Ok(LossParts { total, reconstruction, commitment })
    }

    /// Encodes a batch `[B, C, H, W]` into its latent hierarchy.
    pub fn encode(&self, x: &Tensor) -> Result<LatentHierarchy> {
        let mut tape = Tape::new_inference();
        let xv = tape.constant(x.clone());
        let fwd = self.forward_encoder_only(&mut tape, xv)?;
        Ok(LatentHierarchy {
            quantized: fwd.iter().map(|lf| tape.value(lf.e_q).clone()).collect(),
            codes: fwd.into_iter().map(|lf| lf.codes).collect(),
        })
    }

    fn forward_encoder_only(&self, tape: &mut Tape, x: Var) -> Result<Vec<LevelForward>> {
        self.check_input(tape.shape(x))?;
        let feats = self.features(tape, &self.params, x)?;
        let n = self.num_levels();
        let mut levels: Vec<Option<LevelForward>> = vec![None; n];
        let mut above = None;
        for l in (0..n).rev() {
            let z = self.pre_quantize(tape, &self.params, l, feats[l], above)?;
            let lf = self.quantize_level(tape, &self.params, l, z)?;
            above = Some(lf.st);
            levels[l] = Some(lf);
        }
        Ok(levels.into_iter().map(Option::unwrap).collect())
    }

    /// Pre-quantization encoder output of level `l` with the quantized map of the level above
    /// supplied explicitly (ignored for the top level).
    pub fn pre_quantization(&self, x: &Tensor, l: usize, above: Option<&Tensor>) -> Result<Tensor> {
        ensure!(l < self.num_levels(), Index, "level {l} out of range");
        let mut tape = Tape::new_inference();
        let xv = tape.constant(x.clone());
        self.check_input(tape.shape(xv))?;
        let feats = self.features(&mut tape, &self.params, xv)?;
        let above = if l + 1 < self.num_levels() {
            let a = above.ok_or_else(|| Error::Contract(format!("level {l} needs the quantized level above")))?;
            Some(tape.constant(a.clone()))
        } else {
            None
        };
        let z = self.pre_quantize(&mut tape, &self.params, l, feats[l], above)?;
        Ok(tape.value(z).clone())
    }

    /// Quantized maps for given code grids (bottom → top).
    pub fn lookup(&self, codes: &[Vec<CodeGrid>]) -> Result<LatentHierarchy> {
        ensure!(codes.len() == self.num_levels(), Contract, "expected {} levels of codes", self.num_levels());
        let mut quantized = Vec::with_capacity(codes.len());
        for (l, grids) in codes.iter().enumerate() {
            let g = self.config.grid_size(l);
            ensure!(
                grids.iter().all(|c| c.height == g && c.width == g),
                Dimension,
                "level {l} grids must be {g}×{g}"
            );
            quantized.push(vq::lookup(grids, &self.effective_codebook(l)?)?);
        }
        Ok(LatentHierarchy { codes: codes.to_vec(), quantized })
    }

    fn effective_codebook(&self, l: usize) -> Result<Codebook> {
        match &self.codebook_params {
            Some(ids) => Codebook::from_embeddings(self.params.get(ids[l]).clone(), 1.0, self.config.epsilon),
            None => Ok(self.codebooks[l].clone()),
        }
    }

    /// Feed-forward decode of a complete hierarchy.
    pub fn decode(&self, h: &LatentHierarchy) -> Result<Tensor> {
        self.decode_partial(h, 0)
    }

    /// Decodes using only levels `from_level..` (0 = all); lower levels contribute zeros.
    pub fn decode_partial(&self, h: &LatentHierarchy, from_level: usize) -> Result<Tensor> {
        ensure!(
            h.quantized.len() == self.num_levels(),
            Contract,
            "hierarchy has {} levels, codec needs {}",
            h.quantized.len(),
            self.num_levels()
        );
        ensure!(from_level < self.num_levels(), Index, "from_level {from_level} out of range");
        let mut tape = Tape::new_inference();
        let vars: Vec<Var> = h
            .quantized
            .iter()
            .enumerate()
            .map(|(l, q)| {
                if l < from_level {
                    tape.constant(Tensor::zeros(q.shape()))
                } else {
                    tape.constant(q.clone())
                }
            })
            .collect();
        let out = self.decode_vars(&mut tape, &self.params, &vars)?;
        Ok(tape.value(out).clone())
    }

    /// One optimization step of the stage-1 objective followed by one EMA update per codebook.
    pub fn train_step(&mut self, batch: &Tensor, optimizer: &mut Adam, step: u64) -> Result<StepStats> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let fwd = self.forward(&mut tape, x)?;
        let parts = self.loss(&mut tape, x, &fwd, LossTerms::All)?;
        let loss = tape.value(parts.total).item()?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let stats = StepStats {
            loss,
            mse: tape.value(parts.reconstruction).item()?,
            commitment: parts.commitment.iter().map(|&v| tape.value(v).item()).collect::<Result<_>>()?,
            perplexity: fwd
                .levels
                .iter()
                .zip(&self.config.levels)
                .map(|(lf, lc)| codebook_usage(&lf.codes, lc.codebook_size).perplexity)
                .collect(),
        };
        let z_values: Vec<Tensor> = fwd.levels.iter().map(|lf| tape.value(lf.z).clone()).collect();
        let grads = tape.backward(parts.total)?.param_grads(&self.params);
        optimizer.update(&mut self.params, &grads);
        if let Some(ids) = &self.codebook_params {
            for (cb, &id) in self.codebooks.iter_mut().zip(ids) {
                *cb.embeddings_mut() = self.params.get(id).clone();
            }
        } else {
            for ((cb, z), lf) in self.codebooks.iter_mut().zip(&z_values).zip(&fwd.levels) {
                cb.ema_update(z, &lf.codes)?;
            }
        }
        Ok(stats)
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mse: f64,
    /// Per level, bottom → top.
    pub commitment: Vec<f64>,
    pub perplexity: Vec<f64>,
}
