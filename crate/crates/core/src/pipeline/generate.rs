//! Sampling to images, the evaluation report and the per-level reconstruction demo.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::codec::{HierarchicalCodec, Level};
use crate::error::{ensure, Error, Result};
use crate::pipeline::codes::encode_grid;
use crate::pipeline::config::RunConfig;
use crate::pipeline::data::{write_pnm, Dataset};
use crate::pipeline::train::{extract_codes, load_classifier, load_codec, load_datasets, load_prior, prior_nll};
use crate::pipeline::{fmt_f64, MetricsLog, RunDir};
use crate::prior::{Nll, PriorNetwork};
use crate::rejection::{reject_filter, score, ScoredSample};
use crate::rng;
use crate::tensor::Tensor;
use crate::vq::CodeGrid;

/// Images are decoded in chunks of this many samples.
const DECODE_CHUNK: usize = 16;

/// The trained codec and one prior per level (bottom first).
#[derive(Clone, Debug)]
pub struct Models {
    pub codec: HierarchicalCodec,
    pub priors: Vec<PriorNetwork>,
}

impl Models {
    pub fn load(dir: &RunDir) -> Result<Self> {
        let codec = load_codec(&dir.stage1_checkpoint())?;
        let names = codec.config.level_names();
        let mut priors = Vec::with_capacity(names.len());
        for (l, &level) in names.iter().enumerate() {
            let path = dir.prior_checkpoint(level);
            ensure!(path.exists(), State, "missing prior checkpoint {}", path.display());
            let (found, prior) = load_prior(&path)?;
            ensure!(found == level, Format, "{} holds the `{found}` prior", path.display());
            let k = codec.config.levels[l].codebook_size;
            ensure!(
                prior.config.num_codes == k,
                Config,
                "vocabulary mismatch: prior `{level}` has {} symbols, the codebook {k}",
                prior.config.num_codes
            );
            priors.push(prior);
        }
        Ok(Self { codec, priors })
    }
}

/// Seed of level `l` derived from the sampling seed.
fn level_seed(seed: u64, l: usize) -> u64 {
    rng::stream(seed, u64::MAX - l as u64).next_u64()
}

/// Ancestral sampling top-down through the priors. Returns codes `[level][sample]`.
pub fn sample_codes(
    priors: &[PriorNetwork],
    n: usize,
    labels: &[usize],
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<CodeGrid>>> {
    let mut levels: Vec<Vec<CodeGrid>> = vec![Vec::new(); priors.len()];
    for l in (0..priors.len()).rev() {
        let p = &priors[l];
        let lab = (p.config.num_classes > 0).then_some(labels);
        let above = (l + 1 < priors.len()).then(|| levels[l + 1].as_slice());
        levels[l] = p.sample(n, lab, above, temperature, level_seed(seed, l))?;
    }
    Ok(levels)
}

/// Decodes a code hierarchy `[level][sample]` into one `[1, C, H, W]` image per sample.
pub fn decode_codes(codec: &HierarchicalCodec, codes: &[Vec<CodeGrid>]) -> Result<Vec<Tensor>> {
    let n = codes.first().map_or(0, Vec::len);
    let mut images = Vec::with_capacity(n);
    for start in (0..n).step_by(DECODE_CHUNK) {
        let end = (start + DECODE_CHUNK).min(n);
        let chunk: Vec<Vec<CodeGrid>> = codes.iter().map(|g| g[start..end].to_vec()).collect();
        let x = codec.decode(&codec.lookup(&chunk)?)?;
        for b in 0..end - start {
            images.push(x.batch_item(b)?);
        }
    }
    Ok(images)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub n: usize,
    /// Every sample uses this class; otherwise sample `i` gets class `i mod classes`.
    pub class_label: Option<usize>,
    pub temperature: f64,
    pub keep_fraction: f64,
    pub seed: u64,
    pub classifier: Option<PathBuf>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { n: 8, class_label: None, temperature: 1.0, keep_fraction: 1.0, seed: 0, classifier: None }
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub labels: Vec<usize>,
    /// `[level][sample]`, bottom first.
    pub codes: Vec<Vec<CodeGrid>>,
    /// All decoded samples, `[1, C, H, W]` each.
    pub images: Vec<Tensor>,
    /// Present when a classifier scored the samples.
    pub scores: Option<Vec<ScoredSample>>,
    /// Ids of the samples written to disk, ascending.
    pub kept: Vec<usize>,
    pub files: Vec<PathBuf>,
}

fn image_extension(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Samples, decodes, optionally filters with a classifier, and writes images, code grids and
/// `scores.csv` into `out`.
pub fn generate(cfg: &RunConfig, dir: &RunDir, opts: &GenerateOptions, out: &Path) -> Result<Generated> {
    ensure!(opts.n >= 1, Config, "number of samples must be ≥ 1");
    ensure!(
        opts.keep_fraction > 0.0 && opts.keep_fraction <= 1.0,
        Config,
        "keep fraction must lie in (0, 1], got {}",
        opts.keep_fraction
    );
    ensure!(
        opts.keep_fraction >= 1.0 || opts.classifier.is_some(),
        Config,
        "keep fraction {} < 1 needs a classifier checkpoint",
        opts.keep_fraction
    );
    let classes = cfg.num_classes();
    let labels: Vec<usize> = match (opts.class_label, classes) {
        (Some(c), k) if k > 0 && c >= k => {
            return Err(Error::Index(format!("class {c} out of range for {k} classes")));
        }
        (Some(c), _) => vec![c; opts.n],
        (None, 0) => vec![0; opts.n],
        (None, k) => (0..opts.n).map(|i| i % k).collect(),
    };
    let classifier = opts.classifier.as_deref().map(load_classifier).transpose()?;
    let models = Models::load(dir)?;
    ensure!(models.codec.config == cfg.codec, Config, "the stage-1 checkpoint was trained with a different codec config");
    let codes = sample_codes(&models.priors, opts.n, &labels, opts.temperature, opts.seed)?;
    let images = decode_codes(&models.codec, &codes)?;
    let (scores, kept) = match &classifier {
        Some(clf) => {
            let scored = score(&images, &labels, clf)?;
            let mut kept: Vec<usize> = reject_filter(&scored, opts.keep_fraction)?.iter().map(|s| s.sample_id).collect();
            kept.sort_unstable();
            (Some(scored), kept)
        }
        None => (None, (0..opts.n).collect()),
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ext = image_extension(cfg.codec.channels);
    let names = cfg.codec.level_names();
    let mut files = Vec::with_capacity(kept.len());
    for &i in &kept {
        let path = out.join(format!("sample_{i:04}.{ext}"));
        write_pnm(&images[i], &path)?;
        files.push(path);
        for (l, level) in names.iter().enumerate() {
            let p = out.join(format!("sample_{i:04}_{level}.codes"));
            fs::write(&p, encode_grid(&codes[l][i])?).map_err(|e| Error::io(&p, e))?;
        }
    }
    let header = ["sample_id", "class_label", "score", "kept"].map(String::from);
    let mut csv = MetricsLog::open(&out.join("scores.csv"), &header, false)?;
    for i in 0..opts.n {
        let s = scores.as_ref().map_or(String::new(), |s| fmt_f64(s[i].score));
        let k = u8::from(kept.binary_search(&i).is_ok());
        csv.row(&[i.to_string(), labels[i].to_string(), s, k.to_string()])?;
    }
    info!("wrote {} of {} samples to {}", kept.len(), opts.n, out.display());
    Ok(Generated { labels, codes, images, scores, kept, files })
}

/// Mean squared reconstruction error per `from_level` (index `l` decodes levels `l..`, so
/// index 0 is the full hierarchy). `None` for an empty dataset.
pub fn reconstruction_mse(codec: &HierarchicalCodec, data: &Dataset, batch_size: usize) -> Result<Option<Vec<f64>>> {
    if data.is_empty() {
        return Ok(None);
    }
    let n = codec.num_levels();
    let mut sums = vec![0.0; n];
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut count = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = data.batch(chunk)?;
        let h = codec.encode(&x)?;
        for (l, sum) in sums.iter_mut().enumerate() {
            let xh = codec.decode_partial(&h, l)?;
            *sum += x.data().iter().zip(xh.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        count += x.len();
    }
    Ok(Some(sums.into_iter().map(|s| s / count as f64).collect()))
}

/// Train/validation quantities for one level. MSE decodes this level and those above it,
/// with lower levels zeroed; for the bottom level that is the full reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: Level,
    pub train_nll: Option<Nll>,
    pub val_nll: Option<Nll>,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_images: usize,
    pub val_images: usize,
    /// Full-hierarchy reconstruction error.
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    /// Top level first.
    pub levels: Vec<LevelReport>,
}

impl EvalReport {
    pub fn level(&self, level: Level) -> Option<&LevelReport> {
        self.levels.iter().find(|r| r.level == level)
    }
}

/// Computes the report from loaded models; priors are optional per level.
pub fn evaluate_models(
    codec: &HierarchicalCodec,
    priors: &[Option<PriorNetwork>],
    train: &Dataset,
    val: &Dataset,
    batch_size: usize,
) -> Result<EvalReport> {
    let train_mse = reconstruction_mse(codec, train, batch_size)?
        .ok_or_else(|| Error::Config("cannot evaluate on an empty training set".into()))?;
    let val_mse = reconstruction_mse(codec, val, batch_size)?;
    let codes = extract_codes(codec, train, batch_size)?;
    let val_codes = extract_codes(codec, val, batch_size)?;
    let names = codec.config.level_names();
    let mut levels = Vec::with_capacity(names.len());
    for l in (0..names.len()).rev() {
        let (train_nll, val_nll) = match priors.get(l).and_then(Option::as_ref) {
            Some(p) => (prior_nll(p, l, &codes, batch_size)?, prior_nll(p, l, &val_codes, batch_size)?),
            None => (None, None),
        };
        levels.push(LevelReport {
            level: names[l],
            train_nll,
            val_nll,
            train_mse: train_mse[l],
            val_mse: val_mse.as_ref().map(|v| v[l]),
        });
    }
    Ok(EvalReport {
        train_images: train.len(),
        val_images: val.len(),
        train_mse: train_mse[0],
        val_mse: val_mse.map(|v| v[0]),
        levels,
    })
}

/// Evaluates the run in `dir` on its train/validation data and writes `report.json` and
/// `report.csv`. Levels without a prior checkpoint report no NLL.
pub fn evaluate(cfg: &RunConfig, dir: &RunDir) -> Result<EvalReport> {
    let codec = load_codec(&dir.stage1_checkpoint())?;
    ensure!(codec.config == cfg.codec, Config, "the stage-1 checkpoint was trained with a different codec config");
    let priors = cfg
        .codec
        .level_names()
        .iter()
        .map(|&level| {
            let p = dir.prior_checkpoint(level);
            if p.exists() {
                load_prior(&p).map(|(_, prior)| Some(prior))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = load_datasets(cfg)?;
    let report = evaluate_models(&codec, &priors, &train, &val, cfg.stage2.batch_size)?;
    write_report(&report, dir)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, dir: &RunDir) -> Result<()> {
    dir.create()?;
    let json = dir.report_json();
    let text = serde_json::to_string_pretty(report)?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let header = [
        "level",
        "train_nll_nats",
        "train_nll_bits",
        "val_nll_nats",
        "val_nll_bits",
        "train_mse",
        "val_mse",
    ]
    .map(String::from);
    let mut csv = MetricsLog::open(&dir.report_csv(), &header, false)?;
    let nll = |n: Option<Nll>, bits: bool| n.map_or(String::new(), |n| fmt_f64(if bits { n.bits } else { n.nats }));
    for r in &report.levels {
        csv.row(&[
            r.level.to_string(),
            nll(r.train_nll, false),
            nll(r.train_nll, true),
            nll(r.val_nll, false),
            nll(r.val_nll, true),
            fmt_f64(r.train_mse),
            r.val_mse.map_or(String::new(), fmt_f64),
        ])?;
    }
    Ok(())
}

/// Per-image MSE of every partial reconstruction: `mse[l]` decodes levels `l..`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailRow {
    pub image: usize,
    pub mse: Vec<f64>,
}

/// Reconstructs the first `count` images from each level upward, writing the original and
/// every partial reconstruction into `out` when given.
pub fn reconstruction_detail(
    codec: &HierarchicalCodec,
    data: &Dataset,
    count: usize,
    out: Option<&Path>,
) -> Result<Vec<DetailRow>> {
    let count = count.min(data.len());
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
    }
    let ext = image_extension(data.channels);
    let names = codec.config.level_names();
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let x = data.batch(&[i])?;
        let h = codec.encode(&x)?;
        let mut mse = Vec::with_capacity(names.len());
        if let Some(o) = out {
            write_pnm(&x, &o.join(format!("image_{i:03}_original.{ext}")))?;
        }
        for (l, level) in names.iter().enumerate() {
            let xh = codec.decode_partial(&h, l)?;
            mse.push(x.data().iter().zip(xh.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64);
            if let Some(o) = out {
                write_pnm(&xh, &o.join(format!("image_{i:03}_from_{level}.{ext}")))?;
            }
        }
        rows.push(DetailRow { image: i, mse });
    }
    Ok(rows)
}
