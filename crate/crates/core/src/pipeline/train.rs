//! Stage 1 (codec), code extraction and stage 2 (one prior per level), plus the toy classifier.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;

use crate::codec::{HierarchicalCodec, Level, StepStats};
use crate::error::{ensure, Error, Result};
use crate::params::Adam;
use crate::pipeline::checkpoint::{
    decode_adam, decode_codebooks, decode_params, decode_rng, decode_u64, encode_adam, encode_codebooks, encode_params,
    encode_rng, encode_u64, Checkpoint, Reader, Writer,
};
use crate::pipeline::codes::CodeDataset;
use crate::pipeline::config::RunConfig;
use crate::pipeline::data::{hash_split, ingest, synthetic_dataset, Dataset};
use crate::pipeline::{fmt_f64, MetricsLog, RunDir};
use crate::prior::{Nll, PriorConfig, PriorNetwork};
use crate::rejection::{train_toy_classifier, ClassifierConfig, ToyClassifier};
use crate::rng::{self, seeded, Rng64, RngState};
use crate::vq::CodeGrid;

/// Exclusive ownership of a run directory for the lifetime of a training process.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &RunDir) -> Result<Self> {
        dir.create()?;
        let path = dir.lock();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::State(format!(
                "{} is in use by another training process (delete {} if that process is gone)",
                dir.root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Training and validation images for a run.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let split = |all: Dataset| {
        if d.holdout {
            hash_split(&all)
        } else {
            let empty = all.subset(&[]);
            (all, empty)
        }
    };
    let (train, val) = match (&d.path, &d.synthetic) {
        (Some(p), _) => {
            let all = ingest(p, d.labels.as_deref())?;
            match &d.val_path {
                Some(vp) => (all, ingest(vp, d.val_labels.as_deref())?),
                None => split(all),
            }
        }
        (None, Some(s)) => {
            let (size, ch) = (cfg.codec.image_size, cfg.codec.channels);
            let all = synthetic_dataset(s.count + s.val_count, s.num_classes, size, ch, s.seed)?;
            if s.val_count > 0 {
                let train: Vec<usize> = (0..s.count).collect();
                let val: Vec<usize> = (s.count..s.count + s.val_count).collect();
                (all.subset(&train), all.subset(&val))
            } else {
                split(all)
            }
        }
        (None, None) => return Err(Error::Config("no dataset: set data.path or data.synthetic".into())),
    };
    ensure!(!train.is_empty(), Config, "the training set is empty");
    for ds in [&train, &val] {
        check_dataset(cfg, ds)?;
    }
    Ok((train, val))
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Ok(());
    }
    let c = &cfg.codec;
    ensure!(
        ds.height == c.image_size && ds.width == c.image_size && ds.channels == c.channels,
        Config,
        "images are {}×{}×{} but the codec expects {}×{}×{}",
        ds.height,
        ds.width,
        ds.channels,
        c.image_size,
        c.image_size,
        c.channels
    );
    let classes = cfg.num_classes();
    if classes > 0 {
        if let Some(&bad) = ds.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
        }
    }
    Ok(())
}

/// The whole set when it fits in one batch, otherwise `batch_size` distinct random indices.
pub fn select_batch(n: usize, batch_size: usize, rng: &mut Rng64) -> Vec<usize> {
    if batch_size >= n {
        (0..n).collect()
    } else {
        sample(rng, n, batch_size).into_vec()
    }
}

/// Codec section: config JSON, then length-prefixed parameters and codebooks.
pub fn encode_codec(codec: &HierarchicalCodec) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(&serde_json::to_string(&codec.config).expect("codec config serializes"));
    w.blob(&encode_params(&codec.params));
    w.blob(&encode_codebooks(&codec.codebooks));
    w.0
}

pub fn decode_codec(bytes: &[u8]) -> Result<HierarchicalCodec> {
    let mut r = Reader::new(bytes);
    let config = serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("codec config: {e}")))?;
    let mut codec = HierarchicalCodec::new(config, &mut seeded(0))?;
    codec.params.load_from(&decode_params(r.blob()?)?)?;
    let books = decode_codebooks(r.blob()?)?;
    r.finish()?;
    ensure!(books.len() == codec.codebooks.len(), Format, "{} codebooks for {} levels", books.len(), codec.codebooks.len());
    for (l, (b, cb)) in books.iter().zip(&codec.codebooks).enumerate() {
        ensure!(
            b.num_codes() == cb.num_codes() && b.dim() == cb.dim(),
            Format,
            "codebook {l} is {}×{}, config says {}×{}",
            b.num_codes(),
            b.dim(),
            cb.num_codes(),
            cb.dim()
        );
    }
    codec.codebooks = books;
    Ok(codec)
}

fn config_section(ck: &Checkpoint) -> Result<RunConfig> {
    let text = std::str::from_utf8(ck.get("config")?).map_err(|e| Error::Format(format!("config section: {e}")))?;
    RunConfig::from_json(text)
}

/// Loads the trained codec of a stage-1 checkpoint.
pub fn load_codec(path: &Path) -> Result<HierarchicalCodec> {
    decode_codec(Checkpoint::load(path)?.get("codec")?)
}

/// Stage-1 training state.
#[derive(Clone, Debug)]
pub struct Stage1Trainer {
    pub config: RunConfig,
    pub codec: HierarchicalCodec,
    pub optimizer: Adam,
    pub rng: Rng64,
    pub step: u64,
}

impl Stage1Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let codec = HierarchicalCodec::new(config.codec.clone(), &mut rng)?;
        let optimizer = Adam::new(config.stage1.optimizer, &codec.params);
        Ok(Self { config, codec, optimizer, rng, step: 0 })
    }

    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        let idx = select_batch(data.len(), self.config.stage1.batch_size, &mut self.rng);
        let batch = data.batch(&idx)?;
        self.step += 1;
        self.codec.train_step(&batch, &mut self.optimizer, self.step)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put("config", self.config.to_json().into_bytes());
        ck.put("codec", encode_codec(&self.codec));
        ck.put("optimizer", encode_adam(&self.optimizer));
        ck.put("rng", encode_rng(&RngState::capture(&self.rng)));
        ck.put("step", encode_u64(self.step));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = config_section(ck)?;
        let codec = decode_codec(ck.get("codec")?)?;
        ensure!(codec.config == config.codec, Format, "codec section disagrees with the config echo");
        let optimizer = decode_adam(ck.get("optimizer")?, &codec.params)?;
        let rng = decode_rng(ck.get("rng")?)?.restore();
        let step = decode_u64(ck.get("step")?)?;
        Ok(Self { config, codec, optimizer, rng, step })
    }
}

/// Trains the codec to `cfg.stage1.steps`, writing metrics and checkpoints into `dir`.
/// With `resume`, training continues from that checkpoint; its model and optimizer settings
/// win and only the step budget and logging cadence come from `cfg`.
pub fn run_stage1(cfg: &RunConfig, dir: &RunDir, resume: Option<&Path>) -> Result<Stage1Trainer> {
    let _lock = RunLock::acquire(dir)?;
    let (train, _) = load_datasets(cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Stage1Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            ensure!(t.config.codec == cfg.codec, Config, "{} was trained with a different codec config", p.display());
            t.config.stage1.steps = cfg.stage1.steps;
            t.config.stage1.log_interval = cfg.stage1.log_interval;
            t.config.stage1.checkpoint_interval = cfg.stage1.checkpoint_interval;
            info!("resuming stage 1 from step {}", t.step);
            t
        }
        None => Stage1Trainer::new(cfg.clone())?,
    };
    let names = cfg.codec.level_names();
    let mut header = vec!["step".to_string(), "loss".into(), "mse".into()];
    header.extend(names.iter().map(|l| format!("perplexity_{l}")));
    header.extend(names.iter().map(|l| format!("commitment_{l}")));
    let mut metrics = MetricsLog::open(&dir.stage1_metrics(), &header, resume.is_some())?;
    let t = trainer.config.stage1.clone();
    info!("stage 1: {} images, {} steps, batch {}", train.len(), t.steps, t.batch_size);
    while trainer.step < t.steps {
        let stats = trainer.train_step(&train)?;
        let s = trainer.step;
        if s % t.log_interval == 0 || s == t.steps {
            let ppl: Vec<String> = stats.perplexity.iter().map(|p| format!("{p:.2}")).collect();
            info!("step {s}: loss {:.6} mse {:.6} perplexity [{}]", stats.loss, stats.mse, ppl.join(", "));
            let mut row = vec![s.to_string(), fmt_f64(stats.loss), fmt_f64(stats.mse)];
            row.extend(stats.perplexity.iter().chain(&stats.commitment).map(|&v| fmt_f64(v)));
            metrics.row(&row)?;
        }
        if t.checkpoint_interval > 0 && s % t.checkpoint_interval == 0 && s < t.steps {
            trainer.to_checkpoint().save(&dir.stage1_checkpoint())?;
        }
    }
    trainer.to_checkpoint().save(&dir.stage1_checkpoint())?;
    Ok(trainer)
}

/// Encodes every image once (no parameter updates) into per-level code grids.
pub fn extract_codes(codec: &HierarchicalCodec, data: &Dataset, batch_size: usize) -> Result<CodeDataset> {
    let c = &codec.config;
    if !data.is_empty() {
        ensure!(
            data.height == c.image_size && data.width == c.image_size && data.channels == c.channels,
            Config,
            "images are {}×{}×{} but the checkpoint's codec expects {}×{}×{}",
            data.height,
            data.width,
            data.channels,
            c.image_size,
            c.image_size,
            c.channels
        );
    }
    let mut levels: Vec<Vec<CodeGrid>> = vec![Vec::with_capacity(data.len()); codec.num_levels()];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let h = codec.encode(&data.batch(chunk)?)?;
        for (dst, src) in levels.iter_mut().zip(h.codes) {
            dst.extend(src);
        }
    }
    CodeDataset::new(levels, data.labels.clone())
}

/// Extracts train and validation codes with the stage-1 checkpoint and writes both files.
pub fn run_extract(cfg: &RunConfig, dir: &RunDir, checkpoint: Option<&Path>) -> Result<(CodeDataset, CodeDataset)> {
    let ck = checkpoint.map_or_else(|| dir.stage1_checkpoint(), Path::to_path_buf);
    let codec = load_codec(&ck)?;
    ensure!(codec.config == cfg.codec, Config, "{} was trained with a different codec config", ck.display());
    let (train, val) = load_datasets(cfg)?;
    let bs = cfg.stage1.batch_size;
    let codes = extract_codes(&codec, &train, bs)?;
    let val_codes = extract_codes(&codec, &val, bs)?;
    dir.create()?;
    codes.save(&dir.codes())?;
    val_codes.save(&dir.val_codes())?;
    info!("extracted codes for {} training and {} validation images", codes.len(), val_codes.len());
    Ok((codes, val_codes))
}

/// Checks that a code dataset matches the codec levels and every prior's grid and vocabulary.
pub fn check_codes(cfg: &RunConfig, codes: &CodeDataset) -> Result<()> {
    let names = cfg.codec.level_names();
    ensure!(
        codes.num_levels() == names.len(),
        Config,
        "code dataset has {} levels, the codec has {}",
        codes.num_levels(),
        names.len()
    );
    for (l, &level) in names.iter().enumerate() {
        let p = cfg.prior(level)?;
        if let Some(g) = codes.levels[l].first() {
            ensure!(
                g.num_codes == p.num_codes,
                Config,
                "vocabulary mismatch: `{level}` codes use {} symbols, the prior expects {}",
                g.num_codes,
                p.num_codes
            );
            ensure!(
                g.height == p.height && g.width == p.width,
                Config,
                "`{level}` codes are {}×{}, the prior expects {}×{}",
                g.height,
                g.width,
                p.height,
                p.width
            );
        }
    }
    Ok(())
}

/// Inputs of the level-`l` prior for the items at `idx`: grids, labels and the grids above.
type PriorBatch = (Vec<CodeGrid>, Option<Vec<usize>>, Option<Vec<CodeGrid>>);

fn prior_batch(prior: &PriorConfig, l: usize, codes: &CodeDataset, idx: &[usize]) -> PriorBatch {
    let grids = idx.iter().map(|&i| codes.levels[l][i].clone()).collect();
    let labels = (prior.num_classes > 0).then(|| idx.iter().map(|&i| codes.labels[i]).collect());
    let above = prior.condition.map(|_| idx.iter().map(|&i| codes.levels[l + 1][i].clone()).collect());
    (grids, labels, above)
}

/// Mean NLL per position of the level-`l` prior over a whole code dataset (`None` when empty).
pub fn prior_nll(prior: &PriorNetwork, l: usize, codes: &CodeDataset, batch_size: usize) -> Result<Option<Nll>> {
    if codes.is_empty() {
        return Ok(None);
    }
    let idx: Vec<usize> = (0..codes.len()).collect();
    let (grids, labels, above) = prior_batch(&prior.config, l, codes, &idx);
    prior.nll(&grids, labels.as_deref(), above.as_deref(), batch_size).map(Some)
}

/// Prior section: config JSON, then length-prefixed parameters.
pub fn encode_prior(prior: &PriorNetwork) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(&serde_json::to_string(&prior.config).expect("prior config serializes"));
    w.blob(&encode_params(&prior.params));
    w.0
}

pub fn decode_prior(bytes: &[u8]) -> Result<PriorNetwork> {
    let mut r = Reader::new(bytes);
    let config = serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("prior config: {e}")))?;
    let mut prior = PriorNetwork::new(config, &mut seeded(0))?;
    prior.params.load_from(&decode_params(r.blob()?)?)?;
    r.finish()?;
    Ok(prior)
}

/// Loads the trained prior of a stage-2 checkpoint together with its level.
pub fn load_prior(path: &Path) -> Result<(Level, PriorNetwork)> {
    let ck = Checkpoint::load(path)?;
    let name = ck
        .section_names()
        .find(|n| n.starts_with("prior."))
        .ok_or_else(|| Error::Format(format!("{} holds no prior", path.display())))?
        .to_string();
    let level: Level = name["prior.".len()..].parse()?;
    Ok((level, decode_prior(ck.get(&name)?)?))
}

/// Stage-2 training state of one level's prior.
#[derive(Clone, Debug)]
pub struct PriorTrainer {
    pub config: RunConfig,
    pub level: Level,
    pub prior: PriorNetwork,
    pub optimizer: Adam,
    pub rng: Rng64,
    pub step: u64,
}

impl PriorTrainer {
    pub fn new(config: RunConfig, level: Level) -> Result<Self> {
        config.validate()?;
        let l = config.codec.level_index(level)?;
        let mut rng = rng::stream(config.seed, 1 + l as u64);
        let prior = PriorNetwork::new(config.prior(level)?.clone(), &mut rng)?;
        let optimizer = Adam::new(config.stage2.optimizer, &prior.params);
        Ok(Self { config, level, prior, optimizer, rng, step: 0 })
    }

    pub fn level_index(&self) -> usize {
        self.level.index(self.config.codec.num_levels()).expect("level validated at construction")
    }

    pub fn train_step(&mut self, codes: &CodeDataset) -> Result<f64> {
        ensure!(!codes.is_empty(), Config, "no training codes");
        let idx = select_batch(codes.len(), self.config.stage2.batch_size, &mut self.rng);
        let (grids, labels, above) = prior_batch(&self.prior.config, self.level_index(), codes, &idx);
        self.step += 1;
        self.prior.train_step(&grids, labels.as_deref(), above.as_deref(), &mut self.optimizer, &mut self.rng, self.step)
    }

    pub fn nll(&self, codes: &CodeDataset) -> Result<Option<Nll>> {
        prior_nll(&self.prior, self.level_index(), codes, self.config.stage2.batch_size)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put("config", self.config.to_json().into_bytes());
        ck.put(&format!("prior.{}", self.level), encode_prior(&self.prior));
        ck.put("optimizer", encode_adam(&self.optimizer));
        ck.put("rng", encode_rng(&RngState::capture(&self.rng)));
        ck.put("step", encode_u64(self.step));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = config_section(ck)?;
        let name = ck
            .section_names()
            .find(|n| n.starts_with("prior."))
            .ok_or_else(|| Error::Format("checkpoint holds no prior".into()))?
            .to_string();
        let level: Level = name["prior.".len()..].parse()?;
        let prior = decode_prior(ck.get(&name)?)?;
        let optimizer = decode_adam(ck.get("optimizer")?, &prior.params)?;
        let rng = decode_rng(ck.get("rng")?)?.restore();
        let step = decode_u64(ck.get("step")?)?;
        Ok(Self { config, level, prior, optimizer, rng, step })
    }
}

/// Train/validation NLL of a finished prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorFit {
    pub train: Option<Nll>,
    pub val: Option<Nll>,
}

/// Trains the prior of `level` on the extracted codes in `dir`. Reads nothing from stage 1
/// beyond the code files.
pub fn run_stage2(cfg: &RunConfig, dir: &RunDir, level: Level) -> Result<(PriorTrainer, PriorFit)> {
    let _lock = RunLock::acquire(dir)?;
    let codes = CodeDataset::load(&dir.codes())?;
    check_codes(cfg, &codes)?;
    ensure!(!codes.is_empty(), Config, "{} is empty", dir.codes().display());
    let val = match dir.val_codes() {
        p if p.exists() => CodeDataset::load(&p)?,
        _ => CodeDataset::new(vec![Vec::new(); codes.num_levels()], Vec::new())?,
    };
    check_codes(cfg, &val)?;
    let mut trainer = PriorTrainer::new(cfg.clone(), level)?;
    let header = ["step", "loss", "nll_nats", "nll_bits", "val_nll_nats", "val_nll_bits"]
        .map(|h| if h.contains("nll") { format!("{h}_{level}") } else { h.to_string() });
    let mut metrics = MetricsLog::open(&dir.prior_metrics(level), &header, false)?;
    let t = cfg.stage2.clone();
    info!("stage 2 ({level}): {} code sets, {} steps, batch {}", codes.len(), t.steps, t.batch_size);
    let cell = |n: Option<Nll>, bits: bool| n.map_or(String::new(), |n| fmt_f64(if bits { n.bits } else { n.nats }));
    let mut fit = PriorFit { train: None, val: None };
    while trainer.step < t.steps {
        let loss = trainer.train_step(&codes)?;
        let s = trainer.step;
        if s % t.log_interval == 0 || s == t.steps {
            fit = PriorFit { train: trainer.nll(&codes)?, val: trainer.nll(&val)? };
            info!(
                "step {s}: batch nll {loss:.5} | train {} nats | val {} nats",
                cell(fit.train, false),
                cell(fit.val, false)
            );
            metrics.row(&[
                s.to_string(),
                fmt_f64(loss),
                cell(fit.train, false),
                cell(fit.train, true),
                cell(fit.val, false),
                cell(fit.val, true),
            ])?;
        }
        if t.checkpoint_interval > 0 && s % t.checkpoint_interval == 0 && s < t.steps {
            trainer.to_checkpoint().save(&dir.prior_checkpoint(level))?;
        }
    }
    if t.steps == 0 {
        fit = PriorFit { train: trainer.nll(&codes)?, val: trainer.nll(&val)? };
    }
    trainer.to_checkpoint().save(&dir.prior_checkpoint(level))?;
    Ok((trainer, fit))
}

pub fn encode_classifier(clf: &ToyClassifier) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(&serde_json::to_string(&clf.config).expect("classifier config serializes"));
    w.blob(&encode_params(&clf.params));
    w.0
}

pub fn load_classifier(path: &Path) -> Result<ToyClassifier> {
    let ck = Checkpoint::load(path)?;
    let mut r = Reader::new(ck.get("classifier")?);
    let config = serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("classifier config: {e}")))?;
    let mut clf = ToyClassifier::new(config, &mut seeded(0))?;
    clf.params.load_from(&decode_params(r.blob()?)?)?;
    r.finish()?;
    Ok(clf)
}

/// Trains the rejection classifier on the run's training images; returns it with its accuracy.
pub fn run_classifier(cfg: &RunConfig, dir: &RunDir) -> Result<(ToyClassifier, f64)> {
    let _lock = RunLock::acquire(dir)?;
    let (train, _) = load_datasets(cfg)?;
    let config = match &cfg.classifier {
        Some(c) => c.clone(),
        None => {
            let classes = train.labels.iter().max().map_or(0, |m| m + 1).max(cfg.num_classes());
            ClassifierConfig::new(cfg.codec.image_size, cfg.codec.channels, classes)
        }
    };
    let (clf, acc) = train_toy_classifier(&train.all()?, &train.labels, config, cfg.seed)?;
    let mut ck = Checkpoint::new();
    ck.put("classifier", encode_classifier(&clf));
    ck.save(&dir.classifier_checkpoint())?;
    info!("classifier train accuracy {acc:.3}");
    Ok((clf, acc))
}
