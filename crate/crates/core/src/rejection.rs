//! Classifier-based rejection: score decoded samples by the probability a classifier assigns
//! to their intended class and keep the best-scoring ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels::softmax_rows, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::Conv;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::parallel;
use crate::rng::{seeded, Rng64};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: AdamConfig,
}

fn default_width() -> usize {
    8
}
fn default_steps() -> usize {
    500
}
fn default_batch() -> usize {
    16
}
fn default_optimizer() -> AdamConfig {
    AdamConfig { lr: 3e-3, ..AdamConfig::default() }
}

impl ClassifierConfig {
    pub fn new(image_size: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            image_size,
            channels,
            num_classes,
            width: default_width(),
            steps: default_steps(),
            batch_size: default_batch(),
            optimizer: default_optimizer(),
        }
    }
}

/// conv3×3 → ReLU → strided conv → ReLU → spatial mean → linear → softmax.
#[derive(Clone, Debug)]
pub struct ToyClassifier {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    conv: Conv,
    down: Conv,
    head: Conv,
}

impl ToyClassifier {
    pub fn new(config: ClassifierConfig, rng: &mut Rng64) -> Result<Self> {
        ensure!(config.num_classes >= 2, Config, "a classifier needs at least 2 classes, got {}", config.num_classes);
        ensure!(config.image_size >= 2 && config.width >= 1, Config, "classifier dimensions must be positive");
        let mut store = ParamStore::new();
        let w = config.width;
        let conv = Conv::same(&mut store, "clf.conv", config.channels, w, 3, rng)?;
        let down = Conv::down2(&mut store, "clf.down", w, 2 * w, rng)?;
        let head = Conv::same(&mut store, "clf.head", 2 * w, config.num_classes, 1, rng)?;
        Ok(Self { config, params: store, conv, down, head })
    }

    fn logits(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.config.channels && s[2] == self.config.image_size && s[3] == self.config.image_size,
            Dimension,
            "classifier expects [B, {}, {n}, {n}], got {s:?}",
            self.config.channels,
            n = self.config.image_size
        );
        let h = self.conv.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.down.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = tape.mean_spatial(h)?;
        let h = tape.reshape(h, &[s[0], 2 * self.config.width, 1, 1])?;
        let l = self.head.forward(tape, store, h)?;
        tape.reshape(l, &[s[0], self.config.num_classes])
    }

    /// Class probabilities `[B, classes]`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new_inference();
        let xv = tape.constant(x.clone());
        let l = self.logits(&mut tape, &self.params, xv)?;
        let k = self.config.num_classes;
        Tensor::new(&[x.dim(0), k], softmax_rows(tape.value(l).data(), k))
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let p = self.probabilities(images)?;
        let k = self.config.num_classes;
        let correct = p
            .data()
            .chunks(k)
            .zip(labels)
            .filter(|(row, &y)| {
                let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                best == y
            })
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Trains a classifier on `images` (`[N, C, H, W]`) and returns it with its train accuracy.
pub fn train_toy_classifier(
    images: &Tensor,
    labels: &[usize],
    config: ClassifierConfig,
    seed: u64,
) -> Result<(ToyClassifier, f64)> {
    ensure!(images.ndim() == 4, Dimension, "images must be [N, C, H, W]");
    let n = images.dim(0);
    ensure!(labels.len() == n, Dimension, "{} labels for {n} images", labels.len());
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    ensure!(distinct >= 2, Config, "classifier training needs at least 2 classes, dataset has {distinct}");
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::Index(format!("label {bad} out of range for {} classes", config.num_classes)));
    }
    let mut rng = seeded(seed);
    let mut clf = ToyClassifier::new(config, &mut rng)?;
    let mut opt = Adam::new(clf.config.optimizer, &clf.params);
    let bs = clf.config.batch_size.min(n).max(1);
    for step in 0..clf.config.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..n)).collect();
        let batch = Tensor::concat_batch(&idx.iter().map(|&i| images.batch_item(i)).collect::<Result<Vec<_>>>()?)?;
        let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(batch);
        let logits = clf.logits(&mut tape, &clf.params, xv)?;
        let loss = tape.softmax_cross_entropy(logits, &targets)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged { step: step as u64, loss: value });
        }
        let grads = tape.backward(loss)?.param_grads(&clf.params);
        opt.update(&mut clf.params, &grads);
    }
    let acc = clf.accuracy(images, labels)?;
    Ok((clf, acc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub sample_id: usize,
    pub class_label: usize,
    /// Probability the classifier assigns to `class_label`.
    pub score: f64,
    pub image: Tensor,
}

/// Scores each image independently (in parallel); output order follows the input.
pub fn score(images: &[Tensor], labels: &[usize], clf: &ToyClassifier) -> Result<Vec<ScoredSample>> {
    ensure!(images.len() == labels.len(), Dimension, "{} labels for {} images", labels.len(), images.len());
    let k = clf.config.num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
    }
    parallel::try_map_range(images.len(), |i| {
        let img = &images[i];
        let x = if img.ndim() == 3 { img.clone().reshape(&[1, img.dim(0), img.dim(1), img.dim(2)])? } else { img.clone() };
        let p = clf.probabilities(&x)?;
        Ok(ScoredSample { sample_id: i, class_label: labels[i], score: p.data()[labels[i]], image: img.clone() })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionRule {
    /// Keep the best `ceil(f·n)` samples.
    TopFraction(f64),
    /// Keep every sample scoring at least the threshold.
    Threshold(f64),
}

/// `ceil(f·n)`, ignoring round-off in the product (so 0.3·10 keeps 3, not 4).
pub fn kept_count(keep_fraction: f64, n: usize) -> usize {
    let x = keep_fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).clamp(1, n)
}

fn ranked(scored: &[ScoredSample]) -> Vec<ScoredSample> {
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id)));
    v
}

/// Top-fraction selection, sorted by descending score with ties broken by `sample_id`.
pub fn reject_filter(scored: &[ScoredSample], keep_fraction: f64) -> Result<Vec<ScoredSample>> {
    apply_rule(scored, RejectionRule::TopFraction(keep_fraction))
}

pub fn apply_rule(scored: &[ScoredSample], rule: RejectionRule) -> Result<Vec<ScoredSample>> {
    ensure!(!scored.is_empty(), Contract, "rejection of an empty sample set");
    ensure!(scored.iter().all(|s| s.score.is_finite()), Contract, "non-finite score");
    let ranked = ranked(scored);
    match rule {
        RejectionRule::TopFraction(f) => {
            ensure!(f > 0.0 && f <= 1.0, Contract, "keep fraction must lie in (0, 1], got {f}");
            let k = kept_count(f, scored.len());
            Ok(ranked.into_iter().take(k).collect())
        }
        RejectionRule::Threshold(t) => Ok(ranked.into_iter().filter(|s| s.score >= t).collect()),
    }
}
