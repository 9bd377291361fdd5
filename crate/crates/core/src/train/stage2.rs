//! Linear classifier on frozen pooled features.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed_image, EncoderParams};
use crate::error::{Error, Result};
use crate::seed;
use crate::synthdata::SynthImage;
use crate::tensor::logsumexp_scaled;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Epochs at which the lr is multiplied by 0.1.
    #[serde(default = "d_milestones")]
    pub milestones: Vec<usize>,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_true")]
    pub class_balanced: bool,
}

fn d_epochs() -> usize {
    40
}
fn d_batch() -> usize {
    256
}
fn d_lr() -> f64 {
    1.0
}
fn d_milestones() -> Vec<usize> {
    vec![20, 30]
}
fn d_momentum() -> f64 {
    0.9
}
fn d_true() -> bool {
    true
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            milestones: d_milestones(),
            momentum: d_momentum(),
            weight_decay: 0.0,
            class_balanced: true,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("stage 2 needs epochs, batch size and lr > 0".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones {:?} must be strictly increasing",
                self.milestones
            )));
        }
        if self.milestones.iter().any(|&m| m == 0 || m >= self.epochs) {
            return Err(Error::Config(format!(
                "milestones {:?} must lie inside 1..{}",
                self.milestones, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("bad stage-2 momentum or weight decay".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count() as i32;
        self.lr * 0.1f64.powi(drops)
    }
}

/// `W x̃ + b` on standardised features `x̃ = (x − shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `[K, d]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            weight: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn logits_std(&self, xs: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                let row = &self.weight[k * self.dim..(k + 1) * self.dim];
                self.bias[k] + row.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_std(&self.standardize(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    logsumexp_scaled(logits, 1.0) - logits[label]
}

/// Draws a class uniformly, then an instance of that class uniformly.
#[derive(Clone, Debug)]
pub struct ClassBalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl ClassBalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::Contract(format!("label {l} ≥ {num_classes}")));
            }
            by_class[l].push(i);
        }
        by_class.retain(|c| !c.is_empty());
        if by_class.is_empty() {
            return Err(Error::Contract("no samples to draw from".into()));
        }
        Ok(Self { by_class })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let c = &self.by_class[rng.gen_range(0..self.by_class.len())];
        c[rng.gen_range(0..c.len())]
    }
}

/// Pooled backbone features `v` of every image, projection head unused.
pub fn extract_features(params: &EncoderParams, images: &[SynthImage]) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|im| embed_image(params, im).map(|(v, _)| v))
        .collect()
}

/// Mini-batch SGD on mean cross-entropy. Class-balanced draws when
/// configured, uniform instance draws otherwise.
pub fn stage2_train_linear(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    cfg: &Stage2Config,
    seed_value: u64,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Contract("stage 2 needs matching, non-empty features/labels".into()));
    }
    let d = features[0].len();
    let n = features.len();
    let mut clf = LinearClassifier::zeros(num_classes, d);
    for j in 0..d {
        let mean = features.iter().map(|x| x[j]).sum::<f64>() / n as f64;
        let var = features.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n as f64;
        clf.shift[j] = mean;
        clf.scale[j] = var.sqrt().max(1e-8);
    }
    let xs: Vec<Vec<f64>> = features.iter().map(|x| clf.standardize(x)).collect();
    let sampler = ClassBalancedSampler::new(labels, num_classes)?;
    let mut rng = seed::rng(seed_value, &[]);
    let mut vw = vec![0.0; clf.weight.len()];
    let mut vb = vec![0.0; num_classes];
    let steps = n.div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for _ in 0..steps {
            let mut gw = vec![0.0; clf.weight.len()];
            let mut gb = vec![0.0; num_classes];
            for _ in 0..cfg.batch_size {
                let i = if cfg.class_balanced {
                    sampler.draw(&mut rng)
                } else {
                    rng.gen_range(0..n)
                };
                let logits = clf.logits_std(&xs[i]);
                let lse = logsumexp_scaled(&logits, 1.0);
                for k in 0..num_classes {
                    let p = (logits[k] - lse).exp() - if k == labels[i] { 1.0 } else { 0.0 };
                    gb[k] += p;
                    for (g, x) in gw[k * d..(k + 1) * d].iter_mut().zip(&xs[i]) {
                        *g += p * x;
                    }
                }
            }
            let inv = 1.0 / cfg.batch_size as f64;
            for ((w, v), g) in clf.weight.iter_mut().zip(&mut vw).zip(&gw) {
                *v = cfg.momentum * *v + g * inv + cfg.weight_decay * *w;
                *w -= lr * *v;
            }
            for ((b, v), g) in clf.bias.iter_mut().zip(&mut vb).zip(&gb) {
                *v = cfg.momentum * *v + g * inv;
                *b -= lr * *v;
            }
        }
    }
    if clf.weight.iter().chain(&clf.bias).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear classifier weights".into()));
    }
    Ok(clf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Many,
    Medium,
    Few,
}

/// Many > 100, Medium 20–100, Few < 20 training images.
pub fn split_of(train_count: usize) -> Split {
    if train_count > 100 {
        Split::Many
    } else if train_count >= 20 {
        Split::Medium
    } else {
        Split::Few
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    /// `None` for classes without test images.
    pub per_class: Vec<Option<f64>>,
}

/// Top-1 accuracy overall and per split. Classes with no test images are
/// excluded with a warning.
pub fn evaluate_splits(
    clf: &LinearClassifier,
    test_features: &[Vec<f64>],
    test_labels: &[usize],
    train_counts: &[usize],
) -> Result<SplitReport> {
    if test_features.len() != test_labels.len() || test_features.is_empty() {
        return Err(Error::Contract("evaluation needs matching, non-empty test data".into()));
    }
    let k = train_counts.len();
    let mut hit = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for (x, &l) in test_features.iter().zip(test_labels) {
        if l >= k {
            return Err(Error::Contract(format!("test label {l} ≥ {k}")));
        }
        seen[l] += 1;
        if clf.predict(x) == l {
            hit[l] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            if seen[c] == 0 {
                log::warn!("class {c} has no test images; excluded");
                None
            } else {
                Some(hit[c] as f64 / seen[c] as f64)
            }
        })
        .collect();
    let split_mean = |s: Split| {
        let v: Vec<f64> = (0..k)
            .filter(|&c| split_of(train_counts[c]) == s)
            .filter_map(|c| per_class[c])
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(SplitReport {
        overall: hit.iter().sum::<usize>() as f64 / seen.iter().sum::<usize>() as f64,
        many: split_mean(Split::Many),
        medium: split_mean(Split::Medium),
        few: split_mean(Split::Few),
        per_class,
    })
}
