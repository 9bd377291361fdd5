//! Two-stage training: contrastive representation learning with a momentum
//! encoder and memory queue, then a linear classifier on frozen features.

mod stage2;

pub use stage2::{
    cross_entropy, evaluate_splits, extract_features, split_of, stage2_train_linear,
    ClassBalancedSampler, LinearClassifier, Split, SplitReport, Stage2Config,
};

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed_image, roi_cells, EmaEncoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::experiments::Check;
use crate::losses::{
    self, Candidates, ContrastKind, LossConfig, PatchLoss, TargetBackbone,
};
use crate::queue::{MemoryQueue, Snapshot};
use crate::seed;
use crate::synthdata::{
    augment_two_views, sample_boxes_with, AugmentationPolicy, DatasetSpec,
    PatchBox, SynthDataset, SynthImage,
};
use crate::tensor::{dot, Graph};

const TAG_EPOCH: u64 = 1;
const TAG_VIEWS: u64 = 2;
const TAG_BOXES: u64 = 3;
const TAG_PROBE: u64 = 4;
const TAG_INIT: u64 = 5;
const TAG_STAGE2: u64 = 6;

/// Boxes are redrawn until each covers at least one feature-map cell.
const BOX_REDRAWS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_sgd_momentum")]
    pub sgd_momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_ema")]
    pub ema_momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentationPolicy,
    /// Images per class in the fixed probe batch (head-most and tail-most
    /// classes).
    #[serde(default = "d_probe")]
    pub probe_per_class: usize,
}

fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    0.05
}
fn d_sgd_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    1e-4
}
fn d_ema() -> f64 {
    0.999
}
fn d_probe() -> usize {
    16
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            peak_lr: d_lr(),
            sgd_momentum: d_sgd_momentum(),
            weight_decay: d_weight_decay(),
            ema_momentum: d_ema(),
            seed: 0,
            augment: AugmentationPolicy::default(),
            probe_per_class: d_probe(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage 1 needs epochs ≥ 1 and batch size ≥ 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak lr must be > 0, got {}", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("bad SGD momentum or weight decay".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("EMA momentum {}", self.ema_momentum)));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    #[serde(default = "d_capacity")]
    pub capacity: usize,
}

fn d_capacity() -> usize {
    2048
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            capacity: d_capacity(),
        }
    }
}

/// Everything one experiment run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub queue: QueueConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.loss.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.encoder.validate()?;
        if self.queue.capacity == 0 {
            return Err(Error::Config("queue capacity must be ≥ 1".into()));
        }
        if self.encoder.input_size != self.dataset.image_size {
            return Err(Error::Config(format!(
                "encoder input size {} differs from image size {}",
                self.encoder.input_size, self.dataset.image_size
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// `peak · ½(1 + cos(π t / T))`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    peak * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// One row of the stage-1 metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    /// Mean contrastive term; NaN while the queue warms up.
    pub loss_dscl: f64,
    pub loss_pbsd: f64,
    pub lr: f64,
    pub queue_fill: f64,
    pub mean_ratio_head: f64,
    pub mean_ratio_tail: f64,
    pub p_plus_head: f64,
    pub p_plus_tail: f64,
    /// Anchors in this step whose class had no queue positives.
    pub empty_positive: usize,
}

pub const METRICS_HEADER: &str = "step,epoch,loss_dscl,loss_pbsd,lr,queue_fill,mean_ratio_head,mean_ratio_tail,p_plus_head,p_plus_tail,empty_positive";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loss_dscl,
            self.loss_pbsd,
            self.lr,
            self.queue_fill,
            self.mean_ratio_head,
            self.mean_ratio_tail,
            self.p_plus_head,
            self.p_plus_tail,
            self.empty_positive
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    Ok(())
}

/// Epoch-averaged queue-positive count for one class, measured on anchors
/// seen while the queue was full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueStat {
    pub epoch: usize,
    pub class: usize,
    pub anchors: usize,
    pub mean_positives: f64,
    /// `(n_k / n) · mean |M|`.
    pub expected: f64,
}

pub fn queue_stats_csv(stats: &[QueueStat]) -> String {
    let mut s = String::from("epoch,class,anchors,mean_positives,expected\n");
    for q in stats {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            q.epoch, q.class, q.anchors, q.mean_positives, q.expected
        );
    }
    s
}

/// Epoch-averaged `|P|` against its expectation for the three largest classes.
pub fn queue_stat_checks(stats: &[QueueStat], counts: &[usize]) -> Vec<Check> {
    let mut classes: Vec<usize> = (0..counts.len()).collect();
    classes.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    classes
        .into_iter()
        .take(3)
        .map(|c| {
            let rows: Vec<&QueueStat> = stats.iter().filter(|q| q.class == c).collect();
            if rows.is_empty() {
                return Check::new(
                    &format!("queue-positives-class{c}"),
                    false,
                    "no anchors seen with a full queue".into(),
                );
            }
            let n = rows.len() as f64;
            let got = rows.iter().map(|q| q.mean_positives).sum::<f64>() / n;
            let want = rows.iter().map(|q| q.expected).sum::<f64>() / n;
            let rel = ((got - want) / want).abs();
            Check::new(
                &format!("queue-positives-class{c}"),
                rel <= 0.1,
                format!("mean |P| {got:.2} vs expected {want:.2} ({:.1}% off)", 100.0 * rel),
            )
        })
        .collect()
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct Stage1State {
    pub params: EncoderParams,
    pub ema: EmaEncoder,
    pub queue: MemoryQueue,
    pub velocity: Vec<Vec<f64>>,
    pub step: usize,
}

impl Stage1State {
    pub fn new(config: &ExperimentConfig, seed_base: u64) -> Result<Self> {
        let params = EncoderParams::init(&config.encoder, seed::derive(seed_base, &[TAG_INIT]))?;
        let ema = EmaEncoder::new(&params, config.stage1.ema_momentum)?;
        let queue = MemoryQueue::new(config.queue.capacity, config.encoder.d_proj)?;
        let velocity = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Ok(Self {
            params,
            ema,
            queue,
            velocity,
            step: 0,
        })
    }

    /// The loss is only applied once the queue is half full.
    pub fn warmed_up(&self) -> bool {
        2 * self.queue.len() >= self.queue.capacity()
    }
}

/// What happened on one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub updated: bool,
    pub loss_dscl: f64,
    pub loss_pbsd: f64,
    pub empty_positive: usize,
    /// `(label, |P_i|, |M|)` per anchor, recorded when a loss was applied.
    pub positives: Vec<(usize, usize, usize)>,
}

struct AnchorInput {
    view_a: SynthImage,
    view_b: SynthImage,
    boxes: Vec<PatchBox>,
}

struct AnchorOutput {
    grads: Vec<Vec<f64>>,
    contrast: f64,
    patch: f64,
}

/// Sample `count` boxes that each map onto at least one cell of an
/// `h × w` feature map.
pub fn sample_usable_boxes(
    count: usize,
    scale: (f64, f64),
    seed_value: u64,
    h: usize,
    w: usize,
) -> Result<Vec<PatchBox>> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed_value);
    let aspect = (3.0 / 4.0, 4.0 / 3.0);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut found = None;
        for _ in 0..BOX_REDRAWS {
            let b = sample_boxes_with(&mut rng, 1, scale, aspect)?[0];
            if roi_cells(&b, h, w).is_ok() {
                found = Some(b);
                break;
            }
        }
        out.push(found.ok_or_else(|| {
            Error::Sampling(format!("no box in scale {scale:?} covers a {h}×{w} cell"))
        })?);
    }
    Ok(out)
}

fn feature_map_side(config: &EncoderConfig) -> usize {
    config.input_size / 8
}

fn anchor_pass(
    state: &Stage1State,
    loss: &LossConfig,
    input: &AnchorInput,
    z_plus: &[f64],
    snapshot: &Snapshot,
    label: usize,
) -> Result<AnchorOutput> {
    let tau = loss.temperature;
    let mut g = Graph::new();
    let enc = state.params.bind(&mut g, true);
    let e = enc.encode(&mut g, &input.view_a)?;
    let z = enc.project(&mut g, e.v)?;
    let cands = Candidates::build(&mut g, z_plus, snapshot)?;
    let num_pos = snapshot.count_of(label);
    // SCL is DSCL at α = 1/(|P|+1), which lets multi-crop share one path.
    let alpha = match loss.contrast {
        ContrastKind::Scl => 1.0 / (num_pos as f64 + 1.0),
        ContrastKind::Dscl => loss.alpha,
    };
    let contrast = match (loss.patch_loss, loss.contrast) {
        (PatchLoss::Multicrop, _) => losses::multicrop_loss_var(
            &mut g,
            z,
            &enc,
            &input.view_a,
            &input.boxes,
            &cands,
            snapshot,
            label,
            tau,
            alpha,
            loss.patch_size,
        )?,
        (_, ContrastKind::Scl) => losses::scl_loss_var(&mut g, z, &cands, snapshot, label, tau)?,
        (_, ContrastKind::Dscl) => {
            losses::dscl_loss_var(&mut g, z, &cands, snapshot, label, tau, alpha)?
        }
    };
    let mut terms = vec![(contrast, 1.0)];
    let mut patch = None;
    if loss.patch_loss == PatchLoss::Pbsd && loss.lambda > 0.0 {
        let (target_enc, map, global) = match loss.target_backbone {
            TargetBackbone::Online => (enc.clone(), e.u, z),
            TargetBackbone::Ema => {
                let t = state.ema.shadow.bind(&mut g, false);
                let te = t.encode(&mut g, &input.view_a)?;
                let tz = t.project(&mut g, te.v)?;
                (t, te.u, tz)
            }
        };
        let p = losses::pbsd_loss_var(
            &mut g,
            &target_enc,
            map,
            global,
            &enc,
            &input.view_a,
            &input.boxes,
            &cands,
            tau,
            loss.patch_size,
            loss.target,
        )?;
        terms.push((p, loss.lambda));
        patch = Some(p);
    }
    let total = g.weighted_sum(&terms)?;
    let value = g.scalar_value(total)?;
    if !value.is_finite() {
        let zv = g.value(z).data().to_vec();
        let logits: Vec<f64> = std::iter::once(dot(z_plus, &zv))
            .chain((0..snapshot.len()).map(|k| dot(snapshot.row(k), &zv)))
            .collect();
        let lo = logits.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::NonFinite(format!(
            "loss {value} for label {label}; logits range [{lo}, {hi}] at τ = {tau}"
        )));
    }
    g.backward(total)?;
    let grads = enc
        .vars
        .iter()
        .map(|&v| g.grad(v).expect("encoder params are trainable").to_vec())
        .collect();
    Ok(AnchorOutput {
        grads,
        contrast: g.scalar_value(contrast)?,
        patch: match patch {
            Some(p) => g.scalar_value(p)?,
            None => 0.0,
        },
    })
}

/// One optimisation step on `batch`. Returns per-step statistics.
///
/// Anchors are processed in parallel but their gradients are summed in
/// batch order, so the update does not depend on the thread count.
pub fn stage1_step(
    state: &mut Stage1State,
    batch: &[&SynthImage],
    config: &ExperimentConfig,
    lr: f64,
    run_seed: u64,
) -> Result<StepStats> {
    let loss = &config.loss;
    let side = feature_map_side(&config.encoder);
    let step = state.step as u64;
    let inputs: Vec<AnchorInput> = batch
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let (a, b) = augment_two_views(
                img,
                &config.stage1.augment,
                seed::derive(run_seed, &[TAG_VIEWS, step, i as u64]),
            )?;
            let boxes = if loss.patch_loss == PatchLoss::None {
                Vec::new()
            } else {
                sample_usable_boxes(
                    loss.patches,
                    loss.patch_scale,
                    seed::derive(run_seed, &[TAG_BOXES, step, i as u64]),
                    side,
                    side,
                )?
            };
            Ok(AnchorInput {
                view_a: a.image,
                view_b: b.image,
                boxes,
            })
        })
        .collect::<Result<_>>()?;
    let keys: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|inp| embed_image(&state.ema.shadow, &inp.view_b).map(|(_, z)| z))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();

    let mut stats = StepStats {
        updated: false,
        loss_dscl: f64::NAN,
        loss_pbsd: f64::NAN,
        empty_positive: 0,
        positives: Vec::new(),
    };
    if state.warmed_up() {
        let snapshot = state.queue.snapshot();
        let shared: &Stage1State = state;
        let outs: Vec<AnchorOutput> = inputs
            .par_iter()
            .zip(keys.par_iter())
            .zip(labels.par_iter())
            .map(|((inp, key), &label)| anchor_pass(shared, loss, inp, key, &snapshot, label))
            .collect::<Result<_>>()?;
        let n = outs.len() as f64;
        let mut grad: Vec<Vec<f64>> = state.velocity.iter().map(|v| vec![0.0; v.len()]).collect();
        for o in &outs {
            for (acc, g) in grad.iter_mut().zip(&o.grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let cfg = &config.stage1;
        for ((t, vel), gsum) in state.params.tensors.iter_mut().zip(&mut state.velocity).zip(&grad) {
            for ((w, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(gsum) {
                let d = g / n + cfg.weight_decay * *w;
                *v = cfg.sgd_momentum * *v + d;
                *w -= lr * *v;
            }
        }
        if !state.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        stats.updated = true;
        stats.loss_dscl = outs.iter().map(|o| o.contrast).sum::<f64>() / n;
        stats.loss_pbsd = outs.iter().map(|o| o.patch).sum::<f64>() / n;
        for &l in &labels {
            let p = snapshot.count_of(l);
            if p == 0 {
                stats.empty_positive += 1;
            }
            stats.positives.push((l, p, snapshot.len()));
        }
    }
    state.ema.update(&state.params)?;
    state.queue.enqueue_batch(&keys, &labels)?;
    state.step += 1;
    Ok(stats)
}

/// Fixed probe batch: head-most and tail-most class images with frozen views.
struct ProbeSet {
    head: Vec<(SynthImage, SynthImage, usize)>,
    tail: Vec<(SynthImage, SynthImage, usize)>,
}

impl ProbeSet {
    fn build(ds: &SynthDataset, cfg: &Stage1Config, run_seed: u64) -> Result<Self> {
        let k = ds.spec.num_classes();
        let pick = |class: usize| -> Result<Vec<(SynthImage, SynthImage, usize)>> {
            ds.train
                .iter()
                .enumerate()
                .filter(|(_, im)| im.label == class)
                .take(cfg.probe_per_class)
                .map(|(i, im)| {
                    let (a, b) = augment_two_views(
                        im,
                        &cfg.augment,
                        seed::derive(run_seed, &[TAG_PROBE, i as u64]),
                    )?;
                    Ok((a.image, b.image, class))
                })
                .collect()
        };
        Ok(Self {
            head: pick(0)?,
            tail: pick(k - 1)?,
        })
    }

    /// `(mean ratio, mean p⁺)` over a group; NaN when nothing is measurable.
    fn measure(
        group: &[(SynthImage, SynthImage, usize)],
        state: &Stage1State,
        snapshot: &Snapshot,
        loss: &LossConfig,
    ) -> Result<(f64, f64)> {
        let res: Vec<(Option<f64>, f64)> = group
            .par_iter()
            .map(|(a, b, label)| {
                let (_, z) = embed_image(&state.params, a)?;
                let (_, zp) = embed_image(&state.ema.shadow, b)?;
                let p = losses::conditional_prob(&z, &zp, snapshot, loss.temperature)?;
                let ratio = match losses::positive_gradient_ratio(
                    &z,
                    &zp,
                    snapshot,
                    *label,
                    loss.temperature,
                    loss.mode(),
                ) {
                    Ok(r) => Some(r),
                    Err(Error::UndefinedRatio(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok((ratio, p.p_plus()))
            })
            .collect::<Result<_>>()?;
        let ratios: Vec<f64> = res.iter().filter_map(|r| r.0).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let pp: Vec<f64> = res.iter().map(|r| r.1).collect();
        Ok((mean(&ratios), mean(&pp)))
    }
}

/// Result of a full stage-1 run.
#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub params: EncoderParams,
    pub ema: EmaEncoder,
    pub metrics: Vec<MetricsRow>,
    pub queue_stats: Vec<QueueStat>,
    pub steps: usize,
}

/// Train the encoder for `config.stage1.epochs` epochs.
pub fn stage1_train(
    ds: &SynthDataset,
    config: &ExperimentConfig,
    run_seed: u64,
) -> Result<Stage1Outcome> {
    config.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let cfg = &config.stage1;
    let mut state = Stage1State::new(config, run_seed)?;
    let probes = ProbeSet::build(ds, cfg, run_seed)?;
    let n = ds.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let counts = &ds.spec.counts;
    let n_total = counts.iter().sum::<usize>() as f64;
    let mut metrics = Vec::with_capacity(total);
    let mut queue_stats = Vec::new();
    let mut probe_vals = [f64::NAN; 4];

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(run_seed, &[TAG_EPOCH, epoch as u64]));
        // class → (anchors, Σ|P|, Σ|M|) over anchors seen with a full queue
        let mut acc = vec![(0usize, 0usize, 0usize); counts.len()];
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SynthImage> = chunk.iter().map(|&i| &ds.train[i]).collect();
            let lr = cosine_lr(cfg.peak_lr, state.step, total);
            let full = state.queue.len() == state.queue.capacity();
            let stats = stage1_step(&mut state, &batch, config, lr, run_seed)?;
            if full {
                for &(l, p, m) in &stats.positives {
                    acc[l].0 += 1;
                    acc[l].1 += p;
                    acc[l].2 += m;
                }
            }
            if bi + 1 == steps_per_epoch {
                let snap = state.queue.snapshot();
                let (rh, ph) = ProbeSet::measure(&probes.head, &state, &snap, &config.loss)?;
                let (rt, pt) = ProbeSet::measure(&probes.tail, &state, &snap, &config.loss)?;
                probe_vals = [rh, rt, ph, pt];
            }
            metrics.push(MetricsRow {
                step: state.step - 1,
                epoch,
                loss_dscl: stats.loss_dscl,
                loss_pbsd: stats.loss_pbsd,
                lr,
                queue_fill: state.queue.len() as f64 / state.queue.capacity() as f64,
                mean_ratio_head: probe_vals[0],
                mean_ratio_tail: probe_vals[1],
                p_plus_head: probe_vals[2],
                p_plus_tail: probe_vals[3],
                empty_positive: stats.empty_positive,
            });
        }
        for (class, &(a, p, m)) in acc.iter().enumerate() {
            if a == 0 {
                continue;
            }
            queue_stats.push(QueueStat {
                epoch,
                class,
                anchors: a,
                mean_positives: p as f64 / a as f64,
                expected: counts[class] as f64 / n_total * (m as f64 / a as f64),
            });
        }
        log::debug!("epoch {epoch} done, step {}", state.step);
    }
    Ok(Stage1Outcome {
        params: state.params,
        ema: state.ema,
        metrics,
        queue_stats,
        steps: total,
    })
}

/// Stage 1, then a linear probe on frozen pooled features, then evaluation.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub stage1: Stage1Outcome,
    pub classifier: LinearClassifier,
    pub report: SplitReport,
}

pub fn run_pipeline(
    ds: &SynthDataset,
    config: &ExperimentConfig,
    run_seed: u64,
) -> Result<PipelineOutcome> {
    let stage1 = stage1_train(ds, config, run_seed)?;
    let (classifier, report) = linear_probe(&stage1.params, ds, &config.stage2, run_seed)?;
    Ok(PipelineOutcome {
        stage1,
        classifier,
        report,
    })
}

/// Stage 2 and evaluation for fixed encoder parameters.
pub fn linear_probe(
    params: &EncoderParams,
    ds: &SynthDataset,
    cfg: &Stage2Config,
    run_seed: u64,
) -> Result<(LinearClassifier, SplitReport)> {
    let k = ds.spec.num_classes();
    let train_x = extract_features(params, &ds.train)?;
    let test_x = extract_features(params, &ds.test)?;
    let clf = stage2_train_linear(
        &train_x,
        &ds.train_labels(),
        k,
        cfg,
        seed::derive(run_seed, &[TAG_STAGE2]),
    )?;
    let report = evaluate_splits(&clf, &test_x, &ds.test_labels(), &ds.spec.counts)?;
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_pattern_bank, generate_dataset};

    pub(crate) fn tiny_config(counts: Vec<usize>) -> ExperimentConfig {
        let k = counts.len();
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetSpec {
            counts,
            image_size: 16,
            channels: 3,
            test_per_class: 4,
            seed: 3,
            num_motifs: 2 * k,
            sharing_degree: 1,
        };
        cfg.encoder.input_size = 16;
        cfg.encoder.widths = vec![4, 8, 8];
        cfg.encoder.hidden = 8;
        cfg.encoder.d_proj = 8;
        cfg.loss.patch_size = 8;
        cfg.loss.patches = 2;
        cfg.loss.patch_scale = (0.2, 0.6);
        cfg.queue.capacity = 16;
        cfg.stage1.epochs = 1;
        cfg.stage1.batch_size = 8;
        cfg.stage1.probe_per_class = 2;
        cfg.stage2.epochs = 2;
        cfg.stage2.milestones = vec![1];
        cfg
    }

    fn tiny_dataset(cfg: &ExperimentConfig) -> SynthDataset {
        let s = &cfg.dataset;
        let bank =
            build_pattern_bank(s.num_motifs, s.num_classes(), s.sharing_degree, s.seed).unwrap();
        generate_dataset(s, &bank).unwrap()
    }

    #[test]
    fn cosine_schedule_closed_form() {
        for t in 0..=50 {
            let want = 0.05 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / 50.0).cos());
            assert!((cosine_lr(0.05, t, 50) - want).abs() <= 1e-12);
        }
        assert_eq!(cosine_lr(0.05, 0, 50), 0.05);
        assert!(cosine_lr(0.05, 50, 50).abs() < 1e-12);
    }

    #[test]
    fn one_epoch_emits_one_row_per_step() {
        let cfg = tiny_config(vec![24, 16, 16, 8]);
        let ds = tiny_dataset(&cfg);
        let out = stage1_train(&ds, &cfg, 1).unwrap();
        assert_eq!(out.metrics.len(), 64usize.div_ceil(8));
        assert!(out.metrics.iter().enumerate().all(|(i, r)| r.step == i));
        // queue grows by one batch per step until full
        let fills: Vec<f64> = out.metrics.iter().map(|r| r.queue_fill).collect();
        assert_eq!(&fills[..3], &[0.5, 1.0, 1.0]);
        // first step is warm-up, later steps update
        assert!(out.metrics[0].loss_dscl.is_nan());
        assert!(out.metrics[1].loss_dscl.is_finite());
        let csv = metrics_csv(&out.metrics);
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn fixed_seed_gives_identical_parameters() {
        let mut cfg = tiny_config(vec![24, 16, 16, 8]);
        cfg.stage1.epochs = 2;
        let ds = tiny_dataset(&cfg);
        let a = stage1_train(&ds, &cfg, 9).unwrap();
        let b = stage1_train(&ds, &cfg, 9).unwrap();
        assert!(a.steps >= 10);
        assert_eq!(a.params.backbone_bytes(), b.params.backbone_bytes());
        assert_eq!(a.params, b.params);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        let c = stage1_train(&ds, &cfg, 10).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_json("{}").is_ok());
        let err = ExperimentConfig::from_json(r#"{"loss": {"tau": 0.1}}"#).unwrap_err();
        assert!(err.is_config());
        let err = ExperimentConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(err.is_config());
        let err = ExperimentConfig::from_json(r#"{"loss": {"temperature": 0}}"#).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn boxes_always_cover_a_cell() {
        for s in 0..50 {
            for b in sample_usable_boxes(5, (0.05, 0.6), s, 2, 2).unwrap() {
                assert!(roi_cells(&b, 2, 2).is_ok());
            }
        }
    }
}
