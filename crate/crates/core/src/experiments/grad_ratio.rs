//! Positive-gradient ratio at initialisation, bucketed by `|P_i|`.

use std::collections::BTreeMap;
use std::fmt::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::plot::{line_plot, Axis, Series};
use super::{Check, ExperimentReport};
use crate::encoder::embed_image;
use crate::error::{Error, Result};
use crate::losses::{positive_gradient_ratio, ContrastMode};
use crate::queue::MemoryQueue;
use crate::seed;
use crate::synthdata::{augment_two_views, SynthDataset};
use crate::train::{ExperimentConfig, Stage1State};

const TAG_FILL: u64 = 11;
const TAG_FILL_VIEW: u64 = 12;
const TAG_ANCHOR: u64 = 13;

/// Relative tolerance used by the acceptance check.
pub const RATIO_TOLERANCE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioBucket {
    pub positives: usize,
    pub anchors: usize,
    pub scl: f64,
    pub dscl: f64,
    pub theory_scl: f64,
    pub theory_dscl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradRatioResult {
    pub alpha: f64,
    pub buckets: Vec<RatioBucket>,
    /// Mean absolute relative deviation from `1/|P|` over kept buckets.
    pub scl_mard: f64,
    /// Mean absolute relative deviation from `α/(1−α)`.
    pub dscl_mard: f64,
}

impl GradRatioResult {
    pub fn csv(&self) -> String {
        let mut s = String::from("positives,anchors,scl,dscl,theory_scl,theory_dscl\n");
        for b in &self.buckets {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                b.positives, b.anchors, b.scl, b.dscl, b.theory_scl, b.theory_dscl
            );
        }
        s
    }
}

/// `α/(1−α)`; infinite at `α = 1`.
pub fn dscl_theory(alpha: f64) -> f64 {
    alpha / (1.0 - alpha)
}

fn mard(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let v: Vec<f64> = pairs.map(|(m, t)| ((m - t) / t).abs()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Measure both ratios at initialisation.
///
/// The queue is filled with EMA embeddings of a shuffled pass over the
/// training set; then, for every class with at least one queue positive,
/// `anchors_per_class` augmented anchors are scored. Buckets are keyed by
/// the exact `|P_i|` and kept when they hold at least `min_anchors` anchors.
pub fn gradient_ratio_buckets(
    ds: &SynthDataset,
    config: &ExperimentConfig,
    run_seed: u64,
    anchors_per_class: usize,
    min_anchors: usize,
) -> Result<GradRatioResult> {
    config.validate()?;
    let alpha = config.loss.alpha;
    let tau = config.loss.temperature;
    let state = Stage1State::new(config, run_seed)?;
    let policy = &config.stage1.augment;

    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    order.shuffle(&mut seed::rng(run_seed, &[TAG_FILL]));
    order.truncate(config.queue.capacity);
    let keys: Vec<Vec<f64>> = order
        .par_iter()
        .map(|&i| {
            let (_, b) = augment_two_views(
                &ds.train[i],
                policy,
                seed::derive(run_seed, &[TAG_FILL_VIEW, i as u64]),
            )?;
            embed_image(&state.ema.shadow, &b.image).map(|(_, z)| z)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = order.iter().map(|&i| ds.train[i].label).collect();
    let mut queue = MemoryQueue::new(config.queue.capacity, config.encoder.d_proj)?;
    queue.enqueue_batch(&keys, &labels)?;
    let snap = queue.snapshot();

    let k = ds.spec.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, im) in ds.train.iter().enumerate() {
        by_class[im.label].push(i);
    }
    let jobs: Vec<(usize, usize)> = (0..k)
        .filter(|&c| snap.count_of(c) > 0 && !by_class[c].is_empty())
        .flat_map(|c| (0..anchors_per_class).map(move |j| (c, j)))
        .collect();
    let ratios: Vec<(usize, f64, f64)> = jobs
        .par_iter()
        .map(|&(c, j)| {
            let img = &ds.train[by_class[c][j % by_class[c].len()]];
            let (a, b) = augment_two_views(
                img,
                policy,
                seed::derive(run_seed, &[TAG_ANCHOR, c as u64, j as u64]),
            )?;
            let (_, z) = embed_image(&state.params, &a.image)?;
            let (_, zp) = embed_image(&state.ema.shadow, &b.image)?;
            let scl = positive_gradient_ratio(&z, &zp, &snap, c, tau, ContrastMode::Scl)?;
            let dscl =
                positive_gradient_ratio(&z, &zp, &snap, c, tau, ContrastMode::Dscl { alpha })?;
            Ok((snap.count_of(c), scl, dscl))
        })
        .collect::<Result<_>>()?;

    let mut acc: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for (p, s, d) in ratios {
        let e = acc.entry(p).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += s;
        e.2 += d;
    }
    let mut buckets = Vec::new();
    for (p, (n, s, d)) in acc {
        if n < min_anchors {
            log::warn!("dropping |P| = {p} bucket with {n} anchors");
            continue;
        }
        buckets.push(RatioBucket {
            positives: p,
            anchors: n,
            scl: s / n as f64,
            dscl: d / n as f64,
            theory_scl: 1.0 / p as f64,
            theory_dscl: dscl_theory(alpha),
        });
    }
    if buckets.is_empty() {
        return Err(Error::UndefinedRatio("no bucket has enough anchors".into()));
    }
    Ok(GradRatioResult {
        alpha,
        scl_mard: mard(buckets.iter().map(|b| (b.scl, b.theory_scl))),
        dscl_mard: mard(buckets.iter().map(|b| (b.dscl, b.theory_dscl))),
        buckets,
    })
}

pub fn run_gradient_ratio_experiment(
    ds: &SynthDataset,
    config: &ExperimentConfig,
    run_seed: u64,
) -> Result<ExperimentReport> {
    let res = gradient_ratio_buckets(ds, config, run_seed, 100, 10)?;
    let mut report = ExperimentReport::new("grad-ratio", config, vec![run_seed]);
    let csv = res.csv();
    let svg = line_plot(
        &csv,
        "Average positive-gradient ratio at initialisation",
        "positives",
        Axis::log("|P_i|"),
        Axis::log("ratio"),
        &[
            Series {
                name: "SCL",
                column: "scl",
                dashed: false,
            },
            Series {
                name: "DSCL",
                column: "dscl",
                dashed: false,
            },
            Series {
                name: "1/|P| (theory)",
                column: "theory_scl",
                dashed: true,
            },
            Series {
                name: "α/(1−α) (theory)",
                column: "theory_dscl",
                dashed: true,
            },
        ],
    )?;
    let strong: Vec<&RatioBucket> = res.buckets.iter().filter(|b| b.anchors >= 100).collect();
    let scl = mard(strong.iter().map(|b| (b.scl, b.theory_scl)));
    let dscl = mard(strong.iter().map(|b| (b.dscl, b.theory_dscl)));
    report.checks.push(Check::new(
        "scl-tracks-inverse-positives",
        scl <= RATIO_TOLERANCE,
        format!("mean abs rel deviation {scl:.4} over {} buckets", strong.len()),
    ));
    report.checks.push(Check::new(
        "dscl-flat-at-alpha-ratio",
        dscl <= RATIO_TOLERANCE,
        format!("mean abs rel deviation {dscl:.4} from {:.4}", dscl_theory(res.alpha)),
    ));
    report.summary = serde_json::to_value(&res)?;
    report.add_file("grad_ratio.csv", csv);
    report.add_file("grad_ratio.svg", svg);
    Ok(report)
}
