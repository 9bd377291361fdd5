//! Component ablation and hyper-parameter sweeps over full pipeline runs.

use std::fmt::Write;

use serde::Serialize;

use super::plot::{bar_plot, line_plot, Axis, Series};
use super::{mean_std, Check, ExperimentReport};
use crate::error::{Error, Result};
use crate::losses::{ContrastKind, LossConfig, PatchLoss, TargetSource};
use crate::synthdata::SynthDataset;
use crate::train::{metrics_csv, run_pipeline, ExperimentConfig, SplitReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    Scl,
    Dscl,
    SclPbsd,
    DsclPbsd,
    DsclMulticrop,
    DsclPbsdGlobal,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Scl,
        Variant::Dscl,
        Variant::SclPbsd,
        Variant::DsclPbsd,
        Variant::DsclMulticrop,
        Variant::DsclPbsdGlobal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Scl => "scl",
            Variant::Dscl => "dscl",
            Variant::SclPbsd => "scl+pbsd",
            Variant::DsclPbsd => "dscl+pbsd",
            Variant::DsclMulticrop => "dscl+multicrop",
            Variant::DsclPbsdGlobal => "dscl+pbsd-global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// Set the switches on `loss` that define this variant; numeric
    /// hyper-parameters are left alone.
    pub fn apply(self, loss: &mut LossConfig) {
        let (contrast, patch, target) = match self {
            Variant::Scl => (ContrastKind::Scl, PatchLoss::None, TargetSource::Roi),
            Variant::Dscl => (ContrastKind::Dscl, PatchLoss::None, TargetSource::Roi),
            Variant::SclPbsd => (ContrastKind::Scl, PatchLoss::Pbsd, TargetSource::Roi),
            Variant::DsclPbsd => (ContrastKind::Dscl, PatchLoss::Pbsd, TargetSource::Roi),
            Variant::DsclMulticrop => (ContrastKind::Dscl, PatchLoss::Multicrop, TargetSource::Roi),
            Variant::DsclPbsdGlobal => (ContrastKind::Dscl, PatchLoss::Pbsd, TargetSource::Global),
        };
        loss.contrast = contrast;
        loss.patch_loss = patch;
        loss.target = target;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub report: SplitReport,
    #[serde(skip)]
    pub metrics_csv: String,
    #[serde(skip)]
    pub queue_stats: Vec<crate::train::QueueStat>,
}

/// Mean ± sample std of each accuracy column over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub label: String,
    pub seeds: usize,
    pub overall: (f64, f64),
    pub many: (f64, f64),
    pub medium: (f64, f64),
    pub few: (f64, f64),
}

pub fn summarize(label: &str, runs: &[&RunResult]) -> Summary {
    let col = |f: fn(&SplitReport) -> Option<f64>| {
        let v: Vec<f64> = runs.iter().filter_map(|r| f(&r.report)).collect();
        mean_std(&v)
    };
    Summary {
        label: label.into(),
        seeds: runs.len(),
        overall: col(|r| Some(r.overall)),
        many: col(|r| r.many),
        medium: col(|r| r.medium),
        few: col(|r| r.few),
    }
}

pub fn summary_csv(rows: &[Summary]) -> String {
    let mut s = String::from(
        "label,seeds,many,many_std,medium,medium_std,few,few_std,overall,overall_std\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.seeds,
            r.many.0,
            r.many.1,
            r.medium.0,
            r.medium.1,
            r.few.0,
            r.few.1,
            r.overall.0,
            r.overall.1
        );
    }
    s
}

pub fn runs_csv(runs: &[RunResult]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("label,seed,many,medium,few,overall\n");
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.label,
            r.seed,
            opt(r.report.many),
            opt(r.report.medium),
            opt(r.report.few),
            r.report.overall
        );
    }
    s
}

/// Train and evaluate one configuration for one seed.
pub fn run_one(
    ds: &SynthDataset,
    config: &ExperimentConfig,
    label: &str,
    seed: u64,
) -> Result<RunResult> {
    log::info!("running {label} seed {seed}");
    let out = run_pipeline(ds, config, seed)?;
    Ok(RunResult {
        label: label.into(),
        seed,
        report: out.report,
        metrics_csv: metrics_csv(&out.stage1.metrics),
        queue_stats: out.stage1.queue_stats,
    })
}

/// Pooled standard deviation of two groups.
pub fn pooled_std(a: (f64, f64), na: usize, b: (f64, f64), nb: usize) -> f64 {
    let num = (na as f64 - 1.0) * a.1 * a.1 + (nb as f64 - 1.0) * b.1 * b.1;
    let den = (na + nb) as f64 - 2.0;
    if den <= 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// `better` beats `worse` in mean overall accuracy by more than one pooled
/// standard deviation.
pub fn gap_check(better: &Summary, worse: &Summary) -> Check {
    let sp = pooled_std(better.overall, better.seeds, worse.overall, worse.seeds);
    let gap = better.overall.0 - worse.overall.0;
    Check::new(
        &format!("{}>{}", better.label, worse.label),
        gap > sp,
        format!(
            "{:.4} vs {:.4}: gap {gap:.4}, pooled std {sp:.4}",
            better.overall.0, worse.overall.0
        ),
    )
}

pub struct AblationResult {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<Summary>,
}

impl AblationResult {
    pub fn summary(&self, v: Variant) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.label == v.name())
    }
}

pub fn ablation(
    ds: &SynthDataset,
    config: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationResult> {
    let mut runs = Vec::new();
    for &v in variants {
        let mut cfg = config.clone();
        v.apply(&mut cfg.loss);
        for &s in seeds {
            runs.push(run_one(ds, &cfg, v.name(), s)?);
        }
    }
    let summaries = variants
        .iter()
        .map(|v| {
            let rs: Vec<&RunResult> = runs.iter().filter(|r| r.label == v.name()).collect();
            summarize(v.name(), &rs)
        })
        .collect();
    Ok(AblationResult { runs, summaries })
}

pub fn run_ablation(
    ds: &SynthDataset,
    config: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let res = ablation(ds, config, variants, seeds)?;
    let mut report = ExperimentReport::new("ablate", config, seeds.to_vec());
    let pairs = [
        (Variant::DsclPbsd, Variant::Dscl),
        (Variant::Dscl, Variant::Scl),
        (Variant::DsclPbsd, Variant::DsclMulticrop),
    ];
    for (a, b) in pairs {
        if let (Some(sa), Some(sb)) = (res.summary(a), res.summary(b)) {
            report.checks.push(gap_check(sa, sb));
        }
    }
    if let (Some(d), Some(s)) = (res.summary(Variant::Dscl), res.summary(Variant::Scl)) {
        report.checks.push(Check::new(
            "dscl-few>scl-few",
            d.few.0 > s.few.0,
            format!("{:.4} vs {:.4}", d.few.0, s.few.0),
        ));
    }
    let table = summary_csv(&res.summaries);
    let svg = bar_plot(
        &table,
        "Ablation: accuracy by split",
        "label",
        &[
            ("many", Some("many_std")),
            ("medium", Some("medium_std")),
            ("few", Some("few_std")),
            ("overall", Some("overall_std")),
        ],
    )?;
    report.summary = serde_json::json!({ "variants": res.summaries, "runs": res.runs });
    report.add_file("ablation.csv", table);
    report.add_file("ablation_runs.csv", runs_csv(&res.runs));
    report.add_file("ablation.svg", svg);
    for r in &res.runs {
        report.add_file(
            &format!("metrics_{}_seed{}.csv", r.label.replace('+', "_"), r.seed),
            r.metrics_csv.clone(),
        );
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SweepParam {
    Alpha,
    Patches,
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Patches => "patches",
            SweepParam::Lambda => "lambda",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Alpha => vec![0.0, 0.05, 0.1, 0.3, 0.5, 1.0],
            SweepParam::Patches => vec![1.0, 2.0, 3.0, 4.0, 5.0],
            SweepParam::Lambda => vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }

    pub fn apply(self, loss: &mut LossConfig, v: f64) {
        match self {
            SweepParam::Alpha => loss.alpha = v,
            SweepParam::Patches => loss.patches = v as usize,
            SweepParam::Lambda => loss.lambda = v,
        }
    }
}

/// Sweep each parameter over its values around the DSCL+PBSD configuration,
/// plus an SCL reference row.
pub fn run_hyperparameter_sweep(
    ds: &SynthDataset,
    config: &ExperimentConfig,
    params: &[(SweepParam, Vec<f64>)],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let mut base = config.clone();
    Variant::DsclPbsd.apply(&mut base.loss);
    let mut report = ExperimentReport::new("sweep", config, seeds.to_vec());
    let mut scl_cfg = config.clone();
    Variant::Scl.apply(&mut scl_cfg.loss);
    let scl_runs: Vec<RunResult> = seeds
        .iter()
        .map(|&s| run_one(ds, &scl_cfg, "scl", s))
        .collect::<Result<_>>()?;
    let scl = summarize("scl", &scl_runs.iter().collect::<Vec<_>>());
    let mut all = Vec::new();
    for (p, values) in params {
        let mut csv = String::from("value,overall,overall_std,few,few_std\n");
        let mut rows = Vec::new();
        for &v in values {
            let mut cfg = base.clone();
            p.apply(&mut cfg.loss, v);
            cfg.validate()?;
            let label = format!("{}={v}", p.name());
            let runs: Vec<RunResult> = seeds
                .iter()
                .map(|&s| run_one(ds, &cfg, &label, s))
                .collect::<Result<_>>()?;
            let sm = summarize(&label, &runs.iter().collect::<Vec<_>>());
            let _ = writeln!(
                csv,
                "{v},{},{},{},{}",
                sm.overall.0, sm.overall.1, sm.few.0, sm.few.1
            );
            rows.push((v, sm));
        }
        let svg = line_plot(
            &csv,
            &format!("Accuracy vs {}", p.name()),
            "value",
            Axis::linear(p.name()),
            Axis::linear("accuracy"),
            &[
                Series {
                    name: "overall",
                    column: "overall",
                    dashed: false,
                },
                Series {
                    name: "few",
                    column: "few",
                    dashed: false,
                },
            ],
        )?;
        if *p == SweepParam::Alpha {
            let at = |a: f64| rows.iter().find(|(v, _)| *v == a).map(|(_, s)| s.overall.0);
            if let (Some(one), Some(tenth)) = (at(1.0), at(0.1)) {
                report.checks.push(Check::new(
                    "alpha1<alpha0.1",
                    one < tenth,
                    format!("{one:.4} vs {tenth:.4}"),
                ));
            }
            if let Some(zero) = at(0.0) {
                report.checks.push(Check::new(
                    "alpha0>scl",
                    zero > scl.overall.0,
                    format!("{zero:.4} vs {:.4}", scl.overall.0),
                ));
            }
        }
        report.add_file(&format!("sweep_{}.csv", p.name()), csv);
        report.add_file(&format!("sweep_{}.svg", p.name()), svg);
        all.extend(rows.into_iter().map(|(_, s)| s));
    }
    all.push(scl);
    report.summary = serde_json::to_value(&all)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("nope").unwrap_err().is_config());
    }

    #[test]
    fn pooled_std_equal_groups() {
        assert!((pooled_std((0.0, 2.0), 3, (0.0, 2.0), 3) - 2.0).abs() < 1e-12);
        assert!((pooled_std((0.0, 3.0), 3, (0.0, 4.0), 3) - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gap_check_requires_margin() {
        let s = |label: &str, m: f64| Summary {
            label: label.into(),
            seeds: 3,
            overall: (m, 0.01),
            many: (0.0, 0.0),
            medium: (0.0, 0.0),
            few: (0.0, 0.0),
        };
        assert!(gap_check(&s("a", 0.52), &s("b", 0.5)).passed);
        assert!(!gap_check(&s("a", 0.505), &s("b", 0.5)).passed);
    }
}
