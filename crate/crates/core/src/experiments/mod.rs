//! Experiment drivers behind the CLI: gradient-ratio measurement, the
//! free-embedding convergence probe, ablations and sweeps, and patch
//! retrieval. Each produces a self-describing [`ExperimentReport`].

pub mod ablation;
pub mod converge;
pub mod grad_ratio;
pub mod plot;
pub mod retrieval;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::synthdata::{build_pattern_bank, generate_dataset, SynthDataset};
use crate::train::ExperimentConfig;

/// Outcome of one acceptance-style check attached to a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// A file produced alongside the report.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: Vec<u8>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub summary: serde_json::Value,
    pub checks: Vec<Check>,
    /// File names of the emitted CSVs and plots.
    pub artifacts: Vec<String>,
    #[serde(skip)]
    pub files: Vec<Artifact>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, config: &ExperimentConfig, seeds: Vec<u64>) -> Self {
        Self {
            experiment: experiment.into(),
            config_hash: config.hash(),
            config: config.clone(),
            seeds,
            summary: serde_json::Value::Null,
            checks: Vec::new(),
            artifacts: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn add_file(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.artifacts.push(name.into());
        self.files.push(Artifact {
            name: name.into(),
            contents: contents.into(),
        });
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.contents.as_slice())
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Write `report.json` and every artifact into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        for a in &self.files {
            std::fs::write(dir.join(&a.name), &a.contents)?;
        }
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

/// Build the configured dataset in memory.
pub fn dataset_for(config: &ExperimentConfig) -> Result<SynthDataset> {
    let s = &config.dataset;
    s.validate()?;
    let bank = build_pattern_bank(s.num_motifs, s.num_classes(), s.sharing_degree, s.seed)?;
    generate_dataset(s, &bank)
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn report_embeds_config() {
        let cfg = ExperimentConfig::default();
        let mut r = ExperimentReport::new("x", &cfg, vec![1]);
        r.add_file("a.csv", "h\n1\n");
        let dir = tempfile::tempdir().unwrap();
        let p = r.write(dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
        let back: ExperimentConfig = serde_json::from_value(v["config"].clone()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(v["config_hash"], cfg.hash());
        assert_eq!(std::fs::read_to_string(dir.path().join("a.csv")).unwrap(), "h\n1\n");
    }
}
