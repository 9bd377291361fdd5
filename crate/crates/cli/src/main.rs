use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ltcl::encoder::{load_checkpoint, save_checkpoint, EncoderParams};
use ltcl::experiments::ablation::{run_ablation, run_hyperparameter_sweep, SweepParam, Variant};
use ltcl::experiments::converge::run_convergence_probe;
use ltcl::experiments::grad_ratio::run_gradient_ratio_experiment;
use ltcl::experiments::retrieval::{default_queries, run_patch_retrieval, Query};
use ltcl::experiments::{dataset_for, ExperimentReport};
use ltcl::synthdata::{load_dataset, save_dataset};
use ltcl::synthdata::{PatchBox, SynthDataset};
use ltcl::train::{evaluate_splits, extract_features, LinearClassifier};
use ltcl::train::{
    linear_probe, metrics_csv, queue_stat_checks, queue_stats_csv, stage1_train, ExperimentConfig,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "ltcl", version, about = "Long-tailed contrastive learning lab")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit with code 4 when any acceptance check fails.
    #[arg(long, global = true)]
    check: bool,
    /// Dataset directory written by `gen-data`; generated in memory otherwise.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Stage-1 contrastive training; writes a checkpoint and metrics.
    Train,
    /// Stage-2 linear classifier on a frozen checkpoint.
    LinearProbe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Split accuracies of a trained classifier.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
    },
    /// Positive-gradient ratios at initialisation.
    GradRatio,
    /// Fixed points of the losses on free embeddings.
    ConvergeProbe,
    /// Loss ablation over several seeds.
    Ablate {
        /// Comma-separated variants (scl, dscl, scl+pbsd, dscl+pbsd, dscl+multicrop, dscl+pbsd-global).
        #[arg(long, value_delimiter = ',', default_value = "scl,dscl,dscl+pbsd,dscl+multicrop")]
        variants: Vec<String>,
        /// Comma-separated seeds; defaults to three seeds starting at --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Hyperparameter sweep around DSCL+PBSD.
    Sweep {
        /// Parameters to sweep (alpha, patches, lambda).
        #[arg(long, value_delimiter = ',', default_value = "alpha,patches,lambda")]
        params: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Patch-to-image retrieval.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Number of default queries (one motif box per sampled test image).
        #[arg(long, default_value_t = 16)]
        queries: usize,
        /// Explicit query `image:cx:cy:w:h`; repeatable.
        #[arg(long = "query")]
        query: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<ltcl::Error>()) {
        Some(le) if le.is_config() => EXIT_CONFIG,
        Some(le) if le.is_numerical() => EXIT_NUMERICAL,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(g: &Global, cfg: &ExperimentConfig) -> anyhow::Result<SynthDataset> {
    match &g.data {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            if ds.spec != cfg.dataset {
                return Err(ltcl::Error::Config(format!(
                    "dataset in {} was generated from a different spec",
                    dir.display()
                ))
                .into());
            }
            Ok(ds)
        }
        None => Ok(dataset_for(cfg)?),
    }
}

fn checkpoint(path: &Path, cfg: &ExperimentConfig) -> anyhow::Result<EncoderParams> {
    let (_, params) = load_checkpoint(path, Some(&cfg.encoder))
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(params)
}

fn seeds_or_default(seeds: Option<Vec<u64>>, base: u64) -> Vec<u64> {
    seeds.unwrap_or_else(|| (0..3).map(|i| base + i).collect())
}

fn parse_query(s: &str) -> anyhow::Result<Query> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 5 {
        bail!(ltcl::Error::Config(format!("query {s:?} is not image:cx:cy:w:h")));
    }
    let f = |i: usize| -> anyhow::Result<f64> {
        parts[i]
            .parse()
            .map_err(|_| ltcl::Error::Config(format!("bad number {:?} in query", parts[i])).into())
    };
    let image = parts[0]
        .parse()
        .map_err(|_| ltcl::Error::Config(format!("bad image index {:?}", parts[0])))?;
    let bbox = PatchBox {
        cx: f(1)?,
        cy: f(2)?,
        w: f(3)?,
        h: f(4)?,
    };
    if !bbox.is_valid() {
        bail!(ltcl::Error::Config(format!("query box {bbox:?} leaves the image")));
    }
    Ok(Query {
        image,
        bbox,
        motif: None,
    })
}

fn finish(report: &ExperimentReport, out: &Path) -> anyhow::Result<bool> {
    let path = report.write(out)?;
    for c in &report.checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("wrote {}", path.display());
    Ok(report.all_passed())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            bail!(ltcl::Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(g.config.as_deref())?;
    fs::create_dir_all(&g.out)?;

    let passed = match cli.command {
        Command::GenData => {
            let ds = dataset_for(&cfg)?;
            save_dataset(&ds, &g.out)?;
            println!(
                "{} train / {} test images, nearest-centroid accuracy {:.3}",
                ds.train.len(),
                ds.test.len(),
                ds.centroid_accuracy
            );
            true
        }
        Command::Train => {
            let ds = dataset(g, &cfg)?;
            let out = stage1_train(&ds, &cfg, g.seed)?;
            save_checkpoint(&g.out.join("checkpoint.bin"), &out.params, g.seed, out.steps as u64)?;
            let mut report = ExperimentReport::new("train", &cfg, vec![g.seed]);
            report.checks = queue_stat_checks(&out.queue_stats, &ds.spec.counts);
            report.summary = serde_json::json!({
                "steps": out.steps,
                "final": out.metrics.last().map(|r| r.csv()),
            });
            report.add_file("metrics.csv", metrics_csv(&out.metrics));
            report.add_file("queue_stats.csv", queue_stats_csv(&out.queue_stats));
            finish(&report, &g.out)?
        }
        Command::LinearProbe { checkpoint: ck } => {
            let ds = dataset(g, &cfg)?;
            let params = checkpoint(&ck, &cfg)?;
            let (clf, split) = linear_probe(&params, &ds, &cfg.stage2, g.seed)?;
            let mut report = ExperimentReport::new("linear-probe", &cfg, vec![g.seed]);
            report.summary = serde_json::to_value(&split)?;
            report.add_file("classifier.json", serde_json::to_vec_pretty(&clf)?);
            println!("overall accuracy {:.4}", split.overall);
            finish(&report, &g.out)?
        }
        Command::Eval {
            checkpoint: ck,
            classifier,
        } => {
            let ds = dataset(g, &cfg)?;
            let params = checkpoint(&ck, &cfg)?;
            let clf: LinearClassifier = serde_json::from_slice(
                &fs::read(&classifier).with_context(|| format!("reading {}", classifier.display()))?,
            )
            .map_err(ltcl::Error::from)?;
            let test_x = extract_features(&params, &ds.test)?;
            let split = evaluate_splits(&clf, &test_x, &ds.test_labels(), &ds.spec.counts)?;
            let mut report = ExperimentReport::new("eval", &cfg, vec![g.seed]);
            report.summary = serde_json::to_value(&split)?;
            println!(
                "overall {:.4}  many {:?}  medium {:?}  few {:?}",
                split.overall, split.many, split.medium, split.few
            );
            finish(&report, &g.out)?
        }
        Command::GradRatio => {
            let ds = dataset(g, &cfg)?;
            finish(&run_gradient_ratio_experiment(&ds, &cfg, g.seed)?, &g.out)?
        }
        Command::ConvergeProbe => finish(&run_convergence_probe(&cfg, g.seed)?, &g.out)?,
        Command::Ablate { variants, seeds } => {
            let ds = dataset(g, &cfg)?;
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v))
                .collect::<ltcl::Result<Vec<_>>>()?;
            let seeds = seeds_or_default(seeds, g.seed);
            finish(&run_ablation(&ds, &cfg, &variants, &seeds)?, &g.out)?
        }
        Command::Sweep { params, seeds } => {
            let ds = dataset(g, &cfg)?;
            let params = params
                .iter()
                .map(|p| {
                    let sp = match p.as_str() {
                        "alpha" => SweepParam::Alpha,
                        "patches" => SweepParam::Patches,
                        "lambda" => SweepParam::Lambda,
                        other => {
                            return Err(ltcl::Error::Config(format!("unknown sweep parameter {other:?}")))
                        }
                    };
                    Ok((sp, sp.default_values()))
                })
                .collect::<ltcl::Result<Vec<_>>>()?;
            let seeds = seeds_or_default(seeds, g.seed);
            finish(&run_hyperparameter_sweep(&ds, &cfg, &params, &seeds)?, &g.out)?
        }
        Command::Retrieve {
            checkpoint: ck,
            k,
            queries,
            query,
        } => {
            let ds = dataset(g, &cfg)?;
            let params = checkpoint(&ck, &cfg)?;
            let qs = if query.is_empty() {
                default_queries(&ds, queries)
            } else {
                query.iter().map(|q| parse_query(q)).collect::<anyhow::Result<_>>()?
            };
            finish(&run_patch_retrieval(&params, &ds, &cfg, &qs, k)?, &g.out)?
        }
    };
    Ok(!g.check || passed)
}
