use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rankmbo::bench::{
    generalization_bound, generate_task_dataset, sweep_heavy_tail, write_sweep_csv, BoundAlgorithm, BoundInputs,
    HeavyTailNoiseSpec, SweepConfig, Transform,
};
use rankmbo::data::OfflineDataset;
use rankmbo::diffnet::DenseNet;
use rankmbo::harness::{
    correlation_study, emit_report, prepare_cell_data, read_results_csv, run_pipeline, search_cell, summarize,
    train_cell, write_correlation, write_results_csv, ExperimentConfig, CONFIG_KEYS, MIN_STUDY_RUNS,
};
use rankmbo::losses::LossKind;
use rankmbo::searcher::write_candidates;

#[derive(Parser)]
#[command(
    name = "rankmbo",
    version,
    about = "Ranking-loss surrogates for offline black-box optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one surrogate and write its checkpoint and training record.
    Train(TrainArgs),
    /// Run gradient ascent from the best offline designs of a dataset.
    Search(SearchArgs),
    /// Train, search and score every (loss, seed) cell of a config.
    Pipeline(PipelineArgs),
    /// Fit MSE and RankCosine lines on heavy-tailed toy data.
    SweepHeavytail(SweepArgs),
    /// Evaluate the generalization bound for one setting.
    Bound(BoundArgs),
    /// Correlate OOD metric ranks with score ranks from a results file.
    Correlate(CorrelateArgs),
    /// Merge results files and rebuild the summary.
    Report(ReportArgs),
    /// List the config keys.
    Keys,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Raw offline data as CSV (`x0,...,y`); generated from the task config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "listnet")]
    loss: LossKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw offline data the checkpoint was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed used at training time; it fixes the split the statistics come from.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV of candidates in raw design space.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run seeds; replaces `run.seeds`.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Alpha,
    P,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Parameter values; a default grid is used when empty.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhiKind {
    Linear,
    Exp,
    Sigmoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Rankcosine,
    Listnet,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, value_enum)]
    phi: PhiKind,
    #[arg(long, value_enum)]
    algorithm: AlgorithmArg,
    #[arg(long)]
    a: f64,
    /// Offset of the linear transform.
    #[arg(long, default_value_t = 0.0)]
    b: f64,
    #[arg(long)]
    weight_norm: f64,
    #[arg(long)]
    design_norm: f64,
    #[arg(long)]
    m: u32,
    #[arg(long)]
    n: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more results.csv files.
    #[arg(long, required = true, num_args = 1..)]
    results: Vec<PathBuf>,
    /// Directory for the merged results.csv and summary.txt.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Search(a) => cmd_search(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::SweepHeavytail(a) => cmd_sweep(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Report(a) => cmd_report(a),
        Command::Keys => {
            let mut out = std::io::stdout().lock();
            for (key, desc) in CONFIG_KEYS {
                // a closed pipe just ends the listing
                if writeln!(out, "{key:<30} {desc}").is_err() {
                    break;
                }
            }
            Ok(())
        }
    }
}

/// Raw offline data from a CSV, or the training side of the synthetic task.
fn offline_data(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<OfflineDataset> {
    match path {
        Some(p) => Ok(OfflineDataset::read_csv(p)?),
        None => Ok(generate_task_dataset(&cfg.task, cfg.data_seed)?.train),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let raw = offline_data(&cfg, a.data.as_deref())?;
    let (_, net, record) = train_cell(&cfg, &raw, a.loss, a.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    net.save(a.out.join("model.ckpt"))?;
    record.write_csv(a.out.join("train_record.csv"))?;
    println!(
        "best epoch {} (validation loss {:.6}), checkpoint {}",
        record.best_epoch,
        record.best_val_loss(),
        a.out.join("model.ckpt").display()
    );
    Ok(())
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let raw = offline_data(&cfg, a.data.as_deref())?;
    let net = DenseNet::load(&a.checkpoint)?;
    let data = prepare_cell_data(&raw, cfg.train.train_ratio, a.seed)?;
    let candidates = search_cell(&cfg, &data, net)?;
    write_candidates(&a.out, &candidates)?;
    println!("{} candidates written to {}", candidates.len(), a.out.display());
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    cfg.seeds = a.seed;
    cfg.out = a.out;
    let results = run_pipeline(&cfg)?;
    let summary = emit_report(&results, &cfg.out)?;
    print!("{summary}");
    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; see results.csv", results.len());
    }
    if results.len() - failed >= MIN_STUDY_RUNS {
        write_correlation(&cfg.out, &correlation_study(&results)?)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let values = if a.values.is_empty() {
        match a.param {
            SweepParam::Alpha => vec![10.0, 15.0, 20.0, 50.0, 100.0],
            SweepParam::P => (2..=10).map(|i| i as f64 / 10.0).collect(),
        }
    } else {
        a.values
    };
    let cells: Vec<(f64, HeavyTailNoiseSpec)> = values
        .iter()
        .map(|&v| {
            let spec = match a.param {
                SweepParam::Alpha => HeavyTailNoiseSpec {
                    alpha: v,
                    ..Default::default()
                },
                SweepParam::P => HeavyTailNoiseSpec {
                    p: v,
                    ..Default::default()
                },
            };
            (v, spec)
        })
        .collect();
    let cfg = SweepConfig {
        points: a.points,
        seeds: (0..a.seeds).collect(),
        lr: a.lr,
        epochs: a.epochs,
    };
    let rows = sweep_heavy_tail(&cells, &cfg)?;
    write_sweep_csv(&a.out, &rows)?;
    for r in &rows {
        println!(
            "{:>8} w_MSE {:>10.4} w_RankCosine {:>8.4}",
            r.parameter, r.w_mse, r.w_rankcosine
        );
    }
    Ok(())
}

fn cmd_bound(a: BoundArgs) -> Result<()> {
    let phi = match a.phi {
        PhiKind::Linear => Transform::Linear { a: a.a, b: a.b },
        PhiKind::Exp => Transform::Exponential { a: a.a },
        PhiKind::Sigmoid => Transform::Sigmoid { a: a.a },
    };
    let algorithm = match a.algorithm {
        AlgorithmArg::Rankcosine => BoundAlgorithm::RankCosine,
        AlgorithmArg::Listnet => BoundAlgorithm::ListNet,
    };
    let value = generalization_bound(&BoundInputs {
        phi,
        weight_norm: a.weight_norm,
        design_norm: a.design_norm,
        list_len: a.m,
        n: a.n,
        delta: a.delta,
        algorithm,
    })?;
    println!("{value}");
    Ok(())
}

fn cmd_correlate(a: CorrelateArgs) -> Result<()> {
    let results = read_results_csv(&a.results)?;
    let reports = correlation_study(&results)?;
    write_correlation(&a.out, &reports)?;
    for (task, r) in &reports {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        println!(
            "{task}: {} runs, spearman ood_mse {}, ood_aupcc {}",
            r.runs,
            fmt(r.mse_spearman),
            fmt(r.aupcc_spearman)
        );
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut results = Vec::new();
    for path in &a.results {
        results.extend(read_results_csv(path)?);
    }
    if results.is_empty() {
        bail!("no runs in the given results files");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_results_csv(a.out.join("results.csv"), &results)?;
    let summary = summarize(&results);
    std::fs::write(a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
