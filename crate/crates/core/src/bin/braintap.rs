use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use braintap::analysis::{
    analyze_mrr, export_top_edges, ratios_csv, report_ratios, Aggregator, MrrOptions,
};
use braintap::checkpoint::Checkpoint;
use braintap::config::TrainConfig;
use braintap::data::{generate_synthetic_cohort, load_cohort, GeneratorConfig, Split};
use braintap::train::{evaluate, run_variants, train_with_observer, Variant};
use braintap::{Error, Result};

#[derive(Parser)]
#[command(
    name = "braintap",
    version,
    about = "Train and analyse dual-modality brain network classifiers"
)]
struct Cli {
    /// Training configuration (flat TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort with planted prior-region signal.
    Generate(GenerateArgs),
    /// Train one model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on every split of a cohort.
    Evaluate(EvalArgs),
    /// Train the full model and its ablations over the configured seeds.
    Ablate(AblateArgs),
    /// Per-layer distill-intact ratios of a checkpoint.
    Ratios(RatiosArgs),
    /// Mean reciprocal rank of each prior under the learned gate.
    Mrr(MrrArgs),
    /// Strongest connections of the test-averaged gate.
    TopEdges(TopEdgesArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    subjects: usize,
    #[arg(long, default_value_t = 20)]
    rois: usize,
    #[arg(long, default_value_t = 2)]
    priors: usize,
    #[arg(long, default_value_t = 0.4)]
    signal: f64,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prior (1-based) carrying the FC signal.
    #[arg(long, default_value_t = 1)]
    fc_signal_prior: usize,
    /// Prior (1-based) carrying the SC signal; defaults to 2, or 1 with a single prior.
    #[arg(long)]
    sc_signal_prior: Option<usize>,
    /// Standard deviation of subject-specific low-rank background structure.
    #[arg(long)]
    background_sd: Option<f64>,
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort_dir: PathBuf,
    /// Output directory for model.ckpt, metrics.csv and summary.csv.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cohort_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    cohort_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also train the baseline without distillation or prior fusion.
    #[arg(long)]
    no_fusion: bool,
    /// Overrides the configured seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RatiosArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MrrArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cohort_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// mean, max or top-decile.
    #[arg(long, default_value = "mean")]
    aggregator: String,
    /// Rank the free region alongside the priors.
    #[arg(long)]
    include_free: bool,
}

#[derive(Args)]
struct TopEdgesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cohort_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0001)]
    fraction: f64,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prior_index(one_based: usize, flag: &str) -> Result<usize> {
    one_based
        .checked_sub(1)
        .ok_or_else(|| Error::Usage(format!("--{flag} is 1-based")))
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Generate(a) => {
            let mut g =
                GeneratorConfig::new(a.subjects, a.rois, a.priors, a.signal, a.noise, a.seed);
            g.fc_signal_prior = prior_index(a.fc_signal_prior, "fc-signal-prior")?;
            if let Some(k) = a.sc_signal_prior {
                g.sc_signal_prior = prior_index(k, "sc-signal-prior")?;
            }
            if let Some(sd) = a.background_sd {
                g.background_sd = sd;
            }
            if let Some(t) = a.task {
                g.task = t;
            }
            generate_synthetic_cohort(&g, &a.out)?;
        }
        Command::Train(a) => {
            let mut cfg = load_config(config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let cohort = load_cohort(&a.cohort_dir)?;
            let (model, report) = train_with_observer(&cfg, &cohort, |r| {
                log::info!(
                    "epoch {} train_loss {:.5} val_loss {:.5} val_auc {:?}",
                    r.epoch,
                    r.train_loss,
                    r.val_loss,
                    r.val_auc
                )
            })?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            Checkpoint { train: cfg, model }.save(&a.out.join("model.ckpt"))?;
            write(&a.out.join("metrics.csv"), &report.metrics_csv())?;
            write(&a.out.join("summary.csv"), &report.summary_csv())?;
        }
        Command::Evaluate(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let cohort = load_cohort(&a.cohort_dir)?;
            let mut out = String::from("split,n_subjects,auc,mean_loss\n");
            for split in [Split::Train, Split::Val, Split::Test] {
                let subjects = cohort.split(split);
                let e = evaluate(
                    &ck.model,
                    &subjects,
                    &cohort.priors,
                    ck.train.lambda_distill,
                )?;
                let auc = e
                    .auc
                    .map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
                out.push_str(&format!(
                    "{split},{},{auc},{:.8}\n",
                    subjects.len(),
                    e.mean_loss
                ));
            }
            write(&a.out, &out)?;
        }
        Command::Ablate(a) => {
            let mut cfg = load_config(config)?;
            if let Some(s) = a.seed {
                cfg.seeds = vec![s];
            }
            let cohort = load_cohort(&a.cohort_dir)?;
            let mut variants = Variant::ABLATION.to_vec();
            if a.no_fusion {
                variants.push(Variant::NoFusion);
            }
            let table = run_variants(&cfg, &cohort, &variants)?;
            write(&a.out, &table.to_csv())?;
        }
        Command::Ratios(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            write(&a.out, &ratios_csv(&report_ratios(&ck.model)))?;
        }
        Command::Mrr(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let cohort = load_cohort(&a.cohort_dir)?;
            let options = MrrOptions {
                aggregator: a.aggregator.parse::<Aggregator>()?,
                include_free: a.include_free,
            };
            write(&a.out, &analyze_mrr(&ck.model, &cohort, options)?.to_csv())?;
        }
        Command::TopEdges(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let cohort = load_cohort(&a.cohort_dir)?;
            write(
                &a.out,
                &export_top_edges(&ck.model, &cohort, a.fraction)?.to_csv(),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
