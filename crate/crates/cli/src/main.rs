use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bams::config::{Ablation, PretrainMode, RunConfig};
use bams::dataset::{Dataset, Sequence};
use bams::eval::{
    merge_result_files, model_embeddings, pca_embeddings, read_embeddings, results_to_csv, run_probe_suite,
    summary_table, write_embeddings, write_report, Timescale,
};
use bams::model::load_checkpoint;
use bams::synth::generate_dataset;
use bams::trainer::{train, NoObserver, TrainData, FINAL_CHECKPOINT};

mod failure;

use failure::{Failure, EXIT_CONFIG, EXIT_SCHEMA};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
const RESULTS_FILE: &str = "results.csv";

#[derive(Parser)]
#[command(
    name = "bams",
    version,
    about = "Multi-timescale behavior representations: generate, train, embed, probe, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Inductive,
    Transductive,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    Hoa,
    Bootstrap,
    Multiscale,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Short,
    Long,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled synthetic dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of sequences (overrides data.n_sequences).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write its checkpoint and log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export frozen embeddings of every sequence.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        which: WhichArg,
        #[arg(long)]
        force: bool,
    },
    /// Export PCA-of-features baseline embeddings.
    Baseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Components per agent (defaults to the model embedding width).
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Fit linear probes on exported embeddings.
    Probe {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge probe result files into tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::io(p, e))?;
            RunConfig::from_toml_str(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", p.display())))
        }
    }
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, cfg.to_toml_string()).map_err(|e| Failure::io(&path, e))
}

fn threads() -> usize {
    std::env::var("BAMS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

fn load_all(ds: &Dataset) -> Result<Vec<Sequence>, Failure> {
    ds.manifest()
        .sequences
        .iter()
        .map(|s| ds.load_sequence(&s.id).map_err(Failure::from))
        .collect()
}

fn generate(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    n: Option<usize>,
    force: bool,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = n {
        cfg.data.n_sequences = n;
    }
    cfg.validate()?;
    let manifest = generate_dataset(cfg.seed, &cfg.data, out, force)?;
    write_resolved(out, &cfg)?;
    for (split, count) in manifest.split_counts() {
        println!("{split}: {count}");
    }
    Ok(())
}

fn train_cmd(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    mode: Option<ModeArg>,
    ablate: Option<AblateArg>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.trainer.mode = match m {
            ModeArg::Inductive => PretrainMode::Inductive,
            ModeArg::Transductive => PretrainMode::Transductive,
        };
    }
    if let Some(a) = ablate {
        cfg.trainer.ablation = match a {
            AblateArg::Hoa => Ablation::Hoa,
            AblateArg::Bootstrap => Ablation::Bootstrap,
            AblateArg::Multiscale => Ablation::Multiscale,
        };
    }
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let train_data = TrainData::from_dataset(&ds, &cfg)?;
    write_resolved(out, &cfg)?;
    log::info!(
        "training on {} sequences ({:?}, ablation {:?})",
        train_data.sequences.len(),
        cfg.trainer.mode,
        cfg.trainer.ablation
    );
    let result = train(&cfg, &train_data, Some(out), &mut NoObserver)?;
    if let Some(last) = result.log.epochs.last() {
        println!("epoch {} loss {:.6} alpha {}", last.epoch, last.loss, result.alpha);
    }
    println!("{}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn embed(checkpoint: &Path, data: &Path, out: &Path, which: WhichArg, force: bool) -> Result<(), Failure> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let ds = Dataset::open(data)?;
    let seqs = load_all(&ds)?;
    let scale = match which {
        WhichArg::Short => Timescale::Short,
        WhichArg::Long => Timescale::Long,
        WhichArg::Both => Timescale::Both,
    };
    let set = model_embeddings(&model, &seqs, &[scale])?.remove(0);
    write_embeddings(out, &set, force)?;
    println!("{} sequences, {} dims ({scale})", set.sequences.len(), set.dim);
    Ok(())
}

fn baseline(config: Option<&Path>, data: &Path, out: &Path, dim: Option<usize>, force: bool) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let dim = dim.unwrap_or(cfg.model.short.embedding_dim + cfg.model.long.embedding_dim);
    let ds = Dataset::open(data)?;
    let seqs = load_all(&ds)?;
    let set = pca_embeddings(&seqs, &cfg.eval.train_split, dim)?;
    write_embeddings(out, &set, force)?;
    println!("{} sequences, {} dims (pca)", set.sequences.len(), set.dim);
    Ok(())
}

fn probe(embeddings: &Path, data: &Path, out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let set = read_embeddings(embeddings)?;
    let ds = Dataset::open(data)?;
    let seqs = load_all(&ds)?;
    let (results, skipped) = run_probe_suite(&set, ds.manifest(), &seqs, &cfg.eval, seed, threads())?;
    if results.is_empty() && !skipped.is_empty() {
        return Err(Failure::new(
            EXIT_SCHEMA,
            format!("every task was skipped for missing labels: {}", skipped.join(", ")),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    let path = out.join(RESULTS_FILE);
    std::fs::write(&path, results_to_csv(&results)).map_err(|e| Failure::io(&path, e))?;
    for r in &results {
        println!("{} {} {} = {:.4}", r.embedding, r.task, r.metric.as_str(), r.value);
    }
    Ok(())
}

fn report(results: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let runs = merge_result_files(results)?;
    let (_, txt) = write_report(out, &runs)?;
    print!("{}", summary_table(&runs));
    log::info!("wrote {}", txt.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            config,
            out,
            seed,
            n,
            force,
        } => generate(config.as_deref(), &out, seed, n, force),
        Command::Train {
            config,
            data,
            out,
            mode,
            ablate,
            seed,
        } => train_cmd(config.as_deref(), &data, &out, mode, ablate, seed),
        Command::Embed {
            checkpoint,
            data,
            out,
            which,
            force,
        } => embed(&checkpoint, &data, &out, which, force),
        Command::Baseline {
            config,
            data,
            out,
            dim,
            force,
        } => baseline(config.as_deref(), &data, &out, dim, force),
        Command::Probe {
            embeddings,
            data,
            out,
            config,
            seed,
        } => probe(&embeddings, &data, &out, config.as_deref(), seed),
        Command::Report { results, out } => report(&results, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
