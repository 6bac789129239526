use std::path::PathBuf;

use clap::{Parser, Subcommand};

use rsnmt::cli::{self, Overrides, RunConfig, TableKind};
use rsnmt::model::StackingMode;

#[derive(Parser)]
#[command(name = "rsnmt", version, about = "Recurrently stacked transformer NMT toolkit")]
struct Cli {
    /// JSON run configuration; flags below override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and the run manifest
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Layer applications N
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[arg(long, global = true, value_parser = parse_stacking)]
    stacking: Option<StackingMode>,
    /// Decode-time recurrence M (recurrent models only)
    #[arg(long, global = true)]
    decode_depth: Option<usize>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Worker threads; the RSNMT_THREADS env var caps this
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic corpora from the config's task description
    GenData,
    /// Learn a BPE merge table from text files
    BpeTrain {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 200)]
        merges: usize,
    },
    /// Segment a text file with a trained BPE model
    BpeApply {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train a model on the configured data
    Train,
    /// Translate a text file with a checkpoint
    Translate {
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Corpus BLEU of a hypothesis file against a reference file
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Average the last N checkpoints in a directory
    AverageCkpt {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        last: usize,
    },
    /// Per-tensor inventory, totals, and stacking-policy comparison
    Params,
    /// Run the back-translation pipeline for the configured model
    Backtranslate,
    /// Train a grid and emit a paper-shaped table: table1|table2|table3
    Experiment { table: String },
}

fn parse_stacking(s: &str) -> Result<StackingMode, String> {
    match s {
        "vanilla" => Ok(StackingMode::Vanilla),
        "recurrent" => Ok(StackingMode::Recurrent),
        other => Err(format!("unknown stacking {other}, expected vanilla|recurrent")),
    }
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::GenData => "gen-data",
        Cmd::BpeTrain { .. } => "bpe-train",
        Cmd::BpeApply { .. } => "bpe-apply",
        Cmd::Train => "train",
        Cmd::Translate { .. } => "translate",
        Cmd::Evaluate { .. } => "evaluate",
        Cmd::AverageCkpt { .. } => "average-ckpt",
        Cmd::Params => "params",
        Cmd::Backtranslate => "backtranslate",
        Cmd::Experiment { .. } => "experiment",
    }
}

fn run() -> anyhow::Result<i32> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_flag_overrides(&mut cfg, &cli);
    let name = command_name(&cli.cmd);
    let mut artifacts = match &cli.cmd {
        Cmd::GenData => cli::cmd_gen_data(&cfg)?,
        Cmd::BpeTrain { inputs, merges } => cli::cmd_bpe_train(&cfg, inputs, *merges)?,
        Cmd::BpeApply { input, model } => cli::cmd_bpe_apply(&cfg, input, model)?,
        Cmd::Train => cli::cmd_train(&cfg)?,
        Cmd::Translate { input, ckpt } => cli::cmd_translate(&cfg, input, ckpt)?,
        Cmd::Evaluate { hyp, reference } => cli::cmd_evaluate(&cfg, hyp, reference)?,
        Cmd::AverageCkpt { ckpt_dir, last } => cli::cmd_average_ckpt(&cfg, ckpt_dir, *last)?,
        Cmd::Params => cli::cmd_params(&cfg)?,
        Cmd::Backtranslate => cli::cmd_backtranslate(&cfg)?,
        Cmd::Experiment { table } => {
            let kind: TableKind = table.parse().map_err(|e: String| anyhow::anyhow!(e))?;
            cli::cmd_experiment(&cfg, kind)?
        }
    };
    artifacts.push(cli::write_manifest(&cfg, name, &artifacts)?);
    let missing: Vec<_> = artifacts.iter().filter(|p| !p.exists()).collect();
    if missing.is_empty() {
        Ok(0)
    } else {
        for p in missing {
            eprintln!("missing artifact: {}", p.display());
        }
        Ok(1)
    }
}

fn apply_flag_overrides(cfg: &mut RunConfig, cli: &Cli) {
    cli::apply_overrides(
        cfg,
        &Overrides {
            seed: cli.seed,
            out: cli.out.clone(),
            depth: cli.depth,
            stacking: cli.stacking,
            decode_depth: cli.decode_depth,
            beam: cli.beam,
            alpha: cli.alpha,
            workers: cli.workers,
        },
    );
}

fn main() {
    let code = match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}
