use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ropelab_core::eval::{compare_bands, evaluate, EvalReport, EvalSet, DEFAULT_BAND_EPSILON};
use ropelab_core::planner::{
    cache_bytes, default_lengths, emit_curve, human_bytes, Placement, PlanQuery, Precision,
    DEFAULT_FRACTIONS,
};
use ropelab_core::train::corpus::tokenize_bytes;
use ropelab_core::train::synthetic::{SyntheticTask, TaskKind};
use ropelab_core::train::{run_sweep, train_run, write_outcome, SweepGrid, TrainOutcome, TrainRun};
use ropelab_core::{checkpoint, TopologyKind};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "ropelab",
    version,
    about = "Partial rotary embedding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Fp16,
    Fp32,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Fp16 => Precision::Fp16,
            PrecisionArg::Fp32 => Precision::Fp32,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Replicate,
    Shard,
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::Replicate => Placement::Replicate,
            PlacementArg::Shard => Placement::Shard,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a TOML or JSON run file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every run of a grid file and compare final losses.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Runs trained concurrently (overrides the grid file).
        #[arg(long)]
        jobs: Option<usize>,
        /// Loss-band tolerance in nats.
        #[arg(long, default_value_t = DEFAULT_BAND_EPSILON)]
        band_eps: f64,
    },
    /// RoPE cache size for one configuration.
    Plan {
        #[arg(long)]
        seq_len: u64,
        #[arg(long)]
        head_dim: usize,
        #[arg(long, value_enum, default_value = "fp32")]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        devices: u64,
        #[arg(long, value_enum, default_value = "replicate")]
        placement: PlacementArg,
        /// 2 counts separate sin and cos tables.
        #[arg(long, default_value_t = 1)]
        sincos_factor: u64,
    },
    /// Cache size over sequence lengths and fractions as CSV.
    PlanCurve {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        head_dim: usize,
        #[arg(long, value_enum, default_value = "fp32")]
        precision: PrecisionArg,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FRACTIONS.to_vec())]
        fractions: Vec<f64>,
        /// Defaults to powers of two from 2^10 to 2^23, then 10^7.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        sincos_factor: u64,
    },
    /// Held-out loss of a checkpoint on a text file or synthetic task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text file, or `synthetic:copy` / `synthetic:reverse`.
        #[arg(long)]
        corpus: String,
        #[arg(long)]
        out: PathBuf,
        /// Window length; defaults to the model's max positions.
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Synthetic examples to score.
        #[arg(long, default_value_t = 256)]
        examples: usize,
        #[arg(long, default_value_t = 0x5eed_e7a1)]
        seed: u64,
    },
}

/// Relative corpus paths in a run file are taken relative to that file.
fn resolve_corpus(run: &mut TrainRun, config: &Path) {
    if run.corpus.starts_with("synthetic:") || Path::new(&run.corpus).is_absolute() {
        return;
    }
    if let Some(dir) = config.parent() {
        run.corpus = dir.join(&run.corpus).display().to_string();
    }
}

fn print_outcome(o: &TrainOutcome) {
    println!(
        "{}: nll {:.4} -> {:.4}, perplexity {:.3}{}, spikes {}",
        o.name,
        o.initial_eval.mean_nll,
        o.final_eval.mean_nll,
        o.final_eval.perplexity,
        o.final_eval
            .task_accuracy
            .map(|a| format!(", accuracy {a:.3}"))
            .unwrap_or_default(),
        o.trace.spikes().len()
    );
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let mut run = TrainRun::from_file(config)?;
    resolve_corpus(&mut run, config);
    let outcome = train_run(&run)?;
    write_outcome(out, &outcome)?;
    print_outcome(&outcome);
    Ok(())
}

fn sweep(grid_path: &Path, out: &Path, jobs: Option<usize>, band_eps: f64) -> Result<()> {
    let mut grid = SweepGrid::from_file(grid_path)?;
    resolve_corpus(&mut grid.base, grid_path);
    let runs = grid.expand()?;
    log::info!("sweep of {} runs", runs.len());
    let outcomes = run_sweep(&runs, Some(out), jobs.unwrap_or(grid.jobs))?;
    for o in &outcomes {
        print_outcome(o);
    }

    // One band comparison per (topology, qk_norm, seed) group over fractions.
    let mut groups: BTreeMap<String, Vec<(f64, EvalReport)>> = BTreeMap::new();
    for o in &outcomes {
        let cfg = &o.run.model;
        let topo = match cfg.topology().kind {
            TopologyKind::Sequential => "sequential",
            TopologyKind::Parallel => "parallel",
        };
        let key = format!(
            "{topo}/qk_norm={}/seed={}",
            cfg.attention().qk_norm(),
            o.run.seed
        );
        groups
            .entry(key)
            .or_default()
            .push((cfg.rope().rotary_fraction(), o.final_eval.clone()));
    }
    let mut bands = serde_json::Map::new();
    for (key, reports) in groups.into_iter().filter(|(_, r)| r.len() >= 2) {
        let partition = compare_bands(&reports, band_eps)?;
        let listed: Vec<String> = partition
            .bands
            .iter()
            .map(|b| format!("{:?}", b.fractions))
            .collect();
        println!(
            "{key}: bands {} gap {:.4}",
            listed.join(" < "),
            partition.gap
        );
        bands.insert(key, serde_json::to_value(&partition)?);
    }
    let path = out.join("bands.json");
    fs::write(&path, serde_json::to_string_pretty(&bands)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn plan(q: PlanQuery) -> Result<()> {
    let r = cache_bytes(&q)?;
    let placement = match q.placement {
        Placement::Replicate => "replicate",
        Placement::Shard => "shard",
    };
    println!("{:<18} {}", "seq_len", q.max_positions);
    println!("{:<18} {}", "head_dim", q.head_dim);
    println!("{:<18} {} B", "precision", q.precision.bytes());
    println!(
        "{:<18} {} ({} dims)",
        "rotary_fraction", q.rotary_fraction, r.rotary_dims
    );
    println!("{:<18} {} x {placement}", "devices", q.devices);
    println!("{:<18} {}", "sincos_factor", q.sincos_factor);
    println!(
        "{:<18} {} ({})",
        "bytes_per_device",
        r.bytes_per_device,
        human_bytes(r.bytes_per_device)
    );
    println!(
        "{:<18} {} ({})",
        "bytes_total",
        r.bytes_total,
        human_bytes(r.bytes_total)
    );
    Ok(())
}

fn eval_set(
    corpus: &str,
    model: &ropelab_core::Model,
    seq: usize,
    batch: usize,
    examples: usize,
    seed: u64,
) -> Result<EvalSet> {
    if let Some(kind) = corpus.strip_prefix("synthetic:") {
        let task = SyntheticTask::new(kind.parse::<TaskKind>()?, seq, model.config().vocab_size())?;
        return Ok(EvalSet::synthetic(&task, examples, seed, batch)?);
    }
    let bytes = fs::read(corpus).with_context(|| format!("reading corpus {corpus}"))?;
    if bytes.is_empty() {
        bail!("corpus {corpus} is empty");
    }
    Ok(EvalSet::from_stream(
        corpus,
        &tokenize_bytes(&bytes),
        seq,
        batch,
    )?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, out } => train(&config, &out),
        Command::Sweep {
            grid,
            out,
            jobs,
            band_eps,
        } => sweep(&grid, &out, jobs, band_eps),
        Command::Plan {
            seq_len,
            head_dim,
            precision,
            fraction,
            devices,
            placement,
            sincos_factor,
        } => plan(PlanQuery {
            max_positions: seq_len,
            head_dim,
            precision: precision.into(),
            rotary_fraction: fraction,
            devices,
            placement: placement.into(),
            sincos_factor,
        }),
        Command::PlanCurve {
            out,
            head_dim,
            precision,
            fractions,
            lengths,
            sincos_factor,
        } => {
            let lengths = if lengths.is_empty() {
                default_lengths()
            } else {
                lengths
            };
            let template = PlanQuery {
                precision: precision.into(),
                sincos_factor,
                ..PlanQuery::new(1, head_dim, 1.0)
            };
            let csv = emit_curve(&fractions, &lengths, &template)?;
            fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{} rows written to {}",
                fractions.len() * lengths.len(),
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint: path,
            corpus,
            out,
            seq_len,
            batch,
            examples,
            seed,
        } => {
            let model = checkpoint::load(&path)?;
            let seq = seq_len.unwrap_or(model.config().max_positions());
            let set = eval_set(&corpus, &model, seq, batch, examples, seed)?;
            let report = evaluate(&model, &set)?;
            fs::write(&out, serde_json::to_string_pretty(&report)?)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{}: mean nll {:.4}, perplexity {:.3} over {} tokens",
                report.corpus_id, report.mean_nll, report.perplexity, report.tokens_scored
            );
            Ok(())
        }
    }
}
