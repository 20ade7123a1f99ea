use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{ingest_corpus, ChunkBatcher, Corpus, BYTE_VOCAB};
use super::optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState, ParamSlot};
use super::schedule::{Schedule, DEFAULT_FINAL_LR_FRAC, DEFAULT_PEAK_LR, DEFAULT_WARMUP_FRAC};
use super::spikes::{detect_spikes, SpikeConfig};
use super::synthetic::{SyntheticTask, TaskKind};
use super::trace::LossTrace;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, EvalSet};
use crate::model::{Model, ModelConfig, ModelConfigFile, TokenBatch, TopologyKind};

const SYNTHETIC_PREFIX: &str = "synthetic:";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            peak_lr: DEFAULT_PEAK_LR,
            warmup_frac: DEFAULT_WARMUP_FRAC,
            final_lr_frac: DEFAULT_FINAL_LR_FRAC,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Held-out examples for synthetic tasks.
    pub examples: usize,
    /// Seed of the held-out synthetic set, shared by every run.
    pub seed: u64,
    pub batch: usize,
    /// Tail fraction of a text corpus held out from training.
    pub held_out_frac: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            examples: 256,
            seed: 0x5eed_e7a1,
            batch: 32,
            held_out_frac: 0.1,
        }
    }
}

fn one() -> usize {
    1
}

/// A single training run. `corpus` is either `synthetic:copy`,
/// `synthetic:reverse` or a path to a text file (byte-level tokens).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub corpus: String,
    pub seq_len: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub spikes: SpikeConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default = "one")]
    pub log_every: usize,
}

fn parse_by_extension<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        _ => toml::from_str(&text).map_err(|e| e.to_string()),
    };
    parsed.map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

impl TrainRun {
    /// Reads a TOML (default) or JSON (`.json`) run description.
    pub fn from_file(path: &Path) -> Result<Self> {
        let run: TrainRun = parse_by_extension(path)?;
        run.validate()?;
        Ok(run)
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let topo = match self.model.topology().kind {
                TopologyKind::Sequential => "seq",
                TopologyKind::Parallel => "par",
            };
            let qk = if self.model.attention().qk_norm() {
                "_qk"
            } else {
                ""
            };
            format!(
                "{topo}_f{}{qk}_s{}",
                self.model.rope().rotary_fraction(),
                self.seed
            )
        })
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(
            self.schedule.peak_lr,
            self.schedule.warmup_frac,
            self.schedule.final_lr_frac,
            self.steps,
        )
    }

    pub fn synthetic_task(&self) -> Result<Option<SyntheticTask>> {
        match self.corpus.strip_prefix(SYNTHETIC_PREFIX) {
            Some(kind) => Ok(Some(SyntheticTask::new(
                kind.parse::<TaskKind>()?,
                self.seq_len,
                self.model.vocab_size(),
            )?)),
            None => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "steps, batch_size and log_every must be positive".into(),
            ));
        }
        if self.seq_len == 0 || self.seq_len > self.model.max_positions() {
            return Err(Error::Config(format!(
                "seq_len {} must lie in [1, max_positions = {}]",
                self.seq_len,
                self.model.max_positions()
            )));
        }
        self.schedule()?;
        if self.synthetic_task()?.is_none() && self.model.vocab_size() < BYTE_VOCAB {
            return Err(Error::Config(format!(
                "byte-level corpora need vocab_size >= {BYTE_VOCAB}, got {}",
                self.model.vocab_size()
            )));
        }
        Ok(())
    }
}

enum Data {
    Synthetic(SyntheticTask),
    Text {
        corpus: Corpus,
        batcher: ChunkBatcher,
    },
}

impl Data {
    fn open(run: &TrainRun) -> Result<Self> {
        match run.synthetic_task()? {
            Some(task) => Ok(Data::Synthetic(task)),
            None => {
                let corpus = ingest_corpus(Path::new(&run.corpus), run.eval.held_out_frac)?;
                let batcher = ChunkBatcher::new(corpus.train.len(), run.seq_len)?;
                Ok(Data::Text { corpus, batcher })
            }
        }
    }

    fn next_batch(
        &mut self,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(TokenBatch, Vec<Option<usize>>)> {
        match self {
            Data::Synthetic(task) => task.sample_batch(batch, rng),
            Data::Text { corpus, batcher } => batcher.next_batch(&corpus.train, batch, rng),
        }
    }

    fn eval_set(&self, run: &TrainRun) -> Result<EvalSet> {
        match self {
            Data::Synthetic(task) => {
                EvalSet::synthetic(task, run.eval.examples, run.eval.seed, run.eval.batch)
            }
            Data::Text { corpus, .. } => EvalSet::from_stream(
                corpus.id.clone(),
                &corpus.held_out,
                run.seq_len,
                run.eval.batch,
            ),
        }
    }
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub name: String,
    pub run: TrainRun,
    pub trace: LossTrace,
    pub model: Model,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
}

/// Trains one model. The run's seed fixes the initial weights (rng stream 0)
/// and the order of training data (stream 1), so the whole trace is a pure
/// function of the run description.
pub fn train_run(run: &TrainRun) -> Result<TrainOutcome> {
    run.validate()?;
    let name = run.display_name();
    let schedule = run.schedule()?;
    let mut data = Data::open(run)?;
    let eval_set = data.eval_set(run)?;

    let mut model = Model::new(run.model.clone(), run.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(1);

    let initial_eval = evaluate(&model, &eval_set)?;
    let names: Vec<String> = model.params().named().into_iter().map(|(n, _)| n).collect();
    let decay: Vec<bool> = model
        .params()
        .named()
        .iter()
        .map(|(_, t)| t.ndim() >= 2)
        .collect();
    let mut state = AdamWState::new(model.params().named().into_iter().map(|(_, t)| t));
    let mut trace = LossTrace::default();
    let mut last_loss = None;

    for step in 1..=run.steps {
        let (tokens, targets) = data.next_batch(run.batch_size, &mut rng)?;
        let (loss, mut grads) = model.loss_and_grads(&tokens, &targets)?;
        let lr = schedule.lr_at(step)?;
        if let Some(max) = run.optimizer.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        let mut slots: Vec<ParamSlot<'_>> = model
            .params_mut()
            .named_mut()
            .into_iter()
            .zip(names.iter().zip(&decay))
            .map(|((_, tensor), (name, &decay))| ParamSlot {
                name,
                decay,
                tensor,
            })
            .collect();
        adamw_step(&mut slots, &grads, &mut state, lr, &run.optimizer).map_err(|e| match e {
            Error::NonFiniteGradient { param, .. } => Error::NonFiniteGradient {
                step,
                param,
                last_loss,
            },
            other => other,
        })?;
        last_loss = Some(loss);
        if step % run.log_every == 0 || step == run.steps {
            trace.push(step, loss, lr);
        }
        if step % 100 == 0 {
            log::info!(
                "{name}: step {step}/{} loss {loss:.4} lr {lr:.3e}",
                run.steps
            );
        }
    }
    let spikes = detect_spikes(&trace, run.spikes.window, run.spikes.delta_nats);
    trace.set_spikes(spikes);
    let final_eval = evaluate(&model, &eval_set)?;
    Ok(TrainOutcome {
        name,
        run: run.clone(),
        trace,
        model,
        initial_eval,
        final_eval,
    })
}

#[derive(Serialize)]
struct EvalFile<'a> {
    initial: &'a EvalReport,
    #[serde(rename = "final")]
    final_: &'a EvalReport,
    spikes: usize,
}

/// Writes `<name>.csv`, `<name>.ckpt` (+ manifest) and `<name>.eval.json`.
pub fn write_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{}.csv", outcome.name));
    std::fs::write(&csv, outcome.trace.to_csv()).map_err(|e| Error::io(&csv, e))?;
    checkpoint::save(&outcome.model, &dir.join(format!("{}.ckpt", outcome.name)))?;
    let report = EvalFile {
        initial: &outcome.initial_eval,
        final_: &outcome.final_eval,
        spikes: outcome.trace.spikes().len(),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(format!("{}.eval.json", outcome.name));
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// One line per run: configuration, initial/final held-out loss, spike count.
pub fn summary_csv(outcomes: &[TrainOutcome]) -> String {
    let mut out = String::from(
        "name,topology,rotary_fraction,rotary_dims,qk_norm,seed,initial_nll,final_nll,final_accuracy,spikes\n",
    );
    for o in outcomes {
        let cfg = &o.run.model;
        let topo = match cfg.topology().kind {
            TopologyKind::Sequential => "sequential",
            TopologyKind::Parallel => "parallel",
        };
        let acc = o
            .final_eval
            .task_accuracy
            .map(|a| format!("{a:?}"))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{topo},{},{},{},{},{:?},{:?},{acc},{}",
            o.name,
            cfg.rope().rotary_fraction(),
            cfg.rope().rotary_dims(),
            cfg.attention().qk_norm(),
            o.run.seed,
            o.initial_eval.mean_nll,
            o.final_eval.mean_nll,
            o.trace.spikes().len()
        )
        .expect("write to string");
    }
    out
}

/// A base run expanded over the cross product of the listed axes. Empty
/// axes keep the base value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub base: TrainRun,
    #[serde(default)]
    pub rotary_fractions: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub topologies: Vec<TopologyKind>,
    #[serde(default)]
    pub qk_norm: Vec<bool>,
    /// Runs trained concurrently; 0 or 1 means sequential.
    #[serde(default)]
    pub jobs: usize,
}

impl SweepGrid {
    pub fn from_file(path: &Path) -> Result<Self> {
        parse_by_extension(path)
    }

    pub fn expand(&self) -> Result<Vec<TrainRun>> {
        let base: ModelConfigFile = self.base.model.clone().into();
        let or_base = |v: &[TopologyKind]| {
            if v.is_empty() {
                vec![base.topology]
            } else {
                v.to_vec()
            }
        };
        let fractions = if self.rotary_fractions.is_empty() {
            vec![base.rotary_fraction]
        } else {
            self.rotary_fractions.clone()
        };
        let seeds = if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        };
        let qk = if self.qk_norm.is_empty() {
            vec![base.qk_norm]
        } else {
            self.qk_norm.clone()
        };
        let mut runs = Vec::new();
        for topo in or_base(&self.topologies) {
            for &q in &qk {
                for &f in &fractions {
                    for &seed in &seeds {
                        let mut m = base.clone();
                        if topo != base.topology {
                            m.topology = topo;
                            m.norm = None;
                            m.mlp = None;
                            m.mlp_hidden = None;
                        }
                        m.qk_norm = q;
                        m.rotary_fraction = f;
                        let run = TrainRun {
                            name: None,
                            seed,
                            model: m.try_into()?,
                            ..self.base.clone()
                        };
                        run.validate()?;
                        runs.push(run);
                    }
                }
            }
        }
        Ok(runs)
    }
}

/// Trains every run, writing each run's outputs under `out` when given.
/// With `jobs > 1` independent runs train on separate threads; results
/// come back in input order regardless.
pub fn run_sweep(runs: &[TrainRun], out: Option<&Path>, jobs: usize) -> Result<Vec<TrainOutcome>> {
    let jobs = jobs.clamp(1, runs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainOutcome>>>> =
        Mutex::new((0..runs.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= runs.len() {
            break;
        }
        let r = train_run(&runs[i]).and_then(|o| {
            if let Some(dir) = out {
                write_outcome(dir, &o)?;
            }
            Ok(o)
        });
        results.lock().expect("results lock")[i] = Some(r);
    };
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    let outcomes = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every run visited"))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        let path = dir.join("summary.csv");
        std::fs::write(&path, summary_csv(&outcomes)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcomes)
}
