//! Held-out evaluation and loss-band comparison.

use serde::{Deserialize, Serialize};

use crate::autograd::log_softmax_rows;
use crate::error::{Error, Result};
use crate::model::{Model, TokenBatch};
use crate::train::corpus::{batch_from_windows, windows};
use crate::train::synthetic::SyntheticTask;

pub const DEFAULT_BAND_EPSILON: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_id: String,
    /// Mean next-token negative log-likelihood, nats per scored token.
    pub mean_nll: f64,
    pub perplexity: f64,
    /// Fraction of scored positions whose argmax equals the target
    /// (synthetic tasks only).
    pub task_accuracy: Option<f64>,
    pub tokens_scored: usize,
    pub config_digest: String,
}

/// Fixed evaluation batches plus an identifier for the data they came from.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub corpus_id: String,
    pub batches: Vec<(TokenBatch, Vec<Option<usize>>)>,
    pub report_accuracy: bool,
}

impl EvalSet {
    /// Held-out token stream cut into `seq + 1` windows, `batch` per batch.
    pub fn from_stream(
        corpus_id: impl Into<String>,
        stream: &[usize],
        seq: usize,
        batch: usize,
    ) -> Result<Self> {
        let ws = windows(stream, seq, true);
        if ws.is_empty() {
            return Err(Error::io(
                "<held-out stream>",
                std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "held-out stream is empty",
                ),
            ));
        }
        let mut batches = Vec::new();
        // Full-length windows are batched together; a short tail goes alone.
        let (full, tail): (Vec<&[usize]>, Vec<&[usize]>) =
            ws.into_iter().partition(|w| w.len() == seq + 1);
        for chunk in full.chunks(batch.max(1)) {
            batches.push(batch_from_windows(chunk)?);
        }
        for w in tail {
            batches.push(batch_from_windows(&[w])?);
        }
        Ok(EvalSet {
            corpus_id: corpus_id.into(),
            batches,
            report_accuracy: false,
        })
    }

    /// `examples` task sequences drawn from a dedicated seed.
    pub fn synthetic(
        task: &SyntheticTask,
        examples: usize,
        seed: u64,
        batch: usize,
    ) -> Result<Self> {
        use rand::SeedableRng;
        if examples == 0 {
            return Err(Error::Parameter(
                "evaluation needs at least one example".into(),
            ));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut batches = Vec::new();
        let mut left = examples;
        while left > 0 {
            let n = left.min(batch.max(1));
            batches.push(task.sample_batch(n, &mut rng)?);
            left -= n;
        }
        let kind = match task.kind {
            crate::train::synthetic::TaskKind::Copy => "copy",
            crate::train::synthetic::TaskKind::Reverse => "reverse",
        };
        Ok(EvalSet {
            corpus_id: format!("synthetic:{kind}"),
            batches,
            report_accuracy: true,
        })
    }
}

/// Mean NLL over every scored position; runs on an inference tape and
/// never touches the model's parameters.
pub fn evaluate(model: &Model, set: &EvalSet) -> Result<EvalReport> {
    let vocab = model.config().vocab_size();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut correct = 0usize;
    for (tokens, targets) in &set.batches {
        let logits = model.logits(tokens)?;
        let logp = log_softmax_rows(logits.data(), vocab);
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Range(format!("target {t} >= vocab size {vocab}")));
            }
            let row = &logp[r * vocab..(r + 1) * vocab];
            total -= row[t];
            count += 1;
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0;
            correct += usize::from(argmax == t);
        }
    }
    if count == 0 {
        return Err(Error::io(
            &set.corpus_id,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "no scored tokens in evaluation set",
            ),
        ));
    }
    let mean_nll = total / count as f64;
    Ok(EvalReport {
        corpus_id: set.corpus_id.clone(),
        mean_nll,
        perplexity: mean_nll.exp(),
        task_accuracy: set.report_accuracy.then(|| correct as f64 / count as f64),
        tokens_scored: count,
        config_digest: model.config().digest(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// Rotary fractions in this band, best loss first.
    pub fractions: Vec<f64>,
    pub mean_nlls: Vec<f64>,
}

impl Band {
    pub fn mean(&self) -> f64 {
        self.mean_nlls.iter().sum::<f64>() / self.mean_nlls.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPartition {
    /// Bands ordered from lowest to highest loss.
    pub bands: Vec<Band>,
    /// Mean loss of the worst band minus mean loss of the best band.
    pub gap: f64,
}

impl BandPartition {
    /// Index of the band containing `fraction`.
    pub fn band_of(&self, fraction: f64) -> Option<usize> {
        self.bands
            .iter()
            .position(|b| b.fractions.contains(&fraction))
    }
}

/// Groups reports by final loss: walking in ascending order, a report joins
/// the current band when it is within `epsilon` of the band's lowest loss,
/// so every pair inside a band differs by less than `epsilon`.
pub fn compare_bands(reports: &[(f64, EvalReport)], epsilon: f64) -> Result<BandPartition> {
    if reports.len() < 2 {
        return Err(Error::Contract(
            "band comparison needs at least two reports".into(),
        ));
    }
    let mut sorted: Vec<(f64, f64)> = reports.iter().map(|(f, r)| (*f, r.mean_nll)).collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    let mut bands: Vec<Band> = Vec::new();
    for (f, nll) in sorted {
        match bands.last_mut() {
            Some(b) if nll - b.mean_nlls[0] < epsilon => {
                b.fractions.push(f);
                b.mean_nlls.push(nll);
            }
            _ => bands.push(Band {
                fractions: vec![f],
                mean_nlls: vec![nll],
            }),
        }
    }
    let gap = bands.last().unwrap().mean() - bands[0].mean();
    Ok(BandPartition { bands, gap })
}
