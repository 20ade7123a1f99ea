//! Byte-level text corpora: tokenisation, held-out split and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub const BYTE_VOCAB: usize = 256;

/// Each byte is its own token id.
pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| usize::from(b)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub id: String,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl Corpus {
    /// Splits `tokens` so the trailing `round(len * held_out_frac)` tokens are held out.
    pub fn from_tokens(
        id: impl Into<String>,
        tokens: Vec<usize>,
        held_out_frac: f64,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Parameter("corpus is empty".into()));
        }
        if !(0.0..1.0).contains(&held_out_frac) {
            return Err(Error::Parameter(format!(
                "held-out fraction must lie in [0, 1), got {held_out_frac}"
            )));
        }
        let held = (tokens.len() as f64 * held_out_frac).round() as usize;
        let mut train = tokens;
        let held_out = train.split_off(train.len() - held);
        Ok(Corpus {
            id: id.into(),
            train,
            held_out,
        })
    }
}

/// Reads a file as a byte-level token stream and splits off a held-out tail.
pub fn ingest_corpus(path: &Path, held_out_frac: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "corpus file is empty"),
        ));
    }
    Corpus::from_tokens(
        path.display().to_string(),
        tokenize_bytes(&bytes),
        held_out_frac,
    )
}

/// Cuts a stream into `seq + 1` token windows; each yields `seq` inputs and
/// `seq` next-token targets. A shorter tail window (at least 2 tokens) is kept
/// only when `keep_tail` is set.
pub fn windows(stream: &[usize], seq: usize, keep_tail: bool) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + seq + 1).min(stream.len());
        if end - start == seq + 1 || keep_tail {
            out.push(&stream[start..end]);
        }
        start += seq;
    }
    out
}

/// Builds a `[n, len - 1]` batch from equally long windows.
pub fn batch_from_windows(windows: &[&[usize]]) -> Result<(TokenBatch, Vec<Option<usize>>)> {
    let len = windows.first().map(|w| w.len()).unwrap_or(0);
    if len < 2 || windows.iter().any(|w| w.len() != len) {
        return Err(Error::dim(
            "batch",
            "windows must share a length of at least 2",
        ));
    }
    let seq = len - 1;
    let mut ids = Vec::with_capacity(windows.len() * seq);
    let mut targets = Vec::with_capacity(windows.len() * seq);
    for w in windows {
        ids.extend_from_slice(&w[..seq]);
        targets.extend(w[1..].iter().map(|&t| Some(t)));
    }
    Ok((TokenBatch::new(windows.len(), seq, ids)?, targets))
}

/// Contiguous-chunk batches whose order is reshuffled every epoch.
pub struct ChunkBatcher {
    starts: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    seq: usize,
}

impl ChunkBatcher {
    pub fn new(stream_len: usize, seq: usize) -> Result<Self> {
        if stream_len < seq + 1 {
            return Err(Error::Parameter(format!(
                "training stream of {stream_len} tokens is shorter than one {}-token window",
                seq + 1
            )));
        }
        let starts: Vec<usize> = (0..=stream_len - seq - 1).step_by(seq).collect();
        let order = (0..starts.len()).collect();
        Ok(ChunkBatcher {
            cursor: starts.len(),
            starts,
            order,
            seq,
        })
    }

    pub fn chunks(&self) -> usize {
        self.starts.len()
    }

    pub fn next_batch(
        &mut self,
        stream: &[usize],
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<(TokenBatch, Vec<Option<usize>>)> {
        let mut picked = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let s = self.starts[self.order[self.cursor]];
            picked.push(&stream[s..s + self.seq + 1]);
            self.cursor += 1;
        }
        batch_from_windows(&picked)
    }
}
