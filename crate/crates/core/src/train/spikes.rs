use serde::{Deserialize, Serialize};

use super::trace::LossTrace;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub step: usize,
    /// Nats above the trailing-window minimum.
    pub magnitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeConfig {
    pub window: usize,
    pub delta_nats: f64,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        SpikeConfig {
            window: 100,
            delta_nats: 0.5,
        }
    }
}

/// Flags entry `t` when its loss exceeds the minimum of the preceding
/// `window` entries by more than `delta_nats`. The first entry has no
/// history and is never flagged.
pub fn detect_spikes(trace: &LossTrace, window: usize, delta_nats: f64) -> Vec<Spike> {
    let window = window.max(1);
    let loss = trace.loss();
    let mut out = Vec::new();
    for t in 1..loss.len() {
        let min = loss[t.saturating_sub(window)..t]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if loss[t] > min + delta_nats {
            out.push(Spike {
                step: trace.steps()[t],
                magnitude: loss[t] - min,
            });
        }
    }
    out
}
