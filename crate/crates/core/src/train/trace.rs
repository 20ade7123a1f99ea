use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::spikes::Spike;

/// Per-step training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    steps: Vec<usize>,
    loss: Vec<f64>,
    lr: Vec<f64>,
    spikes: Vec<Spike>,
}

pub const CSV_HEADER: &str = "step,loss,lr,spike";

impl LossTrace {
    pub fn push(&mut self, step: usize, loss: f64, lr: f64) {
        self.steps.push(step);
        self.loss.push(loss);
        self.lr.push(lr);
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }
    pub fn loss(&self) -> &[f64] {
        &self.loss
    }
    pub fn lr(&self) -> &[f64] {
        &self.lr
    }
    pub fn spikes(&self) -> &[Spike] {
        &self.spikes
    }
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Replaces the spike annotations; steps not present in the trace are dropped.
    pub fn set_spikes(&mut self, spikes: Vec<Spike>) {
        self.spikes = spikes
            .into_iter()
            .filter(|s| self.steps.binary_search(&s.step).is_ok())
            .collect();
    }

    /// `step,loss,lr,spike` with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        let mut spikes = self.spikes.iter().map(|s| s.step).peekable();
        for i in 0..self.len() {
            let step = self.steps[i];
            while spikes.next_if(|&s| s < step).is_some() {}
            let flag = u8::from(spikes.peek() == Some(&step));
            writeln!(out, "{step},{:?},{:?},{flag}", self.loss[i], self.lr[i])
                .expect("write to string");
        }
        out
    }
}
