//! Neural-network ops: softmax, normalization, embedding lookup, cross-entropy.

use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Masking applied by [`Var::masked_softmax`] over the last two axes
/// `[.., queries, keys]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Query `i` sees keys `j <= i + (keys - queries)`.
    Causal,
    /// Every query sees every key.
    Full,
}

impl AttnMask {
    fn visible(self, queries: usize, keys: usize, i: usize) -> usize {
        match self {
            AttnMask::Causal => (i + 1 + keys.saturating_sub(queries)).min(keys),
            AttnMask::Full => keys,
        }
    }
}

/// Row-wise log-softmax of a `rows x width` buffer.
pub fn log_softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// `dx = y * (g - <g, y>)` per row.
fn softmax_backward(y: &[f64], g: &[f64], width: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((dx, y), g) in dx
        .chunks_exact_mut(width)
        .zip(y.chunks_exact(width))
        .zip(g.chunks_exact(width))
    {
        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
        for ((d, &y), &g) in dx.iter_mut().zip(y).zip(g) {
            *d = y * (g - dot);
        }
    }
    dx
}

fn check_eps(op: &str, eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!(
            "{op}: eps must be positive, got {eps}"
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn softmax_lastdim(&self) -> Result<Var<'t>> {
        let (out, w) = {
            let x = self.value();
            let w = x.last_dim();
            let mut y = vec![0.0; x.numel()];
            for (row, out) in x.data().chunks_exact(w).zip(y.chunks_exact_mut(w)) {
                softmax_into(row, out);
            }
            (Tensor::from_parts(x.shape().to_vec(), y), w)
        };
        self.tape().push_op("softmax", out, &[*self], move |a| {
            vec![Some(softmax_backward(a.output.data(), a.grad, w))]
        })
    }

    /// Softmax over the last axis of `[.., queries, keys]` scores; masked
    /// entries get exactly zero weight.
    pub fn masked_softmax(&self, mask: AttnMask) -> Result<Var<'t>> {
        let (out, keys) = {
            let x = self.value();
            if x.ndim() < 2 {
                return Err(Error::dim("masked_softmax", "need [.., queries, keys]"));
            }
            let s = x.shape();
            let (queries, keys) = (s[s.len() - 2], s[s.len() - 1]);
            let mut y = vec![0.0; x.numel()];
            for (r, (row, out)) in x
                .data()
                .chunks_exact(keys)
                .zip(y.chunks_exact_mut(keys))
                .enumerate()
            {
                let n = mask.visible(queries, keys, r % queries);
                softmax_into(&row[..n], &mut out[..n]);
            }
            (Tensor::from_parts(s.to_vec(), y), keys)
        };
        self.tape()
            .push_op("masked_softmax", out, &[*self], move |a| {
                vec![Some(softmax_backward(a.output.data(), a.grad, keys))]
            })
    }

    /// LayerNorm over the last axis: `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        check_eps("layer_norm", eps)?;
        self.same_tape(gain);
        self.same_tape(bias);
        let (out, xhat, inv_std, w) = {
            let (x, g, b) = (self.value(), gain.value(), bias.value());
            let w = x.last_dim();
            if g.shape() != [w] || b.shape() != [w] {
                return Err(Error::dim(
                    "layer_norm",
                    format!(
                        "gain {:?} / bias {:?} vs last dim {w}",
                        g.shape(),
                        b.shape()
                    ),
                ));
            }
            let rows = x.numel() / w;
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; rows];
            let mut y = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * w..(r + 1) * w];
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for c in 0..w {
                    let h = (row[c] - mean) * inv;
                    xhat[r * w + c] = h;
                    y[r * w + c] = h * g.data()[c] + b.data()[c];
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), y), xhat, inv_std, w)
        };
        self.tape()
            .push_op("layer_norm", out, &[*self, *gain, *bias], move |a| {
                let g = a.inputs[1].data();
                let mut dx = a.needs[0].then(|| vec![0.0; xhat.len()]);
                let mut dgain = vec![0.0; w];
                let mut dbias = vec![0.0; w];
                let mut dxhat = vec![0.0; w];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gy = &a.grad[r * w..(r + 1) * w];
                    let h = &xhat[r * w..(r + 1) * w];
                    for c in 0..w {
                        dgain[c] += gy[c] * h[c];
                        dbias[c] += gy[c];
                        dxhat[c] = gy[c] * g[c];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / w as f64;
                        let m2 = dxhat.iter().zip(h).map(|(d, h)| d * h).sum::<f64>() / w as f64;
                        for c in 0..w {
                            dx[r * w + c] = inv * (dxhat[c] - m1 - h[c] * m2);
                        }
                    }
                }
                vec![dx, a.needs[1].then_some(dgain), a.needs[2].then_some(dbias)]
            })
    }

    /// RMSNorm over the last axis: `x / sqrt(mean(x²) + eps²) * gain`.
    ///
    /// `eps` acts as a floor on the row RMS, so rows with RMS far above `eps`
    /// come out with unit RMS to within `(eps/rms)²`.
    pub fn rms_norm(&self, gain: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        check_eps("rms_norm", eps)?;
        self.same_tape(gain);
        let (out, xhat, inv_rms, w) = {
            let (x, g) = (self.value(), gain.value());
            let w = x.last_dim();
            if g.shape() != [w] {
                return Err(Error::dim(
                    "rms_norm",
                    format!("gain {:?} vs last dim {w}", g.shape()),
                ));
            }
            let rows = x.numel() / w;
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_rms = vec![0.0; rows];
            let mut y = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * w..(r + 1) * w];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / w as f64;
                let inv = 1.0 / (ms + eps * eps).sqrt();
                inv_rms[r] = inv;
                for c in 0..w {
                    let h = row[c] * inv;
                    xhat[r * w + c] = h;
                    y[r * w + c] = h * g.data()[c];
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), y), xhat, inv_rms, w)
        };
        self.tape()
            .push_op("rms_norm", out, &[*self, *gain], move |a| {
                let g = a.inputs[1].data();
                let mut dx = a.needs[0].then(|| vec![0.0; xhat.len()]);
                let mut dgain = vec![0.0; w];
                let mut dxhat = vec![0.0; w];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let gy = &a.grad[r * w..(r + 1) * w];
                    let h = &xhat[r * w..(r + 1) * w];
                    for c in 0..w {
                        dgain[c] += gy[c] * h[c];
                        dxhat[c] = gy[c] * g[c];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m = dxhat.iter().zip(h).map(|(d, h)| d * h).sum::<f64>() / w as f64;
                        for c in 0..w {
                            dx[r * w + c] = inv * (dxhat[c] - h[c] * m);
                        }
                    }
                }
                vec![dx, a.needs[1].then_some(dgain)]
            })
    }

    /// Gathers rows of a `[vocab, dim]` table: output `[ids.len(), dim]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t>> {
        let (out, vocab, dim) = {
            let table = self.value();
            if table.ndim() != 2 || ids.is_empty() {
                return Err(Error::dim(
                    "embedding",
                    format!("table {:?} with {} ids", table.shape(), ids.len()),
                ));
            }
            let (vocab, dim) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::Range(format!("token id {id} >= vocab size {vocab}")));
                }
                data.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
            }
            (Tensor::from_parts(vec![ids.len(), dim], data), vocab, dim)
        };
        let ids = ids.to_vec();
        self.tape().push_op("embedding", out, &[*self], move |a| {
            let mut g = vec![0.0; vocab * dim];
            for (row, &id) in a.grad.chunks_exact(dim).zip(&ids) {
                g[id * dim..(id + 1) * dim]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, s)| *d += s);
            }
            vec![Some(g)]
        })
    }

    /// Mean cross-entropy of `[.., vocab]` logits against per-row targets;
    /// rows whose target is `None` are ignored.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let (out, probs, vocab, count) = {
            let x = self.value();
            let vocab = x.last_dim();
            let rows = x.numel() / vocab;
            if targets.len() != rows {
                return Err(Error::dim(
                    "cross_entropy",
                    format!("{} targets for {rows} rows", targets.len()),
                ));
            }
            let count = targets.iter().flatten().count();
            if count == 0 {
                return Err(Error::Contract("cross_entropy: no scored targets".into()));
            }
            let logp = log_softmax_rows(x.data(), vocab);
            let mut total = 0.0;
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    if t >= vocab {
                        return Err(Error::Range(format!("target {t} >= vocab size {vocab}")));
                    }
                    total -= logp[r * vocab + t];
                }
            }
            let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
            (Tensor::scalar(total / count as f64), probs, vocab, count)
        };
        let targets = targets.to_vec();
        self.tape()
            .push_op("cross_entropy", out, &[*self], move |a| {
                let scale = a.grad[0] / count as f64;
                let mut g = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut g[r * vocab..(r + 1) * vocab];
                        for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d = p * scale;
                        }
                        row[t] -= scale;
                    }
                }
                vec![Some(g)]
            })
    }
}
