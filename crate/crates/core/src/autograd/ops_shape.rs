//! Copying shape manipulation: reshape, permute, slice, concat, repeat.

use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_data(
    data: &[f64],
    shape: &[usize],
    axes: &[usize],
) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    // Innermost axis unchanged: copy contiguous runs.
    let (run, outer_rank) = if axes[rank - 1] == rank - 1 {
        (shape[rank - 1], rank - 1)
    } else {
        (1, rank)
    };
    let mut idx = vec![0usize; outer_rank];
    let total = data.len() / run;
    for _ in 0..total {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if run == 1 {
            out.push(data[off]);
        } else {
            out.extend_from_slice(&data[off..off + run]);
        }
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<'t> Var<'t> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let numel: usize = shape.iter().product();
            if numel != x.numel() || shape.contains(&0) {
                return Err(Error::dim(
                    "reshape",
                    format!("cannot view {:?} as {shape:?}", x.shape()),
                ));
            }
            Tensor::from_parts(shape.to_vec(), x.data().to_vec())
        };
        self.tape()
            .push_op("reshape", out, &[*self], |a| vec![Some(a.grad.to_vec())])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let mut seen = vec![false; x.ndim()];
            if axes.len() != x.ndim()
                || axes
                    .iter()
                    .any(|&a| a >= x.ndim() || std::mem::replace(&mut seen[a], true))
            {
                return Err(Error::dim(
                    "permute",
                    format!("{axes:?} is not a permutation of {} axes", x.ndim()),
                ));
            }
            let (data, shape) = permute_data(x.data(), x.shape(), axes);
            Tensor::from_parts(shape, data)
        };
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape().push_op("permute", out, &[*self], move |a| {
            let (g, _) = permute_data(a.grad, a.output.shape(), &inverse);
            vec![Some(g)]
        })
    }

    /// Swaps two axes.
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Var<'t>> {
        let rank = self.value().ndim();
        if d0 >= rank || d1 >= rank {
            return Err(Error::dim(
                "transpose",
                format!("axes ({d0}, {d1}) for rank {rank}"),
            ));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(d0, d1);
        self.permute(&axes)
    }

    /// Copies channels `[start, end)` of the last dimension.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (out, d) = {
            let x = self.value();
            let d = x.last_dim();
            if start >= end || end > d {
                return Err(Error::dim(
                    "slice",
                    format!("[{start}, {end}) of last dim {d}"),
                ));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(x.numel() / d * w);
            for row in x.data().chunks_exact(d) {
                data.extend_from_slice(&row[start..end]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = w;
            (Tensor::from_parts(shape, data), d)
        };
        self.tape().push_op("slice", out, &[*self], move |a| {
            let w = end - start;
            let rows = a.grad.len() / w;
            let mut g = vec![0.0; rows * d];
            for (dst, src) in g.chunks_exact_mut(d).zip(a.grad.chunks_exact(w)) {
                dst[start..end].copy_from_slice(src);
            }
            vec![Some(g)]
        })
    }

    /// Concatenates along the last dimension; leading shapes must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let (out, widths) = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let lead = &vals[0].shape()[..vals[0].ndim() - 1];
            for (p, v) in parts.iter().zip(&vals) {
                first.same_tape(p);
                if &v.shape()[..v.ndim() - 1] != lead {
                    return Err(Error::dim(
                        "concat",
                        format!("leading shapes {:?} vs {:?}", v.shape(), vals[0].shape()),
                    ));
                }
            }
            let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows = vals[0].numel() / widths[0];
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (v, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (Tensor::from_parts(shape, data), widths)
        };
        first.tape().push_op("concat", out, parts, move |a| {
            let total: usize = widths.iter().sum();
            let rows = a.grad.len() / total;
            let mut grads: Vec<Vec<f64>> = widths
                .iter()
                .map(|w| Vec::with_capacity(rows * w))
                .collect();
            for row in a.grad.chunks_exact(total) {
                let mut off = 0;
                for (g, &w) in grads.iter_mut().zip(&widths) {
                    g.extend_from_slice(&row[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Repeats each index of axis `dim` `repeats` times consecutively
    /// (`[a, b] -> [a, a, b, b]` for `repeats = 2`).
    pub fn repeat_interleave(&self, dim: usize, repeats: usize) -> Result<Var<'t>> {
        let (out, outer, len, inner) = {
            let x = self.value();
            if dim >= x.ndim() || repeats == 0 {
                return Err(Error::dim(
                    "repeat_interleave",
                    format!("axis {dim} x{repeats} for shape {:?}", x.shape()),
                ));
            }
            let s = x.shape();
            let outer: usize = s[..dim].iter().product();
            let inner: usize = s[dim + 1..].iter().product();
            let len = s[dim];
            let mut data = Vec::with_capacity(x.numel() * repeats);
            for o in 0..outer {
                for i in 0..len {
                    let off = (o * len + i) * inner;
                    for _ in 0..repeats {
                        data.extend_from_slice(&x.data()[off..off + inner]);
                    }
                }
            }
            let mut shape = s.to_vec();
            shape[dim] *= repeats;
            (Tensor::from_parts(shape, data), outer, len, inner)
        };
        self.tape()
            .push_op("repeat_interleave", out, &[*self], move |a| {
                let mut g = vec![0.0; outer * len * inner];
                let mut src = a.grad.chunks_exact(inner);
                for dst in g.chunks_exact_mut(inner) {
                    for _ in 0..repeats {
                        let s = src.next().unwrap();
                        dst.iter_mut().zip(s).for_each(|(d, s)| *d += s);
                    }
                }
                vec![Some(g)]
            })
    }
}
