//! Matrix products.

use super::kernels::gemm;
use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// `[..., k] x [k, n] -> [..., n]`; leading dimensions of `self` are
    /// flattened into the row count.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, false)
    }

    /// `[..., k] x [n, k]ᵀ -> [..., n]`, used for tied unembeddings.
    pub fn matmul_nt(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (out, m, k, n) = {
            let (a, b) = (self.value(), rhs.value());
            if a.ndim() < 2 || b.ndim() != 2 {
                return Err(Error::dim(
                    "matmul",
                    format!(
                        "need [.., k] x [k, n], got {:?} x {:?}",
                        a.shape(),
                        b.shape()
                    ),
                ));
            }
            let k = a.last_dim();
            let (bk, n) = if trans_b {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if k != bk {
                return Err(Error::dim(
                    "matmul",
                    format!(
                        "inner dimensions {k} and {bk} differ ({:?} x {:?})",
                        a.shape(),
                        b.shape()
                    ),
                ));
            }
            let m = a.numel() / k;
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), trans_b, &mut c, false);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            (Tensor::from_parts(shape, c), m, k, n)
        };
        self.tape()
            .push_op("matmul", out, &[*self, *rhs], move |a| {
                let (x, w) = (a.inputs[0].data(), a.inputs[1].data());
                let dx = a.needs[0].then(|| {
                    // dA = dC · Bᵀ
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, a.grad, false, w, !trans_b, &mut dx, false);
                    dx
                });
                let dw = a.needs[1].then(|| {
                    let mut dw = vec![0.0; k * n];
                    if trans_b {
                        // B stored [n, k]: dB = dCᵀ · A
                        gemm(n, m, k, a.grad, true, x, false, &mut dw, false);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, x, true, a.grad, false, &mut dw, false);
                    }
                    dw
                });
                vec![dx, dw]
            })
    }

    /// Batched product over identical leading dimensions:
    /// `[.., m, k] x [.., k, n] -> [.., m, n]`, or with `trans_rhs`
    /// `[.., m, k] x [.., n, k]ᵀ`.
    pub fn bmm(&self, rhs: &Var<'t>, trans_rhs: bool) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (out, batch, m, k, n) = {
            let (a, b) = (self.value(), rhs.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::dim(
                    "bmm",
                    format!("incompatible batch shapes {sa:?} x {sb:?}"),
                ));
            }
            let r = sa.len();
            let (m, k) = (sa[r - 2], sa[r - 1]);
            let (bk, n) = if trans_rhs {
                (sb[r - 1], sb[r - 2])
            } else {
                (sb[r - 2], sb[r - 1])
            };
            if k != bk {
                return Err(Error::dim(
                    "bmm",
                    format!("inner dimensions {k} and {bk} differ"),
                ));
            }
            let batch: usize = sa[..r - 2].iter().product();
            let mut c = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    trans_rhs,
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            let mut shape = sa[..r - 2].to_vec();
            shape.extend([m, n]);
            (Tensor::from_parts(shape, c), batch, m, k, n)
        };
        self.tape().push_op("bmm", out, &[*self, *rhs], move |a| {
            let (x, y) = (a.inputs[0].data(), a.inputs[1].data());
            let dx = a.needs[0].then(|| {
                let mut dx = vec![0.0; batch * m * k];
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &a.grad[i * m * n..(i + 1) * m * n],
                        false,
                        &y[i * k * n..(i + 1) * k * n],
                        !trans_rhs,
                        &mut dx[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                dx
            });
            let dy = a.needs[1].then(|| {
                let mut dy = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let g = &a.grad[i * m * n..(i + 1) * m * n];
                    let xa = &x[i * m * k..(i + 1) * m * k];
                    let out = &mut dy[i * k * n..(i + 1) * k * n];
                    if trans_rhs {
                        gemm(n, m, k, g, true, xa, false, out, false);
                    } else {
                        gemm(k, m, n, xa, true, g, false, out, false);
                    }
                }
                dy
            });
            vec![dx, dy]
        })
    }
}
