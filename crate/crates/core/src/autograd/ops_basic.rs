//! Elementwise arithmetic, activations and reductions.

use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: fn(f64) -> f64,
    ) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        self.tape().push_op(op, out, &[*self], move |a| {
            let x = a.inputs[0].data();
            vec![Some(
                x.iter().zip(a.grad).map(|(&x, &g)| g * df(x)).collect(),
            )]
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape("add", &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape().push_op("add", out, &[*self, *other], |a| {
            vec![
                a.needs[0].then(|| a.grad.to_vec()),
                a.needs[1].then(|| a.grad.to_vec()),
            ]
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape("sub", &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape().push_op("sub", out, &[*self, *other], |a| {
            vec![
                a.needs[0].then(|| a.grad.to_vec()),
                a.needs[1].then(|| a.grad.iter().map(|g| -g).collect()),
            ]
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape("mul", &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape().push_op("mul", out, &[*self, *other], |a| {
            let (x, y) = (a.inputs[0].data(), a.inputs[1].data());
            vec![
                a.needs[0].then(|| a.grad.iter().zip(y).map(|(g, y)| g * y).collect()),
                a.needs[1].then(|| a.grad.iter().zip(x).map(|(g, x)| g * x).collect()),
            ]
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|v| v * factor).collect(),
            )
        };
        self.tape().push_op("scale", out, &[*self], move |a| {
            vec![Some(a.grad.iter().map(|g| g * factor).collect())]
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Var<'t>> {
        let (out, n) = {
            let x = self.value();
            (Tensor::scalar(x.data().iter().sum()), x.numel())
        };
        self.tape().push_op("sum", out, &[*self], move |a| {
            vec![Some(vec![a.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary(
            "gelu",
            |x| {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            },
            |x| {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            },
        )
    }

    /// SiLU (swish): `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Var<'t>> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }
}
