//! Elementwise, reduction and layout operations on the tape.

use std::ops::Range;

use super::tape::{Tape, Var};
use super::tensor::{split_shape, Tensor};
use crate::error::{Error, Result};

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", &ta, &tb)?;
        let out = zip_map(&ta, &tb, |x, y| x + y);
        self.record1("add", &[a, b], out, |g, _| vec![Some(g[0].clone()), Some(g[0].clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", &ta, &tb)?;
        let out = zip_map(&ta, &tb, |x, y| x - y);
        self.record1("sub", &[a, b], out, |g, _| vec![Some(g[0].clone()), Some(map(&g[0], |v| -v))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", &ta, &tb)?;
        let out = zip_map(&ta, &tb, |x, y| x * y);
        self.record1("mul", &[a, b], out, move |g, need| {
            vec![
                need[0].then(|| zip_map(&g[0], &tb, |u, y| u * y)),
                need[1].then(|| zip_map(&g[0], &ta, |u, x| u * x)),
            ]
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let out = map(&self.value(a), |x| s * x);
        self.record1("scale", &[a], out, move |g, _| vec![Some(map(&g[0], |u| s * u))])
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let out = map(&self.value(a), |x| x + s);
        self.record1("add_scalar", &[a], out, |g, _| vec![Some(g[0].clone())])
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = map(&ta, |x| x * x);
        self.record1("square", &[a], out, move |g, _| vec![Some(zip_map(&g[0], &ta, |u, x| 2.0 * x * u))])
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = map(&ta, f64::abs);
        self.record1("abs", &[a], out, move |g, _| {
            vec![Some(zip_map(&g[0], &ta, |u, x| if x > 0.0 { u } else if x < 0.0 { -u } else { 0.0 }))]
        })
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = map(&ta, |x| x.max(0.0));
        self.record1("relu", &[a], out, move |g, _| {
            vec![Some(zip_map(&g[0], &ta, |u, x| if x > 0.0 { u } else { 0.0 }))]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = map(&self.value(a), sigmoid);
        let y = out.clone();
        self.record1("sigmoid", &[a], out, move |g, _| {
            vec![Some(zip_map(&g[0], &y, |u, s| u * s * (1.0 - s)))]
        })
    }

    /// `softplus(x + shift)`, the density activation.
    pub fn softplus(&self, a: Var, shift: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = map(&ta, |x| softplus(x + shift));
        self.record1("softplus", &[a], out, move |g, _| {
            vec![Some(zip_map(&g[0], &ta, |u, x| u * sigmoid(x + shift)))]
        })
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = map(&ta, |x| x.clamp(lo, hi));
        self.record1("clamp", &[a], out, move |g, _| {
            vec![Some(zip_map(&g[0], &ta, |u, x| if x > lo && x < hi { u } else { 0.0 }))]
        })
    }

    /// Binary entropy `-(a ln a + (1-a) ln(1-a))`, elementwise. Inputs must lie in (0, 1).
    pub fn binary_entropy(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|&x| x <= 0.0 || x >= 1.0) {
            return Err(Error::Domain("binary_entropy: inputs must lie in (0, 1)".into()));
        }
        let out = map(&ta, |x| -(x * x.ln() + (1.0 - x) * (1.0 - x).ln()));
        self.record1("binary_entropy", &[a], out, move |g, _| {
            vec![Some(zip_map(&g[0], &ta, |u, x| u * ((1.0 - x).ln() - x.ln())))]
        })
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let out = Tensor::scalar(ta.data().iter().sum());
        self.record1("sum", &[a], out, move |g, _| vec![Some(Tensor::full(shape.clone(), g[0].item()))])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.numel();
        if n == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let shape = ta.shape().to_vec();
        let out = Tensor::scalar(ta.data().iter().sum::<f64>() / n as f64);
        self.record1("mean", &[a], out, move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g[0].item() / n as f64))]
        })
    }

    /// `Σ_i w_i · x_i` over scalar inputs.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Result<Var> {
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::dim("weighted_sum expects scalars"));
            }
            total += w * t.item();
        }
        self.record1("weighted_sum", &vars, Tensor::scalar(total), move |g, _| {
            weights.iter().map(|w| Some(Tensor::scalar(w * g[0].item()))).collect()
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let old = ta.shape().to_vec();
        let out = ta.reshape(shape.to_vec())?;
        self.record1("reshape", &[a], out, move |g, _| vec![Some(g[0].reshape(old.clone()).expect("reshape"))])
    }

    /// Swap the two axes of a rank-2 tensor.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::dim(format!("transpose expects rank 2, got {:?}", ta.shape())));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = transpose2(&ta, r, c);
        self.record1("transpose", &[a], out, move |g, _| vec![Some(transpose2(&g[0], c, r))])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let first = tensors.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        if axis >= first.rank() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {:?}", first.shape())));
        }
        for t in &tensors {
            let ok = t.rank() == first.rank()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!("concat: {:?} vs {:?} on axis {axis}", t.shape(), first.shape())));
            }
        }
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_shape(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &n) in tensors.iter().zip(&sizes) {
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let out = Tensor::new(shape.clone(), data)?;
        self.record1("concat", parts, out, move |g, need| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&n, &need)| {
                    let r = offset..offset + n;
                    offset += n;
                    need.then(|| slice_axis(&g[0], axis, r))
                })
                .collect()
        })
    }

    /// Sub-range along `axis`.
    pub fn slice(&self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || range.end > ta.shape()[axis] || range.start >= range.end {
            return Err(Error::dim(format!("slice {range:?} on axis {axis} of {:?}", ta.shape())));
        }
        let full = ta.shape().to_vec();
        let out = slice_axis(&ta, axis, range.clone());
        self.record1("slice", &[a], out, move |g, _| {
            let (outer, n, inner) = split_shape(&full, axis);
            let m = range.len();
            let mut data = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + range.start) * inner;
                data[dst..dst + m * inner].copy_from_slice(&g[0].data()[o * m * inner..(o + 1) * m * inner]);
            }
            vec![Some(Tensor::new(full.clone(), data).expect("slice grad"))]
        })
    }

    /// Select rows of a rank-2 tensor.
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::dim("gather_rows expects rank 2"));
        }
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::dim("gather_rows: row index out of range"));
        }
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            data.extend_from_slice(&ta.data()[r * k..(r + 1) * k]);
        }
        let out = Tensor::new(vec![rows.len(), k], data)?;
        let rows = rows.to_vec();
        self.record1("gather_rows", &[a], out, move |g, _| {
            let mut d = vec![0.0; n * k];
            for (i, &r) in rows.iter().enumerate() {
                for c in 0..k {
                    d[r * k + c] += g[0].data()[i * k + c];
                }
            }
            vec![Some(Tensor::new(vec![n, k], d).expect("gather grad"))]
        })
    }

    /// Place the rows of `a` at `rows` in an `n`-row tensor of zeros.
    pub fn scatter_rows(&self, a: Var, rows: &[usize], n: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.shape()[0] != rows.len() {
            return Err(Error::dim("scatter_rows: row count mismatch"));
        }
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::dim("scatter_rows: row index out of range"));
        }
        let k = ta.shape()[1];
        let mut d = vec![0.0; n * k];
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..k {
                d[r * k + c] += ta.data()[i * k + c];
            }
        }
        let out = Tensor::new(vec![n, k], d)?;
        let rows = rows.to_vec();
        self.record1("scatter_rows", &[a], out, move |g, _| {
            let mut data = Vec::with_capacity(rows.len() * k);
            for &r in &rows {
                data.extend_from_slice(&g[0].data()[r * k..(r + 1) * k]);
            }
            vec![Some(Tensor::new(vec![rows.len(), k], data).expect("scatter grad"))]
        })
    }
}

pub(crate) fn transpose2(t: &Tensor, r: usize, c: usize) -> Tensor {
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose")
}

pub(crate) fn slice_axis(t: &Tensor, axis: usize, range: Range<usize>) -> Tensor {
    let (outer, n, inner) = t.split_at_axis(axis);
    let m = range.len();
    let mut data = Vec::with_capacity(outer * m * inner);
    for o in 0..outer {
        let src = (o * n + range.start) * inner;
        data.extend_from_slice(&t.data()[src..src + m * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = m;
    Tensor::new(shape, data).expect("slice")
}
