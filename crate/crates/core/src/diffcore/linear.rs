use serde::{Deserialize, Serialize};

use super::ops::{sigmoid, softplus};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// `c = alpha * a·b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl Tape {
    /// `act(x·w + b)` for `x: [n×i]`, `w: [i×o]`, `b: [o]`.
    pub fn linear(&self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 2 || tw.rank() != 2 || tb.rank() != 1 {
            return Err(Error::dim("linear expects x: [n×i], w: [i×o], b: [o]"));
        }
        let (n, i) = (tx.shape()[0], tx.shape()[1]);
        let o = tw.shape()[1];
        if tw.shape()[0] != i || tb.shape()[0] != o {
            return Err(Error::dim(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut pre = vec![0.0; n * o];
        for row in pre.chunks_mut(o.max(1)) {
            row.copy_from_slice(tb.data());
        }
        gemm(n, i, o, 1.0, tx.data(), (i, 1), tw.data(), (o, 1), 1.0, &mut pre, (o, 1));
        let out: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
        let y = Tensor::new(vec![n, o], out)?;
        let yc = y.clone();
        self.record1("linear", &[x, w, b], y, move |g, need| {
            let gpre: Vec<f64> = g[0]
                .data()
                .iter()
                .zip(&pre)
                .zip(yc.data())
                .map(|((&u, &p), &yv)| u * act.derivative(p, yv))
                .collect();
            let gx = need[0].then(|| {
                let mut d = vec![0.0; n * i];
                gemm(n, o, i, 1.0, &gpre, (o, 1), tw.data(), (1, o), 0.0, &mut d, (i, 1));
                Tensor::new(vec![n, i], d).expect("gx")
            });
            let gw = need[1].then(|| {
                let mut d = vec![0.0; i * o];
                gemm(i, n, o, 1.0, tx.data(), (1, i), &gpre, (o, 1), 0.0, &mut d, (o, 1));
                Tensor::new(vec![i, o], d).expect("gw")
            });
            let gb = need[2].then(|| {
                let mut d = vec![0.0; o];
                for row in gpre.chunks(o.max(1)) {
                    d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                Tensor::new(vec![o], d).expect("gb")
            });
            vec![gx, gw, gb]
        })
    }
}
