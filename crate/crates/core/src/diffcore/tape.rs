use std::cell::RefCell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a recorded operation.
///
/// Receives the sensitivities of every output (zero-filled when an output did
/// not reach the loss) and a flag per input telling whether that input needs a
/// gradient. Returns one entry per input; `None` means "no contribution".
pub type Adjoint = Box<dyn Fn(&[Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Record {
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    adjoint: Adjoint,
}

#[derive(Default)]
struct Inner {
    values: Vec<Tensor>,
    tracked: Vec<bool>,
    records: Vec<Record>,
}

/// Wengert list for reverse-mode differentiation.
///
/// Operations append their outputs and an adjoint closure. Adjoints are only
/// stored when at least one input is tracked, so a tape holding nothing but
/// constants doubles as a plain forward evaluator.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn leaf(&self, value: Tensor, tracked: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.tracked.push(tracked);
        Var(inner.values.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.inner.borrow().values[var.0].clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.inner.borrow().values[var.0].shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.inner.borrow().tracked[var.0]
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append an operation. Non-finite outputs are rejected.
    pub fn record<F>(&self, op: &str, inputs: &[Var], outputs: Vec<Tensor>, adjoint: F) -> Result<Vec<Var>>
    where
        F: Fn(&[Tensor], &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        if let Some(pos) = outputs.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!("{op}: output {pos} is not finite")));
        }
        let mut inner = self.inner.borrow_mut();
        let tracked = inputs.iter().any(|v| inner.tracked[v.0]);
        let first = inner.values.len();
        let n_out = outputs.len();
        for t in outputs {
            inner.values.push(t);
            inner.tracked.push(tracked);
        }
        if tracked {
            inner.records.push(Record {
                inputs: inputs.iter().map(|v| v.0).collect(),
                outputs: (first..first + n_out).collect(),
                adjoint: Box::new(adjoint),
            });
        }
        Ok((first..first + n_out).map(Var).collect())
    }

    pub fn record1<F>(&self, op: &str, inputs: &[Var], output: Tensor, adjoint: F) -> Result<Var>
    where
        F: Fn(&[Tensor], &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        Ok(self.record(op, inputs, vec![output], adjoint)?[0])
    }

    /// Replay adjoints from a scalar `loss`. Consumes the tape.
    ///
    /// Only leaves keep their gradients; intermediate sensitivities are
    /// released as soon as their producing operation has been processed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Inner { values, tracked, records } = self.inner.into_inner();
        if values[loss.0].numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; values.len()];
        grads[loss.0] = Some(vec![1.0]);

        for rec in records.iter().rev() {
            if rec.outputs.iter().all(|&o| grads[o].is_none()) {
                continue;
            }
            let out_grads: Vec<Tensor> = rec
                .outputs
                .iter()
                .map(|&o| {
                    let shape = values[o].shape().to_vec();
                    match grads[o].take() {
                        Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                        None => Tensor::zeros(shape),
                    }
                })
                .collect();
            let needs: Vec<bool> = rec.inputs.iter().map(|&i| tracked[i]).collect();
            let in_grads = (rec.adjoint)(&out_grads, &needs);
            debug_assert_eq!(in_grads.len(), rec.inputs.len());
            for ((&input, need), g) in rec.inputs.iter().zip(&needs).zip(in_grads) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.numel(), values[input].numel());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g.into_vec()),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&values)
            .map(|(g, v)| g.map(|g| Tensor::new(v.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `like` when it never reached the loss.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}
