//! Wengert tape: operations record backward closures during the forward
//! pass; `backward_into` replays them in reverse.

use std::collections::HashMap;

use super::{numel, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor living on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradient accumulation buffer for tape nodes during backward.
pub(crate) struct GradSink<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradSink<T> {
    fn new(n: usize) -> Self {
        GradSink { slots: (0..n).map(|_| None).collect() }
    }

    /// Zero-initialized gradient buffer for node `id`; contributions add in.
    pub(crate) fn slot(&mut self, id: usize, len: usize) -> &mut [T] {
        self.slots[id].get_or_insert_with(|| vec![T::zero(); len])
    }
}

pub(crate) type BackFn<T> = Box<dyn Fn(&[Tensor<T>], &Tensor<T>, &mut GradSink<T>)>;

struct Rec<T> {
    out: usize,
    back: BackFn<T>,
}

pub struct Tape<T: Scalar> {
    pub(crate) vals: Vec<Tensor<T>>,
    requires_grad: Vec<bool>,
    recs: Vec<Rec<T>>,
    grad_enabled: bool,
}

/// Leaf gradients produced by backward passes. Accumulates additively
/// across calls; zero by omission.
pub struct Grads<T> {
    g: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Default for Grads<T> {
    fn default() -> Self {
        Grads { g: HashMap::new() }
    }
}

impl<T: Scalar> Grads<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.g.get(&v.0)
    }

    pub fn clear(&mut self) {
        self.g.clear();
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), requires_grad: Vec::new(), recs: Vec::new(), grad_enabled: true }
    }

    /// Tape that records nothing; eval-mode forwards run on this.
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.vals.push(t);
        self.requires_grad.push(requires_grad);
        Var(self.vals.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.vals[v.0].shape
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Pushes an op result together with its backward closure.
    pub(crate) fn push(&mut self, out: Tensor<T>, back: BackFn<T>) -> Var {
        self.vals.push(out);
        self.requires_grad.push(false);
        let id = self.vals.len() - 1;
        if self.grad_enabled {
            self.recs.push(Rec { out: id, back });
        }
        Var(id)
    }

    /// Reverse sweep from a scalar loss. Leaf gradients are added into
    /// `grads`, so running backward twice doubles them.
    pub fn backward_into(&self, loss: Var, grads: &mut Grads<T>) -> Result<()> {
        let lv = &self.vals[loss.0];
        if !lv.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape),
            ));
        }
        let mut sink = GradSink::new(self.vals.len());
        sink.slot(loss.0, 1)[0] = T::one();
        for rec in self.recs.iter().rev() {
            let Some(gout) = sink.slots[rec.out].take() else { continue };
            let gout = Tensor { shape: self.vals[rec.out].shape, data: gout };
            (rec.back)(&self.vals, &gout, &mut sink);
        }
        for (id, &req) in self.requires_grad.iter().enumerate() {
            if !req {
                continue;
            }
            let Some(g) = sink.slots[id].take() else { continue };
            let shape = self.vals[id].shape;
            match grads.g.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => {
                    grads.g.insert(id, Tensor { shape, data: g });
                }
            }
        }
        Ok(())
    }

    /// Convenience: fresh gradient buffer from one backward pass.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let mut g = Grads::new();
        self.backward_into(loss, &mut g)?;
        Ok(g)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[allow(dead_code)]
fn assert_same_numel<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) {
    debug_assert_eq!(numel(a.shape), numel(b.shape));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_graph_leaves_grads_empty() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let grads = tape.backward(x).unwrap();
        // x is the loss itself: its grad is 1 only if an op recorded it;
        // a bare leaf seeds itself.
        assert!(grads.get(x).is_some());
        assert_eq!(grads.get(x).unwrap().data[0], 1.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        assert!(tape.backward(x).is_err());
    }
}
