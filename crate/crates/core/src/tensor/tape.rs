//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`]s in order. Because
//! recording order is a topological order, [`Tape::backward`] is a single
//! reverse sweep. Gradients are accumulated additively, so a parameter
//! consumed by several recursions receives the sum of its partials.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, PAD};
use super::params::{ParamId, ParamStore};
use super::Tensor;

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add {
        a: usize,
        b: usize,
        ia: Option<Vec<usize>>,
        ib: Option<Vec<usize>>,
    },
    Sub {
        a: usize,
        b: usize,
        ia: Option<Vec<usize>>,
        ib: Option<Vec<usize>>,
    },
    Mul {
        a: usize,
        b: usize,
        ia: Option<Vec<usize>>,
        ib: Option<Vec<usize>>,
    },
    Scale {
        a: usize,
        factor: T,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        /// matrix offset into `a` / `b` for each output batch entry
        ia: Vec<usize>,
        ib: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    /// `out[o] = in[map[o]]`, or zero where `map[o] == PAD`.
    Gather {
        a: usize,
        map: Vec<usize>,
    },
    Softmax {
        a: usize,
        len: usize,
    },
    LogSoftmax {
        a: usize,
        len: usize,
    },
    Gelu {
        a: usize,
    },
    Relu {
        a: usize,
    },
    /// Zero-mean unit-variance normalization over rows of length `len`;
    /// `channels` carries `(b, c, s)` when rows are channels of a `[b, c, s]` map.
    Normalize {
        a: usize,
        len: usize,
        rstd: Vec<T>,
        channels: Option<(usize, usize, usize)>,
    },
    MeanAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll {
        a: usize,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    store: Cell<Option<u64>>,
}

/// A value living on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Tape<T> {
    /// Sign pattern of every ReLU input recorded so far. Two evaluations with
    /// equal patterns lie on the same linear piece of each ReLU.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(a),
                _ => None,
            })
            .flat_map(|a| nodes[a].value.data().iter().map(|&v| v > T::zero()).collect::<Vec<_>>())
            .collect()
    }

    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            store: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not backed by the parameter registry.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Lifts a registered tensor onto the tape. Repeated calls for the same
    /// id return the same node, so shared weights have one gradient slot.
    ///
    /// # Panics
    /// If the tape already holds parameters of a different store.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        match self.store.get() {
            None => self.store.set(Some(store.uid())),
            Some(uid) => assert_eq!(uid, store.uid(), "one tape cannot mix parameters of two stores"),
        }
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let entry = store.entry(id);
        let var = self.push(entry.value.clone(), Op::Leaf, entry.kind.trainable());
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` (output-shaped) back onto a broadcast operand.
fn unbroadcast<T: Scalar>(g: &[T], map: &Option<Vec<usize>>, shape: &[usize], scale: Option<&[T]>) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let data = out.data_mut();
    match map {
        None => {
            for (o, (i, &gv)) in data.iter_mut().zip(g.iter().enumerate()) {
                *o = scale.map_or(gv, |s| gv * s[i]);
            }
        }
        Some(idx) => {
            for (i, (&gv, &t)) in g.iter().zip(idx).enumerate() {
                data[t] += scale.map_or(gv, |s| gv * s[i]);
            }
        }
    }
    out
}

/// Output-indexed view of a broadcast operand.
fn expand<T: Scalar>(v: &[T], map: &Option<Vec<usize>>, len: usize) -> Vec<T> {
    match map {
        None => v.to_vec(),
        Some(idx) => (0..len).map(|o| v[idx[o]]).collect(),
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b, ia, ib } => {
            let ga = unbroadcast(gd, ia, nodes[*a].value.shape(), None);
            let gb = unbroadcast(gd, ib, nodes[*b].value.shape(), None);
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Sub { a, b, ia, ib } => {
            let ga = unbroadcast(gd, ia, nodes[*a].value.shape(), None);
            let neg: Vec<T> = gd.iter().map(|&v| -v).collect();
            let gb = unbroadcast(&neg, ib, nodes[*b].value.shape(), None);
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Mul { a, b, ia, ib } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let eb = expand(vb.data(), ib, gd.len());
                accumulate(nodes, grads, *a, unbroadcast(gd, ia, va.shape(), Some(&eb)));
            }
            if nodes[*b].requires_grad {
                let ea = expand(va.data(), ia, gd.len());
                accumulate(nodes, grads, *b, unbroadcast(gd, ib, vb.shape(), Some(&ea)));
            }
        }
        Op::Scale { a, factor } => {
            accumulate(nodes, grads, *a, g.map(|v| v * *factor));
        }
        Op::MatMul { a, b, m, k, n, ia, ib } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].requires_grad {
                let mut ga = Tensor::zeros(va.shape());
                for (bi, (&oa, &ob)) in ia.iter().zip(ib).enumerate() {
                    kernels::gemm_nt(
                        &gd[bi * m * n..(bi + 1) * m * n],
                        &vb.data()[ob * k * n..(ob + 1) * k * n],
                        &mut ga.data_mut()[oa * m * k..(oa + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = Tensor::zeros(vb.shape());
                for (bi, (&oa, &ob)) in ia.iter().zip(ib).enumerate() {
                    kernels::gemm_tn(
                        &va.data()[oa * m * k..(oa + 1) * m * k],
                        &gd[bi * m * n..(bi + 1) * m * n],
                        &mut gb.data_mut()[ob * k * n..(ob + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Reshape { a } => {
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(nodes, grads, *a, Tensor::from_parts(shape, gd.to_vec()));
        }
        Op::Gather { a, map } => {
            let mut ga = Tensor::zeros(nodes[*a].value.shape());
            let dst = ga.data_mut();
            for (&src, &gv) in map.iter().zip(gd) {
                if src != PAD {
                    dst[src] += gv;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softmax { a, len } => {
            let y = node.value.data();
            let mut ga = vec![T::zero(); gd.len()];
            for ((gy, yy), o) in gd.chunks(*len).zip(y.chunks(*len)).zip(ga.chunks_mut(*len)) {
                let dot: T = gy.iter().zip(yy).map(|(&p, &q)| p * q).sum();
                for ((ov, &gv), &yv) in o.iter_mut().zip(gy).zip(yy) {
                    *ov = yv * (gv - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::from_parts(g.shape().to_vec(), ga));
        }
        Op::LogSoftmax { a, len } => {
            let y = node.value.data();
            let mut ga = vec![T::zero(); gd.len()];
            for ((gy, yy), o) in gd.chunks(*len).zip(y.chunks(*len)).zip(ga.chunks_mut(*len)) {
                let sum: T = gy.iter().copied().sum();
                for ((ov, &gv), &yv) in o.iter_mut().zip(gy).zip(yy) {
                    *ov = gv - yv.exp() * sum;
                }
            }
            accumulate(nodes, grads, *a, Tensor::from_parts(g.shape().to_vec(), ga));
        }
        Op::Gelu { a } => {
            let x = nodes[*a].value.data();
            let ga = x
                .iter()
                .zip(gd)
                .map(|(&xv, &gv)| gv * (kernels::normal_cdf(xv) + xv * kernels::normal_pdf(xv)))
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(g.shape().to_vec(), ga));
        }
        Op::Relu { a } => {
            let x = nodes[*a].value.data();
            let ga = x
                .iter()
                .zip(gd)
                .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(g.shape().to_vec(), ga));
        }
        Op::Normalize { a, len, rstd, channels } => {
            let xhat = node.value.data();
            let ga = match channels {
                None => kernels::normalize_rows_backward(gd, xhat, rstd, *len),
                Some((b, c, s)) => {
                    let gm = kernels::channel_major(gd, *b, *c, *s, false);
                    let hm = kernels::channel_major(xhat, *b, *c, *s, false);
                    let dm = kernels::normalize_rows_backward(&gm, &hm, rstd, *len);
                    kernels::channel_major(&dm, *b, *c, *s, true)
                }
            };
            accumulate(nodes, grads, *a, Tensor::from_parts(g.shape().to_vec(), ga));
        }
        Op::MeanAxis { a, outer, len, inner } => {
            let scale = T::from_usize(*len).expect("axis length").recip();
            let mut ga = Tensor::zeros(nodes[*a].value.shape());
            let dst = ga.data_mut();
            for o in 0..*outer {
                for l in 0..*len {
                    for i in 0..*inner {
                        dst[(o * len + l) * inner + i] = gd[o * inner + i] * scale;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumAll { a } => {
            let shape = nodes[*a].value.shape();
            accumulate(nodes, grads, *a, Tensor::full(shape, gd[0]));
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a tape value; `None` for values
    /// that are detached or do not influence the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .get(&id)
            .and_then(|&node| self.grads.get(node))
            .and_then(Option::as_ref)
    }

    /// Gradient per registered parameter, indexed by [`ParamId`].
    pub fn into_param_grads(mut self, store_len: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store_len).map(|_| None).collect();
        for (id, node) in &self.params {
            if let Some(slot) = self.grads.get_mut(*node) {
                out[id.0] = slot.take();
            }
        }
        out
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the value with no path back to the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let v = self.to_tensor();
        self.tape.constant(v)
    }
}
