//! Reverse-mode differentiation over a growable tape.
//!
//! A [`Tape`] records every operation as a node holding its materialized
//! value. [`Var`] is a cheap handle (tape pointer + node index). Calling
//! [`backward`] walks the recorded nodes in reverse and *appends gradient
//! nodes to the same tape*: each backward rule is written in terms of the
//! public ops, so gradients are themselves differentiable. That is what the
//! gradient-norm regularizer in the training engine relies on.
//!
//! Shape violations inside the graph are programmer errors and panic with a
//! message; fallible validation belongs at module boundaries.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::dtype::Element;
use crate::kernels::{self, ConvSpec};
use crate::tensor::{numel_of, Tensor};

// Some payload fields are only read by the derived Debug impl.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    /// Elementwise sign; derivative treated as 0 everywhere.
    Sign,
    Sqrt,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu {
        slope: f64,
    },
    /// 1 where x > 0, `slope` elsewhere; derivative treated as 0.
    LeakyMask {
        slope: f64,
    },
    Scale {
        c: f64,
    },
    AddScalar {
        c: f64,
    },
    Matmul,
    Reshape {
        from: Vec<usize>,
    },
    Permute {
        perm: Vec<usize>,
    },
    Expand {
        from: Vec<usize>,
    },
    ReduceSumTo {
        from: Vec<usize>,
    },
    Concat {
        axis: usize,
        parts: Vec<usize>,
    },
    Slice {
        axis: usize,
        start: usize,
        from_extent: usize,
    },
    ZeroPad {
        axis: usize,
        before: usize,
        after: usize,
    },
    Im2Col {
        spec: ConvSpec,
    },
    Col2Im {
        spec: ConvSpec,
    },
}

struct Node<E> {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor<E>,
    needs_grad: bool,
}

/// Recording context for one differentiable computation.
pub struct Tape<E> {
    nodes: Rc<RefCell<Vec<Node<E>>>>,
}

impl<E> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Leaf that gradients flow into.
    pub fn variable(&self, value: Tensor<E>) -> Var<E> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<E>) -> Var<E> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<E> {
        self.constant(Tensor::scalar_f64(value))
    }

    fn leaf(&self, value: Tensor<E>, needs_grad: bool) -> Var<E> {
        self.push(Op::Leaf, &[], value, needs_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: &[usize], value: Tensor<E>, needs_grad: bool) -> Var<E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            needs_grad,
        });
        Var {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    fn same(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, parts: &[&Var<E>], axis: usize) -> Var<E> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].shape().len();
        for p in parts {
            assert!(self.same(&p.tape), "concat across tapes");
            assert_eq!(p.shape().len(), rank, "concat rank mismatch");
            for a in 0..rank {
                assert!(
                    a == axis || p.shape()[a] == parts[0].shape()[a],
                    "concat extent mismatch off the concat axis"
                );
            }
        }
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor<E>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            kernels::concat(&tensors, axis)
        };
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = parts.iter().any(|p| p.needs_grad());
        self.push(
            Op::Concat {
                axis,
                parts: extents,
            },
            &ids,
            value,
            needs,
        )
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<E> {
    tape: Tape<E>,
    id: usize,
}

impl<E> Clone for Var<E> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<E: Element> Var<E> {
    pub fn tape(&self) -> &Tape<E> {
        &self.tape
    }

    pub fn value(&self) -> Ref<'_, Tensor<E>> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    pub fn tensor(&self) -> Tensor<E> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn scalar_f64(&self) -> f64 {
        self.value().item_f64()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Constant copy of this value; cuts the gradient path.
    pub fn detach(&self) -> Var<E> {
        let t = self.tensor();
        self.tape.constant(t)
    }

    fn unary(&self, op: Op, f: impl Fn(E) -> E, needs_grad: bool) -> Var<E> {
        let value = self.value().map(&f);
        self.tape.push(op, &[self.id], value, needs_grad)
    }

    fn binary(&self, rhs: &Var<E>, op: Op, f: impl Fn(E, E) -> E) -> Var<E> {
        assert!(self.tape.same(&rhs.tape), "binary op across tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            let out_shape = kernels::broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
                panic!(
                    "shapes {:?} and {:?} do not broadcast",
                    a.shape(),
                    b.shape()
                )
            });
            kernels::binop(a, b, &out_shape, f)
        };
        let needs = self.needs_grad() || rhs.needs_grad();
        self.tape.push(op, &[self.id, rhs.id], value, needs)
    }

    pub fn add(&self, rhs: &Var<E>) -> Var<E> {
        self.binary(rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Var<E>) -> Var<E> {
        self.binary(rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Var<E>) -> Var<E> {
        self.binary(rhs, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Var<E>) -> Var<E> {
        self.binary(rhs, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Var<E> {
        self.unary(Op::Neg, |a| -a, self.needs_grad())
    }

    pub fn abs(&self) -> Var<E> {
        self.unary(Op::Abs, |a| a.abs(), self.needs_grad())
    }

    pub fn sign(&self) -> Var<E> {
        self.unary(
            Op::Sign,
            |a| {
                if a > E::zero() {
                    E::one()
                } else if a < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                }
            },
            false,
        )
    }

    pub fn sqrt(&self) -> Var<E> {
        self.unary(Op::Sqrt, |a| a.sqrt(), self.needs_grad())
    }

    pub fn exp(&self) -> Var<E> {
        self.unary(Op::Exp, |a| a.exp(), self.needs_grad())
    }

    pub fn ln(&self) -> Var<E> {
        self.unary(Op::Ln, |a| a.ln(), self.needs_grad())
    }

    pub fn tanh(&self) -> Var<E> {
        self.unary(Op::Tanh, |a| a.tanh(), self.needs_grad())
    }

    pub fn sigmoid(&self) -> Var<E> {
        self.unary(Op::Sigmoid, sigmoid_stable, self.needs_grad())
    }

    pub fn softplus(&self) -> Var<E> {
        self.unary(Op::Softplus, softplus_stable, self.needs_grad())
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<E> {
        let s = E::from_f64(slope);
        self.unary(
            Op::LeakyRelu { slope },
            move |a| if a > E::zero() { a } else { a * s },
            self.needs_grad(),
        )
    }

    fn leaky_mask(&self, slope: f64) -> Var<E> {
        let s = E::from_f64(slope);
        self.unary(
            Op::LeakyMask { slope },
            move |a| if a > E::zero() { E::one() } else { s },
            false,
        )
    }

    /// x * sigmoid(x).
    pub fn swish(&self) -> Var<E> {
        self.mul(&self.sigmoid())
    }

    pub fn square(&self) -> Var<E> {
        self.mul(self)
    }

    pub fn scale(&self, c: f64) -> Var<E> {
        let k = E::from_f64(c);
        self.unary(Op::Scale { c }, move |a| a * k, self.needs_grad())
    }

    pub fn add_scalar(&self, c: f64) -> Var<E> {
        let k = E::from_f64(c);
        self.unary(Op::AddScalar { c }, move |a| a + k, self.needs_grad())
    }

    pub fn matmul(&self, rhs: &Var<E>) -> Var<E> {
        assert!(self.tape.same(&rhs.tape), "matmul across tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            assert_eq!(a.rank(), 2, "matmul lhs must be rank 2");
            assert_eq!(b.rank(), 2, "matmul rhs must be rank 2");
            assert_eq!(
                a.shape()[1],
                b.shape()[0],
                "matmul inner dimension mismatch: {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            kernels::matmul(a, b)
        };
        let needs = self.needs_grad() || rhs.needs_grad();
        self.tape.push(Op::Matmul, &[self.id, rhs.id], value, needs)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<E> {
        let from = self.shape();
        assert_eq!(
            numel_of(&from),
            numel_of(shape),
            "reshape {:?} -> {:?}",
            from,
            shape
        );
        let value = self.tensor().reshaped(shape).unwrap();
        self.tape
            .push(Op::Reshape { from }, &[self.id], value, self.needs_grad())
    }

    pub fn permute(&self, perm: &[usize]) -> Var<E> {
        let value = kernels::permute(&self.value(), perm);
        self.tape.push(
            Op::Permute {
                perm: perm.to_vec(),
            },
            &[self.id],
            value,
            self.needs_grad(),
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Var<E> {
        self.permute(&[1, 0])
    }

    pub fn expand(&self, shape: &[usize]) -> Var<E> {
        let from = self.shape();
        assert!(
            kernels::broadcast_shape(&from, shape).as_deref() == Some(shape),
            "cannot expand {:?} to {:?}",
            from,
            shape
        );
        let value = kernels::expand(&self.value(), shape);
        self.tape
            .push(Op::Expand { from }, &[self.id], value, self.needs_grad())
    }

    pub fn reduce_sum_to(&self, shape: &[usize]) -> Var<E> {
        let from = self.shape();
        if from == shape {
            return self.clone();
        }
        assert!(
            kernels::broadcast_shape(shape, &from).as_deref() == Some(&from[..]),
            "cannot reduce {:?} to {:?}",
            from,
            shape
        );
        let value = kernels::reduce_sum_to(&self.value(), shape);
        self.tape.push(
            Op::ReduceSumTo { from },
            &[self.id],
            value,
            self.needs_grad(),
        )
    }

    pub fn sum_all(&self) -> Var<E> {
        self.reduce_sum_to(&[])
    }

    pub fn mean_all(&self) -> Var<E> {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum along one axis, keeping it with extent 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Var<E> {
        let mut to = self.shape();
        to[axis] = 1;
        self.reduce_sum_to(&to)
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Var<E> {
        let n = self.shape()[axis];
        self.sum_axis_keep(axis).scale(1.0 / n as f64)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<E> {
        let from_extent = self.shape()[axis];
        assert!(start + len <= from_extent, "slice out of bounds");
        let value = kernels::slice_axis(&self.value(), axis, start, len);
        self.tape.push(
            Op::Slice {
                axis,
                start,
                from_extent,
            },
            &[self.id],
            value,
            self.needs_grad(),
        )
    }

    pub fn zero_pad(&self, axis: usize, before: usize, after: usize) -> Var<E> {
        let value = kernels::zero_pad_axis(&self.value(), axis, before, after);
        self.tape.push(
            Op::ZeroPad {
                axis,
                before,
                after,
            },
            &[self.id],
            value,
            self.needs_grad(),
        )
    }

    /// Unfold image patches for convolution-as-matmul.
    pub fn im2col(&self, spec: ConvSpec) -> Var<E> {
        assert_eq!(self.shape(), spec.input_shape(), "im2col input shape");
        let value = kernels::im2col(&self.value(), &spec);
        self.tape
            .push(Op::Im2Col { spec }, &[self.id], value, self.needs_grad())
    }

    /// Adjoint of [`Var::im2col`].
    pub fn col2im(&self, spec: ConvSpec) -> Var<E> {
        assert_eq!(
            self.shape(),
            vec![spec.rows(), spec.patch_len()],
            "col2im input shape"
        );
        let value = kernels::col2im(&self.value(), &spec);
        self.tape
            .push(Op::Col2Im { spec }, &[self.id], value, self.needs_grad())
    }
}

fn sigmoid_stable<E: Element>(x: E) -> E {
    let v = x.as_f64();
    let out = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    E::from_f64(out)
}

fn softplus_stable<E: Element>(x: E) -> E {
    let v = x.as_f64();
    E::from_f64(v.max(0.0) + (-v.abs()).exp().ln_1p())
}

macro_rules! var_binop {
    ($trait:ident, $method:ident) => {
        impl<E: Element> std::ops::$trait<&Var<E>> for &Var<E> {
            type Output = Var<E>;
            fn $method(self, rhs: &Var<E>) -> Var<E> {
                Var::$method(self, rhs)
            }
        }
    };
}

var_binop!(Add, add);
var_binop!(Sub, sub);
var_binop!(Mul, mul);
var_binop!(Div, div);

impl<E: Element> std::ops::Neg for &Var<E> {
    type Output = Var<E>;
    fn neg(self) -> Var<E> {
        Var::neg(self)
    }
}

/// Gradients of a scalar `loss` with respect to each `wrt` variable.
///
/// Returns one gradient per entry of `wrt`, shaped like it; variables the
/// loss does not depend on get zeros. The gradients are live tape nodes, so
/// they can be differentiated again.
pub fn backward<E: Element>(loss: &Var<E>, wrt: &[&Var<E>]) -> Vec<Var<E>> {
    assert_eq!(loss.numel(), 1, "backward requires a scalar loss");
    for v in wrt {
        assert!(loss.tape.same(&v.tape), "wrt variable from another tape");
    }
    let tape = loss.tape.clone();
    let horizon = loss.id;

    let mut grads: Vec<Option<Var<E>>> = vec![None; horizon + 1];
    let seed_shape = loss.shape();
    grads[horizon] = Some(tape.constant(Tensor::ones(&seed_shape)));

    for id in (0..=horizon).rev() {
        let Some(grad) = grads[id].clone() else {
            continue;
        };
        let (op, inputs, needs) = {
            let nodes = tape.nodes.borrow();
            let n = &nodes[id];
            (n.op.clone(), n.inputs.clone(), n.needs_grad)
        };
        if !needs || matches!(op, Op::Leaf) {
            continue;
        }
        let out = Var {
            tape: tape.clone(),
            id,
        };
        let input_vars: Vec<Var<E>> = inputs
            .iter()
            .map(|&i| Var {
                tape: tape.clone(),
                id: i,
            })
            .collect();
        let contributions = vjp(&op, &input_vars, &out, &grad);
        for (input, contribution) in input_vars.iter().zip(contributions) {
            let Some(c) = contribution else { continue };
            if !input.needs_grad() {
                continue;
            }
            grads[input.id] = Some(match grads[input.id].take() {
                Some(acc) => acc.add(&c),
                None => c,
            });
        }
    }

    wrt.iter()
        .map(|v| match grads.get(v.id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => tape.constant(Tensor::zeros(&v.shape())),
        })
        .collect()
}

/// Vector-Jacobian product: gradient contribution for each input of `op`.
///
/// Every rule is built from public ops so the result is differentiable.
fn vjp<E: Element>(op: &Op, inputs: &[Var<E>], out: &Var<E>, grad: &Var<E>) -> Vec<Option<Var<E>>> {
    match op {
        Op::Leaf => vec![],
        Op::Add => {
            let a = grad.reduce_sum_to(&inputs[0].shape());
            let b = grad.reduce_sum_to(&inputs[1].shape());
            vec![Some(a), Some(b)]
        }
        Op::Sub => {
            let a = grad.reduce_sum_to(&inputs[0].shape());
            let b = grad.neg().reduce_sum_to(&inputs[1].shape());
            vec![Some(a), Some(b)]
        }
        Op::Mul => {
            let a = grad.mul(&inputs[1]).reduce_sum_to(&inputs[0].shape());
            let b = grad.mul(&inputs[0]).reduce_sum_to(&inputs[1].shape());
            vec![Some(a), Some(b)]
        }
        Op::Div => {
            let a = grad.div(&inputs[1]).reduce_sum_to(&inputs[0].shape());
            let b = grad
                .mul(out)
                .div(&inputs[1])
                .neg()
                .reduce_sum_to(&inputs[1].shape());
            vec![Some(a), Some(b)]
        }
        Op::Neg => vec![Some(grad.neg())],
        Op::Abs => vec![Some(grad.mul(&inputs[0].sign()))],
        Op::Sign | Op::LeakyMask { .. } => vec![None],
        Op::Sqrt => vec![Some(grad.div(out).scale(0.5))],
        Op::Exp => vec![Some(grad.mul(out))],
        Op::Ln => vec![Some(grad.div(&inputs[0]))],
        Op::Tanh => {
            let one_minus = out.square().neg().add_scalar(1.0);
            vec![Some(grad.mul(&one_minus))]
        }
        Op::Sigmoid => {
            let d = out.mul(&out.neg().add_scalar(1.0));
            vec![Some(grad.mul(&d))]
        }
        Op::Softplus => vec![Some(grad.mul(&inputs[0].sigmoid()))],
        Op::LeakyRelu { slope } => vec![Some(grad.mul(&inputs[0].leaky_mask(*slope)))],
        Op::Scale { c } => vec![Some(grad.scale(*c))],
        Op::AddScalar { .. } => vec![Some(grad.clone())],
        Op::Matmul => {
            let a = grad.matmul(&inputs[1].t());
            let b = inputs[0].t().matmul(grad);
            vec![Some(a), Some(b)]
        }
        Op::Reshape { from } => vec![Some(grad.reshape(from))],
        Op::Permute { perm } => vec![Some(grad.permute(&kernels::inverse_perm(perm)))],
        Op::Expand { from } => vec![Some(grad.reduce_sum_to(from))],
        Op::ReduceSumTo { from } => vec![Some(grad.expand(from))],
        Op::Concat { axis, parts } => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(parts.len());
            for &extent in parts {
                grads.push(Some(grad.slice(*axis, offset, extent)));
                offset += extent;
            }
            grads
        }
        Op::Slice {
            axis,
            start,
            from_extent,
        } => {
            let after = from_extent - start - grad.shape()[*axis];
            vec![Some(grad.zero_pad(*axis, *start, after))]
        }
        Op::ZeroPad {
            axis,
            before,
            after,
        } => {
            let len = grad.shape()[*axis] - before - after;
            vec![Some(grad.slice(*axis, *before, len))]
        }
        Op::Im2Col { spec } => vec![Some(grad.col2im(*spec))],
        Op::Col2Im { spec } => vec![Some(grad.im2col(*spec))],
    }
}
