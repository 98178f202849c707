use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Everything a backward closure may look at.
pub struct Ctx<'a> {
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// Whether each input wants a gradient; closures may skip the rest.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&Ctx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Linear record of one forward pass. Nodes are appended in execution order,
/// so the node list is already topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    signs: Option<RefCell<Vec<bool>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also logs, for every relu / leaky-relu input element,
    /// whether it is positive. Two passes with equal logs sit on the same
    /// linear piece of every activation.
    pub fn with_sign_log() -> Self {
        Self {
            signs: Some(RefCell::new(Vec::new())),
            ..Self::default()
        }
    }

    pub fn sign_log(&self) -> Vec<bool> {
        self.signs.as_ref().map(|s| s.borrow().clone()).unwrap_or_default()
    }

    fn log_signs(&self, x: &Tensor) {
        if let Some(s) = &self.signs {
            s.borrow_mut().extend(x.data().iter().map(|&v| v > 0.0));
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, false)
    }

    /// Records a custom op. `value` must already be computed from the parents.
    pub fn op<'t>(&'t self, name: &'static str, parents: &[Var<'t>], value: Tensor, backward: BackwardFn) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        Ok(self.push(value, ids, requires_grad.then_some(backward), requires_grad))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> = node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = bw(&Ctx {
                inputs: &inputs,
                output: &node.value,
                grad: &g,
                needs: &needs,
            });
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(Error::NonFinite("backward"));
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Gradients of one backward sweep, indexed by tape node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

macro_rules! unary {
    ($(#[$m:meta])* $name:ident, $label:literal, |$x:ident| $fwd:expr, |$xx:ident, $y:ident| $deriv:expr) => {
        $(#[$m])*
        pub fn $name(self) -> Result<Var<'t>> {
            let value = self.value().map(|$x| $fwd);
            self.tape.op(
                $label,
                &[self],
                value,
                Box::new(|c: &Ctx| {
                    let x = &c.inputs[0];
                    let data = x
                        .data()
                        .iter()
                        .zip(c.output.data())
                        .zip(c.grad.data())
                        .map(|((&$xx, &$y), &g)| g * $deriv)
                        .collect();
                    vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
                }),
            )
        }
    };
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        partials: Option<(fn(f64, f64, f64) -> f64, fn(f64, f64, f64) -> f64)>,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let value = kernels::broadcast_binary(&a, &b, name, f)?;
        self.tape.op(
            name,
            &[self, other],
            value,
            Box::new(move |c: &Ctx| {
                let (a, b) = (&c.inputs[0], &c.inputs[1]);
                let out_shape = c.output.shape();
                let g = c.grad.data();
                match partials {
                    // add / sub: partials are +-1, no operand values needed
                    None => {
                        let ga = c.needs[0].then(|| kernels::reduce_to_shape(c.grad, a.shape()));
                        let gb = c.needs[1].then(|| {
                            let neg = if name == "sub" { c.grad.map(|x| -x) } else { c.grad.clone() };
                            kernels::reduce_to_shape(&neg, b.shape())
                        });
                        vec![ga, gb]
                    }
                    Some((da, db)) => {
                        let av = broadcast_to(a, out_shape);
                        let bv = broadcast_to(b, out_shape);
                        let part = |d: fn(f64, f64, f64) -> f64, target: &[usize]| {
                            let data = (0..g.len()).map(|i| d(av[i], bv[i], g[i])).collect();
                            kernels::reduce_to_shape(&Tensor::from_parts(out_shape.to_vec(), data), target)
                        };
                        vec![
                            c.needs[0].then(|| part(da, a.shape())),
                            c.needs[1].then(|| part(db, b.shape())),
                        ]
                    }
                }
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, None)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, None)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Some((|_, y, g| g * y, |x, _, g| g * x)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().iter().any(|&y| y == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(other, "div", |x, y| x / y, Some((|_, y, g| g / y, |x, y, g| -g * x / (y * y))))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let value = self.value().map(|x| x + c);
        self.tape.op("add_scalar", &[self], value, Box::new(|c: &Ctx| vec![Some(c.grad.clone())]))
    }

    pub fn mul_scalar(self, s: f64) -> Result<Var<'t>> {
        let value = self.value().map(|x| x * s);
        self.tape.op(
            "mul_scalar",
            &[self],
            value,
            Box::new(move |c: &Ctx| vec![Some(c.grad.map(|g| g * s))]),
        )
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.mul_scalar(-1.0)
    }

    /// `1 - x`
    pub fn one_minus(self) -> Result<Var<'t>> {
        let value = self.value().map(|x| 1.0 - x);
        self.tape.op("one_minus", &[self], value, Box::new(|c: &Ctx| vec![Some(c.grad.map(|g| -g))]))
    }

    unary!(exp, "exp", |x| x.exp(), |_x, y| y);
    unary!(sigmoid, "sigmoid", |x| sigmoid(x), |_x, y| y * (1.0 - y));
    unary!(tanh, "tanh", |x| x.tanh(), |_x, y| 1.0 - y * y);
    unary!(square, "square", |x| x * x, |x, _y| 2.0 * x);
    unary!(sin, "sin", |x| x.sin(), |x, _y| x.cos());
    unary!(cos, "cos", |x| x.cos(), |x, _y| -x.sin());
    unary!(
        /// `ln(1 + e^x)`, computed without overflow.
        softplus, "softplus", |x| softplus(x), |x, _y| sigmoid(x)
    );

    pub fn log(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "log of non-positive value".into(),
            });
        }
        self.log_unchecked()
    }

    unary!(log_unchecked, "log", |x| x.ln(), |x, _y| 1.0 / x);

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: "sqrt of negative value".into(),
            });
        }
        self.sqrt_unchecked()
    }

    unary!(sqrt_unchecked, "sqrt", |x| x.sqrt(), |_x, y| 0.5 / y);

    pub fn relu(self) -> Result<Var<'t>> {
        self.piecewise("relu", 0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.piecewise("leaky_relu", slope)
    }

    fn piecewise(self, name: &'static str, slope: f64) -> Result<Var<'t>> {
        let x = self.value();
        self.tape.log_signs(&x);
        let value = x.map(|x| if x > 0.0 { x } else if slope == 0.0 { 0.0 } else { slope * x });
        self.tape.op(
            name,
            &[self],
            value,
            Box::new(move |c: &Ctx| {
                let data = c.inputs[0]
                    .data()
                    .iter()
                    .zip(c.grad.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { slope * g })
                    .collect();
                vec![Some(Tensor::from_parts(c.grad.shape().to_vec(), data))]
            }),
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = kernels::matmul(&self.value(), &other.value())?;
        self.tape.op(
            "matmul",
            &[self, other],
            value,
            Box::new(|c: &Ctx| {
                let (ga, gb) = kernels::matmul_backward(&c.inputs[0], &c.inputs[1], c.grad, c.needs[0], c.needs[1]);
                vec![ga, gb]
            }),
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = kernels::softmax(&self.value(), axis)?;
        self.tape.op(
            "softmax",
            &[self],
            value,
            Box::new(move |c: &Ctx| vec![Some(kernels::softmax_backward(c.output, c.grad, axis))]),
        )
    }

    pub fn sum(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_mean_or_sum(axis, keepdim, false)
    }

    pub fn mean(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_mean_or_sum(axis, keepdim, true)
    }

    fn reduce_mean_or_sum(self, axis: usize, keepdim: bool, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        kernels::check_axis(x.shape(), axis, "reduce")?;
        let len = x.shape()[axis] as f64;
        let scale = if mean { 1.0 / len } else { 1.0 };
        let mut value = kernels::sum_axis(&x, axis, keepdim);
        if mean {
            value.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        self.tape.op(
            if mean { "mean" } else { "sum" },
            &[self],
            value,
            Box::new(move |c: &Ctx| vec![Some(kernels::expand_axis(c.grad.data(), c.inputs[0].shape(), axis, scale))]),
        )
    }

    pub fn max(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let x = self.value();
        kernels::check_axis(x.shape(), axis, "max")?;
        let (value, arg) = kernels::max_axis(&x, axis, keepdim);
        self.tape.op(
            "max",
            &[self],
            value,
            Box::new(move |c: &Ctx| {
                let shape = c.inputs[0].shape();
                let (outer, len, inner) = super::split_axis(shape, axis);
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = arg[o * inner + i];
                        out[(o * len + j) * inner + i] = c.grad.data()[o * inner + i];
                    }
                }
                vec![Some(Tensor::from_parts(shape.to_vec(), out))]
            }),
        )
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.reshape(&[n])?.sum(0, false)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.reshape(&[n])?.mean(0, false)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        self.tape.op(
            "reshape",
            &[self],
            value,
            Box::new(|c: &Ctx| {
                vec![Some(Tensor::from_parts(c.inputs[0].shape().to_vec(), c.grad.data().to_vec()))]
            }),
        )
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let value = kernels::permute(&self.value(), perm)?;
        let inv = kernels::inverse_permutation(perm);
        self.tape.op(
            "permute",
            &[self],
            value,
            Box::new(move |c: &Ctx| vec![Some(kernels::permute(c.grad, &inv).expect("valid inverse"))]),
        )
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: "rank < 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = kernels::slice(&self.value(), axis, start, len)?;
        self.tape.op(
            "slice",
            &[self],
            value,
            Box::new(move |c: &Ctx| {
                let shape = c.inputs[0].shape();
                let (outer, full, inner) = super::split_axis(shape, axis);
                let mut out = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    out[dst..dst + len * inner].copy_from_slice(&c.grad.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.to_vec(), out))]
            }),
        )
    }

    /// Delay along `axis` by `by` steps with zero fill.
    pub fn shift(self, axis: usize, by: usize) -> Result<Var<'t>> {
        let x = self.value();
        kernels::check_axis(x.shape(), axis, "shift")?;
        let value = kernels::shift(&x, axis, by, false);
        self.tape.op(
            "shift",
            &[self],
            value,
            Box::new(move |c: &Ctx| vec![Some(kernels::shift(c.grad, axis, by, true))]),
        )
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = kernels::concat(&refs, axis)?;
        first.tape.op(
            "concat",
            parts,
            value,
            Box::new(move |c: &Ctx| {
                let mut start = 0;
                c.inputs
                    .iter()
                    .zip(c.needs)
                    .map(|(x, &need)| {
                        let len = x.shape()[axis];
                        let g = need.then(|| kernels::slice(c.grad, axis, start, len).expect("in range"));
                        start += len;
                        g
                    })
                    .collect()
            }),
        )
    }
}

fn broadcast_to<'a>(x: &'a Tensor, shape: &[usize]) -> std::borrow::Cow<'a, [f64]> {
    if x.shape() == shape {
        std::borrow::Cow::Borrowed(x.data())
    } else {
        let z = Tensor::zeros(shape);
        std::borrow::Cow::Owned(kernels::broadcast_binary(&z, x, "broadcast", |_, y| y).expect("validated").into_data())
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
