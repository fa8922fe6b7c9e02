//! Tape-based reverse-mode autodiff over dense `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the tape in reverse and returns gradients for the
//! leaves. The same code runs in `f32` for training and `f64` for gradient checks.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{concatenate, ArrayD, ArrayView2, Axis, Ix2, IxDyn, LinalgScalar, ScalarOperand, Slice, Zip};
use num_traits::{Float as NumFloat, FromPrimitive};

pub trait Float:
    NumFloat
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Bytes per element in checkpoints.
    const WIDTH: u8;
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Float for f32 {
    const WIDTH: u8 = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const WIDTH: u8 = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

type BackFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Float> {
    value: Rc<ArrayD<F>>,
    parents: Vec<usize>,
    back: Option<BackFn<F>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Default)]
pub struct Tape<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Gradients of a scalar with respect to every leaf that influenced it.
pub struct Grads<F: Float> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Float> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn as2<F: Float>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

/// Sum of `g` over every axis except the last, for broadcasts along leading axes.
fn sum_leading<F: Float>(g: &ArrayD<F>) -> ArrayD<F> {
    let n = *g.shape().last().expect("rank >= 1");
    let rows = g.len() / n;
    let g = g.as_standard_layout();
    let g2 = g.view().into_shape_with_order((rows, n)).expect("row-major gradient");
    g2.sum_axis(Axis(0)).into_dyn()
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, parents: Vec<usize>, back: Option<BackFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Input or parameter. Gradients are reported for leaves.
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<F>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Reverse sweep from a scalar (or any tensor, seeded with ones).
    pub fn backward(&self, out: Var) -> Grads<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(ArrayD::from_elem(nodes[out.0].value.raw_dim(), F::one()));
        for i in (0..=out.0).rev() {
            let Some(back) = &nodes[i].back else { continue };
            let Some(g) = grads[i].take() else { continue };
            let contributions = back(&g);
            for (&p, c) in nodes[i].parents.iter().zip(contributions) {
                debug_assert_eq!(c.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Grads { grads }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = as2(&va).dot(&as2(&vb)).into_dyn();
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                vec![g2.dot(&as2(&vb).t()).into_dyn(), as2(&va).t().dot(&g2).into_dyn()]
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) + &*self.value(b);
        self.push(out, vec![a.0, b.0], Some(Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) - &*self.value(b);
        self.push(out, vec![a.0, b.0], Some(Box::new(|g| vec![g.clone(), g.mapv(|x| -x)])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = &*va * &*vb;
        self.push(out, vec![a.0, b.0], Some(Box::new(move |g| vec![g * &*vb, g * &*va])))
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let out = &*self.value(a) * c;
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![g * c])))
    }

    /// `1 - a`.
    pub fn one_minus(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| F::one() - x);
        self.push(out, vec![a.0], Some(Box::new(|g| vec![g.mapv(|x| -x)])))
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let out = &*self.value(x) + &*self.value(b);
        self.push(out, vec![x.0, b.0], Some(Box::new(|g| vec![g.clone(), sum_leading(g)])))
    }

    pub fn relu(&self, a: Var) -> Var {
        let y = Rc::new(self.value(a).mapv(|x| x.max(F::zero())));
        let keep = y.clone();
        self.push(
            (*y).clone(),
            vec![a.0],
            Some(Box::new(move |g| {
                let mut d = g.clone();
                Zip::from(&mut d).and(&*keep).for_each(|d, &y| {
                    if y <= F::zero() {
                        *d = F::zero();
                    }
                });
                vec![d]
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let y = Rc::new(self.value(a).mapv(sigmoid));
        let keep = y.clone();
        self.push(
            (*y).clone(),
            vec![a.0],
            Some(Box::new(move |g| {
                let mut d = g.clone();
                Zip::from(&mut d).and(&*keep).for_each(|d, &y| *d *= y * (F::one() - y));
                vec![d]
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let y = Rc::new(self.value(a).mapv(F::tanh));
        let keep = y.clone();
        self.push(
            (*y).clone(),
            vec![a.0],
            Some(Box::new(move |g| {
                let mut d = g.clone();
                Zip::from(&mut d).and(&*keep).for_each(|d, &y| *d *= F::one() - y * y);
                vec![d]
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        let orig = v.shape().to_vec();
        let out = v.as_standard_layout().into_owned().into_shape_with_order(IxDyn(shape)).expect("reshape preserves length");
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&orig)).expect("same length")]
            })),
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        let vals: Vec<Rc<ArrayD<F>>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("compatible shapes");
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g| {
                let mut start = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let s = g.slice_axis(Axis(axis), Slice::from(start..start + w)).to_owned();
                        start += w;
                        s
                    })
                    .collect()
            })),
        )
    }

    /// Index `index` along `axis`, removing that axis.
    pub fn select(&self, a: Var, axis: usize, index: usize) -> Var {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let out = v.index_axis(Axis(axis), index).to_owned();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut d = ArrayD::zeros(IxDyn(&shape));
                d.index_axis_mut(Axis(axis), index).assign(g);
                vec![d]
            })),
        )
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let n = shape[axis];
        let out = v.mean_axis(Axis(axis)).expect("non-empty axis");
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![spread(g, &shape, axis, n)])))
    }

    /// Mean along `axis` with every lane summed in ascending order, so the
    /// result does not depend on the order of the entries along `axis`.
    pub fn mean_axis_sorted(&self, a: Var, axis: usize) -> Var {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let n = shape[axis];
        let inv = F::one() / F::from_usize(n).expect("length");
        let mut buf = Vec::with_capacity(n);
        let out = v.map_axis(Axis(axis), |lane| {
            buf.clear();
            buf.extend(lane.iter().copied());
            buf.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
            buf.iter().fold(F::zero(), |s, &x| s + x) * inv
        });
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![spread(g, &shape, axis, n)])))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), v.sum());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![ArrayD::from_elem(IxDyn(&shape), g[[]])])),
        )
    }

    /// Dilated-convolution patches: `x[B, L, C]` to `[B * L_out, K * C]`, with
    /// column `k * C + c` holding `x[b, o - padding + k * dilation, c]` (zero outside).
    pub fn im2col(&self, x: Var, kernel: usize, dilation: usize, padding: usize) -> Var {
        let v = self.value(x);
        let (b, l, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let span = dilation * (kernel - 1);
        assert!(l + 2 * padding > span, "sequence shorter than the dilated kernel");
        let l_out = l + 2 * padding - span;
        let src = v.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut cols = vec![F::zero(); b * l_out * kernel * c];
        for bi in 0..b {
            for o in 0..l_out {
                let row = (bi * l_out + o) * kernel * c;
                for k in 0..kernel {
                    let pos = o + k * dilation;
                    if pos < padding || pos - padding >= l {
                        continue;
                    }
                    let s = (bi * l + pos - padding) * c;
                    cols[row + k * c..row + (k + 1) * c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b * l_out, kernel * c]), cols).expect("im2col shape");
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().expect("standard layout");
                let mut d = vec![F::zero(); b * l * c];
                for bi in 0..b {
                    for o in 0..l_out {
                        let row = (bi * l_out + o) * kernel * c;
                        for k in 0..kernel {
                            let pos = o + k * dilation;
                            if pos < padding || pos - padding >= l {
                                continue;
                            }
                            let s = (bi * l + pos - padding) * c;
                            for j in 0..c {
                                d[s + j] += gs[row + k * c + j];
                            }
                        }
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(&[b, l, c]), d).expect("input shape")]
            })),
        )
    }

    /// Batch normalization over the rows of `x[M, C]` using the batch
    /// statistics. Returns the output plus the batch mean and unbiased variance.
    pub fn batchnorm_train(&self, x: Var, gamma: Var, beta: Var, eps: F) -> (Var, ArrayD<F>, ArrayD<F>) {
        let v = self.value(x);
        let xv = as2(&v);
        let m = xv.nrows();
        let mf = F::from_usize(m).expect("rows");
        let mean = xv.mean_axis(Axis(0)).expect("rows");
        let centered = &xv - &mean;
        let var = centered.mapv(|d| d * d).mean_axis(Axis(0)).expect("rows");
        let inv_std = var.mapv(|s| F::one() / (s + eps).sqrt());
        let xhat = Rc::new(&centered * &inv_std);
        let gv = self.value(gamma);
        let out = (&*xhat * &gv.view().into_dimensionality::<ndarray::Ix1>().expect("vector")
            + self.value(beta).view().into_dimensionality::<ndarray::Ix1>().expect("vector"))
            .into_dyn();
        let unbiased = if m > 1 { &var * (mf / (mf - F::one())) } else { var.clone() };
        let keep = xhat.clone();
        let y = self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let gamma1 = gv.view().into_dimensionality::<ndarray::Ix1>().expect("vector");
                let dbeta = g2.sum_axis(Axis(0));
                let dgamma = (&g2 * &*keep).sum_axis(Axis(0));
                let scale = &gamma1 * &inv_std / mf;
                let dx = (&g2 * mf - &dbeta - &*keep * &dgamma) * &scale;
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        );
        (y, mean.into_dyn(), unbiased.into_dyn())
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batchnorm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &ArrayD<F>, var: &ArrayD<F>, eps: F) -> Var {
        let v = self.value(x);
        let inv_std = var.mapv(|s| F::one() / (s + eps).sqrt());
        let xhat = Rc::new((&as2(&v) - mean) * &inv_std);
        let gv = self.value(gamma);
        let out = &*xhat * &*gv + &*self.value(beta);
        let keep = xhat.clone();
        self.push(
            out.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let dbeta = g2.sum_axis(Axis(0)).into_dyn();
                let dgamma = (&g2 * &*keep).sum_axis(Axis(0)).into_dyn();
                let dx = (&g2 * &(&*gv * &inv_std)).into_dyn();
                vec![dx, dgamma, dbeta]
            })),
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against targets `y`.
    pub fn bce(&self, p: Var, y: &ArrayD<F>) -> Var {
        let pv = self.value(p);
        let y = y.clone();
        let n = F::from_usize(pv.len()).expect("length");
        let loss = Zip::from(&*pv).and(&y).fold(F::zero(), |acc, &p, &t| {
            acc - (t * p.ln() + (F::one() - t) * (F::one() - p).ln())
        }) / n;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![p.0],
            Some(Box::new(move |g| {
                let s = g[[]] / n;
                let mut d = ArrayD::zeros(pv.raw_dim());
                Zip::from(&mut d).and(&*pv).and(&y).for_each(|d, &p, &t| *d = s * (p - t) / (p * (F::one() - p)));
                vec![d]
            })),
        )
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `y`, evaluated stably from the logits.
    pub fn bce_with_logits(&self, z: Var, y: &ArrayD<F>) -> Var {
        let zv = self.value(z);
        let y = y.clone();
        let n = F::from_usize(zv.len()).expect("length");
        let loss = Zip::from(&*zv).and(&y).fold(F::zero(), |acc, &z, &t| {
            acc + z.max(F::zero()) - z * t + (-z.abs()).exp().ln_1p()
        }) / n;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![z.0],
            Some(Box::new(move |g| {
                let s = g[[]] / n;
                let mut d = ArrayD::zeros(zv.raw_dim());
                Zip::from(&mut d).and(&*zv).and(&y).for_each(|d, &z, &t| *d = s * (sigmoid(z) - t));
                vec![d]
            })),
        )
    }
}

fn spread<F: Float>(g: &ArrayD<F>, shape: &[usize], axis: usize, n: usize) -> ArrayD<F> {
    let inv = F::one() / F::from_usize(n).expect("length");
    let expanded = g.view().insert_axis(Axis(axis));
    let b = expanded.broadcast(IxDyn(shape)).expect("broadcast back");
    b.mapv(|x| x * inv)
}

pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
