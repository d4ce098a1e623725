//! Arena-style tape. Every operation appends a node holding its output value
//! and the handles of its inputs, so node order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Minimum norm accepted by [`Graph::cosine`].
pub const MIN_NORM: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through the output `y`. ReLU uses 0 at the kink.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv1x1 {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Activation {
        input: usize,
        kind: Activation,
    },
    SoftmaxFlat {
        input: usize,
    },
    WeightedSpatialSum {
        features: usize,
        weights: usize,
    },
    MeanPoolSpatial {
        input: usize,
    },
    BroadcastSpatial {
        input: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Column {
        matrix: usize,
        index: usize,
    },
    Row {
        matrix: usize,
        index: usize,
    },
    Cosine {
        u: usize,
        v: usize,
        norm_u: T,
        norm_v: T,
    },
    AddScalar {
        input: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Sum {
        input: usize,
    },
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// A single-use computation record. Build one per forward pass, call
/// [`Graph::backward`] on a scalar, then drop it.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Option<ParamsInfo>,
    check_finite: bool,
}

#[derive(Debug)]
struct ParamsInfo {
    shapes: Vec<Vec<usize>>,
    trainable: Vec<bool>,
}

/// Leaf handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: None,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the finiteness check run after every operation.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index].value.shape()
    }

    /// Records every parameter of `store` as a leaf. Must be called at most
    /// once per graph.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Result<Bound> {
        if self.params.is_some() {
            return Err(Error::Contract("graph already has bound parameters".into()));
        }
        let mut vars = Vec::with_capacity(store.len());
        let mut shapes = Vec::with_capacity(store.len());
        let mut trainable = Vec::with_capacity(store.len());
        for (id, p) in store.iter() {
            vars.push(self.push_raw(p.tensor.clone(), Op::Leaf, Some(id)));
            shapes.push(p.tensor.shape().to_vec());
            trainable.push(p.trainable);
        }
        self.params = Some(ParamsInfo { shapes, trainable });
        Ok(Bound { vars })
    }

    /// Records a tensor that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, None)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, param });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_raw(value, op, None))
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(
                "tensor is detached from this graph".to_string(),
            ));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// Pointwise 1x1 convolution: `out[o, j] = sum_c kernel[o, c] * input[c, j] (+ bias[o])`.
    pub fn conv_1x1(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (i, k) = (self.idx(input)?, self.idx(kernel)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let value = kernels::conv_1x1(self.val(i), self.val(k), b.map(|b| self.val(b)))?;
        self.push(
            "conv_1x1",
            value,
            Op::Conv1x1 {
                input: i,
                kernel: k,
                bias: b,
            },
        )
    }

    /// Square-kernel 2-D convolution with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (i, k) = (self.idx(input)?, self.idx(kernel)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let value = kernels::conv2d(
            self.val(i),
            self.val(k),
            b.map(|b| self.val(b)),
            stride,
            padding,
        )?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input: i,
                kernel: k,
                bias: b,
                stride,
                padding,
            },
        )
    }

    /// Affine map `weight * input (+ bias)` on a vector.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let value = kernels::linear(self.val(i), self.val(w), b.map(|b| self.val(b)))?;
        self.push(
            "fully_connected",
            value,
            Op::Linear {
                input: i,
                weight: w,
                bias: b,
            },
        )
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.val(i).map(|x| kind.apply(x));
        self.push("activation", value, Op::Activation { input: i, kind })
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Tanh)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Softmax over all locations of a `1 x h x w` score map; returns `h x w`.
    pub fn softmax_flat(&mut self, scores: Var) -> Result<Var> {
        let i = self.idx(scores)?;
        let value = kernels::softmax_flat(self.val(i))?;
        self.push("softmax_flat", value, Op::SoftmaxFlat { input: i })
    }

    /// `out[k] = sum_j weights[j] * features[k, j]`.
    pub fn weighted_spatial_sum(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (f, w) = (self.idx(features)?, self.idx(weights)?);
        let value = kernels::weighted_spatial_sum(self.val(f), self.val(w))?;
        self.push(
            "weighted_spatial_sum",
            value,
            Op::WeightedSpatialSum {
                features: f,
                weights: w,
            },
        )
    }

    pub fn mean_pool_spatial(&mut self, features: Var) -> Result<Var> {
        let i = self.idx(features)?;
        let value = kernels::mean_pool_spatial(self.val(i))?;
        self.push("mean_pool_spatial", value, Op::MeanPoolSpatial { input: i })
    }

    /// Repeats a length-`c` vector over an `h x w` grid.
    pub fn broadcast_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let v = self.val(i);
        if v.rank() != 1 {
            return Err(Error::dim("broadcast_spatial", v.shape(), &[h, w]));
        }
        let c = v.len();
        let mut data = Vec::with_capacity(c * h * w);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, h * w));
        }
        let value = Tensor::new(vec![c, h, w], data)?;
        self.push(
            "broadcast_spatial",
            value,
            Op::BroadcastSpatial { input: i },
        )
    }

    /// Hadamard product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = kernels::zip("mul", self.val(ia), self.val(ib), |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a: ia, b: ib })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = kernels::zip("add", self.val(ia), self.val(ib), |x, y| x + y)?;
        self.push("add", value, Op::Add { a: ia, b: ib })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = kernels::zip("sub", self.val(ia), self.val(ib), |x, y| x - y)?;
        self.push("sub", value, Op::Sub { a: ia, b: ib })
    }

    /// Joins along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = kernels::concat(self.val(ia), self.val(ib))?;
        self.push("concat", value, Op::Concat { a: ia, b: ib })
    }

    /// Column `index` of a matrix; equal to `matrix * onehot(index)`.
    pub fn column(&mut self, matrix: Var, index: usize) -> Result<Var> {
        let m = self.idx(matrix)?;
        let t = self.val(m);
        if t.rank() != 2 {
            return Err(Error::dim("column", t.shape(), &[index]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if index >= cols {
            return Err(Error::Vocabulary { index, n: cols });
        }
        let data = (0..rows).map(|r| t.data()[r * cols + index]).collect();
        self.push(
            "column",
            Tensor::vector(data),
            Op::Column { matrix: m, index },
        )
    }

    /// Row `index` of a matrix.
    pub fn row(&mut self, matrix: Var, index: usize) -> Result<Var> {
        let m = self.idx(matrix)?;
        let t = self.val(m);
        if t.rank() != 2 {
            return Err(Error::dim("row", t.shape(), &[index]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if index >= rows {
            return Err(Error::Vocabulary { index, n: rows });
        }
        let data = t.data()[index * cols..(index + 1) * cols].to_vec();
        self.push("row", Tensor::vector(data), Op::Row { matrix: m, index })
    }

    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let (iu, iv) = (self.idx(u)?, self.idx(v)?);
        let (tu, tv) = (self.val(iu), self.val(iv));
        if tu.shape() != tv.shape() || tu.rank() != 1 {
            return Err(Error::dim("cosine_similarity", tu.shape(), tv.shape()));
        }
        let (dot, nu, nv) = kernels::dot_norms(tu.data(), tv.data());
        for n in [nu, nv] {
            if n.to_f64().unwrap_or(0.0) < MIN_NORM {
                return Err(Error::DegenerateVector {
                    norm: n.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        let value = Tensor::scalar(dot / (nu * nv));
        self.push(
            "cosine_similarity",
            value,
            Op::Cosine {
                u: iu,
                v: iv,
                norm_u: nu,
                norm_v: nv,
            },
        )
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.val(i).map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar { input: i })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.val(i).map(|x| x * factor);
        self.push("scale", value, Op::Scale { input: i, factor })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let s: T = self.val(i).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { input: i })
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per bound
    /// trainable parameter; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.val(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::filled(self.val(root).shape(), T::one()));

        for n in (0..=root).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            if matches!(node.op, Op::Leaf) {
                grads[n] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let Some(info) = &self.params else {
            return Ok(Gradients { grads: Vec::new() });
        };
        let mut out: Vec<Option<Tensor<T>>> = info
            .shapes
            .iter()
            .zip(&info.trainable)
            .map(|(s, &t)| t.then(|| Tensor::zeros(s)))
            .collect();
        for (n, node) in self.nodes.iter().enumerate().take(root + 1) {
            if let (Some(id), Some(g)) = (node.param, grads[n].take()) {
                if let Some(slot) = out[id.index()].as_mut() {
                    *slot = g;
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::Conv1x1 {
                input,
                kernel,
                bias,
            } => {
                let (di, dk, db) = kernels::conv_1x1_backward(self.val(input), self.val(kernel), g);
                accumulate(grads, input, di)?;
                accumulate(grads, kernel, dk)?;
                if let Some(b) = bias {
                    accumulate(grads, b, db)?;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (di, dk, db) =
                    kernels::conv2d_backward(self.val(input), self.val(kernel), g, stride, padding);
                accumulate(grads, input, di)?;
                accumulate(grads, kernel, dk)?;
                if let Some(b) = bias {
                    accumulate(grads, b, db)?;
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.val(input);
                let w = self.val(weight);
                let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
                let mut dx = vec![T::zero(); d_in];
                let mut dw = vec![T::zero(); d_out * d_in];
                for o in 0..d_out {
                    let go = g.data()[o];
                    let row = &w.data()[o * d_in..(o + 1) * d_in];
                    let drow = &mut dw[o * d_in..(o + 1) * d_in];
                    for k in 0..d_in {
                        dx[k] = dx[k] + go * row[k];
                        drow[k] = go * x.data()[k];
                    }
                }
                accumulate(grads, input, Tensor::new(x.shape().to_vec(), dx)?)?;
                accumulate(grads, weight, Tensor::new(w.shape().to_vec(), dw)?)?;
                if let Some(b) = bias {
                    accumulate(grads, b, g.clone())?;
                }
            }
            Op::Activation { input, kind } => {
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * kind.derivative_from_output(yi))
                    .collect();
                accumulate(grads, input, Tensor::new(y.shape().to_vec(), data)?)?;
            }
            Op::SoftmaxFlat { input } => {
                let dot: T = g.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| yi * (gi - dot))
                    .collect();
                let shape = self.val(input).shape().to_vec();
                accumulate(grads, input, Tensor::new(shape, data)?)?;
            }
            Op::WeightedSpatialSum { features, weights } => {
                let f = self.val(features);
                let w = self.val(weights);
                let hw = w.len();
                let c = f.shape()[0];
                let mut df = vec![T::zero(); c * hw];
                let mut dw = vec![T::zero(); hw];
                for k in 0..c {
                    let gk = g.data()[k];
                    let frow = &f.data()[k * hw..(k + 1) * hw];
                    let dfrow = &mut df[k * hw..(k + 1) * hw];
                    for j in 0..hw {
                        dfrow[j] = gk * w.data()[j];
                        dw[j] = dw[j] + gk * frow[j];
                    }
                }
                accumulate(grads, features, Tensor::new(f.shape().to_vec(), df)?)?;
                accumulate(grads, weights, Tensor::new(w.shape().to_vec(), dw)?)?;
            }
            Op::MeanPoolSpatial { input } => {
                let x = self.val(input);
                let hw = x.len() / x.shape()[0];
                let inv = T::one() / lit::<T>(hw as f64);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gk| std::iter::repeat_n(gk * inv, hw))
                    .collect();
                accumulate(grads, input, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::BroadcastSpatial { input } => {
                let c = self.val(input).len();
                let hw = g.len() / c;
                let data = (0..c)
                    .map(|k| g.data()[k * hw..(k + 1) * hw].iter().copied().sum())
                    .collect();
                accumulate(grads, input, Tensor::vector(data))?;
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.val(a), self.val(b));
                let da = kernels::zip("mul", g, tb, |x, y| x * y)?;
                let db = kernels::zip("mul", g, ta, |x, y| x * y)?;
                accumulate(grads, a, da)?;
                accumulate(grads, b, db)?;
            }
            Op::Add { a, b } => {
                accumulate(grads, a, g.clone())?;
                accumulate(grads, b, g.clone())?;
            }
            Op::Sub { a, b } => {
                accumulate(grads, a, g.clone())?;
                accumulate(grads, b, g.map(|x| -x))?;
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
                let na = self.val(a).len();
                accumulate(grads, a, Tensor::new(sa, g.data()[..na].to_vec())?)?;
                accumulate(grads, b, Tensor::new(sb, g.data()[na..].to_vec())?)?;
            }
            Op::Column { matrix, index } => {
                let shape = self.val(matrix).shape().to_vec();
                let cols = shape[1];
                let mut d = Tensor::zeros(&shape);
                for (r, &gr) in g.data().iter().enumerate() {
                    d.data_mut()[r * cols + index] = gr;
                }
                accumulate(grads, matrix, d)?;
            }
            Op::Row { matrix, index } => {
                let shape = self.val(matrix).shape().to_vec();
                let cols = shape[1];
                let mut d = Tensor::zeros(&shape);
                d.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(g.data());
                accumulate(grads, matrix, d)?;
            }
            Op::Cosine {
                u,
                v,
                norm_u,
                norm_v,
            } => {
                let (tu, tv) = (self.val(u), self.val(v));
                let c = y.item();
                let go = g.item();
                let inv = T::one() / (norm_u * norm_v);
                let cu = c / (norm_u * norm_u);
                let cv = c / (norm_v * norm_v);
                let du = tu
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(&a, &b)| go * (b * inv - a * cu))
                    .collect();
                let dv = tu
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(&a, &b)| go * (a * inv - b * cv))
                    .collect();
                accumulate(grads, u, Tensor::new(tu.shape().to_vec(), du)?)?;
                accumulate(grads, v, Tensor::new(tv.shape().to_vec(), dv)?)?;
            }
            Op::AddScalar { input } => accumulate(grads, input, g.clone())?,
            Op::Scale { input, factor } => accumulate(grads, input, g.map(|x| x * factor))?,
            Op::Sum { input } => {
                let shape = self.val(input).shape().to_vec();
                accumulate(grads, input, Tensor::filled(&shape, g.item()))?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], at: usize, g: Tensor<T>) -> Result<()> {
    match &mut grads[at] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Forward kernels shared by the graph and by direct (tape-free) callers.
pub mod kernels {
    use super::*;

    pub fn conv_1x1<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if input.rank() != 3 || kernel.rank() != 2 || kernel.shape()[1] != input.shape()[0] {
            return Err(Error::dim("conv_1x1", input.shape(), kernel.shape()));
        }
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let c_out = kernel.shape()[0];
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::dim("conv_1x1 bias", b.shape(), &[c_out]));
            }
        }
        let hw = h * w;
        let mut out = vec![T::zero(); c_out * hw];
        for o in 0..c_out {
            let orow = &mut out[o * hw..(o + 1) * hw];
            if let Some(b) = bias {
                orow.fill(b.data()[o]);
            }
            for k in 0..c {
                let wk = kernel.data()[o * c + k];
                let irow = &input.data()[k * hw..(k + 1) * hw];
                for (dst, &src) in orow.iter_mut().zip(irow) {
                    *dst = *dst + wk * src;
                }
            }
        }
        Tensor::new(vec![c_out, h, w], out)
    }

    pub(crate) fn conv_1x1_backward<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let c = input.shape()[0];
        let hw = input.len() / c;
        let c_out = kernel.shape()[0];
        let mut di = vec![T::zero(); c * hw];
        let mut dk = vec![T::zero(); c_out * c];
        let mut db = vec![T::zero(); c_out];
        for o in 0..c_out {
            let grow = &g.data()[o * hw..(o + 1) * hw];
            db[o] = grow.iter().copied().sum();
            for k in 0..c {
                let wk = kernel.data()[o * c + k];
                let irow = &input.data()[k * hw..(k + 1) * hw];
                let dirow = &mut di[k * hw..(k + 1) * hw];
                let mut acc = T::zero();
                for j in 0..hw {
                    dirow[j] = dirow[j] + wk * grow[j];
                    acc = acc + grow[j] * irow[j];
                }
                dk[o * c + k] = acc;
            }
        }
        (
            Tensor::new(input.shape().to_vec(), di).unwrap(),
            Tensor::new(kernel.shape().to_vec(), dk).unwrap(),
            Tensor::vector(db),
        )
    }

    fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        (size + 2 * padding)
            .checked_sub(k)
            .map(|v| v / stride + 1)
            .filter(|_| stride > 0)
    }

    /// Output positions whose kernel tap `k` lands inside the input.
    fn valid_outputs(
        k: usize,
        stride: usize,
        padding: usize,
        size: usize,
        out: usize,
    ) -> Range<usize> {
        let first = padding.saturating_sub(k).div_ceil(stride);
        let last = (size + padding)
            .checked_sub(k + 1)
            .map_or(0, |span| span / stride + 1);
        first.min(out)..last.min(out).max(first.min(out))
    }

    pub fn conv2d<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        if input.rank() != 3 || kernel.rank() != 4 || kernel.shape()[1] != input.shape()[0] {
            return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
        }
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let (Some(ho), Some(wo)) = (
            conv_out(h, kh, stride, padding),
            conv_out(w, kw, stride, padding),
        ) else {
            return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
        };
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::dim("conv2d bias", b.shape(), &[co]));
            }
        }
        let x = input.data();
        let k = kernel.data();
        let mut out = vec![T::zero(); co * ho * wo];
        for o in 0..co {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            if let Some(b) = bias {
                plane.fill(b.data()[o]);
            }
            for c in 0..ci {
                let xin = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = k[((o * ci + c) * kh + ky) * kw + kx];
                        let cols = valid_outputs(kx, stride, padding, w, wo);
                        for oy in valid_outputs(ky, stride, padding, h, ho) {
                            let iy = oy * stride + ky - padding;
                            let xrow = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for ox in cols.clone() {
                                orow[ox] = orow[ox] + wv * xrow[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![co, ho, wo], out)
    }

    pub(crate) fn conv2d_backward<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        g: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let (ho, wo) = (g.shape()[1], g.shape()[2]);
        let x = input.data();
        let k = kernel.data();
        let mut dx = vec![T::zero(); x.len()];
        let mut dk = vec![T::zero(); k.len()];
        let mut db = vec![T::zero(); co];
        for (o, bias_grad) in db.iter_mut().enumerate() {
            let gplane = &g.data()[o * ho * wo..(o + 1) * ho * wo];
            *bias_grad = gplane.iter().copied().sum();
            for c in 0..ci {
                let xin = &x[c * h * w..(c + 1) * h * w];
                let dxin = &mut dx[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((o * ci + c) * kh + ky) * kw + kx;
                        let wv = k[widx];
                        let mut acc = T::zero();
                        let cols = valid_outputs(kx, stride, padding, w, wo);
                        for oy in valid_outputs(ky, stride, padding, h, ho) {
                            let base = (oy * stride + ky - padding) * w;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            for ox in cols.clone() {
                                let gv = grow[ox];
                                let at = base + ox * stride + kx - padding;
                                acc = acc + gv * xin[at];
                                dxin[at] = dxin[at] + gv * wv;
                            }
                        }
                        dk[widx] = acc;
                    }
                }
            }
        }
        (
            Tensor::new(input.shape().to_vec(), dx).unwrap(),
            Tensor::new(kernel.shape().to_vec(), dk).unwrap(),
            Tensor::vector(db),
        )
    }

    pub fn linear<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if input.rank() != 1 || weight.rank() != 2 || weight.shape()[1] != input.len() {
            return Err(Error::dim("fully_connected", input.shape(), weight.shape()));
        }
        let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(Error::dim("fully_connected bias", b.shape(), &[d_out]));
            }
        }
        let out = (0..d_out)
            .map(|o| {
                let row = &weight.data()[o * d_in..(o + 1) * d_in];
                let dot = row
                    .iter()
                    .zip(input.data())
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                match bias {
                    Some(b) => dot + b.data()[o],
                    None => dot,
                }
            })
            .collect();
        Ok(Tensor::vector(out))
    }

    pub fn softmax_flat<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
        if scores.rank() != 3 || scores.shape()[0] != 1 || scores.is_empty() {
            return Err(Error::dim("softmax_flat", scores.shape(), &[1, 0, 0]));
        }
        let (h, w) = (scores.shape()[1], scores.shape()[2]);
        let max = scores
            .data()
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = scores.data().iter().map(|&s| (s - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        Tensor::new(vec![h, w], exps.into_iter().map(|e| e / total).collect())
    }

    pub fn weighted_spatial_sum<T: Scalar>(
        features: &Tensor<T>,
        weights: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if features.rank() != 3 || weights.rank() != 2 || features.shape()[1..] != *weights.shape()
        {
            return Err(Error::dim(
                "weighted_spatial_sum",
                features.shape(),
                weights.shape(),
            ));
        }
        Ok(Tensor::vector(spatial_dot(features, weights.data())))
    }

    /// Uses the same accumulation order as [`weighted_spatial_sum`] with
    /// uniform `1/(h*w)` weights, so the two agree bitwise.
    pub fn mean_pool_spatial<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
        if features.rank() != 3 || features.is_empty() {
            return Err(Error::dim(
                "mean_pool_spatial",
                features.shape(),
                &[0, 1, 1],
            ));
        }
        let hw = features.shape()[1] * features.shape()[2];
        let uniform = vec![T::one() / lit::<T>(hw as f64); hw];
        Ok(Tensor::vector(spatial_dot(features, &uniform)))
    }

    fn spatial_dot<T: Scalar>(features: &Tensor<T>, weights: &[T]) -> Vec<T> {
        let hw = weights.len();
        features
            .data()
            .chunks_exact(hw)
            .map(|row| {
                row.iter()
                    .zip(weights)
                    .fold(T::zero(), |acc, (&f, &w)| acc + w * f)
            })
            .collect()
    }

    pub fn zip<T: Scalar>(
        op: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::dim(op, a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.rank() == 0 || a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
            return Err(Error::dim("concat", a.shape(), b.shape()));
        }
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        Tensor::new(shape, data)
    }

    pub(crate) fn dot_norms<T: Scalar>(u: &[T], v: &[T]) -> (T, T, T) {
        let (mut dot, mut uu, mut vv) = (T::zero(), T::zero(), T::zero());
        for (&a, &b) in u.iter().zip(v) {
            dot = dot + a * b;
            uu = uu + a * a;
            vv = vv + b * b;
        }
        (dot, uu.sqrt(), vv.sqrt())
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
        if u.len() != v.len() {
            return Err(Error::dim("cosine_similarity", &[u.len()], &[v.len()]));
        }
        let (dot, nu, nv) = dot_norms(u, v);
        for n in [nu, nv] {
            if n.to_f64().unwrap_or(0.0) < MIN_NORM {
                return Err(Error::DegenerateVector {
                    norm: n.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(dot / (nu * nv))
    }
}
