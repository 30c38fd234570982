//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! pushes a node holding its output value plus whatever it needs for the
//! backward pass, and returns a [`Var`] handle. Because a node can only refer
//! to nodes created before it, the tape is always in topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Graphs are rebuilt for every forward pass. Parameters enter the tape
//! through [`Graph::param`], which caches one leaf per [`ParamId`] so a weight
//! used at every timestep of a recurrence accumulates a single gradient.

mod backward;
pub(crate) mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

pub use backward::Gradients;

use kernels::{at, broadcast_map, im2col, ConvGeom, broadcast_shapes, gemm_nn, gemm_nt, operand_map, strided_map};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where a convex gate mix sits in the network. Only used to target
/// deliberate faults in mutation tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixSite {
    Generic,
    Integration,
    UpdateGate,
    Bank,
}

/// Deliberate backward-pass corruption, used to prove the gradient checker
/// catches real bugs.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the gate gradient of the hidden-state update mix.
    FlipUpdateGateGrad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Lerp {
        gate: Var,
        a: Var,
        b: Var,
        maps: [Option<Vec<usize>>; 3],
        site: MixSite,
    },
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    TemporalConv {
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Sum {
        x: Var,
        map: Vec<usize>,
        scale: T,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        map: Vec<usize>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    fault: Option<Fault>,
    freeze_params: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            fault: None,
            freeze_params: false,
        }
    }

    /// A graph whose parameter leaves do not require gradients. Forward
    /// values are identical to [`Graph::new`]; backward bookkeeping is skipped.
    pub fn inference() -> Self {
        Self {
            freeze_params: true,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub(crate) fn fault(&self) -> Option<Fault> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Parameter leaves created on this tape.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(p, v)| (*p, *v))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let needs = !self.freeze_params;
        let v = self.push(store.get(id).clone(), Op::Leaf, needs);
        self.param_vars.insert(id, v);
        v
    }

    /// A gradient-blocking copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ---- linear algebra ----------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            gemm_nt(&mut out, da, db, m, k, n);
        } else {
            gemm_nn(&mut out, da, db, m, k, n);
        }
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, ng))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let nb: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); nb * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..nb {
            let o = &mut out[bi * m * n..(bi + 1) * m * n];
            let x = &da[bi * m * k..(bi + 1) * m * k];
            let y = &db[bi * k * n..(bi + 1) * k * n];
            if trans_b {
                gemm_nt(o, x, y, m, k, n);
            } else {
                gemm_nn(o, x, y, m, k, n);
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, ng))
    }

    /// Batched `a[..×m×k] · b[..×k×n]` with identical leading dimensions.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[..×m×k] · b[..×n×k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    /// `x[..×in] · w[out×in]ᵀ` — a bias-free linear map applied to the last axis.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return Err(shape_err("linear", &sx, &sw));
        }
        if sx.len() == 2 {
            return self.matmul_nt(x, w);
        }
        let d_in = sx[sx.len() - 1];
        let rows = numel(&sx) / d_in;
        let flat = self.reshape(x, &[rows, d_in])?;
        let y = self.matmul_nt(flat, w)?;
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = sw[0];
        self.reshape(y, &out_shape)
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shapes(sa, sb).ok_or_else(|| shape_err("elementwise", sa, sb))?;
        let map_a = operand_map(sa, &out_shape);
        let map_b = operand_map(sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<T> = if map_a.is_none() && map_b.is_none() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[at(&map_a, i)], db[at(&map_b, i)])).collect()
        };
        let value = Tensor::new(out_shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            ng,
        ))
    }

    /// Elementwise sum with same-rank broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale { x, factor }, ng)
    }

    /// Convex gate mix `gate ⊗ a + (1 − gate) ⊗ b`, broadcasting all three.
    pub fn lerp(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        self.lerp_at(gate, a, b, MixSite::Generic)
    }

    pub fn lerp_at(&mut self, gate: Var, a: Var, b: Var, site: MixSite) -> Result<Var> {
        let (sz, sa, sb) = (self.shape(gate), self.shape(a), self.shape(b));
        let s1 = broadcast_shapes(sz, sa).ok_or_else(|| shape_err("lerp", sz, sa))?;
        let out_shape = broadcast_shapes(&s1, sb).ok_or_else(|| shape_err("lerp", &s1, sb))?;
        let maps = [
            operand_map(sz, &out_shape),
            operand_map(sa, &out_shape),
            operand_map(sb, &out_shape),
        ];
        let (dz, da, db) = (
            self.value(gate).data(),
            self.value(a).data(),
            self.value(b).data(),
        );
        let out: Vec<T> = (0..numel(&out_shape))
            .map(|i| {
                let z = dz[at(&maps[0], i)];
                z * da[at(&maps[1], i)] + (T::one() - z) * db[at(&maps[2], i)]
            })
            .collect();
        let value = Tensor::new(out_shape, out)?;
        let ng = self.ng(&[gate, a, b]);
        Ok(self.push(
            value,
            Op::Lerp {
                gate,
                a,
                b,
                maps,
                site,
            },
            ng,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(value, Op::Tanh(x), ng)
    }

    // ---- normalisation and probabilities ------------------------------

    /// Layer normalisation over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(Error::EmptyAxis { op: "layer_norm" })?;
        if d == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &sx, self.shape(gain)));
        }
        let rows = numel(&sx) / d;
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(sx, out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Numerically stabilised softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(Error::EmptyAxis { op: "softmax" })?;
        if d == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let out = softmax_rows(self.value(x).data(), d);
        let value = Tensor::new(sx, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", &sl, &[labels.len()]));
        }
        let (rows, classes) = (sl[0], sl[1]);
        if classes == 0 || rows == 0 {
            return Err(Error::EmptyAxis {
                op: "softmax_cross_entropy",
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let z = self.value(logits).data();
        let probs = softmax_rows(z, classes);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - (row[label] - max);
        }
        let loss = total / T::from_usize(rows).unwrap();
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ---- convolution ----------------------------------------------------

    /// Convolution along the temporal axis of `x[B×C_in×T×h×w]` with kernel
    /// `weight[C_out×C_in×k]`, no padding. Spatial axes are untouched.
    pub fn temporal_conv(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 5 || sw.len() != 3 || sx[1] != sw[1] || self.shape(bias) != [sw[0]] {
            return Err(shape_err("temporal_conv", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::config("conv-stride", "stride must be positive"));
        }
        let (bsz, cin, t, s) = (sx[0], sx[1], sx[2], sx[3] * sx[4]);
        let (cout, k) = (sw[0], sw[2]);
        if t < k {
            return Err(Error::SequenceTooShort {
                frames: t,
                min: k,
                context: "temporal convolution",
            });
        }
        let t_out = (t - k) / stride + 1;
        let geom = ConvGeom {
            cin,
            t,
            s,
            k,
            stride,
            t_out,
        };
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let bs = self.value(bias).data();
        let n = geom.cols();
        let mut out = vec![T::zero(); bsz * cout * n];
        let mut cols = vec![T::zero(); geom.rows() * n];
        for b in 0..bsz {
            im2col(&xs[b * cin * t * s..(b + 1) * cin * t * s], geom, &mut cols);
            let ob = &mut out[b * cout * n..(b + 1) * cout * n];
            for (o, row) in ob.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v = bs[o]);
            }
            gemm_nn(ob, ws, &cols, cout, geom.rows(), n);
        }
        let value = Tensor::new(vec![bsz, cout, t_out, sx[3], sx[4]], out)?;
        let ng = self.ng(&[x, weight, bias]);
        Ok(self.push(
            value,
            Op::TemporalConv {
                x,
                weight,
                bias,
                stride,
            },
            ng,
        ))
    }

    // ---- reductions -----------------------------------------------------

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool, op: &'static str) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut keep = sx.clone();
        let mut count = 1usize;
        for &ax in axes {
            if ax >= sx.len() {
                return Err(Error::Axis {
                    op,
                    axis: ax,
                    rank: sx.len(),
                });
            }
            if sx[ax] == 0 {
                return Err(Error::EmptyAxis { op });
            }
            count *= sx[ax];
            keep[ax] = 1;
        }
        if axes.is_empty() {
            return Err(Error::EmptyAxis { op });
        }
        let map = broadcast_map(&keep, &sx);
        let mut out = vec![T::zero(); numel(&keep)];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        let scale = if mean {
            T::one() / T::from_usize(count).unwrap()
        } else {
            T::one()
        };
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let out_shape: Vec<usize> = sx
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let value = Tensor::new(out_shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Sum { x, map, scale }, ng))
    }

    /// Sum over `axes`, removing them from the shape.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false, "sum")
    }

    /// Arithmetic mean over `axes`, removing them from the shape.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true, "mean_pool")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.sum_axes(x, &axes)
    }

    // ---- structural -----------------------------------------------------

    /// Order-preserving concatenation along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(Error::EmptyAxis { op: "concat" })?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let ng = self.ng(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: sx.len(),
            });
        }
        if start + len > sx[axis] {
            return Err(shape_err("slice", &sx, &[start, len]));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sx[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, ng))
    }

    /// Element `index` along `axis`, with the axis removed.
    pub fn index_axis(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.slice(x, axis, index, 1)?;
        let mut shape = self.shape(s).to_vec();
        shape.remove(axis);
        self.reshape(s, &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    fn gather(&mut self, x: Var, out_shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let out = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(out_shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Gather { x, map }, ng))
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len() || axes.iter().any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &sx, axes));
        }
        let st = strides(&sx);
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let src: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
        let map = strided_map(&out_shape, &src);
        self.gather(x, out_shape, map)
    }

    /// Same-rank broadcast of size-1 axes up to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match broadcast_shapes(&sx, shape) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("broadcast_to", &sx, shape)),
        }
        let map = broadcast_map(&sx, shape);
        self.gather(x, shape.to_vec(), map)
    }

    // ---- gradients --------------------------------------------------------

    pub fn backward(&self, seed: Var) -> Result<Gradients<T>> {
        backward::run(self, seed)
    }

    /// Runs backward from `seed` and adds parameter gradients into `grads`.
    /// Calling it repeatedly without zeroing `grads` accumulates.
    pub fn backward_into(&self, seed: Var, grads: &mut GradStore<T>) -> Result<()> {
        let g = self.backward(seed)?;
        g.accumulate_into(self, grads);
        Ok(())
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Scalar>(z: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); z.len()];
    for (row, dst) in z.chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = T::one() / sum;
        dst.iter_mut().for_each(|o| *o *= inv);
    }
    out
}
