use super::kernels::{at, col2im_add, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::{BinaryKind, Fault, Graph, MixSite, Op, Var};
use crate::error::{Error, Result};
use crate::params::GradStore;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Gradients of a scalar seed with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Raw gradient of `v`, or `None` if the seed does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor shaped like its value (zeros when unreached).
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = graph.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut GradStore<T>) {
        let mut leaves: Vec<_> = graph.param_vars().collect();
        leaves.sort();
        for (pid, var) in leaves {
            if !store.owns(pid) {
                continue;
            }
            if let Some(g) = self.get(var) {
                for (dst, &src) in store.get_mut(pid).iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }
}

fn buf<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], graph: &Graph<T>, v: Var) -> Option<&'a mut Vec<T>> {
    if !graph.nodes[v.0].needs_grad {
        return None;
    }
    let n = graph.nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

pub(super) fn run<T: Scalar>(graph: &Graph<T>, seed: Var) -> Result<Gradients<T>> {
    let seed_shape = graph.shape(seed);
    if numel(seed_shape) != 1 {
        return Err(Error::NonScalarSeed(seed_shape.to_vec()));
    }
    let mut grads: Vec<Option<Vec<T>>> = (0..graph.nodes.len()).map(|_| None).collect();
    if graph.nodes[seed.0].needs_grad {
        grads[seed.0] = Some(vec![T::one()]);
    }
    for i in (0..=seed.0).rev() {
        let node = &graph.nodes[i];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        propagate(graph, i, &g, &mut grads);
        grads[i] = Some(g);
    }
    Ok(Gradients { grads })
}

fn propagate<T: Scalar>(graph: &Graph<T>, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &graph.nodes[i];
    let out = node.value.data();
    let val = |v: Var| graph.nodes[v.0].value.data();
    let shp = |v: Var| graph.nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (sa, sb) = (shp(*a), shp(*b));
            let (m, k) = (sa[0], sa[1]);
            let n = if *trans_b { sb[0] } else { sb[1] };
            if let Some(ga) = buf(grads, graph, *a) {
                if *trans_b {
                    gemm_nn(ga, g, val(*b), m, n, k);
                } else {
                    gemm_nt(ga, g, val(*b), m, n, k);
                }
            }
            if let Some(gb) = buf(grads, graph, *b) {
                if *trans_b {
                    gemm_tn(gb, g, val(*a), n, m, k);
                } else {
                    gemm_tn(gb, val(*a), g, k, m, n);
                }
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (sa, sb) = (shp(*a), shp(*b));
            let r = sa.len();
            let (m, k) = (sa[r - 2], sa[r - 1]);
            let n = if *trans_b { sb[r - 2] } else { sb[r - 1] };
            let nb: usize = sa[..r - 2].iter().product();
            if let Some(ga) = buf(grads, graph, *a) {
                let bv = val(*b);
                for bi in 0..nb {
                    let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                    let gg = &g[bi * m * n..(bi + 1) * m * n];
                    let y = &bv[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        gemm_nn(dst, gg, y, m, n, k);
                    } else {
                        gemm_nt(dst, gg, y, m, n, k);
                    }
                }
            }
            if let Some(gb) = buf(grads, graph, *b) {
                let av = val(*a);
                for bi in 0..nb {
                    let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                    let gg = &g[bi * m * n..(bi + 1) * m * n];
                    let x = &av[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        gemm_tn(dst, gg, x, n, m, k);
                    } else {
                        gemm_tn(dst, x, gg, k, m, n);
                    }
                }
            }
        }
        Op::Binary {
            kind,
            a,
            b,
            map_a,
            map_b,
        } => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = buf(grads, graph, *a) {
                for (idx, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gi,
                        BinaryKind::Mul => gi * vb[at(map_b, idx)],
                    };
                    ga[at(map_a, idx)] += d;
                }
            }
            if let Some(gb) = buf(grads, graph, *b) {
                for (idx, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * va[at(map_a, idx)],
                    };
                    gb[at(map_b, idx)] += d;
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = buf(grads, graph, *x) {
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi * *factor;
                }
            }
        }
        Op::Lerp {
            gate,
            a,
            b,
            maps,
            site,
        } => {
            let (vz, va, vb) = (val(*gate), val(*a), val(*b));
            let flip = *site == MixSite::UpdateGate && graph.fault() == Some(Fault::FlipUpdateGateGrad);
            if let Some(gz) = buf(grads, graph, *gate) {
                for (idx, &gi) in g.iter().enumerate() {
                    let d = gi * (va[at(&maps[1], idx)] - vb[at(&maps[2], idx)]);
                    gz[at(&maps[0], idx)] += if flip { -d } else { d };
                }
            }
            if let Some(ga) = buf(grads, graph, *a) {
                for (idx, &gi) in g.iter().enumerate() {
                    ga[at(&maps[1], idx)] += gi * vz[at(&maps[0], idx)];
                }
            }
            if let Some(gb) = buf(grads, graph, *b) {
                for (idx, &gi) in g.iter().enumerate() {
                    gb[at(&maps[2], idx)] += gi * (T::one() - vz[at(&maps[0], idx)]);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = buf(grads, graph, *x) {
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (T::one() - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = buf(grads, graph, *x) {
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * (T::one() - y * y);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *shp(*gain).first().unwrap();
            let rows = rstd.len();
            let gv = val(*gain);
            if let Some(gg) = buf(grads, graph, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = buf(grads, graph, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gx) = buf(grads, graph, *x) {
                let inv_d = T::one() / T::from_usize(d).unwrap();
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        gx[r * d + j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(gx) = buf(grads, graph, *x) {
                let d = *shp(*x).last().unwrap();
                for ((dst, gr), y) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let dot: T = gr.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dst[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(gl) = buf(grads, graph, *logits) {
                let rows = labels.len();
                let c = probs.len() / rows;
                let scale = g[0] / T::from_usize(rows).unwrap();
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == label { T::one() } else { T::zero() };
                        gl[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            }
        }
        Op::TemporalConv {
            x,
            weight,
            bias,
            stride,
        } => {
            let sx = shp(*x);
            let sw = shp(*weight);
            let (bsz, cin, t, s) = (sx[0], sx[1], sx[2], sx[3] * sx[4]);
            let (cout, k) = (sw[0], sw[2]);
            let t_out = (t - k) / stride + 1;
            let stride = *stride;
            if let Some(gbias) = buf(grads, graph, *bias) {
                for b in 0..bsz {
                    for o in 0..cout {
                        let blk = &g[(b * cout + o) * t_out * s..(b * cout + o + 1) * t_out * s];
                        gbias[o] += blk.iter().copied().sum::<T>();
                    }
                }
            }
let geom = ConvGeom {
                cin,
                t,
                s,
                k,
                stride,
                t_out,
            };
            let n = geom.cols();
            let xs = val(*x);
            if let Some(gw) = buf(grads, graph, *weight) {
                let mut cols = vec![T::zero(); geom.rows() * n];
                for b in 0..bsz {
                    im2col(&xs[b * cin * t * s..(b + 1) * cin * t * s], geom, &mut cols);
                    gemm_nt(gw, &g[b * cout * n..(b + 1) * cout * n], &cols, cout, n, geom.rows());
                }
            }
            if let Some(gx) = buf(grads, graph, *x) {
                let ws = val(*weight);
                let mut gcols = vec![T::zero(); geom.rows() * n];
                for b in 0..bsz {
                    gcols.iter_mut().for_each(|v| *v = T::zero());
                    gemm_tn(&mut gcols, ws, &g[b * cout * n..(b + 1) * cout * n], geom.rows(), cout, n);
                    col2im_add(&gcols, geom, &mut gx[b * cin * t * s..(b + 1) * cin * t * s]);
                }
            }
        }
        Op::Sum { x, map, scale } => {
            if let Some(gx) = buf(grads, graph, *x) {
                for (d, &o) in gx.iter_mut().zip(map) {
                    *d += g[o] * *scale;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let axis = *axis;
            let first = shp(parts[0]);
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut offset = 0;
            for o in 0..outer {
                for &p in parts {
                    let len = shp(p)[axis] * inner;
                    if let Some(gp) = buf(grads, graph, p) {
                        for (d, &gi) in gp[o * len..(o + 1) * len].iter_mut().zip(&g[offset..offset + len]) {
                            *d += gi;
                        }
                    }
                    offset += len;
                }
            }
        }
        Op::Slice { x, axis, start } => {
            let sx = shp(*x);
            let axis = *axis;
            let outer: usize = sx[..axis].iter().product();
            let inner: usize = sx[axis + 1..].iter().product();
            let len = node.value.shape()[axis];
            let full = sx[axis];
            if let Some(gx) = buf(grads, graph, *x) {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &gi) in gx[base..base + len * inner].iter_mut().zip(src) {
                        *d += gi;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = buf(grads, graph, *x) {
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Gather { x, map } => {
            if let Some(gx) = buf(grads, graph, *x) {
                for (&src, &gi) in map.iter().zip(g) {
                    gx[src] += gi;
                }
            }
        }
    }
}
