//! Small parameterised building blocks shared by the model modules.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], T::one()))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, eps: T) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, eps)
    }
}

/// `x · Wᵀ + b` on the last axis, with `b` broadcast over leading axes.
pub fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.linear(x, w)?;
    let rank = g.shape(y).len();
    let d = g.shape(b)[0];
    let mut bshape = vec![1; rank];
    bshape[rank - 1] = d;
    let b = g.reshape(b, &bshape)?;
    g.add(y, b)
}

/// Projection weights of one multi-head attention layer. Each map is
/// `d × d` with a bias; heads split the projected width evenly.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    /// `B × L_q × d`
    pub output: Var,
    /// `B × H × L_q × L_k`, rows sum to one.
    pub weights: Var,
}

impl MhaParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut mat = |store: &mut ParamStore<T>, name: &str| {
            store.add(format!("{prefix}.{name}"), init.xavier(&[dim, dim]))
        };
        let w_q = mat(store, "w_q")?;
        let w_k = mat(store, "w_k")?;
        let w_v = mat(store, "w_v")?;
        let w_o = mat(store, "w_o")?;
        let mut bias = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[dim]));
        Ok(Self {
            w_q,
            b_q: bias("b_q")?,
            w_k,
            b_k: bias("b_k")?,
            w_v,
            b_v: bias("b_v")?,
            w_o,
            b_o: bias("b_o")?,
            heads,
            dim,
        })
    }

    /// Multi-head scaled dot-product attention over batched sequences
    /// `q[B×L_q×d]`, `k[B×L_k×d]`, `v[B×L_k×d]`.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<AttentionOutput> {
        let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return Err(Error::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let (b, lq, lk, d, h) = (sq[0], sq[1], sk[1], self.dim, self.heads);
        let dk = d / h;
        let project = |g: &mut Graph<T>, x: Var, w: ParamId, bias: ParamId, len: usize| -> Result<Var> {
            let (w, bias) = (g.param(store, w), g.param(store, bias));
            let y = affine(g, x, w, bias)?;
            let y = g.reshape(y, &[b, len, h, dk])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let qh = project(g, q, self.w_q, self.b_q, lq)?;
        let kh = project(g, k, self.w_k, self.b_k, lk)?;
        let vh = project(g, v, self.w_v, self.b_v, lk)?;
        let scores = g.bmm_nt(qh, kh)?;
        let scores = g.scale(scores, T::one() / T::from_usize(dk).unwrap().sqrt());
        let weights = g.softmax(scores)?;
        let ctx = g.bmm(weights, vh)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, lq, d])?;
        let (w_o, b_o) = (g.param(store, self.w_o), g.param(store, self.b_o));
        let output = affine(g, ctx, w_o, b_o)?;
        Ok(AttentionOutput { output, weights })
    }
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(
            "heads-divide-d_h",
            format!("attention width {dim} is not divisible by {heads} heads"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check_params, randn};

    fn mha(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, MhaParams) {
        let mut store = ParamStore::new();
        let p = MhaParams::register(&mut store, &mut Initializer::new(seed), "mha", dim, heads).unwrap();
        // Non-zero biases so their gradients are exercised.
        for id in [p.b_q, p.b_k, p.b_v, p.b_o] {
            *store.get_mut(id) = randn(&[dim], seed + id.index() as u64);
        }
        (store, p)
    }

    #[test]
    fn single_key_gets_all_the_weight() {
        let (store, p) = mha(8, 2, 1);
        let mut g = Graph::new();
        let q = g.constant(randn(&[2, 1, 8], 2));
        let k = g.constant(randn(&[2, 1, 8], 3));
        let out = p.attend(&mut g, &store, q, k, k).unwrap();
        assert_eq!(g.shape(out.weights), &[2, 2, 1, 1]);
        assert!(g.value(out.weights).data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (store, p) = mha(8, 4, 4);
        let row = randn(&[1, 1, 8], 5);
        let keys = Tensor::from_fn(&[1, 5, 8], |i| row.data()[i % 8]);
        let mut g = Graph::new();
        let q = g.constant(randn(&[1, 1, 8], 6));
        let k = g.constant(keys);
        let out = p.attend(&mut g, &store, q, k, k).unwrap();
        for w in g.value(out.weights).data() {
            assert!((w - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients() {
        let (store, p) = mha(8, 2, 7);
        let (q, k) = (randn(&[1, 1, 8], 8), randn(&[1, 3, 8], 9));
        let err = fd_check_params(&store, |g, s| {
            let q = g.constant(q.clone());
            let k = g.constant(k.clone());
            Ok(p.attend(g, s, q, k, k)?.output)
        });
        assert!(err < 1e-5, "{err}");
        // And through the inputs.
        let err = crate::testutil::fd_check(&[q.clone(), k.clone()], |g, v| Ok(p.attend(g, &store, v[0], v[1], v[1])?.output));
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn heads_must_divide_width() {
        assert_eq!(check_heads(10, 4).unwrap_err().constraint(), Some("heads-divide-d_h"));
        assert_eq!(check_heads(8, 0).unwrap_err().constraint(), Some("heads-divide-d_h"));
        assert!(check_heads(588, 4).is_ok());
    }

    #[test]
    fn attend_rejects_wrong_width() {
        let (store, p) = mha(8, 2, 10);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 1, 6]));
        let k = g.constant(Tensor::zeros(&[1, 2, 8]));
        assert!(matches!(p.attend(&mut g, &store, q, k, k), Err(Error::Shape { .. })));
    }

    #[test]
    fn affine_broadcasts_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 4]));
        let w = g.constant(Tensor::zeros(&[5, 4]));
        let b = g.constant(Tensor::from_fn(&[5], |i| i as f64));
        let y = affine(&mut g, x, w, b).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 5]);
        assert_eq!(g.value(y).at(&[1, 2, 3]), 3.0);
    }
}
