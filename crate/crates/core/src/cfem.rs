//! Complementary feature extraction.
//!
//! Each modality owns an encoding block (two temporal convolutions with
//! kernel 4 and stride 2, `tanh` after each, then a temporal mean) that turns
//! `F[B×d_h×T×h×w]` into `h·w` tokens of width `d_h`, and a decoding block
//! whose learnable query attends over the tokens of every *other* modality:
//!
//! ```text
//! c_i = ∥_{j≠i} f̂_j                       (token axis, ascending j)
//! g_i = LN(MHA(q_i, c_i + pos_i, c_i) + q_i)
//! ```
//!
//! The positional embedding is added to the keys only unless
//! [`CfemParams::pos_on_values`] is set.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{check_heads, LayerNormParams, MhaParams, LN_EPS};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONV_KERNEL: usize = 4;
pub const CONV_STRIDE: usize = 2;

/// Output length of one unpadded temporal convolution, if any.
pub fn conv_out_len(frames: usize) -> Option<usize> {
    (frames >= CONV_KERNEL).then(|| (frames - CONV_KERNEL) / CONV_STRIDE + 1)
}

/// Smallest clip length that survives both encoder convolutions.
pub fn min_frames() -> usize {
    (1..)
        .find(|&t| conv_out_len(t).and_then(conv_out_len).is_some())
        .unwrap()
}

#[derive(Clone, Debug)]
pub struct CfemModalityParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub query: ParamId,
    pub mha: MhaParams,
    pub ln: LayerNormParams,
    pub pos: ParamId,
}

#[derive(Clone, Debug)]
pub struct CfemParams {
    pub modalities: Vec<CfemModalityParams>,
    pub d_h: usize,
    pub heads: usize,
    /// Tokens contributed by one modality (`h·w`).
    pub tokens: usize,
    pub pos_on_values: bool,
    pub eps: f64,
}

impl CfemParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        n_modalities: usize,
        d_h: usize,
        heads: usize,
        tokens: usize,
    ) -> Result<Self> {
        if n_modalities < 2 {
            return Err(Error::config(
                "cfem-min-modalities",
                format!("CFEM requires >=2 modalities, got {n_modalities}"),
            ));
        }
        check_heads(d_h, heads)?;
        let mut modalities = Vec::with_capacity(n_modalities);
        for i in 0..n_modalities {
            let p = format!("cfem.{i}");
            let conv1_w = store.add(format!("{p}.conv1.weight"), init.conv(&[d_h, d_h, CONV_KERNEL]))?;
            let conv1_b = store.add(format!("{p}.conv1.bias"), Tensor::zeros(&[d_h]))?;
            let conv2_w = store.add(format!("{p}.conv2.weight"), init.conv(&[d_h, d_h, CONV_KERNEL]))?;
            let conv2_b = store.add(format!("{p}.conv2.bias"), Tensor::zeros(&[d_h]))?;
            let query = store.add(format!("{p}.query"), init.normal(&[d_h], 1.0))?;
            let mha = MhaParams::register(store, init, &format!("{p}.mha"), d_h, heads)?;
            let ln = LayerNormParams::register(store, &format!("{p}.ln"), d_h)?;
            let pos = store.add(format!("{p}.pos"), init.normal(&[(n_modalities - 1) * tokens, d_h], 0.02))?;
            modalities.push(CfemModalityParams {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                query,
                mha,
                ln,
                pos,
            });
        }
        Ok(Self {
            modalities,
            d_h,
            heads,
            tokens,
            pos_on_values: false,
            eps: LN_EPS,
        })
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }
}

/// Encoding block: `F[B×d_h×T×h×w]` → tokens `f̂[B×(h·w)×d_h]`.
pub fn encode_modality<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &CfemParams,
    features: Var,
    modality: usize,
) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 5 || s[1] != params.d_h || s[3] * s[4] != params.tokens {
        return Err(Error::Shape {
            op: "cfem encode",
            lhs: s,
            rhs: vec![params.d_h, params.tokens],
        });
    }
    let frames = s[2];
    if conv_out_len(frames).and_then(conv_out_len).is_none() {
        return Err(Error::SequenceTooShort {
            frames,
            min: min_frames(),
            context: "the two-layer CFEM encoder",
        });
    }
    let p = &params.modalities[modality];
    let (w1, b1) = (g.param(store, p.conv1_w), g.param(store, p.conv1_b));
    let x = g.temporal_conv(features, w1, b1, CONV_STRIDE)?;
    let x = g.tanh(x);
    let (w2, b2) = (g.param(store, p.conv2_w), g.param(store, p.conv2_b));
    let x = g.temporal_conv(x, w2, b2, CONV_STRIDE)?;
    let x = g.tanh(x);
    let pooled = g.mean_axes(x, &[2])?;
    let flat = g.reshape(pooled, &[s[0], params.d_h, params.tokens])?;
    g.permute(flat, &[0, 2, 1])
}

/// `c_i`: tokens of every modality except `target`, in ascending order.
pub fn build_content<T: Scalar>(g: &mut Graph<T>, f_hats: &[Var], target: usize) -> Result<Var> {
    if f_hats.len() < 2 {
        return Err(Error::config(
            "cfem-min-modalities",
            format!("CFEM requires >=2 modalities, got {}", f_hats.len()),
        ));
    }
    let others: Vec<Var> = f_hats
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, &v)| v)
        .collect();
    if others.len() == 1 {
        return Ok(others[0]);
    }
    g.concat(&others, 1)
}

pub struct DecodeOutput {
    /// `g_i[B×d_h]`
    pub content: Var,
    /// `B × H × 1 × L` attention weights.
    pub attention: Var,
}

/// Decoding block for modality `target` over tokens `c[B×L×d_h]`.
pub fn decode_content<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &CfemParams,
    target: usize,
    content: Var,
) -> Result<DecodeOutput> {
    let p = &params.modalities[target];
    let sc = g.shape(content).to_vec();
    let pos_shape = store.get(p.pos).shape().to_vec();
    if sc.len() != 3 || sc[1..] != pos_shape[..] {
        return Err(Error::Shape {
            op: "cfem decode",
            lhs: sc,
            rhs: pos_shape,
        });
    }
    let (b, len, d) = (sc[0], sc[1], sc[2]);
    let pos = g.param(store, p.pos);
    let pos = g.reshape(pos, &[1, len, d])?;
    let keys = g.add(content, pos)?;
    let values = if params.pos_on_values { keys } else { content };
    let q = g.param(store, p.query);
    let q = g.reshape(q, &[1, 1, d])?;
    let q = g.broadcast_to(q, &[b, 1, d])?;
    let att = p.mha.attend(g, store, q, keys, values)?;
    let resid = g.add(att.output, q)?;
    let normed = p.ln.apply(g, store, resid, T::c(params.eps))?;
    let content = g.reshape(normed, &[b, d])?;
    Ok(DecodeOutput {
        content,
        attention: att.weights,
    })
}

/// Content vectors `g_1..g_N`. Each encoder runs once; its tokens are shared
/// by every target that uses them. An encoder whose tokens no target needs
/// still runs, so all modalities are validated.
pub fn cfem_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &CfemParams,
    features: &[Var],
) -> Result<Vec<DecodeOutput>> {
    let n = params.n_modalities();
    if features.len() != n {
        return Err(Error::config(
            "modality-count",
            format!("CFEM built for {n} modalities, got {}", features.len()),
        ));
    }
    let ref_shape = g.shape(features[0]).to_vec();
    for (i, &f) in features.iter().enumerate().skip(1) {
        let s = g.shape(f);
        if s.len() != 5 || s[0] != ref_shape[0] || s[2..] != ref_shape[2..] {
            return Err(Error::config(
                "modality-shapes-agree",
                format!("modality {i} has shape {s:?}, modality 0 has {ref_shape:?}"),
            ));
        }
    }
    let mut tokens = Vec::with_capacity(n);
    for (i, &f) in features.iter().enumerate() {
        tokens.push(encode_modality(g, store, params, f, i)?);
    }
    (0..n)
        .map(|i| {
            let c = build_content(g, &tokens, i)?;
            decode_content(g, store, params, i, c)
        })
        .collect()
}

/// Which pooled-feature content to feed a modality's cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PooledContent {
    /// `g_i = ∥_{j≠i} s_j`
    CrossConcat,
    /// `g_i = s_i`
    SelfOnly,
}

/// Pooled-feature content for modality `target`, where `s_j` is the
/// spatio-temporal mean of `F_j`.
pub fn self_content<T: Scalar>(
    g: &mut Graph<T>,
    pooled: &[Var],
    target: usize,
    mode: PooledContent,
) -> Result<Var> {
    match mode {
        PooledContent::SelfOnly => Ok(pooled[target]),
        PooledContent::CrossConcat => {
            if pooled.len() < 2 {
                return Err(Error::config(
                    "cross-content-min-modalities",
                    "cross-modality content requires >=2 modalities",
                ));
            }
            let others: Vec<Var> = pooled
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != target)
                .map(|(_, &v)| v)
                .collect();
            if others.len() == 1 {
                Ok(others[0])
            } else {
                g.concat(&others, 1)
            }
        }
    }
}

/// `s_j`: mean of `F[B×d_h×T×h×w]` over time and space.
pub fn spatiotemporal_pool<T: Scalar>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    g.mean_axes(features, &[2, 3, 4])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, fd_check_params, randn};

    fn cfem(n: usize, d_h: usize, heads: usize, tokens: usize, seed: u64) -> (ParamStore<f64>, CfemParams) {
        let mut store = ParamStore::new();
        let p = CfemParams::register(&mut store, &mut Initializer::new(seed), n, d_h, heads, tokens).unwrap();
        (store, p)
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn min_frames_is_ten() {
        assert_eq!(conv_out_len(16), Some(7));
        assert_eq!(conv_out_len(7), Some(2));
        assert_eq!(conv_out_len(3), None);
        assert_eq!(min_frames(), 10);
    }

    #[test]
    fn delta_kernels_reduce_to_subsampled_tanh() {
        let (d, hw) = (3, 4);
        let (mut store, p) = cfem(2, d, 1, hw, 1);
        let delta = Tensor::from_fn(&[d, d, CONV_KERNEL], |i| {
            let (o, c, k) = (i / (d * CONV_KERNEL), (i / CONV_KERNEL) % d, i % CONV_KERNEL);
            f64::from(u8::from(o == c && k == 0))
        });
        *store.get_mut(p.modalities[0].conv1_w) = delta.clone();
        *store.get_mut(p.modalities[0].conv2_w) = delta;
        let x = randn(&[2, d, 16, 2, 2], 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tok = encode_modality(&mut g, &store, &p, xv, 0).unwrap();
        assert_eq!(g.shape(tok), &[2, hw, d]);
        // Two stride-2 layers keep frames 0, 4 of the input.
        for b in 0..2 {
            for s in 0..hw {
                for c in 0..d {
                    let v = |t: usize| x.at(&[b, c, t, s / 2, s % 2]).tanh().tanh();
                    let expect = (v(0) + v(4)) / 2.0;
                    assert!((g.value(tok).at(&[b, s, c]) - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn content_concatenates_other_modalities_in_order() {
        for n in 2..=4 {
            let mut g = Graph::<f64>::new();
            let toks: Vec<Var> = (0..n)
                .map(|j| g.constant(Tensor::full(&[1, 3, 2], j as f64)))
                .collect();
            for i in 0..n {
                let c = build_content(&mut g, &toks, i).unwrap();
                assert_eq!(g.shape(c), &[1, 3 * (n - 1), 2]);
                let order: Vec<f64> = g.value(c).data().chunks(6).map(|ch| ch[0]).collect();
                let expect: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| j as f64).collect();
                assert_eq!(order, expect);
            }
        }
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert_eq!(
            build_content(&mut g, &[one], 0).unwrap_err().constraint(),
            Some("cfem-min-modalities")
        );
        assert_eq!(
            CfemParams::register::<f64>(&mut ParamStore::new(), &mut Initializer::new(0), 1, 4, 1, 1)
                .unwrap_err()
                .constraint(),
            Some("cfem-min-modalities")
        );
    }

    #[test]
    fn single_token_gets_full_attention() {
        let (store, p) = cfem(2, 4, 2, 1, 3);
        let mut g = Graph::new();
        let c = g.constant(randn(&[2, 1, 4], 4));
        let out = decode_content(&mut g, &store, &p, 0, c).unwrap();
        assert!(g.value(out.attention).data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
        assert_eq!(g.shape(out.content), &[2, 4]);
    }

    #[test]
    fn token_order_is_irrelevant_without_positions() {
        let (mut store, p) = cfem(3, 4, 2, 2, 5);
        *store.get_mut(p.modalities[1].pos) = Tensor::zeros(&[4, 4]);
        let c = randn(&[1, 4, 4], 6);
        let perm = [2, 0, 3, 1];
        let shuffled = Tensor::from_fn(&[1, 4, 4], |i| c.at(&[0, perm[i / 4], i % 4]));
        let decode = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(x);
            let out = decode_content(&mut g, &store, &p, 1, v).unwrap();
            g.value(out.content).clone()
        };
        assert!(max_diff(&decode(c), &decode(shuffled)) < 1e-14);
    }

    #[test]
    fn content_excludes_own_modality() {
        let (store, p) = cfem(3, 4, 2, 4, 7);
        let xs: Vec<Tensor<f64>> = (0..3).map(|j| randn(&[2, 4, 10, 2, 2], 8 + j)).collect();
        let run = |xs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let out = cfem_forward(&mut g, &store, &p, &vs).unwrap();
            out.iter().map(|o| g.value(o.content).clone()).collect::<Vec<_>>()
        };
        let base = run(&xs);
        for i in 0..3 {
            let mut changed = xs.clone();
            changed[i] = randn(&[2, 4, 10, 2, 2], 100 + i as u64);
            let out = run(&changed);
            for j in 0..3 {
                let d = max_diff(&base[j], &out[j]);
                if j == i {
                    assert_eq!(d, 0.0, "g_{i} moved when F_{i} changed");
                } else {
                    assert!(d > 1e-6, "g_{j} ignored F_{i}");
                }
            }
        }
    }

    #[test]
    fn forward_rejects_mismatched_modalities() {
        let (store, p) = cfem(2, 4, 2, 4, 9);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 4, 10, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 4, 12, 2, 2]));
        let err = cfem_forward(&mut g, &store, &p, &[a, b]).err().unwrap();
        assert_eq!(err.constraint(), Some("modality-shapes-agree"));
        let err = cfem_forward(&mut g, &store, &p, &[a]).err().unwrap();
        assert_eq!(err.constraint(), Some("modality-count"));
        let short = g.constant(Tensor::zeros(&[1, 4, 9, 2, 2]));
        assert!(matches!(
            encode_modality(&mut g, &store, &p, short, 0),
            Err(Error::SequenceTooShort { frames: 9, min: 10, .. })
        ));
        let c = g.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(decode_content(&mut g, &store, &p, 0, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn pooled_content_modes() {
        let mut g = Graph::<f64>::new();
        let s: Vec<Var> = (0..3).map(|j| g.constant(Tensor::full(&[1, 2], j as f64))).collect();
        let own = self_content(&mut g, &s, 1, PooledContent::SelfOnly).unwrap();
        assert_eq!(g.value(own).data(), &[1.0, 1.0]);
        let cross = self_content(&mut g, &s, 1, PooledContent::CrossConcat).unwrap();
        assert_eq!(g.value(cross).data(), &[0.0, 0.0, 2.0, 2.0]);
        let err = self_content(&mut g, &s[..1], 0, PooledContent::CrossConcat).unwrap_err();
        assert_eq!(err.constraint(), Some("cross-content-min-modalities"));
        let f = g.constant(Tensor::full(&[2, 3, 4, 2, 2], 0.75));
        let pooled = spatiotemporal_pool(&mut g, f).unwrap();
        assert_eq!(g.shape(pooled), &[2, 3]);
        assert!(g.value(pooled).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn encoder_gradients() {
        let (store, p) = cfem(2, 4, 2, 1, 10);
        let x = randn(&[2, 4, 10, 1, 1], 11);
        let err = fd_check_params(&store, |g, s| {
            let xv = g.constant(x.clone());
            encode_modality(g, s, &p, xv, 0)
        });
        assert!(err < 1e-5, "params {err}");
        let err = fd_check(std::slice::from_ref(&x), |g, v| encode_modality(g, &store, &p, v[0], 0));
        assert!(err < 1e-5, "input {err}");
    }

    #[test]
    fn decoder_gradients() {
        for pos_on_values in [false, true] {
            let (store, mut p) = cfem(3, 4, 2, 2, 12);
            p.pos_on_values = pos_on_values;
            let c = randn(&[2, 4, 4], 13);
            let err = fd_check_params(&store, |g, s| {
                let cv = g.constant(c.clone());
                Ok(decode_content(g, s, &p, 2, cv)?.content)
            });
            assert!(err < 1e-5, "params {err}");
            let err = fd_check(std::slice::from_ref(&c), |g, v| Ok(decode_content(g, &store, &p, 2, v[0])?.content));
            assert!(err < 1e-5, "input {err}");
        }
    }
}
