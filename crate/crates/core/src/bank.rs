//! Multi-modal feature bank.
//!
//! `K` location vectors of width `d_h`, updated once per timestep from the
//! hidden states of all modalities and read once at the end:
//!
//! ```text
//! ĥ   = ∥_i W_h^i h^i_t                       (each ⌊d_h/N⌋ wide)
//! α   = σ(M ĥ)                                (one gate per location)
//! M̂   = α ⊗ M + (1 − α) ⊗ ĥ
//! M'  = M̂ W_u
//! h_T = Σ_k W_r[k] M[k]
//! ```
//!
//! `α` broadcasts along the feature axis and `ĥ` along the location axis.

use crate::autodiff::{Graph, MixSite, Var};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct BankParams {
    pub w_h: Vec<ParamId>,
    pub w_u: ParamId,
    pub w_r: ParamId,
    pub m_init: ParamId,
    pub slots: usize,
    pub d_h: usize,
}

impl BankParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        n_modalities: usize,
        d_h: usize,
        slots: usize,
    ) -> Result<Self> {
        check_divisible(d_h, n_modalities)?;
        if slots == 0 {
            return Err(Error::config("bank-size-positive", "feature bank needs K >= 1 locations"));
        }
        let part = d_h / n_modalities;
        let w_h = (0..n_modalities)
            .map(|i| store.add(format!("bank.W_h.{i}"), init.xavier(&[part, d_h])))
            .collect::<Result<Vec<_>>>()?;
        let w_u = store.add("bank.W_u", init.xavier(&[d_h, d_h]))?;
        let w_r = store.add("bank.W_r", init.xavier(&[slots]))?;
        let m_init = store.add("bank.M_init", init.normal(&[slots, d_h], 0.02))?;
        Ok(Self {
            w_h,
            w_u,
            w_r,
            m_init,
            slots,
            d_h,
        })
    }

    pub fn n_modalities(&self) -> usize {
        self.w_h.len()
    }
}

pub fn check_divisible(d_h: usize, n_modalities: usize) -> Result<()> {
    if n_modalities == 0 || !d_h.is_multiple_of(n_modalities) {
        return Err(Error::config(
            "N-divides-d_h",
            format!("hidden size {d_h} is not divisible by {n_modalities} modalities"),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct BankState {
    /// `B × K × d_h`
    pub m: Var,
    pub t: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BankUpdate {
    pub state: BankState,
    /// `B × K × 1`
    pub alpha: Var,
    /// `M̂` before the `W_u` map.
    pub mixed: Var,
}

/// `M^(0)`: the learnable initial bank broadcast over the batch.
pub fn init_state<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, params: &BankParams, batch: usize) -> Result<BankState> {
    let m0 = g.param(store, params.m_init);
    let m0 = g.reshape(m0, &[1, params.slots, params.d_h])?;
    let m = g.broadcast_to(m0, &[batch, params.slots, params.d_h])?;
    Ok(BankState { m, t: 0 })
}

/// Projects each modality's hidden state and concatenates in modality order.
pub fn project_hidden<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &BankParams,
    hidden: &[Var],
) -> Result<Var> {
    if hidden.len() != params.n_modalities() {
        return Err(Error::config(
            "modality-count",
            format!("bank built for {} modalities, got {}", params.n_modalities(), hidden.len()),
        ));
    }
    let mut parts = Vec::with_capacity(hidden.len());
    for (&h, &w) in hidden.iter().zip(&params.w_h) {
        let w = g.param(store, w);
        parts.push(g.linear(h, w)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat(&parts, 1)
}

pub fn update_bank<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &BankParams,
    state: &BankState,
    h_cat: Var,
) -> Result<BankUpdate> {
    let sm = g.shape(state.m).to_vec();
    let sh = g.shape(h_cat).to_vec();
    if sm.len() != 3 || sh != [sm[0], sm[2]] {
        return Err(Error::Shape {
            op: "bank update",
            lhs: sm,
            rhs: sh,
        });
    }
    let (b, k, d) = (sm[0], sm[1], sm[2]);
    let col = g.reshape(h_cat, &[b, d, 1])?;
    let logits = g.bmm(state.m, col)?;
    let alpha = g.sigmoid(logits);
    let row = g.reshape(h_cat, &[b, 1, d])?;
    let mixed = g.lerp_at(alpha, state.m, row, MixSite::Bank)?;
    let flat = g.reshape(mixed, &[b * k, d])?;
    let w_u = g.param(store, params.w_u);
    let next = g.matmul(flat, w_u)?;
    let m = g.reshape(next, &[b, k, d])?;
    Ok(BankUpdate {
        state: BankState { m, t: state.t + 1 },
        alpha,
        mixed,
    })
}

/// `h_T = W_r M`, a weighted sum of the location vectors.
pub fn read_bank<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, params: &BankParams, state: &BankState) -> Result<Var> {
    if state.t == 0 {
        log::debug!("reading a feature bank that was never updated");
    }
    let w_r = g.param(store, params.w_r);
    let w_r = g.reshape(w_r, &[1, params.slots, 1])?;
    let weighted = g.mul(state.m, w_r)?;
    g.sum_axes(weighted, &[1])
}
