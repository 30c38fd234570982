//! Multi-modal contextualisation unit.
//!
//! A gated recurrent cell for one modality. At every timestep the frame
//! feature `f_t` is first mixed with a cross-modality content vector `g`:
//!
//! ```text
//! f̄  = tanh(LN(W_f f_t))          ḡ = tanh(LN(W_g g))
//! s  = σ(LN(W_s [f̄ ∥ ḡ]))         f̃ = s ⊗ f̄ + (1 − s) ⊗ ḡ
//! ```
//!
//! and the mixed feature then drives reset/update gating against the
//! previous hidden state:
//!
//! ```text
//! r  = σ(LN(W_hr (f̃ + h)))        z = σ(LN(W_hz (f̃ + h)))
//! h̃  = tanh(LN(W_hh (r ⊗ h + f̃)))  h' = z ⊗ h̃ + (1 − z) ⊗ h
//! ```
//!
//! Gate inputs are sums, not concatenations. None of the `W` maps carries
//! a bias; each of the six layer norms owns its own gain and bias.

use crate::autodiff::{Graph, MixSite, Var};
use crate::error::{Error, Result};
use crate::nn::LayerNormParams;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of each layer norm in [`McuParams::ln`].
pub mod ln_slot {
    pub const FRAME: usize = 0;
    pub const CONTENT: usize = 1;
    pub const INTEGRATION: usize = 2;
    pub const RESET: usize = 3;
    pub const UPDATE: usize = 4;
    pub const CANDIDATE: usize = 5;
}

const LN_NAMES: [&str; 6] = ["ln_f", "ln_g", "ln_s", "ln_r", "ln_z", "ln_h"];

#[derive(Clone, Debug)]
pub struct McuParams {
    pub w_f: ParamId,
    pub w_g: ParamId,
    pub w_s: ParamId,
    pub w_hr: ParamId,
    pub w_hz: ParamId,
    pub w_hh: ParamId,
    pub ln: [LayerNormParams; 6],
    pub d_h: usize,
    pub d_g: usize,
    pub eps: f64,
}

impl McuParams {
    /// Registers `{prefix}.{W_f, W_g, ...}` with Xavier-uniform weights and
    /// unit-gain layer norms.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        d_h: usize,
        d_g: usize,
    ) -> Result<Self> {
        if d_h == 0 || d_g == 0 {
            return Err(Error::config("mcu-dims", format!("d_h={d_h}, d_g={d_g} must be positive")));
        }
        let mut mat = |store: &mut ParamStore<T>, name: &str, rows: usize, cols: usize| {
            store.add(format!("{prefix}.{name}"), init.xavier(&[rows, cols]))
        };
        let w_f = mat(store, "W_f", d_h, d_h)?;
        let w_g = mat(store, "W_g", d_h, d_g)?;
        let w_s = mat(store, "W_s", d_h, 2 * d_h)?;
        let w_hr = mat(store, "W_hr", d_h, d_h)?;
        let w_hz = mat(store, "W_hz", d_h, d_h)?;
        let w_hh = mat(store, "W_hh", d_h, d_h)?;
        let mut ln = Vec::with_capacity(6);
        for name in LN_NAMES {
            ln.push(LayerNormParams::register(store, &format!("{prefix}.{name}"), d_h)?);
        }
        Ok(Self {
            w_f,
            w_g,
            w_s,
            w_hr,
            w_hz,
            w_hh,
            ln: ln.try_into().expect("six layer norms"),
            d_h,
            d_g,
            eps: crate::nn::LN_EPS,
        })
    }

    fn ln<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, slot: usize, x: Var) -> Result<Var> {
        self.ln[slot].apply(g, store, x, T::c(self.eps))
    }

    /// `act(LN(x · Wᵀ))`
    fn gate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        w: ParamId,
        slot: usize,
        x: Var,
        sigmoid: bool,
    ) -> Result<Var> {
        let w = g.param(store, w);
        let y = g.linear(x, w)?;
        let y = self.ln(g, store, slot, y)?;
        Ok(if sigmoid { g.sigmoid(y) } else { g.tanh(y) })
    }

    /// `ḡ = tanh(LN(W_g g))`. Depends only on the content vector, so an
    /// unrolled sequence computes it once.
    pub fn project_content<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, content: Var) -> Result<Var> {
        let s = g.shape(content);
        if s.len() != 2 || s[1] != self.d_g {
            return Err(Error::config(
                "mcu-content-dim",
                format!("content shape {:?} does not match d_g={}", s, self.d_g),
            ));
        }
        self.gate(g, store, self.w_g, ln_slot::CONTENT, content, false)
    }
}

/// Intermediate values of the cross-modality mix.
#[derive(Clone, Copy, Debug)]
pub struct MixOutput {
    pub f_bar: Var,
    pub g_bar: Var,
    /// Integration score `s_t`.
    pub score: Var,
    /// Supplemented feature `f̃_t`.
    pub mixed: Var,
}

/// Every intermediate of one recurrent step.
#[derive(Clone, Copy, Debug)]
pub struct McuStepTrace {
    pub mix: MixOutput,
    pub reset: Var,
    pub update: Var,
    pub candidate: Var,
    pub hidden: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct McuState {
    pub h: Var,
    pub t: usize,
}

impl McuState {
    /// `h_0 = 0` for a batch of `batch` sequences.
    pub fn zeros<T: Scalar>(g: &mut Graph<T>, batch: usize, d_h: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[batch, d_h])),
            t: 0,
        }
    }
}

fn check_frame<T: Scalar>(g: &Graph<T>, params: &McuParams, f_t: Var) -> Result<()> {
    let s = g.shape(f_t);
    if s.len() != 2 || s[1] != params.d_h {
        return Err(Error::Shape {
            op: "mcu frame",
            lhs: s.to_vec(),
            rhs: vec![params.d_h],
        });
    }
    Ok(())
}

fn mix_projected<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &McuParams,
    f_t: Var,
    g_bar: Var,
) -> Result<MixOutput> {
    check_frame(g, params, f_t)?;
    let f_bar = params.gate(g, store, params.w_f, ln_slot::FRAME, f_t, false)?;
    let joint = g.concat(&[f_bar, g_bar], 1)?;
    let score = params.gate(g, store, params.w_s, ln_slot::INTEGRATION, joint, true)?;
    let mixed = g.lerp_at(score, f_bar, g_bar, MixSite::Integration)?;
    Ok(MixOutput {
        f_bar,
        g_bar,
        score,
        mixed,
    })
}

/// Mixes frame features `f_t[B×d_h]` with content `content[B×d_g]`.
pub fn cross_modality_mix<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &McuParams,
    f_t: Var,
    content: Var,
) -> Result<MixOutput> {
    let g_bar = params.project_content(g, store, content)?;
    mix_projected(g, store, params, f_t, g_bar)
}

fn step_projected<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &McuParams,
    f_t: Var,
    g_bar: Var,
    state: &McuState,
) -> Result<(McuState, McuStepTrace)> {
    let h_prev = state.h;
    if g.shape(h_prev) != g.shape(f_t) {
        return Err(Error::Shape {
            op: "mcu state",
            lhs: g.shape(h_prev).to_vec(),
            rhs: g.shape(f_t).to_vec(),
        });
    }
    let mix = mix_projected(g, store, params, f_t, g_bar)?;
    let gate_in = g.add(mix.mixed, h_prev)?;
    let reset = params.gate(g, store, params.w_hr, ln_slot::RESET, gate_in, true)?;
    let update = params.gate(g, store, params.w_hz, ln_slot::UPDATE, gate_in, true)?;
    let gated = g.mul(reset, h_prev)?;
    let cand_in = g.add(gated, mix.mixed)?;
    let candidate = params.gate(g, store, params.w_hh, ln_slot::CANDIDATE, cand_in, false)?;
    let hidden = g.lerp_at(update, candidate, h_prev, MixSite::UpdateGate)?;
    Ok((
        McuState {
            h: hidden,
            t: state.t + 1,
        },
        McuStepTrace {
            mix,
            reset,
            update,
            candidate,
            hidden,
        },
    ))
}

/// One recurrent step from `state`.
pub fn mcu_step<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &McuParams,
    f_t: Var,
    content: Var,
    state: &McuState,
) -> Result<(McuState, McuStepTrace)> {
    let g_bar = params.project_content(g, store, content)?;
    step_projected(g, store, params, f_t, g_bar, state)
}

pub struct McuUnroll {
    pub steps: Vec<McuStepTrace>,
}

impl McuUnroll {
    pub fn last_hidden(&self) -> Var {
        self.steps.last().expect("non-empty unroll").hidden
    }

    /// All hidden states stacked as `B × d_h × T`.
    pub fn stacked<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        let mut cols = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let shape = g.shape(s.hidden).to_vec();
            cols.push(g.reshape(s.hidden, &[shape[0], shape[1], 1])?);
        }
        g.concat(&cols, 2)
    }
}

/// Runs the cell over `f_seq[B×d_h×T]` from `h_0 = 0`, with one content
/// vector shared by every timestep.
pub fn mcu_unroll<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &McuParams,
    f_seq: Var,
    content: Var,
) -> Result<McuUnroll> {
    let s = g.shape(f_seq).to_vec();
    if s.len() != 3 || s[1] != params.d_h {
        return Err(Error::Shape {
            op: "mcu_unroll",
            lhs: s,
            rhs: vec![params.d_h],
        });
    }
    let (batch, frames) = (s[0], s[2]);
    if frames == 0 {
        return Err(Error::EmptySequence);
    }
    let g_bar = params.project_content(g, store, content)?;
    let time_major = g.permute(f_seq, &[2, 0, 1])?;
    let mut state = McuState::zeros(g, batch, params.d_h);
    let mut steps = Vec::with_capacity(frames);
    for t in 0..frames {
        let f_t = g.index_axis(time_major, 0, t)?;
        let (next, trace) = step_projected(g, store, params, f_t, g_bar, &state)?;
        state = next;
        steps.push(trace);
    }
    Ok(McuUnroll { steps })
}
