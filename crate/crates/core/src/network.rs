//! End-to-end model assembly.
//!
//! ```text
//! frames ─ 1×1 encoder ─ F^i ─┬─ content (CFEM | pooled cross | pooled self) ─ g^i ─┐
//!                             └─ spatial mean ─ f^i_{1:T} ─────────────── MCU^i ◄──┘
//!                                                                        │ h^i_t
//!                      feature bank (per step)  or  concat of h^i_T ◄────┘
//!                                                 │
//!                                       linear + softmax ─ p
//! ```

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::bank::{self, BankParams, BankUpdate};
use crate::cfem::{self, CfemParams, PooledContent};
use crate::error::{Error, Result, ResultExt};
use crate::mcu::{self, McuParams, McuUnroll};
use crate::nn::{affine, check_heads};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContentMode {
    /// Learnable-query attention over the other modalities' encoded tokens.
    Cfem,
    /// Concatenated spatio-temporal means of the other modalities.
    CrossConcat,
    /// The modality's own spatio-temporal mean.
    SelfContent,
}

impl ContentMode {
    pub const ALL: [ContentMode; 3] = [ContentMode::Cfem, ContentMode::CrossConcat, ContentMode::SelfContent];

    pub fn as_str(self) -> &'static str {
        match self {
            ContentMode::Cfem => "cfem",
            ContentMode::CrossConcat => "cross-concat",
            ContentMode::SelfContent => "self",
        }
    }

    pub fn is_cross(self) -> bool {
        !matches!(self, ContentMode::SelfContent)
    }
}

impl fmt::Display for ContentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cfem" => Ok(ContentMode::Cfem),
            "cross-concat" | "cross" => Ok(ContentMode::CrossConcat),
            "self" => Ok(ContentMode::SelfContent),
            other => Err(format!("unknown content mode '{other}' (expected cfem, cross-concat or self)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Bank,
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 2] = [FusionMode::Bank, FusionMode::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Bank => "bank",
            FusionMode::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bank" => Ok(FusionMode::Bank),
            "concat" => Ok(FusionMode::Concat),
            other => Err(format!("unknown fusion mode '{other}' (expected bank or concat)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_modalities: usize,
    pub frames: usize,
    pub d_f: usize,
    pub d_h: usize,
    pub height: usize,
    pub width: usize,
    pub bank_size: usize,
    pub classes: usize,
    pub heads: usize,
    pub content: ContentMode,
    pub fusion: FusionMode,
    pub precision: Precision,
    pub seed: u64,
    /// Add the positional embedding to attention values as well as keys.
    pub pos_on_values: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_modalities: 2,
            frames: 16,
            d_f: 8,
            d_h: 16,
            height: 2,
            width: 2,
            bank_size: 8,
            classes: 2,
            heads: 4,
            content: ContentMode::Cfem,
            fusion: FusionMode::Bank,
            precision: Precision::F32,
            seed: 0,
            pos_on_values: false,
        }
    }
}

impl ModelConfig {
    /// Small 64-bit configuration used for gradient checks.
    pub fn toy() -> Self {
        Self {
            n_modalities: 2,
            frames: 10,
            d_f: 4,
            d_h: 8,
            height: 2,
            width: 2,
            bank_size: 3,
            classes: 3,
            heads: 2,
            precision: Precision::F64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("d_f", self.d_f),
            ("d_h", self.d_h),
            ("height", self.height),
            ("width", self.width),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config("positive-dims", format!("{name} must be >= 1")));
            }
        }
        if self.n_modalities == 0 {
            return Err(Error::config("modalities-positive", "at least one modality is required"));
        }
        if self.content.is_cross() && self.n_modalities < 2 {
            return Err(Error::config(
                "cfem-min-modalities",
                format!(
                    "content mode '{}' requires >=2 modalities, got {}; use 'self' for one modality",
                    self.content, self.n_modalities
                ),
            ));
        }
        if self.content == ContentMode::Cfem {
            check_heads(self.d_h, self.heads)?;
            let min = cfem::min_frames();
            if self.frames < min {
                return Err(Error::config(
                    "cfem-min-frames",
                    format!("T={} but the CFEM encoder needs T >= {min}", self.frames),
                ));
            }
        }
        if self.fusion == FusionMode::Bank {
            bank::check_divisible(self.d_h, self.n_modalities)?;
            if self.bank_size == 0 {
                return Err(Error::config("bank-size-positive", "feature bank needs K >= 1 locations"));
            }
        }
        Ok(())
    }

    /// Width of the content vector fed to each MCU.
    pub fn content_dim(&self) -> usize {
        match self.content {
            ContentMode::Cfem | ContentMode::SelfContent => self.d_h,
            ContentMode::CrossConcat => self.d_h * (self.n_modalities - 1),
        }
    }
}

/// A batch of per-modality frame features `[B×d_f×T×h×w]` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch<T> {
    pub modalities: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> EpisodeBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `start..end` of every modality.
    pub fn slice(&self, start: usize, end: usize) -> EpisodeBatch<T> {
        let modalities = self
            .modalities
            .iter()
            .map(|m| {
                let per = m.numel() / m.shape()[0];
                let mut shape = m.shape().to_vec();
                shape[0] = end - start;
                Tensor::new(shape, m.data()[start * per..end * per].to_vec()).expect("slice shape")
            })
            .collect();
        EpisodeBatch {
            modalities,
            labels: self.labels[start..end].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Every graph value a forward pass exposes for tests and telemetry.
pub struct ForwardTrace {
    /// `F^i[B×d_h×T×h×w]`
    pub features: Vec<Var>,
    /// Content vector `g^i` fed to each MCU.
    pub content: Vec<Var>,
    /// CFEM attention weights per modality (empty for pooled content).
    pub attention: Vec<Var>,
    pub mcu: Vec<McuUnroll>,
    pub bank: Vec<BankUpdate>,
    /// Fused vector the classifier reads.
    pub fused: Var,
    pub logits: Var,
    pub probs: Var,
}

impl ForwardTrace {
    /// `h^i_T` for every modality.
    pub fn final_hidden(&self) -> Vec<Var> {
        self.mcu.iter().map(|u| u.last_hidden()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoders: Vec<EncoderParams>,
    cfem: Option<CfemParams>,
    mcu: Vec<McuParams>,
    bank: Option<BankParams>,
    head: HeadParams,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(Error::config(
                "precision",
                format!(
                    "config asks for {} but the model is instantiated at {}",
                    config.precision.as_str(),
                    T::PRECISION.as_str()
                ),
            ));
        }
        let mut init = Initializer::new(config.seed);
        let mut params = ParamStore::new();
        let (n, d_h) = (config.n_modalities, config.d_h);
        let encoders = (0..n)
            .map(|i| {
                Ok(EncoderParams {
                    weight: params.add(format!("encoder.{i}.weight"), init.xavier(&[d_h, config.d_f]))?,
                    bias: params.add(format!("encoder.{i}.bias"), Tensor::zeros(&[d_h]))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfem = match config.content {
            ContentMode::Cfem => {
                let mut c = CfemParams::register(
                    &mut params,
                    &mut init,
                    n,
                    d_h,
                    config.heads,
                    config.height * config.width,
                )?;
                c.pos_on_values = config.pos_on_values;
                Some(c)
            }
            _ => None,
        };
        let d_g = config.content_dim();
        let mcu = (0..n)
            .map(|i| McuParams::register(&mut params, &mut init, &format!("mcu.{i}"), d_h, d_g))
            .collect::<Result<Vec<_>>>()?;
        let (bank, head_in) = match config.fusion {
            FusionMode::Bank => (
                Some(BankParams::register(&mut params, &mut init, n, d_h, config.bank_size)?),
                d_h,
            ),
            FusionMode::Concat => (None, n * d_h),
        };
        let head = HeadParams {
            weight: params.add("head.W_p", init.xavier(&[config.classes, head_in]))?,
            bias: params.add("head.b_p", Tensor::zeros(&[config.classes]))?,
        };
        Ok(Self {
            config,
            params,
            encoders,
            cfem,
            mcu,
            bank,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn mcu_params(&self, modality: usize) -> &McuParams {
        &self.mcu[modality]
    }

    pub fn cfem_params(&self) -> Option<&CfemParams> {
        self.cfem.as_ref()
    }

    pub fn bank_params(&self) -> Option<&BankParams> {
        self.bank.as_ref()
    }

    /// Copies every parameter of `source` into this model by name. Fails on
    /// the first missing name or shape mismatch.
    pub fn load_params(&mut self, source: &ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let src = source
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' missing from checkpoint")))?;
            let dst = self.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?} in checkpoint but {:?} in model",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    fn check_batch(&self, g: &Graph<T>, inputs: &[Var]) -> Result<usize> {
        let c = &self.config;
        if inputs.len() != c.n_modalities {
            return Err(Error::config(
                "modality-count",
                format!("model expects {} modalities, batch has {}", c.n_modalities, inputs.len()),
            ));
        }
        let batch = g.shape(inputs[0]).first().copied().unwrap_or(0);
        for (i, &x) in inputs.iter().enumerate() {
            let expect = [batch, c.d_f, c.frames, c.height, c.width];
            if g.shape(x) != expect {
                return Err(Error::Shape {
                    op: if i == 0 { "batch modality 0" } else { "batch modality" },
                    lhs: g.shape(x).to_vec(),
                    rhs: expect.to_vec(),
                })
                .context(|| format!("modality {i}"));
            }
        }
        if batch == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(batch)
    }

    /// Toy per-frame encoder: a 1×1 convolution `d_f → d_h` and `tanh`, giving
    /// `F[B×d_h×T×h×w]`.
    pub fn encode_frames(&self, g: &mut Graph<T>, modality: usize, x: Var) -> Result<Var> {
        let p = self.encoders[modality];
        let (w, b) = (g.param(&self.params, p.weight), g.param(&self.params, p.bias));
        let channels_last = g.permute(x, &[0, 2, 3, 4, 1])?;
        let y = affine(g, channels_last, w, b)?;
        let y = g.tanh(y);
        g.permute(y, &[0, 4, 1, 2, 3])
    }

    /// Mean over the spatial axes: `F[B×d_h×T×h×w]` → `f[B×d_h×T]`.
    pub fn spatial_pool(g: &mut Graph<T>, features: Var) -> Result<Var> {
        g.mean_axes(features, &[3, 4])
    }

    pub fn forward(&self, g: &mut Graph<T>, batch: &EpisodeBatch<T>) -> Result<ForwardTrace> {
        let inputs: Vec<Var> = batch.modalities.iter().map(|m| g.constant(m.clone())).collect();
        self.forward_vars(g, &inputs)
    }

    /// Forward pass over inputs already on the tape (so callers can ask for
    /// gradients with respect to them).
    pub fn forward_vars(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<ForwardTrace> {
        let batch = self.check_batch(g, inputs)?;
        let n = self.config.n_modalities;
        let features = inputs
            .iter()
            .enumerate()
            .map(|(i, &x)| self.encode_frames(g, i, x))
            .collect::<Result<Vec<_>>>()
            .context(|| "frame encoder".into())?;

        let mut attention = Vec::new();
        let content: Vec<Var> = match self.config.content {
            ContentMode::Cfem => {
                let cfem = self.cfem.as_ref().expect("cfem params");
                let out = cfem::cfem_forward(g, &self.params, cfem, &features).context(|| "cfem".into())?;
                attention = out.iter().map(|o| o.attention).collect();
                out.into_iter().map(|o| o.content).collect()
            }
            mode => {
                let pooled = features
                    .iter()
                    .map(|&f| cfem::spatiotemporal_pool(g, f))
                    .collect::<Result<Vec<_>>>()?;
                let kind = if mode == ContentMode::CrossConcat {
                    PooledContent::CrossConcat
                } else {
                    PooledContent::SelfOnly
                };
                (0..n)
                    .map(|i| cfem::self_content(g, &pooled, i, kind))
                    .collect::<Result<Vec<_>>>()?
            }
        };

        let mut unrolls = Vec::with_capacity(n);
        for i in 0..n {
            let f_seq = Self::spatial_pool(g, features[i])?;
            let u = mcu::mcu_unroll(g, &self.params, &self.mcu[i], f_seq, content[i])
                .context(|| format!("mcu {i}"))?;
            unrolls.push(u);
        }

        let mut bank_trace = Vec::new();
        let fused = match &self.bank {
            Some(bp) => {
                let mut state = bank::init_state(g, &self.params, bp, batch)?;
                for t in 0..self.config.frames {
                    let hs: Vec<Var> = unrolls.iter().map(|u| u.steps[t].hidden).collect();
                    let h_cat = bank::project_hidden(g, &self.params, bp, &hs)?;
                    let up = bank::update_bank(g, &self.params, bp, &state, h_cat).context(|| format!("bank step {t}"))?;
                    state = up.state;
                    bank_trace.push(up);
                }
                bank::read_bank(g, &self.params, bp, &state)?
            }
            None => {
                let last: Vec<Var> = unrolls.iter().map(|u| u.last_hidden()).collect();
                if last.len() == 1 {
                    last[0]
                } else {
                    g.concat(&last, 1)?
                }
            }
        };
        let (w, b) = (g.param(&self.params, self.head.weight), g.param(&self.params, self.head.bias));
        let logits = affine(g, fused, w, b)?;
        let probs = g.softmax(logits)?;
        Ok(ForwardTrace {
            features,
            content,
            attention,
            mcu: unrolls,
            bank: bank_trace,
            fused,
            logits,
            probs,
        })
    }

    /// Mean cross-entropy of the classifier output.
    pub fn loss(&self, g: &mut Graph<T>, trace: &ForwardTrace, labels: &[usize]) -> Result<Var> {
        g.softmax_cross_entropy(trace.logits, labels)
    }
}

/// Per-stream linear probes `p^i = softmax(W_p^i h^i_T)` (no bias) trained on
/// a frozen model.
#[derive(Clone, Debug)]
pub struct ProbeHeads<T> {
    params: ParamStore<T>,
    weights: Vec<ParamId>,
    pub d_h: usize,
    pub classes: usize,
}

pub struct ProbeOutput {
    /// `L_self = Σ_i L^i`
    pub loss: Var,
    pub stream_losses: Vec<Var>,
    pub probs: Vec<Var>,
}

impl<T: Scalar> ProbeHeads<T> {
    pub fn new(n_modalities: usize, d_h: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let weights = (0..n_modalities)
            .map(|i| params.add(format!("probe.{i}.W_p"), init.xavier(&[classes, d_h])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            weights,
            d_h,
            classes,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn n_streams(&self) -> usize {
        self.weights.len()
    }

    pub fn load_params(&mut self, source: &ParamStore<T>) -> Result<()> {
        for &id in &self.weights {
            let name = self.params.name(id).to_string();
            let src = source
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' missing from checkpoint")))?;
            if src.shape() != self.params.get(id).shape() {
                return Err(Error::Checkpoint(format!("tensor '{name}' has mismatched shape {:?}", src.shape())));
            }
            self.params.get_mut(id).data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Probe losses over per-stream features `hidden[i]: B×d_h`.
    pub fn forward(&self, g: &mut Graph<T>, hidden: &[Var], labels: &[usize]) -> Result<ProbeOutput> {
        if hidden.len() != self.weights.len() {
            return Err(Error::config(
                "modality-count",
                format!("{} probes for {} streams", self.weights.len(), hidden.len()),
            ));
        }
        let mut stream_losses = Vec::with_capacity(hidden.len());
        let mut probs = Vec::with_capacity(hidden.len());
        for (&h, &w) in hidden.iter().zip(&self.weights) {
            let w = g.param(&self.params, w);
            let logits = g.linear(h, w)?;
            probs.push(g.softmax(logits)?);
            stream_losses.push(g.softmax_cross_entropy(logits, labels)?);
        }
        let mut loss = stream_losses[0];
        for &l in &stream_losses[1..] {
            loss = g.add(loss, l)?;
        }
        Ok(ProbeOutput {
            loss,
            stream_losses,
            probs,
        })
    }
}

/// Probe heads on the final hidden states of `trace`. The hidden states are
/// detached first, so `L_self` sends no gradient into the model.
pub fn per_stream_heads<T: Scalar>(
    g: &mut Graph<T>,
    trace: &ForwardTrace,
    labels: &[usize],
    probes: &ProbeHeads<T>,
) -> Result<ProbeOutput> {
    let frozen: Vec<Var> = trace.final_hidden().into_iter().map(|h| g.detach(h)).collect();
    probes.forward(g, &frozen, labels)
}
