//! Central-difference verification of every parameter gradient.
//!
//! For each coordinate `θ_j` the numeric derivative is
//! `(L(θ + δe_j) − L(θ − δe_j)) / 2δ` and the error is
//! `|a − n| / max(|a|, |n|, floor)`. Coordinates are independent, so they are
//! spread across threads; every worker perturbs its own copy of the weights.

use std::time::{Duration, Instant};

use crate::autodiff::{Fault, Graph};
use crate::error::{Error, Result};
use crate::exec::{map_ordered, Parallelism};
use crate::network::{per_stream_heads, EpisodeBatch, Model, ModelConfig, ProbeHeads};
use crate::params::{Initializer, ParamStore};
use crate::scalar::Precision;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Also check the per-stream probe heads against `L_self`.
    pub probes: bool,
    pub fault: Option<Fault>,
    pub parallelism: Parallelism,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            batch: 2,
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            probes: true,
            fault: None,
            parallelism: Parallelism::Auto,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub group: String,
    pub numel: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Largest analytic gradient magnitude; zero means a dead tensor.
    pub max_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    /// Worst relative error per group, in first-seen order.
    pub fn groups(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for t in &self.tensors {
            match out.iter_mut().find(|(g, _)| *g == t.group) {
                Some((_, e)) => *e = e.max(t.max_rel),
                None => out.push((t.group.clone(), t.max_rel)),
            }
        }
        out
    }

    pub fn failing_groups(&self) -> Vec<String> {
        self.groups()
            .into_iter()
            .filter(|(_, e)| !(*e <= self.tolerance))
            .map(|(g, _)| g)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing_groups().is_empty()
    }

    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<28} {:>6} {:>12} {:>12}\n", "tensor", "numel", "max_rel", "max_grad");
        for t in &self.tensors {
            s += &format!("{:<28} {:>6} {:>12.3e} {:>12.3e}\n", t.name, t.numel, t.max_rel, t.max_grad);
        }
        s += "\ngroup            max_rel      status\n";
        for (g, e) in self.groups() {
            let ok = if e <= self.tolerance { "ok" } else { "FAIL" };
            s += &format!("{g:<16} {e:>10.3e}   {ok}\n");
        }
        s
    }
}

/// Group of a parameter: the first dotted segment of its name.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Random inputs and labels matching `config`.
pub fn random_batch(config: &ModelConfig, batch: usize, seed: u64) -> EpisodeBatch<f64> {
    let mut init = Initializer::new(seed);
    let shape = [batch, config.d_f, config.frames, config.height, config.width];
    let modalities = (0..config.n_modalities).map(|_| init.normal(&shape, 1.0)).collect();
    let labels = (0..batch).map(|b| (b * 7 + seed as usize) % config.classes).collect();
    EpisodeBatch { modalities, labels }
}

fn model_loss(model: &Model<f64>, batch: &EpisodeBatch<f64>) -> Result<f64> {
    let mut g = Graph::inference();
    let trace = model.forward(&mut g, batch)?;
    let loss = model.loss(&mut g, &trace, &batch.labels)?;
    Ok(g.value(loss).item())
}

fn probe_loss(model: &Model<f64>, probes: &ProbeHeads<f64>, batch: &EpisodeBatch<f64>) -> Result<f64> {
    let mut g = Graph::inference();
    let trace = model.forward(&mut g, batch)?;
    let out = per_stream_heads(&mut g, &trace, &batch.labels, probes)?;
    Ok(g.value(out.loss).item())
}

struct Coord {
    tensor: usize,
    index: usize,
}

fn check_store(
    store: &ParamStore<f64>,
    analytic: &crate::params::GradStore<f64>,
    cfg: &GradcheckConfig,
    loss_at: &(dyn Fn(&ParamStore<f64>) -> Result<f64> + Sync),
) -> Result<Vec<TensorCheck>> {
    let ids: Vec<_> = store.ids().collect();
    let coords: Vec<Coord> = ids
        .iter()
        .enumerate()
        .flat_map(|(t, &id)| (0..store.get(id).numel()).map(move |index| Coord { tensor: t, index }))
        .collect();
    let h = cfg.step;
    let numeric = map_ordered(cfg.parallelism, coords, |c| -> Result<(usize, usize, f64)> {
        let mut p = store.clone();
        let id = ids[c.tensor];
        let x0 = p.get(id).data()[c.index];
        p.get_mut(id).data_mut()[c.index] = x0 + h;
        let up = loss_at(&p)?;
        p.get_mut(id).data_mut()[c.index] = x0 - h;
        let down = loss_at(&p)?;
        Ok((c.tensor, c.index, (up - down) / (2.0 * h)))
    });
    let mut checks: Vec<TensorCheck> = ids
        .iter()
        .map(|&id| {
            let name = store.name(id).to_string();
            TensorCheck {
                group: group_of(&name).to_string(),
                name,
                numel: store.get(id).numel(),
                max_rel: 0.0,
                max_abs: 0.0,
                max_grad: 0.0,
            }
        })
        .collect();
    for r in numeric {
        let (t, i, n) = r?;
        let a = analytic.get(ids[t])[i];
        let err = (a - n).abs();
        let rel = err / a.abs().max(n.abs()).max(cfg.floor);
        let c = &mut checks[t];
        // NaN-propagating maxima so a broken gradient cannot hide.
        c.max_rel = if rel.is_nan() { f64::NAN } else { c.max_rel.max(rel) };
        c.max_abs = c.max_abs.max(err);
        c.max_grad = c.max_grad.max(a.abs());
    }
    Ok(checks)
}

/// Checks every parameter of a fresh model built from `cfg.model` (and of the
/// probe heads when enabled). The model must be 64-bit.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.model.precision != Precision::F64 {
        return Err(Error::config("gradcheck-f64", "gradient checks run at 64-bit precision only"));
    }
    let start = Instant::now();
    let model = Model::<f64>::new(cfg.model.clone())?;
    let batch = random_batch(&cfg.model, cfg.batch, cfg.seed.wrapping_add(1));

    let mut g = Graph::new();
    if let Some(f) = cfg.fault {
        g.inject_fault(f);
    }
    let trace = model.forward(&mut g, &batch)?;
    let loss = model.loss(&mut g, &trace, &batch.labels)?;
    let mut grads = model.params().zero_grads();
    g.backward_into(loss, &mut grads)?;

    let model_loss_at = |p: &ParamStore<f64>| -> Result<f64> {
        let mut m = model.clone();
        m.load_params(p)?;
        model_loss(&m, &batch)
    };
    let mut tensors = check_store(model.params(), &grads, cfg, &model_loss_at)?;

    if cfg.probes {
        let c = &cfg.model;
        let probes = ProbeHeads::<f64>::new(c.n_modalities, c.d_h, c.classes, cfg.seed.wrapping_add(2))?;
        let mut g = Graph::new();
        let trace = model.forward(&mut g, &batch)?;
        let out = per_stream_heads(&mut g, &trace, &batch.labels, &probes)?;
        let mut pg = probes.params().zero_grads();
        g.backward_into(out.loss, &mut pg)?;
        let probe_loss_at = |p: &ParamStore<f64>| -> Result<f64> {
            let mut heads = probes.clone();
            heads.load_params(p)?;
            probe_loss(&model, &heads, &batch)
        };
        tensors.extend(check_store(probes.params(), &pg, cfg, &probe_loss_at)?);
    }
    Ok(GradcheckReport {
        tensors,
        tolerance: cfg.tolerance,
        elapsed: start.elapsed(),
    })
}

/// Numeric gradient of a scalar function of one tensor, by central
/// differences. Test helper for checking individual ops.
pub fn numeric_gradient(x: &Tensor<f64>, step: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    Tensor::from_fn(x.shape(), |i| {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = f(&probe);
        probe.data_mut()[i] = x0 - step;
        let down = f(&probe);
        probe.data_mut()[i] = x0;
        (up - down) / (2.0 * step)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_name_prefix() {
        assert_eq!(group_of("mcu.0.W_f"), "mcu");
        assert_eq!(group_of("head.b_p"), "head");
    }

    #[test]
    fn numeric_gradient_of_square() {
        let x = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = numeric_gradient(&x, 1e-4, |t| t.data().iter().map(|v| v * v).sum());
        for (a, b) in g.data().iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_f32() {
        let cfg = GradcheckConfig {
            model: ModelConfig {
                precision: Precision::F32,
                ..ModelConfig::toy()
            },
            ..GradcheckConfig::default()
        };
        assert_eq!(run_gradcheck(&cfg).unwrap_err().constraint(), Some("gradcheck-f64"));
    }
}
