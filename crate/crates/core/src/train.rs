//! Training and evaluation loops.
//!
//! A batch's gradient is split into a fixed number of micro-batch shards.
//! Each shard builds its own graph, scales its mean loss by `shard/B`, and
//! backpropagates into a private buffer; the buffers are summed in shard
//! order. Results therefore do not depend on how many threads ran the shards.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::exec::{map_ordered, Parallelism};
use crate::network::{EpisodeBatch, Model, ProbeHeads};
use crate::params::GradStore;
use crate::scalar::Scalar;
use crate::synthdata::{argmax, sample_seed, Dataset};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Micro-batch shards per gradient step.
    pub shards: usize,
    pub parallelism: Parallelism,
    /// Seed of the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig::default(),
            shards: 4,
            parallelism: Parallelism::Auto,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch-size-positive", "batch size must be >= 1"));
        }
        if self.shards == 0 {
            return Err(Error::config("shards-positive", "gradient shards must be >= 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("adam-lr-positive", format!("learning rate {} must be > 0", self.adam.lr)));
        }
        Ok(())
    }
}

/// Loss, top-1 accuracy and per-class recall over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Recall per class; `0` for classes with no samples.
    pub per_class: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub samples: usize,
}

#[derive(Clone, Debug, Default)]
struct Tally {
    loss_sum: f64,
    correct: Vec<usize>,
    count: Vec<usize>,
}

impl Tally {
    fn new(classes: usize) -> Self {
        Self {
            loss_sum: 0.0,
            correct: vec![0; classes],
            count: vec![0; classes],
        }
    }

    fn record<T: Scalar>(&mut self, probs: &Tensor<T>, labels: &[usize], mean_loss: f64) {
        let c = self.count.len();
        self.loss_sum += mean_loss * labels.len() as f64;
        for (row, &y) in probs.data().chunks(c).zip(labels) {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
            self.count[y] += 1;
            if argmax(&row) == y {
                self.correct[y] += 1;
            }
        }
    }

    fn merge(&mut self, other: &Tally) {
        self.loss_sum += other.loss_sum;
        for k in 0..self.count.len() {
            self.correct[k] += other.correct[k];
            self.count[k] += other.count[k];
        }
    }

    fn finish(&self) -> Metrics {
        let n: usize = self.count.iter().sum();
        let hits: usize = self.correct.iter().sum();
        Metrics {
            loss: self.loss_sum / n.max(1) as f64,
            accuracy: hits as f64 / n.max(1) as f64,
            per_class: self
                .correct
                .iter()
                .zip(&self.count)
                .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
                .collect(),
            class_counts: self.count.clone(),
            samples: n,
        }
    }
}

fn shard_bounds(len: usize, shards: usize) -> Vec<(usize, usize)> {
    let shards = shards.min(len).max(1);
    let base = len / shards;
    let extra = len % shards;
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let n = base + usize::from(s < extra);
        out.push((start, start + n));
        start += n;
    }
    out
}

/// Result of one sharded forward/backward pass.
pub struct BatchGradient<T> {
    pub loss: f64,
    pub grads: GradStore<T>,
    /// Class probabilities for the whole batch, `B × C`.
    pub probs: Tensor<T>,
}

/// Mean cross-entropy of `batch` and its gradient for every model parameter.
pub fn batch_gradient<T: Scalar>(
    model: &Model<T>,
    batch: &EpisodeBatch<T>,
    shards: usize,
    mode: Parallelism,
) -> Result<BatchGradient<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total = batch.len();
    let parts = map_ordered(mode, shard_bounds(total, shards), |(a, b)| -> Result<_> {
        let sub = batch.slice(a, b);
        let mut g = Graph::new();
        let trace = model.forward(&mut g, &sub)?;
        let loss = model.loss(&mut g, &trace, &sub.labels)?;
        let weight = T::c((b - a) as f64 / total as f64);
        let weighted = g.scale(loss, weight);
        let mut grads = model.params().zero_grads();
        g.backward_into(weighted, &mut grads)?;
        Ok((g.value(weighted).item().to_f64_lossy(), grads, g.value(trace.probs).clone()))
    });
    let mut loss = 0.0;
    let mut grads = model.params().zero_grads();
    let mut probs = Vec::with_capacity(total * model.config().classes);
    for part in parts {
        let (l, gs, p) = part?;
        loss += l;
        grads.add_assign(&gs);
        probs.extend_from_slice(p.data());
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({loss})")));
    }
    Ok(BatchGradient {
        loss,
        grads,
        probs: Tensor::new(vec![total, model.config().classes], probs)?,
    })
}

/// The sample order of epoch `epoch`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// One pass over `indices` in shuffled mini-batches. Metrics are accumulated
/// from the forward passes that produced each update.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    data: &Dataset,
    indices: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<Metrics> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut tally = Tally::new(model.config().classes);
    for chunk in epoch_order(indices, config.seed, epoch).chunks(config.batch_size) {
        let batch = data.batch::<T>(chunk);
        let step = batch_gradient(model, &batch, config.shards, config.parallelism)?;
        adam.step(model.params_mut(), &step.grads)?;
        tally.record(&step.probs, &batch.labels, step.loss);
    }
    Ok(tally.finish())
}

/// Side-effect free evaluation; batches are sharded across threads and
/// reduced in order.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
    mode: Parallelism,
) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.config().classes;
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    let tallies = map_ordered(mode, chunks, |chunk| -> Result<Tally> {
        let batch = data.batch::<T>(chunk);
        let mut g = Graph::inference();
        let trace = model.forward(&mut g, &batch)?;
        let loss = model.loss(&mut g, &trace, &batch.labels)?;
        let mut t = Tally::new(classes);
        t.record(g.value(trace.probs), &batch.labels, g.value(loss).item().to_f64_lossy());
        Ok(t)
    });
    let mut total = Tally::new(classes);
    for t in tallies {
        total.merge(&t?);
    }
    let m = total.finish();
    if !m.loss.is_finite() {
        return Err(Error::NonFinite(format!("evaluation loss ({})", m.loss)));
    }
    Ok(m)
}

/// Final hidden states `h^i_T` for `indices`, one `n × d_h` tensor per
/// stream, computed with the model frozen.
pub fn final_hidden_states<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
    mode: Parallelism,
) -> Result<Vec<Tensor<T>>> {
    let n = model.config().n_modalities;
    let d = model.config().d_h;
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    let parts = map_ordered(mode, chunks, |chunk| -> Result<Vec<Vec<T>>> {
        let batch = data.batch::<T>(chunk);
        let mut g = Graph::inference();
        let trace = model.forward(&mut g, &batch)?;
        Ok(trace.final_hidden().into_iter().map(|h| g.value(h).data().to_vec()).collect())
    });
    let mut out = vec![Vec::with_capacity(indices.len() * d); n];
    for p in parts {
        for (dst, src) in out.iter_mut().zip(p?) {
            dst.extend(src);
        }
    }
    out.into_iter().map(|v| Tensor::new(vec![indices.len(), d], v)).collect()
}

fn rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], data).expect("row gather")
}

/// Per-stream accuracy of linear probes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeMetrics {
    pub stream_loss: Vec<f64>,
    pub stream_accuracy: Vec<f64>,
}

/// Trains the probe heads on a frozen model. Because the model cannot change,
/// its final hidden states are computed once and the probes are fitted on
/// them; this is the same optimisation as backpropagating `L_self` through a
/// detached forward pass.
pub fn train_probes<T: Scalar>(
    model: &Model<T>,
    probes: &mut ProbeHeads<T>,
    data: &Dataset,
    indices: &[usize],
    config: &TrainConfig,
) -> Result<ProbeMetrics> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let feats = final_hidden_states(model, data, indices, 64, config.parallelism)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    let mut adam = AdamState::new(probes.params(), config.adam)?;
    let positions: Vec<usize> = (0..indices.len()).collect();
    for epoch in 0..config.epochs {
        for chunk in epoch_order(&positions, config.seed ^ 0x9B0B, epoch).chunks(config.batch_size) {
            let mut g = Graph::new();
            let hs: Vec<_> = feats.iter().map(|f| g.constant(rows(f, chunk))).collect();
            let ys: Vec<usize> = chunk.iter().map(|&p| labels[p]).collect();
            let out = probes.forward(&mut g, &hs, &ys)?;
            g.check_finite(out.loss, "probe loss")?;
            let mut grads = probes.params().zero_grads();
            g.backward_into(out.loss, &mut grads)?;
            adam.step(probes.params_mut(), &grads)?;
        }
    }
    probe_metrics_from(probes, &feats, &labels)
}

pub fn evaluate_probes<T: Scalar>(
    model: &Model<T>,
    probes: &ProbeHeads<T>,
    data: &Dataset,
    indices: &[usize],
    mode: Parallelism,
) -> Result<ProbeMetrics> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let feats = final_hidden_states(model, data, indices, 64, mode)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    probe_metrics_from(probes, &feats, &labels)
}

fn probe_metrics_from<T: Scalar>(probes: &ProbeHeads<T>, feats: &[Tensor<T>], labels: &[usize]) -> Result<ProbeMetrics> {
    let mut g = Graph::inference();
    let hs: Vec<_> = feats.iter().map(|f| g.constant(f.clone())).collect();
    let out = probes.forward(&mut g, &hs, labels)?;
    let mut stream_loss = Vec::new();
    let mut stream_accuracy = Vec::new();
    for (&l, &p) in out.stream_losses.iter().zip(&out.probs) {
        let mut t = Tally::new(probes.classes);
        t.record(g.value(p), labels, g.value(l).item().to_f64_lossy());
        let m = t.finish();
        stream_loss.push(m.loss);
        stream_accuracy.push(m.accuracy);
    }
    Ok(ProbeMetrics {
        stream_loss,
        stream_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::synthdata::{TaskKind, TaskSpec};

    fn setup() -> (Model<f32>, Dataset) {
        let spec = TaskSpec {
            kind: TaskKind::Xor,
            train_samples: 24,
            test_samples: 8,
            seed: 2,
            ..TaskSpec::default()
        };
        let data = Dataset::generate(&spec).unwrap();
        let model = Model::new(ModelConfig {
            seed: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        (model, data)
    }

    #[test]
    fn shard_bounds_cover_batch() {
        assert_eq!(shard_bounds(8, 4), vec![(0, 2), (2, 4), (4, 6), (6, 8)]);
        assert_eq!(shard_bounds(5, 4), vec![(0, 2), (2, 3), (3, 4), (4, 5)]);
        assert_eq!(shard_bounds(2, 4), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn sharded_gradient_is_thread_independent() {
        let (model, data) = setup();
        let batch = data.batch::<f32>(&[0, 1, 2, 3, 4, 5, 6]);
        let a = batch_gradient(&model, &batch, 3, Parallelism::Auto).unwrap();
        let b = batch_gradient(&model, &batch, 3, Parallelism::Sequential).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn sharding_matches_whole_batch_gradient() {
        let (model, data) = setup();
        let batch = data.batch::<f32>(&[0, 1, 2, 3, 4, 5]);
        let one = batch_gradient(&model, &batch, 1, Parallelism::Sequential).unwrap();
        let three = batch_gradient(&model, &batch, 3, Parallelism::Sequential).unwrap();
        assert!((one.loss - three.loss).abs() < 1e-5);
        for id in model.params().ids() {
            for (a, b) in one.grads.get(id).iter().zip(three.grads.get(id)) {
                assert!((a - b).abs() < 1e-5, "{}", model.params().name(id));
            }
        }
    }

    #[test]
    fn evaluate_is_side_effect_free() {
        let (model, data) = setup();
        let split = data.train_test().unwrap();
        let a = evaluate(&model, &data, &split.test, 3, Parallelism::Auto).unwrap();
        let b = evaluate(&model, &data, &split.test, 3, Parallelism::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples, 8);
    }

    #[test]
    fn per_class_recall_is_consistent_with_top1() {
        let (model, data) = setup();
        let split = data.train_test().unwrap();
        let m = evaluate(&model, &data, &split.train, 8, Parallelism::Auto).unwrap();
        let weighted: f64 = m.per_class.iter().zip(&m.class_counts).map(|(r, &c)| r * c as f64).sum();
        assert!((weighted / m.samples as f64 - m.accuracy).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (mut model, data) = setup();
        let mut adam = AdamState::new(model.params(), AdamConfig::default()).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_epoch(&mut model, &mut adam, &data, &[], &cfg, 0),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(evaluate(&model, &data, &[], 8, Parallelism::Auto), Err(Error::EmptyDataset)));
    }

    #[test]
    fn adam_steps_once_per_batch() {
        let (mut model, data) = setup();
        let mut adam = AdamState::new(model.params(), AdamConfig::default()).unwrap();
        let split = data.train_test().unwrap();
        train_epoch(&mut model, &mut adam, &data, &split.train, &TrainConfig::default(), 0).unwrap();
        assert_eq!(adam.step, 3);
    }
}
