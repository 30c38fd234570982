use proptest::prelude::*;

use mmixer::checkpoint;
use mmixer::gradcheck::random_batch;
use mmixer::synthdata::{split, Dataset, TaskKind, TaskSpec};
use mmixer::{ContentMode, FusionMode, Graph, Model, ModelConfig};

fn mode() -> impl Strategy<Value = (ContentMode, FusionMode)> {
    (0usize..3, 0usize..2).prop_map(|(c, f)| (ContentMode::ALL[c], FusionMode::ALL[f]))
}

fn in_open_unit(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x > 0.0 && x < 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gates_and_states_stay_in_range(seed in 0u64..1_000_000, (content, fusion) in mode(), n in 2usize..4) {
        let cfg = ModelConfig { n_modalities: n, d_h: 4 * n, heads: 2, content, fusion, seed, ..ModelConfig::toy() };
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let batch = random_batch(&cfg, 2, seed);
        let mut g = Graph::inference();
        let tr = model.forward(&mut g, &batch).unwrap();
        for u in &tr.mcu {
            for s in &u.steps {
                prop_assert!(in_open_unit(g.value(s.mix.score).data()));
                prop_assert!(in_open_unit(g.value(s.reset).data()));
                prop_assert!(in_open_unit(g.value(s.update).data()));
                prop_assert!(g.value(s.hidden).max_abs() <= 1.0);
                // f̃ lies between f̄ and ḡ coordinate-wise.
                let (f, gb, m) = (g.value(s.mix.f_bar).data(), g.value(s.mix.g_bar).data(), g.value(s.mix.mixed).data());
                for (k, &x) in m.iter().enumerate() {
                    let (a, b) = (f[k], gb[k]);
                    prop_assert!(x >= a.min(b) - 1e-12 && x <= a.max(b) + 1e-12);
                }
            }
        }
        for up in &tr.bank {
            prop_assert!(in_open_unit(g.value(up.alpha).data()));
        }
        for &a in &tr.attention {
            for row in g.value(a).data().chunks(g.shape(a)[3]) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for row in g.value(tr.probs).data().chunks(cfg.classes) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn checkpoints_round_trip_exactly(seed in 0u64..1_000_000, (content, fusion) in mode()) {
        let cfg = ModelConfig { content, fusion, seed, pos_on_values: seed % 2 == 0, ..ModelConfig::toy() };
        let model = Model::<f64>::new(cfg).unwrap();
        let bytes = checkpoint::encode(&model, None, None);
        let back = checkpoint::decode::<f64>(&bytes).unwrap();
        prop_assert_eq!(&back.config, model.config());
        let restored = back.model().unwrap();
        prop_assert_eq!(restored.params(), model.params());
        // A truncated file is rejected.
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 1);
        prop_assert!(checkpoint::decode::<f64>(&bad).is_err());
    }

    #[test]
    fn split_is_a_stratified_partition(labels in prop::collection::vec(0usize..4, 10..300), seed in any::<u64>()) {
        let parts = split(&labels, &[0.8, 0.2], seed).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..4 {
            let total = labels.iter().filter(|&&l| l == c).count() as f64;
            let train = parts[0].iter().filter(|&&i| labels[i] == c).count() as f64;
            // Each class lands within one sample of its share.
            prop_assert!((train - 0.8 * total).abs() <= 1.0);
        }
        prop_assert_eq!(parts, split(&labels, &[0.8, 0.2], seed).unwrap());
    }

    #[test]
    fn generated_labels_follow_the_task_rule(seed in any::<u64>(), kind in 0usize..3) {
        let kind = [TaskKind::Xor, TaskKind::Redundant, TaskKind::SingleModality][kind];
        let spec = TaskSpec { kind, train_samples: 20, test_samples: 10, frames: 10, d_f: 3, seed, ..TaskSpec::default() };
        let d = Dataset::generate(&spec).unwrap();
        prop_assert_eq!(d.len(), 30);
        for i in 0..d.len() {
            let (a, b) = (d.codes[i][0], d.codes[i][1]);
            let expect = match kind {
                TaskKind::Xor => a ^ b,
                TaskKind::Redundant => { prop_assert_eq!(a, b); a }
                TaskKind::SingleModality => a,
            };
            prop_assert_eq!(d.labels[i], expect);
        }
    }
}
