use proptest::prelude::*;

use waffle_core::data::{
    multimodal_preset, partition_multimodal, partition_unimodal, synth_dataset, ClientData, GroupSpec, GroupTag,
};
use waffle_core::federation::{aggregate_mean, deserialize_update, sample_clients, serialize_update};
use waffle_core::ibp::{kl_bernoulli, kl_kumaraswamy_beta, prior_pi};
use waffle_core::metrics::{fairness_report, ClientEvalRecord};
use waffle_core::model::{compose_weight, forward, FactorDictionary, FactorScores, LayerParams, ModelConfig};
use waffle_core::{DenseMatrix, RngStream};

fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn outer_product_sum(w_a: &DenseMatrix, lambda: &[f64], w_b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(w_a.rows(), w_b.cols(), |i, j| {
        (0..lambda.len())
            .map(|k| lambda[k] * w_a.get(i, k) * w_b.get(k, j))
            .sum()
    })
}

fn client_classes(c: &ClientData) -> Vec<usize> {
    let mut classes: Vec<usize> = c.train.labels().iter().chain(c.test.labels()).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

fn assert_disjoint(clients: &[ClientData]) {
    let mut seen: Vec<usize> = clients
        .iter()
        .flat_map(|c| c.train.origin().iter().chain(c.test.origin()))
        .copied()
        .collect();
    let n = seen.len();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), n, "an example was dealt twice");
}

fn small_factor_model(factors: usize) -> ModelConfig {
    ModelConfig::mlp("tiny", 5, &[4], 3, Some(factors)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_is_a_sum_of_rank_one_factors(j in 1usize..7, m in 1usize..7, f in 1usize..7, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0, 0, 0);
        let w_a = random_matrix(&mut rng, j, f);
        let w_b = random_matrix(&mut rng, f, m);
        let r = rng.uniform_vec(f);
        let b: Vec<f64> = (0..f).map(|_| if rng.uniform() < 0.5 { 0.0 } else { rng.uniform() }).collect();
        let lambda: Vec<f64> = r.iter().zip(&b).map(|(r, b)| r * b).collect();
        let got = compose_weight(&w_a, &r, &b, &w_b).unwrap();
        let want = outer_product_sum(&w_a, &lambda, &w_b);
        prop_assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn rescaling_r_against_w_a_is_invisible(j in 1usize..7, m in 1usize..7, f in 1usize..7, c in 0.1f64..10.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 1, 0, 0);
        let w_a = random_matrix(&mut rng, j, f);
        let w_b = random_matrix(&mut rng, f, m);
        let r = rng.uniform_vec(f);
        let b = rng.uniform_vec(f);
        let base = compose_weight(&w_a, &r, &b, &w_b).unwrap();
        let r_scaled: Vec<f64> = r.iter().map(|v| v * c).collect();
        let w_a_scaled = w_a.map(|v| v / c);
        let moved = compose_weight(&w_a_scaled, &r_scaled, &b, &w_b).unwrap();
        let scale = base.as_slice().iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        prop_assert!(base.max_abs_diff(&moved).unwrap() <= 1e-12 * scale);
    }

    #[test]
    fn inactive_factor_is_ignored(f in 2usize..6, k_raw in any::<usize>(), seed in any::<u64>()) {
        let model = small_factor_model(f);
        let k = k_raw % f;
        let mut rng = RngStream::new(seed, 2, 0, 0);
        let dict = FactorDictionary::init(&model, seed);
        let mut scores = FactorScores::ones(&model);
        scores.layers[0][k] = 0.0;
        let x = random_matrix(&mut rng, 3, 5);
        let before = forward(&model, &dict, &scores, &x).unwrap();

        let mut changed = dict.clone();
        if let LayerParams::Factorized { w_a, w_b, .. } = &mut changed.layers[0] {
            for i in 0..w_a.rows() { w_a.set(i, k, 100.0 * rng.normal()); }
            for j in 0..w_b.cols() { w_b.set(k, j, 100.0 * rng.normal()); }
        }
        let after = forward(&model, &changed, &scores, &x).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn stick_breaking_is_non_increasing(v in proptest::collection::vec(1e-6f64..=1.0, 1..40)) {
        let pi = prior_pi(&v).unwrap();
        prop_assert!(pi.iter().all(|&p| p > 0.0 && p <= 1.0));
        prop_assert!(pi.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bernoulli_divergence_is_non_negative(pairs in proptest::collection::vec((0.001f64..0.999, 0.001f64..0.999), 1..20)) {
        let (q, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(kl_bernoulli(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_bernoulli(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn bernoulli_divergence_vanishes_only_at_equality(q in 0.01f64..0.99, delta in 0.01f64..0.5) {
        let p = if q + delta < 0.99 { q + delta } else { q - delta };
        prop_assume!(p > 0.0);
        prop_assert!(kl_bernoulli(&[q], &[p]).unwrap() > 0.0);
    }

    #[test]
    fn kumaraswamy_divergence_is_non_negative(c in 0.2f64..8.0, d in 0.2f64..8.0, alpha in 0.2f64..8.0) {
        prop_assert!(kl_kumaraswamy_beta(&[c], &[d], alpha).unwrap() >= -1e-12);
    }

    #[test]
    fn weighted_average_matches_scalar_oracle(n in 1usize..5, seed in any::<u64>()) {
        let model = small_factor_model(3);
        let mut rng = RngStream::new(seed, 3, 0, 0);
        let updates: Vec<FactorDictionary> = (0..n).map(|i| FactorDictionary::init(&model, seed.wrapping_add(i as u64))).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let total: f64 = weights.iter().sum();
        let avg = aggregate_mean(&updates, &weights).unwrap();
        for (t, got) in avg.tensors().into_iter().enumerate() {
            for e in 0..got.len() {
                let want: f64 = updates.iter().zip(&weights).map(|(u, w)| w * u.tensors()[t].as_slice()[e]).sum::<f64>() / total;
                prop_assert!((got.as_slice()[e] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn wire_round_trip_is_single_precision(seed in any::<u64>(), sender in any::<u64>(), round in any::<u64>()) {
        let model = small_factor_model(4);
        let dict = FactorDictionary::init(&model, seed);
        let msg = deserialize_update(&serialize_update(&dict, sender, round)).unwrap();
        prop_assert_eq!(msg.sender, sender);
        prop_assert_eq!(msg.round, round);
        let back = msg.to_dictionary(&model).unwrap();
        for (a, b) in dict.tensors().into_iter().zip(back.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert_eq!(*y, f64::from(*x as f32));
            }
        }
    }

    #[test]
    fn sampling_draws_distinct_ids(n in 1usize..300, fraction in 0.001f64..=1.0, seed in any::<u64>(), round in 0usize..1000) {
        let chosen = sample_clients(n, fraction, seed, round);
        let expected = ((fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        prop_assert_eq!(chosen.len(), expected);
        prop_assert!(chosen.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(chosen.iter().all(|&i| i < n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unimodal_partition_invariants(m in 1usize..4, z in 1usize..4, seed in any::<u64>()) {
        // 6·m clients with Z shards each always divide evenly over 6 classes.
        let clients = 6 * m;
        let data = synth_dataset(6, 40, 3, 5).unwrap();
        let parts = partition_unimodal(&data, clients, z, 0.2, seed).unwrap();
        prop_assert_eq!(parts.len(), clients);
        assert_disjoint(&parts);
        let sizes: Vec<usize> = parts.iter().map(|c| c.train.len() + c.test.len()).collect();
        prop_assert!(sizes.iter().all(|&s| s == sizes[0]));
        for c in &parts {
            prop_assert!(client_classes(c).len() <= z);
        }
        let again = partition_unimodal(&data, clients, z, 0.2, seed).unwrap();
        for (a, b) in parts.iter().zip(&again) {
            prop_assert_eq!(a.train.origin(), b.train.origin());
            prop_assert_eq!(a.test.origin(), b.test.origin());
        }
    }

    #[test]
    fn multimodal_groups_stay_in_their_classes(m1 in 1usize..3, m2 in 1usize..3, z in 1usize..3, seed in any::<u64>()) {
        let (n1, n2) = (5 * m1, 5 * m2);
        let data = synth_dataset(10, 60, 4, 6).unwrap();
        let (mut maj, mut min) = multimodal_preset("mnist").unwrap();
        maj.clients = n1;
        min.clients = n2;
        let parts = partition_multimodal(&data, &maj, &min, z, 0.2, seed).unwrap();
        prop_assert_eq!(parts.len(), n1 + n2);
        assert_disjoint(&parts);
        let sizes: Vec<usize> = parts.iter().map(|c| c.train.len() + c.test.len()).collect();
        prop_assert!(sizes.iter().all(|&s| s == sizes[0]));
        for c in &parts {
            let group: &GroupSpec = match c.group {
                GroupTag::Majority => &maj,
                GroupTag::Minority => &min,
                GroupTag::None => panic!("multimodal client without a group"),
            };
            let classes = client_classes(c);
            prop_assert!(classes.len() <= z);
            prop_assert!(classes.iter().all(|k| group.classes.contains(k)));
        }
        let again = partition_multimodal(&data, &maj, &min, z, 0.2, seed).unwrap();
        for (a, b) in parts.iter().zip(&again) {
            prop_assert_eq!(a.train.origin(), b.train.origin());
        }
    }

    #[test]
    fn fairness_ignores_record_order(accs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 2..40), seed in any::<u64>()) {
        let mut records: Vec<ClientEvalRecord> = accs.iter().enumerate().map(|(i, &(a, maj))| ClientEvalRecord {
            client_id: i,
            group: if maj { GroupTag::Majority } else { GroupTag::Minority },
            accuracy: a,
        }).collect();
        records[0].group = GroupTag::Majority;
        records[1].group = GroupTag::Minority;
        let base = fairness_report(&records).unwrap();
        RngStream::new(seed, 0, 0, 0).shuffle(&mut records);
        let shuffled = fairness_report(&records).unwrap();
        prop_assert!((base.majority - shuffled.majority).abs() < 1e-9);
        prop_assert!((base.minority - shuffled.minority).abs() < 1e-9);
        prop_assert!((base.gap - shuffled.gap).abs() < 1e-9);
        prop_assert!((base.variance - shuffled.variance).abs() < 1e-9);
        prop_assert!((base.gap - (base.majority - base.minority)).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_moves_means_only(accs in proptest::collection::vec(0.0f64..=0.8, 4..40), shift in 0.0f64..0.2) {
        let records = |delta: f64| -> Vec<ClientEvalRecord> {
            accs.iter().enumerate().map(|(i, &a)| ClientEvalRecord {
                client_id: i,
                group: if i % 2 == 0 { GroupTag::Majority } else { GroupTag::Minority },
                accuracy: a + delta,
            }).collect()
        };
        let base = fairness_report(&records(0.0)).unwrap();
        let moved = fairness_report(&records(shift)).unwrap();
        prop_assert!((moved.majority - base.majority - 100.0 * shift).abs() < 1e-9);
        prop_assert!((moved.minority - base.minority - 100.0 * shift).abs() < 1e-9);
        prop_assert!((moved.gap - base.gap).abs() < 1e-9);
        prop_assert!((moved.variance - base.variance).abs() < 1e-7);
    }

    #[test]
    fn variance_matches_brute_force(accs in proptest::collection::vec(0.0f64..=1.0, 2..60)) {
        let records: Vec<ClientEvalRecord> = accs.iter().enumerate().map(|(i, &a)| ClientEvalRecord {
            client_id: i,
            group: if i % 3 == 0 { GroupTag::Minority } else { GroupTag::Majority },
            accuracy: a,
        }).collect();
        let pct: Vec<f64> = accs.iter().map(|a| 100.0 * a).collect();
        let n = pct.len() as f64;
        let mean = pct.iter().sum::<f64>() / n;
        let brute = pct.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((fairness_report(&records).unwrap().variance - brute).abs() <= 1e-10);
    }
}
