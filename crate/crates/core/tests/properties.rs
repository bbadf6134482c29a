//! Cross-module invariants checked on random instances.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lyapctl_core::cegis::{cegis_loop, init_training_set, lipschitz_certificate, CegisConfig};
use lyapctl_core::dataset::{
    biased_split, normalize_adjacency, reduce_features, synth_graph, GraphBundle, SplitSpec,
    SynthSpec,
};
use lyapctl_core::neuralnet::{closed_loop_step, lyapunov_loss, one_hot, ClosedLoop, Mlp};
use lyapctl_core::numerics::{argmax, pca_fit, spectral_norm, DenseMatrix};
use lyapctl_core::reconstruct::{accuracy, replace_nodes_and_predict};
use lyapctl_core::sgc::{extract_node_plant, fit_sgc, NodeAffineSystem, SgcConfig};
use lyapctl_core::verifier::{
    bound_conditions, branch_and_bound, check_state, falsify_gradient_all, FalsifierConfig,
    StateBox, VerifierConfig, VerifierOutcome, Violation,
};

fn graph(seed: u64, blocks: usize) -> GraphBundle {
    synth_graph(&SynthSpec {
        blocks,
        nodes_per_block: 15,
        p_in: 0.4,
        p_out: 0.05,
        feature_dim: 12,
        seed,
    })
    .unwrap()
}

fn random_loop(c: usize, seed: u64) -> ClosedLoop {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = 5;
    let weight = DenseMatrix::from_fn(feat, c, |_, _| rng.random_range(-1.5..1.5));
    let offset = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let plant = NodeAffineSystem::new(0, rng.random_range(0.1..1.0), offset, weight).unwrap();
    ClosedLoop::new(
        Mlp::init(&[c, 8, feat], rng.random()).unwrap(),
        plant,
        Mlp::init(&[c, 8, 1], rng.random()).unwrap(),
        one_hot(0, c).unwrap(),
    )
    .unwrap()
}

fn in_simplex(p: &[f64]) -> bool {
    p.iter().all(|&x| x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pca_components_orthonormal(seed in 0u64..1000, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DenseMatrix::from_fn(40, 10, |_, _| rng.random_range(-1.0..1.0));
        let m = pca_fit(&x, k).unwrap();
        let gram = m.components.matmul(&m.components.transpose()).unwrap();
        prop_assert!(gram.max_abs_diff(&DenseMatrix::identity(k)) < 1e-6);
    }

    #[test]
    fn normalized_adjacency_symmetric_and_bounded(seed in 0u64..1000) {
        let g = graph(seed, 3);
        let s = normalize_adjacency(&g.adjacency);
        prop_assert!(s.is_symmetric(1e-12));
        prop_assert!(spectral_norm(&s.to_dense(), 10_000, 1e-12).unwrap() <= 1.0 + 1e-9);
    }

    #[test]
    fn biased_split_partitions_and_is_deterministic(seed in 0u64..1000, bias in 0u64..1000) {
        let g = graph(seed, 3);
        let spec = SplitSpec { per_class_train: 3, val_total: 6, test_total: 12, bias_seed: bias, ppr_teleport: 0.15 };
        let a = biased_split(&g, &spec).unwrap();
        prop_assert_eq!(&a, &biased_split(&g, &spec).unwrap());
        prop_assert_eq!(a.counts(), (9, 6, 12));
        for i in 0..g.num_nodes() {
            prop_assert!([a.train[i], a.val[i], a.test[i]].iter().filter(|&&b| b).count() <= 1);
        }
        for c in 0..3 {
            prop_assert_eq!((0..g.num_nodes()).filter(|&i| a.train[i] && g.labels[i] == c).count(), 3);
        }
    }

    #[test]
    fn plant_matches_model_and_predictions_in_simplex(seed in 0u64..200, node in 0usize..30, zs in 0u64..1000) {
        let mut g = graph(seed, 2);
        g.splits = Some(biased_split(&g, &SplitSpec {
            per_class_train: 3, val_total: 4, test_total: 10, bias_seed: seed, ppr_teleport: 0.15,
        }).unwrap());
        let (model, _) = fit_sgc(&g, &SgcConfig { max_epochs: 50, seed, ..SgcConfig::default() }).unwrap();
        let pred = model.predict(None).unwrap();
        for i in 0..g.num_nodes() {
            prop_assert!(in_simplex(pred.row(i)));
        }
        let plant = extract_node_plant(&model, &g, node).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(zs);
        let z: Vec<f64> = (0..g.feature_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let direct = replace_nodes_and_predict(&g, &model, &z, &[node]).unwrap();
        let via_plant = plant.predict(&z).unwrap();
        for (a, b) in direct.row(node).iter().zip(&via_plant) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn step_in_simplex_and_loss_nonnegative(seed in 0u64..1000, c in 2usize..6) {
        let cl = random_loop(c, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let batch: Vec<Vec<f64>> = (0..8).map(|_| StateBox::unit(c).sample(&mut rng)).collect();
        for y in &batch {
            prop_assert!(in_simplex(&closed_loop_step(&cl, y).unwrap()));
        }
        let (loss, _) = lyapunov_loss(&cl, &batch, 1.0).unwrap();
        prop_assert!(loss.total >= 0.0 && loss.hinge >= 0.0);
    }

    #[test]
    fn enclosures_contain_samples(seed in 0u64..1000, c in 2usize..5, width in 0.001f64..1.0) {
        let cl = random_loop(c, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
        let lower: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..=1.0 - width)).collect();
        let b = StateBox::new(lower.clone(), lower.iter().map(|l| l + width).collect()).unwrap();
        let (v, dv) = bound_conditions(&cl, &b).unwrap();
        for _ in 0..200 {
            let x = b.sample(&mut rng);
            let (val, d) = (cl.v(&x).unwrap(), cl.delta_v(&x).unwrap());
            prop_assert!(v[0] <= val && val <= v[1]);
            prop_assert!(dv[0] <= d && d <= dv[1]);
        }
    }

    #[test]
    fn counterexamples_are_genuine(seed in 0u64..500) {
        let cl = random_loop(2, seed);
        let eps = 0.1;
        let mut found = falsify_gradient_all(&cl, &StateBox::unit(2), eps, &FalsifierConfig { seed, ..FalsifierConfig::default() });
        if let Ok(VerifierOutcome::Violations { counterexamples, .. }) = branch_and_bound(
            &cl,
            &StateBox::unit(2),
            &VerifierConfig { eps, delta: 1e-2, ..VerifierConfig::default() },
        ) {
            found.extend(counterexamples);
        }
        for ce in found {
            prop_assert!(cl.distance_to_equilibrium(&ce.state) >= eps);
            prop_assert!(StateBox::unit(2).contains(&ce.state));
            let (v, dv) = (cl.v(&ce.state).unwrap(), cl.delta_v(&ce.state).unwrap());
            match ce.violation {
                Violation::NonPositiveV => prop_assert!(v <= 0.0),
                Violation::NonDecreasingV => prop_assert!(dv >= 0.0),
            }
            prop_assert_eq!(check_state(&cl, &ce.state, eps), Some(ce.violation));
        }
    }

    #[test]
    fn lipschitz_bound_holds(seed in 0u64..1000, c in 2usize..5) {
        let cl = random_loop(c, seed);
        let bound = lipschitz_certificate(&cl).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let logits = |y: &[f64]| cl.plant.logits(&cl.controller.eval(y).unwrap()).unwrap();
        for _ in 0..50 {
            let a = StateBox::unit(c).sample(&mut rng);
            let b = StateBox::unit(c).sample(&mut rng);
            let dy = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let (la, lb) = (logits(&a), logits(&b));
            let dl = la.iter().zip(&lb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dl <= bound * dy * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn accuracy_matches_counting_oracle(seed in 0u64..1000, n in 1usize..60, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Rounded entries make ties common.
        let pred = DenseMatrix::from_fn(n, c, |_, _| (rng.random_range(0.0..1.0f64) * 3.0).round());
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let mut hit = 0;
        let mut total = 0;
        for i in 0..n {
            if mask[i] {
                total += 1;
                let mut best = 0;
                for j in 1..c {
                    if pred.get(i, j) > pred.get(i, best) {
                        best = j;
                    }
                }
                hit += (best == labels[i]) as usize;
            }
        }
        prop_assert_eq!(accuracy(&pred, &labels, &mask).unwrap(), hit as f64 / total as f64);
    }
}

#[test]
fn replacing_with_existing_features_is_bitwise_noop() {
    let mut g = graph(4, 2);
    g.splits = Some(
        biased_split(
            &g,
            &SplitSpec {
                per_class_train: 3,
                val_total: 4,
                test_total: 10,
                bias_seed: 4,
                ppr_teleport: 0.15,
            },
        )
        .unwrap(),
    );
    let (model, _) = fit_sgc(&g, &SgcConfig::default()).unwrap();
    let before = model.predict(None).unwrap();
    for v in [0, 7, 29] {
        let h = g.features.row(v).to_vec();
        let after = replace_nodes_and_predict(&g, &model, &h, &[v]).unwrap();
        assert_eq!(after.data(), before.data());
    }
}

#[test]
fn argmax_ties_go_to_lowest_index() {
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
}

#[test]
fn certified_loop_recertifies_and_training_set_has_no_duplicates() {
    let raw = graph(1, 2);
    let (mut g, _) = reduce_features(&raw, 10).unwrap();
    g.splits = Some(
        biased_split(
            &g,
            &SplitSpec {
                per_class_train: 4,
                val_total: 6,
                test_total: 10,
                bias_seed: 1,
                ppr_teleport: 0.15,
            },
        )
        .unwrap(),
    );
    let (model, _) = fit_sgc(&g, &SgcConfig::default()).unwrap();
    let node = (0..g.num_nodes())
        .find(|&v| g.splits().unwrap().train[v] && g.labels[v] == 0)
        .unwrap();
    let cfg = CegisConfig {
        delta: 1e-2,
        record_wall_time: false,
        ..CegisConfig::default()
    };
    let (mut cl, mut state) = init_training_set(&model, &g, node, 0, &cfg).unwrap();
    let initial = state.training_states.len();
    let report = cegis_loop(&mut cl, &mut state, &cfg).unwrap();
    assert!(state.training_states.len() >= initial);
    for (i, a) in state.training_states.iter().enumerate() {
        for b in &state.training_states[..i] {
            let d: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(d > 1e-9);
        }
    }
    if report.certified {
        let again = branch_and_bound(&cl, &StateBox::unit(2), &cfg.verifier()).unwrap();
        assert!(again.is_certified());
    }
    assert!(report.certified, "toy instance should certify");
}
