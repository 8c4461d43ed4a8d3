use armo_core::debias::{adjust, spearman, DebiasProfile};
use armo_core::eval::{pairwise_accuracy, weighted_score, CategoryResult};
use armo_core::feature_store::{merge_stores, normalize_rating, FeatureStore, PairRecord, RatedRecord, RatingScale};
use armo_core::gating::{bt_loss, gate_forward, GatingNetwork};
use proptest::prelude::*;

fn rated_record(d: usize, k: usize) -> impl Strategy<Value = RatedRecord> {
    (
        prop::collection::vec(-1e6f64..1e6, d),
        prop::collection::vec(0.0f64..=1.0, k),
        prop::collection::vec(any::<bool>(), k),
    )
        .prop_map(|(feature, rating, mask)| {
            let rating = rating.iter().zip(&mask).map(|(&r, &m)| if m { r } else { 0.0 }).collect();
            RatedRecord { feature, rating, mask }
        })
}

fn rated_store() -> impl Strategy<Value = FeatureStore> {
    (1usize..6, 1usize..12).prop_flat_map(|(d, k)| {
        prop::collection::vec(rated_record(d, k), 0..20)
            .prop_map(move |records| FeatureStore::rated(d, (0..k).map(|j| format!("o{j}")).collect(), records))
    })
}

fn categories() -> impl Strategy<Value = Vec<CategoryResult>> {
    prop::collection::vec((0.0f64..=1.0, 0.01f64..10.0), 1..8).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (accuracy, weight))| CategoryResult {
                name: format!("c{i}"),
                accuracy,
                weight,
                n_pairs: None,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn store_bytes_round_trip(store in rated_store()) {
        let bytes = store.to_bytes().unwrap();
        let back = FeatureStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, store);
    }

    #[test]
    fn normalization_is_affine(lo in -100f64..100.0, width in 0.1f64..100.0, t in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        let scale = RatingScale::new("x", lo, lo + width).unwrap();
        prop_assert_eq!(normalize_rating(lo, &scale).unwrap(), 0.0);
        prop_assert_eq!(normalize_rating(lo + width, &scale).unwrap(), 1.0);
        let (a, b) = (lo + t * width, lo + u * width);
        let (na, nb) = (normalize_rating(a, &scale).unwrap(), normalize_rating(b, &scale).unwrap());
        prop_assert!((na - nb - (a - b) / width).abs() <= 1e-9);
        prop_assert!(normalize_rating(lo - 1.0, &scale).is_err());
    }

    #[test]
    fn merge_preserves_values_and_counts(a in rated_store(), b in rated_store()) {
        let b = FeatureStore::rated(
            a.d,
            b.objective_names.iter().map(|n| format!("b-{n}")).collect(),
            b.rated_records().unwrap().iter().map(|r| RatedRecord {
                feature: vec![0.5; a.d],
                ..r.clone()
            }).collect(),
        );
        let merged = merge_stores(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(merged.len(), a.len() + b.len());
        let counts = merged.present_counts();
        prop_assert_eq!(&counts[..a.k()], &a.present_counts()[..]);
        prop_assert_eq!(&counts[a.k()..], &b.present_counts()[..]);
        for (m, r) in merged.rated_records().unwrap().iter().zip(a.rated_records().unwrap()) {
            for j in 0..a.k() {
                prop_assert_eq!(m.present(j), r.present(j));
            }
            prop_assert!(m.mask[a.k()..].iter().all(|&x| !x));
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms_and_is_symmetric(
        pairs in prop::collection::vec((-50i32..50, -50i32..50), 2..40),
        shift in -10f64..10.0,
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let rho = spearman(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&rho));
        prop_assert_eq!(rho, spearman(&b, &a).unwrap());
        let t: Vec<f64> = a.iter().map(|x| (x / 10.0).exp() + shift).collect();
        prop_assert!((spearman(&t, &b).unwrap() - rho).abs() <= 1e-12);
    }

    #[test]
    fn adjust_is_linear(
        r in prop::collection::vec(-10f64..10.0, 3),
        s in prop::collection::vec(-10f64..10.0, 3),
        l0 in 0f64..5.0, l1 in 0f64..5.0, c in -3f64..3.0,
    ) {
        let p = DebiasProfile { lambda: vec![l0, l1, 1.0], ..DebiasProfile::identity(3, 2, "p").unwrap() };
        let sum: Vec<f64> = r.iter().zip(&s).map(|(x, y)| x + c * y).collect();
        let lhs = adjust(&sum, &p).unwrap();
        let (ar, as_) = (adjust(&r, &p).unwrap(), adjust(&s, &p).unwrap());
        for i in 0..3 {
            prop_assert!((lhs[i] - (ar[i] + c * as_[i])).abs() <= 1e-9);
        }
        prop_assert_eq!(ar[2], 0.0);
    }

    #[test]
    fn bt_pair_sum_is_at_least_two_ln2(rc in -50f64..50.0, rr in -50f64..50.0, beta in 0.01f64..10.0) {
        let total = bt_loss(rc, rr, beta).unwrap() + bt_loss(rr, rc, beta).unwrap();
        prop_assert!(total >= 2.0 * std::f64::consts::LN_2 - 1e-15);
        if rc != rr && (beta * (rc - rr)).abs() > 1e-6 {
            prop_assert!(total > 2.0 * std::f64::consts::LN_2);
        }
    }

    #[test]
    fn bt_loss_never_overflows(m in -700f64..700.0) {
        let l = bt_loss(m, 0.0, 1.0).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn weighted_score_is_scale_invariant_and_bounded(cats in categories(), c in 0.01f64..100.0) {
        let s = weighted_score(&cats).unwrap();
        let scaled: Vec<CategoryResult> = cats.iter().map(|x| CategoryResult { weight: x.weight * c, ..x.clone() }).collect();
        prop_assert!((weighted_score(&scaled).unwrap() - s).abs() <= 1e-12);
        let lo = cats.iter().map(|x| x.accuracy).fold(f64::INFINITY, f64::min);
        let hi = cats.iter().map(|x| x.accuracy).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
    }

    #[test]
    fn negated_scorer_flips_accuracy(seeds in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..60)) {
        let pairs = FeatureStore::pairs(1, seeds.iter().map(|&(c, r)| PairRecord {
            prompt: vec![0.0],
            chosen: vec![c],
            rejected: vec![r],
        }).collect());
        prop_assume!(seeds.iter().all(|(c, r)| c != r));
        let up = pairwise_accuracy(|_, x| Ok(x[0]), &pairs).unwrap();
        let down = pairwise_accuracy(|_, x| Ok(-x[0]), &pairs).unwrap();
        prop_assert!((up + down - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gate_output_is_on_the_simplex(
        seed in any::<u64>(),
        scale in 0.01f64..50.0,
        prompt in prop::collection::vec(-1e3f64..1e3, 3),
    ) {
        let mut net = GatingNetwork::new(vec![3, 6, 4], 100.0, seed).unwrap();
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            *p = scale * ((i as f64 * 0.7 + seed as f64 * 1e-3).sin());
        }
        let g = gate_forward(&net, &prompt).unwrap();
        prop_assert!(g.iter().all(|&x| x >= 0.0));
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
