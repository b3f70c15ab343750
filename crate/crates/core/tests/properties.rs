use std::collections::BTreeSet;

use lfr_core::eval::{bleu, token_accuracy};
use lfr_core::fisher::{fisher_from_examples, FisherDiag};
use lfr_core::region::{project, search_cm, RegionSearchConfig};
use lfr_core::stats::spearman;
use lfr_core::tasks::{Corpus, Direction, Pair};
use lfr_core::tensor::{Gradients, ParamStore, Tensor};
use lfr_core::trainer::temperature_probabilities;
use proptest::prelude::*;

fn store(name: &str, v: &[f64]) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(name, Tensor::from_vec(v.to_vec()));
    p
}

fn diag(v: &[f64]) -> FisherDiag {
    FisherDiag {
        values: [("w".to_string(), Tensor::from_vec(v.to_vec()))].into(),
        sample_count: 1,
        source_data_id: "p".into(),
    }
}

fn theta_and_fisher() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0.0f64..3.0, n),
        )
    })
}

fn sentences() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(4u32..12, 1..8), 1..6)
}

fn cm(theta: &[f64], f: &[f64], rho: f64, lambda: f64) -> lfr_core::region::UpdateRegion {
    let cfg = RegionSearchConfig { rho, lambda, ..RegionSearchConfig::default() };
    search_cm(&store("w", theta), &BTreeSet::new(), &diag(f), &cfg).unwrap()
}

proptest! {
    #[test]
    fn projection_lands_in_box_and_is_idempotent(
        (theta, f) in theta_and_fisher(),
        rho in 0.0f64..=100.0,
        lambda in 0.0f64..1.0,
        noise in prop::collection::vec(-10.0f64..10.0, 40),
    ) {
        let region = cm(&theta, &f, rho, lambda);
        let moved: Vec<f64> = theta.iter().zip(&noise).map(|(t, n)| t + n).collect();
        let mut p = store("w", &moved);
        project(&mut p, &region).unwrap();
        prop_assert!(region.contains(&p));
        for (v, t0) in p.get("w").unwrap().data().iter().zip(&theta) {
            prop_assert!((v - t0).abs() <= lambda * t0.abs());
        }
        let once = p.clone();
        project(&mut p, &region).unwrap();
        prop_assert!(p.bit_identical(&once));
    }

    #[test]
    fn cm_regions_shrink_with_rho_and_grow_with_lambda(
        (theta, f) in theta_and_fisher(),
        r1 in 0.0f64..=100.0,
        r2 in 0.0f64..=100.0,
        l1 in 0.0f64..1.0,
        l2 in 0.0f64..1.0,
    ) {
        let (rlo, rhi) = (r1.min(r2), r1.max(r2));
        prop_assert!(cm(&theta, &f, rhi, 0.1).is_subset_of(&cm(&theta, &f, rlo, 0.1)));
        let (llo, lhi) = (l1.min(l2), l1.max(l2));
        prop_assert!(cm(&theta, &f, 75.0, llo).is_subset_of(&cm(&theta, &f, 75.0, lhi)));
    }

    #[test]
    fn fisher_is_nonnegative(grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..20)) {
        let params = store("w", &[0.0; 5]);
        let n = grads.len();
        let fd = fisher_from_examples(&params, n, "g", |i| {
            let mut g = Gradients::new();
            g.insert("w", grads[i].clone());
            Ok(g)
        })
        .unwrap();
        prop_assert!(fd.values["w"].data().iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn bleu_bounded_and_order_invariant(hyp in sentences(), refs in sentences(), rot in 0usize..6) {
        let k = hyp.len().min(refs.len());
        let (h, r) = (&hyp[..k], &refs[..k]);
        let b = bleu(h, r).unwrap();
        prop_assert!((0.0..=100.0).contains(&b));
        let s = rot % k;
        let rotate = |v: &[Vec<u32>]| -> Vec<Vec<u32>> { v[s..].iter().chain(&v[..s]).cloned().collect() };
        let b2 = bleu(&rotate(h), &rotate(r)).unwrap();
        prop_assert!((b - b2).abs() < 1e-9);
        if r.iter().any(|x| x.len() >= 4) {
            prop_assert!((bleu(r, r).unwrap() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fixing_a_hypothesis_never_lowers_accuracy(hyp in sentences(), refs in sentences(), pick in 0usize..6) {
        let k = hyp.len().min(refs.len());
        let mut h = hyp[..k].to_vec();
        let r = &refs[..k];
        let before = token_accuracy(&h, r).unwrap();
        h[pick % k] = r[pick % k].clone();
        let after = token_accuracy(&h, r).unwrap();
        prop_assert!((0.0..=1.0).contains(&before));
        prop_assert!(after >= before);
    }

    #[test]
    fn temperature_probabilities_normalised_and_ordered(
        sizes in prop::collection::vec(1usize..100_000, 1..6),
        t in 1.0f64..100.0,
    ) {
        let p = temperature_probabilities(&sizes, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..sizes.len() {
            for j in 0..sizes.len() {
                if sizes[i] > sizes[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn corpus_text_round_trip(pairs in prop::collection::vec((prop::collection::vec(0u32..500, 1..9), prop::collection::vec(0u32..500, 1..9)), 0..10)) {
        let c = Corpus {
            id: "c".into(),
            direction: Direction::new(1, 0),
            pairs: pairs.into_iter().map(|(src, tgt)| Pair { src, tgt }).collect(),
            seed: 3,
        };
        let back = Corpus::from_text("c", c.direction, 3, &c.to_text()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn spearman_of_monotone_map_is_one(xs in prop::collection::vec(-100.0f64..100.0, 3..20)) {
        let distinct: BTreeSet<u64> = xs.iter().map(|x| x.to_bits()).collect();
        prop_assume!(distinct.len() == xs.len());
        let ys: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0).collect();
        prop_assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
    }
}
