//! Randomised invariants of the losses, memories, filters and metrics.

use proptest::prelude::*;
use rand::Rng;

use vireid::autodiff::{Graph, Tensor};
use vireid::config::{cosine_lr, Modality, Platform, StreamSet};
use vireid::eval::{cosine_distances, rank, TrackletMeta};
use vireid::fusion::{total_loss, LossTerms};
use vireid::intermediary::{anaglyph, loss_cr, EdgeOperator};
use vireid::memory::{build_memory, loss_v2m, SequenceFeature};
use vireid::oracle;
use vireid::rng::derive_rng;
use vireid::selftest::{loss_cases, random_ranking_instance};
use vireid::style::{channel_stats, style_attack, style_augment, BlockFeature, StyleCoeffs};

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.dim(0)).map(|i| t.row(i).to_vec()).collect()
}

fn features(n: usize, d: usize, seed: u64) -> Vec<SequenceFeature> {
    let mut rng = derive_rng(seed, "prop-features", 0);
    (0..n)
        .map(|_| SequenceFeature {
            vector: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
            id: rng.random_range(0..5),
            platform: Platform::ALL[rng.random_range(0..2)],
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_losses_match_oracles_and_are_non_negative(seed in any::<u64>(), d in 2usize..=8) {
        let mut rng = derive_rng(seed, "prop-loss", 0);
        for case in loss_cases(&mut rng, d, 16) {
            let g = Graph::new();
            let got = (case.graph)(g.constant(case.input.clone())).item();
            let want = (case.oracle)(&case.input);
            prop_assert!(got >= 0.0 && want >= 0.0, "{} negative: {got} / {want}", case.name);
            prop_assert!((got - want).abs() <= 1e-5 * want.abs().max(1e-12) + 1e-12, "{}: {got} vs {want}", case.name);
        }
    }

    #[test]
    fn v2m_is_strictly_positive_for_distinct_features(seed in any::<u64>(), b in 2usize..10, d in 2usize..=8) {
        let feats = features(b, d, seed);
        let mem = build_memory(&feats).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::from_rows(&feats.iter().map(|f| f.vector.clone()).collect::<Vec<_>>()));
        let ids: Vec<u32> = feats.iter().map(|f| f.id).collect();
        let platforms: Vec<Platform> = feats.iter().map(|f| f.platform).collect();
        let loss = loss_v2m(x, &ids, &platforms, g.constant(mem.base_tensor()), &mem.cells, 0.07).unwrap().item();
        prop_assert!(loss > 0.0, "loss {loss}");
    }

    #[test]
    fn memory_rows_are_member_means_and_platform_local(seed in any::<u64>(), n in 1usize..30, d in 1usize..=8) {
        let feats = features(n, d, seed);
        let mem = build_memory(&feats).unwrap();
        for (k, key) in mem.cells.iter().enumerate() {
            let members: Vec<_> = feats.iter().filter(|f| (f.id, f.platform) == *key).collect();
            for j in 0..d {
                let mean = members.iter().map(|f| f.vector[j]).sum::<f64>() / members.len() as f64;
                prop_assert!((mem.base[k][j] - mean).abs() <= 1e-6);
            }
        }
        let aerial: Vec<SequenceFeature> = feats.iter().filter(|f| f.platform == Platform::Aerial).cloned().collect();
        if !aerial.is_empty() {
            let only = build_memory(&aerial).unwrap();
            for key in &only.cells {
                prop_assert_eq!(only.base_of(*key), mem.base_of(*key));
            }
        }
    }

    #[test]
    fn cross_reconstruction_is_modality_symmetric(seed in any::<u64>(), n in 1usize..8, d in 1usize..=8) {
        let mut rng = derive_rng(seed, "prop-cr", 0);
        let v = Tensor::from_fn([n, d], |_| rng.random_range(-1.0..1.0));
        let ir = Tensor::from_fn([n, d], |_| rng.random_range(-1.0..1.0));
        let g = Graph::new();
        let a = loss_cr(g.constant(v.clone()), g.constant(ir.clone()), |z| z).unwrap().item();
        let b = loss_cr(g.constant(ir), g.constant(v), |z| z).unwrap().item();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn ranking_matches_counting_oracle(seed in any::<u64>(), filter in any::<bool>()) {
        let mut rng = derive_rng(seed, "prop-rank", 0);
        let (qf, gf, qm, gm) = random_ranking_instance(&mut rng);
        let got = rank(&qf, &gf, &qm, &gm, filter).unwrap();
        let dist = rows(&cosine_distances(&qf, &gf).unwrap());
        let q: Vec<(u32, String)> = qm.iter().map(|m| (m.id, m.camera.clone())).collect();
        let g: Vec<(u32, String, bool)> = gm.iter().map(|m| (m.id, m.camera.clone(), m.is_distractor)).collect();
        let (cmc, aps) = oracle::rank(&dist, &q, &g, filter).unwrap();
        for (a, b) in got.cmc.iter().zip(&cmc).chain(got.per_query_ap.iter().zip(&aps)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!(got.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&got.map) && got.map <= got.cmc[got.cmc.len() - 1] + 1e-12);
    }

    #[test]
    fn distractors_never_raise_average_precision(seed in any::<u64>(), extra in 1usize..6) {
        let mut rng = derive_rng(seed, "prop-distractor", 0);
        let (qf, gf, qm, gm) = random_ranking_instance(&mut rng);
        let base = rank(&qf, &gf, &qm, &gm, true).unwrap();
        let more = Tensor::from_fn([extra, gf.dim(1)], |_| rng.random_range(-1.0..1.0));
        let gf2 = Tensor::concat(&[&gf, &more], 0);
        let mut gm2 = gm.clone();
        for i in 0..extra {
            gm2.push(TrackletMeta { id: qm[i % qm.len()].id, camera: "c2".into(), is_distractor: true });
        }
        let with = rank(&qf, &gf2, &qm, &gm2, true).unwrap();
        for (a, b) in with.per_query_ap.iter().zip(&base.per_query_ap) {
            prop_assert!(*a <= *b + 1e-12);
        }
    }

    #[test]
    fn style_attack_transfers_channel_statistics(
        seed in any::<u64>(), n in 1usize..4, c in 1usize..5, h in 2usize..6, w in 2usize..6,
    ) {
        let mut rng = derive_rng(seed, "prop-style", 0);
        let target = Tensor::from_fn([n, c, h, w], |_| rng.random_range(-2.0..2.0));
        let donor = Tensor::from_fn([n, c, h, w], |_| rng.random_range(-1.0..3.0) * 1.7);
        let (out, diag) = style_attack(&BlockFeature { values: target.clone(), block: 3 }, &BlockFeature { values: donor.clone(), block: 3 }).unwrap();
        prop_assert!(diag.skipped.is_empty());
        let (mo, so) = channel_stats(&out.values);
        let (md, sd) = channel_stats(&donor);
        for k in 0..mo.len() {
            prop_assert!((mo[k] - md[k]).abs() < 1e-4 && (so[k] - sd[k]).abs() < 1e-4);
        }
        let (same, _) = style_attack(&BlockFeature { values: target.clone(), block: 3 }, &BlockFeature { values: target.clone(), block: 3 }).unwrap();
        prop_assert_eq!(same.values, target);
    }

    #[test]
    fn style_augment_scales_within_range(seed in any::<u64>(), infrared in any::<bool>()) {
        let mut rng = derive_rng(seed, "prop-augment", 0);
        let coeffs = StyleCoeffs::sample(&mut rng);
        prop_assert!(coeffs.all().iter().all(|v| (0.5..=1.5).contains(v)));
        let modality = if infrared { Modality::Infrared } else { Modality::Visible };
        let frame = Tensor::from_fn([3, 4, 3], |_| rng.random_range(0.0..1.0));
        prop_assert_eq!(&style_augment(&frame, modality, &StyleCoeffs::IDENTITY, 1.0).unwrap(), &frame);
        let out = style_augment(&frame, modality, &coeffs, 1.0).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn anaglyph_matches_padded_oracle_exactly(
        seed in any::<u64>(), h in 3usize..10, w in 3usize..10, offset in -5i32..5,
    ) {
        let mut rng = derive_rng(seed, "prop-anaglyph", 0);
        let kernel: Vec<f64> = (0..9).map(|_| rng.random_range(-4..=4) as f64).collect();
        let op = EdgeOperator::from_slice(&kernel, offset as f64).unwrap();
        let img = Tensor::from_fn([1, h, w], |_| rng.random_range(0..=255) as f64);
        let got = anaglyph(&img, Modality::Infrared, &op).unwrap();
        let want = oracle::anaglyph(img.data(), h, w, &op);
        prop_assert_eq!(got.data(), want.as_slice());
    }

    #[test]
    fn totals_recombine_from_reported_terms(seed in any::<u64>(), subset in 0usize..7) {
        let mut rng = derive_rng(seed, "prop-total", 0);
        let mask = StreamSet::ABLATION_ORDER[subset];
        let lambdas = [0; 4].map(|_| rng.random_range(0.0..3.0));
        let mut r = || rng.random_range(0.0..10.0);
        let terms = LossTerms { l_id: r(), l_tri: r(), l_sa: Some(r()), l_cr: Some(r()), l_v2m: Some(r()) };
        let rep = total_loss(&terms, mask, lambdas);
        let [a, b, c, d] = lambdas;
        let want = rep.l_id + a * rep.l_tri + b * rep.l_sa + c * rep.l_cr + d * rep.l_v2m;
        prop_assert!((rep.total - want).abs() <= 1e-7);
    }

    #[test]
    fn cosine_schedule_spans_lr_init_to_zero(total in 1usize..5000, lr in 1e-6f64..1.0) {
        prop_assert_eq!(cosine_lr(0, total, lr).unwrap(), lr);
        prop_assert!(cosine_lr(total, total, lr).unwrap() <= lr * 1e-3);
        let mid = cosine_lr(total / 2, total, lr).unwrap();
        prop_assert!(mid <= lr && mid >= 0.0);
    }
}
