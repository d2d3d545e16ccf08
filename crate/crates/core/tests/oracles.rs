//! Property checks of the library against the independent oracles in `common`.

mod common;

use fcnad::eval::{roc, LabeledScore};
use fcnad::net::{conv_forward, Activation, ConvLayerSpec};
use fcnad::rfgeom::geometry_of;
use fcnad::Tensor3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_matches_direct_sum(
        groups in 1usize..=2,
        cin_g in 1usize..=4,
        cout_g in 1usize..=4,
        k in 1usize..=5,
        stride in 1usize..=3,
        pad in 0usize..=2,
        h in 6usize..20,
        w in 6usize..20,
        seed in any::<u64>(),
    ) {
        let mut c = ConvLayerSpec::zeros(groups * cin_g, groups * cout_g, k, k, stride, pad, groups, Activation::None).unwrap();
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) - 0.5
        };
        c.weights.iter_mut().for_each(|v| *v = next());
        c.biases.iter_mut().for_each(|v| *v = next());
        let x = Tensor3::from_fn(groups * cin_g, h, w, |_, _, _| next());
        let got = conv_forward(&x, &c).unwrap();
        let (oh, ow, want) = common::naive_conv(&x, &c);
        prop_assert_eq!(got.shape(), (groups * cout_g, oh, ow));
        for (g, e) in got.data().iter().zip(&want) {
            prop_assert!((*g as f64 - e).abs() <= 1e-5 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn receptive_fields_match_perturbation(seed in any::<u64>(), h in 10usize..18, w in 10usize..18) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = common::random_positive_net(&mut rng, h, w);
        let (rows, cols, influence) = common::perturbation_fields(&net, h, w);
        let geo = geometry_of(&net, net.layers.len()).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                let rf = geo.invert(r, c, (rows, cols), (h, w)).unwrap();
                for p in 0..h * w {
                    prop_assert_eq!(rf.contains(p / w, p % w), influence[r * cols + c][p], "cell ({}, {}) pixel {}", r, c, p);
                }
            }
        }
    }

    #[test]
    fn auc_and_eer_match_brute_force(scores in prop::collection::vec((0u8..20, any::<bool>()), 2..80)) {
        let mut scores: Vec<(f64, bool)> = scores.into_iter().map(|(s, p)| (s as f64, p)).collect();
        scores[0].1 = true;
        scores[1].1 = false;
        let labeled: Vec<LabeledScore> = scores
            .iter()
            .enumerate()
            .map(|(k, &(score, positive))| LabeledScore { frame_index: k, score, positive })
            .collect();
        let curve = roc(&labeled).unwrap();
        prop_assert!((curve.auc - common::pairwise_auc(&scores)).abs() <= 1e-9);
        prop_assert!((curve.eer - common::dense_eer(&common::brute_roc(&scores))).abs() <= 1e-6);
    }
}
