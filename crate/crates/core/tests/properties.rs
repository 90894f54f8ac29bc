//! Property tests over crops, keypoints, the distillation objective and the
//! Gaussian embedding distance.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vton::augment::sample_crop_box;
use vton::keypoints::{kmeans_once, threshold_head, HighAttentionPoints};
use vton::metrics::{frechet_embed_distance, gaussian_stats};
use vton::ssl::{cross_entropy, ss_loss};

fn distribution(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn sampled_crops_stay_inside(
        seed in any::<u64>(),
        h in 8usize..128,
        w in 8usize..128,
        lo in 0.05f64..1.0,
        span in 0.0f64..1.0,
        a_lo in 0.25f64..1.0,
        a_span in 1.0f64..4.0,
    ) {
        let scale = (lo, lo + span * (1.0 - lo));
        let aspect = (a_lo, a_lo * a_span);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_crop_box(&mut rng, scale, aspect, (h, w)).unwrap();
        prop_assert!(s.crop.in_bounds());
        if !s.fallback {
            let r = s.crop.area_ratio();
            prop_assert!(r >= scale.0 - 1e-9 && r <= scale.1 + 1e-9);
            let a = s.crop.aspect();
            prop_assert!(a >= aspect.0 * (1.0 - 1e-9) && a <= aspect.1 * (1.0 + 1e-9));
        }
        let (l, t, pw, ph) = s.crop.pixel_rect();
        prop_assert!(pw >= 1 && ph >= 1 && l + pw <= w && t + ph <= h);
    }
}

proptest! {
    #[test]
    fn term_count_matches_pairs(m in 1usize..6, n in 0usize..16) {
        let v = vec![0.25; 4];
        let teacher = vec![v.clone(); m];
        let student = vec![v; m + n];
        let got = ss_loss(&teacher, &student, n).unwrap().terms;
        prop_assert_eq!(got, m * (m + n - 1));
    }

    #[test]
    fn cross_entropy_bounded_by_entropy(
        raw in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 2..20),
    ) {
        let p = distribution(&raw.iter().map(|r| r.0).collect::<Vec<_>>());
        let q = distribution(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
        prop_assert!(cross_entropy(&p, &q).unwrap() >= cross_entropy(&p, &p).unwrap() - 1e-12);
    }

    #[test]
    fn threshold_set_is_minimal(
        row in prop::collection::vec(0.0f64..1.0, 1..64),
        fraction in 0.05f64..1.0,
    ) {
        let total: f64 = row.iter().sum();
        prop_assume!(total > 0.0);
        let kept = threshold_head(&row, fraction);
        let mass: f64 = kept.iter().map(|&i| row[i]).sum();
        prop_assert!(mass >= fraction * total - 1e-12);
        let smallest = kept.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(mass - smallest < fraction * total);
        // nothing left out outweighs anything kept
        for (i, &v) in row.iter().enumerate() {
            if !kept.contains(&i) {
                prop_assert!(v <= smallest);
            }
        }
    }

    #[test]
    fn kmeans_sse_never_increases(
        seed in any::<u64>(),
        pts in prop::collection::vec((0usize..8, 0usize..8, 0.05f64..1.0), 1..40),
        k in 1usize..6,
    ) {
        let mut points = HighAttentionPoints::unweighted((8, 8), pts.iter().map(|p| (p.0, p.1)).collect());
        points.weight = pts.iter().map(|p| p.2).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (set, trace) = kmeans_once(&points, k, &mut rng).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        prop_assert!(set.sse >= 0.0);
    }

    #[test]
    fn frechet_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..12),
        b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..12),
    ) {
        let (sa, sb) = (gaussian_stats(&a).unwrap(), gaussian_stats(&b).unwrap());
        let ab = frechet_embed_distance(&sa, &sb).unwrap();
        let ba = frechet_embed_distance(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-7 * (1.0 + ab));
        prop_assert!(frechet_embed_distance(&sa, &sa).unwrap() <= 1e-7);
    }
}
