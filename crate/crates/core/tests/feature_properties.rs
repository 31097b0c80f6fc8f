use proptest::prelude::*;

use mi_embed::features::{center_distance, pairwise_distance};

fn point_set() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..8).prop_flat_map(|dim| prop::collection::vec(prop::collection::vec(-50.0f64..50.0, dim), 2..20))
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sandwich_bounds(points in point_set()) {
        let c = center_distance(&points).unwrap();
        let p = pairwise_distance(&points).unwrap();
        prop_assert!(c <= p + 1e-9 * c.max(1.0));
        prop_assert!(p <= 2.0 * c + 1e-9 * c.max(1.0));
    }

    #[test]
    fn invariant_under_permutation(points in point_set(), seed in any::<u64>()) {
        let mut shuffled = points.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert!(rel_close(center_distance(&points).unwrap(), center_distance(&shuffled).unwrap()));
        prop_assert!(rel_close(pairwise_distance(&points).unwrap(), pairwise_distance(&shuffled).unwrap()));
    }

    #[test]
    fn invariant_under_translation(points in point_set(), offset in -100.0f64..100.0) {
        let moved: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().enumerate().map(|(j, v)| v + offset * (j as f64 + 1.0)).collect())
            .collect();
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-8 * (1.0 + offset.abs());
        prop_assert!(tol(center_distance(&points).unwrap(), center_distance(&moved).unwrap()));
        prop_assert!(tol(pairwise_distance(&points).unwrap(), pairwise_distance(&moved).unwrap()));
    }

    #[test]
    fn scales_with_absolute_factor(points in point_set(), factor in -10.0f64..10.0) {
        let scaled: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| v * factor).collect()).collect();
        let c = center_distance(&points).unwrap();
        let p = pairwise_distance(&points).unwrap();
        prop_assert!(rel_close(center_distance(&scaled).unwrap(), factor.abs() * c));
        prop_assert!(rel_close(pairwise_distance(&scaled).unwrap(), factor.abs() * p));
    }
}

#[test]
fn fewer_than_two_points_is_rejected() {
    assert!(center_distance(&[vec![1.0, 2.0]]).is_err());
    assert!(pairwise_distance(&[]).is_err());
}

#[test]
fn identical_points_have_zero_spread() {
    let pts = vec![vec![3.0, -1.0]; 5];
    assert_eq!(center_distance(&pts).unwrap(), 0.0);
    assert_eq!(pairwise_distance(&pts).unwrap(), 0.0);
}
