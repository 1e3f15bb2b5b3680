use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use aliasblock::assign::optimal_assignment;
use aliasblock::balance::{permutation_balance_pvalue, truncated_product};
use aliasblock::outcome::{amplify, signed_rank_gamma, tail, tail_transform, wilcoxon_hl};

fn finite() -> impl Strategy<Value = f64> {
    (-1000i32..1000).prop_map(|v| v as f64 / 10.0)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    permutations(n - 1)
        .into_iter()
        .flat_map(|p| {
            (0..n).map(move |pos| {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                q
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn assignment_is_optimal(n in 1usize..=6, cells in prop::collection::vec(0u32..50, 36)) {
        let m = DMatrix::from_fn(n, n, |r, c| cells[r * 6 + c] as f64);
        let best = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(r, &c)| m[(r, c)]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let a = optimal_assignment(&m).unwrap();
        prop_assert_eq!(a.cost, best);
        // Adding a constant to a row leaves the optimal columns optimal.
        let mut shifted = m.clone();
        for c in 0..n {
            shifted[(0, c)] += 7.0;
        }
        prop_assert_eq!(optimal_assignment(&shifted).unwrap().cost, best + 7.0);
    }

    #[test]
    fn truncated_product_at_one_is_fisher(p in prop::collection::vec(1e-6f64..1.0, 1..10)) {
        let x = -2.0 * p.iter().map(|v| v.ln()).sum::<f64>();
        let fisher = ChiSquared::new(2.0 * p.len() as f64).unwrap().sf(x);
        prop_assert!((truncated_product(&p, 1.0).unwrap() - fisher).abs() < 1e-9);
    }

    #[test]
    fn truncated_product_is_monotone(p in prop::collection::vec(0.0f64..=1.0, 1..8), i in 0usize..8, bump in 0.0f64..0.5, tau in 0.01f64..=1.0) {
        let i = i % p.len();
        let base = truncated_product(&p, tau).unwrap();
        let mut q = p.clone();
        q[i] = (q[i] + bump).min(1.0);
        prop_assert!(truncated_product(&q, tau).unwrap() >= base - 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn permutation_pvalue_is_symmetric(a in prop::collection::vec(finite(), 1..12), b in prop::collection::vec(finite(), 1..12), seed in any::<u64>()) {
        let p = permutation_balance_pvalue(&a, &b, 500, seed).unwrap();
        let q = permutation_balance_pvalue(&b, &a, 500, seed).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        // Exact enumeration applies to both orders at these sizes or neither.
        let n = a.len() + b.len();
        let small = (1..=a.len()).fold(1.0, |acc, k| acc * (n - a.len() + k) as f64 / k as f64) <= 500.0;
        if small {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn tail_is_odd_increasing_and_bounded(y in -1e4f64..1e4, z in -1e4f64..1e4, beta in 0.01f64..100.0) {
        prop_assert_eq!(tail(-y, beta), -tail(y, beta));
        prop_assert!(tail(y, beta).abs() < 2.0 * beta || y.abs() <= beta);
        if y < z {
            prop_assert!(tail(y, beta) <= tail(z, beta));
        }
    }

    #[test]
    fn tail_transform_uses_the_quantile(v in prop::collection::vec(finite(), 1..40)) {
        let (t, beta) = tail_transform(&v, 0.8).unwrap();
        prop_assert!(beta >= 0.0);
        let inside = v.iter().zip(&t).filter(|(a, _)| a.abs() <= beta).all(|(a, b)| a == b);
        prop_assert!(inside);
    }

    #[test]
    fn hodges_lehmann_equivariance(a in prop::collection::vec(finite(), 1..15), b in prop::collection::vec(finite(), 1..15), c in -50i32..50) {
        let c = c as f64;
        let base = wilcoxon_hl(&a, &b).unwrap();
        let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
        let moved = wilcoxon_hl(&shifted, &b).unwrap();
        prop_assert!((moved.hl_estimate - base.hl_estimate - c).abs() < 1e-9);
        let swapped = wilcoxon_hl(&b, &a).unwrap();
        prop_assert!((swapped.hl_estimate + base.hl_estimate).abs() < 1e-9);
        prop_assert!((swapped.p_two_sided - base.p_two_sided).abs() < 1e-9);
        prop_assert!(base.ci_95.0 <= base.hl_estimate + 1e-9 && base.hl_estimate <= base.ci_95.1 + 1e-9);
    }

    #[test]
    fn sensitivity_bounds_bracket(v in prop::collection::vec(finite(), 1..40), g in 1.0f64..6.0) {
        let r = signed_rank_gamma(&v, g).unwrap();
        prop_assert!(r.lower_p <= r.upper_p + 1e-12);
        let one = signed_rank_gamma(&v, 1.0).unwrap();
        prop_assert!((one.upper_p - one.lower_p).abs() < 1e-12);
        prop_assert!(r.upper_p >= one.upper_p - 1e-12);
    }

    #[test]
    fn amplification_is_symmetric(l in 1.0f64..50.0, d in 1.0f64..50.0) {
        let g = amplify(l, d).unwrap();
        prop_assert_eq!(g, amplify(d, l).unwrap());
        prop_assert!(g >= 1.0 && g <= l.min(d) + 1e-12);
    }
}
