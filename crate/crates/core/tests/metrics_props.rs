use proptest::prelude::*;
use sepdiff::metrics::{pit_assign, sdr, si_sdr, swap_rate, Metric, DB_CAP};
use sepdiff::rng;

fn sig(seed: u64, name: &str, n: usize) -> Vec<f64> {
    rng::normals(seed, name, &[], n)
}

proptest! {
    #[test]
    fn si_sdr_ignores_estimate_scale(seed in 0u64..10_000, c in prop_oneof![0.01f64..100.0, -100.0f64..-0.01]) {
        let r = sig(seed, "r", 200);
        let e: Vec<f64> = r.iter().zip(sig(seed, "n", 200)).map(|(a, b)| a + 0.5 * b).collect();
        let scaled: Vec<f64> = e.iter().map(|v| c * v).collect();
        let a = si_sdr(&r, &e).unwrap();
        let b = si_sdr(&r, &scaled).unwrap();
        if c > 0.0 {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!(b <= DB_CAP);
    }

    #[test]
    fn sdr_matches_direct_formula(seed in 0u64..10_000, noise in 0.01f64..3.0) {
        let r = sig(seed, "r", 128);
        let e: Vec<f64> = r.iter().zip(sig(seed, "n", 128)).map(|(a, b)| a + noise * b).collect();
        let num: f64 = r.iter().map(|v| v * v).sum();
        let den: f64 = r.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum();
        let want = 10.0 * (num / den).log10();
        prop_assert!((sdr(&r, &e).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn swap_rate_is_a_fraction(seed in 0u64..10_000, frame in 1usize..100) {
        let refs = vec![sig(seed, "r0", 400), sig(seed, "r1", 400)];
        let ests = vec![sig(seed, "e0", 400), sig(seed, "e1", 400)];
        let s = swap_rate(&refs, &ests, frame).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn pit_undoes_any_permutation(seed in 0u64..10_000, k in 1usize..6, rot in 0usize..6) {
        let refs: Vec<Vec<f64>> = (0..k).map(|j| rng::normals(seed, "ref", &[j as u64], 64)).collect();
        let shift = rot % k;
        let ests: Vec<Vec<f64>> = (0..k).map(|j| refs[(j + shift) % k].clone()).collect();
        let a = pit_assign(&refs, &ests, Metric::SiSdr).unwrap();
        for (src, est) in a.perm.iter().enumerate() {
            prop_assert_eq!(refs[src].clone(), ests[*est].clone());
        }
        prop_assert!(a.scores.iter().all(|s| *s == DB_CAP));
    }
}

#[test]
fn swapped_halves_count_as_swaps() {
    let r0 = sig(1, "r0", 400);
    let r1 = sig(1, "r1", 400);
    // the second half of each estimate follows the other reference
    let e0: Vec<f64> = r0[..300].iter().chain(&r1[300..]).copied().collect();
    let e1: Vec<f64> = r1[..300].iter().chain(&r0[300..]).copied().collect();
    let s = swap_rate(&[r0, r1], &[e0, e1], 100).unwrap();
    assert!((s - 0.25).abs() < 1e-12, "{s}");
}

#[test]
fn degenerate_inputs() {
    assert!(si_sdr(&[], &[]).is_err());
    assert!(si_sdr(&[1.0, 2.0], &[1.0]).is_err());
    assert!(swap_rate(&[vec![1.0; 4]], &[vec![1.0; 4]], 2).is_err());
    assert!(pit_assign(&vec![vec![1.0]; 9], &vec![vec![1.0]; 9], Metric::Sdr).is_err());
}
