use proptest::prelude::*;
use sepdiff::prior::{tweedie_denoise, GmmComponent};
use sepdiff::signals::HarmonicVoice;
use sepdiff::{rng, BlockDctPrior, GaussianPrior, GmmPrior, NoiseSchedule, ScoreModel};

const H: f64 = 1e-5;

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(200, 1e-4, 2e-2).unwrap()
}

fn gmm(seed: u64, dim: usize, comps: u64) -> GmmPrior {
    let w = 1.0 / comps as f64;
    GmmPrior::new(
        (0..comps)
            .map(|c| GmmComponent {
                weight: w,
                mean: rng::normals(seed, "mean", &[c], dim),
                var: rng::normals(seed, "var", &[c], dim)
                    .iter()
                    .map(|v| 0.2 + 0.5 * v * v)
                    .collect(),
            })
            .collect(),
    )
    .unwrap()
}

fn fd_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let n: f64 = b.iter().map(|y| y * y).sum();
    (d / n).sqrt()
}

#[test]
fn gaussian_score_matches_log_marginal() {
    let s = sched();
    let p = GaussianPrior::new(rng::normals(1, "m", &[], 8), vec![0.3, 0.5, 1.0, 2.0, 0.7, 1.1, 0.4, 3.0]).unwrap();
    for t in [1, 40, 120, 200] {
        let x = rng::normals(1, "x", &[t as u64], 8);
        let fd = fd_gradient(&x, |z| p.log_marginal(&s, z, t).unwrap());
        assert!(rel(&p.score(&s, &x, t).unwrap(), &fd) < 1e-6, "t = {t}");
    }
}

#[test]
fn gmm_score_matches_log_marginal() {
    let s = sched();
    for seed in 0..5 {
        let p = gmm(seed, 6, 3);
        for t in [1, 25, 100, 200] {
            let x = rng::normals(seed, "x", &[t as u64], 6);
            let fd = fd_gradient(&x, |z| p.log_marginal(&s, z, t).unwrap());
            assert!(rel(&p.score(&s, &x, t).unwrap(), &fd) < 1e-6, "seed {seed}, t = {t}");
        }
    }
}

#[test]
fn block_dct_score_matches_log_marginal() {
    let s = sched();
    let voices = [HarmonicVoice::new(300.0, 3), HarmonicVoice::new(1100.0, 2)];
    let p = BlockDctPrior::harmonic_bank(16, 8000, &voices, 0.05).unwrap();
    // two full blocks plus a three-sample tail
    let x = rng::normals(4, "x", &[], 35);
    for t in [5, 80, 200] {
        let fd = fd_gradient(&x, |z| p.log_marginal(&s, z, t).unwrap());
        assert!(rel(&p.score(&s, &x, t).unwrap(), &fd) < 1e-6, "t = {t}");
    }
}

fn check_vjp(model: &dyn ScoreModel, dim: usize, seed: u64) {
    let s = sched();
    for t in [3, 60, 170] {
        let x = rng::normals(seed, "vjp-x", &[t as u64], dim);
        let v = rng::normals(seed, "vjp-v", &[t as u64], dim);
        let denoise = |z: &[f64]| {
            let sc = model.score(&s, z, t).unwrap();
            tweedie_denoise(&s, z, &sc, t).unwrap()
        };
        let fd = fd_gradient(&x, |z| denoise(z).iter().zip(&v).map(|(a, b)| a * b).sum());
        let an = model.measurement_vjp(&s, &x, t, &v).unwrap().unwrap();
        assert!(rel(&an, &fd) < 1e-6, "t = {t}: {}", rel(&an, &fd));
    }
}

#[test]
fn denoiser_jacobians_match_finite_differences() {
    let g = GaussianPrior::new(vec![0.5, -1.0, 2.0], vec![0.3, 1.0, 4.0]).unwrap();
    check_vjp(&g, 3, 1);
    check_vjp(&gmm(2, 5, 4), 5, 2);
    let voices = [HarmonicVoice::new(250.0, 2), HarmonicVoice::new(900.0, 2)];
    let b = BlockDctPrior::harmonic_bank(8, 8000, &voices, 0.1).unwrap();
    check_vjp(&b, 19, 3);
}

#[test]
fn tweedie_is_exact_on_a_grid_of_timesteps() {
    let s = sched();
    let p = GaussianPrior::new(vec![1.0, -2.0, 0.0, 0.25], vec![0.5, 2.0, 1.0, 0.1]).unwrap();
    for t in (0..=200).step_by(10) {
        let x = rng::normals(9, "grid", &[t as u64], 4);
        let sc = p.score(&s, &x, t).unwrap();
        let est = tweedie_denoise(&s, &x, &sc, t).unwrap();
        let exact = p.posterior_mean(&s, &x, t).unwrap();
        for (a, b) in est.iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12), "t = {t}");
        }
    }
}

proptest! {
    #[test]
    fn responsibilities_sum_to_one(
        seed in 0u64..1000,
        comps in 1u64..6,
        t in 0usize..=200,
        scale in 0.1f64..50.0,
    ) {
        let p = gmm(seed, 4, comps);
        let x: Vec<f64> = rng::normals(seed, "resp", &[], 4).iter().map(|v| v * scale).collect();
        let r = p.responsibilities(&sched(), &x, t).unwrap();
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gaussian_score_is_affine_and_finite(
        mean in -5.0f64..5.0,
        var in 0.01f64..10.0,
        x in -100.0f64..100.0,
        t in 0usize..=200,
    ) {
        let s = sched();
        let p = GaussianPrior::new(vec![mean], vec![var]).unwrap();
        let sc = p.score(&s, &[x], t).unwrap()[0];
        let ab = s.alpha_bar(t);
        let expected = -(x - ab.sqrt() * mean) / (ab * var + 1.0 - ab);
        prop_assert!((sc - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }
}
