use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::guidance::{speaker_loss_gradient, BandEnergyEmbedder};
use crate::prior::{tweedie_denoise, GaussianPrior, GmmComponent, GmmPrior, ScoreModel};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::signals::{istft, stft, Waveform};
use crate::solvers::{
    denoised_tracks, dps_likelihood_gradient, separate, SeparationConfig, TrackSet,
};

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Recomputes every schedule array from the betas and compares. Returns the
/// first violation.
pub fn check_schedule(sched: &NoiseSchedule) -> std::result::Result<(), String> {
    let steps = sched.steps();
    let mut ab = 1.0;
    if sched.alpha_bar(0) != 1.0 || sched.sigma(0) != 0.0 {
        return Err("t = 0 must be noise free".into());
    }
    for t in 1..=steps {
        let beta = sched.beta(t);
        let prev = ab;
        ab *= 1.0 - beta;
        if rel_err(sched.alpha_bar(t), ab) > 1e-12 {
            return Err(format!("alpha_bar mismatch at t = {t}"));
        }
        if !(sched.alpha_bar(t) < sched.alpha_bar(t - 1)) {
            return Err(format!("alpha_bar not decreasing at t = {t}"));
        }
        let sigma = ((1.0 - ab) / ab).sqrt();
        if rel_err(sched.sigma(t), sigma) > 1e-12 {
            return Err(format!("sigma mismatch at t = {t}"));
        }
        let post = (beta * (1.0 - prev) / (1.0 - ab)).sqrt();
        if (sched.sigma_post(t) - post).abs() > 1e-12 * post.max(1e-300) {
            return Err(format!(
                "sigma_post mismatch at t = {t}: {} vs {post}",
                sched.sigma_post(t)
            ));
        }
        if sched.sigma_post(t) > beta.sqrt() * (1.0 + 1e-12) {
            return Err(format!("sigma_post exceeds sqrt(beta) at t = {t}"));
        }
    }
    if sched.sigma_post(1) != 0.0 {
        return Err("sigma_post must vanish at t = 1".into());
    }
    Ok(())
}

fn timed(name: &'static str, f: impl FnOnce() -> std::result::Result<String, String>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn standard_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(200, 1e-4, 2e-2).expect("valid schedule")
}

fn err_str<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn gaussian_posterior_suite() -> std::result::Result<String, String> {
    // terminal alpha_bar of the default schedule is too large for an N(0, I)
    // start to be unbiased, so the oracle runs on a longer-reaching schedule
    let sched = err_str(NoiseSchedule::linear(200, 1e-4, 5e-2))?;
    let p1 = err_str(GaussianPrior::new(vec![1.0], vec![0.5]))?;
    let p2 = err_str(GaussianPrior::new(vec![-1.0], vec![0.5]))?;
    let models: Vec<&dyn ScoreModel> = vec![&p1, &p2];
    let y = 0.3;
    let (mean, var) = (1.0 + 0.5 * y, 0.25);
    let runs = 500;
    let mut xs = Vec::with_capacity(runs);
    for seed in 0..runs as u64 {
        let cfg = SeparationConfig {
            seed,
            t_spk_start: 0,
            t_spk_end: 0,
            guidance_enabled: false,
            ..Default::default()
        };
        let out = err_str(separate(&[y], &cfg, &models, &sched, None, &mut |_| {}))?;
        xs.push(out.sources[0][0]);
    }
    let m = xs.iter().sum::<f64>() / runs as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (runs - 1) as f64;
    let se = (var / runs as f64).sqrt();
    let detail = format!("mean {m:.4} (exact {mean}), var {v:.4} (exact {var})");
    if (m - mean).abs() <= 3.0 * se && (v - var).abs() <= 0.2 * var {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tweedie_suite() -> std::result::Result<String, String> {
    let sched = standard_schedule();
    let dim = 16;
    let mean = rng::normals(7, "tweedie-mean", &[], dim);
    let var: Vec<f64> = rng::normals(7, "tweedie-var", &[], dim)
        .iter()
        .map(|v| 0.2 + v * v)
        .collect();
    let p = err_str(GaussianPrior::new(mean, var))?;
    let mut worst = 0.0f64;
    for t in [1, 50, 100, 150, 200] {
        let x = rng::normals(7, "tweedie-x", &[t as u64], dim);
        let s = err_str(p.score(&sched, &x, t))?;
        let est = err_str(tweedie_denoise(&sched, &x, &s, t))?;
        let exact = err_str(p.posterior_mean(&sched, &x, t))?;
        for (a, b) in est.iter().zip(&exact) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    let detail = format!("max relative error {worst:.2e}");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_gmm(seed: u64, dim: usize) -> Result<GmmPrior> {
    let comps = (0..3u64)
        .map(|c| GmmComponent {
            weight: (1.0 + c as f64) / 6.0,
            mean: rng::normals(seed, "gmm-mean", &[c], dim),
            var: rng::normals(seed, "gmm-var", &[c], dim)
                .iter()
                .map(|v| 0.3 + 0.5 * v * v)
                .collect(),
        })
        .collect();
    GmmPrior::new(comps)
}

fn dps_gradient_suite() -> std::result::Result<String, String> {
    let sched = standard_schedule();
    let dim = 32;
    let mut worst = 0.0f64;
    for inst in 0..5u64 {
        let prior = err_str(random_gmm(inst, dim))?;
        let models: Vec<&dyn ScoreModel> = vec![&prior, &prior];
        let t = 20 + 30 * inst as usize;
        let tracks: Vec<Vec<f64>> = (0..2u64)
            .map(|k| rng::normals(inst, "dps-x", &[k], dim))
            .collect();
        let y = rng::normals(inst, "dps-y", &[], dim);
        let ts = err_str(TrackSet::new(tracks.clone(), t, 0))?;
        let g = err_str(dps_likelihood_gradient(&y, &ts, &models, &sched))?;
        let loss = |tr: &[Vec<f64>]| -> std::result::Result<f64, String> {
            let ts = err_str(TrackSet::new(tr.to_vec(), t, 0))?;
            let x0 = err_str(denoised_tracks(&ts, &models, &sched, t))?;
            Ok((0..dim)
                .map(|i| (y[i] - x0[0][i] - x0[1][i]).powi(2))
                .sum())
        };
        let dir: Vec<Vec<f64>> = (0..2u64)
            .map(|k| rng::normals(inst, "dps-dir", &[k], dim))
            .collect();
        let h = 1e-5;
        let shifted = |sign: f64| -> Vec<Vec<f64>> {
            tracks
                .iter()
                .zip(&dir)
                .map(|(x, d)| x.iter().zip(d).map(|(a, b)| a + sign * h * b).collect())
                .collect()
        };
        let fd = (loss(&shifted(1.0))? - loss(&shifted(-1.0))?) / (2.0 * h);
        let an: f64 = g
            .grads
            .iter()
            .zip(&dir)
            .map(|(gk, d)| gk.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        worst = worst.max(rel_err(an, fd));
    }
    let detail = format!("max relative error {worst:.2e}");
    if worst <= 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn guidance_gradient_suite() -> std::result::Result<String, String> {
    let emb = err_str(BandEnergyEmbedder::new(128, 64, 12))?;
    let dim = 512;
    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let tracks: Vec<Vec<f64>> = (0..2u64)
            .map(|k| rng::normals(inst, "spk-x", &[k], dim))
            .collect();
        let (_, grads) = err_str(speaker_loss_gradient(&tracks, &emb))?;
        let dir: Vec<Vec<f64>> = (0..2u64)
            .map(|k| rng::normals(inst, "spk-dir", &[k], dim))
            .collect();
        let h = 1e-6;
        let loss_at = |sign: f64| -> std::result::Result<f64, String> {
            let tr: Vec<Vec<f64>> = tracks
                .iter()
                .zip(&dir)
                .map(|(x, d)| x.iter().zip(d).map(|(a, b)| a + sign * h * b).collect())
                .collect();
            Ok(err_str(speaker_loss_gradient(&tr, &emb))?.0)
        };
        let fd = (loss_at(1.0)? - loss_at(-1.0)?) / (2.0 * h);
        let an: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(gk, d)| gk.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        worst = worst.max(rel_err(an, fd));
    }
    let detail = format!("max relative error {worst:.2e}");
    if worst <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stft_suite() -> std::result::Result<String, String> {
    let x = rng::normals(3, "stft", &[], 4000);
    let w = err_str(Waveform::new(x.clone(), 16_000))?;
    let spec = err_str(stft(&w, 512, 128))?;
    let back = err_str(istft(&spec))?;
    let worst = x
        .iter()
        .zip(&back.samples)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let detail = format!("max abs error {worst:.2e}");
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn consistency_suite() -> std::result::Result<String, String> {
    let sched = standard_schedule();
    let dim = 256;
    let p = err_str(GaussianPrior::isotropic(dim, 0.0, 1.0))?;
    let models: Vec<&dyn ScoreModel> = vec![&p, &p, &p];
    let y = rng::normals(5, "consistency-y", &[], dim);
    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let cfg = SeparationConfig {
        sources: 3,
        t_spk_start: 0,
        t_spk_end: 0,
        guidance_enabled: false,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    let out = err_str(separate(&y, &cfg, &models, &sched, None, &mut |ev| {
        if let Some(r) = ev.projected_residual {
            worst = worst.max(r);
        }
    }))?;
    worst = worst.max(out.residual_inf);
    let detail = format!("max residual {worst:.2e}");
    if worst <= 1e-9 * scale {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs every oracle suite.
pub fn cmd_selfcheck() -> Vec<SuiteResult> {
    vec![
        timed("schedule", || {
            let s = standard_schedule();
            check_schedule(&s).map(|_| format!("T = {}, alpha_bar_T = {:.6}", s.steps(), s.alpha_bar(s.steps())))
        }),
        timed("tweedie", tweedie_suite),
        timed("gaussian_posterior", gaussian_posterior_suite),
        timed("dps_gradient", dps_gradient_suite),
        timed("guidance_gradient", guidance_gradient_suite),
        timed("stft_roundtrip", stft_suite),
        timed("mixture_consistency", consistency_suite),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_check_accepts_the_default() {
        assert!(check_schedule(&standard_schedule()).is_ok());
    }

    #[test]
    fn corrupted_posterior_std_fails() {
        let mut s = standard_schedule();
        // forgetting the (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) factor
        for t in 1..=s.steps() {
            s.sigma_post[t] = s.beta[t - 1].sqrt();
        }
        let err = check_schedule(&s).unwrap_err();
        assert!(err.contains("sigma_post"), "{err}");
    }

    #[test]
    fn corrupted_alpha_bar_fails() {
        let mut s = standard_schedule();
        s.alpha_bar[100] *= 1.0 + 1e-6;
        assert!(check_schedule(&s).is_err());
    }
}
