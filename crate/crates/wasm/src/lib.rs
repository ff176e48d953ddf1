//! Browser bindings for the single-page demo in `www/`.
//!
//! Each export returns a JSON string. The `*_json` functions hold the logic
//! and are plain Rust so they can be tested natively.

use std::path::Path;

use sepdiff::guidance::speaker_loss;
use sepdiff::harness::{synthesize_mixture, RunConfig};
use sepdiff::metrics::{pit_assign, swap_rate, Metric};
use sepdiff::signals::{harmonic_source, rms};
use sepdiff::solvers::Stage;
use sepdiff::{separate, BandEnergyEmbedder, Embedder, NoiseSchedule, ScoreModel};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DEMO_CONFIG: &str = r#"
[solver]
T_spk_start = 75
T_spk_end = 175
guidance_scale = 50.0

[mixture]
duration = 0.256

[embedder]
frame_len = 512
hop = 256
bands = 24
"#;

#[derive(Serialize)]
pub struct ScheduleCurves {
    pub sigma: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma_post: Vec<f64>,
}

pub fn schedule_curves_json(steps: usize, beta_min: f64, beta_max: f64) -> Result<String, String> {
    let s = NoiseSchedule::linear(steps, beta_min, beta_max).map_err(|e| e.to_string())?;
    let curves = ScheduleCurves {
        sigma: (0..=steps).map(|t| s.sigma(t)).collect(),
        alpha_bar: (0..=steps).map(|t| s.alpha_bar(t)).collect(),
        sigma_post: (0..=steps).map(|t| s.sigma_post(t)).collect(),
    };
    Ok(serde_json::to_string(&curves).expect("curves serialize"))
}

#[derive(Serialize)]
pub struct DemoSeparation {
    pub sample_rate: u32,
    pub f0: Vec<f64>,
    pub mixture: Vec<f64>,
    pub references: Vec<Vec<f64>>,
    /// Estimates reordered to match `references`.
    pub estimates: Vec<Vec<f64>>,
    pub si_sdr_db: Vec<f64>,
    pub swap_rate: f64,
    /// `(t, speaker loss)` at every guided step.
    pub loss_trace: Vec<(usize, f64)>,
}

/// Synthesizes mixture `mixture_id` and separates it with the hybrid sampler.
pub fn separate_json(mixture_id: usize, guided: bool, guidance_scale: f64) -> Result<String, String> {
    let err = |e: sepdiff::Error| e.to_string();
    let mut cfg = RunConfig::from_toml_str(DEMO_CONFIG, Path::new(".")).map_err(err)?;
    cfg.solver.guidance_enabled = guided;
    cfg.solver.guidance_scale = guidance_scale;
    cfg.solver.seed = mixture_id as u64;
    cfg.validate().map_err(err)?;
    let sched = cfg.schedule().map_err(err)?;
    let embedder = cfg.embedder().map_err(err)?;
    let emb = embedder.as_ref().map(|e| e as &dyn Embedder);
    let (mix, voices) = synthesize_mixture(&cfg, mixture_id).map_err(err)?;
    let boxed = cfg
        .build_priors(mix.mixture.len(), mix.mixture.sample_rate, &voices)
        .map_err(err)?;
    let models: Vec<&dyn ScoreModel> = boxed.iter().map(|b| b.as_ref()).collect();

    let y = &mix.mixture.samples;
    let gain = (cfg.solver.sources as f64).sqrt() / rms(y);
    let scaled: Vec<f64> = y.iter().map(|v| v * gain).collect();
    let mut loss_trace = Vec::new();
    let out = separate(&scaled, &cfg.solver, &models, &sched, emb, &mut |ev| {
        if let (Stage::Anchored, Some(l)) = (ev.stage, ev.speaker_loss) {
            loss_trace.push((ev.t, l));
        }
    })
    .map_err(err)?;
    let ests: Vec<Vec<f64>> = out
        .sources
        .iter()
        .map(|s| s.iter().map(|v| v / gain).collect())
        .collect();

    let refs: Vec<Vec<f64>> = mix.sources.iter().map(|s| s.samples.clone()).collect();
    let pit = pit_assign(&refs, &ests, Metric::SiSdr).map_err(err)?;
    let swaps = swap_rate(&refs, &ests, cfg.run.swap_frame).map_err(err)?;
    let demo = DemoSeparation {
        sample_rate: mix.mixture.sample_rate,
        f0: voices.iter().map(|v| v.f0).collect(),
        mixture: y.clone(),
        estimates: pit.perm.iter().map(|&j| ests[j].clone()).collect(),
        references: refs,
        si_sdr_db: pit.scores,
        swap_rate: swaps,
        loss_trace,
    };
    Ok(serde_json::to_string(&demo).expect("separation serializes"))
}

#[derive(Serialize)]
pub struct LossCurve {
    /// Fraction of each track leaked into the other.
    pub leak: Vec<f64>,
    pub loss: Vec<f64>,
}

/// Speaker loss of two harmonic tracks as each leaks into the other.
pub fn speaker_loss_json(f0_a: f64, f0_b: f64, points: usize) -> Result<String, String> {
    let err = |e: sepdiff::Error| e.to_string();
    if points < 2 {
        return Err("need at least two points".into());
    }
    let a = harmonic_source(f0_a, 4, 0.256, 16_000, 1).map_err(err)?.samples;
    let b = harmonic_source(f0_b, 4, 0.256, 16_000, 2).map_err(err)?.samples;
    let e = BandEnergyEmbedder::new(512, 256, 24).map_err(err)?;
    let mut curve = LossCurve {
        leak: Vec::with_capacity(points),
        loss: Vec::with_capacity(points),
    };
    for i in 0..points {
        let w = 0.5 * i as f64 / (points - 1) as f64;
        let mix = |p: &[f64], q: &[f64]| -> Vec<f64> {
            p.iter().zip(q).map(|(x, y)| (1.0 - w) * x + w * y).collect()
        };
        let embs = [e.embed(&mix(&a, &b)).map_err(err)?, e.embed(&mix(&b, &a)).map_err(err)?];
        curve.leak.push(w);
        curve.loss.push(speaker_loss(&embs).map_err(err)?);
    }
    Ok(serde_json::to_string(&curve).expect("curve serializes"))
}

#[wasm_bindgen]
pub fn schedule_curves(steps: usize, beta_min: f64, beta_max: f64) -> Result<String, JsError> {
    schedule_curves_json(steps, beta_min, beta_max).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn separate_mixture(mixture_id: usize, guided: bool, guidance_scale: f64) -> Result<String, JsError> {
    separate_json(mixture_id, guided, guidance_scale).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn speaker_loss_curve(f0_a: f64, f0_b: f64, points: usize) -> Result<String, JsError> {
    speaker_loss_json(f0_a, f0_b, points).map_err(|e| JsError::new(&e))
}
