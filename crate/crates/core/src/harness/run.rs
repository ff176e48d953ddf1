use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::guidance::Embedder;
use crate::metrics::{pit_assign, EvalReport, Metric, SolverSummary};
use crate::prior::ScoreModel;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::signals::{make_mixture, read_wav, rms, write_wav, HarmonicVoice, Mixture, Waveform};
use crate::solvers::{separate, Separation, SeparationConfig, SolverKind};

/// Caps the benchmark's worker threads when set to a positive integer.
pub const WORKERS_ENV: &str = "SEPDIFF_WORKERS";

pub fn worker_limit() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// The mixture and voices of benchmark item `mixture_id`.
pub fn synthesize_mixture(cfg: &RunConfig, mixture_id: usize) -> Result<(Mixture, Vec<HarmonicVoice>)> {
    let root = cfg.mixture.seed;
    let voices = cfg.voices.draw(root, mixture_id);
    let spec = crate::signals::MixtureSpec {
        seed: rng::derive_seed(root, "mixture", &[mixture_id as u64]),
        ..cfg.mixture.clone()
    };
    Ok((make_mixture(&spec, &voices)?, voices))
}

/// Runs the sampler on `y`, optionally rescaled to an RMS of `sqrt(K)`
/// first; the returned sources are on the scale of `y`.
pub fn separate_scaled(
    y: &[f64],
    solver: &SeparationConfig,
    normalize: bool,
    models: &[&dyn ScoreModel],
    sched: &NoiseSchedule,
    embedder: Option<&dyn Embedder>,
) -> Result<Separation> {
    let level = rms(y);
    let gain = if normalize && level > 0.0 {
        (solver.sources as f64).sqrt() / level
    } else {
        1.0
    };
    let scaled: Vec<f64> = y.iter().map(|v| v * gain).collect();
    let mut out = separate(&scaled, solver, models, sched, embedder, &mut |_| {})?;
    for s in &mut out.sources {
        s.iter_mut().for_each(|v| *v /= gain);
    }
    out.residual_inf /= gain;
    Ok(out)
}

fn variant_solver(base: &SeparationConfig, variant: Variant) -> Option<SeparationConfig> {
    let mut cfg = base.clone();
    match variant {
        Variant::Unprocessed => return None,
        Variant::Dps => cfg.solver = SolverKind::Dps,
        Variant::Dsg => cfg.solver = SolverKind::Dsg,
        Variant::Dirac => cfg.solver = SolverKind::Dirac,
        Variant::Hybrid => cfg.solver = SolverKind::Hybrid,
        Variant::HybridGuided => {
            cfg.solver = SolverKind::Hybrid;
            cfg.guidance_enabled = true;
            return Some(cfg);
        }
    }
    cfg.guidance_enabled = false;
    Some(cfg)
}

/// Separates and scores one benchmark mixture with every configured variant.
/// Solver failures become failure records; only setup errors are returned.
pub fn evaluate_mixture(
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    embedder: Option<&dyn Embedder>,
    mixture_id: usize,
) -> Result<EvalReport> {
    let (mix, voices) = synthesize_mixture(cfg, mixture_id)?;
    let y = &mix.mixture.samples;
    let refs: Vec<Vec<f64>> = mix.sources.iter().map(|s| s.samples.clone()).collect();
    let boxed = cfg.build_priors(y.len(), mix.mixture.sample_rate, &voices)?;
    let models: Vec<&dyn ScoreModel> = boxed.iter().map(|b| b.as_ref()).collect();
    let seed = rng::derive_seed(cfg.solver.seed, "separation", &[mixture_id as u64]);
    let mut report = EvalReport::default();
    for &variant in &cfg.run.variants {
        let name = variant.name();
        let estimates = match variant_solver(&cfg.solver, variant) {
            None => {
                let k = refs.len() as f64;
                Ok(vec![y.iter().map(|v| v / k).collect::<Vec<f64>>(); refs.len()])
            }
            Some(solver) => {
                let solver = SeparationConfig { seed, ..solver };
                separate_scaled(y, &solver, cfg.run.normalize, &models, sched, embedder)
                    .map(|s| s.sources)
            }
        };
        match estimates.and_then(|ests| report.push_run(mixture_id, name, &refs, &ests, cfg.run.swap_frame)) {
            Ok(()) => {}
            Err(e) => {
                warn!("mixture {mixture_id}, {name}: {e}");
                report.push_failure(mixture_id, name, &e);
            }
        }
    }
    Ok(report)
}

/// All mixtures through all variants, on at most `workers` threads.
pub fn run_benchmark(cfg: &RunConfig, workers: Option<usize>) -> Result<EvalReport> {
    let sched = cfg.schedule()?;
    let embedder = cfg.embedder()?;
    let emb: Option<&dyn Embedder> = embedder.as_ref().map(|e| e as &dyn Embedder);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let parts = pool.install(|| {
        (0..cfg.run.mixtures)
            .into_par_iter()
            .map(|i| {
                let r = evaluate_mixture(cfg, &sched, emb, i);
                info!("mixture {i} done");
                r
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let order: Vec<&str> = cfg.run.variants.iter().map(|v| v.name()).collect();
    Ok(EvalReport::merge(parts, &order))
}

#[derive(Debug, Serialize)]
struct BenchmarkSummary<'a> {
    config_hash: &'a str,
    mixtures: usize,
    metrics: &'a [Metric],
    solvers: Vec<SolverSummary>,
    failures: usize,
    table: String,
}

#[derive(Debug)]
pub struct BenchmarkOutcome {
    pub report: EvalReport,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn resolve_out(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.run.out_dir.as_ref().map(|d| cfg.base_dir.join(d)))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set run.out_dir".into()))
}

/// Writes `report.csv` and `summary.json` into the output directory.
pub fn cmd_benchmark(config_path: &Path, out: Option<&Path>) -> Result<BenchmarkOutcome> {
    let (cfg, hash) = RunConfig::load(config_path)?;
    let out = resolve_out(&cfg, out)?;
    let report = run_benchmark(&cfg, worker_limit()?)?;
    create_dir(&out)?;
    let csv_path = out.join("report.csv");
    write_file(&csv_path, &report.to_csv())?;
    let summary = BenchmarkSummary {
        config_hash: &hash,
        mixtures: cfg.run.mixtures,
        metrics: &cfg.run.metrics,
        solvers: report.summary(),
        failures: report.failures.len(),
        table: report.to_table(),
    };
    let summary_path = out.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&summary_path, &json)?;
    Ok(BenchmarkOutcome {
        report,
        csv_path,
        summary_path,
    })
}

/// Contents of `run.json` written by [`cmd_separate`].
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub solver: String,
    pub sources: usize,
    pub samples: usize,
    pub sample_rate: u32,
    pub input: Option<PathBuf>,
    pub status: String,
    pub error: Option<String>,
    /// `||y - sum_k x_hat^k||_2` before quantisation.
    pub residual_l2: Option<f64>,
    pub residual_inf: Option<f64>,
    pub guidance_steps: Option<usize>,
    /// PIT SI-SDR per source; only for synthesized mixtures.
    pub si_sdr_db: Option<Vec<f64>>,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct SeparateOutcome {
    pub record: RunRecord,
    pub record_path: PathBuf,
}

/// Separates the WAV at `input`, or synthesized mixture 0 when absent, and
/// writes `source_<k>.wav` plus `run.json`. On divergence the record is
/// still written before the error is returned.
pub fn cmd_separate(
    config_path: &Path,
    input: Option<&Path>,
    out: Option<&Path>,
) -> Result<SeparateOutcome> {
    let start = Instant::now();
    let (cfg, hash) = RunConfig::load(config_path)?;
    let out = resolve_out(&cfg, out)?;
    let sched = cfg.schedule()?;
    let embedder = cfg.embedder()?;
    let emb: Option<&dyn Embedder> = embedder.as_ref().map(|e| e as &dyn Embedder);

    let (y, refs, voices) = match input {
        Some(path) => {
            let wave = read_wav(path)?;
            (wave, None, cfg.voices.draw(cfg.mixture.seed, 0))
        }
        None => {
            let (mix, voices) = synthesize_mixture(&cfg, 0)?;
            let refs: Vec<Vec<f64>> = mix.sources.iter().map(|s| s.samples.clone()).collect();
            (mix.mixture, Some(refs), voices)
        }
    };
    let boxed = cfg.build_priors(y.len(), y.sample_rate, &voices)?;
    let models: Vec<&dyn ScoreModel> = boxed.iter().map(|b| b.as_ref()).collect();

    create_dir(&out)?;
    let mut record = RunRecord {
        config_hash: hash,
        seed: cfg.solver.seed,
        solver: cfg.solver.solver.name().to_string(),
        sources: cfg.solver.sources,
        samples: y.len(),
        sample_rate: y.sample_rate,
        input: input.map(Path::to_path_buf),
        status: "ok".into(),
        error: None,
        residual_l2: None,
        residual_inf: None,
        guidance_steps: None,
        si_sdr_db: None,
        outputs: Vec::new(),
        wall_time_s: 0.0,
    };
    let record_path = out.join("run.json");
    let finish = |record: &mut RunRecord| -> Result<()> {
        record.wall_time_s = start.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(record).expect("record serializes");
        write_file(&record_path, &json)
    };

    let sep = match separate_scaled(&y.samples, &cfg.solver, cfg.run.normalize, &models, &sched, emb) {
        Ok(s) => s,
        Err(e) => {
            record.status = match e {
                Error::Divergence { .. } => "diverged".into(),
                _ => "failed".into(),
            };
            record.error = Some(e.to_string());
            finish(&mut record)?;
            return Err(e);
        }
    };

    let mut residual = y.samples.clone();
    for s in &sep.sources {
        for (r, v) in residual.iter_mut().zip(s) {
            *r -= v;
        }
    }
    record.residual_l2 = Some(residual.iter().map(|r| r * r).sum::<f64>().sqrt());
    record.residual_inf = Some(residual.iter().fold(0.0, |m: f64, r| m.max(r.abs())));
    record.guidance_steps = Some(sep.guidance_steps);
    if let Some(refs) = &refs {
        record.si_sdr_db = Some(pit_assign(refs, &sep.sources, Metric::SiSdr)?.scores);
    }

    for (k, s) in sep.sources.iter().enumerate() {
        let path = out.join(format!("source_{k}.wav"));
        write_wav(&path, &Waveform::new(s.clone(), y.sample_rate)?, cfg.run.wav_format)?;
        record.outputs.push(path);
    }
    if input.is_none() {
        let path = out.join("mixture.wav");
        write_wav(&path, &y, cfg.run.wav_format)?;
        record.outputs.push(path);
    }
    finish(&mut record)?;
    Ok(SeparateOutcome {
        record,
        record_path,
    })
}
