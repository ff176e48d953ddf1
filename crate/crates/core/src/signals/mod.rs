//! Synthetic harmonic sources, mixture construction, STFT and WAV I/O.

pub(crate) mod stft;
mod wav;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use stft::{istft, stft, Spectrogram};
pub use wav::{read_wav, write_wav, WavFormat};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::param("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::param("waveform contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn rms_db(x: &[f64]) -> f64 {
    20.0 * rms(x).log10()
}

/// A synthetic "speaker": a fundamental and its harmonic amplitude profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicVoice {
    pub f0: f64,
    pub amplitudes: Vec<f64>,
}

impl HarmonicVoice {
    /// `n_harmonics` partials with `1/h` amplitudes, scaled to unit variance
    /// under random phases.
    pub fn new(f0: f64, n_harmonics: usize) -> Self {
        let raw: Vec<f64> = (1..=n_harmonics).map(|h| 1.0 / h as f64).collect();
        let power: f64 = raw.iter().map(|a| 0.5 * a * a).sum();
        let norm = if power > 0.0 { power.sqrt() } else { 1.0 };
        Self {
            f0,
            amplitudes: raw.into_iter().map(|a| a / norm).collect(),
        }
    }

    pub fn highest_partial(&self) -> f64 {
        self.f0 * self.amplitudes.len() as f64
    }
}

/// Renders `voice` with random partial phases and a slow random amplitude
/// envelope.
pub fn render_voice(voice: &HarmonicVoice, duration: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if sample_rate == 0 {
        return Err(Error::param("sample rate must be positive"));
    }
    if !(duration > 0.0) {
        return Err(Error::param("duration must be positive"));
    }
    if !(voice.f0 > 0.0) || voice.amplitudes.is_empty() {
        return Err(Error::param("voice needs a positive f0 and at least one harmonic"));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if voice.highest_partial() >= nyquist {
        return Err(Error::param(format!(
            "highest harmonic {} Hz aliases at sample rate {sample_rate}",
            voice.highest_partial()
        )));
    }
    let n = (duration * sample_rate as f64).round() as usize;
    let mut r = rng::stream(seed, "harmonic", &[]);
    let phases: Vec<f64> = voice
        .amplitudes
        .iter()
        .map(|_| r.random_range(0.0..2.0 * PI))
        .collect();
    let env_rate: f64 = r.random_range(1.0..3.0);
    let env_phase: f64 = r.random_range(0.0..2.0 * PI);
    let env_depth = 0.3;
    let sr = sample_rate as f64;
    let samples = (0..n)
        .map(|i| {
            let time = i as f64 / sr;
            let env = 1.0 + env_depth * (2.0 * PI * env_rate * time + env_phase).sin();
            let tone: f64 = voice
                .amplitudes
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| a * (2.0 * PI * voice.f0 * (h + 1) as f64 * time + p).sin())
                .sum();
            env * tone
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

pub fn harmonic_source(
    f0: f64,
    n_harmonics: usize,
    duration: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform> {
    if n_harmonics == 0 {
        return Err(Error::param("need at least one harmonic"));
    }
    render_voice(&HarmonicVoice::new(f0, n_harmonics), duration, sample_rate, seed)
}

/// Rescales `x` so its RMS level is `target_db` dBFS.
pub fn scale_to_rms(x: &Waveform, target_db: f64) -> Result<Waveform> {
    let current = x.rms();
    if !(current > 0.0) {
        return Err(Error::param("cannot rescale a silent signal"));
    }
    let gain = 10f64.powf(target_db / 20.0) / current;
    Waveform::new(x.samples.iter().map(|s| s * gain).collect(), x.sample_rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    #[serde(rename = "K")]
    pub sources: usize,
    pub rms_db_range: (f64, f64),
    /// Inclusive range of per-source start offsets, in samples.
    pub offset_range: (usize, usize),
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            sources: 2,
            rms_db_range: (-25.0, -20.0),
            offset_range: (0, 0),
            duration: 2.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 {
            return Err(Error::param("mixture needs at least one source"));
        }
        if !(self.rms_db_range.0 <= self.rms_db_range.1) {
            return Err(Error::param("rms_db_range must satisfy low <= high"));
        }
        if self.offset_range.0 > self.offset_range.1 {
            return Err(Error::param("offset_range must satisfy low <= high"));
        }
        if !(self.duration > 0.0) {
            return Err(Error::param("duration must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::param("sample rate must be positive"));
        }
        Ok(())
    }

    /// Samples per source before offsetting.
    pub fn source_len(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    /// Common length of the mixture and of every padded source.
    pub fn total_len(&self) -> usize {
        self.source_len() + self.offset_range.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub levels_db: Vec<f64>,
    pub offsets: Vec<usize>,
}

/// Renders one source per voice, sets each to a level drawn uniformly from
/// `rms_db_range`, delays it by a random offset, zero-pads all sources to a
/// common length and sums them.
pub fn make_mixture(spec: &MixtureSpec, voices: &[HarmonicVoice]) -> Result<Mixture> {
    spec.validate()?;
    if voices.len() != spec.sources {
        return Err(Error::shape(spec.sources, voices.len()));
    }
    let total = spec.total_len();
    let mut sources = Vec::with_capacity(spec.sources);
    let mut levels_db = Vec::with_capacity(spec.sources);
    let mut offsets = Vec::with_capacity(spec.sources);
    for (k, voice) in voices.iter().enumerate() {
        let k = k as u64;
        let raw = render_voice(
            voice,
            spec.duration,
            spec.sample_rate,
            rng::derive_seed(spec.seed, "source", &[k]),
        )?;
        let mut r = rng::stream(spec.seed, "placement", &[k]);
        let (lo, hi) = spec.rms_db_range;
        let level = if lo == hi { lo } else { r.random_range(lo..=hi) };
        let offset = r.random_range(spec.offset_range.0..=spec.offset_range.1);
        let scaled = scale_to_rms(&raw, level)?;
        let mut padded = vec![0.0; total];
        padded[offset..offset + scaled.len()].copy_from_slice(&scaled.samples);
        sources.push(Waveform::new(padded, spec.sample_rate)?);
        levels_db.push(level);
        offsets.push(offset);
    }
    let mut y = vec![0.0; total];
    for s in &sources {
        for (acc, v) in y.iter_mut().zip(&s.samples) {
            *acc += v;
        }
    }
    Ok(Mixture {
        mixture: Waveform::new(y, spec.sample_rate)?,
        sources,
        levels_db,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex64, FftPlanner};

    #[test]
    fn single_harmonic_peaks_at_f0() {
        let sr = 16_000;
        let w = harmonic_source(500.0, 1, 0.256, sr, 3).unwrap();
        let n = w.len();
        let mut buf: Vec<Complex64> = w.samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (0..n / 2)
            .max_by(|a, b| buf[*a].norm().partial_cmp(&buf[*b].norm()).unwrap())
            .unwrap();
        let f = peak as f64 * sr as f64 / n as f64;
        assert!((f - 500.0).abs() <= sr as f64 / n as f64, "peak at {f} Hz");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = harmonic_source(200.0, 8, 0.1, 16_000, 42).unwrap();
        let b = harmonic_source(200.0, 8, 0.1, 16_000, 42).unwrap();
        let c = harmonic_source(200.0, 8, 0.1, 16_000, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn aliasing_is_rejected() {
        assert!(harmonic_source(1000.0, 8, 0.1, 16_000, 0).is_err());
        assert!(harmonic_source(1000.0, 7, 0.1, 16_000, 0).is_ok());
    }

    #[test]
    fn rms_scaling() {
        let w = harmonic_source(180.0, 5, 0.2, 16_000, 1).unwrap();
        let s = scale_to_rms(&w, -20.0).unwrap();
        assert!((s.rms() - 0.1).abs() < 1e-12);
        let twice = scale_to_rms(&s, -20.0).unwrap();
        for (a, b) in twice.samples.iter().zip(&s.samples) {
            assert!((a - b).abs() < 1e-15);
        }
        let q = scale_to_rms(&w, -25.0).unwrap();
        assert!((q.rms() - 10f64.powf(-1.25)).abs() < 1e-9);
        let silent = Waveform::new(vec![0.0; 8], 16_000).unwrap();
        assert!(scale_to_rms(&silent, -20.0).is_err());
    }

    #[test]
    fn mixture_is_exact_sum_with_bounded_levels() {
        let spec = MixtureSpec {
            sources: 2,
            rms_db_range: (-25.0, -20.0),
            offset_range: (0, 400),
            duration: 0.25,
            sample_rate: 16_000,
            seed: 9,
        };
        let voices = [HarmonicVoice::new(200.0, 10), HarmonicVoice::new(310.0, 10)];
        let m = make_mixture(&spec, &voices).unwrap();
        assert_eq!(m.mixture.len(), spec.total_len());
        for i in 0..m.mixture.len() {
            assert_eq!(m.mixture.samples[i], m.sources[0].samples[i] + m.sources[1].samples[i]);
        }
        for (k, s) in m.sources.iter().enumerate() {
            let off = m.offsets[k];
            let support = &s.samples[off..off + spec.source_len()];
            let db = rms_db(support);
            assert!((-25.0 - 1e-9..=-20.0 + 1e-9).contains(&db), "{db}");
            assert!((db - m.levels_db[k]).abs() < 1e-9);
        }
        assert_eq!(m, make_mixture(&spec, &voices).unwrap());
    }

    #[test]
    fn mixture_spec_validation() {
        let spec = MixtureSpec {
            rms_db_range: (-10.0, -20.0),
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let spec = MixtureSpec {
            duration: 0.0,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let spec = MixtureSpec::default();
        assert!(make_mixture(&spec, &[HarmonicVoice::new(100.0, 3)]).is_err());
    }
}
