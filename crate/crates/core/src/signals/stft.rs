use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

/// One-sided short-time spectrum of a centred, Hann-windowed signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frame: usize,
    pub hop: usize,
    /// Length of the analysed signal, needed to trim the padding on inversion.
    pub signal_len: usize,
    pub sample_rate: u32,
    /// `frames[m][f]` for bins `f = 0..=frame/2`.
    pub frames: Vec<Vec<Complex64>>,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.frame / 2 + 1
    }
}

pub(crate) fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn check_params(frame: usize, hop: usize) -> Result<()> {
    let ok = frame >= 4 && frame.is_multiple_of(4) && (hop * 2 == frame || hop * 4 == frame);
    if ok {
        Ok(())
    } else {
        Err(Error::param(format!(
            "Hann overlap-add needs hop = frame/2 or frame/4 with frame divisible by 4, got frame {frame}, hop {hop}"
        )))
    }
}

fn frame_count(len: usize, frame: usize, hop: usize) -> usize {
    // signal is padded by frame/2 on both sides
    let padded = len + frame;
    (padded - frame).div_ceil(hop) + 1
}

pub fn stft(x: &Waveform, frame: usize, hop: usize) -> Result<Spectrogram> {
    check_params(frame, hop)?;
    let window = periodic_hann(frame);
    let n_frames = frame_count(x.len(), frame, hop);
    let half = frame / 2;
    let fft = FftPlanner::new().plan_fft_forward(frame);
    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); frame];
    for m in 0..n_frames {
        for (i, b) in buf.iter_mut().enumerate() {
            let pos = (m * hop + i) as isize - half as isize;
            let v = if pos >= 0 && (pos as usize) < x.len() {
                x.samples[pos as usize]
            } else {
                0.0
            };
            *b = Complex64::new(v * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..=half].to_vec());
    }
    Ok(Spectrogram {
        frame,
        hop,
        signal_len: x.len(),
        sample_rate: x.sample_rate,
        frames,
    })
}

/// Weighted overlap-add inverse, normalised by the summed squared window.
pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    let (frame, hop) = (spec.frame, spec.hop);
    check_params(frame, hop)?;
    if spec.frames.iter().any(|f| f.len() != spec.bins()) {
        return Err(Error::param("spectrogram frames must hold frame/2 + 1 bins"));
    }
    let window = periodic_hann(frame);
    let half = frame / 2;
    let out_len = (spec.frames.len().saturating_sub(1)) * hop + frame;
    let mut acc = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let ifft = FftPlanner::new().plan_fft_inverse(frame);
    let mut buf = vec![Complex64::new(0.0, 0.0); frame];
    for (m, bins) in spec.frames.iter().enumerate() {
        buf[..=half].copy_from_slice(bins);
        for f in 1..half {
            buf[frame - f] = bins[f].conj();
        }
        ifft.process(&mut buf);
        for i in 0..frame {
            let w = window[i];
            acc[m * hop + i] += w * buf[i].re / frame as f64;
            norm[m * hop + i] += w * w;
        }
    }
    let samples = (0..spec.signal_len)
        .map(|n| {
            let j = n + half;
            if norm[j] > 1e-10 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn noise(n: usize, seed: u64) -> Waveform {
        Waveform::new(rng::normals(seed, "stft-test", &[], n), 16_000).unwrap()
    }

    #[test]
    fn round_trip_hop_quarter_and_half() {
        let x = noise(3000, 1);
        for (frame, hop) in [(512, 128), (256, 128), (64, 16)] {
            let y = istft(&stft(&x, frame, hop).unwrap()).unwrap();
            let err = x
                .samples
                .iter()
                .zip(&y.samples)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "frame {frame} hop {hop}: {err}");
        }
    }

    #[test]
    fn rejects_non_cola_parameters() {
        let x = noise(1000, 2);
        assert!(stft(&x, 512, 100).is_err());
        assert!(stft(&x, 512, 512).is_err());
        assert!(stft(&x, 6, 3).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let x = Waveform::new(vec![0.0; 700], 16_000).unwrap();
        let s = stft(&x, 128, 32).unwrap();
        assert!(s.frames.iter().flatten().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn parseval_per_frame() {
        let x = noise(2048, 3);
        let (frame, hop) = (256, 64);
        let s = stft(&x, frame, hop).unwrap();
        let window = periodic_hann(frame);
        let mut time_energy = 0.0;
        for m in 0..s.frames.len() {
            for (i, w) in window.iter().enumerate() {
                let pos = (m * hop + i) as isize - (frame / 2) as isize;
                if pos >= 0 && (pos as usize) < x.len() {
                    time_energy += (w * x.samples[pos as usize]).powi(2);
                }
            }
        }
        let spec_energy: f64 = s
            .frames
            .iter()
            .map(|bins| {
                bins.iter()
                    .enumerate()
                    .map(|(f, c)| {
                        let w = if f == 0 || f == frame / 2 { 1.0 } else { 2.0 };
                        w * c.norm_sqr()
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / frame as f64;
        assert!((time_energy - spec_energy).abs() / time_energy < 1e-9);
    }
}
