//! Speaker-embedding guidance.
//!
//! Each track is mapped to a sequence of frame-level embeddings. The speaker
//! loss rewards frames that agree with their own track's mean embedding and
//! penalises agreement between the mean embeddings of different tracks; its
//! gradient, normalised over all tracks jointly, is subtracted from the
//! tracks' scores.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::stft::periodic_hann;

/// Frame-level embeddings, `frames x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::shape(frames * dim, data.len()));
        }
        Ok(Self { frames, dim, data })
    }

    /// Builds a matrix whose rows are the given vectors scaled to unit length.
    pub fn from_rows_normalized(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::shape(dim, r.len()));
            }
            let n = norm(r);
            if n == 0.0 {
                return Err(Error::param("cannot normalise a zero row"));
            }
            data.extend(r.iter().map(|v| v / n));
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A differentiable map from a waveform to frame-level embeddings.
pub trait Embedder: Send + Sync {
    fn embed(&self, x: &[f64]) -> Result<EmbeddingMatrix>;

    /// Pulls `upstream = dL/dE` back to `dL/dx`.
    fn embed_vjp(&self, x: &[f64], upstream: &EmbeddingMatrix) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub bands: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            bands: 24,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<BandEnergyEmbedder> {
        BandEnergyEmbedder::new(self.frame_len, self.hop, self.bands)
    }
}

/// Log band energies of Hann-windowed magnitude spectra, one unit-norm row
/// per frame.
///
/// Bands are triangular over the linear-frequency bins `0..=frame_len/2`,
/// with centres spaced evenly and each band reaching zero at its neighbours'
/// centres. The `log(1 + .)` compression makes the embedding depend on level
/// as well as spectral shape.
#[derive(Clone)]
pub struct BandEnergyEmbedder {
    frame_len: usize,
    hop: usize,
    bands: usize,
    window: Vec<f64>,
    /// `bands x (frame_len/2 + 1)`
    filters: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for BandEnergyEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BandEnergyEmbedder")
            .field("frame_len", &self.frame_len)
            .field("hop", &self.hop)
            .field("bands", &self.bands)
            .finish()
    }
}

// Keeps |X| differentiable at X = 0.
const MAG_EPS2: f64 = 1e-18;

struct FrameForward {
    spectrum: Vec<Complex64>,
    mags: Vec<f64>,
    pooled: Vec<f64>,
    log_energy: Vec<f64>,
    log_norm: f64,
}

impl BandEnergyEmbedder {
    pub fn new(frame_len: usize, hop: usize, bands: usize) -> Result<Self> {
        if frame_len < 4 || hop == 0 {
            return Err(Error::param("embedder needs frame_len >= 4 and hop >= 1"));
        }
        if bands == 0 || bands > frame_len / 2 {
            return Err(Error::param(format!(
                "bands must lie in [1, frame_len/2 = {}], got {bands}",
                frame_len / 2
            )));
        }
        let n_bins = frame_len / 2 + 1;
        let spacing = (frame_len / 2) as f64 / (bands + 1) as f64;
        let mut filters = vec![0.0; bands * n_bins];
        for b in 0..bands {
            let centre = (b + 1) as f64 * spacing;
            for f in 0..n_bins {
                filters[b * n_bins + f] = (1.0 - (f as f64 - centre).abs() / spacing).max(0.0);
            }
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            frame_len,
            hop,
            bands,
            window: periodic_hann(frame_len),
            filters,
            fft: planner.plan_fft_forward(frame_len),
            ifft: planner.plan_fft_inverse(frame_len),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Centre frequency of band `b` in Hz.
    pub fn band_centre_hz(&self, b: usize, sample_rate: u32) -> f64 {
        let spacing = (self.frame_len / 2) as f64 / (self.bands + 1) as f64;
        (b + 1) as f64 * spacing * sample_rate as f64 / self.frame_len as f64
    }

    pub fn frame_count(&self, len: usize) -> Result<usize> {
        if len < self.frame_len {
            return Err(Error::param(format!(
                "signal of {len} samples is shorter than one {}-sample frame",
                self.frame_len
            )));
        }
        Ok(1 + (len - self.frame_len) / self.hop)
    }

    fn forward_frame(&self, segment: &[f64]) -> FrameForward {
        let n_bins = self.frame_len / 2 + 1;
        let mut spectrum: Vec<Complex64> = segment
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex64::new(x * w, 0.0))
            .collect();
        self.fft.process(&mut spectrum);
        let mags: Vec<f64> = spectrum[..n_bins]
            .iter()
            .map(|c| (c.norm_sqr() + MAG_EPS2).sqrt())
            .collect();
        let pooled: Vec<f64> = (0..self.bands)
            .map(|b| dot(&self.filters[b * n_bins..(b + 1) * n_bins], &mags))
            .collect();
        let log_energy: Vec<f64> = pooled.iter().map(|p| p.ln_1p()).collect();
        let log_norm = norm(&log_energy);
        FrameForward {
            spectrum,
            mags,
            pooled,
            log_energy,
            log_norm,
        }
    }
}

impl Embedder for BandEnergyEmbedder {
    fn embed(&self, x: &[f64]) -> Result<EmbeddingMatrix> {
        let frames = self.frame_count(x.len())?;
        let mut out = EmbeddingMatrix::zeros(frames, self.bands);
        for i in 0..frames {
            let start = i * self.hop;
            let fw = self.forward_frame(&x[start..start + self.frame_len]);
            for (o, e) in out.row_mut(i).iter_mut().zip(&fw.log_energy) {
                *o = e / fw.log_norm;
            }
        }
        Ok(out)
    }

    fn embed_vjp(&self, x: &[f64], upstream: &EmbeddingMatrix) -> Result<Vec<f64>> {
        let frames = self.frame_count(x.len())?;
        if upstream.frames() != frames || upstream.dim() != self.bands {
            return Err(Error::shape(frames * self.bands, upstream.frames() * upstream.dim()));
        }
        let n_bins = self.frame_len / 2 + 1;
        let mut grad = vec![0.0; x.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.frame_len];
        for i in 0..frames {
            let start = i * self.hop;
            let fw = self.forward_frame(&x[start..start + self.frame_len]);
            let g_row = upstream.row(i);
            // through the row normalisation u = e / |e|
            let u_dot_g: f64 = fw
                .log_energy
                .iter()
                .zip(g_row)
                .map(|(e, g)| e / fw.log_norm * g)
                .sum();
            let g_pooled: Vec<f64> = fw
                .log_energy
                .iter()
                .zip(g_row)
                .zip(&fw.pooled)
                .map(|((e, g), p)| (g - e / fw.log_norm * u_dot_g) / fw.log_norm / (1.0 + p))
                .collect();
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (f, slot) in buf.iter_mut().enumerate().take(n_bins) {
                let g_mag: f64 = (0..self.bands)
                    .map(|b| self.filters[b * n_bins + f] * g_pooled[b])
                    .sum();
                *slot = fw.spectrum[f] * (g_mag / fw.mags[f]);
            }
            self.ifft.process(&mut buf);
            for n in 0..self.frame_len {
                grad[start + n] += self.window[n] * buf[n].re;
            }
        }
        Ok(grad)
    }
}

/// Cosine similarity and its gradient with respect to `a`.
fn cos_and_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return (0.0, vec![0.0; a.len()]);
    }
    let c = dot(a, b) / (na * nb);
    let g = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| (bi / nb - c * ai / na) / na)
        .collect();
    (c, g)
}

fn check_embeddings(embeddings: &[EmbeddingMatrix]) -> Result<(usize, usize)> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::param("speaker loss needs at least one track"))?;
    let (f, b) = (first.frames(), first.dim());
    if f == 0 {
        return Err(Error::param("speaker loss needs at least one frame"));
    }
    for e in embeddings {
        if e.frames() != f || e.dim() != b {
            return Err(Error::shape(f * b, e.frames() * e.dim()));
        }
    }
    Ok((f, b))
}

fn mean_row(e: &EmbeddingMatrix) -> Vec<f64> {
    let mut m = vec![0.0; e.dim()];
    for i in 0..e.frames() {
        for (acc, v) in m.iter_mut().zip(e.row(i)) {
            *acc += v;
        }
    }
    let f = e.frames() as f64;
    m.iter_mut().for_each(|v| *v /= f);
    m
}

/// Speaker loss and its gradient with respect to every embedding entry.
///
/// `L = sum_k sum_i (1 - cos(E^k_i, mean^k)) + sum_{k != j} cos(mean^k, mean^j)`,
/// with the second sum over ordered pairs.
pub fn speaker_loss_and_grad(
    embeddings: &[EmbeddingMatrix],
) -> Result<(f64, Vec<EmbeddingMatrix>)> {
    let (frames, dim) = check_embeddings(embeddings)?;
    let means: Vec<Vec<f64>> = embeddings.iter().map(mean_row).collect();
    let mut loss = 0.0;
    let mut grads: Vec<EmbeddingMatrix> = embeddings
        .iter()
        .map(|_| EmbeddingMatrix::zeros(frames, dim))
        .collect();
    let mut mean_grads = vec![vec![0.0; dim]; embeddings.len()];

    for (k, e) in embeddings.iter().enumerate() {
        for i in 0..frames {
            let (c, g_row) = cos_and_grad(e.row(i), &means[k]);
            let (_, g_mean) = cos_and_grad(&means[k], e.row(i));
            loss += 1.0 - c;
            for (acc, g) in grads[k].row_mut(i).iter_mut().zip(&g_row) {
                *acc -= g;
            }
            for (acc, g) in mean_grads[k].iter_mut().zip(&g_mean) {
                *acc -= g;
            }
        }
    }
    for k in 0..embeddings.len() {
        for j in 0..embeddings.len() {
            if k == j {
                continue;
            }
            let (c, g) = cos_and_grad(&means[k], &means[j]);
            loss += c;
            // the (j, k) term contributes the same gradient to mean k
            for (acc, gi) in mean_grads[k].iter_mut().zip(&g) {
                *acc += 2.0 * gi;
            }
        }
    }
    let f = frames as f64;
    for (g, mg) in grads.iter_mut().zip(&mean_grads) {
        for i in 0..frames {
            for (acc, m) in g.row_mut(i).iter_mut().zip(mg) {
                *acc += m / f;
            }
        }
    }
    Ok((loss, grads))
}

pub fn speaker_loss(embeddings: &[EmbeddingMatrix]) -> Result<f64> {
    Ok(speaker_loss_and_grad(embeddings)?.0)
}

/// Speaker loss of the given tracks and its raw gradient with respect to each track.
pub fn speaker_loss_gradient(
    tracks: &[Vec<f64>],
    embedder: &dyn Embedder,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let embeddings = tracks
        .iter()
        .map(|x| embedder.embed(x))
        .collect::<Result<Vec<_>>>()?;
    let (loss, upstream) = speaker_loss_and_grad(&embeddings)?;
    let grads = tracks
        .iter()
        .zip(&upstream)
        .map(|(x, u)| embedder.embed_vjp(x, u))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, grads))
}

/// Below this gradient norm guidance is skipped.
pub const MIN_GRADIENT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceDirection {
    /// Per-track gradient divided by the norm over all tracks together;
    /// zeros when the gradient vanished.
    pub direction: Vec<Vec<f64>>,
    pub loss: f64,
    pub raw_norm: f64,
}

pub fn speaker_guidance_gradient(
    tracks: &[Vec<f64>],
    embedder: &dyn Embedder,
) -> Result<GuidanceDirection> {
    let (loss, mut grads) = speaker_loss_gradient(tracks, embedder)?;
    let raw_norm = grads
        .iter()
        .map(|g| dot(g, g))
        .sum::<f64>()
        .sqrt();
    if raw_norm < MIN_GRADIENT_NORM {
        log::debug!("speaker gradient norm {raw_norm:e} below threshold, guidance skipped");
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
    } else {
        grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v /= raw_norm));
    }
    Ok(GuidanceDirection {
        direction: grads,
        loss,
        raw_norm,
    })
}

/// `scores - radius * direction`, track by track.
pub fn apply_guidance(
    scores: &[Vec<f64>],
    direction: &[Vec<f64>],
    radius: f64,
) -> Result<Vec<Vec<f64>>> {
    if radius < 0.0 || !radius.is_finite() {
        return Err(Error::param(format!("guidance radius must be finite and >= 0, got {radius}")));
    }
    if scores.len() != direction.len() {
        return Err(Error::shape(scores.len(), direction.len()));
    }
    scores
        .iter()
        .zip(direction)
        .map(|(s, g)| {
            if s.len() != g.len() {
                return Err(Error::shape(s.len(), g.len()));
            }
            Ok(s.iter().zip(g).map(|(a, b)| a - radius * b).collect())
        })
        .collect()
}

/// Guidance radius `sqrt(D) * sigma_post_t`.
pub fn guidance_radius(dim: usize, sigma_post: f64) -> f64 {
    (dim as f64).sqrt() * sigma_post
}
