//! Source priors exposed through their diffused score.
//!
//! All priors here have closed-form marginals at every timestep, so they
//! double as exact oracles for the samplers: the score, the Tweedie
//! denoiser and its Jacobian are all available analytically.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::signals::HarmonicVoice;

/// A source prior queried through `grad log p_t(x_t)` in the variance-preserving
/// coordinates of the schedule.
pub trait ScoreModel: Send + Sync {
    fn score(&self, sched: &NoiseSchedule, x_t: &[f64], t: usize) -> Result<Vec<f64>>;

    /// `J^T v`, where `J` is the Jacobian of the Tweedie denoiser
    /// `x_t -> E[x_0 | x_t]`. `None` when the model cannot differentiate
    /// through itself.
    fn measurement_vjp(
        &self,
        _sched: &NoiseSchedule,
        _x_t: &[f64],
        _t: usize,
        _v: &[f64],
    ) -> Option<Result<Vec<f64>>> {
        None
    }
}

/// Tweedie estimate `x0_hat = (x_t + (1 - alpha_bar_t) * score) / sqrt(alpha_bar_t)`.
///
/// At `t = 0` the input is returned unchanged.
pub fn tweedie_denoise(
    sched: &NoiseSchedule,
    x_t: &[f64],
    score: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if score.len() != x_t.len() {
        return Err(Error::shape(x_t.len(), score.len()));
    }
    if t == 0 {
        return Ok(x_t.to_vec());
    }
    let ab = sched.alpha_bar(t);
    let scale = 1.0 / ab.sqrt();
    Ok(x_t
        .iter()
        .zip(score)
        .map(|(x, s)| (x + (1.0 - ab) * s) * scale)
        .collect())
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::shape(expected, actual))
    }
}

/// Diagonal Gaussian prior `N(mean, diag(var))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_len(mean.len(), var.len())?;
        if mean.is_empty() {
            return Err(Error::param("prior dimension must be positive"));
        }
        if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::param("prior variances must be positive and finite"));
        }
        Ok(Self { mean, var })
    }

    pub fn isotropic(dim: usize, mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean; dim], vec![var; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// Log-density of the diffused marginal at `t`.
    pub fn log_marginal(&self, sched: &NoiseSchedule, x_t: &[f64], t: usize) -> Result<f64> {
        sched.check_t(t)?;
        check_len(self.dim(), x_t.len())?;
        Ok(diag_log_normal(sched.alpha_bar(t), &self.mean, &self.var, x_t))
    }

    /// `E[x_0 | x_t]` computed from the joint Gaussian directly.
    pub fn posterior_mean(&self, sched: &NoiseSchedule, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        sched.check_t(t)?;
        check_len(self.dim(), x_t.len())?;
        let ab = sched.alpha_bar(t);
        let c = ab.sqrt();
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .zip(x_t)
            .map(|((m, v), x)| {
                // cov(x_0, x_t) = c v, var(x_t) = c^2 v + 1 - ab
                m + c * v / (ab * v + 1.0 - ab) * (x - c * m)
            })
            .collect())
    }
}

fn diag_log_normal(ab: f64, mean: &[f64], var: &[f64], x: &[f64]) -> f64 {
    let c = ab.sqrt();
    mean.iter()
        .zip(var)
        .zip(x)
        .map(|((m, v), x)| {
            let marg = ab * v + 1.0 - ab;
            let d = x - c * m;
            -0.5 * ((2.0 * PI * marg).ln() + d * d / marg)
        })
        .sum()
}

impl ScoreModel for GaussianPrior {
    fn score(&self, sched: &NoiseSchedule, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        sched.check_t(t)?;
        check_len(self.dim(), x_t.len())?;
        let ab = sched.alpha_bar(t);
        let c = ab.sqrt();
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .zip(x_t)
            .map(|((m, v), x)| -(x - c * m) / (ab * v + 1.0 - ab))
            .collect())
    }

    fn measurement_vjp(
        &self,
        sched: &NoiseSchedule,
        x_t: &[f64],
        t: usize,
        v: &[f64],
    ) -> Option<Result<Vec<f64>>> {
        let run = || {
            sched.check_t(t)?;
            check_len(self.dim(), x_t.len())?;
            check_len(self.dim(), v.len())?;
            let ab = sched.alpha_bar(t);
            let c = ab.sqrt();
            Ok(self
                .var
                .iter()
                .zip(v)
                .map(|(pv, u)| ab * pv / (ab * pv + 1.0 - ab) / c * u)
                .collect())
        };
        Some(run())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Mixture of diagonal Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
    log_weights: Vec<f64>,
}

/// Per-component quantities at one evaluation point.
struct GmmEval {
    resp: Vec<f64>,
    comp_scores: Vec<Vec<f64>>,
    marg_vars: Vec<Vec<f64>>,
    log_density: f64,
}

impl GmmPrior {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::param("mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::param("prior dimension must be positive"));
        }
        for c in &components {
            check_len(dim, c.mean.len())?;
            check_len(dim, c.var.len())?;
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::param("mixture weights must be positive"));
            }
            if c.var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::param("component variances must be positive and finite"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param(format!("mixture weights sum to {total}, not 1")));
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        Ok(Self {
            components,
            log_weights,
        })
    }

    /// Equal-weight mixture over the given (mean, var) pairs.
    pub fn uniform(parts: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let n = parts.len() as f64;
        Self::new(
            parts
                .into_iter()
                .map(|(mean, var)| GmmComponent {
                    weight: 1.0 / n,
                    mean,
                    var,
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    fn eval(&self, sched: &NoiseSchedule, x_t: &[f64], t: usize) -> Result<GmmEval> {
        sched.check_t(t)?;
        check_len(self.dim(), x_t.len())?;
        let ab = sched.alpha_bar(t);
        let c = ab.sqrt();
        let mut logs = Vec::with_capacity(self.components.len());
        let mut comp_scores = Vec::with_capacity(self.components.len());
        let mut marg_vars = Vec::with_capacity(self.components.len());
        for (comp, lw) in self.components.iter().zip(&self.log_weights) {
            let mv: Vec<f64> = comp.var.iter().map(|v| ab * v + 1.0 - ab).collect();
            let s: Vec<f64> = comp
                .mean
                .iter()
                .zip(&mv)
                .zip(x_t)
                .map(|((m, v), x)| -(x - c * m) / v)
                .collect();
            let lp: f64 = s
                .iter()
                .zip(&mv)
                .map(|(si, v)| -0.5 * ((2.0 * PI * v).ln() + si * si * v))
                .sum();
            logs.push(lw + lp);
            comp_scores.push(s);
            marg_vars.push(mv);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_density = max + sum.ln();
        let resp = logs.iter().map(|l| (l - log_density).exp()).collect();
        Ok(GmmEval {
            resp,
            comp_scores,
            marg_vars,
            log_density,
        })
    }

    pub fn log_marginal(&self, sched: &NoiseSchedule, x_t: &[f64], t: usize) -> Result<f64> {
        Ok(self.eval(sched, x_t, t)?.log_density)
    }

    /// Posterior component probabilities given `x_t`.
    pub fn responsibilities(
        &self,
        sched: &NoiseSchedule,
        x_t: &[f64],
        t: usize,
    ) -> Result<Vec<f64>> {
        Ok(self.eval(sched, x_t, t)?.resp)
    }
}

fn weighted_score(ev: &GmmEval, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (r, s) in ev.resp.iter().zip(&ev.comp_scores) {
        for (o, si) in out.iter_mut().zip(s) {
            *o += r * si;
        }
    }
    out
}

impl ScoreModel for GmmPrior {
    fn score(&self, sched: &NoiseSchedule, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let ev = self.eval(sched, x_t, t)?;
        Ok(weighted_score(&ev, self.dim()))
    }

    fn measurement_vjp(
        &self,
        sched: &NoiseSchedule,
        x_t: &[f64],
        t: usize,
        v: &[f64],
    ) -> Option<Result<Vec<f64>>> {
        let run = || {
            check_len(self.dim(), v.len())?;
            let ev = self.eval(sched, x_t, t)?;
            let ab = sched.alpha_bar(t);
            let score = weighted_score(&ev, self.dim());
            // Hessian of the log-mixture applied to v:
            //   sum_c r_c (H_c v + s_c (s_c . v)) - s (s . v)
            let mut hv = vec![0.0; score.len()];
            let sv: f64 = score.iter().zip(v).map(|(a, b)| a * b).sum();
            for ((r, sc), mv) in ev.resp.iter().zip(&ev.comp_scores).zip(&ev.marg_vars) {
                let scv: f64 = sc.iter().zip(v).map(|(a, b)| a * b).sum();
                for i in 0..hv.len() {
                    hv[i] += r * (-v[i] / mv[i] + sc[i] * scv);
                }
            }
            for (h, s) in hv.iter_mut().zip(&score) {
                *h -= s * sv;
            }
            let scale = 1.0 / ab.sqrt();
            Ok(v.iter()
                .zip(&hv)
                .map(|(u, h)| (u + (1.0 - ab) * h) * scale)
                .collect())
        };
        Some(run())
    }
}

/// Orthonormal DCT-II basis, row `j` holds the `j`-th basis vector.
fn dct_basis(len: usize) -> Vec<f64> {
    let mut q = vec![0.0; len * len];
    let n = len as f64;
    for j in 0..len {
        let c = if j == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..len {
            q[j * len + i] = c * (PI * (i as f64 + 0.5) * j as f64 / n).cos();
        }
    }
    q
}

/// A prior that factorises over consecutive blocks of `block_len` samples,
/// each block carrying the same Gaussian mixture over its orthonormal DCT
/// coefficients. Trailing samples that do not fill a block get an isotropic
/// Gaussian with the mixture's average variance.
///
/// Because the blocks are independent, the prior knows what a source sounds
/// like locally but carries no information tying one block's component to
/// the next.
#[derive(Debug, Clone)]
pub struct BlockDctPrior {
    block_len: usize,
    basis: Vec<f64>,
    inner: GmmPrior,
    tail: GaussianPrior,
}

impl BlockDctPrior {
    pub fn new(inner: GmmPrior) -> Result<Self> {
        let block_len = inner.dim();
        let avg_var = inner
            .components()
            .iter()
            .map(|c| c.weight * c.var.iter().sum::<f64>() / block_len as f64)
            .sum::<f64>();
        Ok(Self {
            block_len,
            basis: dct_basis(block_len),
            inner,
            tail: GaussianPrior::isotropic(1, 0.0, avg_var)?,
        })
    }

    /// Zero-mean mixture with one component per voice. Each component's
    /// coefficient variances are those of the voice's harmonics with
    /// independent uniform phases, plus a white `floor`.
    pub fn harmonic_bank(
        block_len: usize,
        sample_rate: u32,
        voices: &[HarmonicVoice],
        floor: f64,
    ) -> Result<Self> {
        if block_len == 0 {
            return Err(Error::param("block length must be positive"));
        }
        if voices.is_empty() {
            return Err(Error::param("harmonic bank needs at least one voice"));
        }
        if !(floor > 0.0) {
            return Err(Error::param("variance floor must be positive"));
        }
        let basis = dct_basis(block_len);
        let parts = voices
            .iter()
            .map(|voice| {
                let mut var = vec![floor; block_len];
                for (h, amp) in voice.amplitudes.iter().enumerate() {
                    let omega = 2.0 * PI * voice.f0 * (h + 1) as f64 / sample_rate as f64;
                    for (j, vj) in var.iter_mut().enumerate() {
                        let row = &basis[j * block_len..(j + 1) * block_len];
                        let (mut re, mut im) = (0.0, 0.0);
                        for (i, q) in row.iter().enumerate() {
                            re += q * (omega * i as f64).cos();
                            im += q * (omega * i as f64).sin();
                        }
                        *vj += 0.5 * amp * amp * (re * re + im * im);
                    }
                }
                (vec![0.0; block_len], var)
            })
            .collect();
        Self::new(GmmPrior::uniform(parts)?)
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn inner(&self) -> &GmmPrior {
        &self.inner
    }

    fn forward(&self, block: &[f64]) -> Vec<f64> {
        let l = self.block_len;
        (0..l)
            .map(|j| {
                self.basis[j * l..(j + 1) * l]
                    .iter()
                    .zip(block)
                    .map(|(q, x)| q * x)
                    .sum()
            })
            .collect()
    }

    fn inverse_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let l = self.block_len;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, c) in coeffs.iter().enumerate() {
            for (o, q) in out.iter_mut().zip(&self.basis[j * l..(j + 1) * l]) {
                *o += c * q;
            }
        }
    }

    fn map_blocks(
        &self,
        x_t: &[f64],
        mut per_block: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>,
        mut per_tail: impl FnMut(usize, f64) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        let l = self.block_len;
        let mut out = vec![0.0; x_t.len()];
        let full = x_t.len() / l;
        for b in 0..full {
            let coeffs = self.forward(&x_t[b * l..(b + 1) * l]);
            let mapped = per_block(b, &coeffs)?;
            self.inverse_into(&mapped, &mut out[b * l..(b + 1) * l]);
        }
        for i in full * l..x_t.len() {
            out[i] = per_tail(i, x_t[i])?;
        }
        Ok(out)
    }

    /// Sum of the blocks' log-marginals.
    pub fn log_marginal(&self, sched: &NoiseSchedule, x_t: &[f64], t: usize) -> Result<f64> {
        let l = self.block_len;
        let full = x_t.len() / l;
        let mut total = 0.0;
        for b in 0..full {
            let coeffs = self.forward(&x_t[b * l..(b + 1) * l]);
            total += self.inner.log_marginal(sched, &coeffs, t)?;
        }
        for x in &x_t[full * l..] {
            total += self.tail.log_marginal(sched, &[*x], t)?;
        }
        Ok(total)
    }
}

impl ScoreModel for BlockDctPrior {
    fn score(&self, sched: &NoiseSchedule, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        sched.check_t(t)?;
        self.map_blocks(
            x_t,
            |_, c| self.inner.score(sched, c, t),
            |_, x| Ok(self.tail.score(sched, &[x], t)?[0]),
        )
    }

    fn measurement_vjp(
        &self,
        sched: &NoiseSchedule,
        x_t: &[f64],
        t: usize,
        v: &[f64],
    ) -> Option<Result<Vec<f64>>> {
        let run = || {
            sched.check_t(t)?;
            check_len(x_t.len(), v.len())?;
            let l = self.block_len;
            self.map_blocks(
                x_t,
                |b, c| {
                    let vc = self.forward(&v[b * l..(b + 1) * l]);
                    self.inner.measurement_vjp(sched, c, t, &vc).unwrap()
                },
                |i, x| Ok(self.tail.measurement_vjp(sched, &[x], t, &[v[i]]).unwrap()?[0]),
            )
        };
        Some(run())
    }
}

const VECTOR_MAGIC: &[u8; 4] = b"SDPR";
const VECTOR_VERSION: u32 = 1;

/// Writes a vector file: `"SDPR"`, version `u32`, length `u64`, then
/// little-endian `f64` values.
pub fn write_vector_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * values.len());
    buf.extend_from_slice(VECTOR_MAGIC);
    buf.extend_from_slice(&VECTOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_vector_file(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_vector_bytes(&bytes)
        .map_err(|msg| Error::Config(format!("{}: {msg}", path.display())))
}

fn parse_vector_bytes(bytes: &[u8]) -> std::result::Result<Vec<f64>, String> {
    if bytes.len() < 16 {
        return Err("vector file shorter than its header".into());
    }
    if &bytes[..4] != VECTOR_MAGIC {
        return Err("bad magic, expected SDPR".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VECTOR_VERSION {
        return Err(format!("unsupported vector file version {version}"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != len * 8 {
        return Err(format!(
            "header declares {len} values but body holds {} bytes",
            body.len()
        ));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
