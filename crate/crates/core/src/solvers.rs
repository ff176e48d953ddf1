//! Posterior samplers for `y = sum_k x^k`.
//!
//! All samplers hold the per-source states in the rescaled coordinates
//! `z = x_t / sqrt(alpha_bar_t)`, in which a clean source plus noise of level
//! `sigma_t` sits on the same scale as the mixture `y`. Scores are obtained
//! from the variance-preserving [`ScoreModel`]s and converted on the fly.
//!
//! One reverse step from `t` to `t - 1` splits at `sigma_hat` (see
//! [`NoiseSchedule::sigma_hat`]): the stochastic reverse SDE is integrated
//! from `sigma_t` down to `sigma_hat`, re-injecting `sigma_t^2 - sigma_hat^2`
//! of fresh variance, and the deterministic flow covers the rest of the way
//! to `sigma_{t-1}`. Both parts share one score evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{guidance_radius, speaker_guidance_gradient, Embedder};
use crate::prior::{tweedie_denoise, ScoreModel};
use crate::rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Ancestral sampling with a constant-step likelihood gradient.
    Dps,
    /// Ancestral sampling with a likelihood step of radius `sqrt(D) * sigma_post_t`.
    Dsg,
    /// Independent per-source sampling with the soft mixture-residual score term.
    Dirac,
    /// Anchor-constrained sampling followed by likelihood refinement.
    #[default]
    Hybrid,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Dps => "dps",
            SolverKind::Dsg => "dsg",
            SolverKind::Dirac => "dirac",
            SolverKind::Hybrid => "hybrid",
        }
    }
}

/// Step-size rule for likelihood-gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// Constant coefficient `gamma`.
    #[default]
    DpsConst,
    /// Unit gradient direction scaled to `sqrt(D) * sigma_post_t`.
    Dsg,
}

/// Coefficient of the residual term in the soft Dirac score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum XiSchedule {
    /// `xi_t = 1 / (sigma_t^2 K)`.
    #[default]
    InverseVariance,
    Constant(f64),
}

/// Sign convention of the residual term `xi_t (y - sum_j x^j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XiSign {
    /// Added to the score, pulling the sum of sources towards the mixture.
    #[default]
    Corrective,
    /// Subtracted from the score.
    Literal,
}

/// How the anchor-constrained stage moves the tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintUpdate {
    /// Scores and injected noise are projected onto the sum-preserving
    /// subspace (each track minus the across-track mean).
    #[default]
    Projected,
    /// Each track moves by its score minus the anchor's score; noise goes to
    /// every track and the anchor is re-projected on the next step.
    AnchorDifference,
}

/// Where the speaker-guidance direction is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Subtracted from the scores before the reverse step.
    #[default]
    Score,
    /// Subtracted from the states directly before the scores are evaluated.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationConfig {
    #[serde(rename = "K")]
    pub sources: usize,
    pub solver: SolverKind,
    /// Number of leading reverse steps run anchor-constrained (hybrid only).
    #[serde(rename = "T_dirac")]
    pub t_dirac: usize,
    /// Likelihood refinement iterations after the last reverse step (hybrid only).
    #[serde(rename = "T_D")]
    pub t_dps: usize,
    #[serde(rename = "T_spk_start")]
    pub t_spk_start: usize,
    #[serde(rename = "T_spk_end")]
    pub t_spk_end: usize,
    pub gamma: f64,
    /// Step rule of the hybrid's likelihood steps.
    pub refine_gamma_mode: GammaMode,
    pub xi: XiSchedule,
    pub xi_sign: XiSign,
    /// Read from the schedule section of run configs.
    #[serde(skip)]
    pub churn: f64,
    pub seed: u64,
    pub guidance_enabled: bool,
    /// Multiplier on the guidance radius `sqrt(D) * sigma_post_t`.
    pub guidance_scale: f64,
    pub guidance_mode: GuidanceMode,
    pub update: ConstraintUpdate,
    /// Zero-based anchor track.
    pub anchor: usize,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            sources: 2,
            solver: SolverKind::Hybrid,
            t_dirac: 200,
            t_dps: 1,
            t_spk_start: 75,
            t_spk_end: 175,
            gamma: 0.25,
            refine_gamma_mode: GammaMode::DpsConst,
            xi: XiSchedule::InverseVariance,
            xi_sign: XiSign::Corrective,
            churn: 0.0,
            seed: 0,
            guidance_enabled: true,
            guidance_scale: 1.0,
            guidance_mode: GuidanceMode::Score,
            update: ConstraintUpdate::Projected,
            anchor: 0,
        }
    }
}

impl SeparationConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let steps = sched.steps();
        if self.sources == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.anchor >= self.sources {
            return Err(Error::Config(format!(
                "anchor {} out of range for K = {}",
                self.anchor, self.sources
            )));
        }
        if !(self.t_spk_start <= self.t_spk_end
            && self.t_spk_end <= self.t_dirac
            && self.t_dirac <= steps)
        {
            return Err(Error::Config(format!(
                "need 0 <= T_spk_start ({}) <= T_spk_end ({}) <= T_dirac ({}) <= T ({steps})",
                self.t_spk_start, self.t_spk_end, self.t_dirac
            )));
        }
        if !(0.0..=1.0).contains(&self.churn) {
            return Err(Error::Config(format!("churn must lie in [0, 1], got {}", self.churn)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be finite and >= 0".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config("guidance_scale must be finite and >= 0".into()));
        }
        if let XiSchedule::Constant(v) = self.xi {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config("constant xi must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    /// Whether any step can apply guidance.
    pub fn guidance_active(&self) -> bool {
        self.guidance_enabled && self.guidance_scale > 0.0 && self.t_spk_end >= 1
    }

    fn in_window(&self, t: usize) -> bool {
        self.guidance_active() && t >= self.t_spk_start && t <= self.t_spk_end
    }

    fn xi_at(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self.xi {
            XiSchedule::InverseVariance => {
                1.0 / (sched.sigma(t).powi(2) * self.sources as f64)
            }
            XiSchedule::Constant(v) => v,
        }
    }
}

/// The per-source states at timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<Vec<f64>>,
    pub t: usize,
    pub anchor: usize,
}

impl TrackSet {
    pub fn new(tracks: Vec<Vec<f64>>, t: usize, anchor: usize) -> Result<Self> {
        let dim = tracks
            .first()
            .ok_or_else(|| Error::param("track set needs at least one track"))?
            .len();
        if let Some(bad) = tracks.iter().find(|x| x.len() != dim) {
            return Err(Error::shape(dim, bad.len()));
        }
        if anchor >= tracks.len() {
            return Err(Error::param(format!(
                "anchor {anchor} out of range for {} tracks",
                tracks.len()
            )));
        }
        Ok(Self { tracks, t, anchor })
    }

    pub fn sources(&self) -> usize {
        self.tracks.len()
    }

    pub fn dim(&self) -> usize {
        self.tracks[0].len()
    }

    fn check_mixture(&self, y: &[f64]) -> Result<()> {
        if y.len() == self.dim() {
            Ok(())
        } else {
            Err(Error::shape(self.dim(), y.len()))
        }
    }

    /// `y - sum_k x^k`.
    pub fn residual(&self, y: &[f64]) -> Vec<f64> {
        let mut r = y.to_vec();
        for x in &self.tracks {
            for (ri, xi) in r.iter_mut().zip(x) {
                *ri -= xi;
            }
        }
        r
    }

    fn all_finite(&self) -> bool {
        self.tracks.iter().flatten().all(|v| v.is_finite())
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Replaces the anchor track by `y - sum_{j != a} x^j`.
pub fn anchor_project(y: &[f64], ts: &mut TrackSet) -> Result<()> {
    ts.check_mixture(y)?;
    let a = ts.anchor;
    let mut anchor = y.to_vec();
    for (j, x) in ts.tracks.iter().enumerate() {
        if j != a {
            for (ai, xi) in anchor.iter_mut().zip(x) {
                *ai -= xi;
            }
        }
    }
    ts.tracks[a] = anchor;
    Ok(())
}

/// Orthogonal projection onto `{sum_k x^k = y}`: every track absorbs `1/K`
/// of the residual.
fn orthogonal_project(y: &[f64], ts: &mut TrackSet) {
    let k = ts.sources() as f64;
    let r = ts.residual(y);
    for x in &mut ts.tracks {
        for (xi, ri) in x.iter_mut().zip(&r) {
            *xi += ri / k;
        }
    }
}

fn subtract_track_mean(vs: &mut [Vec<f64>]) {
    let k = vs.len() as f64;
    let dim = vs[0].len();
    for i in 0..dim {
        let mean = vs.iter().map(|v| v[i]).sum::<f64>() / k;
        for v in vs.iter_mut() {
            v[i] -= mean;
        }
    }
}

fn check_models(models: &[&dyn ScoreModel], k: usize) -> Result<()> {
    if models.len() == k {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} score models supplied for {k} tracks",
            models.len()
        )))
    }
}

/// Score of the rescaled state `z` at level `t`: `sqrt(ab) * s(sqrt(ab) z, t)`.
fn rescaled_score(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    z: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let c = sched.alpha_bar(t).sqrt();
    let x_t: Vec<f64> = z.iter().map(|v| v * c).collect();
    Ok(model
        .score(sched, &x_t, t)?
        .into_iter()
        .map(|s| s * c)
        .collect())
}

fn prior_scores(
    ts: &TrackSet,
    models: &[&dyn ScoreModel],
    sched: &NoiseSchedule,
    t: usize,
) -> Result<Vec<Vec<f64>>> {
    ts.tracks
        .iter()
        .zip(models)
        .map(|(z, m)| rescaled_score(*m, sched, z, t))
        .collect()
}

/// Tweedie estimates of the clean sources from rescaled states at level `t`.
pub fn denoised_tracks(
    ts: &TrackSet,
    models: &[&dyn ScoreModel],
    sched: &NoiseSchedule,
    t: usize,
) -> Result<Vec<Vec<f64>>> {
    check_models(models, ts.sources())?;
    sched.check_t(t)?;
    let c = sched.alpha_bar(t).sqrt();
    ts.tracks
        .iter()
        .zip(models)
        .map(|(z, m)| {
            let x_t: Vec<f64> = z.iter().map(|v| v * c).collect();
            let s = m.score(sched, &x_t, t)?;
            tweedie_denoise(sched, &x_t, &s, t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGradient {
    /// Gradient of `||y - sum_j x0_hat^j||^2` with respect to each rescaled track.
    pub grads: Vec<Vec<f64>>,
    /// `||y - sum_j x0_hat^j||`.
    pub residual_norm: f64,
    /// True when every model supplied its denoiser Jacobian.
    pub exact: bool,
}

/// Gradient of the measurement residual of the Tweedie estimates, evaluated
/// at the track set's own timestep.
///
/// With the denoiser Jacobian available this is exact:
/// `g^k = -2 J_k^T (y - sum_j x0_hat^j)`. Otherwise the Jacobian is
/// treated as the identity in rescaled coordinates (`g^k = -2 (y - sum x0_hat)`),
/// which is the detached approximation `-(2 / sqrt(ab)) (y - sum x0_hat)` in
/// the unscaled ones.
pub fn dps_likelihood_gradient(
    y: &[f64],
    ts: &TrackSet,
    models: &[&dyn ScoreModel],
    sched: &NoiseSchedule,
) -> Result<LikelihoodGradient> {
    likelihood_gradient_at(y, ts, models, sched, ts.t)
}

fn likelihood_gradient_at(
    y: &[f64],
    ts: &TrackSet,
    models: &[&dyn ScoreModel],
    sched: &NoiseSchedule,
    t: usize,
) -> Result<LikelihoodGradient> {
    ts.check_mixture(y)?;
    check_models(models, ts.sources())?;
    sched.check_t(t)?;
    let x0 = denoised_tracks(ts, models, sched, t)?;
    let mut res = y.to_vec();
    for x in &x0 {
        for (r, v) in res.iter_mut().zip(x) {
            *r -= v;
        }
    }
    let c = sched.alpha_bar(t).sqrt();
    let mut exact = true;
    let mut grads = Vec::with_capacity(ts.sources());
    for (z, m) in ts.tracks.iter().zip(models) {
        let x_t: Vec<f64> = z.iter().map(|v| v * c).collect();
        let pulled = match m.measurement_vjp(sched, &x_t, t, &res) {
            Some(v) => v?.into_iter().map(|u| u * c).collect(),
            None => {
                exact = false;
                res.clone()
            }
        };
        grads.push(pulled.into_iter().map(|u| -2.0 * u).collect());
    }
    Ok(LikelihoodGradient {
        grads,
        residual_norm: l2(&res),
        exact,
    })
}

/// Step coefficient for a likelihood update: `gamma` for DPS, the radius
/// `sqrt(D) * sigma_post_t` for DSG (the caller divides by the gradient norm).
pub fn guidance_coefficient(
    mode: GammaMode,
    sched: &NoiseSchedule,
    t: usize,
    gamma: f64,
    dim: usize,
) -> f64 {
    match mode {
        GammaMode::DpsConst => gamma,
        GammaMode::Dsg => guidance_radius(dim, sched.sigma_post(t)),
    }
}

fn likelihood_step(
    grad: &LikelihoodGradient,
    mode: GammaMode,
    sched: &NoiseSchedule,
    t: usize,
    gamma: f64,
    dim: usize,
) -> Vec<Vec<f64>> {
    let coeff = guidance_coefficient(mode, sched, t, gamma, dim);
    let scale = match mode {
        GammaMode::DpsConst => coeff,
        GammaMode::Dsg => {
            let n = grad.grads.iter().map(|g| l2(g).powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                coeff / n
            } else {
                0.0
            }
        }
    };
    grad.grads
        .iter()
        .map(|g| g.iter().map(|v| -scale * v).collect())
        .collect()
}

/// `s(x^k) + xi_t (y - sum_j x^j)` for the corrective sign, `s - xi_t (...)`
/// for the literal one.
pub fn dirac_posterior_score(
    y: &[f64],
    ts: &TrackSet,
    models: &[&dyn ScoreModel],
    sched: &NoiseSchedule,
    xi_t: f64,
    sign: XiSign,
) -> Result<Vec<Vec<f64>>> {
    ts.check_mixture(y)?;
    check_models(models, ts.sources())?;
    sched.check_step(ts.t)?;
    let scores = prior_scores(ts, models, sched, ts.t)?;
    Ok(add_residual_term(scores, &ts.residual(y), xi_t, sign))
}

fn add_residual_term(
    mut scores: Vec<Vec<f64>>,
    residual: &[f64],
    xi_t: f64,
    sign: XiSign,
) -> Vec<Vec<f64>> {
    let w = match sign {
        XiSign::Corrective => xi_t,
        XiSign::Literal => -xi_t,
    };
    for s in &mut scores {
        for (si, ri) in s.iter_mut().zip(residual) {
            *si += w * ri;
        }
    }
    scores
}

/// `steps` gradient-descent updates on `||y - sum_j x0_hat^j||^2`, the i-th
/// evaluated at schedule level `steps - i`. `steps = 0` leaves `ts` untouched.
pub fn dps_refine(
    y: &[f64],
    ts: &mut TrackSet,
    models: &[&dyn ScoreModel],
    sched: &NoiseSchedule,
    steps: usize,
    mode: GammaMode,
    gamma: f64,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if steps > sched.steps() {
        return Err(Error::Config(format!(
            "{steps} refinement steps exceed the schedule length {}",
            sched.steps()
        )));
    }
    let dim = ts.dim();
    let mut entry = None;
    for level in (1..=steps).rev() {
        let grad = likelihood_gradient_at(y, ts, models, sched, level)?;
        let entry_norm = *entry.get_or_insert(grad.residual_norm);
        if grad.residual_norm > 10.0 * entry_norm.max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence {
                stage: "dps refinement",
                step: level,
                detail: format!(
                    "residual grew from {entry_norm:.3e} to {:.3e}",
                    grad.residual_norm
                ),
            });
        }
        let delta = likelihood_step(&grad, mode, sched, level, gamma, dim);
        for (x, d) in ts.tracks.iter_mut().zip(&delta) {
            for (xi, di) in x.iter_mut().zip(d) {
                *xi += di;
            }
        }
        if !ts.all_finite() {
            return Err(Error::Divergence {
                stage: "dps refinement",
                step: level,
                detail: "non-finite sample".into(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Anchor-constrained step of the hybrid sampler.
    Anchored,
    /// Independent tracks with the soft residual score term.
    SoftDirac,
    /// Ancestral step plus a likelihood-gradient correction.
    Likelihood,
    /// Refinement iteration after the last reverse step.
    Refine,
}

/// What an observer sees after each reverse step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub stage: Stage,
    pub t: usize,
    /// `|y - sum_k x^k|_inf` right after the anchor projection, when one ran.
    pub projected_residual: Option<f64>,
    /// Speaker loss when guidance ran on this step.
    pub speaker_loss: Option<f64>,
    pub tracks: &'a [Vec<f64>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub sources: Vec<Vec<f64>>,
    /// `|y - sum_k x^k|_inf` of the returned sources.
    pub residual_inf: f64,
    pub guidance_steps: usize,
}

/// Runs the configured sampler and returns the estimated sources.
pub fn separate(
    y: &[f64],
    cfg: &SeparationConfig,
    models: &[&dyn ScoreModel],
    sched: &NoiseSchedule,
    embedder: Option<&dyn Embedder>,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<Separation> {
    Sampler::new(y, cfg, models, sched, embedder)?.run(observer)
}

/// The hybrid sampler: anchor-constrained steps with optional speaker
/// guidance, likelihood refinement, terminal anchor projection.
pub fn hybrid_separate(
    y: &[f64],
    cfg: &SeparationConfig,
    models: &[&dyn ScoreModel],
    sched: &NoiseSchedule,
    embedder: Option<&dyn Embedder>,
) -> Result<Vec<Vec<f64>>> {
    let cfg = SeparationConfig {
        solver: SolverKind::Hybrid,
        ..cfg.clone()
    };
    Ok(separate(y, &cfg, models, sched, embedder, &mut |_| {})?.sources)
}

struct Sampler<'a> {
    y: &'a [f64],
    cfg: &'a SeparationConfig,
    models: &'a [&'a dyn ScoreModel],
    sched: &'a NoiseSchedule,
    embedder: Option<&'a dyn Embedder>,
}

impl<'a> Sampler<'a> {
    fn new(
        y: &'a [f64],
        cfg: &'a SeparationConfig,
        models: &'a [&'a dyn ScoreModel],
        sched: &'a NoiseSchedule,
        embedder: Option<&'a dyn Embedder>,
    ) -> Result<Self> {
        cfg.validate(sched)?;
        check_models(models, cfg.sources)?;
        if y.is_empty() {
            return Err(Error::param("mixture is empty"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("mixture contains non-finite samples"));
        }
        if cfg.guidance_active() && embedder.is_none() {
            return Err(Error::Config(
                "speaker guidance is enabled over a nonempty window but no embedder was supplied"
                    .into(),
            ));
        }
        Ok(Self {
            y,
            cfg,
            models,
            sched,
            embedder,
        })
    }

    fn stage_at(&self, t: usize) -> Stage {
        match self.cfg.solver {
            SolverKind::Dps | SolverKind::Dsg => Stage::Likelihood,
            SolverKind::Dirac => Stage::SoftDirac,
            SolverKind::Hybrid => {
                if t + self.cfg.t_dirac > self.sched.steps() {
                    Stage::Anchored
                } else {
                    Stage::Likelihood
                }
            }
        }
    }

    fn likelihood_mode(&self) -> GammaMode {
        match self.cfg.solver {
            SolverKind::Dps => GammaMode::DpsConst,
            SolverKind::Dsg => GammaMode::Dsg,
            _ => self.cfg.refine_gamma_mode,
        }
    }

    fn init(&self) -> Result<TrackSet> {
        let steps = self.sched.steps();
        let scale = 1.0 / self.sched.alpha_bar(steps).sqrt();
        let dim = self.y.len();
        let tracks = (0..self.cfg.sources)
            .map(|k| {
                rng::normals(self.cfg.seed, "init", &[k as u64], dim)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect()
            })
            .collect();
        let mut ts = TrackSet::new(tracks, steps, self.cfg.anchor)?;
        if self.stage_at(steps) == Stage::Anchored && self.cfg.update == ConstraintUpdate::Projected
        {
            orthogonal_project(self.y, &mut ts);
        }
        Ok(ts)
    }

    fn guidance(&self, ts: &TrackSet, t: usize) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
        if !self.cfg.in_window(t) {
            return Ok(None);
        }
        let radius =
            self.cfg.guidance_scale * guidance_radius(ts.dim(), self.sched.sigma_post(t));
        if radius == 0.0 {
            return Ok(None);
        }
        let embedder = self.embedder.expect("checked at construction");
        let dir = speaker_guidance_gradient(&ts.tracks, embedder)?;
        let step = dir
            .direction
            .into_iter()
            .map(|g| g.into_iter().map(|v| radius * v).collect())
            .collect();
        Ok(Some((dir.loss, step)))
    }

    fn step(
        &self,
        ts: &mut TrackSet,
        t: usize,
        observer: &mut dyn FnMut(&StepEvent<'_>),
    ) -> Result<()> {
        let stage = self.stage_at(t);
        let sched = self.sched;
        let k_count = ts.sources();
        let dim = ts.dim();

        let mut projected_residual = None;
        if stage == Stage::Anchored {
            anchor_project(self.y, ts)?;
            projected_residual = Some(inf_norm(&ts.residual(self.y)));
        }

        let guidance = self.guidance(ts, t)?;
        let speaker_loss = guidance.as_ref().map(|(l, _)| *l);
        if let (Some((_, g)), GuidanceMode::Direct) = (&guidance, self.cfg.guidance_mode) {
            let mut g = g.clone();
            if stage == Stage::Anchored && self.cfg.update == ConstraintUpdate::Projected {
                subtract_track_mean(&mut g);
            }
            for (x, gi) in ts.tracks.iter_mut().zip(&g) {
                for (xi, v) in x.iter_mut().zip(gi) {
                    *xi -= v;
                }
            }
            if stage == Stage::Anchored {
                anchor_project(self.y, ts)?;
            }
        }

        let mut scores = prior_scores(ts, self.models, sched, t)?;
        if stage == Stage::SoftDirac {
            scores = add_residual_term(
                scores,
                &ts.residual(self.y),
                self.cfg.xi_at(sched, t),
                self.cfg.xi_sign,
            );
        }
        if let (Some((_, g)), GuidanceMode::Score) = (&guidance, self.cfg.guidance_mode) {
            for (s, gi) in scores.iter_mut().zip(g) {
                for (si, v) in s.iter_mut().zip(gi) {
                    *si -= v;
                }
            }
        }

        let likelihood = if stage == Stage::Likelihood {
            let grad = likelihood_gradient_at(self.y, ts, self.models, sched, t)?;
            Some(likelihood_step(&grad, self.likelihood_mode(), sched, t, self.cfg.gamma, dim))
        } else {
            None
        };

        if stage == Stage::Anchored {
            match self.cfg.update {
                ConstraintUpdate::Projected => subtract_track_mean(&mut scores),
                ConstraintUpdate::AnchorDifference => {
                    let anchor = scores[ts.anchor].clone();
                    for s in &mut scores {
                        for (si, ai) in s.iter_mut().zip(&anchor) {
                            *si -= ai;
                        }
                    }
                }
            }
        }

        let sigma = sched.sigma(t);
        let sigma_prev = sched.sigma(t - 1);
        let sigma_hat = sched.sigma_hat(t, self.cfg.churn)?;
        let sde_var = sigma * sigma - sigma_hat * sigma_hat;
        let drift = sde_var + 0.5 * (sigma_hat * sigma_hat - sigma_prev * sigma_prev);
        let noise_std = sde_var.max(0.0).sqrt();

        let mut noise: Vec<Vec<f64>> = (0..k_count)
            .map(|k| rng::normals(self.cfg.seed, "noise", &[t as u64, k as u64], dim))
            .collect();
        if stage == Stage::Anchored && self.cfg.update == ConstraintUpdate::Projected {
            subtract_track_mean(&mut noise);
        }

        for k in 0..k_count {
            let x = &mut ts.tracks[k];
            for i in 0..dim {
                x[i] += drift * scores[k][i] + noise_std * noise[k][i];
            }
            if let Some(l) = &likelihood {
                for (xi, li) in x.iter_mut().zip(&l[k]) {
                    *xi += li;
                }
            }
        }
        ts.t = t - 1;

        if !ts.all_finite() {
            return Err(Error::Divergence {
                stage: stage_name(stage),
                step: t,
                detail: "non-finite sample".into(),
            });
        }
        observer(&StepEvent {
            stage,
            t,
            projected_residual,
            speaker_loss,
            tracks: &ts.tracks,
        });
        Ok(())
    }

    fn run(&self, observer: &mut dyn FnMut(&StepEvent<'_>)) -> Result<Separation> {
        let mut ts = self.init()?;
        let mut guidance_steps = 0;
        for t in (1..=self.sched.steps()).rev() {
            if self.cfg.in_window(t) {
                guidance_steps += 1;
            }
            self.step(&mut ts, t, observer)?;
        }
        if self.cfg.solver == SolverKind::Hybrid && self.cfg.t_dps > 0 {
            dps_refine(
                self.y,
                &mut ts,
                self.models,
                self.sched,
                self.cfg.t_dps,
                self.cfg.refine_gamma_mode,
                self.cfg.gamma,
            )?;
            observer(&StepEvent {
                stage: Stage::Refine,
                t: 0,
                projected_residual: None,
                speaker_loss: None,
                tracks: &ts.tracks,
            });
        }
        ts.t = 0;
        anchor_project(self.y, &mut ts)?;
        let residual_inf = inf_norm(&ts.residual(self.y));
        Ok(Separation {
            sources: ts.tracks,
            residual_inf,
            guidance_steps,
        })
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Anchored => "anchored sampling",
        Stage::SoftDirac => "soft dirac sampling",
        Stage::Likelihood => "likelihood-guided sampling",
        Stage::Refine => "dps refinement",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::GaussianPrior;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(50, 1e-3, 5e-2).unwrap()
    }

    #[test]
    fn anchor_projection_examples() {
        let mut ts = TrackSet::new(vec![vec![5.0], vec![0.3]], 3, 0).unwrap();
        anchor_project(&[1.0], &mut ts).unwrap();
        assert!((ts.tracks[0][0] - 0.7).abs() < 1e-15);
        assert_eq!(ts.tracks[1][0], 0.3);

        let mut single = TrackSet::new(vec![vec![9.0, -2.0]], 3, 0).unwrap();
        anchor_project(&[1.0, 2.0], &mut single).unwrap();
        assert_eq!(single.tracks[0], vec![1.0, 2.0]);

        let mut bad = TrackSet::new(vec![vec![0.0, 0.0]], 3, 0).unwrap();
        assert!(anchor_project(&[1.0], &mut bad).is_err());
    }

    #[test]
    fn track_set_validation() {
        assert!(TrackSet::new(vec![], 0, 0).is_err());
        assert!(TrackSet::new(vec![vec![0.0], vec![0.0, 1.0]], 0, 0).is_err());
        assert!(TrackSet::new(vec![vec![0.0]], 0, 1).is_err());
    }

    #[test]
    fn coefficient_modes() {
        let s = NoiseSchedule::linear(200, 1e-4, 2e-2).unwrap();
        for t in [1, 100, 200] {
            assert_eq!(guidance_coefficient(GammaMode::DpsConst, &s, t, 1.0, 64), 1.0);
        }
        let hi = guidance_coefficient(GammaMode::Dsg, &s, 200, 1.0, 64);
        let lo = guidance_coefficient(GammaMode::Dsg, &s, 1, 1.0, 64);
        assert!(hi > lo);
    }

    #[test]
    fn dirac_score_without_residual_or_coefficient() {
        let s = sched();
        let p = GaussianPrior::new(vec![0.5, -0.5], vec![1.0, 2.0]).unwrap();
        let models: Vec<&dyn ScoreModel> = vec![&p, &p];
        let ts = TrackSet::new(vec![vec![0.25, 0.5], vec![-0.125, 0.375]], 20, 0).unwrap();
        let raw = prior_scores(&ts, &models, &s, 20).unwrap();
        let y_match = vec![0.125, 0.875];
        let a = dirac_posterior_score(&y_match, &ts, &models, &s, 3.0, XiSign::Corrective).unwrap();
        assert_eq!(a, raw);
        let b = dirac_posterior_score(&[5.0, 5.0], &ts, &models, &s, 0.0, XiSign::Literal).unwrap();
        assert_eq!(b, raw);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let s = sched();
        let p = GaussianPrior::new(vec![0.5, -0.5], vec![1.0, 2.0]).unwrap();
        let models: Vec<&dyn ScoreModel> = vec![&p, &p];
        let ts = TrackSet::new(vec![vec![0.2, 0.4], vec![-0.1, 0.3]], 10, 0).unwrap();
        let x0 = denoised_tracks(&ts, &models, &s, 10).unwrap();
        let y: Vec<f64> = (0..2).map(|i| x0[0][i] + x0[1][i]).collect();
        let g = dps_likelihood_gradient(&y, &ts, &models, &s).unwrap();
        assert!(g.exact);
        assert!(g.grads.iter().flatten().all(|v| v.abs() < 1e-14));
    }

    struct NoVjp(GaussianPrior);

    impl ScoreModel for NoVjp {
        fn score(&self, sched: &NoiseSchedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
            self.0.score(sched, x, t)
        }
    }

    #[test]
    fn detached_gradient_at_t0() {
        let s = sched();
        let p = NoVjp(GaussianPrior::isotropic(3, 0.0, 1.0).unwrap());
        let models: Vec<&dyn ScoreModel> = vec![&p];
        let ts = TrackSet::new(vec![vec![0.5, 1.0, -1.0]], 0, 0).unwrap();
        let y = [1.0, 1.0, 1.0];
        let g = dps_likelihood_gradient(&y, &ts, &models, &s).unwrap();
        assert!(!g.exact);
        assert_eq!(g.grads[0], vec![-1.0, 0.0, -4.0]);
    }

    #[test]
    fn missing_model_is_a_config_error() {
        let s = sched();
        let p = GaussianPrior::isotropic(2, 0.0, 1.0).unwrap();
        let models: Vec<&dyn ScoreModel> = vec![&p];
        let ts = TrackSet::new(vec![vec![0.0; 2], vec![0.0; 2]], 5, 0).unwrap();
        assert!(matches!(
            dps_likelihood_gradient(&[0.0, 0.0], &ts, &models, &s),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let s = NoiseSchedule::linear(200, 1e-4, 2e-2).unwrap();
        let mut cfg = SeparationConfig::default();
        assert!(cfg.validate(&s).is_ok());
        cfg.t_spk_end = 201;
        assert!(cfg.validate(&s).is_err());
        for cfg in [
            SeparationConfig { t_spk_start: 180, ..Default::default() },
            SeparationConfig { anchor: 2, ..Default::default() },
            SeparationConfig { churn: 1.5, ..Default::default() },
        ] {
            assert!(cfg.validate(&s).is_err());
        }
    }

    #[test]
    fn guidance_without_embedder_is_rejected() {
        let s = sched();
        let p = GaussianPrior::isotropic(4, 0.0, 1.0).unwrap();
        let models: Vec<&dyn ScoreModel> = vec![&p, &p];
        let cfg = SeparationConfig {
            t_dirac: 50,
            t_spk_start: 10,
            t_spk_end: 20,
            ..Default::default()
        };
        let err = separate(&[0.0; 4], &cfg, &models, &s, None, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn divergence_is_reported_with_step() {
        struct Exploding;
        impl ScoreModel for Exploding {
            fn score(&self, _: &NoiseSchedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
                Ok(x.iter().map(|_| if t < 40 { f64::NAN } else { 0.0 }).collect())
            }
        }
        let s = sched();
        let m = Exploding;
        let models: Vec<&dyn ScoreModel> = vec![&m, &m];
        let cfg = SeparationConfig {
            t_dirac: 50,
            t_spk_start: 0,
            t_spk_end: 0,
            ..Default::default()
        };
        let err = separate(&[0.0; 3], &cfg, &models, &s, None, &mut |_| {}).unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert_eq!(step, 39),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn refine_zero_steps_is_identity() {
        let s = sched();
        let p = GaussianPrior::isotropic(3, 0.0, 1.0).unwrap();
        let models: Vec<&dyn ScoreModel> = vec![&p, &p];
        let mut ts = TrackSet::new(vec![vec![0.1, 0.2, 0.3], vec![1.0, 2.0, 3.0]], 0, 0).unwrap();
        let before = ts.clone();
        dps_refine(&[1.0; 3], &mut ts, &models, &s, 0, GammaMode::DpsConst, 10.0).unwrap();
        assert_eq!(ts, before);
    }

    #[test]
    fn refine_reduces_residual_and_guards_blowup() {
        let s = sched();
        let p = GaussianPrior::new(vec![0.3, -0.2, 0.0], vec![0.5, 1.0, 2.0]).unwrap();
        let models: Vec<&dyn ScoreModel> = vec![&p, &p];
        let ts0 = TrackSet::new(vec![vec![0.1, 0.2, 0.3], vec![1.0, -2.0, 3.0]], 1, 0).unwrap();
        let y = [1.0, 0.5, -0.5];
        let before = likelihood_gradient_at(&y, &ts0, &models, &s, 1).unwrap().residual_norm;
        let mut ts = ts0.clone();
        dps_refine(&y, &mut ts, &models, &s, 1, GammaMode::DpsConst, 0.1).unwrap();
        let after = likelihood_gradient_at(&y, &ts, &models, &s, 1).unwrap().residual_norm;
        assert!(after < before);

        // a huge step overshoots; with several steps the guard trips
        let mut ts = ts0.clone();
        let err = dps_refine(&y, &mut ts, &models, &s, 5, GammaMode::DpsConst, 50.0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }
}
