use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::{BandEnergyEmbedder, EmbedderConfig};
use crate::metrics::Metric;
use crate::prior::{read_vector_file, BlockDctPrior, GaussianPrior, GmmComponent, GmmPrior, ScoreModel};
use crate::rng;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::signals::{HarmonicVoice, MixtureSpec, WavFormat};
use crate::solvers::SeparationConfig;

use rand::Rng;

/// A full experiment description as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub solver: SeparationConfig,
    #[serde(default)]
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub voices: VoicesConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    /// Absent means no embedder, which only validates with guidance off.
    pub embedder: Option<EmbedderConfig>,
    #[serde(default)]
    pub run: RunSection,
    /// Directory that relative vector-file paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Harmonic voices drawn per mixture: source `k` gets an f0 uniform in
/// `f0_ranges[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoicesConfig {
    pub n_harmonics: usize,
    pub f0_ranges: Vec<(f64, f64)>,
}

impl Default for VoicesConfig {
    fn default() -> Self {
        Self {
            n_harmonics: 4,
            f0_ranges: vec![(100.0, 130.0), (600.0, 800.0)],
        }
    }
}

impl VoicesConfig {
    pub fn draw(&self, seed: u64, mixture_id: usize) -> Vec<HarmonicVoice> {
        self.f0_ranges
            .iter()
            .enumerate()
            .map(|(k, &(lo, hi))| {
                let f0 = if lo == hi {
                    lo
                } else {
                    rng::stream(seed, "voice", &[mixture_id as u64, k as u64]).random_range(lo..=hi)
                };
                HarmonicVoice::new(f0, self.n_harmonics)
            })
            .collect()
    }
}

/// A number broadcast to every sample, an inline vector, or an SDPR file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueSpec {
    Scalar(f64),
    Vector(Vec<f64>),
    File { file: PathBuf },
}

impl ValueSpec {
    pub fn resolve(&self, dim: usize, base: &Path) -> Result<Vec<f64>> {
        let v = match self {
            ValueSpec::Scalar(x) => return Ok(vec![*x; dim]),
            ValueSpec::Vector(v) => v.clone(),
            ValueSpec::File { file } => read_vector_file(&base.join(file))?,
        };
        if v.len() != dim {
            return Err(Error::Config(format!(
                "prior vector has {} entries, expected {dim}",
                v.len()
            )));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianDecl {
    pub mean: ValueSpec,
    pub var: ValueSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDecl {
    pub weight: f64,
    pub mean: ValueSpec,
    pub var: ValueSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    /// Block-DCT mixture with one component per voice of the mixture, shared
    /// by every track.
    HarmonicBank {
        #[serde(default = "default_block_len")]
        block_len: usize,
        #[serde(default = "default_floor")]
        floor: f64,
    },
    /// Per-track diagonal Gaussians; one entry is shared by all tracks.
    Gaussian { tracks: Vec<GaussianDecl> },
    /// Diagonal Gaussian mixture shared by all tracks. With `block_len` the
    /// components live on DCT blocks of that length.
    Gmm {
        block_len: Option<usize>,
        components: Vec<ComponentDecl>,
    },
}

fn default_block_len() -> usize {
    256
}

fn default_floor() -> f64 {
    1e-3
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig::HarmonicBank {
            block_len: default_block_len(),
            floor: default_floor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    #[serde(rename = "N")]
    pub mixtures: usize,
    /// Overridden by `--out` on the command line.
    pub out_dir: Option<PathBuf>,
    pub metrics: Vec<Metric>,
    /// Benchmark variants, from `unprocessed`, `dps`, `dsg`, `dirac`,
    /// `hybrid` and `hybrid_guided`.
    pub variants: Vec<Variant>,
    /// Frame length of the swap-rate diagnostic, in samples.
    pub swap_frame: usize,
    /// Scale mixtures to an RMS of `sqrt(K)` before sampling and undo the
    /// scale afterwards.
    pub normalize: bool,
    pub wav_format: WavFormat,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mixtures: 10,
            out_dir: None,
            metrics: vec![Metric::SiSdr, Metric::Sdr],
            variants: vec![
                Variant::Unprocessed,
                Variant::Dirac,
                Variant::Hybrid,
                Variant::HybridGuided,
            ],
            swap_frame: 256,
            normalize: true,
            wav_format: WavFormat::Pcm16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unprocessed,
    Dps,
    Dsg,
    Dirac,
    Hybrid,
    HybridGuided,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Unprocessed => "unprocessed",
            Variant::Dps => "dps",
            Variant::Dsg => "dsg",
            Variant::Dirac => "dirac",
            Variant::Hybrid => "hybrid",
            Variant::HybridGuided => "hybrid_guided",
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.solver.churn = cfg.schedule.churn;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; also returns the file's hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Config(format!("{} is not valid UTF-8", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((Self::from_toml_str(&text, &base)?, config_hash(&bytes)))
    }

    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule()?;
        self.solver.validate(&sched)?;
        self.mixture
            .validate()
            .map_err(|e| Error::Config(format!("mixture: {e}")))?;
        if self.mixture.sources != self.solver.sources {
            return Err(Error::Config(format!(
                "mixture K = {} differs from solver K = {}",
                self.mixture.sources, self.solver.sources
            )));
        }
        if self.voices.f0_ranges.len() != self.mixture.sources {
            return Err(Error::Config(format!(
                "{} voice f0 ranges for K = {}",
                self.voices.f0_ranges.len(),
                self.mixture.sources
            )));
        }
        if self.voices.n_harmonics == 0 {
            return Err(Error::Config("voices need at least one harmonic".into()));
        }
        let nyquist = self.mixture.sample_rate as f64 / 2.0;
        for &(lo, hi) in &self.voices.f0_ranges {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("invalid f0 range ({lo}, {hi})")));
            }
            if hi * self.voices.n_harmonics as f64 >= nyquist {
                return Err(Error::Config(format!(
                    "f0 up to {hi} Hz with {} harmonics aliases at {} Hz",
                    self.voices.n_harmonics, self.mixture.sample_rate
                )));
            }
        }
        if self.run.mixtures == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.run.swap_frame == 0 {
            return Err(Error::Config("swap_frame must be positive".into()));
        }
        if self.solver.guidance_active() && self.embedder.is_none() {
            return Err(Error::Config(
                "speaker guidance is enabled over a nonempty window but no [embedder] is configured"
                    .into(),
            ));
        }
        if let Some(e) = &self.embedder {
            e.build().map_err(|e| Error::Config(format!("embedder: {e}")))?;
        }
        match &self.prior {
            PriorConfig::HarmonicBank { block_len, floor } => {
                if *block_len == 0 || !(*floor > 0.0) {
                    return Err(Error::Config(
                        "harmonic bank needs block_len > 0 and floor > 0".into(),
                    ));
                }
            }
            PriorConfig::Gaussian { tracks } => {
                if tracks.len() != 1 && tracks.len() != self.solver.sources {
                    return Err(Error::Config(format!(
                        "{} Gaussian prior entries for K = {}",
                        tracks.len(),
                        self.solver.sources
                    )));
                }
            }
            PriorConfig::Gmm { components, .. } => {
                if components.is_empty() {
                    return Err(Error::Config("GMM prior needs components".into()));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule
            .build()
            .map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    pub fn embedder(&self) -> Result<Option<BandEnergyEmbedder>> {
        self.embedder.as_ref().map(|e| e.build()).transpose()
    }

    /// One score model per track, for signals of length `dim`.
    pub fn build_priors(
        &self,
        dim: usize,
        sample_rate: u32,
        voices: &[HarmonicVoice],
    ) -> Result<Vec<Box<dyn ScoreModel>>> {
        let k = self.solver.sources;
        let cfg_err = |e: Error| Error::Config(format!("prior: {e}"));
        match &self.prior {
            PriorConfig::HarmonicBank { block_len, floor } => {
                let bank = BlockDctPrior::harmonic_bank(*block_len, sample_rate, voices, *floor)
                    .map_err(cfg_err)?;
                Ok((0..k).map(|_| Box::new(bank.clone()) as Box<dyn ScoreModel>).collect())
            }
            PriorConfig::Gaussian { tracks } => (0..k)
                .map(|j| {
                    let d = &tracks[j.min(tracks.len() - 1)];
                    let p = GaussianPrior::new(
                        d.mean.resolve(dim, &self.base_dir)?,
                        d.var.resolve(dim, &self.base_dir)?,
                    )
                    .map_err(cfg_err)?;
                    Ok(Box::new(p) as Box<dyn ScoreModel>)
                })
                .collect(),
            PriorConfig::Gmm {
                block_len,
                components,
            } => {
                let cdim = block_len.unwrap_or(dim);
                let comps = components
                    .iter()
                    .map(|c| {
                        Ok(GmmComponent {
                            weight: c.weight,
                            mean: c.mean.resolve(cdim, &self.base_dir)?,
                            var: c.var.resolve(cdim, &self.base_dir)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gmm = GmmPrior::new(comps).map_err(cfg_err)?;
                match block_len {
                    Some(_) => {
                        let p = BlockDctPrior::new(gmm).map_err(cfg_err)?;
                        Ok((0..k).map(|_| Box::new(p.clone()) as Box<dyn ScoreModel>).collect())
                    }
                    None => Ok((0..k).map(|_| Box::new(gmm.clone()) as Box<dyn ScoreModel>).collect()),
                }
            }
        }
    }
}

/// Hex SHA-256 of the raw config bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
