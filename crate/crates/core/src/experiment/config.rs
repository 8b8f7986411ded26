use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, Rect, RegionMask, ScalarField};
use crate::mcmc::ChainConfig;
use crate::point_process::BinPartition;
use crate::prior::{LinkConfig, MaternConfig};

/// Latent truth `W₀` before the cutoff is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LatentSpec {
    Zero,
    Constant {
        value: f64,
    },
    /// `A·exp(−c·ξ² − c·(η − η₀)²)` in disk coordinates `ξ = 2x−1, η = 2y−1`.
    PaperBump {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_bump_center")]
        center: [f64; 2],
    },
}

fn default_amplitude() -> f64 {
    5.0
}
fn default_decay() -> f64 {
    10.0
}
fn default_bump_center() -> [f64; 2] {
    [0.0, 0.4]
}

impl LatentSpec {
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        match *self {
            LatentSpec::Zero => 0.0,
            LatentSpec::Constant { value } => value,
            LatentSpec::PaperBump { amplitude, decay, center } => {
                let (xi, eta) = to_disk(x, y);
                amplitude * (-decay * (xi - center[0]).powi(2) - decay * (eta - center[1]).powi(2)).exp()
            }
        }
    }
}

/// Initial density φ, normalised to unit mass after evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceSpec {
    Uniform,
    /// `exp(cos(fπ(ξ² + η²)))`.
    PaperCosine {
        #[serde(default = "default_frequency")]
        frequency: f64,
    },
}

fn default_frequency() -> f64 {
    3.0
}

impl SourceSpec {
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        match *self {
            SourceSpec::Uniform => 1.0,
            SourceSpec::PaperCosine { frequency } => {
                let (xi, eta) = to_disk(x, y);
                (frequency * std::f64::consts::PI * (xi * xi + eta * eta)).cos().exp()
            }
        }
    }
}

/// Killing rate on the open observation window, zero elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KillingSpec {
    Constant {
        level: f64,
    },
    /// `outside + (inside − outside)·σ((radius − |x − centre|)/width)`.
    Focus {
        #[serde(default = "default_inside")]
        inside: f64,
        #[serde(default = "default_outside")]
        outside: f64,
        #[serde(default = "default_focus_center")]
        center: [f64; 2],
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_width")]
        width: f64,
    },
}

fn default_inside() -> f64 {
    800.0
}
fn default_outside() -> f64 {
    400.0
}
fn default_focus_center() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_radius() -> f64 {
    0.1
}
fn default_width() -> f64 {
    0.02
}

impl KillingSpec {
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        match *self {
            KillingSpec::Constant { level } => level,
            KillingSpec::Focus { inside, outside, center, radius, width } => {
                let r = ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt();
                let s = 1.0 / (1.0 + ((r - radius) / width).exp());
                outside + (inside - outside) * s
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            KillingSpec::Constant { level } => level >= 0.0 && level.is_finite(),
            KillingSpec::Focus { inside, outside, radius, width, .. } => {
                inside >= 0.0 && outside >= 0.0 && radius >= 0.0 && width > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("truth.q: invalid killing rate specification {self:?}")))
        }
    }
}

fn to_disk(x: f64, y: f64) -> (f64, f64) {
    (2.0 * x - 1.0, 2.0 * y - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub w0: LatentSpec,
    pub phi: SourceSpec,
    pub q: KillingSpec,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            w0: LatentSpec::PaperBump {
                amplitude: default_amplitude(),
                decay: default_decay(),
                center: default_bump_center(),
            },
            phi: SourceSpec::PaperCosine { frequency: default_frequency() },
            q: KillingSpec::Focus {
                inside: default_inside(),
                outside: default_outside(),
                center: default_focus_center(),
                radius: default_radius(),
                width: default_width(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RescaleMode {
    /// Multiply prior draws by `n^{−d/(4α+2d)}`.
    SampleSize,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub matern: MaternConfig,
    pub link: LinkConfig,
    pub rescale: RescaleMode,
    pub rescale_alpha: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            matern: MaternConfig::default(),
            link: LinkConfig { offset: 15.0, scale: 0.25 },
            rescale: RescaleMode::None,
            rescale_alpha: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticleConfig {
    pub count: usize,
    pub bins: usize,
    pub dt: f64,
    pub horizon: f64,
    pub workers: usize,
    pub write_events: bool,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        ParticleConfig { count: 100_000, bins: 16, dt: 1e-5, horizon: 10.0, workers: 8, write_events: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractionConfig {
    pub ns: Vec<f64>,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        ContractionConfig { ns: vec![1e4, 1e5, 1e6] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcentrationConfig {
    pub bins: usize,
    pub n: f64,
    pub reps: usize,
    pub thresholds: Vec<f64>,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        ConcentrationConfig { bins: 36, n: 1e4, reps: 500, thresholds: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub pairs: usize,
    /// Peak killing rate before scaling.
    pub q_level: f64,
    pub q_scales: Vec<f64>,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig { pairs: 50, q_level: 1.0, q_scales: vec![1.0, 10.0] }
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Sample scale (expected number of molecules).
    pub n: f64,
    /// Nodes per axis.
    pub grid: usize,
    /// Observation window Ω₀₀, tiled by the bins.
    pub window: Rect,
    /// Prior support Ω₀.
    pub support: Rect,
    /// Width of the cutoff ramp; defaults to the smallest window–support gap.
    pub cutoff_margin: Option<f64>,
    /// Number of bins K (a perfect square).
    pub bins: usize,
    pub truth: TruthConfig,
    pub prior: PriorConfig,
    pub chain: ChainConfig,
    pub particles: ParticleConfig,
    pub contraction: ContractionConfig,
    pub concentration: ConcentrationConfig,
    pub stability: StabilityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            n: 1e6,
            grid: 33,
            window: Rect::centered(0.125),
            support: Rect::centered(0.0625),
            cutoff_margin: None,
            bins: 36,
            truth: TruthConfig::default(),
            prior: PriorConfig::default(),
            chain: ChainConfig { iterations: 5_000, burn_in: 2_500, stride: 25, ..ChainConfig::default() },
            particles: ParticleConfig::default(),
            contraction: ContractionConfig::default(),
            concentration: ConcentrationConfig::default(),
            stability: StabilityConfig::default(),
        }
    }
}

/// Side length of a square bin lattice, if `k` is a perfect square.
pub fn square_side(k: usize) -> Option<usize> {
    let s = (k as f64).sqrt().round() as usize;
    (s * s == k && s > 0).then_some(s)
}

impl ExperimentConfig {
    /// Named presets: `desk`, `paper` and `constant`.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = ExperimentConfig::default();
        match name {
            "desk" => Ok(desk),
            "paper" => Ok(ExperimentConfig { n: 1e7, grid: 65, chain: ChainConfig::default(), ..desk }),
            "constant" => Ok(ExperimentConfig {
                truth: TruthConfig {
                    w0: LatentSpec::Zero,
                    phi: SourceSpec::Uniform,
                    q: KillingSpec::Constant { level: 1.0 },
                },
                prior: PriorConfig { link: LinkConfig::default(), ..PriorConfig::default() },
                ..desk
            }),
            other => Err(Error::config(format!("unknown preset {other:?}; expected desk, paper or constant"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    /// Hex SHA-256 of the canonical JSON form (first 16 characters).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises to JSON");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid).map_err(|e| Error::config(format!("grid: {e}")))
    }

    pub fn cutoff_margin(&self) -> f64 {
        self.cutoff_margin.unwrap_or_else(|| {
            let (w, s) = (&self.window, &self.support);
            [w.x_min - s.x_min, s.x_max - w.x_max, w.y_min - s.y_min, s.y_max - w.y_max]
                .into_iter()
                .fold(f64::INFINITY, f64::min)
        })
    }

    pub fn partition(&self, bins: usize) -> Result<BinPartition> {
        let side = square_side(bins).ok_or_else(|| Error::config(format!("bins: {bins} is not a perfect square")))?;
        BinPartition::new(self.grid()?, self.window, side)
    }

    /// Check every field; messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if !(self.n >= 0.0) || !self.n.is_finite() {
            return Err(Error::config(format!("n: must be a nonnegative number, got {}", self.n)));
        }
        for (name, r) in [("window", &self.window), ("support", &self.support)] {
            if !r.is_valid() {
                return Err(Error::config(format!("{name}: {r:?} is not a valid rectangle")));
            }
        }
        if !self.support.contains_rect(&self.window) {
            return Err(Error::config("window: must lie inside support"));
        }
        let support = RegionMask::from_rect(grid, &self.support);
        match support.boundary_clearance() {
            Some(c) if c >= 2 => {}
            _ => return Err(Error::config("support: must stay at least two grid cells away from the boundary")),
        }
        self.partition(self.bins).map_err(|e| Error::config(format!("bins: {e}")))?;
        self.truth.q.validate()?;
        self.prior.matern.validate().map_err(|e| Error::config(format!("prior.matern: {e}")))?;
        self.prior.link.validate().map_err(|e| Error::config(format!("prior.link: {e}")))?;
        if !(self.prior.rescale_alpha > 0.0) {
            return Err(Error::config("prior.rescale_alpha: must be positive"));
        }
        self.chain.validate().map_err(|e| Error::config(format!("chain: {e}")))?;
        let p = &self.particles;
        if !(p.dt > 0.0 && p.horizon > 0.0) || p.workers == 0 {
            return Err(Error::config("particles: dt, horizon and workers must be positive"));
        }
        self.partition(p.bins).map_err(|e| Error::config(format!("particles.bins: {e}")))?;
        if self.contraction.ns.iter().any(|&n| !(n >= 1.0)) {
            return Err(Error::config("contraction.ns: every sample scale must be at least 1"));
        }
        let c = &self.concentration;
        if square_side(c.bins).is_none() || !(c.n > 0.0) || c.thresholds.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::config(
                "concentration: bins must be a perfect square, n positive, thresholds nonnegative",
            ));
        }
        let s = &self.stability;
        if !(s.q_level > 0.0) || s.q_scales.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("stability: q_level and q_scales must be positive"));
        }
        let g = crate::prior::make_cutoff(grid, &self.window, &self.support, self.cutoff_margin());
        g.map_err(|e| Error::config(format!("cutoff_margin: {e}")))?;
        Ok(())
    }

    /// Truth fields evaluated on the grid.
    pub fn truth_fields(&self) -> Result<Truth> {
        Truth::new(self)
    }
}

/// Seed for a named sub-task, derived from the master seed.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Ground truth and model inputs on the grid.
#[derive(Debug, Clone)]
pub struct Truth {
    pub grid: Grid,
    pub cutoff: ScalarField,
    pub w0: ScalarField,
    pub d0: ScalarField,
    pub q: ScalarField,
    pub phi: ScalarField,
}

impl Truth {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let grid = cfg.grid()?;
        let cutoff = crate::prior::make_cutoff(grid, &cfg.window, &cfg.support, cfg.cutoff_margin())?;
        let w0 = ScalarField::from_fn(grid, |x, y| cfg.truth.w0.evaluate(x, y)).mul(&cutoff);
        let d0 = crate::prior::link(&w0, &cfg.prior.link);
        let q = killing_field(cfg, &cfg.truth.q, 1.0)?;
        let phi = ScalarField::from_fn(grid, |x, y| cfg.truth.phi.evaluate(x, y))
            .normalized()
            .map_err(|e| Error::config(format!("truth.phi: {e}")))?;
        let inside = RegionMask::from_rect(grid, &cfg.window);
        let min_phi = inside.active_indices().iter().map(|&k| phi.values()[k]).fold(f64::INFINITY, f64::min);
        if min_phi <= 1.0 {
            log::warn!("normalised φ drops to {min_phi:.3} ≤ 1 on the window; identifiability is not guaranteed");
        }
        Ok(Truth { grid, cutoff, w0, d0, q, phi })
    }
}

/// Killing rate `scale·spec` on the open window, zero elsewhere.
pub fn killing_field(cfg: &ExperimentConfig, spec: &KillingSpec, scale: f64) -> Result<ScalarField> {
    let grid = cfg.grid()?;
    let inner = RegionMask::from_rect_interior(grid, &cfg.window);
    let q = ScalarField::from_fn(grid, |x, y| scale * spec.evaluate(x, y)).masked(&inner);
    if !(q.max() > 0.0) {
        return Err(Error::config("truth.q: q must be positive on the window"));
    }
    Ok(q)
}
