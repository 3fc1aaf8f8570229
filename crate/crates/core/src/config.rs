//! JSON run configuration. Unknown keys are rejected everywhere.
//!
//! ```json
//! {
//!   "mesh": { "fine_level": 2, "coarse_level": 1, "electrodes": 16,
//!             "coverage": 0.5, "contact_impedance": 0.01 },
//!   "stimulation": { "amplitude": 0.1 },
//!   "noise": { "gamma": 0.0002, "seed": 11 },
//!   "truth": { "kind": "star_draw", "seed": 2, "grid_size": 256 },
//!   "prior": { "family": "star_shaped", ... },
//!   "chain": { "beta": 0.03, "delta": 0.01, "n_samples": 100000, ... },
//!   "report": { "raster_size": 128, "kde_points": 64 },
//!   "output_dir": "runs/desk-a-star"
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{adjacent_stimulation_patterns, StimulationMatrix};
use crate::inference::{ChainConfig, ChainSettings, Monitor};
use crate::mesh::ElectrodeLayout;
use crate::priors::PriorConfig;
use crate::truth::TruthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSettings {
    /// Refinement level of the data mesh.
    pub fine_level: u32,
    /// Refinement level of the inversion mesh.
    pub coarse_level: u32,
    pub electrodes: usize,
    pub coverage: f64,
    pub contact_impedance: f64,
}

impl MeshSettings {
    pub fn layout(&self) -> Result<ElectrodeLayout> {
        ElectrodeLayout::uniform(self.electrodes, self.coverage, self.contact_impedance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulationSettings {
    /// Current driven between adjacent electrodes.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSettings {
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSettings {
    #[serde(default = "default_raster_size")]
    pub raster_size: usize,
    #[serde(default = "default_kde_points")]
    pub kde_points: usize,
    /// Number of posterior sample rasters per chain.
    #[serde(default = "default_sample_rasters")]
    pub sample_rasters: usize,
}

fn default_raster_size() -> usize {
    128
}

fn default_kde_points() -> usize {
    64
}

fn default_sample_rasters() -> usize {
    4
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self {
            raster_size: default_raster_size(),
            kde_points: default_kde_points(),
            sample_rasters: default_sample_rasters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshSettings,
    pub stimulation: StimulationSettings,
    pub noise: NoiseSettings,
    pub truth: TruthSpec,
    pub prior: PriorConfig,
    pub chain: ChainSettings,
    #[serde(default)]
    pub report: ReportSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Checks every section. Equal data and inversion meshes are refused
    /// unless `allow_inverse_crime` is set.
    pub fn validate(&self, allow_inverse_crime: bool) -> Result<()> {
        let m = &self.mesh;
        m.layout()?;
        if m.fine_level < m.coarse_level {
            return Err(Error::config("fine mesh level must not be below the coarse level"));
        }
        if m.fine_level == m.coarse_level && !allow_inverse_crime {
            return Err(Error::config(
                "data and inversion meshes coincide (inverse crime); pass --allow-inverse-crime to proceed",
            ));
        }
        if m.fine_level > 6 {
            return Err(Error::config("fine mesh level above 6 is not supported"));
        }
        if !(self.stimulation.amplitude > 0.0 && self.stimulation.amplitude.is_finite()) {
            return Err(Error::config("stimulation amplitude must be positive"));
        }
        if !(self.noise.gamma > 0.0 && self.noise.gamma.is_finite()) {
            return Err(Error::config("noise level gamma must be positive"));
        }
        self.truth.validate()?;
        self.chain_config().validate()?;
        let r = &self.report;
        if r.raster_size == 0 || r.kde_points < 2 {
            return Err(Error::config("report raster size and KDE points must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<ElectrodeLayout> {
        self.mesh.layout()
    }

    pub fn stimulation_matrix(&self) -> Result<StimulationMatrix> {
        adjacent_stimulation_patterns(self.mesh.electrodes, self.stimulation.amplitude)
    }

    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            prior: self.prior.clone(),
            settings: self.chain.clone(),
        }
    }

    fn base(truth: TruthSpec, prior: PriorConfig, chain: ChainSettings, fine_level: u32, coarse_level: u32) -> Self {
        Self {
            mesh: MeshSettings {
                fine_level,
                coarse_level,
                electrodes: 16,
                coverage: 0.5,
                contact_impedance: 0.01,
            },
            stimulation: StimulationSettings { amplitude: 0.1 },
            noise: NoiseSettings {
                gamma: 2e-4,
                seed: 11,
            },
            truth,
            prior,
            chain,
            report: ReportSettings::default(),
            output_dir: None,
        }
    }

    fn desk_chain(beta: f64, delta: Option<f64>, monitors: Vec<Monitor>, seed: u64) -> ChainSettings {
        ChainSettings {
            beta,
            delta,
            n_samples: 100_000,
            burn_in: 20_000,
            monitors,
            seed,
            snapshot_every: 1000,
            checkpoint_every: Some(10_000),
        }
    }

    fn paper_chain(beta: f64, delta: Option<f64>, monitors: Vec<Monitor>, seed: u64) -> ChainSettings {
        ChainSettings {
            beta,
            delta,
            n_samples: 2_500_000,
            burn_in: 500_000,
            monitors,
            seed,
            snapshot_every: 10_000,
            checkpoint_every: Some(50_000),
        }
    }

    fn star_monitors() -> Vec<Monitor> {
        vec![
            Monitor::CenterX,
            Monitor::CenterY,
            Monitor::Fourier { k1: 1, k2: 0 },
            Monitor::Fourier { k1: 2, k2: 0 },
            Monitor::Fourier { k1: 3, k2: 0 },
        ]
    }

    fn field_monitors() -> Vec<Monitor> {
        vec![
            Monitor::Fourier { k1: 0, k2: 0 },
            Monitor::Fourier { k1: 1, k2: 0 },
            Monitor::Fourier { k1: 0, k2: 1 },
            Monitor::Fourier { k1: 1, k2: 1 },
            Monitor::Fourier { k1: 2, k2: 0 },
            Monitor::Fourier { k1: 0, k2: 2 },
        ]
    }

    /// Desk scale: grid 2⁵, level 1 inversion mesh, level 2 data mesh,
    /// 10⁵ samples.
    pub fn desk_a_star() -> Self {
        Self::base(
            TruthSpec::conductivity_a(),
            PriorConfig::paper_star_shaped(32),
            Self::desk_chain(0.006, Some(0.006), Self::star_monitors(), 101),
            2,
            1,
        )
    }

    pub fn desk_b_level_set() -> Self {
        Self::base(
            TruthSpec::conductivity_b(),
            PriorConfig::paper_level_set(32),
            Self::desk_chain(0.02, None, Self::field_monitors(), 202),
            2,
            1,
        )
    }

    pub fn desk_b_log_gaussian() -> Self {
        Self::base(
            TruthSpec::conductivity_b(),
            PriorConfig::paper_log_gaussian(32),
            Self::desk_chain(0.02, None, Self::field_monitors(), 303),
            2,
            1,
        )
    }

    /// Paper scale (not run in CI): star prior on grid 2⁸, β = 0.03,
    /// δ = 0.01, 2.5·10⁶ samples.
    pub fn paper_a_star() -> Self {
        Self::base(
            TruthSpec::conductivity_a(),
            PriorConfig::paper_star_shaped(256),
            Self::paper_chain(0.03, Some(0.01), Self::star_monitors(), 101),
            4,
            3,
        )
    }

    pub fn paper_b_level_set() -> Self {
        Self::base(
            TruthSpec::conductivity_b(),
            PriorConfig::paper_level_set(128),
            Self::paper_chain(0.005, None, Self::field_monitors(), 202),
            4,
            3,
        )
    }

    pub fn paper_b_log_gaussian() -> Self {
        Self::base(
            TruthSpec::conductivity_b(),
            PriorConfig::paper_log_gaussian(128),
            Self::paper_chain(0.01, None, Self::field_monitors(), 303),
            4,
            3,
        )
    }

    pub fn named(name: &str) -> Option<Self> {
        Some(match name {
            "desk_a_star" => Self::desk_a_star(),
            "desk_b_level_set" => Self::desk_b_level_set(),
            "desk_b_log_gaussian" => Self::desk_b_log_gaussian(),
            "paper_a_star" => Self::paper_a_star(),
            "paper_b_level_set" => Self::paper_b_level_set(),
            "paper_b_log_gaussian" => Self::paper_b_log_gaussian(),
            _ => return None,
        })
    }

    pub const NAMES: [&'static str; 6] = [
        "desk_a_star",
        "desk_b_level_set",
        "desk_b_log_gaussian",
        "paper_a_star",
        "paper_b_level_set",
        "paper_b_log_gaussian",
    ];
}
