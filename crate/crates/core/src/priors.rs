//! Maps from sample space to piecewise-constant conductivities and the
//! three configured prior families.
//!
//! Conductivities are evaluated at triangle centroids throughout, so set
//! membership for star-shaped inclusions and phases of level sets are
//! decided once per triangle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{grid_to_mesh, radial_eval, BoundaryCondition, CovarianceSpec, FieldSampler, GridField};
use crate::forward::Conductivity;
use crate::mesh::Mesh;

/// `h(z) = (1 + tanh z) / 2`, mapping the radial field into `(0, 1)`.
pub fn star_transform(z: f64) -> f64 {
    0.5 * (1.0 + z.tanh())
}

/// `σ = exp(u)` at each centroid.
pub fn f1_log_gaussian(u: &GridField, mesh: &Mesh) -> Result<Conductivity> {
    Ok(Conductivity(grid_to_mesh(u, mesh)?.into_iter().map(f64::exp).collect()))
}

/// Whether `point` lies in the star-shaped set with centre `center` and
/// untransformed radial field `radius`.
pub fn in_star(radius: &GridField, center: [f64; 2], point: [f64; 2]) -> bool {
    let dx = point[0] - center[0];
    let dy = point[1] - center[1];
    let r = star_transform(radial_eval(radius, dy.atan2(dx)));
    dx.hypot(dy) <= r
}

/// `u₊` inside the star-shaped set, `u₋` outside.
pub fn f2_star_shaped(
    radius: &GridField,
    center: [f64; 2],
    u_plus: f64,
    u_minus: f64,
    mesh: &Mesh,
) -> Result<Conductivity> {
    if !(u_plus > 0.0 && u_minus > 0.0) {
        return Err(Error::config(format!(
            "star-shaped phase values must be positive, got u+ = {u_plus}, u- = {u_minus}"
        )));
    }
    if radius.boundary != BoundaryCondition::Dirichlet1D {
        return Err(Error::config("star-shaped radius must be a Dirichlet1D field"));
    }
    Ok(Conductivity(
        (0..mesh.triangle_count())
            .map(|t| {
                if in_star(radius, center, mesh.centroid(t)) {
                    u_plus
                } else {
                    u_minus
                }
            })
            .collect(),
    ))
}

/// Thresholds `c₁ < … < c_{n−1}` and constant phase values `f₁ … f_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSetMap {
    pub thresholds: Vec<f64>,
    pub phases: Vec<f64>,
}

impl LevelSetMap {
    pub fn binary(threshold: f64, below: f64, above: f64) -> Self {
        Self {
            thresholds: vec![threshold],
            phases: vec![below, above],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.len() != self.thresholds.len() + 1 {
            return Err(Error::config(format!(
                "{} thresholds need {} phases, got {}",
                self.thresholds.len(),
                self.thresholds.len() + 1,
                self.phases.len()
            )));
        }
        if self.thresholds.windows(2).any(|w| !(w[0] < w[1])) || self.thresholds.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("level-set thresholds must be finite and strictly increasing"));
        }
        if self.phases.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::config("level-set phase values must be positive"));
        }
        Ok(())
    }

    /// Phase for value `u`: `f_i` where `c_{i−1} ≤ u < c_i`.
    pub fn phase(&self, u: f64) -> f64 {
        self.phases[self.thresholds.partition_point(|&c| c <= u)]
    }

    pub fn min_phase(&self) -> f64 {
        self.phases.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_phase(&self) -> f64 {
        self.phases.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn f3_level_set(u: &GridField, map: &LevelSetMap, mesh: &Mesh) -> Result<Conductivity> {
    map.validate()?;
    Ok(Conductivity(
        grid_to_mesh(u, mesh)?.into_iter().map(|v| map.phase(v)).collect(),
    ))
}

/// Total area of triangles where the two conductivities differ by more
/// than `1e-12`.
pub fn measure_of_symmetric_difference(a: &Conductivity, b: &Conductivity, mesh: &Mesh) -> Result<f64> {
    if a.len() != mesh.triangle_count() || b.len() != mesh.triangle_count() {
        return Err(Error::config("conductivities do not match the mesh"));
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .enumerate()
        .filter(|(_, (x, y))| (*x - *y).abs() > 1e-12)
        .map(|(t, _)| mesh.area(t))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    /// `exp♯ N(mean, C)` on `[-1, 1]²`.
    LogGaussian { covariance: CovarianceSpec, mean: f64 },
    /// `h♯ N(mean, C) × U([-b, b]²)` for the radial field and centre.
    StarShaped {
        covariance: CovarianceSpec,
        mean: f64,
        u_plus: f64,
        u_minus: f64,
        center_half_width: f64,
    },
    /// `N(mean, C)` thresholded by a level-set map.
    LevelSet {
        covariance: CovarianceSpec,
        mean: f64,
        thresholds: Vec<f64>,
        phases: Vec<f64>,
    },
}

impl PriorConfig {
    /// `exp♯ N(0.5 log 2, 10¹⁶ (40² − Δ_N)^(−6))`.
    pub fn paper_log_gaussian(grid_size: usize) -> Self {
        PriorConfig::LogGaussian {
            covariance: CovarianceSpec {
                q: 1e16,
                tau: 40.0,
                alpha: 6.0,
                boundary: BoundaryCondition::Neumann2D,
                grid_size,
            },
            mean: 0.5 * 2f64.ln(),
        }
    }

    /// `h♯ N(0.5, 10⁹ (30² − Δ_D)^(−3)) × U([-0.5, 0.5]²)`, phases 2 / 1.
    pub fn paper_star_shaped(grid_size: usize) -> Self {
        PriorConfig::StarShaped {
            covariance: CovarianceSpec {
                q: 1e9,
                tau: 30.0,
                alpha: 3.0,
                boundary: BoundaryCondition::Dirichlet1D,
                grid_size,
            },
            mean: 0.5,
            u_plus: 2.0,
            u_minus: 1.0,
            center_half_width: 0.5,
        }
    }

    /// `N(0, (35² − Δ_N)^(−5))` with threshold 0 and phases 1 / 2.
    pub fn paper_level_set(grid_size: usize) -> Self {
        PriorConfig::LevelSet {
            covariance: CovarianceSpec {
                q: 1.0,
                tau: 35.0,
                alpha: 5.0,
                boundary: BoundaryCondition::Neumann2D,
                grid_size,
            },
            mean: 0.0,
            thresholds: vec![0.0],
            phases: vec![1.0, 2.0],
        }
    }

    pub fn level_set_map(&self) -> Option<LevelSetMap> {
        match self {
            PriorConfig::LevelSet { thresholds, phases, .. } => Some(LevelSetMap {
                thresholds: thresholds.clone(),
                phases: phases.clone(),
            }),
            _ => None,
        }
    }

    pub fn covariance(&self) -> &CovarianceSpec {
        match self {
            PriorConfig::LogGaussian { covariance, .. }
            | PriorConfig::StarShaped { covariance, .. }
            | PriorConfig::LevelSet { covariance, .. } => covariance,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            PriorConfig::LogGaussian { mean, .. }
            | PriorConfig::StarShaped { mean, .. }
            | PriorConfig::LevelSet { mean, .. } => *mean,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            PriorConfig::LogGaussian { .. } => "log_gaussian",
            PriorConfig::StarShaped { .. } => "star_shaped",
            PriorConfig::LevelSet { .. } => "level_set",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cov = self.covariance();
        cov.validate()?;
        let expected = match self {
            PriorConfig::StarShaped { .. } => BoundaryCondition::Dirichlet1D,
            _ => BoundaryCondition::Neumann2D,
        };
        if cov.boundary != expected {
            return Err(Error::config(format!(
                "{} prior needs a {expected} covariance, got {}",
                self.family(),
                cov.boundary
            )));
        }
        if !self.mean().is_finite() {
            return Err(Error::config("prior mean must be finite"));
        }
        match self {
            PriorConfig::StarShaped {
                u_plus,
                u_minus,
                center_half_width,
                ..
            } => {
                if !(*u_plus > 0.0 && *u_minus > 0.0) {
                    return Err(Error::config("star-shaped phase values must be positive"));
                }
                if !(*center_half_width > 0.0 && *center_half_width < 1.0) {
                    return Err(Error::config("centre box half width must lie in (0, 1)"));
                }
            }
            PriorConfig::LevelSet { .. } => self.level_set_map().expect("level set").validate()?,
            PriorConfig::LogGaussian { .. } => {}
        }
        Ok(())
    }
}

/// A point of the sample space of one of the prior families.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorState {
    LogGaussian { field: GridField },
    StarShaped { radius: GridField, center: [f64; 2] },
    LevelSet { field: GridField },
}

impl PriorState {
    /// The Gaussian field component (the radial field for star shapes).
    pub fn field(&self) -> &GridField {
        match self {
            PriorState::LogGaussian { field } | PriorState::LevelSet { field } => field,
            PriorState::StarShaped { radius, .. } => radius,
        }
    }

    pub fn with_field(&self, field: GridField) -> Self {
        match self {
            PriorState::LogGaussian { .. } => PriorState::LogGaussian { field },
            PriorState::LevelSet { .. } => PriorState::LevelSet { field },
            PriorState::StarShaped { center, .. } => PriorState::StarShaped {
                radius: field,
                center: *center,
            },
        }
    }

    pub fn center(&self) -> Option<[f64; 2]> {
        match self {
            PriorState::StarShaped { center, .. } => Some(*center),
            _ => None,
        }
    }
}

/// A configured prior: its field sampler plus the pushforward map.
#[derive(Debug, Clone)]
pub struct Prior {
    config: PriorConfig,
    sampler: FieldSampler,
    level_set: Option<LevelSetMap>,
}

impl Prior {
    pub fn new(config: PriorConfig) -> Result<Self> {
        config.validate()?;
        let sampler = FieldSampler::new(*config.covariance())?;
        let level_set = config.level_set_map();
        Ok(Self {
            config,
            sampler,
            level_set,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn sampler(&self) -> &FieldSampler {
        &self.sampler
    }

    pub fn field_mean(&self) -> f64 {
        self.config.mean()
    }

    /// Half width of the uniform centre prior, for star shapes.
    pub fn center_half_width(&self) -> Option<f64> {
        match self.config {
            PriorConfig::StarShaped {
                center_half_width, ..
            } => Some(center_half_width),
            _ => None,
        }
    }

    pub fn center_in_support(&self, center: [f64; 2]) -> bool {
        self.center_half_width()
            .is_some_and(|b| center[0].abs() <= b && center[1].abs() <= b)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PriorState {
        let field = self.sampler.sample(self.config.mean(), rng);
        match &self.config {
            PriorConfig::LogGaussian { .. } => PriorState::LogGaussian { field },
            PriorConfig::LevelSet { .. } => PriorState::LevelSet { field },
            PriorConfig::StarShaped {
                center_half_width, ..
            } => {
                let b = *center_half_width;
                let center = [rng.random_range(-b..=b), rng.random_range(-b..=b)];
                PriorState::StarShaped {
                    radius: field,
                    center,
                }
            }
        }
    }

    /// The state at the prior mean (centred inclusion for star shapes).
    pub fn mean_state(&self) -> PriorState {
        let cov = self.config.covariance();
        let field = GridField::constant(cov.boundary, cov.grid_size, self.config.mean());
        match &self.config {
            PriorConfig::LogGaussian { .. } => PriorState::LogGaussian { field },
            PriorConfig::LevelSet { .. } => PriorState::LevelSet { field },
            PriorConfig::StarShaped { .. } => PriorState::StarShaped {
                radius: field,
                center: [0.0, 0.0],
            },
        }
    }

    pub fn pushforward(&self, state: &PriorState, mesh: &Mesh) -> Result<Conductivity> {
        match (&self.config, state) {
            (PriorConfig::LogGaussian { .. }, PriorState::LogGaussian { field }) => f1_log_gaussian(field, mesh),
            (
                PriorConfig::StarShaped { u_plus, u_minus, .. },
                PriorState::StarShaped { radius, center },
            ) => f2_star_shaped(radius, *center, *u_plus, *u_minus, mesh),
            (PriorConfig::LevelSet { .. }, PriorState::LevelSet { field }) => {
                f3_level_set(field, self.level_set.as_ref().expect("level set"), mesh)
            }
            _ => Err(Error::config("prior state does not match the prior family")),
        }
    }

    /// Range of conductivity values the pushforward can take, when bounded.
    pub fn phase_range(&self) -> Option<(f64, f64)> {
        match &self.config {
            PriorConfig::LogGaussian { .. } => None,
            PriorConfig::StarShaped { u_plus, u_minus, .. } => Some((u_plus.min(*u_minus), u_plus.max(*u_minus))),
            PriorConfig::LevelSet { .. } => self.level_set.as_ref().map(|m| (m.min_phase(), m.max_phase())),
        }
    }
}
