//! Reference conductivities used to synthesise data.
//!
//! Conductivity A is a single draw from the star-shaped prior. Conductivity
//! B has no closed form in the literature we follow; the default here is
//! a two-ellipse stand-in with the same two phase values.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::GridField;
use crate::forward::Conductivity;
use crate::mesh::Mesh;
use crate::priors::{f2_star_shaped, Prior, PriorConfig, PriorState};

pub const BACKGROUND: f64 = 1.0;
pub const INCLUSION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Rotation of the first axis from the x-axis, radians.
    #[serde(default)]
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = (c * dx + s * dy) / self.semi_axes[0];
        let v = (-s * dx + c * dy) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.semi_axes[0] * self.semi_axes[1]
    }

    /// Ramanujan's approximation.
    pub fn perimeter(&self) -> f64 {
        let [a, b] = self.semi_axes;
        PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt())
    }

    fn validate(&self) -> Result<()> {
        let [a, b] = self.semi_axes;
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::config("ellipse semi-axes must be positive"));
        }
        if self.center[0].hypot(self.center[1]) + a.max(b) >= 1.0 {
            return Err(Error::config(format!("ellipse at {:?} leaves the unit disk", self.center)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    /// One draw from the star-shaped prior with phases 2 inside, 1 outside.
    StarDraw { seed: u64, grid_size: usize },
    /// Disjoint elliptical inclusions of value 2 in a background of 1.
    Blobs { blobs: Vec<Ellipse> },
}

impl TruthSpec {
    /// Conductivity A.
    pub fn conductivity_a() -> Self {
        TruthSpec::StarDraw {
            seed: 2,
            grid_size: 256,
        }
    }

    /// Stand-in for conductivity B.
    pub fn conductivity_b() -> Self {
        TruthSpec::Blobs {
            blobs: vec![
                Ellipse {
                    center: [-0.35, 0.3],
                    semi_axes: [0.28, 0.18],
                    angle: 0.5,
                },
                Ellipse {
                    center: [0.3, -0.35],
                    semi_axes: [0.2, 0.2],
                    angle: 0.0,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TruthSpec::StarDraw { grid_size, .. } => {
                PriorConfig::paper_star_shaped(*grid_size).validate()?;
            }
            TruthSpec::Blobs { blobs } => {
                if blobs.is_empty() {
                    return Err(Error::config("blob truth needs at least one inclusion"));
                }
                for b in blobs {
                    b.validate()?;
                }
                for (i, a) in blobs.iter().enumerate() {
                    for b in &blobs[i + 1..] {
                        let gap = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
                        let reach = a.semi_axes[0].max(a.semi_axes[1]) + b.semi_axes[0].max(b.semi_axes[1]);
                        if gap <= reach {
                            return Err(Error::config("blob inclusions must be disjoint"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Truth> {
        self.validate()?;
        Ok(match self {
            TruthSpec::StarDraw { seed, grid_size } => {
                let prior = Prior::new(PriorConfig::paper_star_shaped(*grid_size))?;
                let PriorState::StarShaped { radius, center } = prior.sample(&mut ChaCha8Rng::seed_from_u64(*seed))
                else {
                    unreachable!("star prior yields star states")
                };
                Truth::Star {
                    radius,
                    center,
                    seed: *seed,
                }
            }
            TruthSpec::Blobs { blobs } => Truth::Blobs(blobs.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Star {
        radius: GridField,
        center: [f64; 2],
        seed: u64,
    },
    Blobs(Vec<Ellipse>),
}

impl Truth {
    /// Centroid-sampled conductivity on any mesh.
    pub fn conductivity(&self, mesh: &Mesh) -> Result<Conductivity> {
        match self {
            Truth::Star { radius, center, .. } => f2_star_shaped(radius, *center, INCLUSION, BACKGROUND, mesh),
            Truth::Blobs(blobs) => Ok(Conductivity(
                mesh.centroids()
                    .into_iter()
                    .map(|c| {
                        if blobs.iter().any(|b| b.contains(c)) {
                            INCLUSION
                        } else {
                            BACKGROUND
                        }
                    })
                    .collect(),
            )),
        }
    }

    pub fn center(&self) -> Option<[f64; 2]> {
        match self {
            Truth::Star { center, .. } => Some(*center),
            Truth::Blobs(_) => None,
        }
    }

    /// Analytic inclusion areas, one per blob.
    pub fn analytic_areas(&self) -> Vec<f64> {
        match self {
            Truth::Star { .. } => Vec::new(),
            Truth::Blobs(blobs) => blobs.iter().map(Ellipse::area).collect(),
        }
    }

    pub fn provenance(&self) -> serde_json::Value {
        match self {
            Truth::Star { center, seed, radius } => serde_json::json!({
                "kind": "star_draw",
                "seed": seed,
                "grid_size": radius.grid_size,
                "center": center,
                "values": [BACKGROUND, INCLUSION],
            }),
            Truth::Blobs(blobs) => serde_json::json!({
                "kind": "blobs",
                "blobs": blobs,
                "analytic_areas": self.analytic_areas(),
                "values": [BACKGROUND, INCLUSION],
            }),
        }
    }
}
