//! Gaussian random fields with covariance `q (τ² − Δ)^(−α)`.
//!
//! Two settings are supported. `Neumann2D` lives on `[-1, 1]²` sampled at
//! the `n × n` cell centres `x_i = −1 + (2i + 1)/n`; its eigenfunctions are
//! products of `cos(kπ(x + 1)/2)` with eigenvalues
//! `(k₁π/2)² + (k₂π/2)²`. `Dirichlet1D` lives on `(-π, π]` sampled at the
//! `n` interior points `θ_j = −π + 2πj/(n + 1)`; its eigenfunctions are
//! `sin(k(θ + π)/2)`, `k = 1..=n`, with eigenvalues `(k/2)²`. Eigenfunctions
//! are L²-normalised, so the coefficient of mode `k` in a sample has
//! variance `q (τ² + λ_k)^(−α)` exactly.
//!
//! Synthesis and analysis are discrete cosine (type III / II) and sine
//! (type I) transforms evaluated through zero-padded FFTs.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    /// Neumann Laplacian on `[-1, 1]²`.
    Neumann2D,
    /// Dirichlet Laplacian on `(-π, π]`.
    Dirichlet1D,
}

impl BoundaryCondition {
    pub fn dimension(self) -> usize {
        match self {
            BoundaryCondition::Neumann2D => 2,
            BoundaryCondition::Dirichlet1D => 1,
        }
    }
}

impl fmt::Display for BoundaryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryCondition::Neumann2D => "neumann2d",
            BoundaryCondition::Dirichlet1D => "dirichlet1d",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSpec {
    pub q: f64,
    pub tau: f64,
    pub alpha: f64,
    pub boundary: BoundaryCondition,
    pub grid_size: usize,
}

impl CovarianceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.q.is_finite() && self.q > 0.0) {
            return Err(Error::config(format!("covariance amplitude q must be positive, got {}", self.q)));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::config(format!("inverse length scale tau must be non-negative, got {}", self.tau)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("regularity exponent alpha must be finite"));
        }
        if self.grid_size < 2 || !self.grid_size.is_power_of_two() {
            return Err(Error::config(format!(
                "grid size must be a power of two ≥ 2, got {}",
                self.grid_size
            )));
        }
        Ok(())
    }

    /// Number of spectral modes (and of grid values).
    pub fn mode_count(&self) -> usize {
        match self.boundary {
            BoundaryCondition::Neumann2D => self.grid_size * self.grid_size,
            BoundaryCondition::Dirichlet1D => self.grid_size,
        }
    }

    /// Mode label of a flat coefficient index: `(k₁, k₂)` for Neumann2D
    /// (x-axis first), `(k, 0)` for Dirichlet1D with `k ≥ 1`.
    pub fn mode_of_index(&self, index: usize) -> (usize, usize) {
        match self.boundary {
            BoundaryCondition::Neumann2D => (index % self.grid_size, index / self.grid_size),
            BoundaryCondition::Dirichlet1D => (index + 1, 0),
        }
    }

    pub fn index_of_mode(&self, mode: (usize, usize)) -> Result<usize> {
        let n = self.grid_size;
        match self.boundary {
            BoundaryCondition::Neumann2D if mode.0 < n && mode.1 < n => Ok(mode.1 * n + mode.0),
            BoundaryCondition::Dirichlet1D if (1..=n).contains(&mode.0) && mode.1 == 0 => Ok(mode.0 - 1),
            _ => Err(Error::config(format!(
                "mode {mode:?} outside the {} grid of size {n}",
                self.boundary
            ))),
        }
    }

    pub fn eigenvalue(&self, mode: (usize, usize)) -> f64 {
        match self.boundary {
            BoundaryCondition::Neumann2D => {
                let a = mode.0 as f64 * PI / 2.0;
                let b = mode.1 as f64 * PI / 2.0;
                a * a + b * b
            }
            BoundaryCondition::Dirichlet1D => (mode.0 as f64 / 2.0).powi(2),
        }
    }

    /// `q (τ² + λ_k)^(−α)`; the constant Neumann mode is excluded when τ = 0.
    pub fn mode_variance(&self, mode: (usize, usize)) -> f64 {
        let shifted = self.tau * self.tau + self.eigenvalue(mode);
        if shifted == 0.0 {
            return 0.0;
        }
        self.q * shifted.powf(-self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub boundary: BoundaryCondition,
    pub grid_size: usize,
    /// Row-major `values[iy · n + ix]` (Neumann2D) or `values[j − 1]` (Dirichlet1D).
    pub values: Vec<f64>,
    pub mean: f64,
}

impl GridField {
    pub fn constant(boundary: BoundaryCondition, grid_size: usize, value: f64) -> Self {
        let len = match boundary {
            BoundaryCondition::Neumann2D => grid_size * grid_size,
            BoundaryCondition::Dirichlet1D => grid_size,
        };
        Self {
            boundary,
            grid_size,
            values: vec![value; len],
            mean: value,
        }
    }

    /// Grid coordinate of index `i` on `[-1, 1]`.
    pub fn cell_center(&self, i: usize) -> f64 {
        -1.0 + (2 * i + 1) as f64 / self.grid_size as f64
    }

    /// Angle of the `j`-th radial sample, `j = 1..=n`.
    pub fn radial_node(&self, j: usize) -> f64 {
        -PI + 2.0 * PI * j as f64 / (self.grid_size + 1) as f64
    }

    /// Bilinear interpolation of a Neumann2D field; constant in the half cell
    /// between the outermost centres and the square's edge.
    pub fn bilinear(&self, x: f64, y: f64) -> Result<f64> {
        if self.boundary != BoundaryCondition::Neumann2D {
            return Err(Error::config("bilinear interpolation needs a Neumann2D field"));
        }
        if !(x.abs() <= 1.0 && y.abs() <= 1.0) {
            return Err(Error::Geometry(format!("point ({x}, {y}) outside [-1, 1]²")));
        }
        let n = self.grid_size;
        let locate = |c: f64| {
            let s = ((c + 1.0) * n as f64 - 1.0) / 2.0;
            let i0 = (s.floor().max(0.0) as usize).min(n - 2);
            // Constant in the outer half cell, consistent with zero normal flux.
            (i0, (s - i0 as f64).clamp(0.0, 1.0))
        };
        let (ix, tx) = locate(x);
        let (iy, ty) = locate(y);
        let v = |i: usize, j: usize| self.values[j * n + i];
        let lower = v(ix, iy) + tx * (v(ix + 1, iy) - v(ix, iy));
        let upper = v(ix, iy + 1) + tx * (v(ix + 1, iy + 1) - v(ix, iy + 1));
        Ok(lower + ty * (upper - lower))
    }

    /// Pointwise map of the field values.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            mean: f(self.mean),
            ..self.clone()
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = format!(
            "gridfield v1 {} {} {:?}\n",
            self.boundary, self.grid_size, self.mean
        )
        .into_bytes();
        for v in &self.values {
            bytes.write_all(&v.to_le_bytes()).expect("write to Vec");
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let perr = |message: String| Error::Parse {
            line: 1,
            section: "gridfield header".into(),
            message,
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| perr("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline]).map_err(|e| perr(e.to_string()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "gridfield" || parts[1] != "v1" {
            return Err(perr(format!("unrecognised header '{header}'")));
        }
        let boundary = match parts[2] {
            "neumann2d" => BoundaryCondition::Neumann2D,
            "dirichlet1d" => BoundaryCondition::Dirichlet1D,
            other => return Err(perr(format!("unknown boundary '{other}'"))),
        };
        let grid_size: usize = parts[3].parse().map_err(|_| perr(format!("bad size '{}'", parts[3])))?;
        let mean: f64 = parts[4].parse().map_err(|_| perr(format!("bad mean '{}'", parts[4])))?;
        let mut field = GridField::constant(boundary, grid_size, 0.0);
        field.mean = mean;
        let payload = &bytes[newline + 1..];
        if payload.len() != 8 * field.values.len() {
            return Err(Error::Parse {
                line: 2,
                section: "gridfield values".into(),
                message: format!("expected {} values, found {} bytes", field.values.len(), payload.len()),
            });
        }
        for (v, chunk) in field.values.iter_mut().zip(payload.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(field)
    }
}

/// Value of a Dirichlet1D field at angle `θ` by linear interpolation. Both
/// ends of `(-π, π]` take the mean value, where the fluctuation vanishes.
pub fn radial_eval(field: &GridField, theta: f64) -> f64 {
    debug_assert_eq!(field.boundary, BoundaryCondition::Dirichlet1D);
    let n = field.grid_size;
    let theta = if theta > -PI && theta <= PI {
        theta
    } else {
        (theta + PI).rem_euclid(2.0 * PI) - PI
    };
    let s = (theta + PI) / (2.0 * PI) * (n + 1) as f64;
    let node = |j: usize| {
        if j == 0 || j > n {
            field.mean
        } else {
            field.values[j - 1]
        }
    };
    let nearest = s.round();
    if (s - nearest).abs() < 1e-9 {
        return node(nearest as usize);
    }
    let j0 = (s.floor() as usize).min(n);
    let t = s - j0 as f64;
    node(j0) + t * (node(j0 + 1) - node(j0))
}

/// Bilinear transfer of a Neumann2D field to triangle centroids.
pub fn grid_to_mesh(field: &GridField, mesh: &Mesh) -> Result<Vec<f64>> {
    (0..mesh.triangle_count())
        .map(|t| {
            let [x, y] = mesh.centroid(t);
            field.bilinear(x, y)
        })
        .collect()
}

#[derive(Clone)]
struct PaddedFft {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl PaddedFft {
    fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }
}

/// DCT-III / DCT-II on `n` cell-centred points and DST-I on `n` interior
/// points, all unnormalised.
#[derive(Clone)]
struct Trig {
    n: usize,
    fft: PaddedFft,
    phase: Vec<Complex<f64>>,
}

impl Trig {
    fn cosine(n: usize) -> Self {
        let phase = (0..n)
            .map(|k| Complex::from_polar(1.0, PI * k as f64 / (2 * n) as f64))
            .collect();
        Self {
            n,
            fft: PaddedFft::new(2 * n),
            phase,
        }
    }

    fn sine(n: usize) -> Self {
        Self {
            n,
            fft: PaddedFft::new(2 * (n + 1)),
            phase: Vec::new(),
        }
    }

    /// `out_i = Σ_k c_k cos(πk(2i + 1)/(2n))`.
    fn dct3(&self, coeffs: &[f64], out: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        buf.clear();
        buf.extend(coeffs.iter().zip(&self.phase).map(|(c, p)| p * c));
        buf.resize(2 * self.n, Complex::new(0.0, 0.0));
        self.fft.inverse.process(buf);
        for (o, b) in out.iter_mut().zip(buf.iter()) {
            *o = b.re;
        }
    }

    /// `out_k = Σ_i u_i cos(πk(2i + 1)/(2n))`.
    fn dct2(&self, input: &[f64], out: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        buf.clear();
        buf.extend(input.iter().map(|&u| Complex::new(u, 0.0)));
        buf.resize(2 * self.n, Complex::new(0.0, 0.0));
        self.fft.forward.process(buf);
        for ((o, b), p) in out.iter_mut().zip(buf.iter()).zip(&self.phase) {
            *o = (p.conj() * b).re;
        }
    }

    /// `out_{j−1} = Σ_{k=1..n} c_{k−1} sin(πkj/(n + 1))`, `j = 1..=n`.
    fn dst1(&self, coeffs: &[f64], out: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        buf.clear();
        buf.push(Complex::new(0.0, 0.0));
        buf.extend(coeffs.iter().map(|&c| Complex::new(c, 0.0)));
        buf.resize(2 * (self.n + 1), Complex::new(0.0, 0.0));
        self.fft.inverse.process(buf);
        for (o, b) in out.iter_mut().zip(&buf[1..]) {
            *o = b.im;
        }
    }
}

/// Spectral sampler for one covariance; also provides the exact analysis
/// (projection onto the eigenbasis) used for monitoring.
#[derive(Clone)]
pub struct FieldSampler {
    spec: CovarianceSpec,
    std_devs: Vec<f64>,
    trig: Trig,
}

impl fmt::Debug for FieldSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FieldSampler").field("spec", &self.spec).finish()
    }
}

impl FieldSampler {
    pub fn new(spec: CovarianceSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.boundary.dimension() as f64;
        if spec.alpha <= d / 2.0 {
            warn!(
                "alpha = {} ≤ d/2 = {}: samples are not almost surely continuous",
                spec.alpha,
                d / 2.0
            );
        }
        let std_devs = (0..spec.mode_count())
            .map(|i| spec.mode_variance(spec.mode_of_index(i)).sqrt())
            .collect();
        let trig = match spec.boundary {
            BoundaryCondition::Neumann2D => Trig::cosine(spec.grid_size),
            BoundaryCondition::Dirichlet1D => Trig::sine(spec.grid_size),
        };
        Ok(Self {
            spec,
            std_devs,
            trig,
        })
    }

    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    /// Standard deviation of each mode's coefficient, by flat index.
    pub fn mode_std_devs(&self) -> &[f64] {
        &self.std_devs
    }

    /// Draws `mean + Σ_k sqrt(q (τ² + λ_k)^(−α)) ξ_k φ_k`.
    pub fn sample<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> GridField {
        let coeffs: Vec<f64> = self
            .std_devs
            .iter()
            .map(|s| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.synthesize(&coeffs, mean)
    }

    /// `mean + Σ_k a_k φ_k` on the grid, for L²-normalised `φ_k`.
    pub fn synthesize(&self, coeffs: &[f64], mean: f64) -> GridField {
        assert_eq!(coeffs.len(), self.spec.mode_count(), "coefficient count");
        let n = self.spec.grid_size;
        let mut buf = Vec::with_capacity(2 * n + 2);
        let values = match self.spec.boundary {
            BoundaryCondition::Neumann2D => {
                let norm = |k: usize| if k == 0 { FRAC_1_SQRT_2 } else { 1.0 };
                // Rows indexed by k₂: transform along k₁ first.
                let mut partial = vec![0.0; n * n];
                let mut row = vec![0.0; n];
                for k2 in 0..n {
                    for k1 in 0..n {
                        row[k1] = coeffs[k2 * n + k1] * norm(k1) * norm(k2);
                    }
                    self.trig.dct3(&row, &mut partial[k2 * n..(k2 + 1) * n], &mut buf);
                }
                let mut values = vec![0.0; n * n];
                let mut col = vec![0.0; n];
                let mut out = vec![0.0; n];
                for ix in 0..n {
                    for k2 in 0..n {
                        col[k2] = partial[k2 * n + ix];
                    }
                    self.trig.dct3(&col, &mut out, &mut buf);
                    for iy in 0..n {
                        values[iy * n + ix] = mean + out[iy];
                    }
                }
                values
            }
            BoundaryCondition::Dirichlet1D => {
                let scaled: Vec<f64> = coeffs.iter().map(|c| c / PI.sqrt()).collect();
                let mut out = vec![0.0; n];
                self.trig.dst1(&scaled, &mut out, &mut buf);
                out.into_iter().map(|v| mean + v).collect()
            }
        };
        GridField {
            boundary: self.spec.boundary,
            grid_size: n,
            values,
            mean,
        }
    }

    /// Coefficients `a_k` of `field − mean` in the eigenbasis (inverse of
    /// [`synthesize`](Self::synthesize)).
    pub fn analyze(&self, field: &GridField) -> Result<Vec<f64>> {
        let n = self.spec.grid_size;
        if field.boundary != self.spec.boundary || field.grid_size != n {
            return Err(Error::config("field does not match the sampler's grid"));
        }
        let mut buf = Vec::with_capacity(2 * n + 2);
        match self.spec.boundary {
            BoundaryCondition::Neumann2D => {
                // Discrete orthogonality: Σ_i cos² = n (k = 0) or n/2.
                let weight = |k: usize| if k == 0 { 1.0 / n as f64 } else { 2.0 / n as f64 };
                let norm = |k: usize| if k == 0 { FRAC_1_SQRT_2 } else { 1.0 };
                let mut partial = vec![0.0; n * n];
                let mut row = vec![0.0; n];
                for iy in 0..n {
                    for ix in 0..n {
                        row[ix] = field.values[iy * n + ix] - field.mean;
                    }
                    self.trig.dct2(&row, &mut partial[iy * n..(iy + 1) * n], &mut buf);
                }
                let mut coeffs = vec![0.0; n * n];
                let mut col = vec![0.0; n];
                let mut out = vec![0.0; n];
                for k1 in 0..n {
                    for iy in 0..n {
                        col[iy] = partial[iy * n + k1];
                    }
                    self.trig.dct2(&col, &mut out, &mut buf);
                    for k2 in 0..n {
                        coeffs[k2 * n + k1] =
                            out[k2] * weight(k1) * weight(k2) / (norm(k1) * norm(k2));
                    }
                }
                Ok(coeffs)
            }
            BoundaryCondition::Dirichlet1D => {
                let centered: Vec<f64> = field.values.iter().map(|v| v - field.mean).collect();
                let mut out = vec![0.0; n];
                self.trig.dst1(&centered, &mut out, &mut buf);
                let scale = 2.0 / (n + 1) as f64 * PI.sqrt();
                Ok(out.into_iter().map(|v| v * scale).collect())
            }
        }
    }
}

/// One prior draw; convenience wrapper over [`FieldSampler`].
pub fn sample_field<R: Rng + ?Sized>(spec: CovarianceSpec, mean: f64, rng: &mut R) -> Result<GridField> {
    Ok(FieldSampler::new(spec)?.sample(mean, rng))
}
