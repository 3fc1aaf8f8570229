//! Effective sample size, kernel density estimates and misfit tables.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::fields::{FieldSampler, GridField};
use crate::forward::Conductivity;
use crate::inference::Potential;

/// Shortest trace accepted by [`ess`].
pub const MIN_ESS_LENGTH: usize = 100;
/// Fewest points accepted by the density estimators.
pub const MIN_KDE_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarTrace {
    pub label: String,
    pub values: Vec<f64>,
}

impl ScalarTrace {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateTrace(format!("{label}: empty or non-finite trace")));
        }
        Ok(Self { label, values })
    }
}

/// Biased autocorrelation `ρ̂_k`, `k = 0 … N−1`, via a zero-padded FFT.
pub fn autocorrelation(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if values.iter().all(|v| *v == values[0]) {
        return Err(Error::DegenerateTrace("constant trace".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let m = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = values
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(m)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    let c0 = buf[0].re;
    Ok(buf[..n].iter().map(|c| c.re / c0).collect())
}

/// `N / (1 + 2 Σ_{k≥1} ρ̂_k)`, the sum stopping before the first negative lag.
pub fn ess(trace: &ScalarTrace) -> Result<f64> {
    let n = trace.values.len();
    if n < MIN_ESS_LENGTH {
        return Err(Error::DegenerateTrace(format!(
            "{}: {n} values, need at least {MIN_ESS_LENGTH}",
            trace.label
        )));
    }
    let rho = autocorrelation(&trace.values)
        .map_err(|_| Error::DegenerateTrace(format!("{}: constant trace", trace.label)))?;
    let tail: f64 = rho[1..].iter().take_while(|r| **r >= 0.0).sum();
    Ok((n as f64 / (1.0 + 2.0 * tail)).min(n as f64))
}

/// ESS of several traces in parallel.
pub fn ess_table(traces: &[ScalarTrace]) -> Vec<(String, Result<f64>)> {
    traces.par_iter().map(|t| (t.label.clone(), ess(t))).collect()
}

/// Every `ceil(N / target)`-th value, starting from the first.
pub fn thin(values: &[f64], target: usize) -> Vec<f64> {
    let step = values.len().div_ceil(target.max(1)).max(1);
    values.iter().step_by(step).copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    /// Evaluation points along x (and y for two-dimensional estimates).
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    /// Row-major over `(y, x)` in two dimensions.
    pub density: Vec<f64>,
    pub bandwidth: Vec<f64>,
}

impl DensityEstimate {
    /// Trapezoid-rule integral over the grid.
    pub fn mass(&self) -> f64 {
        match &self.y {
            None => trapezoid(&self.x, &self.density),
            Some(y) => {
                let nx = self.x.len();
                let rows: Vec<f64> = (0..y.len())
                    .map(|j| trapezoid(&self.x, &self.density[j * nx..(j + 1) * nx]))
                    .collect();
                trapezoid(y, &rows)
            }
        }
    }

    pub fn argmax(&self) -> usize {
        self.density
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# gaussian kernel, silverman bandwidth {}\n",
            self.bandwidth.iter().map(|b| format!("{b:e}")).collect::<Vec<_>>().join(" ")
        ));
        match &self.y {
            None => {
                out.push_str("x,density\n");
                for (x, d) in self.x.iter().zip(&self.density) {
                    out.push_str(&format!("{x:e},{d:e}\n"));
                }
            }
            Some(y) => {
                out.push_str("x,y,density\n");
                let nx = self.x.len();
                for (j, yv) in y.iter().enumerate() {
                    for (i, xv) in self.x.iter().enumerate() {
                        out.push_str(&format!("{xv:e},{yv:e},{:e}\n", self.density[j * nx + i]));
                    }
                }
            }
        }
        out
    }
}

fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(xs, fs)| 0.5 * (xs[1] - xs[0]) * (fs[0] + fs[1]))
        .sum()
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `0.9 · min(sd, IQR / 1.34) · n^(−1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let (_, sd) = mean_sd(values);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::DegenerateTrace("zero spread, bandwidth undefined".into()));
    }
    Ok(0.9 * spread * (values.len() as f64).powf(-0.2))
}

/// `count` evenly spaced points covering the data plus three bandwidths.
pub fn default_grid(values: &[f64], count: usize) -> Result<Vec<f64>> {
    let h = silverman_bandwidth(values)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    Ok((0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect())
}

fn check_points(n: usize) -> Result<()> {
    if n < MIN_KDE_POINTS {
        return Err(Error::DegenerateTrace(format!(
            "{n} points, need at least {MIN_KDE_POINTS} for a density estimate"
        )));
    }
    Ok(())
}

fn gaussian(z: f64) -> f64 {
    (-0.5 * z * z).exp()
}

/// Gaussian-kernel density on `grid`, normalised to unit grid mass.
pub fn kde_1d(values: &[f64], grid: &[f64]) -> Result<DensityEstimate> {
    check_points(values.len())?;
    let h = silverman_bandwidth(values)?;
    let mut density: Vec<f64> = grid
        .par_iter()
        .map(|x| values.iter().map(|v| gaussian((x - v) / h)).sum::<f64>())
        .collect();
    let estimate = DensityEstimate {
        x: grid.to_vec(),
        y: None,
        density: density.clone(),
        bandwidth: vec![h],
    };
    let mass = estimate.mass();
    if !(mass > 0.0) {
        return Err(Error::DegenerateTrace("density vanishes on the grid".into()));
    }
    density.iter_mut().for_each(|d| *d /= mass);
    Ok(DensityEstimate { density, ..estimate })
}

/// Product-Gaussian kernel density with per-axis bandwidth `sd · n^(−1/6)`.
pub fn kde_2d(xs: &[f64], ys: &[f64], grid_x: &[f64], grid_y: &[f64]) -> Result<DensityEstimate> {
    if xs.len() != ys.len() {
        return Err(Error::config("paired traces differ in length"));
    }
    check_points(xs.len())?;
    let factor = (xs.len() as f64).powf(-1.0 / 6.0);
    let hx = mean_sd(xs).1 * factor;
    let hy = mean_sd(ys).1 * factor;
    if !(hx > 0.0 && hy > 0.0) {
        return Err(Error::DegenerateTrace("zero spread, bandwidth undefined".into()));
    }
    let kx: Vec<Vec<f64>> = grid_x
        .iter()
        .map(|g| xs.iter().map(|v| gaussian((g - v) / hx)).collect())
        .collect();
    let mut density: Vec<f64> = grid_y
        .par_iter()
        .flat_map_iter(|gy| {
            let ky: Vec<f64> = ys.iter().map(|v| gaussian((gy - v) / hy)).collect();
            kx.iter()
                .map(move |row| row.iter().zip(&ky).map(|(a, b)| a * b).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect();
    let estimate = DensityEstimate {
        x: grid_x.to_vec(),
        y: Some(grid_y.to_vec()),
        density: density.clone(),
        bandwidth: vec![hx, hy],
    };
    let mass = estimate.mass();
    if !(mass > 0.0) {
        return Err(Error::DegenerateTrace("density vanishes on the grid".into()));
    }
    density.iter_mut().for_each(|d| *d /= mass);
    Ok(DensityEstimate { density, ..estimate })
}

/// Spectral coefficients of `state − mean` at the listed modes.
pub fn fourier_monitor(sampler: &FieldSampler, state: &GridField, modes: &[(usize, usize)]) -> Result<Vec<f64>> {
    let indices = modes
        .iter()
        .map(|m| sampler.spec().index_of_mode(*m))
        .collect::<Result<Vec<_>>>()?;
    let coeffs = sampler.analyze(state)?;
    Ok(indices.into_iter().map(|i| coeffs[i]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisfitTable {
    pub rows: Vec<(String, f64)>,
}

impl MisfitTable {
    pub fn push(&mut self, label: impl Into<String>, phi: f64) {
        self.rows.push((label.into(), phi));
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,phi\n");
        for (label, phi) in &self.rows {
            out.push_str(&format!("{label},{phi:e}\n"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<width$}  {:>14}\n", "quantity", "phi");
        for (label, phi) in &self.rows {
            out.push_str(&format!("{label:<width$}  {phi:>14.6}\n"));
        }
        out
    }
}

/// `Φ` at `F(𝔼u)` and at `𝔼(F(u))`, the latter used directly as a
/// per-triangle conductivity.
pub fn misfit_report<P: Potential + ?Sized>(
    pushforward_of_mean: &Conductivity,
    mean_of_pushforward: &[f64],
    potential: &P,
) -> Result<MisfitTable> {
    let mut table = MisfitTable { rows: Vec::new() };
    table.push("F(E[u])", potential.phi(pushforward_of_mean)?);
    table.push("E[F(u)]", potential.phi(&Conductivity(mean_of_pushforward.to_vec()))?);
    Ok(table)
}
