//! Synthetic data, the misfit potential and the pCN / Metropolis-within-Gibbs
//! sampler.
//!
//! Every iteration draws from its own ChaCha stream (`stream = iteration + 1`,
//! stream 0 seeds the initial state), so a chain resumed from a checkpoint
//! continues exactly as the uninterrupted one would.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fields::{BoundaryCondition, GridField};
use crate::forward::{Conductivity, ForwardSolver, StimulationMatrix};
use crate::mesh::{ElectrodeLayout, Mesh};
use crate::priors::{Prior, PriorConfig, PriorState};

/// Noisy boundary voltages, pattern-major: entry `j·L + l` is electrode `l`
/// under pattern `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub y: Vec<f64>,
    pub gamma: f64,
    pub stim: StimulationMatrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataFile {
    electrodes: usize,
    gamma: f64,
    stimulation: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl DataSet {
    pub fn new(y: Vec<f64>, gamma: f64, stim: StimulationMatrix) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("noise level must be positive, got {gamma}")));
        }
        let expected = stim.electrodes() * stim.pattern_count();
        if y.len() != expected {
            return Err(Error::config(format!("data has {} entries, expected {expected}", y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("data contains non-finite values"));
        }
        Ok(Self { y, gamma, stim })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `|v|_Γ = |v| / γ`.
    pub fn weighted_norm(&self, v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt() / self.gamma
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DataFile {
            electrodes: self.stim.electrodes(),
            gamma: self.gamma,
            stimulation: self.stim.columns().to_vec(),
            y: self.y.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DataFile = serde_json::from_str(text)?;
        let stim = StimulationMatrix::new(file.electrodes, file.stimulation)?;
        Self::new(file.y, file.gamma, stim)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Noise-free forward data and realized error statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DataReport {
    pub clean: Vec<f64>,
    /// Mean over entries of `|η_i| / |𝒢_i|`.
    pub mean_relative_error: f64,
    /// `|η| / |𝒢|`.
    pub norm_relative_error: f64,
}

/// `y = 𝒢_fine(truth) + η`, `η ~ N(0, γ² I)`.
pub fn generate_data<R: Rng + ?Sized>(
    truth: &Conductivity,
    fine_mesh: &Mesh,
    layout: &ElectrodeLayout,
    stim: &StimulationMatrix,
    gamma: f64,
    rng: &mut R,
) -> Result<(DataSet, DataReport)> {
    let clean = ForwardSolver::new(fine_mesh, layout)?.forward_map(truth, stim)?;
    let noise: Vec<f64> = clean
        .iter()
        .map(|_| gamma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let y: Vec<f64> = clean.iter().zip(&noise).map(|(g, e)| g + e).collect();
    let ratios: Vec<f64> = clean
        .iter()
        .zip(&noise)
        .filter(|(g, _)| **g != 0.0)
        .map(|(g, e)| (e / g).abs())
        .collect();
    let mean_relative_error = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_relative_error = norm(&noise) / norm(&clean);
    let data = DataSet::new(y, gamma, stim.clone())?;
    Ok((
        data,
        DataReport {
            clean,
            mean_relative_error,
            norm_relative_error,
        },
    ))
}

/// `Φ = ½ γ⁻² Σ (𝒢 − y)²`.
pub fn misfit(prediction: &[f64], data: &DataSet) -> Result<f64> {
    if prediction.len() != data.len() {
        return Err(Error::config(format!(
            "prediction has {} entries, data has {}",
            prediction.len(),
            data.len()
        )));
    }
    let ss: f64 = prediction.iter().zip(&data.y).map(|(g, y)| (g - y) * (g - y)).sum();
    Ok(0.5 * ss / (data.gamma * data.gamma))
}

/// Negative log-likelihood as a function of the coarse-mesh conductivity.
pub trait Potential: Sync {
    fn phi(&self, sigma: &Conductivity) -> Result<f64>;
}

/// `Φ ≡ 0`: the chain then targets the prior.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPotential;

impl Potential for ZeroPotential {
    fn phi(&self, _sigma: &Conductivity) -> Result<f64> {
        Ok(0.0)
    }
}

/// EIT misfit on the inversion mesh.
#[derive(Debug, Clone)]
pub struct EitPotential {
    solver: ForwardSolver,
    data: DataSet,
}

impl EitPotential {
    pub fn new(mesh: &Mesh, layout: &ElectrodeLayout, data: DataSet) -> Result<Self> {
        let solver = ForwardSolver::new(mesh, layout)?;
        if data.stim.electrodes() != solver.electrode_count() {
            return Err(Error::config("data and electrode layout disagree on electrode count"));
        }
        Ok(Self { solver, data })
    }

    pub fn solver(&self) -> &ForwardSolver {
        &self.solver
    }

    pub fn data(&self) -> &DataSet {
        &self.data
    }

    pub fn forward(&self, sigma: &Conductivity) -> Result<Vec<f64>> {
        self.solver.forward_map(sigma, &self.data.stim)
    }
}

impl Potential for EitPotential {
    fn phi(&self, sigma: &Conductivity) -> Result<f64> {
        misfit(&self.forward(sigma)?, &self.data)
    }
}

/// `min(1, exp(Φ(current) − Φ(proposal)))`; an infinite proposal is never
/// accepted.
pub fn acceptance_probability(phi_current: f64, phi_proposal: f64) -> f64 {
    if phi_proposal == f64::INFINITY || phi_proposal.is_nan() {
        return 0.0;
    }
    (phi_current - phi_proposal).min(0.0).exp()
}

fn metropolis<R: Rng + ?Sized>(phi_current: f64, phi_proposal: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    u < acceptance_probability(phi_current, phi_proposal)
}

/// Current point of a chain with its pushforward and potential.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub state: PriorState,
    pub sigma: Conductivity,
    pub phi: f64,
}

impl ChainState {
    /// Solver or map failures become `Φ = +∞`, logged.
    pub fn evaluate<P: Potential + ?Sized>(state: PriorState, prior: &Prior, mesh: &Mesh, potential: &P) -> Self {
        let sigma = match prior.pushforward(&state, mesh) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("pushforward failed, treating as rejection: {e}");
                return Self {
                    state,
                    sigma: Conductivity(Vec::new()),
                    phi: f64::INFINITY,
                };
            }
        };
        let phi = match potential.phi(&sigma) {
            Ok(phi) => phi,
            Err(e) => {
                log::warn!("potential evaluation failed, treating as rejection: {e}");
                f64::INFINITY
            }
        };
        Self { state, sigma, phi }
    }
}

/// `v = m₀ + √(1−β²)(u − m₀) + β ξ` with `ξ ~ N(0, 𝒞₀)`.
pub fn pcn_proposal<R: Rng + ?Sized>(current: &GridField, beta: f64, prior: &Prior, rng: &mut R) -> GridField {
    let m0 = prior.field_mean();
    let xi = prior.sampler().sample(0.0, rng);
    let keep = (1.0 - beta * beta).sqrt();
    GridField {
        values: current
            .values
            .iter()
            .zip(&xi.values)
            .map(|(u, x)| m0 + keep * (u - m0) + beta * x)
            .collect(),
        mean: m0,
        ..current.clone()
    }
}

/// One pCN update of the field component. Returns whether it was accepted.
pub fn pcn_step<P: Potential + ?Sized, R: Rng + ?Sized>(
    current: &mut ChainState,
    beta: f64,
    prior: &Prior,
    mesh: &Mesh,
    potential: &P,
    rng: &mut R,
) -> bool {
    let field = pcn_proposal(current.state.field(), beta, prior, rng);
    let proposal = ChainState::evaluate(current.state.with_field(field), prior, mesh, potential);
    let accepted = metropolis(current.phi, proposal.phi, rng);
    if accepted {
        *current = proposal;
    }
    accepted
}

/// One random-walk update `x₀' = x₀ + δ ζ` of the star centre; proposals
/// outside the prior box are rejected without evaluating `Φ`.
pub fn rwm_center_step<P: Potential + ?Sized, R: Rng + ?Sized>(
    current: &mut ChainState,
    delta: f64,
    prior: &Prior,
    mesh: &Mesh,
    potential: &P,
    rng: &mut R,
) -> bool {
    let PriorState::StarShaped { radius, center } = &current.state else {
        return false;
    };
    let proposed = [
        center[0] + delta * rng.sample::<f64, _>(StandardNormal),
        center[1] + delta * rng.sample::<f64, _>(StandardNormal),
    ];
    let u: f64 = rng.random();
    if !prior.center_in_support(proposed) {
        return false;
    }
    let state = PriorState::StarShaped {
        radius: radius.clone(),
        center: proposed,
    };
    let proposal = ChainState::evaluate(state, prior, mesh, potential);
    let accepted = u < acceptance_probability(current.phi, proposal.phi);
    if accepted {
        *current = proposal;
    }
    accepted
}

/// Scalar recorded along the chain besides `Φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Monitor {
    /// Spectral coefficient of `state − mean`; `k2 = 0` for radial fields.
    Fourier { k1: usize, k2: usize },
    CenterX,
    CenterY,
}

impl Monitor {
    pub fn label(&self) -> String {
        match self {
            Monitor::Fourier { k1, k2 } => format!("coef_{k1}_{k2}"),
            Monitor::CenterX => "center_x".into(),
            Monitor::CenterY => "center_y".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSettings {
    pub beta: f64,
    /// Centre step, star-shaped prior only.
    #[serde(default)]
    pub delta: Option<f64>,
    pub n_samples: usize,
    pub burn_in: usize,
    #[serde(default)]
    pub monitors: Vec<Monitor>,
    pub seed: u64,
    /// Keep every `snapshot_every`-th post-burn-in state.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_snapshot_every() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub prior: PriorConfig,
    pub settings: ChainSettings,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        let s = &self.settings;
        if !(s.beta > 0.0 && s.beta <= 1.0) {
            return Err(Error::config(format!("pCN step must lie in (0, 1], got {}", s.beta)));
        }
        if s.burn_in >= s.n_samples {
            return Err(Error::config("burn-in must be smaller than the number of samples"));
        }
        if s.snapshot_every == 0 {
            return Err(Error::config("snapshot interval must be positive"));
        }
        if s.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint interval must be positive"));
        }
        let star = matches!(self.prior, PriorConfig::StarShaped { .. });
        match s.delta {
            Some(d) if !(d > 0.0 && d.is_finite()) => {
                return Err(Error::config(format!("centre step must be positive, got {d}")))
            }
            None if star => return Err(Error::config("star-shaped prior needs a centre step delta")),
            _ => {}
        }
        let cov = self.prior.covariance();
        for m in &s.monitors {
            match m {
                Monitor::Fourier { k1, k2 } => {
                    cov.index_of_mode((*k1, *k2))?;
                }
                Monitor::CenterX | Monitor::CenterY if !star => {
                    return Err(Error::config("centre monitors need the star-shaped prior"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let text = format!(
            "{}|{}",
            serde_json::to_string(&self.prior).expect("prior serializes"),
            serde_json::to_string(&self.settings).expect("settings serialize")
        );
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Pcn,
    Rwm,
}

impl MoveKind {
    pub fn name(self) -> &'static str {
        match self {
            MoveKind::Pcn => "pcn",
            MoveKind::Rwm => "rwm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: u64,
    pub move_kind: MoveKind,
    pub accepted: bool,
    pub phi: f64,
    pub monitors: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
}

impl MoveStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iter: u64,
    pub state: PriorState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub monitor_labels: Vec<String>,
    pub trace: Vec<TraceRow>,
    pub pcn: MoveStats,
    pub rwm: MoveStats,
    /// Number of accumulated post-burn-in states.
    pub count: u64,
    family: u64,
    boundary: BoundaryCondition,
    grid_size: usize,
    field_mean: f64,
    pub field_sum: Vec<f64>,
    pub center_sum: [f64; 2],
    pub conductivity_sum: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
}

impl ChainRecord {
    fn new(config: &ChainConfig, triangles: usize) -> Self {
        let cov = config.prior.covariance();
        let field_len = match cov.boundary {
            BoundaryCondition::Neumann2D => cov.grid_size * cov.grid_size,
            BoundaryCondition::Dirichlet1D => cov.grid_size,
        };
        Self {
            monitor_labels: config.settings.monitors.iter().map(Monitor::label).collect(),
            trace: Vec::new(),
            pcn: MoveStats::default(),
            rwm: MoveStats::default(),
            count: 0,
            family: family_code(&config.prior),
            boundary: cov.boundary,
            grid_size: cov.grid_size,
            field_mean: config.prior.mean(),
            field_sum: vec![0.0; field_len],
            center_sum: [0.0; 2],
            conductivity_sum: vec![0.0; triangles],
            snapshots: Vec::new(),
        }
    }

    /// Acceptance over all moves of both kinds.
    pub fn overall_acceptance(&self) -> f64 {
        let proposed = self.pcn.proposed + self.rwm.proposed;
        if proposed == 0 {
            0.0
        } else {
            (self.pcn.accepted + self.rwm.accepted) as f64 / proposed as f64
        }
    }

    /// Posterior mean of the sample-space state, `𝔼u` (and `𝔼x₀`).
    pub fn mean_state(&self) -> Result<PriorState> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let n = self.count as f64;
        let field = GridField {
            boundary: self.boundary,
            grid_size: self.grid_size,
            values: self.field_sum.iter().map(|s| s / n).collect(),
            mean: self.field_mean,
        };
        let center = [self.center_sum[0] / n, self.center_sum[1] / n];
        state_of_family(self.family, field, center)
    }

    /// Posterior mean conductivity `𝔼(F(u))` per triangle.
    pub fn mean_of_conductivity(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let n = self.count as f64;
        Ok(self.conductivity_sum.iter().map(|s| s / n).collect())
    }

    /// Values of one trace column, restricted to rows of the given move
    /// kind and to iterations at or after `from_iter`.
    pub fn column(&self, column: usize, kind: MoveKind, from_iter: u64) -> Vec<f64> {
        self.trace
            .iter()
            .filter(|r| r.move_kind == kind && r.iter >= from_iter)
            .map(|r| r.monitors[column])
            .collect()
    }

    /// `Φ` after each full iteration (last row of each iteration).
    pub fn phi_per_iteration(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        let mut last = None;
        for row in &self.trace {
            if last == Some(row.iter) {
                *out.last_mut().expect("row") = row.phi;
            } else {
                out.push(row.phi);
                last = Some(row.iter);
            }
        }
        out
    }

    /// CSV with columns `iter,move_type,accepted,phi,<monitors…>`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,move_type,accepted,phi");
        for label in &self.monitor_labels {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        for row in &self.trace {
            out.push_str(&format!(
                "{},{},{},{:e}",
                row.iter,
                row.move_kind.name(),
                u8::from(row.accepted),
                row.phi
            ));
            for v in &row.monitors {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `(F(𝔼u), 𝔼(F(u)))` on the inversion mesh.
pub fn mean_conductivities(record: &ChainRecord, prior: &Prior, mesh: &Mesh) -> Result<(Conductivity, Vec<f64>)> {
    Ok((prior.pushforward(&record.mean_state()?, mesh)?, record.mean_of_conductivity()?))
}

fn family_code(prior: &PriorConfig) -> u64 {
    match prior {
        PriorConfig::LogGaussian { .. } => 0,
        PriorConfig::StarShaped { .. } => 1,
        PriorConfig::LevelSet { .. } => 2,
    }
}

fn state_of_family(family: u64, field: GridField, center: [f64; 2]) -> Result<PriorState> {
    Ok(match family {
        0 => PriorState::LogGaussian { field },
        1 => PriorState::StarShaped { radius: field, center },
        2 => PriorState::LevelSet { field },
        other => return Err(Error::config(format!("unknown prior family code {other}"))),
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EITCHKv1";

/// A Markov chain in progress.
pub struct Chain<'a, P: Potential + ?Sized> {
    config: &'a ChainConfig,
    prior: &'a Prior,
    mesh: &'a Mesh,
    potential: &'a P,
    iteration: usize,
    current: ChainState,
    record: ChainRecord,
}

fn iteration_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'a, P: Potential + ?Sized> Chain<'a, P> {
    /// Starts from a fresh prior draw on stream 0.
    pub fn start(config: &'a ChainConfig, prior: &'a Prior, mesh: &'a Mesh, potential: &'a P) -> Result<Self> {
        Self::check(config, prior)?;
        let initial = prior.sample(&mut iteration_rng(config.settings.seed, 0));
        Self::start_from(config, prior, mesh, potential, initial)
    }

    /// Starts from a given state instead of a prior draw.
    pub fn start_from(
        config: &'a ChainConfig,
        prior: &'a Prior,
        mesh: &'a Mesh,
        potential: &'a P,
        initial: PriorState,
    ) -> Result<Self> {
        Self::check(config, prior)?;
        let current = ChainState::evaluate(initial, prior, mesh, potential);
        Ok(Self {
            config,
            prior,
            mesh,
            potential,
            iteration: 0,
            current,
            record: ChainRecord::new(config, mesh.triangle_count()),
        })
    }

    fn check(config: &ChainConfig, prior: &Prior) -> Result<()> {
        config.validate()?;
        if prior.config() != &config.prior {
            return Err(Error::config("chain config and prior disagree"));
        }
        Ok(())
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.settings.n_samples
    }

    pub fn current(&self) -> &ChainState {
        &self.current
    }

    pub fn record(&self) -> &ChainRecord {
        &self.record
    }

    pub fn into_record(self) -> ChainRecord {
        self.record
    }

    fn monitors(&self) -> Vec<f64> {
        let monitors = &self.config.settings.monitors;
        if monitors.is_empty() {
            return Vec::new();
        }
        let coeffs = if monitors.iter().any(|m| matches!(m, Monitor::Fourier { .. })) {
            self.prior.sampler().analyze(self.current.state.field()).ok()
        } else {
            None
        };
        let cov = self.prior.config().covariance();
        monitors
            .iter()
            .map(|m| match m {
                Monitor::Fourier { k1, k2 } => {
                    let index = cov.index_of_mode((*k1, *k2)).expect("validated mode");
                    coeffs.as_ref().map_or(f64::NAN, |c| c[index])
                }
                Monitor::CenterX => self.current.state.center().map_or(f64::NAN, |c| c[0]),
                Monitor::CenterY => self.current.state.center().map_or(f64::NAN, |c| c[1]),
            })
            .collect()
    }

    fn push_row(&mut self, kind: MoveKind, accepted: bool) {
        let row = TraceRow {
            iter: self.iteration as u64,
            move_kind: kind,
            accepted,
            phi: self.current.phi,
            monitors: self.monitors(),
        };
        self.record.trace.push(row);
    }

    /// One Gibbs sweep: a pCN field move, then a centre move for star shapes.
    pub fn step(&mut self) {
        let s = &self.config.settings;
        let mut rng = iteration_rng(s.seed, self.iteration as u64 + 1);
        let accepted = pcn_step(&mut self.current, s.beta, self.prior, self.mesh, self.potential, &mut rng);
        self.record.pcn.record(accepted);
        self.push_row(MoveKind::Pcn, accepted);
        if let (Some(delta), PriorState::StarShaped { .. }) = (s.delta, &self.current.state) {
            let accepted = rwm_center_step(&mut self.current, delta, self.prior, self.mesh, self.potential, &mut rng);
            self.record.rwm.record(accepted);
            self.push_row(MoveKind::Rwm, accepted);
        }
        if self.iteration >= s.burn_in {
            self.accumulate();
            if (self.iteration - s.burn_in) % s.snapshot_every == 0 {
                self.record.snapshots.push(Snapshot {
                    iter: self.iteration as u64,
                    state: self.current.state.clone(),
                });
            }
        }
        self.iteration += 1;
    }

    fn accumulate(&mut self) {
        let r = &mut self.record;
        r.count += 1;
        for (s, v) in r.field_sum.iter_mut().zip(&self.current.state.field().values) {
            *s += v;
        }
        if let Some(c) = self.current.state.center() {
            r.center_sum[0] += c[0];
            r.center_sum[1] += c[1];
        }
        if self.current.sigma.len() == r.conductivity_sum.len() {
            for (s, v) in r.conductivity_sum.iter_mut().zip(&self.current.sigma.0) {
                *s += v;
            }
        }
    }

    /// Runs until `iterations` sweeps have been done in total (capped at
    /// the configured sample count).
    pub fn advance_to(&mut self, iterations: usize) {
        let target = iterations.min(self.config.settings.n_samples);
        while self.iteration < target {
            self.step();
        }
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let r = &self.record;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let family = r.family;
        let field = self.current.state.field();
        let center = self.current.state.center().unwrap_or([0.0; 2]);
        for v in [
            self.config.fingerprint(),
            self.iteration as u64,
            self.iteration as u64 + 1,
            family,
            field.grid_size as u64,
            field.values.len() as u64,
            r.conductivity_sum.len() as u64,
            r.monitor_labels.len() as u64,
            r.count,
            r.pcn.proposed,
            r.pcn.accepted,
            r.rwm.proposed,
            r.rwm.accepted,
            r.trace.len() as u64,
            r.snapshots.len() as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        put(self.current.phi);
        put(field.mean);
        field.values.iter().for_each(|v| put(*v));
        center.iter().for_each(|v| put(*v));
        r.field_sum.iter().for_each(|v| put(*v));
        r.center_sum.iter().for_each(|v| put(*v));
        r.conductivity_sum.iter().for_each(|v| put(*v));
        for row in &r.trace {
            out.extend_from_slice(&row.iter.to_le_bytes());
            out.extend_from_slice(&(row.move_kind as u64).to_le_bytes());
            out.extend_from_slice(&u64::from(row.accepted).to_le_bytes());
            out.extend_from_slice(&row.phi.to_le_bytes());
            for v in &row.monitors {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for snap in &r.snapshots {
            out.extend_from_slice(&snap.iter.to_le_bytes());
            for v in &snap.state.field().values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in snap.state.center().unwrap_or([0.0; 2]) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes the checkpoint atomically (temporary file, then rename), so a
    /// failed write leaves the previous checkpoint intact.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&self.checkpoint_bytes()).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn resume_from_bytes(
        bytes: &[u8],
        config: &'a ChainConfig,
        prior: &'a Prior,
        mesh: &'a Mesh,
        potential: &'a P,
    ) -> Result<Self> {
        Self::check(config, prior)?;
        let mut reader = Reader { bytes, pos: 0 };
        if reader.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::config("not a chain checkpoint"));
        }
        let fingerprint = reader.u64()?;
        if fingerprint != config.fingerprint() {
            return Err(Error::config("checkpoint was written by a different chain configuration"));
        }
        let iteration = reader.u64()? as usize;
        let _stream = reader.u64()?;
        let family = reader.u64()?;
        let grid_size = reader.u64()? as usize;
        let field_len = reader.u64()? as usize;
        let triangles = reader.u64()? as usize;
        let monitor_count = reader.u64()? as usize;
        if triangles != mesh.triangle_count() || monitor_count != config.settings.monitors.len() {
            return Err(Error::config("checkpoint does not match the mesh or monitor list"));
        }
        let mut record = ChainRecord::new(config, triangles);
        if grid_size != record.grid_size || field_len != record.field_sum.len() {
            return Err(Error::config("checkpoint does not match the prior grid"));
        }
        record.count = reader.u64()?;
        record.pcn = MoveStats {
            proposed: reader.u64()?,
            accepted: reader.u64()?,
        };
        record.rwm = MoveStats {
            proposed: reader.u64()?,
            accepted: reader.u64()?,
        };
        let trace_len = reader.u64()? as usize;
        let snapshot_count = reader.u64()? as usize;
        let phi = reader.f64()?;
        let mean = reader.f64()?;
        let template = prior.mean_state();
        let field = GridField {
            values: reader.f64s(field_len)?,
            mean,
            ..template.field().clone()
        };
        let center = [reader.f64()?, reader.f64()?];
        if family != record.family {
            return Err(Error::config("checkpoint holds a different prior family"));
        }
        let make_state = |field, center| state_of_family(family, field, center);
        let state = make_state(field, center)?;
        record.field_sum = reader.f64s(field_len)?;
        record.center_sum = [reader.f64()?, reader.f64()?];
        record.conductivity_sum = reader.f64s(triangles)?;
        for _ in 0..trace_len {
            let iter = reader.u64()?;
            let move_kind = match reader.u64()? {
                0 => MoveKind::Pcn,
                1 => MoveKind::Rwm,
                other => return Err(Error::config(format!("unknown move kind {other}"))),
            };
            let accepted = reader.u64()? != 0;
            let phi = reader.f64()?;
            let monitors = reader.f64s(monitor_count)?;
            record.trace.push(TraceRow {
                iter,
                move_kind,
                accepted,
                phi,
                monitors,
            });
        }
        for _ in 0..snapshot_count {
            let iter = reader.u64()?;
            let field = GridField {
                values: reader.f64s(field_len)?,
                ..template.field().clone()
            };
            let center = [reader.f64()?, reader.f64()?];
            record.snapshots.push(Snapshot {
                iter,
                state: make_state(field, center)?,
            });
        }
        if reader.pos != bytes.len() {
            return Err(Error::config("trailing bytes in checkpoint"));
        }
        let mut current = ChainState::evaluate(state, prior, mesh, potential);
        current.phi = phi;
        Ok(Self {
            config,
            prior,
            mesh,
            potential,
            iteration,
            current,
            record,
        })
    }

    pub fn resume(
        path: &Path,
        config: &'a ChainConfig,
        prior: &'a Prior,
        mesh: &'a Mesh,
        potential: &'a P,
    ) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::resume_from_bytes(&bytes, config, prior, mesh, potential)
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::config("checkpoint is truncated"));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Runs a chain to completion. With a checkpoint path the chain resumes
/// from an existing checkpoint and writes one every `checkpoint_every`
/// iterations and at the end.
pub fn run_chain<P: Potential + ?Sized>(
    config: &ChainConfig,
    prior: &Prior,
    mesh: &Mesh,
    potential: &P,
    checkpoint: Option<&Path>,
) -> Result<ChainRecord> {
    let mut chain = match checkpoint {
        Some(path) if path.exists() => Chain::resume(path, config, prior, mesh, potential)?,
        _ => Chain::start(config, prior, mesh, potential)?,
    };
    let n = config.settings.n_samples;
    let every = match (checkpoint, config.settings.checkpoint_every) {
        (Some(_), Some(k)) => k,
        _ => n,
    };
    while !chain.is_finished() {
        let next = (chain.iteration() / every + 1) * every;
        chain.advance_to(next);
        if let Some(path) = checkpoint {
            chain.save_checkpoint(path)?;
        }
    }
    log::info!(
        "chain finished: pCN acceptance {:.3}, centre acceptance {:.3}",
        chain.record().pcn.rate(),
        chain.record().rwm.rate()
    );
    Ok(chain.into_record())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::adjacent_stimulation_patterns;
    use crate::mesh::build_disk_mesh;

    fn layout() -> ElectrodeLayout {
        ElectrodeLayout::uniform(16, 0.5, 0.01).unwrap()
    }

    fn settings(n: usize, burn: usize) -> ChainSettings {
        ChainSettings {
            beta: 0.2,
            delta: Some(0.05),
            n_samples: n,
            burn_in: burn,
            monitors: vec![],
            seed: 9,
            snapshot_every: 1,
            checkpoint_every: None,
        }
    }

    fn small_data(mesh: &Mesh) -> DataSet {
        let stim = adjacent_stimulation_patterns(16, 0.1).unwrap();
        let truth = Conductivity::constant(1.5, mesh.triangle_count());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        generate_data(&truth, mesh, &layout(), &stim, 2e-4, &mut rng).unwrap().0
    }

    #[test]
    fn vanishing_noise_reproduces_clean_data() {
        let mesh = build_disk_mesh(0, &layout()).unwrap();
        let stim = adjacent_stimulation_patterns(16, 0.1).unwrap();
        let truth = Conductivity::constant(1.0, mesh.triangle_count());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (data, report) = generate_data(&truth, &mesh, &layout(), &stim, 1e-300, &mut rng).unwrap();
        assert_eq!(data.y, report.clean);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let mesh = build_disk_mesh(0, &layout()).unwrap();
        let a = small_data(&mesh);
        let b = small_data(&mesh);
        assert_eq!(a, b);
    }

    #[test]
    fn misfit_scaling() {
        let stim = adjacent_stimulation_patterns(4, 1.0).unwrap();
        let data = DataSet::new(vec![0.0; 12], 0.5, stim.clone()).unwrap();
        let g: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        assert_eq!(misfit(&data.y, &data).unwrap(), 0.0);
        let phi = misfit(&g, &data).unwrap();
        let doubled = DataSet::new(vec![0.0; 12], 1.0, stim).unwrap();
        assert!((misfit(&g, &doubled).unwrap() - phi / 4.0).abs() < 1e-14);
        assert!(misfit(&g[..5], &data).is_err());
    }

    #[test]
    fn dataset_validation_and_json() {
        let stim = adjacent_stimulation_patterns(4, 1.0).unwrap();
        assert!(DataSet::new(vec![0.0; 12], 0.0, stim.clone()).is_err());
        assert!(DataSet::new(vec![0.0; 11], 1.0, stim.clone()).is_err());
        let data = DataSet::new((0..12).map(|i| i as f64 / 7.0).collect(), 2e-4, stim).unwrap();
        assert_eq!(DataSet::from_json(&data.to_json().unwrap()).unwrap(), data);
    }

    #[test]
    fn acceptance_probability_values() {
        assert_eq!(acceptance_probability(3.0, 1.0), 1.0);
        assert!((acceptance_probability(1.0, 3.0) - (-2f64).exp()).abs() < 1e-15);
        assert_eq!(acceptance_probability(1.0, f64::INFINITY), 0.0);
        assert_eq!(acceptance_probability(f64::INFINITY, 2.0), 1.0);
    }

    #[test]
    fn beta_one_proposal_ignores_current_state() {
        let prior = Prior::new(PriorConfig::paper_level_set(8)).unwrap();
        let a = prior.sample(&mut ChaCha8Rng::seed_from_u64(1));
        let b = prior.sample(&mut ChaCha8Rng::seed_from_u64(2));
        let pa = pcn_proposal(a.field(), 1.0, &prior, &mut ChaCha8Rng::seed_from_u64(5));
        let pb = pcn_proposal(b.field(), 1.0, &prior, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(pa, pb);
    }

    #[test]
    fn zero_potential_accepts_every_pcn_move() {
        let mesh = build_disk_mesh(0, &layout()).unwrap();
        let config = ChainConfig {
            prior: PriorConfig::paper_log_gaussian(8),
            settings: settings(200, 100),
        };
        let prior = Prior::new(config.prior.clone()).unwrap();
        let record = run_chain(&config, &prior, &mesh, &ZeroPotential, None).unwrap();
        assert_eq!(record.pcn.accepted, 200);
        assert_eq!(record.count, 100);
    }

    #[test]
    fn center_proposals_outside_box_are_rejected() {
        let mesh = build_disk_mesh(0, &layout()).unwrap();
        let prior = Prior::new(PriorConfig::paper_star_shaped(8)).unwrap();
        let state = PriorState::StarShaped {
            radius: prior.mean_state().field().clone(),
            center: [0.5, 0.5],
        };
        let mut current = ChainState::evaluate(state, &prior, &mesh, &ZeroPotential);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // A huge step lands outside the box almost surely.
        let accepted = (0..50)
            .filter(|_| rwm_center_step(&mut current, 100.0, &prior, &mesh, &ZeroPotential, &mut rng))
            .count();
        assert_eq!(accepted, 0);
        let tiny = (0..50)
            .filter(|_| {
                current.state = PriorState::StarShaped {
                    radius: prior.mean_state().field().clone(),
                    center: [0.0, 0.0],
                };
                rwm_center_step(&mut current, 1e-9, &prior, &mesh, &ZeroPotential, &mut rng)
            })
            .count();
        assert_eq!(tiny, 50);
    }

    #[test]
    fn single_accumulated_state_matches_pushforward() {
        let mesh = build_disk_mesh(0, &layout()).unwrap();
        for prior_config in [
            PriorConfig::paper_star_shaped(8),
            PriorConfig::paper_level_set(8),
            PriorConfig::paper_log_gaussian(8),
        ] {
            let config = ChainConfig {
                prior: prior_config,
                settings: settings(6, 5),
            };
            let prior = Prior::new(config.prior.clone()).unwrap();
            let chain = {
                let mut c = Chain::start(&config, &prior, &mesh, &ZeroPotential).unwrap();
                c.advance_to(6);
                c
            };
            let expected = prior.pushforward(&chain.current().state, &mesh).unwrap();
            let record = chain.into_record();
            assert_eq!(record.count, 1);
            let (f_mean, mean_f) = mean_conductivities(&record, &prior, &mesh).unwrap();
            for t in 0..mesh.triangle_count() {
                assert!((f_mean.0[t] - expected.0[t]).abs() < 1e-12);
                assert!((mean_f[t] - expected.0[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_state_level_set_average() {
        let mesh = build_disk_mesh(0, &layout()).unwrap();
        let config = ChainConfig {
            prior: PriorConfig::paper_level_set(8),
            settings: settings(2, 0),
        };
        let prior = Prior::new(config.prior.clone()).unwrap();
        let u = prior.sample(&mut ChaCha8Rng::seed_from_u64(3));
        let minus_u = u.with_field(u.field().map(|v| -v));
        let mut record = ChainRecord::new(&config, mesh.triangle_count());
        for state in [&u, &minus_u] {
            let sigma = prior.pushforward(state, &mesh).unwrap();
            record.count += 1;
            for (s, v) in record.field_sum.iter_mut().zip(&state.field().values) {
                *s += v;
            }
            for (s, v) in record.conductivity_sum.iter_mut().zip(&sigma.0) {
                *s += v;
            }
        }
        let a = prior.pushforward(&u, &mesh).unwrap();
        let b = prior.pushforward(&minus_u, &mesh).unwrap();
        let (_, mean_f) = mean_conductivities(&record, &prior, &mesh).unwrap();
        for t in 0..mesh.triangle_count() {
            if a.0[t] != b.0[t] {
                assert_eq!(mean_f[t], 1.5);
            }
        }
    }

    #[test]
    fn empty_accumulator_is_an_error() {
        let config = ChainConfig {
            prior: PriorConfig::paper_level_set(8),
            settings: settings(2, 1),
        };
        let record = ChainRecord::new(&config, 10);
        assert!(matches!(record.mean_state(), Err(Error::EmptyAccumulator)));
    }

    #[test]
    fn config_validation() {
        let mut config = ChainConfig {
            prior: PriorConfig::paper_star_shaped(8),
            settings: settings(10, 5),
        };
        assert!(config.validate().is_ok());
        config.settings.delta = None;
        assert!(config.validate().is_err());
        config.settings.delta = Some(0.1);
        config.settings.beta = 1.5;
        assert!(config.validate().is_err());
        config.settings.beta = 0.5;
        config.settings.burn_in = 10;
        assert!(config.validate().is_err());
        config.settings.burn_in = 0;
        config.settings.monitors = vec![Monitor::Fourier { k1: 0, k2: 0 }];
        assert!(config.validate().is_err());
        config.settings.monitors = vec![Monitor::Fourier { k1: 8, k2: 0 }, Monitor::CenterX];
        assert!(config.validate().is_ok());
    }

    #[test]
    fn resume_is_bit_identical() {
        let mesh = build_disk_mesh(0, &layout()).unwrap();
        let data = small_data(&mesh);
        let potential = EitPotential::new(&mesh, &layout(), data).unwrap();
        let mut s = settings(30, 10);
        s.monitors = vec![Monitor::Fourier { k1: 1, k2: 0 }, Monitor::CenterY];
        s.snapshot_every = 3;
        let config = ChainConfig {
            prior: PriorConfig::paper_star_shaped(8),
            settings: s,
        };
        let prior = Prior::new(config.prior.clone()).unwrap();
        let full = run_chain(&config, &prior, &mesh, &potential, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.ckpt");
        let mut chain = Chain::start(&config, &prior, &mesh, &potential).unwrap();
        chain.advance_to(17);
        chain.save_checkpoint(&path).unwrap();
        drop(chain);
        let resumed = run_chain(&config, &prior, &mesh, &potential, Some(&path)).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(resumed.trace_csv(), full.trace_csv());
    }

    #[test]
    fn checkpoint_from_other_config_is_rejected() {
        let mesh = build_disk_mesh(0, &layout()).unwrap();
        let config = ChainConfig {
            prior: PriorConfig::paper_level_set(8),
            settings: settings(10, 5),
        };
        let prior = Prior::new(config.prior.clone()).unwrap();
        let mut chain = Chain::start(&config, &prior, &mesh, &ZeroPotential).unwrap();
        chain.advance_to(3);
        let bytes = chain.checkpoint_bytes();
        let mut other = config.clone();
        other.settings.seed += 1;
        assert!(Chain::resume_from_bytes(&bytes, &other, &prior, &mesh, &ZeroPotential).is_err());
        assert!(Chain::resume_from_bytes(&bytes[..bytes.len() - 3], &config, &prior, &mesh, &ZeroPotential).is_err());
        let back = Chain::resume_from_bytes(&bytes, &config, &prior, &mesh, &ZeroPotential).unwrap();
        assert_eq!(back.checkpoint_bytes(), bytes);
    }

    #[test]
    fn trace_csv_layout() {
        let mesh = build_disk_mesh(0, &layout()).unwrap();
        let mut s = settings(3, 1);
        s.monitors = vec![Monitor::CenterX];
        let config = ChainConfig {
            prior: PriorConfig::paper_star_shaped(8),
            settings: s,
        };
        let prior = Prior::new(config.prior.clone()).unwrap();
        let record = run_chain(&config, &prior, &mesh, &ZeroPotential, None).unwrap();
        let csv = record.trace_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,move_type,accepted,phi,center_x");
        assert_eq!(lines.len(), 1 + 6);
        assert!(lines[1].starts_with("0,pcn,1,"));
        assert!(lines[2].starts_with("0,rwm,"));
    }
}
