//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr, bypassing the harness capture, so `cargo test --test acceptance`
//! shows the full table.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{dense_voltages, disk, paper_layout, relative_error};
use eit_core::config::RunConfig;
use eit_core::diagnostics::{ess, ScalarTrace};
use eit_core::fields::GridField;
use eit_core::forward::{adjacent_stimulation_patterns, Conductivity, ForwardSolver, StimulationMatrix};
use eit_core::inference::{misfit, Chain, ChainConfig, ChainSettings, DataSet, EitPotential, Potential, ZeroPotential};
use eit_core::mesh::{read_mesh, ElectrodeLayout, Mesh};
use eit_core::pipeline::{parse_values, Options, Pipeline};
use eit_core::priors::{f2_star_shaped, f3_level_set, measure_of_symmetric_difference, Prior, PriorConfig};
use eit_core::truth::Truth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn criterion(id: u32, name: &str, budget: Duration, body: impl FnOnce() -> (bool, String)) {
    let start = Instant::now();
    let (ok, detail) = body();
    let elapsed = start.elapsed();
    let pass = ok && elapsed <= budget;
    let line = format!(
        "AC{id:<2} {} {name}: {detail}; {:.1} s (budget {:.0} s)\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn stim() -> StimulationMatrix {
    adjacent_stimulation_patterns(16, 0.1).unwrap()
}

fn log_gaussian_draws(mesh: &Mesh, count: usize, seed: u64) -> Vec<Conductivity> {
    let prior = Prior::new(PriorConfig::paper_log_gaussian(32)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| prior.pushforward(&prior.sample(&mut rng), mesh).unwrap()).collect()
}

#[test]
fn ac01_forward_matches_dense_oracle() {
    criterion(1, "forward correctness", secs(10), || {
        let layout = paper_layout();
        let stim = stim();
        let mut worst: f64 = 0.0;
        let mut parts = Vec::new();
        for level in 0..=2 {
            let mesh = disk(level);
            let solver = ForwardSolver::new(&mesh, &layout).unwrap();
            let mut cases = log_gaussian_draws(&mesh, 1, 100 + level as u64);
            if level < 2 {
                cases.push(Conductivity::constant(1.0, mesh.triangle_count()));
            }
            for sigma in cases {
                let sparse = solver.forward_map(&sigma, &stim).unwrap();
                let dense = dense_voltages(&mesh, &sigma, &layout.contact_impedances, stim.columns()).concat();
                let err = relative_error(&sparse, &dense);
                worst = worst.max(err);
            }
            parts.push(format!("level {level} ({} triangles)", mesh.triangle_count()));
        }
        (worst <= 1e-8, format!("max relative error {worst:.2e} over {}", parts.join(", ")))
    });
}

#[test]
fn ac02_resistivity_matrix_is_symmetric() {
    criterion(2, "reciprocity", secs(60), || {
        let mesh = disk(2);
        let solver = ForwardSolver::new(&mesh, &paper_layout()).unwrap();
        let mut worst: f64 = 0.0;
        for sigma in log_gaussian_draws(&mesh, 20, 2) {
            let r = solver.resistivity_matrix(&sigma).unwrap().0;
            let n = r.len();
            let (mut diff, mut norm) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    diff += (r[i][j] - r[j][i]).powi(2);
                    norm += r[i][j] * r[i][j];
                }
            }
            worst = worst.max((diff / norm).sqrt());
        }
        (worst <= 1e-8, format!("max ‖R − Rᵀ‖/‖R‖ {worst:.2e} over 20 draws"))
    });
}

#[test]
fn ac03_scaling_law() {
    criterion(3, "scaling law", secs(10), || {
        let mesh = disk(2);
        let sigma = log_gaussian_draws(&mesh, 1, 3).remove(0);
        let z = 0.01;
        let base = ForwardSolver::new(&mesh, &ElectrodeLayout::uniform(16, 0.5, z).unwrap())
            .unwrap()
            .factorize(&sigma)
            .unwrap();
        let stim = stim();
        let mut worst: f64 = 0.0;
        for c in [0.5, 2.0, 10.0] {
            let scaled = ForwardSolver::new(&mesh, &ElectrodeLayout::uniform(16, 0.5, z / c).unwrap())
                .unwrap()
                .factorize(&sigma.scaled(c))
                .unwrap();
            for pattern in stim.columns() {
                let a = base.solve(pattern).unwrap();
                let b = scaled.solve(pattern).unwrap();
                let v: Vec<f64> = a.potential.iter().map(|x| x / c).collect();
                let u: Vec<f64> = a.electrode_voltages.iter().map(|x| x / c).collect();
                worst = worst
                    .max(relative_error(&b.potential, &v))
                    .max(relative_error(&b.electrode_voltages, &u));
            }
        }
        (worst <= 1e-10, format!("max relative error {worst:.2e} for c in {{0.5, 2, 10}}"))
    });
}

#[test]
fn ac04_mesh_convergence() {
    criterion(4, "mesh convergence", secs(120), || {
        let layout = paper_layout();
        let stim = stim();
        let smooth = |p: [f64; 2]| (0.4 * (PI * p[0]).sin() * (PI * p[1]).cos()).exp();
        let voltages = |level: u32| {
            let mesh = disk(level);
            let sigma = Conductivity(mesh.centroids().into_iter().map(smooth).collect());
            ForwardSolver::new(&mesh, &layout).unwrap().forward_map(&sigma, &stim).unwrap()
        };
        let reference = voltages(4);
        let errors: Vec<f64> = (1..=3).map(|l| relative_error(&voltages(l), &reference)).collect();
        let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        (
            orders.iter().all(|p| *p >= 1.0),
            format!(
                "errors {:.2e}, {:.2e}, {:.2e} at levels 1-3 against level 4, orders {:.2}, {:.2}",
                errors[0], errors[1], errors[2], orders[0], orders[1]
            ),
        )
    });
}

#[test]
fn ac05_per_mode_variance() {
    criterion(5, "field sampler", secs(120), || {
        let n = 10_000;
        let mut worst: f64 = 0.0;
        for (k, config) in [
            PriorConfig::paper_log_gaussian(128),
            PriorConfig::paper_star_shaped(256),
            PriorConfig::paper_level_set(128),
        ]
        .into_iter()
        .enumerate()
        {
            let prior = Prior::new(config).unwrap();
            let sampler = prior.sampler();
            let spec = sampler.spec();
            let mut rng = ChaCha8Rng::seed_from_u64(500 + k as u64);
            let mut modes: Vec<usize> = vec![0];
            modes.extend((0..10).map(|_| rng.random_range(0..spec.mode_count())));
            let mut sum2 = vec![0.0; modes.len()];
            for _ in 0..n {
                let coeffs = sampler.analyze(&sampler.sample(0.0, &mut rng)).unwrap();
                for (acc, &m) in sum2.iter_mut().zip(&modes) {
                    *acc += coeffs[m] * coeffs[m];
                }
            }
            for (acc, &m) in sum2.iter().zip(&modes) {
                let expected = spec.mode_variance(spec.mode_of_index(m));
                worst = worst.max((acc / n as f64 / expected - 1.0).abs());
            }
        }
        (worst <= 0.05, format!("max relative deviation {:.2}% over 33 modes", 100.0 * worst))
    });
}

/// Symmetric difference against the unperturbed map for a halving sweep.
fn sweep(mesh: &Mesh, base: &Conductivity, perturbed: impl Fn(f64) -> Conductivity) -> Vec<f64> {
    (0..=20)
        .map(|k| measure_of_symmetric_difference(base, &perturbed(0.5f64.powi(k)), mesh).unwrap())
        .collect()
}

fn combine(a: &GridField, b: &GridField, eps: f64) -> GridField {
    GridField {
        values: a.values.iter().zip(&b.values).map(|(x, y)| x + eps * y).collect(),
        ..a.clone()
    }
}

#[test]
fn ac06_prior_maps_are_continuous() {
    criterion(6, "prior-map continuity", secs(60), || {
        let mesh = disk(3);
        let floor = mesh.areas().into_iter().fold(0.0, f64::max);
        let star = Prior::new(PriorConfig::paper_star_shaped(64)).unwrap();
        let level = Prior::new(PriorConfig::paper_level_set(64)).unwrap();
        let map = level.config().level_set_map().unwrap();
        let mut sweeps = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let state = star.sample(&mut rng);
            let (r, c) = (state.field(), state.center().unwrap());
            let w = star.sample(&mut rng).field().map(|v| v - star.field_mean());
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            let dir = [0.2 * angle.cos(), 0.2 * angle.sin()];
            let base = f2_star_shaped(r, c, 2.0, 1.0, &mesh).unwrap();
            sweeps.push(sweep(&mesh, &base, |e| f2_star_shaped(&combine(r, &w, e), c, 2.0, 1.0, &mesh).unwrap()));
            sweeps.push(sweep(&mesh, &base, |e| {
                f2_star_shaped(r, [c[0] + e * dir[0], c[1] + e * dir[1]], 2.0, 1.0, &mesh).unwrap()
            }));
            let u = level.sample(&mut rng).field().clone();
            let v = level.sample(&mut rng).field().clone();
            let base = f3_level_set(&u, &map, &mesh).unwrap();
            sweeps.push(sweep(&mesh, &base, |e| f3_level_set(&combine(&u, &v, e), &map, &mesh).unwrap()));
        }
        let monotone = sweeps.iter().all(|s| s.windows(2).all(|w| w[1] <= w[0]));
        let reaches_floor = sweeps.iter().all(|s| *s.last().unwrap() <= floor);
        let start = sweeps.iter().map(|s| s[0]).fold(f64::INFINITY, f64::min);
        (
            monotone && reaches_floor,
            format!(
                "15 sweeps (radius, centre, level set), monotone {monotone}, final ≤ one triangle ({floor:.2e}) \
                 {reaches_floor}, smallest initial area {start:.2e}"
            ),
        )
    });
}

#[test]
fn ac07_pcn_preserves_the_prior() {
    criterion(7, "pCN prior preservation", secs(120), || {
        let mesh = disk(0);
        let (states, stride) = (10_000, 20);
        let mut worst: f64 = 0.0;
        for (k, config) in [PriorConfig::paper_log_gaussian(32), PriorConfig::paper_star_shaped(32)]
            .into_iter()
            .enumerate()
        {
            let prior = Prior::new(config).unwrap();
            let sampler = prior.sampler();
            // Exact pointwise variance from the synthesis of each scaled mode.
            let modes = sampler.spec().mode_count();
            let points = sampler.synthesize(&vec![0.0; modes], 0.0).values.len();
            let mut exact_var = vec![0.0; points];
            for (m, sd) in sampler.mode_std_devs().iter().enumerate() {
                let mut e = vec![0.0; modes];
                e[m] = *sd;
                for (acc, v) in exact_var.iter_mut().zip(&sampler.synthesize(&e, 0.0).values) {
                    *acc += v * v;
                }
            }
            let config = ChainConfig {
                prior: prior.config().clone(),
                settings: ChainSettings {
                    beta: 0.6,
                    delta: prior.center_half_width().map(|_| 0.3),
                    n_samples: states * stride,
                    burn_in: 0,
                    monitors: vec![],
                    seed: 700 + k as u64,
                    snapshot_every: states * stride,
                    checkpoint_every: None,
                },
            };
            let mut chain = Chain::start(&config, &prior, &mesh, &ZeroPotential).unwrap();
            let (mut sum, mut sum2) = (vec![0.0; points], vec![0.0; points]);
            for i in 0..states {
                chain.advance_to((i + 1) * stride);
                for ((s, s2), v) in sum.iter_mut().zip(&mut sum2).zip(&chain.current().state.field().values) {
                    let d = v - prior.field_mean();
                    *s += d;
                    *s2 += d * d;
                }
            }
            let n = states as f64;
            for ((s, s2), var) in sum.iter().zip(&sum2).zip(&exact_var) {
                let mean_z = (s / n) / (var / n).sqrt();
                let var_z = (s2 / n - var) / (var * (2.0 / n).sqrt());
                worst = worst.max(mean_z.abs()).max(var_z.abs());
            }
        }
        (worst <= 5.0, format!("max deviation {worst:.2} standard errors over all grid points of two priors"))
    });
}

#[test]
fn ac08_ess_calibration() {
    criterion(8, "ESS calibration", secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let iid: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e_iid = ess(&ScalarTrace::new("iid", iid).unwrap()).unwrap();
        let m = 100_000;
        let rho = 0.9;
        let mut x: f64 = StandardNormal.sample(&mut rng);
        let ar: Vec<f64> = (0..m)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = rho * x + (1.0 - rho * rho).sqrt() * e;
                x
            })
            .collect();
        let e_ar = ess(&ScalarTrace::new("ar", ar).unwrap()).unwrap();
        let target = m as f64 / 19.0;
        let ok = (e_iid - n as f64).abs() <= 0.15 * n as f64 && (e_ar - target).abs() <= 0.15 * target;
        (ok, format!("iid {e_iid:.0} of {n}, AR(1) {e_ar:.0} vs {target:.0}"))
    });
}

struct DeskRun {
    config: RunConfig,
    dir: PathBuf,
    elapsed: Duration,
}

fn desk_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

fn run_desk(name: &str, dir: PathBuf) -> DeskRun {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/{name}.json"));
    let config = RunConfig::load(path).unwrap();
    let _ = fs::remove_dir_all(&dir);
    let options = Options {
        out: dir.clone(),
        replicas: 1,
        allow_inverse_crime: false,
        force: false,
    };
    let start = Instant::now();
    Pipeline::new(config.clone(), options).unwrap().run_all().unwrap();
    DeskRun {
        config,
        dir,
        elapsed: start.elapsed(),
    }
}

fn desk_runs() -> &'static (DeskRun, DeskRun) {
    static RUNS: OnceLock<(DeskRun, DeskRun)> = OnceLock::new();
    RUNS.get_or_init(|| {
        (
            run_desk("desk_a_star", desk_dir("desk_a_star")),
            run_desk("desk_b_level_set", desk_dir("desk_b_level_set")),
        )
    })
}

/// Φ at the prior-mean conductivity and at the posterior mean of the
/// pushforward, both recomputed from the run's artifacts.
fn misfits(run: &DeskRun) -> (f64, f64) {
    let coarse = read_mesh(run.dir.join("mesh/coarse.mesh")).unwrap();
    let data = DataSet::read(run.dir.join("data/data.json")).unwrap();
    let potential = EitPotential::new(&coarse, &run.config.layout().unwrap(), data).unwrap();
    let prior = Prior::new(run.config.prior.clone()).unwrap();
    let at_prior_mean = potential.phi(&prior.pushforward(&prior.mean_state(), &coarse).unwrap()).unwrap();
    let text = fs::read_to_string(run.dir.join("chains/r0/mean_of_pushforward.txt")).unwrap();
    let mean_f = Conductivity(parse_values(&text).unwrap().remove(0));
    (at_prior_mean, potential.phi(&mean_f).unwrap())
}

#[test]
fn ac09_desk_runs_recover_the_truth() {
    let runs = desk_runs();
    let (star, level) = runs;
    let budget = secs(30 * 60);
    let elapsed = star.elapsed + level.elapsed;

    let (prior_a, posterior_a) = misfits(star);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(star.dir.join("chains/r0/summary.json")).unwrap()).unwrap();
    let center: Vec<f64> = summary["mean_center"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let Truth::Star { center: truth, .. } = star.config.truth.build().unwrap() else {
        panic!("conductivity A is a star draw")
    };
    let distance = (center[0] - truth[0]).hypot(center[1] - truth[1]);
    let (prior_b, posterior_b) = misfits(level);

    let ok_a = distance <= 0.15 && posterior_a * 10.0 <= prior_a;
    let ok_b = posterior_b * 10.0 <= prior_b;
    let pass = ok_a && ok_b && elapsed <= budget;
    let line = format!(
        "AC9  {} end-to-end desk runs: (a) star {}: centre error {distance:.3}, Φ prior mean {prior_a:.0} / \
         Φ(E F₂) {posterior_a:.0} = {:.1}x; (b) level set {}: Φ prior mean {prior_b:.0} / Φ(E F₃) {posterior_b:.0} \
         = {:.1}x; {:.0} s + {:.0} s (budget {:.0} s)\n",
        if pass { "PASS" } else { "FAIL" },
        if ok_a { "pass" } else { "fail" },
        prior_a / posterior_a,
        if ok_b { "pass" } else { "fail" },
        prior_b / posterior_b,
        star.elapsed.as_secs_f64(),
        level.elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn ac10_rerun_is_byte_identical() {
    let (_, first) = desk_runs();
    // One pipeline runtime, with slack for timing jitter.
    let budget = first.elapsed.mul_f64(1.25);
    criterion(10, "determinism", budget, || {
        let second = run_desk("desk_b_level_set", desk_dir("desk_b_level_set_rerun"));
        let (a, b) = (tree(&first.dir), tree(&second.dir));
        let differing: Vec<String> = a
            .iter()
            .filter(|(path, bytes)| b.get(*path) != Some(*bytes))
            .map(|(path, _)| path.display().to_string())
            .collect();
        let same_files = a.len() == b.len();
        (
            same_files && differing.is_empty(),
            format!(
                "{} files compared, {} differ, desk level-set pipeline rerun",
                a.len(),
                differing.len()
            ),
        )
    });
}

#[test]
fn ac11_misfit_is_lipschitz_in_the_data() {
    criterion(11, "Lipschitz in y", secs(60), || {
        let mesh = disk(1);
        let solver = ForwardSolver::new(&mesh, &paper_layout()).unwrap();
        let stim = stim();
        let gamma = 2e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = log_gaussian_draws(&mesh, 10, 110);
        let maps: Vec<Vec<f64>> = draws.iter().map(|s| solver.forward_map(s, &stim).unwrap()).collect();
        let mut worst: f64 = 0.0;
        for t in 0..100 {
            let g = &maps[t % 10];
            let other = &maps[(t + 1 + rng.random_range(0..9)) % 10];
            let spread = rng.random_range(0.1..10.0);
            let y1: Vec<f64> = other
                .iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + spread * gamma * e
                })
                .collect();
            let y2: Vec<f64> = g.iter().map(|v| v * rng.random_range(0.5..1.5)).collect();
            let d1 = DataSet::new(y1, gamma, stim.clone()).unwrap();
            let d2 = DataSet::new(y2, gamma, stim.clone()).unwrap();
            let rho = d1.weighted_norm(&d1.y).max(d2.weighted_norm(&d2.y));
            let diff: Vec<f64> = d1.y.iter().zip(&d2.y).map(|(a, b)| a - b).collect();
            let lhs = (misfit(g, &d1).unwrap() - misfit(g, &d2).unwrap()).abs();
            let rhs = (rho + d1.weighted_norm(g)) * d1.weighted_norm(&diff);
            worst = worst.max(lhs / rhs);
        }
        (
            worst <= 1.0 + 1e-12,
            format!("max |ΔΦ| / ((ρ + |G(u)|)|y₁ − y₂|) = {worst:.3} over 100 triples"),
        )
    });
}
