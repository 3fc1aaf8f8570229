//! Staged experiment: mesh, truth, data, chains, diagnostics, report.
//!
//! Each stage writes into the output directory and records the SHA-256 of
//! every artifact in `manifest.json`, next to the hash of the run
//! configuration, the seeds and the code version. A stage refuses to run
//! when the manifest belongs to a different configuration (unless forced)
//! or when an upstream artifact no longer matches its recorded hash.
//!
//! Layout of the output directory:
//!
//! ```text
//! manifest.json
//! mesh/{fine,coarse}.mesh
//! truth/{truth.json, truth_fine.txt, truth_coarse.txt}
//! data/{data.json, data_report.json}
//! chains/r<k>/{trace.csv, summary.json, pushforward_of_mean.txt,
//!              mean_of_pushforward.txt, samples.txt, checkpoint.bin}
//! diagnostics/{ess.csv, misfit.csv, misfit.txt, kde/*.csv}
//! report/{summary.txt, *.ppm}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::diagnostics::{default_grid, ess, kde_1d, kde_2d, thin, MisfitTable, ScalarTrace, MIN_KDE_POINTS};
use crate::error::{Error, Result};
use crate::forward::Conductivity;
use crate::inference::{generate_data, mean_conductivities, run_chain, ChainRecord, DataSet, EitPotential, Potential};
use crate::mesh::{build_disk_mesh, read_mesh, write_mesh, Mesh};
use crate::priors::{Prior, PriorConfig};
use crate::raster::{render, value_range};

pub const STAGES: [&str; 6] = ["mesh", "truth", "data", "run", "diagnose", "report"];
const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "eit-manifest v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    pub out: PathBuf,
    pub replicas: usize,
    pub allow_inverse_crime: bool,
    /// Discard a manifest written for another configuration.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Seeds {
    truth: Option<u64>,
    noise: u64,
    chains: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config_hash: String,
    code_version: String,
    seeds: Seeds,
    replicas: Option<usize>,
    /// Stage name to artifact path (relative) to SHA-256.
    stages: BTreeMap<String, BTreeMap<String, String>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the configuration with the output directory removed.
pub fn config_hash(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.output_dir = None;
    sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
}

/// Plain-text real matrix: `values v1 <rows> <cols>` then one row per line.
pub fn values_to_string(rows: &[Vec<f64>]) -> String {
    let cols = rows.first().map_or(0, Vec::len);
    let mut out = format!("values v1 {} {cols}\n", rows.len());
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_values(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let bad = |line: usize, message: String| Error::Parse {
        line,
        section: "values".into(),
        message,
    };
    if header.len() != 4 || header[0] != "values" || header[1] != "v1" {
        return Err(bad(1, "expected header `values v1 <rows> <cols>`".into()));
    }
    let rows: usize = header[2].parse().map_err(|_| bad(1, "bad row count".into()))?;
    let cols: usize = header[3].parse().map_err(|_| bad(1, "bad column count".into()))?;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let line = lines.next().ok_or_else(|| bad(r + 2, "missing row".into()))?;
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(r + 2, format!("bad number `{t}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != cols {
            return Err(bad(r + 2, format!("expected {cols} values, found {}", row.len())));
        }
        out.push(row);
    }
    Ok(out)
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = parse_values(&text)?;
    if rows.len() != 1 {
        return Err(Error::config(format!("{} should hold a single row", path.display())));
    }
    Ok(rows.remove(0))
}

/// Last trace row of every iteration: `(iter, phi, monitors)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub labels: Vec<String>,
    pub iters: Vec<u64>,
    pub phi: Vec<f64>,
    pub monitors: Vec<Vec<f64>>,
}

pub fn parse_trace_csv(text: &str) -> Result<IterationTrace> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let bad = |line: usize, message: &str| Error::Parse {
        line,
        section: "trace".into(),
        message: message.into(),
    };
    if header.len() < 4 || header[..4] != ["iter", "move_type", "accepted", "phi"] {
        return Err(bad(1, "unexpected trace header"));
    }
    let labels: Vec<String> = header[4..].iter().map(|s| s.to_string()).collect();
    let mut trace = IterationTrace {
        monitors: vec![Vec::new(); labels.len()],
        labels,
        iters: Vec::new(),
        phi: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(bad(i + 2, "wrong number of columns"));
        }
        let iter: u64 = fields[0].parse().map_err(|_| bad(i + 2, "bad iteration"))?;
        let phi: f64 = fields[3].parse().map_err(|_| bad(i + 2, "bad phi"))?;
        let values = fields[4..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| bad(i + 2, "bad monitor value")))
            .collect::<Result<Vec<f64>>>()?;
        if trace.iters.last() == Some(&iter) {
            *trace.phi.last_mut().expect("row") = phi;
            for (col, v) in trace.monitors.iter_mut().zip(values) {
                *col.last_mut().expect("row") = v;
            }
        } else {
            trace.iters.push(iter);
            trace.phi.push(phi);
            for (col, v) in trace.monitors.iter_mut().zip(values) {
                col.push(v);
            }
        }
    }
    Ok(trace)
}

pub struct Pipeline {
    config: RunConfig,
    options: Options,
    hash: String,
}

impl Pipeline {
    pub fn new(config: RunConfig, options: Options) -> Result<Self> {
        config.validate(options.allow_inverse_crime)?;
        if options.replicas == 0 {
            return Err(Error::config("replica count must be positive"));
        }
        let hash = config_hash(&config);
        Ok(Self { config, options, hash })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.options.out
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.options.out.join(rel)
    }

    fn seeds(&self, replicas: usize) -> Seeds {
        let truth = match self.config.truth {
            crate::truth::TruthSpec::StarDraw { seed, .. } => Some(seed),
            crate::truth::TruthSpec::Blobs { .. } => None,
        };
        Seeds {
            truth,
            noise: self.config.noise.seed,
            chains: (0..replicas as u64).map(|k| self.config.chain.seed + k).collect(),
        }
    }

    fn load_manifest(&self) -> Result<Manifest> {
        let path = self.path(MANIFEST);
        let fresh = Manifest {
            format: MANIFEST_FORMAT.into(),
            config_hash: self.hash.clone(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seeds: self.seeds(0),
            replicas: None,
            stages: BTreeMap::new(),
        };
        if !path.exists() {
            return Ok(fresh);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.config_hash != self.hash || manifest.format != MANIFEST_FORMAT {
            if self.options.force {
                log::warn!("discarding manifest of a different configuration in {}", self.options.out.display());
                return Ok(fresh);
            }
            return Err(Error::StaleManifest {
                dir: self.options.out.clone(),
                expected: self.hash.clone(),
                found: manifest.config_hash,
            });
        }
        Ok(manifest)
    }

    fn save_manifest(&self, manifest: &Manifest) -> Result<()> {
        let path = self.path(MANIFEST);
        let text = serde_json::to_string_pretty(manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn check_upstream(&self, manifest: &Manifest, stage: &str) -> Result<()> {
        let index = STAGES.iter().position(|s| *s == stage).expect("known stage");
        for upstream in &STAGES[..index] {
            let Some(artifacts) = manifest.stages.get(*upstream) else {
                return Err(Error::config(format!(
                    "stage `{upstream}` has not been run in {}",
                    self.options.out.display()
                )));
            };
            for (rel, expected) in artifacts {
                let path = self.path(rel);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let found = sha256_hex(&bytes);
                if &found != expected {
                    return Err(Error::StaleManifest {
                        dir: path,
                        expected: expected.clone(),
                        found,
                    });
                }
            }
        }
        Ok(())
    }

    /// Runs one stage: manifest checks, the body, then artifact hashing.
    /// Downstream stages are dropped from the manifest.
    fn stage(&self, name: &str, body: impl FnOnce(&mut Manifest, &mut Writer) -> Result<()>) -> Result<()> {
        fs::create_dir_all(&self.options.out).map_err(|e| Error::io(&self.options.out, e))?;
        let mut manifest = self.load_manifest()?;
        self.check_upstream(&manifest, name)?;
        let mut writer = Writer {
            root: self.options.out.clone(),
            hashes: BTreeMap::new(),
        };
        body(&mut manifest, &mut writer)?;
        let index = STAGES.iter().position(|s| *s == name).expect("known stage");
        for later in &STAGES[index..] {
            manifest.stages.remove(*later);
        }
        manifest.stages.insert(name.into(), writer.hashes);
        self.save_manifest(&manifest)?;
        log::info!("stage `{name}` complete");
        Ok(())
    }

    fn meshes(&self) -> Result<(Mesh, Mesh)> {
        Ok((read_mesh(self.path("mesh/fine.mesh"))?, read_mesh(self.path("mesh/coarse.mesh"))?))
    }

    fn data(&self) -> Result<DataSet> {
        DataSet::read(self.path("data/data.json"))
    }

    fn prior(&self) -> Result<Prior> {
        Prior::new(self.config.prior.clone())
    }

    pub fn mesh(&self) -> Result<()> {
        self.stage("mesh", |_, w| {
            let layout = self.config.layout()?;
            let fine = build_disk_mesh(self.config.mesh.fine_level, &layout)?;
            let coarse = build_disk_mesh(self.config.mesh.coarse_level, &layout)?;
            log::info!(
                "fine mesh {} triangles, coarse mesh {} triangles",
                fine.triangle_count(),
                coarse.triangle_count()
            );
            w.with_path("mesh/fine.mesh", |p| write_mesh(&fine, p))?;
            w.with_path("mesh/coarse.mesh", |p| write_mesh(&coarse, p))
        })
    }

    pub fn make_truth(&self) -> Result<()> {
        self.stage("truth", |_, w| {
            let (fine, coarse) = self.meshes()?;
            let truth = self.config.truth.build()?;
            let on_fine = truth.conductivity(&fine)?;
            let on_coarse = truth.conductivity(&coarse)?;
            let mut provenance = truth.provenance();
            let inclusion_area: f64 = (0..fine.triangle_count())
                .filter(|&t| on_fine.0[t] == crate::truth::INCLUSION)
                .map(|t| fine.area(t))
                .sum();
            provenance["fine_mesh_inclusion_area"] = serde_json::json!(inclusion_area);
            w.text("truth/truth.json", serde_json::to_string_pretty(&provenance)? + "\n")?;
            w.text("truth/truth_fine.txt", values_to_string(&[on_fine.0]))?;
            w.text("truth/truth_coarse.txt", values_to_string(&[on_coarse.0]))
        })
    }

    pub fn make_data(&self) -> Result<()> {
        self.stage("data", |_, w| {
            let (fine, _) = self.meshes()?;
            let truth = Conductivity(read_vector(&self.path("truth/truth_fine.txt"))?);
            let stim = self.config.stimulation_matrix()?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.noise.seed);
            let (data, report) = generate_data(&truth, &fine, &self.config.layout()?, &stim, self.config.noise.gamma, &mut rng)?;
            log::info!("mean relative error per entry {:.4}", report.mean_relative_error);
            w.text("data/data.json", data.to_json()? + "\n")?;
            let summary = serde_json::json!({
                "gamma": self.config.noise.gamma,
                "noise_seed": self.config.noise.seed,
                "entries": data.len(),
                "mean_relative_error": report.mean_relative_error,
                "norm_relative_error": report.norm_relative_error,
                "clean": report.clean,
            });
            w.text("data/data_report.json", serde_json::to_string_pretty(&summary)? + "\n")
        })
    }

    pub fn run(&self) -> Result<()> {
        self.stage("run", |manifest, w| {
            let (_, coarse) = self.meshes()?;
            let data = self.data()?;
            let prior = self.prior()?;
            let potential = EitPotential::new(&coarse, &self.config.layout()?, data)?;
            let replicas = self.options.replicas;
            manifest.replicas = Some(replicas);
            manifest.seeds = self.seeds(replicas);
            let base = self.config.chain_config();
            let results: Vec<Result<(usize, ChainRecord)>> = (0..replicas)
                .into_par_iter()
                .map(|k| {
                    let mut config = base.clone();
                    config.settings.seed += k as u64;
                    let dir = self.path(&format!("chains/r{k}"));
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let checkpoint = dir.join("checkpoint.bin");
                    let local = potential.clone();
                    let record = match run_chain(&config, &prior, &coarse, &local, Some(&checkpoint)) {
                        Err(Error::Config(msg)) if checkpoint.exists() => {
                            log::warn!("ignoring unusable checkpoint ({msg}), restarting replica {k}");
                            fs::remove_file(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
                            run_chain(&config, &prior, &coarse, &local, Some(&checkpoint))?
                        }
                        other => other?,
                    };
                    Ok((k, record))
                })
                .collect();
            for result in results {
                let (k, record) = result?;
                self.write_chain(w, k, &record, &prior, &coarse)?;
            }
            Ok(())
        })
    }

    fn write_chain(&self, w: &mut Writer, k: usize, record: &ChainRecord, prior: &Prior, coarse: &Mesh) -> Result<()> {
        let dir = format!("chains/r{k}");
        let (f_mean, mean_f) = mean_conductivities(record, prior, coarse)?;
        let mean_state = record.mean_state()?;
        let snapshots = &record.snapshots;
        let wanted = self.config.report.sample_rasters.min(snapshots.len());
        let samples = (0..wanted)
            .map(|i| {
                let s = &snapshots[(i + 1) * snapshots.len() / wanted - 1];
                prior.pushforward(&s.state, coarse).map(|c| c.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = serde_json::json!({
            "seed": self.config.chain.seed + k as u64,
            "family": self.config.prior.family(),
            "n_samples": self.config.chain.n_samples,
            "burn_in": self.config.chain.burn_in,
            "accumulated": record.count,
            "pcn_acceptance": record.pcn.rate(),
            "rwm_acceptance": record.rwm.rate(),
            "overall_acceptance": record.overall_acceptance(),
            "mean_center": mean_state.center(),
            "final_phi": record.trace.last().map(|r| r.phi),
        });
        w.text(&format!("{dir}/summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        w.text(&format!("{dir}/trace.csv"), record.trace_csv())?;
        w.text(&format!("{dir}/pushforward_of_mean.txt"), values_to_string(&[f_mean.0]))?;
        w.text(&format!("{dir}/mean_of_pushforward.txt"), values_to_string(&[mean_f]))?;
        w.text(&format!("{dir}/mean_field.txt"), values_to_string(&[mean_state.field().values.clone()]))?;
        w.text(&format!("{dir}/samples.txt"), values_to_string(&samples))?;
        w.existing(&format!("{dir}/checkpoint.bin"))
    }

    fn replicas(manifest: &Manifest) -> usize {
        manifest.replicas.unwrap_or(1)
    }

    pub fn diagnose(&self) -> Result<()> {
        self.stage("diagnose", |manifest, w| {
            let (_, coarse) = self.meshes()?;
            let prior = self.prior()?;
            let potential = EitPotential::new(&coarse, &self.config.layout()?, self.data()?)?;
            let truth_coarse = Conductivity(read_vector(&self.path("truth/truth_coarse.txt"))?);
            let prior_mean = prior.pushforward(&prior.mean_state(), &coarse)?;
            let mut table = MisfitTable { rows: Vec::new() };
            table.push("prior mean", potential.phi(&prior_mean)?);
            table.push("truth on coarse mesh", potential.phi(&truth_coarse)?);
            let burn_in = self.config.chain.burn_in as u64;
            let mut ess_csv = String::from("replica,quantity,n,ess\n");
            for k in 0..Self::replicas(manifest) {
                let dir = format!("chains/r{k}");
                let f_mean = Conductivity(read_vector(&self.path(&format!("{dir}/pushforward_of_mean.txt")))?);
                let mean_f = read_vector(&self.path(&format!("{dir}/mean_of_pushforward.txt")))?;
                table.push(format!("r{k} F(E[u])"), potential.phi(&f_mean)?);
                table.push(format!("r{k} E[F(u)]"), potential.phi(&Conductivity(mean_f))?);

                let csv_path = self.path(&format!("{dir}/trace.csv"));
                let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
                let trace = parse_trace_csv(&text)?;
                let start = trace.iters.iter().position(|i| *i >= burn_in).unwrap_or(trace.iters.len());
                let mut columns = vec![("phi".to_string(), trace.phi[start..].to_vec())];
                for (label, col) in trace.labels.iter().zip(&trace.monitors) {
                    columns.push((label.clone(), col[start..].to_vec()));
                }
                let results: Vec<(String, Vec<f64>, Result<f64>)> = columns
                    .into_par_iter()
                    .map(|(label, values)| {
                        let e = ScalarTrace::new(label.clone(), values.clone()).and_then(|t| ess(&t));
                        (label, values, e)
                    })
                    .collect();
                let mut ess_of = BTreeMap::new();
                for (label, values, e) in &results {
                    match e {
                        Ok(v) => {
                            ess_csv.push_str(&format!("r{k},{label},{},{v:.3}\n", values.len()));
                            ess_of.insert(label.clone(), *v);
                        }
                        Err(err) => {
                            log::warn!("replica {k}, {label}: {err}");
                            ess_csv.push_str(&format!("r{k},{label},{},degenerate\n", values.len()));
                        }
                    }
                }
                for (label, values, e) in &results {
                    let Ok(e) = e else { continue };
                    let thinned = thin(values, (e.round() as usize).max(MIN_KDE_POINTS));
                    let grid = match default_grid(&thinned, self.config.report.kde_points) {
                        Ok(g) => g,
                        Err(err) => {
                            log::warn!("replica {k}, {label}: no density estimate ({err})");
                            continue;
                        }
                    };
                    match kde_1d(&thinned, &grid) {
                        Ok(d) => w.text(&format!("diagnostics/kde/r{k}_{label}.csv"), d.to_csv())?,
                        Err(err) => log::warn!("replica {k}, {label}: no density estimate ({err})"),
                    }
                }
                if let (Some(ex), Some(ey)) = (ess_of.get("center_x"), ess_of.get("center_y")) {
                    let find = |l: &str| &results.iter().find(|(label, _, _)| label == l).expect("column").1;
                    let target = (ex.min(*ey).round() as usize).max(MIN_KDE_POINTS);
                    let xs = thin(find("center_x"), target);
                    let ys = thin(find("center_y"), target);
                    let gx = default_grid(&xs, self.config.report.kde_points)?;
                    let gy = default_grid(&ys, self.config.report.kde_points)?;
                    match kde_2d(&xs, &ys, &gx, &gy) {
                        Ok(d) => w.text(&format!("diagnostics/kde/r{k}_center_xy.csv"), d.to_csv())?,
                        Err(err) => log::warn!("replica {k}: no centre density ({err})"),
                    }
                }
            }
            w.text("diagnostics/ess.csv", ess_csv)?;
            w.text("diagnostics/misfit.csv", table.to_csv())?;
            w.text("diagnostics/misfit.txt", table.to_text())
        })
    }

    pub fn report(&self) -> Result<()> {
        self.stage("report", |manifest, w| {
            let (fine, coarse) = self.meshes()?;
            let size = self.config.report.raster_size;
            let truth = read_vector(&self.path("truth/truth_fine.txt"))?;
            let replicas = Self::replicas(manifest);
            let mut means = Vec::new();
            for k in 0..replicas {
                let dir = format!("chains/r{k}");
                means.push((
                    read_vector(&self.path(&format!("{dir}/pushforward_of_mean.txt")))?,
                    read_vector(&self.path(&format!("{dir}/mean_of_pushforward.txt")))?,
                ));
            }
            let range = match self.config.prior {
                PriorConfig::LogGaussian { .. } => {
                    let all: Vec<f64> = truth
                        .iter()
                        .chain(means.iter().flat_map(|(a, b)| a.iter().chain(b)))
                        .copied()
                        .collect();
                    value_range(&all)
                }
                _ => Prior::new(self.config.prior.clone())?.phase_range().expect("bounded phases"),
            };
            let mut save = |name: String, mesh: &Mesh, values: &[f64]| -> Result<()> {
                let bytes = render(mesh, values, size, range)?.to_ppm();
                w.bytes(&format!("report/{name}.ppm"), &bytes)
            };
            save("truth".into(), &fine, &truth)?;
            for (k, (f_mean, mean_f)) in means.iter().enumerate() {
                save(format!("r{k}_pushforward_of_mean"), &coarse, f_mean)?;
                save(format!("r{k}_mean_of_pushforward"), &coarse, mean_f)?;
                let samples_path = self.path(&format!("chains/r{k}/samples.txt"));
                let text = fs::read_to_string(&samples_path).map_err(|e| Error::io(&samples_path, e))?;
                for (i, sample) in parse_values(&text)?.iter().enumerate() {
                    save(format!("r{k}_sample_{i}"), &coarse, sample)?;
                }
            }
            let mut summary = String::new();
            summary.push_str(&format!("config hash      {}\n", self.hash));
            summary.push_str(&format!("code version     {}\n", env!("CARGO_PKG_VERSION")));
            summary.push_str(&format!("prior            {}\n", self.config.prior.family()));
            summary.push_str(&format!(
                "meshes           fine {} triangles, coarse {} triangles\n",
                fine.triangle_count(),
                coarse.triangle_count()
            ));
            let data_report: serde_json::Value = read_json(&self.path("data/data_report.json"))?;
            summary.push_str(&format!(
                "noise            gamma {}, mean relative error per entry {:.4}\n",
                self.config.noise.gamma,
                data_report["mean_relative_error"].as_f64().unwrap_or(f64::NAN)
            ));
            let truth_json: serde_json::Value = read_json(&self.path("truth/truth.json"))?;
            for k in 0..replicas {
                let s: serde_json::Value = read_json(&self.path(&format!("chains/r{k}/summary.json")))?;
                summary.push_str(&format!(
                    "replica {k}        seed {}, acceptance pCN {:.3}, centre {:.3}, overall {:.3}\n",
                    s["seed"],
                    num(&s["pcn_acceptance"]),
                    num(&s["rwm_acceptance"]),
                    num(&s["overall_acceptance"])
                ));
                if let (Some(c), Some(t)) = (s["mean_center"].as_array(), truth_json["center"].as_array()) {
                    let c: Vec<f64> = c.iter().filter_map(|v| v.as_f64()).collect();
                    let t: Vec<f64> = t.iter().filter_map(|v| v.as_f64()).collect();
                    summary.push_str(&format!(
                        "                 mean centre ({:.4}, {:.4}), truth ({:.4}, {:.4}), distance {:.4}\n",
                        c[0],
                        c[1],
                        t[0],
                        t[1],
                        (c[0] - t[0]).hypot(c[1] - t[1])
                    ));
                }
            }
            let read_text = |rel: &str| {
                let p = self.path(rel);
                fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
            };
            summary.push_str("\nmisfit\n");
            summary.push_str(&read_text("diagnostics/misfit.txt")?);
            summary.push_str("\neffective sample sizes\n");
            summary.push_str(&read_text("diagnostics/ess.csv")?);
            w.text("report/summary.txt", summary)
        })
    }

    /// All stages in order.
    pub fn run_all(&self) -> Result<()> {
        self.mesh()?;
        self.make_truth()?;
        self.make_data()?;
        self.run()?;
        self.diagnose()?;
        self.report()
    }
}

fn num(v: &serde_json::Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes artifacts under the output directory and remembers their hashes.
struct Writer {
    root: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Writer {
    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.hashes.insert(rel.into(), sha256_hex(bytes));
        Ok(())
    }

    fn text(&mut self, rel: &str, text: String) -> Result<()> {
        self.bytes(rel, text.as_bytes())
    }

    /// Records a file some other routine has written.
    fn existing(&mut self, rel: &str) -> Result<()> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.hashes.insert(rel.into(), sha256_hex(&bytes));
        Ok(())
    }

    fn with_path(&mut self, rel: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write(&path)?;
        self.existing(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_round_trip_exactly() {
        let rows = vec![vec![1.0, -2.5e-300, std::f64::consts::PI], vec![0.1, 1e10, -0.0]];
        let back = parse_values(&values_to_string(&rows)).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().flatten().zip(back.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(parse_values("values v1 2 3\n1 2 3\n").is_err());
        assert!(parse_values("values v1 1 3\n1 2\n").is_err());
    }

    #[test]
    fn trace_keeps_last_row_per_iteration() {
        let text = "iter,move_type,accepted,phi,center_x\n0,pcn,1,5e0,1e-1\n0,rwm,0,4e0,2e-1\n1,pcn,1,3e0,2e-1\n";
        let t = parse_trace_csv(text).unwrap();
        assert_eq!(t.iters, vec![0, 1]);
        assert_eq!(t.phi, vec![4.0, 3.0]);
        assert_eq!(t.monitors[0], vec![0.2, 0.2]);
        assert!(parse_trace_csv("iter,phi\n").is_err());
    }

    #[test]
    fn config_hash_ignores_output_dir() {
        let mut a = RunConfig::desk_a_star();
        let h = config_hash(&a);
        a.output_dir = Some("elsewhere".into());
        assert_eq!(config_hash(&a), h);
        a.chain.seed += 1;
        assert_ne!(config_hash(&a), h);
    }
}
