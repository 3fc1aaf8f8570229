//! Python bindings: meshes, the forward map, field sampling, ESS and the
//! staged pipeline. Configuration problems raise `ValueError`, numerical
//! failures `RuntimeError`.

use eit_core::config::RunConfig;
use eit_core::diagnostics::{ess, ScalarTrace};
use eit_core::fields::{BoundaryCondition, CovarianceSpec, FieldSampler};
use eit_core::forward::{adjacent_stimulation_patterns, Conductivity, ForwardSolver};
use eit_core::inference::{misfit, DataSet};
use eit_core::mesh::{build_disk_mesh, mesh_to_string, ElectrodeLayout, Mesh};
use eit_core::pipeline::{Options, Pipeline};
use eit_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A disk mesh together with its electrode layout.
#[pyclass(name = "Mesh", frozen)]
struct PyMesh {
    mesh: Mesh,
    layout: ElectrodeLayout,
}

#[pymethods]
impl PyMesh {
    #[getter]
    fn node_count(&self) -> usize {
        self.mesh.node_count()
    }

    #[getter]
    fn triangle_count(&self) -> usize {
        self.mesh.triangle_count()
    }

    #[getter]
    fn electrode_count(&self) -> usize {
        self.layout.count()
    }

    #[getter]
    fn nodes(&self) -> Vec<(f64, f64)> {
        self.mesh.nodes.iter().map(|p| (p[0], p[1])).collect()
    }

    #[getter]
    fn triangles(&self) -> Vec<(usize, usize, usize)> {
        self.mesh.triangles.iter().map(|t| (t[0], t[1], t[2])).collect()
    }

    fn centroids(&self) -> Vec<(f64, f64)> {
        self.mesh.centroids().into_iter().map(|c| (c[0], c[1])).collect()
    }

    fn areas(&self) -> Vec<f64> {
        self.mesh.areas()
    }

    /// The mesh in the text format written by `eit mesh`.
    fn to_text(&self) -> String {
        mesh_to_string(&self.mesh)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(nodes={}, triangles={}, electrodes={})",
            self.mesh.node_count(),
            self.mesh.triangle_count(),
            self.layout.count()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (level, electrodes = 16, coverage = 0.5, contact_impedance = 0.01))]
fn disk_mesh(level: u32, electrodes: usize, coverage: f64, contact_impedance: f64) -> PyResult<PyMesh> {
    let layout = ElectrodeLayout::uniform(electrodes, coverage, contact_impedance).map_err(py_err)?;
    let mesh = build_disk_mesh(level, &layout).map_err(py_err)?;
    Ok(PyMesh { mesh, layout })
}

/// Electrode voltages for all adjacent patterns, pattern-major.
#[pyfunction]
#[pyo3(signature = (mesh, sigma, amplitude = 0.1))]
fn forward_map(py: Python<'_>, mesh: &PyMesh, sigma: Vec<f64>, amplitude: f64) -> PyResult<Vec<f64>> {
    py.detach(|| {
        let stim = adjacent_stimulation_patterns(mesh.layout.count(), amplitude)?;
        ForwardSolver::new(&mesh.mesh, &mesh.layout)?.forward_map(&Conductivity(sigma), &stim)
    })
    .map_err(py_err)
}

#[pyfunction]
fn resistivity_matrix(py: Python<'_>, mesh: &PyMesh, sigma: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    py.detach(|| {
        ForwardSolver::new(&mesh.mesh, &mesh.layout)?
            .resistivity_matrix(&Conductivity(sigma))
            .map(|r| r.0)
    })
    .map_err(py_err)
}

/// `½ γ⁻² |prediction − data|²`.
#[pyfunction]
#[pyo3(signature = (prediction, data, gamma, electrodes = 16))]
fn data_misfit(prediction: Vec<f64>, data: Vec<f64>, gamma: f64, electrodes: usize) -> PyResult<f64> {
    let stim = adjacent_stimulation_patterns(electrodes, 1.0).map_err(py_err)?;
    let data = DataSet::new(data, gamma, stim).map_err(py_err)?;
    misfit(&prediction, &data).map_err(py_err)
}

/// One Gaussian field draw on the grid, row-major for the square.
#[pyfunction]
#[pyo3(signature = (q, tau, alpha, boundary, grid_size, mean = 0.0, seed = 0))]
fn sample_field(
    q: f64,
    tau: f64,
    alpha: f64,
    boundary: &str,
    grid_size: usize,
    mean: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let boundary = match boundary {
        "neumann" => BoundaryCondition::Neumann2D,
        "dirichlet" => BoundaryCondition::Dirichlet1D,
        other => return Err(PyValueError::new_err(format!("unknown boundary {other:?}"))),
    };
    let sampler = FieldSampler::new(CovarianceSpec {
        q,
        tau,
        alpha,
        boundary,
        grid_size,
    })
    .map_err(py_err)?;
    Ok(sampler.sample(mean, &mut ChaCha8Rng::seed_from_u64(seed)).values)
}

#[pyfunction]
fn effective_sample_size(values: Vec<f64>) -> PyResult<f64> {
    let trace = ScalarTrace::new("x", values).map_err(py_err)?;
    ess(&trace).map_err(py_err)
}

/// JSON text of a named preset configuration.
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    RunConfig::named(name)
        .map(|c| c.to_json())
        .ok_or_else(|| PyValueError::new_err(format!("unknown preset {name:?}")))
}

/// Runs every stage for a JSON configuration and returns its config hash.
#[pyfunction]
#[pyo3(signature = (config_json, out, replicas = 1, allow_inverse_crime = false, force = false))]
fn run_pipeline(
    py: Python<'_>,
    config_json: &str,
    out: &str,
    replicas: usize,
    allow_inverse_crime: bool,
    force: bool,
) -> PyResult<String> {
    let config = RunConfig::from_json(config_json).map_err(py_err)?;
    let options = Options {
        out: out.into(),
        replicas,
        allow_inverse_crime,
        force,
    };
    py.detach(|| {
        let pipeline = Pipeline::new(config, options)?;
        pipeline.run_all()?;
        Ok(pipeline.hash().to_string())
    })
    .map_err(py_err)
}

#[pymodule]
fn eit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_function(wrap_pyfunction!(disk_mesh, m)?)?;
    m.add_function(wrap_pyfunction!(forward_map, m)?)?;
    m.add_function(wrap_pyfunction!(resistivity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(data_misfit, m)?)?;
    m.add_function(wrap_pyfunction!(sample_field, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
