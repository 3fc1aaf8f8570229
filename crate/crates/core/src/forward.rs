//! Complete electrode model: P1 assembly, grounded solves, resistivity
//! matrices and the stacked forward map over stimulation patterns.
//!
//! Unknowns are ordered as the nodal potentials followed by the `L`
//! electrode voltages. The bilinear form is
//!
//! ```text
//! B((v,V),(w,W)) = ∫ σ ∇v·∇w + Σ_l (1/z_l) ∫_{e_l} (v − V_l)(w − W_l)
//! ```
//!
//! and its kernel is the constant mode. The grounding `Σ V_l = 0` is a
//! single Lagrange constraint `gᵀx = 0`. For a zero-sum current the
//! multiplier vanishes, so the bordered saddle-point system has the same
//! solution as the positive definite system `(A + g gᵀ) x = r`, which is
//! what gets factorized.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{ElectrodeLayout, Mesh};
use crate::sparse::{CholeskyFactor, SymbolicCholesky, SymmetricCsr};

/// Relative residual accepted from the direct solver.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Piecewise-constant conductivity, one value per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Conductivity(pub Vec<f64>);

impl Conductivity {
    pub fn constant(value: f64, triangles: usize) -> Self {
        Self(vec![value; triangles])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|s| s * c).collect())
    }

    /// Every value finite and strictly positive.
    pub fn check_admissible(&self) -> Result<()> {
        match self.0.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            Some(t) => Err(Error::Admissibility {
                triangle: t,
                value: self.0[t],
            }),
            None => Ok(()),
        }
    }
}

/// Columns are current patterns over the electrodes.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulationMatrix {
    electrodes: usize,
    columns: Vec<Vec<f64>>,
}

impl StimulationMatrix {
    pub fn new(electrodes: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::config("stimulation matrix has no patterns"));
        }
        if columns.len() > electrodes.saturating_sub(1) {
            return Err(Error::config(format!(
                "{} patterns exceed the L - 1 = {} independent zero-sum patterns",
                columns.len(),
                electrodes.saturating_sub(1)
            )));
        }
        for col in &columns {
            if col.len() != electrodes {
                return Err(Error::config(format!(
                    "pattern length {} does not match {electrodes} electrodes",
                    col.len()
                )));
            }
            check_zero_sum(col)?;
        }
        if matrix_rank(&columns) < columns.len() {
            return Err(Error::config("stimulation patterns are linearly dependent"));
        }
        Ok(Self {
            electrodes,
            columns,
        })
    }

    pub fn electrodes(&self) -> usize {
        self.electrodes
    }

    pub fn pattern_count(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn entry(&self, electrode: usize, pattern: usize) -> f64 {
        self.columns[pattern][electrode]
    }

    pub fn rank(&self) -> usize {
        matrix_rank(&self.columns)
    }
}

/// Current `+amplitude` into electrode `j`, out of electrode `j + 1`, for
/// `j = 0..L-1`.
pub fn adjacent_stimulation_patterns(electrodes: usize, amplitude: f64) -> Result<StimulationMatrix> {
    if electrodes < 2 {
        return Err(Error::config("at least 2 electrodes required"));
    }
    let columns = (0..electrodes - 1)
        .map(|j| {
            let mut col = vec![0.0; electrodes];
            col[j] = amplitude;
            col[j + 1] = -amplitude;
            col
        })
        .collect();
    StimulationMatrix::new(electrodes, columns)
}

fn check_zero_sum(pattern: &[f64]) -> Result<()> {
    let sum: f64 = pattern.iter().sum();
    let scale: f64 = pattern.iter().map(|v| v.abs()).sum();
    if sum.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) && sum != 0.0 {
        return Err(Error::ChargeConservation { sum });
    }
    Ok(())
}

/// Rank by Gaussian elimination with partial pivoting.
fn matrix_rank(columns: &[Vec<f64>]) -> usize {
    let mut rows: Vec<Vec<f64>> = columns.to_vec();
    let width = rows.first().map_or(0, Vec::len);
    let scale = rows
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut rank = 0;
    for c in 0..width {
        let Some(pivot) = (rank..rows.len())
            .max_by(|&a, &b| rows[a][c].abs().total_cmp(&rows[b][c].abs()))
            .filter(|&p| rows[p][c].abs() > 1e-12 * scale)
        else {
            continue;
        };
        rows.swap(rank, pivot);
        for r in rank + 1..rows.len() {
            let f = rows[r][c] / rows[rank][c];
            for k in c..width {
                rows[r][k] -= f * rows[rank][k];
            }
        }
        rank += 1;
        if rank == rows.len() {
            break;
        }
    }
    rank
}

/// Potential coefficients and electrode voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSolution {
    pub potential: Vec<f64>,
    pub electrode_voltages: Vec<f64>,
}

/// Assembled (ungrounded) system and the grounding row.
#[derive(Debug, Clone)]
pub struct CemSystem {
    pub matrix: SymmetricCsr,
    /// Coefficients of the constraint `Σ V_l = 0` over all unknowns.
    pub grounding: Vec<f64>,
    pub nodes: usize,
    pub electrodes: usize,
}

impl CemSystem {
    pub fn dim(&self) -> usize {
        self.nodes + self.electrodes
    }

    /// Dense bordered matrix `[[A, g], [gᵀ, 0]]`.
    pub fn bordered_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut dense = vec![vec![0.0; n + 1]; n + 1];
        for i in 0..n {
            for k in self.matrix.row_ptr[i]..self.matrix.row_ptr[i + 1] {
                dense[i][self.matrix.col_idx[k]] = self.matrix.values[k];
            }
            dense[i][n] = self.grounding[i];
            dense[n][i] = self.grounding[i];
        }
        dense
    }
}

/// σ-independent geometry of the electrode model on one mesh, with the
/// symbolic factorization of its sparsity pattern.
#[derive(Debug, Clone)]
pub struct ForwardSolver {
    nodes: usize,
    electrodes: usize,
    triangles: usize,
    /// Unit-conductivity stiffness per triangle, row-major 3×3.
    local_stiffness: Vec<[f64; 9]>,
    /// Slots of the 3×3 local entries in the CSR storage.
    slots: Vec<[usize; 9]>,
    /// Electrode boundary terms, σ-independent.
    boundary_values: Vec<f64>,
    /// Slots of the `L × L` grounding block, row-major.
    grounding_slots: Vec<usize>,
    template: SymmetricCsr,
    symbolic: SymbolicCholesky,
}

/// Exact integrals of P1 basis products on an electrode edge of length
/// `len` with impedance `z`: `(vv-block diagonal, vv off-diagonal, vV
/// coupling per node, VV)`.
pub fn electrode_edge_terms(len: f64, z: f64) -> (f64, f64, f64, f64) {
    (len / (3.0 * z), len / (6.0 * z), -len / (2.0 * z), len / z)
}

/// Gradient stiffness of a P1 triangle for unit conductivity.
pub fn p1_stiffness(p: [[f64; 2]; 3]) -> [f64; 9] {
    let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let area = 0.5 * area2;
    // ∇φ_i = (y_j − y_k, x_k − x_j) / 2A for the cyclic triple (i, j, k).
    let grads: [[f64; 2]; 3] = std::array::from_fn(|i| {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        [(p[j][1] - p[k][1]) / area2, (p[k][0] - p[j][0]) / area2]
    });
    let mut out = [0.0; 9];
    for a in 0..3 {
        for b in 0..3 {
            out[3 * a + b] = area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
        }
    }
    out
}

impl ForwardSolver {
    pub fn new(mesh: &Mesh, layout: &ElectrodeLayout) -> Result<Self> {
        layout.validate()?;
        let electrodes = layout.count();
        if mesh.electrode_count() != electrodes {
            return Err(Error::config(format!(
                "mesh has {} electrodes, layout has {electrodes}",
                mesh.electrode_count()
            )));
        }
        let nodes = mesh.node_count();
        let dim = nodes + electrodes;

        let mut rows: Vec<BTreeSet<usize>> = (0..dim).map(|i| BTreeSet::from([i])).collect();
        for tri in &mesh.triangles {
            for &a in tri {
                for &b in tri {
                    rows[a].insert(b);
                }
            }
        }
        for edge in &mesh.boundary_edges {
            if let Some(l) = edge.electrode {
                let [a, b] = edge.nodes;
                let el = nodes + l;
                for (i, j) in [(a, b), (a, el), (b, el)] {
                    rows[i].insert(j);
                    rows[j].insert(i);
                }
            }
        }
        for l in 0..electrodes {
            for m in 0..electrodes {
                rows[nodes + l].insert(nodes + m);
            }
        }
        let template = SymmetricCsr::from_pattern(dim, &rows);

        let slot = |i: usize, j: usize| template.slot(i, j).expect("entry in pattern");
        let slots = mesh
            .triangles
            .iter()
            .map(|tri| std::array::from_fn(|k| slot(tri[k / 3], tri[k % 3])))
            .collect();
        let local_stiffness = mesh
            .triangles
            .iter()
            .map(|tri| p1_stiffness(tri.map(|i| mesh.nodes[i])))
            .collect();

        let mut boundary_values = vec![0.0; template.values.len()];
        for edge in &mesh.boundary_edges {
            let Some(l) = edge.electrode else { continue };
            let (diag, off, coupling, vv) =
                electrode_edge_terms(mesh.edge_length(edge), layout.contact_impedances[l]);
            let [a, b] = edge.nodes;
            let el = nodes + l;
            boundary_values[slot(a, a)] += diag;
            boundary_values[slot(b, b)] += diag;
            boundary_values[slot(a, b)] += off;
            boundary_values[slot(b, a)] += off;
            for i in [a, b] {
                boundary_values[slot(i, el)] += coupling;
                boundary_values[slot(el, i)] += coupling;
            }
            boundary_values[slot(el, el)] += vv;
        }
        let grounding_slots = (0..electrodes * electrodes)
            .map(|k| slot(nodes + k / electrodes, nodes + k % electrodes))
            .collect();

        let symbolic = SymbolicCholesky::analyze(&template);
        Ok(Self {
            nodes,
            electrodes,
            triangles: mesh.triangle_count(),
            local_stiffness,
            slots,
            boundary_values,
            grounding_slots,
            template,
            symbolic,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn electrode_count(&self) -> usize {
        self.electrodes
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles
    }

    /// Stored entries of the Cholesky factor.
    pub fn factor_nnz(&self) -> usize {
        self.symbolic.factor_nnz()
    }

    /// Assembles `A(σ)` and the grounding row.
    pub fn assemble(&self, sigma: &Conductivity) -> Result<CemSystem> {
        if sigma.len() != self.triangles {
            return Err(Error::config(format!(
                "conductivity has {} values, mesh has {} triangles",
                sigma.len(),
                self.triangles
            )));
        }
        sigma.check_admissible()?;
        let mut matrix = self.template.clone();
        matrix.values.copy_from_slice(&self.boundary_values);
        for ((s, local), slots) in sigma.0.iter().zip(&self.local_stiffness).zip(&self.slots) {
            for k in 0..9 {
                matrix.values[slots[k]] += s * local[k];
            }
        }
        let mut grounding = vec![0.0; self.nodes + self.electrodes];
        grounding[self.nodes..].fill(1.0);
        Ok(CemSystem {
            matrix,
            grounding,
            nodes: self.nodes,
            electrodes: self.electrodes,
        })
    }

    /// Assembles and factorizes the grounded system for `σ`.
    pub fn factorize(&self, sigma: &Conductivity) -> Result<GroundedSystem> {
        let system = self.assemble(sigma)?;
        let mut grounded = system.matrix.clone();
        for &s in &self.grounding_slots {
            grounded.values[s] += 1.0;
        }
        let factor = self.symbolic.factor(&grounded).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot } => Error::Numerical {
                message: format!("factorization broke down at pivot {pivot}"),
                residual: f64::NAN,
            },
            other => other,
        })?;
        Ok(GroundedSystem { system, factor })
    }

    pub fn solve(&self, sigma: &Conductivity, pattern: &[f64]) -> Result<ForwardSolution> {
        self.factorize(sigma)?.solve(pattern)
    }

    pub fn resistivity_matrix(&self, sigma: &Conductivity) -> Result<ResistivityMatrix> {
        self.factorize(sigma)?.resistivity_matrix()
    }

    pub fn forward_map(&self, sigma: &Conductivity, stim: &StimulationMatrix) -> Result<Vec<f64>> {
        self.factorize(sigma)?.forward_map(stim)
    }
}

/// A factorized system for one conductivity; solves against it are
/// read-only and may run concurrently.
#[derive(Debug, Clone)]
pub struct GroundedSystem {
    system: CemSystem,
    factor: CholeskyFactor,
}

impl GroundedSystem {
    pub fn system(&self) -> &CemSystem {
        &self.system
    }

    pub fn solve(&self, pattern: &[f64]) -> Result<ForwardSolution> {
        let (nodes, electrodes) = (self.system.nodes, self.system.electrodes);
        if pattern.len() != electrodes {
            return Err(Error::config(format!(
                "pattern has {} entries, expected {electrodes}",
                pattern.len()
            )));
        }
        check_zero_sum(pattern)?;
        let mut rhs = vec![0.0; nodes + electrodes];
        rhs[nodes..].copy_from_slice(pattern);
        let rhs_norm = norm(&rhs);
        if rhs_norm == 0.0 {
            return Ok(ForwardSolution {
                potential: vec![0.0; nodes],
                electrode_voltages: vec![0.0; electrodes],
            });
        }
        let x = self.factor.solve(&rhs);

        // Residual of the ungrounded equations plus the constraint.
        let ax = self.system.matrix.matvec(&x);
        let constraint: f64 = x[nodes..].iter().sum();
        let res2: f64 = ax.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            + constraint * constraint;
        let residual = res2.sqrt() / rhs_norm;
        if !(residual <= RESIDUAL_TOLERANCE) {
            return Err(Error::Numerical {
                message: "direct solve did not meet the residual tolerance".into(),
                residual,
            });
        }
        let electrode_voltages = x[nodes..].to_vec();
        let mut potential = x;
        potential.truncate(nodes);
        Ok(ForwardSolution {
            potential,
            electrode_voltages,
        })
    }

    /// Columns are the voltages for the zero-sum basis `e_l − 𝟙/L`.
    pub fn resistivity_matrix(&self) -> Result<ResistivityMatrix> {
        let l_count = self.system.electrodes;
        let columns = (0..l_count)
            .into_par_iter()
            .map(|l| {
                let pattern: Vec<f64> = (0..l_count)
                    .map(|m| if m == l { 1.0 } else { 0.0 } - 1.0 / l_count as f64)
                    .collect();
                self.solve(&pattern).map(|s| s.electrode_voltages)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut r = vec![vec![0.0; l_count]; l_count];
        for (l, col) in columns.iter().enumerate() {
            for (m, v) in col.iter().enumerate() {
                r[m][l] = *v;
            }
        }
        Ok(ResistivityMatrix(r))
    }

    /// Pattern-major concatenation `(V⁽¹⁾, …, V⁽ᴶ⁾)`.
    pub fn forward_map(&self, stim: &StimulationMatrix) -> Result<Vec<f64>> {
        if stim.electrodes() != self.system.electrodes {
            return Err(Error::config("stimulation matrix does not match electrode count"));
        }
        let mut out = Vec::with_capacity(stim.electrodes() * stim.pattern_count());
        for col in stim.columns() {
            out.extend(self.solve(col)?.electrode_voltages);
        }
        Ok(out)
    }
}

/// `V = R I` for zero-sum `I`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResistivityMatrix(pub Vec<Vec<f64>>);

impl ResistivityMatrix {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn apply(&self, pattern: &[f64]) -> Vec<f64> {
        self.0
            .iter()
            .map(|row| row.iter().zip(pattern).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖R − Rᵀ‖_F / ‖R‖_F`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += (self.0[i][j] - self.0[j][i]).powi(2);
            }
        }
        acc.sqrt() / self.frobenius_norm()
    }
}

pub fn solve_forward(
    mesh: &Mesh,
    sigma: &Conductivity,
    layout: &ElectrodeLayout,
    pattern: &[f64],
) -> Result<ForwardSolution> {
    ForwardSolver::new(mesh, layout)?.solve(sigma, pattern)
}

pub fn resistivity_matrix(
    mesh: &Mesh,
    sigma: &Conductivity,
    layout: &ElectrodeLayout,
) -> Result<ResistivityMatrix> {
    ForwardSolver::new(mesh, layout)?.resistivity_matrix(sigma)
}

pub fn forward_map(
    mesh: &Mesh,
    sigma: &Conductivity,
    layout: &ElectrodeLayout,
    stim: &StimulationMatrix,
) -> Result<Vec<f64>> {
    ForwardSolver::new(mesh, layout)?.forward_map(sigma, stim)
}

/// Energy norm `sqrt(B(x, x))` of a solution under `σ`.
pub fn energy_norm(system: &CemSystem, solution: &ForwardSolution) -> f64 {
    let x: Vec<f64> = solution
        .potential
        .iter()
        .chain(&solution.electrode_voltages)
        .copied()
        .collect();
    let ax = system.matrix.matvec(&x);
    x.iter().zip(&ax).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
