#![allow(dead_code)]

use eit_core::forward::Conductivity;
use eit_core::mesh::{build_disk_mesh, BoundaryEdge, ElectrodeLayout, Mesh};
use nalgebra::{DMatrix, Matrix3, Vector3};

pub fn paper_layout() -> ElectrodeLayout {
    ElectrodeLayout::uniform(16, 0.5, 0.01).unwrap()
}

pub fn disk(level: u32) -> Mesh {
    build_disk_mesh(level, &paper_layout()).unwrap()
}

/// Dense assembly of the bordered electrode-model system, written without
/// the library's element routines: basis gradients come from inverting the
/// affine map and edge integrals from two-point Gauss quadrature.
pub fn dense_bordered(mesh: &Mesh, sigma: &Conductivity, impedances: &[f64]) -> DMatrix<f64> {
    let n = mesh.nodes.len();
    let l_count = impedances.len();
    let dim = n + l_count + 1;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let p = tri.map(|i| mesh.nodes[i]);
        let m = Matrix3::new(1.0, p[0][0], p[0][1], 1.0, p[1][0], p[1][1], 1.0, p[2][0], p[2][1]);
        let area = 0.5 * m.determinant().abs();
        let inv = m.try_inverse().unwrap();
        // Column i of inv holds the coefficients (c, a_x, a_y) of basis i.
        for i in 0..3 {
            for j in 0..3 {
                let gi = Vector3::new(0.0, inv[(1, i)], inv[(2, i)]);
                let gj = Vector3::new(0.0, inv[(1, j)], inv[(2, j)]);
                a[(tri[i], tri[j])] += sigma.0[t] * area * gi.dot(&gj);
            }
        }
    }
    let gauss = [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()];
    for edge in &mesh.boundary_edges {
        let Some(l) = edge.electrode else { continue };
        let [i, j] = edge.nodes;
        let (p, q) = (mesh.nodes[i], mesh.nodes[j]);
        let len = (q[0] - p[0]).hypot(q[1] - p[1]);
        let e = n + l;
        for s in gauss {
            // Test functions: φ_i = 1 − s, φ_j = s, and the electrode unknown.
            let phi = [(i, 1.0 - s), (j, s), (e, -1.0)];
            for &(r, fr) in &phi {
                for &(c, fc) in &phi {
                    a[(r, c)] += 0.5 * len * fr * fc / impedances[l];
                }
            }
        }
    }
    for l in 0..l_count {
        a[(n + l, n + l_count)] = 1.0;
        a[(n + l_count, n + l)] = 1.0;
    }
    a
}

/// Electrode voltages per pattern from the bordered system.
pub fn dense_voltages(mesh: &Mesh, sigma: &Conductivity, impedances: &[f64], patterns: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = mesh.nodes.len();
    let l_count = impedances.len();
    let a = dense_bordered(mesh, sigma, impedances);
    let rhs: Vec<Vec<f64>> = patterns
        .iter()
        .map(|pattern| {
            let mut b = vec![0.0; a.nrows()];
            b[n..n + l_count].copy_from_slice(pattern);
            b
        })
        .collect();
    gaussian_elimination(&a, &rhs)
        .into_iter()
        .map(|x| x[n..n + l_count].to_vec())
        .collect()
}

/// Gaussian elimination with partial pivoting on the augmented matrix
/// `[A | B]`. Zero multipliers are skipped, so banded systems stay cheap.
pub fn gaussian_elimination(a: &DMatrix<f64>, rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.nrows();
    let width = n + rhs.len();
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| a[(i, j)]).collect();
            row.extend(rhs.iter().map(|b| b[i]));
            row
        })
        .collect();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| rows[i][k].abs().total_cmp(&rows[j][k].abs())).unwrap();
        rows.swap(k, p);
        let (done, rest) = rows.split_at_mut(k + 1);
        let pivot = &done[k];
        for row in rest {
            let l = row[k] / pivot[k];
            if l == 0.0 {
                continue;
            }
            for j in k..width {
                row[j] -= l * pivot[j];
            }
        }
    }
    (0..rhs.len())
        .map(|c| {
            let mut x = vec![0.0; n];
            for i in (0..n).rev() {
                let s: f64 = (i + 1..n).map(|j| rows[i][j] * x[j]).sum();
                x[i] = (rows[i][n + c] - s) / rows[i][i];
            }
            x
        })
        .collect()
}

/// Unit square split along its diagonal, with electrode 0 on the bottom
/// edge and electrode 1 on the top edge.
pub fn two_triangle_mesh() -> (Mesh, ElectrodeLayout) {
    let nodes: Vec<[f64; 2]> = vec![[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]];
    let triangles = vec![[0, 1, 2], [0, 2, 3]];
    let edge = |a: usize, b: usize, electrode: Option<usize>| {
        let (p, q) = (nodes[a], nodes[b]);
        BoundaryEdge {
            nodes: [a, b],
            angle: (0.5 * (p[1] + q[1])).atan2(0.5 * (p[0] + q[0])),
            electrode,
        }
    };
    let boundary_edges = vec![edge(0, 1, Some(0)), edge(1, 2, None), edge(2, 3, Some(1)), edge(3, 0, None)];
    let mesh = Mesh {
        nodes: nodes.clone(),
        triangles,
        boundary_edges,
    };
    mesh.validate().unwrap();
    (mesh, ElectrodeLayout::new(0.5, vec![0.1, 0.1]).unwrap())
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale
}
