//! Triangulations of the unit disk with labelled electrode arcs.
//!
//! Meshes are built ring by ring: ring `k` of `n` sits at radius `k / n`
//! and carries `6k` equally spaced nodes, so the element count grows like
//! `6 n²`. The outermost ring additionally receives a node at every
//! electrode endpoint, which makes the electrode coverage exact up to the
//! polygonal approximation of the circle. Consecutive rings are stitched
//! together by a merge of their angular orderings.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

/// Ring count at refinement level 0; every level doubles it.
pub const RINGS_AT_LEVEL_ZERO: usize = 8;
const SECTORS: usize = 6;

/// Electrode count, coverage fraction and contact impedances.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeLayout {
    pub coverage: f64,
    pub contact_impedances: Vec<f64>,
}

impl ElectrodeLayout {
    pub fn new(coverage: f64, contact_impedances: Vec<f64>) -> Result<Self> {
        let layout = Self {
            coverage,
            contact_impedances,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// `count` electrodes sharing the same contact impedance.
    pub fn uniform(count: usize, coverage: f64, contact_impedance: f64) -> Result<Self> {
        Self::new(coverage, vec![contact_impedance; count])
    }

    pub fn count(&self) -> usize {
        self.contact_impedances.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() < 2 {
            return Err(Error::config(format!(
                "at least 2 electrodes required, got {}",
                self.count()
            )));
        }
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::config(format!(
                "electrode coverage must lie in (0, 1), got {}",
                self.coverage
            )));
        }
        if let Some((l, z)) = self
            .contact_impedances
            .iter()
            .enumerate()
            .find(|(_, z)| !(z.is_finite() && **z > 0.0))
        {
            return Err(Error::config(format!(
                "contact impedance of electrode {l} must be positive and finite, got {z}"
            )));
        }
        Ok(())
    }

    /// Angle of the centre of electrode `l`.
    pub fn center_angle(&self, l: usize) -> f64 {
        TAU * l as f64 / self.count() as f64
    }

    /// Half of the angular width of each electrode.
    pub fn half_width(&self) -> f64 {
        PI * self.coverage / self.count() as f64
    }

    /// Electrode whose arc contains `angle`, if any.
    pub fn electrode_at(&self, angle: f64) -> Option<usize> {
        let count = self.count();
        let step = TAU / count as f64;
        let l = (angle.rem_euclid(TAU) / step).round() as usize % count;
        let dist = angular_distance(angle, self.center_angle(l));
        (dist < self.half_width()).then_some(l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    /// Endpoints, ordered counterclockwise along the boundary.
    pub nodes: [usize; 2],
    /// Angle of the arc midpoint in `(-π, π]`.
    pub angle: f64,
    pub electrode: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    /// Counterclockwise node triples.
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
}

impl Mesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Number of electrodes referenced by boundary edges.
    pub fn electrode_count(&self) -> usize {
        self.boundary_edges
            .iter()
            .filter_map(|e| e.electrode)
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn area(&self, t: usize) -> f64 {
        self.signed_area(t).abs()
    }

    pub fn areas(&self) -> Vec<f64> {
        (0..self.triangle_count()).map(|t| self.area(t)).collect()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangle_count()).map(|t| self.area(t)).sum()
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn centroids(&self) -> Vec<[f64; 2]> {
        (0..self.triangle_count()).map(|t| self.centroid(t)).collect()
    }

    pub fn edge_length(&self, edge: &BoundaryEdge) -> f64 {
        let [p, q] = edge.nodes.map(|i| self.nodes[i]);
        (q[0] - p[0]).hypot(q[1] - p[1])
    }

    /// Longest interior or boundary edge of any triangle.
    pub fn max_edge_length(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|tri| {
                (0..3).map(move |k| {
                    let p = self.nodes[tri[k]];
                    let q = self.nodes[tri[(k + 1) % 3]];
                    (q[0] - p[0]).hypot(q[1] - p[1])
                })
            })
            .fold(0.0, f64::max)
    }

    /// Summed chord length of the edges of electrode `l`.
    pub fn electrode_length(&self, l: usize) -> f64 {
        self.boundary_edges
            .iter()
            .filter(|e| e.electrode == Some(l))
            .map(|e| self.edge_length(e))
            .sum()
    }

    /// Checks index ranges, orientation and the boundary loop.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::Geometry(format!(
                    "triangle {t} references missing node {bad}"
                )));
            }
            if self.signed_area(t) <= 0.0 {
                return Err(Error::Geometry(format!(
                    "triangle {t} has non-positive signed area"
                )));
            }
        }
        for (k, edge) in self.boundary_edges.iter().enumerate() {
            if let Some(&bad) = edge.nodes.iter().find(|&&i| i >= n) {
                return Err(Error::Geometry(format!(
                    "boundary edge {k} references missing node {bad}"
                )));
            }
        }
        let m = self.boundary_edges.len();
        if m > 0 {
            for k in 0..m {
                let next = &self.boundary_edges[(k + 1) % m];
                if self.boundary_edges[k].nodes[1] != next.nodes[0] {
                    return Err(Error::Geometry(format!(
                        "boundary edges {k} and {} are not connected",
                        (k + 1) % m
                    )));
                }
            }
        }
        Ok(())
    }
}

fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Angle of the arc midpoint of a boundary chord.
fn arc_midpoint_angle(p: [f64; 2], q: [f64; 2]) -> f64 {
    (0.5 * (p[1] + q[1])).atan2(0.5 * (p[0] + q[0]))
}

/// Builds the disk mesh with `RINGS_AT_LEVEL_ZERO · 2^level` rings.
pub fn build_disk_mesh(refinement_level: u32, layout: &ElectrodeLayout) -> Result<Mesh> {
    if refinement_level > 8 {
        return Err(Error::config(format!(
            "refinement level {refinement_level} is too large"
        )));
    }
    build_disk_mesh_with_rings(RINGS_AT_LEVEL_ZERO << refinement_level, layout)
}

/// Builds the disk mesh with an explicit ring count (about `6 rings²` triangles).
pub fn build_disk_mesh_with_rings(rings: usize, layout: &ElectrodeLayout) -> Result<Mesh> {
    layout.validate()?;
    if rings == 0 {
        return Err(Error::config("ring count must be positive"));
    }

    let mut nodes = vec![[0.0, 0.0]];
    // (node index, angle in [0, 2π)) per ring, sorted by angle.
    let mut previous: Vec<(usize, f64)> = vec![(0, 0.0)];
    let mut triangles = Vec::with_capacity(SECTORS * rings * rings + 4 * layout.count());

    for k in 1..=rings {
        let radius = k as f64 / rings as f64;
        let angles = if k == rings {
            boundary_angles(SECTORS * k, layout)
        } else {
            (0..SECTORS * k)
                .map(|j| TAU * j as f64 / (SECTORS * k) as f64)
                .collect()
        };
        let ring: Vec<(usize, f64)> = angles
            .into_iter()
            .map(|theta| {
                let idx = nodes.len();
                nodes.push([radius * theta.cos(), radius * theta.sin()]);
                (idx, theta)
            })
            .collect();
        if k == 1 {
            for j in 0..ring.len() {
                let next = ring[(j + 1) % ring.len()].0;
                triangles.push([0, ring[j].0, next]);
            }
        } else {
            stitch_rings(&previous, &ring, &mut triangles);
        }
        previous = ring;
    }

    for tri in &mut triangles {
        let [a, b, c] = tri.map(|i| nodes[i]);
        let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if area2 < 0.0 {
            tri.swap(1, 2);
        }
    }

    let boundary_edges = (0..previous.len())
        .map(|j| {
            let a = previous[j].0;
            let b = previous[(j + 1) % previous.len()].0;
            let angle = arc_midpoint_angle(nodes[a], nodes[b]);
            BoundaryEdge {
                nodes: [a, b],
                angle,
                electrode: layout.electrode_at(angle),
            }
        })
        .collect();

    let mesh = Mesh {
        nodes,
        triangles,
        boundary_edges,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Uniform boundary angles merged with every electrode endpoint. Uniform
/// nodes closer than a quarter spacing to an endpoint are moved onto it.
fn boundary_angles(uniform: usize, layout: &ElectrodeLayout) -> Vec<f64> {
    let spacing = TAU / uniform as f64;
    let mut angles: Vec<f64> = (0..uniform).map(|j| spacing * j as f64).collect();
    let mut extra = Vec::new();
    for l in 0..layout.count() {
        for sign in [-1.0, 1.0] {
            let endpoint = (layout.center_angle(l) + sign * layout.half_width()).rem_euclid(TAU);
            let nearest = (endpoint / spacing).round() as usize % uniform;
            if angular_distance(angles[nearest], endpoint) < 0.25 * spacing
                && angular_distance(nearest as f64 * spacing, endpoint) < 0.25 * spacing
            {
                angles[nearest] = endpoint;
            } else {
                extra.push(endpoint);
            }
        }
    }
    angles.extend(extra);
    angles.sort_by(|a, b| a.total_cmp(b));
    angles.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    angles
}

/// Triangulates the annulus between two rings by merging their angular
/// orders. Both rings are sorted by angle in `[0, 2π)`.
fn stitch_rings(inner: &[(usize, f64)], outer: &[(usize, f64)], out: &mut Vec<[usize; 3]>) {
    let (p, q) = (inner.len(), outer.len());
    let unwrap = |ring: &[(usize, f64)], i: usize| {
        let n = ring.len();
        ring[i % n].1 + TAU * (i / n) as f64
    };
    let (mut i, mut j) = (0, 0);
    while i < p || j < q {
        let advance_inner = if i == p {
            false
        } else if j == q {
            true
        } else {
            unwrap(inner, i + 1) < unwrap(outer, j + 1)
        };
        if advance_inner {
            out.push([inner[i % p].0, outer[j % q].0, inner[(i + 1) % p].0]);
            i += 1;
        } else {
            out.push([inner[i % p].0, outer[j % q].0, outer[(j + 1) % q].0]);
            j += 1;
        }
    }
}

const HEADER: &str = "eitmesh v1";

/// Serialises a mesh in the `eitmesh v1` text format.
pub fn write_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, mesh_to_string(mesh)).map_err(|e| Error::io(path, e))
}

pub fn mesh_to_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    s.push_str(HEADER);
    s.push('\n');
    let _ = writeln!(s, "nodes {}", mesh.nodes.len());
    for (i, [x, y]) in mesh.nodes.iter().enumerate() {
        let _ = writeln!(s, "{i} {x:.17e} {y:.17e}");
    }
    let _ = writeln!(s, "triangles {}", mesh.triangles.len());
    for (i, [a, b, c]) in mesh.triangles.iter().enumerate() {
        let _ = writeln!(s, "{i} {a} {b} {c}");
    }
    let _ = writeln!(s, "boundary {}", mesh.boundary_edges.len());
    for (i, e) in mesh.boundary_edges.iter().enumerate() {
        let id = e.electrode.map_or(-1, |l| l as i64);
        let _ = writeln!(s, "{i} {} {} {id}", e.nodes[0], e.nodes[1]);
    }
    s
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text)
}

/// Parses the `eitmesh v1` format. Clockwise triangles are reoriented
/// with a warning.
pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let perr = |line: usize, section: &str, message: String| Error::Parse {
        line,
        section: section.to_string(),
        message,
    };

    match lines.next() {
        Some((_, HEADER)) => {}
        Some((n, other)) => {
            return Err(perr(n, "header", format!("expected '{HEADER}', found '{other}'")))
        }
        None => return Err(perr(1, "header", "empty file".into())),
    }

    let mut section_rows = |name: &str, width: usize| -> Result<Vec<(usize, Vec<&str>)>> {
        let (n, head) = lines
            .next()
            .ok_or_else(|| perr(0, name, "unexpected end of file".into()))?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some(name) {
            return Err(perr(n, name, format!("expected section '{name}', found '{head}'")));
        }
        let count: usize = parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| perr(n, name, "missing or invalid row count".into()))?;
        let mut rows = Vec::with_capacity(count);
        for expected in 0..count {
            let (n, row) = lines
                .next()
                .ok_or_else(|| perr(0, name, format!("expected {count} rows, file ended")))?;
            let fields: Vec<&str> = row.split_whitespace().collect();
            if fields.len() != width {
                return Err(perr(n, name, format!("expected {width} fields, found {}", fields.len())));
            }
            if fields[0].parse::<usize>().ok() != Some(expected) {
                return Err(perr(n, name, format!("expected row index {expected}")));
            }
            rows.push((n, fields[1..].to_vec()));
        }
        Ok(rows)
    };

    let node_rows = section_rows("nodes", 3)?;
    let tri_rows = section_rows("triangles", 4)?;
    let edge_rows = section_rows("boundary", 4)?;

    let mut nodes = Vec::with_capacity(node_rows.len());
    for (n, f) in &node_rows {
        let x: f64 = f[0].parse().map_err(|_| perr(*n, "nodes", format!("bad float '{}'", f[0])))?;
        let y: f64 = f[1].parse().map_err(|_| perr(*n, "nodes", format!("bad float '{}'", f[1])))?;
        nodes.push([x, y]);
    }
    let node_index = |n: usize, section: &str, s: &str| -> Result<usize> {
        let i: usize = s
            .parse()
            .map_err(|_| perr(n, section, format!("bad node index '{s}'")))?;
        if i >= nodes.len() {
            return Err(perr(n, section, format!("node {i} does not exist")));
        }
        Ok(i)
    };

    let mut triangles = Vec::with_capacity(tri_rows.len());
    for (n, f) in &tri_rows {
        let mut tri = [0usize; 3];
        for k in 0..3 {
            tri[k] = node_index(*n, "triangles", f[k])?;
        }
        triangles.push(tri);
    }

    let mut boundary_edges = Vec::with_capacity(edge_rows.len());
    for (n, f) in &edge_rows {
        let a = node_index(*n, "boundary", f[0])?;
        let b = node_index(*n, "boundary", f[1])?;
        let id: i64 = f[2]
            .parse()
            .map_err(|_| perr(*n, "boundary", format!("bad electrode id '{}'", f[2])))?;
        let electrode = match id {
            -1 => None,
            id if id >= 0 => Some(id as usize),
            _ => return Err(perr(*n, "boundary", format!("bad electrode id {id}"))),
        };
        boundary_edges.push(BoundaryEdge {
            nodes: [a, b],
            angle: arc_midpoint_angle(nodes[a], nodes[b]),
            electrode,
        });
    }

    let mut mesh = Mesh {
        nodes,
        triangles,
        boundary_edges,
    };
    let mut flipped = 0;
    for t in 0..mesh.triangles.len() {
        let area = mesh.signed_area(t);
        if area < 0.0 {
            mesh.triangles[t].swap(1, 2);
            flipped += 1;
        } else if area == 0.0 {
            return Err(perr(tri_rows[t].0, "triangles", format!("triangle {t} is degenerate")));
        }
    }
    if flipped > 0 {
        warn!("reoriented {flipped} clockwise triangle(s) to counterclockwise");
    }
    mesh.validate()?;
    Ok(mesh)
}
