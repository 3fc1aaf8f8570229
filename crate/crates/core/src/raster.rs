//! Binary PPM (P6) heatmaps of per-triangle values.
//!
//! Colours run linearly from blue `(0, 0, 255)` at the low end of the range
//! to yellow `(255, 255, 0)` at the high end; pixels outside the mesh are
//! white.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

pub const BACKGROUND: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Blue-to-yellow ramp; values are clamped to `[lo, hi]`.
pub fn ramp(value: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((value - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let c = (255.0 * t).round() as u8;
    [c, c, 255 - c]
}

/// Renders per-triangle values on `[-1, 1]²` at `size × size` pixels.
/// Pixel centres on a shared edge take the lower-indexed triangle.
pub fn render(mesh: &Mesh, values: &[f64], size: usize, range: (f64, f64)) -> Result<Image> {
    if values.len() != mesh.triangle_count() {
        return Err(Error::config("raster values do not match the mesh"));
    }
    if size == 0 {
        return Err(Error::config("raster size must be positive"));
    }
    let mut owner = vec![usize::MAX; size * size];
    let to_pixel = |c: f64| (c + 1.0) * size as f64 / 2.0 - 0.5;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let p = tri.map(|i| mesh.nodes[i]);
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let xs = p.map(|q| to_pixel(q[0]));
        let ys = p.map(|q| to_pixel(-q[1]));
        let lo = |v: [f64; 3]| v.iter().copied().fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let hi = |v: [f64; 3]| (v.iter().copied().fold(f64::NEG_INFINITY, f64::max).floor().max(-1.0) + 1.0) as usize;
        for py in lo(ys)..hi(ys).min(size) {
            for px in lo(xs)..hi(xs).min(size) {
                let slot = &mut owner[py * size + px];
                if *slot != usize::MAX {
                    continue;
                }
                let x = -1.0 + (2 * px + 1) as f64 / size as f64;
                let y = 1.0 - (2 * py + 1) as f64 / size as f64;
                let l1 = ((p[1][0] - x) * (p[2][1] - y) - (p[2][0] - x) * (p[1][1] - y)) / det;
                let l2 = ((p[2][0] - x) * (p[0][1] - y) - (p[0][0] - x) * (p[2][1] - y)) / det;
                let l3 = 1.0 - l1 - l2;
                let eps = -1e-12;
                if l1 >= eps && l2 >= eps && l3 >= eps {
                    *slot = t;
                }
            }
        }
    }
    let mut rgb = Vec::with_capacity(3 * size * size);
    for t in owner {
        rgb.extend_from_slice(&if t == usize::MAX {
            BACKGROUND
        } else {
            ramp(values[t], range.0, range.1)
        });
    }
    Ok(Image {
        width: size,
        height: size,
        rgb,
    })
}

/// Range of the values, widened to a unit interval when they are constant.
pub fn value_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}
