//! Triangle meshes: watertightness validation, orientation, STL export.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An indexed triangle mesh in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    /// Checks that every undirected edge is shared by exactly two triangles
    /// with opposite orientations. On failure the error lists the first
    /// offending (boundary or inconsistent) edges.
    pub fn validate_watertight(&self) -> Result<()> {
        // Per undirected edge: total multiplicity and signed orientation sum.
        // Watertight and consistently wound means count == 2 and signed == 0.
        let mut edges: HashMap<(u32, u32), (u32, i64)> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let a = t[k];
                let b = t[(k + 1) % 3];
                let e = edges.entry((a.min(b), a.max(b))).or_insert((0, 0));
                e.0 += 1;
                e.1 += if a < b { 1 } else { -1 };
            }
        }
        let mut bad: Vec<String> = Vec::new();
        for (&edge, &(count, signed)) in &edges {
            if count != 2 || signed != 0 {
                bad.push(format!("({}, {})x{}", edge.0, edge.1, count));
                if bad.len() >= 8 {
                    break;
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "mesh is not watertight; offending edges: {}",
                bad.join(", ")
            )))
        }
    }

    /// Signed volume via the divergence theorem; positive for
    /// outward-consistent winding.
    pub fn signed_volume(&self) -> f64 {
        let mut vol = 0.0;
        for t in &self.triangles {
            let a = self.vertices[t[0] as usize];
            let b = self.vertices[t[1] as usize];
            let c = self.vertices[t[2] as usize];
            vol += dot(a, cross(b, c));
        }
        vol / 6.0
    }

    /// Flips every triangle if the signed volume is negative.
    pub fn orient_outward(&mut self) {
        if self.signed_volume() < 0.0 {
            for t in &mut self.triangles {
                t.swap(1, 2);
            }
        }
    }

    pub fn triangle_vertices(&self, i: usize) -> [[f64; 3]; 3] {
        let t = self.triangles[i];
        [
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        ]
    }

    /// Binary STL: 80-byte header, little-endian u32 triangle count, then
    /// one 50-byte record per triangle.
    pub fn write_stl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = [0u8; 80];
        let tag = b"binary stl; units: domain lengths";
        header[..tag.len()].copy_from_slice(tag);
        out.write_all(&header)?;
        out.write_all(&(self.triangles.len() as u32).to_le_bytes())?;
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.triangle_vertices(i);
            let n = normalize(cross(sub3(b, a), sub3(c, a)));
            for v in [n, a, b, c] {
                for x in v {
                    out.write_all(&(x as f32).to_le_bytes())?;
                }
            }
            out.write_all(&0u16.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    if n == 0.0 {
        [0.0; 3]
    } else {
        [a[0] / n, a[1] / n, a[2] / n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetrahedron() -> TriMesh {
        TriMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            triangles: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        }
    }

    #[test]
    fn tetrahedron_is_watertight() {
        let m = tetrahedron();
        m.validate_watertight().unwrap();
        assert!((m.signed_volume() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn missing_face_reports_boundary_edges() {
        let mut m = tetrahedron();
        m.triangles.pop();
        let err = m.validate_watertight().unwrap_err();
        assert!(err.to_string().contains("not watertight"));
    }

    #[test]
    fn orient_outward_fixes_flipped_mesh() {
        let mut m = tetrahedron();
        for t in &mut m.triangles {
            t.swap(0, 1);
        }
        assert!(m.signed_volume() < 0.0);
        m.orient_outward();
        assert!(m.signed_volume() > 0.0);
        m.validate_watertight().unwrap();
    }

    #[test]
    fn stl_record_layout() {
        let m = tetrahedron();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tet.stl");
        m.write_stl(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 80 + 4 + 50 * m.triangles.len());
        let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap());
        assert_eq!(count as usize, m.triangles.len());
    }
}
