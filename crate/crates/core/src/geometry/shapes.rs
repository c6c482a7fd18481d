//! Parametric triangulation and exact signed distances for the shape classes.

use crate::error::{Error, Result};

use super::mesh::TriMesh;
use super::{ShapeClass, ShapeSpec};

/// Triangulates the analytic surface in the body frame, then rotates and
/// translates into world coordinates. All vertices lie exactly on the
/// analytic surface; `subdivisions` controls the chordal resolution.
pub fn triangulate(spec: &ShapeSpec, subdivisions: usize) -> Result<TriMesh> {
    if subdivisions < 2 {
        return Err(Error::Config(format!(
            "subdivisions must be >= 2, got {subdivisions}"
        )));
    }
    let mut mesh = match spec.class {
        ShapeClass::Box { dims } => box_mesh(dims, subdivisions),
        ShapeClass::Cylinder { radius } => cylinder_mesh(radius, subdivisions),
        ShapeClass::Ring { inner_diameter } => {
            let (major_r, tube_r) = ring_radii(inner_diameter);
            torus_mesh(major_r, tube_r, subdivisions)
        }
        ShapeClass::Ellipsoid { diameters } => ellipsoid_mesh(diameters, subdivisions),
    };
    for v in &mut mesh.vertices {
        *v = spec.to_world(*v);
    }
    mesh.orient_outward();
    Ok(mesh)
}

/// Torus radii from the inner diameter, with the outer diameter pinned to
/// the major dimension 1: tube r = (1 - inner)/4, center-circle R = (1 + inner)/4.
pub fn ring_radii(inner_diameter: f64) -> (f64, f64) {
    let tube = (1.0 - inner_diameter) / 4.0;
    let major = (1.0 + inner_diameter) / 4.0;
    (major, tube)
}

fn box_mesh(dims: [f64; 3], k: usize) -> TriMesh {
    use std::collections::HashMap;
    let half = [dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0];
    // Identical lerp formula on every face so shared edge vertices are
    // bitwise equal and deduplicate exactly.
    let coord = |axis: usize, i: usize| -> f64 { -half[axis] + dims[axis] * (i as f64 / k as f64) };

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut lookup: HashMap<[u64; 3], u32> = HashMap::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut vertex = |p: [f64; 3], vertices: &mut Vec<[f64; 3]>| -> u32 {
        let key = [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()];
        *lookup.entry(key).or_insert_with(|| {
            vertices.push(p);
            (vertices.len() - 1) as u32
        })
    };

    for axis in 0..3usize {
        let ua = (axis + 1) % 3;
        let va = (axis + 2) % 3;
        for positive in [true, false] {
            let face = if positive { half[axis] } else { -half[axis] };
            let mut grid = vec![0u32; (k + 1) * (k + 1)];
            for i in 0..=k {
                for j in 0..=k {
                    let mut p = [0.0; 3];
                    p[axis] = face;
                    p[ua] = coord(ua, i);
                    p[va] = coord(va, j);
                    grid[i * (k + 1) + j] = vertex(p, &mut vertices);
                }
            }
            for i in 0..k {
                for j in 0..k {
                    let p00 = grid[i * (k + 1) + j];
                    let p10 = grid[(i + 1) * (k + 1) + j];
                    let p11 = grid[(i + 1) * (k + 1) + j + 1];
                    let p01 = grid[i * (k + 1) + j + 1];
                    if positive {
                        triangles.push([p00, p10, p11]);
                        triangles.push([p00, p11, p01]);
                    } else {
                        triangles.push([p00, p11, p10]);
                        triangles.push([p00, p01, p11]);
                    }
                }
            }
        }
    }
    TriMesh {
        vertices,
        triangles,
    }
}

fn cylinder_mesh(radius: f64, k: usize) -> TriMesh {
    // Height-1 cylinder along body z. Side rings are indexed modulo k so
    // the wrap seam shares vertices; caps fan from center vertices.
    let levels = k;
    let mut vertices = Vec::with_capacity(k * (levels + 1) + 2);
    for j in 0..=levels {
        let z = -0.5 + j as f64 / levels as f64;
        for i in 0..k {
            let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            vertices.push([radius * th.cos(), radius * th.sin(), z]);
        }
    }
    let bottom_center = vertices.len() as u32;
    vertices.push([0.0, 0.0, -0.5]);
    let top_center = vertices.len() as u32;
    vertices.push([0.0, 0.0, 0.5]);

    let ring = |j: usize, i: usize| (j * k + i % k) as u32;
    let mut triangles = Vec::new();
    for j in 0..levels {
        for i in 0..k {
            let a = ring(j, i);
            let b = ring(j, i + 1);
            let c = ring(j + 1, i + 1);
            let d = ring(j + 1, i);
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    for i in 0..k {
        triangles.push([bottom_center, ring(0, i + 1), ring(0, i)]);
        triangles.push([top_center, ring(levels, i), ring(levels, i + 1)]);
    }
    TriMesh {
        vertices,
        triangles,
    }
}

fn torus_mesh(major_r: f64, tube_r: f64, k: usize) -> TriMesh {
    let mut vertices = Vec::with_capacity(k * k);
    for i in 0..k {
        let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
        for j in 0..k {
            let ph = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            let rad = major_r + tube_r * ph.cos();
            vertices.push([rad * th.cos(), rad * th.sin(), tube_r * ph.sin()]);
        }
    }
    let at = |i: usize, j: usize| ((i % k) * k + j % k) as u32;
    let mut triangles = Vec::with_capacity(2 * k * k);
    for i in 0..k {
        for j in 0..k {
            triangles.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
            triangles.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
        }
    }
    TriMesh {
        vertices,
        triangles,
    }
}

fn ellipsoid_mesh(diameters: [f64; 3], k: usize) -> TriMesh {
    let semi = [diameters[0] / 2.0, diameters[1] / 2.0, diameters[2] / 2.0];
    let mut vertices = Vec::new();
    // Interior rings at polar angles j = 1..k-1, k vertices each.
    for j in 1..k {
        let phi = std::f64::consts::PI * j as f64 / k as f64;
        for i in 0..k {
            let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            vertices.push([
                semi[0] * phi.sin() * th.cos(),
                semi[1] * phi.sin() * th.sin(),
                semi[2] * phi.cos(),
            ]);
        }
    }
    let north = vertices.len() as u32;
    vertices.push([0.0, 0.0, semi[2]]);
    let south = vertices.len() as u32;
    vertices.push([0.0, 0.0, -semi[2]]);

    let at = |j: usize, i: usize| ((j - 1) * k + i % k) as u32;
    let mut triangles = Vec::new();
    for i in 0..k {
        triangles.push([north, at(1, i + 1), at(1, i)]);
        triangles.push([south, at(k - 1, i), at(k - 1, i + 1)]);
    }
    for j in 1..k - 1 {
        for i in 0..k {
            let a = at(j, i);
            let b = at(j, i + 1);
            let c = at(j + 1, i + 1);
            let d = at(j + 1, i);
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    TriMesh {
        vertices,
        triangles,
    }
}

/// Exact Euclidean signed distance for the classes with a closed form:
/// boxes, cylinders, rings (tori), and equal-axis ellipsoids (spheres).
/// General ellipsoids have no closed form; use the mesh route.
pub fn analytic_sdf(spec: &ShapeSpec, point: [f64; 3]) -> Result<f64> {
    let p = spec.to_body(point);
    match spec.class {
        ShapeClass::Box { dims } => Ok(sdf_box(p, dims)),
        ShapeClass::Cylinder { radius } => Ok(sdf_cylinder(p, radius, 1.0)),
        ShapeClass::Ring { inner_diameter } => {
            let (major_r, tube_r) = ring_radii(inner_diameter);
            Ok(sdf_torus(p, major_r, tube_r))
        }
        ShapeClass::Ellipsoid { diameters } => {
            if (diameters[0] - diameters[1]).abs() < 1e-12
                && (diameters[0] - diameters[2]).abs() < 1e-12
            {
                Ok(sdf_sphere(p, diameters[0] / 2.0))
            } else {
                Err(Error::Config(
                    "exact signed distance is unavailable for non-spherical ellipsoids; \
                     voxelize the triangulated surface instead"
                        .into(),
                ))
            }
        }
    }
}

pub fn sdf_sphere(p: [f64; 3], radius: f64) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius
}

pub fn sdf_box(p: [f64; 3], dims: [f64; 3]) -> f64 {
    let q = [
        p[0].abs() - dims[0] / 2.0,
        p[1].abs() - dims[1] / 2.0,
        p[2].abs() - dims[2] / 2.0,
    ];
    let outside = (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2) + q[2].max(0.0).powi(2)).sqrt();
    let inside = q[0].max(q[1]).max(q[2]).min(0.0);
    outside + inside
}

/// Finite cylinder along z with the given radius and height.
pub fn sdf_cylinder(p: [f64; 3], radius: f64, height: f64) -> f64 {
    let dr = (p[0] * p[0] + p[1] * p[1]).sqrt() - radius;
    let dz = p[2].abs() - height / 2.0;
    let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
    let inside = dr.max(dz).min(0.0);
    outside + inside
}

/// Torus in the body xy plane: sqrt((sqrt(x^2+y^2) - R)^2 + z^2) - r.
pub fn sdf_torus(p: [f64; 3], major_r: f64, tube_r: f64) -> f64 {
    let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - major_r;
    (ring * ring + p[2] * p[2]).sqrt() - tube_r
}
