//! Brute-force oracles for the analytic signed distances: dense surface
//! point clouds give the unsigned distance; class predicates give the sign.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use voxonet::geometry::{analytic_sdf, random_rotation, ShapeClass, ShapeSpec};

const SURFACE_SAMPLES: usize = 1_000_000;

/// Roughly uniform parametric samples on the body-frame surface.
fn surface_cloud(class: &ShapeClass, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(SURFACE_SAMPLES);
    match *class {
        ShapeClass::Box { dims } => {
            let half = [dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0];
            let areas = [
                dims[1] * dims[2],
                dims[0] * dims[2],
                dims[0] * dims[1],
            ];
            let total: f64 = 2.0 * (areas[0] + areas[1] + areas[2]);
            for axis in 0..3 {
                let n = (SURFACE_SAMPLES as f64 * 2.0 * areas[axis] / total) as usize;
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                for _ in 0..n / 2 {
                    for side in [-1.0, 1.0] {
                        let mut p = [0.0; 3];
                        p[axis] = side * half[axis];
                        p[u] = rng.gen_range(-half[u]..half[u]);
                        p[v] = rng.gen_range(-half[v]..half[v]);
                        pts.push(p);
                    }
                }
            }
        }
        ShapeClass::Cylinder { radius } => {
            let side_area = 2.0 * std::f64::consts::PI * radius;
            let cap_area = 2.0 * std::f64::consts::PI * radius * radius;
            let side_n =
                (SURFACE_SAMPLES as f64 * side_area / (side_area + cap_area)) as usize;
            for _ in 0..side_n {
                let th = rng.gen_range(0.0..std::f64::consts::TAU);
                pts.push([radius * th.cos(), radius * th.sin(), rng.gen_range(-0.5..0.5)]);
            }
            for _ in 0..SURFACE_SAMPLES - side_n {
                // Area-uniform disc samples on a random cap.
                let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                let th = rng.gen_range(0.0..std::f64::consts::TAU);
                let z = if rng.gen_bool(0.5) { 0.5 } else { -0.5 };
                pts.push([r * th.cos(), r * th.sin(), z]);
            }
        }
        ShapeClass::Ring { inner_diameter } => {
            let (major_r, tube_r) = voxonet::geometry::ring_radii(inner_diameter);
            // Rejection in phi keeps the sampling area-uniform.
            while pts.len() < SURFACE_SAMPLES {
                let th = rng.gen_range(0.0..std::f64::consts::TAU);
                let ph = rng.gen_range(0.0..std::f64::consts::TAU);
                let accept = (major_r + tube_r * ph.cos()) / (major_r + tube_r);
                if rng.gen_range(0.0..1.0) < accept {
                    let rad = major_r + tube_r * ph.cos();
                    pts.push([rad * th.cos(), rad * th.sin(), tube_r * ph.sin()]);
                }
            }
        }
        ShapeClass::Ellipsoid { diameters } => {
            // Spheres only (the exact form exists only there).
            let r = diameters[0] / 2.0;
            while pts.len() < SURFACE_SAMPLES {
                let v = [
                    rng.gen_range(-1.0f64..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-6 && n <= 1.0 {
                    pts.push([r * v[0] / n, r * v[1] / n, r * v[2] / n]);
                }
            }
        }
    }
    pts
}

fn inside(class: &ShapeClass, p: [f64; 3]) -> bool {
    match *class {
        ShapeClass::Box { dims } => {
            p[0].abs() < dims[0] / 2.0 && p[1].abs() < dims[1] / 2.0 && p[2].abs() < dims[2] / 2.0
        }
        ShapeClass::Cylinder { radius } => {
            (p[0] * p[0] + p[1] * p[1]).sqrt() < radius && p[2].abs() < 0.5
        }
        ShapeClass::Ring { inner_diameter } => {
            let (major_r, tube_r) = voxonet::geometry::ring_radii(inner_diameter);
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - major_r;
            (ring * ring + p[2] * p[2]).sqrt() < tube_r
        }
        ShapeClass::Ellipsoid { diameters } => {
            (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() < diameters[0] / 2.0
        }
    }
}

#[test]
fn analytic_sdf_matches_surface_sampling_brute_force() {
    let classes = [
        ShapeClass::Box {
            dims: [1.0, 0.8, 0.7],
        },
        ShapeClass::Cylinder { radius: 0.45 },
        ShapeClass::Ring {
            inner_diameter: 0.65,
        },
        ShapeClass::Ellipsoid {
            diameters: [1.0, 1.0, 1.0],
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for class in classes {
        let spec = ShapeSpec::centered(class, random_rotation(&mut rng));
        let cloud = surface_cloud(&class, &mut rng);
        let queries: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                [
                    rng.gen_range(0.3..1.7),
                    rng.gen_range(0.3..1.7),
                    rng.gen_range(0.3..1.7),
                ]
            })
            .collect();
        let worst = queries
            .par_iter()
            .map(|&q| {
                let body = spec.to_body(q);
                let brute = cloud
                    .iter()
                    .map(|s| {
                        let d = [body[0] - s[0], body[1] - s[1], body[2] - s[2]];
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt();
                let exact = analytic_sdf(&spec, q).unwrap();
                // Unsigned agreement plus an independent sign check.
                let sign_ok = (exact < 0.0) == inside(&class, body) || exact.abs() < 1e-3;
                assert!(sign_ok, "{}: sign mismatch at {q:?}", class.name());
                (exact.abs() - brute).abs()
            })
            .reduce(|| 0.0, f64::max);
        assert!(
            worst < 2e-3,
            "{}: |analytic| vs brute-force surface distance differs by {worst}",
            class.name()
        );
    }
}
