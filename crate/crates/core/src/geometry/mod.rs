//! Shape catalog, random orientations, meshing, and SDF voxelization.
//!
//! The catalog holds 100 analytic shapes equally split among cylinders,
//! boxes, rings and ellipsoids, each centered in the cavity with its major
//! dimension fixed at 1 and randomized orientations.

mod bvh;
mod mesh;
mod shapes;
mod voxelize;

pub use bvh::Bvh;
pub use mesh::TriMesh;
pub use shapes::{analytic_sdf, ring_radii, sdf_box, sdf_cylinder, sdf_sphere, sdf_torus, triangulate};
pub use voxelize::mesh_sdf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Center of the cavity; every catalog shape sits here.
pub const SHAPE_CENTER: [f64; 3] = [1.0, 1.0, 1.0];

/// Number of shapes in the full catalog.
pub const CATALOG_SIZE: usize = 100;

/// The four analytic shape families. Dimensions are in units of the domain
/// length with the major dimension fixed at 1 (cylinder height, ring and
/// ellipsoid major diameter, box x extent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeClass {
    /// Height-1 cylinder along the body z axis.
    Cylinder { radius: f64 },
    /// Axis-aligned box in the body frame.
    Box { dims: [f64; 3] },
    /// Torus with outer diameter 1; the inner diameter sets the tube thickness.
    Ring { inner_diameter: f64 },
    /// Ellipsoid with axis diameters (1, minor, minor).
    Ellipsoid { diameters: [f64; 3] },
}

impl ShapeClass {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Cylinder { .. } => "cylinder",
            ShapeClass::Box { .. } => "box",
            ShapeClass::Ring { .. } => "ring",
            ShapeClass::Ellipsoid { .. } => "ellipsoid",
        }
    }

    /// Whether [`analytic_sdf`] has an exact closed form for this shape.
    pub fn has_exact_sdf(&self) -> bool {
        match self {
            ShapeClass::Ellipsoid { diameters } => {
                (diameters[0] - diameters[1]).abs() < 1e-12
                    && (diameters[0] - diameters[2]).abs() < 1e-12
            }
            _ => true,
        }
    }
}

/// A proper rotation matrix (row-major), validated orthonormal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub fn identity() -> Self {
        Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = Rotation(m);
        let (ortho, det) = r.orthonormality_defect();
        if ortho > 1e-10 || (det - 1.0).abs() > 1e-10 {
            return Err(Error::Validation(format!(
                "matrix is not a proper rotation: |R^T R - I| = {ortho:.2e}, det = {det}"
            )));
        }
        Ok(r)
    }

    /// Max |(R^T R - I)_ij| and det R.
    pub fn orthonormality_defect(&self) -> (f64, f64) {
        let m = &self.0;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        (worst, det)
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn apply_transpose(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ]
    }
}

/// Uniformly distributed random rotation via Shoemake's quaternion method.
/// Valid (orthonormal) for any generator output, degenerate ones included.
pub fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let u1: f64 = rng.gen_range(0.0..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let u3: f64 = rng.gen_range(0.0..1.0);
    let two_pi = 2.0 * std::f64::consts::PI;
    let (s1, c1) = (two_pi * u2).sin_cos();
    let (s2, c2) = (two_pi * u3).sin_cos();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = [a * s1, a * c1, b * s2, b * c2]; // (x, y, z, w), unit by construction
    quaternion_to_matrix(q)
}

fn quaternion_to_matrix(q: [f64; 4]) -> Rotation {
    let [x, y, z, w] = q;
    Rotation([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// One oriented shape instance, centered in the cavity.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub rotation: Rotation,
    pub center: [f64; 3],
}

impl ShapeSpec {
    pub fn centered(class: ShapeClass, rotation: Rotation) -> Self {
        ShapeSpec {
            class,
            rotation,
            center: SHAPE_CENTER,
        }
    }

    /// World point -> body frame.
    pub fn to_body(&self, p: [f64; 3]) -> [f64; 3] {
        self.rotation.apply_transpose([
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ])
    }

    /// Body point -> world frame.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation.apply(p);
        [
            r[0] + self.center[0],
            r[1] + self.center[1],
            r[2] + self.center[2],
        ]
    }

    /// Radius of the circumscribed sphere in the body frame.
    pub fn bounding_radius(&self) -> f64 {
        match self.class {
            ShapeClass::Cylinder { radius } => (radius * radius + 0.25).sqrt(),
            ShapeClass::Box { dims } => {
                0.5 * (dims[0] * dims[0] + dims[1] * dims[1] + dims[2] * dims[2]).sqrt()
            }
            ShapeClass::Ring { .. } | ShapeClass::Ellipsoid { .. } => 0.5,
        }
    }
}

/// The 100-shape catalog: per class, one unrotated base shape plus three
/// dimension variants x eight random orientations. Deterministic per seed.
pub fn build_catalog(seed: u64) -> Vec<ShapeSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(CATALOG_SIZE);

    let mut push_family = |base: ShapeClass, variants: [ShapeClass; 3], rng: &mut ChaCha8Rng| {
        specs.push(ShapeSpec::centered(base, Rotation::identity()));
        for class in variants {
            for _ in 0..8 {
                specs.push(ShapeSpec::centered(class, random_rotation(rng)));
            }
        }
    };

    push_family(
        ShapeClass::Cylinder { radius: 0.5 },
        [
            ShapeClass::Cylinder { radius: 0.35 },
            ShapeClass::Cylinder { radius: 0.4 },
            ShapeClass::Cylinder { radius: 0.45 },
        ],
        &mut rng,
    );
    push_family(
        ShapeClass::Box {
            dims: [1.0, 1.0, 1.0],
        },
        [
            ShapeClass::Box {
                dims: [1.0, 0.7, 0.7],
            },
            ShapeClass::Box {
                dims: [1.0, 0.8, 0.8],
            },
            ShapeClass::Box {
                dims: [1.0, 0.9, 0.9],
            },
        ],
        &mut rng,
    );
    push_family(
        // The unrotated base ring keeps the thickest tube (inner diameter
        // 0.5 gives tube radius 0.125); the variants thin it out.
        ShapeClass::Ring {
            inner_diameter: 0.5,
        },
        [
            ShapeClass::Ring {
                inner_diameter: 0.65,
            },
            ShapeClass::Ring {
                inner_diameter: 0.75,
            },
            ShapeClass::Ring {
                inner_diameter: 0.85,
            },
        ],
        &mut rng,
    );
    push_family(
        // Base ellipsoid with all diameters 1: the sphere.
        ShapeClass::Ellipsoid {
            diameters: [1.0, 1.0, 1.0],
        },
        [
            ShapeClass::Ellipsoid {
                diameters: [1.0, 0.65, 0.65],
            },
            ShapeClass::Ellipsoid {
                diameters: [1.0, 0.75, 0.75],
            },
            ShapeClass::Ellipsoid {
                diameters: [1.0, 0.85, 0.85],
            },
        ],
        &mut rng,
    );

    debug_assert_eq!(specs.len(), CATALOG_SIZE);
    specs
}
