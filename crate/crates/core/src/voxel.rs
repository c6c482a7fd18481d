//! Uniform node-centered scalar lattices over the cubic flow domain.

use crate::error::{Error, Result};

/// Extent of the cubic domain along each axis.
pub const DOMAIN_SIZE: f64 = 2.0;

/// A `G x G x G` scalar lattice whose nodes span the closed cube `[0,2]^3`.
///
/// Node `(ix, iy, iz)` sits at `2*i/(G-1)` along each axis and is stored at
/// flat index `(ix*G + iy)*G + iz`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(resolution: usize, values: Vec<f64>) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Config(format!(
                "grid resolution must be >= 2, got {resolution}"
            )));
        }
        let expected = resolution * resolution * resolution;
        if values.len() != expected {
            return Err(Error::Config(format!(
                "grid of resolution {resolution} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(VoxelGrid { resolution, values })
    }

    pub fn zeros(resolution: usize) -> Self {
        VoxelGrid {
            resolution,
            values: vec![0.0; resolution * resolution * resolution],
        }
    }

    /// Evaluates `f` at every node position.
    pub fn from_fn(resolution: usize, f: impl Fn([f64; 3]) -> f64) -> Self {
        let mut values = Vec::with_capacity(resolution.pow(3));
        for ix in 0..resolution {
            for iy in 0..resolution {
                for iz in 0..resolution {
                    values.push(f(node_position(resolution, [ix, iy, iz])));
                }
            }
        }
        VoxelGrid { resolution, values }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Node spacing `2/(G-1)`.
    pub fn spacing(&self) -> f64 {
        DOMAIN_SIZE / (self.resolution - 1) as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution + iy) * self.resolution + iz
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.index(ix, iy, iz)]
    }

    pub fn node_position(&self, idx: [usize; 3]) -> [f64; 3] {
        node_position(self.resolution, idx)
    }

    /// Trilinear interpolation at an arbitrary point of the domain
    /// (clamped to the closed cube).
    pub fn interpolate(&self, p: [f64; 3]) -> f64 {
        let g = self.resolution;
        let h = self.spacing();
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let t = (p[a].clamp(0.0, DOMAIN_SIZE)) / h;
            let i = (t.floor() as usize).min(g - 2);
            base[a] = i;
            frac[a] = t - i as f64;
        }
        let mut acc = 0.0;
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let w = pick(frac[0], dx) * pick(frac[1], dy) * pick(frac[2], dz);
                    acc += w * self.at(base[0] + dx, base[1] + dy, base[2] + dz);
                }
            }
        }
        acc
    }
}

#[inline]
fn pick(frac: f64, d: usize) -> f64 {
    if d == 0 {
        1.0 - frac
    } else {
        frac
    }
}

pub fn node_position(resolution: usize, idx: [usize; 3]) -> [f64; 3] {
    let h = DOMAIN_SIZE / (resolution - 1) as f64;
    [idx[0] as f64 * h, idx[1] as f64 * h, idx[2] as f64 * h]
}

/// A voxelized signed distance field: negative inside the object, positive
/// outside, in units of the domain length.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfField {
    grid: VoxelGrid,
}

impl SdfField {
    pub fn new(grid: VoxelGrid) -> Self {
        SdfField { grid }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn resolution(&self) -> usize {
        self.grid.resolution()
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.grid
    }

    /// Largest violation of the 1-Lipschitz bound `|SDF(a)-SDF(b)| <= |a-b|`
    /// over axis-adjacent node pairs. A true distance field gives <= 0.
    pub fn lipschitz_excess(&self) -> f64 {
        let g = self.grid.resolution();
        let h = self.grid.spacing();
        let mut worst = f64::NEG_INFINITY;
        for ix in 0..g {
            for iy in 0..g {
                for iz in 0..g {
                    let v = self.grid.at(ix, iy, iz);
                    if ix + 1 < g {
                        worst = worst.max((self.grid.at(ix + 1, iy, iz) - v).abs() - h);
                    }
                    if iy + 1 < g {
                        worst = worst.max((self.grid.at(ix, iy + 1, iz) - v).abs() - h);
                    }
                    if iz + 1 < g {
                        worst = worst.max((self.grid.at(ix, iy, iz + 1) - v).abs() - h);
                    }
                }
            }
        }
        worst
    }
}
