//! Trilinear element-center postprocessing and continuity residuals.
//!
//! Nodal velocity grids are converted to element-center values and
//! gradients with the 8-node trilinear shape functions: the centroid value
//! is the mean of the corner nodes and the centroid gradient is the
//! face-mean difference divided by the spacing. Both maps are exposed as
//! fixed linear stencils so losses can backpropagate to nodal predictions.
//! Continuity residuals integrate the squared divergence of the trilinear
//! interpolant with a 2x2x2 Gauss rule per element.

use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::LinearStencil;
use crate::error::{Error, Result};
use crate::voxel::{SdfField, VoxelGrid};

/// Velocity components sampled at the nodes of a `G^3` grid.
#[derive(Debug, Clone)]
pub struct NodalField {
    components: [VoxelGrid; 3],
}

impl NodalField {
    pub fn new(u: VoxelGrid, v: VoxelGrid, w: VoxelGrid) -> Result<Self> {
        if u.resolution() != v.resolution() || u.resolution() != w.resolution() {
            return Err(Error::Config(format!(
                "velocity components disagree on resolution: {} / {} / {}",
                u.resolution(),
                v.resolution(),
                w.resolution()
            )));
        }
        Ok(NodalField {
            components: [u, v, w],
        })
    }

    pub fn from_fn(resolution: usize, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let comp = |i: usize| VoxelGrid::from_fn(resolution, |p| f(p)[i]);
        NodalField {
            components: [comp(0), comp(1), comp(2)],
        }
    }

    pub fn resolution(&self) -> usize {
        self.components[0].resolution()
    }

    pub fn spacing(&self) -> f64 {
        self.components[0].spacing()
    }

    pub fn component(&self, i: usize) -> &VoxelGrid {
        &self.components[i]
    }

    pub fn component_mut(&mut self, i: usize) -> &mut VoxelGrid {
        &mut self.components[i]
    }
}

/// Per-element centroid values, gradients and the fluid mask.
#[derive(Debug, Clone)]
pub struct ElementField {
    /// Nodal resolution G; the element lattice is `(G-1)^3`.
    pub resolution: usize,
    pub spacing: f64,
    /// Centroid velocity per component, `(G-1)^3` each.
    pub values: [Vec<f64>; 3],
    /// `gradients[i][j]` holds the centroid `d u^i / d x_j`.
    pub gradients: [[Vec<f64>; 3]; 3],
    /// True where the SDF interpolated at the centroid is positive.
    pub mask: Vec<bool>,
}

impl ElementField {
    pub fn element_count(&self) -> usize {
        let e = self.resolution - 1;
        e * e * e
    }

    pub fn fluid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Number of elements along one axis for nodal resolution `g`.
pub fn elements_per_axis(g: usize) -> usize {
    g - 1
}

#[inline]
fn corner_offset(c: usize) -> [usize; 3] {
    [(c >> 2) & 1, (c >> 1) & 1, c & 1]
}

/// Centroid value of the trilinear interpolant: the mean of the 8 corners.
#[inline]
pub fn center_value(nodal: &[f64; 8]) -> f64 {
    nodal.iter().sum::<f64>() / 8.0
}

/// Centroid gradient of the trilinear interpolant: per axis, the mean of
/// the four positive-face corners minus the mean of the negative-face
/// corners, divided by the spacing.
#[inline]
pub fn center_gradient(nodal: &[f64; 8], h: f64) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (c, &v) in nodal.iter().enumerate() {
        let off = corner_offset(c);
        for a in 0..3 {
            let sign = if off[a] == 1 { 1.0 } else { -1.0 };
            g[a] += sign * v / (4.0 * h);
        }
    }
    g
}

fn corner_indices(g: usize, ex: usize, ey: usize, ez: usize) -> [usize; 8] {
    let mut idx = [0usize; 8];
    for (c, slot) in idx.iter_mut().enumerate() {
        let [dx, dy, dz] = corner_offset(c);
        *slot = ((ex + dx) * g + (ey + dy)) * g + (ez + dz);
    }
    idx
}

fn gather_corners(values: &[f64], idx: &[usize; 8]) -> [f64; 8] {
    let mut out = [0.0; 8];
    for c in 0..8 {
        out[c] = values[idx[c]];
    }
    out
}

/// The element-center value map as a fixed linear stencil over the flat
/// nodal vector.
pub fn value_stencil(g: usize) -> LinearStencil {
    build_stencil(g, [0.125; 8])
}

/// The element-center derivative map along `axis` (0 = x, 1 = y, 2 = z).
pub fn gradient_stencil(g: usize, axis: usize, h: f64) -> LinearStencil {
    let mut coeffs = [0.0; 8];
    for (c, slot) in coeffs.iter_mut().enumerate() {
        let off = corner_offset(c);
        *slot = if off[axis] == 1 { 1.0 } else { -1.0 } / (4.0 * h);
    }
    build_stencil(g, coeffs)
}

fn build_stencil(g: usize, coeffs: [f64; 8]) -> LinearStencil {
    let e = g - 1;
    let mut rows = Vec::with_capacity(e * e * e);
    for ex in 0..e {
        for ey in 0..e {
            for ez in 0..e {
                let idx = corner_indices(g, ex, ey, ez);
                let mut cols = [0u32; 8];
                for c in 0..8 {
                    cols[c] = idx[c] as u32;
                }
                rows.push(cols);
            }
        }
    }
    LinearStencil {
        input_len: g * g * g,
        coeffs,
        rows,
    }
}

/// Restriction of a stencil to a subset of element rows, for subsampled
/// training. Row order follows `elements`.
pub fn restrict_stencil(stencil: &LinearStencil, elements: &[usize]) -> LinearStencil {
    LinearStencil {
        input_len: stencil.input_len,
        coeffs: stencil.coeffs,
        rows: elements.iter().map(|&e| stencil.rows[e]).collect(),
    }
}

/// SDF interpolated at every element centroid (the mean of the corners).
pub fn element_center_values(grid: &VoxelGrid) -> Vec<f64> {
    let g = grid.resolution();
    let st = value_stencil(g);
    let mut out = vec![0.0; st.rows.len()];
    st.apply(grid.values(), &mut out);
    out
}

/// Fluid mask: true where the centroid SDF is strictly positive.
pub fn element_mask(sdf: &SdfField) -> Vec<bool> {
    element_center_values(sdf.grid())
        .into_iter()
        .map(|v| v > 0.0)
        .collect()
}

/// Converts a nodal field to centroid values and gradients, with the fluid
/// mask taken from the SDF.
pub fn postprocess(field: &NodalField, sdf: &SdfField) -> Result<ElementField> {
    let g = field.resolution();
    if sdf.resolution() != g {
        return Err(Error::Config(format!(
            "field resolution {g} does not match SDF resolution {}",
            sdf.resolution()
        )));
    }
    let h = field.spacing();
    let e = g - 1;
    let n_elem = e * e * e;

    let mut values: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n_elem]);
    let mut gradients: [[Vec<f64>; 3]; 3] =
        std::array::from_fn(|_| std::array::from_fn(|_| vec![0.0; n_elem]));

    for comp in 0..3 {
        let nodal = field.component(comp).values();
        let (vals, grads) = compute_centers(nodal, g, h);
        values[comp] = vals;
        gradients[comp] = grads;
    }

    Ok(ElementField {
        resolution: g,
        spacing: h,
        values,
        gradients,
        mask: element_mask(sdf),
    })
}

fn compute_centers(nodal: &[f64], g: usize, h: f64) -> (Vec<f64>, [Vec<f64>; 3]) {
    let e = g - 1;
    let n_elem = e * e * e;
    let one = |lin: usize| -> (f64, [f64; 3]) {
        let ex = lin / (e * e);
        let ey = (lin / e) % e;
        let ez = lin % e;
        let idx = corner_indices(g, ex, ey, ez);
        let corners = gather_corners(nodal, &idx);
        (center_value(&corners), center_gradient(&corners, h))
    };
    let results: Vec<(f64, [f64; 3])> = if n_elem > 8192 {
        (0..n_elem).into_par_iter().map(one).collect()
    } else {
        (0..n_elem).map(one).collect()
    };
    let mut vals = vec![0.0; n_elem];
    let mut grads: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n_elem]);
    for (lin, (v, grad)) in results.into_iter().enumerate() {
        vals[lin] = v;
        for a in 0..3 {
            grads[a][lin] = grad[a];
        }
    }
    (vals, grads)
}

/// The 2x2x2 Gauss rule on the reference cube `[-1,1]^3`: 8 points at
/// `+-1/sqrt(3)`, unit weights, jacobian `(h/2)^3`. Exact for polynomials
/// of degree <= 3 per axis.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureRule;

impl QuadratureRule {
    pub fn points() -> [[f64; 3]; 8] {
        let s = 1.0 / 3f64.sqrt();
        let mut pts = [[0.0; 3]; 8];
        for (c, p) in pts.iter_mut().enumerate() {
            let off = corner_offset(c);
            for a in 0..3 {
                p[a] = if off[a] == 1 { s } else { -s };
            }
        }
        pts
    }

    pub fn weights() -> [f64; 8] {
        [1.0; 8]
    }

    pub fn jacobian(h: f64) -> f64 {
        (h / 2.0) * (h / 2.0) * (h / 2.0)
    }

    /// Integrates `f(xi)` over the reference cube.
    pub fn integrate_reference(f: impl Fn([f64; 3]) -> f64) -> f64 {
        Self::points().iter().map(|&p| f(p)).sum()
    }
}

/// Derivative of the trilinear interpolant at reference point `xi`,
/// given the 8 corner values; `axis` in reference coordinates, scaled to
/// physical by `2/h`.
#[inline]
pub fn trilinear_gradient_at(nodal: &[f64; 8], xi: [f64; 3], h: f64) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (c, &v) in nodal.iter().enumerate() {
        let off = corner_offset(c);
        let sgn = |a: usize| if off[a] == 1 { 1.0 } else { -1.0 };
        let fac = |a: usize| 1.0 + sgn(a) * xi[a];
        g[0] += v * sgn(0) * fac(1) * fac(2) / 8.0;
        g[1] += v * sgn(1) * fac(0) * fac(2) / 8.0;
        g[2] += v * sgn(2) * fac(0) * fac(1) / 8.0;
    }
    let scale = 2.0 / h;
    [g[0] * scale, g[1] * scale, g[2] * scale]
}

/// Per-element and total continuity residuals.
#[derive(Debug, Clone)]
pub struct ContinuityResidual {
    /// `|| div u ||_{L2(e)}` per element.
    pub per_element: Vec<f64>,
    /// `sqrt( sum_e || div u ||^2 )`.
    pub total: f64,
}

/// Integrates the squared divergence of the trilinear interpolant over
/// every element with the 2x2x2 Gauss rule.
pub fn continuity_residual(field: &NodalField) -> ContinuityResidual {
    let g = field.resolution();
    let e = g - 1;
    let h = field.spacing();
    let jac = QuadratureRule::jacobian(h);
    let points = QuadratureRule::points();
    let n_elem = e * e * e;

    let compute = |lin: usize| -> f64 {
        let ex = lin / (e * e);
        let ey = (lin / e) % e;
        let ez = lin % e;
        let idx = corner_indices(g, ex, ey, ez);
        let u = gather_corners(field.component(0).values(), &idx);
        let v = gather_corners(field.component(1).values(), &idx);
        let w = gather_corners(field.component(2).values(), &idx);
        let mut acc = 0.0;
        for &xi in &points {
            let div = trilinear_gradient_at(&u, xi, h)[0]
                + trilinear_gradient_at(&v, xi, h)[1]
                + trilinear_gradient_at(&w, xi, h)[2];
            acc += div * div;
        }
        acc * jac
    };

    let sq: Vec<f64> = if n_elem > 8192 {
        (0..n_elem).into_par_iter().map(compute).collect()
    } else {
        (0..n_elem).map(compute).collect()
    };
    let total = sq.iter().sum::<f64>().sqrt();
    ContinuityResidual {
        per_element: sq.into_iter().map(f64::sqrt).collect(),
        total,
    }
}

/// All four postprocessing stencils for a grid, shared across tapes.
#[derive(Debug, Clone)]
pub struct CenterStencils {
    pub value: Arc<LinearStencil>,
    pub gradient: [Arc<LinearStencil>; 3],
}

impl CenterStencils {
    pub fn new(g: usize, h: f64) -> Self {
        CenterStencils {
            value: Arc::new(value_stencil(g)),
            gradient: std::array::from_fn(|a| Arc::new(gradient_stencil(g, a, h))),
        }
    }
}
