//! Mesh-to-SDF voxelization on the simulation grid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::voxel::{node_position, SdfField, VoxelGrid};

use super::bvh::Bvh;
use super::mesh::TriMesh;

/// Voxelizes the signed distance field of a watertight mesh on the
/// `G^3` node lattice: exact point-to-triangle distances through the BVH,
/// sign from the generalized winding number (magnitude > 0.5 means inside).
pub fn mesh_sdf(mesh: &TriMesh, resolution: usize) -> Result<SdfField> {
    if resolution < 8 {
        return Err(Error::Config(format!(
            "SDF resolution must be >= 8, got {resolution}"
        )));
    }
    mesh.validate_watertight()?;
    let bvh = Bvh::build(mesh);
    let g = resolution;
    let values: Vec<f64> = (0..g * g * g)
        .into_par_iter()
        .map(|lin| {
            let ix = lin / (g * g);
            let iy = (lin / g) % g;
            let iz = lin % g;
            bvh.signed_distance(node_position(g, [ix, iy, iz]))
        })
        .collect();
    Ok(SdfField::new(VoxelGrid::new(g, values)?))
}
