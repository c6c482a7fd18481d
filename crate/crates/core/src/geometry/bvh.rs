//! Axis-aligned BVH over triangles: branch-and-bound nearest-distance
//! queries and generalized winding numbers with a far-field dipole
//! approximation per node.

use super::mesh::{cross, dot, norm, sub3, TriMesh};

const LEAF_SIZE: usize = 8;
/// Opening ratio for the winding-number far-field approximation.
const OPEN_BETA: f64 = 2.5;

#[derive(Debug, Clone)]
struct Node {
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    /// Sum of triangle vector areas (area-weighted normals).
    dipole: [f64; 3],
    /// Area-weighted centroid.
    centroid: [f64; 3],
    /// Bounding-sphere radius around the centroid.
    radius: f64,
    /// Child node indices, `u32::MAX` for leaves.
    left: u32,
    right: u32,
    start: u32,
    end: u32,
}

/// Immutable spatial index over a triangle soup; queries are thread-safe.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    tris: Vec<[[f64; 3]; 3]>,
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let mut tris: Vec<[[f64; 3]; 3]> = (0..mesh.triangles.len())
            .map(|i| mesh.triangle_vertices(i))
            .collect();
        let mut nodes = Vec::new();
        if tris.is_empty() {
            nodes.push(Node {
                bbox_min: [0.0; 3],
                bbox_max: [0.0; 3],
                dipole: [0.0; 3],
                centroid: [0.0; 3],
                radius: 0.0,
                left: u32::MAX,
                right: u32::MAX,
                start: 0,
                end: 0,
            });
            return Bvh { nodes, tris };
        }
        build_node(&mut tris, 0, mesh.triangles.len(), &mut nodes);
        Bvh { nodes, tris }
    }

    /// Shortest unsigned distance from `q` to the surface.
    pub fn distance(&self, q: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.nearest(0, q, &mut best);
        best.sqrt()
    }

    /// Generalized winding number of the surface around `q`; close to 1
    /// inside a watertight outward-oriented mesh and 0 outside.
    pub fn winding(&self, q: [f64; 3]) -> f64 {
        self.winding_node(0, q) / (4.0 * std::f64::consts::PI)
    }

    /// Distance with the winding-number sign: negative inside. Uses the
    /// winding magnitude so a globally flipped mesh gives the same field.
    pub fn signed_distance(&self, q: [f64; 3]) -> f64 {
        let d = self.distance(q);
        if self.winding(q).abs() > 0.5 {
            -d
        } else {
            d
        }
    }

    fn nearest(&self, id: usize, q: [f64; 3], best: &mut f64) {
        let node = &self.nodes[id];
        if bbox_dist_sq(node.bbox_min, node.bbox_max, q) >= *best {
            return;
        }
        if node.left == u32::MAX {
            for t in &self.tris[node.start as usize..node.end as usize] {
                let d = point_triangle_dist_sq(q, t);
                if d < *best {
                    *best = d;
                }
            }
            return;
        }
        let (l, r) = (node.left as usize, node.right as usize);
        let dl = bbox_dist_sq(self.nodes[l].bbox_min, self.nodes[l].bbox_max, q);
        let dr = bbox_dist_sq(self.nodes[r].bbox_min, self.nodes[r].bbox_max, q);
        if dl <= dr {
            self.nearest(l, q, best);
            self.nearest(r, q, best);
        } else {
            self.nearest(r, q, best);
            self.nearest(l, q, best);
        }
    }

    fn winding_node(&self, id: usize, q: [f64; 3]) -> f64 {
        let node = &self.nodes[id];
        let to_c = sub3(node.centroid, q);
        let d = norm(to_c);
        if d > OPEN_BETA * node.radius && d > 0.0 {
            return dot(node.dipole, to_c) / (d * d * d);
        }
        if node.left == u32::MAX {
            let mut acc = 0.0;
            for t in &self.tris[node.start as usize..node.end as usize] {
                acc += solid_angle(q, t);
            }
            return acc;
        }
        self.winding_node(node.left as usize, q) + self.winding_node(node.right as usize, q)
    }
}

fn build_node(tris: &mut [[[f64; 3]; 3]], start: usize, end: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len();
    nodes.push(Node {
        bbox_min: [0.0; 3],
        bbox_max: [0.0; 3],
        dipole: [0.0; 3],
        centroid: [0.0; 3],
        radius: 0.0,
        left: u32::MAX,
        right: u32::MAX,
        start: start as u32,
        end: end as u32,
    });

    let mut bbox_min = [f64::INFINITY; 3];
    let mut bbox_max = [f64::NEG_INFINITY; 3];
    let mut dipole = [0.0; 3];
    let mut weighted = [0.0; 3];
    let mut total_area = 0.0;
    for t in &tris[start..end] {
        let va = cross(sub3(t[1], t[0]), sub3(t[2], t[0]));
        let area = 0.5 * norm(va);
        let c = [
            (t[0][0] + t[1][0] + t[2][0]) / 3.0,
            (t[0][1] + t[1][1] + t[2][1]) / 3.0,
            (t[0][2] + t[1][2] + t[2][2]) / 3.0,
        ];
        total_area += area;
        for a in 0..3 {
            dipole[a] += 0.5 * va[a];
            weighted[a] += area * c[a];
            for v in t {
                bbox_min[a] = bbox_min[a].min(v[a]);
                bbox_max[a] = bbox_max[a].max(v[a]);
            }
        }
    }
    let centroid = if total_area > 0.0 {
        [
            weighted[0] / total_area,
            weighted[1] / total_area,
            weighted[2] / total_area,
        ]
    } else {
        [
            (bbox_min[0] + bbox_max[0]) / 2.0,
            (bbox_min[1] + bbox_max[1]) / 2.0,
            (bbox_min[2] + bbox_max[2]) / 2.0,
        ]
    };
    let mut radius: f64 = 0.0;
    for t in &tris[start..end] {
        for v in t {
            radius = radius.max(norm(sub3(*v, centroid)));
        }
    }

    if end - start > LEAF_SIZE {
        // Median split along the longest bbox axis.
        let extents = sub3(bbox_max, bbox_min);
        let axis = if extents[0] >= extents[1] && extents[0] >= extents[2] {
            0
        } else if extents[1] >= extents[2] {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        tris[start..end].sort_unstable_by(|a, b| {
            let ca = a[0][axis] + a[1][axis] + a[2][axis];
            let cb = b[0][axis] + b[1][axis] + b[2][axis];
            ca.partial_cmp(&cb).unwrap()
        });
        let left = build_node(tris, start, mid, nodes);
        let right = build_node(tris, mid, end, nodes);
        nodes[id].left = left;
        nodes[id].right = right;
    }

    let n = &mut nodes[id];
    n.bbox_min = bbox_min;
    n.bbox_max = bbox_max;
    n.dipole = dipole;
    n.centroid = centroid;
    n.radius = radius;
    id as u32
}

fn bbox_dist_sq(min: [f64; 3], max: [f64; 3], q: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    for a in 0..3 {
        let d = if q[a] < min[a] {
            min[a] - q[a]
        } else if q[a] > max[a] {
            q[a] - max[a]
        } else {
            0.0
        };
        acc += d * d;
    }
    acc
}

/// Squared distance from a point to a triangle (closest-point cases on
/// vertices, edges, or the interior).
fn point_triangle_dist_sq(p: [f64; 3], t: &[[f64; 3]; 3]) -> f64 {
    let [a, b, c] = *t;
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return dot(ap, ap);
    }
    let bp = sub3(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return dot(bp, bp);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        let q = [ap[0] - v * ab[0], ap[1] - v * ab[1], ap[2] - v * ab[2]];
        return dot(q, q);
    }
    let cp = sub3(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return dot(cp, cp);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        let q = [ap[0] - w * ac[0], ap[1] - w * ac[1], ap[2] - w * ac[2]];
        return dot(q, q);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = sub3(c, b);
        let q = [bp[0] - w * bc[0], bp[1] - w * bc[1], bp[2] - w * bc[2]];
        return dot(q, q);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let q = [
        ap[0] - v * ab[0] - w * ac[0],
        ap[1] - v * ab[1] - w * ac[1],
        ap[2] - v * ab[2] - w * ac[2],
    ];
    dot(q, q)
}

/// Signed solid angle of a triangle seen from `q` (Van Oosterom-Strackee).
fn solid_angle(q: [f64; 3], t: &[[f64; 3]; 3]) -> f64 {
    let a = sub3(t[0], q);
    let b = sub3(t[1], q);
    let c = sub3(t[2], q);
    let (la, lb, lc) = (norm(a), norm(b), norm(c));
    let num = dot(a, cross(b, c));
    let den = la * lb * lc + dot(a, b) * lc + dot(b, c) * la + dot(c, a) * lb;
    2.0 * num.atan2(den)
}
