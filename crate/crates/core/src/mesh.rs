//! Geometry extraction and evaluation: marching cubes over density grids,
//! surface point sampling, nearest-neighbor distances and the F-score metric.

use crate::error::{Error, Result};
use crate::mesh_tables::{EDGE_CORNERS, TRI_TABLE};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;

/// Scalar samples on a regular grid inside a cube of edge length `side`
/// centered at `center`. Samples sit at voxel centers, x-fastest.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub side: f64,
    pub center: Vector3<f64>,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(
        nx: usize,
        ny: usize,
        nz: usize,
        side: f64,
        center: Vector3<f64>,
        values: Vec<f64>,
    ) -> Result<DensityGrid> {
        if values.len() != nx * ny * nz {
            return Err(Error::invalid("density grid value count mismatch"));
        }
        if !(side > 0.0) {
            return Err(Error::invalid("density grid side must be positive"));
        }
        Ok(DensityGrid {
            nx,
            ny,
            nz,
            side,
            center,
            values,
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ny + j) * self.nx + i
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// World position of sample (i, j, k).
    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let h = Vector3::new(
            self.side / self.nx as f64,
            self.side / self.ny as f64,
            self.side / self.nz as f64,
        );
        let origin = self.center - Vector3::new(self.side, self.side, self.side) * 0.5;
        Vector3::new(
            origin.x + (i as f64 + 0.5) * h.x,
            origin.y + (j as f64 + 0.5) * h.y,
            origin.z + (k as f64 + 0.5) * h.z,
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let a = self.vertices[t[0] as usize];
        let b = self.vertices[t[1] as usize];
        let c = self.vertices[t[2] as usize];
        0.5 * (b - a).cross(&(c - a)).norm()
    }
}

/// Standard 256-case marching cubes with linear interpolation of crossing
/// positions. Shared vertices are welded per grid edge, so closed surfaces
/// come out watertight. Vertices are in the grid's world coordinates.
pub fn marching_cubes(grid: &DensityGrid, iso: f64) -> Result<TriangleMesh> {
    if grid.nx < 2 || grid.ny < 2 || grid.nz < 2 {
        return Err(Error::invalid("marching cubes needs >= 2 samples per axis"));
    }

    // Cube corner offsets in (di, dj, dk), matching the table's numbering.
    const CORNER: [(usize, usize, usize); 8] = [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ];

    let mut mesh = TriangleMesh::default();
    // Maps (lower grid-node index, axis) -> welded vertex id.
    let mut edge_vertices: HashMap<(usize, u8), u32> = HashMap::new();

    let mut corner_vals = [0.0_f64; 8];
    let mut corner_nodes = [(0usize, 0usize, 0usize); 8];

    for k in 0..grid.nz - 1 {
        for j in 0..grid.ny - 1 {
            for i in 0..grid.nx - 1 {
                let mut cube_index = 0usize;
                for (c, &(di, dj, dk)) in CORNER.iter().enumerate() {
                    let node = (i + di, j + dj, k + dk);
                    corner_nodes[c] = node;
                    corner_vals[c] = grid.value(node.0, node.1, node.2);
                    if corner_vals[c] < iso {
                        cube_index |= 1 << c;
                    }
                }
                let row = &TRI_TABLE[cube_index];
                if row[0] < 0 {
                    continue;
                }

                let mut tri = [0u32; 3];
                let mut filled = 0;
                for &e in row.iter() {
                    if e < 0 {
                        break;
                    }
                    let (ca, cb) = EDGE_CORNERS[e as usize];
                    let (na, nb) = (corner_nodes[ca], corner_nodes[cb]);
                    // Axis along which the two nodes differ; the lower node keys the edge.
                    let (lower, axis) = if na.0 != nb.0 {
                        (if na.0 < nb.0 { na } else { nb }, 0u8)
                    } else if na.1 != nb.1 {
                        (if na.1 < nb.1 { na } else { nb }, 1u8)
                    } else {
                        (if na.2 < nb.2 { na } else { nb }, 2u8)
                    };
                    let key = (grid.index(lower.0, lower.1, lower.2), axis);
                    let vid = *edge_vertices.entry(key).or_insert_with(|| {
                        let va = corner_vals[ca];
                        let vb = corner_vals[cb];
                        let t = if (vb - va).abs() < 1e-12 {
                            0.5
                        } else {
                            ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                        };
                        let pa = grid.position(na.0, na.1, na.2);
                        let pb = grid.position(nb.0, nb.1, nb.2);
                        mesh.vertices.push(pa + t * (pb - pa));
                        (mesh.vertices.len() - 1) as u32
                    });
                    tri[filled] = vid;
                    filled += 1;
                    if filled == 3 {
                        filled = 0;
                        if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                            mesh.triangles.push(tri);
                        }
                    }
                }
            }
        }
    }

    Ok(mesh)
}

/// A bag of 3D points.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> PointCloud {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Draws `n` points on the mesh surface: triangles chosen with probability
/// proportional to area, positions uniform in barycentric coordinates.
pub fn sample_mesh_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if mesh.is_empty() {
        return Err(Error::invalid("cannot sample points from an empty mesh"));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::invalid("mesh has zero total surface area"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.random_range(0.0..total);
        let ti = cumulative.partition_point(|&c| c <= r).min(mesh.triangles.len() - 1);
        let t = &mesh.triangles[ti];
        let a = mesh.vertices[t[0] as usize];
        let b = mesh.vertices[t[1] as usize];
        let c = mesh.vertices[t[2] as usize];
        let mut u: f64 = rng.random();
        let mut v: f64 = rng.random();
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        points.push(a + u * (b - a) + v * (c - a));
    }
    Ok(PointCloud::new(points))
}

#[inline]
fn dist_sq(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

struct KdNode {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Static k-d tree over a point set; queries return exact nearest squared
/// distances (identical floats to a brute-force scan).
pub struct KdTree3 {
    points: Vec<Vector3<f64>>,
    nodes: Vec<KdNode>,
    root: i32,
}

impl KdTree3 {
    pub fn build(points: &[Vector3<f64>]) -> Result<KdTree3> {
        if points.is_empty() {
            return Err(Error::invalid("k-d tree needs a non-empty point set"));
        }
        let mut tree = KdTree3 {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        let mut indices: Vec<u32> = (0..points.len() as u32).collect();
        tree.root = tree.build_rec(&mut indices, 0);
        Ok(tree)
    }

    fn build_rec(&mut self, indices: &mut [u32], depth: usize) -> i32 {
        if indices.is_empty() {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            self.points[a as usize][axis as usize]
                .total_cmp(&self.points[b as usize][axis as usize])
        });
        let point = indices[mid];
        let node_id = self.nodes.len() as i32;
        self.nodes.push(KdNode {
            point,
            axis,
            left: -1,
            right: -1,
        });
        let (lo, hi) = indices.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut hi[1..], depth + 1);
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }

    /// Squared Euclidean distance to the nearest stored point.
    pub fn nearest_sq(&self, query: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, query, &mut best);
        best
    }

    fn search(&self, node_id: i32, query: &Vector3<f64>, best: &mut f64) {
        if node_id < 0 {
            return;
        }
        let node = &self.nodes[node_id as usize];
        let p = &self.points[node.point as usize];
        let d = dist_sq(query, p);
        if d < *best {
            *best = d;
        }
        let delta = query[node.axis as usize] - p[node.axis as usize];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, query, best);
        if delta * delta <= *best {
            self.search(far, query, best);
        }
    }
}

/// Distance from each query point to its nearest reference point.
pub fn nearest_distances(query: &PointCloud, reference: &PointCloud) -> Result<Vec<f64>> {
    if reference.is_empty() {
        return Err(Error::invalid("reference point cloud is empty"));
    }
    let tree = KdTree3::build(&reference.points)?;
    Ok(query
        .points
        .par_iter()
        .map(|q| tree.nearest_sq(q).sqrt())
        .collect())
}

/// Precision/recall/F at distance threshold `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct FScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub threshold: f64,
    /// Predicted points within `threshold` of the ground truth.
    pub pred_within: usize,
    /// Ground-truth points within `threshold` of the prediction.
    pub gt_within: usize,
}

/// F-score between a predicted and a ground-truth point set: precision is
/// the fraction of `pred` within `threshold` of `gt`, recall the fraction of
/// `gt` within `threshold` of `pred`.
pub fn fscore(pred: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<FScoreReport> {
    if gt.is_empty() {
        return Err(Error::invalid("ground-truth point cloud is empty"));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid("f-score threshold must be positive"));
    }
    if pred.is_empty() {
        return Ok(FScoreReport {
            precision: 0.0,
            recall: 0.0,
            fscore: 0.0,
            threshold,
            pred_within: 0,
            gt_within: 0,
        });
    }

    let pred_within = nearest_distances(pred, gt)?
        .iter()
        .filter(|&&d| d <= threshold)
        .count();
    let gt_within = nearest_distances(gt, pred)?
        .iter()
        .filter(|&&d| d <= threshold)
        .count();
    let precision = pred_within as f64 / pred.len() as f64;
    let recall = gt_within as f64 / gt.len() as f64;
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScoreReport {
        precision,
        recall,
        fscore,
        threshold,
        pred_within,
        gt_within,
    })
}
