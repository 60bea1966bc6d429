//! Rebuilds a shell from independently decoded face grids.
//!
//! Corners closer than [`MERGE_TOLERANCE`] become one vertex. Grid sides that
//! join the same vertex pair and run close to each other become one edge whose
//! samples are the average of the contributing sides. Each face is then pulled
//! onto its averaged boundary with a Coons correction of the interior.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::brep::{BRepModel, Edge, Face, FaceGrid, LoopEdge, SurfaceTag, Vec3, Vertex, EDGE_SAMPLES};
use crate::error::{Error, Result};

pub const MERGE_TOLERANCE: f64 = 0.05;
/// Largest plane-fit residual still tagged planar.
pub const PLANAR_RESIDUAL: f64 = 1e-3;

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut i = i;
        while self.0[i] != r {
            let next = self.0[i];
            self.0[i] = r;
            i = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so the result is order independent.
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

struct EdgeGroup {
    a: usize,
    b: usize,
    /// Sum of contributing sides, oriented a -> b.
    sum: Vec<Vec3>,
    count: usize,
}

impl EdgeGroup {
    fn mean(&self) -> Vec<Vec3> {
        self.sum.iter().map(|p| p / self.count as f64).collect()
    }
}

/// Lagrange interpolation through equally spaced nodes at parameter `t`.
fn lagrange(nodes: &[Vec3], t: f64) -> Vec3 {
    let n = nodes.len() - 1;
    let x = t * n as f64;
    let mut out = Vec3::zeros();
    for (i, p) in nodes.iter().enumerate() {
        let mut w = 1.0;
        for j in 0..=n {
            if j != i {
                w *= (x - j as f64) / (i as f64 - j as f64);
            }
        }
        out += p * w;
    }
    out
}

fn resample(nodes: &[Vec3], count: usize) -> Vec<Vec3> {
    (0..count).map(|k| lagrange(nodes, k as f64 / (count - 1) as f64)).collect()
}

/// Adds the Coons blend of boundary displacements to every grid point.
pub fn coons_correct(grid: &mut FaceGrid, new_sides: &[Vec<Vec3>; 4]) {
    let g = grid.size();
    let n = g - 1;
    let mut delta = FaceGrid::from_fn(g, |_, _| Vec3::zeros());
    for (k, side) in new_sides.iter().enumerate() {
        let old = grid.side(k);
        let d: Vec<Vec3> = side.iter().zip(&old).map(|(a, b)| a - b).collect();
        delta.set_side(k, &d);
    }
    let nf = n as f64;
    let mut out = grid.clone();
    for i in 0..g {
        for j in 0..g {
            let (s, t) = (i as f64 / nf, j as f64 / nf);
            let d = delta.at(0, j) * (1.0 - s) + delta.at(n, j) * s + delta.at(i, 0) * (1.0 - t) + delta.at(i, n) * t
                - (delta.at(0, 0) * ((1.0 - s) * (1.0 - t))
                    + delta.at(0, n) * ((1.0 - s) * t)
                    + delta.at(n, 0) * (s * (1.0 - t))
                    + delta.at(n, n) * (s * t));
            out.set(i, j, grid.at(i, j) + d);
        }
    }
    for (k, side) in new_sides.iter().enumerate() {
        out.set_side(k, side);
    }
    *grid = out;
}

/// Planar when every grid point lies within [`PLANAR_RESIDUAL`] of the least-squares plane.
pub fn fit_surface_tag(grid: &FaceGrid) -> SurfaceTag {
    let pts = grid.points();
    let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (idx, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let normal = eig.eigenvectors.column(idx).into_owned();
    let residual = pts.iter().map(|p| (p - c).dot(&normal).abs()).fold(0.0, f64::max);
    if residual <= PLANAR_RESIDUAL {
        SurfaceTag::Planar
    } else {
        SurfaceTag::Freeform
    }
}

/// Stitches decoded grids into a model. Faces keep their input order as ids.
///
/// Structural errors are only possible for empty or non-finite input; an
/// inconsistent decode still yields a model and shows up in its validity report.
pub fn stitch(grids: &[FaceGrid]) -> Result<BRepModel> {
    if grids.is_empty() {
        return Err(Error::Empty("decoded faces"));
    }
    if grids.iter().any(|g| g.points().iter().any(|p| !p.iter().all(|v| v.is_finite()))) {
        return Err(Error::NonFinite("decoded face grid".into()));
    }

    let corners: Vec<Vec3> = grids.iter().flat_map(|g| g.corners()).collect();
    let mut uf = UnionFind((0..corners.len()).collect());
    for i in 0..corners.len() {
        for j in i + 1..corners.len() {
            if (corners[i] - corners[j]).norm() < MERGE_TOLERANCE {
                uf.union(i, j);
            }
        }
    }
    let mut vertex_of_root: HashMap<usize, usize> = HashMap::new();
    let mut sums: Vec<(Vec3, usize)> = Vec::new();
    let mut corner_vertex = vec![0usize; corners.len()];
    for (i, c) in corners.iter().enumerate() {
        let root = uf.find(i);
        let v = *vertex_of_root.entry(root).or_insert_with(|| {
            sums.push((Vec3::zeros(), 0));
            sums.len() - 1
        });
        sums[v].0 += c;
        sums[v].1 += 1;
        corner_vertex[i] = v;
    }
    let positions: Vec<Vec3> = sums.iter().map(|(s, n)| s / *n as f64).collect();

    // side -> (group, forward)
    let mut groups: Vec<EdgeGroup> = Vec::new();
    let mut by_pair: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    let mut side_edge = vec![[(0usize, true); 4]; grids.len()];
    for (f, grid) in grids.iter().enumerate() {
        for k in 0..4 {
            let a = corner_vertex[4 * f + k];
            let b = corner_vertex[4 * f + (k + 1) % 4];
            let mut side = grid.side(k);
            let forward = a <= b;
            if !forward {
                side.reverse();
            }
            let key = (a.min(b), a.max(b));
            let candidates = by_pair.entry(key).or_default();
            let hit = candidates.iter().copied().find(|&gi| {
                let g = &groups[gi];
                g.mean().iter().zip(&side).all(|(p, q)| (p - q).norm() < 2.0 * MERGE_TOLERANCE)
            });
            let gi = match hit {
                Some(gi) => {
                    let g = &mut groups[gi];
                    g.sum.iter_mut().zip(&side).for_each(|(s, p)| *s += p);
                    g.count += 1;
                    gi
                }
                None => {
                    groups.push(EdgeGroup {
                        a: key.0,
                        b: key.1,
                        sum: side,
                        count: 1,
                    });
                    candidates.push(groups.len() - 1);
                    groups.len() - 1
                }
            };
            side_edge[f][k] = (gi, forward);
        }
    }

    let curves: Vec<Vec<Vec3>> = groups
        .iter()
        .map(|g| {
            let mut m = g.mean();
            let last = m.len() - 1;
            m[0] = positions[g.a];
            m[last] = positions[g.b];
            m
        })
        .collect();

    let vertices = positions
        .iter()
        .enumerate()
        .map(|(i, p)| Vertex { id: i as u32, position: *p })
        .collect();
    let edges = groups
        .iter()
        .zip(&curves)
        .enumerate()
        .map(|(i, (g, c))| Edge {
            id: i as u32,
            samples: resample(c, EDGE_SAMPLES),
            endpoints: [g.a as u32, g.b as u32],
        })
        .collect();
    let faces = grids
        .iter()
        .enumerate()
        .map(|(f, grid)| {
            let sides: [Vec<Vec3>; 4] = std::array::from_fn(|k| {
                let (gi, forward) = side_edge[f][k];
                let mut c = curves[gi].clone();
                if !forward {
                    c.reverse();
                }
                c
            });
            let mut grid = grid.clone();
            coons_correct(&mut grid, &sides);
            let loop_edges = side_edge[f]
                .iter()
                .map(|&(gi, forward)| LoopEdge { edge: gi as u32, forward })
                .collect();
            Face {
                id: f as u32,
                surface_tag: fit_surface_tag(&grid),
                grid,
                loop_edges,
            }
        })
        .collect();
    BRepModel::new(vertices, edges, faces)
}
