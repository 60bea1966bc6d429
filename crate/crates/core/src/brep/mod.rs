//! Discrete boundary representation.
//!
//! Faces are stored as `G x G` point grids, edges as `K`-sample polylines and
//! vertices as points. Every face loop has four edges, one per grid side, in
//! the order `(0,0) -> (0,G-1) -> (G-1,G-1) -> (G-1,0)`; with that ordering the
//! outward normal is `d/dj x d/di`.

mod builder;
mod format;
mod mesh;

pub use builder::{Curve, ShellBuilder};
pub use format::{canonical, parse_brep, serialize_brep};
pub use mesh::{tessellate, TriangleMesh};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Default face grid resolution.
pub const GRID_SIZE: usize = 4;
/// Default number of samples per edge.
pub const EDGE_SAMPLES: usize = 8;
/// Boundary coincidence tolerance in normalized units.
pub const STITCH_TOLERANCE: f64 = 1e-2;
/// Dataset filter on model complexity.
pub const MAX_FACES: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub id: u32,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: u32,
    pub samples: Vec<Vec3>,
    pub endpoints: [u32; 2],
}

impl Edge {
    /// Samples in traversal order for the given orientation flag.
    pub fn oriented_samples(&self, forward: bool) -> Vec<Vec3> {
        if forward {
            self.samples.clone()
        } else {
            self.samples.iter().rev().copied().collect()
        }
    }

    pub fn start(&self, forward: bool) -> u32 {
        if forward {
            self.endpoints[0]
        } else {
            self.endpoints[1]
        }
    }

    pub fn end(&self, forward: bool) -> u32 {
        if forward {
            self.endpoints[1]
        } else {
            self.endpoints[0]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopEdge {
    pub edge: u32,
    pub forward: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceTag {
    Planar,
    Cylindrical,
    Freeform,
}

/// Square grid of surface samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGrid {
    size: usize,
    points: Vec<Vec3>,
}

impl FaceGrid {
    pub fn new(size: usize, points: Vec<Vec3>) -> Result<Self> {
        if size < 2 || points.len() != size * size {
            return Err(Error::Dimension(format!(
                "grid of size {size} needs {} points, got {}",
                size * size,
                points.len()
            )));
        }
        Ok(Self { size, points })
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> Vec3) -> Self {
        let mut points = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                points.push(f(i, j));
            }
        }
        Self { size, points }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Vec3] {
        &mut self.points
    }

    pub fn at(&self, i: usize, j: usize) -> Vec3 {
        self.points[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: Vec3) {
        self.points[i * self.size + j] = p;
    }

    /// Corners in loop order.
    pub fn corners(&self) -> [Vec3; 4] {
        let n = self.size - 1;
        [self.at(0, 0), self.at(0, n), self.at(n, n), self.at(n, 0)]
    }

    /// Boundary samples of side `k` in loop order (`G` points).
    pub fn side(&self, k: usize) -> Vec<Vec3> {
        let n = self.size - 1;
        (0..self.size)
            .map(|t| match k {
                0 => self.at(0, t),
                1 => self.at(t, n),
                2 => self.at(n, n - t),
                _ => self.at(n - t, 0),
            })
            .collect()
    }

    pub fn set_side(&mut self, k: usize, samples: &[Vec3]) {
        let n = self.size - 1;
        for (t, p) in samples.iter().enumerate() {
            match k {
                0 => self.set(0, t, *p),
                1 => self.set(t, n, *p),
                2 => self.set(n, n - t, *p),
                _ => self.set(n - t, 0, *p),
            }
        }
    }

    /// Bilinear evaluation at parameters `(s, t)` in `[0,1]^2`, `s` along rows.
    pub fn eval(&self, s: f64, t: f64) -> Vec3 {
        let n = (self.size - 1) as f64;
        let (u, v) = (s.clamp(0.0, 1.0) * n, t.clamp(0.0, 1.0) * n);
        let i = (u.floor() as usize).min(self.size - 2);
        let j = (v.floor() as usize).min(self.size - 2);
        let (fu, fv) = (u - i as f64, v - j as f64);
        self.at(i, j) * ((1.0 - fu) * (1.0 - fv))
            + self.at(i, j + 1) * ((1.0 - fu) * fv)
            + self.at(i + 1, j) * (fu * (1.0 - fv))
            + self.at(i + 1, j + 1) * (fu * fv)
    }

    /// Unit normal at the grid center, oriented as the loop.
    pub fn normal(&self) -> Vec3 {
        let c = self.corners();
        let n = (c[1] - c[0]).cross(&(c[3] - c[0])) + (c[2] - c[1]).cross(&(c[3] - c[2]));
        n.try_normalize(1e-300).unwrap_or_else(Vec3::zeros)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub id: u32,
    pub grid: FaceGrid,
    pub loop_edges: Vec<LoopEdge>,
    pub surface_tag: SurfaceTag,
}

/// Kind of primitive, used when reporting offending ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Vertex,
    Edge,
    Face,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrimitiveId {
    pub kind: PrimitiveKind,
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BRepModel {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
    faces: Vec<Face>,
    vertex_index: HashMap<u32, usize>,
    edge_index: HashMap<u32, usize>,
    face_index: HashMap<u32, usize>,
}

impl BRepModel {
    /// Builds a model, sorting primitives by id and checking every structural
    /// invariant (unique ids, resolvable references, finite coordinates,
    /// edge endpoints, closed face loops and boundary coincidence).
    pub fn new(mut vertices: Vec<Vertex>, mut edges: Vec<Edge>, mut faces: Vec<Face>) -> Result<Self> {
        vertices.sort_by_key(|v| v.id);
        edges.sort_by_key(|e| e.id);
        faces.sort_by_key(|f| f.id);
        let vertex_index = index_of(vertices.iter().map(|v| v.id), "vertex")?;
        let edge_index = index_of(edges.iter().map(|e| e.id), "edge")?;
        let face_index = index_of(faces.iter().map(|f| f.id), "face")?;
        let model = Self {
            vertices,
            edges,
            faces,
            vertex_index,
            edge_index,
            face_index,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        for v in &self.vertices {
            if !finite(&v.position) {
                return Err(Error::invariant("position finite", format!("vertex {}", v.id)));
            }
        }
        for e in &self.edges {
            if e.samples.len() < 2 {
                return Err(Error::invariant("K >= 2", format!("edge {} has {} samples", e.id, e.samples.len())));
            }
            if !e.samples.iter().all(finite) {
                return Err(Error::invariant("position finite", format!("edge {}", e.id)));
            }
            for (k, vid) in e.endpoints.iter().enumerate() {
                let v = self
                    .vertex(*vid)
                    .ok_or_else(|| Error::Reference(format!("edge {} references vertex {vid}", e.id)))?;
                let s = if k == 0 { e.samples[0] } else { *e.samples.last().unwrap() };
                if (s - v.position).norm() > STITCH_TOLERANCE {
                    return Err(Error::invariant(
                        "edge endpoints coincide with vertices",
                        format!("edge {} endpoint {k} is {:.3e} from vertex {vid}", e.id, (s - v.position).norm()),
                    ));
                }
            }
        }
        for f in &self.faces {
            if !f.grid.points().iter().all(finite) {
                return Err(Error::invariant("grid finite", format!("face {}", f.id)));
            }
            if f.loop_edges.is_empty() {
                return Err(Error::invariant("closed loop", format!("face {} has an empty loop", f.id)));
            }
            let mut loop_edges = Vec::with_capacity(f.loop_edges.len());
            for le in &f.loop_edges {
                let e = self
                    .edge(le.edge)
                    .ok_or_else(|| Error::Reference(format!("face {} references edge {}", f.id, le.edge)))?;
                loop_edges.push((e, le.forward));
            }
            for k in 0..loop_edges.len() {
                let (a, fa) = loop_edges[k];
                let (b, fb) = loop_edges[(k + 1) % loop_edges.len()];
                if a.end(fa) != b.start(fb) {
                    return Err(Error::invariant(
                        "closed loop",
                        format!("face {}: edge {} does not connect to edge {}", f.id, a.id, b.id),
                    ));
                }
            }
            let n = f.grid.size();
            for k in 0..4 {
                for p in f.grid.side(k).iter().take(n - 1) {
                    let d = loop_edges
                        .iter()
                        .map(|(e, _)| distance_to_polyline(p, &e.samples))
                        .fold(f64::INFINITY, f64::min);
                    if d > STITCH_TOLERANCE {
                        return Err(Error::invariant(
                            "boundary samples lie on loop edges",
                            format!("face {} boundary sample is {d:.3e} from its loop", f.id),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertex(&self, id: u32) -> Option<&Vertex> {
        self.vertex_index.get(&id).map(|&i| &self.vertices[i])
    }

    pub fn edge(&self, id: u32) -> Option<&Edge> {
        self.edge_index.get(&id).map(|&i| &self.edges[i])
    }

    pub fn face(&self, id: u32) -> Option<&Face> {
        self.face_index.get(&id).map(|&i| &self.faces[i])
    }

    /// Axis-aligned bounds over every stored sample.
    pub fn bbox3d(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let all = self
            .vertices
            .iter()
            .map(|v| &v.position)
            .chain(self.edges.iter().flat_map(|e| e.samples.iter()))
            .chain(self.faces.iter().flat_map(|f| f.grid.points().iter()));
        for p in all {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Number of face loops referencing each edge, with their orientations.
    pub fn edge_uses(&self) -> BTreeMap<u32, Vec<(u32, bool)>> {
        let mut uses: BTreeMap<u32, Vec<(u32, bool)>> = self.edges.iter().map(|e| (e.id, Vec::new())).collect();
        for f in &self.faces {
            for le in &f.loop_edges {
                uses.entry(le.edge).or_default().push((f.id, le.forward));
            }
        }
        uses
    }

    /// Applies `f` to every stored point, keeping topology.
    pub fn map_points(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        let mut out = self.clone();
        for v in &mut out.vertices {
            v.position = f(&v.position);
        }
        for e in &mut out.edges {
            for p in &mut e.samples {
                *p = f(p);
            }
        }
        for face in &mut out.faces {
            for p in face.grid.points_mut() {
                *p = f(p);
            }
        }
        out
    }

    /// Structural equality up to a coordinate tolerance.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        let close = |a: &Vec3, b: &Vec3| (a - b).amax() <= tol;
        self.vertices.len() == other.vertices.len()
            && self.edges.len() == other.edges.len()
            && self.faces.len() == other.faces.len()
            && self
                .vertices
                .iter()
                .zip(&other.vertices)
                .all(|(a, b)| a.id == b.id && close(&a.position, &b.position))
            && self.edges.iter().zip(&other.edges).all(|(a, b)| {
                a.id == b.id
                    && a.endpoints == b.endpoints
                    && a.samples.len() == b.samples.len()
                    && a.samples.iter().zip(&b.samples).all(|(p, q)| close(p, q))
            })
            && self.faces.iter().zip(&other.faces).all(|(a, b)| {
                a.id == b.id
                    && a.surface_tag == b.surface_tag
                    && a.loop_edges == b.loop_edges
                    && a.grid.size() == b.grid.size()
                    && a.grid.points().iter().zip(b.grid.points()).all(|(p, q)| close(p, q))
            })
    }
}

fn index_of(ids: impl Iterator<Item = u32>, what: &'static str) -> Result<HashMap<u32, usize>> {
    let mut map = HashMap::new();
    for (i, id) in ids.enumerate() {
        if map.insert(id, i).is_some() {
            return Err(Error::invariant("unique ids", format!("duplicate {what} id {id}")));
        }
    }
    Ok(map)
}

fn finite(p: &Vec3) -> bool {
    p.iter().all(|c| c.is_finite())
}

pub(crate) fn distance_to_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

pub(crate) fn distance_to_polyline(p: &Vec3, samples: &[Vec3]) -> f64 {
    samples
        .windows(2)
        .map(|w| distance_to_segment(p, &w[0], &w[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Affine map taking a model into `[-1,1]^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl NormalizeTransform {
    /// Centers the bounding box and scales its longest axis to span `[-1,1]`.
    pub fn fit(model: &BRepModel) -> Result<Self> {
        let (lo, hi) = model.bbox3d();
        let extent = hi - lo;
        for (axis, e) in ['x', 'y', 'z'].into_iter().zip(extent.iter()) {
            if !(*e > 1e-12) {
                return Err(Error::DegenerateExtent { axis });
            }
        }
        Ok(Self {
            center: (lo + hi) * 0.5,
            scale: 2.0 / extent.max(),
        })
    }

    pub fn apply(&self, model: &BRepModel) -> BRepModel {
        model.map_points(|p| (p - self.center) * self.scale)
    }
}

pub fn normalize(model: &BRepModel) -> Result<BRepModel> {
    Ok(NormalizeTransform::fit(model)?.apply(model))
}

/// Deterministic stratified samples over a face.
///
/// Samples an `n x n` parameter lattice (`n = ceil(sqrt(count))`, corners
/// included) and returns the four corners first, then the remaining lattice
/// points in row-major order. A single sample is the face center.
pub fn sample_face_points(face: &Face, count: usize) -> Vec<Vec3> {
    if count == 0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![face.grid.eval(0.5, 0.5)];
    }
    let n = ((count as f64).sqrt().ceil() as usize).max(2);
    let step = 1.0 / (n - 1) as f64;
    let corners = [(0, 0), (0, n - 1), (n - 1, n - 1), (n - 1, 0)];
    let mut params: Vec<(usize, usize)> = corners.to_vec();
    for i in 0..n {
        for j in 0..n {
            if !corners.contains(&(i, j)) {
                params.push((i, j));
            }
        }
    }
    params
        .into_iter()
        .take(count)
        .map(|(i, j)| face.grid.eval(i as f64 * step, j as f64 * step))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unit_cube() -> BRepModel {
        let mut b = ShellBuilder::new();
        b.add_box(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0));
        b.build().unwrap()
    }

    #[test]
    fn cube_counts() {
        let cube = unit_cube();
        assert_eq!(cube.vertices().len(), 8);
        assert_eq!(cube.edges().len(), 12);
        assert_eq!(cube.face_count(), 6);
        let uses = cube.edge_uses();
        assert!(uses.values().all(|u| u.len() == 2 && u[0].1 != u[1].1));
    }

    #[test]
    fn cube_normals_point_outward() {
        let cube = unit_cube();
        let center = Vec3::repeat(0.5);
        for f in cube.faces() {
            let c = f.grid.eval(0.5, 0.5);
            assert!(f.grid.normal().dot(&(c - center)) > 0.0, "face {}", f.id);
        }
    }

    #[test]
    fn normalize_maps_cube_to_unit_range() {
        let mut b = ShellBuilder::new();
        b.add_box(Vec3::zeros(), Vec3::repeat(2.0));
        let m = normalize(&b.build().unwrap()).unwrap();
        let (lo, hi) = m.bbox3d();
        assert!((lo - Vec3::repeat(-1.0)).amax() < 1e-12);
        assert!((hi - Vec3::repeat(1.0)).amax() < 1e-12);
        let again = normalize(&m).unwrap();
        assert!(again.approx_eq(&m, 1e-9));
    }

    #[test]
    fn normalize_preserves_aspect() {
        let mut b = ShellBuilder::new();
        b.add_box(Vec3::zeros(), Vec3::new(4.0, 2.0, 1.0));
        let m = normalize(&b.build().unwrap()).unwrap();
        let (lo, hi) = m.bbox3d();
        let ext = hi - lo;
        assert!((ext - Vec3::new(2.0, 1.0, 0.5)).amax() < 1e-12);
        assert!(((lo + hi) * 0.5).amax() < 1e-12);
    }

    #[test]
    fn flat_slab_is_degenerate() {
        let mut b = ShellBuilder::new();
        b.add_quad([
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ]);
        let m = b.build().unwrap();
        assert!(matches!(normalize(&m), Err(Error::DegenerateExtent { axis: 'z' })));
    }

    #[test]
    fn four_samples_are_corners() {
        let mut b = ShellBuilder::new();
        let corners = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        b.add_quad(corners);
        let m = b.build().unwrap();
        let s = sample_face_points(&m.faces()[0], 4);
        assert_eq!(s.len(), 4);
        for c in corners {
            assert!(s.iter().any(|p| (p - c).norm() < 1e-15));
        }
    }

    #[test]
    fn samples_stay_inside_face_bounds() {
        let cube = unit_cube();
        for f in cube.faces() {
            let (lo, hi) = f
                .grid
                .points()
                .iter()
                .fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(l, h), p| {
                    (l.inf(p), h.sup(p))
                });
            for p in sample_face_points(f, 37) {
                assert!(p.iter().zip(lo.iter().zip(hi.iter())).all(|(c, (l, h))| *c >= l - 1e-12 && *c <= h + 1e-12));
            }
            assert_eq!(sample_face_points(f, 37), sample_face_points(f, 37));
        }
    }

    #[test]
    fn cylinder_patch_samples_near_surface() {
        // quarter cylinder of radius 0.5 around the z axis
        let r = 0.5;
        let mut b = ShellBuilder::new();
        let arc = |z: f64, a0: f64, a1: f64| Curve::Arc {
            center: Vec3::new(0.0, 0.0, z),
            radius: r,
            e1: Vec3::x(),
            e2: Vec3::y(),
            start: a0,
            end: a1,
        };
        let h = std::f64::consts::FRAC_PI_2;
        let p = |a: f64, z: f64| Vec3::new(r * a.cos(), r * a.sin(), z);
        b.add_face(
            [
                arc(0.0, 0.0, h),
                Curve::Line(p(h, 0.0), p(h, -1.0)),
                arc(-1.0, h, 0.0),
                Curve::Line(p(0.0, -1.0), p(0.0, 0.0)),
            ],
            SurfaceTag::Cylindrical,
        );
        let m = b.build().unwrap();
        let worst = sample_face_points(&m.faces()[0], 64)
            .iter()
            .map(|q| ((q.x * q.x + q.y * q.y).sqrt() - r).abs())
            .fold(0.0, f64::max);
        // analytic sagitta of a 30 degree chord: r (1 - cos 15deg)
        let sagitta = r * (1.0 - (15f64.to_radians()).cos());
        assert!(worst <= sagitta + 1e-12);
        assert!(worst < 0.02, "{worst}");
    }
}
