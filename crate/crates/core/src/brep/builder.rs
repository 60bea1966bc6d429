use super::{BRepModel, Edge, Face, FaceGrid, LoopEdge, SurfaceTag, Vec3, Vertex, EDGE_SAMPLES, GRID_SIZE};
use crate::error::Result;

const WELD_TOLERANCE: f64 = 1e-9;
const EDGE_MATCH_TOLERANCE: f64 = 1e-7;

/// Parametric boundary curve over `t in [0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Curve {
    Line(Vec3, Vec3),
    /// Circular arc `center + radius (cos a e1 + sin a e2)` for `a` from `start` to `end`.
    Arc {
        center: Vec3,
        radius: f64,
        e1: Vec3,
        e2: Vec3,
        start: f64,
        end: f64,
    },
}

impl Curve {
    pub fn eval(&self, t: f64) -> Vec3 {
        match self {
            Curve::Line(a, b) => a + (b - a) * t,
            Curve::Arc {
                center,
                radius,
                e1,
                e2,
                start,
                end,
            } => {
                let a = start + (end - start) * t;
                center + (e1 * a.cos() + e2 * a.sin()) * *radius
            }
        }
    }

    pub fn samples(&self, count: usize) -> Vec<Vec3> {
        let last = (count - 1) as f64;
        (0..count).map(|k| self.eval(k as f64 / last)).collect()
    }
}

/// Transfinite (Coons) grid from four boundary curves in loop order.
pub(crate) fn coons_grid(sides: &[Curve; 4], size: usize) -> FaceGrid {
    let n = (size - 1) as f64;
    let c = [sides[0].eval(0.0), sides[1].eval(0.0), sides[2].eval(0.0), sides[3].eval(0.0)];
    FaceGrid::from_fn(size, |i, j| {
        let s = i as f64 / n;
        let t = j as f64 / n;
        let top = sides[0].eval(t);
        let bottom = sides[2].eval(1.0 - t);
        let left = sides[3].eval(1.0 - s);
        let right = sides[1].eval(s);
        let bilinear = c[0] * ((1.0 - s) * (1.0 - t)) + c[1] * ((1.0 - s) * t) + c[2] * (s * t) + c[3] * (s * (1.0 - t));
        top * (1.0 - s) + bottom * s + left * (1.0 - t) + right * t - bilinear
    })
}

/// Incrementally assembles a shell, welding coincident vertices and sharing
/// edges between faces that traverse the same boundary curve.
#[derive(Debug, Default)]
pub struct ShellBuilder {
    vertices: Vec<Vec3>,
    edges: Vec<(usize, usize, Vec<Vec3>)>,
    faces: Vec<(FaceGrid, Vec<LoopEdge>, SurfaceTag)>,
}

impl ShellBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Adds a face bounded by four curves; returns its index.
    pub fn add_face(&mut self, sides: [Curve; 4], tag: SurfaceTag) -> usize {
        let grid = coons_grid(&sides, GRID_SIZE);
        let samples = sides.map(|c| c.samples(EDGE_SAMPLES));
        self.add_face_with_grid(grid, samples, tag)
    }

    /// Straight-sided quad from corners in loop order.
    pub fn add_quad(&mut self, corners: [Vec3; 4]) -> usize {
        let sides = [0, 1, 2, 3].map(|k| Curve::Line(corners[k], corners[(k + 1) % 4]));
        self.add_face(sides, SurfaceTag::Planar)
    }

    /// Adds the six outward-oriented faces of an axis-aligned box in the
    /// order -x, +x, -y, +y, -z, +z.
    pub fn add_box(&mut self, lo: Vec3, hi: Vec3) {
        let p = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
        let (a, b) = (lo, hi);
        self.add_quad([p(a.x, a.y, a.z), p(a.x, a.y, b.z), p(a.x, b.y, b.z), p(a.x, b.y, a.z)]);
        self.add_quad([p(b.x, a.y, a.z), p(b.x, b.y, a.z), p(b.x, b.y, b.z), p(b.x, a.y, b.z)]);
        self.add_quad([p(a.x, a.y, a.z), p(b.x, a.y, a.z), p(b.x, a.y, b.z), p(a.x, a.y, b.z)]);
        self.add_quad([p(a.x, b.y, a.z), p(a.x, b.y, b.z), p(b.x, b.y, b.z), p(b.x, b.y, a.z)]);
        self.add_quad([p(a.x, a.y, a.z), p(a.x, b.y, a.z), p(b.x, b.y, a.z), p(b.x, a.y, a.z)]);
        self.add_quad([p(a.x, a.y, b.z), p(b.x, a.y, b.z), p(b.x, b.y, b.z), p(a.x, b.y, b.z)]);
    }

    /// Adds a face with an explicit grid and oriented side samples.
    pub fn add_face_with_grid(&mut self, grid: FaceGrid, sides: [Vec<Vec3>; 4], tag: SurfaceTag) -> usize {
        let loop_edges = sides.into_iter().map(|s| self.edge_for(s)).collect();
        self.faces.push((grid, loop_edges, tag));
        self.faces.len() - 1
    }

    /// Copies a face of an existing model, reusing its grid and edge samples.
    pub fn add_existing_face(&mut self, model: &BRepModel, face: &Face) -> usize {
        let sides: Vec<Vec<Vec3>> = face
            .loop_edges
            .iter()
            .map(|le| model.edge(le.edge).expect("resolved edge").oriented_samples(le.forward))
            .collect();
        let loop_edges = sides.into_iter().map(|s| self.edge_for(s)).collect();
        self.faces.push((face.grid.clone(), loop_edges, face.surface_tag));
        self.faces.len() - 1
    }

    fn vertex_for(&mut self, p: Vec3) -> usize {
        if let Some(i) = self.vertices.iter().position(|v| (v - p).amax() <= WELD_TOLERANCE) {
            return i;
        }
        self.vertices.push(p);
        self.vertices.len() - 1
    }

    fn edge_for(&mut self, mut samples: Vec<Vec3>) -> LoopEdge {
        let a = self.vertex_for(samples[0]);
        let b = self.vertex_for(*samples.last().unwrap());
        let same = |x: &[Vec3], y: &mut dyn Iterator<Item = &Vec3>| {
            x.iter().zip(y).all(|(p, q)| (p - q).amax() <= EDGE_MATCH_TOLERANCE)
        };
        for (id, (ea, eb, es)) in self.edges.iter().enumerate() {
            if es.len() != samples.len() {
                continue;
            }
            if *ea == a && *eb == b && same(es, &mut samples.iter()) {
                return LoopEdge { edge: id as u32, forward: true };
            }
            if *ea == b && *eb == a && same(es, &mut samples.iter().rev()) {
                return LoopEdge { edge: id as u32, forward: false };
            }
        }
        samples[0] = self.vertices[a];
        let last = samples.len() - 1;
        samples[last] = self.vertices[b];
        self.edges.push((a, b, samples));
        LoopEdge {
            edge: (self.edges.len() - 1) as u32,
            forward: true,
        }
    }

    pub fn build(self) -> Result<BRepModel> {
        let vertices = self
            .vertices
            .into_iter()
            .enumerate()
            .map(|(i, position)| Vertex { id: i as u32, position })
            .collect();
        let edges = self
            .edges
            .into_iter()
            .enumerate()
            .map(|(i, (a, b, samples))| Edge {
                id: i as u32,
                samples,
                endpoints: [a as u32, b as u32],
            })
            .collect();
        let faces = self
            .faces
            .into_iter()
            .enumerate()
            .map(|(i, (grid, loop_edges, surface_tag))| Face {
                id: i as u32,
                grid,
                loop_edges,
                surface_tag,
            })
            .collect();
        BRepModel::new(vertices, edges, faces)
    }
}
