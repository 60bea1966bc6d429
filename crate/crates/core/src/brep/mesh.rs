use serde::Serialize;

use super::{BRepModel, Vec3};

const MIN_AREA: f64 = 1e-14;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TriangleMesh {
    #[serde(serialize_with = "ser_points")]
    pub positions: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub face_of_triangle: Vec<u32>,
}

fn ser_points<S: serde::Serializer>(pts: &[Vec3], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(pts.len()))?;
    for p in pts {
        seq.serialize_element(&[p.x, p.y, p.z])?;
    }
    seq.end()
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.positions[i as usize])
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }
}

fn area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Two triangles per grid cell, wound like the face loop.
///
/// Cells split along the `(i,j)-(i+1,j+1)` diagonal; a cell falls back to the
/// other diagonal when that would produce a degenerate triangle, and
/// triangles that stay degenerate are dropped.
pub fn tessellate(model: &BRepModel) -> TriangleMesh {
    let mut mesh = TriangleMesh::default();
    for face in model.faces() {
        let g = &face.grid;
        let n = g.size();
        let base = mesh.positions.len() as u32;
        mesh.positions.extend_from_slice(g.points());
        let idx = |i: usize, j: usize| base + (i * n + j) as u32;
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let (p00, p01, p11, p10) = (g.at(i, j), g.at(i, j + 1), g.at(i + 1, j + 1), g.at(i + 1, j));
                let main = [
                    ([idx(i, j), idx(i, j + 1), idx(i + 1, j + 1)], area(&p00, &p01, &p11)),
                    ([idx(i, j), idx(i + 1, j + 1), idx(i + 1, j)], area(&p00, &p11, &p10)),
                ];
                let alt = [
                    ([idx(i, j), idx(i, j + 1), idx(i + 1, j)], area(&p00, &p01, &p10)),
                    ([idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j)], area(&p01, &p11, &p10)),
                ];
                let min = |t: &[([u32; 3], f64); 2]| t[0].1.min(t[1].1);
                let chosen = if min(&main) <= MIN_AREA && min(&alt) > min(&main) { alt } else { main };
                for (tri, a) in chosen {
                    if a > MIN_AREA {
                        mesh.triangles.push(tri);
                        mesh.face_of_triangle.push(face.id);
                    }
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brep::ShellBuilder;

    #[test]
    fn triangle_counts() {
        let mut b = ShellBuilder::new();
        b.add_quad([Vec3::zeros(), Vec3::x(), Vec3::new(1.0, 1.0, 0.0), Vec3::y()]);
        assert_eq!(tessellate(&b.build().unwrap()).triangles.len(), 18);

        let mut b = ShellBuilder::new();
        b.add_box(Vec3::zeros(), Vec3::repeat(1.0));
        let cube = b.build().unwrap();
        let mesh = tessellate(&cube);
        assert_eq!(mesh.triangles.len(), 108);
        for f in 0..6 {
            assert_eq!(mesh.face_of_triangle.iter().filter(|&&x| x == f).count(), 18);
        }
        assert!((0..mesh.triangles.len()).all(|t| mesh.area(t) > 0.0));
    }

    #[test]
    fn winding_follows_face_normal() {
        let mut b = ShellBuilder::new();
        b.add_box(Vec3::zeros(), Vec3::repeat(1.0));
        let cube = b.build().unwrap();
        let mesh = tessellate(&cube);
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangle(t);
            let n = (b - a).cross(&(c - a));
            let face = cube.face(mesh.face_of_triangle[t]).unwrap();
            assert!(n.dot(&face.grid.normal()) > 0.0);
        }
    }
}
