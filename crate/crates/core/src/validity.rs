//! Manifold / closed / self-intersection checks on the discrete model.

use serde::{Deserialize, Serialize};

use crate::brep::{tessellate, BRepModel, PrimitiveId, PrimitiveKind, Vec3, STITCH_TOLERANCE};
use crate::error::{Error, Result};

/// Tolerance of the triangle-triangle predicate.
pub const GEOMETRIC_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub manifold: bool,
    pub closed: bool,
    pub self_intersection_free: bool,
    pub valid: bool,
    pub offending_ids: Vec<PrimitiveId>,
}

pub fn validity_report(model: &BRepModel) -> ValidityReport {
    let mut offending = Vec::new();
    let mut manifold = true;
    let mut closed = true;
    for (edge, uses) in model.edge_uses() {
        let ok_manifold = uses.len() == 2 && uses[0].1 != uses[1].1;
        if uses.len() < 2 {
            closed = false;
        }
        if !ok_manifold {
            manifold = false;
            offending.push(PrimitiveId {
                kind: PrimitiveKind::Edge,
                id: edge,
            });
        }
    }

    let faces = intersecting_faces(model);
    let self_intersection_free = faces.is_empty();
    offending.extend(faces.into_iter().map(|id| PrimitiveId {
        kind: PrimitiveKind::Face,
        id,
    }));
    offending.sort();
    offending.dedup();
    ValidityReport {
        manifold,
        closed,
        self_intersection_free,
        valid: manifold && closed && self_intersection_free,
        offending_ids: offending,
    }
}

pub fn validity_ratio<'a>(models: impl IntoIterator<Item = &'a BRepModel>) -> Result<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for m in models {
        n += 1;
        ok += usize::from(validity_report(m).valid);
    }
    if n == 0 {
        return Err(Error::Empty("validity ratio over no models"));
    }
    Ok(ok as f64 / n as f64)
}

/// Ids of faces owning at least one intersecting triangle pair. Pairs that
/// share a vertex within the stitching tolerance count as adjacent and are
/// exempt.
fn intersecting_faces(model: &BRepModel) -> Vec<u32> {
    let mesh = tessellate(model);
    let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
    let boxes: Vec<(Vec3, Vec3)> = tris
        .iter()
        .map(|t| {
            let lo = t[0].inf(&t[1]).inf(&t[2]).add_scalar(-GEOMETRIC_EPSILON);
            let hi = t[0].sup(&t[1]).sup(&t[2]).add_scalar(GEOMETRIC_EPSILON);
            (lo, hi)
        })
        .collect();
    let mut hit = std::collections::BTreeSet::new();
    for i in 0..tris.len() {
        for j in i + 1..tris.len() {
            let (a, b) = (&boxes[i], &boxes[j]);
            if (0..3).any(|k| a.1[k] < b.0[k] || b.1[k] < a.0[k]) {
                continue;
            }
            if shares_vertex(&tris[i], &tris[j]) {
                continue;
            }
            if triangles_intersect(&tris[i], &tris[j], GEOMETRIC_EPSILON) {
                hit.insert(mesh.face_of_triangle[i]);
                hit.insert(mesh.face_of_triangle[j]);
            }
        }
    }
    hit.into_iter().collect()
}

fn shares_vertex(a: &[Vec3; 3], b: &[Vec3; 3]) -> bool {
    a.iter().any(|p| b.iter().any(|q| (p - q).norm() < STITCH_TOLERANCE))
}

/// Interval-overlap triangle-triangle test (closed triangles, so touching
/// counts as intersecting). Signed plane distances within `eps` snap to zero.
pub fn triangles_intersect(a: &[Vec3; 3], b: &[Vec3; 3], eps: f64) -> bool {
    let n2 = (b[1] - b[0]).cross(&(b[2] - b[0]));
    let dist_a = plane_distances(a, &n2, &b[0], eps);
    if same_side(&dist_a) {
        return false;
    }
    let n1 = (a[1] - a[0]).cross(&(a[2] - a[0]));
    let dist_b = plane_distances(b, &n1, &a[0], eps);
    if same_side(&dist_b) {
        return false;
    }
    if dist_a.iter().all(|d| *d == 0.0) {
        return coplanar_intersect(a, b, &n1);
    }
    let dir = n1.cross(&n2);
    let axis = dir.iamax();
    let proj_a = a.map(|p| p[axis]);
    let proj_b = b.map(|p| p[axis]);
    let (Some(ia), Some(ib)) = (interval(&proj_a, &dist_a), interval(&proj_b, &dist_b)) else {
        return coplanar_intersect(a, b, &n1);
    };
    ia.0 <= ib.1 && ib.0 <= ia.1
}

fn plane_distances(tri: &[Vec3; 3], n: &Vec3, origin: &Vec3, eps: f64) -> [f64; 3] {
    let len = n.norm();
    tri.map(|p| {
        let d = if len > 0.0 { n.dot(&(p - origin)) / len } else { 0.0 };
        if d.abs() <= eps {
            0.0
        } else {
            d
        }
    })
}

fn same_side(d: &[f64; 3]) -> bool {
    (d[0] > 0.0 && d[1] > 0.0 && d[2] > 0.0) || (d[0] < 0.0 && d[1] < 0.0 && d[2] < 0.0)
}

/// Segment where a triangle crosses the other's plane, projected on the
/// intersection line axis. `None` when all distances vanish.
fn interval(p: &[f64; 3], d: &[f64; 3]) -> Option<(f64, f64)> {
    let isolated = if d[0] * d[1] > 0.0 {
        2
    } else if d[0] * d[2] > 0.0 {
        1
    } else if d[1] * d[2] > 0.0 || d[0] != 0.0 {
        0
    } else if d[1] != 0.0 {
        1
    } else if d[2] != 0.0 {
        2
    } else {
        return None;
    };
    let (i, j) = ((isolated + 1) % 3, (isolated + 2) % 3);
    let k = isolated;
    let t1 = p[k] + (p[i] - p[k]) * d[k] / (d[k] - d[i]);
    let t2 = p[k] + (p[j] - p[k]) * d[k] / (d[k] - d[j]);
    Some((t1.min(t2), t1.max(t2)))
}

fn coplanar_intersect(a: &[Vec3; 3], b: &[Vec3; 3], n: &Vec3) -> bool {
    let drop = n.iamax();
    let (u, v) = match drop {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let a2 = a.map(|p| [p[u], p[v]]);
    let b2 = b.map(|p| [p[u], p[v]]);
    for i in 0..3 {
        for j in 0..3 {
            if segments_intersect(a2[i], a2[(i + 1) % 3], b2[j], b2[(j + 1) % 3]) {
                return true;
            }
        }
    }
    point_in_triangle(a2[0], &b2) || point_in_triangle(b2[0], &a2)
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: [f64; 2], b: [f64; 2], p: [f64; 2], d: f64| {
        d == 0.0 && p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

fn point_in_triangle(p: [f64; 2], t: &[[f64; 2]; 3]) -> bool {
    let d1 = orient(t[0], t[1], p);
    let d2 = orient(t[1], t[2], p);
    let d3 = orient(t[2], t[0], p);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brep::ShellBuilder;

    fn cube_at(lo: Vec3, size: f64) -> ShellBuilder {
        let mut b = ShellBuilder::new();
        b.add_box(lo, lo + Vec3::repeat(size));
        b
    }

    #[test]
    fn cube_is_valid() {
        let r = validity_report(&cube_at(Vec3::zeros(), 1.0).build().unwrap());
        assert!(r.manifold && r.closed && r.self_intersection_free && r.valid);
        assert!(r.offending_ids.is_empty());
    }

    #[test]
    fn open_box_is_not_closed() {
        let cube = cube_at(Vec3::zeros(), 1.0).build().unwrap();
        let mut b = ShellBuilder::new();
        for f in &cube.faces()[..5] {
            b.add_existing_face(&cube, f);
        }
        let open = b.build().unwrap();
        let r = validity_report(&open);
        assert!(!r.closed && !r.valid);
        // the four edges bounding the removed top face
        let top_edges: Vec<_> = open
            .edge_uses()
            .into_iter()
            .filter(|(_, u)| u.len() == 1)
            .map(|(e, _)| PrimitiveId { kind: PrimitiveKind::Edge, id: e })
            .collect();
        assert_eq!(top_edges.len(), 4);
        assert_eq!(r.offending_ids, top_edges);
        for id in &top_edges {
            let e = open.edge(id.id).unwrap();
            assert!(e.samples.iter().all(|p| (p.z - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn overlapping_cubes_self_intersect() {
        let mut b = cube_at(Vec3::zeros(), 1.0);
        b.add_box(Vec3::repeat(0.5), Vec3::repeat(1.5));
        let r = validity_report(&b.build().unwrap());
        assert!(r.manifold && r.closed);
        assert!(!r.self_intersection_free && !r.valid);
    }

    #[test]
    fn disjoint_cubes_are_valid() {
        let mut b = cube_at(Vec3::zeros(), 1.0);
        b.add_box(Vec3::repeat(2.0), Vec3::repeat(3.0));
        assert!(validity_report(&b.build().unwrap()).valid);
    }

    #[test]
    fn ratio_counts_valid_models() {
        let cube = cube_at(Vec3::zeros(), 1.0).build().unwrap();
        let mut b = ShellBuilder::new();
        for f in &cube.faces()[..5] {
            b.add_existing_face(&cube, f);
        }
        let open = b.build().unwrap();
        assert_eq!(validity_ratio([&cube, &cube]).unwrap(), 1.0);
        assert_eq!(validity_ratio([&cube, &open]).unwrap(), 0.5);
        assert!(validity_ratio(std::iter::empty()).is_err());
    }

    #[test]
    fn deleting_any_cube_face_opens_it() {
        let cube = cube_at(Vec3::zeros(), 1.0).build().unwrap();
        for skip in 0..6 {
            let mut b = ShellBuilder::new();
            for f in cube.faces().iter().filter(|f| f.id != skip) {
                b.add_existing_face(&cube, f);
            }
            assert!(!validity_report(&b.build().unwrap()).closed);
        }
    }

    #[test]
    fn coplanar_overlap_and_separation() {
        let t = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| {
            [Vec3::new(a[0], a[1], 0.0), Vec3::new(b[0], b[1], 0.0), Vec3::new(c[0], c[1], 0.0)]
        };
        let a = t([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]);
        assert!(triangles_intersect(&a, &t([0.2, 0.2], [2.0, 0.2], [0.2, 2.0]), 1e-7));
        assert!(!triangles_intersect(&a, &t([2.0, 2.0], [3.0, 2.0], [2.0, 3.0]), 1e-7));
        // contained
        assert!(triangles_intersect(&a, &t([0.1, 0.1], [0.2, 0.1], [0.1, 0.2]), 1e-7));
    }
}
