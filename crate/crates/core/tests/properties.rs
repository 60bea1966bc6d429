use std::collections::HashMap;

use brepler_core::brep::{normalize, parse_brep, sample_face_points, serialize_brep, tessellate, BRepModel, Edge, Face, LoopEdge, Vec3, Vertex, GRID_SIZE};
use brepler_core::codec::{decode_face_latent, encode_face_latent, FaceLatent, LATENT_DIM};
use brepler_core::metrics::{bbox_distance, bbox_iou, hungarian, match_primitives, MATCH_THRESHOLD};
use brepler_core::render::BBox2D;
use brepler_core::synth::synthesize_pair;
use brepler_core::validity::{triangles_intersect, validity_report, GEOMETRIC_EPSILON};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_for(seed: u64) -> BRepModel {
    synthesize_pair(seed).expect("synthesis").model_before
}

/// Relabels every id through a seeded permutation, which also reorders storage.
fn reindex(m: &BRepModel, seed: u64) -> BRepModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = |ids: Vec<u32>| -> HashMap<u32, u32> {
        let mut fresh: Vec<u32> = (0..ids.len() as u32).map(|i| 1000 + 3 * i).collect();
        fresh.shuffle(&mut rng);
        ids.into_iter().zip(fresh).collect()
    };
    let vmap = perm(m.vertices().iter().map(|v| v.id).collect());
    let emap = perm(m.edges().iter().map(|e| e.id).collect());
    let fmap = perm(m.faces().iter().map(|f| f.id).collect());
    let vertices = m.vertices().iter().map(|v| Vertex { id: vmap[&v.id], position: v.position }).collect();
    let edges = m
        .edges()
        .iter()
        .map(|e| Edge {
            id: emap[&e.id],
            samples: e.samples.clone(),
            endpoints: e.endpoints.map(|v| vmap[&v]),
        })
        .collect();
    let faces = m
        .faces()
        .iter()
        .map(|f| Face {
            id: fmap[&f.id],
            grid: f.grid.clone(),
            loop_edges: f.loop_edges.iter().map(|le| LoopEdge { edge: emap[&le.edge], forward: le.forward }).collect(),
            surface_tag: f.surface_tag,
        })
        .collect();
    BRepModel::new(vertices, edges, faces).expect("relabeled model")
}

fn bbox_strategy() -> impl Strategy<Value = BBox2D> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
        .prop_map(|(x, y, w, h)| BBox2D::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

/// Separating-axis oracle: face normals plus the nine edge-pair cross products.
fn sat_intersect(a: &[Vec3; 3], b: &[Vec3; 3]) -> bool {
    let ea = [a[1] - a[0], a[2] - a[1], a[0] - a[2]];
    let eb = [b[1] - b[0], b[2] - b[1], b[0] - b[2]];
    let mut axes = vec![ea[0].cross(&ea[1]), eb[0].cross(&eb[1])];
    for x in &ea {
        for y in &eb {
            axes.push(x.cross(y));
        }
    }
    !axes.iter().filter(|ax| ax.norm() > 1e-12).any(|ax| {
        let span = |t: &[Vec3; 3]| {
            let d = t.map(|p| ax.dot(&p));
            (d[0].min(d[1]).min(d[2]), d[0].max(d[1]).max(d[2]))
        };
        let (a0, a1) = span(a);
        let (b0, b1) = span(b);
        a1 < b0 || b1 < a0
    })
}

fn tri(v: &[f64]) -> [Vec3; 3] {
    [Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]), Vec3::new(v[6], v[7], v[8])]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn brj_text_roundtrips(seed in any::<u64>()) {
        let m = model_for(seed);
        let text = serialize_brep(&m);
        let back = parse_brep(&text).unwrap();
        prop_assert!(back.approx_eq(&m, 1e-8));
        prop_assert_eq!(serialize_brep(&back), text);
    }

    #[test]
    fn normalize_is_idempotent_and_bounded(seed in any::<u64>(), scale in 0.1..20.0f64, shift in prop::array::uniform3(-5.0..5.0f64)) {
        let m = model_for(seed).map_points(|p| p * scale + Vec3::from(shift));
        let n = normalize(&m).unwrap();
        let (lo, hi) = n.bbox3d();
        prop_assert!(lo.iter().chain(hi.iter()).all(|c| c.abs() <= 1.0 + 1e-12));
        prop_assert!((hi - lo).max() > 2.0 - 1e-9);
        prop_assert!(normalize(&n).unwrap().approx_eq(&n, 1e-9));
    }

    #[test]
    fn tessellation_counts_and_partitions(seed in any::<u64>()) {
        let m = model_for(seed);
        let mesh = tessellate(&m);
        let per_face = 2 * (GRID_SIZE - 1) * (GRID_SIZE - 1);
        prop_assert_eq!(mesh.triangles.len(), m.face_count() * per_face);
        prop_assert_eq!(mesh.face_of_triangle.len(), mesh.triangles.len());
        for f in m.faces() {
            prop_assert_eq!(mesh.face_of_triangle.iter().filter(|&&id| id == f.id).count(), per_face);
        }
    }

    #[test]
    fn face_samples_are_deterministic(seed in any::<u64>(), count in 0usize..40) {
        let m = model_for(seed);
        for f in m.faces() {
            let a = sample_face_points(f, count);
            prop_assert_eq!(a.len(), count);
            prop_assert_eq!(a, sample_face_points(f, count));
        }
    }

    #[test]
    fn dropping_a_face_opens_the_shell(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let m = model_for(seed);
        prop_assert!(validity_report(&m).closed);
        let drop = pick.index(m.face_count());
        let faces: Vec<Face> = m.faces().iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, f)| f.clone()).collect();
        let open = BRepModel::new(m.vertices().to_vec(), m.edges().to_vec(), faces).unwrap();
        let r = validity_report(&open);
        prop_assert!(!r.closed);
        prop_assert!(!r.valid);
    }

    #[test]
    fn matching_ignores_ids_and_order(seed in any::<u64>(), relabel in any::<u64>()) {
        let m = model_for(seed);
        let r = reindex(&m, relabel);
        let s = match_primitives(&r, &m, MATCH_THRESHOLD);
        prop_assert!(s.is_perfect());
        prop_assert_eq!(s, match_primitives(&m, &m, MATCH_THRESHOLD));
    }

    #[test]
    fn synthesized_pairs_lose_faces_on_delete(seed in any::<u64>()) {
        let r = synthesize_pair(seed).unwrap();
        prop_assert!(r.model_before.face_count() > r.model_after.face_count());
        prop_assert!(validity_report(&r.model_before).valid);
        prop_assert!(validity_report(&r.model_after).valid);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hungarian_beats_identity_and_random_assignments(
        rows in 1usize..7,
        cols in 1usize..7,
        values in prop::collection::vec(0.0..10.0f64, 36),
        seed in any::<u64>(),
    ) {
        let cost: Vec<Vec<f64>> = (0..rows).map(|i| values[i * 6..i * 6 + cols].to_vec()).collect();
        let best = hungarian(&cost).unwrap();
        prop_assert_eq!(best.pairs.len(), rows.min(cols));
        let k = rows.min(cols);
        let identity: f64 = (0..k).map(|i| cost[i][i]).sum();
        prop_assert!(best.total_cost <= identity + 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r_idx: Vec<usize> = (0..rows).collect();
        let mut c_idx: Vec<usize> = (0..cols).collect();
        for _ in 0..1000 {
            r_idx.shuffle(&mut rng);
            c_idx.shuffle(&mut rng);
            let c: f64 = (0..k).map(|i| cost[r_idx[i]][c_idx[i]]).sum();
            prop_assert!(best.total_cost <= c + 1e-9);
        }
    }

    #[test]
    fn latent_roundtrip_is_identity(z in prop::array::uniform32(-100.0..100.0f64)) {
        let back = encode_face_latent(&decode_face_latent(&FaceLatent(z))).unwrap();
        for (a, b) in back.0.iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn latent_projection_is_idempotent(pts in prop::collection::vec(-3.0..3.0f64, GRID_SIZE * GRID_SIZE * 3)) {
        let grid = brepler_core::brep::FaceGrid::new(
            GRID_SIZE,
            pts.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        ).unwrap();
        let once = decode_face_latent(&encode_face_latent(&grid).unwrap());
        let twice = decode_face_latent(&encode_face_latent(&once).unwrap());
        for (a, b) in once.points().iter().zip(twice.points()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
        prop_assert_eq!(encode_face_latent(&grid).unwrap().0.len(), LATENT_DIM);
    }

    #[test]
    fn bbox_iou_symmetric_and_distance_is_a_metric(a in bbox_strategy(), b in bbox_strategy(), c in bbox_strategy()) {
        prop_assert_eq!(bbox_iou(&a, &b), bbox_iou(&b, &a));
        prop_assert!((bbox_iou(&a, &a) - 1.0).abs() < 1e-12);
        let (ab, bc, ac) = (bbox_distance(&a, &b), bbox_distance(&b, &c), bbox_distance(&a, &c));
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert_eq!(ab, bbox_distance(&b, &a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn triangle_test_agrees_with_separating_axes(
        a in prop::collection::vec(-1.0..1.0f64, 9),
        b in prop::collection::vec(-1.0..1.0f64, 9),
    ) {
        let (ta, tb) = (tri(&a), tri(&b));
        prop_assert_eq!(triangles_intersect(&ta, &tb, GEOMETRIC_EPSILON), sat_intersect(&ta, &tb));
    }
}
