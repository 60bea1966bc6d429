//! Constructive edit-pair synthesis.
//!
//! A record pairs a block carrying a feature (`M_b`) with the same block
//! without it (`M_a`). Features are inserted by splitting a planar
//! rectangular host face into four frame faces around the footprint, then
//! adding the feature walls and its cap or floor.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{oracle_prompts, PromptSets};
use crate::brep::{
    parse_brep, sample_face_points, serialize_brep, BRepModel, Curve, Face, NormalizeTransform, ShellBuilder, SurfaceTag,
    Vec3, MAX_FACES,
};
use crate::codec::{encode_model, latents_to_bytes};
use crate::error::{Error, Result};
use crate::render::{compose_pair_image, project_bbox, render_model, select_best_view, BBox2D, Image, Viewpoint, IMAGE_SIZE};
use crate::validity::validity_report;

/// Smallest allowed distance between a footprint and its host boundary.
pub const MIN_MARGIN: f64 = 0.05;
const SAMPLE_MARGIN: f64 = 0.08;
const MULTI_OP_MARGIN: f64 = 0.15;
const MULTI_OP_MAX_DEPTH: f64 = 0.12;
const MAX_ATTEMPTS: usize = 16;
pub const MAX_OPS_PER_SHAPE: usize = 5;
const BASE_TOP_FACE: u32 = 5;
const EDITED_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Boss,
    Pocket,
    Slot,
    CylindricalHole,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [FeatureKind::Boss, FeatureKind::Pocket, FeatureKind::Slot, FeatureKind::CylindricalHole];

    pub fn noun(self) -> &'static str {
        match self {
            FeatureKind::Boss => "boss",
            FeatureKind::Pocket => "pocket",
            FeatureKind::Slot => "slot",
            FeatureKind::CylindricalHole => "cylindrical hole",
        }
    }

    pub fn is_cut(self) -> bool {
        self != FeatureKind::Boss
    }

    /// Faces gained by inserting the feature into a host face.
    pub fn face_delta(self) -> usize {
        8
    }
}

/// Feature placement on a host face.
///
/// `anchor` is the footprint center as fractions of the host's `(u, v)`
/// extents. `size` is `(width along u, width along v, height or depth)`; for
/// holes the two widths are the diameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub anchor: [f64; 2],
    pub size: [f64; 3],
    pub host_face_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationBucket {
    Center,
    FrontLeft,
    FrontRight,
    BackLeft,
    BackRight,
}

impl LocationBucket {
    pub fn from_anchor(anchor: [f64; 2]) -> Self {
        let (u, v) = (anchor[0], anchor[1]);
        if (u - 0.5).abs() < 1.0 / 6.0 && (v - 0.5).abs() < 1.0 / 6.0 {
            return LocationBucket::Center;
        }
        match (v < 0.5, u < 0.5) {
            (true, true) => LocationBucket::FrontLeft,
            (true, false) => LocationBucket::FrontRight,
            (false, true) => LocationBucket::BackLeft,
            (false, false) => LocationBucket::BackRight,
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            LocationBucket::Center => "at the center",
            LocationBucket::FrontLeft => "near the front-left corner",
            LocationBucket::FrontRight => "near the front-right corner",
            LocationBucket::BackLeft => "near the back-left corner",
            LocationBucket::BackRight => "near the back-right corner",
        }
    }
}

/// What the annotator needs to know about an inserted feature, in
/// normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescription {
    pub kind: FeatureKind,
    pub location: LocationBucket,
    pub host: String,
    pub size: [f64; 3],
    pub spec: FeatureSpec,
}

/// Orthonormal frame of a planar rectangular face.
#[derive(Debug, Clone, Copy)]
struct HostFrame {
    corners: [Vec3; 4],
    u: Vec3,
    v: Vec3,
    n: Vec3,
    lu: f64,
    lv: f64,
}

fn host_frame(face: &Face) -> Result<HostFrame> {
    if face.surface_tag != SurfaceTag::Planar {
        return Err(Error::NonPlanarHost(face.id));
    }
    let corners = face.grid.corners();
    let (du, dv) = (corners[1] - corners[0], corners[3] - corners[0]);
    let (lu, lv) = (du.norm(), dv.norm());
    if lu < 1e-9 || lv < 1e-9 {
        return Err(Error::NonPlanarHost(face.id));
    }
    let (u, v) = (du / lu, dv / lv);
    let n = u.cross(&v);
    let scale = lu.max(lv);
    let rectangular = u.dot(&v).abs() < 1e-9 && (corners[0] + du + dv - corners[2]).norm() < 1e-9 * scale;
    let flat = face.grid.points().iter().all(|p| (p - corners[0]).dot(&n).abs() < 1e-9 * scale);
    if !rectangular || !flat {
        return Err(Error::NonPlanarHost(face.id));
    }
    Ok(HostFrame { corners, u, v, n, lu, lv })
}

fn host_name(n: &Vec3) -> &'static str {
    let k = n.iamax();
    match (k, n[k] > 0.0) {
        (0, false) => "left",
        (0, true) => "right",
        (1, false) => "front",
        (1, true) => "back",
        (2, false) => "bottom",
        _ => "top",
    }
}

/// Extent of the model along `n`.
fn thickness(model: &BRepModel, n: &Vec3) -> f64 {
    let d = model.vertices().iter().map(|v| v.position.dot(n));
    let (lo, hi) = d.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
    hi - lo
}

/// Axis-aligned block with extents drawn from `[0.5, 1]`, centered at the origin.
pub fn generate_base_shape(seed: u64) -> BRepModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    base_from_rng(&mut rng)
}

fn base_from_rng(rng: &mut ChaCha8Rng) -> BRepModel {
    let ext = Vec3::new(rng.random_range(0.5..=1.0), rng.random_range(0.5..=1.0), rng.random_range(0.5..=1.0));
    let mut b = ShellBuilder::new();
    b.add_box(-ext * 0.5, ext * 0.5);
    b.build().expect("box is valid")
}

/// Face ids of an inserted feature in the model returned by [`apply_feature_tracked`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFaces {
    pub frame: [u32; 4],
    pub walls: [u32; 4],
    pub cap: u32,
    /// New id of every face of the input model (`None` for the host).
    pub id_map: Vec<(u32, Option<u32>)>,
}

impl FeatureFaces {
    /// Walls plus cap: the faces an inverse edit deletes.
    pub fn edited(&self) -> Vec<u32> {
        let mut ids = self.walls.to_vec();
        ids.push(self.cap);
        ids
    }
}

pub fn apply_feature(model: &BRepModel, spec: &FeatureSpec) -> Result<BRepModel> {
    apply_feature_tracked(model, spec).map(|(m, _)| m)
}

pub fn apply_feature_tracked(model: &BRepModel, spec: &FeatureSpec) -> Result<(BRepModel, FeatureFaces)> {
    let host = model.face(spec.host_face_id).ok_or(Error::UnknownFace(spec.host_face_id))?;
    let hf = host_frame(host)?;
    if spec.size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::invariant("positive feature size", format!("{:?}", spec.size)));
    }
    let (su, sv, h) = (spec.size[0], spec.size[1], spec.size[2]);
    let (cu, cv) = (spec.anchor[0] * hf.lu, spec.anchor[1] * hf.lv);
    let fits = |c: f64, s: f64, l: f64| c - s / 2.0 >= MIN_MARGIN - 1e-12 && c + s / 2.0 <= l - MIN_MARGIN + 1e-12;
    if !fits(cu, su, hf.lu) || !fits(cv, sv, hf.lv) {
        return Err(Error::FootprintOverflow(format!(
            "{:?} of size {su:.3}x{sv:.3} at ({cu:.3},{cv:.3}) on a {:.3}x{:.3} host",
            spec.kind, hf.lu, hf.lv
        )));
    }
    if spec.kind.is_cut() && h >= thickness(model, &hf.n) - MIN_MARGIN {
        return Err(Error::FootprintOverflow(format!("depth {h:.3} cuts through the part")));
    }
    if spec.kind == FeatureKind::CylindricalHole && (su - sv).abs() > 1e-12 {
        return Err(Error::invariant("round hole", format!("hole widths {su} and {sv}")));
    }

    let mut b = ShellBuilder::new();
    let mut id_map = Vec::with_capacity(model.face_count());
    for f in model.faces() {
        if f.id == host.id {
            id_map.push((f.id, None));
        } else {
            id_map.push((f.id, Some(b.add_existing_face(model, f) as u32)));
        }
    }
    let center = hf.corners[0] + hf.u * cu + hf.v * cv;
    let offset = if spec.kind.is_cut() { -hf.n * h } else { hf.n * h };
    let p = hf.corners;
    let frame: [u32; 4];
    let walls: [u32; 4];
    let cap: u32;
    if spec.kind == FeatureKind::CylindricalHole {
        let r = su / 2.0;
        let angle = |k: usize| 1.25 * PI + FRAC_PI_2 * k as f64;
        let arc = |c: Vec3, a0: f64, a1: f64| Curve::Arc {
            center: c,
            radius: r,
            e1: hf.u,
            e2: hf.v,
            start: a0,
            end: a1,
        };
        let q: [Vec3; 4] = std::array::from_fn(|k| center + (hf.u * angle(k).cos() + hf.v * angle(k).sin()) * r);
        let qd = q.map(|x| x + offset);
        let bottom = center + offset;
        frame = std::array::from_fn(|k| {
            let k1 = (k + 1) % 4;
            b.add_face(
                [
                    Curve::Line(p[k], p[k1]),
                    Curve::Line(p[k1], q[k1]),
                    arc(center, angle(k + 1), angle(k)),
                    Curve::Line(q[k], p[k]),
                ],
                SurfaceTag::Planar,
            ) as u32
        });
        walls = std::array::from_fn(|k| {
            let k1 = (k + 1) % 4;
            b.add_face(
                [
                    arc(center, angle(k), angle(k + 1)),
                    Curve::Line(q[k1], qd[k1]),
                    arc(bottom, angle(k + 1), angle(k)),
                    Curve::Line(qd[k], q[k]),
                ],
                SurfaceTag::Cylindrical,
            ) as u32
        });
        cap = b.add_face(std::array::from_fn(|k| arc(bottom, angle(k), angle(k + 1))), SurfaceTag::Planar) as u32;
    } else {
        let q: [Vec3; 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
            .map(|(a, c)| center + hf.u * (a * su / 2.0) + hf.v * (c * sv / 2.0));
        let qd = q.map(|x| x + offset);
        frame = std::array::from_fn(|k| {
            let k1 = (k + 1) % 4;
            b.add_quad([p[k], p[k1], q[k1], q[k]]) as u32
        });
        walls = std::array::from_fn(|k| {
            let k1 = (k + 1) % 4;
            b.add_quad([q[k], q[k1], qd[k1], qd[k]]) as u32
        });
        cap = b.add_quad(qd) as u32;
    }
    let out = b.build()?;
    Ok((out, FeatureFaces { frame, walls, cap, id_map }))
}

fn sample_spec(rng: &mut ChaCha8Rng, model: &BRepModel, host_id: u32, kind: FeatureKind, multi_op: bool) -> Result<FeatureSpec> {
    let host = model.face(host_id).ok_or(Error::UnknownFace(host_id))?;
    let hf = host_frame(host)?;
    let margin = if multi_op { MULTI_OP_MARGIN } else { SAMPLE_MARGIN };
    let (au, av) = (hf.lu - 2.0 * margin, hf.lv - 2.0 * margin);
    if au < 0.1 || av < 0.1 {
        return Err(Error::FootprintOverflow("host too small".into()));
    }
    let (su, sv) = match kind {
        FeatureKind::Boss | FeatureKind::Pocket => (rng.random_range(0.3..0.8) * au, rng.random_range(0.3..0.8) * av),
        FeatureKind::Slot => {
            let along_u = rng.random_bool(0.5);
            let (long_avail, short_avail) = if along_u { (au, av) } else { (av, au) };
            let long = rng.random_range(0.6..0.95) * long_avail;
            let short = (long / rng.random_range(2.5..3.5)).min(0.6 * short_avail);
            if along_u {
                (long, short)
            } else {
                (short, long)
            }
        }
        FeatureKind::CylindricalHole => {
            let d = rng.random_range(0.35..0.8) * au.min(av);
            (d, d)
        }
    };
    let depth_cap = if multi_op {
        MULTI_OP_MAX_DEPTH
    } else {
        0.45 * thickness(model, &hf.n)
    };
    let h = match kind {
        FeatureKind::Boss => rng.random_range(0.1..0.3f64).min(if multi_op { MULTI_OP_MAX_DEPTH } else { 1.0 }),
        _ => rng.random_range(0.35..0.95) * depth_cap,
    };
    let cu = margin + su / 2.0 + rng.random_range(0.0..=1.0) * (au - su);
    let cv = margin + sv / 2.0 + rng.random_range(0.0..=1.0) * (av - sv);
    Ok(FeatureSpec {
        kind,
        anchor: [cu / hf.lu, cv / hf.lv],
        size: [su, sv, h],
        host_face_id: host_id,
    })
}

/// Which way an edit goes: `Delete` maps `M_b` to `M_a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Delete,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Prompts for both edit directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedPrompts {
    pub delete: Vec<String>,
    pub add: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedText {
    pub delete: String,
    pub add: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRecord {
    pub record_id: String,
    pub model_before: BRepModel,
    pub model_after: BRepModel,
    pub direction: Direction,
    pub edited_face_ids: Vec<u32>,
    pub view: Viewpoint,
    pub bbox: BBox2D,
    pub image_before: Image,
    pub image_after: Image,
    pub user_prompts: DirectedPrompts,
    pub instruct_prompts: DirectedPrompts,
    pub summaries: DirectedText,
    pub split: Split,
    pub feature: FeatureDescription,
}

impl EditRecord {
    pub fn prompt_sets(&self) -> PromptSets {
        PromptSets {
            summary_fwd: self.summaries.delete.clone(),
            summary_rev: self.summaries.add.clone(),
            instructs_fwd: self.instruct_prompts.delete.clone(),
            instructs_rev: self.instruct_prompts.add.clone(),
            users_fwd: self.user_prompts.delete.clone(),
            users_rev: self.user_prompts.add.clone(),
        }
    }

    /// Source and target models for the chosen direction.
    pub fn oriented(&self, direction: Direction) -> (&BRepModel, &BRepModel) {
        match direction {
            Direction::Delete => (&self.model_before, &self.model_after),
            Direction::Add => (&self.model_after, &self.model_before),
        }
    }

    pub fn instruct(&self, direction: Direction) -> &str {
        match direction {
            Direction::Delete => &self.instruct_prompts.delete[0],
            Direction::Add => &self.instruct_prompts.add[0],
        }
    }

    pub fn user_prompt(&self, direction: Direction) -> &str {
        match direction {
            Direction::Delete => &self.user_prompts.delete[0],
            Direction::Add => &self.user_prompts.add[0],
        }
    }

    pub fn composite(&self) -> Result<Image> {
        compose_pair_image(&self.image_before, &self.image_after, &self.bbox)
    }
}

/// SplitMix64 finalizer used to derive per-record seeds.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Stack {
    full: BRepModel,
    without: BRepModel,
    edited: Vec<u32>,
    spec: FeatureSpec,
    host_normal: Vec3,
}

/// Applies `specs` in order, returning the final model and the feature faces
/// of `specs[target]` re-indexed into it.
fn stack_features(base: &BRepModel, specs: &[FeatureSpec], skip: Option<usize>) -> Result<(BRepModel, Vec<Vec<u32>>)> {
    let mut model = base.clone();
    let mut tracked: Vec<Vec<u32>> = Vec::new();
    // host ids refer to the base; remap them as faces get renumbered
    let mut base_ids: Vec<(u32, u32)> = base.faces().iter().map(|f| (f.id, f.id)).collect();
    for (k, spec) in specs.iter().enumerate() {
        if Some(k) == skip {
            tracked.push(Vec::new());
            continue;
        }
        let current = base_ids
            .iter()
            .find(|(b, _)| *b == spec.host_face_id)
            .map(|(_, c)| *c)
            .ok_or(Error::UnknownFace(spec.host_face_id))?;
        let (next, faces) = apply_feature_tracked(&model, &FeatureSpec { host_face_id: current, ..*spec })?;
        let remap = |id: u32| faces.id_map.iter().find(|(old, _)| *old == id).and_then(|(_, new)| *new);
        for ids in &mut tracked {
            for id in ids.iter_mut() {
                *id = remap(*id).expect("feature faces are never hosts");
            }
        }
        base_ids = base_ids.into_iter().filter_map(|(b, c)| remap(c).map(|n| (b, n))).collect();
        tracked.push(faces.edited());
        model = next;
    }
    Ok((model, tracked))
}

fn build_stack(seed: u64, ops: usize, target: usize) -> Result<Stack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = base_from_rng(&mut rng);
    let multi = ops > 1;
    let mut hosts: Vec<u32> = if multi {
        let mut all: Vec<u32> = (0..6).collect();
        all.shuffle(&mut rng);
        all.truncate(ops);
        all
    } else {
        vec![BASE_TOP_FACE]
    };
    hosts.sort_unstable();
    let mut specs = Vec::with_capacity(ops);
    for &host in &hosts {
        let kind = FeatureKind::ALL[rng.random_range(0..4)];
        let mut last_err = None;
        let mut chosen = None;
        for _ in 0..MAX_ATTEMPTS {
            let spec = sample_spec(&mut rng, &base, host, kind, multi)?;
            match apply_feature(&base, &spec) {
                Ok(_) => {
                    chosen = Some(spec);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let spec = chosen.ok_or_else(|| Error::Synthesis(format!("no feasible spec after {MAX_ATTEMPTS} tries: {last_err:?}")))?;
        specs.push(spec);
    }
    let (full, tracked) = stack_features(&base, &specs, None)?;
    let (without, _) = stack_features(&base, &specs, Some(target))?;
    let host_normal = base.face(specs[target].host_face_id).expect("host").grid.normal();
    Ok(Stack {
        full,
        without,
        edited: tracked[target].clone(),
        spec: specs[target],
        host_normal,
    })
}

/// Synthesizes one record with a single feature on the block's top face.
pub fn synthesize_pair(seed: u64) -> Result<EditRecord> {
    synthesize_op(seed, 1, 0, format!("s{seed:016x}"))
}

/// Record for operation `op` of a shape carrying `ops` stacked features.
pub fn synthesize_op(seed: u64, ops: usize, op: usize, record_id: String) -> Result<EditRecord> {
    if ops == 0 || ops > MAX_OPS_PER_SHAPE || op >= ops {
        return Err(Error::Config(format!("operation {op} of {ops} (at most {MAX_OPS_PER_SHAPE} per shape)")));
    }
    let stack = build_stack(seed, ops, op)?;
    if stack.full.face_count() > MAX_FACES {
        return Err(Error::Synthesis(format!("{} faces exceed the {MAX_FACES}-face filter", stack.full.face_count())));
    }
    let t = NormalizeTransform::fit(&stack.full)?;
    let before = t.apply(&stack.full);
    let after = t.apply(&stack.without);
    for (name, m) in [("before", &before), ("after", &after)] {
        let report = validity_report(m);
        if !report.valid {
            return Err(Error::Synthesis(format!("{name} model invalid: {report:?}")));
        }
    }
    let cap = *stack.edited.last().expect("cap face");
    let view = select_best_view(&before, cap)?;
    let samples: Vec<Vec3> = stack
        .edited
        .iter()
        .flat_map(|id| sample_face_points(before.face(*id).expect("edited face"), EDITED_SAMPLES))
        .collect();
    let bbox = project_bbox(&samples, &view, IMAGE_SIZE, IMAGE_SIZE)?;
    let s = stack.spec;
    let size = [s.size[0] * t.scale, s.size[1] * t.scale, s.size[2] * t.scale];
    let feature = FeatureDescription {
        kind: s.kind,
        location: LocationBucket::from_anchor(s.anchor),
        host: host_name(&stack.host_normal).to_owned(),
        size,
        spec: s,
    };
    let prompts = oracle_prompts(&feature);
    Ok(EditRecord {
        record_id,
        image_before: render_model(&before, &view),
        image_after: render_model(&after, &view),
        model_before: before,
        model_after: after,
        direction: Direction::Delete,
        edited_face_ids: stack.edited,
        view,
        bbox,
        user_prompts: DirectedPrompts {
            delete: prompts.users_fwd,
            add: prompts.users_rev,
        },
        instruct_prompts: DirectedPrompts {
            delete: prompts.instructs_fwd,
            add: prompts.instructs_rev,
        },
        summaries: DirectedText {
            delete: prompts.summary_fwd,
            add: prompts.summary_rev,
        },
        split: Split::Train,
        feature,
    })
}

/// One line of `records.jsonl`; model, image and latent fields hold paths
/// relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub record_id: String,
    pub seed: u64,
    pub op: usize,
    pub split: Split,
    pub direction: Direction,
    pub model_before: String,
    pub model_after: String,
    pub latents_before: String,
    pub latents_after: String,
    pub edited_face_ids: Vec<u32>,
    pub view: Viewpoint,
    pub bbox: BBox2D,
    pub image_before: String,
    pub image_after: String,
    pub composite: String,
    pub user_prompts: DirectedPrompts,
    pub instruct_prompts: DirectedPrompts,
    pub summaries: DirectedText,
    pub feature: FeatureDescription,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub ops_per_shape: usize,
    pub splits: SplitCounts,
    pub records: String,
    pub records_sha256: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";

/// Split assignment: indices ordered by a seeded hash; the first tenth goes
/// to validation, the next tenth to test, the rest to training.
pub fn assign_splits(count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| (mix(seed ^ 0x5911_7e11, i as u64), i));
    let tenth = ((count as f64) / 10.0).round() as usize;
    let mut out = vec![Split::Train; count];
    for (rank, &i) in order.iter().enumerate() {
        if rank < tenth {
            out[i] = Split::Val;
        } else if rank < 2 * tenth {
            out[i] = Split::Test;
        }
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes `count` records with their assets under `out_dir`.
pub fn build_dataset(count: usize, seed: u64, out_dir: &Path, ops_per_shape: usize) -> Result<Manifest> {
    if count < 10 {
        return Err(Error::Config(format!("dataset needs at least 10 records, got {count}")));
    }
    if ops_per_shape == 0 || ops_per_shape > MAX_OPS_PER_SHAPE {
        return Err(Error::Config(format!("ops per shape must be in 1..={MAX_OPS_PER_SHAPE}")));
    }
    let assets = out_dir.join("assets");
    fs::create_dir_all(&assets).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", assets.display()))))?;
    let splits = assign_splits(count, seed);
    let mut lines = String::new();
    let mut counts = SplitCounts { train: 0, val: 0, test: 0 };
    for (i, &split) in splits.iter().enumerate() {
        let (shape, op) = (i / ops_per_shape, i % ops_per_shape);
        let shape_seed = mix(seed, shape as u64);
        let id = format!("r{i:05}");
        let mut rec = synthesize_op(shape_seed, ops_per_shape, op, id.clone())?;
        rec.split = split;
        match split {
            Split::Train => counts.train += 1,
            Split::Val => counts.val += 1,
            Split::Test => counts.test += 1,
        }
        let rel = |suffix: &str| format!("assets/{id}_{suffix}");
        let entry = RecordEntry {
            record_id: id.clone(),
            seed: shape_seed,
            op,
            split,
            direction: rec.direction,
            model_before: rel("before.brj"),
            model_after: rel("after.brj"),
            latents_before: rel("before.lat"),
            latents_after: rel("after.lat"),
            edited_face_ids: rec.edited_face_ids.clone(),
            view: rec.view,
            bbox: rec.bbox,
            image_before: rel("before.pgm"),
            image_after: rel("after.pgm"),
            composite: rel("composite.pgm"),
            user_prompts: rec.user_prompts.clone(),
            instruct_prompts: rec.instruct_prompts.clone(),
            summaries: rec.summaries.clone(),
            feature: rec.feature.clone(),
        };
        write(&out_dir.join(&entry.model_before), serialize_brep(&rec.model_before).as_bytes())?;
        write(&out_dir.join(&entry.model_after), serialize_brep(&rec.model_after).as_bytes())?;
        write(&out_dir.join(&entry.latents_before), &latents_to_bytes(&encode_model(&rec.model_before)?))?;
        write(&out_dir.join(&entry.latents_after), &latents_to_bytes(&encode_model(&rec.model_after)?))?;
        write(&out_dir.join(&entry.image_before), &rec.image_before.to_pgm())?;
        write(&out_dir.join(&entry.image_after), &rec.image_after.to_pgm())?;
        write(&out_dir.join(&entry.composite), &rec.composite()?.to_pgm())?;
        lines.push_str(&serde_json::to_string(&entry)?);
        lines.push('\n');
    }
    write(&out_dir.join(RECORDS_FILE), lines.as_bytes())?;
    let manifest = Manifest {
        count,
        seed,
        ops_per_shape,
        splits: counts,
        records: RECORDS_FILE.into(),
        records_sha256: sha256_hex(lines.as_bytes()),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A dataset directory loaded back into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<EditRecord>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let read = |rel: &str| {
            let p = root.join(rel);
            fs::read(&p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
        let text = String::from_utf8(read(&manifest.records)?).map_err(|e| Error::Config(e.to_string()))?;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let e: RecordEntry = serde_json::from_str(line)?;
            let model = |rel: &str| -> Result<BRepModel> {
                parse_brep(&String::from_utf8(read(rel)?).map_err(|e| Error::Config(e.to_string()))?)
            };
            records.push(EditRecord {
                model_before: model(&e.model_before)?,
                model_after: model(&e.model_after)?,
                image_before: Image::from_pgm(&read(&e.image_before)?)?,
                image_after: Image::from_pgm(&read(&e.image_after)?)?,
                record_id: e.record_id,
                direction: e.direction,
                edited_face_ids: e.edited_face_ids,
                view: e.view,
                bbox: e.bbox,
                user_prompts: e.user_prompts,
                instruct_prompts: e.instruct_prompts,
                summaries: e.summaries,
                split: e.split,
                feature: e.feature,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&EditRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&EditRecord> {
        self.records.iter().find(|r| r.record_id == id)
    }
}
