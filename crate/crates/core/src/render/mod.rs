//! Viewpoints, an orthographic z-buffer rasterizer, view scoring and 2D box
//! projection.
//!
//! Every view uses the same orthographic frame: a square window of half-width
//! `FRAME_HALF_EXTENT` centered on the origin, which is the bounding sphere
//! of `[-1,1]^3` plus a 5% margin. Projection therefore never depends on the
//! mesh being drawn, so boxes projected from bare point lists line up with
//! rendered images.

mod image;

pub use image::{bbox_pixels, compose_pair_image, label_rect, BBox2D, Image, BACKGROUND, INK};

use serde::{Deserialize, Serialize};

use crate::brep::{sample_face_points, tessellate, BRepModel, TriangleMesh, Vec3};
use crate::error::{Error, Result};

pub const VIEW_COUNT: usize = 32;
pub const IMAGE_SIZE: usize = 224;
pub const FRAME_HALF_EXTENT: f64 = 1.818_653_347_947_321; // sqrt(3) * 1.05
pub const VISIBILITY_TOLERANCE: f64 = 1e-3;
pub const VIEW_SAMPLES: usize = 64;

const AMBIENT: f64 = 0.15;
const DIFFUSE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    /// Unit vector from the origin toward the camera.
    #[serde(with = "vec3_array")]
    pub direction: Vec3,
    #[serde(with = "vec3_array")]
    pub up: Vec3,
    pub index: usize,
}

pub(crate) mod vec3_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::brep::Vec3;

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::from(a))
    }
}

impl Viewpoint {
    /// Camera looking at the origin from `direction`. The up vector is world
    /// Z made orthogonal to the direction, or world X near the poles.
    pub fn from_direction(direction: Vec3, index: usize) -> Result<Self> {
        let d = direction
            .try_normalize(1e-12)
            .filter(|d| d.iter().all(|c| c.is_finite()))
            .ok_or_else(|| Error::invariant("nonzero view direction", format!("{direction:?}")))?;
        let mut up = Vec3::z() - d * d.z;
        if up.norm() < 1e-6 {
            up = Vec3::x() - d * d.x;
        }
        Ok(Self {
            direction: d,
            up: up.normalize(),
            index,
        })
    }

    pub fn right(&self) -> Vec3 {
        self.up.cross(&self.direction)
    }

    /// Screen-plane coordinates and depth (larger is nearer the camera).
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        (p.dot(&self.right()), p.dot(&self.up), p.dot(&self.direction))
    }
}

/// Fibonacci-sphere directions, `z_i = 1 - (2i+1)/32` with golden-angle azimuths.
pub fn isometric_views() -> Vec<Viewpoint> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..VIEW_COUNT)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / VIEW_COUNT as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Viewpoint::from_direction(Vec3::new(r * phi.cos(), r * phi.sin(), z), i).expect("unit direction")
        })
        .collect()
}

/// Pixel-space position of a point (`x` right, `y` down, pixel centers at `k + 0.5`).
pub fn to_pixel(view: &Viewpoint, p: &Vec3, width: usize, height: usize) -> (f64, f64, f64) {
    let (sx, sy, depth) = view.project(p);
    let scale = width.min(height) as f64 * 0.5 / FRAME_HALF_EXTENT;
    (width as f64 * 0.5 + sx * scale, height as f64 * 0.5 - sy * scale, depth)
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Barycentric weights of `p` when it lies inside the 2D triangle.
fn barycentric(t: &[(f64, f64); 3], p: (f64, f64)) -> Option<[f64; 3]> {
    let area = edge(t[0], t[1], t[2]);
    if area.abs() < 1e-14 {
        return None;
    }
    let w0 = edge(t[1], t[2], p) / area;
    let w1 = edge(t[2], t[0], p) / area;
    let w2 = edge(t[0], t[1], p) / area;
    (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0).then_some([w0, w1, w2])
}

pub fn rasterize(mesh: &TriangleMesh, view: &Viewpoint, width: usize, height: usize) -> Image {
    let mut img = Image::new(width, height);
    let mut depth = vec![f64::NEG_INFINITY; width * height];
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle(t);
        let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
        let Some(n) = n.try_normalize(1e-300) else { continue };
        let shade = AMBIENT + DIFFUSE * n.dot(&view.direction).abs();
        let proj = tri.map(|p| to_pixel(view, &p, width, height));
        let screen = proj.map(|(x, y, _)| (x, y));
        let xs = proj.iter().map(|p| p.0);
        let ys = proj.iter().map(|p| p.1);
        let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let (y_lo, y_hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let x0 = (x_lo - 0.5).ceil().max(0.0) as usize;
        let y0 = (y_lo - 0.5).ceil().max(0.0) as usize;
        let x1 = ((x_hi - 0.5).floor()).min(width as f64 - 1.0);
        let y1 = ((y_hi - 0.5).floor()).min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let Some(w) = barycentric(&screen, (x as f64 + 0.5, y as f64 + 0.5)) else { continue };
                let z = w[0] * proj[0].2 + w[1] * proj[1].2 + w[2] * proj[2].2;
                let k = y * width + x;
                if z > depth[k] {
                    depth[k] = z;
                    img.set(x, y, shade);
                }
            }
        }
    }
    img.set_depth(depth);
    img
}

pub fn render_model(model: &BRepModel, view: &Viewpoint) -> Image {
    rasterize(&tessellate(model), view, IMAGE_SIZE, IMAGE_SIZE)
}

/// Screen-space corners and depths of one triangle.
type ScreenTri = ([(f64, f64); 3], [f64; 3]);

/// Number of points that are not hidden behind any triangle of `mesh`.
pub fn visible_count(mesh: &TriangleMesh, view: &Viewpoint, points: &[Vec3]) -> usize {
    let tris: Vec<ScreenTri> = (0..mesh.triangles.len())
        .map(|t| {
            let p = mesh.triangle(t).map(|q| view.project(&q));
            (p.map(|(x, y, _)| (x, y)), p.map(|(_, _, z)| z))
        })
        .collect();
    points
        .iter()
        .filter(|q| {
            let (x, y, d) = view.project(q);
            tris.iter().all(|(s, z)| match barycentric(s, (x, y)) {
                Some(w) => w[0] * z[0] + w[1] * z[1] + w[2] * z[2] <= d + VISIBILITY_TOLERANCE,
                None => true,
            })
        })
        .count()
}

/// View revealing the most samples of `face_id`; ties go to the lowest index.
pub fn select_best_view(model: &BRepModel, face_id: u32) -> Result<Viewpoint> {
    let face = model.face(face_id).ok_or(Error::UnknownFace(face_id))?;
    let samples = sample_face_points(face, VIEW_SAMPLES);
    let mesh = tessellate(model);
    let mut best: Option<(usize, Viewpoint)> = None;
    for view in isometric_views() {
        let score = visible_count(&mesh, &view, &samples);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, view));
        }
    }
    Ok(best.expect("nonempty view set").1)
}

pub fn project_bbox(points: &[Vec3], view: &Viewpoint, width: usize, height: usize) -> Result<BBox2D> {
    if points.is_empty() {
        return Err(Error::Empty("points"));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        let (x, y, _) = to_pixel(view, p, width, height);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let nx = |v: f64| (v / width as f64).clamp(0.0, 1.0);
    let ny = |v: f64| (v / height as f64).clamp(0.0, 1.0);
    BBox2D::new(nx(x0), ny(y0), nx(x1), ny(y1))
}
