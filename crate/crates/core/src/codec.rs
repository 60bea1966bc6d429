//! Face latent codec and the deterministic image/text embedders that feed the
//! sequence model.
//!
//! A face grid is expanded in an orthonormal tensor-product Legendre basis
//! over the 4 grid nodes per axis. Coefficient slots are ordered by total
//! degree (ties by row degree) and interleaved across `x, y, z`; the first 32
//! slots are kept.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brep::{sample_face_points, BRepModel, FaceGrid, Vec3, GRID_SIZE};
use crate::error::{Error, Result};
use crate::render::{project_bbox, render_model, BBox2D, Image, Viewpoint, IMAGE_SIZE};

pub const LATENT_DIM: usize = 32;
pub const MAP_RES: usize = 16;
pub const IMG_DIM: usize = 64;
pub const TEXT_DIM: usize = 64;
pub const ROI_SIZE: usize = 2;
pub const ROI_DIM: usize = ROI_SIZE * ROI_SIZE * IMG_DIM;

const CELL_STATS: usize = 5;
const LIFT_SEED: u64 = 0x6272_6570_6c65_7231;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceLatent(pub [f64; LATENT_DIM]);

impl FaceLatent {
    pub fn zeros() -> Self {
        Self([0.0; LATENT_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; LATENT_DIM] = v
            .try_into()
            .map_err(|_| Error::Dimension(format!("latent of length {}", v.len())))?;
        Ok(Self(arr))
    }
}

/// Orthonormal discrete Legendre polynomials on 4 equispaced nodes, rows by degree.
fn legendre() -> [[f64; 4]; 4] {
    let a = 20f64.sqrt();
    [
        [0.5, 0.5, 0.5, 0.5],
        [-3.0 / a, -1.0 / a, 1.0 / a, 3.0 / a],
        [0.5, -0.5, -0.5, 0.5],
        [-1.0 / a, 3.0 / a, -3.0 / a, 1.0 / a],
    ]
}

/// `(row degree, column degree, channel)` for every retained slot.
pub fn latent_slots() -> &'static [(usize, usize, usize); LATENT_DIM] {
    static SLOTS: OnceLock<[(usize, usize, usize); LATENT_DIM]> = OnceLock::new();
    SLOTS.get_or_init(|| {
        let mut pairs: Vec<(usize, usize)> = (0..4).flat_map(|a| (0..4).map(move |b| (a, b))).collect();
        pairs.sort_by_key(|&(a, b)| (a + b, a));
        let mut out = [(0, 0, 0); LATENT_DIM];
        let all = pairs.iter().flat_map(|&(a, b)| (0..3).map(move |c| (a, b, c)));
        for (slot, v) in out.iter_mut().zip(all) {
            *slot = v;
        }
        out
    })
}

pub fn encode_face_latent(grid: &FaceGrid) -> Result<FaceLatent> {
    if grid.size() != GRID_SIZE {
        return Err(Error::Dimension(format!("codec needs a {GRID_SIZE}x{GRID_SIZE} grid, got {}", grid.size())));
    }
    let p = legendre();
    let mut z = [0.0; LATENT_DIM];
    for (slot, &(a, b, c)) in z.iter_mut().zip(latent_slots()) {
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                acc += grid.at(i, j)[c] * p[a][i] * p[b][j];
            }
        }
        *slot = acc;
    }
    Ok(FaceLatent(z))
}

pub fn decode_face_latent(latent: &FaceLatent) -> FaceGrid {
    let p = legendre();
    FaceGrid::from_fn(GRID_SIZE, |i, j| {
        let mut v = Vec3::zeros();
        for (&z, &(a, b, c)) in latent.0.iter().zip(latent_slots()) {
            v[c] += z * p[a][i] * p[b][j];
        }
        v
    })
}

pub fn encode_model(model: &BRepModel) -> Result<Vec<FaceLatent>> {
    model.faces().iter().map(|f| encode_face_latent(&f.grid)).collect()
}

/// Latents as consecutive little-endian f64 blocks.
pub fn latents_to_bytes(latents: &[FaceLatent]) -> Vec<u8> {
    latents.iter().flat_map(|l| l.0.iter().flat_map(|v| v.to_le_bytes())).collect()
}

pub fn latents_from_bytes(bytes: &[u8]) -> Result<Vec<FaceLatent>> {
    if !bytes.len().is_multiple_of(8 * LATENT_DIM) {
        return Err(Error::Dimension(format!("latent blob of {} bytes", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8 * LATENT_DIM)
        .map(|chunk| {
            let mut z = [0.0; LATENT_DIM];
            for (v, b) in z.iter_mut().zip(chunk.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().unwrap());
            }
            FaceLatent(z)
        })
        .collect())
}

/// `R x R x C` grid of image features, row-major from the top-left cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    res: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(res: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != res * res * channels || res == 0 {
            return Err(Error::Dimension(format!("feature map {res}x{res}x{channels} with {} values", data.len())));
        }
        Ok(Self { res, channels, data })
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let k = (row * self.res + col) * self.channels;
        &self.data[k..k + self.channels]
    }

    /// Bilinear value at continuous map coordinates, clamped to the grid.
    pub fn bilinear(&self, mx: f64, my: f64) -> Vec<f64> {
        let hi = (self.res - 1) as f64;
        let (mx, my) = (mx.clamp(0.0, hi), my.clamp(0.0, hi));
        let (c0, r0) = (mx.floor() as usize, my.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.res - 1), (r0 + 1).min(self.res - 1));
        let (fx, fy) = (mx - c0 as f64, my - r0 as f64);
        let mut out = vec![0.0; self.channels];
        for (w, r, c) in [
            ((1.0 - fx) * (1.0 - fy), r0, c0),
            (fx * (1.0 - fy), r0, c1),
            ((1.0 - fx) * fy, r1, c0),
            (fx * fy, r1, c1),
        ] {
            for (o, v) in out.iter_mut().zip(self.cell(r, c)) {
                *o += w * v;
            }
        }
        out
    }
}

/// Fixed `C x 5` matrix with orthonormal columns lifting cell statistics.
fn lift_matrix() -> &'static Vec<[f64; CELL_STATS]> {
    static LIFT: OnceLock<Vec<[f64; CELL_STATS]>> = OnceLock::new();
    LIFT.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(LIFT_SEED);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < CELL_STATS {
            let mut v: Vec<f64> = (0..IMG_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                cols.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        (0..IMG_DIM).map(|r| std::array::from_fn(|k| cols[k][r])).collect()
    })
}

fn cell_stats(img: &Image, row: usize, col: usize) -> [f64; CELL_STATS] {
    let cell = img.width() / MAP_RES;
    let (w, h) = (img.width(), img.height());
    let n = (cell * cell) as f64;
    let (mut sum, mut sq, mut dx, mut dy, mut cover) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in row * cell..(row + 1) * cell {
        for x in col * cell..(col + 1) * cell {
            let p = img.get(x, y);
            sum += p;
            sq += p * p;
            dx += (img.get((x + 1).min(w - 1), y) - p).abs();
            dy += (img.get(x, (y + 1).min(h - 1)) - p).abs();
            if p < 1.0 {
                cover += 1.0;
            }
        }
    }
    let mean = sum / n;
    [mean, (sq / n - mean * mean).max(0.0).sqrt(), dx / n, dy / n, cover / n]
}

/// Global descriptor and feature map of a 224x224 image.
pub fn image_embed(image: &Image) -> Result<(Vec<f64>, FeatureMap)> {
    if image.width() != IMAGE_SIZE || image.height() != IMAGE_SIZE {
        return Err(Error::Dimension(format!(
            "embedder needs {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let lift = lift_matrix();
    let mut data = Vec::with_capacity(MAP_RES * MAP_RES * IMG_DIM);
    let mut global = vec![0.0; IMG_DIM];
    for row in 0..MAP_RES {
        for col in 0..MAP_RES {
            let s = cell_stats(image, row, col);
            for (g, l) in global.iter_mut().zip(lift) {
                let v: f64 = l.iter().zip(&s).map(|(a, b)| a * b).sum();
                data.push(v);
                *g += v;
            }
        }
    }
    let cells = (MAP_RES * MAP_RES) as f64;
    global.iter_mut().for_each(|g| *g /= cells);
    Ok((global, FeatureMap::new(MAP_RES, IMG_DIM, data)?))
}

/// Point-sampled RoIAlign: `s x s` bilinear samples at regularly spaced
/// points inside `bbox`, concatenated row-major.
pub fn roi_align(map: &FeatureMap, bbox: &BBox2D, s: usize) -> Vec<f64> {
    let r = map.res() as f64;
    let mut out = Vec::with_capacity(s * s * map.channels());
    for ky in 0..s {
        for kx in 0..s {
            let u = bbox.x_min + (kx as f64 + 0.5) / s as f64 * (bbox.x_max - bbox.x_min);
            let v = bbox.y_min + (ky as f64 + 0.5) / s as f64 * (bbox.y_max - bbox.y_min);
            out.extend(map.bilinear(u * r - 0.5, v * r - 0.5));
        }
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Signed feature hashing of lowercase word tokens, L2-normalized.
pub fn text_embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; TEXT_DIM];
    for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = fnv1a(tok.to_lowercase().as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % TEXT_DIM as u64) as usize] += sign;
    }
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
    v
}

/// Everything the source sequence is built from, before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFeatures {
    pub latents: Vec<FaceLatent>,
    pub rois: Vec<Vec<f64>>,
    pub image_global: Vec<f64>,
    pub bbox: BBox2D,
    pub text: Vec<f64>,
}

impl SourceFeatures {
    /// Sequence length after projection: `N + 3`.
    pub fn len(&self) -> usize {
        self.latents.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetFeatures {
    pub latents: Vec<FaceLatent>,
    pub image_global: Vec<f64>,
}

impl TargetFeatures {
    /// Sequence length after projection: `2 + N' + 1`.
    pub fn len(&self) -> usize {
        self.latents.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Renders `model` under `view` and gathers per-face latents and RoI features.
pub fn source_features(model: &BRepModel, view: &Viewpoint, bbox: &BBox2D, text: &str) -> Result<SourceFeatures> {
    if model.face_count() == 0 {
        return Err(Error::Empty("source faces"));
    }
    let (image_global, map) = image_embed(&render_model(model, view))?;
    let mut latents = Vec::with_capacity(model.face_count());
    let mut rois = Vec::with_capacity(model.face_count());
    for face in model.faces() {
        latents.push(encode_face_latent(&face.grid)?);
        let face_box = project_bbox(&sample_face_points(face, 64), view, IMAGE_SIZE, IMAGE_SIZE)?;
        rois.push(roi_align(&map, &face_box, ROI_SIZE));
    }
    Ok(SourceFeatures {
        latents,
        rois,
        image_global,
        bbox: *bbox,
        text: text_embed(text),
    })
}

pub fn target_features(model: &BRepModel, view: &Viewpoint) -> Result<TargetFeatures> {
    if model.face_count() == 0 {
        return Err(Error::Empty("target faces"));
    }
    let (image_global, _) = image_embed(&render_model(model, view))?;
    Ok(TargetFeatures {
        latents: encode_model(model)?,
        image_global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_latent(rng: &mut ChaCha8Rng) -> FaceLatent {
        FaceLatent(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn basis_is_orthonormal() {
        let p = legendre();
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..4).map(|i| p[a][i] * p[b][i]).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn slot_order() {
        let s = latent_slots();
        assert_eq!(&s[..6], &[(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 0), (0, 1, 1), (0, 1, 2)]);
        assert_eq!(&s[30..], &[(1, 3, 0), (1, 3, 1)]);
    }

    #[test]
    fn constant_grid_has_only_degree_zero() {
        let g = FaceGrid::from_fn(4, |_, _| Vec3::new(0.3, -0.2, 0.9));
        let z = encode_face_latent(&g).unwrap();
        assert!(z.0[3..].iter().all(|v| v.abs() < 1e-15));
        assert!((z.0[0] - 0.3 * 4.0).abs() < 1e-14);
    }

    #[test]
    fn bilinear_grid_uses_low_slots_and_roundtrips() {
        let g = FaceGrid::from_fn(4, |i, j| {
            let (s, t) = (i as f64 / 3.0, j as f64 / 3.0);
            Vec3::new(s + 0.2 * s * t, t - 0.4 * s * t, 0.1 + 0.3 * s * t)
        });
        let z = encode_face_latent(&g).unwrap();
        for (v, &(a, b, _)) in z.0.iter().zip(latent_slots()) {
            if a > 1 || b > 1 {
                assert!(v.abs() < 1e-14);
            }
        }
        let back = decode_face_latent(&z);
        assert!(back.points().iter().zip(g.points()).all(|(p, q)| (p - q).amax() < 1e-12));
    }

    #[test]
    fn encode_decode_is_identity_on_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z = random_latent(&mut rng);
            let back = encode_face_latent(&decode_face_latent(&z)).unwrap();
            assert!(back.0.iter().zip(&z.0).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert!(decode_face_latent(&FaceLatent::zeros()).points().iter().all(|p| p.norm() == 0.0));
    }

    #[test]
    fn wrong_grid_size() {
        let g = FaceGrid::from_fn(3, |_, _| Vec3::zeros());
        assert!(matches!(encode_face_latent(&g), Err(Error::Dimension(_))));
    }

    #[test]
    fn latent_bytes_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = vec![random_latent(&mut rng), random_latent(&mut rng)];
        let bytes = latents_to_bytes(&z);
        assert_eq!(bytes.len(), 2 * 32 * 8);
        assert_eq!(latents_from_bytes(&bytes).unwrap(), z);
    }

    #[test]
    fn background_embedding() {
        let (g, map) = image_embed(&Image::new(224, 224)).unwrap();
        let lift = lift_matrix();
        for (k, v) in g.iter().enumerate() {
            assert!((v - lift[k][0]).abs() < 1e-12);
        }
        assert_eq!(map.res(), 16);
        assert_eq!(image_embed(&Image::new(224, 224)).unwrap().0, g);
        assert!(image_embed(&Image::new(100, 224)).is_err());
    }

    #[test]
    fn roi_on_constant_map_and_center() {
        let map = FeatureMap::new(16, 2, (0..512).map(|_| 0.7).collect()).unwrap();
        let b = BBox2D::new(0.1, 0.2, 0.6, 0.9).unwrap();
        assert!(roi_align(&map, &b, 2).iter().all(|v| (v - 0.7).abs() < 1e-15));

        let data: Vec<f64> = (0..16 * 16).map(|k| k as f64).collect();
        let map = FeatureMap::new(16, 1, data).unwrap();
        let full = BBox2D::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let center = roi_align(&map, &full, 1);
        // cells (7,7),(7,8),(8,7),(8,8) averaged
        let expected = (7.0 * 16.0 + 7.0 + 7.0 * 16.0 + 8.0 + 8.0 * 16.0 + 7.0 + 8.0 * 16.0 + 8.0) / 4.0;
        assert_eq!(center, vec![expected]);
    }

    #[test]
    fn text_embedding() {
        assert_eq!(text_embed(""), vec![0.0; 64]);
        let a = text_embed("Remove the boss");
        let n: f64 = a.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(a, text_embed("remove THE boss!"));
    }
}
