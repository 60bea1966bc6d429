//! Sequence-to-sequence latent modifier.
//!
//! The source sequence is `[face_1..face_N, image, bbox, text]`, every token a
//! learned projection of its feature. The target is
//! `[SoS, image, face'_1..face'_N', EoS]`. A causal decoder attends to the
//! encoded source; its output at position `p` predicts target token `p + 1`.
//! Gradients are computed by hand (see `nn`), which keeps the crate free of an
//! autodiff dependency and lets tests check them against finite differences.

mod net;
mod nn;
mod params;
mod stitch;
mod train;

pub use params::{ModifierParams, TensorInfo, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use stitch::{coons_correct, fit_surface_tag, stitch, MERGE_TOLERANCE, PLANAR_RESIDUAL};
pub use train::{train, EpochStats, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brep::BRepModel;
use crate::codec::{
    decode_face_latent, source_features, target_features, FaceLatent, SourceFeatures, TargetFeatures, IMG_DIM, LATENT_DIM,
    ROI_DIM, TEXT_DIM,
};
use crate::error::{Error, Result};
use crate::render::{BBox2D, Viewpoint};
use crate::synth::{Direction, EditRecord};
use crate::validity::{validity_report, ValidityReport};

/// Generation stops once an output lies this close to the end token.
pub const EOS_DISTANCE: f64 = 1.0;
/// Magnitude of the start/end sentinels on channel 0.
pub const SENTINEL: f64 = 3.0;

/// What the decoder is asked to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Source model in, edited model out.
    Edit,
    /// Source model in, the same model out.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: usize,
    /// Cosine floor as a fraction of the peak rate.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; zero disables it.
    pub grad_clip: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            max_epochs: 200,
            patience: 20,
            min_delta: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModifierConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Cap on the target length `N' + 3`, so at most `max_target_len - 3` faces.
    pub max_target_len: usize,
    pub positional: bool,
    pub task: Task,
    pub direction: Direction,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for ModifierConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            max_target_len: 64,
            positional: true,
            task: Task::Edit,
            direction: Direction::Delete,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl ModifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.max_target_len < 4 {
            return bad(format!("max_target_len {} < 4", self.max_target_len));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.epsilon > 0.0) {
            return bad("adam moments".into());
        }
        if !(0.0..=1.0).contains(&t.min_lr_ratio) || t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            return bad("schedule or regularization out of range".into());
        }
        Ok(())
    }
}

/// Feature toggles applied when the source sequence is assembled. A disabled
/// feature keeps its slot, with the token zeroed, so lengths stay `N + 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub image: bool,
    pub roi: bool,
    pub bbox: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            image: true,
            roi: true,
            bbox: true,
        }
    }
}

/// A `len x width` token sequence, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq {
    len: usize,
    width: usize,
    data: Vec<f64>,
}

impl Seq {
    pub fn new(len: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * width {
            return Err(Error::Dimension(format!("{len}x{width} sequence from {} values", data.len())));
        }
        Ok(Self { len, width, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_len(what: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension(format!("{what} has {} values, expected {n}", v.len())));
    }
    Ok(())
}

fn validate_source(f: &SourceFeatures) -> Result<()> {
    if f.latents.is_empty() {
        return Err(Error::Empty("source faces"));
    }
    if f.rois.len() != f.latents.len() {
        return Err(Error::Dimension(format!("{} RoIs for {} faces", f.rois.len(), f.latents.len())));
    }
    for r in &f.rois {
        check_len("RoI feature", r, ROI_DIM)?;
    }
    check_len("image feature", &f.image_global, IMG_DIM)?;
    check_len("text feature", &f.text, TEXT_DIM)
}

fn validate_target(f: &TargetFeatures) -> Result<()> {
    check_len("target image feature", &f.image_global, IMG_DIM)
}

fn flat_latents(latents: &[FaceLatent]) -> Vec<f64> {
    latents.iter().flat_map(|l| l.0).collect()
}

fn sentinel(width: usize, sign: f64) -> Vec<f64> {
    let mut v = vec![0.0; width];
    v[0] = sign * SENTINEL;
    v
}

pub fn start_token(width: usize) -> Vec<f64> {
    sentinel(width, 1.0)
}

pub fn end_token(width: usize) -> Vec<f64> {
    sentinel(width, -1.0)
}

/// `N + 3` projected source tokens (no position codes).
pub fn assemble_source(params: &ModifierParams, f: &SourceFeatures, ablation: &Ablation) -> Result<Seq> {
    validate_source(f)?;
    let a = &params.arch;
    let p = &params.data;
    let n = f.latents.len();
    let w = a.width;
    let mut data = nn::linear(p, a.proj_brep, &flat_latents(&f.latents), n);
    if ablation.roi {
        let rois: Vec<f64> = f.rois.iter().flatten().copied().collect();
        nn::add_assign(&mut data, &nn::linear(p, a.proj_roi, &rois, n));
    }
    let zero = vec![0.0; w];
    data.extend(if ablation.image { nn::linear(p, a.proj_img, &f.image_global, 1) } else { zero.clone() });
    data.extend(if ablation.bbox { nn::linear(p, a.proj_box, &f.bbox.to_array(), 1) } else { zero });
    data.extend(nn::linear(p, a.proj_text, &f.text, 1));
    Seq::new(n + 3, w, data)
}

/// `N' + 3` target tokens (no position codes).
pub fn assemble_target(params: &ModifierParams, f: &TargetFeatures) -> Result<Seq> {
    validate_target(f)?;
    let a = &params.arch;
    let p = &params.data;
    let w = a.width;
    let mut data = start_token(w);
    data.extend(nn::linear(p, a.proj_img_tgt, &f.image_global, 1));
    data.extend(nn::linear(p, a.proj_brep_tgt, &flat_latents(&f.latents), f.latents.len()));
    data.extend(end_token(w));
    Seq::new(f.latents.len() + 3, w, data)
}

fn check_width(params: &ModifierParams, s: &Seq) -> Result<()> {
    if s.width != params.config.width {
        return Err(Error::Dimension(format!("sequence width {} vs model width {}", s.width, params.config.width)));
    }
    if s.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    Ok(())
}

fn check_target_len(params: &ModifierParams, len: usize) -> Result<()> {
    if len > params.config.max_target_len {
        return Err(Error::Dimension(format!(
            "target of {len} tokens exceeds max_target_len {}",
            params.config.max_target_len
        )));
    }
    Ok(())
}

fn with_positions(params: &ModifierParams, mut x: Vec<f64>, rows: usize) -> Vec<f64> {
    if params.config.positional {
        nn::add_positions(&mut x, rows, params.config.width);
    }
    x
}

/// Encoder memory for an assembled source sequence.
pub fn encode_source(params: &ModifierParams, source: &Seq) -> Result<Seq> {
    check_width(params, source)?;
    let x = with_positions(params, source.data.clone(), source.len);
    let (mem, _) = net::encode(&params.data, &params.arch, x, source.len);
    Seq::new(source.len, source.width, mem)
}

/// Decoder outputs for teacher forcing: row `r` is the prediction of target token `r + 1`.
pub fn decode_teacher_forced(params: &ModifierParams, memory: &Seq, target: &Seq) -> Result<Seq> {
    check_width(params, memory)?;
    check_width(params, target)?;
    if target.len < 2 {
        return Err(Error::Dimension("target needs at least start and end tokens".into()));
    }
    check_target_len(params, target.len)?;
    let rows = target.len - 1;
    let x = with_positions(params, target.data[..rows * target.width].to_vec(), rows);
    let (y, _) = net::decode(&params.data, &params.arch, x, rows, &memory.data, memory.len);
    Seq::new(rows, target.width, y)
}

/// Mean squared error over every predicted value: the image token and end
/// token in token space, face tokens after `proj_out` in latent space.
pub fn loss(params: &ModifierParams, predictions: &Seq, target: &Seq, target_latents: &[FaceLatent]) -> Result<f64> {
    let n = target_latents.len();
    if target.len != n + 3 || predictions.len != n + 2 || predictions.width != target.width {
        return Err(Error::Dimension(format!(
            "{} predictions and {} target tokens for {n} faces",
            predictions.len, target.len
        )));
    }
    let w = predictions.width;
    let mut sse = sq_dist(predictions.row(0), target.row(1));
    let faces = nn::linear(&params.data, params.arch.proj_out, &predictions.data[w..(n + 1) * w], n);
    sse += faces
        .iter()
        .zip(target_latents.iter().flat_map(|l| l.0.iter()))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    sse += sq_dist(predictions.row(n + 1), &end_token(w));
    Ok(sse / loss_count(w, n) as f64)
}

fn loss_count(width: usize, faces: usize) -> usize {
    2 * width + LATENT_DIM * faces
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A training pair with its features already extracted.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub source: SourceFeatures,
    pub target: TargetFeatures,
}

impl Sample {
    pub fn from_record(record: &EditRecord, direction: Direction, task: Task) -> Result<Self> {
        let (src, tgt) = record.oriented(direction);
        let tgt = match task {
            Task::Edit => tgt,
            Task::Identity => src,
        };
        Ok(Self {
            id: record.record_id.clone(),
            source: source_features(src, &record.view, &record.bbox, record.instruct(direction))?,
            target: target_features(tgt, &record.view)?,
        })
    }
}

/// Loss of one sample; adds `d loss / d params` into `grad` when given.
pub fn sample_loss(params: &ModifierParams, sample: &Sample, grad: Option<&mut [f64]>) -> Result<f64> {
    let ablation = Ablation::default();
    let src = assemble_source(params, &sample.source, &ablation)?;
    let tgt = assemble_target(params, &sample.target)?;
    check_target_len(params, tgt.len)?;
    let p = &params.data;
    let a = &params.arch;
    let w = a.width;
    let (ls, lt) = (src.len, tgt.len);
    let n = sample.target.latents.len();

    let (mem, enc_cache) = net::encode(p, a, with_positions(params, src.data.clone(), ls), ls);
    let rows = lt - 1;
    let (y, dec_cache) = net::decode(p, a, with_positions(params, tgt.data[..rows * w].to_vec(), rows), rows, &mem, ls);
    let face_in = &y[w..(n + 1) * w];
    let faces = nn::linear(p, a.proj_out, face_in, n);
    let count = loss_count(w, n) as f64;
    let lat = flat_latents(&sample.target.latents);
    let eos = end_token(w);
    let img_t = tgt.row(1);
    let sse = sq_dist(&y[..w], img_t) + sq_dist(&faces, &lat) + sq_dist(&y[(n + 1) * w..], &eos);
    let value = sse / count;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss of sample {}", sample.id)));
    }
    let Some(grad) = grad else { return Ok(value) };

    let s = 2.0 / count;
    let mut dy = vec![0.0; rows * w];
    for i in 0..w {
        dy[i] = s * (y[i] - img_t[i]);
        dy[(n + 1) * w + i] = s * (y[(n + 1) * w + i] - eos[i]);
    }
    let dfaces: Vec<f64> = faces.iter().zip(&lat).map(|(a, b)| s * (a - b)).collect();
    if n > 0 {
        let dface_in = nn::linear_back(p, grad, a.proj_out, face_in, &dfaces, n, true).unwrap();
        dy[w..(n + 1) * w].copy_from_slice(&dface_in);
    }
    let (dx, dmem) = net::decode_back(p, grad, a, &dec_cache, &dy);
    // Token 1 is both a decoder input and the image-token target.
    let mut dimg: Vec<f64> = dx[w..2 * w].to_vec();
    for i in 0..w {
        dimg[i] -= dy[i];
    }
    nn::linear_back(p, grad, a.proj_img_tgt, &sample.target.image_global, &dimg, 1, false);
    if n > 0 {
        let tgt_lat = flat_latents(&sample.target.latents);
        nn::linear_back(p, grad, a.proj_brep_tgt, &tgt_lat, &dx[2 * w..(n + 2) * w], n, false);
    }

    let dsrc = net::encode_back(p, grad, a, &enc_cache, &dmem);
    let m = sample.source.latents.len();
    let dfaces_src = &dsrc[..m * w];
    nn::linear_back(p, grad, a.proj_brep, &flat_latents(&sample.source.latents), dfaces_src, m, false);
    let rois: Vec<f64> = sample.source.rois.iter().flatten().copied().collect();
    nn::linear_back(p, grad, a.proj_roi, &rois, dfaces_src, m, false);
    nn::linear_back(p, grad, a.proj_img, &sample.source.image_global, &dsrc[m * w..(m + 1) * w], 1, false);
    nn::linear_back(p, grad, a.proj_box, &sample.source.bbox.to_array(), &dsrc[(m + 1) * w..(m + 2) * w], 1, false);
    nn::linear_back(p, grad, a.proj_text, &sample.source.text, &dsrc[(m + 2) * w..(m + 3) * w], 1, false);
    Ok(value)
}

/// Full analytic gradient of the sample loss.
pub fn gradient(params: &ModifierParams, sample: &Sample) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; params.len()];
    let l = sample_loss(params, sample, Some(&mut g))?;
    Ok((l, g))
}

/// Finite-difference step and relative-error floor for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_tensor: String,
}

/// Compares analytic gradients with central differences on `count` parameters,
/// cycling through tensors so every tensor is probed.
pub fn grad_check(params: &ModifierParams, sample: &Sample, count: usize, seed: u64) -> Result<GradCheckReport> {
    let (_, analytic) = gradient(params, sample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = params.tensors().to_vec();
    let mut probe = params.clone();
    let mut worst = (0.0f64, String::new());
    for k in 0..count {
        let t = &tensors[k % tensors.len()];
        let idx = t.offset + rng.random_range(0..t.len());
        let orig = probe.data[idx];
        probe.data[idx] = orig + GRAD_CHECK_STEP;
        let up = sample_loss(&probe, sample, None)?;
        probe.data[idx] = orig - GRAD_CHECK_STEP;
        let down = sample_loss(&probe, sample, None)?;
        probe.data[idx] = orig;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, t.name.clone());
        }
    }
    Ok(GradCheckReport {
        checked: count,
        max_relative_error: worst.0,
        worst_tensor: worst.1,
    })
}

/// Autoregressive decoding from an assembled source sequence.
///
/// Step 1 emits the image token; every later output either lies within
/// [`EOS_DISTANCE`] of the end token or becomes a face latent via `proj_out`.
/// Running into `max_target_len` without an end token is [`Error::Truncated`].
pub fn generate(params: &ModifierParams, source: &Seq) -> Result<Vec<FaceLatent>> {
    let memory = encode_source(params, source)?;
    let p = &params.data;
    let a = &params.arch;
    let w = a.width;
    let eos = end_token(w);
    let mut inputs = start_token(w);
    let mut latents = Vec::new();
    for pos in 1..params.config.max_target_len {
        let rows = pos;
        let x = with_positions(params, inputs.clone(), rows);
        let (y, _) = net::decode(p, a, x, rows, &memory.data, memory.len);
        let out = &y[(rows - 1) * w..];
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder output".into()));
        }
        if pos == 1 {
            inputs.extend_from_slice(out);
            continue;
        }
        if sq_dist(out, &eos).sqrt() < EOS_DISTANCE {
            return Ok(latents);
        }
        if pos == params.config.max_target_len - 1 {
            break;
        }
        let latent: [f64; LATENT_DIM] = nn::linear(p, a.proj_out, out, 1).try_into().unwrap();
        let latent = FaceLatent(latent);
        inputs.extend(nn::linear(p, a.proj_brep_tgt, &latent.0, 1));
        latents.push(latent);
    }
    Err(Error::Truncated { partial: latents })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct EditOptions {
    pub ablation: Ablation,
}


#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub model: BRepModel,
    pub report: ValidityReport,
    pub latents: Vec<FaceLatent>,
}

/// Localized edit: features from `model` under `view`, generation, stitching.
pub fn edit(model: &BRepModel, view: &Viewpoint, bbox: &BBox2D, instruct: &str, params: &ModifierParams, options: &EditOptions) -> Result<EditOutcome> {
    let features = source_features(model, view, bbox, instruct)?;
    let source = assemble_source(params, &features, &options.ablation)?;
    let latents = generate(params, &source)?;
    if latents.is_empty() {
        return Err(Error::Empty("generated faces"));
    }
    let grids: Vec<_> = latents.iter().map(decode_face_latent).collect();
    let model = stitch(&grids)?;
    let report = validity_report(&model);
    Ok(EditOutcome { model, report, latents })
}
