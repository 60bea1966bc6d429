//! Edit quality metrics: Chamfer distance, minimum-cost assignment,
//! per-primitive precision/recall/F1 and set-level aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::brep::{BRepModel, Vec3};
use crate::codec::text_embed;
use crate::error::{Error, Result};
use crate::render::BBox2D;
use crate::validity::{validity_report, ValidityReport};

pub const MATCH_THRESHOLD: f64 = 0.1;

fn nearest_mean(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.len() as f64
}

/// Half the sum of the two directed mean nearest-neighbor distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer point set"));
    }
    Ok(0.5 * (nearest_mean(a, b) + nearest_mean(b, a)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of size `min(m, n)` (shortest augmenting paths
/// with row/column potentials).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let a = |i: usize, j: usize| if transposed { cost[j][i] } else { cost[i][j] };

    // 1-based arrays; p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(Assignment { pairs, total_cost })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub fn from_counts(correct: usize, predicted: usize, truth: usize) -> Self {
        if predicted == 0 && truth == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |n: usize| if n == 0 { 0.0 } else { correct as f64 / n as f64 };
        let (precision, recall) = (ratio(predicted), ratio(truth));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchScores {
    pub faces: Scores,
    pub edges: Scores,
    pub vertices: Scores,
}

impl MatchScores {
    pub fn is_perfect(&self) -> bool {
        self.faces.f1 == 1.0 && self.edges.f1 == 1.0 && self.vertices.f1 == 1.0
    }
}

fn match_sets(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], threshold: f64) -> Result<Scores> {
    let cost: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| gt.iter().map(|g| chamfer(p, g)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let assignment = hungarian(&cost)?;
    let correct = assignment.pairs.iter().filter(|&&(r, c)| cost[r][c] < threshold).count();
    Ok(Scores::from_counts(correct, pred.len(), gt.len()))
}

fn primitive_points(model: &BRepModel) -> [Vec<Vec<Vec3>>; 3] {
    [
        model.faces().iter().map(|f| f.grid.points().to_vec()).collect(),
        model.edges().iter().map(|e| e.samples.clone()).collect(),
        model.vertices().iter().map(|v| vec![v.position]).collect(),
    ]
}

/// Per-type scores after Chamfer-cost assignment; a pair counts as correct
/// when its cost is below `threshold`.
pub fn match_primitives(pred: &BRepModel, gt: &BRepModel, threshold: f64) -> MatchScores {
    let [pf, pe, pv] = primitive_points(pred);
    let [gf, ge, gv] = primitive_points(gt);
    let run = |p: &[Vec<Vec3>], g: &[Vec<Vec3>]| match_sets(p, g, threshold).expect("finite primitive samples");
    MatchScores {
        faces: run(&pf, &gf),
        edges: run(&pe, &ge),
        vertices: run(&pv, &gv),
    }
}

/// F1 of exactly 1 for faces, edges and vertices.
pub fn is_success(pred: &BRepModel, gt: &BRepModel) -> bool {
    match_primitives(pred, gt, MATCH_THRESHOLD).is_perfect()
}

pub fn bbox_iou(a: &BBox2D, b: &BBox2D) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Center distance over the unit-square diagonal.
pub fn bbox_distance(a: &BBox2D, b: &BBox2D) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).hypot(ay - by) / std::f64::consts::SQRT_2).min(1.0)
}

pub fn text_cosine(a: &str, b: &str) -> f64 {
    let (ea, eb) = (text_embed(a), text_embed(b));
    let na = ea.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = eb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (ea.iter().zip(&eb).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

/// Localizer outputs paired with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Outputs {
    pub pred_bbox: BBox2D,
    pub gt_bbox: BBox2D,
    pub pred_text: String,
    pub gt_text: String,
}

#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    /// `None` when the edit produced no model at all.
    pub pred: Option<BRepModel>,
    pub gt: BRepModel,
    pub stage1: Option<Stage1Outputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub scores: Option<MatchScores>,
    pub success: bool,
    pub validity: Option<ValidityReport>,
    pub bbox_iou: Option<f64>,
    pub bbox_distance: Option<f64>,
    pub text_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub validity: f64,
    pub success: f64,
    pub f1: [f64; 3],
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub reproducible: bool,
}

pub fn published_reference() -> ReferenceRow {
    ReferenceRow {
        label: "published full-scale result".into(),
        validity: 0.698,
        success: 0.534,
        f1: [0.914, 0.892, 0.886],
        precision: [0.920, 0.887, 0.891],
        recall: [0.911, 0.900, 0.884],
        reproducible: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub count: usize,
    pub valid_count: usize,
    pub validity: f64,
    /// Successes over every pair.
    pub success: f64,
    /// Successes over valid predictions only.
    pub success_valid_only: f64,
    /// Means over valid predictions.
    pub faces: Scores,
    pub edges: Scores,
    pub vertices: Scores,
    pub bbox_iou: Option<f64>,
    pub bbox_distance: Option<f64>,
    pub text_cosine: Option<f64>,
    pub reference: ReferenceRow,
    pub records: Vec<MetricsReport>,
}

pub fn evaluate_pair(pair: &EvalPair) -> MetricsReport {
    let (scores, validity) = match &pair.pred {
        Some(pred) => (Some(match_primitives(pred, &pair.gt, MATCH_THRESHOLD)), Some(validity_report(pred))),
        None => (None, None),
    };
    let s1 = pair.stage1.as_ref();
    MetricsReport {
        id: pair.id.clone(),
        success: scores.is_some_and(|s| s.is_perfect()),
        scores,
        validity,
        bbox_iou: s1.map(|s| bbox_iou(&s.pred_bbox, &s.gt_bbox)),
        bbox_distance: s1.map(|s| bbox_distance(&s.pred_bbox, &s.gt_bbox)),
        text_cosine: s1.map(|s| text_cosine(&s.pred_text, &s.gt_text)),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate_set(pairs: &[EvalPair]) -> Result<SetReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let records: Vec<MetricsReport> = pairs.iter().map(evaluate_pair).collect();
    let valid: Vec<&MetricsReport> = records.iter().filter(|r| r.validity.as_ref().is_some_and(|v| v.valid)).collect();
    let n = records.len() as f64;
    let successes = records.iter().filter(|r| r.success).count() as f64;
    let valid_successes = valid.iter().filter(|r| r.success).count() as f64;
    let avg = |pick: fn(&MatchScores) -> Scores| {
        let s: Vec<Scores> = valid.iter().filter_map(|r| r.scores.as_ref().map(pick)).collect();
        Scores {
            precision: mean(s.iter().map(|x| x.precision)).unwrap_or(0.0),
            recall: mean(s.iter().map(|x| x.recall)).unwrap_or(0.0),
            f1: mean(s.iter().map(|x| x.f1)).unwrap_or(0.0),
        }
    };
    Ok(SetReport {
        count: records.len(),
        valid_count: valid.len(),
        validity: valid.len() as f64 / n,
        success: successes / n,
        success_valid_only: if valid.is_empty() { 0.0 } else { valid_successes / valid.len() as f64 },
        faces: avg(|s| s.faces),
        edges: avg(|s| s.edges),
        vertices: avg(|s| s.vertices),
        bbox_iou: mean(records.iter().filter_map(|r| r.bbox_iou)),
        bbox_distance: mean(records.iter().filter_map(|r| r.bbox_distance)),
        text_cosine: mean(records.iter().filter_map(|r| r.text_cosine)),
        reference: published_reference(),
        records,
    })
}

pub const TABLE_COLUMNS: [&str; 11] = [
    "Validity",
    "Success",
    "F1/Face",
    "F1/Edge",
    "F1/Vertex",
    "Precision/Face",
    "Precision/Edge",
    "Precision/Vertex",
    "Recall/Face",
    "Recall/Edge",
    "Recall/Vertex",
];

fn row(label: &str, validity: f64, success: f64, f1: [f64; 3], p: [f64; 3], r: [f64; 3]) -> Vec<String> {
    let mut cells = vec![label.to_owned(), format!("{:.1}%", validity * 100.0), format!("{:.1}%", success * 100.0)];
    cells.extend(f1.iter().chain(&p).chain(&r).map(|v| format!("{v:.3}")));
    cells
}

impl SetReport {
    /// Aligned text table, one row for this run and one for the reference.
    pub fn table(&self) -> String {
        let header: Vec<String> = std::iter::once("Method".to_owned()).chain(TABLE_COLUMNS.iter().map(|s| s.to_string())).collect();
        let ours = row(
            "this run",
            self.validity,
            self.success,
            [self.faces.f1, self.edges.f1, self.vertices.f1],
            [self.faces.precision, self.edges.precision, self.vertices.precision],
            [self.faces.recall, self.edges.recall, self.vertices.recall],
        );
        let r = &self.reference;
        let reference = row("reference (not reproducible)", r.validity, r.success, r.f1, r.precision, r.recall);
        let rows = [header, ours, reference];
        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap()).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
        }
        writeln!(out, "success over valid predictions only: {:.1}%", self.success_valid_only * 100.0).unwrap();
        for (name, v) in [("bbox IoU", self.bbox_iou), ("bbox distance", self.bbox_distance), ("text cosine", self.text_cosine)] {
            if let Some(v) = v {
                writeln!(out, "{name}: {v:.4}").unwrap();
            }
        }
        out
    }
}
