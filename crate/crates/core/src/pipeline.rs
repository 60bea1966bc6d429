//! Dataset-level drivers shared by the CLI and the integration tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{localize, Backend, RemoteClient};
use crate::brep::{parse_brep, serialize_brep, BRepModel};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_set, EvalPair, SetReport, Stage1Outputs};
use crate::modifier::{edit, train, EditOptions, EditOutcome, ModifierConfig, ModifierParams, Sample, TrainConfig, TrainReport};
use crate::render::BBox2D;
use crate::synth::{Dataset, Direction, EditRecord, Split};

/// Settings for memorizing a handful of records: full batch, higher rate,
/// no early stopping.
pub fn overfit_config(seed: u64, samples: usize, epochs: usize) -> ModifierConfig {
    ModifierConfig {
        seed,
        train: TrainConfig {
            learning_rate: 1e-3,
            batch_size: samples.max(1),
            warmup_steps: 50,
            max_epochs: epochs,
            patience: epochs.max(1),
            ..TrainConfig::default()
        },
        ..ModifierConfig::default()
    }
}

pub fn samples_for(records: &[&EditRecord], config: &ModifierConfig) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| Sample::from_record(r, config.direction, config.task))
        .collect()
}

/// Trains on the train split (or its first `overfit` records, evaluated on
/// themselves) and validates on the val split.
pub fn train_on_dataset(dataset: &Dataset, config: &ModifierConfig, overfit: Option<usize>) -> Result<(ModifierParams, TrainReport)> {
    let train_records = dataset.split(Split::Train);
    let params = ModifierParams::init(config)?;
    match overfit {
        Some(n) => {
            let picked: Vec<&EditRecord> = train_records.into_iter().take(n).collect();
            let samples = samples_for(&picked, config)?;
            train(params, &samples, &samples)
        }
        None => {
            let t = samples_for(&train_records, config)?;
            let v = samples_for(&dataset.split(Split::Val), config)?;
            train(params, &t, &v)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Localizer<'a> {
    Oracle,
    Remote(&'a RemoteClient),
}

/// One edited record with what the localizer produced.
#[derive(Debug, Clone)]
pub struct RecordEdit {
    pub id: String,
    pub stage1: Option<Stage1Outputs>,
    pub outcome: Result<EditOutcome, String>,
}

/// Stage 1 then stage 2 for one record. Remote replies are scored against the
/// record's own box and instruct prompt.
pub fn edit_record(record: &EditRecord, direction: Direction, params: &ModifierParams, localizer: Localizer<'_>, options: &EditOptions) -> RecordEdit {
    let (source, _) = record.oriented(direction);
    let image = match direction {
        Direction::Delete => &record.image_before,
        Direction::Add => &record.image_after,
    };
    let backend = match localizer {
        Localizer::Oracle => Backend::Oracle(Some((record, direction))),
        Localizer::Remote(c) => Backend::Remote(c),
    };
    let stage1 = localize(image, record.user_prompt(direction), backend).map(|loc| Stage1Outputs {
        pred_bbox: loc.bbox,
        gt_bbox: record.bbox,
        pred_text: loc.instruct_prompt,
        gt_text: record.instruct(direction).to_owned(),
    });
    let (stage1, outcome) = match stage1 {
        Ok(s1) => {
            let out = edit(source, &record.view, &s1.pred_bbox, &s1.pred_text, params, options).map_err(|e| e.to_string());
            (Some(s1), out)
        }
        Err(e) => (None, Err(format!("localizer: {e}"))),
    };
    RecordEdit {
        id: record.record_id.clone(),
        stage1,
        outcome,
    }
}

#[derive(Serialize, Deserialize)]
struct Stage1File {
    pred_bbox: BBox2D,
    gt_bbox: BBox2D,
    pred_text: String,
    gt_text: String,
}

/// Writes `{id}.brj` (or `{id}.failed` with the reason) and `{id}.stage1.json`.
pub fn write_edit(dir: &Path, e: &RecordEdit) -> Result<()> {
    fs::create_dir_all(dir)?;
    match &e.outcome {
        Ok(o) => fs::write(dir.join(format!("{}.brj", e.id)), serialize_brep(&o.model))?,
        Err(msg) => fs::write(dir.join(format!("{}.failed", e.id)), msg)?,
    }
    if let Some(s) = &e.stage1 {
        let f = Stage1File {
            pred_bbox: s.pred_bbox,
            gt_bbox: s.gt_bbox,
            pred_text: s.pred_text.clone(),
            gt_text: s.gt_text.clone(),
        };
        fs::write(dir.join(format!("{}.stage1.json", e.id)), serde_json::to_vec_pretty(&f)?)?;
    }
    Ok(())
}

/// Ground-truth targets as `{id}.brj`.
pub fn write_targets(dir: &Path, records: &[&EditRecord], direction: Direction) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in records {
        fs::write(dir.join(format!("{}.brj", r.record_id)), serialize_brep(r.oriented(direction).1))?;
    }
    Ok(())
}

/// Every `*.brj` in `dir`, keyed by file stem.
pub fn load_brj_dir(dir: &Path) -> Result<BTreeMap<String, BRepModel>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("brj") {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            let model = parse_brep(&fs::read_to_string(&path)?)?;
            out.insert(stem, model);
        }
    }
    Ok(out)
}

/// Scores `pred_dir` against `gt_dir`. Every ground-truth id needs either a
/// prediction or a `.failed` marker; anything else is an error.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<SetReport> {
    let gt = load_brj_dir(gt_dir)?;
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth directory"));
    }
    let mut pred = load_brj_dir(pred_dir)?;
    let mut pairs = Vec::with_capacity(gt.len());
    for (id, g) in gt {
        let p = pred.remove(&id);
        if p.is_none() && !pred_dir.join(format!("{id}.failed")).exists() {
            return Err(Error::Reference(format!("no prediction for {id}")));
        }
        let s1_path = pred_dir.join(format!("{id}.stage1.json"));
        let stage1 = if s1_path.exists() {
            let f: Stage1File = serde_json::from_slice(&fs::read(&s1_path)?)?;
            Some(Stage1Outputs {
                pred_bbox: f.pred_bbox,
                gt_bbox: f.gt_bbox,
                pred_text: f.pred_text,
                gt_text: f.gt_text,
            })
        } else {
            None
        };
        pairs.push(EvalPair {
            id,
            pred: p,
            gt: g,
            stage1,
        });
    }
    evaluate_set(&pairs)
}

pub fn load_checkpoint(path: &Path) -> Result<ModifierParams> {
    ModifierParams::read_checkpoint(fs::File::open(path)?)
}

pub fn save_checkpoint(path: &Path, params: &ModifierParams) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, params.to_bytes())?;
    Ok(())
}
