//! Evaluation: per-record angular error, per-split aggregation, report
//! serialization, and run comparison.
//!
//! Single-frame records are scored on their one prediction. Multi-frame
//! records are scored as one fixed-length clip: the leading `clip_len`
//! frames (the last frame replicated when the record is shorter), with
//! the prediction and ground truth both read at `SCORE_FRAME`. Reports
//! carry a hash of the scored manifest so runs on different data refuse
//! to be compared.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{angular_error_deg, normalize3, GazeVector3, SplitTag, INTO_CAMERA};
use crate::manifest::{manifest_to_string, FrameSource, SampleRecord};
use crate::model::{model_forward, ModelConfig, ModelError, ParamSet};
use crate::patchify::ClipTensor;
use crate::ppm::{load_frames, PpmError};
use crate::preprocess::{head_crop_standardize, PreprocessError};

/// Clip frame whose prediction scores a video record.
pub const SCORE_FRAME: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Frames(#[from] PpmError),
    #[error("record {id} has no 3D ground truth")]
    Unscorable { id: String },
    #[error("no records to evaluate")]
    Empty,
    #[error("reports hash different manifests: {a} vs {b}")]
    ManifestMismatch { a: String, b: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub clip_len: usize,
    pub crop_scale: f64,
    pub out_size: usize,
}

impl Default for EvalOptions {
    fn default() -> EvalOptions {
        EvalOptions { clip_len: 8, crop_scale: -0.10, out_size: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub modality: Modality,
    pub error_deg: f64,
    /// Ground truth at the scored frame, for split assignment.
    pub gaze: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: String,
    pub modality: String,
    pub count: usize,
    pub mean_error_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub manifest_sha256: String,
    pub crop_scale: f64,
    pub rows: Vec<EvalRow>,
    pub samples: Vec<SampleScore>,
}

/// Hash of a record list under its canonical serialization, so the
/// same data hashes the same regardless of where it was read from.
pub fn manifest_hash(records: &[SampleRecord]) -> String {
    let digest = Sha256::digest(manifest_to_string(records).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_pixels(rec: &SampleRecord, base: &Path) -> Result<ClipTensor, EvalError> {
    match &rec.source {
        FrameSource::Synth(spec) => Ok(crate::synth::render_frames(spec)),
        FrameSource::Files(paths) => Ok(load_frames(base, paths)?),
    }
}

/// Takes the leading `clip_len` frames, replicating the final frame
/// when the clip is shorter.
fn fixed_length_clip(clip: &ClipTensor, clip_len: usize) -> ClipTensor {
    let frame_len = clip.h * clip.w * 3;
    let mut data = Vec::with_capacity(clip_len * frame_len);
    for t in 0..clip_len {
        let src = t.min(clip.t - 1);
        data.extend_from_slice(&clip.data()[src * frame_len..(src + 1) * frame_len]);
    }
    ClipTensor::new(clip_len, clip.h, clip.w, data).expect("copied frames keep the value range")
}

/// Scores one record: standard crop, forward pass, angular error at the
/// scored frame.
pub fn score_record(
    rec: &SampleRecord,
    base: &Path,
    params: &ParamSet,
    cfg: &ModelConfig,
    opts: &EvalOptions,
) -> Result<SampleScore, EvalError> {
    let rows = rec.gaze3d_rows().ok_or_else(|| EvalError::Unscorable { id: rec.id.clone() })?;
    let raw = load_pixels(rec, base)?;
    let cropped = head_crop_standardize(&raw, rec.head_box, opts.crop_scale, opts.out_size)?;
    let (clip, pred_row, gt_row) = if rec.frame_count() == 1 {
        (cropped, 0, 0)
    } else {
        (fixed_length_clip(&cropped, opts.clip_len), SCORE_FRAME, SCORE_FRAME.min(rows.len() - 1))
    };
    let out = model_forward(clip, params, cfg)?;
    let pred = out.directions[pred_row];
    let gt = rows[gt_row];
    Ok(SampleScore {
        id: rec.id.clone(),
        modality: if rec.frame_count() == 1 { Modality::Image } else { Modality::Video },
        error_deg: angular_error_deg(pred, gt).0,
        gaze: gt.to_array(),
    })
}

fn aggregate(samples: &[SampleScore]) -> Vec<EvalRow> {
    let modalities: Vec<(&str, Box<dyn Fn(&SampleScore) -> bool>)> = vec![
        ("all", Box::new(|_| true)),
        ("image", Box::new(|s: &SampleScore| s.modality == Modality::Image)),
        ("video", Box::new(|s: &SampleScore| s.modality == Modality::Video)),
    ];
    let mut rows = Vec::new();
    for (name, keep) in &modalities {
        let picked: Vec<&SampleScore> = samples.iter().filter(|s| keep(s)).collect();
        if picked.is_empty() && *name != "all" {
            continue;
        }
        for tag in SplitTag::ALL {
            let errs: Vec<f64> = picked
                .iter()
                .filter(|s| tag.contains(GazeVector3::from_array(s.gaze)))
                .map(|s| s.error_deg)
                .collect();
            // Splits no sample falls in are omitted rather than carried
            // as rows without a mean.
            if errs.is_empty() {
                continue;
            }
            rows.push(EvalRow {
                split: tag.name().to_string(),
                modality: name.to_string(),
                count: errs.len(),
                mean_error_deg: errs.iter().sum::<f64>() / errs.len() as f64,
            });
        }
    }
    rows
}

/// Scores every record and aggregates by split and modality.
pub fn evaluate(
    records: &[SampleRecord],
    base: &Path,
    params: &ParamSet,
    cfg: &ModelConfig,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let samples: Vec<SampleScore> =
        records.iter().map(|r| score_record(r, base, params, cfg, opts)).collect::<Result<_, _>>()?;
    Ok(EvalReport {
        manifest_sha256: manifest_hash(records),
        crop_scale: opts.crop_scale,
        rows: aggregate(&samples),
        samples,
    })
}

/// Mean error of the best constant predictor: the normalized mean of
/// the scored ground-truth directions.
pub fn constant_predictor_error(records: &[SampleRecord]) -> Result<f64, EvalError> {
    let mut sum = [0.0f64; 3];
    let mut gts = Vec::new();
    for rec in records {
        let rows = rec.gaze3d_rows().ok_or_else(|| EvalError::Unscorable { id: rec.id.clone() })?;
        let gt = rows[if rec.frame_count() == 1 { 0 } else { SCORE_FRAME.min(rows.len() - 1) }];
        for (s, v) in sum.iter_mut().zip(gt.to_array()) {
            *s += v;
        }
        gts.push(gt);
    }
    if gts.is_empty() {
        return Err(EvalError::Empty);
    }
    let center = normalize3(sum).unwrap_or(INTO_CAMERA);
    Ok(gts.iter().map(|&g| angular_error_deg(center, g).0).sum::<f64>() / gts.len() as f64)
}

/// Evaluates the same records at several crop scales.
pub fn crop_scale_sweep(
    records: &[SampleRecord],
    base: &Path,
    params: &ParamSet,
    cfg: &ModelConfig,
    opts: &EvalOptions,
    scales: &[f64],
) -> Result<Vec<(f64, EvalReport)>, EvalError> {
    scales
        .iter()
        .map(|&scale| {
            let one = EvalOptions { crop_scale: scale, ..opts.clone() };
            Ok((scale, evaluate(records, base, params, cfg, &one)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub split: String,
    pub modality: String,
    pub baseline_deg: f64,
    pub candidate_deg: f64,
    pub delta_deg: f64,
    pub relative_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub manifest_sha256: String,
    pub rows: Vec<ComparisonRow>,
}

/// Per-row deltas between two reports over the same manifest. Negative
/// deltas mean the candidate improved on the baseline.
pub fn compare_runs(baseline: &EvalReport, candidate: &EvalReport) -> Result<Comparison, EvalError> {
    if baseline.manifest_sha256 != candidate.manifest_sha256 {
        return Err(EvalError::ManifestMismatch {
            a: baseline.manifest_sha256.clone(),
            b: candidate.manifest_sha256.clone(),
        });
    }
    let mut rows = Vec::new();
    for brow in &baseline.rows {
        let Some(crow) = candidate
            .rows
            .iter()
            .find(|r| r.split == brow.split && r.modality == brow.modality)
        else {
            continue;
        };
        if brow.count == 0 {
            continue;
        }
        let delta = crow.mean_error_deg - brow.mean_error_deg;
        rows.push(ComparisonRow {
            split: brow.split.clone(),
            modality: brow.modality.clone(),
            baseline_deg: brow.mean_error_deg,
            candidate_deg: crow.mean_error_deg,
            delta_deg: delta,
            relative_pct: 100.0 * delta / brow.mean_error_deg,
        });
    }
    Ok(Comparison { manifest_sha256: baseline.manifest_sha256.clone(), rows })
}

/// Aggregate rows as CSV.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("split,modality,count,mean_error_deg\n");
    for row in &report.rows {
        out.push_str(&format!("{},{},{},{:.6}\n", row.split, row.modality, row.count, row.mean_error_deg));
    }
    out
}

/// Comparison rows as CSV; deltas are candidate minus baseline.
pub fn comparison_csv(cmp: &Comparison) -> String {
    let mut out = String::from("split,modality,baseline_deg,candidate_deg,delta_deg,relative_pct\n");
    for row in &cmp.rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.2}\n",
            row.split, row.modality, row.baseline_deg, row.candidate_deg, row.delta_deg, row.relative_pct
        ));
    }
    out
}

/// Parses the structured report written next to the CSV.
pub fn parse_report(text: &str) -> Result<EvalReport, serde_json::Error> {
    serde_json::from_str(text)
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}
