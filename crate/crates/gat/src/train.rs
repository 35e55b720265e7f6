//! Training loops: balanced epochs over mixed 3D, 2D, and pseudo-labeled
//! datasets, pseudo-label generation, and the two-stage pipeline.
//!
//! Every item carries its own loss: per-frame angular error for 3D and
//! pseudo 3D labels, planar angular error for 2D labels. Gradients are
//! computed per sample and averaged in item order, so results do not
//! depend on the worker count; with a fixed seed a run is reproducible
//! to the bit.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::{mpsc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{score_record, EvalError, EvalOptions};
use crate::geometry::{pseudo_label_3d, Gaze2D, GazeVector3};
use crate::manifest::{FrameSource, Label, ModalityView, SampleRecord};
use crate::model::{forward_on_tape, ModelConfig, ModelError, ParamSet};
use crate::optim::{lr_at, AdamW, OptimizerConfig};
use crate::patchify::ClipTensor;
use crate::ppm::{load_frames, PpmError};
use crate::preprocess::{prepare_sample, AugmentDraws, PreprocessError};
use crate::sampler::{balanced_epoch_plan, expand_views, LogicalDataset, SamplerError, ViewItem};
use crate::tape::{Tape, VarId};

/// Supervision regimes selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisionMode {
    /// 3D labels only.
    Supervised,
    /// 3D labels plus planar losses on 2D data.
    WeaklySup2D,
    /// 3D labels plus raw stage-1 predictions as labels, no rotation.
    SelfTrain3DPred,
    /// The full two-stage pipeline with rotated pseudo labels.
    StWsge,
}

impl SupervisionMode {
    pub fn parse(s: &str) -> Option<SupervisionMode> {
        match s {
            "supervised" => Some(SupervisionMode::Supervised),
            "ws" => Some(SupervisionMode::WeaklySup2D),
            "st" => Some(SupervisionMode::SelfTrain3DPred),
            "stwsge" => Some(SupervisionMode::StWsge),
            _ => None,
        }
    }

    pub fn as_flag(&self) -> &'static str {
        match self {
            SupervisionMode::Supervised => "supervised",
            SupervisionMode::WeaklySup2D => "ws",
            SupervisionMode::SelfTrain3DPred => "st",
            SupervisionMode::StWsge => "stwsge",
        }
    }
}

/// One training input: records, how to read them, and where their frame
/// files live.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub tag: String,
    pub view: ModalityView,
    pub records: Vec<SampleRecord>,
    pub base: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub optimizer: OptimizerConfig,
    pub clip_len: usize,
    pub crop_scale: f64,
    pub out_size: usize,
    pub augment: bool,
    pub workers: usize,
    /// Per-frame loss weights for clips; `None` means uniform.
    pub temporal_weights: Option<Vec<f64>>,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions {
            optimizer: OptimizerConfig::default(),
            clip_len: 8,
            crop_scale: -0.10,
            out_size: 64,
            augment: true,
            workers: 1,
            temporal_weights: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Frames(#[from] PpmError),
    #[error("validation: {0}")]
    Eval(#[from] EvalError),
    #[error("no trainable items in any dataset")]
    EmptyTrainingSet,
    #[error("no validation records")]
    EmptyValidationSet,
    #[error("temporal weights: {reason}")]
    BadWeights { reason: String },
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("record {id} has no planar label to pseudo-label")]
    NotPlanar { id: String },
    #[error("record {id} has {frames} frames, pseudo-labeling clips needs exactly {clip_len}")]
    PseudoClipLength { id: String, frames: usize, clip_len: usize },
}

/// Weighted mean per-frame angular error in degrees against unit rows.
pub fn gaze_loss(tape: &mut Tape, pred: VarId, targets: &[GazeVector3], weights: &[f64]) -> VarId {
    let gt: Vec<f64> = targets.iter().flat_map(|g| g.to_array()).collect();
    tape.angular_loss(pred, Rc::new(gt), Rc::new(weights.to_vec()))
}

/// Weighted planar angular error in degrees between each predicted
/// row's image-plane direction and the shared 2D target. Depends on the
/// prediction only through its xy components.
pub fn ws_loss_2d(tape: &mut Tape, pred: VarId, v: Gaze2D, weights: &[f64]) -> VarId {
    let mut total = None;
    for (row, &w) in weights.iter().enumerate() {
        let term = tape.planar_loss_xy(pred, [v.x, v.y], row);
        let term = tape.scale(term, w);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    total.expect("at least one frame weight")
}

enum ItemTarget {
    Rows3D(Vec<GazeVector3>),
    Planar(Gaze2D),
}

struct PreparedItem {
    clip: ClipTensor,
    target: ItemTarget,
    weights: Vec<f64>,
}

fn load_pixels(rec: &SampleRecord, base: &Path) -> Result<ClipTensor, TrainError> {
    match &rec.source {
        FrameSource::Synth(spec) => Ok(crate::synth::render_frames(spec)),
        FrameSource::Files(paths) => Ok(load_frames(base, paths)?),
    }
}

fn slice_frames(clip: &ClipTensor, from: usize, count: usize) -> ClipTensor {
    let frame_len = clip.h * clip.w * 3;
    let data = clip.data()[from * frame_len..(from + count) * frame_len].to_vec();
    ClipTensor::new(count, clip.h, clip.w, data).expect("sliced frames keep their size")
}

/// The label restricted to the selected frames, with pseudo rows read
/// as plain 3D rows (degenerate ones never reach this point).
fn selected_label(label: &Label, frame: Option<usize>, clip_len: usize) -> Label {
    let rows = |vecs: &[GazeVector3]| match frame {
        Some(k) => vec![vecs[k]],
        None => vecs[..clip_len].to_vec(),
    };
    match label {
        Label::Gaze3D(vecs) => Label::Gaze3D(rows(vecs)),
        Label::Pseudo3D { vecs, .. } => Label::Gaze3D(rows(vecs)),
        Label::Gaze2D(v) => Label::Gaze2D(*v),
    }
}

fn prepare_item(
    ds: &TrainDataset,
    item: ViewItem,
    opts: &TrainOptions,
    draws: &AugmentDraws,
) -> Result<PreparedItem, TrainError> {
    let rec = &ds.records[item.record];
    let raw = load_pixels(rec, &ds.base)?;
    let frames = match item.frame {
        Some(k) => slice_frames(&raw, k, 1),
        None => slice_frames(&raw, 0, opts.clip_len),
    };
    let label = selected_label(&rec.label, item.frame, opts.clip_len);
    let (clip, label) = prepare_sample(&frames, rec.head_box, &label, opts.crop_scale, opts.out_size, draws)?;
    let t = clip.t;
    let weights = if t == 1 {
        vec![1.0]
    } else {
        opts.temporal_weights.clone().unwrap_or_else(|| vec![1.0 / t as f64; t])
    };
    let target = match label {
        Label::Gaze3D(rows) => ItemTarget::Rows3D(rows),
        Label::Gaze2D(v) => ItemTarget::Planar(v),
        Label::Pseudo3D { .. } => unreachable!("pseudo labels were rewritten as 3D rows"),
    };
    Ok(PreparedItem { clip, target, weights })
}

/// Loss and per-entry gradients for one sample.
fn sample_pass(
    params: &ParamSet,
    cfg: &ModelConfig,
    item: &PreparedItem,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let pred = forward_on_tape(&mut tape, params, cfg, item.clip.clone(), true)?;
    let loss = match &item.target {
        ItemTarget::Rows3D(rows) => gaze_loss(&mut tape, pred, rows, &item.weights),
        ItemTarget::Planar(v) => ws_loss_2d(&mut tape, pred, *v, &item.weights),
    };
    let value = tape.value(loss).data[0];
    tape.backward(loss);
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.entries.len());
    grads.resize_with(params.entries.len(), Vec::new);
    for (idx, g) in tape.param_grads() {
        grads[idx] = g.to_vec();
    }
    Ok((value, grads))
}

/// Applies `f` to every item on `workers` threads, returning results in
/// input order.
fn ordered_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let queue: Mutex<VecDeque<(usize, T)>> = Mutex::new(items.into_iter().enumerate().collect());
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    let mut out: Vec<Option<R>> = Vec::with_capacity(n);
    out.resize_with(n, || None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            let f = &f;
            scope.spawn(move || {
                loop {
                    let job = queue.lock().expect("queue lock").pop_front();
                    match job {
                        Some((i, item)) => {
                            if tx.send((i, f(item))).is_err() {
                                break;
                            }
                        }
                        None => break,
                    }
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            out[i] = Some(r);
        }
    });
    out.into_iter().map(|r| r.expect("every index was produced")).collect()
}

struct FlatLayout {
    offsets: Vec<usize>,
    total: usize,
}

impl FlatLayout {
    fn of(params: &ParamSet) -> FlatLayout {
        let mut offsets = Vec::with_capacity(params.entries.len());
        let mut at = 0;
        for e in &params.entries {
            offsets.push(at);
            at += e.data.len();
        }
        FlatLayout { offsets, total: at }
    }

    fn flatten(&self, params: &ParamSet) -> Vec<f64> {
        let mut flat = vec![0.0; self.total];
        for (e, &off) in params.entries.iter().zip(&self.offsets) {
            flat[off..off + e.data.len()].copy_from_slice(&e.data);
        }
        flat
    }

    fn unflatten(&self, flat: &[f64], params: &mut ParamSet) {
        for (e, &off) in params.entries.iter_mut().zip(&self.offsets) {
            let len = e.data.len();
            e.data.copy_from_slice(&flat[off..off + len]);
        }
    }
}

/// Mean loss and mean flat gradient over a batch, reduced in item order.
fn run_batch(
    params: &ParamSet,
    cfg: &ModelConfig,
    items: Vec<PreparedItem>,
    layout: &FlatLayout,
    workers: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let n = items.len();
    let results = ordered_map(items, workers, |item| sample_pass(params, cfg, &item));
    let mut loss = 0.0;
    let mut grads = vec![0.0; layout.total];
    for r in results {
        let (l, per_entry) = r?;
        loss += l;
        for (g, &off) in per_entry.iter().zip(&layout.offsets) {
            for (slot, v) in grads[off..off + g.len()].iter_mut().zip(g) {
                *slot += v;
            }
        }
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    for g in &mut grads {
        *g *= inv;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_error_deg: f64,
    pub lr_start: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters of the best validation epoch.
    pub params: ParamSet,
    pub best_epoch: usize,
    pub best_val_error_deg: f64,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
}

/// Early stopping rule: wait out `min_epochs`, then stop once the best
/// epoch is `patience` epochs behind.
fn should_stop(epoch: usize, best_epoch: usize, cfg: &OptimizerConfig) -> bool {
    epoch + 1 >= cfg.min_epochs && epoch - best_epoch >= cfg.patience
}

fn check_weights(opts: &TrainOptions) -> Result<(), TrainError> {
    let Some(w) = &opts.temporal_weights else { return Ok(()) };
    if w.len() != opts.clip_len {
        return Err(TrainError::BadWeights {
            reason: format!("{} weights for clip length {}", w.len(), opts.clip_len),
        });
    }
    if w.iter().any(|&v| !(v >= 0.0)) {
        return Err(TrainError::BadWeights { reason: "weights must be non-negative".into() });
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(TrainError::BadWeights { reason: format!("weights sum to {sum}, need 1") });
    }
    Ok(())
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean angular error over the validation records.
fn validation_error(
    val: &[SampleRecord],
    base: &Path,
    params: &ParamSet,
    cfg: &ModelConfig,
    opts: &TrainOptions,
) -> Result<f64, TrainError> {
    let eval_opts =
        EvalOptions { clip_len: opts.clip_len, crop_scale: opts.crop_scale, out_size: opts.out_size };
    let mut total = 0.0;
    for rec in val {
        total += score_record(rec, base, params, cfg, &eval_opts)?.error_deg;
    }
    Ok(total / val.len() as f64)
}

/// Trains one network over the given datasets, selecting the epoch with
/// the lowest validation error. `init` of `None` means fresh
/// initialization from the optimizer seed.
pub fn train_stage(
    datasets: &[TrainDataset],
    val: &[SampleRecord],
    val_base: &Path,
    cfg: &ModelConfig,
    opts: &TrainOptions,
    init: Option<ParamSet>,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    check_weights(opts)?;
    if val.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let mut logical: Vec<(usize, LogicalDataset)> = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        for lg in expand_views(&ds.tag, &ds.records, ds.view, opts.clip_len)? {
            if !lg.items.is_empty() {
                logical.push((d, lg));
            }
        }
    }
    if logical.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let sizes: Vec<usize> = logical.iter().map(|(_, lg)| lg.items.len()).collect();
    let ocfg = &opts.optimizer;
    let mut params = init.unwrap_or_else(|| ParamSet::init(cfg, ocfg.seed));
    let layout = FlatLayout::of(&params);
    let mut adamw = AdamW::new(layout.total, ocfg);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut stopped_early = false;
    for epoch in 0..ocfg.max_epochs {
        let plan = balanced_epoch_plan(&sizes, ocfg.batch_size, epoch_seed(ocfg.seed, epoch));
        let mut draw_rng = ChaCha8Rng::seed_from_u64(epoch_seed(ocfg.seed, epoch) ^ 0xA06);
        let n_batches = plan.len().max(1);
        let mut loss_sum = 0.0;
        let mut item_count = 0usize;
        let lr_start = lr_at(ocfg, epoch as f64);
        for (bi, batch) in plan.iter().enumerate() {
            let (d, lg) = &logical[batch.dataset];
            let items: Vec<PreparedItem> = batch
                .items
                .iter()
                .map(|&i| {
                    let draws =
                        if opts.augment { AugmentDraws::sample(&mut draw_rng) } else { AugmentDraws::no_op() };
                    prepare_item(&datasets[*d], lg.items[i], opts, &draws)
                })
                .collect::<Result<_, _>>()?;
            let n = items.len();
            let lr = lr_at(ocfg, epoch as f64 + bi as f64 / n_batches as f64);
            let (loss, grads) = run_batch(&params, cfg, items, &layout, opts.workers)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let mut flat = layout.flatten(&params);
            adamw.step(&mut flat, &grads, lr);
            layout.unflatten(&flat, &mut params);
            loss_sum += loss * n as f64;
            item_count += n;
        }
        let val_error = validation_error(val, val_base, &params, cfg, opts)?;
        if !val_error.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / item_count.max(1) as f64,
            val_error_deg: val_error,
            lr_start,
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_error < *b);
        if improved {
            best = Some((val_error, epoch, params.clone()));
        }
        let best_epoch = best.as_ref().expect("best is set by the first epoch").1;
        if should_stop(epoch, best_epoch, ocfg) {
            stopped_early = true;
            break;
        }
    }
    let (best_val_error_deg, best_epoch, params) = best.ok_or(TrainError::EmptyTrainingSet)?;
    Ok(TrainResult { params, best_epoch, best_val_error_deg, history, stopped_early })
}

/// Summary of one pseudo-labeling pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub total: usize,
    pub degenerate: usize,
}

/// How teacher predictions become labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoPolicy {
    /// Rotate each prediction about the view axis so its image-plane
    /// direction matches the 2D annotation.
    Rotate,
    /// Keep each prediction as-is, ignoring the annotation.
    Raw,
}

/// Predicts 3D gazes for planar-labeled records and turns them into
/// labels under the given policy. Rotated labels keep a degeneracy flag
/// per frame; view expansion leaves flagged frames out of training. Raw
/// labels are ordinary 3D rows and train everywhere.
pub fn generate_pseudo_labels(
    records: &[SampleRecord],
    base: &Path,
    params: &ParamSet,
    cfg: &ModelConfig,
    opts: &TrainOptions,
    policy: PseudoPolicy,
) -> Result<(Vec<SampleRecord>, PseudoStats), TrainError> {
    let mut out = Vec::with_capacity(records.len());
    let mut degenerate = 0usize;
    for rec in records {
        let Label::Gaze2D(v) = &rec.label else {
            return Err(TrainError::NotPlanar { id: rec.id.clone() });
        };
        let t = rec.frame_count();
        if t != 1 && t != opts.clip_len {
            return Err(TrainError::PseudoClipLength {
                id: rec.id.clone(),
                frames: t,
                clip_len: opts.clip_len,
            });
        }
        let raw = load_pixels(rec, base)?;
        let clip =
            crate::preprocess::head_crop_standardize(&raw, rec.head_box, opts.crop_scale, opts.out_size)?;
        let pred = crate::model::model_forward(clip, params, cfg)?;
        let mut labeled = rec.clone();
        labeled.label = match policy {
            PseudoPolicy::Rotate => {
                let mut vecs = Vec::with_capacity(t);
                let mut flags = Vec::with_capacity(t);
                for &p in &pred.directions {
                    let pl = pseudo_label_3d(p, *v);
                    vecs.push(pl.gaze);
                    flags.push(pl.degenerate);
                    degenerate += pl.degenerate as usize;
                }
                Label::Pseudo3D { vecs, degenerate: flags }
            }
            PseudoPolicy::Raw => Label::Gaze3D(pred.directions),
        };
        out.push(labeled);
    }
    let stats = PseudoStats { total: out.len(), degenerate };
    Ok((out, stats))
}

/// Everything the two-stage pipeline produces.
#[derive(Debug)]
pub struct StageOutputs {
    pub stage1: TrainResult,
    pub pseudo: Vec<SampleRecord>,
    pub pseudo_stats: PseudoStats,
    pub stage2: TrainResult,
}

/// The full pipeline: supervised stage one on 3D data, pseudo-label the
/// 2D data with the stage-one network, train a fresh stage two on both.
/// Stage one is exactly a standalone supervised run; its parameters
/// pass through f32 before pseudo-labeling, matching a checkpoint
/// save/load between separately invoked stages. `warm_start` reuses the
/// stage-one weights to initialize stage two instead of fresh ones.
pub fn run_self_training(
    train3d: &[TrainDataset],
    val: &[SampleRecord],
    val_base: &Path,
    data2d: &TrainDataset,
    cfg: &ModelConfig,
    opts: &TrainOptions,
    warm_start: bool,
    policy: PseudoPolicy,
) -> Result<StageOutputs, TrainError> {
    let stage1 = train_stage(train3d, val, val_base, cfg, opts, None)?;
    let teacher = crate::checkpoint::quantize_f32(&stage1.params);
    let (pseudo, pseudo_stats) =
        generate_pseudo_labels(&data2d.records, &data2d.base, &teacher, cfg, opts, policy)?;
    let pseudo_ds = TrainDataset {
        tag: data2d.tag.clone(),
        view: data2d.view,
        records: pseudo.clone(),
        base: data2d.base.clone(),
    };
    let mut stage2_data = train3d.to_vec();
    stage2_data.push(pseudo_ds);
    let init = warm_start.then(|| teacher.clone());
    let stage2 = train_stage(&stage2_data, val, val_base, cfg, opts, init)?;
    Ok(StageOutputs { stage1, pseudo, pseudo_stats, stage2 })
}

/// One finite-difference comparison from the gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckWorst {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst: GradCheckWorst,
}

/// Central finite differences against backward gradients on a random
/// clip and target, covering every parameter tensor. Magnitudes below
/// `REL_FLOOR` are compared absolutely.
pub fn grad_check_model(
    cfg: &ModelConfig,
    clip_shape: (usize, usize, usize),
    seed: u64,
    min_coords: usize,
) -> Result<GradCheckReport, TrainError> {
    const STEP: f64 = 1e-4;
    const REL_FLOOR: f64 = 1e-4;
    cfg.validate()?;
    let params = ParamSet::init(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (t, h, w) = clip_shape;
    let data: Vec<f64> = (0..t * h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let clip = ClipTensor::new(t, h, w, data).expect("generated data matches the shape");
    let targets: Vec<GazeVector3> =
        (0..t).map(|_| crate::synth::sample_cap_gaze(&mut rng, 179.0)).collect();
    let weights = vec![1.0 / t as f64; t];

    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, &params, cfg, clip.clone(), true)?;
    let loss = gaze_loss(&mut tape, out, &targets, &weights);
    tape.backward(loss);
    let mut grads: Vec<Vec<f64>> = params.entries.iter().map(|e| vec![0.0; e.data.len()]).collect();
    for (idx, g) in tape.param_grads() {
        grads[idx].copy_from_slice(g);
    }

    let loss_at = |p: &ParamSet| -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, p, cfg, clip.clone(), false)?;
        let loss = gaze_loss(&mut tape, out, &targets, &weights);
        Ok(tape.value(loss).data[0])
    };

    let per_entry = min_coords.div_ceil(params.entries.len()).max(2);
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = GradCheckWorst { param: String::new(), coord: 0, analytic: 0.0, numeric: 0.0 };
    for (ei, entry) in params.entries.iter().enumerate() {
        for _ in 0..per_entry.min(entry.data.len()) {
            let k = rng.random_range(0..entry.data.len());
            let mut plus = params.clone();
            plus.entries[ei].data[k] += STEP;
            let mut minus = params.clone();
            minus.entries[ei].data[k] -= STEP;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * STEP);
            let analytic = grads[ei][k];
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = GradCheckWorst { param: entry.name.clone(), coord: k, analytic, numeric };
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { coords_checked: checked, max_rel_err: max_rel, worst })
}
