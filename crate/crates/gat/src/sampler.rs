//! View expansion and balanced epoch planning over mixed datasets.
//!
//! A record expands to image items (one per usable frame) or to a video
//! item (the whole record as one clip), or both. Each epoch every
//! dataset contributes the same number of items: the rounded mean of
//! the dataset sizes. Smaller datasets are oversampled with balanced
//! repeat counts, larger ones subsampled without replacement. Batches
//! are drawn from a single dataset, never repeat an item, and datasets
//! take turns in round-robin order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::manifest::{Label, ModalityView, SampleRecord};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("record {id} has {frames} frames, clips need {clip_len}")]
    ShortClip { id: String, frames: usize, clip_len: usize },
}

/// One trainable unit: a whole record as a clip, or one of its frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewItem {
    /// Index into the record list the items were expanded from.
    pub record: usize,
    /// Selected frame for image items; `None` marks a clip item.
    pub frame: Option<usize>,
}

fn degenerate_flags(rec: &SampleRecord) -> Option<&[bool]> {
    match &rec.label {
        Label::Pseudo3D { degenerate, .. } => Some(degenerate),
        _ => None,
    }
}

/// Every usable frame of every record as an individual image item.
/// Degenerate pseudo-labeled frames are left out.
pub fn expand_image_view(records: &[SampleRecord]) -> Vec<ViewItem> {
    let mut items = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        for k in 0..rec.frame_count() {
            if degenerate_flags(rec).is_some_and(|f| f[k]) {
                continue;
            }
            items.push(ViewItem { record: r, frame: Some(k) });
        }
    }
    items
}

/// Whole records as clip items. Records shorter than `clip_len` are an
/// error; records with any degenerate pseudo frame are left out.
pub fn expand_video_view(records: &[SampleRecord], clip_len: usize) -> Result<Vec<ViewItem>, SamplerError> {
    let mut items = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        if rec.frame_count() < clip_len {
            return Err(SamplerError::ShortClip {
                id: rec.id.clone(),
                frames: rec.frame_count(),
                clip_len,
            });
        }
        if degenerate_flags(rec).is_some_and(|f| f.iter().any(|&d| d)) {
            continue;
        }
        items.push(ViewItem { record: r, frame: None });
    }
    Ok(items)
}

/// A dataset as the sampler sees it: a tag and its expanded items.
#[derive(Debug, Clone, PartialEq)]
pub struct LogicalDataset {
    pub tag: String,
    pub items: Vec<ViewItem>,
}

/// Expands one manifest under a view. `Both` yields two logical
/// datasets so the image and video readings are balanced separately.
pub fn expand_views(
    tag: &str,
    records: &[SampleRecord],
    view: ModalityView,
    clip_len: usize,
) -> Result<Vec<LogicalDataset>, SamplerError> {
    Ok(match view {
        ModalityView::ImageView => {
            vec![LogicalDataset { tag: tag.to_string(), items: expand_image_view(records) }]
        }
        ModalityView::VideoView => {
            vec![LogicalDataset { tag: tag.to_string(), items: expand_video_view(records, clip_len)? }]
        }
        ModalityView::Both => vec![
            LogicalDataset { tag: format!("{tag}/i"), items: expand_image_view(records) },
            LogicalDataset { tag: format!("{tag}/v"), items: expand_video_view(records, clip_len)? },
        ],
    })
}

/// One training batch: items of a single logical dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochBatch {
    pub dataset: usize,
    pub items: Vec<usize>,
}

/// Repeat counts summing to `quota` that differ by at most one across
/// items, the extra repeats going to a random subset.
fn oversample_counts(size: usize, quota: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut counts = vec![quota / size; size];
    let mut idx: Vec<usize> = (0..size).collect();
    idx.shuffle(rng);
    for &i in idx.iter().take(quota % size) {
        counts[i] += 1;
    }
    counts
}

/// Schedules a multiset of items into batches with no repeats inside a
/// batch, always draining the items with the most copies left first.
fn schedule_counts(mut remaining: Vec<usize>, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut priority: Vec<usize> = (0..remaining.len()).collect();
    priority.shuffle(rng);
    let mut order: Vec<usize> = (0..remaining.len()).collect();
    let mut total: usize = remaining.iter().sum();
    let mut out = Vec::new();
    while total > 0 {
        order.sort_by(|&a, &b| remaining[b].cmp(&remaining[a]).then(priority[a].cmp(&priority[b])));
        let batch: Vec<usize> =
            order.iter().copied().filter(|&i| remaining[i] > 0).take(batch_size).collect();
        for &i in &batch {
            remaining[i] -= 1;
            total -= 1;
        }
        out.push(batch);
    }
    out
}

/// Plans one epoch over datasets of the given sizes. Every dataset
/// contributes `round(mean(sizes))` items; the final partial batch of a
/// dataset is kept, so totals are exact.
pub fn balanced_epoch_plan(sizes: &[usize], batch_size: usize, seed: u64) -> Vec<EpochBatch> {
    assert!(batch_size >= 1, "batch size must be positive");
    if sizes.is_empty() || sizes.iter().all(|&s| s == 0) {
        return Vec::new();
    }
    let quota = (sizes.iter().sum::<usize>() as f64 / sizes.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_dataset: Vec<Vec<Vec<usize>>> = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || quota == 0 {
            per_dataset.push(Vec::new());
        } else if size >= quota {
            let mut idx: Vec<usize> = (0..size).collect();
            idx.shuffle(&mut rng);
            idx.truncate(quota);
            per_dataset.push(idx.chunks(batch_size).map(|c| c.to_vec()).collect());
        } else {
            let counts = oversample_counts(size, quota, &mut rng);
            per_dataset.push(schedule_counts(counts, batch_size, &mut rng));
        }
    }
    let rounds = per_dataset.iter().map(Vec::len).max().unwrap_or(0);
    let mut plan = Vec::new();
    for round in 0..rounds {
        for (d, batches) in per_dataset.iter().enumerate() {
            if let Some(batch) = batches.get(round) {
                plan.push(EpochBatch { dataset: d, items: batch.clone() });
            }
        }
    }
    plan
}
