//! Frame preparation: head cropping, frame-rate resampling, and
//! train-time augmentation.
//!
//! The crop pipeline is box arithmetic followed by one bilinear
//! resample: grow or shrink the head box about its center, pad it to a
//! square, then sample an `out_size` grid with source coordinates
//! clamped to the frame. Augmentation jitters the square box, mirrors
//! horizontally, and applies brightness, contrast, and saturation
//! factors; one draw covers every frame of a clip.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{flip_gaze_horizontal, Gaze2D};
use crate::manifest::Label;
use crate::patchify::ClipTensor;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("crop box {w}x{h} has no area")]
    EmptyBox { w: f64, h: f64 },
}

/// Scales a head box by `1 + scale` about its center and pads the
/// result to a square of the larger side, same center.
pub fn scaled_square_box(head_box: [f64; 4], scale: f64) -> Result<[f64; 4], PreprocessError> {
    let [x, y, w, h] = head_box;
    let nw = w * (1.0 + scale);
    let nh = h * (1.0 + scale);
    if !(nw > 0.0 && nh > 0.0) {
        return Err(PreprocessError::EmptyBox { w: nw, h: nh });
    }
    let side = nw.max(nh);
    Ok([x + (w - side) / 2.0, y + (h - side) / 2.0, side, side])
}

/// Bilinear tap at a source coordinate, clamping to the frame edges.
fn sample_bilinear(clip: &ClipTensor, t: usize, u: f64, v: f64, c: usize) -> f64 {
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let p = |yy: isize, xx: isize| clip.get(t, clamp(yy, clip.h), clamp(xx, clip.w), c);
    (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x0 + 1))
        + fy * ((1.0 - fx) * p(y0 + 1, x0) + fx * p(y0 + 1, x0 + 1))
}

/// Resamples an arbitrary box region of every frame to `out` x `out`.
fn crop_resize(clip: &ClipTensor, bbox: [f64; 4], out: usize) -> ClipTensor {
    let [bx, by, bw, bh] = bbox;
    let mut data = Vec::with_capacity(clip.t * out * out * 3);
    for t in 0..clip.t {
        for i in 0..out {
            let v = by + (i as f64 + 0.5) * bh / out as f64 - 0.5;
            for j in 0..out {
                let u = bx + (j as f64 + 0.5) * bw / out as f64 - 0.5;
                for c in 0..3 {
                    data.push(sample_bilinear(clip, t, u, v, c));
                }
            }
        }
    }
    ClipTensor::new(clip.t, out, out, data).expect("bilinear output stays in range")
}

/// Standard head crop: scale the box, square-pad, resample to
/// `out_size`. `head_box` of `None` means the whole frame.
pub fn head_crop_standardize(
    clip: &ClipTensor,
    head_box: Option<[f64; 4]>,
    scale: f64,
    out_size: usize,
) -> Result<ClipTensor, PreprocessError> {
    let bbox = head_box.unwrap_or([0.0, 0.0, clip.w as f64, clip.h as f64]);
    Ok(crop_resize(clip, scaled_square_box(bbox, scale)?, out_size))
}

/// Frame indices that resample `n_frames` at `src_fps` down to `dst_fps`
/// by nearest-frame selection. A source already at or below the target
/// rate is returned unchanged.
pub fn resample_fps(n_frames: usize, src_fps: f64, dst_fps: f64) -> Vec<usize> {
    assert!(src_fps > 0.0 && dst_fps > 0.0, "frame rates must be positive");
    if src_fps <= dst_fps {
        return (0..n_frames).collect();
    }
    if n_frames == 0 {
        return Vec::new();
    }
    let n_out = ((n_frames as f64 * dst_fps / src_fps).floor() as usize).max(1);
    let stride = src_fps / dst_fps;
    (0..n_out).map(|k| ((k as f64 * stride).round() as usize).min(n_frames - 1)).collect()
}

/// One set of augmentation decisions, shared by all frames of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraws {
    /// Multiplier on the square crop side, around 1.
    pub scale: f64,
    /// Width/height imbalance of the crop, split evenly via its square
    /// root so the area factor stays `scale` squared.
    pub aspect: f64,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

/// Crop side and aspect jitter range around 1.
const JITTER_GEOM: f64 = 0.05;
/// Brightness, contrast, and saturation jitter range around 1.
const JITTER_COLOR: f64 = 0.2;

impl AugmentDraws {
    /// Identity draws: augmentation reduces to the standard crop.
    pub fn no_op() -> AugmentDraws {
        AugmentDraws { scale: 1.0, aspect: 1.0, flip: false, brightness: 1.0, contrast: 1.0, saturation: 1.0 }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> AugmentDraws {
        let geom = 1.0 - JITTER_GEOM..=1.0 + JITTER_GEOM;
        let color = 1.0 - JITTER_COLOR..=1.0 + JITTER_COLOR;
        AugmentDraws {
            scale: rng.random_range(geom.clone()),
            aspect: rng.random_range(geom),
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(color.clone()),
            contrast: rng.random_range(color.clone()),
            saturation: rng.random_range(color),
        }
    }
}

fn flip_horizontal(clip: &ClipTensor) -> ClipTensor {
    let mut data = Vec::with_capacity(clip.t * clip.h * clip.w * 3);
    for t in 0..clip.t {
        for y in 0..clip.h {
            for x in 0..clip.w {
                for c in 0..3 {
                    data.push(clip.get(t, y, clip.w - 1 - x, c));
                }
            }
        }
    }
    ClipTensor::new(clip.t, clip.h, clip.w, data).expect("mirroring preserves the value range")
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter(clip: &ClipTensor, draws: &AugmentDraws) -> ClipTensor {
    let frame_len = clip.h * clip.w * 3;
    let mut data = clip.data().to_vec();
    for t in 0..clip.t {
        // A factor of exactly 1 must leave the bits alone, so each
        // stage is skipped rather than applied as a blend with itself.
        let frame = &mut data[t * frame_len..(t + 1) * frame_len];
        if draws.brightness != 1.0 {
            for v in frame.iter_mut() {
                *v = (*v * draws.brightness).clamp(0.0, 1.0);
            }
        }
        if draws.contrast != 1.0 {
            let mean: f64 =
                frame.chunks_exact(3).map(|p| gray(p[0], p[1], p[2])).sum::<f64>() / (clip.h * clip.w) as f64;
            for v in frame.iter_mut() {
                *v = ((*v - mean) * draws.contrast + mean).clamp(0.0, 1.0);
            }
        }
        if draws.saturation != 1.0 {
            for p in frame.chunks_exact_mut(3) {
                let g = gray(p[0], p[1], p[2]);
                for v in p.iter_mut() {
                    *v = ((*v - g) * draws.saturation + g).clamp(0.0, 1.0);
                }
            }
        }
    }
    ClipTensor::new(clip.t, clip.h, clip.w, data).expect("jitter output is clamped")
}

fn flip_label(label: &Label) -> Label {
    match label {
        Label::Gaze3D(rows) => Label::Gaze3D(rows.iter().map(|g| flip_gaze_horizontal(*g)).collect()),
        Label::Gaze2D(v) => Label::Gaze2D(Gaze2D { x: -v.x, y: v.y }),
        Label::Pseudo3D { vecs, degenerate } => Label::Pseudo3D {
            vecs: vecs.iter().map(|g| flip_gaze_horizontal(*g)).collect(),
            degenerate: degenerate.clone(),
        },
    }
}

/// Full train-time preparation of one sample: jittered square crop,
/// optional mirror (with the label flipped to match), color jitter.
pub fn prepare_sample(
    clip: &ClipTensor,
    head_box: Option<[f64; 4]>,
    label: &Label,
    crop_scale: f64,
    out_size: usize,
    draws: &AugmentDraws,
) -> Result<(ClipTensor, Label), PreprocessError> {
    let bbox = head_box.unwrap_or([0.0, 0.0, clip.w as f64, clip.h as f64]);
    let [sx, sy, side, _] = scaled_square_box(bbox, crop_scale)?;
    let half = draws.aspect.sqrt();
    let (jw, jh) = (side * draws.scale * half, side * draws.scale / half);
    let jittered = [sx + (side - jw) / 2.0, sy + (side - jh) / 2.0, jw, jh];
    let mut out = crop_resize(clip, jittered, out_size);
    let mut out_label = label.clone();
    if draws.flip {
        out = flip_horizontal(&out);
        out_label = flip_label(&out_label);
    }
    Ok((color_jitter(&out, draws), out_label))
}
