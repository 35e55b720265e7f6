//! Procedural gaze scenes: a shaded disk whose appearance encodes the
//! gaze direction.
//!
//! Inside the head box a disk is rendered at mean intensity
//! `0.5 - 0.25 * g_z`, with a linear ramp of amplitude
//! `0.2 * |g_xy|` along the image-plane gaze direction. Channels mix the
//! scalar intensity through a per-domain palette (`tint * I + lift` over
//! a flat background). Everything a sample needs is derived from its
//! seed, so a record re-renders byte-identically anywhere.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{project_to_2d, slerp_gaze, GazeVector3, EPS_XY};
use crate::manifest::{FrameSource, Label, SampleRecord};
use crate::patchify::ClipTensor;

/// Rendered frame side in pixels.
pub const FRAME_SIZE: usize = 96;
/// Head box (x, y, w, h) shared by every synthetic sample.
pub const HEAD_BOX: [f64; 4] = [16.0, 16.0, 64.0, 64.0];
/// Disk radius as a fraction of the head box side.
const DISK_RADIUS_FRAC: f64 = 0.4;
/// Disk intensity at g_z = 0.
const BASE_LEVEL: f64 = 0.5;
/// Intensity swing per unit of g_z.
const DEPTH_GAIN: f64 = 0.25;
/// Ramp amplitude at the disk rim per unit of planar gaze magnitude.
const GRAD_GAIN: f64 = 0.2;

/// Appearance and gaze-distribution knobs for one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    /// Gaze directions are uniform on the spherical cap within this
    /// angle of the into-camera axis.
    pub gaze_cap_deg: f64,
    /// Per-channel multiplier on the disk intensity.
    pub tint: [f64; 3],
    /// Per-channel offset added after the tint.
    pub lift: [f64; 3],
    /// Flat background color.
    pub bg: [f64; 3],
    /// Uniform intensity noise amplitude inside the disk.
    pub noise: f64,
}

impl DomainParams {
    /// Warm palette, narrow gaze cap. The labeled 3D domain.
    pub fn preset_a() -> DomainParams {
        DomainParams {
            gaze_cap_deg: 60.0,
            tint: [0.90, 0.85, 0.80],
            lift: [0.05, 0.05, 0.08],
            bg: [0.15, 0.18, 0.20],
            noise: 0.01,
        }
    }

    /// Cool palette, wide gaze cap reaching behind the camera plane.
    /// The 2D-only domain, and the transfer-target test domain.
    pub fn preset_b() -> DomainParams {
        DomainParams {
            gaze_cap_deg: 150.0,
            tint: [0.75, 0.90, 0.95],
            lift: [0.10, 0.03, 0.02],
            bg: [0.25, 0.12, 0.10],
            noise: 0.01,
        }
    }
}

/// Inline recipe for one sample's frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    pub domain: DomainParams,
}

/// Draws a unit gaze uniformly on the cap of `cap_deg` around the
/// into-camera axis, rejecting directions whose planar part is below
/// the 2D-projection threshold.
pub fn sample_cap_gaze(rng: &mut ChaCha8Rng, cap_deg: f64) -> GazeVector3 {
    let cos_cap = cap_deg.to_radians().cos();
    loop {
        let cos_t: f64 = rng.random_range(cos_cap..=1.0);
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let g = GazeVector3 { x: sin_t * phi.cos(), y: sin_t * phi.sin(), z: -cos_t };
        if g.xy_norm() > EPS_XY {
            return g;
        }
    }
}

/// Per-frame gaze rows for a spec: a single cap draw for images, a
/// constant-speed arc between two cap draws for clips. Consumes the
/// same leading RNG draws as the renderer, so labels and pixels always
/// agree.
pub fn sample_rows(spec: &SynthSpec) -> Vec<GazeVector3> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    gaze_rows(&mut rng, spec)
}

fn gaze_rows(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<GazeVector3> {
    let start = sample_cap_gaze(rng, spec.domain.gaze_cap_deg);
    if spec.frames == 1 {
        return vec![start];
    }
    let end = loop {
        let g = sample_cap_gaze(rng, spec.domain.gaze_cap_deg);
        if slerp_gaze(start, g, 0.5).is_ok() {
            break g;
        }
    };
    (0..spec.frames)
        .map(|k| {
            let u = k as f64 / (spec.frames - 1) as f64;
            slerp_gaze(start, end, u).expect("arc endpoints are not antipodal")
        })
        .collect()
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Renders the given gaze rows, drawing disk noise from `rng`.
pub fn render_gaze_frames(rows: &[GazeVector3], domain: &DomainParams, rng: &mut ChaCha8Rng) -> ClipTensor {
    let (bx, by, bw, _) = (HEAD_BOX[0], HEAD_BOX[1], HEAD_BOX[2], HEAD_BOX[3]);
    let cx = bx + bw / 2.0;
    let cy = by + bw / 2.0;
    let r = DISK_RADIUS_FRAC * bw;
    let mut data = Vec::with_capacity(rows.len() * FRAME_SIZE * FRAME_SIZE * 3);
    for g in rows {
        for y in 0..FRAME_SIZE {
            for x in 0..FRAME_SIZE {
                let dx = (x as f64 + 0.5 - cx) / r;
                let dy = (y as f64 + 0.5 - cy) / r;
                if dx * dx + dy * dy <= 1.0 {
                    // Pixel y grows downward while gaze y points up, so
                    // the ramp flips the sign of g_y.
                    let mut i = BASE_LEVEL - DEPTH_GAIN * g.z + GRAD_GAIN * (dx * g.x - dy * g.y);
                    if domain.noise > 0.0 {
                        i += rng.random_range(-domain.noise..=domain.noise);
                    }
                    for c in 0..3 {
                        data.push(clamp01(domain.tint[c] * i + domain.lift[c]));
                    }
                } else {
                    for c in 0..3 {
                        data.push(clamp01(domain.bg[c]));
                    }
                }
            }
        }
    }
    ClipTensor::new(rows.len(), FRAME_SIZE, FRAME_SIZE, data).expect("rendered values are clamped to [0, 1]")
}

/// Renders a spec to frames plus the gaze rows it encodes.
pub fn render_sample(spec: &SynthSpec) -> (ClipTensor, Vec<GazeVector3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rows = gaze_rows(&mut rng, spec);
    let clip = render_gaze_frames(&rows, &spec.domain, &mut rng);
    (clip, rows)
}

/// Renders a spec's pixels, discarding the label rows.
pub fn render_frames(spec: &SynthSpec) -> ClipTensor {
    render_sample(spec).0
}

fn sample_id(tag: &str, i: usize) -> String {
    format!("{tag}-{i:06}")
}

/// Generates `count` fully labeled records with `frames` frames each.
pub fn synth_generate_3d(
    count: usize,
    frames: usize,
    domain: &DomainParams,
    master_seed: u64,
    tag: &str,
) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..count)
        .map(|i| {
            let spec = SynthSpec { seed: rng.random(), frames, domain: domain.clone() };
            let rows = sample_rows(&spec);
            SampleRecord {
                id: sample_id(tag, i),
                source: FrameSource::Synth(spec),
                label: Label::Gaze3D(rows),
                dataset: tag.to_string(),
                head_box: Some(HEAD_BOX),
            }
        })
        .collect()
}

/// Generates `count` single-frame records labeled only with the planar
/// direction, plus a separate fully labeled twin of each record. The twin
/// list is written to a sealed side file that scoring alone may read.
pub fn synth_generate_2d(
    count: usize,
    domain: &DomainParams,
    master_seed: u64,
    tag: &str,
) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut train = Vec::with_capacity(count);
    let mut sealed = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SynthSpec { seed: rng.random(), frames: 1, domain: domain.clone() };
        let g = sample_rows(&spec)[0];
        let v = project_to_2d(g).expect("cap sampling rejects near-axis directions");
        let base = SampleRecord {
            id: sample_id(tag, i),
            source: FrameSource::Synth(spec),
            label: Label::Gaze2D(v),
            dataset: tag.to_string(),
            head_box: Some(HEAD_BOX),
        };
        let mut twin = base.clone();
        twin.label = Label::Gaze3D(vec![g]);
        train.push(base);
        sealed.push(twin);
    }
    (train, sealed)
}
