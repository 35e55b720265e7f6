//! Shared 4D input representation for images and clips, patch tiling, and
//! token embedding. An image is a 1-frame clip; duplicating it to two frames
//! (rather than zero-padding) lets one temporal patch size serve both
//! modalities with identical weights.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PatchifyError {
    #[error("{dim} = {size} not divisible by patch extent {extent}")]
    ShapeMismatch { dim: &'static str, size: usize, extent: usize },
    #[error("clip data length {got} does not match {want} (T*H*W*3)")]
    DataLength { got: usize, want: usize },
    #[error("clip value {value} at flat index {index} outside [0,1]")]
    ValueOutOfRange { value: f64, index: usize },
    #[error("weights length {got}, expected {want} for {what}")]
    WeightShape { what: &'static str, got: usize, want: usize },
}

/// T×H×W×3 visual input with values in [0,1]; T=1 is an image.
/// Layout is row-major: ((frame·H + y)·W + x)·3 + channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl ClipTensor {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<f64>) -> Result<ClipTensor, PatchifyError> {
        let want = t * h * w * 3;
        if data.len() != want {
            return Err(PatchifyError::DataLength { got: data.len(), want });
        }
        for (index, &value) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(PatchifyError::ValueOutOfRange { value, index });
            }
        }
        Ok(ClipTensor { t, h, w, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, frame: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.data[((frame * self.h + y) * self.w + x) * 3 + ch]
    }
}

/// Patch extents and embedding width. The temporal extent is 2: one duplicated
/// image fills exactly one temporal patch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl PatchSpec {
    /// Flattened patch length: t·h·w·3.
    pub fn patch_len(&self) -> usize {
        self.t * self.h * self.w * 3
    }
}

/// Non-overlapping patches in grid order (t-major, then h, then w), each
/// flattened frame-major, then row, then column, then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchList {
    pub patches: Vec<f64>,
    pub n: usize,
    pub patch_len: usize,
    pub grid: (usize, usize, usize),
    pub spec: PatchSpec,
}

/// N×C embedded tokens with their (n_t, n_h, n_w) grid shape. Flat token
/// index i = (t·n_h + h)·n_w + w.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<f64>,
    pub n: usize,
    pub c: usize,
    pub grid: (usize, usize, usize),
}

/// Images become 2-frame clips of identical content; clips pass through.
pub fn duplicate_if_image(x: ClipTensor) -> ClipTensor {
    if x.t != 1 {
        return x;
    }
    let mut data = Vec::with_capacity(x.data.len() * 2);
    data.extend_from_slice(&x.data);
    data.extend_from_slice(&x.data);
    ClipTensor { t: 2, h: x.h, w: x.w, data }
}

pub fn patchify(x: &ClipTensor, spec: PatchSpec) -> Result<PatchList, PatchifyError> {
    if x.t % spec.t != 0 {
        return Err(PatchifyError::ShapeMismatch { dim: "T", size: x.t, extent: spec.t });
    }
    if x.h % spec.h != 0 {
        return Err(PatchifyError::ShapeMismatch { dim: "H", size: x.h, extent: spec.h });
    }
    if x.w % spec.w != 0 {
        return Err(PatchifyError::ShapeMismatch { dim: "W", size: x.w, extent: spec.w });
    }
    let grid = (x.t / spec.t, x.h / spec.h, x.w / spec.w);
    let n = grid.0 * grid.1 * grid.2;
    let patch_len = spec.patch_len();
    let mut patches = vec![0.0; n * patch_len];
    for ti in 0..grid.0 {
        for hi in 0..grid.1 {
            for wi in 0..grid.2 {
                let token = (ti * grid.1 + hi) * grid.2 + wi;
                let out = &mut patches[token * patch_len..(token + 1) * patch_len];
                let mut k = 0;
                for f in 0..spec.t {
                    for r in 0..spec.h {
                        for col in 0..spec.w {
                            for ch in 0..3 {
                                out[k] = x.get(ti * spec.t + f, hi * spec.h + r, wi * spec.w + col, ch);
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(PatchList { patches, n, patch_len, grid, spec })
}

/// Inverse tiling; reconstructs the clip exactly.
pub fn unpatchify(p: &PatchList) -> ClipTensor {
    let spec = p.spec;
    let (nt, nh, nw) = p.grid;
    let (t, h, w) = (nt * spec.t, nh * spec.h, nw * spec.w);
    let mut data = vec![0.0; t * h * w * 3];
    for ti in 0..nt {
        for hi in 0..nh {
            for wi in 0..nw {
                let token = (ti * nh + hi) * nw + wi;
                let src = &p.patches[token * p.patch_len..(token + 1) * p.patch_len];
                let mut k = 0;
                for f in 0..spec.t {
                    for r in 0..spec.h {
                        for col in 0..spec.w {
                            for ch in 0..3 {
                                let frame = ti * spec.t + f;
                                let y = hi * spec.h + r;
                                let x = wi * spec.w + col;
                                data[((frame * h + y) * w + x) * 3 + ch] = src[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    ClipTensor { t, h, w, data }
}

/// Weights of the shared patch embedding: affine map to C followed by
/// per-token normalization.
#[derive(Debug, Clone)]
pub struct EmbedWeights<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub gain: &'a [f64],
    pub shift: &'a [f64],
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Normalizes one row in place: subtract the mean, divide by the ε-stabilized
/// standard deviation, then scale and shift.
pub fn layer_norm_row(row: &mut [f64], gain: &[f64], shift: &[f64]) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
    for (i, v) in row.iter_mut().enumerate() {
        *v = (*v - mean) * inv * gain[i] + shift[i];
    }
}

/// Shared linear layer plus per-token normalization; identical weights serve
/// image and video inputs.
pub fn embed_tokens(p: &PatchList, weights: &EmbedWeights) -> Result<TokenSequence, PatchifyError> {
    let c = weights.bias.len();
    let plen = p.patch_len;
    if weights.weight.len() != plen * c {
        return Err(PatchifyError::WeightShape {
            what: "embed weight",
            got: weights.weight.len(),
            want: plen * c,
        });
    }
    for (what, s) in [("embed gain", weights.gain), ("embed shift", weights.shift)] {
        if s.len() != c {
            return Err(PatchifyError::WeightShape { what, got: s.len(), want: c });
        }
    }
    let mut tokens = vec![0.0; p.n * c];
    for i in 0..p.n {
        let patch = &p.patches[i * plen..(i + 1) * plen];
        let row = &mut tokens[i * c..(i + 1) * c];
        row.copy_from_slice(weights.bias);
        for (k, &pv) in patch.iter().enumerate() {
            let wrow = &weights.weight[k * c..(k + 1) * c];
            for j in 0..c {
                row[j] += pv * wrow[j];
            }
        }
        layer_norm_row(row, weights.gain, weights.shift);
    }
    Ok(TokenSequence { tokens, n: p.n, c, grid: p.grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> ClipTensor {
        let data = (0..t * h * w * 3).map(|_| rng.random_range(0.0..=1.0)).collect();
        ClipTensor::new(t, h, w, data).unwrap()
    }

    const SPEC: PatchSpec = PatchSpec { t: 2, h: 4, w: 4, c: 32 };

    #[test]
    fn duplicate_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = random_clip(&mut rng, 1, 8, 8);
        let clip = duplicate_if_image(img.clone());
        assert_eq!(clip.t, 2);
        assert_eq!(&clip.data()[..img.data().len()], img.data());
        assert_eq!(&clip.data()[img.data().len()..], img.data());
        let again = duplicate_if_image(clip.clone());
        assert_eq!(again, clip);

        let eight = random_clip(&mut rng, 8, 8, 8);
        assert_eq!(duplicate_if_image(eight.clone()), eight);
    }

    #[test]
    fn token_count_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_clip(&mut rng, 8, 64, 64);
        let p = patchify(&x, SPEC).unwrap();
        assert_eq!(p.n, 4 * 16 * 16);
        assert_eq!(p.grid, (4, 16, 16));

        let bad = random_clip(&mut rng, 8, 63, 64);
        assert_eq!(
            patchify(&bad, SPEC).unwrap_err(),
            PatchifyError::ShapeMismatch { dim: "H", size: 63, extent: 4 }
        );
        let odd_t = random_clip(&mut rng, 3, 8, 8);
        assert!(matches!(
            patchify(&odd_t, SPEC),
            Err(PatchifyError::ShapeMismatch { dim: "T", .. })
        ));
    }

    #[test]
    fn round_trip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_clip(&mut rng, 2, 8, 8);
        let p = patchify(&x, SPEC).unwrap();
        assert_eq!(p.n, 4);
        let back = unpatchify(&p);
        assert_eq!(back, x);
    }

    #[test]
    fn value_range_enforced() {
        let err = ClipTensor::new(1, 1, 1, vec![0.0, 1.2, 0.5]).unwrap_err();
        assert!(matches!(err, PatchifyError::ValueOutOfRange { index: 1, .. }));
    }

    fn random_weights(rng: &mut ChaCha8Rng, plen: usize, c: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let weight = (0..plen * c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let bias = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let gain = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let shift = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        (weight, bias, gain, shift)
    }

    #[test]
    fn embed_zero_patches_zero_bias() {
        let spec = PatchSpec { t: 2, h: 2, w: 2, c: 8 };
        let plen = spec.patch_len();
        let p = PatchList { patches: vec![0.0; 3 * plen], n: 3, patch_len: plen, grid: (3, 1, 1), spec };
        let weight = vec![0.3; plen * 8];
        let bias = vec![0.0; 8];
        let gain = vec![1.0; 8];
        let shift = vec![0.0; 8];
        let toks = embed_tokens(&p, &EmbedWeights { weight: &weight, bias: &bias, gain: &gain, shift: &shift }).unwrap();
        assert!(toks.tokens.iter().all(|&v| v == 0.0));
    }

    /// Independent recomputation of the affine + normalization pipeline, plus
    /// the statistics it implies: with uniform gain g and shift s, each output
    /// row has mean s (the standardized row has exact zero mean) and standard
    /// deviation g·σ/√(σ²+ε).
    #[test]
    fn embed_matches_normalization_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let spec = PatchSpec { t: 2, h: 4, w: 4, c: 16 };
        let x = random_clip(&mut rng, 2, 8, 8);
        let p = patchify(&x, spec).unwrap();
        let plen = spec.patch_len();
        let (weight, bias, _, _) = random_weights(&mut rng, plen, 16);
        let g = 1.3;
        let s = 0.7;
        let gain = vec![g; 16];
        let shift = vec![s; 16];
        let toks = embed_tokens(&p, &EmbedWeights { weight: &weight, bias: &bias, gain: &gain, shift: &shift }).unwrap();

        for i in 0..p.n {
            // Oracle: affine row from scratch.
            let patch = &p.patches[i * plen..(i + 1) * plen];
            let mut pre: Vec<f64> = (0..16)
                .map(|j| bias[j] + patch.iter().enumerate().map(|(k, &v)| v * weight[k * 16 + j]).sum::<f64>())
                .collect();
            let mean = pre.iter().sum::<f64>() / 16.0;
            let var = pre.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            for v in pre.iter_mut() {
                *v = (*v - mean) / (var + LAYERNORM_EPS).sqrt() * g + s;
            }
            let row = &toks.tokens[i * 16..(i + 1) * 16];
            for j in 0..16 {
                assert!((row[j] - pre[j]).abs() < 1e-12);
            }
            let row_mean = row.iter().sum::<f64>() / 16.0;
            assert!((row_mean - s).abs() < 1e-9, "row mean {row_mean} vs shift {s}");
            let row_std = (row.iter().map(|v| (v - row_mean) * (v - row_mean)).sum::<f64>() / 16.0).sqrt();
            let want_std = g * (var / (var + LAYERNORM_EPS)).sqrt();
            assert!((row_std - want_std).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_patches_identical_rows() {
        let spec = PatchSpec { t: 2, h: 2, w: 2, c: 8 };
        let plen = spec.patch_len();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let one: Vec<f64> = (0..plen).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut patches = one.clone();
        patches.extend_from_slice(&one);
        let p = PatchList { patches, n: 2, patch_len: plen, grid: (2, 1, 1), spec };
        let (weight, bias, gain, shift) = random_weights(&mut rng, plen, 8);
        let toks = embed_tokens(&p, &EmbedWeights { weight: &weight, bias: &bias, gain: &gain, shift: &shift }).unwrap();
        assert_eq!(&toks.tokens[..8], &toks.tokens[8..]);
    }

    /// Token-level modality agnosticism: embedding a duplicated image equals
    /// embedding the equivalent 2-frame clip bitwise.
    #[test]
    fn image_tokens_equal_duplicated_clip_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let img = random_clip(&mut rng, 1, 16, 16);
        let mut two = img.data().to_vec();
        two.extend_from_slice(img.data());
        let clip = ClipTensor::new(2, 16, 16, two).unwrap();

        let spec = PatchSpec { t: 2, h: 4, w: 4, c: 16 };
        let (weight, bias, gain, shift) = random_weights(&mut rng, spec.patch_len(), 16);
        let ew = EmbedWeights { weight: &weight, bias: &bias, gain: &gain, shift: &shift };
        let a = embed_tokens(&patchify(&duplicate_if_image(img), spec).unwrap(), &ew).unwrap();
        let b = embed_tokens(&patchify(&clip, spec).unwrap(), &ew).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        /// Count law and exact round trip over arbitrary valid shapes.
        #[test]
        fn patchify_round_trip(
            nt in 1usize..3,
            nh in 1usize..5,
            nw in 1usize..5,
            ph in 1usize..4,
            pw in 1usize..4,
            seed in 0u64..1000,
        ) {
            let spec = PatchSpec { t: 2, h: ph, w: pw, c: 4 };
            let (t, h, w) = (nt * 2, nh * ph, nw * pw);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..t * h * w * 3).map(|_| rng.random_range(0.0..=1.0)).collect();
            let x = ClipTensor::new(t, h, w, data).unwrap();
            let p = patchify(&x, spec).unwrap();
            prop_assert_eq!(p.n, nt * nh * nw);
            let back = unpatchify(&p);
            prop_assert_eq!(back, x);
        }
    }
}
