//! Binary PPM (P6) image frames.
//!
//! File-backed samples store one frame per file in 8-bit binary PPM.
//! The decoder is strict: magic `P6`, decimal width, height, and a
//! maxval of 255, each token separated by whitespace with `#` comments
//! allowed, followed by exactly `w * h * 3` payload bytes.

use std::path::Path;

use thiserror::Error;

use crate::patchify::ClipTensor;

/// Largest accepted frame side.
pub const MAX_DIM: usize = 4096;

#[derive(Debug, Error)]
pub enum PpmError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed image: {0}")]
    Malformed(String),
    #[error("unsupported image: {0}")]
    Unsupported(String),
    #[error("frame {got} differs from first frame {want}")]
    MixedSizes { got: String, want: String },
    #[error("no frame paths given")]
    Empty,
}

struct Lexer<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Lexer<'a> {
    /// Next decimal token, skipping whitespace and `#` comment lines.
    fn number(&mut self) -> Result<usize, PpmError> {
        loop {
            match self.bytes.get(self.at) {
                Some(b) if b.is_ascii_whitespace() => self.at += 1,
                Some(b'#') => {
                    while !matches!(self.bytes.get(self.at), None | Some(b'\n')) {
                        self.at += 1;
                    }
                }
                _ => break,
            }
        }
        let start = self.at;
        while self.bytes.get(self.at).is_some_and(u8::is_ascii_digit) {
            self.at += 1;
        }
        if self.at == start {
            return Err(PpmError::Malformed(format!("expected a number at byte {start}")));
        }
        if self.at - start > 7 {
            return Err(PpmError::Malformed(format!("oversized number at byte {start}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.at]).expect("digits are ascii");
        Ok(text.parse().expect("short digit strings fit in usize"))
    }
}

/// Decodes a P6 image to (width, height, rgb rows in [0, 1]).
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::Unsupported("not a binary P6 file".into()));
    }
    let mut lex = Lexer { bytes, at: 2 };
    let w = lex.number()?;
    let h = lex.number()?;
    let maxval = lex.number()?;
    if maxval != 255 {
        return Err(PpmError::Unsupported(format!("maxval {maxval}, only 255 is handled")));
    }
    if w == 0 || h == 0 || w > MAX_DIM || h > MAX_DIM {
        return Err(PpmError::Malformed(format!("frame size {w}x{h} out of range")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(lex.at) {
        Some(b) if b.is_ascii_whitespace() => lex.at += 1,
        _ => return Err(PpmError::Malformed("missing separator after maxval".into())),
    }
    let want = w * h * 3;
    let payload = &bytes[lex.at..];
    if payload.len() != want {
        return Err(PpmError::Malformed(format!("payload is {} bytes, frame needs {want}", payload.len())));
    }
    Ok((w, h, payload.iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Encodes rgb rows in [0, 1] as a P6 image, rounding to 8 bits.
pub fn encode_ppm(w: usize, h: usize, rgb: &[f64]) -> Vec<u8> {
    assert_eq!(rgb.len(), w * h * 3, "pixel data does not match the frame size");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>, PpmError> {
    std::fs::read(path).map_err(|source| PpmError::Io { path: path.display().to_string(), source })
}

/// Loads frame files as one clip. All frames must share a size.
pub fn load_frames(base: &Path, paths: &[std::path::PathBuf]) -> Result<ClipTensor, PpmError> {
    if paths.is_empty() {
        return Err(PpmError::Empty);
    }
    let mut size = None;
    let mut data = Vec::new();
    for rel in paths {
        let (w, h, rgb) = decode_ppm(&read_file(&base.join(rel))?)?;
        match size {
            None => size = Some((w, h)),
            Some(first) if first != (w, h) => {
                return Err(PpmError::MixedSizes {
                    got: format!("{w}x{h}"),
                    want: format!("{}x{}", first.0, first.1),
                })
            }
            Some(_) => {}
        }
        data.extend(rgb);
    }
    let (w, h) = size.expect("at least one frame was read");
    Ok(ClipTensor::new(paths.len(), h, w, data).expect("decoded frames match the clip size"))
}

pub fn save_ppm(path: &Path, w: usize, h: usize, rgb: &[f64]) -> Result<(), PpmError> {
    std::fs::write(path, encode_ppm(w, h, rgb))
        .map_err(|source| PpmError::Io { path: path.display().to_string(), source })
}
