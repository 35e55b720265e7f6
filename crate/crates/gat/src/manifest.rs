//! Dataset manifests: one JSON record per line.
//!
//! A record names its frames (file paths or an inline synthetic spec),
//! exactly one label (3D per frame, a single 2D direction, or per-frame
//! pseudo 3D with degeneracy flags), a dataset tag, and an optional head
//! box. Loading validates arity and normalizes every gaze vector.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize2, normalize3, Gaze2D, GazeVector3};
use crate::synth::SynthSpec;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line} ({id}): {reason}")]
    Validation { line: usize, id: String, reason: String },
}

/// Where a sample's pixels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameSource {
    /// Frame image files, in temporal order. Paths are relative to the
    /// manifest's directory.
    Files(Vec<PathBuf>),
    /// Procedurally rendered frames.
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    /// One unit gaze per frame.
    Gaze3D(Vec<GazeVector3>),
    /// A single unit image-plane direction for the whole sample.
    Gaze2D(Gaze2D),
    /// Model-derived 3D labels, one per frame, with per-frame degeneracy.
    Pseudo3D { vecs: Vec<GazeVector3>, degenerate: Vec<bool> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub source: FrameSource,
    pub label: Label,
    pub dataset: String,
    /// (x, y, w, h) in frame pixels.
    pub head_box: Option<[f64; 4]>,
}

impl SampleRecord {
    pub fn frame_count(&self) -> usize {
        match &self.source {
            FrameSource::Files(f) => f.len(),
            FrameSource::Synth(s) => s.frames,
        }
    }

    pub fn is_image(&self) -> bool {
        self.frame_count() == 1
    }

    /// Per-frame 3D rows when the label carries them.
    pub fn gaze3d_rows(&self) -> Option<&[GazeVector3]> {
        match &self.label {
            Label::Gaze3D(v) => Some(v),
            Label::Pseudo3D { vecs, .. } => Some(vecs),
            Label::Gaze2D(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawPseudo {
    vecs: Vec<[f64; 3]>,
    degenerate: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaze3d: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaze2d: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo3d: Option<RawPseudo>,
    dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head_box: Option<[f64; 4]>,
}

fn validate(raw: RawRecord, line: usize) -> Result<SampleRecord, ManifestError> {
    let bad = |id: &str, reason: String| ManifestError::Validation { line, id: id.into(), reason };
    if raw.id.is_empty() {
        return Err(bad("?", "empty id".into()));
    }
    if raw.dataset.is_empty() {
        return Err(bad(&raw.id, "empty dataset tag".into()));
    }
    let source = match (raw.frames, raw.synth) {
        (Some(f), None) if !f.is_empty() => FrameSource::Files(f.into_iter().map(PathBuf::from).collect()),
        (Some(_), None) => return Err(bad(&raw.id, "empty frame list".into())),
        (None, Some(s)) if s.frames >= 1 => FrameSource::Synth(s),
        (None, Some(_)) => return Err(bad(&raw.id, "synthetic spec with zero frames".into())),
        (Some(_), Some(_)) => return Err(bad(&raw.id, "both frames and synth given".into())),
        (None, None) => return Err(bad(&raw.id, "no frame source".into())),
    };
    let t = match &source {
        FrameSource::Files(f) => f.len(),
        FrameSource::Synth(s) => s.frames,
    };
    let norm_rows = |rows: Vec<[f64; 3]>, what: &str| -> Result<Vec<GazeVector3>, ManifestError> {
        if rows.len() != t {
            return Err(bad(&raw.id, format!("{what} has {} rows for {t} frames", rows.len())));
        }
        rows.into_iter()
            .map(|r| normalize3(r).map_err(|e| bad(&raw.id, format!("{what}: {e}"))))
            .collect()
    };
    let label = match (raw.gaze3d, raw.gaze2d, raw.pseudo3d) {
        (Some(rows), None, None) => Label::Gaze3D(norm_rows(rows, "gaze3d")?),
        (None, Some(v), None) => {
            Label::Gaze2D(normalize2([v[0], v[1]]).map_err(|e| bad(&raw.id, format!("gaze2d: {e}")))?)
        }
        (None, None, Some(p)) => {
            if p.degenerate.len() != t {
                return Err(bad(&raw.id, format!("pseudo3d has {} flags for {t} frames", p.degenerate.len())));
            }
            Label::Pseudo3D { vecs: norm_rows(p.vecs, "pseudo3d")?, degenerate: p.degenerate }
        }
        (None, None, None) => return Err(bad(&raw.id, "no label".into())),
        _ => return Err(bad(&raw.id, "more than one label kind".into())),
    };
    if let Some([_, _, w, h]) = raw.head_box {
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(bad(&raw.id, format!("head_box {w}x{h} has no area")));
        }
    }
    Ok(SampleRecord { id: raw.id, source, label, dataset: raw.dataset, head_box: raw.head_box })
}

/// Parses manifest text, one JSON record per non-empty line.
pub fn parse_manifest(text: &str) -> Result<Vec<SampleRecord>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| ManifestError::Parse { line: lineno, message: e.to_string() })?;
        out.push(validate(raw, lineno)?);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>, ManifestError> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

fn to_raw(rec: &SampleRecord) -> RawRecord {
    let mut raw = RawRecord {
        id: rec.id.clone(),
        frames: None,
        synth: None,
        gaze3d: None,
        gaze2d: None,
        pseudo3d: None,
        dataset: rec.dataset.clone(),
        head_box: rec.head_box,
    };
    match &rec.source {
        FrameSource::Files(f) => {
            raw.frames = Some(f.iter().map(|p| p.to_string_lossy().into_owned()).collect())
        }
        FrameSource::Synth(s) => raw.synth = Some(s.clone()),
    }
    match &rec.label {
        Label::Gaze3D(rows) => raw.gaze3d = Some(rows.iter().map(|g| g.to_array()).collect()),
        Label::Gaze2D(v) => raw.gaze2d = Some([v.x, v.y]),
        Label::Pseudo3D { vecs, degenerate } => {
            raw.pseudo3d =
                Some(RawPseudo { vecs: vecs.iter().map(|g| g.to_array()).collect(), degenerate: degenerate.clone() })
        }
    }
    raw
}

pub fn manifest_to_string(records: &[SampleRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(&to_raw(rec)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_manifest(path: &Path, records: &[SampleRecord]) -> Result<(), ManifestError> {
    Ok(std::fs::write(path, manifest_to_string(records))?)
}

/// How a dataset's records become training samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModalityView {
    /// Every annotated frame as an individual image sample.
    ImageView,
    /// Whole records as fixed-length clips.
    VideoView,
    /// The dataset contributes twice, once per view.
    Both,
}

impl ModalityView {
    pub fn parse(s: &str) -> Option<ModalityView> {
        match s {
            "i" => Some(ModalityView::ImageView),
            "v" => Some(ModalityView::VideoView),
            "iv" => Some(ModalityView::Both),
            _ => None,
        }
    }

    pub fn as_flag(&self) -> &'static str {
        match self {
            ModalityView::ImageView => "i",
            ModalityView::VideoView => "v",
            ModalityView::Both => "iv",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DomainParams;

    fn synth_spec(frames: usize) -> SynthSpec {
        SynthSpec { seed: 42, frames, domain: DomainParams::preset_a() }
    }

    fn line_3d() -> String {
        let rec = SampleRecord {
            id: "a-000001".into(),
            source: FrameSource::Synth(synth_spec(1)),
            label: Label::Gaze3D(vec![GazeVector3 { x: 0.0, y: 0.6, z: -0.8 }]),
            dataset: "synth3d".into(),
            head_box: Some([16.0, 16.0, 64.0, 64.0]),
        };
        manifest_to_string(&[rec])
    }

    #[test]
    fn empty_manifest_parses_to_empty_list() {
        assert!(parse_manifest("").unwrap().is_empty());
        assert!(parse_manifest("\n\n").unwrap().is_empty());
    }

    #[test]
    fn round_trip_all_label_kinds() {
        let records = vec![
            SampleRecord {
                id: "x1".into(),
                source: FrameSource::Files(vec!["frames/a.ppm".into(), "frames/b.ppm".into()]),
                label: Label::Gaze3D(vec![
                    GazeVector3 { x: 0.0, y: 0.0, z: -1.0 },
                    GazeVector3 { x: 0.6, y: 0.0, z: -0.8 },
                ]),
                dataset: "files".into(),
                head_box: Some([1.0, 2.0, 30.0, 40.0]),
            },
            SampleRecord {
                id: "x2".into(),
                source: FrameSource::Synth(synth_spec(1)),
                label: Label::Gaze2D(Gaze2D { x: 0.6, y: 0.8 }),
                dataset: "twod".into(),
                head_box: None,
            },
            SampleRecord {
                id: "x3".into(),
                source: FrameSource::Synth(synth_spec(2)),
                label: Label::Pseudo3D {
                    vecs: vec![GazeVector3 { x: 0.0, y: 0.6, z: -0.8 }, GazeVector3 { x: 0.0, y: 0.0, z: -1.0 }],
                    degenerate: vec![false, true],
                },
                dataset: "pseudo".into(),
                head_box: Some([0.0, 0.0, 10.0, 10.0]),
            },
        ];
        let text = manifest_to_string(&records);
        let back = parse_manifest(&text).unwrap();
        assert_eq!(back, records);
        // Stable text round-trip as well.
        assert_eq!(manifest_to_string(&back), text);
    }

    #[test]
    fn non_unit_gaze_is_normalized_on_load() {
        let line = r#"{"id":"n1","synth":{"seed":1,"frames":1,"domain":{"gaze_cap_deg":60.0,"tint":[1,1,1],"lift":[0,0,0],"bg":[0,0,0],"noise":0.0}},"gaze3d":[[0.0,0.0,-2.0]],"dataset":"d"}"#;
        let recs = parse_manifest(line).unwrap();
        assert_eq!(recs[0].gaze3d_rows().unwrap()[0], GazeVector3 { x: 0.0, y: 0.0, z: -1.0 });
        let line2 = line.replace("\"gaze3d\":[[0.0,0.0,-2.0]]", "\"gaze2d\":[3.0,4.0]");
        let recs2 = parse_manifest(&line2).unwrap();
        match &recs2[0].label {
            Label::Gaze2D(v) => {
                assert!((v.x - 0.6).abs() < 1e-15 && (v.y - 0.8).abs() < 1e-15);
            }
            other => panic!("wrong label {other:?}"),
        }
    }

    #[test]
    fn arity_mismatch_is_rejected_with_line_number() {
        let good = line_3d();
        let bad = good.replace("\"frames\":1", "\"frames\":8");
        match parse_manifest(&bad).unwrap_err() {
            ManifestError::Validation { line: 1, reason, .. } => {
                assert!(reason.contains("1 rows for 8 frames"), "{reason}");
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = format!("{}not json\n", line_3d());
        match parse_manifest(&text).unwrap_err() {
            ManifestError::Parse { line: 2, .. } => {}
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn label_and_source_exclusivity() {
        let both_labels = line_3d().replace("\"gaze3d\"", "\"gaze2d\":[1.0,0.0],\"gaze3d\"");
        assert!(matches!(parse_manifest(&both_labels), Err(ManifestError::Validation { .. })));
        let no_label = r#"{"id":"q","synth":{"seed":1,"frames":1,"domain":{"gaze_cap_deg":60.0,"tint":[1,1,1],"lift":[0,0,0],"bg":[0,0,0],"noise":0.0}},"dataset":"d"}"#;
        assert!(matches!(parse_manifest(no_label), Err(ManifestError::Validation { .. })));
        let both_sources = line_3d().replace("\"synth\"", "\"frames\":[\"a.ppm\"],\"synth\"");
        assert!(matches!(parse_manifest(&both_sources), Err(ManifestError::Validation { .. })));
    }

    #[test]
    fn degenerate_gaze_rows_are_rejected() {
        let zero = line_3d().replace("[0.0,0.6,-0.8]", "[0.0,0.0,0.0]");
        assert!(matches!(parse_manifest(&zero), Err(ManifestError::Validation { .. })));
    }

    #[test]
    fn zero_area_head_box_is_rejected() {
        let bad = line_3d().replace("[16.0,16.0,64.0,64.0]", "[16.0,16.0,0.0,64.0]");
        assert!(matches!(parse_manifest(&bad), Err(ManifestError::Validation { .. })));
    }

    #[test]
    fn view_flags_parse() {
        assert_eq!(ModalityView::parse("i"), Some(ModalityView::ImageView));
        assert_eq!(ModalityView::parse("v"), Some(ModalityView::VideoView));
        assert_eq!(ModalityView::parse("iv"), Some(ModalityView::Both));
        assert_eq!(ModalityView::parse("x"), None);
        for v in [ModalityView::ImageView, ModalityView::VideoView, ModalityView::Both] {
            assert_eq!(ModalityView::parse(v.as_flag()), Some(v));
        }
    }
}
