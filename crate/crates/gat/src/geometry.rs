//! Gaze directions in the eye coordinate system, angular metrics, geometric
//! pseudo-label construction, and evaluation split classification.
//!
//! Coordinate convention: +x left, +y up, +z away from the camera, so (0,0,-1)
//! looks straight into the camera. Image pixel coordinates have +y down; the
//! conversion from pixel offsets negates y (see [`gaze2d_from_pixels`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a raw 3-vector has no usable direction.
pub const EPS_NORM: f64 = 1e-12;
/// In-plane norm below which the image-plane direction of a gaze is undefined.
pub const EPS_XY: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("vector norm {0} too small to normalize")]
    DegenerateVector(f64),
    #[error("gaze is within {EPS_XY} of the optical axis; image-plane direction undefined")]
    NearAxisGaze,
    #[error("slerp endpoints are antipodal; the great circle is not unique")]
    AntipodalEndpoints,
}

/// Unit 3D gaze direction. Constructed via [`normalize3`] or arithmetic that
/// preserves the unit norm; holds ‖(x,y,z)‖ = 1 within 1e-9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeVector3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GazeVector3 {
    pub fn dot(self, o: GazeVector3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Norm of the (x,y) image-plane component.
    pub fn xy_norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> GazeVector3 {
        GazeVector3 { x: a[0], y: a[1], z: a[2] }
    }
}

/// Unit in-image-plane gaze direction (the 2D ground truth v).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaze2D {
    pub x: f64,
    pub y: f64,
}

/// Angle in degrees, in [0, 180].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AngleDeg(pub f64);

/// Evaluation splits by angle to the camera axis (0,0,-1): Front180 is
/// inclusive at 90°, Front40 inclusive at 20°, Back strict beyond 90°.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    Full,
    Front180,
    Front40,
    Back,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [SplitTag::Full, SplitTag::Front180, SplitTag::Front40, SplitTag::Back];

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Front180 => "front180",
            SplitTag::Front40 => "front40",
            SplitTag::Back => "back",
        }
    }

    pub fn contains(self, g: GazeVector3) -> bool {
        let theta = angle_to_camera_deg(g).0;
        match self {
            SplitTag::Full => true,
            SplitTag::Front180 => theta <= 90.0,
            SplitTag::Front40 => theta <= 20.0,
            SplitTag::Back => theta > 90.0,
        }
    }
}

/// Direction the camera axis: looking straight into the camera.
pub const INTO_CAMERA: GazeVector3 = GazeVector3 { x: 0.0, y: 0.0, z: -1.0 };

pub fn normalize3(raw: [f64; 3]) -> Result<GazeVector3, GeometryError> {
    let n = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
    if n <= EPS_NORM {
        return Err(GeometryError::DegenerateVector(n));
    }
    Ok(GazeVector3 { x: raw[0] / n, y: raw[1] / n, z: raw[2] / n })
}

pub fn normalize2(raw: [f64; 2]) -> Result<Gaze2D, GeometryError> {
    let n = raw[0].hypot(raw[1]);
    if n <= EPS_NORM {
        return Err(GeometryError::DegenerateVector(n));
    }
    Ok(Gaze2D { x: raw[0] / n, y: raw[1] / n })
}

/// Angle between two unit gaze vectors, degrees. The dot product is clamped to
/// [-1, 1] so fp round-off cannot push arccos out of domain.
pub fn angular_error_deg(a: GazeVector3, b: GazeVector3) -> AngleDeg {
    AngleDeg(a.dot(b).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Planar angle between two unit 2D directions, degrees.
pub fn planar_angle_deg(a: Gaze2D, b: Gaze2D) -> AngleDeg {
    AngleDeg((a.x * b.x + a.y * b.y).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Angle to the camera axis (0,0,-1); drives split classification.
pub fn angle_to_camera_deg(g: GazeVector3) -> AngleDeg {
    angular_error_deg(g, INTO_CAMERA)
}

/// Image-plane projection of a gaze direction.
pub fn project_to_2d(g: GazeVector3) -> Result<Gaze2D, GeometryError> {
    let n = g.xy_norm();
    if n <= EPS_XY {
        return Err(GeometryError::NearAxisGaze);
    }
    Ok(Gaze2D { x: g.x / n, y: g.y / n })
}

/// A 3D gaze plus the flag marking that its image-plane direction was too
/// close to the optical axis for the pseudo-label rotation to be defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub gaze: GazeVector3,
    pub degenerate: bool,
}

/// Rotates a predicted gaze about the z-axis so its image-plane projection
/// matches the 2D ground truth v: (v_x·‖(ĝx,ĝy)‖, v_y·‖(ĝx,ĝy)‖, ĝz).
///
/// The z component is returned bitwise unchanged and the result stays unit
/// norm. When ‖(ĝx,ĝy)‖ ≤ [`EPS_XY`] any in-plane direction would be
/// arbitrary, so the prediction is returned as-is with `degenerate` set;
/// flagged samples are excluded from pseudo-label training downstream.
pub fn pseudo_label_3d(pred: GazeVector3, v: Gaze2D) -> PseudoLabel {
    let r = pred.xy_norm();
    if r <= EPS_XY {
        return PseudoLabel { gaze: pred, degenerate: true };
    }
    PseudoLabel {
        gaze: GazeVector3 { x: v.x * r, y: v.y * r, z: pred.z },
        degenerate: false,
    }
}

/// Split tags a gaze belongs to. Every unit vector gets `Full` and exactly one
/// of `Front180` (boundary inclusive) or `Back`.
pub fn split_of(g: GazeVector3) -> Vec<SplitTag> {
    SplitTag::ALL.iter().copied().filter(|t| t.contains(g)).collect()
}

/// Mirror a gaze for a horizontally flipped frame: +x points left, so only x
/// negates. Involution.
pub fn flip_gaze_horizontal(g: GazeVector3) -> GazeVector3 {
    GazeVector3 { x: -g.x, y: g.y, z: g.z }
}

/// Great-circle interpolation between unit gazes; u=0 yields `a` bitwise,
/// u=1 yields `b`. Endpoints closer than the fp floor short-circuit to `a`.
pub fn slerp_gaze(a: GazeVector3, b: GazeVector3, u: f64) -> Result<GazeVector3, GeometryError> {
    let sum_norm = ((a.x + b.x).powi(2) + (a.y + b.y).powi(2) + (a.z + b.z).powi(2)).sqrt();
    if sum_norm <= 1e-6 {
        return Err(GeometryError::AntipodalEndpoints);
    }
    let omega = a.dot(b).clamp(-1.0, 1.0).acos();
    let sin_omega = omega.sin();
    if sin_omega <= EPS_NORM {
        return Ok(a);
    }
    let wa = ((1.0 - u) * omega).sin() / sin_omega;
    let wb = (u * omega).sin() / sin_omega;
    Ok(GazeVector3 {
        x: wa * a.x + wb * b.x,
        y: wa * a.y + wb * b.y,
        z: wa * a.z + wb * b.z,
    })
}

/// Converts a gaze-following annotation to an image-plane direction:
/// v = normalize(target − origin) with the pixel y axis negated, because
/// pixels grow downward while the eye coordinate system has +y up. The origin
/// is conventionally the head-box center.
pub fn gaze2d_from_pixels(target: [f64; 2], origin: [f64; 2]) -> Result<Gaze2D, GeometryError> {
    normalize2([target[0] - origin[0], -(target[1] - origin[1])])
}

/// Uniform direction on the unit sphere: cos θ ~ U[-1,1], φ ~ U[0,2π).
/// Shared by tests across the crate.
#[cfg(test)]
pub(crate) fn random_unit(rng: &mut rand_chacha::ChaCha8Rng) -> GazeVector3 {
    use rand::Rng;
    let cos_t: f64 = rng.random_range(-1.0..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    GazeVector3 { x: sin_t * phi.cos(), y: sin_t * phi.sin(), z: cos_t }
}
