//! Orientation codec: yaw angle about the vertical axis <-> (cos, sin).

use core::f64::consts::PI;

/// Vectors shorter than this decode as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-3;

/// Result of decoding a (cos, sin) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedAngle {
    /// Angle in (-pi, pi].
    pub theta: f64,
    /// Unit-norm version of the input pair.
    pub unit: [f64; 2],
    /// Input norm was below [`DEGENERATE_NORM`].
    pub degenerate: bool,
}

pub fn encode_angle(theta: f64) -> [f64; 2] {
    [libm::cos(theta), libm::sin(theta)]
}

/// Normalizes the pair before taking `atan2`. A zero vector decodes to angle 0.
pub fn decode_angle(v: [f64; 2]) -> DecodedAngle {
    let norm = libm::hypot(v[0], v[1]);
    let degenerate = norm < DEGENERATE_NORM;
    let unit = if norm > 0.0 {
        [v[0] / norm, v[1] / norm]
    } else {
        [1.0, 0.0]
    };
    DecodedAngle {
        theta: libm::atan2(unit[1], unit[0]),
        unit,
        degenerate,
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = libm::fmod(theta, 2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Smallest absolute difference between two angles, in [0, pi].
pub fn angle_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}
