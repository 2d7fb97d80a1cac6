use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Position in metres plus heading about the gravity axis in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, z: f64, theta: f64) -> Self {
        Self { x, y, z, theta }
    }

    pub fn components(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.theta]
    }

    pub fn from_components(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// Copy with the heading wrapped to `[-pi, pi]`.
    pub fn normalized(self) -> Self {
        Self { theta: wrap_angle(self.theta), ..self }
    }

    pub fn horizontal_distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Wraps an angle to `[-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..=PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w < -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Signed difference `a - b` as a value in `[-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}
