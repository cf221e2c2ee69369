//! Angle helpers shared by fitting, filtering and analytics.

use std::f64::consts::PI;

const TAU: f64 = 2.0 * PI;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_half_open(angle: f64) -> f64 {
    if (-PI..PI).contains(&angle) {
        return angle;
    }
    let mut a = (angle + PI).rem_euclid(TAU) - PI;
    // rem_euclid can return TAU for tiny negative inputs
    if a >= PI {
        a -= TAU;
    }
    a
}

/// Wraps an angle into `(-π, π]`, the convention used for innovations.
pub fn wrap_innovation(angle: f64) -> f64 {
    let a = wrap_half_open(angle);
    if a == -PI {
        PI
    } else {
        a
    }
}

/// Shortest signed difference `a - b`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_innovation(a - b)
}
