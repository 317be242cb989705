//! Rotated-box birds-eye-view geometry and angle arithmetic.
//!
//! Boxes live in the ego frame. The footprint of a box is the rectangle of
//! length `l` along the heading and width `w` across it, rotated by `yaw`
//! about +z. Height never takes part in any BEV quantity.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Oriented 3D bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// `(x, y, z)` in meters.
    pub center: [f64; 3],
    /// `(w, l, h)` in meters.
    pub size: [f64; 3],
    /// Radians about +z.
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Self { center, size, yaw };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.center.iter().enumerate() {
            ensure_finite(&format!("center[{i}]"), *c)?;
        }
        for (i, s) in self.size.iter().enumerate() {
            ensure_finite(&format!("size[{i}]"), *s)?;
            if *s <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "size[{i}] must be strictly positive, got {s}"
                )));
            }
        }
        ensure_finite("yaw", self.yaw)
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn footprint_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.size[1];
        let hw = 0.5 * self.size[0];
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    ensure_finite("angle", theta)?;
    Ok(wrap_unchecked(theta))
}

pub(crate) fn wrap_unchecked(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let r = (theta + PI).rem_euclid(TWO_PI) - PI;
    if r >= PI {
        r - TWO_PI
    } else {
        r
    }
}

/// Smallest signed difference `a - b`, wrapped into `[-π, π)`.
pub fn signed_yaw_diff(a: f64, b: f64) -> Result<f64> {
    ensure_finite("yaw a", a)?;
    ensure_finite("yaw b", b)?;
    Ok(wrap_unchecked(a - b))
}

pub fn center_distance_xy(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

pub fn center_distance_3d(a: &Box3D, b: &Box3D) -> f64 {
    let d: f64 = (0..3).map(|k| (a.center[k] - b.center[k]).powi(2)).sum();
    d.sqrt()
}

/// Intersection-over-union of the two yaw-rotated footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    let area_a = a.footprint_area();
    let area_b = b.footprint_area();
    if !(area_a > 0.0 && area_b > 0.0) {
        return Err(Error::InvalidArgument(
            "degenerate (zero-area) footprint".into(),
        ));
    }
    a.validate()?;
    b.validate()?;
    if a.center[..2] == b.center[..2] && a.size[..2] == b.size[..2] && a.yaw == b.yaw {
        return Ok(1.0);
    }
    // Cheap reject on circumscribed circles.
    let ra = 0.5 * a.size[0].hypot(a.size[1]);
    let rb = 0.5 * b.size[0].hypot(b.size[1]);
    if center_distance_xy(a, b) >= ra + rb {
        return Ok(0.0);
    }
    let inter = convex_intersection_area(&a.footprint(), &b.footprint());
    if inter <= 0.0 {
        return Ok(0.0);
    }
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Area of the intersection of two convex counter-clockwise polygons,
/// by Sutherland-Hodgman clipping followed by the shoelace formula.
pub fn convex_intersection_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for e in 0..n {
        if output.is_empty() {
            break;
        }
        let p = clip[e];
        let q = clip[(e + 1) % n];
        let edge_len = (q[0] - p[0]).hypot(q[1] - p[1]);
        let eps = 1e-12 * edge_len.max(1.0);
        let side = |pt: [f64; 2]| ((q[0] - p[0]) * (pt[1] - p[1]) - (q[1] - p[1]) * (pt[0] - p[0])) / edge_len;
        let input = std::mem::take(&mut output);
        let m = input.len();
        for k in 0..m {
            let cur = input[k];
            let prev = input[(k + m - 1) % m];
            let sc = side(cur);
            let sp = side(prev);
            let cur_in = sc >= -eps;
            let prev_in = sp >= -eps;
            if cur_in {
                if !prev_in {
                    output.push(line_cross(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_cross(prev, cur, sp, sc));
            }
        }
    }
    if output.len() < 3 {
        return 0.0;
    }
    polygon_area(&output).max(0.0)
}

fn line_cross(a: [f64; 2], b: [f64; 2], sa: f64, sb: f64) -> [f64; 2] {
    let t = sa / (sa - sb);
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Signed shoelace area (positive for counter-clockwise order).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|k| {
            let p = poly[k];
            let q = poly[(k + 1) % n];
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice
}
