use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ImagingError, Point, Result};

/// A scalar with its unit tag (`px`, `deg`, or a caller-supplied unit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub value: f64,
    pub units: String,
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.value.fract() == 0.0 && self.value.abs() < 1e15 {
            write!(f, "{:.1} {}", self.value, self.units)
        } else {
            write!(f, "{} {}", self.value, self.units)
        }
    }
}

/// Euclidean distance; `scale` is `(units_per_pixel, unit)`.
pub fn measure_distance(p1: Point, p2: Point, scale: Option<(f64, &str)>) -> Result<Measurement> {
    if !p1.is_finite() || !p2.is_finite() {
        return Err(ImagingError::NonFinite);
    }
    let d = (p2.x - p1.x).hypot(p2.y - p1.y);
    match scale {
        None => Ok(Measurement {
            value: d,
            units: "px".into(),
        }),
        Some((upp, unit)) => {
            if !(upp.is_finite() && upp > 0.0) {
                return Err(ImagingError::InvalidParameter(format!(
                    "units per pixel must be positive, got {upp}"
                )));
            }
            Ok(Measurement {
                value: d * upp,
                units: unit.to_string(),
            })
        }
    }
}

/// Interior angle at `vertex` in degrees, within [0, 180].
pub fn measure_angle(a: Point, vertex: Point, b: Point) -> Result<Measurement> {
    if !a.is_finite() || !vertex.is_finite() || !b.is_finite() {
        return Err(ImagingError::NonFinite);
    }
    let (ux, uy) = (a.x - vertex.x, a.y - vertex.y);
    let (vx, vy) = (b.x - vertex.x, b.y - vertex.y);
    let nu = ux.hypot(uy);
    let nv = vx.hypot(vy);
    if nu == 0.0 || nv == 0.0 {
        return Err(ImagingError::ZeroLengthArm);
    }
    let cos = ((ux * vx + uy * vy) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(Measurement {
        value: cos.acos().to_degrees(),
        units: "deg".into(),
    })
}
