use ndarray::{Array2, ArrayView2};
use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use super::warp::bilinear_sampler;
use crate::autodiff::Sampler;

/// In-plane rotation about the pixel `(H/2, W/2)`, angle in degrees in
/// `[0, 360)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationElement {
    pub angle: f64,
}

impl RotationElement {
    pub fn identity() -> Self {
        Self { angle: 0.0 }
    }

    pub fn new(angle: f64) -> Self {
        // `+ 0.0` folds a negative zero into zero.
        Self {
            angle: angle.rem_euclid(360.0) + 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle == 0.0
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self::new(self.angle + other.angle)
    }

    pub fn inverse(&self) -> Self {
        Self::new(-self.angle)
    }

    /// `(cos, sin)` with exact values at multiples of 90 degrees.
    fn cos_sin(&self) -> (f64, f64) {
        match self.angle {
            a if a == 0.0 => (1.0, 0.0),
            a if a == 90.0 => (0.0, 1.0),
            a if a == 180.0 => (-1.0, 0.0),
            a if a == 270.0 => (0.0, -1.0),
            a => {
                let r = a.to_radians();
                (r.cos(), r.sin())
            }
        }
    }

    /// Backward-warping sampler: output pixel `p` reads the input at
    /// `c + R(-angle)(p - c)`.
    pub fn sampler(&self, h: usize, w: usize) -> Sampler {
        let (cos, sin) = self.cos_sin();
        let (cr, cc) = ((h / 2) as f64, (w / 2) as f64);
        bilinear_sampler(h, w, |r, c| {
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            // rotate (dc, dr) by -angle in the (x=col, y=row) plane
            let sc = cos * dc + sin * dr;
            let sr = -sin * dc + cos * dr;
            (cr + sr, cc + sc)
        })
    }
}

/// Rotates one complex frame with bilinear interpolation and zero fill.
pub fn act_rotate(g: &RotationElement, frame: ArrayView2<'_, Complex32>) -> Array2<Complex32> {
    if g.is_identity() {
        return frame.to_owned();
    }
    let (h, w) = frame.dim();
    g.sampler(h, w).apply_complex(frame)
}
