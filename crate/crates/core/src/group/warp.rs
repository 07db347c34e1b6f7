//! Bilinear backward-warping samplers with zero fill.

use crate::autodiff::Sampler;

/// Builds a sampler whose output pixel `(r, c)` reads the input at the
/// fractional pixel position `source(r, c)`. Taps outside the frame weigh 0.
pub fn bilinear_sampler(
    h: usize,
    w: usize,
    mut source: impl FnMut(usize, usize) -> (f64, f64),
) -> Sampler {
    let mut taps = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = source(r, c);
            taps.push(bilinear_taps(h, w, sr, sc));
        }
    }
    Sampler {
        height: h,
        width: w,
        taps,
    }
}

fn bilinear_taps(h: usize, w: usize, sr: f64, sc: f64) -> [(u32, f32); 4] {
    let mut out = [(0u32, 0.0f32); 4];
    if !(sr.is_finite() && sc.is_finite()) {
        return out;
    }
    let r0 = sr.floor();
    let c0 = sc.floor();
    let fr = sr - r0;
    let fc = sc - c0;
    let corners = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1.0, (1.0 - fr) * fc),
        (r0 + 1.0, c0, fr * (1.0 - fc)),
        (r0 + 1.0, c0 + 1.0, fr * fc),
    ];
    for (slot, (rr, cc, wgt)) in out.iter_mut().zip(corners) {
        if rr >= 0.0 && cc >= 0.0 && rr < h as f64 && cc < w as f64 && wgt != 0.0 {
            *slot = ((rr as usize * w + cc as usize) as u32, wgt as f32);
        }
    }
    out
}

/// Identity sampler (each output reads its own pixel with weight 1).
pub fn identity_sampler(h: usize, w: usize) -> Sampler {
    bilinear_sampler(h, w, |r, c| (r as f64, c as f64))
}
