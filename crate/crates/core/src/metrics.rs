//! Image-quality metrics in the fastMRI convention: magnitude images with the
//! data range taken from the ground truth. NMSE is computed on the complex
//! values.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::ImageSequence;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(xhat: &ImageSequence, gt: &ImageSequence) -> Result<()> {
    let (a, b) = (xhat.dims(), gt.dims());
    if a != b {
        return Err(Error::shape(&[b.0, b.1, b.2], &[a.0, a.1, a.2]));
    }
    Ok(())
}

fn data_range(gt: &ImageSequence) -> Result<f64> {
    let range = gt.max_magnitude();
    if range == 0.0 {
        return Err(Error::Numeric("ground truth is all zero".into()));
    }
    Ok(range)
}

pub fn psnr(xhat: &ImageSequence, gt: &ImageSequence) -> Result<f64> {
    same_shape(xhat, gt)?;
    let range = data_range(gt)?;
    let n = gt.data().len() as f64;
    let mse = xhat
        .data()
        .iter()
        .zip(gt.data().iter())
        .map(|(a, b)| (a.norm() as f64 - b.norm() as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((20.0 * range.log10() - 10.0 * mse.log10()).min(PSNR_CAP))
}

/// Mean SSIM of two magnitude images over all fully contained 7×7 windows
/// (sample covariance), for a given data range.
pub fn ssim_frame(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, range: f64) -> Result<f64> {
    let (h, w) = x.dim();
    if y.dim() != (h, w) {
        return Err(Error::shape(&[h, w], &[y.dim().0, y.dim().1]));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let np = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = np / (np - 1.0);

    // Summed-area tables of x, y, x², y², xy.
    let table = |f: &dyn Fn(usize, usize) -> f64| {
        let mut s = Array2::<f64>::zeros((h + 1, w + 1));
        for r in 0..h {
            for c in 0..w {
                s[[r + 1, c + 1]] = f(r, c) + s[[r, c + 1]] + s[[r + 1, c]] - s[[r, c]];
            }
        }
        s
    };
    let sx = table(&|r, c| x[[r, c]]);
    let sy = table(&|r, c| y[[r, c]]);
    let sxx = table(&|r, c| x[[r, c]] * x[[r, c]]);
    let syy = table(&|r, c| y[[r, c]] * y[[r, c]]);
    let sxy = table(&|r, c| x[[r, c]] * y[[r, c]]);
    let k = SSIM_WINDOW;
    let window = |s: &Array2<f64>, r: usize, c: usize| {
        (s[[r + k, c + k]] - s[[r, c + k]] - s[[r + k, c]] + s[[r, c]]) / np
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let ux = window(&sx, r, c);
            let uy = window(&sy, r, c);
            let vx = cov_norm * (window(&sxx, r, c) - ux * ux);
            let vy = cov_norm * (window(&syy, r, c) - uy * uy);
            let vxy = cov_norm * (window(&sxy, r, c) - ux * uy);
            total += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over frames of the per-frame SSIM of magnitude images.
pub fn ssim(xhat: &ImageSequence, gt: &ImageSequence) -> Result<f64> {
    same_shape(xhat, gt)?;
    let range = data_range(gt)?;
    ssim_with_range(xhat, gt, range)
}

pub fn ssim_with_range(xhat: &ImageSequence, gt: &ImageSequence, range: f64) -> Result<f64> {
    same_shape(xhat, gt)?;
    let (mx, mg) = (xhat.magnitude(), gt.magnitude());
    let t = gt.frames();
    let mut total = 0.0;
    for f in 0..t {
        total += ssim_frame(
            mx.index_axis(ndarray::Axis(0), f),
            mg.index_axis(ndarray::Axis(0), f),
            range,
        )?;
    }
    Ok(total / t as f64)
}

pub fn nmse(xhat: &ImageSequence, gt: &ImageSequence) -> Result<f64> {
    same_shape(xhat, gt)?;
    let energy = gt.norm().powi(2);
    if energy == 0.0 {
        return Err(Error::Numeric("ground truth is all zero".into()));
    }
    let err: f64 = xhat
        .data()
        .iter()
        .zip(gt.data().iter())
        .map(|(a, b)| {
            let d = a - b;
            (d.re as f64).powi(2) + (d.im as f64).powi(2)
        })
        .sum();
    Ok(err / energy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and (n − 1)-normalized standard deviation.
pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::config("cannot aggregate an empty list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Summary { mean, std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl SequenceMetrics {
    pub fn compute(
        id: impl Into<String>,
        xhat: &ImageSequence,
        gt: &ImageSequence,
    ) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            psnr: psnr(xhat, gt)?,
            ssim: ssim(xhat, gt)?,
            nmse: nmse(xhat, gt)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: Summary,
    pub ssim: Summary,
    pub nmse: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sequence: Vec<SequenceMetrics>,
    pub aggregate: Aggregate,
    pub count: usize,
}

impl MetricsReport {
    pub fn new(per_sequence: Vec<SequenceMetrics>) -> Result<Self> {
        let column = |f: fn(&SequenceMetrics) -> f64| {
            aggregate(&per_sequence.iter().map(f).collect::<Vec<_>>())
        };
        let aggregate = Aggregate {
            psnr: column(|m| m.psnr)?,
            ssim: column(|m| m.ssim)?,
            nmse: column(|m| m.nmse)?,
        };
        Ok(Self {
            count: per_sequence.len(),
            per_sequence,
            aggregate,
        })
    }

    /// Checks that the count and aggregate match the per-sequence values.
    pub fn validate(&self) -> Result<()> {
        let again = Self::new(self.per_sequence.clone())?;
        let close = |a: Summary, b: Summary| {
            (a.mean - b.mean).abs() <= 1e-9 * (1.0 + b.mean.abs())
                && (a.std - b.std).abs() <= 1e-9 * (1.0 + b.std.abs())
        };
        let agg = &self.aggregate;
        if again.count != self.count
            || !close(agg.psnr, again.aggregate.psnr)
            || !close(agg.ssim, again.aggregate.ssim)
            || !close(agg.nmse, again.aggregate.nmse)
        {
            return Err(Error::config(
                "metrics report aggregate does not match its entries",
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("bad metrics report: {e}")))?;
        report.validate()?;
        Ok(report)
    }

    /// Aligned plain-text table, one row per sequence plus a summary row.
    pub fn to_table(&self) -> String {
        let id_width = self
            .per_sequence
            .iter()
            .map(|m| m.id.chars().count())
            .chain([8])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<id_width$}  {:>13}  {:>15}  {:>17}",
            "sequence", "PSNR", "SSIM", "NMSE"
        );
        for m in &self.per_sequence {
            let _ = writeln!(
                out,
                "{:<id_width$}  {:>13.2}  {:>15.4}  {:>17.5}",
                m.id, m.psnr, m.ssim, m.nmse
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            out,
            "{:<id_width$}  {:>13}  {:>15}  {:>17}",
            "mean±std",
            format!("{:.2}±{:.2}", a.psnr.mean, a.psnr.std),
            format!("{:.4}±{:.4}", a.ssim.mean, a.ssim.std),
            format!("{:.5}±{:.5}", a.nmse.mean, a.nmse.std),
        );
        out
    }
}
