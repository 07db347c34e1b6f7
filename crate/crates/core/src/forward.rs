//! The time-varying undersampled Fourier operator `A_t = M_t F`, its adjoint,
//! Cartesian mask generation and the k-space noise model.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex32;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::video::{transform_frame_into, ImageSequence, KTSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScheme {
    GaussianColumns,
    UniformColumns,
}

/// Distribution of Cartesian sampling patterns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub acceleration: f64,
    pub acs_lines: usize,
    pub scheme: MaskScheme,
    pub per_frame_iid: bool,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            acceleration: 8.0,
            acs_lines: 8,
            scheme: MaskScheme::GaussianColumns,
            per_frame_iid: true,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.acceleration.is_finite() && self.acceleration >= 1.0) {
            return Err(Error::config(format!(
                "acceleration must be >= 1, got {}",
                self.acceleration
            )));
        }
        Ok(())
    }

    /// Width of the Gaussian column density, `W / 6`.
    pub fn density_width(w: usize) -> f64 {
        w as f64 / 6.0
    }

    /// Half-open column range of the always-sampled ACS block.
    pub fn acs_range(&self, w: usize) -> std::ops::Range<usize> {
        let start = w / 2 - self.acs_lines / 2;
        start..start + self.acs_lines
    }

    /// Per-column selection probabilities. ACS columns have probability 1 and
    /// the expected number of sampled columns is `W / R`.
    pub fn column_probabilities(&self, w: usize) -> Result<Vec<f64>> {
        self.validate()?;
        if self.acs_lines >= w {
            return Err(Error::config(format!(
                "acs_lines {} must be smaller than width {w}",
                self.acs_lines
            )));
        }
        let acs = self.acs_range(w);
        let budget = w as f64 / self.acceleration - self.acs_lines as f64;
        if budget < -1e-9 {
            return Err(Error::config(format!(
                "infeasible mask: {} ACS lines exceed the 1/{} budget of {:.2} columns",
                self.acs_lines,
                self.acceleration,
                w as f64 / self.acceleration
            )));
        }
        let budget = budget.max(0.0);
        let free: Vec<usize> = (0..w).filter(|c| !acs.contains(c)).collect();
        let weights: Vec<f64> = match self.scheme {
            MaskScheme::GaussianColumns => {
                let s = Self::density_width(w);
                let centre = (w / 2) as f64;
                free.iter()
                    .map(|&c| (-(c as f64 - centre).powi(2) / (2.0 * s * s)).exp())
                    .collect()
            }
            MaskScheme::UniformColumns => vec![1.0; free.len()],
        };

        let mut probs = vec![0.0; w];
        for c in acs {
            probs[c] = 1.0;
        }
        if budget >= free.len() as f64 - 1e-12 {
            for &c in &free {
                probs[c] = 1.0;
            }
            return Ok(probs);
        }
        let expected = |scale: f64| -> f64 { weights.iter().map(|g| (scale * g).min(1.0)).sum() };
        let mut hi = 1.0;
        while expected(hi) < budget {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if expected(mid) < budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let scale = 0.5 * (lo + hi);
        for (&c, g) in free.iter().zip(&weights) {
            probs[c] = (scale * g).min(1.0);
        }
        Ok(probs)
    }
}

/// Binary Cartesian sampling pattern `M = {M_t}`.
///
/// Stored column-wise: frame `t` samples every row of column `w` iff
/// `columns[[t, w]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Masks {
    columns: Array2<bool>,
    height: usize,
    spec: MaskSpec,
}

impl Masks {
    pub fn from_columns(columns: Array2<bool>, height: usize, spec: MaskSpec) -> Self {
        Self {
            columns,
            height,
            spec,
        }
    }

    /// All-ones pattern (no undersampling).
    pub fn full(t: usize, h: usize, w: usize) -> Self {
        let spec = MaskSpec {
            acceleration: 1.0,
            acs_lines: 0,
            ..MaskSpec::default()
        };
        Self::from_columns(Array2::from_elem((t, w), true), h, spec)
    }

    pub fn empty(t: usize, h: usize, w: usize) -> Self {
        let spec = MaskSpec {
            acceleration: 1.0,
            acs_lines: 0,
            ..MaskSpec::default()
        };
        Self::from_columns(Array2::from_elem((t, w), false), h, spec)
    }

    /// Rebuilds a mask from a dense `[T, H, W]` binary array, rejecting
    /// patterns that are not column-structured.
    pub fn from_dense(dense: &Array3<u8>, spec: MaskSpec) -> Result<Self> {
        let (t, h, w) = dense.dim();
        let mut columns = Array2::from_elem((t, w), false);
        for ti in 0..t {
            for c in 0..w {
                let first = dense[[ti, 0, c]];
                if first > 1 {
                    return Err(Error::config(format!("mask value {first} is not binary")));
                }
                if (1..h).any(|r| dense[[ti, r, c]] != first) {
                    return Err(Error::config(format!(
                        "mask frame {ti} column {c} is not column-structured"
                    )));
                }
                columns[[ti, c]] = first == 1;
            }
        }
        Ok(Self::from_columns(columns, h, spec))
    }

    pub fn to_dense(&self) -> Array3<u8> {
        let (t, w) = self.columns.dim();
        Array3::from_shape_fn((t, self.height, w), |(ti, _, c)| {
            self.columns[[ti, c]] as u8
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (t, w) = self.columns.dim();
        (t, self.height, w)
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    pub fn columns(&self) -> &Array2<bool> {
        &self.columns
    }

    #[inline]
    pub fn is_sampled(&self, t: usize, col: usize) -> bool {
        self.columns[[t, col]]
    }

    pub fn sampled_columns(&self, t: usize) -> usize {
        self.columns.row(t).iter().filter(|&&b| b).count()
    }

    /// Number of sampled complex k-space entries `m`.
    pub fn sampled_entries(&self) -> usize {
        self.columns.iter().filter(|&&b| b).count() * self.height
    }

    /// Column-wise 0/1 weights, `[T * W]`.
    pub(crate) fn column_weights(&self) -> Vec<f32> {
        self.columns.iter().map(|&b| b as u8 as f32).collect()
    }

    pub(crate) fn check_shape(&self, dims: (usize, usize, usize)) -> Result<()> {
        let own = self.dims();
        if own != dims {
            return Err(Error::shape(
                &[own.0, own.1, own.2],
                &[dims.0, dims.1, dims.2],
            ));
        }
        Ok(())
    }
}

/// Draws a column mask for every frame. Deterministic in `(spec, t, h, w)`.
pub fn sample_masks(spec: &MaskSpec, t: usize, h: usize, w: usize) -> Result<Masks> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("mask size {h}x{w} must be even")));
    }
    let probs = spec.column_probabilities(w)?;
    let mut columns = Array2::from_elem((t, w), false);
    for ti in 0..t {
        let stream = if spec.per_frame_iid { ti as u64 } else { 0 };
        let mut rng = rng::rng_from(spec.seed, &[rng::TAG_MASK, stream]);
        for (c, &p) in probs.iter().enumerate() {
            // Always consume one draw per column so streams stay aligned.
            let u: f64 = rng.random();
            columns[[ti, c]] = p >= 1.0 || u < p;
        }
    }
    Ok(Masks::from_columns(columns, h, spec.clone()))
}

/// `y_t = M_t F x_t` for every frame.
pub fn forward(x: &ImageSequence, masks: &Masks) -> Result<KTSequence> {
    masks.check_shape(x.dims())?;
    let mut out = Array3::<Complex32>::zeros(x.data().raw_dim());
    for (t, (src, mut dst)) in x.data().outer_iter().zip(out.outer_iter_mut()).enumerate() {
        transform_frame_into(dst.view_mut(), src, false);
        for (c, mut col) in dst.axis_iter_mut(Axis(1)).enumerate() {
            if !masks.is_sampled(t, c) {
                col.fill(Complex32::default());
            }
        }
    }
    Ok(KTSequence::from_trusted(out))
}

/// `x_t = F^H (M_t y_t)` for every frame.
pub fn adjoint(y: &KTSequence, masks: &Masks) -> Result<ImageSequence> {
    masks.check_shape(y.dims())?;
    let mut masked = y.data().clone();
    apply_mask_in_place(&mut masked, masks);
    let mut out = Array3::<Complex32>::zeros(masked.raw_dim());
    for (src, mut dst) in masked.outer_iter().zip(out.outer_iter_mut()) {
        transform_frame_into(dst.view_mut(), src, true);
    }
    Ok(ImageSequence::from_trusted(out))
}

/// Zero-filled reconstruction `A^H y`.
pub fn zero_filled(y: &KTSequence, masks: &Masks) -> Result<ImageSequence> {
    adjoint(y, masks)
}

pub(crate) fn apply_mask_in_place(data: &mut Array3<Complex32>, masks: &Masks) {
    for (t, mut frame) in data.outer_iter_mut().enumerate() {
        for (c, mut col) in frame.axis_iter_mut(Axis(1)).enumerate() {
            if !masks.is_sampled(t, c) {
                col.fill(Complex32::default());
            }
        }
    }
}

/// Adds circular complex Gaussian noise of variance `sigma^2` at sampled
/// locations only.
pub fn add_noise(y: &KTSequence, masks: &Masks, sigma: f64, rng: &mut Rng) -> Result<KTSequence> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    masks.check_shape(y.dims())?;
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let normal = Normal::new(0.0, sigma / std::f64::consts::SQRT_2).expect("valid std");
    let mut data = y.data().clone();
    for (t, mut frame) in data.outer_iter_mut().enumerate() {
        for (c, mut col) in frame.axis_iter_mut(Axis(1)).enumerate() {
            if masks.is_sampled(t, c) {
                for v in col.iter_mut() {
                    let re = normal.sample(rng);
                    let im = normal.sample(rng);
                    *v += Complex32::new(re as f32, im as f32);
                }
            }
        }
    }
    Ok(KTSequence::from_trusted(data))
}

/// Root-mean-square magnitude over sampled entries.
pub fn measurement_rms(y: &KTSequence, masks: &Masks) -> f64 {
    let m = masks.sampled_entries();
    if m == 0 {
        return 0.0;
    }
    let ss: f64 = y.data().iter().map(|v| v.norm_sqr() as f64).sum();
    (ss / m as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::inner_product;

    fn random_sequence(t: usize, h: usize, w: usize, seed: u64) -> ImageSequence {
        let mut rng = rng::rng_from(seed, &[]);
        ImageSequence::from_fn(t, h, w, |_| {
            Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .unwrap()
    }

    fn random_kt(masks: &Masks, seed: u64) -> KTSequence {
        let (t, h, w) = masks.dims();
        let mut rng = rng::rng_from(seed, &[]);
        let mut data = Array3::from_shape_fn((t, h, w), |_| {
            Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        apply_mask_in_place(&mut data, masks);
        KTSequence::new(data).unwrap()
    }

    fn spec(r: f64, acs: usize, seed: u64) -> MaskSpec {
        MaskSpec {
            acceleration: r,
            acs_lines: acs,
            scheme: MaskScheme::GaussianColumns,
            per_frame_iid: true,
            seed,
        }
    }

    #[test]
    fn no_acceleration_gives_full_mask() {
        let m = sample_masks(&spec(1.0, 0, 5), 3, 8, 8).unwrap();
        assert!(m.columns().iter().all(|&b| b));
    }

    #[test]
    fn mean_sampled_columns_matches_budget() {
        // Monte-Carlo over 1000 draws of a 12-frame 256-wide mask.
        let base = spec(8.0, 8, 0);
        let mut total = 0usize;
        let draws = 1000;
        for d in 0..draws {
            let m = sample_masks(&base.with_seed(d), 12, 4, 256).unwrap();
            total += (0..12).map(|t| m.sampled_columns(t)).sum::<usize>();
        }
        let mean = total as f64 / (draws * 12) as f64;
        assert!((mean - 32.0).abs() <= 1.0, "mean sampled columns {mean}");
    }

    #[test]
    fn probabilities_sum_to_budget() {
        let p = spec(8.0, 8, 0).column_probabilities(256).unwrap();
        let s: f64 = p.iter().sum();
        assert!((s - 32.0).abs() < 1e-9);
        let p = MaskSpec {
            scheme: MaskScheme::UniformColumns,
            ..spec(4.0, 8, 0)
        }
        .column_probabilities(64)
        .unwrap();
        assert!((p.iter().sum::<f64>() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic_and_keeps_acs() {
        let s = spec(4.0, 8, 42);
        let a = sample_masks(&s, 6, 16, 64).unwrap();
        let b = sample_masks(&s, 6, 16, 64).unwrap();
        assert_eq!(a, b);
        for t in 0..6 {
            for c in s.acs_range(64) {
                assert!(a.is_sampled(t, c));
            }
        }
        let c = sample_masks(&s.with_seed(43), 6, 16, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shared_frames_when_not_iid() {
        let s = MaskSpec {
            per_frame_iid: false,
            ..spec(4.0, 4, 1)
        };
        let m = sample_masks(&s, 5, 8, 32).unwrap();
        for t in 1..5 {
            assert_eq!(m.columns().row(t), m.columns().row(0));
        }
    }

    #[test]
    fn infeasible_acs_rejected() {
        assert!(sample_masks(&spec(8.0, 40, 0), 2, 8, 256).is_err());
        assert!(sample_masks(&spec(0.5, 0, 0), 2, 8, 8).is_err());
        assert!(sample_masks(&spec(1.0, 8, 0), 2, 8, 8).is_err());
    }

    #[test]
    fn full_mask_forward_is_fft() {
        let x = random_sequence(2, 8, 8, 1);
        let y = forward(&x, &Masks::full(2, 8, 8)).unwrap();
        for t in 0..2 {
            let k = crate::video::fft2_centered(x.frame(t)).unwrap();
            assert_eq!(k, y.data().index_axis(Axis(0), t));
        }
        let back = adjoint(&y, &Masks::full(2, 8, 8)).unwrap();
        let err = (back.data() - x.data())
            .iter()
            .map(|v| v.norm())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-5);
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let m = sample_masks(&spec(2.0, 2, 0), 2, 8, 8).unwrap();
        let y = forward(&ImageSequence::zeros(2, 8, 8).unwrap(), &m).unwrap();
        assert!(y.data().iter().all(|v| *v == Complex32::default()));
        let x = adjoint(&y, &m).unwrap();
        assert!(x.data().iter().all(|v| *v == Complex32::default()));
    }

    #[test]
    fn measurements_confined_to_support() {
        let m = sample_masks(&spec(2.0, 2, 9), 2, 8, 8).unwrap();
        let y = forward(&random_sequence(2, 8, 8, 4), &m).unwrap();
        for ((t, _, c), v) in y.data().indexed_iter() {
            if !m.is_sampled(t, c) {
                assert_eq!(*v, Complex32::default());
            }
        }
    }

    #[test]
    fn adjoint_identity_on_random_instances() {
        for i in 0..100u64 {
            let m = sample_masks(&spec(2.0, 2, i), 3, 8, 8).unwrap();
            let x = random_sequence(3, 8, 8, 1000 + i);
            let y = random_kt(&m, 2000 + i);
            let lhs =
                inner_product(forward(&x, &m).unwrap().data().view(), y.data().view()).unwrap();
            let rhs =
                inner_product(x.data().view(), adjoint(&y, &m).unwrap().data().view()).unwrap();
            let scale = x.norm()
                * y.data()
                    .iter()
                    .map(|v| v.norm_sqr() as f64)
                    .sum::<f64>()
                    .sqrt();
            assert!((lhs - rhs).norm() / scale < 1e-4);
        }
    }

    #[test]
    fn masking_is_idempotent_on_support() {
        let m = sample_masks(&spec(2.0, 2, 3), 3, 8, 8).unwrap();
        let y = random_kt(&m, 5);
        let y2 = forward(&adjoint(&y, &m).unwrap(), &m).unwrap();
        let err = (y2.data() - y.data())
            .iter()
            .map(|v| v.norm())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-5);
    }

    #[test]
    fn zero_filled_is_adjoint() {
        let m = sample_masks(&spec(2.0, 2, 3), 3, 8, 8).unwrap();
        let y = random_kt(&m, 6);
        assert_eq!(zero_filled(&y, &m).unwrap(), adjoint(&y, &m).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = Masks::full(2, 8, 8);
        let x = random_sequence(3, 8, 8, 0);
        assert!(matches!(forward(&x, &m), Err(Error::Shape { .. })));
    }

    #[test]
    fn noise_statistics_and_support() {
        let m = sample_masks(&spec(4.0, 8, 2), 64, 128, 64).unwrap();
        let y = KTSequence::new(Array3::zeros((64, 128, 64))).unwrap();
        let mut r = rng::rng_from(0, &[]);
        let sigma = 0.7;
        let noisy = add_noise(&y, &m, sigma, &mut r).unwrap();
        let mut count = 0usize;
        let mut ss = 0.0f64;
        for ((t, _, c), v) in noisy.data().indexed_iter() {
            if m.is_sampled(t, c) {
                count += 1;
                ss += v.norm_sqr() as f64;
            } else {
                assert_eq!(*v, Complex32::default());
            }
        }
        assert!(count >= 100_000, "only {count} sampled entries");
        let var = ss / count as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "variance {var}");

        let clean = add_noise(&y, &m, 0.0, &mut r).unwrap();
        assert_eq!(clean, y);
        assert!(add_noise(&y, &m, -1.0, &mut r).is_err());
    }

    #[test]
    fn dense_round_trip_and_validation() {
        let m = sample_masks(&spec(4.0, 2, 8), 3, 8, 16).unwrap();
        let back = Masks::from_dense(&m.to_dense(), m.spec().clone()).unwrap();
        assert_eq!(back, m);
        let mut dense = m.to_dense();
        dense[[0, 3, 0]] ^= 1;
        assert!(Masks::from_dense(&dense, m.spec().clone()).is_err());
    }
}
