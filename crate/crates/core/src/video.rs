//! Complex video containers and the centered orthonormal 2D Fourier transform.
//!
//! Frames are stored as `[T, H, W]` arrays of `Complex32`. Transforms and
//! reductions accumulate in `f64`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView, ArrayView2, ArrayViewMut2, Dimension, Zip};
use num_complex::{Complex32, Complex64};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Smallest frame side accepted by [`ImageSequence`].
pub const MIN_SIDE: usize = 4;

fn check_dims(t: usize, h: usize, w: usize) -> Result<()> {
    if t < 1 {
        return Err(Error::config("sequence needs at least one frame"));
    }
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::config(format!(
            "frame size {h}x{w} below minimum {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "frame size {h}x{w} must be even in both dimensions"
        )));
    }
    Ok(())
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a Complex32>, what: &str) -> Result<()> {
    if values
        .into_iter()
        .all(|v| v.re.is_finite() && v.im.is_finite())
    {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// A complex-valued 2D+t image sequence `x`, shape `[T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence {
    data: Array3<Complex32>,
}

impl ImageSequence {
    pub fn new(data: Array3<Complex32>) -> Result<Self> {
        let (t, h, w) = data.dim();
        check_dims(t, h, w)?;
        check_finite(data.iter(), "image sequence")?;
        Ok(Self { data })
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> Result<Self> {
        check_dims(t, h, w)?;
        Ok(Self {
            data: Array3::zeros((t, h, w)),
        })
    }

    /// Builds a sequence from frames produced by `f(t, row, col)`.
    pub fn from_fn(
        t: usize,
        h: usize,
        w: usize,
        f: impl FnMut((usize, usize, usize)) -> Complex32,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((t, h, w), f))
    }

    pub(crate) fn from_trusted(data: Array3<Complex32>) -> Self {
        debug_assert!(data.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
        Self { data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array3<Complex32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<Complex32> {
        self.data
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, Complex32> {
        self.data.index_axis(ndarray::Axis(0), t)
    }

    /// Euclidean norm over all complex entries.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| Complex64::new(v.re as f64, v.im as f64).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.norm() as f64)
            .fold(0.0, f64::max)
    }

    /// Magnitude video as `f64`.
    pub fn magnitude(&self) -> Array3<f64> {
        self.data
            .mapv(|v| Complex64::new(v.re as f64, v.im as f64).norm())
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self::from_trusted(self.data.mapv(|v| v * factor))
    }

    /// Applies `f` to every frame independently.
    pub fn map_frames(
        &self,
        mut f: impl FnMut(ArrayView2<'_, Complex32>) -> Array2<Complex32>,
    ) -> Self {
        let mut out = Array3::zeros(self.data.raw_dim());
        for (t, frame) in self.data.outer_iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), t).assign(&f(frame));
        }
        Self::from_trusted(out)
    }
}

/// Undersampled k-t-space measurements `y`, shape `[T, H, W]` on the image grid.
///
/// Entries at unsampled locations are exactly zero; see
/// [`crate::forward::Masks`] for the sampling pattern that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct KTSequence {
    data: Array3<Complex32>,
}

impl KTSequence {
    /// Wraps raw k-space data. Mask support is checked by the consumers in
    /// [`crate::forward`].
    pub fn new(data: Array3<Complex32>) -> Result<Self> {
        let (t, h, w) = data.dim();
        check_dims(t, h, w)?;
        check_finite(data.iter(), "k-t-space sequence")?;
        Ok(Self { data })
    }

    pub(crate) fn from_trusted(data: Array3<Complex32>) -> Self {
        Self { data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<Complex32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<Complex32> {
        self.data
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self::from_trusted(self.data.mapv(|v| v * factor))
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// In-place centered orthonormal 2D DFT of a row-major `h x w` buffer.
///
/// Equivalent to `fftshift(fft2(ifftshift(x))) / sqrt(h w)` for even sizes.
pub(crate) fn fft2_centered_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    // For even sizes ifftshift == fftshift == roll by half.
    roll_half(buf, h, w);

    let row_fft = plan(w, inverse);
    let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(w) {
        row_fft.process_with_scratch(row, &mut scratch);
    }

    let col_fft = plan(h, inverse);
    let mut scratch = vec![Complex64::default(); col_fft.get_inplace_scratch_len()];
    let mut col = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process_with_scratch(&mut col, &mut scratch);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }

    roll_half(buf, h, w);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= norm;
    }
}

fn roll_half(buf: &mut [Complex64], h: usize, w: usize) {
    let (hh, hw) = (h / 2, w / 2);
    for r in 0..hh {
        for c in 0..w {
            let c2 = (c + hw) % w;
            buf.swap(r * w + c, (r + hh) * w + c2);
        }
    }
}

fn transform_frame(
    frame: ArrayView2<'_, Complex32>,
    inverse: bool,
    what: &str,
) -> Result<Array2<Complex32>> {
    let (h, w) = frame.dim();
    check_finite(frame.iter(), what)?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::config(format!(
            "centered FFT requires even non-zero frame sizes, got {h}x{w}"
        )));
    }
    let mut buf: Vec<Complex64> = frame
        .iter()
        .map(|v| Complex64::new(v.re as f64, v.im as f64))
        .collect();
    fft2_centered_in_place(&mut buf, h, w, inverse);
    Ok(Array2::from_shape_vec(
        (h, w),
        buf.into_iter()
            .map(|v| Complex32::new(v.re as f32, v.im as f32))
            .collect(),
    )
    .expect("buffer length matches frame"))
}

/// Centered orthonormal 2D DFT of one frame (DC at `(H/2, W/2)`).
pub fn fft2_centered(frame: ArrayView2<'_, Complex32>) -> Result<Array2<Complex32>> {
    transform_frame(frame, false, "fft2_centered input")
}

/// Exact inverse (and adjoint) of [`fft2_centered`].
pub fn ifft2_centered(frame: ArrayView2<'_, Complex32>) -> Result<Array2<Complex32>> {
    transform_frame(frame, true, "ifft2_centered input")
}

pub(crate) fn transform_frame_into(
    mut dst: ArrayViewMut2<'_, Complex32>,
    src: ArrayView2<'_, Complex32>,
    inverse: bool,
) {
    let (h, w) = src.dim();
    let mut buf: Vec<Complex64> = src
        .iter()
        .map(|v| Complex64::new(v.re as f64, v.im as f64))
        .collect();
    fft2_centered_in_place(&mut buf, h, w, inverse);
    Zip::from(&mut dst)
        .and(&Array2::from_shape_vec((h, w), buf).expect("frame buffer"))
        .for_each(|d, s| *d = Complex32::new(s.re as f32, s.im as f32));
}

/// `sum(conj(a) * b)` accumulated in `f64`.
pub fn inner_product<D: Dimension>(
    a: ArrayView<'_, Complex32, D>,
    b: ArrayView<'_, Complex32, D>,
) -> Result<Complex64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(a.iter()
        .zip(b.iter())
        .fold(Complex64::default(), |acc, (x, y)| {
            let x = Complex64::new(x.re as f64, x.im as f64);
            let y = Complex64::new(y.re as f64, y.im as f64);
            acc + x.conj() * y
        }))
}
