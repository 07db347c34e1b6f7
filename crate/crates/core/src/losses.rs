//! Training objectives.
//!
//! Every loss is built on a fresh tape against a [`Model`] and returns its
//! value together with the gradient with respect to the model parameters,
//! flattened in storage order.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{mask_weights, Model};
use crate::error::{Error, Result};
use crate::forward::{measurement_rms, MaskSpec, Masks};
use crate::group::{act_tape, sample_group, GroupConfig, GroupElement};
use crate::rng::Rng;
use crate::video::{ImageSequence, KTSequence};

/// Smoothing inside the modulus of the L1 metric.
const L1_EPS: f32 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mc,
    Ddei,
    Ssdu,
    Phase2phase,
    Sure,
    DdeiSure,
    Supervised,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    L2,
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub metric: Metric,
    pub ssdu_input_fraction: f64,
    /// Noise level assumed by SURE; training falls back to the simulated
    /// noise level when unset.
    pub sure_sigma: Option<f64>,
    /// Probe step relative to the measurement RMS.
    pub sure_probe_eps: f64,
    pub group_config: GroupConfig,
    /// Draw fresh masks for the second pass of the equivariance term instead
    /// of reusing the acquisition masks.
    pub redraw_masks: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ddei,
            alpha: 1.0,
            metric: Metric::L2,
            ssdu_input_fraction: 0.6,
            sure_sigma: None,
            sure_probe_eps: 1e-3,
            group_config: GroupConfig::default(),
            redraw_masks: false,
        }
    }
}

impl LossConfig {
    pub fn of_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.ssdu_input_fraction > 0.0 && self.ssdu_input_fraction < 1.0) {
            return Err(Error::config(format!(
                "ssdu_input_fraction must lie in (0, 1), got {}",
                self.ssdu_input_fraction
            )));
        }
        if let Some(s) = self.sure_sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::config(format!("sure_sigma must be >= 0, got {s}")));
            }
        }
        if !(self.sure_probe_eps.is_finite() && self.sure_probe_eps > 0.0) {
            return Err(Error::config("sure_probe_eps must be positive"));
        }
        self.group_config.validate()
    }

    pub fn uses_sure(&self) -> bool {
        matches!(self.kind, LossKind::Sure | LossKind::DdeiSure)
    }

    fn sigma(&self) -> Result<f64> {
        match self.sure_sigma {
            Some(s) if s > 0.0 => Ok(s),
            _ => Err(Error::config("SURE losses need sure_sigma > 0")),
        }
    }
}

/// Loss value, named components and the flat parameter gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub terms: Vec<(&'static str, f64)>,
    pub grads: Vec<f32>,
}

struct Session<'a> {
    tape: Tape,
    weights: Vec<Var>,
    model: &'a dyn Model,
    metric: Metric,
}

impl<'a> Session<'a> {
    fn new(model: &'a dyn Model, metric: Metric) -> Self {
        let mut tape = Tape::new();
        let weights = model.bind(&mut tape);
        Self {
            tape,
            weights,
            model,
            metric,
        }
    }

    fn input(&mut self, y: &KTSequence) -> Var {
        self.tape.constant(Tensor::from_kt(y))
    }

    fn reconstruct(&mut self, y: Var, masks: &Masks) -> Result<Var> {
        self.model.apply(&mut self.tape, &self.weights, y, masks)
    }

    /// `M F x`.
    fn measure(&mut self, x: Var, masks: &Masks) -> Var {
        let (m, _) = mask_weights(masks);
        let k = self.tape.fft(x, false);
        self.tape.mask(k, m)
    }

    fn reduce(&mut self, diff: Var, count: usize, padding: usize) -> Var {
        let total = match self.metric {
            Metric::L2 => self.tape.sum_squares(diff),
            Metric::L1 => {
                let s = self.tape.sum_modulus(diff, L1_EPS);
                // entries outside the support contribute sqrt(eps) each
                self.tape.offset(s, -(padding as f32) * L1_EPS.sqrt())
            }
        };
        self.tape.scale(total, 1.0 / count.max(1) as f32)
    }

    /// Mean error over the sampled entries of `masks` between `M F x` and `y`.
    fn measurement_error(&mut self, x: Var, y: Var, masks: &Masks) -> Var {
        let (m, _) = mask_weights(masks);
        let pred = self.measure(x, masks);
        let target = self.tape.mask(y, m);
        let diff = self.tape.sub(pred, target);
        let count = masks.sampled_entries();
        let (t, h, w) = masks.dims();
        self.reduce(diff, count, t * h * w - count)
    }

    /// Mean error over all `T * H * W` complex entries.
    fn image_error(&mut self, a: Var, b: Var) -> Var {
        let [_, t, h, w] = self.tape.shape(a);
        let diff = self.tape.sub(a, b);
        self.reduce(diff, t * h * w, 0)
    }

    /// `L(T_g x1, f(A T_g x1))`, with both branches differentiated.
    fn equivariance(&mut self, x1: Var, masks: &Masks, g: &GroupElement) -> Result<Var> {
        let x2 = act_tape(g, &mut self.tape, x1)?;
        let y2 = self.measure(x2, masks);
        let x2_hat = self.reconstruct(y2, masks)?;
        Ok(self.image_error(x2, x2_hat))
    }

    fn finish(self, loss: Var, terms: Vec<(&'static str, f64)>) -> Result<LossOutput> {
        let value = self.tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss value {value}")));
        }
        let grads = self.tape.backward(loss);
        let flat: Vec<f32> = self
            .weights
            .iter()
            .flat_map(|&w| grads.wrt(w, self.tape.value(w).len()))
            .collect();
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(LossOutput {
            value,
            terms,
            grads: flat,
        })
    }
}

/// Measurement consistency `L(A f(y), y)`.
pub fn loss_mc(
    model: &dyn Model,
    cfg: &LossConfig,
    y: &KTSequence,
    masks: &Masks,
) -> Result<LossOutput> {
    masks.check_shape(y.dims())?;
    let mut s = Session::new(model, cfg.metric);
    let yv = s.input(y);
    let x = s.reconstruct(yv, masks)?;
    let mc = s.measurement_error(x, yv, masks);
    let v = s.tape.scalar_value(mc);
    s.finish(mc, vec![("mc", v)])
}

fn second_pass_masks(cfg: &LossConfig, masks: &Masks, rng: &mut Rng) -> Result<Masks> {
    if !cfg.redraw_masks {
        return Ok(masks.clone());
    }
    let (t, h, w) = masks.dims();
    let spec = masks.spec().with_seed(rng.random());
    crate::forward::sample_masks(&spec, t, h, w)
}

/// Measurement consistency plus `alpha` times the equivariance term.
pub fn loss_ddei(
    model: &dyn Model,
    cfg: &LossConfig,
    y: &KTSequence,
    masks: &Masks,
    rng: &mut Rng,
) -> Result<LossOutput> {
    let g = sample_group(&cfg.group_config, masks.dims().0, rng);
    loss_ddei_with(model, cfg, y, masks, &g, rng)
}

/// [`loss_ddei`] with a fixed group element.
pub fn loss_ddei_with(
    model: &dyn Model,
    cfg: &LossConfig,
    y: &KTSequence,
    masks: &Masks,
    g: &GroupElement,
    rng: &mut Rng,
) -> Result<LossOutput> {
    masks.check_shape(y.dims())?;
    let masks2 = second_pass_masks(cfg, masks, rng)?;
    let mut s = Session::new(model, cfg.metric);
    let yv = s.input(y);
    let x1 = s.reconstruct(yv, masks)?;
    let mc = s.measurement_error(x1, yv, masks);
    let eq = s.equivariance(x1, &masks2, g)?;
    let weighted = s.tape.scale(eq, cfg.alpha as f32);
    let total = s.tape.add(mc, weighted);
    let terms = vec![
        ("mc", s.tape.scalar_value(mc)),
        ("equivariance", s.tape.scalar_value(eq)),
    ];
    s.finish(total, terms)
}

/// Sampled ACS columns of frame `t`.
fn acs_columns(masks: &Masks, t: usize) -> Vec<usize> {
    let (_, _, w) = masks.dims();
    let spec = masks.spec();
    if spec.acs_lines == 0 || spec.acs_lines >= w {
        return Vec::new();
    }
    spec.acs_range(w)
        .filter(|&c| masks.is_sampled(t, c))
        .collect()
}

/// Partitions the sampled columns of every frame into an input set (a
/// `fraction` of them, always containing the ACS block) and a disjoint loss
/// set drawn from the remaining columns with Gaussian density around the
/// centre.
pub fn split_measurements(
    y: &KTSequence,
    masks: &Masks,
    fraction: f64,
    rng: &mut Rng,
) -> Result<(KTSequence, Masks, KTSequence, Masks)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    masks.check_shape(y.dims())?;
    let (t, h, w) = masks.dims();
    let s = MaskSpec::density_width(w);
    let centre = (w / 2) as f64;
    let mut input = Array2::from_elem((t, w), false);
    let mut loss = Array2::from_elem((t, w), false);
    for ti in 0..t {
        let sampled: Vec<usize> = (0..w).filter(|&c| masks.is_sampled(ti, c)).collect();
        let acs = acs_columns(masks, ti);
        let mut free: Vec<usize> = sampled
            .iter()
            .copied()
            .filter(|c| !acs.contains(c))
            .collect();
        let n_input = ((fraction * sampled.len() as f64).round() as usize).max(acs.len());
        let n_loss = sampled.len().saturating_sub(n_input);
        if n_loss == 0 {
            return Err(Error::config(format!(
                "frame {ti}: {} sampled columns ({} ACS) leave no loss set at fraction {fraction}",
                sampled.len(),
                acs.len()
            )));
        }
        // Weighted sampling without replacement.
        let mut weights: Vec<f64> = free
            .iter()
            .map(|&c| (-(c as f64 - centre).powi(2) / (2.0 * s * s)).exp())
            .collect();
        for _ in 0..n_loss {
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, wgt) in weights.iter().enumerate() {
                if u < *wgt {
                    pick = i;
                    break;
                }
                u -= wgt;
            }
            loss[[ti, free[pick]]] = true;
            free.swap_remove(pick);
            weights.swap_remove(pick);
        }
        for &c in &sampled {
            input[[ti, c]] = !loss[[ti, c]];
        }
    }
    let spec = masks.spec().clone();
    let m1 = Masks::from_columns(input, h, spec.clone());
    let m2 = Masks::from_columns(loss, h, spec);
    let y1 = restrict(y, &m1);
    let y2 = restrict(y, &m2);
    Ok((y1, m1, y2, m2))
}

fn restrict(y: &KTSequence, masks: &Masks) -> KTSequence {
    let mut data = y.data().clone();
    crate::forward::apply_mask_in_place(&mut data, masks);
    KTSequence::from_trusted(data)
}

/// Split-based self-supervision `L(M2 A f(M1 y), M2 y)`.
pub fn loss_ssdu(
    model: &dyn Model,
    cfg: &LossConfig,
    y: &KTSequence,
    masks: &Masks,
    rng: &mut Rng,
) -> Result<LossOutput> {
    let (y1, m1, y2, m2) = split_measurements(y, masks, cfg.ssdu_input_fraction, rng)?;
    let mut s = Session::new(model, cfg.metric);
    let y1v = s.input(&y1);
    let y2v = s.input(&y2);
    let x = s.reconstruct(y1v, &m1)?;
    let l = s.measurement_error(x, y2v, &m2);
    let v = s.tape.scalar_value(l);
    s.finish(l, vec![("split", v)])
}

fn frames_subset(masks: &Masks, keep: impl Fn(usize) -> bool) -> Masks {
    let (t, h, w) = masks.dims();
    let cols = Array2::from_shape_fn((t, w), |(ti, c)| keep(ti) && masks.is_sampled(ti, c));
    Masks::from_columns(cols, h, masks.spec().clone())
}

/// Even/odd temporal split: reconstruct from one half of the frames and
/// score on the other, averaged over both directions.
pub fn loss_phase2phase(
    model: &dyn Model,
    cfg: &LossConfig,
    y: &KTSequence,
    masks: &Masks,
) -> Result<LossOutput> {
    masks.check_shape(y.dims())?;
    let t = masks.dims().0;
    if t % 2 != 0 {
        return Err(Error::config(format!(
            "phase2phase needs an even frame count, got {t}"
        )));
    }
    let mut s = Session::new(model, cfg.metric);
    let mut halves = Vec::new();
    for parity in [0, 1] {
        let m_in = frames_subset(masks, |f| f % 2 == parity);
        let m_out = frames_subset(masks, |f| f % 2 != parity);
        let y_in = s.input(&restrict(y, &m_in));
        let y_out = s.input(&restrict(y, &m_out));
        let x = s.reconstruct(y_in, &m_in)?;
        halves.push(s.measurement_error(x, y_out, &m_out));
    }
    let sum = s.tape.add(halves[0], halves[1]);
    let total = s.tape.scale(sum, 0.5);
    let terms = vec![
        ("even_to_odd", s.tape.scalar_value(halves[0])),
        ("odd_to_even", s.tape.scalar_value(halves[1])),
    ];
    s.finish(total, terms)
}

/// Rademacher probe with unit-modulus complex entries on the sampled
/// locations.
fn draw_probe(masks: &Masks, rng: &mut Rng) -> Tensor {
    let (t, h, w) = masks.dims();
    let n = t * h * w;
    let amp = std::f32::consts::FRAC_1_SQRT_2;
    let mut data = vec![0.0f32; 2 * n];
    for ti in 0..t {
        for r in 0..h {
            for c in 0..w {
                if masks.is_sampled(ti, c) {
                    let i = (ti * h + r) * w + c;
                    let bits: u8 = rng.random();
                    data[i] = if bits & 1 == 0 { amp } else { -amp };
                    data[n + i] = if bits & 2 == 0 { amp } else { -amp };
                }
            }
        }
    }
    Tensor::from_vec([2, t, h, w], data)
}

impl Session<'_> {
    /// SURE estimate of the measurement-domain MSE. Returns the loss and the
    /// first-pass reconstruction.
    fn sure(
        &mut self,
        cfg: &LossConfig,
        y: &KTSequence,
        masks: &Masks,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        let sigma = cfg.sigma()?;
        let m = masks.sampled_entries().max(1) as f64;
        let probe = draw_probe(masks, rng);
        let eps = cfg.sure_probe_eps * measurement_rms(y, masks).max(f64::MIN_POSITIVE);
        let yv = self.input(y);
        let perturbed = {
            let mut t = Tensor::from_kt(y);
            for (v, b) in t.data.iter_mut().zip(&probe.data) {
                *v += eps as f32 * b;
            }
            self.tape.constant(t)
        };
        let x1 = self.reconstruct(yv, masks)?;
        let h1 = self.measure(x1, masks);
        let (mw, _) = mask_weights(masks);
        let target = self.tape.mask(yv, mw);
        let resid = self.tape.sub(h1, target);
        let fit = self.tape.sum_squares(resid);
        let fit = self.tape.scale(fit, (1.0 / m) as f32);

        let xp = self.reconstruct(perturbed, masks)?;
        let hp = self.measure(xp, masks);
        let dh = self.tape.sub(hp, h1);
        let div = self.tape.dot_const(dh, Rc::new(probe));
        let div = self
            .tape
            .scale(div, (2.0 * sigma * sigma / (m * eps)) as f32);
        let value = self.tape.add(fit, div);
        Ok((self.tape.offset(value, -(sigma * sigma) as f32), x1))
    }
}

/// Stein's unbiased estimate of the measurement-domain MSE with a
/// Monte-Carlo divergence.
pub fn loss_sure(
    model: &dyn Model,
    cfg: &LossConfig,
    y: &KTSequence,
    masks: &Masks,
    rng: &mut Rng,
) -> Result<LossOutput> {
    masks.check_shape(y.dims())?;
    let mut s = Session::new(model, Metric::L2);
    let (l, _) = s.sure(cfg, y, masks, rng)?;
    let v = s.tape.scalar_value(l);
    s.finish(l, vec![("sure", v)])
}

/// SURE plus `alpha` times the equivariance term.
pub fn loss_ddei_sure(
    model: &dyn Model,
    cfg: &LossConfig,
    y: &KTSequence,
    masks: &Masks,
    rng: &mut Rng,
) -> Result<LossOutput> {
    masks.check_shape(y.dims())?;
    // the probe is drawn first so that alpha = 0 reproduces loss_sure exactly
    let mut s = Session::new(model, cfg.metric);
    let (sure, x1) = s.sure(cfg, y, masks, rng)?;
    let g = sample_group(&cfg.group_config, masks.dims().0, rng);
    let masks2 = second_pass_masks(cfg, masks, rng)?;
    let eq = s.equivariance(x1, &masks2, &g)?;
    let weighted = s.tape.scale(eq, cfg.alpha as f32);
    let total = s.tape.add(sure, weighted);
    let terms = vec![
        ("sure", s.tape.scalar_value(sure)),
        ("equivariance", s.tape.scalar_value(eq)),
    ];
    s.finish(total, terms)
}

/// Oracle loss against the ground truth.
pub fn loss_supervised(
    model: &dyn Model,
    cfg: &LossConfig,
    y: &KTSequence,
    masks: &Masks,
    x_gt: &ImageSequence,
) -> Result<LossOutput> {
    masks.check_shape(y.dims())?;
    masks.check_shape(x_gt.dims())?;
    let mut s = Session::new(model, cfg.metric);
    let yv = s.input(y);
    let gt = s.tape.constant(Tensor::from_sequence(x_gt));
    let x = s.reconstruct(yv, masks)?;
    let l = s.image_error(x, gt);
    let v = s.tape.scalar_value(l);
    s.finish(l, vec![("supervised", v)])
}

/// Dispatches on `cfg.kind`. `x_gt` is only read by the supervised loss.
pub fn compute_loss(
    model: &dyn Model,
    cfg: &LossConfig,
    y: &KTSequence,
    masks: &Masks,
    x_gt: Option<&ImageSequence>,
    rng: &mut Rng,
) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::Mc => loss_mc(model, cfg, y, masks),
        LossKind::Ddei => loss_ddei(model, cfg, y, masks, rng),
        LossKind::Ssdu => loss_ssdu(model, cfg, y, masks, rng),
        LossKind::Phase2phase => loss_phase2phase(model, cfg, y, masks),
        LossKind::Sure => loss_sure(model, cfg, y, masks, rng),
        LossKind::DdeiSure => loss_ddei_sure(model, cfg, y, masks, rng),
        LossKind::Supervised => {
            let gt = x_gt.ok_or_else(|| Error::config("supervised loss needs ground truth"))?;
            loss_supervised(model, cfg, y, masks, gt)
        }
    }
}

/// Test-time averaging over `n_splits` random input-side splits.
pub fn tssdu_star_reconstruct(
    model: &dyn Model,
    fraction: f64,
    y: &KTSequence,
    masks: &Masks,
    n_splits: usize,
    rng: &mut Rng,
) -> Result<ImageSequence> {
    if n_splits == 0 {
        return Err(Error::config("n_splits must be at least 1"));
    }
    let mut acc: Option<ndarray::Array3<num_complex::Complex32>> = None;
    for _ in 0..n_splits {
        let (y1, m1, _, _) = split_measurements(y, masks, fraction, rng)?;
        let x = crate::backbone::reconstruct_with(model, &y1, &m1)?;
        match acc.as_mut() {
            Some(a) => *a += x.data(),
            None => acc = Some(x.into_inner()),
        }
    }
    let mut avg = acc.expect("at least one split");
    avg.mapv_inplace(|v| v / n_splits as f32);
    ImageSequence::new(avg)
}
