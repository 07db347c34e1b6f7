//! Reconstruction networks `x = f(y, A)`.
//!
//! Two families operate on the two-channel (real, imaginary) representation:
//! an unrolled convolutional recurrent network that alternates a
//! bidirectional-in-time refinement with data consistency, and a residual 3D
//! CNN followed by a single data-consistency step. A parameter-free
//! zero-filled shim shares the same interface.

use std::rc::Rc;

use ndarray::{Array3, Axis};
use num_complex::Complex32;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvKernel, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::forward::Masks;
use crate::rng::Rng;
use crate::video::{transform_frame_into, ImageSequence, KTSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    CrnnUnrolled,
    ArtifactCnn,
    /// No parameters; returns the zero-filled reconstruction.
    ZeroFilled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcMode {
    /// Sampled k-space entries are replaced by the measurements.
    #[default]
    Hard,
    /// `k + beta (y - k)` at sampled entries with a learnable `beta` in
    /// `(0, 1)` per data-consistency step.
    Soft,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Initial logit of the soft data-consistency weight (`beta ~ 0.88`).
const SOFT_DC_INIT_LOGIT: f32 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub unroll_iters: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    /// Convolution layers of the artifact CNN.
    pub cnn_layers: usize,
    pub activation: Activation,
    pub dc_mode: DcMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::CrnnUnrolled,
            unroll_iters: 2,
            hidden_channels: 9,
            kernel_size: 3,
            cnn_layers: 3,
            activation: Activation::Relu,
            dc_mode: DcMode::Hard,
        }
    }
}

impl BackboneConfig {
    pub fn zero_filled() -> Self {
        Self {
            kind: BackboneKind::ZeroFilled,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unroll_iters == 0 {
            return Err(Error::config("unroll_iters must be at least 1"));
        }
        if self.hidden_channels == 0 {
            return Err(Error::config("hidden_channels must be at least 1"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.kind == BackboneKind::ArtifactCnn && self.cnn_layers == 0 {
            return Err(Error::config("cnn_layers must be at least 1"));
        }
        Ok(())
    }

    fn dc_steps(&self) -> usize {
        match self.kind {
            BackboneKind::CrnnUnrolled => self.unroll_iters,
            BackboneKind::ArtifactCnn => 1,
            BackboneKind::ZeroFilled => 0,
        }
    }

    /// `(name, shape)` of every parameter array, in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 4])> {
        let k = self.kernel_size;
        let h = self.hidden_channels;
        let conv = |name: &str, cin: usize, cout: usize, vol: usize| {
            [
                (format!("{name}.weight"), [cout, cin * vol, 1, 1]),
                (format!("{name}.bias"), [cout, 1, 1, 1]),
            ]
        };
        let mut out = Vec::new();
        match self.kind {
            BackboneKind::CrnnUnrolled => {
                out.extend(conv("conv_in", 2, h, k * k));
                out.extend(conv("conv_rec", h, h, k * k));
                out.extend(conv("conv_out", h, 2, k * k));
            }
            BackboneKind::ArtifactCnn => {
                for (i, (cin, cout)) in cnn_channels(self.cnn_layers, h).into_iter().enumerate() {
                    out.extend(conv(&format!("conv{i}"), cin, cout, k * k * k));
                }
            }
            BackboneKind::ZeroFilled => {}
        }
        if self.dc_mode == DcMode::Soft {
            for i in 0..self.dc_steps() {
                out.push((format!("dc_logit.{i}"), [1, 1, 1, 1]));
            }
        }
        out
    }
}

fn cnn_channels(layers: usize, hidden: usize) -> Vec<(usize, usize)> {
    if layers == 1 {
        return vec![(2, 2)];
    }
    let mut v = vec![(2, hidden)];
    v.extend(std::iter::repeat_n((hidden, hidden), layers - 2));
    v.push((hidden, 2));
    v
}

/// Exact scalar parameter count of a configuration.
pub fn param_count(config: &BackboneConfig) -> usize {
    config
        .layout()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }

    /// Rebuilds parameters of `config` from a flat vector.
    pub fn from_flat(config: &BackboneConfig, flat: &[f32]) -> Result<Self> {
        let expected = param_count(config);
        if flat.len() != expected {
            return Err(Error::shape(&[expected], &[flat.len()]));
        }
        let mut offset = 0;
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let t = Tensor::from_vec(shape, flat[offset..offset + n].to_vec());
                offset += n;
                (name, t)
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// `p <- p + step` for a flat update vector.
    pub fn apply_update(&mut self, step: &[f32]) {
        assert_eq!(step.len(), self.count());
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            for v in t.data.iter_mut() {
                *v += step[offset];
                offset += 1;
            }
        }
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero. The final convolution
/// of each residual branch starts at zero so an untrained network returns
/// its data-consistent input.
pub fn init_params(config: &BackboneConfig, rng: &mut Rng) -> Result<Params> {
    config.validate()?;
    let layout = config.layout();
    let last_conv = layout
        .iter()
        .filter(|(n, _)| n.ends_with(".weight"))
        .map(|(n, _)| n.clone())
        .next_back();
    let entries = layout
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.starts_with("dc_logit") {
                vec![SOFT_DC_INIT_LOGIT; n]
            } else if name.ends_with(".bias") || Some(&name) == last_conv.as_ref() {
                vec![0.0; n]
            } else {
                let bound = 1.0 / (shape[1] as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            };
            (name, Tensor::from_vec(shape, data))
        })
        .collect();
    Ok(Params { entries })
}

/// Anything that maps measurements to an image sequence on a tape. Losses are
/// written against this trait.
pub trait Model {
    /// Registers trainable arrays on the tape in storage order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var>;

    /// `[2, T, H, W]` k-space measurements to a `[2, T, H, W]` image.
    fn apply(&self, tape: &mut Tape, weights: &[Var], y: Var, masks: &Masks) -> Result<Var>;

    fn num_params(&self) -> usize;
}

/// A backbone configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: BackboneConfig,
    pub params: Params,
}

impl Network {
    pub fn new(config: BackboneConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = config.layout();
        let got: Vec<_> = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape))
            .collect();
        if expected != got {
            return Err(Error::config("parameters do not match the backbone layout"));
        }
        Ok(Self { config, params })
    }

    pub fn init(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self { config, params })
    }
}

pub(crate) fn mask_weights(masks: &Masks) -> (Rc<Vec<f32>>, Rc<Vec<f32>>) {
    let m = masks.column_weights();
    let inv = m.iter().map(|v| 1.0 - v).collect();
    (Rc::new(m), Rc::new(inv))
}

/// Data consistency on the tape; `beta` is `None` for hard replacement.
fn dc_tape(tape: &mut Tape, x: Var, y: Var, masks: &Masks, beta: Option<Var>) -> Var {
    let (m, inv) = mask_weights(masks);
    let k = tape.fft(x, false);
    let k = match beta {
        None => {
            let keep = tape.mask(k, inv);
            let meas = tape.mask(y, m);
            tape.add(keep, meas)
        }
        Some(b) => {
            let mk = tape.mask(k, m.clone());
            let my = tape.mask(y, m);
            let diff = tape.sub(my, mk);
            let step = tape.mul_scalar(diff, b);
            tape.add(k, step)
        }
    };
    tape.fft(k, true)
}

fn zero_filled_tape(tape: &mut Tape, y: Var, masks: &Masks) -> Var {
    let (m, _) = mask_weights(masks);
    let my = tape.mask(y, m);
    tape.fft(my, true)
}

fn bidirectional_recurrence(
    tape: &mut Tape,
    input: Var,
    w: &[Var],
    kernel: ConvKernel,
    act: Activation,
) -> Var {
    let [_, t, _, _] = tape.shape(input);
    let (w_in, b_in, w_rec, b_rec) = (w[0], w[1], w[2], w[3]);
    let drive = tape.conv(input, w_in, Some(b_in), kernel);
    let frames: Vec<Var> = (0..t).map(|i| tape.frame(drive, i)).collect();
    let mut run = |order: &mut dyn Iterator<Item = usize>| {
        let mut states: Vec<Option<Var>> = vec![None; t];
        let mut prev: Option<Var> = None;
        for i in order {
            let pre = match prev {
                Some(h) => {
                    let rec = tape.conv(h, w_rec, Some(b_rec), kernel);
                    tape.add(frames[i], rec)
                }
                None => frames[i],
            };
            let h = act.apply(tape, pre);
            states[i] = Some(h);
            prev = Some(h);
        }
        states
            .into_iter()
            .map(|s| s.expect("every frame visited"))
            .collect::<Vec<_>>()
    };
    let fwd = run(&mut (0..t));
    let bwd = run(&mut (0..t).rev());
    let summed: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&a, &b)| tape.add(a, b))
        .collect();
    tape.stack(&summed)
}

impl Model for Network {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect()
    }

    fn apply(&self, tape: &mut Tape, weights: &[Var], y: Var, masks: &Masks) -> Result<Var> {
        let [c, t, h, w] = tape.shape(y);
        if c != 2 {
            return Err(Error::shape(&[2], &[c]));
        }
        masks.check_shape((t, h, w))?;
        let cfg = &self.config;
        let n_dc = if cfg.dc_mode == DcMode::Soft {
            cfg.dc_steps()
        } else {
            0
        };
        let (convs, logits) = weights.split_at(weights.len() - n_dc);
        let betas: Vec<Var> = logits.iter().map(|&l| tape.sigmoid(l)).collect();
        let beta = |i: usize| betas.get(i).copied();

        let mut x = zero_filled_tape(tape, y, masks);
        match cfg.kind {
            BackboneKind::ZeroFilled => {}
            BackboneKind::CrnnUnrolled => {
                let kernel = ConvKernel::spatial(cfg.kernel_size);
                for it in 0..cfg.unroll_iters {
                    let hidden = bidirectional_recurrence(tape, x, convs, kernel, cfg.activation);
                    let delta = tape.conv(hidden, convs[4], Some(convs[5]), kernel);
                    let refined = tape.add(x, delta);
                    x = dc_tape(tape, refined, y, masks, beta(it));
                    check_finite(tape, x, &format!("unrolled iteration {it}"))?;
                }
            }
            BackboneKind::ArtifactCnn => {
                let kernel = ConvKernel::cube(cfg.kernel_size);
                let mut z = x;
                for (i, pair) in convs.chunks_exact(2).enumerate() {
                    z = tape.conv(z, pair[0], Some(pair[1]), kernel);
                    if i + 1 < cfg.cnn_layers {
                        z = cfg.activation.apply(tape, z);
                    }
                }
                let refined = tape.add(x, z);
                x = dc_tape(tape, refined, y, masks, beta(0));
                check_finite(tape, x, "artifact cnn")?;
            }
        }
        Ok(x)
    }

    fn num_params(&self) -> usize {
        self.params.count()
    }
}

fn check_finite(tape: &Tape, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "non-finite activations after {stage}"
        )))
    }
}

/// Runs any model without recording gradients for its parameters.
pub fn reconstruct_with(model: &dyn Model, y: &KTSequence, masks: &Masks) -> Result<ImageSequence> {
    masks.check_shape(y.dims())?;
    let mut tape = Tape::new();
    let weights = model.bind(&mut tape);
    let yv = tape.constant(Tensor::from_kt(y));
    let out = model.apply(&mut tape, &weights, yv, masks)?;
    let data = tape.value(out).to_complex();
    ImageSequence::new(data).map_err(|_| Error::NonFinite("reconstruction".into()))
}

pub fn reconstruct(
    params: &Params,
    config: &BackboneConfig,
    y: &KTSequence,
    masks: &Masks,
) -> Result<ImageSequence> {
    let net = Network::new(config.clone(), params.clone())?;
    reconstruct_with(&net, y, masks)
}

/// Hard data consistency: sampled k-space entries of `x` are replaced by `y`.
pub fn data_consistency(x: &ImageSequence, y: &KTSequence, masks: &Masks) -> Result<ImageSequence> {
    masks.check_shape(x.dims())?;
    masks.check_shape(y.dims())?;
    let mut out = Array3::<Complex32>::zeros(x.data().raw_dim());
    let mut k = ndarray::Array2::<Complex32>::zeros((x.dims().1, x.dims().2));
    for (t, (src, mut dst)) in x.data().outer_iter().zip(out.outer_iter_mut()).enumerate() {
        transform_frame_into(k.view_mut(), src, false);
        let meas = y.data().index_axis(Axis(0), t);
        for (c, (mut col, mcol)) in k
            .axis_iter_mut(Axis(1))
            .zip(meas.axis_iter(Axis(1)))
            .enumerate()
        {
            if masks.is_sampled(t, c) {
                col.assign(&mcol);
            }
        }
        transform_frame_into(dst.view_mut(), k.view(), true);
    }
    Ok(ImageSequence::from_trusted(out))
}
