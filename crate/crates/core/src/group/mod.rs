//! Transformation group acting on image sequences: dihedral frame shifts and
//! reflections, in-plane rotations and smooth piecewise-affine warps.
//!
//! One spatial transform is shared by all frames of a sequence.

pub mod cpab;
pub mod rotation;
pub mod temporal;
pub mod warp;

use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use cpab::{act_diffeo, cpab_integrate, cpab_velocity, CpabBasis, CpabElement, Tessellation};
pub use rotation::{act_rotate, RotationElement};
pub use temporal::{act_temporal, TemporalElement};

use crate::autodiff::{Sampler, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::video::ImageSequence;

/// Sampled angles are multiples of this step (in degrees) so that negating
/// an angle modulo 360 is exact in floating point.
const ANGLE_QUANTUM: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    #[default]
    Continuous,
    /// Multiples of 90 degrees only.
    Quarter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupConfig {
    pub use_temporal: bool,
    pub use_rotation: bool,
    pub use_cpab: bool,
    pub cpab_magnitude: f64,
    pub tessellation: Tessellation,
    pub cpab_steps: usize,
    pub rotation_mode: RotationMode,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            use_temporal: true,
            use_rotation: true,
            use_cpab: true,
            cpab_magnitude: 0.3,
            tessellation: Tessellation::default(),
            cpab_steps: 10,
            rotation_mode: RotationMode::Continuous,
        }
    }
}

impl GroupConfig {
    pub fn rotation_only() -> Self {
        Self {
            use_temporal: false,
            use_cpab: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cpab_steps == 0 {
            return Err(Error::config("cpab_steps must be at least 1"));
        }
        if !(self.cpab_magnitude.is_finite() && self.cpab_magnitude >= 0.0) {
            return Err(Error::config(format!(
                "cpab_magnitude {} must be finite and non-negative",
                self.cpab_magnitude
            )));
        }
        if self.tessellation.nx == 0 || self.tessellation.ny == 0 {
            return Err(Error::config(
                "tessellation needs at least one cell per axis",
            ));
        }
        Ok(())
    }

    pub fn any_enabled(&self) -> bool {
        self.use_temporal || self.use_rotation || self.use_cpab
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnabledFactors {
    pub use_temporal: bool,
    pub use_rotation: bool,
    pub use_cpab: bool,
}

/// Which spatial factor is applied first. Sampled elements are always
/// `DiffeoFirst`; inversion flips the order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialOrder {
    DiffeoFirst,
    RotationFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    pub temporal: TemporalElement,
    pub rotation: RotationElement,
    pub cpab: CpabElement,
    pub enabled: EnabledFactors,
    pub order: SpatialOrder,
    pub cpab_steps: usize,
}

impl GroupElement {
    pub fn identity(config: &GroupConfig, t_frames: usize) -> Self {
        Self {
            temporal: TemporalElement::identity(t_frames),
            rotation: RotationElement::identity(),
            cpab: CpabElement::identity(config.tessellation, config.cpab_magnitude),
            enabled: EnabledFactors {
                use_temporal: config.use_temporal,
                use_rotation: config.use_rotation,
                use_cpab: config.use_cpab,
            },
            order: SpatialOrder::DiffeoFirst,
            cpab_steps: config.cpab_steps,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.temporal.is_identity() && self.rotation.is_identity() && self.cpab.is_identity()
    }

    /// Per-frame spatial samplers in application order.
    pub fn spatial_samplers(&self, h: usize, w: usize) -> Vec<Sampler> {
        let diffeo = (!self.cpab.is_identity())
            .then(|| cpab::diffeo_sampler(&self.cpab, h, w, self.cpab_steps));
        let rot = (!self.rotation.is_identity()).then(|| self.rotation.sampler(h, w));
        let ordered = match self.order {
            SpatialOrder::DiffeoFirst => [diffeo, rot],
            SpatialOrder::RotationFirst => [rot, diffeo],
        };
        ordered.into_iter().flatten().collect()
    }

    fn check_frames(&self, t: usize) -> Result<()> {
        if self.temporal.period != t {
            return Err(Error::shape(&[self.temporal.period], &[t]));
        }
        Ok(())
    }
}

pub fn sample_group(config: &GroupConfig, t_frames: usize, rng: &mut Rng) -> GroupElement {
    assert!(t_frames >= 1, "need at least one frame");
    let mut g = GroupElement::identity(config, t_frames);
    if config.use_temporal {
        g.temporal = TemporalElement::new(
            rng.random_range(0..t_frames),
            rng.random_bool(0.5),
            t_frames,
        );
    }
    if config.use_rotation {
        g.rotation = match config.rotation_mode {
            RotationMode::Continuous => {
                let steps = (360.0 / ANGLE_QUANTUM) as u64;
                RotationElement::new(rng.random_range(0..steps) as f64 * ANGLE_QUANTUM)
            }
            RotationMode::Quarter => RotationElement::new(90.0 * rng.random_range(0..4u32) as f64),
        };
    }
    if config.use_cpab && config.cpab_magnitude > 0.0 {
        let normal = Normal::new(0.0, config.cpab_magnitude).expect("validated magnitude");
        g.cpab.params = (0..config.tessellation.dim())
            .map(|_| normal.sample(rng))
            .collect();
    }
    g
}

/// Inverse element: every factor inverted and the spatial order reversed, so
/// that `act(g, act(inverse(g), x))` undoes the transform.
pub fn inverse(g: &GroupElement) -> GroupElement {
    GroupElement {
        temporal: g.temporal.inverse(),
        rotation: g.rotation.inverse(),
        cpab: g.cpab.inverse(),
        enabled: g.enabled,
        order: match g.order {
            SpatialOrder::DiffeoFirst => SpatialOrder::RotationFirst,
            SpatialOrder::RotationFirst => SpatialOrder::DiffeoFirst,
        },
        cpab_steps: g.cpab_steps,
    }
}

/// Applies the spatial warps frame by frame, then the temporal permutation.
pub fn act(g: &GroupElement, x: &ImageSequence) -> Result<ImageSequence> {
    let (t, h, w) = x.dims();
    g.check_frames(t)?;
    let samplers = g.spatial_samplers(h, w);
    let mut out = if samplers.is_empty() {
        x.clone()
    } else {
        x.map_frames(|f| {
            let mut cur = samplers[0].apply_complex(f);
            for s in &samplers[1..] {
                cur = s.apply_complex(cur.view());
            }
            cur
        })
    };
    if !g.temporal.is_identity() {
        out = act_temporal(&g.temporal, &out);
    }
    Ok(out)
}

/// Differentiable counterpart of [`act`] on a `[2, T, H, W]` tape value.
pub fn act_tape(g: &GroupElement, tape: &mut Tape, x: Var) -> Result<Var> {
    let [_, t, h, w] = tape.shape(x);
    g.check_frames(t)?;
    let mut cur = x;
    for s in g.spatial_samplers(h, w) {
        cur = tape.resample(cur, Rc::new(s));
    }
    if !g.temporal.is_identity() {
        cur = tape.permute_frames(cur, g.temporal.permutation());
    }
    Ok(cur)
}
