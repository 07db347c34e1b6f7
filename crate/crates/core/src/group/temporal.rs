use serde::{Deserialize, Serialize};

use crate::video::ImageSequence;

/// Element of the dihedral group acting on the frame axis: an optional
/// reversal followed by a circular shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalElement {
    pub shift: usize,
    pub reflect: bool,
    pub period: usize,
}

impl TemporalElement {
    pub fn identity(period: usize) -> Self {
        Self {
            shift: 0,
            reflect: false,
            period,
        }
    }

    pub fn new(shift: usize, reflect: bool, period: usize) -> Self {
        assert!(
            period >= 1 && shift < period,
            "shift {shift} outside [0, {period})"
        );
        Self {
            shift,
            reflect,
            period,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.shift == 0 && !self.reflect
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        assert_eq!(self.period, other.period);
        let t = self.period as i64;
        let s2 = if self.reflect {
            -(other.shift as i64)
        } else {
            other.shift as i64
        };
        Self {
            shift: (self.shift as i64 + s2).rem_euclid(t) as usize,
            reflect: self.reflect ^ other.reflect,
            period: self.period,
        }
    }

    pub fn inverse(&self) -> Self {
        if self.reflect {
            *self
        } else {
            Self {
                shift: (self.period - self.shift) % self.period,
                reflect: false,
                period: self.period,
            }
        }
    }

    /// Source frame for every output frame: `out[t] = in[perm[t]]`.
    pub fn permutation(&self) -> Vec<usize> {
        let t = self.period;
        (0..t)
            .map(|i| {
                let j = (i + t - self.shift) % t;
                if self.reflect {
                    t - 1 - j
                } else {
                    j
                }
            })
            .collect()
    }
}

/// Permutes frames of `x`; exact, no interpolation.
pub fn act_temporal(g: &TemporalElement, x: &ImageSequence) -> ImageSequence {
    assert_eq!(
        g.period,
        x.frames(),
        "temporal element period does not match frame count"
    );
    if g.is_identity() {
        return x.clone();
    }
    let perm = g.permutation();
    let src = x.data();
    let mut out = src.clone();
    for (t, &s) in perm.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), t)
            .assign(&src.index_axis(ndarray::Axis(0), s));
    }
    ImageSequence::from_trusted(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(t: usize) -> Vec<TemporalElement> {
        (0..t)
            .flat_map(|s| [false, true].map(|r| TemporalElement::new(s, r, t)))
            .collect()
    }

    fn apply(perm: &[usize], seq: &[usize]) -> Vec<usize> {
        perm.iter().map(|&p| seq[p]).collect()
    }

    #[test]
    fn dihedral_axioms_exhaustive_t12() {
        let t = 12;
        let elems = all(t);
        assert_eq!(elems.len(), 24);
        let e = TemporalElement::identity(t);
        let base: Vec<usize> = (0..t).collect();
        for a in &elems {
            assert_eq!(a.compose(&e), *a);
            assert_eq!(e.compose(a), *a);
            assert_eq!(a.compose(&a.inverse()), e);
            assert_eq!(a.inverse().compose(a), e);
            // composition agrees with acting twice
            for b in &elems {
                let ab = a.compose(b);
                let direct = apply(&a.permutation(), &apply(&b.permutation(), &base));
                assert_eq!(apply(&ab.permutation(), &base), direct);
                for c in &elems {
                    assert_eq!(a.compose(b).compose(c), a.compose(&b.compose(c)));
                }
            }
        }
        let r = TemporalElement::new(0, true, t);
        for k in 0..t {
            let sk = TemporalElement::new(k, false, t);
            let lhs = r.compose(&sk).compose(&r);
            assert_eq!(lhs, TemporalElement::new((t - k) % t, false, t));
        }
    }

    #[test]
    fn permutation_is_bijective() {
        for g in all(7) {
            let mut p = g.permutation();
            p.sort();
            assert_eq!(p, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn inverse_of_plain_shift() {
        let g = TemporalElement::new(3, false, 12);
        assert_eq!(g.inverse(), TemporalElement::new(9, false, 12));
        assert_eq!(
            TemporalElement::identity(12).inverse(),
            TemporalElement::identity(12)
        );
    }
}
