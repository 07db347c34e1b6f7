use ddei::forward::{
    add_noise, adjoint, forward, sample_masks, zero_filled, MaskScheme, MaskSpec, Masks,
};
use ddei::rng::rng_from;
use ddei::video::{inner_product, ImageSequence, KTSequence};
use ndarray::Array3;
use num_complex::Complex32;
use proptest::prelude::*;
use rand::Rng as _;

fn random_sequence(t: usize, h: usize, w: usize, seed: u64) -> ImageSequence {
    let mut rng = rng_from(seed, &[1]);
    ImageSequence::from_fn(t, h, w, |_| {
        Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
    .unwrap()
}

/// Random k-space supported on the mask.
fn random_kspace(masks: &Masks, seed: u64) -> KTSequence {
    let (t, h, w) = masks.dims();
    let mut rng = rng_from(seed, &[2]);
    let data = Array3::from_shape_fn((t, h, w), |(ti, _, c)| {
        let v = Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if masks.is_sampled(ti, c) {
            v
        } else {
            Complex32::default()
        }
    });
    KTSequence::new(data).unwrap()
}

fn spec_strategy() -> impl Strategy<Value = MaskSpec> {
    (
        1.0f64..6.0,
        0usize..2,
        prop::bool::ANY,
        prop::bool::ANY,
        any::<u64>(),
    )
        .prop_map(|(r, acs, gauss, iid, seed)| MaskSpec {
            acceleration: r,
            acs_lines: 2 * acs,
            scheme: if gauss {
                MaskScheme::GaussianColumns
            } else {
                MaskScheme::UniformColumns
            },
            per_frame_iid: iid,
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(48) })]

    #[test]
    fn adjoint_identity(spec in spec_strategy(), seed in any::<u64>()) {
        let masks = sample_masks(&spec, 3, 8, 16).unwrap();
        let x = random_sequence(3, 8, 16, seed);
        let y = random_kspace(&masks, seed);
        let lhs = inner_product(forward(&x, &masks).unwrap().data().view(), y.data().view()).unwrap();
        let rhs = inner_product(x.data().view(), adjoint(&y, &masks).unwrap().data().view()).unwrap();
        let scale = x.norm() * y.data().iter().map(|v| v.norm_sqr() as f64).sum::<f64>().sqrt();
        prop_assert!((lhs - rhs).norm() / scale.max(1e-30) < 1e-4);
    }

    #[test]
    fn masking_is_idempotent(spec in spec_strategy(), seed in any::<u64>()) {
        let masks = sample_masks(&spec, 2, 8, 16).unwrap();
        let y = random_kspace(&masks, seed);
        let again = forward(&adjoint(&y, &masks).unwrap(), &masks).unwrap();
        for (a, b) in again.data().iter().zip(y.data()) {
            prop_assert!((a - b).norm() < 1e-5);
        }
        prop_assert_eq!(zero_filled(&y, &masks).unwrap(), adjoint(&y, &masks).unwrap());
    }

    #[test]
    fn masks_are_deterministic_cartesian_and_keep_acs(spec in spec_strategy()) {
        let (t, h, w) = (4, 6, 32);
        let a = sample_masks(&spec, t, h, w).unwrap();
        prop_assert_eq!(&a, &sample_masks(&spec, t, h, w).unwrap());
        let dense = a.to_dense();
        for ti in 0..t {
            for c in 0..w {
                let col: Vec<u8> = (0..h).map(|r| dense[[ti, r, c]]).collect();
                prop_assert!(col.iter().all(|&v| v == col[0]));
            }
            for c in spec.acs_range(w) {
                prop_assert!(a.is_sampled(ti, c));
            }
        }
    }

    #[test]
    fn noise_stays_on_the_mask(spec in spec_strategy(), sigma in 0.0f64..2.0, seed in any::<u64>()) {
        let masks = sample_masks(&spec, 2, 8, 16).unwrap();
        let x = random_sequence(2, 8, 16, seed);
        let y = forward(&x, &masks).unwrap();
        let noisy = add_noise(&y, &masks, sigma, &mut rng_from(seed, &[3])).unwrap();
        for ((ti, _, c), v) in noisy.data().indexed_iter() {
            if !masks.is_sampled(ti, c) {
                prop_assert_eq!(*v, Complex32::default());
            }
        }
    }
}

#[test]
fn full_mask_recovers_the_image() {
    let x = random_sequence(2, 8, 8, 5);
    let masks = Masks::full(2, 8, 8);
    let back = adjoint(&forward(&x, &masks).unwrap(), &masks).unwrap();
    for (a, b) in back.data().iter().zip(x.data()) {
        assert!((a - b).norm() < 1e-5);
    }
    let spec = MaskSpec {
        acceleration: 1.0,
        acs_lines: 0,
        ..MaskSpec::default()
    };
    assert_eq!(
        sample_masks(&spec, 2, 8, 8).unwrap().sampled_entries(),
        2 * 8 * 8
    );
}

#[test]
fn noise_variance_matches_sigma() {
    let masks = Masks::full(4, 128, 200);
    let y = KTSequence::new(Array3::zeros((4, 128, 200))).unwrap();
    let sigma = 0.7;
    let noisy = add_noise(&y, &masks, sigma, &mut rng_from(9, &[])).unwrap();
    let var = noisy
        .data()
        .iter()
        .map(|v| v.norm_sqr() as f64)
        .sum::<f64>()
        / noisy.data().len() as f64;
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "{var}");
    assert!(add_noise(&y, &masks, -1.0, &mut rng_from(9, &[])).is_err());
}

#[test]
fn infeasible_specs_are_rejected() {
    let spec = MaskSpec {
        acceleration: 8.0,
        acs_lines: 8,
        ..MaskSpec::default()
    };
    assert!(sample_masks(&spec, 2, 8, 16).is_err());
    let spec = MaskSpec {
        acceleration: 0.5,
        ..MaskSpec::default()
    };
    assert!(sample_masks(&spec, 2, 8, 64).is_err());
}
