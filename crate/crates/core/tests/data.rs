use ddei::data::{
    build_dataset, generate_phantom_seeded, load_masks, load_sequence, load_split, save_masks,
    save_sequence, standardize, DatasetManifest, PhantomConfig, Split,
};
use ddei::forward::{sample_masks, MaskSpec};
use ddei::Error;
use num_complex::Complex32;
use proptest::prelude::*;
use std::fs;

fn tiny(seed: u64) -> PhantomConfig {
    PhantomConfig {
        t: 2,
        h: 8,
        w: 8,
        n_ellipses: 2,
        seed,
        ..PhantomConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(16) })]

    #[test]
    fn standardization_is_invertible(seed in any::<u64>(), gain in 0.01f32..100.0) {
        let x = generate_phantom_seeded(&tiny(seed)).unwrap().scaled(gain);
        let (s, scale) = standardize(&x).unwrap();
        prop_assert!(scale > 0.0);
        prop_assert!((s.max_magnitude() - 1.0).abs() < 1e-6);
        let (again, one) = standardize(&s).unwrap();
        prop_assert!((one - 1.0).abs() < 1e-6);
        for (a, b) in again.data().iter().zip(s.data()) {
            prop_assert!((a - b).norm() < 1e-6);
        }
        // one f32 rounding of the division, then one of the product
        for (orig, v) in x.data().iter().zip(s.data()) {
            let back = Complex32::new(v.re * scale as f32, v.im * scale as f32);
            prop_assert!((orig - back).norm() <= 2.5 * f32::EPSILON * scale as f32);
        }
    }

    #[test]
    fn files_round_trip_exactly(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let x = generate_phantom_seeded(&tiny(seed)).unwrap();
        let path = dir.path().join("x.seq");
        save_sequence(&x, &path).unwrap();
        prop_assert_eq!(load_sequence(&path).unwrap(), x);
        let masks = sample_masks(&MaskSpec { acceleration: 2.0, acs_lines: 2, seed, ..MaskSpec::default() }, 2, 8, 8).unwrap();
        let mpath = dir.path().join("x.mask");
        save_masks(&masks, &mpath).unwrap();
        prop_assert_eq!(load_masks(&mpath).unwrap(), masks);
    }
}

#[test]
fn datasets_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = build_dataset(6, &tiny(0), 0.5, a.path(), 17).unwrap();
    let mb = build_dataset(6, &tiny(0), 0.5, b.path(), 17).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.split(Split::Train).count(), 3);
    for e in &ma.entries {
        assert_eq!(
            fs::read(a.path().join(&e.path)).unwrap(),
            fs::read(b.path().join(&e.path)).unwrap()
        );
    }
    let (loaded, dir) = DatasetManifest::load(a.path()).unwrap();
    assert_eq!(loaded, ma);
    for (entry, x) in load_split(&loaded, &dir, Split::Test).unwrap() {
        assert_eq!(entry.split, Split::Test);
        assert!(x
            .data()
            .iter()
            .all(|v| v.re.is_finite() && v.im.is_finite()));
        assert!((x.max_magnitude() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn missing_and_corrupt_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(4, &tiny(0), 0.5, dir.path(), 1).unwrap();
    let victim = m.split(Split::Train).next().unwrap().clone();
    fs::remove_file(dir.path().join(&victim.path)).unwrap();
    match load_split(&m, dir.path(), Split::Train) {
        Err(Error::MissingEntries(ids)) => assert_eq!(ids, vec![victim.id.clone()]),
        other => panic!("expected missing entries, got {other:?}"),
    }
    assert!(load_split(&m, dir.path(), Split::Test).is_ok());

    let x = generate_phantom_seeded(&tiny(3)).unwrap();
    let path = dir.path().join("y.seq");
    save_sequence(&x, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_sequence(&path).unwrap_err().is_data_error());
}
