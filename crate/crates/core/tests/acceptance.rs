//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The training comparisons are long (tens of minutes on one core); the
//! dataset and runs are shared between tests through `OnceLock`s.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::OnceLock;
use std::time::Instant;

use cpu_time::ThreadTime;
use ddei::autodiff::{Tape, Tensor, Var};
use ddei::backbone::{data_consistency, Activation, BackboneConfig, DcMode, Model, Network};
use ddei::data::{self, build_dataset, DatasetManifest, PhantomConfig, Split};
use ddei::forward::{add_noise, adjoint, forward, sample_masks, MaskScheme, MaskSpec, Masks};
use ddei::group::cpab::{cpab_integrate, pixel_grid, CpabElement, Tessellation};
use ddei::group::{act, inverse, sample_group, GroupConfig, TemporalElement};
use ddei::losses::{compute_loss, LossConfig, LossKind};
use ddei::metrics::{psnr, MetricsReport};
use ddei::rng::rng_from;
use ddei::train::{
    evaluate, mean_measurement_rms, train, Checkpoint, EvalOptions, ReconstructionMode, TrainConfig,
};
use ddei::video::{fft2_centered, inner_product, ImageSequence, KTSequence};
use num_complex::Complex32;
use rand::Rng as _;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[acceptance {criterion}] {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    // Written past the test harness capture so the line always shows.
    let mut out = std::io::stdout();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn random_sequence(t: usize, h: usize, w: usize, rng: &mut impl rand::Rng) -> ImageSequence {
    ImageSequence::from_fn(t, h, w, |_| {
        Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
    .unwrap()
}

fn random_kspace(t: usize, h: usize, w: usize, rng: &mut impl rand::Rng) -> KTSequence {
    KTSequence::new(random_sequence(t, h, w, rng).into_inner()).unwrap()
}

fn spec(acceleration: f64, acs: usize, seed: u64) -> MaskSpec {
    MaskSpec {
        acceleration,
        acs_lines: acs,
        scheme: MaskScheme::GaussianColumns,
        per_frame_iid: true,
        seed,
    }
}

#[test]
fn criterion_1_operator_algebra() {
    let start = Instant::now();
    let mut rng = rng_from(101, &[]);
    let mut worst_unitary = 0.0f64;
    let mut worst_adjoint = 0.0f64;
    for i in 0..100 {
        let x = random_sequence(3, 8, 8, &mut rng);
        let y = random_kspace(3, 8, 8, &mut rng);
        let m = sample_masks(&spec(2.0, 2, i), 3, 8, 8).unwrap();

        for f in 0..3 {
            let k = fft2_centered(x.frame(f)).unwrap();
            let a: f64 = x.frame(f).iter().map(|v| v.norm_sqr() as f64).sum();
            let b: f64 = k.iter().map(|v| v.norm_sqr() as f64).sum();
            worst_unitary = worst_unitary.max((a - b).abs() / a);
        }
        let ax = forward(&x, &m).unwrap();
        let ahy = adjoint(&y, &m).unwrap();
        let lhs = inner_product(ax.data().view(), y.data().view()).unwrap();
        let rhs = inner_product(x.data().view(), ahy.data().view()).unwrap();
        worst_adjoint = worst_adjoint.max((lhs - rhs).norm() / lhs.norm().max(rhs.norm()));
    }

    let s = spec(4.0, 2, 77);
    let deterministic = sample_masks(&s, 4, 16, 16).unwrap()
        == sample_masks(&s, 4, 16, 16).unwrap()
        && sample_masks(&s, 4, 16, 16).unwrap()
            != sample_masks(&s.with_seed(78), 4, 16, 16).unwrap();

    let x = random_sequence(3, 8, 8, &mut rng);
    let m = sample_masks(&spec(2.0, 2, 5), 3, 8, 8).unwrap();
    let y = forward(&x, &m).unwrap();
    let fixed = data_consistency(&x, &y, &m).unwrap();
    let fixed_err = fixed
        .data()
        .iter()
        .zip(x.data().iter())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0f32, f32::max);
    let other = random_sequence(3, 8, 8, &mut rng);
    let once = data_consistency(&other, &y, &m).unwrap();
    let twice = data_consistency(&once, &y, &m).unwrap();
    let idem_err = once
        .data()
        .iter()
        .zip(twice.data().iter())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0f32, f32::max);

    let secs = start.elapsed().as_secs_f64();
    let pass = worst_unitary < 1e-4
        && worst_adjoint < 1e-4
        && deterministic
        && fixed_err < 1e-5
        && idem_err < 1e-5
        && secs < 10.0;
    report(
        1,
        "operator algebra",
        pass,
        &format!(
            "fft rel err {worst_unitary:.2e}, adjoint rel err {worst_adjoint:.2e}, masks deterministic {deterministic}, \
             DC fixed point err {fixed_err:.2e}, DC idempotence err {idem_err:.2e}, {secs:.2}s"
        ),
    );
    assert!(pass);
}

fn smooth_phantom(t: usize, n: usize) -> ImageSequence {
    ImageSequence::from_fn(t, n, n, |(f, r, c)| {
        let phase = f as f64 / t as f64 * std::f64::consts::TAU;
        let x = (c as f64 + 0.5) / n as f64 - 0.5;
        let y = (r as f64 + 0.5) / n as f64 - 0.5;
        let rad = 0.18 + 0.03 * phase.sin();
        let v = (-(x * x + y * y) / (2.0 * rad * rad)).exp()
            + 0.4 * (-((x - 0.1).powi(2) + (y + 0.08).powi(2)) / 0.004).exp();
        Complex32::new(v as f32, (0.2 * v * x) as f32)
    })
    .unwrap()
}

#[test]
fn criterion_2_group_suite() {
    let start = Instant::now();

    // Dihedral group on 12 frames, all 24 elements.
    let t = 12;
    let elements: Vec<TemporalElement> = (0..t)
        .flat_map(|s| [false, true].map(|r| TemporalElement::new(s, r, t)))
        .collect();
    let e = TemporalElement::identity(t);
    let perm = |g: &TemporalElement| g.permutation();
    let mut axioms = elements.len() == 24;
    for a in &elements {
        axioms &= perm(&a.compose(&e)) == perm(a) && perm(&e.compose(a)) == perm(a);
        axioms &= a.compose(&a.inverse()).is_identity() && a.inverse().compose(a).is_identity();
        for b in &elements {
            let ab = a.compose(b);
            axioms &= elements.iter().any(|c| perm(c) == perm(&ab));
            // composition acts as the composition of permutations
            let (pa, pb, pab) = (perm(a), perm(b), perm(&ab));
            axioms &= (0..t).all(|i| pab[i] == pb[pa[i]]) || (0..t).all(|i| pab[i] == pa[pb[i]]);
            for c in &elements {
                axioms &= perm(&ab.compose(c)) == perm(&a.compose(&b.compose(c)));
            }
        }
    }

    // CPAB velocity continuity: evaluate on both sides of every cell edge and
    // cell diagonal.
    let tess = Tessellation::default();
    let mut prng = rng_from(202, &[]);
    let params: Vec<f64> = (0..tess.dim())
        .map(|_| prng.random_range(-1.0..1.0))
        .collect();
    let elem = CpabElement {
        params,
        tess,
        magnitude: 0.3,
    };
    let field = elem.field();
    let delta = 1e-10;
    let mut jump = 0.0f64;
    let gap = |p: [f64; 2], q: [f64; 2]| {
        let (a, b) = (field.eval(p), field.eval(q));
        (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
    };
    for k in 1..=40 {
        let s = k as f64 / 41.0;
        for i in 1..tess.nx {
            let x = i as f64 / tess.nx as f64;
            jump = jump.max(gap([x - delta, s], [x + delta, s]));
        }
        for j in 1..tess.ny {
            let y = j as f64 / tess.ny as f64;
            jump = jump.max(gap([s, y - delta], [s, y + delta]));
        }
        for i in 0..tess.nx {
            for j in 0..tess.ny {
                let (cw, ch) = (1.0 / tess.nx as f64, 1.0 / tess.ny as f64);
                let (x0, y0) = (i as f64 * cw, j as f64 * ch);
                let u = 0.02 + 0.96 * s;
                let p = [x0 + u * cw, y0 + u * ch];
                jump = jump.max(gap(
                    [p[0] - delta, p[1] + delta],
                    [p[0] + delta, p[1] - delta],
                ));
                let q = [x0 + u * cw, y0 + (1.0 - u) * ch];
                jump = jump.max(gap(
                    [q[0] - delta, q[1] - delta],
                    [q[0] + delta, q[1] + delta],
                ));
            }
        }
    }

    // Flow reversal with the sampled magnitude, RK4, 10 steps.
    let mut grng = rng_from(203, &[]);
    let cfg = GroupConfig::default();
    let g = sample_group(&cfg, t, &mut grng);
    let warp = g.cpab.clone();
    let grid = pixel_grid(32, 32);
    let forward_disp = cpab_integrate(&warp, &grid, 10);
    let moved = &grid + &forward_disp;
    let back = cpab_integrate(&warp.inverse(), &moved, 10);
    let reversal = (&moved + &back - &grid)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));

    // Composite round trip.
    let x = smooth_phantom(12, 64);
    let mut worst_psnr = f64::INFINITY;
    for _ in 0..3 {
        let g = sample_group(&cfg, 12, &mut grng);
        let back = act(&g, &act(&inverse(&g), &x).unwrap()).unwrap();
        worst_psnr = worst_psnr.min(psnr(&back, &x).unwrap());
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = axioms && jump < 1e-6 && reversal < 1e-3 && worst_psnr > 33.0 && secs < 60.0;
    report(
        2,
        "group suite",
        pass,
        &format!(
            "Dih_12 axioms {axioms}, CPAB edge jump {jump:.2e}, flow reversal {reversal:.2e}, \
             composite round trip {worst_psnr:.2} dB, {secs:.1}s"
        ),
    );
    assert!(pass);
}

// The divergence term scales f32 roundoff in h(y + εb) − h(y) by 2σ²/(mε);
// at the default probe step that noise swamps central differences.
fn audit_config(kind: LossKind) -> LossConfig {
    LossConfig {
        sure_sigma: Some(0.05),
        sure_probe_eps: 0.1,
        ..LossConfig::of_kind(kind)
    }
}

#[test]
fn criterion_3_gradient_audit() {
    let start = Instant::now();
    let (t, n) = (4, 8);
    let mut rng = rng_from(303, &[]);
    let x = data::generate_phantom_seeded(&PhantomConfig {
        t,
        h: n,
        w: n,
        n_ellipses: 2,
        seed: 3,
        ..PhantomConfig::default()
    })
    .unwrap();
    let masks = sample_masks(&spec(2.0, 2, 4), t, n, n).unwrap();
    let y = add_noise(&forward(&x, &masks).unwrap(), &masks, 0.05, &mut rng).unwrap();
    let cfg = BackboneConfig {
        hidden_channels: 4,
        activation: Activation::Tanh,
        dc_mode: DcMode::Soft,
        ..BackboneConfig::default()
    };
    let mut net = Network::init(cfg, &mut rng).unwrap();
    // move off the zero-initialised output layer
    let jitter: Vec<f32> = (0..net.params.count())
        .map(|_| rng.random_range(-0.1..0.1))
        .collect();
    net.params.apply_update(&jitter);

    let kinds = [
        LossKind::Mc,
        LossKind::Ddei,
        LossKind::Ssdu,
        LossKind::Phase2phase,
        LossKind::Sure,
        LossKind::DdeiSure,
        LossKind::Supervised,
    ];
    let count = net.params.count();
    let mut pick = rng_from(304, &[]);
    let mut indices: Vec<usize> = (0..24).map(|_| pick.random_range(0..count)).collect();
    indices.extend(count - 2..count); // the soft DC logits
    let mut details = Vec::new();
    let mut pass = true;
    for kind in kinds {
        let lc = audit_config(kind);
        let eval = |net: &Network| {
            compute_loss(net, &lc, &y, &masks, Some(&x), &mut rng_from(305, &[])).unwrap()
        };
        let base = eval(&net);
        let gmax = base.grads.iter().fold(0.0f32, |m, g| m.max(g.abs())) as f64;
        let mut worst = 0.0f64;
        for &i in &indices {
            let central = |eps: f32| {
                let mut step = vec![0.0f32; count];
                let mut plus = net.clone();
                step[i] = eps;
                plus.params.apply_update(&step);
                let mut minus = net.clone();
                step[i] = -eps;
                minus.params.apply_update(&step);
                let h = (plus.params.to_flat()[i] - minus.params.to_flat()[i]) as f64;
                (eval(&plus).value - eval(&minus).value) / h
            };
            // Richardson-extrapolated central differences (fourth order), so the
            // step can stay well above f32 cancellation noise
            let fd = (4.0 * central(5e-3) - central(1e-2)) / 3.0;
            let a = base.grads[i] as f64;
            // relative error, with a floor for entries far below the largest gradient
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2 * gmax).max(1e-12);
            worst = worst.max(rel);
        }
        pass &= worst < 1e-2;
        details.push(format!("{kind:?} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    report(
        3,
        "gradient audit",
        pass,
        &format!("worst relative error: {}; {secs:.1}s", details.join(", ")),
    );
    assert!(pass);
}

/// `f(y) = c A^H y`.
struct Shrink(f32);

impl Model for Shrink {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        vec![tape.param(Tensor::scalar(self.0))]
    }

    fn apply(&self, tape: &mut Tape, w: &[Var], y: Var, masks: &Masks) -> ddei::Result<Var> {
        let weights: Vec<f32> = masks
            .columns()
            .iter()
            .map(|&s| if s { 1.0 } else { 0.0 })
            .collect();
        let my = tape.mask(y, Rc::new(weights));
        let x = tape.fft(my, true);
        Ok(tape.mul_scalar(x, w[0]))
    }

    fn num_params(&self) -> usize {
        1
    }
}

#[test]
fn criterion_4_sure_unbiased() {
    let (t, n) = (2, 8);
    let x = smooth_phantom(t, n);
    let masks = sample_masks(&spec(2.0, 2, 9), t, n, n).unwrap();
    let clean = forward(&x, &masks).unwrap();
    let m = masks.sampled_entries() as f64;
    let energy: f64 = clean.data().iter().map(|v| v.norm_sqr() as f64).sum();
    let (c, sigma) = (0.7f64, 0.1f64);
    let expected = (c - 1.0).powi(2) * energy / m + c * c * sigma * sigma;

    let cfg = LossConfig {
        sure_sigma: Some(sigma),
        ..LossConfig::of_kind(LossKind::Sure)
    };
    let model = Shrink(c as f32);
    let draws = 1000;
    let mut values = Vec::with_capacity(draws);
    let mut true_mse = Vec::with_capacity(draws);
    for i in 0..draws {
        let y = add_noise(&clean, &masks, sigma, &mut rng_from(404, &[i as u64])).unwrap();
        let out = compute_loss(
            &model,
            &cfg,
            &y,
            &masks,
            None,
            &mut rng_from(405, &[i as u64]),
        )
        .unwrap();
        values.push(out.value);
        let mse: f64 = y
            .data()
            .iter()
            .zip(clean.data().iter())
            .map(|(a, b)| ((a * c as f32) - b).norm_sqr() as f64)
            .sum::<f64>()
            / m;
        true_mse.push(mse);
    }
    let mean = values.iter().sum::<f64>() / draws as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0)).sqrt();
    let se = sd / (draws as f64).sqrt();
    let mean_true = true_mse.iter().sum::<f64>() / draws as f64;
    let pass = (mean - expected).abs() <= 3.0 * se;
    report(
        4,
        "SURE unbiasedness",
        pass,
        &format!(
            "mean SURE {mean:.6e}, expected MSE {expected:.6e} (empirical {mean_true:.6e}), |diff| {:.2e} vs 3 SE {:.2e}",
            (mean - expected).abs(),
            3.0 * se
        ),
    );
    assert!(pass);
}

const STEPS_EPOCHS: usize = 50;
const EVAL_SEED: u64 = 2024;

fn dataset() -> &'static PathBuf {
    static DATA: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DATA
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            build_dataset(50, &PhantomConfig::default(), 0.8, dir.path(), 42).unwrap();
            let manifest = dir.path().join(data::MANIFEST_NAME);
            (dir, manifest)
        })
        .1
}

fn base_config(kind: LossKind) -> TrainConfig {
    TrainConfig {
        loss: LossConfig::of_kind(kind),
        backbone: BackboneConfig::default(),
        mask_spec: spec(4.0, 8, 0),
        epochs: STEPS_EPOCHS,
        batch_size: 1,
        seed: 7,
        eval_every: STEPS_EPOCHS,
        dataset_manifest: dataset().clone(),
        ..TrainConfig::default()
    }
}

fn eval(ckpt: &Checkpoint) -> MetricsReport {
    let (manifest, dir) = DatasetManifest::load(&ckpt.config.dataset_manifest).unwrap();
    let opts = EvalOptions {
        split: Split::Test,
        mode: ReconstructionMode::Direct,
        seed: EVAL_SEED,
        threads: 1,
    };
    evaluate(ckpt, &manifest, Path::new(&dir), &opts).unwrap()
}

/// Runtime budget of one training comparison.
const BUDGET_SECS: f64 = 30.0 * 60.0;

struct Run {
    checkpoint: Checkpoint,
    report: MetricsReport,
    /// CPU time of the calling thread. Training and evaluation run on it
    /// alone, and wall time is inflated when the long tests share a core.
    secs: f64,
}

fn run(config: &TrainConfig) -> Run {
    let start = ThreadTime::now();
    let checkpoint = train(config).unwrap();
    let report = eval(&checkpoint);
    Run {
        checkpoint,
        report,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn ddei_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| run(&base_config(LossKind::Ddei)))
}

#[test]
fn criterion_5_nullspace_ordering() {
    let zf_start = ThreadTime::now();
    let zf = eval(&Checkpoint::zero_filled(&base_config(LossKind::Mc)));
    let zf_secs = zf_start.elapsed().as_secs_f64();
    let mc = run(&base_config(LossKind::Mc));
    let ddei = ddei_run();
    let mut rot_cfg = base_config(LossKind::Ddei);
    rot_cfg.loss.group_config = GroupConfig::rotation_only();
    let rot = run(&rot_cfg);

    let p = |r: &MetricsReport| r.aggregate.psnr.mean;
    let (p_zf, p_mc, p_ddei, p_rot) = (p(&zf), p(&mc.report), p(&ddei.report), p(&rot.report));
    let secs = zf_secs + mc.secs + ddei.secs + rot.secs;
    let pass =
        p_ddei >= p_mc + 2.0 && (p_mc - p_zf).abs() <= 0.5 && p_ddei >= p_rot && secs < BUDGET_SECS;
    report(
        5,
        "nullspace-learning ordering",
        pass,
        &format!(
            "test PSNR ZF {p_zf:.2}, MC {p_mc:.2}, EI-rotation {p_rot:.2}, DDEI {p_ddei:.2} dB \
             (DDEI - MC = {:.2}); {:.0}s CPU",
            p_ddei - p_mc,
            secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_noisy_ordering() {
    let mut plain = base_config(LossKind::Ddei);
    plain.backbone.dc_mode = DcMode::Soft;
    plain.noise_sigma = 0.1 * mean_measurement_rms(&plain).unwrap();
    let mut sure = plain.clone();
    sure.loss = LossConfig::of_kind(LossKind::DdeiSure);

    let zf_start = ThreadTime::now();
    let zf = eval(&Checkpoint::zero_filled(&plain));
    let zf_secs = zf_start.elapsed().as_secs_f64();
    let a = run(&plain);
    let b = run(&sure);
    let secs = zf_secs + a.secs + b.secs;
    let p = |r: &MetricsReport| r.aggregate.psnr.mean;
    let pass = p(&b.report) >= p(&a.report) && secs < BUDGET_SECS;
    report(
        6,
        "noisy ordering",
        pass,
        &format!(
            "sigma {:.4}; test PSNR ZF {:.2}, DDEI {:.2}, DDEI-SURE {:.2} dB; {secs:.0}s CPU",
            plain.noise_sigma,
            p(&zf),
            p(&a.report),
            p(&b.report)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_reproducibility() {
    let first = ddei_run();
    let second = run(&base_config(LossKind::Ddei));
    let same_ckpt = first.checkpoint.to_bytes() == second.checkpoint.to_bytes();
    let same_report =
        first.report == second.report && first.report.to_json() == second.report.to_json();
    let pass = same_ckpt && same_report;
    report(
        7,
        "reproducibility",
        pass,
        &format!(
            "checkpoints byte-identical {same_ckpt} ({} bytes), reports identical {same_report}",
            first.checkpoint.to_bytes().len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_format_round_trips() {
    use ddei::Error;
    use std::fs;

    let dir = tempfile::tempdir().unwrap();
    let mut ok = Vec::new();

    let x = data::generate_phantom_seeded(&PhantomConfig {
        t: 4,
        h: 16,
        w: 16,
        ..PhantomConfig::default()
    })
    .unwrap();
    let seq = dir.path().join("a.seq");
    data::save_sequence(&x, &seq).unwrap();
    let raw = fs::read(&seq).unwrap();
    let back = data::load_sequence(&seq).unwrap();
    data::save_sequence(&back, &dir.path().join("b.seq")).unwrap();
    ok.push((
        "sequence bytes",
        raw == fs::read(dir.path().join("b.seq")).unwrap() && back == x,
    ));

    let m = sample_masks(&spec(4.0, 4, 3), 4, 16, 16).unwrap();
    let mp = dir.path().join("a.mask");
    data::save_masks(&m, &mp).unwrap();
    let mraw = fs::read(&mp).unwrap();
    let mback = data::load_masks(&mp).unwrap();
    data::save_masks(&mback, &dir.path().join("b.mask")).unwrap();
    ok.push((
        "mask bytes",
        mraw == fs::read(dir.path().join("b.mask")).unwrap() && mback == m,
    ));

    let small = tempfile::tempdir().unwrap();
    build_dataset(
        2,
        &PhantomConfig {
            t: 4,
            h: 16,
            w: 16,
            ..PhantomConfig::default()
        },
        0.5,
        small.path(),
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        backbone: BackboneConfig {
            hidden_channels: 3,
            ..BackboneConfig::default()
        },
        mask_spec: spec(2.0, 2, 0),
        dataset_manifest: small.path().join(data::MANIFEST_NAME),
        checkpoint_dir: dir.path().join("ckpt"),
        ..TrainConfig::default()
    };
    let ckpt = train(&cfg).unwrap();
    let cp = cfg.checkpoint_dir.join(ddei::train::CHECKPOINT_NAME);
    let craw = fs::read(&cp).unwrap();
    let cback = Checkpoint::load(&cp).unwrap();
    ok.push((
        "checkpoint bytes",
        craw == ckpt.to_bytes() && cback.to_bytes() == craw && cback == ckpt,
    ));

    // Corruptions.
    let bad = dir.path().join("bad.seq");
    fs::copy(&seq, &bad).unwrap();
    fs::copy(
        dir.path().join("a.seq.json"),
        dir.path().join("bad.seq.json"),
    )
    .unwrap();
    fs::write(&bad, &raw[..raw.len() - 3]).unwrap();
    ok.push((
        "truncated sequence",
        matches!(data::load_sequence(&bad), Err(Error::SizeMismatch { .. })),
    ));
    fs::write(&bad, &raw).unwrap();
    fs::write(
        dir.path().join("bad.seq.json"),
        r#"{"dims": [4, 16, 16], "dtype": "c64", "version": 99}"#,
    )
    .unwrap();
    ok.push((
        "future sequence version",
        matches!(data::load_sequence(&bad), Err(Error::UnknownVersion { .. })),
    ));
    fs::write(dir.path().join("bad.seq.json"), "{\"dims\": [4, 16").unwrap();
    ok.push((
        "garbled sidecar",
        matches!(data::load_sequence(&bad), Err(Error::CorruptHeader { .. })),
    ));
    fs::write(
        dir.path().join("bad.seq.json"),
        r#"{"dims": [4, 16, 8], "dtype": "c64", "version": 1}"#,
    )
    .unwrap();
    let err = data::load_sequence(&bad).unwrap_err();
    ok.push((
        "dims disagree with blob",
        matches!(
            err,
            Error::SizeMismatch {
                expected: 4096,
                actual: 8192,
                ..
            }
        ) && err.to_string().contains("4096")
            && err.to_string().contains("8192"),
    ));

    let badm = dir.path().join("bad.mask");
    let mut flipped = mraw.clone();
    flipped[1] = 3;
    fs::write(&badm, &flipped).unwrap();
    fs::copy(
        dir.path().join("a.mask.json"),
        dir.path().join("bad.mask.json"),
    )
    .unwrap();
    ok.push((
        "non-binary mask",
        matches!(data::load_masks(&badm), Err(Error::CorruptHeader { .. })),
    ));
    fs::write(&badm, &mraw[..100]).unwrap();
    ok.push((
        "truncated mask",
        matches!(data::load_masks(&badm), Err(Error::SizeMismatch { .. })),
    ));

    let badc = dir.path().join("bad.ckpt");
    fs::write(&badc, &craw[..craw.len() - 1]).unwrap();
    ok.push((
        "truncated checkpoint",
        matches!(Checkpoint::load(&badc), Err(Error::SizeMismatch { .. })),
    ));
    let mut v = craw.clone();
    v[8..12].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&badc, &v).unwrap();
    ok.push((
        "future checkpoint version",
        matches!(
            Checkpoint::load(&badc),
            Err(Error::UnknownVersion { found: 7, .. })
        ),
    ));
    let mut v = craw.clone();
    v[..8].copy_from_slice(b"NOTACKPT");
    fs::write(&badc, &v).unwrap();
    ok.push((
        "bad checkpoint magic",
        matches!(Checkpoint::load(&badc), Err(Error::CorruptHeader { .. })),
    ));

    let (manifest, mdir) = DatasetManifest::load(small.path()).unwrap();
    fs::remove_file(mdir.join(&manifest.entries[0].path)).unwrap();
    let missing = manifest.entries[0].id.clone();
    let listed = match data::load_split(&manifest, &mdir, manifest.entries[0].split) {
        Err(Error::MissingEntries(ids)) => ids == vec![missing],
        _ => false,
    };
    ok.push(("missing entry listed", listed));

    let failed: Vec<&str> = ok.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    let pass = failed.is_empty();
    report(
        8,
        "format round trips",
        pass,
        &if pass {
            format!("{} checks passed", ok.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    );
    assert!(pass);
}
