//! Synthetic cardiac-like phantoms, standardization and the on-disk dataset
//! format.
//!
//! A sequence is stored as a raw blob of little-endian `(re, im)` `f32` pairs
//! in row-major `[T, H, W]` order next to a JSON sidecar
//! `{"dims": [T, H, W], "dtype": "c64", "version": 1}` at `<blob>.json`.
//! Masks use the same layout with one `u8` per entry and dtype `"u8"`.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{MaskSpec, Masks};
use crate::rng::{self, rng_from, Rng};
use crate::video::{ifft2_centered, ImageSequence, KTSequence};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub n_ellipses: usize,
    /// Peak displacement of the moving ellipses, as a fraction of the image
    /// size.
    pub motion_amplitude: f64,
    /// Relative radius modulation of the pulsating annulus.
    pub pulsation_amplitude: f64,
    /// Multiply by a smooth low-order complex phase field.
    pub phase_texture: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            t: 12,
            h: 64,
            w: 64,
            n_ellipses: 4,
            motion_amplitude: 0.05,
            pulsation_amplitude: 0.15,
            phase_texture: true,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h < 4 || self.w < 4 || self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(Error::config(format!(
                "phantom dims {}x{}x{} must have T >= 1 and even H, W >= 4",
                self.t, self.h, self.w
            )));
        }
        for (name, v) in [
            ("motion_amplitude", self.motion_amplitude),
            ("pulsation_amplitude", self.pulsation_amplitude),
        ] {
            if !(0.0..=0.3).contains(&v) {
                return Err(Error::config(format!("{name} {v} outside [0, 0.3]")));
            }
        }
        Ok(())
    }
}

/// Smooth 0..1 edge: 1 inside (`d < 1`), 0 outside, with a transition about
/// `soft` wide in normalized distance.
fn soft_inside(d: f64, soft: f64) -> f64 {
    0.5 * (1.0 - ((d - 1.0) / soft).tanh())
}

struct Blob {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
    intensity: f64,
    phase: f64,
    dir: f64,
}

impl Blob {
    fn distance(&self, x: f64, y: f64, dx: f64, dy: f64, rot: f64) -> f64 {
        let (s, c) = (self.angle + rot).sin_cos();
        let (px, py) = (x - self.cx - dx, y - self.cy - dy);
        let u = (c * px + s * py) / self.ax;
        let v = (-s * px + c * py) / self.ay;
        (u * u + v * v).sqrt()
    }
}

/// Cardiac-like scene in normalized coordinates `[-1, 1]^2`: a soft body
/// ellipse, a pulsating annulus around a bright pool, and moving ellipses.
/// Magnitudes lie in `[0, 1]`.
pub fn generate_phantom(config: &PhantomConfig, rng: &mut Rng) -> Result<ImageSequence> {
    config.validate()?;
    let (t, h, w) = (config.t, config.h, config.w);
    let soft = 3.0 / h.min(w) as f64;

    let body = Blob {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        ax: rng.random_range(0.75..0.9),
        ay: rng.random_range(0.6..0.8),
        angle: rng.random_range(-0.3..0.3),
        intensity: rng.random_range(0.25..0.4),
        phase: 0.0,
        dir: 0.0,
    };
    let heart_x = rng.random_range(-0.25..0.15);
    let heart_y = rng.random_range(-0.2..0.2);
    let outer = rng.random_range(0.25..0.33);
    let wall = rng.random_range(0.3..0.45);
    let pool_level = rng.random_range(0.8..1.0);
    let wall_level = rng.random_range(0.45..0.6);
    let beat_phase = rng.random_range(0.0..TAU);

    let blobs: Vec<Blob> = (0..config.n_ellipses)
        .map(|_| {
            let r = rng.random_range(0.35..0.7);
            let a = rng.random_range(0.0..TAU);
            Blob {
                cx: r * a.cos() * 0.9,
                cy: r * a.sin() * 0.8,
                ax: rng.random_range(0.06..0.18),
                ay: rng.random_range(0.05..0.14),
                angle: rng.random_range(0.0..PI),
                intensity: rng.random_range(0.4..0.9),
                phase: rng.random_range(0.0..TAU),
                dir: rng.random_range(0.0..TAU),
            }
        })
        .collect();

    let coeffs: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));

    let amp = 2.0 * config.motion_amplitude;
    let data = Array3::from_shape_fn((t, h, w), |(ti, r, c)| {
        let x = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
        let y = 2.0 * (r as f64 + 0.5) / h as f64 - 1.0;
        let cycle = TAU * ti as f64 / t as f64;

        let mut v = body.intensity
            * soft_inside(
                body.distance(x, y, 0.0, 0.0, 0.0),
                soft / body.ax.min(body.ay),
            );

        // annulus radius follows the beat
        let scale = 1.0 + config.pulsation_amplitude * (cycle + beat_phase).sin();
        let ro = outer * scale;
        let ri = ro * (1.0 - wall);
        let d = ((x - heart_x).powi(2) + (y - heart_y).powi(2)).sqrt();
        let in_outer = soft_inside(d / ro, soft / ro);
        let in_inner = soft_inside(d / ri, soft / ri);
        v = v * (1.0 - in_outer) + wall_level * (in_outer - in_inner) + pool_level * in_inner;

        for b in &blobs {
            let shift = amp * (cycle + b.phase).sin();
            let (dx, dy) = (shift * b.dir.cos(), shift * b.dir.sin());
            let rot = 2.0 * config.motion_amplitude * (cycle + b.phase).cos();
            let a = soft_inside(b.distance(x, y, dx, dy, rot), soft / b.ax.min(b.ay));
            v = v * (1.0 - a) + b.intensity * a;
        }
        let v = v.clamp(0.0, 1.0);
        if config.phase_texture {
            let p = coeffs[0] * x
                + coeffs[1] * y
                + 0.5 * (coeffs[2] * x * x + coeffs[3] * x * y + coeffs[4] * y * y);
            let (s, c) = (0.5 * PI * p).sin_cos();
            Complex32::new((v * c) as f32, (v * s) as f32)
        } else {
            Complex32::new(v as f32, 0.0)
        }
    });
    ImageSequence::new(data)
}

/// Phantom using the stream derived from `config.seed`.
pub fn generate_phantom_seeded(config: &PhantomConfig) -> Result<ImageSequence> {
    generate_phantom(config, &mut rng_from(config.seed, &[rng::TAG_PHANTOM]))
}

/// Divides by the maximum magnitude; returns the standardized sequence and
/// the factor that undoes it.
pub fn standardize(x: &ImageSequence) -> Result<(ImageSequence, f64)> {
    let peak = x.max_magnitude();
    if peak == 0.0 {
        return Err(Error::Numeric(
            "cannot standardize an all-zero sequence".into(),
        ));
    }
    if peak == 1.0 {
        return Ok((x.clone(), 1.0));
    }
    let inv = 1.0 / peak as f32;
    let data = x.data().mapv(|v| v * inv);
    Ok((ImageSequence::new(data)?, peak))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    dtype: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<MaskSpec>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_sidecar(path: &Path, dtype: &str) -> Result<Sidecar> {
    let sc_path = sidecar_path(path);
    let text = fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::CorruptHeader {
        path: sc_path.clone(),
        reason: e.to_string(),
    })?;
    // Check the version before the rest so that future layouts are reported
    // as such rather than as corruption.
    if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
        if v != FORMAT_VERSION as u64 {
            return Err(Error::UnknownVersion {
                path: sc_path,
                found: v as u32,
                supported: FORMAT_VERSION,
            });
        }
    }
    let sc: Sidecar = serde_json::from_value(raw).map_err(|e| Error::CorruptHeader {
        path: sc_path.clone(),
        reason: e.to_string(),
    })?;
    if sc.dtype != dtype {
        return Err(Error::CorruptHeader {
            path: sc_path,
            reason: format!("dtype {:?}, expected {dtype:?}", sc.dtype),
        });
    }
    Ok(sc)
}

fn read_blob(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

pub fn save_sequence(x: &ImageSequence, path: &Path) -> Result<()> {
    save_complex(x.data(), path)
}

/// k-space measurements use the sequence format.
pub fn save_kspace(y: &KTSequence, path: &Path) -> Result<()> {
    save_complex(y.data(), path)
}

pub fn load_kspace(path: &Path) -> Result<KTSequence> {
    KTSequence::new(load_complex(path)?)
}

fn save_complex(data: &Array3<Complex32>, path: &Path) -> Result<()> {
    let (t, h, w) = data.dim();
    let mut blob = Vec::with_capacity(t * h * w * 8);
    for v in data.iter() {
        blob.extend_from_slice(&v.re.to_le_bytes());
        blob.extend_from_slice(&v.im.to_le_bytes());
    }
    write_atomic(path, &blob)?;
    let sc = Sidecar {
        dims: [t, h, w],
        dtype: "c64".into(),
        version: FORMAT_VERSION,
        spec: None,
    };
    write_atomic(
        &sidecar_path(path),
        serde_json::to_string_pretty(&sc)
            .expect("sidecar serializes")
            .as_bytes(),
    )
}

/// Reads a complex `[T, H, W]` array without imposing image-sequence size
/// rules (external k-space may have any shape).
fn load_complex(path: &Path) -> Result<Array3<Complex32>> {
    let sc = read_sidecar(path, "c64")?;
    let [t, h, w] = sc.dims;
    let bytes = read_blob(path, (t * h * w * 8) as u64)?;
    let values: Vec<Complex32> = bytes
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect();
    Ok(Array3::from_shape_vec((t, h, w), values).expect("length checked"))
}

pub fn load_sequence(path: &Path) -> Result<ImageSequence> {
    ImageSequence::new(load_complex(path)?)
}

pub fn save_masks(masks: &Masks, path: &Path) -> Result<()> {
    let dense = masks.to_dense();
    let (t, h, w) = dense.dim();
    write_atomic(path, dense.as_slice().expect("standard layout"))?;
    let sc = Sidecar {
        dims: [t, h, w],
        dtype: "u8".into(),
        version: FORMAT_VERSION,
        spec: Some(masks.spec().clone()),
    };
    write_atomic(
        &sidecar_path(path),
        serde_json::to_string_pretty(&sc)
            .expect("sidecar serializes")
            .as_bytes(),
    )
}

pub fn load_masks(path: &Path) -> Result<Masks> {
    let sc = read_sidecar(path, "u8")?;
    let [t, h, w] = sc.dims;
    let bytes = read_blob(path, (t * h * w) as u64)?;
    let dense = Array3::from_shape_vec((t, h, w), bytes).expect("length checked");
    let spec = sc.spec.ok_or_else(|| Error::CorruptHeader {
        path: sidecar_path(path),
        reason: "mask sidecar lacks the sampling spec".into(),
    })?;
    Masks::from_dense(&dense, spec).map_err(|e| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub dims: [usize; 3],
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_spec: Option<MaskSpec>,
    /// Factor removed by standardization.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnknownVersion {
                path: PathBuf::from(MANIFEST_NAME),
                found: self.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(pair) = ids.windows(2).find(|p| p[0] == p[1]) {
            return Err(Error::config(format!("duplicate manifest id {}", pair[0])));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_NAME), text.as_bytes())
    }

    /// Loads `<dir>/manifest.json`, or the file itself when given one.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let (file, dir) = if path.is_dir() {
            (path.join(MANIFEST_NAME), path.to_path_buf())
        } else {
            (
                path.to_path_buf(),
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            )
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::CorruptHeader {
            path: file.clone(),
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok((m, dir))
    }

    /// Ids of entries whose files are absent under `dir`.
    pub fn missing(&self, dir: &Path, split: Option<Split>) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .filter(|e| {
                !dir.join(&e.path).is_file()
                    || !sidecar_path(&dir.join(&e.path)).is_file()
                    || e.mask_path.as_ref().is_some_and(|m| !dir.join(m).is_file())
            })
            .map(|e| e.id.clone())
            .collect()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates `n_sequences` standardized phantoms with per-sequence seeds,
/// assigns a `split_fraction` of them (rounded) to training by a seeded
/// shuffle, and writes the files and `manifest.json`.
pub fn build_dataset(
    n_sequences: usize,
    phantom: &PhantomConfig,
    split_fraction: f64,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_sequences < 2 {
        return Err(Error::config("a dataset needs at least two sequences"));
    }
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(Error::config(format!(
            "split fraction {split_fraction} outside [0, 1]"
        )));
    }
    phantom.validate()?;
    create_dir(out_dir)?;
    let mut order: Vec<usize> = (0..n_sequences).collect();
    order.shuffle(&mut rng_from(seed, &[rng::TAG_SHUFFLE]));
    let n_train = (split_fraction * n_sequences as f64).round() as usize;
    let mut split = vec![Split::Test; n_sequences];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    let mut entries = Vec::with_capacity(n_sequences);
    for (i, &sp) in split.iter().enumerate() {
        let cfg = PhantomConfig {
            seed: rng::derive_seed(seed, &[rng::TAG_PHANTOM, i as u64]),
            ..phantom.clone()
        };
        let (x, scale) = standardize(&generate_phantom_seeded(&cfg)?)?;
        let id = format!("{i:04}");
        let path = PathBuf::from(format!("{id}.seq"));
        save_sequence(&x, &out_dir.join(&path))?;
        entries.push(ManifestEntry {
            id,
            path,
            dims: [cfg.t, cfg.h, cfg.w],
            split: sp,
            mask_path: None,
            mask_spec: None,
            scale,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        entries,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Loads every entry of `split`; fails with the ids of all missing files.
pub fn load_split(
    manifest: &DatasetManifest,
    dir: &Path,
    split: Split,
) -> Result<Vec<(ManifestEntry, ImageSequence)>> {
    let missing = manifest.missing(dir, Some(split));
    if !missing.is_empty() {
        return Err(Error::MissingEntries(missing));
    }
    manifest
        .split(split)
        .map(|e| {
            let x = load_sequence(&dir.join(&e.path))?;
            let dims = x.dims();
            if [dims.0, dims.1, dims.2] != e.dims {
                return Err(Error::shape(&e.dims, &[dims.0, dims.1, dims.2]));
            }
            Ok((e.clone(), x))
        })
        .collect()
}

/// Converts a fully sampled k-space file (repository format) into a
/// standardized image sequence: inverse FFT per frame, central crop to
/// `dims`, standardization. Writes `<out_dir>/<stem>.seq`.
pub fn ingest_external(path: &Path, dims: [usize; 3], out_dir: &Path) -> Result<ManifestEntry> {
    let k = load_complex(path)?;
    let (t, h, w) = k.dim();
    let [tt, th, tw] = dims;
    if tt != t || th > h || tw > w || th == 0 || tw == 0 {
        return Err(Error::shape(&[t, h, w], &dims));
    }
    let mut image = Array3::<Complex32>::zeros((t, h, w));
    for (src, mut dst) in k.outer_iter().zip(image.outer_iter_mut()) {
        dst.assign(&ifft2_centered(src)?);
    }
    let (r0, c0) = ((h - th) / 2, (w - tw) / 2);
    let cropped = image.slice(s![.., r0..r0 + th, c0..c0 + tw]).to_owned();
    let (x, scale) = standardize(&ImageSequence::new(cropped)?)?;
    create_dir(out_dir)?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("external")
        .to_string();
    let rel = PathBuf::from(format!("{id}.seq"));
    save_sequence(&x, &out_dir.join(&rel))?;
    Ok(ManifestEntry {
        id,
        path: rel,
        dims,
        split: Split::Train,
        mask_path: None,
        mask_spec: None,
        scale,
    })
}
