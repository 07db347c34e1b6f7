//! Training loop, Adam, checkpoints and evaluation over a dataset manifest.
//!
//! Every random draw comes from a stream derived from the run seed and the
//! position in the run (epoch, step, manifest index), so results do not
//! depend on the number of worker threads.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{init_params, reconstruct_with, BackboneConfig, Network, Params};
use crate::data::{load_masks, load_split, write_atomic, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::forward::{add_noise, forward, measurement_rms, sample_masks, MaskSpec, Masks};
use crate::losses::{compute_loss, tssdu_star_reconstruct, LossConfig, LossKind};
use crate::metrics::{MetricsReport, SequenceMetrics};
use crate::rng::{self, derive_seed, rng_from};
use crate::video::{ImageSequence, KTSequence};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDEICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_NAME: &str = "latest.ckpt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    pub mask_spec: MaskSpec,
    /// Standard deviation of the complex k-space noise added to simulated
    /// measurements.
    pub noise_sigma: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset_manifest: PathBuf,
    /// Empty to keep checkpoints in memory only.
    pub checkpoint_dir: PathBuf,
    /// Epochs between evaluations and checkpoint writes.
    pub eval_every: usize,
    /// Simulate one acquisition (mask and noise) per sequence for the whole
    /// run instead of a fresh one every epoch.
    pub fixed_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            backbone: BackboneConfig::default(),
            mask_spec: MaskSpec::default(),
            noise_sigma: 0.0,
            optimizer: OptimizerConfig::default(),
            epochs: 1,
            batch_size: 1,
            seed: 0,
            dataset_manifest: PathBuf::new(),
            checkpoint_dir: PathBuf::new(),
            eval_every: 1,
            fixed_masks: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("bad training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                o.lr
            )));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::config(
                "Adam needs beta1, beta2 in [0, 1) and eps > 0",
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "epochs, batch_size and eval_every must be at least 1",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.loss.uses_sure() && self.noise_sigma <= 0.0 {
            return Err(Error::config("SURE losses need noise_sigma > 0"));
        }
        self.loss.validate()?;
        self.backbone.validate()?;
        self.mask_spec.validate()
    }

    /// Loss settings with the SURE noise level defaulted to the simulated one.
    fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if loss.uses_sure() && loss.sure_sigma.is_none() {
            loss.sure_sigma = Some(self.noise_sigma);
        }
        loss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub step: u64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Trained parameters with the optimizer state and run record. The random
/// state is implied by `(config.seed, epoch, step)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub params: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub best: Option<BestRecord>,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    n_params: usize,
    best: Option<BestRecord>,
    history: Vec<EpochRecord>,
}

impl Checkpoint {
    /// A parameter-free checkpoint reconstructing by zero filling.
    pub fn zero_filled(config: &TrainConfig) -> Self {
        Self {
            config: TrainConfig {
                backbone: BackboneConfig::zero_filled(),
                ..config.clone()
            },
            epoch: 0,
            step: 0,
            params: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            best: None,
            history: Vec::new(),
        }
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(
            self.config.backbone.clone(),
            Params::from_flat(&self.config.backbone, &self.params)?,
        )
    }

    /// Magic, version (u32 LE), header length (u64 LE), JSON header, then the
    /// parameters and both Adam moments as LE `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            n_params: self.params.len(),
            best: self.best.clone(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 12 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnknownVersion {
                path: path.to_path_buf(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = 20u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| corrupt("header length exceeds file size"))?
            as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| corrupt(&e.to_string()))?;
        let n = header.n_params;
        let expected = header_end as u64 + 12 * n as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch {
                path: path.to_path_buf(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let floats: Vec<f32> = bytes[header_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let ckpt = Self {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            params: floats[..n].to_vec(),
            adam_m: floats[n..2 * n].to_vec(),
            adam_v: floats[2 * n..].to_vec(),
            best: header.best,
            history: header.history,
        };
        if n != crate::backbone::param_count(&ckpt.config.backbone) {
            return Err(corrupt("parameter count does not match the backbone"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Adam with bias correction. Moments are kept in `f32`.
struct Adam<'a> {
    config: &'a OptimizerConfig,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam<'_> {
    fn step(&mut self, t: u64, grads: &[f32]) -> Vec<f32> {
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t as f64);
        let bc2 = 1.0 - c.beta2.powf(t as f64);
        grads
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                let g = g as f64;
                *m = (c.beta1 * *m as f64 + (1.0 - c.beta1) * g) as f32;
                *v = (c.beta2 * *v as f64 + (1.0 - c.beta2) * g * g) as f32;
                let mhat = *m as f64 / bc1;
                let vhat = *v as f64 / bc2;
                (-c.lr * mhat / (vhat.sqrt() + c.eps)) as f32
            })
            .collect()
    }
}

/// Runs `f` over `items` on up to `threads` scoped threads, keeping order.
pub(crate) fn map_ordered<T: Sync, R: Send>(
    threads: usize,
    items: &[T],
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Simulated acquisition `y = A x (+ noise)` for one sequence.
pub fn simulate_acquisition(
    x: &ImageSequence,
    spec: &MaskSpec,
    noise_sigma: f64,
    noise_seed: u64,
) -> Result<(KTSequence, Masks)> {
    let (t, h, w) = x.dims();
    let masks = sample_masks(spec, t, h, w)?;
    let y = forward(x, &masks)?;
    let y = if noise_sigma > 0.0 {
        add_noise(
            &y,
            &masks,
            noise_sigma,
            &mut rng_from(noise_seed, &[rng::TAG_NOISE]),
        )?
    } else {
        y
    };
    Ok((y, masks))
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub terms: Vec<(&'static str, f64)>,
}

/// Options that do not affect results.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

pub fn train(config: &TrainConfig) -> Result<Checkpoint> {
    train_with(config, RunOptions::default(), &mut |_| {})
}

/// Trains from scratch. `on_step` is called after every optimizer step.
pub fn train_with(
    config: &TrainConfig,
    options: RunOptions,
    on_step: &mut dyn FnMut(&StepReport),
) -> Result<Checkpoint> {
    config.validate()?;
    let (manifest, dir) = DatasetManifest::load(&config.dataset_manifest)?;
    let index_of = |e: &ManifestEntry| {
        manifest
            .entries
            .iter()
            .position(|m| m.id == e.id)
            .expect("entry from manifest")
    };
    let train_set: Vec<(usize, ImageSequence)> = load_split(&manifest, &dir, Split::Train)?
        .into_iter()
        .map(|(e, x)| (index_of(&e), x))
        .collect();
    if train_set.is_empty() {
        return Err(Error::config("the manifest has no training entries"));
    }
    let has_test = manifest.split(Split::Test).next().is_some();
    let loss_cfg = config.effective_loss();

    let mut network = Network::init(
        config.backbone.clone(),
        &mut rng_from(config.seed, &[rng::TAG_INIT]),
    )?;
    let n = network.params.count();
    let mut adam = Adam {
        config: &config.optimizer,
        m: vec![0.0; n],
        v: vec![0.0; n],
    };
    let mut ckpt = Checkpoint {
        config: config.clone(),
        epoch: 0,
        step: 0,
        params: network.params.to_flat(),
        adam_m: Vec::new(),
        adam_v: Vec::new(),
        best: None,
        history: Vec::new(),
    };

    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_from(
            config.seed,
            &[rng::TAG_SHUFFLE, epoch as u64],
        ));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let net = &network;
            let outputs = map_ordered(options.threads, batch, |&i| {
                let (idx, x) = &train_set[i];
                let idx = *idx as u64;
                let acq_tags: &[u64] = if config.fixed_masks {
                    &[idx]
                } else {
                    &[epoch as u64, idx]
                };
                let mut tags = vec![rng::TAG_MASK];
                tags.extend_from_slice(acq_tags);
                let spec = config.mask_spec.with_seed(derive_seed(config.seed, &tags));
                tags[0] = rng::TAG_NOISE;
                let (y, masks) = simulate_acquisition(
                    x,
                    &spec,
                    config.noise_sigma,
                    derive_seed(config.seed, &tags),
                )?;
                let mut rng = rng_from(config.seed, &[rng::TAG_GROUP, step, idx]);
                let gt = (loss_cfg.kind == LossKind::Supervised).then_some(x);
                compute_loss(net, &loss_cfg, &y, &masks, gt, &mut rng).map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "epoch {epoch}, step {step}, entry {}: {what}",
                        manifest.entries[idx as usize].id
                    )),
                    other => other,
                })
            });
            let mut grads = vec![0.0f64; n];
            let mut loss = 0.0;
            let mut terms: Vec<(&'static str, f64)> = Vec::new();
            for out in outputs {
                let out = out?;
                loss += out.value;
                for (g, v) in grads.iter_mut().zip(&out.grads) {
                    *g += *v as f64;
                }
                for (name, v) in out.terms {
                    match terms.iter_mut().find(|(n, _)| *n == name) {
                        Some(t) => t.1 += v,
                        None => terms.push((name, v)),
                    }
                }
            }
            let b = batch.len() as f64;
            loss /= b;
            terms.iter_mut().for_each(|t| t.1 /= b);
            let grads: Vec<f32> = grads.iter().map(|g| (g / b) as f32).collect();
            let update = adam.step(step, &grads);
            network.params.apply_update(&update);
            if !network.params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters after epoch {epoch}, step {step}"
                )));
            }
            epoch_loss += loss * b;
            on_step(&StepReport {
                epoch,
                step,
                loss,
                terms,
            });
        }

        ckpt.epoch = epoch + 1;
        ckpt.step = step;
        ckpt.history.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / train_set.len() as f64,
        });
        let last = epoch + 1 == config.epochs;
        if (epoch + 1) % config.eval_every == 0 || last {
            ckpt.params = network.params.to_flat();
            ckpt.adam_m = adam.m.clone();
            ckpt.adam_v = adam.v.clone();
            if has_test {
                let report = evaluate_network(
                    &network,
                    config,
                    &manifest,
                    &dir,
                    &EvalOptions {
                        split: Split::Test,
                        mode: ReconstructionMode::Direct,
                        seed: config.seed,
                        threads: options.threads,
                    },
                )?;
                let psnr = report.aggregate.psnr.mean;
                if ckpt.best.as_ref().is_none_or(|b| psnr > b.psnr) {
                    ckpt.best = Some(BestRecord { epoch, step, psnr });
                }
            }
            if !config.checkpoint_dir.as_os_str().is_empty() {
                fs::create_dir_all(&config.checkpoint_dir)
                    .map_err(|e| Error::io(&config.checkpoint_dir, e))?;
                ckpt.save(&config.checkpoint_dir.join(CHECKPOINT_NAME))?;
            }
        }
    }
    Ok(ckpt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionMode {
    Direct,
    /// Average over this many random input splits.
    TssduStar(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub split: Split,
    pub mode: ReconstructionMode,
    /// Seeds the test acquisitions; equal seeds give every method the same
    /// measurements.
    pub seed: u64,
    pub threads: usize,
}

/// Measurements for the entry at manifest position `index`: its stored mask
/// when present, otherwise one drawn from `(seed, index)`.
pub fn test_acquisition(
    config: &TrainConfig,
    entry: &ManifestEntry,
    index: usize,
    x: &ImageSequence,
    dir: &Path,
    seed: u64,
) -> Result<(KTSequence, Masks)> {
    let idx = index as u64;
    let masks = match &entry.mask_path {
        Some(p) => load_masks(&dir.join(p))?,
        None => {
            let spec = entry.mask_spec.as_ref().unwrap_or(&config.mask_spec);
            let (t, h, w) = x.dims();
            sample_masks(
                &spec.with_seed(derive_seed(seed, &[rng::TAG_EVAL, rng::TAG_MASK, idx])),
                t,
                h,
                w,
            )?
        }
    };
    let y = forward(x, &masks)?;
    let y = if config.noise_sigma > 0.0 {
        let mut r = rng_from(seed, &[rng::TAG_EVAL, rng::TAG_NOISE, idx]);
        add_noise(&y, &masks, config.noise_sigma, &mut r)?
    } else {
        y
    };
    Ok((y, masks))
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    dir: &Path,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    evaluate_network(
        &checkpoint.network()?,
        &checkpoint.config,
        manifest,
        dir,
        options,
    )
}

/// Reconstructions of every entry in the split, paired with the entries.
pub fn reconstruct_split(
    network: &Network,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    dir: &Path,
    options: &EvalOptions,
) -> Result<Vec<(ManifestEntry, ImageSequence, ImageSequence)>> {
    let entries = load_split(manifest, dir, options.split)?;
    let results = map_ordered(options.threads, &entries, |(entry, x)| {
        let index = manifest
            .entries
            .iter()
            .position(|m| m.id == entry.id)
            .expect("entry from manifest");
        let (y, masks) = test_acquisition(config, entry, index, x, dir, options.seed)?;
        let xhat = match options.mode {
            ReconstructionMode::Direct => reconstruct_with(network, &y, &masks)?,
            ReconstructionMode::TssduStar(n) => {
                let mut r = rng_from(options.seed, &[rng::TAG_EVAL, rng::TAG_SPLIT, index as u64]);
                tssdu_star_reconstruct(
                    network,
                    config.loss.ssdu_input_fraction,
                    &y,
                    &masks,
                    n,
                    &mut r,
                )?
            }
        };
        Ok((entry.clone(), x.clone(), xhat))
    });
    results.into_iter().collect()
}

pub fn evaluate_network(
    network: &Network,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    dir: &Path,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    let rows = reconstruct_split(network, config, manifest, dir, options)?
        .into_iter()
        .map(|(entry, x, xhat)| SequenceMetrics::compute(entry.id, &xhat, &x))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::new(rows)
}

/// Root-mean-square of the noiseless training measurements, averaged over
/// the training split (masks as drawn in the first epoch). Useful for setting
/// `noise_sigma` relative to the signal.
pub fn mean_measurement_rms(config: &TrainConfig) -> Result<f64> {
    let (manifest, dir) = DatasetManifest::load(&config.dataset_manifest)?;
    let entries = load_split(&manifest, &dir, Split::Train)?;
    if entries.is_empty() {
        return Err(Error::config("the manifest has no training entries"));
    }
    let mut total = 0.0;
    for (entry, x) in &entries {
        let idx = manifest
            .entries
            .iter()
            .position(|m| m.id == entry.id)
            .expect("entry from manifest") as u64;
        let tags: &[u64] = if config.fixed_masks {
            &[rng::TAG_MASK, idx]
        } else {
            &[rng::TAG_MASK, 0, idx]
        };
        let spec = config.mask_spec.with_seed(derive_seed(config.seed, tags));
        let (y, masks) = simulate_acquisition(x, &spec, 0.0, 0)?;
        total += measurement_rms(&y, &masks);
    }
    Ok(total / entries.len() as f64)
}

/// Parameters drawn exactly as at the start of training.
pub fn initial_params(config: &TrainConfig) -> Result<Params> {
    init_params(
        &config.backbone,
        &mut rng_from(config.seed, &[rng::TAG_INIT]),
    )
}
