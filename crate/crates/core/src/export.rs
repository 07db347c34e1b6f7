//! Magnitude videos as looping GIFs or numbered PNG frames.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::codecs::png::PngEncoder;
use image::{Delay, ExtendedColorType, Frame, ImageEncoder, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::data::load_sequence;
use crate::error::{Error, Result};
use crate::group::{act, sample_group, GroupConfig};
use crate::rng::{self, rng_from};
use crate::video::ImageSequence;

pub const GIF_FPS: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoFormat {
    Gif,
    PngFrames,
}

/// Magnitudes scaled to `0..=255` by the sequence maximum, one buffer per
/// frame.
pub fn gray_frames(x: &ImageSequence) -> Vec<Vec<u8>> {
    let peak = x.max_magnitude();
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    x.data()
        .outer_iter()
        .map(|frame| {
            frame
                .iter()
                .map(|v| (v.norm() as f64 * scale).round().clamp(0.0, 255.0) as u8)
                .collect()
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn gif_bytes(x: &ImageSequence) -> Result<Vec<u8>> {
    let (_, h, w) = x.dims();
    let mut out = Vec::new();
    {
        let mut enc = GifEncoder::new_with_speed(&mut out, 10);
        enc.set_repeat(Repeat::Infinite)?;
        for gray in gray_frames(x) {
            let rgba: Vec<u8> = gray.iter().flat_map(|&g| [g, g, g, 255]).collect();
            let img = RgbaImage::from_raw(w as u32, h as u32, rgba).expect("buffer size matches");
            enc.encode_frame(Frame::from_parts(
                img,
                0,
                0,
                Delay::from_numer_denom_ms(1000, GIF_FPS),
            ))?;
        }
    }
    Ok(out)
}

pub fn png_bytes(gray: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(gray, w as u32, h as u32, ExtendedColorType::L8)?;
    Ok(out)
}

/// Writes a GIF at `path`, or `frame_0000.png`... inside the directory
/// `path`. Returns the files written.
pub fn export_video(x: &ImageSequence, path: &Path, format: VideoFormat) -> Result<Vec<PathBuf>> {
    match format {
        VideoFormat::Gif => {
            write_file(path, &gif_bytes(x)?)?;
            Ok(vec![path.to_path_buf()])
        }
        VideoFormat::PngFrames => {
            fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            let (_, h, w) = x.dims();
            gray_frames(x)
                .iter()
                .enumerate()
                .map(|(t, gray)| {
                    let file = path.join(format!("frame_{t:04}.png"));
                    write_file(&file, &png_bytes(gray, h, w)?)?;
                    Ok(file)
                })
                .collect()
        }
    }
}

/// Writes `original.gif`, `k` random spatial warps and `k` random temporal
/// transforms of the sequence. Warps use the spatial factors enabled in
/// `config`; with none enabled they equal the original.
pub fn demo_transforms(
    sequence: &Path,
    config: &GroupConfig,
    k: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let x = load_sequence(sequence)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let t = x.frames();
    let spatial = GroupConfig {
        use_temporal: false,
        ..config.clone()
    };
    let temporal = GroupConfig {
        use_rotation: false,
        use_cpab: false,
        use_temporal: true,
        ..config.clone()
    };
    let mut written = export_video(&x, &out_dir.join("original.gif"), VideoFormat::Gif)?;
    for (name, cfg, stream) in [("warp", &spatial, 0u64), ("time", &temporal, 1)] {
        for i in 0..k {
            let g = sample_group(
                cfg,
                t,
                &mut rng_from(seed, &[rng::TAG_GROUP, stream, i as u64]),
            );
            let y = act(&g, &x)?;
            written.extend(export_video(
                &y,
                &out_dir.join(format!("{name}_{i}.gif")),
                VideoFormat::Gif,
            )?);
        }
    }
    Ok(written)
}
