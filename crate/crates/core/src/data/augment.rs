//! Training-time augmentation: horizontal flip, then a scale jitter
//! implemented as "resize so the short side lands in a configured range,
//! crop a fixed square at a random offset". Boxes ride along with every
//! pixel transform and are clipped to the visible window; a clip whose
//! target box leaves the window entirely is dropped from the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::clip_to_unit;
use crate::data::{BoxCwh, Clip, Detection};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Inclusive bounds for the resized edge, in pixels.
    pub short_side: (usize, usize),
    /// Square crop edge; also the output frame size.
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> AugmentConfig {
        AugmentConfig { flip_prob: 0.5, short_side: (36, 44), crop: 32 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        let (lo, hi) = self.short_side;
        if lo > hi || lo == 0 {
            return Err(Error::Config(format!("short_side range {lo}..={hi} is empty")));
        }
        if self.crop == 0 || self.crop > lo {
            return Err(Error::Config(format!(
                "crop {} must be positive and fit the smallest resize {lo}",
                self.crop
            )));
        }
        Ok(())
    }
}

fn frame_dims<S: Scalar>(clip: &Clip<S>) -> Result<(usize, usize, usize, usize)> {
    let shape = clip.frames.shape();
    if shape.len() != 4 {
        return Err(Error::shape("augment", format!("frames must be [C,T,H,W], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn flip_box(b: &BoxCwh) -> BoxCwh {
    BoxCwh { cx: 1.0 - b.cx, ..*b }
}

/// Mirrors pixels and boxes across the vertical centerline.
pub fn hflip<S: Scalar>(clip: &Clip<S>) -> Result<Clip<S>> {
    let (c, t, h, w) = frame_dims(clip)?;
    let src = clip.frames.to_vec();
    let mut out = vec![S::zero(); src.len()];
    for ci in 0..c {
        for fr in 0..t {
            for y in 0..h {
                let row = ((ci * t + fr) * h + y) * w;
                for x in 0..w {
                    out[row + x] = src[row + (w - 1 - x)];
                }
            }
        }
    }
    Ok(Clip {
        id: clip.id,
        frames: Tensor::from_vec(&[c, t, h, w], out)?,
        fps: clip.fps,
        detections: clip
            .detections
            .iter()
            .map(|d| Detection { bbox: flip_box(&d.bbox), ..*d })
            .collect(),
        target: clip.target.map(|tg| crate::data::NaoTarget { bbox: flip_box(&tg.bbox), ..tg }),
    })
}

/// Maps a normalized box through "resize to `s`, crop `crop` pixels at
/// `(ox, oy)`", clipping to the window. None when nothing remains visible.
fn crop_box(b: &BoxCwh, s: usize, ox: usize, oy: usize, crop: usize) -> Option<BoxCwh> {
    let (x1, y1, x2, y2) = b.corners();
    let map_x = |v: f64| (v * s as f64 - ox as f64) / crop as f64;
    let map_y = |v: f64| (v * s as f64 - oy as f64) / crop as f64;
    clip_to_unit(&BoxCwh::from_corners(map_x(x1), map_y(y1), map_x(x2), map_y(y2)))
}

/// Bilinear resize of square frames to `s`, then a `crop`-pixel square crop
/// at offset `(ox, oy)` in resized coordinates. Computed in one pass, so
/// only visible pixels are interpolated. Returns None when the target box
/// falls outside the window; detections outside are dropped individually.
pub fn resize_crop<S: Scalar>(
    clip: &Clip<S>,
    s: usize,
    ox: usize,
    oy: usize,
    crop: usize,
) -> Result<Option<Clip<S>>> {
    let (c, t, h, w) = frame_dims(clip)?;
    if h != w {
        return Err(Error::shape("augment", format!("frames must be square, got {h}x{w}")));
    }
    if crop == 0 || s < crop || ox + crop > s || oy + crop > s {
        return Err(Error::Config(format!(
            "crop window {crop} at ({ox}, {oy}) does not fit a {s}-pixel resize"
        )));
    }
    let target = match clip.target {
        Some(tg) => match crop_box(&tg.bbox, s, ox, oy, crop) {
            Some(bbox) => Some(crate::data::NaoTarget { bbox, ..tg }),
            None => return Ok(None),
        },
        None => None,
    };
    let src = clip.frames.to_vec();
    let mut out = vec![S::zero(); c * t * crop * crop];
    let scale = h as f64 / s as f64;
    for ci in 0..c {
        for fr in 0..t {
            let plane = (ci * t + fr) * h * w;
            for y in 0..crop {
                let sy = (((y + oy) as f64 + 0.5) * scale - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let fy = S::cast_from(sy - y0 as f64);
                for x in 0..crop {
                    let sx = (((x + ox) as f64 + 0.5) * scale - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = sx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let fx = S::cast_from(sx - x0 as f64);
                    let v00 = src[plane + y0 * w + x0];
                    let v01 = src[plane + y0 * w + x1];
                    let v10 = src[plane + y1 * w + x0];
                    let v11 = src[plane + y1 * w + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[((ci * t + fr) * crop + y) * crop + x] = top + (bot - top) * fy;
                }
            }
        }
    }
    let detections = clip
        .detections
        .iter()
        .filter_map(|d| {
            crop_box(&d.bbox, s, ox, oy, crop).map(|bbox| Detection { bbox, ..*d })
        })
        .collect();
    Ok(Some(Clip {
        id: clip.id,
        frames: Tensor::from_vec(&[c, t, crop, crop], out)?,
        fps: clip.fps,
        detections,
        target,
    }))
}

/// Samples one augmentation (flip coin, resize edge, crop offset) and
/// applies it. The draw order is fixed, so a seeded rng reproduces the
/// exact transform sequence.
pub fn augment<S: Scalar>(
    clip: &Clip<S>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Option<Clip<S>>> {
    cfg.validate()?;
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let s = rng.gen_range(cfg.short_side.0..=cfg.short_side.1);
    let max_off = s - cfg.crop;
    let ox = rng.gen_range(0..=max_off);
    let oy = rng.gen_range(0..=max_off);
    if flip {
        resize_crop(&hflip(clip)?, s, ox, oy, cfg.crop)
    } else {
        resize_crop(clip, s, ox, oy, cfg.crop)
    }
}
