//! Renders a clip frame with prediction and ground-truth boxes burned in,
//! as a binary portable pixmap (P6).

use std::fs;
use std::path::Path;

use crate::data::{BoxCwh, Clip};
use crate::error::{Error, Result};
use crate::model::StaPrediction;
use crate::scalar::Scalar;

pub const PRED_COLOR: [u8; 3] = [239, 68, 68];
pub const GT_COLOR: [u8; 3] = [34, 197, 94];

/// Extracts frame `t` of a `[C, T, H, W]` clip tensor as 8-bit RGB.
/// Single-channel input is replicated to gray; anything else must have
/// three channels.
pub fn frame_to_rgb<S: Scalar>(clip: &Clip<S>, t: usize) -> Result<(usize, usize, Vec<u8>)> {
    let shape = clip.frames.shape();
    if shape.len() != 4 {
        return Err(Error::shape("frame_to_rgb", format!("expected [C,T,H,W], got {shape:?}")));
    }
    let [c, n_t, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    if t >= n_t {
        return Err(Error::contract("frame_to_rgb", format!("frame {t} of {n_t}")));
    }
    if c != 1 && c != 3 {
        return Err(Error::shape("frame_to_rgb", format!("need 1 or 3 channels, got {c}")));
    }
    let data = clip.frames.to_vec();
    let plane = h * w;
    let at = |ch: usize, y: usize, x: usize| {
        let v = data[((ch * n_t) + t) * plane + y * w + x].cast_f64();
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    let mut rgb = Vec::with_capacity(plane * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                rgb.push(at(if c == 3 { ch } else { 0 }, y, x));
            }
        }
    }
    Ok((w, h, rgb))
}

fn put(rgb: &mut [u8], w: usize, x: usize, y: usize, color: [u8; 3]) {
    let at = (y * w + x) * 3;
    rgb[at..at + 3].copy_from_slice(&color);
}

/// Draws a one-pixel box border. Unit coordinates map to the pixel grid;
/// edges are clamped so out-of-frame boxes stay drawable.
pub fn draw_box(rgb: &mut [u8], w: usize, h: usize, bbox: &BoxCwh, color: [u8; 3]) {
    let (x1, y1, x2, y2) = bbox.corners();
    let px = |v: f64, n: usize| ((v * n as f64).round() as isize).clamp(0, n as isize - 1) as usize;
    let (x1, x2) = (px(x1, w), px(x2, w));
    let (y1, y2) = (px(y1, h), px(y2, h));
    for x in x1..=x2 {
        put(rgb, w, x, y1, color);
        put(rgb, w, x, y2, color);
    }
    for y in y1..=y2 {
        put(rgb, w, x1, y, color);
        put(rgb, w, x2, y, color);
    }
}

/// Binary PPM bytes for an 8-bit RGB buffer.
pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != w * h * 3 {
        return Err(Error::shape(
            "encode_ppm",
            format!("buffer holds {} bytes, {}x{} RGB needs {}", rgb.len(), w, h, w * h * 3),
        ));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Renders the last observed frame with every prediction box and, when the
/// clip is annotated, the ground-truth box on top. Returns the PPM bytes.
pub fn render_overlay<S: Scalar>(clip: &Clip<S>, preds: &[StaPrediction]) -> Result<Vec<u8>> {
    let t = clip.frames.shape()[1] - 1;
    let (w, h, mut rgb) = frame_to_rgb(clip, t)?;
    for p in preds {
        draw_box(&mut rgb, w, h, &p.bbox, PRED_COLOR);
    }
    if let Some(target) = clip.target {
        draw_box(&mut rgb, w, h, &target.bbox, GT_COLOR);
    }
    encode_ppm(w, h, &rgb)
}

/// Renders and writes the overlay in one step.
pub fn write_overlay<S: Scalar>(clip: &Clip<S>, preds: &[StaPrediction], path: &Path) -> Result<()> {
    let bytes = render_overlay(clip, preds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NaoTarget;
    use crate::tensor::Tensor;

    fn flat_clip(value: f64) -> Clip<f64> {
        Clip {
            id: 0,
            frames: Tensor::full(&[1, 2, 4, 4], value).unwrap(),
            fps: 4.0,
            detections: Vec::new(),
            target: None,
        }
    }

    #[test]
    fn ppm_header_and_size() {
        let bytes = render_overlay(&flat_clip(0.5), &[]).unwrap();
        assert!(bytes.starts_with(b"P6\n4 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 4 * 4 * 3);
        // 0.5 maps to 128 everywhere.
        assert!(bytes[11..].iter().all(|b| *b == 128));
    }

    #[test]
    fn ground_truth_box_lands_on_expected_pixels() {
        let mut clip = flat_clip(0.0);
        clip.target = Some(NaoTarget {
            bbox: BoxCwh::new(0.5, 0.5, 0.5, 0.5),
            noun: 0,
            verb: 0,
            ttc: 1.0,
        });
        let bytes = render_overlay(&clip, &[]).unwrap();
        let rgb = &bytes[11..];
        let pixel = |x: usize, y: usize| {
            let at = (y * 4 + x) * 3;
            [rgb[at], rgb[at + 1], rgb[at + 2]]
        };
        // Corners (0.25, 0.25) and (0.75, 0.75) round to pixels 1 and 3.
        assert_eq!(pixel(1, 1), GT_COLOR);
        assert_eq!(pixel(3, 3), GT_COLOR);
        assert_eq!(pixel(2, 2), [0, 0, 0], "interior stays untouched");
    }

    #[test]
    fn prediction_sits_under_ground_truth() {
        let mut clip = flat_clip(0.0);
        let bbox = BoxCwh::new(0.5, 0.5, 0.5, 0.5);
        clip.target = Some(NaoTarget { bbox, noun: 0, verb: 0, ttc: 1.0 });
        let pred = StaPrediction { bbox, noun: 0, verb: 0, ttc: 1.0, confidence: 0.9, roi: None };
        let bytes = render_overlay(&clip, &[pred]).unwrap();
        let rgb = &bytes[11..];
        // Same box: ground truth drawn last wins the contested pixels.
        assert_eq!([rgb[(1 * 4 + 1) * 3], rgb[(1 * 4 + 1) * 3 + 1], rgb[(1 * 4 + 1) * 3 + 2]], GT_COLOR);
    }

    #[test]
    fn out_of_frame_boxes_clamp_instead_of_panicking() {
        let clip = flat_clip(1.0);
        let pred = StaPrediction {
            bbox: BoxCwh::new(0.02, 0.98, 0.3, 0.3),
            noun: 0,
            verb: 0,
            ttc: 1.0,
            confidence: 0.5,
            roi: None,
        };
        let bytes = render_overlay(&clip, &[pred]).unwrap();
        assert_eq!(bytes.len(), 11 + 48);
    }

    #[test]
    fn rejects_two_channel_frames() {
        let clip = Clip::<f64> {
            id: 0,
            frames: Tensor::full(&[2, 2, 4, 4], 0.0).unwrap(),
            fps: 4.0,
            detections: Vec::new(),
            target: None,
        };
        assert!(render_overlay(&clip, &[]).is_err());
    }
}
