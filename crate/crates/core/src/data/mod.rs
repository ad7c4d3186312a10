//! Clip data model: boxes, detections, anticipation targets, and frame
//! sampling. The synthetic generator lives in [`synth`], augmentation in
//! [`augment`], and the on-disk dataset layout in [`io`].

pub mod augment;
pub mod io;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Axis-aligned box in normalized image coordinates, stored as center plus
/// size. Centers live in the unit square; width and height are positive and
/// at most 1. Corners may overhang the image after cropping; only the
/// center is constrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCwh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCwh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> BoxCwh {
        BoxCwh { cx, cy, w, h }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_center = (0.0..=1.0).contains(&self.cx) && (0.0..=1.0).contains(&self.cy);
        let ok_size = self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0;
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !(ok_center && ok_size && finite) {
            return Err(Error::Data(format!(
                "box out of range: cx={} cy={} w={} h={}",
                self.cx, self.cy, self.w, self.h
            )));
        }
        Ok(())
    }

    /// `(x1, y1, x2, y2)` corner form.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxCwh {
        BoxCwh { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// One detector output on one input frame. Scores are in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoxCwh,
    pub noun: usize,
    pub score: f64,
}

/// Ground-truth annotation for the next active object of a clip: where it
/// is, what it is, the verb of the upcoming interaction, and the time to
/// contact in seconds measured from the last observed frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaoTarget {
    #[serde(rename = "box")]
    pub bbox: BoxCwh,
    pub noun: usize,
    pub verb: usize,
    pub ttc: f64,
}

/// A training/evaluation sample: observed frames plus per-frame detections
/// and (for labeled clips) the anticipation target.
#[derive(Debug, Clone)]
pub struct Clip<S: Scalar = f64> {
    pub id: usize,
    /// Pixel tensor `[channels, frames, height, width]`, values in [0, 1].
    pub frames: Tensor<S>,
    pub fps: f64,
    pub detections: Vec<Detection>,
    pub target: Option<NaoTarget>,
}

impl<S: Scalar> Clip<S> {
    /// Sorts detections into a canonical order so a clip's byte
    /// representation does not depend on who produced the detection list.
    pub fn canonicalize(&mut self) {
        self.detections.sort_by(canonical_det_cmp);
    }
}

pub fn canonical_det_cmp(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    let key = |d: &Detection| {
        (
            d.frame,
            d.noun,
            d.bbox.cx.to_bits(),
            d.bbox.cy.to_bits(),
            d.bbox.w.to_bits(),
            d.bbox.h.to_bits(),
            d.score.to_bits(),
        )
    };
    key(a).cmp(&key(b))
}

/// An in-memory dataset plus the label-space sizes models need to agree on.
#[derive(Debug)]
pub struct Dataset<S: Scalar = f64> {
    pub fps: f64,
    pub n_nouns: usize,
    pub n_verbs: usize,
    pub clips: Vec<Clip<S>>,
}

/// Picks `clip_len` frame indices from a raw recording of `raw_len` frames,
/// one every `rate` frames, aligned so the last sampled frame is the last
/// raw frame (anticipation is anchored to the most recent observation).
/// Requires `raw_len >= clip_len * rate`.
///
/// `raw_len` 64, `clip_len` 16, `rate` 4 gives 3, 7, ..., 63.
pub fn sample_frames(raw_len: usize, clip_len: usize, rate: usize) -> Result<Vec<usize>> {
    if clip_len == 0 || rate == 0 {
        return Err(Error::Data(format!(
            "clip_len {clip_len} and rate {rate} must both be positive"
        )));
    }
    if raw_len < clip_len * rate {
        return Err(Error::Data(format!(
            "{raw_len} raw frames cannot cover {clip_len} samples at rate {rate} (needs {})",
            clip_len * rate
        )));
    }
    Ok((0..clip_len).map(|i| raw_len - 1 - (clip_len - 1 - i) * rate).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn end_aligned_sampling_oracle() {
        assert_eq!(
            sample_frames(64, 16, 4).unwrap(),
            (0..16).map(|i| 3 + 4 * i).collect::<Vec<_>>()
        );
        assert_eq!(sample_frames(8, 8, 1).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(sample_frames(10, 3, 2).unwrap(), vec![5, 7, 9]);
        // Exact fit works, one frame short does not.
        assert!(sample_frames(64, 16, 4).is_ok());
        assert!(sample_frames(63, 16, 4).is_err());
        assert!(sample_frames(10, 8, 2).is_err());
        assert!(sample_frames(10, 0, 1).is_err());
        assert!(sample_frames(10, 2, 0).is_err());
    }

    #[test]
    fn box_validation_bounds() {
        assert!(BoxCwh::new(0.5, 0.5, 0.2, 0.3).validate().is_ok());
        assert!(BoxCwh::new(0.0, 1.0, 1.0, 1.0).validate().is_ok());
        assert!(BoxCwh::new(-0.01, 0.5, 0.2, 0.2).validate().is_err());
        assert!(BoxCwh::new(0.5, 0.5, 0.0, 0.2).validate().is_err());
        assert!(BoxCwh::new(0.5, 0.5, 1.2, 0.2).validate().is_err());
        assert!(BoxCwh::new(f64::NAN, 0.5, 0.1, 0.2).validate().is_err());
    }

    #[test]
    fn corner_roundtrip() {
        let b = BoxCwh::new(0.4, 0.6, 0.2, 0.3);
        let (x1, y1, x2, y2) = b.corners();
        assert!((x1 - 0.3).abs() < 1e-12 && (x2 - 0.5).abs() < 1e-12);
        assert!((y1 - 0.45).abs() < 1e-12 && (y2 - 0.75).abs() < 1e-12);
        let back = BoxCwh::from_corners(x1, y1, x2, y2);
        assert!((back.cx - b.cx).abs() < 1e-12 && (back.h - b.h).abs() < 1e-12);
    }

    #[test]
    fn canonical_detection_order_is_input_independent() {
        let d = |frame, noun, cx: f64| Detection {
            frame,
            bbox: BoxCwh::new(cx, 0.5, 0.1, 0.1),
            noun,
            score: 1.0,
        };
        let mut a = vec![d(1, 0, 0.9), d(0, 1, 0.2), d(0, 0, 0.7), d(0, 0, 0.1)];
        let mut b = a.clone();
        b.reverse();
        a.sort_by(canonical_det_cmp);
        b.sort_by(canonical_det_cmp);
        assert_eq!(a, b);
        assert_eq!(a[0], d(0, 0, 0.1));
        assert_eq!(a[3], d(1, 0, 0.9));
    }
}
