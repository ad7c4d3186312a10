//! Deterministic synthetic clips for the next-active-object task.
//!
//! Each clip shows a handful of static colored rectangles (the objects) and
//! a small white "hand" marker moving on a straight line toward one of
//! them. Everything the model must predict is recoverable from pixels:
//!
//! * noun id: encoded in the target rectangle's fill color,
//! * verb id: a fixed function of (noun id, approach direction),
//! * box: the rectangle the hand is heading for,
//! * time to contact: remaining distance over per-frame speed, always an
//!   integer number of frames past the last observed one, divided by fps.
//!
//! Generation is a pure function of `(seed, clip index, config)`, which is
//! what makes dataset bytes reproducible and parallel generation safe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoxCwh, Clip, Dataset, Detection, NaoTarget};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Square frame edge in pixels.
    pub frame_size: usize,
    /// Observed frames per clip.
    pub clip_len: usize,
    pub fps: f64,
    pub n_nouns: usize,
    pub n_verbs: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Uniform noise amplitude added to detection box coordinates,
    /// in normalized units. 0 reproduces the rendered boxes exactly.
    pub jitter: f64,
    /// Frames between the last observed frame and hand/object contact,
    /// inclusive bounds. Together with `fps` this fixes the range of the
    /// time-to-contact label.
    pub gap_range: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            frame_size: 32,
            clip_len: 8,
            fps: 4.0,
            n_nouns: 4,
            n_verbs: 4,
            min_objects: 2,
            max_objects: 3,
            jitter: 0.0,
            gap_range: (2, 8),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 16 {
            return Err(Error::Config(format!(
                "frame_size {} too small to draw distinct objects",
                self.frame_size
            )));
        }
        if self.clip_len < 2 {
            return Err(Error::Config("clip_len must be at least 2".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.n_nouns < 2 || self.n_nouns > 16 {
            return Err(Error::Config(format!(
                "n_nouns {} outside the 2..=16 range the color code supports",
                self.n_nouns
            )));
        }
        if self.n_verbs < 2 {
            return Err(Error::Config("n_verbs must be at least 2".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter < 0.5) {
            return Err(Error::Config(format!("jitter {} outside [0, 0.5)", self.jitter)));
        }
        let (lo, hi) = self.gap_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("gap_range {lo}..={hi} is empty or starts at 0")));
        }
        // Keep the time-to-contact label strictly above the evaluation
        // threshold of a quarter second and within two seconds, so the
        // label distribution straddles nothing it should not.
        let delta_lo = lo as f64 / self.fps;
        let delta_hi = hi as f64 / self.fps;
        if !(delta_lo > 0.25 && delta_hi <= 2.0) {
            return Err(Error::Config(format!(
                "gap_range {lo}..={hi} at {} fps gives time-to-contact in [{delta_lo}, {delta_hi}], \
                 needs (0.25, 2.0]",
                self.fps
            )));
        }
        Ok(())
    }
}

/// Fill color assigned to a noun id: a green ramp over a fixed red/blue
/// base, far enough apart that nearest-neighbor lookup on one pixel
/// recovers the id.
pub fn noun_fill(noun: usize, n_nouns: usize) -> [f64; 3] {
    let g = 0.2 + 0.75 * (noun as f64 + 0.5) / n_nouns as f64;
    [0.6, g, 0.25]
}

/// Inverse of [`noun_fill`] by nearest green component.
pub fn noun_from_fill(rgb: [f64; 3], n_nouns: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for n in 0..n_nouns {
        let d = (noun_fill(n, n_nouns)[1] - rgb[1]).abs();
        if d < best_d {
            best_d = d;
            best = n;
        }
    }
    best
}

/// Approach directions, unit steps in (dx, dy) pixel space.
const DIRECTIONS: [(f64, f64); 4] = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];

/// Verb label as a function of what is approached and from where.
pub fn verb_for(noun: usize, direction: usize, n_verbs: usize) -> usize {
    (noun + direction) % n_verbs
}

struct PlacedObject {
    /// Pixel rect [x0, y0, w, h], integers.
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    noun: usize,
}

impl PlacedObject {
    fn overlaps(&self, o: &PlacedObject, margin: usize) -> bool {
        let a_x1 = self.x0 + self.w + margin;
        let a_y1 = self.y0 + self.h + margin;
        let b_x1 = o.x0 + o.w + margin;
        let b_y1 = o.y0 + o.h + margin;
        self.x0 < b_x1 && o.x0 < a_x1 && self.y0 < b_y1 && o.y0 < a_y1
    }

    fn center_px(&self) -> (f64, f64) {
        (self.x0 as f64 + self.w as f64 / 2.0, self.y0 as f64 + self.h as f64 / 2.0)
    }

    fn to_box(&self, frame: usize) -> BoxCwh {
        let f = frame as f64;
        let (cx, cy) = self.center_px();
        BoxCwh::new(cx / f, cy / f, self.w as f64 / f, self.h as f64 / f)
    }
}

/// Generates `n_clips` clips. Clip `k` is derived from `seed ^ k`, so any
/// clip can be regenerated in isolation.
pub fn generate_synthetic<S: Scalar>(
    seed: u64,
    n_clips: usize,
    cfg: &SynthConfig,
) -> Result<Dataset<S>> {
    cfg.validate()?;
    let mut clips = Vec::with_capacity(n_clips);
    for k in 0..n_clips {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ k as u64);
        clips.push(generate_clip(k, cfg, &mut rng)?);
    }
    Ok(Dataset { fps: cfg.fps, n_nouns: cfg.n_nouns, n_verbs: cfg.n_verbs, clips })
}

fn generate_clip<S: Scalar>(id: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Clip<S>> {
    let fsz = cfg.frame_size;
    let t = cfg.clip_len;

    // Place objects disjointly by rejection sampling.
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let size_lo = (fsz / 6).max(4);
    let size_hi = fsz / 3;
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(n_obj);
    let mut attempts = 0;
    while objects.len() < n_obj {
        attempts += 1;
        if attempts > 500 {
            return Err(Error::Generation(format!(
                "could not place {n_obj} disjoint objects on a {fsz}x{fsz} frame"
            )));
        }
        let w = rng.gen_range(size_lo..=size_hi);
        let h = rng.gen_range(size_lo..=size_hi);
        let x0 = rng.gen_range(1..fsz - w - 1);
        let y0 = rng.gen_range(1..fsz - h - 1);
        let noun = rng.gen_range(0..cfg.n_nouns);
        let cand = PlacedObject { x0, y0, w, h, noun };
        if objects.iter().all(|o| !cand.overlaps(o, 1)) {
            objects.push(cand);
        }
    }

    // Pick the target and a feasible straight-line approach. The hand
    // starts near the frame border on the chosen side and reaches the
    // target center exactly `gap` frames after the last observed frame.
    let target_idx = rng.gen_range(0..objects.len());
    let gap = rng.gen_range(cfg.gap_range.0..=cfg.gap_range.1);
    let contact_frame = (t - 1 + gap) as f64;
    let (tcx, tcy) = objects[target_idx].center_px();
    let margin = 2.5;
    let mut chosen: Option<(usize, f64, f64, f64)> = None;
    let first_dir = rng.gen_range(0..DIRECTIONS.len());
    for probe in 0..DIRECTIONS.len() {
        let di = (first_dir + probe) % DIRECTIONS.len();
        let (dx, dy) = DIRECTIONS[di];
        // Distance from the target center back to the border the hand
        // starts from, along the reverse direction.
        let avail = if dx > 0.0 {
            tcx - margin
        } else if dx < 0.0 {
            fsz as f64 - margin - tcx
        } else if dy > 0.0 {
            tcy - margin
        } else {
            fsz as f64 - margin - tcy
        };
        let speed = avail / contact_frame;
        // Keep motion visible: at least a third of a pixel per frame.
        if speed >= 0.34 {
            let sx = tcx - dx * speed * contact_frame;
            let sy = tcy - dy * speed * contact_frame;
            chosen = Some((di, sx, sy, speed));
            break;
        }
    }
    let (dir, start_x, start_y, speed) = chosen.ok_or_else(|| {
        Error::Generation(format!(
            "no feasible approach direction for target at ({tcx:.1}, {tcy:.1}) on clip {id}"
        ))
    })?;

    // Render: background, rectangles, hand marker on top.
    let mut pixels = vec![S::cast_from(0.1); 3 * t * fsz * fsz];
    let put = |c: usize, fr: usize, y: usize, x: usize, v: f64, px: &mut Vec<S>| {
        px[((c * t + fr) * fsz + y) * fsz + x] = S::cast_from(v);
    };
    for fr in 0..t {
        for o in &objects {
            let fill = noun_fill(o.noun, cfg.n_nouns);
            for y in o.y0..o.y0 + o.h {
                for x in o.x0..o.x0 + o.w {
                    for (c, &v) in fill.iter().enumerate() {
                        put(c, fr, y, x, v, &mut pixels);
                    }
                }
            }
        }
        let (dx, dy) = DIRECTIONS[dir];
        let hx = (start_x + dx * speed * fr as f64).round() as isize;
        let hy = (start_y + dy * speed * fr as f64).round() as isize;
        for oy in -1isize..=1 {
            for ox in -1isize..=1 {
                let y = hy + oy;
                let x = hx + ox;
                if (0..fsz as isize).contains(&y) && (0..fsz as isize).contains(&x) {
                    for c in 0..3 {
                        put(c, fr, y as usize, x as usize, 1.0, &mut pixels);
                    }
                }
            }
        }
    }
    let frames = Tensor::from_vec(&[3, t, fsz, fsz], pixels)?;

    // Detections: every rendered box on every frame, optionally jittered,
    // clipped back into the unit square, detector score pinned to 1.
    let mut detections = Vec::with_capacity(t * objects.len());
    for fr in 0..t {
        for o in &objects {
            let exact = o.to_box(fsz);
            let bbox = if cfg.jitter > 0.0 {
                let mut j = || rng.gen_range(-cfg.jitter..=cfg.jitter);
                let noisy = BoxCwh::new(exact.cx + j(), exact.cy + j(), exact.w + j(), exact.h + j());
                match clip_to_unit(&noisy) {
                    Some(b) => b,
                    None => continue,
                }
            } else {
                exact
            };
            detections.push(Detection { frame: fr, bbox, noun: o.noun, score: 1.0 });
        }
    }

    let target_obj = &objects[target_idx];
    let target = NaoTarget {
        bbox: target_obj.to_box(fsz),
        noun: target_obj.noun,
        verb: verb_for(target_obj.noun, dir, cfg.n_verbs),
        ttc: gap as f64 / cfg.fps,
    };

    let mut clip = Clip { id, frames, fps: cfg.fps, detections, target: Some(target) };
    clip.canonicalize();
    Ok(clip)
}

/// Clips a box to the unit square, dropping it when nothing remains.
pub(crate) fn clip_to_unit(b: &BoxCwh) -> Option<BoxCwh> {
    let (x1, y1, x2, y2) = b.corners();
    let x1 = x1.max(0.0);
    let y1 = y1.max(0.0);
    let x2 = x2.min(1.0);
    let y2 = y2.min(1.0);
    if x2 - x1 > 1e-6 && y2 - y1 > 1e-6 {
        Some(BoxCwh::from_corners(x1, y1, x2, y2))
    } else {
        None
    }
}
