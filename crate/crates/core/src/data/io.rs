//! Dataset persistence. A dataset directory holds a `manifest` JSON file
//! describing every clip (detections, target, tensor path) and a `tensors/`
//! subdirectory with one frame tensor per clip. Writing is deterministic:
//! the same in-memory dataset always produces byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Clip, Dataset, Detection, NaoTarget};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClip {
    id: usize,
    frames: String,
    fps: f64,
    detections: Vec<Detection>,
    target: Option<NaoTarget>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    fps: f64,
    n_nouns: usize,
    n_verbs: usize,
    clips: Vec<ManifestClip>,
}

fn tensor_rel_path(k: usize) -> String {
    format!("tensors/clip_{k:05}.gt")
}

/// Writes `ds` under `dir`, creating it if needed. Existing files are
/// replaced, so regenerating with the same inputs leaves identical bytes.
pub fn write_dataset<S: Scalar>(ds: &Dataset<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("tensors")).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut clips = Vec::with_capacity(ds.clips.len());
    for (k, clip) in ds.clips.iter().enumerate() {
        let rel = tensor_rel_path(k);
        write_tensor(&dir.join(&rel), &clip.frames)?;
        clips.push(ManifestClip {
            id: clip.id,
            frames: rel,
            fps: clip.fps,
            detections: clip.detections.clone(),
            target: clip.target,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        fps: ds.fps,
        n_nouns: ds.n_nouns,
        n_verbs: ds.n_verbs,
        clips,
    };
    let path = dir.join("manifest");
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn check_clip<S: Scalar>(clip: &Clip<S>, n_nouns: usize, n_verbs: usize) -> Result<()> {
    let t = clip.frames.shape()[1];
    if !(clip.fps.is_finite() && clip.fps > 0.0) {
        return Err(Error::Data(format!("clip {}: fps {} must be positive", clip.id, clip.fps)));
    }
    for d in &clip.detections {
        d.bbox
            .validate()
            .map_err(|e| Error::Data(format!("clip {}: detection box: {e}", clip.id)))?;
        if d.frame >= t {
            return Err(Error::Data(format!(
                "clip {}: detection frame {} out of range for {t} frames",
                clip.id, d.frame
            )));
        }
        if d.noun >= n_nouns {
            return Err(Error::Data(format!("clip {}: detection noun {}", clip.id, d.noun)));
        }
        if !(d.score.is_finite() && d.score > 0.0 && d.score <= 1.0) {
            return Err(Error::Data(format!("clip {}: detection score {}", clip.id, d.score)));
        }
    }
    if let Some(tg) = &clip.target {
        tg.bbox
            .validate()
            .map_err(|e| Error::Data(format!("clip {}: target box: {e}", clip.id)))?;
        if tg.noun >= n_nouns || tg.verb >= n_verbs {
            return Err(Error::Data(format!(
                "clip {}: target labels ({}, {}) exceed vocab ({n_nouns}, {n_verbs})",
                clip.id, tg.noun, tg.verb
            )));
        }
        if !(tg.ttc.is_finite() && tg.ttc > 0.0) {
            return Err(Error::Data(format!("clip {}: target ttc {}", clip.id, tg.ttc)));
        }
    }
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`], validating the
/// manifest version and every box, label, and score on the way in.
pub fn read_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>> {
    let path = dir.join("manifest");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("manifest version {} (this build reads {MANIFEST_VERSION})", manifest.version),
        ));
    }
    if manifest.n_nouns == 0 || manifest.n_verbs == 0 {
        return Err(Error::format(path.display().to_string(), "noun and verb vocabularies must be non-empty"));
    }
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for mc in manifest.clips {
        let frames = read_tensor::<S>(&dir.join(&mc.frames))?;
        if frames.ndim() != 4 {
            return Err(Error::Data(format!(
                "clip {}: frames must be [C,T,H,W], got {:?}",
                mc.id,
                frames.shape()
            )));
        }
        let clip = Clip {
            id: mc.id,
            frames,
            fps: mc.fps,
            detections: mc.detections,
            target: mc.target,
        };
        check_clip(&clip, manifest.n_nouns, manifest.n_verbs)?;
        clips.push(clip);
    }
    Ok(Dataset {
        fps: manifest.fps,
        n_nouns: manifest.n_nouns,
        n_verbs: manifest.n_verbs,
        clips,
    })
}
