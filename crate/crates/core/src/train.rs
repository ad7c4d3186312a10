//! Training loop, optimizer, checkpointing, and the evaluation driver
//! that turns a model plus a dataset into the protocol report.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{clip_loss, LossConfig, LossParts};
use crate::metrics::{evaluate_records, EvalRecord, EvalSummary, GtRecord};
use crate::model::{ModelConfig, OutputMode, StaModel};
use crate::scalar::{s, Scalar};
use crate::tensor::{decode_tensor, encode_tensor, Tensor};

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Base learning rate; the schedule decays it to zero.
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Classic momentum; zero keeps the plain update rule.
    pub momentum: f64,
    pub seed: u64,
    /// Random flip, rescale, and crop on every training clip.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 60,
            lr: 0.1,
            batch_size: 4,
            weight_decay: 1e-6,
            momentum: 0.0,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Everything a run needs, and everything a checkpoint or report records.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }
}

/// Half-cosine decay from `base` at step 0 to zero at `total_steps`,
/// anchored to optimizer steps. No warmup.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> f64 {
    assert!(total_steps > 0, "schedule needs a positive horizon");
    let t = (step.min(total_steps) as f64) / total_steps as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Stochastic gradient descent with decoupled-from-nothing weight decay
/// folded into the gradient: `p <- p - lr * (g + wd * p)`. With momentum
/// `m`, the folded gradient feeds a velocity buffer instead.
#[derive(Debug)]
pub struct Sgd<S: Scalar> {
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(weight_decay: f64, momentum: f64) -> Sgd<S> {
        Sgd { weight_decay, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &[(String, Tensor<S>)], lr: f64) -> Result<()> {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect();
        }
        let lr_s = s::<S>(lr);
        let wd = s::<S>(self.weight_decay);
        let m = s::<S>(self.momentum);
        for (i, (_, p)) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut data = p.to_vec();
            let vel = &mut self.velocity[i];
            for ((x, g), v) in data.iter_mut().zip(&grad).zip(vel.iter_mut()) {
                let folded = *g + wd * *x;
                if self.momentum == 0.0 {
                    *x -= lr_s * folded;
                } else {
                    *v = m * *v + folded;
                    *x -= lr_s * *v;
                }
            }
            p.set_data(&data)?;
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 8] = b"GCKPT1\0\0";

/// Writes a checkpoint: magic, the run config as TOML, a manifest of
/// parameter names with byte ranges, then the tensors themselves.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    cfg_toml: &str,
    params: &[(String, Tensor<S>)],
) -> Result<()> {
    let mut manifest = String::new();
    let mut blobs = Vec::new();
    for (name, t) in params {
        if name.contains(char::is_whitespace) || name.is_empty() {
            return Err(Error::contract("save_checkpoint", format!("bad parameter name {name:?}")));
        }
        let blob = encode_tensor(t);
        manifest.push_str(&format!("{name} {} {}\n", blobs.len(), blob.len()));
        blobs.extend_from_slice(&blob);
    }
    let mut out = Vec::with_capacity(16 + cfg_toml.len() + manifest.len() + blobs.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(cfg_toml.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_toml.as_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&blobs);
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a checkpoint back as the config text plus named tensors, in the
/// order they were saved.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(String, Vec<(String, Tensor<S>)>)> {
    let label = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(label.clone(), e))?;
    let fail = |detail: String| Error::format(label.clone(), detail);
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let take_u32 = |at: usize| -> Result<usize> {
        let end = at + 4;
        if end > bytes.len() {
            return Err(fail("truncated length field".into()));
        }
        Ok(u32::from_le_bytes(bytes[at..end].try_into().expect("4 bytes")) as usize)
    };
    let cfg_len = take_u32(8)?;
    let cfg_end = 12 + cfg_len;
    if cfg_end > bytes.len() {
        return Err(fail("truncated config block".into()));
    }
    let cfg_toml = std::str::from_utf8(&bytes[12..cfg_end])
        .map_err(|e| fail(format!("config is not UTF-8: {e}")))?
        .to_string();
    let man_len = take_u32(cfg_end)?;
    let man_end = cfg_end + 4 + man_len;
    if man_end > bytes.len() {
        return Err(fail("truncated manifest block".into()));
    }
    let manifest = std::str::from_utf8(&bytes[cfg_end + 4..man_end])
        .map_err(|e| fail(format!("manifest is not UTF-8: {e}")))?;
    let blob = &bytes[man_end..];
    let mut params = Vec::new();
    for line in manifest.lines() {
        let mut fields = line.split(' ');
        let (name, off, len) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(n), Some(o), Some(l), None) => (n, o, l),
            _ => return Err(fail(format!("bad manifest line {line:?}"))),
        };
        let off: usize =
            off.parse().map_err(|_| fail(format!("bad offset in manifest line {line:?}")))?;
        let len: usize =
            len.parse().map_err(|_| fail(format!("bad length in manifest line {line:?}")))?;
        if off + len > blob.len() {
            return Err(fail(format!("tensor {name} extends past end of file")));
        }
        let t = decode_tensor(&blob[off..off + len], &format!("{label}:{name}"))?;
        params.push((name.to_string(), t));
    }
    Ok((cfg_toml, params))
}

/// Rebuilds a model from a checkpoint: the embedded config constructs the
/// network, then every parameter is overwritten with the saved values.
pub fn load_model<S: Scalar>(path: &Path) -> Result<(RunConfig, StaModel<S>)> {
    let (cfg_toml, saved) = load_checkpoint::<S>(path)?;
    let run = RunConfig::from_toml(&cfg_toml)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let model = StaModel::new(run.model, &mut rng)?;
    let params = model.named_parameters();
    if params.len() != saved.len() {
        return Err(Error::format(
            path.display().to_string(),
            format!("checkpoint has {} tensors, model expects {}", saved.len(), params.len()),
        ));
    }
    for ((name, param), (saved_name, tensor)) in params.iter().zip(&saved) {
        if name != saved_name {
            return Err(Error::format(
                path.display().to_string(),
                format!("parameter order mismatch: expected {name}, found {saved_name}"),
            ));
        }
        if param.shape() != tensor.shape() {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    param.shape()
                ),
            ));
        }
        param.set_data(&tensor.to_vec())?;
    }
    Ok((run, model))
}

/// Mean loss components over the clips an epoch actually trained on.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub parts: LossParts,
    /// Learning rate at the first optimizer step of the epoch.
    pub lr: f64,
    pub clips_used: usize,
    pub clips_skipped: usize,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    pub steps: usize,
}

fn augment_config(frame_size: usize) -> AugmentConfig {
    AugmentConfig {
        flip_prob: 0.5,
        short_side: (frame_size + frame_size / 8, frame_size + 3 * frame_size / 8),
        crop: frame_size,
    }
}

fn check_vocab<S: Scalar>(ds: &Dataset<S>, cfg: &ModelConfig) -> Result<()> {
    if ds.n_nouns != cfg.n_nouns || ds.n_verbs != cfg.n_verbs {
        return Err(Error::Config(format!(
            "dataset vocabulary ({} nouns, {} verbs) does not match the model ({}, {})",
            ds.n_nouns, ds.n_verbs, cfg.n_nouns, cfg.n_verbs
        )));
    }
    Ok(())
}

/// Trains a fresh model on the dataset, writing a checkpoint after every
/// epoch, and reports per-epoch mean loss components through `on_epoch`.
pub fn train<S: Scalar>(
    ds: &Dataset<S>,
    run: &RunConfig,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(StaModel<S>, TrainSummary)> {
    run.validate()?;
    check_vocab(ds, &run.model)?;
    if ds.clips.is_empty() {
        return Err(Error::Data("training dataset has no clips".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let cfg_toml = run.to_toml()?;
    let ckpt_path = out_dir.join("checkpoint.gck");

    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let model: StaModel<S> = StaModel::new(run.model, &mut rng)?;
    let params = model.named_parameters();
    let mut opt = Sgd::new(run.train.weight_decay, run.train.momentum);
    let aug_cfg = augment_config(run.model.frame_size);

    let batches_per_epoch = ds.clips.len().div_ceil(run.train.batch_size);
    let total_steps = run.train.epochs * batches_per_epoch;
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(run.train.epochs);
    for epoch in 1..=run.train.epochs {
        let mut order: Vec<usize> = (0..ds.clips.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut used = 0usize;
        let mut skipped = 0usize;
        let lr_at_start = cosine_lr(step, total_steps, run.train.lr);
        for batch in order.chunks(run.train.batch_size) {
            let mut batch_total: Option<Tensor<S>> = None;
            let mut in_batch = 0usize;
            for &ci in batch {
                let stored = &ds.clips[ci];
                let augmented;
                let clip: &crate::data::Clip<S> = if run.train.augment {
                    match augment(stored, &aug_cfg, &mut rng)? {
                        Some(c) => {
                            augmented = c;
                            &augmented
                        }
                        None => {
                            skipped += 1;
                            continue;
                        }
                    }
                } else {
                    stored
                };
                let Some(target) = clip.target else {
                    skipped += 1;
                    continue;
                };
                let out = model.forward(&clip)?;
                let Some(loss) = clip_loss(&out, &[target], &run.model, &run.loss)? else {
                    skipped += 1;
                    continue;
                };
                sums.add(&loss.parts);
                batch_total = Some(match batch_total {
                    Some(acc) => acc.add(&loss.total)?,
                    None => loss.total,
                });
                in_batch += 1;
            }
            let Some(total) = batch_total else { continue };
            let total = total.scale(1.0 / in_batch as f64)?;
            let value = total.item()?.cast_f64();
            if !value.is_finite() {
                return Err(Error::contract(
                    "train",
                    format!("non-finite loss {value} at epoch {epoch}, step {step}"),
                ));
            }
            total.backward()?;
            opt.step(&params, cosine_lr(step, total_steps, run.train.lr))?;
            for (_, p) in &params {
                p.zero_grad();
            }
            step += 1;
            used += in_batch;
        }
        if used == 0 {
            return Err(Error::Data(format!(
                "epoch {epoch} had no trainable clips (all skipped); check targets and mode"
            )));
        }
        sums.scale(1.0 / used as f64);
        save_checkpoint(&ckpt_path, &cfg_toml, &params)?;
        let log = EpochLog { epoch, parts: sums, lr: lr_at_start, clips_used: used, clips_skipped: skipped };
        on_epoch(&log);
        epochs.push(log);
    }
    Ok((model, TrainSummary { epochs, checkpoint: ckpt_path, steps: step }))
}

/// Runs the model over every annotated clip and assembles the prediction
/// and ground-truth records the protocol scores. In detector-box mode only
/// ROI-backed queries emit records; learned padding queries stay silent.
pub fn collect_records<S: Scalar>(
    model: &StaModel<S>,
    ds: &Dataset<S>,
) -> Result<(Vec<EvalRecord>, Vec<GtRecord>)> {
    check_vocab(ds, &model.cfg)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for clip in &ds.clips {
        let Some(t) = clip.target else { continue };
        gts.push(GtRecord { clip: clip.id, bbox: t.bbox, noun: t.noun, verb: t.verb, ttc: t.ttc });
        for (query, p) in model.predict(clip)?.into_iter().enumerate() {
            if model.cfg.output_mode == OutputMode::DetectorBox && p.roi.is_none() {
                continue;
            }
            preds.push(EvalRecord {
                clip: clip.id,
                query,
                bbox: p.bbox,
                noun: p.noun,
                verb: p.verb,
                ttc: p.ttc,
                confidence: p.confidence,
            });
        }
    }
    if gts.is_empty() {
        return Err(Error::Data("evaluation dataset has no annotated clips".into()));
    }
    Ok((preds, gts))
}

pub fn evaluate_model<S: Scalar>(model: &StaModel<S>, ds: &Dataset<S>) -> Result<EvalSummary> {
    let (preds, gts) = collect_records(model, ds)?;
    evaluate_records(&preds, &gts)
}

/// The machine-readable evaluation artifact: the exact run configuration
/// next to the scored results.
#[derive(Debug, Serialize)]
pub struct ReportFile<'a> {
    pub config: &'a RunConfig,
    pub summary: &'a EvalSummary,
}

/// Writes the human-readable table and the JSON record side by side.
/// Returns the two paths (text, json).
pub fn write_report(
    dir: &Path,
    run: &RunConfig,
    summary: &EvalSummary,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let text_path = dir.join("report.txt");
    let json_path = dir.join("report.json");
    let text = crate::metrics::format_report(summary);
    fs::write(&text_path, text).map_err(|e| Error::io(text_path.display().to_string(), e))?;
    let json = serde_json::to_string_pretty(&ReportFile { config: run, summary })
        .map_err(|e| Error::Config(format!("report encode: {e}")))?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(json_path.display().to_string(), e))?;
    Ok((text_path, json_path))
}
