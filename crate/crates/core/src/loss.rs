//! Multi-task training objective: weighted sum of box regression, noun and
//! verb classification, and time-to-contact regression, plus the rule that
//! assigns ground-truth targets to decoder queries.

use serde::{Deserialize, Serialize};

use crate::data::{BoxCwh, NaoTarget};
use crate::error::{Error, Result};
use crate::metrics::iou_unchecked;
use crate::model::{ModelConfig, ModelOutput, OutputMode, QueryMeta};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// The four loss multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_noun: f64,
    pub lambda_verb: f64,
    pub lambda_ttc: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { lambda_box: 0.5, lambda_noun: 1.0, lambda_verb: 1.0, lambda_ttc: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_box, self.lambda_noun, self.lambda_verb, self.lambda_ttc];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        if all.iter().all(|l| *l == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Down-weight applied to the background-class term of queries that
    /// received no target (predict-boxes mode only).
    pub background_weight: f64,
    /// Swaps the regression bindings: box gets MSE, ttc gets smooth-L1.
    pub swap_regression: bool,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            weights: LossWeights::default(),
            background_weight: 0.1,
            swap_regression: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.background_weight.is_finite() && self.background_weight >= 0.0) {
            return Err(Error::Config(format!(
                "background_weight must be finite and nonnegative, got {}",
                self.background_weight
            )));
        }
        Ok(())
    }
}

/// Matches each target to a distinct candidate query: highest IoU first,
/// then remaining targets go to the nearest unclaimed box center. The
/// returned vector holds one query index per target.
pub fn assign_targets(candidates: &[(usize, BoxCwh)], targets: &[NaoTarget]) -> Result<Vec<usize>> {
    if targets.is_empty() {
        return Err(Error::contract("assign_targets", "no targets to assign"));
    }
    if candidates.len() < targets.len() {
        return Err(Error::contract(
            "assign_targets",
            format!("{} targets but only {} candidate queries", targets.len(), candidates.len()),
        ));
    }
    let mut pairs = Vec::new();
    for (t, target) in targets.iter().enumerate() {
        target.bbox.validate()?;
        for (c, (_, bbox)) in candidates.iter().enumerate() {
            // Candidates are model outputs and may be degenerate (a
            // saturated box head emits zero widths), so they are scored
            // as raw geometry rather than validated.
            pairs.push((iou_unchecked(bbox, &target.bbox), t, c));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("finite iou").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut assigned = vec![usize::MAX; targets.len()];
    let mut taken = vec![false; candidates.len()];
    for (overlap, t, c) in pairs {
        if overlap > 0.0 && assigned[t] == usize::MAX && !taken[c] {
            assigned[t] = candidates[c].0;
            taken[c] = true;
        }
    }
    for (t, target) in targets.iter().enumerate() {
        if assigned[t] != usize::MAX {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (c, (_, bbox)) in candidates.iter().enumerate() {
            if taken[c] {
                continue;
            }
            let d2 = (bbox.cx - target.bbox.cx).powi(2) + (bbox.cy - target.bbox.cy).powi(2);
            if best.map_or(true, |(bd, _)| d2 < bd) {
                best = Some((d2, c));
            }
        }
        let (_, c) = best.expect("candidates outnumber targets");
        assigned[t] = candidates[c].0;
        taken[c] = true;
    }
    Ok(assigned)
}

/// Loss components as plain numbers, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub bbox: f64,
    pub noun: f64,
    pub verb: f64,
    pub ttc: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add(&mut self, other: &LossParts) {
        self.bbox += other.bbox;
        self.noun += other.noun;
        self.verb += other.verb;
        self.ttc += other.ttc;
        self.total += other.total;
    }

    pub fn scale(&mut self, f: f64) {
        self.bbox *= f;
        self.noun *= f;
        self.verb *= f;
        self.ttc *= f;
        self.total *= f;
    }
}

/// One clip's differentiable loss plus its logged components.
#[derive(Debug)]
pub struct ClipLoss<S: Scalar> {
    pub total: Tensor<S>,
    pub parts: LossParts,
}

fn logits_row<S: Scalar>(t: &Tensor<S>, row: usize) -> Result<Tensor<S>> {
    let cols = t.shape()[1];
    t.narrow(0, row, 1)?.reshape(&[cols])
}

fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    let d = pred.sub(target)?;
    d.mul(&d)?.sum_all()
}

fn zero_scalar<S: Scalar>() -> Tensor<S> {
    Tensor::scalar(S::zero())
}

/// Computes the multi-task loss for one clip's forward output. Returns
/// None when the mode has no query to train on (detector-box mode with no
/// ROI-backed query).
pub fn clip_loss<S: Scalar>(
    out: &ModelOutput<S>,
    targets: &[NaoTarget],
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
) -> Result<Option<ClipLoss<S>>> {
    loss_cfg.validate()?;
    if targets.is_empty() {
        return Ok(None);
    }
    for t in targets {
        if t.noun >= cfg.n_nouns || t.verb >= cfg.n_verbs {
            return Err(Error::contract(
                "clip_loss",
                format!("target labels ({}, {}) exceed vocab", t.noun, t.verb),
            ));
        }
    }
    let candidates: Vec<(usize, BoxCwh)> = match cfg.output_mode {
        OutputMode::DetectorBox => out
            .queries
            .iter()
            .enumerate()
            .filter_map(|(k, m)| match m {
                QueryMeta::Roi(det) => Some((k, det.bbox)),
                QueryMeta::Learned => None,
            })
            .collect(),
        OutputMode::PredictBoxes => {
            let b = out.boxes.to_vec();
            (0..out.queries.len())
                .map(|k| {
                    let row = &b[k * 4..k * 4 + 4];
                    (
                        k,
                        BoxCwh {
                            cx: row[0].cast_f64(),
                            cy: row[1].cast_f64(),
                            w: row[2].cast_f64(),
                            h: row[3].cast_f64(),
                        },
                    )
                })
                .collect()
        }
    };
    if candidates.len() < targets.len() {
        return Ok(None);
    }
    let assigned = assign_targets(&candidates, targets)?;

    let predict_boxes = cfg.output_mode == OutputMode::PredictBoxes;
    let mut box_term = zero_scalar();
    let mut noun_term = zero_scalar();
    let mut verb_term = zero_scalar();
    let mut ttc_term = zero_scalar();
    for (target, &q) in targets.iter().zip(&assigned) {
        if predict_boxes {
            let pred_box = logits_row(&out.boxes, q)?;
            let gt_box = Tensor::from_vec(&[4], target.bbox.to_array().map(s::<S>).to_vec())?;
            let reg = if loss_cfg.swap_regression {
                mse(&pred_box, &gt_box)?
            } else {
                pred_box.smooth_l1(&gt_box, 1.0)?
            };
            box_term = box_term.add(&reg)?;
            noun_term = noun_term.add(&logits_row(&out.noun_logits, q)?.cross_entropy(target.noun)?)?;
        }
        verb_term = verb_term.add(&logits_row(&out.verb_logits, q)?.cross_entropy(target.verb)?)?;
        let pred_ttc = logits_row(&out.ttc, q)?;
        let gt_ttc = Tensor::from_vec(&[1], vec![s::<S>(target.ttc)])?;
        let reg = if loss_cfg.swap_regression {
            pred_ttc.smooth_l1(&gt_ttc, 1.0)?
        } else {
            mse(&pred_ttc, &gt_ttc)?
        };
        ttc_term = ttc_term.add(&reg)?;
    }
    if predict_boxes && loss_cfg.background_weight > 0.0 {
        let unassigned: Vec<usize> =
            (0..out.queries.len()).filter(|k| !assigned.contains(k)).collect();
        if !unassigned.is_empty() {
            let mut bg = zero_scalar();
            for &k in &unassigned {
                bg = bg.add(&logits_row(&out.noun_logits, k)?.cross_entropy(cfg.n_nouns)?)?;
            }
            let scaled = bg.scale(loss_cfg.background_weight / unassigned.len() as f64)?;
            noun_term = noun_term.add(&scaled)?;
        }
    }

    let w = &loss_cfg.weights;
    let total = box_term
        .scale(w.lambda_box)?
        .add(&noun_term.scale(w.lambda_noun)?)?
        .add(&verb_term.scale(w.lambda_verb)?)?
        .add(&ttc_term.scale(w.lambda_ttc)?)?;
    let parts = LossParts {
        bbox: box_term.item()?.cast_f64(),
        noun: noun_term.item()?.cast_f64(),
        verb: verb_term.item()?.cast_f64(),
        ttc: ttc_term.item()?.cast_f64(),
        total: total.item()?.cast_f64(),
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite { op: "clip_loss", coord: None });
    }
    Ok(Some(ClipLoss { total, parts }))
}
