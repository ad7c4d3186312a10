//! Evaluation protocol: combined average precision over box, noun, verb,
//! and time-to-contact correctness, plus top-1 accuracies for matched
//! predictions. AP arithmetic runs on exact rationals so two independent
//! implementations of the precision-recall curve agree bit for bit.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::data::BoxCwh;
use crate::error::{Error, Result};

/// Intersection over union of two center-size boxes. Degenerate boxes are
/// rejected rather than silently treated as points.
pub fn iou(a: &BoxCwh, b: &BoxCwh) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU as plain geometry, with no range validation. Zero-area and
/// non-finite boxes overlap nothing, so the result is always a number in
/// [0, 1]. Model heads can emit degenerate boxes (a saturated sigmoid hits
/// exactly 0 width) and matching must score those, not reject them.
pub fn iou_unchecked(a: &BoxCwh, b: &BoxCwh) -> f64 {
    let coords = [a.cx, a.cy, a.w, a.h, b.cx, b.cy, b.w, b.h];
    if coords.iter().any(|v| !v.is_finite()) {
        return 0.0;
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union.is_finite() && union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Which optional components a combined-AP variant checks. Box overlap is
/// always required, so only the other three are listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComboSpec {
    pub noun: bool,
    pub verb: bool,
    pub ttc: bool,
}

impl ComboSpec {
    /// The eight reported variants, in report order.
    pub const TABLE: [ComboSpec; 8] = [
        ComboSpec { noun: false, verb: false, ttc: false },
        ComboSpec { noun: true, verb: false, ttc: false },
        ComboSpec { noun: true, verb: false, ttc: true },
        ComboSpec { noun: true, verb: true, ttc: false },
        ComboSpec { noun: true, verb: true, ttc: true },
        ComboSpec { noun: false, verb: false, ttc: true },
        ComboSpec { noun: false, verb: true, ttc: false },
        ComboSpec { noun: false, verb: true, ttc: true },
    ];

    pub fn label(&self) -> String {
        let mut s = String::from("b");
        if self.noun {
            s.push_str("+n");
        }
        if self.verb {
            s.push_str("+v");
        }
        if self.ttc {
            s.push_str("+ttc");
        }
        s
    }
}

/// One prediction emitted during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub clip: usize,
    pub query: usize,
    #[serde(rename = "box")]
    pub bbox: BoxCwh,
    pub noun: usize,
    pub verb: usize,
    pub ttc: f64,
    pub confidence: f64,
}

/// One ground-truth annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub clip: usize,
    #[serde(rename = "box")]
    pub bbox: BoxCwh,
    pub noun: usize,
    pub verb: usize,
    pub ttc: f64,
}

/// A prediction is correct when its box overlaps the ground truth at IoU
/// of at least 0.5 and every component the combo checks agrees: exact
/// top-1 label for noun and verb, absolute error of at most 0.25 seconds
/// for time to contact. Both boundaries count as correct.
pub fn is_correct(pred: &EvalRecord, gt: &GtRecord, combo: ComboSpec) -> Result<bool> {
    let mut ok = iou_unchecked(&pred.bbox, &gt.bbox) >= 0.5;
    if combo.noun {
        ok = ok && pred.noun == gt.noun;
    }
    if combo.verb {
        ok = ok && pred.verb == gt.verb;
    }
    if combo.ttc {
        ok = ok && (pred.ttc - gt.ttc).abs() <= 0.25;
    }
    Ok(ok)
}

/// Indices of `preds` sorted by descending confidence, with ties broken by
/// clip id and then query index so the ranking is fully deterministic.
pub fn rank_order(preds: &[EvalRecord]) -> Result<Vec<usize>> {
    for p in preds {
        if !p.confidence.is_finite() {
            return Err(Error::Data(format!("non-finite confidence in clip {}", p.clip)));
        }
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .expect("confidences checked finite")
            .then(preds[a].clip.cmp(&preds[b].clip))
            .then(preds[a].query.cmp(&preds[b].query))
    });
    Ok(order)
}

/// Greedy matching: walking predictions in rank order, each one is paired
/// with the unmatched ground truth of the same clip that it overlaps most
/// (ties go to the earlier ground truth). The pair is a true positive, and
/// the ground truth consumed, only when `is_correct` holds.
///
/// Returns the true-positive flag per prediction in rank order, and the
/// matched prediction index per ground truth.
pub fn greedy_match(
    preds: &[EvalRecord],
    gts: &[GtRecord],
    combo: ComboSpec,
) -> Result<(Vec<bool>, Vec<Option<usize>>)> {
    let order = rank_order(preds)?;
    let mut matched: Vec<Option<usize>> = vec![None; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    for &p in &order {
        let pred = &preds[p];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.clip != pred.clip || matched[g].is_some() {
                continue;
            }
            let overlap = iou_unchecked(&pred.bbox, &gt.bbox);
            if best.map_or(true, |(bo, _)| overlap > bo) {
                best = Some((overlap, g));
            }
        }
        let tp = match best {
            Some((_, g)) if is_correct(pred, &gts[g], combo)? => {
                matched[g] = Some(p);
                true
            }
            _ => false,
        };
        flags.push(tp);
    }
    Ok((flags, matched))
}

fn ratio(n: usize, d: usize) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Converts a nonnegative rational to `f64` without overflowing on large
/// numerators or denominators.
pub fn ratio_to_f64(r: &BigRational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    let nb = r.numer().bits() as i64;
    let db = r.denom().bits() as i64;
    let shift = nb.max(db) - 63;
    if shift <= 0 {
        r.numer().to_f64().unwrap() / r.denom().to_f64().unwrap()
    } else {
        let n = (r.numer() >> shift as u64).to_f64().unwrap();
        let d = (r.denom() >> shift as u64).to_f64().unwrap();
        n / d
    }
}

/// All-point interpolated average precision from true-positive flags in
/// rank order: at each recall increase, credit the best precision
/// achieved at that recall or beyond.
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> Option<BigRational> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precisions.push(ratio(tp, k + 1));
        recalls.push(ratio(tp, n_gt));
    }
    for k in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[k + 1] > precisions[k] {
            precisions[k] = precisions[k + 1].clone();
        }
    }
    let mut ap = BigRational::zero();
    let mut prev = BigRational::zero();
    for (r, p) in recalls.iter().zip(&precisions) {
        if *r > prev {
            ap += (r - &prev) * p;
            prev = r.clone();
        }
    }
    Some(ap)
}

/// Reference average precision: enumerates every operating point of the
/// precision-recall curve and integrates the interpolated envelope by
/// scanning all points at each recall level. Slower than `ap_from_flags`
/// but independently derived, for cross-checking.
pub fn brute_force_ap(flags: &[bool], n_gt: usize) -> Option<BigRational> {
    if n_gt == 0 {
        return None;
    }
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut levels = Vec::new();
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
            levels.push(ratio(tp, n_gt));
        }
        points.push((ratio(tp, n_gt), ratio(tp, k + 1)));
    }
    levels.dedup();
    let mut ap = BigRational::zero();
    let mut prev = BigRational::zero();
    for level in levels {
        let best = points
            .iter()
            .filter(|(r, _)| *r >= level)
            .map(|(_, p)| p.clone())
            .max()
            .expect("level comes from a point");
        ap += (&level - &prev) * best;
        prev = level;
    }
    Some(ap)
}

/// Average precision plus the raw counts behind it. `ap` is `None` when
/// there is no ground truth to recall.
#[derive(Debug, Clone, PartialEq)]
pub struct ApStats {
    pub ap: Option<BigRational>,
    pub tp: usize,
    pub fp: usize,
    pub n_gt: usize,
}

impl ApStats {
    pub fn ap_f64(&self) -> Option<f64> {
        self.ap.as_ref().map(ratio_to_f64)
    }
}

pub fn average_precision(
    preds: &[EvalRecord],
    gts: &[GtRecord],
    combo: ComboSpec,
) -> Result<ApStats> {
    let (flags, _) = greedy_match(preds, gts, combo)?;
    let tp = flags.iter().filter(|f| **f).count();
    Ok(ApStats {
        ap: ap_from_flags(&flags, gts.len()),
        tp,
        fp: flags.len() - tp,
        n_gt: gts.len(),
    })
}

/// Top-1 noun and verb accuracy over ground truths: matching is gated by
/// box overlap alone, and an unmatched ground truth counts as wrong.
pub fn top1_accuracies(preds: &[EvalRecord], gts: &[GtRecord]) -> Result<(f64, f64)> {
    if gts.is_empty() {
        return Err(Error::Data("top-1 accuracy needs at least one ground truth".into()));
    }
    let box_only = ComboSpec { noun: false, verb: false, ttc: false };
    let (_, matched) = greedy_match(preds, gts, box_only)?;
    let mut noun_hits = 0usize;
    let mut verb_hits = 0usize;
    for (gt, m) in gts.iter().zip(&matched) {
        if let Some(p) = m {
            if preds[*p].noun == gt.noun {
                noun_hits += 1;
            }
            if preds[*p].verb == gt.verb {
                verb_hits += 1;
            }
        }
    }
    Ok((noun_hits as f64 / gts.len() as f64, verb_hits as f64 / gts.len() as f64))
}

/// One row of the evaluation summary, in machine-readable form. The exact
/// rational AP is preserved as a numerator and denominator string pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComboResult {
    pub combo: String,
    pub ap: Option<f64>,
    pub ap_exact: Option<(String, String)>,
    pub tp: usize,
    pub fp: usize,
    pub n_gt: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub combos: Vec<ComboResult>,
    pub top1_noun: f64,
    pub top1_verb: f64,
    pub n_predictions: usize,
    pub n_gt: usize,
}

/// Runs the full protocol: the eight AP variants plus both top-1 rates.
pub fn evaluate_records(preds: &[EvalRecord], gts: &[GtRecord]) -> Result<EvalSummary> {
    let mut combos = Vec::with_capacity(ComboSpec::TABLE.len());
    for combo in ComboSpec::TABLE {
        let stats = average_precision(preds, gts, combo)?;
        combos.push(ComboResult {
            combo: combo.label(),
            ap: stats.ap_f64(),
            ap_exact: stats
                .ap
                .as_ref()
                .map(|r| (r.numer().to_string(), r.denom().to_string())),
            tp: stats.tp,
            fp: stats.fp,
            n_gt: stats.n_gt,
        });
    }
    let (top1_noun, top1_verb) = top1_accuracies(preds, gts)?;
    Ok(EvalSummary { combos, top1_noun, top1_verb, n_predictions: preds.len(), n_gt: gts.len() })
}

/// Human-readable report: one CSV-style row per combo, then the top-1
/// rates. Formatting is fixed-precision so identical results render to
/// identical bytes.
pub fn format_report(summary: &EvalSummary) -> String {
    let mut out = String::from("combo, AP, tp, fp, n_gt\n");
    for row in &summary.combos {
        let ap = match row.ap {
            Some(v) => format!("{v:.6}"),
            None => "absent".to_string(),
        };
        out.push_str(&format!("{}, {}, {}, {}, {}\n", row.combo, ap, row.tp, row.fp, row.n_gt));
    }
    out.push_str(&format!("top1_noun, {:.6}\n", summary.top1_noun));
    out.push_str(&format!("top1_verb, {:.6}\n", summary.top1_verb));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(clip: usize, bbox: BoxCwh, noun: usize, verb: usize, ttc: f64) -> GtRecord {
        GtRecord { clip, bbox, noun, verb, ttc }
    }

    fn pred(
        clip: usize,
        query: usize,
        bbox: BoxCwh,
        noun: usize,
        verb: usize,
        ttc: f64,
        confidence: f64,
    ) -> EvalRecord {
        EvalRecord { clip, query, bbox, noun, verb, ttc, confidence }
    }

    fn full() -> ComboSpec {
        ComboSpec { noun: true, verb: true, ttc: true }
    }

    #[test]
    fn iou_reference_values() {
        let a = BoxCwh::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = BoxCwh::new(1.0, 0.5, 1.0, 1.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        let far = BoxCwh::new(0.1, 0.1, 0.05, 0.05);
        let off = BoxCwh::new(0.9, 0.9, 0.05, 0.05);
        assert_eq!(iou(&far, &off).unwrap(), 0.0);
        let degenerate = BoxCwh::new(0.5, 0.5, 0.0, 0.1);
        assert!(iou(&a, &degenerate).is_err());
    }

    #[test]
    fn unchecked_iou_scores_degenerate_boxes_as_zero() {
        let a = BoxCwh::new(0.5, 0.5, 1.0, 1.0);
        let collapsed = BoxCwh::new(0.0, 0.0, 0.0, 1.0);
        assert_eq!(iou_unchecked(&a, &collapsed), 0.0);
        assert_eq!(iou_unchecked(&collapsed, &collapsed), 0.0);
        let poisoned = BoxCwh::new(f64::NAN, 0.5, 0.2, 0.2);
        assert_eq!(iou_unchecked(&a, &poisoned), 0.0);
        // Agreement with the validated path on well-formed boxes.
        let b = BoxCwh::new(1.0, 0.5, 1.0, 1.0);
        assert_eq!(iou_unchecked(&a, &b), iou(&a, &b).unwrap());
    }

    #[test]
    fn boundary_values_count_as_correct() {
        // Nested boxes with areas 1/4 and 1/8 overlap at exactly IoU 1/2.
        let outer = BoxCwh::new(0.5, 0.5, 0.5, 0.5);
        let inner = BoxCwh::new(0.5, 0.5, 0.5, 0.25);
        assert_eq!(iou(&outer, &inner).unwrap(), 0.5);
        let g = gt(0, outer, 1, 2, 1.0);
        let p = pred(0, 0, inner, 1, 2, 1.25, 0.9);
        assert!(is_correct(&p, &g, full()).unwrap());
        let late = pred(0, 0, inner, 1, 2, 1.3, 0.9);
        assert!(!is_correct(&late, &g, full()).unwrap());
        let small = BoxCwh::new(0.5, 0.5, 0.5, 0.2);
        let p2 = pred(0, 0, small, 1, 2, 1.0, 0.9);
        assert!(!is_correct(&p2, &g, full()).unwrap());
    }

    #[test]
    fn combo_table_order_and_labels() {
        let labels: Vec<String> = ComboSpec::TABLE.iter().map(|c| c.label()).collect();
        assert_eq!(
            labels,
            ["b", "b+n", "b+n+ttc", "b+n+v", "b+n+v+ttc", "b+ttc", "b+v", "b+v+ttc"]
        );
    }

    #[test]
    fn two_predictions_one_ground_truth() {
        let b = BoxCwh::new(0.5, 0.5, 0.2, 0.2);
        let g = [gt(0, b, 1, 1, 1.0)];
        // Higher-confidence prediction correct: AP 1.
        let preds = [pred(0, 0, b, 1, 1, 1.0, 0.9), pred(0, 1, b, 0, 1, 1.0, 0.5)];
        let stats = average_precision(&preds, &g, full()).unwrap();
        assert_eq!(stats.ap.unwrap(), ratio(1, 1));
        assert_eq!((stats.tp, stats.fp), (1, 1));
        // Lower-confidence prediction correct: AP 1/2.
        let preds = [pred(0, 0, b, 0, 1, 1.0, 0.9), pred(0, 1, b, 1, 1, 1.0, 0.5)];
        let stats = average_precision(&preds, &g, full()).unwrap();
        assert_eq!(stats.ap.unwrap(), ratio(1, 2));
        // Neither correct: AP 0.
        let preds = [pred(0, 0, b, 0, 1, 1.0, 0.9), pred(0, 1, b, 0, 0, 1.0, 0.5)];
        let stats = average_precision(&preds, &g, full()).unwrap();
        assert!(stats.ap.unwrap().is_zero());
    }

    #[test]
    fn ties_rank_by_clip_then_query() {
        let b = BoxCwh::new(0.5, 0.5, 0.2, 0.2);
        // Equal confidence: clip 0 must rank first. Its prediction is
        // wrong, so AP is (1/2 recall gained) * (1/2 precision) = 1/4.
        let g = [gt(0, b, 1, 1, 1.0), gt(1, b, 1, 1, 1.0)];
        let preds = [pred(1, 0, b, 1, 1, 1.0, 0.7), pred(0, 0, b, 0, 1, 1.0, 0.7)];
        let stats = average_precision(&preds, &g, full()).unwrap();
        assert_eq!(stats.ap.unwrap(), ratio(1, 4));
        // Same clip, equal confidence: query 0 first. Query 0 wrong,
        // query 1 right: AP 1/2.
        let g = [gt(0, b, 1, 1, 1.0)];
        let preds = [pred(0, 1, b, 1, 1, 1.0, 0.7), pred(0, 0, b, 0, 1, 1.0, 0.7)];
        let stats = average_precision(&preds, &g, full()).unwrap();
        assert_eq!(stats.ap.unwrap(), ratio(1, 2));
    }

    #[test]
    fn incorrect_overlap_does_not_consume_the_ground_truth() {
        let b = BoxCwh::new(0.5, 0.5, 0.2, 0.2);
        let g = [gt(0, b, 1, 1, 1.0)];
        let preds = [pred(0, 0, b, 0, 1, 1.0, 0.9), pred(0, 1, b, 1, 1, 1.0, 0.5)];
        let (flags, matched) = greedy_match(&preds, &g, full()).unwrap();
        assert_eq!(flags, vec![false, true]);
        assert_eq!(matched, vec![Some(1)]);
    }

    #[test]
    fn matched_ground_truth_is_not_reused() {
        let b = BoxCwh::new(0.5, 0.5, 0.2, 0.2);
        let g = [gt(0, b, 1, 1, 1.0)];
        let preds = [pred(0, 0, b, 1, 1, 1.0, 0.9), pred(0, 1, b, 1, 1, 1.0, 0.5)];
        let (flags, _) = greedy_match(&preds, &g, full()).unwrap();
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn matching_prefers_higher_overlap() {
        let big = BoxCwh::new(0.3, 0.3, 0.3, 0.3);
        let small = BoxCwh::new(0.32, 0.3, 0.3, 0.3);
        let g = [gt(0, big, 1, 1, 1.0), gt(0, small, 2, 1, 1.0)];
        // The prediction overlaps both; IoU is higher with the first.
        let preds = [pred(0, 0, big, 1, 1, 1.0, 0.9)];
        let (_, matched) = greedy_match(&preds, &g, full()).unwrap();
        assert_eq!(matched, vec![Some(0), None]);
    }

    fn random_pattern(rng: &mut ChaCha8Rng) -> (Vec<EvalRecord>, Vec<GtRecord>) {
        let n_gt = rng.gen_range(1..=3usize);
        let n_pred = rng.gen_range(0..=6usize);
        let spots: Vec<BoxCwh> =
            (0..3).map(|g| BoxCwh::new(0.15 + 0.3 * g as f64, 0.5, 0.1, 0.1)).collect();
        let gts: Vec<GtRecord> = (0..n_gt).map(|g| gt(g / 2, spots[g], g, g, 1.0)).collect();
        let preds: Vec<EvalRecord> = (0..n_pred)
            .map(|i| {
                let g = rng.gen_range(0..n_gt);
                let noun = if rng.gen_bool(0.5) { g } else { g + 1 };
                let bbox = if rng.gen_bool(0.8) {
                    spots[g]
                } else {
                    BoxCwh::new(0.9, 0.9, 0.05, 0.05)
                };
                pred(g / 2, i, bbox, noun, g, 1.0, (10.0 - i as f64) / 10.0)
            })
            .collect();
        (preds, gts)
    }

    #[test]
    fn ap_agrees_with_the_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..200 {
            let (preds, gts) = random_pattern(&mut rng);
            for combo in ComboSpec::TABLE {
                let (flags, _) = greedy_match(&preds, &gts, combo).unwrap();
                assert_eq!(
                    ap_from_flags(&flags, gts.len()),
                    brute_force_ap(&flags, gts.len()),
                    "flags {flags:?} n_gt {}",
                    gts.len()
                );
            }
        }
    }

    #[test]
    fn upgrading_a_false_positive_never_lowers_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.gen_range(1..=6usize);
            let n_gt = 3usize;
            let mut flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            while flags.iter().filter(|f| **f).count() >= n_gt {
                let k = flags.iter().position(|f| *f).expect("count is positive");
                flags[k] = false;
            }
            let base = ap_from_flags(&flags, n_gt).unwrap();
            if let Some(k) = flags.iter().position(|f| !f) {
                flags[k] = true;
                let upgraded = ap_from_flags(&flags, n_gt).unwrap();
                assert!(upgraded >= base);
            }
        }
    }

    #[test]
    fn confidence_rescaling_preserves_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut preds, gts) = loop {
            let (p, g) = random_pattern(&mut rng);
            if !p.is_empty() {
                break (p, g);
            }
        };
        let before = average_precision(&preds, &gts, full()).unwrap();
        for p in &mut preds {
            p.confidence *= 0.5;
        }
        let after = average_precision(&preds, &gts, full()).unwrap();
        assert_eq!(before.ap, after.ap);
    }

    #[test]
    fn empty_inputs() {
        let b = BoxCwh::new(0.5, 0.5, 0.2, 0.2);
        let g = [gt(0, b, 1, 1, 1.0)];
        let stats = average_precision(&[], &g, full()).unwrap();
        assert!(stats.ap.unwrap().is_zero());
        assert_eq!(stats.n_gt, 1);
        let no_gt = average_precision(&[pred(0, 0, b, 1, 1, 1.0, 0.9)], &[], full()).unwrap();
        assert!(no_gt.ap.is_none());
    }

    #[test]
    fn top1_counts_unmatched_ground_truth_as_wrong() {
        let b0 = BoxCwh::new(0.2, 0.5, 0.1, 0.1);
        let b1 = BoxCwh::new(0.8, 0.5, 0.1, 0.1);
        let gts = [gt(0, b0, 0, 1, 1.0), gt(1, b1, 2, 3, 1.0)];
        // Clip 0 prediction: right noun, wrong verb. Clip 1: no overlap.
        let preds = [
            pred(0, 0, b0, 0, 0, 1.0, 0.9),
            pred(1, 0, BoxCwh::new(0.1, 0.1, 0.05, 0.05), 2, 3, 1.0, 0.8),
        ];
        let (noun, verb) = top1_accuracies(&preds, &gts).unwrap();
        assert_eq!(noun, 0.5);
        assert_eq!(verb, 0.0);
    }

    #[test]
    fn report_layout_is_stable() {
        let b = BoxCwh::new(0.5, 0.5, 0.2, 0.2);
        let gts = [gt(0, b, 1, 1, 1.0)];
        let preds = [pred(0, 0, b, 1, 1, 1.0, 0.9)];
        let summary = evaluate_records(&preds, &gts).unwrap();
        let report = format_report(&summary);
        let mut lines = report.lines();
        assert_eq!(lines.next(), Some("combo, AP, tp, fp, n_gt"));
        assert_eq!(lines.next(), Some("b, 1.000000, 1, 0, 1"));
        assert_eq!(report.lines().count(), 11);
        assert!(report.ends_with("top1_verb, 1.000000\n"));
        // The exact rational rides along for byte-stable comparisons.
        assert_eq!(summary.combos[0].ap_exact, Some(("1".into(), "1".into())));
    }

    #[test]
    fn ratio_to_f64_handles_huge_terms() {
        let huge: BigInt = BigInt::from(1u8) << 200u32;
        let r = BigRational::new(huge.clone(), &huge * 2);
        assert_eq!(ratio_to_f64(&r), 0.5);
        assert_eq!(ratio_to_f64(&ratio(1, 3)), 1.0 / 3.0);
        assert_eq!(ratio_to_f64(&BigRational::zero()), 0.0);
    }
}
