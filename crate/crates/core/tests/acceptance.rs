//! Acceptance gate for the whole pipeline. Each test prints one verdict
//! line, so a full run gives a seven-line summary of the properties the
//! crate promises: gradient integrity, fusion mechanism invariants, an
//! exact metric oracle, synthetic overfitting, the guided-vs-concat
//! ablation direction, detector-box protocol fidelity, and end-to-end
//! determinism.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nextact::attention::{BlockConfig, MhaConfig, MultiscaleBlock};
use nextact::checks::{default_seeds, run_battery};
use nextact::data::synth::{generate_synthetic, SynthConfig};
use nextact::data::{BoxCwh, Dataset, Detection};
use nextact::fusion::{concat_fusion, FusionMode, GuidedFusion, GuidanceScope, ObjectEmbedding};
use nextact::metrics::{
    average_precision, brute_force_ap, greedy_match, iou_unchecked, is_correct, ComboSpec,
    EvalRecord, EvalSummary, GtRecord,
};
use nextact::model::{ModelConfig, OutputMode, StaModel};
use nextact::train::{evaluate_model, train, RunConfig, TrainConfig};
use nextact::Tensor64;

fn verdict(n: usize, label: &str, pass: bool, detail: &str) -> bool {
    println!("criterion {n} ({label}): {}  {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn bits(t: &Tensor64) -> Vec<u64> {
    t.to_vec().iter().map(|v| v.to_bits()).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let reports = run_battery(&default_seeds()).expect("battery runs");
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = reports.len() == 13
        && reports.iter().all(|r| r.seeds >= 5 && r.passed())
        && elapsed.as_secs_f64() < 120.0;
    let detail = format!(
        "{} blocks, worst rel err {worst:.3e}, {:.2}s",
        reports.len(),
        elapsed.as_secs_f64()
    );
    assert!(verdict(1, "gradient integrity", pass, &detail), "{detail}");
}

fn det(frame: usize, cx: f64, cy: f64, noun: usize) -> Detection {
    Detection { frame, bbox: BoxCwh::new(cx, cy, 0.15, 0.2), noun, score: 1.0 }
}

#[test]
fn criterion_2_fusion_invariants() {
    let d = 16;
    let tokens = Tensor64::uniform(&[8, d], -1.0, 1.0, &mut rng(7)).unwrap();
    let grid = [2, 2, 2];
    let windows = [(0usize, 2usize), (2, 4)];
    let pool = vec![
        det(0, 0.2, 0.3, 0),
        det(0, 0.7, 0.2, 1),
        det(1, 0.5, 0.5, 2),
        det(1, 0.3, 0.8, 0),
        det(2, 0.8, 0.6, 1),
        det(2, 0.4, 0.4, 3),
        det(3, 0.6, 0.7, 2),
        det(3, 0.25, 0.55, 1),
    ];

    // Object list order must not leave any trace in the fused tokens, for
    // either guidance scope and for the concatenation arm.
    let mut permutation_ok = true;
    for scope in [GuidanceScope::PerFrame, GuidanceScope::Global] {
        let fusion: GuidedFusion<f64> =
            GuidedFusion::new(MhaConfig::new(d, 4), 8, scope, &mut rng(11)).unwrap();
        let base = ObjectEmbedding::from_detections(&fusion.embedder, &pool, 4).unwrap();
        let want = bits(&fusion.fuse(&tokens, grid, &windows, &base).unwrap());
        for variant in 1..4 {
            let mut shuffled = pool.clone();
            shuffled.reverse();
            shuffled.rotate_left(variant);
            let obj = ObjectEmbedding::from_detections(&fusion.embedder, &shuffled, 4).unwrap();
            let got = bits(&fusion.fuse(&tokens, grid, &windows, &obj).unwrap());
            permutation_ok &= got == want;
            let (cat_a, _) = concat_fusion(&tokens, &base).unwrap();
            let (cat_b, _) = concat_fusion(&tokens, &obj).unwrap();
            permutation_ok &= bits(&cat_a) == bits(&cat_b);
        }
    }

    // The same holds through the whole model, detections shuffled in the clip.
    let ds: Dataset = generate_synthetic(21, 2, &SynthConfig::default()).unwrap();
    let model: StaModel<f64> = StaModel::new(ModelConfig::default(), &mut rng(13)).unwrap();
    for clip in &ds.clips {
        let want = model.predict(clip).unwrap();
        let mut shuffled = clip.clone();
        shuffled.detections.reverse();
        shuffled.detections.rotate_left(2);
        permutation_ok &= model.predict(&shuffled).unwrap() == want;
    }

    // Guided fusion preserves patch cardinality for any object count, and
    // zero objects reproduce the input bit for bit.
    let mut cardinality_ok = true;
    let mut identity_ok = true;
    let fusion: GuidedFusion<f64> =
        GuidedFusion::new(MhaConfig::new(d, 4), 8, GuidanceScope::PerFrame, &mut rng(17)).unwrap();
    for m in [0usize, 1, 2, 8] {
        let obj = ObjectEmbedding::from_detections(&fusion.embedder, &pool[..m], 4).unwrap();
        let fused = fusion.fuse(&tokens, grid, &windows, &obj).unwrap();
        cardinality_ok &= fused.shape() == tokens.shape();
        if m == 0 {
            identity_ok &= bits(&fused) == bits(&tokens);
        }
    }

    // A block with stride 1 everywhere must be exactly the plain pre-norm
    // transformer block, in both self- and cross-attention wiring.
    let mut r = rng(19);
    let cfg = BlockConfig { mha: MhaConfig::new(d, 4), q_pool_stride: [1, 1, 1], mlp_hidden: 32 };
    let block: MultiscaleBlock<f64> = MultiscaleBlock::new(cfg, &mut r).unwrap();
    let x = Tensor64::uniform(&[12, d], -1.0, 1.0, &mut r).unwrap();
    let (out, out_grid) = block.forward(&x, [1, 3, 4], 0, None).unwrap();
    let normed = block.norm1.forward(&x).unwrap();
    let a = x.add(&block.attn.forward(&normed, &normed).unwrap()).unwrap();
    let want = a.add(&block.mlp.forward(&block.norm2.forward(&a).unwrap()).unwrap()).unwrap();
    let mut vanilla_ok = out_grid == [1, 3, 4] && bits(&out) == bits(&want);

    let q = Tensor64::uniform(&[6, d], -1.0, 1.0, &mut r).unwrap();
    let memory = Tensor64::uniform(&[10, d], -1.0, 1.0, &mut r).unwrap();
    let (out, _) = block.forward(&q, [1, 2, 3], 0, Some(&memory)).unwrap();
    let a = q.add(&block.attn.forward(&block.norm1.forward(&q).unwrap(), &memory).unwrap()).unwrap();
    let want = a.add(&block.mlp.forward(&block.norm2.forward(&a).unwrap()).unwrap()).unwrap();
    vanilla_ok &= bits(&out) == bits(&want);

    let pass = permutation_ok && cardinality_ok && identity_ok && vanilla_ok;
    let detail = format!(
        "permutation {permutation_ok}, cardinality {cardinality_ok}, empty identity {identity_ok}, stride-1 vanilla {vanilla_ok}"
    );
    assert!(verdict(2, "fusion mechanism invariants", pass, &detail), "{detail}");
}

/// Ground truths for the metric sweep: disjoint boxes, distinct labels.
fn sweep_gts(n_gt: usize) -> Vec<GtRecord> {
    (0..n_gt)
        .map(|j| GtRecord {
            clip: 0,
            bbox: BoxCwh::new(0.15 + 0.35 * j as f64, 0.5, 0.2, 0.2),
            noun: j,
            verb: j,
            ttc: 1.0 + j as f64,
        })
        .collect()
}

/// Realizes one prediction state: 0 is a miss (disjoint box), odd states
/// 2j+1 are fully correct against ground truth j, even states 2j+2 overlap
/// ground truth j perfectly but are wrong on every label and on time.
fn sweep_record(state: usize, i: usize, gts: &[GtRecord]) -> EvalRecord {
    let confidence = 1.0 - 0.05 * i as f64;
    if state == 0 {
        return EvalRecord {
            clip: 0,
            query: i,
            bbox: BoxCwh::new(0.5, 0.05, 0.08, 0.08),
            noun: 9,
            verb: 9,
            ttc: 9.9,
            confidence,
        };
    }
    let j = (state - 1) / 2;
    let gt = &gts[j];
    if state % 2 == 1 {
        EvalRecord {
            clip: 0,
            query: i,
            bbox: gt.bbox,
            noun: gt.noun,
            verb: gt.verb,
            ttc: gt.ttc,
            confidence,
        }
    } else {
        EvalRecord {
            clip: 0,
            query: i,
            bbox: gt.bbox,
            noun: gt.noun + 10,
            verb: gt.verb + 10,
            ttc: gt.ttc + 5.0,
            confidence,
        }
    }
}

#[test]
fn criterion_3_metric_oracle() {
    let start = Instant::now();
    let mut scenarios = 0usize;
    let mut agree = true;
    for n_gt in 0..=3usize {
        let gts = sweep_gts(n_gt);
        let states = 2 * n_gt + 1;
        for n_pred in 0..=5usize {
            let mut pattern = vec![0usize; n_pred];
            loop {
                let preds: Vec<EvalRecord> =
                    pattern.iter().enumerate().map(|(i, &s)| sweep_record(s, i, &gts)).collect();
                scenarios += 1;
                for combo in ComboSpec::TABLE {
                    let stats = average_precision(&preds, &gts, combo).unwrap();
                    let (flags, _) = greedy_match(&preds, &gts, combo).unwrap();
                    let oracle = brute_force_ap(&flags, n_gt);
                    agree &= stats.ap == oracle;
                    agree &= stats.tp + stats.fp == n_pred;
                }
                // Next mixed-radix pattern, base `states` per digit.
                let mut k = 0;
                while k < n_pred {
                    pattern[k] += 1;
                    if pattern[k] < states {
                        break;
                    }
                    pattern[k] = 0;
                    k += 1;
                }
                if n_pred == 0 || k == n_pred {
                    break;
                }
            }
        }
    }

    // Frozen reference values: one lone correct prediction scores 1, a
    // wrong-label overlap outranked by a correct one scores 1/2 because the
    // ground truth stays available, and all misses score 0.
    let gts = sweep_gts(1);
    let full = ComboSpec { noun: true, verb: true, ttc: true };
    let one = |records: &[EvalRecord]| {
        average_precision(records, &gts, full).unwrap().ap.map(|r| {
            (r.numer().to_string(), r.denom().to_string())
        })
    };
    let mut frozen = one(&[sweep_record(1, 0, &gts)]) == Some(("1".into(), "1".into()));
    frozen &= one(&[sweep_record(2, 0, &gts), sweep_record(1, 1, &gts)])
        == Some(("1".into(), "2".into()));
    frozen &= one(&[sweep_record(0, 0, &gts)]) == Some(("0".into(), "1".into()));

    // Boundary cases count as correct exactly at the threshold.
    let outer = GtRecord { clip: 0, bbox: BoxCwh::new(0.5, 0.5, 0.5, 0.5), noun: 0, verb: 0, ttc: 1.0 };
    let nested = EvalRecord {
        clip: 0,
        query: 0,
        bbox: BoxCwh::new(0.5, 0.5, 0.5, 0.25),
        noun: 0,
        verb: 0,
        ttc: 1.25,
        confidence: 0.9,
    };
    assert_eq!(iou_unchecked(&nested.bbox, &outer.bbox), 0.5);
    let mut boundary = is_correct(&nested, &outer, full).unwrap();
    let late = EvalRecord { ttc: 1.2500001, ..nested };
    boundary &= !is_correct(&late, &outer, full).unwrap();
    let shrunk = EvalRecord { bbox: BoxCwh::new(0.5, 0.5, 0.5, 0.249), ..nested };
    boundary &= !is_correct(&shrunk, &outer, full).unwrap();

    let pass = agree && frozen && boundary;
    let detail = format!(
        "{scenarios} patterns x 8 combos exact, frozen refs {frozen}, boundaries {boundary}, {:.1}s",
        start.elapsed().as_secs_f64()
    );
    assert!(verdict(3, "metric oracle", pass, &detail), "{detail}");
}

struct OverfitStats {
    mean_iou: f64,
    mean_dttc: f64,
    noun_acc: f64,
    verb_acc: f64,
}

/// Per-clip statistics of the highest-confidence prediction against the
/// clip's annotation.
fn overfit_stats(model: &StaModel<f64>, ds: &Dataset) -> OverfitStats {
    let mut iou_sum = 0.0;
    let mut dttc_sum = 0.0;
    let mut noun_hits = 0usize;
    let mut verb_hits = 0usize;
    for clip in &ds.clips {
        let gt = clip.target.expect("synthetic clips are annotated");
        let preds = model.predict(clip).expect("forward pass");
        let best = preds
            .iter()
            .max_by(|a, b| a.confidence.partial_cmp(&b.confidence).expect("finite confidence"))
            .expect("at least one query");
        iou_sum += iou_unchecked(&best.bbox, &gt.bbox);
        dttc_sum += (best.ttc - gt.ttc).abs();
        noun_hits += (best.noun == gt.noun) as usize;
        verb_hits += (best.verb == gt.verb) as usize;
    }
    let n = ds.clips.len() as f64;
    OverfitStats {
        mean_iou: iou_sum / n,
        mean_dttc: dttc_sum / n,
        noun_acc: noun_hits as f64 / n,
        verb_acc: verb_hits as f64 / n,
    }
}

#[test]
fn criterion_4_synthetic_overfit() {
    let start = Instant::now();
    let ds: Dataset = generate_synthetic(1, 32, &SynthConfig::default()).unwrap();
    let mut passes = 0usize;
    let mut lines = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut run = RunConfig::default();
        run.model.output_mode = OutputMode::PredictBoxes;
        run.train = TrainConfig {
            epochs: 200,
            lr: 0.01,
            batch_size: 4,
            weight_decay: 1e-6,
            momentum: 0.9,
            seed,
            augment: false,
        };
        let dir = tempfile::tempdir().unwrap();
        match train(&ds, &run, dir.path(), |_| {}) {
            Ok((model, _)) => {
                let s = overfit_stats(&model, &ds);
                let ok = s.noun_acc >= 0.95
                    && s.verb_acc >= 0.90
                    && s.mean_iou >= 0.5
                    && s.mean_dttc <= 0.25;
                passes += ok as usize;
                lines.push(format!(
                    "seed {seed}: noun {:.2} verb {:.2} iou {:.3} dttc {:.3}s {}",
                    s.noun_acc,
                    s.verb_acc,
                    s.mean_iou,
                    s.mean_dttc,
                    if ok { "ok" } else { "miss" }
                ));
            }
            Err(e) => lines.push(format!("seed {seed}: diverged ({e})")),
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = passes >= 2 && elapsed < 600.0;
    let detail = format!("{}; {passes}/3 seeds, {elapsed:.0}s", lines.join("; "));
    assert!(verdict(4, "synthetic overfit", pass, &detail), "{detail}");
}

/// Exact AP of one combo column, parsed back from the report's rational.
fn exact_ap(summary: &EvalSummary, label: &str) -> Option<BigRational> {
    let combo = summary.combos.iter().find(|c| c.combo == label).expect("combo in report");
    combo.ap_exact.as_ref().map(|(n, d)| {
        BigRational::new(n.parse::<BigInt>().expect("numer"), d.parse::<BigInt>().expect("denom"))
    })
}

fn ablation_splits() -> (Dataset, Dataset) {
    let cfg = SynthConfig { jitter: 0.05, ..SynthConfig::default() };
    let train_ds: Dataset = generate_synthetic(11, 64, &cfg).unwrap();
    let eval_ds: Dataset = generate_synthetic(12, 256, &cfg).unwrap();
    (train_ds, eval_ds)
}

fn ablation_train_config(fusion: FusionMode, seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.model.fusion = fusion;
    run.train = TrainConfig {
        epochs: 40,
        lr: 0.005,
        batch_size: 4,
        weight_decay: 1e-6,
        momentum: 0.9,
        seed,
        augment: false,
    };
    run
}

#[test]
fn criterion_5_ablation_direction() {
    let start = Instant::now();
    let (train_ds, eval_ds) = ablation_splits();
    let zero = || BigRational::new(BigInt::from(0), BigInt::from(1));
    let mut sums = Vec::new();
    let mut lines = Vec::new();
    for fusion in [FusionMode::Guided, FusionMode::Concat] {
        let mut sum = zero();
        for seed in [0u64, 1, 2] {
            let run = ablation_train_config(fusion, seed);
            let dir = tempfile::tempdir().unwrap();
            let (model, _) = train(&train_ds, &run, dir.path(), |_| {}).expect("arm trains");
            let summary = evaluate_model(&model, &eval_ds).expect("arm evaluates");
            let ap = exact_ap(&summary, "b+v+ttc").expect("populated column");
            lines.push(format!(
                "{fusion:?} seed {seed} ap {:.4}",
                summary.combos.iter().find(|c| c.combo == "b+v+ttc").unwrap().ap.unwrap()
            ));
            sum += ap;
        }
        sums.push(sum);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = sums[0] >= sums[1] && elapsed < 1800.0;
    let detail = format!(
        "mean guided {:.4} vs concat {:.4} over 3 seeds; {}; {elapsed:.0}s",
        nextact::metrics::ratio_to_f64(&sums[0]) / 3.0,
        nextact::metrics::ratio_to_f64(&sums[1]) / 3.0,
        lines.join("; ")
    );
    assert!(verdict(5, "ablation direction", pass, &detail), "{detail}");
}

#[test]
fn criterion_6_protocol_fidelity() {
    let (train_ds, eval_ds) = ablation_splits();

    // Detector-box records derive the box and noun columns from the
    // detections alone, so every fusion arm and seed, trained or not, must
    // report the same first two columns down to the exact rational.
    let mut summaries: Vec<(String, EvalSummary)> = Vec::new();
    for (fusion, seed) in [
        (FusionMode::Guided, 0u64),
        (FusionMode::Guided, 1),
        (FusionMode::Concat, 0),
        (FusionMode::Concat, 1),
        (FusionMode::None, 0),
    ] {
        let mut cfg = ModelConfig::default();
        cfg.fusion = fusion;
        let model: StaModel<f64> = StaModel::new(cfg, &mut rng(seed)).unwrap();
        summaries.push((
            format!("fresh {fusion:?} seed {seed}"),
            evaluate_model(&model, &eval_ds).unwrap(),
        ));
    }
    let mut run = ablation_train_config(FusionMode::Guided, 0);
    run.train.epochs = 5;
    let dir = tempfile::tempdir().unwrap();
    let (trained, _) = train(&train_ds, &run, dir.path(), |_| {}).expect("reference arm trains");
    summaries.push(("trained Guided seed 0".into(), evaluate_model(&trained, &eval_ds).unwrap()));

    let reference: Vec<(Option<BigRational>, Option<f64>)> = ["b", "b+n"]
        .iter()
        .map(|label| {
            let c = summaries[0].1.combos.iter().find(|c| &c.combo == label).unwrap();
            (exact_ap(&summaries[0].1, label), c.ap)
        })
        .collect();
    let mut pass = true;
    for (name, summary) in &summaries[1..] {
        for (k, label) in ["b", "b+n"].iter().enumerate() {
            let c = summary.combos.iter().find(|c| &c.combo == label).unwrap();
            let same = exact_ap(summary, label) == reference[k].0
                && c.ap.map(f64::to_bits) == reference[k].1.map(f64::to_bits);
            if !same {
                println!("  divergent column {label} in {name}");
            }
            pass &= same;
        }
    }
    let detail = format!(
        "b and b+n identical across {} arms, ap(b) {:.6}",
        summaries.len(),
        reference[0].1.unwrap()
    );
    assert!(verdict(6, "protocol fidelity", pass, &detail), "{detail}");
}

fn run_cli(args: &[&str]) {
    let exe = env!("CARGO_BIN_EXE_nextact");
    let out = Command::new(exe).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    files
}

#[test]
fn criterion_7_determinism() {
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for root in &roots {
        let data = root.path().join("data");
        let run = root.path().join("run");
        let eval = root.path().join("eval");
        let ckpt = run.join("checkpoint.gck");
        run_cli(&[
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "5",
            "--clips",
            "8",
            "--frame-size",
            "16",
        ]);
        run_cli(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--epochs",
            "4",
            "--lr",
            "0.005",
            "--momentum",
            "0.9",
        ]);
        run_cli(&[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            eval.to_str().unwrap(),
        ]);
    }
    let a = dir_files(roots[0].path());
    let b = dir_files(roots[1].path());
    let dataset_same = {
        let pick = |m: &BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
            m.iter().filter(|(k, _)| k.starts_with("data")).map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        pick(&a) == pick(&b)
    };
    let checkpoint_same = a.get("run/checkpoint.gck") == b.get("run/checkpoint.gck");
    let reports_same = a.get("eval/report.txt") == b.get("eval/report.txt")
        && a.get("eval/report.json") == b.get("eval/report.json");
    let pass = dataset_same
        && checkpoint_same
        && reports_same
        && a.contains_key("run/checkpoint.gck")
        && a.contains_key("eval/report.txt")
        && a.contains_key("eval/report.json")
        && a.keys().eq(b.keys());
    let detail = format!(
        "dataset {dataset_same}, checkpoint {checkpoint_same}, reports {reports_same} ({} files)",
        a.len()
    );
    assert!(verdict(7, "determinism", pass, &detail), "{detail}");
}
