//! Gradient-integrity battery: every differentiable block is checked
//! against 64-bit central finite differences across several seeds. Block
//! outputs are reduced to a scalar through a fixed random projection so
//! sign errors cannot cancel the way they would under a plain sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnScale, BlockConfig, Linear, MhaConfig, MultiHeadAttention, MultiscaleBlock};
use crate::data::{BoxCwh, Detection, NaoTarget};
use crate::error::Result;
use crate::fusion::{GuidanceScope, GuidedFusion, ObjectEmbedding};
use crate::loss::{clip_loss, LossConfig};
use crate::model::{ModelConfig, ModelOutput, OutputMode, QueryMeta};
use crate::tensor::{grad_check, Tensor};

/// Acceptance threshold on the worst relative error of a block.
pub const TOLERANCE: f64 = 1e-4;

/// Central-difference step; coarse enough to dominate 64-bit roundoff.
const H: f64 = 1e-5;

/// Worst relative error observed for one block across all seeds.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub block: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

pub fn default_seeds() -> Vec<u64> {
    vec![11, 22, 33, 44, 55]
}

type T = Tensor<f64>;

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt))
}

fn reduce(y: &T, coeffs: &T) -> Result<T> {
    y.mul(coeffs)?.sum_all()
}

fn check_conv3d(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 1);
    let x = T::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng)?.requires_grad();
    let kernel = T::uniform(&[3, 2, 2, 3, 3], -0.5, 0.5, &mut rng)?.requires_grad();
    let bias = T::uniform(&[3], -0.5, 0.5, &mut rng)?;
    let coeffs = T::uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng)?;
    let padded = T::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng)?;
    let wrt_input = grad_check(
        |x| reduce(&x.conv3d(&kernel, Some(&bias), [1, 2, 2], [0, 0, 0])?, &coeffs),
        &x,
        H,
    )?;
    let wrt_kernel = grad_check(
        |k| reduce(&x.conv3d(k, Some(&bias), [1, 2, 2], [0, 0, 0])?, &coeffs),
        &kernel,
        H,
    )?;
    let wrt_input_padded = grad_check(
        |x| reduce(&x.conv3d(&kernel, Some(&bias), [1, 2, 2], [0, 1, 1])?, &padded),
        &x,
        H,
    )?;
    Ok(wrt_input.max_rel_err.max(wrt_kernel.max_rel_err).max(wrt_input_padded.max_rel_err))
}

fn check_layer_norm(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 2);
    let x = T::uniform(&[3, 6], -2.0, 2.0, &mut rng)?.requires_grad();
    let gain = T::uniform(&[6], 0.5, 1.5, &mut rng)?.requires_grad();
    let bias = T::uniform(&[6], -0.5, 0.5, &mut rng)?;
    let coeffs = T::uniform(&[3, 6], -1.0, 1.0, &mut rng)?;
    let wrt_x = grad_check(|x| reduce(&x.layer_norm(&gain, &bias, 1e-5)?, &coeffs), &x, H)?;
    let wrt_gain = grad_check(|g| reduce(&x.layer_norm(g, &bias, 1e-5)?, &coeffs), &gain, H)?;
    Ok(wrt_x.max_rel_err.max(wrt_gain.max_rel_err))
}

fn check_attention(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 3);
    let mha: MultiHeadAttention<f64> = MultiHeadAttention::new(MhaConfig::new(8, 2), &mut rng)?;
    let q = T::uniform(&[4, 8], -1.0, 1.0, &mut rng)?.requires_grad();
    let kv = T::uniform(&[3, 8], -1.0, 1.0, &mut rng)?.requires_grad();
    let coeffs = T::uniform(&[4, 8], -1.0, 1.0, &mut rng)?;
    let mut worst = grad_check(|q| reduce(&mha.forward(q, &kv)?, &coeffs), &q, H)?.max_rel_err;
    worst = worst.max(grad_check(|kv| reduce(&mha.forward(&q, kv)?, &coeffs), &kv, H)?.max_rel_err);
    let mut params = Vec::new();
    mha.named_parameters("mha", &mut params);
    for (name, p) in &params {
        if name.ends_with("w_q") || name.ends_with("w_o") {
            let rep = grad_check(|_| reduce(&mha.forward(&q, &kv)?, &coeffs), p, H)?;
            worst = worst.max(rep.max_rel_err);
        }
    }
    // The square-root scale variant shares the code path but not the
    // divisor; check it through the query gradient.
    let sqrt_cfg = MhaConfig { attn_scale: AttnScale::SqrtDk, ..MhaConfig::new(8, 2) };
    let sqrt_mha: MultiHeadAttention<f64> = MultiHeadAttention::new(sqrt_cfg, &mut rng)?;
    worst = worst
        .max(grad_check(|q| reduce(&sqrt_mha.forward(q, &kv)?, &coeffs), &q, H)?.max_rel_err);
    Ok(worst)
}

fn check_guided_attention(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 4);
    let dets = vec![
        Detection { frame: 0, bbox: BoxCwh::new(0.3, 0.4, 0.2, 0.2), noun: 0, score: 0.9 },
        Detection { frame: 1, bbox: BoxCwh::new(0.6, 0.5, 0.3, 0.2), noun: 1, score: 0.8 },
        Detection { frame: 3, bbox: BoxCwh::new(0.5, 0.7, 0.2, 0.3), noun: 2, score: 0.7 },
    ];
    let grid = [2, 2, 2];
    let windows = [(0, 2), (2, 4)];
    let tokens = T::uniform(&[8, 8], -1.0, 1.0, &mut rng)?.requires_grad();
    let coeffs = T::uniform(&[8, 8], -1.0, 1.0, &mut rng)?;
    let mut worst = 0.0f64;
    for scope in [GuidanceScope::PerFrame, GuidanceScope::Global] {
        let fusion: GuidedFusion<f64> =
            GuidedFusion::new(MhaConfig::new(8, 2), 6, scope, &mut rng)?;
        let run = |tokens: &T| {
            let objects = ObjectEmbedding::from_detections(&fusion.embedder, &dets, 4)?;
            reduce(&fusion.fuse(tokens, grid, &windows, &objects)?, &coeffs)
        };
        worst = worst.max(grad_check(run, &tokens, H)?.max_rel_err);
        let mut params = Vec::new();
        fusion.named_parameters("fusion", &mut params);
        for (name, p) in &params {
            if name.ends_with("fc1.weight") {
                worst = worst.max(grad_check(|_| run(&tokens), p, H)?.max_rel_err);
            }
        }
    }
    Ok(worst)
}

fn check_multiscale_block(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 5);
    // Pooling arm: both query and key grids halve in space, two extra
    // tokens ride along past the pooling.
    let cfg = BlockConfig {
        mha: MhaConfig { kv_pool_stride: [1, 2, 2], ..MhaConfig::new(8, 2) },
        q_pool_stride: [1, 2, 2],
        mlp_hidden: 16,
    };
    let block: MultiscaleBlock<f64> = MultiscaleBlock::new(cfg, &mut rng)?;
    let tokens = T::uniform(&[34, 8], -1.0, 1.0, &mut rng)?.requires_grad();
    let coeffs = T::uniform(&[10, 8], -1.0, 1.0, &mut rng)?;
    let grid = [2, 4, 4];
    let mut worst = grad_check(
        |t| reduce(&block.forward(t, grid, 2, None)?.0, &coeffs),
        &tokens,
        H,
    )?
    .max_rel_err;
    let mut params = Vec::new();
    block.named_parameters("block", &mut params);
    for (name, p) in &params {
        if name.ends_with("mlp.fc1.weight") {
            let rep =
                grad_check(|_| reduce(&block.forward(&tokens, grid, 2, None)?.0, &coeffs), p, H)?;
            worst = worst.max(rep.max_rel_err);
        }
    }
    // Cross-attention arm, as the decoder uses it.
    let dec_cfg = BlockConfig { mha: MhaConfig::new(8, 2), q_pool_stride: [1, 1, 1], mlp_hidden: 16 };
    let dec: MultiscaleBlock<f64> = MultiscaleBlock::new(dec_cfg, &mut rng)?;
    let queries = T::uniform(&[3, 8], -1.0, 1.0, &mut rng)?.requires_grad();
    let memory = T::uniform(&[6, 8], -1.0, 1.0, &mut rng)?.requires_grad();
    let dec_coeffs = T::uniform(&[3, 8], -1.0, 1.0, &mut rng)?;
    worst = worst.max(
        grad_check(
            |q| reduce(&dec.forward(q, [3, 1, 1], 0, Some(&memory))?.0, &dec_coeffs),
            &queries,
            H,
        )?
        .max_rel_err,
    );
    worst = worst.max(
        grad_check(
            |m| reduce(&dec.forward(&queries, [3, 1, 1], 0, Some(m))?.0, &dec_coeffs),
            &memory,
            H,
        )?
        .max_rel_err,
    );
    Ok(worst)
}

fn check_head(seed: u64, salt: u64, out_width: usize, act: fn(&T) -> Result<T>) -> Result<f64> {
    let mut rng = rng_for(seed, salt);
    let head: Linear<f64> = Linear::new(8, out_width, &mut rng)?;
    let x = T::uniform(&[3, 8], -1.0, 1.0, &mut rng)?.requires_grad();
    let coeffs = T::uniform(&[3, out_width], -1.0, 1.0, &mut rng)?;
    let run = |x: &T| reduce(&act(&head.forward(x)?)?, &coeffs);
    let mut worst = grad_check(run, &x, H)?.max_rel_err;
    let mut params = Vec::new();
    head.named_parameters("head", &mut params);
    for (_, p) in &params {
        worst = worst.max(grad_check(|_| run(&x), p, H)?.max_rel_err);
    }
    Ok(worst)
}

fn check_noun_head(seed: u64) -> Result<f64> {
    check_head(seed, 6, 5, |t| Ok(t.clone()))
}

fn check_verb_head(seed: u64) -> Result<f64> {
    check_head(seed, 7, 4, |t| Ok(t.clone()))
}

fn check_box_head(seed: u64) -> Result<f64> {
    check_head(seed, 8, 4, |t| t.sigmoid())
}

fn check_ttc_head(seed: u64) -> Result<f64> {
    check_head(seed, 9, 1, |t| t.softplus())
}

fn check_cross_entropy(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 10);
    let logits = T::uniform(&[5], -2.0, 2.0, &mut rng)?.requires_grad();
    let rep = grad_check(|l| l.cross_entropy(2), &logits, H)?;
    Ok(rep.max_rel_err)
}

fn check_smooth_l1(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 11);
    // Spread across the quadratic and linear branches of the knee.
    let pred = T::uniform(&[6], -3.0, 3.0, &mut rng)?.requires_grad();
    let target = T::uniform(&[6], -0.5, 0.5, &mut rng)?;
    let rep = grad_check(|p| p.smooth_l1(&target, 1.0), &pred, H)?;
    Ok(rep.max_rel_err)
}

fn check_mse(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 12);
    let pred = T::uniform(&[6], -1.0, 1.0, &mut rng)?.requires_grad();
    let target = T::uniform(&[6], -1.0, 1.0, &mut rng)?;
    let rep = grad_check(
        |p| {
            let d = p.sub(&target)?;
            d.mul(&d)?.sum_all()
        },
        &pred,
        H,
    )?;
    Ok(rep.max_rel_err)
}

/// The full multi-task objective, probed through each of the four output
/// tensors in both output modes and both regression bindings.
fn check_composite_loss(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 13);
    let targets = [
        NaoTarget { bbox: BoxCwh::new(0.35, 0.4, 0.2, 0.25), noun: 1, verb: 0, ttc: 0.8 },
        NaoTarget { bbox: BoxCwh::new(0.7, 0.6, 0.25, 0.2), noun: 2, verb: 2, ttc: 1.4 },
    ];
    let noun = T::uniform(&[3, 4], -1.0, 1.0, &mut rng)?.requires_grad();
    let verb = T::uniform(&[3, 3], -1.0, 1.0, &mut rng)?.requires_grad();
    let boxes = T::uniform(&[3, 4], 0.2, 0.8, &mut rng)?.requires_grad();
    let ttc = T::uniform(&[3, 1], 0.5, 1.5, &mut rng)?.requires_grad();
    let mut worst = 0.0f64;
    for (mode, swap) in [
        (OutputMode::PredictBoxes, false),
        (OutputMode::PredictBoxes, true),
        (OutputMode::DetectorBox, false),
    ] {
        let cfg = ModelConfig { n_nouns: 3, n_verbs: 3, k_q: 3, output_mode: mode, ..ModelConfig::default() };
        let loss_cfg = LossConfig { swap_regression: swap, ..LossConfig::default() };
        let queries = match mode {
            OutputMode::PredictBoxes => {
                vec![QueryMeta::Learned, QueryMeta::Learned, QueryMeta::Learned]
            }
            OutputMode::DetectorBox => vec![
                QueryMeta::Roi(Detection {
                    frame: 7,
                    bbox: BoxCwh::new(0.35, 0.4, 0.2, 0.25),
                    noun: 1,
                    score: 0.9,
                }),
                QueryMeta::Roi(Detection {
                    frame: 7,
                    bbox: BoxCwh::new(0.7, 0.6, 0.25, 0.2),
                    noun: 2,
                    score: 0.8,
                }),
                QueryMeta::Learned,
            ],
        };
        let run = |n: &T, v: &T, b: &T, t: &T| {
            let out = ModelOutput {
                noun_logits: n.clone(),
                verb_logits: v.clone(),
                boxes: b.clone(),
                ttc: t.clone(),
                queries: queries.clone(),
            };
            Ok(clip_loss(&out, &targets, &cfg, &loss_cfg)?.expect("loss present").total)
        };
        worst = worst
            .max(grad_check(|x| run(x, &verb, &boxes, &ttc), &noun, H)?.max_rel_err)
            .max(grad_check(|x| run(&noun, x, &boxes, &ttc), &verb, H)?.max_rel_err)
            .max(grad_check(|x| run(&noun, &verb, x, &ttc), &boxes, H)?.max_rel_err)
            .max(grad_check(|x| run(&noun, &verb, &boxes, x), &ttc, H)?.max_rel_err);
    }
    Ok(worst)
}

/// Runs every block across the given seeds, reporting the worst relative
/// error per block. Empty seed lists are rejected.
pub fn run_battery(seeds: &[u64]) -> Result<Vec<BlockReport>> {
    if seeds.is_empty() {
        return Err(crate::error::Error::Config("gradient battery needs at least one seed".into()));
    }
    let blocks: [(&'static str, fn(u64) -> Result<f64>); 13] = [
        ("conv3d", check_conv3d),
        ("layer_norm", check_layer_norm),
        ("attention", check_attention),
        ("guided_attention", check_guided_attention),
        ("multiscale_block", check_multiscale_block),
        ("head.noun", check_noun_head),
        ("head.verb", check_verb_head),
        ("head.box", check_box_head),
        ("head.ttc", check_ttc_head),
        ("loss.cross_entropy", check_cross_entropy),
        ("loss.smooth_l1", check_smooth_l1),
        ("loss.mse", check_mse),
        ("loss.composite", check_composite_loss),
    ];
    let mut reports = Vec::with_capacity(blocks.len());
    for (name, f) in blocks {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(f(seed)?);
        }
        reports.push(BlockReport { block: name, seeds: seeds.len(), max_rel_err: worst });
    }
    Ok(reports)
}

/// One line per block, matching the CLI output.
pub fn format_battery(reports: &[BlockReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "{:<20} seeds {:>2}  max rel err {:>12.3e}  {}\n",
            r.block,
            r.seeds,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_on_default_seeds() {
        let reports = run_battery(&default_seeds()).unwrap();
        assert_eq!(reports.len(), 13);
        for r in &reports {
            assert!(r.passed(), "{} failed with max rel err {}", r.block, r.max_rel_err);
            assert!(r.max_rel_err.is_finite());
        }
    }

    #[test]
    fn battery_rejects_empty_seed_list() {
        assert!(run_battery(&[]).is_err());
    }

    #[test]
    fn report_formatting_flags_failures() {
        let reports = vec![
            BlockReport { block: "conv3d", seeds: 5, max_rel_err: 1e-9 },
            BlockReport { block: "attention", seeds: 5, max_rel_err: 0.5 },
        ];
        let text = format_battery(&reports);
        assert!(text.contains("conv3d"));
        assert!(text.lines().next().unwrap().ends_with("ok"));
        assert!(text.lines().nth(1).unwrap().ends_with("FAIL"));
    }
}
