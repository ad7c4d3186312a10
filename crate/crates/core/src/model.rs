//! The anticipation network: 3D-conv patch tokenizer, detection-guided
//! fusion, multiscale encoder, ROI-query decoder, and four prediction heads
//! (noun, verb, box, time to contact). One forward pass consumes one clip
//! and emits a fixed budget of `k_q` predictions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    positional_encoding, AttnScale, BlockConfig, Linear, MhaConfig, MultiscaleBlock,
};
use crate::data::{canonical_det_cmp, BoxCwh, Clip, Detection};
use crate::error::{Error, Result};
use crate::fusion::{concat_fusion, BoxEmbedder, FusionMode, GuidanceScope, GuidedFusion, ObjectEmbedding};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Which heads drive the emitted predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Box and noun are copied from the detector; the model learns verb and
    /// time to contact. Prediction confidence is the detector score (the
    /// copied noun is a point mass, so "max noun probability" is 1).
    #[default]
    DetectorBox,
    /// All four heads are live; confidence is the maximum foreground noun
    /// probability.
    PredictBoxes,
}

/// Hyperparameters of the full network. Everything is checked once at
/// construction; forward passes assume a valid config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub t_in: usize,
    pub frame_size: usize,
    pub patch_kernel: [usize; 3],
    pub patch_stride: [usize; 3],
    pub d_model: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    /// Query budget: detections in the last frame seed ROI queries, the
    /// rest of the budget is learnable.
    pub k_q: usize,
    pub mlp_hidden: usize,
    /// Hidden width of the box-embedding MLP.
    pub embed_hidden: usize,
    pub n_nouns: usize,
    pub n_verbs: usize,
    pub fusion: FusionMode,
    pub guidance_scope: GuidanceScope,
    pub attn_scale: AttnScale,
    pub output_mode: OutputMode,
    /// Query pooling of the first encoder block; `[1,1,1]` keeps the grid.
    pub enc_pool_stride: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            t_in: 8,
            frame_size: 32,
            patch_kernel: [2, 8, 8],
            patch_stride: [2, 8, 8],
            d_model: 64,
            enc_blocks: 2,
            dec_blocks: 2,
            heads: 4,
            k_q: 8,
            mlp_hidden: 128,
            embed_hidden: 32,
            n_nouns: 4,
            n_verbs: 4,
            fusion: FusionMode::Guided,
            guidance_scope: GuidanceScope::PerFrame,
            attn_scale: AttnScale::Dk,
            output_mode: OutputMode::DetectorBox,
            enc_pool_stride: [1, 1, 1],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("t_in", self.t_in),
            ("frame_size", self.frame_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("k_q", self.k_q),
            ("mlp_hidden", self.mlp_hidden),
            ("embed_hidden", self.embed_hidden),
            ("n_nouns", self.n_nouns),
            ("n_verbs", self.n_verbs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let extents = [self.t_in, self.frame_size, self.frame_size];
        let axes = ["time", "height", "width"];
        for i in 0..3 {
            if self.patch_kernel[i] == 0 || self.patch_stride[i] == 0 {
                return Err(Error::Config(format!("patch kernel/stride {} must be positive", axes[i])));
            }
            if self.patch_kernel[i] > extents[i] {
                return Err(Error::Config(format!(
                    "patch kernel {} ({}) exceeds the {} extent {}",
                    axes[i], self.patch_kernel[i], axes[i], extents[i]
                )));
            }
            let rem = (extents[i] - self.patch_kernel[i]) % self.patch_stride[i];
            if rem != 0 {
                return Err(Error::Config(format!(
                    "{} extent {} does not tile with kernel {} stride {}; pad by {}",
                    axes[i],
                    extents[i],
                    self.patch_kernel[i],
                    self.patch_stride[i],
                    self.patch_stride[i] - rem
                )));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must split evenly over {} heads",
                self.d_model, self.heads
            )));
        }
        if self.enc_pool_stride.iter().any(|&v| v == 0) {
            return Err(Error::Config("enc_pool_stride must be at least 1 per axis".into()));
        }
        crate::attention::pe_axis_widths(self.d_model)?;
        Ok(())
    }

    /// Token grid produced by the patch tokenizer.
    pub fn token_grid(&self) -> [usize; 3] {
        let dim = |extent: usize, i: usize| (extent - self.patch_kernel[i]) / self.patch_stride[i] + 1;
        [dim(self.t_in, 0), dim(self.frame_size, 1), dim(self.frame_size, 2)]
    }

    /// Input-frame window `[lo, hi)` feeding token time-slice `t`.
    pub fn frame_window(&self, t: usize) -> (usize, usize) {
        let lo = t * self.patch_stride[0];
        (lo, (lo + self.patch_kernel[0]).min(self.t_in))
    }

    fn mha(&self) -> MhaConfig {
        MhaConfig {
            d_model: self.d_model,
            heads: self.heads,
            attn_scale: self.attn_scale,
            kv_pool_stride: [1, 1, 1],
        }
    }

    fn block(&self, q_pool: [usize; 3]) -> BlockConfig {
        BlockConfig { mha: self.mha(), q_pool_stride: q_pool, mlp_hidden: self.mlp_hidden }
    }
}

/// Whether a decoder query was seeded from a detection or is learnable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryMeta {
    Roi(Detection),
    Learned,
}

/// Raw head outputs for one clip, kept as tensors so losses can backprop.
#[derive(Debug)]
pub struct ModelOutput<S: Scalar> {
    /// `[k_q, n_nouns + 1]`; the last column is the background class.
    pub noun_logits: Tensor<S>,
    /// `[k_q, n_verbs]`.
    pub verb_logits: Tensor<S>,
    /// `[k_q, 4]`, sigmoid-bounded `(cx, cy, w, h)`.
    pub boxes: Tensor<S>,
    /// `[k_q, 1]`, softplus-bounded seconds.
    pub ttc: Tensor<S>,
    pub queries: Vec<QueryMeta>,
}

/// One emitted anticipation: where the next active object is, what it is,
/// what will happen to it, and when.
#[derive(Debug, Clone, PartialEq)]
pub struct StaPrediction {
    pub bbox: BoxCwh,
    pub noun: usize,
    pub verb: usize,
    pub ttc: f64,
    pub confidence: f64,
    /// The detection backing this query, when it is ROI-seeded.
    pub roi: Option<Detection>,
}

#[derive(Debug)]
enum FusionStage<S: Scalar> {
    Guided(GuidedFusion<S>),
    Concat(BoxEmbedder<S>),
    None,
}

/// The full anticipation network.
#[derive(Debug)]
pub struct StaModel<S: Scalar> {
    pub cfg: ModelConfig,
    patch_kernel: Tensor<S>,
    patch_bias: Tensor<S>,
    pos_enc: Tensor<S>,
    fusion: FusionStage<S>,
    enc: Vec<MultiscaleBlock<S>>,
    query_embed: Tensor<S>,
    dec_self: Vec<MultiscaleBlock<S>>,
    dec_cross: Vec<MultiscaleBlock<S>>,
    noun_head: Linear<S>,
    verb_head: Linear<S>,
    box_head: Linear<S>,
    ttc_head: Linear<S>,
}

impl<S: Scalar> StaModel<S> {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<StaModel<S>> {
        cfg.validate()?;
        let [kt, kh, kw] = cfg.patch_kernel;
        let fan_in = (cfg.in_channels * kt * kh * kw) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let patch_kernel =
            Tensor::uniform(&[cfg.d_model, cfg.in_channels, kt, kh, kw], -bound, bound, rng)?
                .requires_grad();
        let patch_bias = Tensor::uniform(&[cfg.d_model], -bound, bound, rng)?.requires_grad();
        let pos_enc = positional_encoding(cfg.token_grid(), cfg.d_model)?;
        let fusion = match cfg.fusion {
            FusionMode::Guided => FusionStage::Guided(GuidedFusion::new(
                cfg.mha(),
                cfg.embed_hidden,
                cfg.guidance_scope,
                rng,
            )?),
            FusionMode::Concat => {
                FusionStage::Concat(BoxEmbedder::new(cfg.embed_hidden, cfg.d_model, rng)?)
            }
            FusionMode::None => FusionStage::None,
        };
        let mut enc = Vec::with_capacity(cfg.enc_blocks);
        for i in 0..cfg.enc_blocks {
            let pool = if i == 0 { cfg.enc_pool_stride } else { [1, 1, 1] };
            enc.push(MultiscaleBlock::new(cfg.block(pool), rng)?);
        }
        let qbound = 1.0 / (cfg.d_model as f64).sqrt();
        let query_embed =
            Tensor::uniform(&[cfg.k_q, cfg.d_model], -qbound, qbound, rng)?.requires_grad();
        let mut dec_self = Vec::with_capacity(cfg.dec_blocks);
        let mut dec_cross = Vec::with_capacity(cfg.dec_blocks);
        for _ in 0..cfg.dec_blocks {
            dec_self.push(MultiscaleBlock::new(cfg.block([1, 1, 1]), rng)?);
            dec_cross.push(MultiscaleBlock::new(cfg.block([1, 1, 1]), rng)?);
        }
        Ok(StaModel {
            cfg,
            patch_kernel,
            patch_bias,
            pos_enc,
            fusion,
            enc,
            query_embed,
            dec_self,
            dec_cross,
            noun_head: Linear::new(cfg.d_model, cfg.n_nouns + 1, rng)?,
            verb_head: Linear::new(cfg.d_model, cfg.n_verbs, rng)?,
            box_head: Linear::new(cfg.d_model, 4, rng)?,
            ttc_head: Linear::new(cfg.d_model, 1, rng)?,
        })
    }

    /// 3D-conv patch embedding, flattened time-major to `[n, d_model]`.
    /// Positional encoding is added by `forward`, not here.
    pub fn tokenize(&self, frames: &Tensor<S>) -> Result<(Tensor<S>, [usize; 3])> {
        let want = [self.cfg.in_channels, self.cfg.t_in, self.cfg.frame_size, self.cfg.frame_size];
        if frames.shape() != want {
            return Err(Error::shape(
                "tokenize",
                format!("frames must be {want:?}, got {:?}", frames.shape()),
            ));
        }
        let grid = self.cfg.token_grid();
        let fmap = frames.conv3d(
            &self.patch_kernel,
            Some(&self.patch_bias),
            self.cfg.patch_stride,
            [0, 0, 0],
        )?;
        let n = grid[0] * grid[1] * grid[2];
        let tokens = fmap.reshape(&[self.cfg.d_model, n])?.transpose2()?;
        Ok((tokens, grid))
    }

    /// Last-frame detections that seed ROI queries: highest score first
    /// (canonical order inside a tie), truncated to the query budget.
    pub fn retained_detections(&self, clip: &Clip<S>) -> Vec<Detection> {
        let mut last: Vec<Detection> = clip
            .detections
            .iter()
            .filter(|d| d.frame == self.cfg.t_in - 1)
            .copied()
            .collect();
        last.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).expect("finite scores").then(canonical_det_cmp(a, b))
        });
        last.truncate(self.cfg.k_q);
        last
    }

    /// Builds the `k_q` decoder queries from encoder memory. Each detection
    /// box pools the last-time-slice tokens whose cell centers fall inside
    /// it (nearest cell when none do); remaining slots are learnable rows.
    pub fn build_queries(
        &self,
        memory: &Tensor<S>,
        grid: [usize; 3],
        detections: &[Detection],
    ) -> Result<(Tensor<S>, Vec<QueryMeta>)> {
        if detections.len() > self.cfg.k_q {
            return Err(Error::contract(
                "build_queries",
                format!("{} detections exceed the query budget {}", detections.len(), self.cfg.k_q),
            ));
        }
        let (gh, gw) = (grid[1], grid[2]);
        let slice_start = (grid[0] - 1) * gh * gw;
        let mut rows = Vec::with_capacity(self.cfg.k_q);
        let mut meta = Vec::with_capacity(self.cfg.k_q);
        for det in detections {
            let (x1, y1, x2, y2) = det.bbox.corners();
            let mut cells = Vec::new();
            for y in 0..gh {
                let cy = (y as f64 + 0.5) / gh as f64;
                for x in 0..gw {
                    let cx = (x as f64 + 0.5) / gw as f64;
                    if cx >= x1 && cx <= x2 && cy >= y1 && cy <= y2 {
                        cells.push(slice_start + y * gw + x);
                    }
                }
            }
            if cells.is_empty() {
                let mut best = (f64::INFINITY, 0);
                for y in 0..gh {
                    let cy = (y as f64 + 0.5) / gh as f64;
                    for x in 0..gw {
                        let cx = (x as f64 + 0.5) / gw as f64;
                        let d2 = (cx - det.bbox.cx).powi(2) + (cy - det.bbox.cy).powi(2);
                        if d2 < best.0 {
                            best = (d2, slice_start + y * gw + x);
                        }
                    }
                }
                cells.push(best.1);
            }
            let pooled = memory.index_select0(&cells)?;
            let weights = Tensor::full(&[1, cells.len()], s::<S>(1.0 / cells.len() as f64))?;
            rows.push(weights.matmul(&pooled)?);
            meta.push(QueryMeta::Roi(*det));
        }
        for slot in detections.len()..self.cfg.k_q {
            rows.push(self.query_embed.narrow(0, slot, 1)?);
            meta.push(QueryMeta::Learned);
        }
        let queries =
            if rows.len() == 1 { rows.pop().expect("one query") } else { Tensor::concat(0, &rows)? };
        Ok((queries, meta))
    }

    /// Full forward pass for one clip.
    pub fn forward(&self, clip: &Clip<S>) -> Result<ModelOutput<S>> {
        let (tokens, grid) = self.tokenize(&clip.frames)?;
        let tokens = tokens.add(&self.pos_enc)?;
        let (mut tokens, n_extra) = match &self.fusion {
            FusionStage::Guided(g) => {
                let objects =
                    ObjectEmbedding::from_detections(&g.embedder, &clip.detections, self.cfg.t_in)?;
                let windows: Vec<(usize, usize)> =
                    (0..grid[0]).map(|t| self.cfg.frame_window(t)).collect();
                (g.fuse(&tokens, grid, &windows, &objects)?, 0)
            }
            FusionStage::Concat(embedder) => {
                let objects =
                    ObjectEmbedding::from_detections(embedder, &clip.detections, self.cfg.t_in)?;
                concat_fusion(&tokens, &objects)?
            }
            FusionStage::None => (tokens, 0),
        };
        let mut grid = grid;
        for block in &self.enc {
            let (t, g) = block.forward(&tokens, grid, n_extra, None)?;
            tokens = t;
            grid = g;
        }
        let memory = tokens;
        let detections = self.retained_detections(clip);
        let (mut queries, meta) = self.build_queries(&memory, grid, &detections)?;
        let q_grid = [self.cfg.k_q, 1, 1];
        for (sb, cb) in self.dec_self.iter().zip(&self.dec_cross) {
            queries = sb.forward(&queries, q_grid, 0, None)?.0;
            queries = cb.forward(&queries, q_grid, 0, Some(&memory))?.0;
        }
        Ok(ModelOutput {
            noun_logits: self.noun_head.forward(&queries)?,
            verb_logits: self.verb_head.forward(&queries)?,
            boxes: self.box_head.forward(&queries)?.sigmoid()?,
            ttc: self.ttc_head.forward(&queries)?.softplus()?,
            queries: meta,
        })
    }

    /// Forward pass reduced to plain-value predictions, applying the
    /// output-mode rules for boxes, nouns, and confidence.
    pub fn predict(&self, clip: &Clip<S>) -> Result<Vec<StaPrediction>> {
        let out = self.forward(clip)?;
        decode_predictions(&self.cfg, &out)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        out.push(("patch.kernel".to_string(), self.patch_kernel.clone()));
        out.push(("patch.bias".to_string(), self.patch_bias.clone()));
        match &self.fusion {
            FusionStage::Guided(g) => g.named_parameters("fusion", &mut out),
            FusionStage::Concat(e) => e.named_parameters("fusion.embed", &mut out),
            FusionStage::None => {}
        }
        for (i, b) in self.enc.iter().enumerate() {
            b.named_parameters(&format!("enc{i}"), &mut out);
        }
        out.push(("query_embed".to_string(), self.query_embed.clone()));
        for i in 0..self.dec_self.len() {
            self.dec_self[i].named_parameters(&format!("dec{i}.self"), &mut out);
            self.dec_cross[i].named_parameters(&format!("dec{i}.cross"), &mut out);
        }
        self.noun_head.named_parameters("head.noun", &mut out);
        self.verb_head.named_parameters("head.verb", &mut out);
        self.box_head.named_parameters("head.box", &mut out);
        self.ttc_head.named_parameters("head.ttc", &mut out);
        out
    }
}

/// Softmax of one logit row, in f64.
fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Applies the output-mode rules to raw head outputs.
pub fn decode_predictions<S: Scalar>(
    cfg: &ModelConfig,
    out: &ModelOutput<S>,
) -> Result<Vec<StaPrediction>> {
    let nouns = out.noun_logits.to_vec();
    let verbs = out.verb_logits.to_vec();
    let boxes = out.boxes.to_vec();
    let ttcs = out.ttc.to_vec();
    let n_cols = cfg.n_nouns + 1;
    let mut preds = Vec::with_capacity(cfg.k_q);
    for (k, meta) in out.queries.iter().enumerate() {
        let noun_row: Vec<f64> =
            nouns[k * n_cols..(k + 1) * n_cols].iter().map(|v| v.cast_f64()).collect();
        let verb_row: Vec<f64> = verbs[k * cfg.n_verbs..(k + 1) * cfg.n_verbs]
            .iter()
            .map(|v| v.cast_f64())
            .collect();
        let noun_probs = softmax_row(&noun_row);
        let fg = &noun_probs[..cfg.n_nouns];
        let noun_top = argmax(fg);
        let verb_top = argmax(&verb_row);
        let ttc = ttcs[k].cast_f64();
        let head_box = BoxCwh {
            cx: boxes[k * 4].cast_f64(),
            cy: boxes[k * 4 + 1].cast_f64(),
            w: boxes[k * 4 + 2].cast_f64(),
            h: boxes[k * 4 + 3].cast_f64(),
        };
        let pred = match (cfg.output_mode, meta) {
            (OutputMode::DetectorBox, QueryMeta::Roi(det)) => StaPrediction {
                bbox: det.bbox,
                noun: det.noun,
                verb: verb_top,
                ttc,
                confidence: det.score,
                roi: Some(*det),
            },
            (OutputMode::DetectorBox, QueryMeta::Learned) => StaPrediction {
                bbox: head_box,
                noun: noun_top,
                verb: verb_top,
                ttc,
                confidence: fg[noun_top],
                roi: None,
            },
            (OutputMode::PredictBoxes, m) => StaPrediction {
                bbox: head_box,
                noun: noun_top,
                verb: verb_top,
                ttc,
                confidence: fg[noun_top],
                roi: match m {
                    QueryMeta::Roi(det) => Some(*det),
                    QueryMeta::Learned => None,
                },
            },
        };
        preds.push(pred);
    }
    Ok(preds)
}
