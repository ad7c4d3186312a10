//! Detection-guided fusion: object boxes from an off-the-shelf detector are
//! embedded with a small MLP and injected into the patch-token sequence,
//! either through residual cross-attention (patches query objects) or by
//! plain concatenation as extra tokens. With no detections both paths leave
//! the token sequence unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Linear, MhaConfig, MultiHeadAttention};
use crate::data::{canonical_det_cmp, BoxCwh, Detection};
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// How detector output is folded into the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Residual cross-attention from patch tokens to object embeddings.
    #[default]
    Guided,
    /// Object embeddings appended to the sequence as extra tokens.
    Concat,
    /// Detections ignored entirely.
    None,
}

/// Which detections each token time-slice attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceScope {
    /// Tokens of a time slice see only detections from the input frames
    /// that produced the slice.
    #[default]
    PerFrame,
    /// Every token sees every detection in the clip.
    Global,
}

/// Projects a normalized box `[cx, cy, w, h]` into model width.
#[derive(Debug)]
pub struct BoxEmbedder<S: Scalar> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> BoxEmbedder<S> {
    pub fn new(hidden: usize, d_model: usize, rng: &mut impl Rng) -> Result<BoxEmbedder<S>> {
        if hidden == 0 || d_model == 0 {
            return Err(Error::Config("box embedder widths must be positive".into()));
        }
        Ok(BoxEmbedder { fc1: Linear::new(4, hidden, rng)?, fc2: Linear::new(hidden, d_model, rng)? })
    }

    /// Embeds a batch of boxes as `[m, d_model]`. None when `boxes` is empty.
    pub fn embed(&self, boxes: &[BoxCwh]) -> Result<Option<Tensor<S>>> {
        if boxes.is_empty() {
            return Ok(None);
        }
        let mut feats = Vec::with_capacity(boxes.len() * 4);
        for b in boxes {
            b.validate()?;
            feats.extend([s::<S>(b.cx), s(b.cy), s(b.w), s(b.h)]);
        }
        let x = Tensor::from_vec(&[boxes.len(), 4], feats)?;
        Ok(Some(self.fc2.forward(&self.fc1.forward(&x)?.gelu()?)?))
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.fc1.named_parameters(&format!("{prefix}.fc1"), out);
        self.fc2.named_parameters(&format!("{prefix}.fc2"), out);
    }
}

/// Per-input-frame object embeddings for one clip. Detections are put in
/// canonical order before embedding, so any permutation of the input list
/// produces identical rows.
#[derive(Debug)]
pub struct ObjectEmbedding<S: Scalar> {
    frames: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> ObjectEmbedding<S> {
    pub fn from_detections(
        embedder: &BoxEmbedder<S>,
        detections: &[Detection],
        n_frames: usize,
    ) -> Result<ObjectEmbedding<S>> {
        let mut sorted = detections.to_vec();
        sorted.sort_by(canonical_det_cmp);
        let mut frames = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let boxes: Vec<BoxCwh> =
                sorted.iter().filter(|d| d.frame == t).map(|d| d.bbox).collect();
            frames.push(embedder.embed(&boxes)?);
        }
        for d in &sorted {
            if d.frame >= n_frames {
                return Err(Error::Data(format!(
                    "detection frame {} out of range for {n_frames} frames",
                    d.frame
                )));
            }
        }
        Ok(ObjectEmbedding { frames })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Total number of embedded objects across all frames.
    pub fn count(&self) -> usize {
        self.frames.iter().flatten().map(|t| t.shape()[0]).sum()
    }

    /// Embeddings of frames `lo..hi` stacked as `[m, d]`, or None when the
    /// window contains no detections.
    pub fn concat_range(&self, lo: usize, hi: usize) -> Result<Option<Tensor<S>>> {
        if lo >= hi || hi > self.frames.len() {
            return Err(Error::contract(
                "object_embedding",
                format!("frame window {lo}..{hi} invalid for {} frames", self.frames.len()),
            ));
        }
        let parts: Vec<Tensor<S>> = self.frames[lo..hi].iter().flatten().cloned().collect();
        match parts.len() {
            0 => Ok(None),
            1 => Ok(Some(parts.into_iter().next().expect("one part"))),
            _ => Ok(Some(Tensor::concat(0, &parts)?)),
        }
    }

    /// All embeddings in the clip as one `[m, d]` tensor.
    pub fn all(&self) -> Result<Option<Tensor<S>>> {
        if self.frames.is_empty() {
            return Ok(None);
        }
        self.concat_range(0, self.frames.len())
    }
}

/// Residual cross-attention from patch tokens to object embeddings.
#[derive(Debug)]
pub struct GuidedFusion<S: Scalar> {
    pub embedder: BoxEmbedder<S>,
    pub attn: MultiHeadAttention<S>,
    pub scope: GuidanceScope,
}

impl<S: Scalar> GuidedFusion<S> {
    pub fn new(
        mha: MhaConfig,
        embed_hidden: usize,
        scope: GuidanceScope,
        rng: &mut impl Rng,
    ) -> Result<GuidedFusion<S>> {
        if mha.kv_pool_stride != [1, 1, 1] {
            return Err(Error::Config("guided fusion does not pool its keys".into()));
        }
        Ok(GuidedFusion {
            embedder: BoxEmbedder::new(embed_hidden, mha.d_model, rng)?,
            attn: MultiHeadAttention::new(mha, rng)?,
            scope,
        })
    }

    /// Fuses object embeddings into `tokens` (`[n, d]`, laid out time-major
    /// over `grid`). `frame_windows[t]` is the input-frame range that token
    /// time-slice `t` was computed from; Global scope ignores the windows.
    /// Slices with no visible objects pass through bit-identically.
    pub fn fuse(
        &self,
        tokens: &Tensor<S>,
        grid: [usize; 3],
        frame_windows: &[(usize, usize)],
        objects: &ObjectEmbedding<S>,
    ) -> Result<Tensor<S>> {
        let n = grid[0] * grid[1] * grid[2];
        if tokens.shape().first() != Some(&n) {
            return Err(Error::shape(
                "guided_fusion",
                format!("tokens {:?} do not cover grid {grid:?}", tokens.shape()),
            ));
        }
        match self.scope {
            GuidanceScope::Global => match objects.all()? {
                None => Ok(tokens.clone()),
                Some(kv) => tokens.add(&self.attn.forward(tokens, &kv)?),
            },
            GuidanceScope::PerFrame => {
                if frame_windows.len() != grid[0] {
                    return Err(Error::contract(
                        "guided_fusion",
                        format!(
                            "need one frame window per time slice: {} vs {}",
                            frame_windows.len(),
                            grid[0]
                        ),
                    ));
                }
                let rows = grid[1] * grid[2];
                let mut any = false;
                let mut slices = Vec::with_capacity(grid[0]);
                for (t, &(lo, hi)) in frame_windows.iter().enumerate() {
                    let q = tokens.narrow(0, t * rows, rows)?;
                    match objects.concat_range(lo, hi)? {
                        None => slices.push(q),
                        Some(kv) => {
                            any = true;
                            slices.push(q.add(&self.attn.forward(&q, &kv)?)?);
                        }
                    }
                }
                if !any {
                    return Ok(tokens.clone());
                }
                if slices.len() == 1 {
                    return Ok(slices.pop().expect("one slice"));
                }
                Tensor::concat(0, &slices)
            }
        }
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.embedder.named_parameters(&format!("{prefix}.embed"), out);
        self.attn.named_parameters(&format!("{prefix}.attn"), out);
    }
}

/// Appends object embeddings to the token sequence. Returns the widened
/// sequence and the number of appended rows.
pub fn concat_fusion<S: Scalar>(
    tokens: &Tensor<S>,
    objects: &ObjectEmbedding<S>,
) -> Result<(Tensor<S>, usize)> {
    match objects.all()? {
        None => Ok((tokens.clone(), 0)),
        Some(extra) => {
            let m = extra.shape()[0];
            Ok((Tensor::concat(0, &[tokens.clone(), extra])?, m))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn det(frame: usize, cx: f64, cy: f64, noun: usize) -> Detection {
        Detection { frame, bbox: BoxCwh::new(cx, cy, 0.2, 0.2), noun, score: 1.0 }
    }

    fn tokens(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng(seed)).unwrap()
    }

    fn fusion(d: usize, heads: usize, scope: GuidanceScope, seed: u64) -> GuidedFusion<f64> {
        GuidedFusion::new(MhaConfig::new(d, heads), 6, scope, &mut rng(seed)).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.to_vec().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn embedder_validates_and_handles_empty() {
        let e: BoxEmbedder<f64> = BoxEmbedder::new(6, 8, &mut rng(0)).unwrap();
        assert!(e.embed(&[]).unwrap().is_none());
        let out = e.embed(&[BoxCwh::new(0.5, 0.5, 0.2, 0.2)]).unwrap().unwrap();
        assert_eq!(out.shape(), vec![1, 8]);
        let bad = BoxCwh { cx: 1.5, cy: 0.5, w: 0.2, h: 0.2 };
        assert!(e.embed(&[bad]).is_err());
    }

    #[test]
    fn grouping_follows_frames() {
        let e: BoxEmbedder<f64> = BoxEmbedder::new(6, 8, &mut rng(0)).unwrap();
        let dets = [det(0, 0.3, 0.3, 0), det(2, 0.7, 0.7, 1), det(0, 0.5, 0.5, 2)];
        let obj = ObjectEmbedding::from_detections(&e, &dets, 3).unwrap();
        assert_eq!(obj.n_frames(), 3);
        assert_eq!(obj.count(), 3);
        assert_eq!(obj.concat_range(0, 1).unwrap().unwrap().shape(), vec![2, 8]);
        assert!(obj.concat_range(1, 2).unwrap().is_none());
        assert_eq!(obj.all().unwrap().unwrap().shape(), vec![3, 8]);

        let late = [det(5, 0.3, 0.3, 0)];
        assert!(ObjectEmbedding::from_detections(&e, &late, 3).is_err());
    }

    #[test]
    fn no_detections_leave_tokens_unchanged() {
        let f = fusion(8, 2, GuidanceScope::Global, 1);
        let toks = tokens(6, 8, 2);
        let obj = ObjectEmbedding::from_detections(&f.embedder, &[], 3).unwrap();
        let fused = f.fuse(&toks, [3, 1, 2], &[(0, 1), (1, 2), (2, 3)], &obj).unwrap();
        assert_eq!(fused.id(), toks.id(), "empty guidance must be the identity");

        let (cat, extra) = concat_fusion(&toks, &obj).unwrap();
        assert_eq!(extra, 0);
        assert_eq!(cat.id(), toks.id());
    }

    #[test]
    fn single_object_matches_broadcast_oracle() {
        // One key row makes every attention weight exactly 1, so the fused
        // output must be tokens + (embed(box) * w_v) * w_o on every row.
        let f = fusion(8, 2, GuidanceScope::Global, 3);
        let toks = tokens(5, 8, 4);
        let dets = [det(0, 0.4, 0.6, 0)];
        let obj = ObjectEmbedding::from_detections(&f.embedder, &dets, 1).unwrap();
        let fused = f.fuse(&toks, [1, 1, 5], &[(0, 1)], &obj).unwrap();

        let emb = f.embedder.embed(&[dets[0].bbox]).unwrap().unwrap();
        let extra = emb.matmul(&f.attn.w_v).unwrap().matmul(&f.attn.w_o).unwrap().to_vec();
        let t = toks.to_vec();
        let got = fused.to_vec();
        for i in 0..5 {
            for j in 0..8 {
                let want = t[i * 8 + j] + extra[j];
                assert_eq!(got[i * 8 + j].to_bits(), want.to_bits(), "row {i} col {j}");
            }
        }
    }

    #[test]
    fn per_frame_scope_limits_influence() {
        let f = fusion(8, 2, GuidanceScope::PerFrame, 5);
        let toks = tokens(4, 8, 6);
        // Grid [2,1,2]: rows 0..2 come from input frame 0, rows 2..4 from
        // frame 1. The only object sits in frame 0.
        let obj = ObjectEmbedding::from_detections(&f.embedder, &[det(0, 0.3, 0.3, 0)], 2).unwrap();
        let fused = f.fuse(&toks, [2, 1, 2], &[(0, 1), (1, 2)], &obj).unwrap();
        let orig = toks.to_vec();
        let got = fused.to_vec();
        assert!(
            (0..16).any(|i| got[i].to_bits() != orig[i].to_bits()),
            "guided slice must move"
        );
        for i in 16..32 {
            assert_eq!(got[i].to_bits(), orig[i].to_bits(), "unguided slice must not move");
        }
    }

    #[test]
    fn detection_order_cannot_change_the_output() {
        for scope in [GuidanceScope::Global, GuidanceScope::PerFrame] {
            let f = fusion(8, 2, scope, 7);
            let toks = tokens(8, 8, 8);
            let dets = vec![
                det(0, 0.3, 0.3, 0),
                det(0, 0.7, 0.4, 1),
                det(1, 0.5, 0.6, 0),
                det(3, 0.2, 0.8, 2),
            ];
            let mut shuffled = dets.clone();
            shuffled.reverse();
            shuffled.swap(0, 2);
            let windows = [(0, 2), (2, 4)];
            let a = ObjectEmbedding::from_detections(&f.embedder, &dets, 4).unwrap();
            let b = ObjectEmbedding::from_detections(&f.embedder, &shuffled, 4).unwrap();
            let fa = f.fuse(&toks, [2, 2, 2], &windows, &a).unwrap();
            let fb = f.fuse(&toks, [2, 2, 2], &windows, &b).unwrap();
            assert_eq!(bits(&fa), bits(&fb), "guided fuse must ignore list order ({scope:?})");

            let (ca, ma) = concat_fusion(&toks, &a).unwrap();
            let (cb, mb) = concat_fusion(&toks, &b).unwrap();
            assert_eq!(ma, mb);
            assert_eq!(bits(&ca), bits(&cb), "concat fuse must ignore list order");
        }
    }

    #[test]
    fn concat_appends_one_row_per_object() {
        let f = fusion(8, 2, GuidanceScope::Global, 9);
        let toks = tokens(8, 8, 10);
        let dets = [det(0, 0.3, 0.3, 0), det(1, 0.5, 0.5, 1), det(1, 0.7, 0.7, 0)];
        let obj = ObjectEmbedding::from_detections(&f.embedder, &dets, 2).unwrap();
        let (cat, extra) = concat_fusion(&toks, &obj).unwrap();
        assert_eq!(extra, 3);
        assert_eq!(cat.shape(), vec![11, 8]);
        assert_eq!(bits(&cat)[..64], bits(&toks)[..], "original rows stay in place");
    }

    #[test]
    fn fused_tokens_depend_on_objects() {
        let f = fusion(8, 2, GuidanceScope::Global, 11);
        let toks = tokens(4, 8, 12);
        let a = ObjectEmbedding::from_detections(&f.embedder, &[det(0, 0.2, 0.2, 0)], 1).unwrap();
        let b = ObjectEmbedding::from_detections(&f.embedder, &[det(0, 0.8, 0.8, 0)], 1).unwrap();
        let fa = f.fuse(&toks, [1, 2, 2], &[(0, 1)], &a).unwrap();
        let fb = f.fuse(&toks, [1, 2, 2], &[(0, 1)], &b).unwrap();
        let diff: f64 = fa
            .to_vec()
            .iter()
            .zip(fb.to_vec())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6, "different boxes must steer tokens differently");
    }

    #[test]
    fn fuse_gradients_check_out() {
        let f = fusion(6, 2, GuidanceScope::PerFrame, 13);
        let dets = [det(0, 0.3, 0.4, 0), det(1, 0.6, 0.5, 1)];
        let obj = ObjectEmbedding::from_detections(&f.embedder, &dets, 2).unwrap();
        let x = tokens(4, 6, 14).requires_grad();
        let pin = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng(15)).unwrap();
        let report = grad_check(
            |t| {
                let fused = f.fuse(t, [2, 1, 2], &[(0, 1), (1, 2)], &obj)?;
                fused.mul(&pin)?.sum_all()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn gradients_reach_the_box_embedder() {
        let f = fusion(6, 2, GuidanceScope::Global, 16);
        let toks = tokens(3, 6, 17);
        let obj = ObjectEmbedding::from_detections(&f.embedder, &[det(0, 0.4, 0.4, 0)], 1).unwrap();
        let loss = f.fuse(&toks, [1, 1, 3], &[(0, 1)], &obj).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let g = f.embedder.fc1.weight.grad().expect("embedder must be in the graph");
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn fusion_mode_names_are_stable() {
        let m: FusionMode = serde_json::from_str("\"guided\"").unwrap();
        assert_eq!(m, FusionMode::Guided);
        assert_eq!(serde_json::to_string(&GuidanceScope::PerFrame).unwrap(), "\"per_frame\"");
        assert_eq!(serde_json::to_string(&FusionMode::Concat).unwrap(), "\"concat\"");
    }
}
