//! Attention building blocks: plain multi-head attention, the pooled
//! ("multi-scale") residual block used by both encoder and decoder, and
//! fixed sinusoidal positional encodings over a (t, y, x) token grid.
//!
//! Everything here is a pure function of inputs and weights, so blocks can
//! be checked in isolation with finite differences and reused across
//! fusion variants without hidden state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Divisor applied to raw attention scores before the softmax.
///
/// `Dk` divides by the full head width, the default here. `SqrtDk` is the
/// conventional transformer scaling. Both are kept as an explicit switch
/// so the choice stays visible and testable instead of being buried in
/// the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    #[default]
    Dk,
    SqrtDk,
}

impl AttnScale {
    pub fn divisor(self, d_k: usize) -> f64 {
        match self {
            AttnScale::Dk => d_k as f64,
            AttnScale::SqrtDk => (d_k as f64).sqrt(),
        }
    }
}

/// Multi-head attention hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhaConfig {
    pub d_model: usize,
    pub heads: usize,
    pub attn_scale: AttnScale,
    /// Per-axis mean-pooling stride applied to the self-attention K/V token
    /// grid by [`MultiscaleBlock`]; `[1, 1, 1]` disables pooling. Plain
    /// [`MultiHeadAttention`] ignores it.
    pub kv_pool_stride: [usize; 3],
}

impl MhaConfig {
    pub fn new(d_model: usize, heads: usize) -> MhaConfig {
        MhaConfig { d_model, heads, attn_scale: AttnScale::Dk, kv_pool_stride: [1, 1, 1] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.kv_pool_stride.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "kv_pool_stride must be at least 1 per axis, got {:?}",
                self.kv_pool_stride
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Dense layer `y = x W + b` with `W: [fan_in, fan_out]`.
#[derive(Debug)]
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Linear<S>> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)?.requires_grad(),
            bias: Tensor::uniform(&[fan_out], -bound, bound, rng)?.requires_grad(),
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Learnable layer normalization over the last axis.
#[derive(Debug)]
pub struct LayerNorm<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
    eps: f64,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Result<LayerNorm<S>> {
        Ok(LayerNorm {
            gain: Tensor::full(&[d], S::one())?.requires_grad(),
            bias: Tensor::zeros(&[d])?.requires_grad(),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Two-layer feed-forward with a GELU in the middle.
#[derive(Debug)]
pub struct Mlp<S: Scalar> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(d: usize, hidden: usize, rng: &mut impl Rng) -> Result<Mlp<S>> {
        Ok(Mlp { fc1: Linear::new(d, hidden, rng)?, fc2: Linear::new(hidden, d, rng)? })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.fc1.named_parameters(&format!("{prefix}.fc1"), out);
        self.fc2.named_parameters(&format!("{prefix}.fc2"), out);
    }
}

/// Stable index order that sorts rows by their raw bit patterns,
/// lexicographically across columns. Any permutation of equal-content rows
/// maps to the same order, which is what makes attention outputs
/// bit-identical under key/value reordering.
fn canonical_row_order<S: Scalar>(t: &Tensor<S>) -> Vec<usize> {
    let shape = t.shape();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let inner = t.data_ref();
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.sort_by(|&a, &b| {
        for c in 0..cols {
            let ka = inner.data[a * cols + c].key_bits();
            let kb = inner.data[b * cols + c].key_bits();
            match ka.cmp(&kb) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    idx
}

/// Multi-head attention with learned projections.
///
/// Key/value rows are a set, not a sequence: before the projections the
/// rows are gathered into a canonical order (see [`canonical_row_order`]),
/// so callers may pass them in any order and the output is bit-identical.
/// Queries keep their order; permuting query rows permutes output rows.
#[derive(Debug)]
pub struct MultiHeadAttention<S: Scalar> {
    pub cfg: MhaConfig,
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(cfg: MhaConfig, rng: &mut impl Rng) -> Result<MultiHeadAttention<S>> {
        cfg.validate()?;
        let d = cfg.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = || -> Result<Tensor<S>> {
            Ok(Tensor::uniform(&[d, d], -bound, bound, rng)?.requires_grad())
        };
        Ok(MultiHeadAttention { cfg, w_q: w()?, w_k: w()?, w_v: w()?, w_o: w()? })
    }

    /// Builds from explicit projection matrices, used by tests that need
    /// hand-picked weights.
    pub fn from_weights(
        cfg: MhaConfig,
        w_q: Tensor<S>,
        w_k: Tensor<S>,
        w_v: Tensor<S>,
        w_o: Tensor<S>,
    ) -> Result<MultiHeadAttention<S>> {
        cfg.validate()?;
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.shape() != [cfg.d_model, cfg.d_model] {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("{name} must be [{0}, {0}], got {1:?}", cfg.d_model, w.shape()),
                ));
            }
        }
        Ok(MultiHeadAttention { cfg, w_q, w_k, w_v, w_o })
    }

    pub fn forward(&self, q_tokens: &Tensor<S>, kv_tokens: &Tensor<S>) -> Result<Tensor<S>> {
        let qs = q_tokens.shape();
        let ks = kv_tokens.shape();
        if ks.first() == Some(&0) {
            return Err(Error::EmptyKeys { op: "multi_head_attention" });
        }
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.cfg.d_model || ks[1] != self.cfg.d_model
        {
            return Err(Error::shape(
                "multi_head_attention",
                format!("want [n, {}] operands, got {qs:?} and {ks:?}", self.cfg.d_model),
            ));
        }
        let order = canonical_row_order(kv_tokens);
        let kv_sorted = if order.iter().enumerate().all(|(i, &p)| i == p) {
            kv_tokens.clone()
        } else {
            kv_tokens.index_select0(&order)?
        };
        let q = q_tokens.matmul(&self.w_q)?;
        let k = kv_sorted.matmul(&self.w_k)?;
        let v = kv_sorted.matmul(&self.w_v)?;
        let d_k = self.cfg.head_dim();
        let inv_div = 1.0 / self.cfg.attn_scale.divisor(d_k);
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = q.narrow(1, h * d_k, d_k)?;
            let kh = k.narrow(1, h * d_k, d_k)?;
            let vh = v.narrow(1, h * d_k, d_k)?;
            let scores = qh.matmul(&kh.transpose2()?)?.scale(inv_div)?;
            let weights = scores.softmax(1)?;
            heads.push(weights.matmul(&vh)?);
        }
        let merged = if heads.len() == 1 { heads.pop().expect("one head") } else { Tensor::concat(1, &heads)? };
        merged.matmul(&self.w_o)
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w_q"), self.w_q.clone()));
        out.push((format!("{prefix}.w_k"), self.w_k.clone()));
        out.push((format!("{prefix}.w_v"), self.w_v.clone()));
        out.push((format!("{prefix}.w_o"), self.w_o.clone()));
    }
}

/// Hyperparameters of one pooled-attention residual block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub mha: MhaConfig,
    /// Pooling applied to queries and the residual path, coarsening the
    /// output grid (encoder downsampling). `[1, 1, 1]` keeps resolution.
    pub q_pool_stride: [usize; 3],
    pub mlp_hidden: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        self.mha.validate()?;
        if self.q_pool_stride.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "q_pool_stride must be at least 1 per axis, got {:?}",
                self.q_pool_stride
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Pre-norm transformer block whose self-attention keys and values can be
/// mean-pooled to a coarser grid: norm, attention (K/V pooled by
/// `kv_pool_stride`, Q and the residual path pooled by `q_pool_stride`),
/// residual add, norm, MLP, residual add. With every stride at 1 this is
/// exactly a standard transformer block.
///
/// Token layout is `[t*y*x + n_extra, d]`: a (t, y, x) grid in row-major
/// order followed by `n_extra` rows that are exempt from pooling (appended
/// object tokens, learned queries). In cross-attention mode the K/V come
/// from `cross_kv` instead of the block input and must not be pooled.
#[derive(Debug)]
pub struct MultiscaleBlock<S: Scalar> {
    pub cfg: BlockConfig,
    pub norm1: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub norm2: LayerNorm<S>,
    pub mlp: Mlp<S>,
}

impl<S: Scalar> MultiscaleBlock<S> {
    pub fn new(cfg: BlockConfig, rng: &mut impl Rng) -> Result<MultiscaleBlock<S>> {
        cfg.validate()?;
        let d = cfg.mha.d_model;
        Ok(MultiscaleBlock {
            cfg,
            norm1: LayerNorm::new(d)?,
            attn: MultiHeadAttention::new(cfg.mha, rng)?,
            norm2: LayerNorm::new(d)?,
            mlp: Mlp::new(d, cfg.mlp_hidden, rng)?,
        })
    }

    /// Runs the block. Returns the new token set and its grid, which only
    /// changes when `q_pool_stride` coarsens it.
    pub fn forward(
        &self,
        tokens: &Tensor<S>,
        grid: [usize; 3],
        n_extra: usize,
        cross_kv: Option<&Tensor<S>>,
    ) -> Result<(Tensor<S>, [usize; 3])> {
        let n = grid[0] * grid[1] * grid[2] + n_extra;
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != n {
            return Err(Error::shape(
                "multiscale_attention_block",
                format!("{} tokens do not match grid {grid:?} plus {n_extra} extra", shape[0]),
            ));
        }
        let kv_stride = self.cfg.mha.kv_pool_stride;
        if cross_kv.is_some() && kv_stride != [1, 1, 1] {
            return Err(Error::Config(
                "kv pooling is a self-attention device, cross-attention K/V must use stride 1".into(),
            ));
        }
        let normed = self.norm1.forward(tokens)?;
        let kv = match cross_kv {
            Some(kv) => kv.clone(),
            None if kv_stride == [1, 1, 1] => normed.clone(),
            None => normed.grid_mean_pool(grid, kv_stride, n_extra)?.0,
        };
        let (q, residual, out_grid) = if self.cfg.q_pool_stride == [1, 1, 1] {
            (normed, tokens.clone(), grid)
        } else {
            let (q, out_grid) = normed.grid_mean_pool(grid, self.cfg.q_pool_stride, n_extra)?;
            let (residual, _) = tokens.grid_mean_pool(grid, self.cfg.q_pool_stride, n_extra)?;
            (q, residual, out_grid)
        };
        let attended = residual.add(&self.attn.forward(&q, &kv)?)?;
        let out = attended.add(&self.mlp.forward(&self.norm2.forward(&attended)?)?)?;
        Ok((out, out_grid))
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.norm1.named_parameters(&format!("{prefix}.norm1"), out);
        self.attn.named_parameters(&format!("{prefix}.attn"), out);
        self.norm2.named_parameters(&format!("{prefix}.norm2"), out);
        self.mlp.named_parameters(&format!("{prefix}.mlp"), out);
    }
}

/// Splits `d_model` into three even per-axis widths, largest first, for the
/// (t, y, x) axes of [`positional_encoding`].
pub fn pe_axis_widths(d_model: usize) -> Result<[usize; 3]> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let pairs = d_model / 2;
    let mut per_axis = [pairs / 3; 3];
    for axis in per_axis.iter_mut().take(pairs % 3) {
        *axis += 1;
    }
    if per_axis[2] == 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} too narrow to encode three axes"
        )));
    }
    Ok([2 * per_axis[0], 2 * per_axis[1], 2 * per_axis[2]])
}

/// Fixed sinusoidal encoding for a (t, y, x) token grid, one row per token
/// in row-major grid order. Each axis gets an even slice of `d_model`
/// (see [`pe_axis_widths`]) filled with interleaved sin/cos at geometric
/// wavelengths on the usual 10000 base. Every component lies in [-1, 1]
/// and the output is a pure function of `(grid, d_model)`.
pub fn positional_encoding<S: Scalar>(grid: [usize; 3], d_model: usize) -> Result<Tensor<S>> {
    if grid.iter().any(|&g| g == 0) {
        return Err(Error::Config(format!("grid extents must be positive, got {grid:?}")));
    }
    let widths = pe_axis_widths(d_model)?;
    let axis_enc = |extent: usize, width: usize| -> Vec<f64> {
        let mut enc = vec![0.0; extent * width];
        for p in 0..extent {
            for i in 0..width / 2 {
                let rate = 10000f64.powf(-2.0 * i as f64 / width as f64);
                let angle = p as f64 * rate;
                enc[p * width + 2 * i] = angle.sin();
                enc[p * width + 2 * i + 1] = angle.cos();
            }
        }
        enc
    };
    let enc_t = axis_enc(grid[0], widths[0]);
    let enc_y = axis_enc(grid[1], widths[1]);
    let enc_x = axis_enc(grid[2], widths[2]);
    let rows = grid[0] * grid[1] * grid[2];
    let mut data = Vec::with_capacity(rows * d_model);
    for tt in 0..grid[0] {
        for yy in 0..grid[1] {
            for xx in 0..grid[2] {
                data.extend(enc_t[tt * widths[0]..(tt + 1) * widths[0]].iter().map(|&v| S::cast_from(v)));
                data.extend(enc_y[yy * widths[1]..(yy + 1) * widths[1]].iter().map(|&v| S::cast_from(v)));
                data.extend(enc_x[xx * widths[2]..(xx + 1) * widths[2]].iter().map(|&v| S::cast_from(v)));
            }
        }
    }
    Tensor::from_vec(&[rows, d_model], data)
}
