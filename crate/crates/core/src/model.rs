//! Decoder-only transformer (pre-LN, GPT-2 layout) with a tied LM head and a
//! match classifier on the `<EOS>` feature. Forward and backward passes are
//! written out by hand in f64 so gradients can be checked against finite
//! differences.

use std::fs;
use std::io::{self, Write as _};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::grounding::{active_domain, db_state, GroundingError, KnowledgeBase};
use crate::serializer::{
    make_contrastive, ContrastPool, SerializeError, SpanRole, TrainingSequence, TurnExample,
};
use crate::tokenizer::Vocab;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const CHECKPOINT_MAGIC: &[u8; 8] = b"SOLOCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("batch has no {0} targets")]
    EmptyMask(&'static str),
    #[error("row {0} has no contrast label")]
    MissingLabel(usize),
    #[error("span {0:?} is empty")]
    EmptySpan(SpanRole),
    #[error("non-finite loss at step {step}: belief {belief}, response {response}, contrastive {contrastive}")]
    NonFinite {
        step: usize,
        belief: f64,
        response: f64,
        contrastive: f64,
    },
    #[error("no training sequences")]
    EmptyCorpus,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match the expected config")]
    ConfigMismatch,
    #[error("no domain to ground dialog {0} in")]
    NoDomain(String),
    #[error(transparent)]
    Serialize(#[from] SerializeError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub belief: f64,
    pub response: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            belief: 1.0,
            response: 1.0,
            contrastive: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Stop the classifier gradient at the head instead of the full trunk.
    pub contrast_head_only: bool,
    pub position_init: PositionInit,
}

/// Starting values of the learned position table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionInit {
    /// Sinusoids with the same per-dimension spread as the token embeddings.
    #[default]
    Sinusoidal,
    Normal,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            max_len: 512,
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            dropout: 0.0,
            seed: 0,
            loss_weights: LossWeights::default(),
            contrast_head_only: false,
            position_init: PositionInit::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size == 0 || self.max_len == 0 || self.layers == 0 || self.d_ff == 0 {
            return err("vocab_size, max_len, layers and d_ff must be positive");
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return err("d_model must be a positive multiple of heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub w_fc: Array2<f64>,
    pub b_fc: Array2<f64>,
    pub w_proj: Array2<f64>,
    pub b_proj: Array2<f64>,
}

impl LayerParams {
    fn named(&self) -> [(&'static str, &Array2<f64>); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 12] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("w_qkv", &mut self.w_qkv),
            ("b_qkv", &mut self.b_qkv),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w_fc", &mut self.w_fc),
            ("b_fc", &mut self.b_fc),
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
        ]
    }
}

/// All learnable weights. Biases and norm parameters are `1×n` rows. The
/// same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub wte: Array2<f64>,
    pub wpe: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array2<f64>,
    pub lnf_b: Array2<f64>,
    pub w_match: Array2<f64>,
    pub b_match: Array2<f64>,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn sinusoids(rows: usize, cols: usize, amplitude: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(pos, j)| {
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / cols as f64);
        let angle = pos as f64 * freq;
        amplitude * if j % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

impl ModelParams {
    /// Random initialization: N(0, 0.02) weights, residual projections scaled
    /// by 1/sqrt(2·layers), unit norms, zero biases and a zero match head.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.d_model, config.d_ff);
        let proj_std = 0.02 / ((2 * config.layers) as f64).sqrt();
        let wte = normal(config.vocab_size, d, 0.02, &mut rng);
        let wpe = match config.position_init {
            PositionInit::Normal => normal(config.max_len, d, 0.01, &mut rng),
            PositionInit::Sinusoidal => sinusoids(config.max_len, d, 0.02 * std::f64::consts::SQRT_2),
        };
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_g: Array2::ones((1, d)),
                ln1_b: Array2::zeros((1, d)),
                w_qkv: normal(d, 3 * d, 0.02, &mut rng),
                b_qkv: Array2::zeros((1, 3 * d)),
                w_o: normal(d, d, proj_std, &mut rng),
                b_o: Array2::zeros((1, d)),
                ln2_g: Array2::ones((1, d)),
                ln2_b: Array2::zeros((1, d)),
                w_fc: normal(d, f, 0.02, &mut rng),
                b_fc: Array2::zeros((1, f)),
                w_proj: normal(f, d, proj_std, &mut rng),
                b_proj: Array2::zeros((1, d)),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            wte,
            wpe,
            layers,
            lnf_g: Array2::ones((1, d)),
            lnf_b: Array2::zeros((1, d)),
            w_match: Array2::zeros((d, 1)),
            b_match: Array2::zeros((1, 1)),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("h{i}.{n}"), t)));
        }
        out.extend([
            ("lnf_g".to_string(), &self.lnf_g),
            ("lnf_b".to_string(), &self.lnf_b),
            ("w_match".to_string(), &self.w_match),
            ("b_match".to_string(), &self.b_match),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("wte".to_string(), &mut self.wte),
            ("wpe".to_string(), &mut self.wpe),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("h{i}.{n}"), t)),
            );
        }
        out.extend([
            ("lnf_g".to_string(), &mut self.lnf_g),
            ("lnf_b".to_string(), &mut self.lnf_b),
            ("w_match".to_string(), &mut self.w_match),
            ("b_match".to_string(), &mut self.b_match),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Building blocks

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * rstd.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &mean_dxhat.insert_axis(Axis(1));
    dx -= &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
    dx * cache.rstd.view().insert_axis(Axis(1))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln softmax(logits)[target]`.
pub fn nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn add_bias(x: &mut Array2<f64>, b: &Array2<f64>) {
    *x += b;
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Forward / backward over one sequence

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    att: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    mlp_mask: Option<Array2<f64>>,
}

struct Trunk {
    tokens: Vec<u32>,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    xf: Array2<f64>,
}

impl ModelParams {
    fn trunk_forward(
        &self,
        tokens: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Trunk, ModelError> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t_len = tokens.len();
        let (d, heads) = (cfg.d_model, cfg.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = cfg.dropout;
        let mut mask_for = |shape: (usize, usize)| -> Option<Array2<f64>> {
            match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some(dropout_mask(shape, p, r)),
                _ => None,
            }
        };

        let mut x = Array2::zeros((t_len, d));
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &self.wte.row(tok as usize);
            row += &self.wpe.row(t);
        }
        let emb_mask = mask_for((t_len, d));
        if let Some(m) = &emb_mask {
            x *= m;
        }

        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (h1, ln1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
            let mut qkv = h1.dot(&layer.w_qkv);
            add_bias(&mut qkv, &layer.b_qkv);
            let mut ctx = Array2::zeros((t_len, d));
            let mut att = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut scores = q.dot(&k.t());
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if j > i { f64::NEG_INFINITY } else { *s * scale };
                    }
                    softmax_in_place(row.as_slice_mut().expect("contiguous row"));
                }
                ctx.slice_mut(s![.., h * dh..(h + 1) * dh])
                    .assign(&scores.dot(&v));
                att.push(scores);
            }
            let mut o = ctx.dot(&layer.w_o);
            add_bias(&mut o, &layer.b_o);
            let attn_mask = mask_for((t_len, d));
            if let Some(m) = &attn_mask {
                o *= m;
            }
            x += &o;

            let (h2, ln2) = layer_norm(&x, &layer.ln2_g, &layer.ln2_b);
            let mut f = h2.dot(&layer.w_fc);
            add_bias(&mut f, &layer.b_fc);
            let g = f.mapv(gelu);
            let mut m = g.dot(&layer.w_proj);
            add_bias(&mut m, &layer.b_proj);
            let mlp_mask = mask_for((t_len, d));
            if let Some(mm) = &mlp_mask {
                m *= mm;
            }
            x += &m;

            caches.push(LayerCache {
                ln1,
                h1,
                qkv,
                att,
                ctx,
                attn_mask,
                ln2,
                h2,
                f,
                g,
                mlp_mask,
            });
        }
        let (xf, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        Ok(Trunk {
            tokens: tokens.to_vec(),
            emb_mask,
            layers: caches,
            lnf,
            xf,
        })
    }

    fn trunk_backward(&self, trunk: &Trunk, dxf: &Array2<f64>, grads: &mut ModelParams) {
        let cfg = &self.config;
        let (d, heads) = (cfg.d_model, cfg.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = layer_norm_backward(
            dxf,
            &trunk.lnf,
            &self.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );
        for (li, (layer, cache)) in self.layers.iter().zip(&trunk.layers).enumerate().rev() {
            let gl = &mut grads.layers[li];

            // MLP branch
            let mut dm = dx.clone();
            if let Some(mask) = &cache.mlp_mask {
                dm *= mask;
            }
            general_mat_mul(1.0, &cache.g.t(), &dm, 1.0, &mut gl.w_proj);
            gl.b_proj += &dm.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut df = dm.dot(&layer.w_proj.t());
            df.zip_mut_with(&cache.f, |g, &f| *g *= gelu_grad(f));
            general_mat_mul(1.0, &cache.h2.t(), &df, 1.0, &mut gl.w_fc);
            gl.b_fc += &df.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dh2 = df.dot(&layer.w_fc.t());
            dx += &layer_norm_backward(&dh2, &cache.ln2, &layer.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);

            // Attention branch
            let mut d_o = dx.clone();
            if let Some(mask) = &cache.attn_mask {
                d_o *= mask;
            }
            general_mat_mul(1.0, &cache.ctx.t(), &d_o, 1.0, &mut gl.w_o);
            gl.b_o += &d_o.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dctx = d_o.dot(&layer.w_o.t());
            let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
            for h in 0..heads {
                let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
                let q = cache.qkv.slice(s![.., qs..qs + dh]);
                let k = cache.qkv.slice(s![.., ks..ks + dh]);
                let v = cache.qkv.slice(s![.., vs..vs + dh]);
                let a = &cache.att[h];
                let dctx_h = dctx.slice(s![.., qs..qs + dh]);
                let da = dctx_h.dot(&v.t());
                dqkv.slice_mut(s![.., vs..vs + dh]).assign(&a.t().dot(&dctx_h));
                let row_dot = (&da * a).sum_axis(Axis(1));
                let mut ds = da - &row_dot.insert_axis(Axis(1));
                ds *= a;
                ds *= scale;
                dqkv.slice_mut(s![.., qs..qs + dh]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![.., ks..ks + dh]).assign(&ds.t().dot(&q));
            }
            general_mat_mul(1.0, &cache.h1.t(), &dqkv, 1.0, &mut gl.w_qkv);
            gl.b_qkv += &dqkv.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dh1 = dqkv.dot(&layer.w_qkv.t());
            dx += &layer_norm_backward(&dh1, &cache.ln1, &layer.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        }

        if let Some(mask) = &trunk.emb_mask {
            dx *= mask;
        }
        for (t, &tok) in trunk.tokens.iter().enumerate() {
            let mut row = grads.wte.row_mut(tok as usize);
            row += &dx.row(t);
            let mut row = grads.wpe.row_mut(t);
            row += &dx.row(t);
        }
    }

    fn match_logit(&self, feature: ndarray::ArrayView1<f64>) -> f64 {
        feature.dot(&self.w_match.column(0)) + self.b_match[[0, 0]]
    }
}

// ---------------------------------------------------------------------------
// Batches and losses

/// One training row. A target position `t` is predicted from the logits at
/// `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub tokens: Vec<u32>,
    pub belief_targets: Vec<usize>,
    pub response_targets: Vec<usize>,
    pub label: Option<bool>,
    pub eos: usize,
}

/// Rows are kept at their own lengths; every computation is row-local, so
/// this is equivalent to a padded matrix with a validity mask.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub rows: Vec<BatchRow>,
}

impl Batch {
    /// Negatives (label false) contribute only to the contrastive loss; their
    /// belief and response masks are empty.
    pub fn from_sequences<'a>(
        seqs: impl IntoIterator<Item = &'a TrainingSequence>,
        vocab: &Vocab,
    ) -> Self {
        let rows = seqs
            .into_iter()
            .map(|s| {
                let positive = s.contrast_label != Some(false);
                BatchRow {
                    tokens: s.tokens.clone(),
                    belief_targets: if positive { s.belief_targets(vocab) } else { Vec::new() },
                    response_targets: if positive { s.response_targets(vocab) } else { Vec::new() },
                    label: s.contrast_label,
                    eos: s.eos_position(),
                }
            })
            .collect();
        Batch { rows }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `T×V` next-token logits per row.
    pub logits: Vec<Array2<f64>>,
    pub eos_features: Vec<Array1<f64>>,
    pub match_logits: Vec<f64>,
    pub match_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub belief: f64,
    pub response: f64,
    pub contrastive: f64,
    pub joint: f64,
}

impl LossParts {
    fn is_finite(&self) -> bool {
        self.belief.is_finite() && self.response.is_finite() && self.contrastive.is_finite()
    }
}

impl ModelParams {
    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput, ModelError> {
        let mut out = ForwardOutput {
            logits: Vec::new(),
            eos_features: Vec::new(),
            match_logits: Vec::new(),
            match_probs: Vec::new(),
        };
        for row in &batch.rows {
            let trunk = self.trunk_forward(&row.tokens, None)?;
            if row.eos >= row.tokens.len() {
                return Err(ModelError::Config(format!(
                    "eos position {} outside a row of {} tokens",
                    row.eos,
                    row.tokens.len()
                )));
            }
            let feature = trunk.xf.row(row.eos).to_owned();
            let z = self.match_logit(feature.view());
            out.logits.push(trunk.xf.dot(&self.wte.t()));
            out.eos_features.push(feature);
            out.match_logits.push(z);
            out.match_probs.push(sigmoid(z));
        }
        Ok(out)
    }

    /// Joint loss and its gradient for one batch. Loss terms whose masks are
    /// empty across the whole batch contribute zero. With `rng`, dropout is
    /// active.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossParts, ModelParams), ModelError> {
        let w = self.config.loss_weights;
        let nb: usize = batch.rows.iter().map(|r| r.belief_targets.len()).sum();
        let nr: usize = batch.rows.iter().map(|r| r.response_targets.len()).sum();
        let nc = batch.rows.iter().filter(|r| r.label.is_some()).count();
        let mut grads = self.zeros_like();
        let mut parts = LossParts::default();
        let vocab = self.config.vocab_size;

        for row in &batch.rows {
            let trunk = self.trunk_forward(&row.tokens, rng.as_deref_mut())?;
            let mut dxf = Array2::zeros(trunk.xf.raw_dim());

            let mut positions = Vec::new();
            let mut targets = Vec::new();
            let mut coefs = Vec::new();
            for &t in &row.belief_targets {
                positions.push(t - 1);
                targets.push(row.tokens[t] as usize);
                coefs.push((true, w.belief / nb as f64));
            }
            for &t in &row.response_targets {
                positions.push(t - 1);
                targets.push(row.tokens[t] as usize);
                coefs.push((false, w.response / nr as f64));
            }
            if !positions.is_empty() {
                let xp = trunk.xf.select(Axis(0), &positions);
                let mut dl = xp.dot(&self.wte.t());
                for (i, mut l) in dl.rows_mut().into_iter().enumerate() {
                    let (is_belief, coef) = coefs[i];
                    let lrow = l.as_slice_mut().expect("contiguous row");
                    let loss = nll(lrow, targets[i]);
                    if is_belief {
                        parts.belief += loss;
                    } else {
                        parts.response += loss;
                    }
                    softmax_in_place(lrow);
                    lrow[targets[i]] -= 1.0;
                    for v in lrow.iter_mut() {
                        *v *= coef;
                    }
                }
                debug_assert_eq!(dl.ncols(), vocab);
                let dxp = dl.dot(&self.wte);
                general_mat_mul(1.0, &dl.t(), &xp, 1.0, &mut grads.wte);
                for (i, &p) in positions.iter().enumerate() {
                    let mut r = dxf.row_mut(p);
                    r += &dxp.row(i);
                }
            }

            if let Some(label) = row.label {
                let y = if label { 1.0 } else { 0.0 };
                let feature = trunk.xf.row(row.eos);
                let z = self.match_logit(feature);
                parts.contrastive += softplus(z) - y * z;
                let dz = (sigmoid(z) - y) * w.contrastive / nc as f64;
                let mut gw = grads.w_match.column_mut(0);
                gw.scaled_add(dz, &feature);
                grads.b_match[[0, 0]] += dz;
                if !self.config.contrast_head_only {
                    let mut r = dxf.row_mut(row.eos);
                    r.scaled_add(dz, &self.w_match.column(0));
                }
            }
            self.trunk_backward(&trunk, &dxf, &mut grads);
        }
        if nb > 0 {
            parts.belief /= nb as f64;
        }
        if nr > 0 {
            parts.response /= nr as f64;
        }
        if nc > 0 {
            parts.contrastive /= nc as f64;
        }
        parts.joint = w.belief * parts.belief + w.response * parts.response + w.contrastive * parts.contrastive;
        Ok((parts, grads))
    }

    /// Joint loss without gradients or dropout.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<LossParts, ModelError> {
        let out = self.forward(batch)?;
        let w = self.config.loss_weights;
        let opt = |r: Result<f64, ModelError>| match r {
            Ok(v) => Ok(v),
            Err(ModelError::EmptyMask(_)) => Ok(0.0),
            Err(e) => Err(e),
        };
        let belief = opt(loss_belief(&out, batch))?;
        let response = opt(loss_response(&out, batch))?;
        let contrastive = opt(loss_contrastive(&out, batch))?;
        Ok(LossParts {
            belief,
            response,
            contrastive,
            joint: w.belief * belief + w.response * response + w.contrastive * contrastive,
        })
    }
}

fn span_nll(
    out: &ForwardOutput,
    batch: &Batch,
    pick: impl Fn(&BatchRow) -> &[usize],
    what: &'static str,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, logits) in batch.rows.iter().zip(&out.logits) {
        for &t in pick(row) {
            let l = logits.row(t - 1);
            total += nll(l.as_slice().expect("contiguous row"), row.tokens[t] as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::EmptyMask(what));
    }
    Ok(total / count as f64)
}

/// Mean NLL over belief targets (belief span and `<EOB>`) of all rows.
pub fn loss_belief(out: &ForwardOutput, batch: &Batch) -> Result<f64, ModelError> {
    span_nll(out, batch, |r| &r.belief_targets, "belief")
}

/// Mean NLL over response targets (response span and `<EOS>`) of all rows.
pub fn loss_response(out: &ForwardOutput, batch: &Batch) -> Result<f64, ModelError> {
    span_nll(out, batch, |r| &r.response_targets, "response")
}

/// Mean binary cross-entropy between the match probability and the label.
pub fn loss_contrastive(out: &ForwardOutput, batch: &Batch) -> Result<f64, ModelError> {
    if batch.rows.is_empty() {
        return Err(ModelError::EmptyMask("contrastive"));
    }
    let mut total = 0.0;
    for (i, (row, &z)) in batch.rows.iter().zip(&out.match_logits).enumerate() {
        let y = match row.label {
            Some(true) => 1.0,
            Some(false) => 0.0,
            None => return Err(ModelError::MissingLabel(i)),
        };
        total += softplus(z) - y * z;
    }
    Ok(total / batch.rows.len() as f64)
}

/// Binary cross-entropy of a probability directly, `-(y ln p + (1-y) ln(1-p))`.
pub fn bce(p: f64, y: bool) -> f64 {
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn loss_joint(
    out: &ForwardOutput,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<LossParts, ModelError> {
    let belief = loss_belief(out, batch)?;
    let response = loss_response(out, batch)?;
    let contrastive = loss_contrastive(out, batch)?;
    Ok(LossParts {
        belief,
        response,
        contrastive,
        joint: weights.belief * belief + weights.response * response + weights.contrastive * contrastive,
    })
}

// ---------------------------------------------------------------------------
// Perplexity

/// `exp` of the mean NLL over a span's tokens. Belief and response spans
/// include their closing marker.
pub fn span_perplexity(
    params: &ModelParams,
    seq: &TrainingSequence,
    role: SpanRole,
    vocab: &Vocab,
) -> Result<f64, ModelError> {
    let targets: Vec<usize> = match role {
        SpanRole::Belief => seq.belief_targets(vocab),
        SpanRole::Response => seq.response_targets(vocab),
        _ => seq
            .spans
            .iter()
            .enumerate()
            .filter(|&(i, r)| *r == role && i > 0)
            .map(|(i, _)| i)
            .collect(),
    };
    if targets.is_empty() {
        return Err(ModelError::EmptySpan(role));
    }
    let trunk = params.trunk_forward(&seq.tokens, None)?;
    let positions: Vec<usize> = targets.iter().map(|t| t - 1).collect();
    let logits = trunk.xf.select(Axis(0), &positions).dot(&params.wte.t());
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(&targets)
        .map(|(l, &t)| nll(l.as_slice().expect("contiguous row"), seq.tokens[t] as usize))
        .sum();
    Ok((total / targets.len() as f64).exp())
}

// ---------------------------------------------------------------------------
// Incremental inference

/// Per-layer keys and values of the positions fed so far.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl ModelParams {
    pub fn new_cache(&self) -> KvCache {
        let shape = (self.config.max_len, self.config.d_model);
        KvCache {
            keys: vec![Array2::zeros(shape); self.layers.len()],
            values: vec![Array2::zeros(shape); self.layers.len()],
            len: 0,
        }
    }

    /// Feed one token and return the next-token logits at its position.
    pub fn step(&self, cache: &mut KvCache, token: u32) -> Result<Array1<f64>, ModelError> {
        let cfg = &self.config;
        let pos = cache.len;
        if pos >= cfg.max_len {
            return Err(ModelError::TooLong {
                len: pos + 1,
                max_len: cfg.max_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: cfg.vocab_size,
            });
        }
        let (d, heads) = (cfg.d_model, cfg.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = (&self.wte.row(token as usize) + &self.wpe.row(pos)).insert_axis(Axis(0));
        for (li, layer) in self.layers.iter().enumerate() {
            let (h1, _) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
            let mut qkv = h1.dot(&layer.w_qkv);
            add_bias(&mut qkv, &layer.b_qkv);
            cache.keys[li].row_mut(pos).assign(&qkv.slice(s![0, d..2 * d]));
            cache.values[li].row_mut(pos).assign(&qkv.slice(s![0, 2 * d..]));
            let keys = cache.keys[li].slice(s![..=pos, ..]);
            let values = cache.values[li].slice(s![..=pos, ..]);
            let mut ctx = Array2::<f64>::zeros((1, d));
            for h in 0..heads {
                let q = qkv.slice(s![0, h * dh..(h + 1) * dh]);
                let k = keys.slice(s![.., h * dh..(h + 1) * dh]);
                let v = values.slice(s![.., h * dh..(h + 1) * dh]);
                let mut scores: Array1<f64> = k.dot(&q) * scale;
                softmax_in_place(scores.as_slice_mut().expect("contiguous"));
                ctx.slice_mut(s![0, h * dh..(h + 1) * dh])
                    .assign(&scores.dot(&v));
            }
            let mut o = ctx.dot(&layer.w_o);
            add_bias(&mut o, &layer.b_o);
            x += &o;
            let (h2, _) = layer_norm(&x, &layer.ln2_g, &layer.ln2_b);
            let mut f = h2.dot(&layer.w_fc);
            add_bias(&mut f, &layer.b_fc);
            let mut m = f.mapv(gelu).dot(&layer.w_proj);
            add_bias(&mut m, &layer.b_proj);
            x += &m;
        }
        cache.len += 1;
        let (xf, _) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        Ok(self.wte.dot(&xf.row(0)))
    }

    /// Feed a prompt and return the logits after its last token.
    pub fn prefill(&self, cache: &mut KvCache, tokens: &[u32]) -> Result<Array1<f64>, ModelError> {
        let mut last = None;
        for &t in tokens {
            last = Some(self.step(cache, t)?);
        }
        last.ok_or(ModelError::EmptyInput)
    }
}

// ---------------------------------------------------------------------------
// Optimization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Decay linearly to zero after warmup; otherwise hold `lr`.
    pub decay: bool,
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adamw,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            decay: true,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimConfig {
    /// Linear warmup over `warmup_frac` of the steps, then linear decay to zero.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1);
        let warm = (self.warmup_frac * total as f64).ceil() as usize;
        if step < warm {
            self.lr * (step + 1) as f64 / warm as f64
        } else if !self.decay {
            self.lr
        } else {
            let rest = (total - warm).max(1) as f64;
            self.lr * ((total.saturating_sub(step)) as f64 / rest).clamp(0.0, 1.0)
        }
    }
}

pub struct Optimizer {
    config: OptimConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.raw_dim()))
            .collect();
        Optimizer {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update. Weight decay is decoupled and applies to weight matrices
    /// only, not to biases or norm parameters.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let c = &self.config;
        let clip = match c.grad_clip {
            Some(max) => {
                let norm = grads
                    .tensors()
                    .iter()
                    .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, ((name, p), (_, g))) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .enumerate()
        {
            let decay = name.rsplit('.').next().is_some_and(|n| n.starts_with('w'));
            match c.kind {
                OptimizerKind::Adamw => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    ndarray::Zip::from(&mut *p)
                        .and(m)
                        .and(v)
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            let g = g * clip;
                            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                            let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                            if decay {
                                *p -= lr * c.weight_decay * *p;
                            }
                            *p -= lr * update;
                        });
                }
                OptimizerKind::Sgd => {
                    p.zip_mut_with(g, |p, &g| *p -= lr * g * clip);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub contrast_neg_prob: f64,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            max_steps: None,
            batch_size: 8,
            patience: 2,
            contrast_neg_prob: 0.5,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_joint: f64,
    pub loss_belief: f64,
    pub loss_response: f64,
    pub loss_contrastive: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_joint: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<HistoryRecord>,
    pub best_valid: Option<f64>,
    pub steps: usize,
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<(), ModelError> {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec).expect("history record serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// The grounded inputs of every system turn: the history up to the
/// preceding user turn, the annotated belief, the DB state derived from it,
/// and the delexicalized response.
pub fn corpus_turns(corpus: &Corpus, kb: &dyn KnowledgeBase) -> Result<Vec<TurnExample>, ModelError> {
    let mut out = Vec::new();
    for dialog in &corpus.dialogs {
        let mut previous = crate::corpus::BeliefState::new();
        let mut domain: Option<String> = None;
        for i in dialog.system_turns() {
            let turn = &dialog.turns[i];
            let belief = turn.belief.clone().unwrap_or_default();
            let fallback = domain.clone().or_else(|| kb.default_domain());
            let d = active_domain(&previous, &belief, fallback.as_deref())
                .ok_or_else(|| ModelError::NoDomain(dialog.id.clone()))?;
            let matches = kb.lookup(&belief, &d)?;
            let db = db_state(&matches, &d)?;
            out.push(TurnExample {
                history: dialog.turns[..i]
                    .iter()
                    .map(|t| (t.role, t.text.clone()))
                    .collect(),
                belief: belief.clone(),
                db,
                response: turn.delex.clone().unwrap_or_else(|| turn.text.clone()),
            });
            previous = belief;
            domain = Some(d);
        }
    }
    Ok(out)
}

/// One training sequence per system turn of the corpus.
pub fn corpus_sequences(
    corpus: &Corpus,
    kb: &dyn KnowledgeBase,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<TrainingSequence>, ModelError> {
    corpus_turns(corpus, kb)?
        .iter()
        .map(|t| Ok(t.assemble(vocab, max_len)?))
        .collect()
}

/// Contrastive labeling of a sequence set with a fixed rng, used for both
/// training batches and validation. A negative longer than `max_len` is
/// replaced by its positive.
fn labeled(
    seqs: &[&TrainingSequence],
    pool: &ContrastPool,
    neg_prob: f64,
    vocab: &Vocab,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingSequence>, ModelError> {
    seqs.iter()
        .map(|s| {
            let mut positive = (*s).clone();
            positive.contrast_label = Some(true);
            if neg_prob <= 0.0 {
                return Ok(positive);
            }
            let drawn = make_contrastive(s, pool, neg_prob, vocab, rng)?.0;
            Ok(if drawn.len() > max_len { positive } else { drawn })
        })
        .collect()
}

/// Validation joint loss over all sequences, in batches, with a fixed
/// contrastive draw so repeated evaluations are comparable.
pub fn validation_loss(
    params: &ModelParams,
    valid: &[TrainingSequence],
    pool: &ContrastPool,
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0f7_a11d);
    let refs: Vec<&TrainingSequence> = valid.iter().collect();
    let seqs = labeled(&refs, pool, cfg.contrast_neg_prob, vocab, params.config.max_len, &mut rng)?;
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in seqs.chunks(cfg.batch_size.max(1)) {
        total += params.evaluate_loss(&Batch::from_sequences(chunk, vocab))?.joint;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Minimize the joint loss over `train`, early-stopping on the validation
/// joint loss when `valid` is non-empty. Returns the best parameters seen.
pub fn train(
    params: &ModelParams,
    train: &[TrainingSequence],
    valid: &[TrainingSequence],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let pool = ContrastPool::from_sequences(train.iter().chain(valid));
    let mut cfg = cfg.clone();
    if cfg.contrast_neg_prob > 0.0 && (pool.beliefs.len() < 2 || pool.responses.len() < 2) {
        log::warn!(
            "too few distinct beliefs/responses for negatives ({} / {}); training without them",
            pool.beliefs.len(),
            pool.responses.len()
        );
        cfg.contrast_neg_prob = 0.0;
    }
    let cfg = &cfg;
    let bs = cfg.batch_size.max(1);
    let per_epoch = train.len().div_ceil(bs);
    let total = cfg
        .max_steps
        .map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let mut opt = Optimizer::new(cfg.optim.clone(), &params);
    let mut history = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(bs) {
            if step >= total {
                break 'epochs;
            }
            let refs: Vec<&TrainingSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let seqs = labeled(&refs, &pool, cfg.contrast_neg_prob, vocab, params.config.max_len, &mut rng)?;
            let batch = Batch::from_sequences(&seqs, vocab);
            let (parts, grads) = params.loss_and_grad(&batch, Some(&mut dropout_rng))?;
            if !parts.is_finite() {
                return Err(ModelError::NonFinite {
                    step,
                    belief: parts.belief,
                    response: parts.response,
                    contrastive: parts.contrastive,
                });
            }
            let lr = cfg.optim.lr_at(step, total);
            opt.step(&mut params, &grads, lr);
            history.push(HistoryRecord {
                epoch,
                step,
                lr,
                loss_joint: parts.joint,
                loss_belief: parts.belief,
                loss_response: parts.response,
                loss_contrastive: parts.contrastive,
                valid_joint: None,
            });
            step += 1;
        }
        if !valid.is_empty() {
            let v = validation_loss(&params, valid, &pool, cfg, vocab)?;
            if let Some(last) = history.last_mut() {
                last.valid_joint = Some(v);
            }
            log::info!("epoch {epoch}: valid joint loss {v:.4}");
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience.max(1) {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    let (best_valid, params) = match best {
        Some((v, p)) => (Some(v), p),
        None => (None, params),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_valid,
        steps: step,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout, all integers little-endian:
//   magic "SOLOCKPT" | u32 version | u64 config length | config JSON
//   | u32 tensor count | per tensor: u32 name length, name, u32 rows,
//   u32 cols, rows·cols f64 in row-major order | 32-byte SHA-256 of all
//   preceding bytes.

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);
    let tensors = params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ModelError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("bad config block: {e}")))?;
    let mut params = ModelParams::init(&config)?;
    let count = r.u32()? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            slots.len()
        )));
    }
    for (expected, tensor) in slots.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        if name != *expected {
            return Err(ModelError::Checkpoint(format!("expected tensor {expected}, found {name}")));
        }
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if (rows, cols) != tensor.dim() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has shape {rows}x{cols}, expected {:?}",
                tensor.dim()
            )));
        }
        let data = r.take(rows * cols * 8)?;
        for (dst, chunk) in tensor.iter_mut().zip(data.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

/// Load and require the stored config to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelParams, ModelError> {
    let params = load_checkpoint(path)?;
    if params.config != *expected {
        return Err(ModelError::ConfigMismatch);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            max_len: 12,
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            ..ModelConfig::default()
        }
    }

    fn row(tokens: Vec<u32>, belief: Vec<usize>, response: Vec<usize>, label: bool) -> BatchRow {
        let eos = tokens.len() - 1;
        BatchRow {
            tokens,
            belief_targets: belief,
            response_targets: response,
            label: Some(label),
            eos,
        }
    }

    #[test]
    fn zero_match_head_gives_one_half() {
        let p = ModelParams::init(&tiny()).unwrap();
        let batch = Batch { rows: vec![row(vec![1, 2, 3], vec![1], vec![2], true)] };
        let out = p.forward(&batch).unwrap();
        assert_eq!(out.match_probs[0], 0.5);
        let c = loss_contrastive(&out, &batch).unwrap();
        assert!((c - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_token_softmax_normalizes() {
        let p = ModelParams::init(&tiny()).unwrap();
        let out = p.forward(&Batch { rows: vec![row(vec![4], vec![], vec![], true)] }).unwrap();
        assert_eq!(out.logits[0].nrows(), 1);
        let mut l = out.logits[0].row(0).to_vec();
        softmax_in_place(&mut l);
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let mut p = ModelParams::init(&ModelConfig { vocab_size: 50, ..tiny() }).unwrap();
        p.wte.fill(0.0);
        let batch = Batch { rows: vec![row(vec![1, 2, 3, 4], vec![1, 2], vec![3], false)] };
        let out = p.forward(&batch).unwrap();
        assert!((loss_belief(&out, &batch).unwrap() - 50f64.ln()).abs() < 1e-12);
        assert!((loss_response(&out, &batch).unwrap() - 50f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce(0.9, false) - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((bce(0.5, true) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(1.0, true).abs() < 1e-15);
    }

    #[test]
    fn loss_joint_is_sum_of_parts() {
        let mut p = ModelParams::init(&tiny()).unwrap();
        p.w_match.fill(0.3);
        let batch = Batch {
            rows: vec![
                row(vec![1, 2, 3, 4, 5], vec![1, 2], vec![3, 4], true),
                row(vec![5, 6, 7], vec![1], vec![2], false),
            ],
        };
        let out = p.forward(&batch).unwrap();
        let parts = loss_joint(&out, &batch, &LossWeights::default()).unwrap();
        assert!((parts.joint - (parts.belief + parts.response + parts.contrastive)).abs() < 1e-9);
        let (trained, _) = p.loss_and_grad(&batch, None).unwrap();
        assert!((trained.joint - parts.joint).abs() < 1e-9);
    }

    #[test]
    fn empty_belief_mask_is_an_error() {
        let p = ModelParams::init(&tiny()).unwrap();
        let batch = Batch { rows: vec![row(vec![1, 2], vec![], vec![1], true)] };
        let out = p.forward(&batch).unwrap();
        assert!(matches!(loss_belief(&out, &batch), Err(ModelError::EmptyMask(_))));
    }

    #[test]
    fn causal_prefix_logits_are_bitwise_stable() {
        let p = ModelParams::init(&tiny()).unwrap();
        let a = vec![1, 2, 3, 4, 5, 6];
        let mut b = a.clone();
        b[4] = 9;
        b[5] = 0;
        let la = p.forward(&Batch { rows: vec![row(a, vec![], vec![], true)] }).unwrap();
        let lb = p.forward(&Batch { rows: vec![row(b, vec![], vec![], true)] }).unwrap();
        for t in 0..4 {
            assert_eq!(la.logits[0].row(t), lb.logits[0].row(t));
        }
        assert_ne!(la.logits[0].row(4), lb.logits[0].row(4));
    }

    #[test]
    fn kv_cache_matches_full_forward() {
        let mut p = ModelParams::init(&tiny()).unwrap();
        p.wpe.mapv_inplace(|v| v * 10.0);
        let tokens = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let full = p.forward(&Batch { rows: vec![row(tokens.clone(), vec![], vec![], true)] }).unwrap();
        let mut cache = p.new_cache();
        for (t, &tok) in tokens.iter().enumerate() {
            let l = p.step(&mut cache, tok).unwrap();
            for (a, b) in l.iter().zip(full.logits[0].row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn out_of_range_and_too_long_inputs_error() {
        let p = ModelParams::init(&tiny()).unwrap();
        let bad = Batch { rows: vec![row(vec![1, 99], vec![], vec![], true)] };
        assert!(matches!(p.forward(&bad), Err(ModelError::TokenOutOfRange { .. })));
        let long = Batch { rows: vec![row(vec![1; 13], vec![], vec![], true)] };
        assert!(matches!(p.forward(&long), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { d_model: 10, heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..tiny() }.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let c = OptimConfig { lr: 1.0, warmup_frac: 0.1, ..OptimConfig::default() };
        assert!((c.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(55, 100) - 0.5).abs() < 1e-12);
        assert_eq!(c.lr_at(100, 100), 0.0);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = ModelParams::init(&tiny()).unwrap();
        let before = p.clone();
        let batch = Batch { rows: vec![row(vec![1, 2, 3], vec![1], vec![2], true)] };
        let (_, g) = p.loss_and_grad(&batch, None).unwrap();
        let mut opt = Optimizer::new(OptimConfig::default(), &p);
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = ModelParams::init(&tiny()).unwrap();
        p.w_match.fill(0.25);
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        let batch = Batch { rows: vec![row(vec![1, 2, 3], vec![1], vec![2], true)] };
        let (a, b) = (p.forward(&batch).unwrap(), q.forward(&batch).unwrap());
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.match_logits, b.match_logits);

        let other = ModelConfig { d_ff: 32, ..tiny() };
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(ModelError::ConfigMismatch)
        ));

        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn sinusoidal_positions_start_distinct() {
        let p = ModelParams::init(&ModelConfig { d_model: 16, heads: 2, max_len: 64, ..tiny() }).unwrap();
        let amp = 0.02 * std::f64::consts::SQRT_2;
        assert!(p.wpe.row(0).iter().step_by(2).all(|v| v.abs() < 1e-15));
        assert!(p.wpe.row(0).iter().skip(1).step_by(2).all(|v| (v - amp).abs() < 1e-15));
        for i in 1..64 {
            assert_ne!(p.wpe.row(i), p.wpe.row(i - 1));
        }
        let q = ModelParams::init(&ModelConfig { position_init: PositionInit::Normal, ..p.config.clone() }).unwrap();
        assert_ne!(p.wpe, q.wpe);
    }

    #[test]
    fn over_length_negatives_fall_back_to_positives() {
        use crate::corpus::{BeliefState, Role};
        use crate::grounding::DbState;
        use crate::serializer::{assemble, SpecialTokens};
        let long = "a very long answer that goes on and on and on about the place . ".repeat(4);
        let texts = ["hi there .", "ok .", long.as_str()];
        let vocab = crate::tokenizer::train_bpe(texts, 300, &SpecialTokens::default()).unwrap();
        let mut b1 = BeliefState::new();
        b1.insert("restaurant", "area", "north");
        let mut b2 = BeliefState::new();
        b2.insert("restaurant", "food", "thai");
        let db = DbState::from_count("restaurant", 1);
        let short = assemble(&[(Role::User, "hi there .")], &b1, &db, "ok .", &vocab, 512).unwrap();
        let wordy = assemble(&[(Role::User, "hi there .")], &b2, &db, &long, &vocab, 512).unwrap();
        let pool = ContrastPool::from_sequences([&short, &wordy]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let refs = vec![&short; 200];
        let out = labeled(&refs, &pool, 1.0, &vocab, short.len() + 2, &mut rng).unwrap();
        assert!(out.iter().all(|s| s.len() <= short.len() + 2));
        assert!(out.iter().any(|s| s.contrast_label == Some(true)));
        assert!(out.iter().any(|s| s.contrast_label == Some(false)));
    }

    /// Relative error between analytic and central-difference gradients for
    /// every tensor.
    pub(crate) fn gradient_errors(p: &ModelParams, batch: &Batch) -> Vec<(String, f64)> {
        let (_, grads) = p.loss_and_grad(batch, None).unwrap();
        let loss = |q: &ModelParams| {
            let out = q.forward(batch).unwrap();
            loss_joint(&out, batch, &q.config.loss_weights).unwrap().joint
        };
        let h = 1e-5;
        let mut errors = Vec::new();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let analytic = grads.tensors()[ti].1.clone();
            let mut numeric = Array2::zeros(analytic.raw_dim());
            let mut q = p.clone();
            for idx in 0..analytic.len() {
                let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
                let orig = q.tensors()[ti].1[[r, c]];
                q.tensors_mut()[ti].1[[r, c]] = orig + h;
                let up = loss(&q);
                q.tensors_mut()[ti].1[[r, c]] = orig - h;
                let down = loss(&q);
                q.tensors_mut()[ti].1[[r, c]] = orig;
                numeric[[r, c]] = (up - down) / (2.0 * h);
            }
            let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
            let scale = analytic.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
            errors.push((name.clone(), if scale == 0.0 { 0.0 } else { diff / scale }));
        }
        errors
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = ModelConfig { d_model: 16, heads: 2, d_ff: 32, vocab_size: 11, max_len: 8, seed: 5, ..tiny() };
        let mut p = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in p.tensors_mut() {
            t.mapv_inplace(|v| v + 0.3 * (rng.gen::<f64>() - 0.5));
        }
        let batch = Batch {
            rows: vec![
                row(vec![1, 2, 3, 4, 5, 6], vec![2, 3], vec![4, 5], true),
                row(vec![7, 8, 9, 10, 2], vec![], vec![], false),
            ],
        };
        for (name, err) in gradient_errors(&p, &batch) {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}
