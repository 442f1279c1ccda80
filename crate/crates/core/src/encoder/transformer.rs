//! Small pre-LayerNorm transformer used as a stand-in for CLIP-class text
//! towers.
//!
//! Layout per block (row-vector convention, `X` is `l × d_token`):
//!
//! ```text
//! H  = LN1(X)
//! X' = X + Σ_h softmax(H Wq_h (H Wk_h)ᵀ / √d_head) H Wv_h Wo_h
//! X''= X' + tanh(LN2(X') W1 + b1) W2 + b2
//! ```
//!
//! The input is the token sequence plus a learned positional table; the output
//! is `Pᵀ · mean_rows(LN_f(X_final))`. Attention is bidirectional. The
//! backward pass is written by hand and returns the gradient with respect to
//! the input tokens only.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::linear::SignedPermutation;
use super::{
    check_cotangent, check_text_input, digest_weights, f32_round, FrozenDualEncoder, Media,
    ToyTokenizer,
};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::space::{EmbeddingSpace, Similarity};
use crate::tokens::TokenSequence;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTransformerConfig {
    pub seed: u64,
    pub depth: usize,
    pub heads: usize,
    pub d_token: usize,
    pub d_embed: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub similarity: Similarity,
    pub temperature: f64,
    pub frames_per_video: usize,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            depth: 2,
            heads: 2,
            d_token: 16,
            d_embed: 8,
            d_ff: 32,
            max_seq_len: 16,
            similarity: Similarity::Cosine,
            temperature: 0.05,
            frames_per_video: super::DEFAULT_FRAMES_PER_VIDEO,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: Array1<f64>,
    bias: Array1<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, LnCache) {
        let (l, d) = x.dim();
        let mut xhat = Array2::zeros((l, d));
        let mut inv_std = Array1::zeros(l);
        for i in 0..l {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, dy: ArrayView2<'_, f64>, cache: &LnCache) -> Array2<f64> {
        let (l, d) = dy.dim();
        let mut dx = Array2::zeros((l, d));
        for i in 0..l {
            let dxhat: Array1<f64> = &dy.row(i) * &self.gain;
            let xh = cache.xhat.row(i);
            let mean_d = dxhat.sum() / d as f64;
            let mean_dx = dxhat.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                dx[[i, j]] = cache.inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2: LayerNorm,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

struct BlockCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// attention probabilities, one `l × l` matrix per head
    attn: Vec<Array2<f64>>,
    ln2: LnCache,
    u: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyTransformerEncoder {
    config: ToyTransformerConfig,
    space: EmbeddingSpace,
    tokenizer: ToyTokenizer,
    positional: Array2<f64>,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    /// `d_token × d_embed`
    projection: Array2<f64>,
    visual: SignedPermutation,
}

fn gaussian(rng: &mut SeededRng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || f32_round(rng.normal(0.0, std)))
}

fn gaussian_vec(rng: &mut SeededRng, n: usize, mean: f64, std: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || f32_round(rng.normal(mean, std)))
}

impl ToyTransformerEncoder {
    pub fn new(config: ToyTransformerConfig) -> Result<Self> {
        let space = EmbeddingSpace::new(
            config.d_token,
            config.d_embed,
            config.similarity,
            config.temperature,
            config.max_seq_len,
        )?;
        if config.depth == 0 || config.heads == 0 || config.d_ff == 0 {
            return Err(Error::config("depth, heads and d_ff must be >= 1"));
        }
        if !config.d_token.is_multiple_of(config.heads) {
            return Err(Error::config(format!(
                "d_token {} is not divisible by heads {}",
                config.d_token, config.heads
            )));
        }
        if config.frames_per_video == 0 {
            return Err(Error::config("frames_per_video must be >= 1"));
        }
        let d = config.d_token;
        let root = SeededRng::new(config.seed);
        let mut rng = root.fork("toy-transformer-weights");
        let sd = 1.0 / (d as f64).sqrt();
        let sff = 1.0 / (config.d_ff as f64).sqrt();
        let positional = gaussian(&mut rng, (config.max_seq_len, d), 0.1);
        let ln = |rng: &mut SeededRng| LayerNorm {
            gain: gaussian_vec(rng, d, 1.0, 0.1),
            bias: gaussian_vec(rng, d, 0.0, 0.1),
        };
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1: ln(&mut rng),
                wq: gaussian(&mut rng, (d, d), sd),
                wk: gaussian(&mut rng, (d, d), sd),
                wv: gaussian(&mut rng, (d, d), sd),
                wo: gaussian(&mut rng, (d, d), sd),
                ln2: ln(&mut rng),
                w1: gaussian(&mut rng, (d, config.d_ff), sd),
                b1: gaussian_vec(&mut rng, config.d_ff, 0.0, 0.1),
                w2: gaussian(&mut rng, (config.d_ff, d), sff),
                b2: gaussian_vec(&mut rng, d, 0.0, 0.1),
            })
            .collect();
        let ln_final = ln(&mut rng);
        let projection = gaussian(&mut rng, (d, config.d_embed), sd);
        let visual = SignedPermutation::random(config.d_embed, &mut root.fork("toy-visual"));
        let tokenizer = ToyTokenizer::new(root.fork("tokenizer").seed(), d);
        Ok(Self {
            config,
            space,
            tokenizer,
            positional,
            blocks,
            ln_final,
            projection,
            visual,
        })
    }

    pub fn config(&self) -> &ToyTransformerConfig {
        &self.config
    }

    /// Frame whose visual embedding is exactly `target`.
    pub fn frame_for_embedding(&self, target: ArrayView1<'_, f64>) -> Array1<f64> {
        self.visual.invert(target)
    }

    fn head_dim(&self) -> usize {
        self.config.d_token / self.config.heads
    }

    fn block_forward(&self, block: &Block, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (h, ln1) = block.ln1.forward(x.view());
        let q = h.dot(&block.wq);
        let k = h.dot(&block.wk);
        let v = h.dot(&block.wv);
        let l = x.nrows();
        let mut concat = Array2::zeros((l, self.config.d_token));
        let mut attn = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let probs = softmax_rows(&scores);
            concat.slice_mut(cols).assign(&probs.dot(&v.slice(cols)));
            attn.push(probs);
        }
        let x_mid = x + &concat.dot(&block.wo);
        let (h2, ln2) = block.ln2.forward(x_mid.view());
        let u = (h2.dot(&block.w1) + &block.b1).mapv(f64::tanh);
        let x_out = &x_mid + &(u.dot(&block.w2) + &block.b2);
        (
            x_out,
            BlockCache {
                ln1,
                q,
                k,
                v,
                attn,
                ln2,
                u,
            },
        )
    }

    /// Gradient with respect to the block input given the gradient at its output.
    fn block_backward(&self, block: &Block, cache: &BlockCache, dx_out: &Array2<f64>) -> Array2<f64> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        // MLP branch
        let du = dx_out.dot(&block.w2.t());
        let dz = &du * &cache.u.mapv(|u| 1.0 - u * u);
        let dh2 = dz.dot(&block.w1.t());
        let dx_mid = dx_out + &block.ln2.backward(dh2.view(), &cache.ln2);
        // attention branch
        let dconcat = dx_mid.dot(&block.wo.t());
        let l = dx_mid.nrows();
        let d = self.config.d_token;
        let mut dq = Array2::zeros((l, d));
        let mut dk = Array2::zeros((l, d));
        let mut dv = Array2::zeros((l, d));
        for head in 0..self.config.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let probs = &cache.attn[head];
            let d_out = dconcat.slice(cols);
            let dprobs = d_out.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&d_out));
            let row_dot = (&dprobs * probs).sum_axis(Axis(1));
            let mut dscores = dprobs;
            for i in 0..l {
                for j in 0..l {
                    dscores[[i, j]] = probs[[i, j]] * (dscores[[i, j]] - row_dot[i]);
                }
            }
            dq.slice_mut(cols)
                .assign(&(dscores.dot(&cache.k.slice(cols)) * scale));
            dk.slice_mut(cols)
                .assign(&(dscores.t().dot(&cache.q.slice(cols)) * scale));
        }
        let dh_total = dq.dot(&block.wq.t()) + dk.dot(&block.wk.t()) + dv.dot(&block.wv.t());
        dx_mid + block.ln1.backward(dh_total.view(), &cache.ln1)
    }

    fn forward(&self, tokens: &TokenSequence) -> (Array1<f64>, Vec<BlockCache>, LnCache) {
        let l = tokens.len();
        let mut x = &tokens.rows() + &self.positional.slice(s![..l, ..]);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = self.block_forward(block, &x);
            caches.push(cache);
            x = next;
        }
        let (y, ln_cache) = self.ln_final.forward(x.view());
        let pooled = y.mean_axis(Axis(0)).expect("l >= 1");
        let out = self.projection.t().dot(&pooled);
        (out, caches, ln_cache)
    }
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl FrozenDualEncoder for ToyTransformerEncoder {
    fn space(&self) -> &EmbeddingSpace {
        &self.space
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        Ok(self.tokenizer.tokenize(text))
    }

    fn encode_text(&self, tokens: &TokenSequence) -> Result<Array1<f64>> {
        check_text_input(&self.space, tokens)?;
        Ok(self.forward(tokens).0)
    }

    fn text_input_gradient(
        &self,
        tokens: &TokenSequence,
        cotangent: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        check_text_input(&self.space, tokens)?;
        check_cotangent(&self.space, cotangent)?;
        let (_, caches, ln_cache) = self.forward(tokens);
        let l = tokens.len();
        let dpooled = self.projection.dot(&cotangent);
        let dy = Array2::from_shape_fn((l, self.config.d_token), |(_, j)| dpooled[j] / l as f64);
        let mut dx = self.ln_final.backward(dy.view(), &ln_cache);
        for (block, cache) in self.blocks.iter().zip(caches.iter()).rev() {
            dx = self.block_backward(block, cache, &dx);
        }
        Ok(dx)
    }

    fn encode_visual(&self, media: &Media) -> Result<Array1<f64>> {
        match media {
            Media::Pixels(frame) => self.visual.apply(frame.view()),
            Media::CacheKey(_) => Err(Error::Unsupported(
                "toy transformer cannot resolve cache keys".into(),
            )),
        }
    }

    fn frames_per_video(&self) -> usize {
        self.config.frames_per_video
    }

    fn weight_digest(&self) -> String {
        let mut blocks: Vec<Vec<f64>> = vec![self.positional.iter().copied().collect()];
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                blocks.push(m.iter().copied().collect());
            }
            for v in [&b.ln1.gain, &b.ln1.bias, &b.ln2.gain, &b.ln2.bias, &b.b1, &b.b2] {
                blocks.push(v.to_vec());
            }
        }
        blocks.push(self.ln_final.gain.to_vec());
        blocks.push(self.ln_final.bias.to_vec());
        blocks.push(self.projection.iter().copied().collect());
        blocks.push(self.visual.digest_block());
        blocks.push(self.tokenizer.table().iter().copied().collect());
        digest_weights(blocks.iter().map(|b| b.as_slice()))
    }
}
