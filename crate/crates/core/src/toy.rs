//! A tiny deterministic decoder-only transformer (grouped-query attention,
//! rotary positions, pre-norm residual blocks) used to produce closed-loop
//! traces and to check that eviction logs and sparse masks describe the same
//! computation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EvictionConfig, EvictionLog};
use crate::error::{Error, Result};
use crate::scoring::softmax_in_place;
use crate::trace::{DecodeTrace, TraceDims};
use crate::train::SparseMaskSet;

/// Extra gain on the query/key projections so attention is visibly peaked.
const QK_GAIN: f64 = 2.0;
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub rotary_base: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            ffn_dim: 128,
            vocab_size: 256,
            rotary_base: 10_000.0,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.vocab_size == 0 || self.ffn_dim == 0 {
            return Err(Error::config("layers, vocabulary and ffn width must be positive"));
        }
        if self.n_kv_heads == 0 || self.n_q_heads == 0 || self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::config("n_q_heads must be a positive multiple of n_kv_heads"));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::config("head_dim must be even for rotary embeddings"));
        }
        if self.d_model != self.n_q_heads * self.head_dim {
            return Err(Error::config(format!(
                "d_model {} != n_q_heads {} x head_dim {}",
                self.d_model, self.n_q_heads, self.head_dim
            )));
        }
        if !(self.rotary_base > 1.0) {
            return Err(Error::config("rotary_base must exceed 1"));
        }
        Ok(())
    }

    pub fn dims(&self) -> TraceDims {
        TraceDims {
            n_layers: self.n_layers,
            n_q_heads: self.n_q_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    out: usize,
    inp: usize,
    w: Vec<f64>,
}

impl Linear {
    fn random(out: usize, inp: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, gain / (inp as f64).sqrt()).expect("finite std");
        Self {
            out,
            inp,
            w: (0..out * inp).map(|_| normal.sample(rng)).collect(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .chunks_exact(self.inp)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    attn_norm: Vec<f64>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ffn_norm: Vec<f64>,
    w1: Linear,
    w2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    embed: Vec<f64>,
    blocks: Vec<Block>,
    final_norm: Vec<f64>,
    lm_head: Linear,
}

/// Output of an uncompressed greedy decode.
#[derive(Debug, Clone)]
pub struct FullDecode {
    pub tokens: Vec<u32>,
    pub trace: DecodeTrace,
    /// Next-token logits at every position.
    pub logits: Vec<Vec<f64>>,
}

/// Output of a greedy decode under a budgeted cache.
#[derive(Debug, Clone)]
pub struct CompressedDecode {
    pub tokens: Vec<u32>,
    pub logits: Vec<Vec<f64>>,
    pub log: EvictionLog,
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

/// Rotates consecutive half-split pairs `(x[i], x[i + d/2])` by `pos · base^(-2i/d)`.
pub fn apply_rotary(x: &mut [f64], pos: usize, base: f64) {
    let half = x.len() / 2;
    for i in 0..half {
        let theta = pos as f64 * base.powf(-2.0 * i as f64 / x.len() as f64);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (x[i], x[i + half]);
        x[i] = a * cos - b * sin;
        x[i + half] = a * sin + b * cos;
    }
}

/// Greedy choice; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// `max |a - b| / max |b|` over one logit vector.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Per-layer key/value history of one decode.
struct KvHistory {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Query/key rows of one position, per layer, post-rotary.
struct TokenStates {
    q: Vec<f32>,
    k: Vec<f32>,
}

impl ToyModel {
    pub fn init(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embed_dist = Normal::new(0.0, 1.0).expect("unit normal");
        let embed = (0..cfg.vocab_size * cfg.d_model).map(|_| embed_dist.sample(&mut rng)).collect();
        let (dm, kv_w) = (cfg.d_model, cfg.n_kv_heads * cfg.head_dim);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                attn_norm: vec![1.0; dm],
                wq: Linear::random(dm, dm, QK_GAIN, &mut rng),
                wk: Linear::random(kv_w, dm, QK_GAIN, &mut rng),
                wv: Linear::random(kv_w, dm, 1.0, &mut rng),
                wo: Linear::random(dm, dm, 1.0, &mut rng),
                ffn_norm: vec![1.0; dm],
                w1: Linear::random(cfg.ffn_dim, dm, 1.0, &mut rng),
                w2: Linear::random(dm, cfg.ffn_dim, 1.0, &mut rng),
            })
            .collect();
        let lm_head = Linear::random(cfg.vocab_size, dm, 1.0, &mut rng);
        Ok(Self {
            final_norm: vec![1.0; dm],
            cfg,
            embed,
            blocks,
            lm_head,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn dims(&self) -> TraceDims {
        self.cfg.dims()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::OutOfRange(format!(
                "token {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn embedding(&self, token: u32) -> Vec<f64> {
        let dm = self.cfg.d_model;
        self.embed[token as usize * dm..(token as usize + 1) * dm].to_vec()
    }

    /// Normalized block input projected to rotated q, rotated k and v.
    fn project(&self, block: &Block, x: &[f64], pos: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.cfg.head_dim;
        let xn = rms_norm(x, &block.attn_norm);
        let mut q = block.wq.apply(&xn);
        let mut k = block.wk.apply(&xn);
        let v = block.wv.apply(&xn);
        for head in q.chunks_exact_mut(hd).chain(k.chunks_exact_mut(hd)) {
            apply_rotary(head, pos, self.cfg.rotary_base);
        }
        (q, k, v)
    }

    /// Attention of one query row over the listed key positions.
    fn attend(&self, q: &[f64], k_hist: &[f64], v_hist: &[f64], kv: usize, positions: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let hd = self.cfg.head_dim;
        let stride = self.cfg.n_kv_heads * hd;
        let scale = (hd as f64).sqrt();
        let mut probs: Vec<f64> = positions
            .iter()
            .map(|&p| {
                let key = &k_hist[p * stride + kv * hd..p * stride + (kv + 1) * hd];
                q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / scale
            })
            .collect();
        softmax_in_place(&mut probs);
        let mut out = vec![0.0; hd];
        for (&p, &w) in positions.iter().zip(&probs) {
            let val = &v_hist[p * stride + kv * hd..p * stride + (kv + 1) * hd];
            for (o, v) in out.iter_mut().zip(val) {
                *o += w * v;
            }
        }
        (out, probs)
    }

    fn finish_block(&self, block: &Block, x: &mut [f64], attn: &[f64]) {
        for (xi, o) in x.iter_mut().zip(block.wo.apply(attn)) {
            *xi += o;
        }
        let h: Vec<f64> = block.w1.apply(&rms_norm(x, &block.ffn_norm)).into_iter().map(gelu).collect();
        for (xi, o) in x.iter_mut().zip(block.w2.apply(&h)) {
            *xi += o;
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.lm_head.apply(&rms_norm(x, &self.final_norm))
    }

    /// Runs one new token at `pos` through every layer, attending to
    /// `visible(layer, kv_head)` (earlier positions) plus itself.
    fn forward_token<'a, F>(&self, hist: &mut KvHistory, token: u32, pos: usize, visible: F) -> (Vec<f64>, TokenStates)
    where
        F: Fn(usize, usize) -> Option<&'a [usize]>,
    {
        let cfg = &self.cfg;
        let (hd, group) = (cfg.head_dim, cfg.n_q_heads / cfg.n_kv_heads);
        let mut x = self.embedding(token);
        let mut states = TokenStates {
            q: Vec::with_capacity(cfg.n_layers * cfg.d_model),
            k: Vec::with_capacity(cfg.n_layers * cfg.n_kv_heads * hd),
        };
        let all_prior: Vec<usize> = (0..=pos).collect();
        for (layer, block) in self.blocks.iter().enumerate() {
            let (q, k, v) = self.project(block, &x, pos);
            states.q.extend(q.iter().map(|&v| v as f32));
            states.k.extend(k.iter().map(|&v| v as f32));
            hist.k[layer].extend_from_slice(&k);
            hist.v[layer].extend_from_slice(&v);
            let mut attn = Vec::with_capacity(cfg.d_model);
            for h in 0..cfg.n_q_heads {
                let kv = h / group;
                let positions: Vec<usize> = match visible(layer, kv) {
                    Some(prior) => prior.iter().copied().chain(std::iter::once(pos)).collect(),
                    None => all_prior.clone(),
                };
                let (out, _) = self.attend(&q[h * hd..(h + 1) * hd], &hist.k[layer], &hist.v[layer], kv, &positions);
                attn.extend(out);
            }
            self.finish_block(block, &mut x, &attn);
        }
        (self.logits(&x), states)
    }

    fn new_history(&self) -> KvHistory {
        KvHistory {
            k: vec![Vec::new(); self.cfg.n_layers],
            v: vec![Vec::new(); self.cfg.n_layers],
        }
    }

    fn vocab_table(&self) -> Vec<String> {
        (0..self.cfg.vocab_size).map(|i| format!("t{i}")).collect()
    }

    /// Greedy decoding with full causal attention.
    pub fn decode_full(&self, prompt: &[u32], n_generate: usize) -> Result<FullDecode> {
        if prompt.is_empty() {
            return Err(Error::config("prompt must not be empty"));
        }
        self.check_tokens(prompt)?;
        let total = prompt.len() + n_generate;
        let mut hist = self.new_history();
        let mut tokens = prompt.to_vec();
        let (mut q, mut k, mut logits) = (Vec::new(), Vec::new(), Vec::with_capacity(total));
        for pos in 0..total {
            let (row, states) = self.forward_token(&mut hist, tokens[pos], pos, |_, _| None);
            q.extend(states.q);
            k.extend(states.k);
            if pos + 1 < total && pos + 1 >= prompt.len() {
                tokens.push(argmax(&row) as u32);
            }
            logits.push(row);
        }
        let trace = DecodeTrace::new(self.dims(), prompt.len(), q, k)?
            .with_token_ids(tokens.clone())?
            .with_token_text(self.vocab_table())?;
        Ok(FullDecode { tokens, trace, logits })
    }

    /// Greedy decoding where each (layer, kv head) attends only to the
    /// positions its budgeted cache retains.
    pub fn decode_compressed(&self, prompt: &[u32], n_generate: usize, cfg: &EvictionConfig) -> Result<CompressedDecode> {
        if prompt.is_empty() {
            return Err(Error::config("prompt must not be empty"));
        }
        self.check_tokens(prompt)?;
        let total = prompt.len() + n_generate;
        let mut engine = Engine::new(cfg.clone(), self.dims(), prompt.len())?;
        let mut hist = self.new_history();
        let mut tokens = prompt.to_vec();
        let mut logits = Vec::with_capacity(total);
        for pos in 0..total {
            let state = engine.state();
            let (row, states) = self.forward_token(&mut hist, tokens[pos], pos, |layer, kv| Some(state.retained(layer, kv)));
            engine.step(&states.q, &states.k)?;
            if pos + 1 < total && pos + 1 >= prompt.len() {
                tokens.push(argmax(&row) as u32);
            }
            logits.push(row);
        }
        let (log, _) = engine.finish();
        Ok(CompressedDecode { tokens, logits, log })
    }

    /// One full-sequence pass where position `j` attends to `i` in a
    /// (layer, kv head) only when the mask allows it.
    pub fn forward_masked(&self, tokens: &[u32], masks: &SparseMaskSet) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let dims = self.dims();
        if masks.n_layers() != dims.n_layers || masks.n_kv_heads() != dims.n_kv_heads {
            return Err(Error::shape("mask set does not match the model's layers and kv heads"));
        }
        if masks.seq_len() < tokens.len() {
            return Err(Error::shape("mask set shorter than the token sequence"));
        }
        masks.validate()?;
        Ok(self.forward_with(tokens, |layer, kv, i, j| masks.visible(layer, kv, i, j), None).0)
    }

    /// Attention probabilities of every query head at `pos` in `layer` under
    /// full causal attention, over keys `0..=pos`.
    pub fn attention_rows(&self, tokens: &[u32], layer: usize, pos: usize) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        if layer >= self.cfg.n_layers || pos >= tokens.len() {
            return Err(Error::OutOfRange(format!("layer {layer} / position {pos}")));
        }
        let (_, rows) = self.forward_with(&tokens[..=pos], |_, _, i, j| i <= j, Some((layer, pos)));
        Ok(rows)
    }

    fn forward_with<F>(&self, tokens: &[u32], visible: F, record: Option<(usize, usize)>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>)
    where
        F: Fn(usize, usize, usize, usize) -> bool,
    {
        let cfg = &self.cfg;
        let (hd, group) = (cfg.head_dim, cfg.n_q_heads / cfg.n_kv_heads);
        let n = tokens.len();
        let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embedding(t)).collect();
        let mut recorded = Vec::new();
        for (layer, block) in self.blocks.iter().enumerate() {
            let mut qs = Vec::with_capacity(n);
            let (mut k_hist, mut v_hist) = (Vec::new(), Vec::new());
            for (pos, x) in xs.iter().enumerate() {
                let (q, k, v) = self.project(block, x, pos);
                qs.push(q);
                k_hist.extend(k);
                v_hist.extend(v);
            }
            for (j, x) in xs.iter_mut().enumerate() {
                let mut attn = Vec::with_capacity(cfg.d_model);
                for h in 0..cfg.n_q_heads {
                    let kv = h / group;
                    let positions: Vec<usize> = (0..=j).filter(|&i| visible(layer, kv, i, j)).collect();
                    let (out, probs) = self.attend(&qs[j][h * hd..(h + 1) * hd], &k_hist, &v_hist, kv, &positions);
                    if record == Some((layer, j)) {
                        let mut full = vec![0.0; j + 1];
                        for (&p, &w) in positions.iter().zip(&probs) {
                            full[p] = w;
                        }
                        recorded.push(full);
                    }
                    attn.extend(out);
                }
                self.finish_block(block, x, &attn);
            }
        }
        (xs.iter().map(|x| self.logits(x)).collect(), recorded)
    }
}
