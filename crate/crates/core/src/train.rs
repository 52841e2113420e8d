//! Training-side math: sparse attention masks from eviction logs, GRPO
//! advantages and the clipped surrogate, the distillation loss, and memory
//! estimators for KV caches, score caches and dense masks.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::engine::EvictionLog;
use crate::error::{Error, Result};

/// One evicted token: hidden from every query at `step` or later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskRecord {
    pub position: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadMaskJson {
    layer: usize,
    head: usize,
    seq_len: usize,
    records: Vec<MaskRecord>,
}

/// Per (layer, kv head) visibility derived from eviction records. Query
/// heads in a group share their kv head's mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMaskSet {
    n_layers: usize,
    n_kv_heads: usize,
    seq_len: usize,
    records: Vec<Vec<Vec<MaskRecord>>>,
    evicted_at: Vec<Vec<Vec<usize>>>,
}

impl SparseMaskSet {
    /// Pure causal masks.
    pub fn causal(n_layers: usize, n_kv_heads: usize, seq_len: usize) -> Self {
        Self {
            n_layers,
            n_kv_heads,
            seq_len,
            records: vec![vec![Vec::new(); n_kv_heads]; n_layers],
            evicted_at: vec![vec![vec![usize::MAX; seq_len]; n_kv_heads]; n_layers],
        }
    }

    /// Adds a record; an already-evicted position keeps its earliest step.
    fn insert(&mut self, layer: usize, head: usize, rec: MaskRecord) -> Result<()> {
        if layer >= self.n_layers || head >= self.n_kv_heads {
            return Err(Error::OutOfRange(format!("mask for layer {layer} head {head}")));
        }
        if rec.position >= self.seq_len {
            return Err(Error::OutOfRange(format!(
                "position {} outside sequence of {}",
                rec.position, self.seq_len
            )));
        }
        let slot = &mut self.evicted_at[layer][head][rec.position];
        if *slot != usize::MAX {
            return Err(Error::Format(format!("position {} evicted twice", rec.position)));
        }
        *slot = rec.step;
        self.records[layer][head].push(rec);
        Ok(())
    }

    fn sort(&mut self) {
        for rec in self.records.iter_mut().flatten() {
            rec.sort_unstable();
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn records(&self, layer: usize, head: usize) -> &[MaskRecord] {
        &self.records[layer][head]
    }

    pub fn n_records(&self) -> usize {
        self.records.iter().flatten().map(Vec::len).sum()
    }

    /// Whether query position `j` may attend to key position `i`.
    #[inline]
    pub fn visible(&self, layer: usize, head: usize, i: usize, j: usize) -> bool {
        i <= j && self.evicted_at[layer][head].get(i).is_none_or(|&s| s > j)
    }

    /// Each token must at least see itself.
    pub fn validate(&self) -> Result<()> {
        for (layer, heads) in self.records.iter().enumerate() {
            for (head, recs) in heads.iter().enumerate() {
                if let Some(r) = recs.iter().find(|r| r.step <= r.position) {
                    return Err(Error::Format(format!(
                        "non-causal mask: layer {layer} head {head} hides position {} from itself (step {})",
                        r.position, r.step
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dense `seq_len × seq_len` visibility.
    pub fn dense(&self, layer: usize, head: usize) -> Vec<Vec<bool>> {
        (0..self.seq_len)
            .map(|j| (0..self.seq_len).map(|i| self.visible(layer, head, i, j)).collect())
            .collect()
    }

    /// Row-major bitset of the dense mask, least significant bit first.
    pub fn dense_bitset(&self, layer: usize, head: usize) -> Vec<u8> {
        let n = self.seq_len;
        let mut bits = vec![0u8; (n * n).div_ceil(8)];
        for j in 0..n {
            for i in 0..=j {
                if self.visible(layer, head, i, j) {
                    let idx = j * n + i;
                    bits[idx / 8] |= 1 << (idx % 8);
                }
            }
        }
        bits
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        let mut out = Vec::with_capacity(self.n_layers * self.n_kv_heads);
        for layer in 0..self.n_layers {
            for head in 0..self.n_kv_heads {
                out.push(HeadMaskJson {
                    layer,
                    head,
                    seq_len: self.seq_len,
                    records: self.records[layer][head].clone(),
                });
            }
        }
        serde_json::to_writer(w, &out)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let heads: Vec<HeadMaskJson> = serde_json::from_reader(r)?;
        let n_layers = heads.iter().map(|h| h.layer + 1).max().unwrap_or(0);
        let n_kv_heads = heads.iter().map(|h| h.head + 1).max().unwrap_or(0);
        let seq_len = heads.first().map_or(0, |h| h.seq_len);
        if heads.iter().any(|h| h.seq_len != seq_len) {
            return Err(Error::Format("mask entries disagree on seq_len".into()));
        }
        if heads.len() != n_layers * n_kv_heads {
            return Err(Error::Format("mask set does not cover every (layer, head)".into()));
        }
        let mut set = Self::causal(n_layers, n_kv_heads, seq_len);
        for h in heads {
            for rec in h.records {
                set.insert(h.layer, h.head, rec)?;
            }
        }
        set.sort();
        set.validate()?;
        Ok(set)
    }
}

/// Masks implied by a log: every evicted position becomes invisible from the
/// event's step onward.
pub fn build_masks(log: &EvictionLog, seq_len: usize) -> Result<SparseMaskSet> {
    log.validate()?;
    let mut set = SparseMaskSet::causal(log.dims.n_layers, log.dims.n_kv_heads, seq_len);
    for e in &log.events {
        if let Some(&p) = e.evicted.iter().chain(&e.retained).find(|&&p| p >= seq_len) {
            return Err(Error::OutOfRange(format!(
                "log position {p} outside sequence of {seq_len}"
            )));
        }
        for &position in &e.evicted {
            set.insert(e.layer, e.head, MaskRecord { position, step: e.step })?;
        }
    }
    set.sort();
    Ok(set)
}

/// One rollout group's rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub rewards: Vec<f64>,
    /// Empty means no sample was truncated.
    #[serde(default)]
    pub truncated: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Set when the group's reward spread was too small to standardize.
    pub degenerate: bool,
}

pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

/// Group-standardized advantages with population statistics over the whole
/// group; truncated samples are zeroed afterwards.
pub fn grpo_advantages(g: &GroupSample) -> Result<Advantages> {
    let n = g.rewards.len();
    if n < 2 {
        return Err(Error::config(format!("group size {n} < 2")));
    }
    if !g.truncated.is_empty() && g.truncated.len() != n {
        return Err(Error::shape(format!("{} truncation flags for {n} rewards", g.truncated.len())));
    }
    if g.rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::OutOfRange("non-finite reward".into()));
    }
    let mean = g.rewards.iter().sum::<f64>() / n as f64;
    let std = (g.rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let degenerate = std < ADVANTAGE_STD_FLOOR;
    let advantages = g
        .rewards
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if degenerate || g.truncated.get(i).copied().unwrap_or(false) {
                0.0
            } else {
                (r - mean) / std
            }
        })
        .collect();
    Ok(Advantages {
        advantages,
        mean,
        std,
        degenerate,
    })
}

/// Token-level log-probabilities and advantages of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
    #[serde(default)]
    pub truncated: bool,
}

/// `min(ratio·A, clip(ratio, 1−ε, 1+ε)·A)`.
pub fn clip_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Clipped surrogate averaged over tokens within each sample, then over
/// samples. Truncated samples are left out of both means.
pub fn clipped_objective(samples: &[PolicySample], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let n = s.logp_new.len();
        if s.logp_old.len() != n || s.advantages.len() != n {
            return Err(Error::shape(format!("sample {i}: token arrays are misaligned")));
        }
        if s.truncated {
            continue;
        }
        if n == 0 {
            return Err(Error::shape(format!("sample {i} has no tokens")));
        }
        let sum: f64 = (0..n)
            .map(|t| clip_term((s.logp_new[t] - s.logp_old[t]).exp(), s.advantages[t], epsilon))
            .sum();
        total += sum / n as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Degenerate("no untruncated samples".into()));
    }
    Ok(total / counted as f64)
}

fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    let lse = max + row.iter().map(|&v| (v / tau - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v / tau - lse).collect()
}

/// `τ² · KL(teacher ‖ student)` on τ-softened distributions, averaged over positions.
pub fn distill_loss(teacher: &[Vec<f64>], student: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::config("tau must be positive"));
    }
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::shape(format!("{} teacher vs {} student positions", teacher.len(), student.len())));
    }
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        if t.len() != s.len() || t.is_empty() {
            return Err(Error::shape("teacher and student vocabularies differ"));
        }
        let (lt, ls) = (log_softmax(t, tau), log_softmax(s, tau));
        let kl: f64 = lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl.max(0.0);
    }
    Ok(tau * tau * total / teacher.len() as f64)
}

pub const GIB: f64 = (1u64 << 30) as f64;
pub const GB: f64 = 1e9;

fn product(name: &str, factors: &[usize]) -> Result<u64> {
    if factors.contains(&0) {
        return Err(Error::config(format!("{name}: every dimension must be positive")));
    }
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f as u64))
        .ok_or_else(|| Error::OutOfRange(format!("{name} overflows 64 bits")))
}

/// Keys and values for every layer and kv head.
pub fn kv_memory_bytes(layers: usize, head_dim: usize, h_kv: usize, seq_len: usize, bytes_per_el: usize, batch: usize) -> Result<u64> {
    product("kv_memory_bytes", &[layers, head_dim, h_kv, seq_len, 2, bytes_per_el, batch])
}

/// Cache size between compressions, `(b + s) / seq_len`.
pub fn compressed_fraction(budget: usize, stride: usize, seq_len: usize) -> Result<f64> {
    if budget == 0 || stride == 0 || seq_len == 0 {
        return Err(Error::config("budget, stride and seq_len must be positive"));
    }
    Ok((budget + stride) as f64 / seq_len as f64)
}

/// Carried scores relative to the retained keys and values, `(b − w) / (2 b d)`.
pub fn score_cache_fraction(budget: usize, window: usize, head_dim: usize) -> Result<f64> {
    if budget == 0 || head_dim == 0 || window >= budget {
        return Err(Error::config("need positive head_dim and window < budget"));
    }
    Ok((budget - window) as f64 / (budget * head_dim * 2) as f64)
}

/// One carried score per non-window retained token, layer and kv head.
pub fn score_cache_bytes(layers: usize, h_kv: usize, budget: usize, window: usize, bytes_per_el: usize, batch: usize) -> Result<u64> {
    if window >= budget {
        return Err(Error::config("window must be smaller than the budget"));
    }
    product("score_cache_bytes", &[layers, h_kv, budget - window, bytes_per_el, batch])
}

/// One byte per (query, key) pair for every layer and kv head.
pub fn mask_memory_bytes(batch: usize, layers: usize, h_kv: usize, seq_len: usize) -> Result<u64> {
    product("mask_memory_bytes", &[batch, layers, h_kv, seq_len, seq_len])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Size {
    pub bytes: u64,
    pub gib: f64,
    pub gb: f64,
}

impl From<u64> for Size {
    fn from(bytes: u64) -> Self {
        Self {
            bytes,
            gib: bytes as f64 / GIB,
            gb: bytes as f64 / GB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetMemory {
    pub budget: usize,
    pub compressed: Size,
    pub compressed_fraction: f64,
    pub savings_percent: f64,
    pub score_cache: Size,
    pub score_cache_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub layers: usize,
    pub head_dim: usize,
    pub n_kv_heads: usize,
    pub bytes_per_el: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub stride: usize,
    pub window: usize,
    pub full_kv: Size,
    pub budgets: Vec<BudgetMemory>,
    pub mask: Size,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryScenario {
    pub layers: usize,
    pub head_dim: usize,
    pub n_kv_heads: usize,
    pub bytes_per_el: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub stride: usize,
    pub window: usize,
}

pub fn memory_report(sc: &MemoryScenario, budgets: &[usize]) -> Result<MemoryReport> {
    let full = kv_memory_bytes(sc.layers, sc.head_dim, sc.n_kv_heads, sc.seq_len, sc.bytes_per_el, sc.batch)?;
    let budgets = budgets
        .iter()
        .map(|&b| {
            let frac = compressed_fraction(b, sc.stride, sc.seq_len)?;
            Ok(BudgetMemory {
                budget: b,
                compressed: kv_memory_bytes(sc.layers, sc.head_dim, sc.n_kv_heads, b + sc.stride, sc.bytes_per_el, sc.batch)?.into(),
                compressed_fraction: frac,
                savings_percent: 100.0 * (1.0 - frac),
                score_cache: score_cache_bytes(sc.layers, sc.n_kv_heads, b, sc.window, sc.bytes_per_el, sc.batch)?.into(),
                score_cache_fraction: score_cache_fraction(b, sc.window, sc.head_dim)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MemoryReport {
        layers: sc.layers,
        head_dim: sc.head_dim,
        n_kv_heads: sc.n_kv_heads,
        bytes_per_el: sc.bytes_per_el,
        seq_len: sc.seq_len,
        batch: sc.batch,
        stride: sc.stride,
        window: sc.window,
        full_kv: full.into(),
        budgets,
        mask: mask_memory_bytes(sc.batch, sc.layers, sc.n_kv_heads, sc.seq_len)?.into(),
    })
}
