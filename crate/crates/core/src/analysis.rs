//! Diagnostics over traces and eviction logs: how stable the important-token
//! set is across windows, how sparse attention is, where retained tokens sit
//! in the sequence, and which tokens survive.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{select_top, EvictionLog, TieBreak};
use crate::error::{Error, Result};
use crate::scoring::{attention_scores, local_score, reduce_heads};
use crate::tensor::Tensor3;
use crate::trace::DecodeTrace;

/// Window-mean attention that `queries` of one kv head's query group pay to `keys`.
pub fn head_scores(trace: &DecodeTrace, layer: usize, kv: usize, queries: Range<usize>, keys: &[usize]) -> Result<Vec<f64>> {
    let d = trace.dims();
    let group = d.group();
    let w = queries.len();
    let mut q = Vec::with_capacity(group * w * d.head_dim);
    for h in kv * group..(kv + 1) * group {
        for step in queries.clone() {
            q.extend_from_slice(trace.q_row(step, layer, h));
        }
    }
    let mut k = Vec::with_capacity(keys.len() * d.head_dim);
    for &p in keys {
        k.extend_from_slice(trace.k_row(p, layer, kv));
    }
    let q = Tensor3::from_vec([group, w, d.head_dim], q)?;
    let k = Tensor3::from_vec([1, keys.len(), d.head_dim], k)?;
    let s = local_score(&reduce_heads(&attention_scores(&q, &k)?, group)?)?;
    Ok(s.row(0).to_vec())
}

/// Number of positions kept at retention fraction `p` out of `l`.
pub fn top_count(p: f64, l: usize) -> usize {
    ((p * l as f64).ceil() as usize).clamp(1, l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub layer: usize,
    /// Index of the earlier window, or `union`.
    pub window: String,
    pub p: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub window_size: usize,
    pub n_windows: usize,
    /// Keys `0..n_keys` are scored by every window.
    pub n_keys: usize,
    pub fractions: Vec<f64>,
    pub rows: Vec<OverlapRow>,
}

impl OverlapReport {
    pub fn get(&self, layer: usize, window: &str, p: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.window == window && r.p == p)
            .map(|r| r.value)
    }
}

pub fn overlap_ratio(last: &HashSet<usize>, other: &HashSet<usize>) -> f64 {
    last.intersection(other).count() as f64 / last.len() as f64
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() || fractions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::config("fractions must be non-empty and within (0, 1]"));
    }
    Ok(())
}

/// Splits the last `n_windows × window_size` steps into windows, scores the
/// keys that precede all of them, and compares each earlier window's top-p
/// set (and their union) with the last window's.
pub fn window_overlap(trace: &DecodeTrace, n_windows: usize, window_size: usize, fractions: &[f64]) -> Result<OverlapReport> {
    check_fractions(fractions)?;
    if n_windows < 2 || window_size == 0 {
        return Err(Error::config("need at least two windows of positive size"));
    }
    let span = n_windows * window_size;
    if trace.n_steps() <= span {
        return Err(Error::OutOfRange(format!(
            "trace of {} steps too short for {n_windows} windows of {window_size} plus preceding keys",
            trace.n_steps()
        )));
    }
    let start = trace.n_steps() - span;
    let keys: Vec<usize> = (0..start).collect();
    let d = trace.dims();
    let per_layer: Vec<Vec<OverlapRow>> = (0..d.n_layers)
        .into_par_iter()
        .map(|layer| {
            // scores[window][head]
            let scores: Vec<Vec<Vec<f64>>> = (0..n_windows)
                .map(|wi| {
                    let q = start + wi * window_size..start + (wi + 1) * window_size;
                    (0..d.n_kv_heads)
                        .map(|kv| head_scores(trace, layer, kv, q.clone(), &keys))
                        .collect::<Result<_>>()
                })
                .collect::<Result<_>>()?;
            let mut rows = Vec::new();
            for &p in fractions {
                let k = top_count(p, keys.len());
                let sets: Vec<Vec<HashSet<usize>>> = scores
                    .iter()
                    .map(|heads| {
                        heads
                            .iter()
                            .map(|s| select_top(s, &keys, k, TieBreak::PreferRecent).into_iter().collect())
                            .collect()
                    })
                    .collect();
                let last = &sets[n_windows - 1];
                let mean_over_heads = |f: &dyn Fn(usize) -> f64| (0..d.n_kv_heads).map(f).sum::<f64>() / d.n_kv_heads as f64;
                for (wi, set) in sets[..n_windows - 1].iter().enumerate() {
                    rows.push(OverlapRow {
                        layer,
                        window: wi.to_string(),
                        p,
                        value: mean_over_heads(&|h| overlap_ratio(&last[h], &set[h])),
                    });
                }
                let union = mean_over_heads(&|h| {
                    let u: HashSet<usize> = sets[..n_windows - 1].iter().flat_map(|s| s[h].iter().copied()).collect();
                    overlap_ratio(&last[h], &u)
                });
                rows.push(OverlapRow {
                    layer,
                    window: "union".into(),
                    p,
                    value: union,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(OverlapReport {
        window_size,
        n_windows,
        n_keys: keys.len(),
        fractions: fractions.to_vec(),
        rows: per_layer.into_iter().flatten().collect(),
    })
}

/// Fraction of scores strictly below `p × max`.
pub fn sparsity_of(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Degenerate("empty evaluation set".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(scores.iter().filter(|&&v| v < p * max).count() as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub layer: usize,
    pub p: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub thresholds: Vec<f64>,
    /// Windows averaged per layer.
    pub n_windows: usize,
    pub rows: Vec<SparsityRow>,
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() || thresholds.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::config("thresholds must be non-empty and within (0, 1)"));
    }
    Ok(())
}

/// `(layer, kv head, query window, keys)` units to average.
type Unit = (usize, usize, Range<usize>, Vec<usize>);

fn sparsity_over(trace: &DecodeTrace, thresholds: &[f64], units: Vec<Unit>, n_windows: usize) -> Result<SparsityReport> {
    let n_layers = trace.dims().n_layers;
    let values: Vec<(usize, Vec<f64>)> = units
        .into_par_iter()
        .map(|(layer, kv, q, keys)| {
            let s = head_scores(trace, layer, kv, q, &keys)?;
            let v = thresholds.iter().map(|&p| sparsity_of(&s, p)).collect::<Result<_>>()?;
            Ok((layer, v))
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![vec![0.0; thresholds.len()]; n_layers];
    let mut counts = vec![0usize; n_layers];
    for (layer, v) in values {
        counts[layer] += 1;
        for (acc, x) in sums[layer].iter_mut().zip(v) {
            *acc += x;
        }
    }
    let mut rows = Vec::new();
    for layer in 0..n_layers {
        if counts[layer] == 0 {
            return Err(Error::Degenerate(format!("layer {layer} has nothing to evaluate")));
        }
        for (i, &p) in thresholds.iter().enumerate() {
            rows.push(SparsityRow {
                layer,
                p,
                value: sums[layer][i] / counts[layer] as f64,
            });
        }
    }
    Ok(SparsityReport {
        thresholds: thresholds.to_vec(),
        n_windows,
        rows,
    })
}

/// Full-cache sparsity: the last `tail_len` steps, split into windows of
/// `window`, each scoring every key before it.
pub fn sparsity_full(trace: &DecodeTrace, window: usize, tail_len: usize, thresholds: &[f64]) -> Result<SparsityReport> {
    check_thresholds(thresholds)?;
    if window == 0 || tail_len < window {
        return Err(Error::config("need 0 < window <= tail_len"));
    }
    let n = trace.n_steps();
    let tail = tail_len.min(n.saturating_sub(1)) / window * window;
    if tail == 0 {
        return Err(Error::OutOfRange(format!("trace of {n} steps too short for a window of {window}")));
    }
    let start = n - tail;
    let d = trace.dims();
    let mut units = Vec::new();
    for layer in 0..d.n_layers {
        for wi in 0..tail / window {
            let q = start + wi * window..start + (wi + 1) * window;
            for kv in 0..d.n_kv_heads {
                units.push((layer, kv, q.clone(), (0..q.start).collect()));
            }
        }
    }
    sparsity_over(trace, thresholds, units, tail / window)
}

/// Compressed-cache sparsity: at every compression in `log`, the window's
/// attention over the cache it saw, window positions excluded.
pub fn sparsity_compressed(trace: &DecodeTrace, log: &EvictionLog, thresholds: &[f64]) -> Result<SparsityReport> {
    check_thresholds(thresholds)?;
    let w = log.config.window;
    let d = log.dims;
    if d != trace.dims() {
        return Err(Error::shape("log and trace dimensions differ"));
    }
    // Cache contents per (layer, head) just before each event.
    let mut caches: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); d.n_kv_heads]; d.n_layers];
    let mut last_step = vec![vec![0usize; d.n_kv_heads]; d.n_layers];
    let mut units = Vec::new();
    let mut steps = HashSet::new();
    for e in &log.events {
        if e.step > trace.n_steps() || e.step < w {
            return Err(Error::OutOfRange(format!("event step {} outside trace", e.step)));
        }
        let cache = &mut caches[e.layer][e.head];
        cache.extend(last_step[e.layer][e.head]..e.step);
        let q = e.step - w..e.step;
        let keys: Vec<usize> = cache.iter().copied().filter(|&p| p < q.start).collect();
        units.push((e.layer, e.head, q, keys));
        steps.insert(e.step);
        *cache = e.retained.clone();
        last_step[e.layer][e.head] = e.step;
    }
    if units.is_empty() {
        return Err(Error::Degenerate("log has no compressions".into()));
    }
    sparsity_over(trace, thresholds, units, steps.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub total: u64,
}

/// Histogram of finally-retained positions normalized by `seq_len`, over all
/// (layer, head) pairs or a single one.
pub fn position_density(log: &EvictionLog, seq_len: usize, n_bins: usize, only: Option<(usize, usize)>) -> Result<DensityHistogram> {
    if seq_len == 0 || n_bins == 0 {
        return Err(Error::config("seq_len and n_bins must be positive"));
    }
    if let Some((l, h)) = only {
        if l >= log.dims.n_layers || h >= log.dims.n_kv_heads {
            return Err(Error::OutOfRange(format!("layer {l} head {h}")));
        }
    }
    let finals = log.final_retained(seq_len);
    let mut counts = vec![0u64; n_bins];
    let (mut sum, mut total) = (0.0, 0u64);
    for (l, heads) in finals.iter().enumerate() {
        for (h, positions) in heads.iter().enumerate() {
            if only.is_some_and(|o| o != (l, h)) {
                continue;
            }
            for &p in positions {
                let x = p as f64 / seq_len as f64;
                counts[((x * n_bins as f64) as usize).min(n_bins - 1)] += 1;
                sum += x;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Degenerate("no retained positions".into()));
    }
    Ok(DensityHistogram {
        edges: (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect(),
        counts,
        mean: sum / total as f64,
        total,
    })
}

/// Finally-retained token texts of one (layer, head), most frequent first,
/// ties alphabetical.
pub fn token_frequency(log: &EvictionLog, trace: &DecodeTrace, layer: usize, head: usize) -> Result<Vec<(String, u64)>> {
    if trace.token_ids().is_none() || trace.token_text().is_none() {
        return Err(Error::Missing("trace carries no token ids and text table".into()));
    }
    if layer >= log.dims.n_layers || head >= log.dims.n_kv_heads {
        return Err(Error::OutOfRange(format!("layer {layer} head {head}")));
    }
    let seq_len = log.seq_len.min(trace.n_steps());
    let finals = log.final_retained(seq_len);
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for &p in &finals[layer][head] {
        let text = trace
            .token_str(p)
            .ok_or_else(|| Error::Missing(format!("no text for the token at step {p}")))?;
        *counts.entry(text).or_default() += 1;
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

pub fn write_overlap_csv<W: Write>(report: &OverlapReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in &report.rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sparsity_csv<W: Write>(report: &SparsityReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in &report.rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_density_csv<W: Write>(hist: &DensityHistogram, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin", "lo", "hi", "count"])?;
    for (i, c) in hist.counts.iter().enumerate() {
        out.write_record([
            i.to_string(),
            hist.edges[i].to_string(),
            hist.edges[i + 1].to_string(),
            c.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_frequency_csv<W: Write>(ranked: &[(String, u64)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["token", "count"])?;
    for (t, c) in ranked {
        out.write_record([t.as_str(), &c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
