//! Shared test helpers: random traces and configs, and a from-scratch
//! reference for the eviction schedule that keys everything by absolute
//! position instead of cache slot.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use gkv::engine::{EvictionConfig, EvictionLog, Policy, TieBreak};
use gkv::scoring::GlobalForm;
use gkv::{DecodeTrace, TraceDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dims(rng: &mut ChaCha8Rng) -> TraceDims {
    let n_kv_heads = [1, 2, 4][rng.random_range(0..3)];
    let max_group = 8 / n_kv_heads;
    let group = rng.random_range(1..=max_group);
    TraceDims {
        n_layers: rng.random_range(1..=4),
        n_q_heads: n_kv_heads * group,
        n_kv_heads,
        head_dim: [2, 4, 8][rng.random_range(0..3)],
    }
}

pub fn random_trace(rng: &mut ChaCha8Rng, dims: TraceDims, n_steps: usize, n_prompt: usize) -> DecodeTrace {
    let scale = rng.random_range(0.5..3.0);
    let normal = Normal::new(0.0, scale).unwrap();
    let q = (0..n_steps * dims.n_layers * dims.q_len())
        .map(|_| normal.sample(rng) as f32)
        .collect();
    let k = (0..n_steps * dims.n_layers * dims.k_len())
        .map(|_| normal.sample(rng) as f32)
        .collect();
    DecodeTrace::new(dims, n_prompt, q, k).unwrap()
}

pub fn random_config(rng: &mut ChaCha8Rng) -> EvictionConfig {
    let budget = rng.random_range(6..=64);
    let window = rng.random_range(1..=(budget - 1).min(8));
    EvictionConfig {
        budget,
        window,
        stride: rng.random_range(1..=32),
        alpha: [0.0, 0.5, 0.8, 1.0, rng.random_range(0.0..=1.0)][rng.random_range(0..5)],
        lambda: [0.0, 0.7, 1.0, rng.random_range(0.0..=1.0)][rng.random_range(0..4)],
        tie_break: if rng.random_bool(0.5) {
            TieBreak::PreferRecent
        } else {
            TieBreak::PreferOld
        },
        sink_tokens: if rng.random_bool(0.3) { rng.random_range(0..budget.min(4)) } else { 0 },
        compress_prompt: rng.random_bool(0.3),
        pool_kernel: [1, 3, 7][rng.random_range(0..3)],
        global_pool: rng.random_bool(0.2),
        normalize_local: rng.random_bool(0.85),
        redundancy_threshold: rng.random_range(-0.2..0.9),
        recent_exempt: if rng.random_bool(0.3) { Some(rng.random_range(0..=window + 2)) } else { None },
        ..Default::default()
    }
}

/// One compression as the reference sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct RefEvent {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub retained: Vec<usize>,
}

struct HeadState {
    cache: BTreeSet<usize>,
    /// Carried score per position, for policies that carry one.
    carried: HashMap<usize, f64>,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Window-mean attention per key (keys in ascending position order), with
/// query heads in the group max-reduced.
fn local_scores(trace: &DecodeTrace, layer: usize, head: usize, keys: &[usize], window: std::ops::Range<usize>) -> Vec<f64> {
    let d = trace.dims();
    let group = d.n_q_heads / d.n_kv_heads;
    let scale = (d.head_dim as f64).sqrt();
    let mut s = vec![0.0; keys.len()];
    for t in window.clone() {
        let mut reduced = vec![f64::NEG_INFINITY; keys.len()];
        for qh in head * group..(head + 1) * group {
            let q = trace.q_row(t, layer, qh);
            let logits: Vec<f64> = keys
                .iter()
                .map(|&p| {
                    let k = trace.k_row(p, layer, head);
                    q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / scale
                })
                .collect();
            for (r, v) in reduced.iter_mut().zip(softmax(&logits)) {
                *r = r.max(v);
            }
        }
        for (acc, v) in s.iter_mut().zip(reduced) {
            *acc += v;
        }
    }
    s.iter().map(|v| v / window.len() as f64).collect()
}

fn redundancy(trace: &DecodeTrace, layer: usize, head: usize, keys: &[usize], cfg: &EvictionConfig) -> Vec<f64> {
    let l = keys.len();
    let exempt = cfg.recent_exempt.unwrap_or(cfg.window);
    let unit: Vec<Vec<f64>> = keys
        .iter()
        .map(|&p| {
            let k: Vec<f64> = trace.k_row(p, layer, head).iter().map(|&x| x as f64).collect();
            let n = k.iter().map(|x| x * x).sum::<f64>().sqrt();
            k.iter().map(|x| x / (n + cfg.epsilon)).collect()
        })
        .collect();
    let col: Vec<f64> = (0..l)
        .map(|j| {
            if j + exempt >= l {
                return 0.0;
            }
            (0..l)
                .map(|i| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>())
                .filter(|&c| c >= cfg.redundancy_threshold)
                .sum()
        })
        .collect();
    let r = softmax(&col);
    let m = max_of(&r);
    r.iter().map(|v| v / m).collect()
}

fn pool(s: &[f64], kernel: usize) -> Vec<f64> {
    let r = kernel / 2;
    (0..s.len())
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(s.len() - 1);
            max_of(&s[lo..=hi])
        })
        .collect()
}

fn normalized(s: &[f64]) -> Vec<f64> {
    let m = max_of(s);
    s.iter().map(|v| v / m).collect()
}

/// Highest `k` scores among `(position, score)` candidates.
fn top(mut cands: Vec<(usize, f64)>, k: usize, tie: TieBreak) -> Vec<usize> {
    cands.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap().then(match tie {
            TieBreak::PreferRecent => b.0.cmp(&a.0),
            TieBreak::PreferOld => a.0.cmp(&b.0),
        })
    });
    cands.into_iter().take(k).map(|c| c.0).collect()
}

/// Replays `trace` from scratch, re-deriving every score from the raw
/// trace at each compression.
pub fn reference_run(trace: &DecodeTrace, cfg: &EvictionConfig) -> Vec<RefEvent> {
    let d = trace.dims();
    let (b, w, s) = (cfg.budget, cfg.window, cfg.stride);
    let mut heads: Vec<Vec<HeadState>> = (0..d.n_layers)
        .map(|_| {
            (0..d.n_kv_heads)
                .map(|_| HeadState {
                    cache: BTreeSet::new(),
                    carried: HashMap::new(),
                })
                .collect()
        })
        .collect();
    let mut events = Vec::new();
    let mut generated = 0;
    let mut compressions = 0;
    for pos in 0..trace.n_steps() {
        for layer in heads.iter_mut() {
            for h in layer.iter_mut() {
                h.cache.insert(pos);
            }
        }
        let t = pos + 1;
        let len = heads[0][0].cache.len();
        let fire = if pos >= trace.n_prompt() {
            generated += 1;
            generated % s == 0 && len > b
        } else {
            cfg.compress_prompt && t == trace.n_prompt() && len > b
        };
        if !fire {
            continue;
        }
        for (layer, layer_heads) in heads.iter_mut().enumerate() {
            for (head, st) in layer_heads.iter_mut().enumerate() {
                let keys: Vec<usize> = st.cache.iter().copied().collect();
                let window: Vec<usize> = (t - w..t).collect();
                let candidates: Vec<usize> = keys.iter().copied().filter(|p| *p < t - w).collect();
                let (kept, carry): (Vec<usize>, Option<HashMap<usize, f64>>) = if cfg.policy == Policy::StreamingWindow {
                    let sinks: Vec<usize> = keys.iter().copied().take(cfg.sink_tokens).collect();
                    let recent: Vec<usize> = keys.iter().copied().skip(keys.len() - (b - cfg.sink_tokens)).collect();
                    (sinks.into_iter().chain(recent).collect(), None)
                } else {
                    let raw = local_scores(trace, layer, head, &keys, t - w..t);
                    let score: Vec<f64> = match cfg.policy {
                        Policy::Local => normalized(&raw),
                        Policy::SnapKv => pool(&raw, cfg.pool_kernel),
                        Policy::H2o => keys
                            .iter()
                            .zip(&raw)
                            .map(|(p, v)| st.carried.get(p).copied().unwrap_or(0.0) + v)
                            .collect(),
                        Policy::Rkv => {
                            let r = redundancy(trace, layer, head, &keys, cfg);
                            normalized(&raw)
                                .iter()
                                .zip(&r)
                                .map(|(f, r)| cfg.lambda * f - (1.0 - cfg.lambda) * r)
                                .collect()
                        }
                        Policy::Global { form, .. } => {
                            let base = if cfg.global_pool { pool(&raw, cfg.pool_kernel) } else { raw.clone() };
                            let cur = if cfg.normalize_local { normalized(&base) } else { base };
                            keys.iter()
                                .zip(&cur)
                                .map(|(p, &c)| match (compressions, st.carried.get(p)) {
                                    (0, _) | (_, None) => c,
                                    (_, Some(&prev)) => match form {
                                        GlobalForm::Max => (cfg.alpha * prev).max(c),
                                        GlobalForm::Mean => cfg.alpha * prev + (1.0 - cfg.alpha) * c,
                                        GlobalForm::Sum => cfg.alpha * prev + c,
                                    },
                                })
                                .collect()
                        }
                        Policy::StreamingWindow => unreachable!(),
                    };
                    let by_pos: HashMap<usize, f64> = keys.iter().copied().zip(score.iter().copied()).collect();
                    let rank: HashMap<usize, f64> = match cfg.policy {
                        Policy::Global { redundancy: true, .. } => {
                            let r = redundancy(trace, layer, head, &keys, cfg);
                            keys.iter()
                                .zip(&r)
                                .map(|(p, r)| (*p, cfg.lambda * by_pos[p] - (1.0 - cfg.lambda) * r))
                                .collect()
                        }
                        _ => by_pos.clone(),
                    };
                    let survivors = top(candidates.iter().map(|p| (*p, rank[p])).collect(), b - w, cfg.tie_break);
                    let carries = matches!(cfg.policy, Policy::H2o | Policy::Global { .. });
                    let carry = carries.then(|| survivors.iter().map(|p| (*p, by_pos[p])).collect());
                    (survivors.into_iter().chain(window.iter().copied()).collect(), carry)
                };
                st.cache = kept.iter().copied().collect();
                st.carried = carry.unwrap_or_default();
                events.push(RefEvent {
                    step: t,
                    layer,
                    head,
                    retained: st.cache.iter().copied().collect(),
                });
            }
        }
        compressions += 1;
    }
    events
}

/// First difference between the engine's log and the reference, if any.
pub fn compare_with_reference(log: &EvictionLog, reference: &[RefEvent]) -> Option<String> {
    if log.events.len() != reference.len() {
        return Some(format!("{} engine events vs {} reference events", log.events.len(), reference.len()));
    }
    for (e, r) in log.events.iter().zip(reference) {
        if e.step != r.step || e.layer != r.layer || e.head != r.head || e.retained != r.retained {
            return Some(format!(
                "step {} layer {} head {}: engine {:?} vs reference {:?}",
                r.step, r.layer, r.head, e.retained, r.retained
            ));
        }
    }
    None
}

/// Every policy the engine knows.
pub fn all_policies() -> Vec<Policy> {
    Policy::all()
}
