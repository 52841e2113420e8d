//! The compression loop: append tokens, and every `stride` generated tokens
//! score the cache from the observation window, keep the top `budget - window`
//! positions per kv head plus the window, and carry score state forward.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scoring::{
    self, accumulate, attention_scores, combine, global_update, local_score, normalize_max, redundancy_score,
    reduce_heads, snapkv_pool, GlobalForm, GlobalScoreState, RedundancyConfig,
};
use crate::tensor::{Rows, Tensor3};
use crate::trace::{DecodeTrace, TraceDims};

/// Which score decides the survivors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Attention sinks plus the most recent tokens; the budget is the window size.
    StreamingWindow,
    /// Accumulated raw local scores.
    H2o,
    /// Local score with sequence-wise max pooling.
    SnapKv,
    /// Normalized local score of the current window only.
    Local,
    /// Normalized local score combined with key redundancy.
    Rkv,
    /// Decayed global score, optionally combined with key redundancy.
    Global { form: GlobalForm, redundancy: bool },
}

impl Policy {
    /// Global max form with redundancy, the main configuration.
    pub const GKV: Policy = Policy::Global {
        form: GlobalForm::Max,
        redundancy: true,
    };

    /// Every policy variant the engine supports.
    pub fn all() -> Vec<Policy> {
        let mut v = vec![
            Policy::StreamingWindow,
            Policy::H2o,
            Policy::SnapKv,
            Policy::Local,
            Policy::Rkv,
        ];
        for form in GlobalForm::ALL {
            for redundancy in [false, true] {
                v.push(Policy::Global { form, redundancy });
            }
        }
        v
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::StreamingWindow => f.write_str("streaming_window"),
            Policy::H2o => f.write_str("h2o"),
            Policy::SnapKv => f.write_str("snapkv"),
            Policy::Local => f.write_str("local"),
            Policy::Rkv => f.write_str("rkv"),
            Policy::Global { form, redundancy } => {
                write!(f, "global-{}", form.name())?;
                if *redundancy {
                    f.write_str("+redundancy")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let p = match s.as_str() {
            "streaming_window" | "streaming" | "streamingllm" => Policy::StreamingWindow,
            "h2o" => Policy::H2o,
            "snapkv" => Policy::SnapKv,
            "local" | "morphkv" => Policy::Local,
            "rkv" | "r-kv" => Policy::Rkv,
            "gkv" | "g-kv" => Policy::GKV,
            "global" => Policy::Global {
                form: GlobalForm::Max,
                redundancy: false,
            },
            other => {
                let rest = other
                    .strip_prefix("global-")
                    .or_else(|| other.strip_prefix("global_"))
                    .ok_or_else(|| Error::config(format!("unknown policy '{other}'")))?;
                let (form, redundancy) = match rest.split_once('+') {
                    Some((form, "redundancy" | "rkv")) => (form, true),
                    Some(_) => return Err(Error::config(format!("unknown policy '{other}'"))),
                    None => (rest, false),
                };
                let form = match form {
                    "max" => GlobalForm::Max,
                    "mean" | "avg" | "average" => GlobalForm::Mean,
                    "sum" => GlobalForm::Sum,
                    _ => return Err(Error::config(format!("unknown global form in '{other}'"))),
                };
                Policy::Global { form, redundancy }
            }
        };
        Ok(p)
    }
}

impl Serialize for Policy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordering among equal scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Higher position wins.
    #[default]
    PreferRecent,
    PreferOld,
}

impl FromStr for TieBreak {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefer_recent" | "recent" => Ok(TieBreak::PreferRecent),
            "prefer_old" | "old" => Ok(TieBreak::PreferOld),
            _ => Err(Error::config(format!("unknown tie-break '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvictionConfig {
    pub budget: usize,
    pub window: usize,
    pub stride: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub policy: Policy,
    pub tie_break: TieBreak,
    /// Leading positions always kept by the streaming policy.
    pub sink_tokens: usize,
    /// Compress once right after prefill when the prompt exceeds the budget.
    pub compress_prompt: bool,
    /// Max-pooling kernel for SnapKV (and for global scores when `global_pool`).
    pub pool_kernel: usize,
    pub global_pool: bool,
    /// Max-normalize local scores before the global merge. Off means raw scores.
    pub normalize_local: bool,
    pub redundancy_threshold: f64,
    /// Trailing tokens exempt from redundancy; `None` means the window size.
    pub recent_exempt: Option<usize>,
    pub epsilon: f64,
}

impl Default for EvictionConfig {
    fn default() -> Self {
        Self {
            budget: 512,
            window: 16,
            stride: 128,
            alpha: 0.8,
            lambda: 0.7,
            policy: Policy::GKV,
            tie_break: TieBreak::PreferRecent,
            sink_tokens: 0,
            compress_prompt: false,
            pool_kernel: scoring::DEFAULT_POOL_KERNEL,
            global_pool: false,
            normalize_local: true,
            redundancy_threshold: scoring::DEFAULT_REDUNDANCY_THRESHOLD,
            recent_exempt: None,
            epsilon: scoring::DEFAULT_EPSILON,
        }
    }
}

impl EvictionConfig {
    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window >= self.budget {
            return Err(Error::config(format!(
                "need 0 < window < budget, got window {} and budget {}",
                self.window, self.budget
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.sink_tokens >= self.budget {
            return Err(Error::config("sink_tokens must be smaller than the budget"));
        }
        if self.pool_kernel == 0 || self.pool_kernel % 2 == 0 {
            return Err(Error::config(format!("pool_kernel {} must be odd", self.pool_kernel)));
        }
        if !(-1.0..=1.0).contains(&self.redundancy_threshold) {
            return Err(Error::config("redundancy_threshold outside [-1, 1]"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }

    pub fn redundancy(&self) -> RedundancyConfig {
        RedundancyConfig {
            threshold: self.redundancy_threshold,
            recent_exempt: self.recent_exempt.unwrap_or(self.window),
            epsilon: self.epsilon,
        }
    }
}

/// Retained state of one (layer, kv head).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadCache {
    positions: Vec<usize>,
    keys: Vec<f32>,
    /// Score carried from the last compression, aligned with `positions`.
    carried: Vec<Option<f64>>,
}

impl HeadCache {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn carried(&self) -> &[Option<f64>] {
        &self.carried
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn keep(&mut self, indices: &[usize], carried: Vec<Option<f64>>, d: usize) {
        self.positions = indices.iter().map(|&i| self.positions[i]).collect();
        self.keys = indices
            .iter()
            .flat_map(|&i| self.keys[i * d..(i + 1) * d].iter().copied())
            .collect();
        self.carried = carried;
    }
}

/// Per-(layer, kv head) caches plus the counters that drive the schedule.
#[derive(Debug, Clone)]
pub struct CacheState {
    dims: TraceDims,
    layers: Vec<Vec<HeadCache>>,
    /// Queries of the most recent `window` positions, all layers each.
    recent_q: VecDeque<Vec<f32>>,
    n_prompt: usize,
    total_positions: usize,
    generated_count: usize,
    compressions: usize,
}

impl CacheState {
    fn new(dims: TraceDims, n_prompt: usize) -> Self {
        Self {
            dims,
            layers: vec![vec![HeadCache::default(); dims.n_kv_heads]; dims.n_layers],
            recent_q: VecDeque::new(),
            n_prompt,
            total_positions: 0,
            generated_count: 0,
            compressions: 0,
        }
    }

    pub fn dims(&self) -> TraceDims {
        self.dims
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadCache {
        &self.layers[layer][head]
    }

    pub fn retained(&self, layer: usize, head: usize) -> &[usize] {
        &self.layers[layer][head].positions
    }

    pub fn total_positions(&self) -> usize {
        self.total_positions
    }

    pub fn generated_count(&self) -> usize {
        self.generated_count
    }

    pub fn compressions(&self) -> usize {
        self.compressions
    }

    /// Length of every head's cache (all heads always agree).
    pub fn cache_len(&self) -> usize {
        self.layers[0][0].len()
    }

    /// The last `w` queries of `layer` as an `h_q × w × d` tensor.
    fn window_queries(&self, layer: usize, w: usize) -> Tensor3<f32> {
        let d = self.dims;
        let q_len = d.q_len();
        let rows: Vec<&[f32]> = self
            .recent_q
            .iter()
            .skip(self.recent_q.len() - w)
            .map(|q| &q[layer * q_len..(layer + 1) * q_len])
            .collect();
        let mut data = Vec::with_capacity(d.n_q_heads * w * d.head_dim);
        for h in 0..d.n_q_heads {
            for q in &rows {
                data.extend_from_slice(&q[h * d.head_dim..(h + 1) * d.head_dim]);
            }
        }
        Tensor3::from_vec([d.n_q_heads, w, d.head_dim], data).expect("window shape")
    }
}

/// One head's outcome of one compression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionEvent {
    /// Sequence length when the compression ran; the first position that no
    /// longer sees the evicted tokens.
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub evicted: Vec<usize>,
    pub retained: Vec<usize>,
}

/// Ordered record of every compression in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionLog {
    pub config: EvictionConfig,
    pub dims: TraceDims,
    pub n_prompt: usize,
    pub seq_len: usize,
    pub events: Vec<EvictionEvent>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Header {
        config: EvictionConfig,
        dims: TraceDims,
        n_prompt: usize,
        seq_len: usize,
    },
    Event(EvictionEvent),
}

const LOG_MAGIC: [u8; 4] = *b"GKVL";
const LOG_VERSION: u32 = 1;

impl EvictionLog {
    /// Number of distinct compression steps.
    pub fn n_compressions(&self) -> usize {
        let mut steps: Vec<usize> = self.events.iter().map(|e| e.step).collect();
        steps.dedup();
        steps.len()
    }

    /// Positions each (layer, head) still holds once `seq_len` tokens have been seen.
    pub fn final_retained(&self, seq_len: usize) -> Vec<Vec<Vec<usize>>> {
        let mut last: Vec<Vec<Option<&EvictionEvent>>> = vec![vec![None; self.dims.n_kv_heads]; self.dims.n_layers];
        for e in &self.events {
            last[e.layer][e.head] = Some(e);
        }
        last.into_iter()
            .map(|heads| {
                heads
                    .into_iter()
                    .map(|ev| match ev {
                        None => (0..seq_len).collect(),
                        Some(ev) => ev
                            .retained
                            .iter()
                            .copied()
                            .filter(|&p| p < seq_len)
                            .chain(ev.step..seq_len)
                            .collect(),
                    })
                    .collect()
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = LogLine::Header {
            config: self.config.clone(),
            dims: self.dims,
            n_prompt: self.n_prompt,
            seq_len: self.seq_len,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut w, &LogLine::Event(e.clone()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut log: Option<EvictionLog> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match (serde_json::from_str::<LogLine>(&line)?, log.as_mut()) {
                (
                    LogLine::Header {
                        config,
                        dims,
                        n_prompt,
                        seq_len,
                    },
                    None,
                ) => {
                    log = Some(EvictionLog {
                        config,
                        dims,
                        n_prompt,
                        seq_len,
                        events: Vec::new(),
                    })
                }
                (LogLine::Event(e), Some(log)) => log.events.push(e),
                _ => return Err(Error::Format(format!("line {}: header must come first and only once", i + 1))),
            }
        }
        let log = log.ok_or_else(|| Error::Format("empty log".into()))?;
        log.validate()?;
        Ok(log)
    }

    /// Compact little-endian form: magic, version, config JSON, dims, then events.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let put = |w: &mut W, v: usize| -> Result<()> {
            let v = u32::try_from(v).map_err(|_| Error::OutOfRange(format!("{v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
            Ok(())
        };
        w.write_all(&LOG_MAGIC)?;
        put(&mut w, LOG_VERSION as usize)?;
        let cfg = serde_json::to_vec(&self.config)?;
        put(&mut w, cfg.len())?;
        w.write_all(&cfg)?;
        for v in [
            self.dims.n_layers,
            self.dims.n_q_heads,
            self.dims.n_kv_heads,
            self.dims.head_dim,
            self.n_prompt,
            self.seq_len,
            self.events.len(),
        ] {
            put(&mut w, v)?;
        }
        for e in &self.events {
            for v in [e.step, e.layer, e.head, e.evicted.len()] {
                put(&mut w, v)?;
            }
            for &p in &e.evicted {
                put(&mut w, p)?;
            }
            put(&mut w, e.retained.len())?;
            for &p in &e.retained {
                put(&mut w, p)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        fn get<R: Read>(r: &mut R) -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Truncated {
                    section: "eviction log",
                    step: None,
                },
                _ => Error::Io(e),
            })?;
            Ok(u32::from_le_bytes(b) as usize)
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != LOG_MAGIC {
            return Err(Error::Format("not a binary eviction log".into()));
        }
        let version = get(&mut r)?;
        if version != LOG_VERSION as usize {
            return Err(Error::Format(format!("unsupported log version {version}")));
        }
        let cfg_len = get(&mut r)?;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config: EvictionConfig = serde_json::from_slice(&cfg)?;
        let dims = TraceDims {
            n_layers: get(&mut r)?,
            n_q_heads: get(&mut r)?,
            n_kv_heads: get(&mut r)?,
            head_dim: get(&mut r)?,
        };
        let n_prompt = get(&mut r)?;
        let seq_len = get(&mut r)?;
        let n_events = get(&mut r)?;
        let mut events = Vec::with_capacity(n_events.min(1 << 16));
        for _ in 0..n_events {
            let (step, layer, head) = (get(&mut r)?, get(&mut r)?, get(&mut r)?);
            let n_ev = get(&mut r)?;
            let evicted = (0..n_ev).map(|_| get(&mut r)).collect::<Result<Vec<_>>>()?;
            let n_ret = get(&mut r)?;
            let retained = (0..n_ret).map(|_| get(&mut r)).collect::<Result<Vec<_>>>()?;
            events.push(EvictionEvent {
                step,
                layer,
                head,
                evicted,
                retained,
            });
        }
        let log = EvictionLog {
            config,
            dims,
            n_prompt,
            seq_len,
            events,
        };
        log.validate()?;
        Ok(log)
    }

    /// Structural checks: heads in range, positions below their step, no resurrection.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let mut gone = vec![vec![std::collections::HashSet::new(); self.dims.n_kv_heads]; self.dims.n_layers];
        for e in &self.events {
            if e.layer >= self.dims.n_layers || e.head >= self.dims.n_kv_heads {
                return Err(Error::Format(format!("event for layer {} head {} out of range", e.layer, e.head)));
            }
            if e.evicted.iter().chain(&e.retained).any(|&p| p >= e.step) {
                return Err(Error::Format(format!("event at step {} names a future position", e.step)));
            }
            let set = &mut gone[e.layer][e.head];
            if e.retained.iter().any(|p| set.contains(p)) {
                return Err(Error::Format(format!("evicted position resurrected at step {}", e.step)));
            }
            for &p in &e.evicted {
                if !set.insert(p) {
                    return Err(Error::Format(format!("position {p} evicted twice")));
                }
            }
        }
        Ok(())
    }
}

/// Per-sequence outcome of a replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seq_len: usize,
    /// Final cache length averaged over layers and heads.
    pub final_cache_len: f64,
    pub n_compressions: usize,
    pub n_events: usize,
    pub retention_ratio: f64,
    /// Wall time of each compression in milliseconds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compress_ms: Vec<f64>,
}

impl RunMetrics {
    pub fn mean_compress_ms(&self) -> Option<f64> {
        (!self.compress_ms.is_empty()).then(|| self.compress_ms.iter().sum::<f64>() / self.compress_ms.len() as f64)
    }
}

/// Incremental eviction engine over one sequence.
pub struct Engine {
    cfg: EvictionConfig,
    state: CacheState,
    events: Vec<EvictionEvent>,
    compress_ms: Vec<f64>,
}

struct HeadOutcome {
    keep: Vec<usize>,
    carried: Vec<Option<f64>>,
}

impl Engine {
    pub fn new(cfg: EvictionConfig, dims: TraceDims, n_prompt: usize) -> Result<Self> {
        cfg.validate()?;
        dims.validate()?;
        Ok(Self {
            cfg,
            state: CacheState::new(dims, n_prompt),
            events: Vec::new(),
            compress_ms: Vec::new(),
        })
    }

    pub fn config(&self) -> &EvictionConfig {
        &self.cfg
    }

    pub fn state(&self) -> &CacheState {
        &self.state
    }

    pub fn events(&self) -> &[EvictionEvent] {
        &self.events
    }

    /// Appends one token's keys (and remembers its queries) across all
    /// layers, compressing when the schedule says so. Returns whether a
    /// compression ran.
    pub fn step(&mut self, q: &[f32], k: &[f32]) -> Result<bool> {
        let dims = self.state.dims;
        if q.len() != dims.n_layers * dims.q_len() || k.len() != dims.n_layers * dims.k_len() {
            return Err(Error::shape(format!(
                "token states of length {}/{} do not match {dims:?}",
                q.len(),
                k.len()
            )));
        }
        let pos = self.state.total_positions;
        let d = dims.head_dim;
        for (layer, heads) in self.state.layers.iter_mut().enumerate() {
            let k_layer = &k[layer * dims.k_len()..(layer + 1) * dims.k_len()];
            for (h, cache) in heads.iter_mut().enumerate() {
                cache.positions.push(pos);
                cache.keys.extend_from_slice(&k_layer[h * d..(h + 1) * d]);
                cache.carried.push(None);
            }
        }
        self.state.recent_q.push_back(q.to_vec());
        if self.state.recent_q.len() > self.cfg.window {
            self.state.recent_q.pop_front();
        }
        self.state.total_positions += 1;

        let over_budget = self.state.cache_len() > self.cfg.budget;
        let trigger = if pos >= self.state.n_prompt {
            self.state.generated_count += 1;
            self.state.generated_count % self.cfg.stride == 0 && over_budget
        } else {
            self.cfg.compress_prompt && self.state.total_positions == self.state.n_prompt && over_budget
        };
        if trigger {
            self.compress()?;
        }
        Ok(trigger)
    }

    /// Runs one compression now.
    pub fn compress(&mut self) -> Result<()> {
        let (b, w) = (self.cfg.budget, self.cfg.window);
        let l = self.state.cache_len();
        if l <= w || self.state.recent_q.len() < w {
            return Err(Error::OutOfRange(format!("window of {w} exceeds cache of {l}")));
        }
        if l <= b {
            return Err(Error::OutOfRange(format!("cache of {l} is within budget {b}")));
        }
        let started = Instant::now();
        let first = self.state.compressions == 0;
        let outcomes: Vec<Vec<HeadOutcome>> = (0..self.state.dims.n_layers)
            .into_par_iter()
            .map(|layer| self.score_layer(layer, first))
            .collect::<Result<_>>()?;

        let step = self.state.total_positions;
        let d = self.state.dims.head_dim;
        for (layer, heads) in outcomes.into_iter().enumerate() {
            for (h, outcome) in heads.into_iter().enumerate() {
                let cache = &mut self.state.layers[layer][h];
                let mut kept = vec![false; cache.len()];
                for &i in &outcome.keep {
                    kept[i] = true;
                }
                let evicted = cache
                    .positions
                    .iter()
                    .zip(&kept)
                    .filter(|(_, k)| !**k)
                    .map(|(p, _)| *p)
                    .collect();
                cache.keep(&outcome.keep, outcome.carried, d);
                self.events.push(EvictionEvent {
                    step,
                    layer,
                    head: h,
                    evicted,
                    retained: cache.positions.clone(),
                });
            }
        }
        self.state.compressions += 1;
        self.compress_ms.push(started.elapsed().as_secs_f64() * 1e3);
        Ok(())
    }

    fn score_layer(&self, layer: usize, first: bool) -> Result<Vec<HeadOutcome>> {
        let cfg = &self.cfg;
        let dims = self.state.dims;
        let heads = &self.state.layers[layer];
        let l = heads[0].len();
        let (b, w) = (cfg.budget, cfg.window);
        let n_cand = l - w;
        let n_keep = (b - w).min(n_cand);

        if cfg.policy == Policy::StreamingWindow {
            let recent = b - cfg.sink_tokens;
            let keep: Vec<usize> = (0..cfg.sink_tokens.min(l)).chain(l.saturating_sub(recent).max(cfg.sink_tokens)..l).collect();
            return Ok(heads
                .iter()
                .map(|_| HeadOutcome {
                    carried: vec![None; keep.len()],
                    keep: keep.clone(),
                })
                .collect());
        }

        let mut keys = Vec::with_capacity(dims.n_kv_heads * l * dims.head_dim);
        for cache in heads {
            keys.extend_from_slice(&cache.keys);
        }
        let keys = Tensor3::from_vec([dims.n_kv_heads, l, dims.head_dim], keys)?;
        let q = self.state.window_queries(layer, w);
        let s = local_score(&reduce_heads(&attention_scores(&q, &keys)?, dims.group())?)?;

        // Carried scores sit in the leading cache slots, identically for every head.
        let mapping: Vec<Option<usize>> = {
            let mut next = 0;
            heads[0]
                .carried
                .iter()
                .map(|c| {
                    c.map(|_| {
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        };
        let prior = Rows::from_rows(
            heads
                .iter()
                .map(|c| c.carried.iter().flatten().copied().collect())
                .collect(),
        )?;

        let (rank, carry): (Rows, Option<Rows>) = match cfg.policy {
            Policy::StreamingWindow => unreachable!(),
            Policy::Local => (normalize_max(&s)?.into_rows(), None),
            Policy::SnapKv => (snapkv_pool(&s, cfg.pool_kernel)?.into_rows(), None),
            Policy::H2o => {
                let acc = accumulate(&prior, &s, &mapping)?;
                (acc.clone(), Some(acc))
            }
            Policy::Rkv => {
                let r = redundancy_score(&keys, &cfg.redundancy())?;
                (combine(normalize_max(&s)?.rows(), &r, cfg.lambda)?, None)
            }
            Policy::Global { form, redundancy } => {
                let base = if cfg.global_pool {
                    snapkv_pool(&s, cfg.pool_kernel)?
                } else {
                    s
                };
                let current = if cfg.normalize_local {
                    normalize_max(&base)?
                } else {
                    base
                };
                let f = if first || prior.is_empty() {
                    current.into_rows()
                } else {
                    let state = GlobalScoreState {
                        values: prior,
                        form,
                        alpha: cfg.alpha,
                    };
                    global_update(&state, &current, &mapping)?
                };
                let rank = if redundancy {
                    combine(&f, &redundancy_score(&keys, &cfg.redundancy())?, cfg.lambda)?
                } else {
                    f.clone()
                };
                (rank, Some(f))
            }
        };

        Ok(heads
            .iter()
            .enumerate()
            .map(|(h, cache)| {
                let mut keep = select_top(&rank.row(h)[..n_cand], &cache.positions[..n_cand], n_keep, cfg.tie_break);
                let mut carried: Vec<Option<f64>> = match &carry {
                    Some(c) => keep.iter().map(|&i| Some(c.row(h)[i])).collect(),
                    None => vec![None; keep.len()],
                };
                keep.extend(n_cand..l);
                carried.extend(std::iter::repeat_n(None, w));
                HeadOutcome { keep, carried }
            })
            .collect())
    }

    pub fn finish(self) -> (EvictionLog, RunMetrics) {
        let seq_len = self.state.total_positions;
        let log = EvictionLog {
            config: self.cfg,
            dims: self.state.dims,
            n_prompt: self.state.n_prompt,
            seq_len,
            events: self.events,
        };
        let final_cache_len = mean_final_len(&log, seq_len);
        let metrics = RunMetrics {
            seq_len,
            final_cache_len,
            n_compressions: self.state.compressions,
            n_events: log.events.len(),
            retention_ratio: if seq_len == 0 {
                1.0
            } else {
                (final_cache_len / seq_len as f64).min(1.0)
            },
            compress_ms: self.compress_ms,
        };
        (log, metrics)
    }
}

/// Indices of the `k` best scores; ties resolved by position per `tie`.
/// Returned in ascending index order.
pub fn select_top(scores: &[f64], positions: &[usize], k: usize, tie: TieBreak) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| match tie {
            TieBreak::PreferRecent => positions[b].cmp(&positions[a]),
            TieBreak::PreferOld => positions[a].cmp(&positions[b]),
        })
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

fn mean_final_len(log: &EvictionLog, seq_len: usize) -> f64 {
    let finals = log.final_retained(seq_len);
    let n = (log.dims.n_layers * log.dims.n_kv_heads) as f64;
    finals.iter().flatten().map(|h| h.len() as f64).sum::<f64>() / n
}

/// Replays a trace through the engine.
pub fn run(trace: &DecodeTrace, cfg: &EvictionConfig) -> Result<(EvictionLog, RunMetrics)> {
    let mut engine = Engine::new(cfg.clone(), trace.dims(), trace.n_prompt())?;
    for step in 0..trace.n_steps() {
        engine.step(trace.q_step(step), trace.k_step(step))?;
    }
    Ok(engine.finish())
}

/// Final retained length, averaged over layers and heads, over `seq_len`, capped at 1.
pub fn retention_ratio(log: &EvictionLog, seq_len: usize) -> Result<f64> {
    if seq_len == 0 {
        return Err(Error::OutOfRange("sequence length must be positive".into()));
    }
    Ok((mean_final_len(log, seq_len) / seq_len as f64).min(1.0))
}
