//! Token scoring: window attention, head reduction, local and global scores,
//! key redundancy, SnapKV-style pooling and H2O-style accumulation.
//!
//! All arithmetic is carried out in `f64`; inputs are the `f32` states stored
//! in traces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rows, Tensor3};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_REDUNDANCY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_POOL_KERNEL: usize = 7;

/// Non-negative per-head token scores, `h_kv × l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(Rows);

impl ScoreMatrix {
    pub fn new(rows: Rows) -> Result<Self> {
        if let Some(bad) = rows.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::OutOfRange(format!("score {bad} is not finite and non-negative")));
        }
        Ok(Self(rows))
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(Rows::from_rows(rows)?)
    }

    pub fn rows(&self) -> &Rows {
        &self.0
    }

    pub fn into_rows(self) -> Rows {
        self.0
    }

    pub fn heads(&self) -> usize {
        self.0.heads()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn row(&self, h: usize) -> &[f64] {
        self.0.row(h)
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// In-place numerically stable softmax.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// Scaled dot-product attention probabilities of the window queries over the cache.
///
/// `q_window` is `h_q × w × d`, `k_cache` is `h_kv × l × d`. Query head `i`
/// reads key head `i / (h_q / h_kv)`. The result is `h_q × w × l`, every
/// `(head, row)` a probability vector over the `l` cached keys.
pub fn attention_scores(q_window: &Tensor3<f32>, k_cache: &Tensor3<f32>) -> Result<Tensor3<f64>> {
    let [h_q, w, d] = q_window.dims();
    let [h_kv, l, dk] = k_cache.dims();
    if d == 0 || d != dk {
        return Err(Error::shape(format!("head_dim {d} vs {dk}")));
    }
    if h_kv == 0 || h_q == 0 || h_q % h_kv != 0 {
        return Err(Error::shape(format!("{h_q} query heads cannot group onto {h_kv} kv heads")));
    }
    if l == 0 {
        return Err(Error::shape("empty key cache"));
    }
    let group = h_q / h_kv;
    let scale = (d as f64).sqrt();
    let mut out = Tensor3::filled([h_q, w, l], 0.0);
    for h in 0..h_q {
        let kv = h / group;
        for r in 0..w {
            let q = q_window.row(h, r);
            let row = out.row_mut(h, r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = dot(q, k_cache.row(kv, j)) / scale;
            }
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Elementwise max over the query heads that share each key/value head.
pub fn reduce_heads(a: &Tensor3<f64>, group: usize) -> Result<Tensor3<f64>> {
    let [h_q, w, l] = a.dims();
    if group == 0 || h_q % group != 0 {
        return Err(Error::shape(format!("{h_q} heads not divisible into groups of {group}")));
    }
    let h_kv = h_q / group;
    let mut out = Tensor3::filled([h_kv, w, l], f64::NEG_INFINITY);
    for h in 0..h_q {
        for r in 0..w {
            let src = a.row(h, r);
            for (o, &v) in out.row_mut(h / group, r).iter_mut().zip(src) {
                *o = o.max(v);
            }
        }
    }
    Ok(out)
}

/// Mean attention over the observation window: `S[i, j] = (1/w) Σ_k A'[i, k, j]`.
pub fn local_score(a_reduced: &Tensor3<f64>) -> Result<ScoreMatrix> {
    let [h_kv, w, l] = a_reduced.dims();
    if w == 0 {
        return Err(Error::shape("observation window is empty"));
    }
    let mut rows = Rows::zeros(h_kv, l);
    for h in 0..h_kv {
        let acc = rows.row_mut(h);
        for r in 0..w {
            for (s, &v) in acc.iter_mut().zip(a_reduced.row(h, r)) {
                *s += v;
            }
        }
        for s in acc.iter_mut() {
            *s /= w as f64;
        }
    }
    ScoreMatrix::new(rows)
}

/// Divides each head row by its maximum so the largest entry is exactly 1.
pub fn normalize_max(s: &ScoreMatrix) -> Result<ScoreMatrix> {
    let mut rows = s.rows().clone();
    for h in 0..rows.heads() {
        let row = rows.row_mut(h);
        let max = row.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::Degenerate(format!("head {h} has no positive score")));
        }
        for v in row.iter_mut() {
            *v /= max;
        }
    }
    Ok(ScoreMatrix(rows))
}

/// How historical and current scores are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalForm {
    /// `max(α·F, S)`
    Max,
    /// `α·F + (1−α)·S`
    Mean,
    /// `α·F + S`
    Sum,
}

impl GlobalForm {
    pub const ALL: [GlobalForm; 3] = [GlobalForm::Max, GlobalForm::Mean, GlobalForm::Sum];

    pub fn name(self) -> &'static str {
        match self {
            GlobalForm::Max => "max",
            GlobalForm::Mean => "mean",
            GlobalForm::Sum => "sum",
        }
    }

    #[inline]
    pub fn merge(self, alpha: f64, prev: f64, current: f64) -> f64 {
        match self {
            GlobalForm::Max => (alpha * prev).max(current),
            GlobalForm::Mean => alpha * prev + (1.0 - alpha) * current,
            GlobalForm::Sum => alpha * prev + current,
        }
    }
}

/// Carried global scores of the tokens that survived the previous compression.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalScoreState {
    pub values: Rows,
    pub form: GlobalForm,
    pub alpha: f64,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_mapping(mapping: &[Option<usize>], len: usize, prior: usize) -> Result<()> {
    if mapping.len() != len {
        return Err(Error::shape(format!("mapping covers {} of {len} positions", mapping.len())));
    }
    let mut seen = vec![false; prior];
    for idx in mapping.iter().flatten() {
        match seen.get_mut(*idx) {
            Some(s) if !*s => *s = true,
            _ => return Err(Error::shape(format!("mapping entry {idx} invalid or repeated"))),
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::shape("mapping does not cover every carried score"));
    }
    Ok(())
}

/// Merges carried scores with the current normalized local score.
///
/// `mapping[i]` names the column of `f_prev` that holds cache position `i`'s
/// previous score, or `None` for tokens that have none; those take
/// `s_norm` unchanged.
pub fn global_update(f_prev: &GlobalScoreState, s_norm: &ScoreMatrix, mapping: &[Option<usize>]) -> Result<Rows> {
    check_unit("alpha", f_prev.alpha)?;
    check_mapping(mapping, s_norm.len(), f_prev.values.len())?;
    if f_prev.values.heads() != s_norm.heads() {
        return Err(Error::shape("global state and local score disagree on head count"));
    }
    let mut out = s_norm.rows().clone();
    for h in 0..out.heads() {
        let prev = f_prev.values.row(h);
        for (v, m) in out.row_mut(h).iter_mut().zip(mapping) {
            if let Some(idx) = m {
                *v = f_prev.form.merge(f_prev.alpha, prev[*idx], *v);
            }
        }
    }
    Ok(out)
}

/// Parameters of the key-similarity redundancy score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedundancyConfig {
    /// Cosine similarities below this are zeroed.
    pub threshold: f64,
    /// Trailing tokens whose similarity columns are zeroed.
    pub recent_exempt: usize,
    pub epsilon: f64,
}

impl Default for RedundancyConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_REDUNDANCY_THRESHOLD,
            recent_exempt: 0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Normalized redundancy score `R'` per head, `h_kv × l`; each row peaks at exactly 1.
pub fn redundancy_score(k_cache: &Tensor3<f32>, cfg: &RedundancyConfig) -> Result<Rows> {
    let [h_kv, l, d] = k_cache.dims();
    if l == 0 || d == 0 {
        return Err(Error::shape("redundancy needs at least one key of positive dimension"));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    let exempt_from = l.saturating_sub(cfg.recent_exempt);
    let mut out = Rows::zeros(h_kv, l);
    let mut unit = vec![0.0f64; l * d];
    for h in 0..h_kv {
        for j in 0..l {
            let key = k_cache.row(h, j);
            let norm = key.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            for (u, &x) in unit[j * d..(j + 1) * d].iter_mut().zip(key) {
                *u = x as f64 / (norm + cfg.epsilon);
            }
        }
        let row = out.row_mut(h);
        for (j, col) in row.iter_mut().enumerate().take(exempt_from) {
            let kj = &unit[j * d..(j + 1) * d];
            let mut sum = 0.0;
            for k in 0..l {
                let kk = &unit[k * d..(k + 1) * d];
                let c: f64 = kk.iter().zip(kj).map(|(a, b)| a * b).sum();
                if c >= cfg.threshold {
                    sum += c;
                }
            }
            *col = sum;
        }
        softmax_in_place(row);
        let max = row.iter().copied().fold(0.0, f64::max);
        for v in row.iter_mut() {
            *v /= max;
        }
    }
    Ok(out)
}

/// `λ·F − (1−λ)·R'`.
pub fn combine(f: &Rows, r_prime: &Rows, lambda: f64) -> Result<Rows> {
    check_unit("lambda", lambda)?;
    f.same_shape(r_prime)?;
    let data = f
        .data()
        .iter()
        .zip(r_prime.data())
        .map(|(a, r)| lambda * a - (1.0 - lambda) * r)
        .collect();
    Rows::from_vec(f.heads(), f.len(), data)
}

/// Stride-1 max pooling along the sequence axis with the window clamped at the edges.
pub fn snapkv_pool(s: &ScoreMatrix, kernel: usize) -> Result<ScoreMatrix> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::config(format!("pooling kernel {kernel} must be odd and positive")));
    }
    let radius = kernel / 2;
    let mut rows = Rows::zeros(s.heads(), s.len());
    for h in 0..s.heads() {
        let src = s.row(h);
        let n = src.len();
        for (i, v) in rows.row_mut(h).iter_mut().enumerate() {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(n);
            *v = src[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Ok(ScoreMatrix(rows))
}

/// Running sum of raw local scores; positions without history start at zero.
pub fn accumulate(acc_prev: &Rows, s: &ScoreMatrix, mapping: &[Option<usize>]) -> Result<Rows> {
    check_mapping(mapping, s.len(), acc_prev.len())?;
    if acc_prev.heads() != s.heads() {
        return Err(Error::shape("accumulator and score disagree on head count"));
    }
    let mut out = s.rows().clone();
    for h in 0..out.heads() {
        let prev = acc_prev.row(h);
        for (v, m) in out.row_mut(h).iter_mut().zip(mapping) {
            let base = m.map_or(0.0, |idx| prev[idx]);
            *v += base;
        }
    }
    Ok(out)
}
