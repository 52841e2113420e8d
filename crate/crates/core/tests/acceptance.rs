//! Acceptance suite. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits nonzero if any criterion fails.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use gkv::analysis::{sparsity_of, window_overlap};
use gkv::engine::{run, select_top, EvictionConfig, Policy, TieBreak};
use gkv::scoring::*;
use gkv::tensor::{Rows, Tensor3};
use gkv::toy::{argmax, max_relative_error, ToyModel, ToyModelConfig};
use gkv::train::*;
use gkv::TraceDims;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestCaseError, TestRunner};
use rand::Rng;

// Pinned tolerances and limits.
const C1_LIMIT: Duration = Duration::from_secs(1);
const C2_LIMIT: Duration = Duration::from_secs(120);
const C2_TRACES: usize = 200;
const C2_MAX_STEPS: usize = 512;
const C3_LIMIT: Duration = Duration::from_secs(300);
const C3_CONFIGS: usize = 20;
const C3_REL_TOL: f64 = 1e-4;
const C4_TOL: f64 = 1e-4;
const C5_CASES: u32 = 1000;
const C6_TRACES: usize = 100;
const C7_WORKERS: [&str; 2] = ["1", "4"];

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> std::result::Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, expected {want} (tol {tol})"))
}

// 1. Memory arithmetic.

fn criterion_1() -> Check {
    let gib = 1u64 << 30;
    let per_seq = kv_memory_bytes(28, 128, 2, 16384, 2, 1).map_err(|e| e.to_string())?;
    ensure(per_seq == 469_762_048, || format!("kv bytes per sequence {per_seq}"))?;
    ensure(per_seq as f64 / GIB == 0.4375, || "per-sequence GiB".into())?;
    let batch = kv_memory_bytes(28, 128, 2, 16384, 2, 128).map_err(|e| e.to_string())?;
    ensure(batch == 56 * gib, || format!("kv bytes at batch 128 {batch}"))?;

    // Compressed cache holds b + s positions; sizes in eighths of a GiB.
    for (b, eighths_x16, savings) in [(512, 35, 96.09), (1024, 63, 92.97), (2048, 119, 86.72)] {
        let bytes = kv_memory_bytes(28, 128, 2, b + 128, 2, 128).map_err(|e| e.to_string())?;
        ensure(bytes * 16 == eighths_x16 * gib, || format!("b={b}: compressed bytes {bytes}"))?;
        let frac = compressed_fraction(b, 128, 16384).map_err(|e| e.to_string())?;
        ensure(frac == (b + 128) as f64 / 16384.0, || format!("b={b}: fraction {frac}"))?;
        let pct = ((1.0 - frac) * 10_000.0).round() / 100.0;
        ensure(pct == savings, || format!("b={b}: savings {pct}%"))?;
    }

    let mask = mask_memory_bytes(16, 28, 2, 4096).map_err(|e| e.to_string())?;
    ensure(mask == 14 * gib, || format!("mask bytes {mask}"))?;
    let frac = score_cache_fraction(2048, 16, 128).map_err(|e| e.to_string())?;
    ensure(frac <= 1.0 / 256.0, || format!("score cache fraction {frac}"))?;
    let score = score_cache_bytes(28, 2, 2048, 16, 2, 128).map_err(|e| e.to_string())?;
    ensure(score == 28 * 2 * 2032 * 2 * 128, || format!("score cache bytes {score}"))?;
    Ok(format!("{per_seq} B/seq, 56 GiB batch, mask 14 GiB, score fraction {frac:.6}"))
}

// 2. Engine vs naive recomputation.

fn criterion_2() -> Check {
    let policies = all_policies();
    let mut events = 0usize;
    let mut longest = 0usize;
    for seed in 0..C2_TRACES as u64 {
        let mut r = rng(0xACCE_0002 ^ seed.wrapping_mul(0x9E37_79B9));
        let dims = random_dims(&mut r);
        // Every tenth trace goes long.
        let n_steps = if seed % 10 == 0 {
            r.random_range(300..=C2_MAX_STEPS)
        } else {
            r.random_range(1..=160)
        };
        let n_prompt = r.random_range(0..=n_steps.min(48));
        longest = longest.max(n_steps);
        let trace = random_trace(&mut r, dims, n_steps, n_prompt);
        let base = random_config(&mut r);
        for &policy in &policies {
            let cfg = base.clone().with_policy(policy);
            let (log, _) = run(&trace, &cfg).map_err(|e| format!("seed {seed} {policy}: {e}"))?;
            let reference = reference_run(&trace, &cfg);
            if let Some(diff) = compare_with_reference(&log, &reference) {
                return Err(format!("seed {seed} {policy}: {diff}"));
            }
            events += reference.len();
        }
    }
    ensure(events > 10_000, || format!("only {events} events exercised"))?;
    Ok(format!(
        "{C2_TRACES} traces x {} policies, {events} events, longest {longest} steps, 0 mismatches",
        policies.len()
    ))
}

// 3. Compressed decode vs masked full forward.

fn mask_case(model_cfg: ToyModelConfig, prompt: &[u32], n_generate: usize, cfg: &EvictionConfig) -> std::result::Result<usize, String> {
    let label = format!("{model_cfg:?} / {cfg:?}");
    let model = ToyModel::init(model_cfg).map_err(|e| format!("{label}: {e}"))?;
    let comp = model.decode_compressed(prompt, n_generate, cfg).map_err(|e| format!("{label}: {e}"))?;
    let masks = build_masks(&comp.log, comp.tokens.len()).map_err(|e| format!("{label}: {e}"))?;
    let masked = model.forward_masked(&comp.tokens, &masks).map_err(|e| format!("{label}: {e}"))?;
    ensure(masked.len() == comp.logits.len(), || format!("{label}: logit row counts differ"))?;
    for (pos, (a, b)) in comp.logits.iter().zip(&masked).enumerate() {
        let err = max_relative_error(a, b);
        ensure(err <= C3_REL_TOL, || format!("{label}: position {pos} relative error {err:e}"))?;
        ensure(argmax(a) == argmax(b), || format!("{label}: position {pos} argmax differs"))?;
    }
    Ok(comp.log.n_compressions())
}

fn criterion_3() -> Check {
    let mut compressions = 0;
    // Fixed small case: 2 layers, width 32, 256 steps, budget 64.
    let fixed = ToyModelConfig {
        n_layers: 2,
        d_model: 32,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 8,
        ffn_dim: 64,
        vocab_size: 128,
        seed: 7,
        ..Default::default()
    };
    let cfg = EvictionConfig {
        budget: 64,
        window: 16,
        stride: 32,
        ..Default::default()
    };
    let prompt: Vec<u32> = (0..16).map(|i| (i * 7 % 128) as u32).collect();
    let n = mask_case(fixed, &prompt, 256 - prompt.len(), &cfg)?;
    ensure(n > 0, || "fixed case never compressed".into())?;
    compressions += n;

    let policies = all_policies();
    for i in 0..C3_CONFIGS as u64 {
        let mut r = rng(0xACCE_0003 + i);
        let n_kv_heads = r.random_range(1..=2);
        let n_q_heads = n_kv_heads * r.random_range(1..=2);
        let head_dim = [4, 8][r.random_range(0..2)];
        let model_cfg = ToyModelConfig {
            n_layers: r.random_range(1..=3),
            d_model: n_q_heads * head_dim,
            n_q_heads,
            n_kv_heads,
            head_dim,
            ffn_dim: r.random_range(8..=48),
            vocab_size: r.random_range(16..=96),
            rotary_base: [100.0, 10_000.0][r.random_range(0..2)],
            seed: r.random(),
        };
        let mut cfg = random_config(&mut r);
        cfg.budget = cfg.budget.min(40);
        cfg.window = cfg.window.min(cfg.budget - 1);
        cfg.sink_tokens = cfg.sink_tokens.min(cfg.budget - 1);
        cfg.recent_exempt = cfg.recent_exempt.map(|e| e.min(cfg.window + 2));
        cfg.stride = r.random_range(1..=12);
        cfg.policy = policies[i as usize % policies.len()];
        let prompt: Vec<u32> = (0..r.random_range(1..=24))
            .map(|_| r.random_range(0..model_cfg.vocab_size as u32))
            .collect();
        let n_generate = r.random_range(40..=120);
        compressions += mask_case(model_cfg, &prompt, n_generate, &cfg)?;
    }
    Ok(format!(
        "{} configs, {compressions} compressions, rel err <= {C3_REL_TOL:e}, argmax identical",
        C3_CONFIGS + 1
    ))
}

// 4. Scalar oracles.

fn criterion_4() -> Check {
    let tol = C4_TOL;
    let r = |e: gkv::Error| e.to_string();

    let q = Tensor3::from_vec([1, 1, 2], vec![1.0f32, 0.0]).map_err(r)?;
    let k = Tensor3::from_vec([1, 2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).map_err(r)?;
    let a = attention_scores(&q, &k).map_err(r)?;
    let e = (1.0f64 / 2f64.sqrt()).exp();
    close("softmax[0]", a.get(0, 0, 0), 0.6698, tol)?;
    close("softmax[1]", a.get(0, 0, 1), 0.3302, tol)?;
    close("softmax oracle", a.get(0, 0, 0), e / (e + 1.0), 1e-12)?;

    let two = Tensor3::from_vec([2, 1, 2], vec![0.2, 0.8, 0.5, 0.5]).map_err(r)?;
    let red = reduce_heads(&two, 2).map_err(r)?;
    close("reduce[0]", red.get(0, 0, 0), 0.5, tol)?;
    close("reduce[1]", red.get(0, 0, 1), 0.8, tol)?;

    let rows = Tensor3::from_vec([1, 2, 2], vec![0.1, 0.9, 0.3, 0.7]).map_err(r)?;
    let s = local_score(&rows).map_err(r)?;
    close("S[0]", s.row(0)[0], 0.2, tol)?;
    close("S[1]", s.row(0)[1], 0.8, tol)?;
    let n = normalize_max(&s).map_err(r)?;
    close("norm[0]", n.row(0)[0], 0.25, tol)?;
    close("norm[1]", n.row(0)[1], 1.0, tol)?;

    let prev = Rows::from_rows(vec![vec![1.0]]).map_err(r)?;
    let cur = ScoreMatrix::from_rows(vec![vec![0.5, 1.0]]).map_err(r)?;
    let mapping = [Some(0), None];
    let g = |form| {
        global_update(&GlobalScoreState { values: prev.clone(), form, alpha: 0.8 }, &cur, &mapping)
            .map(|rows| rows.row(0).to_vec())
    };
    let max = g(GlobalForm::Max).map_err(r)?;
    close("max form[0]", max[0], 0.8, tol)?;
    close("max form[1]", max[1], 1.0, tol)?;
    close("mean form", g(GlobalForm::Mean).map_err(r)?[0], 0.9, tol)?;
    close("sum form", g(GlobalForm::Sum).map_err(r)?[0], 1.3, tol)?;

    let rcfg = RedundancyConfig { threshold: 0.5, recent_exempt: 0, epsilon: DEFAULT_EPSILON };
    let ortho = Tensor3::from_vec([1, 3, 3], vec![1.0f32, 0., 0., 0., 1., 0., 0., 0., 1.]).map_err(r)?;
    let rp = redundancy_score(&ortho, &rcfg).map_err(r)?;
    for (j, v) in rp.row(0).iter().enumerate() {
        close(&format!("orthogonal R'[{j}]"), *v, 1.0, tol)?;
    }
    let dup = Tensor3::from_vec([1, 3, 2], vec![1.0f32, 0., 1., 0., 0., 1.]).map_err(r)?;
    let rp = redundancy_score(&dup, &rcfg).map_err(r)?;
    let row = rp.row(0);
    ensure(row[0] > row[2] && row[1] > row[2], || format!("duplicate keys R' {row:?}"))?;

    let one = |v: f64| Rows::from_rows(vec![vec![v]]);
    let c = combine(&one(1.0).map_err(r)?, &one(1.0).map_err(r)?, 0.7).map_err(r)?;
    close("combine", c.data()[0], 0.4, tol)?;

    let pooled = snapkv_pool(&ScoreMatrix::from_rows(vec![vec![0.0, 1.0, 0.0, 0.0]]).map_err(r)?, 3).map_err(r)?;
    ensure(pooled.row(0) == [1.0, 1.0, 1.0, 0.0], || format!("pool {:?}", pooled.row(0)))?;
    let acc = accumulate(&one(0.3).map_err(r)?, &ScoreMatrix::from_rows(vec![vec![0.2]]).map_err(r)?, &[Some(0)]).map_err(r)?;
    close("accumulate", acc.data()[0], 0.5, tol)?;

    let kept = select_top(&[0.9, 0.1, 0.5, 0.7], &[0, 1, 2, 3], 2, TieBreak::PreferRecent);
    ensure(kept == [0, 3], || format!("top-k {kept:?}"))?;

    let adv = grpo_advantages(&GroupSample { rewards: vec![1.0, 0.0, 0.0, 1.0], truncated: vec![] }).map_err(r)?;
    for (got, want) in adv.advantages.iter().zip([1.0, -1.0, -1.0, 1.0]) {
        close("advantage", *got, want, tol)?;
    }
    close("clip term +", clip_term(1.5, 1.0, 0.2), 1.2, tol)?;
    close("clip term -", clip_term(0.5, -1.0, 0.2), -0.8, tol)?;

    let teacher = vec![vec![(2.0f64 / 3.0).ln(), (1.0f64 / 3.0).ln()]];
    let student = vec![vec![0.0, 0.0]];
    let kl = distill_loss(&teacher, &student, 1.0).map_err(r)?;
    close("KL", kl, 0.0566, tol)?;
    let exact = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
    close("KL oracle", kl, exact, 1e-12)?;

    let masks = {
        let dims = TraceDims { n_layers: 1, n_q_heads: 1, n_kv_heads: 1, head_dim: 2 };
        let log = gkv::EvictionLog {
            dims,
            config: EvictionConfig::default(),
            n_prompt: 0,
            seq_len: 12,
            events: vec![gkv::engine::EvictionEvent {
                step: 10,
                layer: 0,
                head: 0,
                retained: vec![],
                evicted: vec![3],
            }],
        };
        build_masks(&log, 12).map_err(r)?
    };
    ensure(masks.visible(0, 0, 3, 9) && !masks.visible(0, 0, 3, 10) && !masks.visible(0, 0, 3, 11), || {
        "mask visibility around the eviction step".into()
    })?;

    close("retention 640/16384", 640.0 / 16384.0, 0.0390625, 0.0)?;
    Ok(format!("all scalar examples within {tol:e}"))
}

// 5. Invariants as property tests.

fn small_dims() -> impl Strategy<Value = TraceDims> {
    (1usize..=2, prop::sample::select(vec![1usize, 2]), 1usize..=2, prop::sample::select(vec![2usize, 4])).prop_map(
        |(n_layers, n_kv_heads, group, head_dim)| TraceDims {
            n_layers,
            n_q_heads: n_kv_heads * group,
            n_kv_heads,
            head_dim,
        },
    )
}

fn engine_case() -> impl Strategy<Value = (gkv::EvictionLog, EvictionConfig)> {
    (
        small_dims(),
        any::<u64>(),
        1usize..=150,
        0usize..=40,
        prop::sample::select(Policy::all()),
        4usize..=24,
        1usize..=4,
        1usize..=12,
    )
        .prop_map(|(dims, seed, n_steps, n_prompt, policy, budget, window, stride)| {
            let mut r = rng(seed);
            let trace = random_trace(&mut r, dims, n_steps, n_prompt.min(n_steps));
            let cfg = EvictionConfig {
                budget,
                window: window.min(budget - 1),
                stride,
                policy,
                compress_prompt: seed % 3 == 0,
                ..Default::default()
            };
            let (log, _) = run(&trace, &cfg).unwrap();
            (log, cfg)
        })
}

fn prop_check<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> std::result::Result<(), TestCaseError>,
) -> std::result::Result<(), String> {
    let mut runner = TestRunner::new(RunnerConfig {
        cases: C5_CASES,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn criterion_5() -> Check {
    prop_check("budget invariant", engine_case(), |(log, cfg)| {
        for e in &log.events {
            prop_assert_eq!(e.retained.len(), cfg.budget);
        }
        Ok(())
    })?;
    prop_check("window preservation", engine_case(), |(log, cfg)| {
        for e in &log.events {
            let kept: HashSet<usize> = e.retained.iter().copied().collect();
            prop_assert!((e.step - cfg.window..e.step).all(|p| kept.contains(&p)));
        }
        Ok(())
    })?;
    prop_check("no resurrection", engine_case(), |(log, _)| {
        let mut gone = vec![vec![HashSet::new(); log.dims.n_kv_heads]; log.dims.n_layers];
        for e in &log.events {
            let g: &mut HashSet<usize> = &mut gone[e.layer][e.head];
            prop_assert!(e.retained.iter().all(|p| !g.contains(p)));
            g.extend(e.evicted.iter().copied());
        }
        Ok(())
    })?;
    let rows = prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 2);
    prop_check("normalize_max idempotence and scale invariance", (rows, 0.01f64..100.0), |(rows, c)| {
        prop_assume!(rows.iter().all(|r| r.iter().any(|&v| v > 0.0)));
        let s = ScoreMatrix::from_rows(rows.clone()).unwrap();
        let n = normalize_max(&s).unwrap();
        let nn = normalize_max(&n).unwrap();
        prop_assert_eq!(n.rows(), nn.rows());
        let scaled = ScoreMatrix::from_rows(rows.iter().map(|r| r.iter().map(|v| v * c).collect()).collect()).unwrap();
        let positions: Vec<usize> = (0..12).collect();
        for h in 0..2 {
            for k in 1..12 {
                prop_assert_eq!(
                    select_top(s.row(h), &positions, k, TieBreak::PreferRecent),
                    select_top(scaled.row(h), &positions, k, TieBreak::PreferRecent)
                );
            }
        }
        Ok(())
    })?;
    let logits = |n| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), n);
    prop_check("distill_loss non-negativity", (logits(3), logits(3), 0.1f64..4.0), |(t, s, tau)| {
        prop_assert!(distill_loss(&t, &s, tau).unwrap() >= 0.0);
        Ok(())
    })?;
    prop_check("advantage mean 0, std 1", prop::collection::vec(-10.0f64..10.0, 2..32), |rewards| {
        let a = grpo_advantages(&GroupSample { rewards, truncated: vec![] }).unwrap();
        prop_assume!(!a.degenerate);
        let n = a.advantages.len() as f64;
        let mean = a.advantages.iter().sum::<f64>() / n;
        let std = (a.advantages.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        Ok(())
    })?;
    let overlap_case = (any::<u64>(), 2usize..=4, 1usize..=6, 1usize..=20, 0.01f64..=1.0);
    prop_check("overlap union dominance", overlap_case, |(seed, n_windows, window_size, extra, p)| {
        let mut r = rng(seed);
        let dims = TraceDims { n_layers: 1, n_q_heads: 2, n_kv_heads: 1, head_dim: 4 };
        let t = random_trace(&mut r, dims, n_windows * window_size + extra, 0);
        let report = window_overlap(&t, n_windows, window_size, &[p]).unwrap();
        let u = report.get(0, "union", p).unwrap();
        for w in 0..n_windows - 1 {
            prop_assert!(u >= report.get(0, &w.to_string(), p).unwrap());
        }
        Ok(())
    })?;
    let sparsity_case = (prop::collection::vec(0.0f64..1.0, 1..40), 0.001f64..0.999, 0.001f64..0.999);
    prop_check("sparsity monotone in p", sparsity_case, |(scores, a, b)| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(sparsity_of(&scores, lo).unwrap() <= sparsity_of(&scores, hi).unwrap());
        Ok(())
    })?;
    Ok(format!("8 invariants x {C5_CASES} cases"))
}

// 6. Degenerate decay settings.

fn criterion_6() -> Check {
    let mut events = 0;
    for seed in 0..C6_TRACES as u64 {
        let mut r = rng(0xACCE_0006 + seed);
        let dims = random_dims(&mut r);
        let n_steps = r.random_range(20..=200);
        let n_prompt = r.random_range(0..=n_steps / 4);
        let trace = random_trace(&mut r, dims, n_steps, n_prompt);
        let mut base = random_config(&mut r);
        base.global_pool = false;

        let retained = |cfg: &EvictionConfig| -> std::result::Result<Vec<Vec<usize>>, String> {
            let (log, _) = run(&trace, cfg).map_err(|e| e.to_string())?;
            Ok(log.events.into_iter().map(|e| e.retained).collect())
        };

        let zero = EvictionConfig { alpha: 0.0, normalize_local: true, ..base.clone() };
        let local = retained(&zero.clone().with_policy(Policy::Local))?;
        let rkv = retained(&zero.clone().with_policy(Policy::Rkv))?;
        events += local.len();
        for form in GlobalForm::ALL {
            let plain = retained(&zero.clone().with_policy(Policy::Global { form, redundancy: false }))?;
            ensure(plain == local, || format!("seed {seed}: global-{} at alpha 0 differs from local", form.name()))?;
            let red = retained(&zero.clone().with_policy(Policy::Global { form, redundancy: true }))?;
            ensure(red == rkv, || format!("seed {seed}: global-{}+redundancy at alpha 0 differs from rkv", form.name()))?;
        }

        let one = EvictionConfig { alpha: 1.0, normalize_local: false, ..base };
        let h2o = retained(&one.clone().with_policy(Policy::H2o))?;
        let sum = retained(&one.with_policy(Policy::Global { form: GlobalForm::Sum, redundancy: false }))?;
        ensure(sum == h2o, || format!("seed {seed}: raw sum at alpha 1 differs from h2o"))?;
    }
    ensure(events > 1000, || format!("only {events} events exercised"))?;
    Ok(format!("{C6_TRACES} traces, {events} compressions per policy compared"))
}

// 7. Byte-identical CLI outputs.

fn gkv_cli(workers: &str, args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gkv"))
        .args(args)
        .env("GKV_WORKERS", workers)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("gkv {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn outputs(dir: &Path, workers: &str, trace: &str) -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    gkv_cli(workers, &["simulate", "--trace", trace, "--out", &p("sim"), "--budget", "48", "--window", "8", "--stride", "16"])?;
    gkv_cli(workers, &[
        "simulate", "--trace", trace, "--out", &p("simbin"), "--log-format", "binary",
        "--budget", "48", "--window", "8", "--stride", "16", "--policy", "h2o",
    ])?;
    gkv_cli(workers, &[
        "compare", "--trace", trace, "--out", &p("compare.csv"),
        "--policies", "streaming,h2o,snapkv,local,rkv,global-max,global-mean+redundancy,gkv",
        "--budgets", "24,48,96", "--window", "8", "--stride", "16",
    ])?;
    gkv_cli(workers, &["analyze", "overlap", "--trace", trace, "--windows", "3", "--window-size", "16", "--fractions", "0.1,0.3,0.55", "--out", &p("overlap.csv")])?;
    gkv_cli(workers, &["analyze", "sparsity", "--trace", trace, "--window", "8", "--tail", "64", "--out", &p("sparsity.csv")])?;
    gkv_cli(workers, &["analyze", "sparsity", "--trace", trace, "--log", &p("sim/log.jsonl"), "--out", &p("sparsity_log.csv")])?;
    gkv_cli(workers, &["analyze", "density", "--log", &p("sim/log.jsonl"), "--bins", "20", "--out", &p("density.csv")])?;
    gkv_cli(workers, &["analyze", "frequency", "--log", &p("sim/log.jsonl"), "--trace", trace, "--out", &p("frequency.csv")])?;
    gkv_cli(workers, &["mask", "--log", &p("sim/log.jsonl"), "--out", &p("mask.json")])?;

    let files = [
        "sim/log.jsonl", "sim/metrics.json", "simbin/log.bin", "compare.csv", "overlap.csv",
        "sparsity.csv", "sparsity_log.csv", "density.csv", "frequency.csv", "mask.json",
    ];
    files
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map(|b| (f.to_string(), b)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn criterion_7() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trace = tmp.path().join("toy.gkvt").to_string_lossy().into_owned();
    gkv_cli("1", &["toytrace", "--seed", "11", "--prompt-len", "24", "--n-generate", "168", "--out", &trace])?;

    let mut reference: Option<Vec<(String, Vec<u8>)>> = None;
    let mut runs = 0;
    for repeat in 0..2 {
        for workers in C7_WORKERS {
            let dir = tmp.path().join(format!("run{repeat}_w{workers}"));
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            let got = outputs(&dir, workers, &trace)?;
            runs += 1;
            match &reference {
                None => reference = Some(got),
                Some(want) => {
                    for ((name, a), (_, b)) in want.iter().zip(&got) {
                        ensure(a == b, || format!("{name} differs (repeat {repeat}, {workers} workers)"))?;
                    }
                }
            }
        }
    }
    let files = reference.map_or(0, |r| r.len());
    Ok(format!("{files} files byte-identical over {runs} runs, workers {C7_WORKERS:?}"))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Check); 7] = [
        ("memory arithmetic", C1_LIMIT, criterion_1),
        ("oracle equivalence", C2_LIMIT, criterion_2),
        ("mask equivalence", C3_LIMIT, criterion_3),
        ("formula micro-oracles", Duration::MAX, criterion_4),
        ("invariant suite", Duration::MAX, criterion_5),
        ("degenerate decay", Duration::MAX, criterion_6),
        ("determinism", Duration::MAX, criterion_7),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed < limit {
                Ok(detail)
            } else {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
        });
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {status} {name}: {detail} [{elapsed:.2?}]", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
