//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use common::grad::{check_lum_loss, check_op, OPS};
use lum_core::datagen::{generate_synthetic_corpus, SyntheticWorldConfig};
use lum_core::dlrm::{DlrmConfig, LumUsage};
use lum_core::eval::{
    bench_conditions, bench_group_query, bench_packing, bench_prefix, fit_scaling_law,
    skewed_corpus, BenchOptions, ScalingPoint,
};
use lum_core::lum::{load_checkpoint, nce_loss, save_checkpoint, train, LumConfig, LumModel};
use lum_core::pipeline::{
    downstream_split, export_interests, ranking_experiment, scaling_sweep_sizes, scenario_conditions,
};
use lum_core::query::{read_interest_log, write_interest_log};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn group_query() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut orderings) = (0.0f64, true);
    for seed in 0..50 {
        let c = common::group_query_instance(1000 + seed);
        worst = worst.max(c.max_rel_err);
        orderings &= c.orderings_match;
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-5 && orderings && t < Duration::from_secs(60),
        format!("50 instances, max rel err {worst:.2e}, orderings identical: {orderings}, {t:.1?}"),
    )
}

fn packing() -> Outcome {
    let worst = (0..20)
        .map(|s| common::packing_instance(2000 + s))
        .fold(0.0, f64::max);
    outcome(worst <= 1e-5, format!("20 instances, max rel err {worst:.2e}"))
}

fn causality() -> Outcome {
    let held = (0..20).filter(|&s| common::causality_probe(3000 + s)).count();
    outcome(held == 20, format!("{held}/20 probes bitwise unchanged"))
}

fn gradients() -> Outcome {
    let mut worst_op = (0.0f64, "");
    for op in OPS {
        for seed in 0..20 {
            let e = check_op(op, 4000 + seed);
            if e > worst_op.0 {
                worst_op = (e, op);
            }
        }
    }
    let lum = (0..20)
        .map(|s| check_lum_loss(4100 + s, 1.0, 1e-3))
        .fold(0.0, f64::max);
    // At the training temperature the loss is 1/0.07 times as curved, so the
    // central-difference step shrinks to keep truncation error below 1e-3.
    let lum_cold = (0..20)
        .map(|s| check_lum_loss(4200 + s, 0.07, 1e-4))
        .fold(0.0, f64::max);
    outcome(
        worst_op.0 < 1e-3 && lum < 1e-3 && lum_cold < 1e-3,
        format!(
            "{} ops x 20 seeds max {:.2e} ({}); 2-layer LUM loss x 20 seeds max {lum:.2e} (tau 1, step 1e-3), {lum_cold:.2e} (tau 0.07, step 1e-4)",
            OPS.len(),
            worst_op.0,
            worst_op.1
        ),
    )
}

fn infonce() -> Outcome {
    let mut worst = 0.0f64;
    for k in [1usize, 2, 5, 64] {
        let loss = nce_loss(&[vec![1.0f64, 0.0]], &[vec![2.0, 0.0]], &[vec![vec![3.0, 0.0]; k]], 0.07).unwrap();
        worst = worst.max((loss - (1.0 + k as f64).ln()).abs());
    }
    let worked = nce_loss(
        &[vec![1.0f64, 0.0]],
        &[vec![1.0, 0.0]],
        &[vec![vec![0.0, 1.0], vec![0.0, -1.0]]],
        1.0,
    )
    .unwrap();
    let expected = (1.0 + 2.0 * (-1.0f64).exp()).ln();
    let err = (worked - expected).abs();
    outcome(
        worst < 1e-6 && err < 1e-6,
        format!("ln(1+K) max err {worst:.1e}; worked value {worked:.6} vs {expected:.6}"),
    )
}

/// Downstream ranking AUCs for one synthetic world.
struct AblationRun {
    with_conditions: f64,
    without_conditions: f64,
    direct_only: f64,
}

fn ablation_run(seed: u64, strength: f64) -> AblationRun {
    let corpus = generate_synthetic_corpus(&SyntheticWorldConfig {
        rng_seed: seed,
        condition_effect_strength: strength,
        ..Default::default()
    })
    .unwrap();
    let split = downstream_split(&corpus, 5).unwrap();
    let conditions = scenario_conditions(&corpus.vocab);
    let dlrm = DlrmConfig { seed, ..Default::default() };
    let run = |use_conditions: bool, usages: &[LumUsage]| -> Vec<f64> {
        let config = LumConfig {
            seed,
            use_conditions,
            epochs: 15,
            ..LumConfig::tiny()
        };
        let (model, _) = train(&split.history, &config).unwrap();
        let art = export_interests(&model, &split.history, &conditions, 10).unwrap();
        usages
            .iter()
            .map(|&u| ranking_experiment(&split, Some(&art), u, &dlrm).unwrap().auc)
            .collect()
    };
    let with = run(true, &[LumUsage::DirectAndMatching, LumUsage::Direct]);
    let without = run(false, &[LumUsage::DirectAndMatching]);
    AblationRun {
        with_conditions: with[0],
        without_conditions: without[0],
        direct_only: with[1],
    }
}

/// Two-sided paired t statistic of `diffs`.
fn paired_t(diffs: &[f64]) -> f64 {
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    mean / (sd / n.sqrt())
}

/// Critical |t| at the 1% level with 4 degrees of freedom.
const T_CRIT_4DF: f64 = 4.604;

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn condition_ablation(strong: &[AblationRun], null: &[AblationRun], elapsed: Duration) -> Outcome {
    let wins = strong.iter().filter(|r| r.with_conditions > r.without_conditions).count();
    let diffs: Vec<f64> = null.iter().map(|r| r.with_conditions - r.without_conditions).collect();
    let null_wins = diffs.iter().filter(|&&d| d > 0.0).count();
    let t = paired_t(&diffs);
    // A consistent winner wins every seed or differs significantly.
    let consistent = null_wins == 0 || null_wins == diffs.len() || t.abs() >= T_CRIT_4DF;
    let strong_diffs: Vec<f64> = strong.iter().map(|r| r.with_conditions - r.without_conditions).collect();
    outcome(
        wins >= 4 && !consistent && elapsed < Duration::from_secs(600),
        format!(
            "strength 2: with conditions wins {wins}/5 (AUC diffs {}); strength 0: wins {null_wins}/5, paired t {t:.2} (diffs {}); {elapsed:.0?}",
            fmt(&strong_diffs),
            fmt(&diffs)
        ),
    )
}

fn utilization_ablation(strong: &[AblationRun]) -> Outcome {
    let combined: Vec<f64> = strong.iter().map(|r| r.with_conditions).collect();
    let direct: Vec<f64> = strong.iter().map(|r| r.direct_only).collect();
    let (mc, md) = (median(&combined), median(&direct));
    outcome(
        mc >= md,
        format!("median AUC direct+matching {mc:.4} vs direct {md:.4} (per seed {} vs {})", fmt(&combined), fmt(&direct)),
    )
}

fn monotone(points: &[ScalingPoint]) -> bool {
    points.windows(2).all(|w| w[1].y >= w[0].y)
}

fn scaling() -> Outcome {
    let start = Instant::now();
    let mut worst_coef = 0.0f64;
    for (a, b, xs) in [
        (0.0068, 0.1741, [1e8, 1e9, 1e10]),
        (0.0147, 0.2326, [256.0, 1024.0, 4096.0]),
    ] {
        let pts: Vec<_> = xs.iter().map(|&x| ScalingPoint { x, y: a * x.ln() + b }).collect();
        let fit = fit_scaling_law(&pts).unwrap();
        worst_coef = worst_coef.max((fit.a - a).abs()).max((fit.b - b).abs());
    }
    let mut good = 0;
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let corpus = generate_synthetic_corpus(&SyntheticWorldConfig {
            rng_seed: seed,
            ..Default::default()
        })
        .unwrap();
        let base = LumConfig {
            seed,
            epochs: 10,
            ..LumConfig::tiny()
        };
        let pts = scaling_sweep_sizes(&corpus, &base, &[4, 8, 16, 32], 4, 10).unwrap();
        let fit = fit_scaling_law(&pts).unwrap();
        let ok = monotone(&pts) && fit.r_squared >= 0.8;
        good += ok as usize;
        per_seed.push(format!(
            "seed {seed}: R@10 [{}] R2 {:.3}{}",
            pts.iter().map(|p| format!("{:.3}", p.y)).collect::<Vec<_>>().join(" "),
            fit.r_squared,
            if ok { "" } else { " (miss)" }
        ));
    }
    let t = start.elapsed();
    outcome(
        worst_coef < 1e-9 && good >= 4 && t < Duration::from_secs(1800),
        format!("coefficient err {worst_coef:.1e}; sweep ok in {good}/5 seeds; {}; {t:.0?}", per_seed.join("; ")),
    )
}

fn efficiency() -> Outcome {
    let opts = BenchOptions::default();
    let skewed = skewed_corpus(64, 256, 1).unwrap();
    let pack = bench_packing(
        &skewed,
        &LumConfig {
            max_sequence_tokens: 256,
            ..LumConfig::tiny()
        },
        &opts,
    )
    .unwrap();
    let long = generate_synthetic_corpus(&SyntheticWorldConfig {
        num_users: 2,
        events_per_user_range: [128, 128],
        ..Default::default()
    })
    .unwrap();
    let model = LumModel::<f32>::new(
        LumConfig {
            max_sequence_tokens: 258,
            ..LumConfig::default()
        },
        long.vocab,
    )
    .unwrap();
    let prefix = bench_prefix(&long, 256).unwrap();
    let group = bench_group_query(&model, &prefix, &bench_conditions(2, 8), &opts).unwrap();
    let noisy = |n: bool| if n { " (noisy)" } else { "" };
    outcome(
        pack.speedup >= 2.0 && group.speedup >= 2.0,
        format!(
            "packing {:.2}x{}, group query {:.2}x{} (8 queries, 256-token prefix)",
            pack.speedup,
            noisy(pack.noisy()),
            group.speedup,
            noisy(group.noisy())
        ),
    )
}

fn metric_oracles() -> Outcome {
    let auc_ok = (0..100).filter(|&s| common::auc_matches_oracle(5000 + s)).count();
    let recall_ok = (0..100).filter(|&s| common::recall_matches_oracle(5100 + s)).count();
    outcome(
        auc_ok == 100 && recall_ok == 100,
        format!("AUC exact on {auc_ok}/100, recall exact on {recall_ok}/100"),
    )
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::small_corpus(6000, 8);
    let (model, _) = train(&corpus, &LumConfig { epochs: 1, ..LumConfig::tiny() }).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let v1 = save_checkpoint(&model, &a).unwrap();
    let loaded: LumModel<f32> = load_checkpoint(&a).unwrap();
    let v2 = save_checkpoint(&loaded, &b).unwrap();
    let ckpt = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap() && v1 == v2;

    let conditions = scenario_conditions(&corpus.vocab);
    let art = export_interests(&model, &corpus, &conditions, 5).unwrap();
    let (la, lb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_interest_log(&la, &art.records).unwrap();
    let back = read_interest_log(&la).unwrap();
    write_interest_log(&lb, &back).unwrap();
    let log = back == art.records && std::fs::read(&la).unwrap() == std::fs::read(&lb).unwrap();

    let cache: Vec<_> = (0..3).map(|s| common::cache::run_against_reference(6100 + s, 1000)).collect();
    let cache_ok = cache.iter().all(Result::is_ok);
    let first_err = cache.iter().find_map(|r| r.clone().err()).unwrap_or_default();
    outcome(
        ckpt && log && cache_ok,
        format!(
            "checkpoint bitwise: {ckpt}; interest log bitwise ({} records): {log}; cache vs reference over 3 x 1000 ops: {cache_ok}{first_err}",
            art.records.len()
        ),
    )
}

fn report(n: usize, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {n}: {name}: {}", o.detail);
}

fn main() {
    let mut results = Vec::new();
    let mut check = |n: usize, name: &str, o: Outcome| {
        report(n, name, &o);
        results.push(o.pass);
    };
    check(1, "group-query equivalence", group_query());
    check(2, "packing equivalence", packing());
    check(3, "causality", causality());
    check(4, "gradient correctness", gradients());
    check(5, "InfoNCE analytics", infonce());

    let start = Instant::now();
    let strong: Vec<_> = (0..5).map(|s| ablation_run(s, 2.0)).collect();
    let null: Vec<_> = (0..5).map(|s| ablation_run(s, 0.0)).collect();
    check(6, "condition-token ablation", condition_ablation(&strong, &null, start.elapsed()));
    check(7, "knowledge-utilization ablation", utilization_ablation(&strong));

    check(8, "scaling-law harness", scaling());
    check(9, "efficiency direction", efficiency());
    check(10, "metric oracles", metric_oracles());
    check(11, "persistence", persistence());

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
