//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fliqs_core::analysis::{self, SynthSpec, ThresholdRule};
use fliqs_core::arch::{ArchChoice, SearchSpace};
use fliqs_core::controller::{beta_schedule, Controller, ControllerConfig, LayerPolicy, ScheduleKind};
use fliqs_core::costmodel::{uniform_cost, ModelManifest, GIGA};
use fliqs_core::data::{synth_glyphs, write_idx};
use fliqs_core::numerics::{NumericFormat, QuantConfig, Quantizer};
use fliqs_core::search::{
    run_fixed_on, run_pool, run_search_on, run_uniform_on, CostTarget, DataSource, ModelSpec, SearchConfig,
    SearchHooks, TrainerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn int(bits: u8) -> NumericFormat {
    NumericFormat::int(bits).unwrap()
}

fn fmt(s: &str) -> NumericFormat {
    s.parse().unwrap()
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got / want - 1.0).abs() <= rel
}

fn ac1_cost_model() -> Outcome {
    let rows = [
        ("resnet18", "BF16", 467.7),
        ("resnet18", "INT8", 116.9),
        ("resnet18", "INT4", 29.23),
        ("mobilenetv2", "BF16", 77.00),
        ("mobilenetv2", "INT8", 19.25),
        ("mobilenetv2", "INT4", 4.81),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (model, format, want) in rows {
        let m = ModelManifest::bundled(model).unwrap();
        let got = uniform_cost(fmt(format), &m) / GIGA;
        let ok = within(got, want, 0.01);
        pass &= ok;
        parts.push(format!("{model}/{format} {got:.3} vs {want}"));
    }
    check(pass, parts.join(", "))
}

/// Non-negative native grid values with their codes, built from the bit
/// layout alone.
fn oracle_grid(format: NumericFormat) -> Vec<(f64, u32)> {
    match format {
        NumericFormat::Int { bits } => (0..(1u32 << (bits - 1))).map(|c| (c as f64, c)).collect(),
        NumericFormat::Float { exponent, mantissa } => {
            let bias = 2f64.powi(1 << (exponent - 1));
            (0..(1u32 << (exponent + mantissa)))
                .map(|code| {
                    let e = code >> mantissa;
                    let m = (code & ((1 << mantissa) - 1)) as f64 / 2f64.powi(mantissa as i32);
                    let v = if e == 0 {
                        m * 2.0 / bias
                    } else {
                        (1.0 + m) * 2f64.powi(e as i32) / bias
                    };
                    (v, code)
                })
                .collect()
        }
        NumericFormat::Bf16 => unreachable!(),
    }
}

/// Nearest grid magnitude; exact ties go to the even code.
fn oracle_round(grid: &[(f64, u32)], y: f64) -> (f64, bool) {
    let a = y.abs();
    let mut best = grid[0];
    let mut tie = false;
    for &(v, c) in &grid[1..] {
        let (d, bd) = ((v - a).abs(), (best.0 - a).abs());
        if d < bd {
            best = (v, c);
            tie = false;
        } else if d == bd {
            tie = true;
            if c % 2 == 0 {
                best = (v, c);
            }
        }
    }
    (best.0.copysign(y), tie)
}

fn ac2_quantizer_oracle() -> Outcome {
    let mut formats: Vec<NumericFormat> = (2..=8).map(int).collect();
    for e in 1..=6u8 {
        for m in 1..=(7 - e) {
            formats.push(NumericFormat::float(e, m).unwrap());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut mismatches, mut ties, mut checked) = (0usize, 0usize, 0usize);
    for &f in &formats {
        let grid = oracle_grid(f);
        let max = grid.iter().map(|g| g.0).fold(0.0, f64::max);
        let sigma = 1.7;
        let q = Quantizer::new(f, QuantConfig::new(sigma).unwrap());
        let mut inputs: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-1.5 * sigma..1.5 * sigma)).collect();
        // Midpoints of adjacent grid values, mapped back to input units.
        for w in grid.windows(2) {
            let mid = (w[0].0 + w[1].0) / 2.0;
            inputs.push(mid / max * sigma);
            inputs.push(-mid / max * sigma);
        }
        for &x in &inputs {
            let y = x.clamp(-sigma, sigma) / sigma * max;
            let (v, tie) = oracle_round(&grid, y);
            let want = v / max * sigma;
            checked += 1;
            ties += tie as usize;
            if q.apply(x) != want {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0 && ties > 0,
        format!("{} formats, {checked} inputs, {ties} exact ties, {mismatches} mismatches", formats.len()),
    )
}

fn ac3_switching_shape() -> Outcome {
    let spec = SynthSpec::default();
    let k1: Vec<u8> = (4..=8).collect();
    let points = analysis::switching_sweep(&k1, 8, &spec, ThresholdRule::default(), 0).unwrap();
    let decreasing = points[..4].windows(2).all(|w| w[0].mean > w[1].mean);
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean).collect();
    match analysis::fit_exponential(&xs, &ys) {
        Ok(fit) => check(
            decreasing && fit.r_squared > 0.9,
            format!(
                "means {:?}, fit A={:.4} B={:.4} C={:.5} R²={:.4}",
                ys.iter().map(|y| format!("{y:.5}")).collect::<Vec<_>>(),
                fit.a,
                fit.b,
                fit.c,
                fit.r_squared
            ),
        ),
        Err(e) => check(false, format!("fit failed: {e}")),
    }
}

fn ac4_clipping_order() -> Outcome {
    let spec = SynthSpec {
        outlier_rate: 1e-3,
        ..SynthSpec::default()
    };
    let grid = analysis::percentile_grid(1.0, 100.0, 100);
    let p4 = analysis::clipping_sweep(int(4), &spec, &grid, 0).unwrap().optimal_percentile;
    let p8 = analysis::clipping_sweep(int(8), &spec, &grid, 0).unwrap().optimal_percentile;
    check(p4 < p8, format!("optimal percentile INT4 {p4}, INT8 {p8}"))
}

/// Objective recomputed from softmax, log-likelihood and entropy.
fn oracle_objective(logits: &[Vec<f64>], sampled: &[usize], adv: f64, beta: f64) -> f64 {
    logits
        .iter()
        .zip(sampled)
        .map(|(l, &a)| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
            let p: Vec<f64> = l.iter().map(|v| (v - m).exp() / z).collect();
            let h: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
            adv * p[a].ln() - beta * h
        })
        .sum()
}

fn ac5_policy_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let sizes: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(2..7)).collect();
        let policies: Vec<LayerPolicy> = sizes
            .iter()
            .map(|&n| LayerPolicy {
                options: vec![ArchChoice::new(int(8)); n],
                logits: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            })
            .collect();
        let sampled: Vec<usize> = sizes.iter().map(|&n| rng.gen_range(0..n)).collect();
        let adv = rng.gen_range(-2.0..2.0);
        let beta = rng.gen_range(-1.0..1.0);
        let ctrl = Controller::new(policies.clone(), ControllerConfig::default(), 0);
        let analytic = ctrl.policy_gradient(&sampled, adv, beta);
        let logits: Vec<Vec<f64>> = policies.iter().map(|p| p.logits.clone()).collect();
        let h = 1e-5;
        let (mut diff, mut norm) = (0.0, 0.0);
        for l in 0..logits.len() {
            for j in 0..logits[l].len() {
                let (mut up, mut down) = (logits.clone(), logits.clone());
                up[l][j] += h;
                down[l][j] -= h;
                let fd = (oracle_objective(&up, &sampled, adv, beta) - oracle_objective(&down, &sampled, adv, beta))
                    / (2.0 * h);
                diff += (fd - analytic[l][j]).powi(2);
                norm += fd.powi(2).max(analytic[l][j].powi(2));
            }
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    check(worst < 1e-5, format!("worst relative error {worst:.2e} over 100 configurations"))
}

fn ac6_controller_bandit() -> Outcome {
    let designated = [0usize, 2, 1];
    let steps = 5000u64;
    let mut parts = Vec::new();
    let mut pass = true;
    for seed in 0..10 {
        let policies = (0..3)
            .map(|_| LayerPolicy::uniform(vec![ArchChoice::new(int(4)), ArchChoice::new(int(8)), ArchChoice::new(fmt("BF16"))]))
            .collect();
        let mut ctrl = Controller::new(policies, ControllerConfig::default(), seed);
        for step in 0..steps {
            let progress = step as f64 / steps as f64;
            let sampled = ctrl.sample(step, progress);
            let reward = sampled.iter().zip(&designated).filter(|(a, d)| a == d).count() as f64 / 3.0;
            ctrl.observe(&sampled, reward, progress);
        }
        let probs = ctrl.probs();
        let pmin = designated.iter().zip(&probs).map(|(&d, p)| p[d]).fold(1.0, f64::min);
        let ok = ctrl.argmax() == designated && pmin > 0.9;
        pass &= ok;
        parts.push(format!("{pmin:.3}"));
    }
    check(pass, format!("min designated probability per seed [{}]", parts.join(" ")))
}

fn ac7_cosine_endpoints() -> Outcome {
    let end = 0.5;
    let b = |s| beta_schedule(s, end, ScheduleKind::Cosine);
    let (b0, b1, bh) = (b(0.0), b(1.0), b(0.5));
    check(
        b0 == 0.0 && b1 == end && (bh - end / 2.0).abs() < 1e-15,
        format!("β(0)={b0} β(1)={b1} β(0.5)={bh}"),
    )
}

fn desk_config(images: &Path, labels: &Path) -> SearchConfig {
    SearchConfig {
        model: ModelSpec::Preset("cnn-small".into()),
        data: DataSource::Idx {
            images: images.to_path_buf(),
            labels: labels.to_path_buf(),
            limit: None,
        },
        search_space: SearchSpace::FliqsSInt,
        total_steps: 1000,
        act_quant_start_fraction: 0.2,
        cost_target: CostTarget::Interpolate {
            low: int(4),
            high: int(8),
            fraction: 0.5,
        },
        gamma: -1.0,
        controller: ControllerConfig {
            learning_rate: 0.05,
            beta_end: 0.5,
            schedule: ScheduleKind::Cosine,
            ..ControllerConfig::default()
        },
        trainer: TrainerConfig::default(),
        seed: 0,
    }
}

struct DeskRun {
    served_accuracy: f64,
    served_cost: f64,
    cost_target: f64,
    int4_accuracy: f64,
    retrain_accuracy: f64,
    archs: String,
}

/// Search, uniform INT4 and retrain-from-scratch runs for seeds 0..3 on
/// 11 111 glyphs written as IDX files (10 000 train, 1 111 validation).
fn desk_runs(scratch: &Path) -> (Vec<DeskRun>, Duration) {
    let start = Instant::now();
    let (images, labels) = (scratch.join("images.idx"), scratch.join("labels.idx"));
    write_idx(&synth_glyphs(11_111, 0).unwrap(), &images, &labels).unwrap();
    let base = desk_config(&images, &labels);
    let data = base.data.load().unwrap();
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let runs = run_pool(3, jobs, |seed| {
        let mut cfg = base.clone();
        cfg.seed = seed as u64;
        let searched = run_search_on(&cfg, &data, &mut SearchHooks::default()).unwrap();
        let int4 = run_uniform_on(&cfg, &data, int(4)).unwrap();
        let retrain = run_fixed_on(&cfg, &data, &searched.final_archs).unwrap();
        DeskRun {
            served_accuracy: searched.served_accuracy,
            served_cost: searched.served_cost,
            cost_target: searched.cost_target,
            int4_accuracy: int4.served_accuracy,
            retrain_accuracy: retrain.served_accuracy,
            archs: searched.archs_label(),
        }
    });
    (runs, start.elapsed())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn ac8_desk_search(runs: &[DeskRun]) -> Outcome {
    let served = mean(runs.iter().map(|r| r.served_accuracy));
    let int4 = mean(runs.iter().map(|r| r.int4_accuracy));
    let cost = mean(runs.iter().map(|r| r.served_cost));
    let target = runs[0].cost_target;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("[{}] acc {:.4} cost/C_T {:.3}", r.archs, r.served_accuracy, r.served_cost / r.cost_target))
        .collect();
    check(
        served >= int4 && cost <= 1.15 * target,
        format!(
            "mean served {served:.4} vs INT4 {int4:.4}, mean cost/C_T {:.3}; {}",
            cost / target,
            per_seed.join("; ")
        ),
    )
}

fn ac9_no_retrain(runs: &[DeskRun]) -> Outcome {
    let served = mean(runs.iter().map(|r| r.served_accuracy));
    let retrain = mean(runs.iter().map(|r| r.retrain_accuracy));
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:.4}/{:.4}", r.served_accuracy, r.retrain_accuracy)).collect();
    check(
        (served - retrain).abs() <= 0.01,
        format!(
            "mean served {served:.4}, retrained {retrain:.4}, gap {:.4}; per seed served/retrained {}",
            (served - retrain).abs(),
            per_seed.join(" ")
        ),
    )
}

fn fliqs(out: &Path, args: &[&str]) -> PathBuf {
    let o = Command::new(env!("CARGO_BIN_EXE_fliqs"))
        .args(args)
        .env("FLIQS_OUT", out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

fn traces(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(traces(&p));
        } else if p.file_name().unwrap() == "trace.csv" {
            out.push((p.parent().unwrap().file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out
}

fn ac10_determinism(scratch: &Path) -> Outcome {
    let base = json!({
        "model": {"preset": "mlp-2x16"},
        "data": {"blobs": {"classes": 3, "dims": 6, "n_per_class": 60, "separation": 3.0}},
        "total_steps": 80,
        "cost_target": {"interpolate": {"low": "INT4", "high": "INT8", "fraction": 0.5}},
        "trainer": {"batch_size": 16},
        "seed": 3
    });
    let cfg = scratch.join("det.json");
    fs::write(&cfg, base.to_string()).unwrap();
    let sweep = scratch.join("sweep.json");
    fs::write(
        &sweep,
        json!({"base": base, "targets": [{"uniform": "INT4"}, {"uniform": "INT8"}], "seeds": [0, 1]}).to_string(),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let sweep = sweep.to_str().unwrap();
    let commands: [(&str, Vec<&str>); 3] = [
        ("search", vec!["search", cfg]),
        ("uniform", vec!["uniform", cfg, "--format", "INT8"]),
        ("sweep", vec!["sweep", "pareto", sweep, "--jobs", "2"]),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, args) in &commands {
        let a = traces(&fliqs(&scratch.join("a"), args));
        let b = traces(&fliqs(&scratch.join("b"), args));
        let same = !a.is_empty() && a == b;
        pass &= same;
        parts.push(format!("{name}: {} trace(s) {}", a.len(), if same { "identical" } else { "differ" }));
    }
    check(pass, parts.join(", "))
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    type Criterion<'a> = (&'a str, &'a str, Option<Duration>, Box<dyn FnOnce() -> Outcome + 'a>);
    let mut results = Vec::new();
    let mut run = |(id, name, limit, f): Criterion| {
        let t = Instant::now();
        let mut o = f();
        let elapsed = t.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                o.pass = false;
                o.detail.push_str(&format!("; runtime {:.1}s exceeds {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()));
            }
        }
        println!(
            "{id} {} {name} ({:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            o.detail
        );
        results.push(o.pass);
    };
    let secs = Duration::from_secs;
    run(("AC1", "cost-model reproduction", Some(secs(1)), Box::new(ac1_cost_model)));
    run(("AC2", "quantizer oracle equivalence", Some(secs(30)), Box::new(ac2_quantizer_oracle)));
    run(("AC3", "switching-error shape", Some(secs(120)), Box::new(ac3_switching_shape)));
    run(("AC4", "clipping ordering", Some(secs(120)), Box::new(ac4_clipping_order)));
    run(("AC5", "policy-gradient correctness", Some(secs(10)), Box::new(ac5_policy_gradient)));
    run(("AC6", "controller convergence", Some(secs(60)), Box::new(ac6_controller_bandit)));
    run(("AC7", "cosine schedule endpoints", None, Box::new(ac7_cosine_endpoints)));
    let (runs, desk_time) = desk_runs(scratch.path());
    let runs = &runs;
    // The search and INT4 runs are two thirds of the shared desk budget.
    let ac8_time = desk_time * 2 / 3;
    run((
        "AC8",
        "end-to-end desk search",
        None,
        Box::new(|| {
            let mut o = ac8_desk_search(runs);
            if ac8_time > secs(15 * 60) {
                o.pass = false;
            }
            o.detail.push_str(&format!("; search+INT4 runs {:.0}s", ac8_time.as_secs_f64()));
            o
        }),
    ));
    run((
        "AC9",
        "no-retrain equivalence",
        None,
        Box::new(|| {
            let mut o = ac9_no_retrain(runs);
            if desk_time > secs(30 * 60) {
                o.pass = false;
            }
            o.detail.push_str(&format!("; all desk runs {:.0}s", desk_time.as_secs_f64()));
            o
        }),
    ));
    run(("AC10", "determinism", None, Box::new(|| ac10_determinism(scratch.path()))));
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
