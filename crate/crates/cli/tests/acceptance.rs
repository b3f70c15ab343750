//! Acceptance run: one PASS/FAIL line per criterion. Criteria can be
//! selected with `LFR_ACCEPT=1,4,9`. The process exits 0 even when a
//! criterion fails; the printed lines are the record.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use lfr_cli::checkpoint::sha256_hex;
use lfr_cli::config::{ExperimentConfig, Knob};
use lfr_cli::pipeline::{self, TrainOptions, PRETRAINED, REGIONS};
use lfr_cli::workspace::Manifest;
use lfr_core::eval::{bleu, EvalReport};
use lfr_core::fisher::oracles::{bernoulli_score, SoftmaxRegression};
use lfr_core::fisher::{empirical_fisher_diag, finite_diff_hessian_diag};
use lfr_core::model::{Batch, Model, ModelConfig};
use lfr_core::region::{project, search_cm, RegionMethod, RegionSearchConfig, UpdateRegion};
use lfr_core::stats::spearman;
use lfr_core::tasks::{Corpus, Direction, Pair};
use lfr_core::tensor::rng::{self, Rng};
use lfr_core::tensor::{adam_step, AdamConfig, AdamState, Gradients, Graph, ParamStore, Tensor};
use lfr_core::trainer::{loss_ewc, loss_kd, loss_l2, temperature_probabilities, Method, MixedSampler};
use lfr_core::fisher::FisherDiag;
use rand::Rng as _;

type Outcome = Result<String, String>;

// C1
const GRAD_H: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, for gradients that are ~0.
const GRAD_ABS_FLOOR: f64 = 1e-8;
const GRAD_BUDGET_SECS: f64 = 60.0;
// C2
const FISHER_BRUTE_TOL: f64 = 1e-10;
const BERNOULLI_TOL: f64 = 1e-12;
const IDENTITY_TOL: f64 = 1e-8;
const FISHER_HESSIAN_MIN_SPEARMAN: f64 = 0.8;
const HESSIAN_STEP: f64 = 1e-4;
const TOY_GRAD_NORM: f64 = 1e-3;
// C3
const PROJECTED_STEPS: usize = 10_000;
// C6
const FORGET_MIN_DROP: f64 = 20.0;
const LFR_MAX_DROP: f64 = 5.0;
const NEW_MAX_GAP: f64 = 10.0;
const PRETRAIN_MIN_ACC: f64 = 98.0;
const AVG_MIN_WINS: usize = 4;
const FIXTURE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
// C7
const SWEEP_LAMBDAS: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.8];
const SWEEP_SPEARMAN: f64 = 0.8;
const SWEEP_BUDGET_SECS: f64 = 30.0 * 60.0;
// C8
const PENALTY_TOL: f64 = 1e-10;
const SAMPLER_DRAWS: usize = 1_000_000;
const SAMPLER_TOL: f64 = 0.005;
// C9
const BLEU_TOL: f64 = 1e-6;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_ABS_FLOOR)
}

fn pair(src: &[u32], tgt: &[u32]) -> Pair {
    Pair { src: src.to_vec(), tgt: tgt.to_vec() }
}

/// 2-layer, dim-8, vocab-16 model (no dropout, so the loss is deterministic).
fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        layers: 2,
        model_dim: 8,
        ffn_dim: 16,
        heads: 2,
        vocab_size: 16,
        max_len: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).expect("valid config")
}

fn four_pairs() -> Vec<Pair> {
    vec![
        pair(&[4, 7, 8, 9], &[5, 10, 11]),
        pair(&[4, 12], &[5, 13, 6, 14]),
        pair(&[5, 15, 9, 8, 7], &[4, 11, 12]),
        pair(&[5, 6], &[4, 9, 10, 15, 13]),
    ]
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let model = small_model(11);
    let pairs = four_pairs();
    let batch = Batch::from_pairs(pairs.iter()).map_err(e)?;
    let (_, grads) = model.loss_and_grad(&batch, None).map_err(e)?;
    let mut worst = (0.0f64, String::new());
    let mut count = 0usize;
    for (name, t) in model.params.iter() {
        let analytic = grads.get(name).ok_or_else(|| format!("no gradient for `{name}`"))?;
        ensure(analytic.len() == t.len(), || format!("gradient of `{name}` has the wrong length"))?;
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> Result<f64, String> {
                let mut m = model.clone();
                m.params.get_mut(name).expect("present").data_mut()[i] += delta;
                m.loss(&batch, None).map_err(e)
            };
            let numeric = (eval(GRAD_H)? - eval(-GRAD_H)?) / (2.0 * GRAD_H);
            let r = rel_err(a, numeric);
            if r > worst.0 {
                worst = (r, format!("{name}[{i}]"));
            }
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.0 < GRAD_REL_TOL, || format!("max rel err {:.2e} at {}", worst.0, worst.1))?;
    ensure(secs < GRAD_BUDGET_SECS, || format!("took {secs:.1}s"))?;
    Ok(format!("{count} elements, max rel err {:.2e}, {secs:.1}s", worst.0))
}

/// Converged softmax regression fit on data from a teacher of the same
/// family. Feature scales span a decade so the curvature differs across
/// weights.
fn converged_softmax_regression(k: usize, d: usize, n: usize) -> (SoftmaxRegression, Vec<Vec<f64>>, Vec<usize>, f64) {
    let mut r = rng::stream(21, "toy-data");
    let teacher = SoftmaxRegression {
        weight: Tensor::new(vec![k, d], (0..k * d).map(|_| r.random_range(-0.3..0.3)).collect()).expect("shape"),
    };
    let scale: Vec<f64> = (0..d).map(|j| (2.3 * (j as f64 / (d - 1) as f64 - 0.5)).exp()).collect();
    let xs: Vec<Vec<f64>> = (0..n).map(|_| scale.iter().map(|s| s * r.random_range(-1.0..1.0)).collect()).collect();
    let ys: Vec<usize> = xs
        .iter()
        .map(|x| {
            let p = teacher.probs(x);
            let mut u: f64 = r.random();
            p.iter()
                .position(|pk| {
                    let hit = u < *pk;
                    u -= pk;
                    hit
                })
                .unwrap_or(k - 1)
        })
        .collect();
    // full-batch gradient descent on the mean NLL
    let mut model = SoftmaxRegression { weight: Tensor::zeros(&[k, d]) };
    let mut grad_norm = f64::INFINITY;
    for _ in 0..3000 {
        let mut grad = vec![0.0; k * d];
        for (x, &y) in xs.iter().zip(&ys) {
            let p = model.probs(x);
            for c in 0..k {
                let coef = p[c] - if c == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c * d + j] += coef * x[j] / n as f64;
                }
            }
        }
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for (w, g) in model.weight.data_mut().iter_mut().zip(&grad) {
            *w -= 0.5 * g;
        }
    }
    (model, xs, ys, grad_norm)
}

fn c2_fisher() -> Outcome {
    // (a) empirical Fisher vs per-example mean of squared sentence gradients,
    // computed through the token-mean loss instead of the summed NLL
    let model = small_model(12);
    let corpus = Corpus {
        id: "c2".into(),
        direction: Direction::new(0, 1),
        pairs: four_pairs(),
        seed: 0,
    };
    let fisher = empirical_fisher_diag(&model, &corpus).map_err(e)?;
    let mut brute: BTreeMap<String, Vec<f64>> = model.params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.len()])).collect();
    for p in &corpus.pairs {
        let batch = Batch::from_pairs([p]).map_err(e)?;
        let tokens = batch.target_tokens() as f64;
        let (_, g) = model.loss_and_grad(&batch, None).map_err(e)?;
        for (name, acc) in brute.iter_mut() {
            for (a, gi) in acc.iter_mut().zip(g.get(name).unwrap_or(&[])) {
                let s = gi * tokens;
                *a += s * s / corpus.len() as f64;
            }
        }
    }
    let mut worst_a = 0.0f64;
    for (name, b) in &brute {
        for (x, y) in fisher.values[name].data().iter().zip(b) {
            worst_a = worst_a.max((x - y).abs());
        }
    }
    ensure(worst_a <= FISHER_BRUTE_TOL, || format!("(a) brute force differs by {worst_a:.2e}"))?;

    // (b) Bernoulli at θ = 0, y = 1
    let s = bernoulli_score(0.0, true).map_err(e)?;
    let err_b = (s * s - 0.25).abs();
    ensure(err_b <= BERNOULLI_TOL, || format!("(b) F = {} (err {err_b:.2e})", s * s))?;

    // (c) true Fisher equals the expected Hessian for softmax regression
    let mut r = rng::stream(22, "c2c");
    let sr = SoftmaxRegression {
        weight: Tensor::new(vec![4, 5], (0..20).map(|_| r.random_range(-1.0..1.0)).collect()).map_err(e)?,
    };
    let mut worst_c = 0.0f64;
    for _ in 0..5 {
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let tf = sr.true_fisher_diag(&x).map_err(e)?;
        let eh = sr.expected_hessian_diag(&x);
        for (a, b) in tf.iter().zip(&eh) {
            worst_c = worst_c.max((a - b).abs());
        }
    }
    ensure(worst_c <= IDENTITY_TOL, || format!("(c) identity off by {worst_c:.2e}"))?;

    // (d) converged toy model, 1000 elements
    let (k, d, n) = (10, 100, 2000);
    let (toy, xs, ys, grad_norm) = converged_softmax_regression(k, d, n);
    ensure(grad_norm < TOY_GRAD_NORM, || format!("(d) toy model not converged, gradient norm {grad_norm:.2e}"))?;
    let mut emp = vec![0.0; k * d];
    for (x, &y) in xs.iter().zip(&ys) {
        let g = toy.log_lik_grad(x, y).map_err(e)?;
        for (a, gi) in emp.iter_mut().zip(g.get("weight").unwrap_or(&[])) {
            *a += gi * gi / n as f64;
        }
    }
    let mut params = ParamStore::new();
    params.insert("weight", toy.weight.clone());
    let subset = BTreeMap::from([("weight".to_string(), (0..k * d).collect::<Vec<_>>())]);
    let mean_nll = |p: &ParamStore| -> lfr_core::error::Result<f64> {
        let m = SoftmaxRegression { weight: p.get("weight").expect("present").clone() };
        Ok(xs.iter().zip(&ys).map(|(x, &y)| -m.probs(x)[y].ln()).sum::<f64>() / n as f64)
    };
    let hess = finite_diff_hessian_diag(mean_nll, &params, &subset, HESSIAN_STEP).map_err(e)?;
    let rho = spearman(&emp, &hess["weight"]).ok_or("(d) Spearman undefined")?;
    ensure(rho >= FISHER_HESSIAN_MIN_SPEARMAN, || format!("(d) Spearman {rho:.3}"))?;
    Ok(format!(
        "(a) {worst_a:.1e}, (b) {err_b:.1e}, (c) {worst_c:.1e}, (d) Spearman {rho:.3} over {} elements (toy gradient norm {grad_norm:.1e})",
        k * d
    ))
}

fn random_store(r: &mut Rng) -> ParamStore {
    let mut p = ParamStore::new();
    for (name, n) in [("a", 64usize), ("b", 17), ("c", 5)] {
        // include exact zeros, which a relative box pins in place
        let v = (0..n).map(|i| if i % 13 == 0 { 0.0 } else { r.random_range(-2.0..2.0) }).collect();
        p.insert(name, Tensor::from_vec(v));
    }
    p
}

fn fisher_for(p: &ParamStore, r: &mut Rng) -> FisherDiag {
    FisherDiag {
        values: p.iter().map(|(n, t)| (n.clone(), Tensor::from_vec((0..t.len()).map(|_| r.random::<f64>()).collect()))).collect(),
        sample_count: 1,
        source_data_id: "random".into(),
    }
}

fn c3_projection() -> Outcome {
    let mut r = rng::stream(31, "c3");
    let theta0 = random_store(&mut r);
    let fisher = fisher_for(&theta0, &mut r);
    let lambda = 0.1;
    let region = search_cm(
        &theta0,
        &BTreeSet::new(),
        &fisher,
        &RegionSearchConfig { rho: 50.0, lambda, ..RegionSearchConfig::default() },
    )
    .map_err(e)?;
    let mut theta = theta0.clone();
    let mut state = AdamState::new(&theta);
    let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
    let none = BTreeSet::new();
    for step in 1..=PROJECTED_STEPS {
        let mut g = Gradients::new();
        for (name, t) in theta.iter() {
            let scale = 10f64.powi(r.random_range(-3..3));
            g.insert(name.clone(), (0..t.len()).map(|_| scale * r.random_range(-1.0..1.0)).collect());
        }
        adam_step(&mut theta, &g, &mut state, &cfg, &none).map_err(e)?;
        project(&mut theta, &region).map_err(e)?;
        for (name, t) in theta.iter() {
            let (lo, hi) = (&region.lower[name], &region.upper[name]);
            for (i, v) in t.data().iter().enumerate() {
                if !(lo.data()[i] <= *v && *v <= hi.data()[i]) {
                    return Err(format!("step {step}: {name}[{i}] = {v} outside [{}, {}]", lo.data()[i], hi.data()[i]));
                }
            }
        }
    }
    let mut max_ratio = 0.0f64;
    for (name, t) in theta.iter() {
        for (v, v0) in t.data().iter().zip(theta0.get(name).expect("same layout").data()) {
            let drift = (v - v0).abs();
            if drift > lambda * v0.abs() {
                return Err(format!("drift {drift} exceeds λ|θ0| = {} in {name}", lambda * v0.abs()));
            }
            if *v0 != 0.0 {
                max_ratio = max_ratio.max(drift / v0.abs());
            }
        }
    }
    Ok(format!("{PROJECTED_STEPS} steps inside the box; max |θ-θ0|/|θ0| = {max_ratio:.6} <= λ = {lambda}"))
}

/// Small, fast pipeline config (pretraining need not converge).
fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed, ..ExperimentConfig::default() };
    c.previous = lfr_core::tasks::Sizes { train: 200, valid: 20, test: 20 };
    c.new_task = lfr_core::tasks::Sizes { train: 100, valid: 20, test: 20 };
    c.model.model_dim = 16;
    c.model.ffn_dim = 32;
    c.pretrain.train.steps = 60;
    c.pretrain.train.warmup = 10;
    c.pretrain.target_accuracy = 0.0;
    c.method.steps = 30;
    c.method.warmup = 10;
    c
}

fn metrics_equal(a: &EvalReport, b: &EvalReport) -> bool {
    a.directions == b.directions && a.avg1 == b.avg1 && a.avg2 == b.avg2 && a.avg == b.avg && a.zero_avg == b.zero_avg && a.forgetting == b.forgetting
}

fn c4_freeze_identity() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let base = tiny_config(41);
    let pre = pipeline::pretrain(&base, dir.path()).map_err(e)?;
    let mut cases: Vec<(&str, ExperimentConfig)> = Vec::new();
    let mut c = base.clone();
    c.method.method = Method::Lfr;
    c.region.search.rho = 100.0;
    cases.push(("rho=100", c.clone()));
    c.region.search.rho = 75.0;
    c.region.search.lambda = 0.0;
    cases.push(("lambda=0", c.clone()));
    c.region.method = RegionMethod::Om;
    c.region.search.alpha = 0.0;
    c.region.search.om_dropout = Some(0.0);
    c.region.search.jitter = 0.0;
    c.region.search.om_steps = 20;
    cases.push(("degenerate OM", c));
    let mut notes = Vec::new();
    for (label, cfg) in cases {
        let tag = label.replace([' ', '='], "-");
        pipeline::search_region(&cfg, dir.path(), PRETRAINED, cfg.region.method, &tag, REGIONS).map_err(e)?;
        let out = pipeline::train_stage(
            &cfg,
            dir.path(),
            &TrainOptions {
                ckpt: REGIONS.into(),
                region_tag: Some(tag.clone()),
                name: Some(tag.clone()),
                ..TrainOptions::default()
            },
        )
        .map_err(e)?;
        ensure(out.checksum == pre.checksum, || format!("{label}: checkpoint {} != pretrained {}", out.checksum, pre.checksum))?;
        ensure(metrics_equal(&out.report, &pre.baseline), || format!("{label}: report differs from baseline"))?;
        notes.push(label);
    }
    Ok(format!("{} yield the pretrained checksum {} and the baseline report", notes.join(", "), &pre.checksum[..12]))
}

fn c5_monotonicity() -> Outcome {
    let mut r = rng::stream(51, "c5");
    let theta0 = random_store(&mut r);
    let fisher = fisher_for(&theta0, &mut r);
    let rhos = [0.0, 25.0, 50.0, 75.0, 100.0];
    let lambdas = [0.0, 0.05, 0.1, 0.4, 1.0];
    let mut grid: Vec<Vec<UpdateRegion>> = Vec::new();
    for &rho in &rhos {
        let mut row = Vec::new();
        for &lambda in &lambdas {
            row.push(
                search_cm(&theta0, &BTreeSet::new(), &fisher, &RegionSearchConfig { rho, lambda, ..RegionSearchConfig::default() })
                    .map_err(e)?,
            );
        }
        grid.push(row);
    }
    let mut checks = 0;
    for i in 0..rhos.len() {
        for j in 0..lambdas.len() {
            for j2 in j..lambdas.len() {
                ensure(grid[i][j].is_subset_of(&grid[i][j2]), || {
                    format!("rho {}: lambda {} not inside lambda {}", rhos[i], lambdas[j], lambdas[j2])
                })?;
                checks += 1;
            }
            for i2 in i..rhos.len() {
                ensure(grid[i2][j].is_subset_of(&grid[i][j]), || {
                    format!("lambda {}: rho {} not inside rho {}", lambdas[j], rhos[i2], rhos[i])
                })?;
                checks += 1;
            }
        }
    }
    Ok(format!("5x5 grid, {checks} containments hold exactly"))
}

fn fixture_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, ..ExperimentConfig::default() }
}

struct SeedResult {
    base_prev: f64,
    ft: EvalReport,
    lfr: EvalReport,
}

fn run_fixture_seed(seed: u64) -> Result<SeedResult, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let cfg = fixture_config(seed);
    let pre = pipeline::pretrain(&cfg, dir.path()).map_err(e)?;
    let mut lfr = cfg.clone();
    lfr.method.method = Method::Lfr;
    pipeline::search_region(&lfr, dir.path(), PRETRAINED, RegionMethod::Cm, "cm", REGIONS).map_err(e)?;
    let ft = pipeline::train_stage(&cfg, dir.path(), &TrainOptions { ckpt: PRETRAINED.into(), ..TrainOptions::default() }).map_err(e)?;
    let lf = pipeline::train_stage(&lfr, dir.path(), &TrainOptions { ckpt: REGIONS.into(), ..TrainOptions::default() }).map_err(e)?;
    Ok(SeedResult {
        base_prev: pre.baseline.avg1.ok_or("baseline has no previous-task average")?.accuracy,
        ft: ft.report,
        lfr: lf.report,
    })
}

fn acc(r: &EvalReport, f: fn(&EvalReport) -> Option<lfr_core::eval::Averages>) -> f64 {
    f(r).map_or(f64::NAN, |a| a.accuracy)
}

fn c6_forgetting() -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut wins = 0;
    for seed in FIXTURE_SEEDS {
        let s = run_fixture_seed(seed)?;
        let ft_prev = acc(&s.ft, |r| r.avg1);
        let ft_new = acc(&s.ft, |r| r.avg2);
        let lfr_prev = acc(&s.lfr, |r| r.avg1);
        let lfr_new = acc(&s.lfr, |r| r.avg2);
        let (ft_avg, lfr_avg) = (acc(&s.ft, |r| r.avg), acc(&s.lfr, |r| r.avg));
        if lfr_avg > ft_avg {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: base {:.1} | FT prev {ft_prev:.1} new {ft_new:.1} | LFR prev {lfr_prev:.1} new {lfr_new:.1}",
            s.base_prev
        ));
        if s.base_prev < PRETRAIN_MIN_ACC {
            failures.push(format!("seed {seed}: pretrained previous accuracy {:.1} < {PRETRAIN_MIN_ACC}", s.base_prev));
        }
        if s.base_prev - ft_prev < FORGET_MIN_DROP {
            failures.push(format!("seed {seed}: FT drop {:.1} < {FORGET_MIN_DROP}", s.base_prev - ft_prev));
        }
        if s.base_prev - lfr_prev > LFR_MAX_DROP {
            failures.push(format!("seed {seed}: LFR drop {:.1} > {LFR_MAX_DROP}", s.base_prev - lfr_prev));
        }
        if ft_new - lfr_new > NEW_MAX_GAP {
            failures.push(format!("seed {seed}: LFR new-task gap {:.1} > {NEW_MAX_GAP}", ft_new - lfr_new));
        }
    }
    if wins < AVG_MIN_WINS {
        failures.push(format!("Avg(LFR) > Avg(FT) on {wins}/5 seeds"));
    }
    for l in &lines {
        println!("    {l}");
    }
    if failures.is_empty() {
        Ok(format!("all seeds meet the bounds; Avg(LFR) > Avg(FT) on {wins}/5"))
    } else {
        Err(failures.join("; "))
    }
}

fn c7_tradeoff() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(e)?;
    let mut cfg = fixture_config(FIXTURE_SEEDS[0]);
    cfg.method.method = Method::Lfr;
    let out = pipeline::sweep(&cfg, dir.path(), Knob::Lambda, &SWEEP_LAMBDAS).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let lambdas: Vec<f64> = out.rows.iter().map(|r| r.knob_value.unwrap_or(f64::NAN)).collect();
    let prev: Vec<f64> = out.rows.iter().map(|r| r.prev_acc.unwrap_or(f64::NAN)).collect();
    let new: Vec<f64> = out.rows.iter().map(|r| r.new_acc.unwrap_or(f64::NAN)).collect();
    let sp = spearman(&lambdas, &prev).ok_or("previous-task metric is constant")?;
    let sn = spearman(&lambdas, &new).ok_or("new-task metric is constant")?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
    println!("    lambda {:?}: prev [{}], new [{}]", lambdas, fmt(&prev), fmt(&new));
    ensure(sp <= -SWEEP_SPEARMAN, || format!("Spearman(lambda, prev) = {sp:.3}"))?;
    ensure(sn >= SWEEP_SPEARMAN, || format!("Spearman(lambda, new) = {sn:.3}"))?;
    ensure(secs < SWEEP_BUDGET_SECS, || format!("sweep took {secs:.0}s"))?;
    Ok(format!("Spearman prev {sp:.3}, new {sn:.3}; {secs:.0}s including pretraining"))
}

fn one(v: f64) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::from_vec(vec![v]));
    p
}

fn fisher_one(v: f64) -> FisherDiag {
    FisherDiag {
        values: [("w".to_string(), Tensor::from_vec(vec![v]))].into(),
        sample_count: 1,
        source_data_id: String::new(),
    }
}

fn close(label: &str, got: f64, want: f64) -> Result<(), String> {
    ensure((got - want).abs() <= PENALTY_TOL, || format!("{label}: {got} vs {want}"))
}

fn c8_objectives() -> Outcome {
    // L2: Δ = 0.1, α = 1, M = 1
    let (v, g) = loss_l2(&one(1.1), &one(1.0), 1.0, 1).map_err(e)?;
    close("L2 value", v, 0.01)?;
    close("L2 gradient", g.get("w").expect("w")[0], 2.0 * (1.1 - 1.0))?;
    close("L2 at θ0", loss_l2(&one(1.0), &one(1.0), 1.0, 1).map_err(e)?.0, 0.0)?;
    // EWC: F = 0.25, Δ = 0.2
    let (v, g) = loss_ewc(&one(0.2), &one(0.0), &fisher_one(0.25), 1.0, 1).map_err(e)?;
    close("EWC value", v, 0.01)?;
    close("EWC gradient", g.get("w").expect("w")[0], 2.0 * 0.25 * 0.2)?;
    close("EWC with F = 0", loss_ewc(&one(5.0), &one(0.0), &fisher_one(0.0), 1.0, 1).map_err(e)?.0, 0.0)?;
    let (l2, gl2) = loss_l2(&one(0.3), &one(0.1), 0.7, 3).map_err(e)?;
    let (ewc, gewc) = loss_ewc(&one(0.3), &one(0.1), &fisher_one(1.0), 0.7, 3).map_err(e)?;
    close("EWC with F = 1 vs L2", ewc, l2)?;
    close("EWC with F = 1 vs L2 gradient", gewc.get("w").expect("w")[0], gl2.get("w").expect("w")[0])?;
    // KD: teacher [1, 0], student [0.5, 0.5]
    let teacher = Tensor::new(vec![1, 2], vec![0.0, -1e4]).map_err(e)?;
    let student = Tensor::new(vec![1, 2], vec![0.0, 0.0]).map_err(e)?;
    close("KD value", loss_kd(&student, &teacher, &[true], 1.0).map_err(e)?, 2f64.ln())?;
    close("KD at teacher", loss_kd(&teacher, &teacher, &[true], 1.0).map_err(e)?, 0.0)?;
    let mut gr = Graph::new();
    let t = gr.constant(teacher);
    let tlp = gr.log_softmax(t);
    let tl = gr.value(tlp).data().to_vec();
    let s = gr.param(student);
    let kl = gr.kl_teacher_student(s, &tl, &[1.0]).map_err(e)?;
    gr.backward(kl).map_err(e)?;
    let kg = gr.grad(s).ok_or("no KD gradient")?.to_vec();
    close("KD gradient[0]", kg[0], -0.5)?;
    close("KD gradient[1]", kg[1], 0.5)?;
    // sampler, T = 20, sizes (1e6, 1e3)
    let sizes = [1_000_000usize, 1_000];
    let probs = temperature_probabilities(&sizes, 20.0).map_err(e)?;
    let (a, b) = (1e6f64.powf(1.0 / 20.0), 1e3f64.powf(1.0 / 20.0));
    close("sampler formula", probs[0], a / (a + b))?;
    let dummy = [pair(&[4], &[5])];
    let mut sampler = MixedSampler::new(vec![&dummy, &dummy], Some(sizes.to_vec()), 20.0, 81).map_err(e)?;
    let mut hits = [0usize; 2];
    for _ in 0..SAMPLER_DRAWS {
        hits[sampler.choose_corpus()] += 1;
    }
    let freq = hits[0] as f64 / SAMPLER_DRAWS as f64;
    ensure((freq - probs[0]).abs() <= SAMPLER_TOL, || format!("sampler frequency {freq} vs {}", probs[0]))?;
    Ok(format!("penalty cases within {PENALTY_TOL:.0e}; sampler frequency {freq:.4} vs {:.4}", probs[0]))
}

fn c9_bleu() -> Outcome {
    // hyp "a b c d e f", ref "a b c d x f"
    let hyp = vec![vec![1, 2, 3, 4, 5, 6]];
    let reference = vec![vec![1, 2, 3, 4, 9, 6]];
    let want = 100.0 * ((5.0 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0) * (1.0 / 3.0f64)).powf(0.25);
    let got = bleu(&hyp, &reference).map_err(e)?;
    ensure((got - want).abs() <= BLEU_TOL, || format!("hand case {got} vs {want}"))?;
    let corpus: Vec<Vec<u32>> = (0..20).map(|i| (0..8).map(|j| 10 + i * 8 + j).collect()).collect();
    let same = bleu(&corpus, &corpus).map_err(e)?;
    ensure((same - 100.0).abs() <= BLEU_TOL, || format!("identical corpus scores {same}"))?;
    let other: Vec<Vec<u32>> = corpus.iter().map(|s| s.iter().map(|t| t + 1000).collect()).collect();
    let disjoint = bleu(&other, &corpus).map_err(e)?;
    ensure(disjoint < 1.0, || format!("disjoint corpus scores {disjoint}"))?;
    Ok(format!("hand case {got:.6}, identical {same}, disjoint {disjoint:.4}"))
}

fn snapshot(root: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(e)? {
            let p = entry.map_err(e)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).map_err(e)?.to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_hex(&std::fs::read(&p).map_err(e)?));
            }
        }
    }
    Ok(out)
}

fn full_pipeline(root: &Path) -> Result<(), String> {
    let cfg = tiny_config(101);
    pipeline::pretrain(&cfg, root).map_err(e)?;
    let mut lfr = cfg.clone();
    lfr.method.method = Method::Lfr;
    pipeline::search_region(&lfr, root, PRETRAINED, RegionMethod::Cm, "cm", REGIONS).map_err(e)?;
    let mut om = lfr.clone();
    om.region.method = RegionMethod::Om;
    om.region.search.om_steps = 10;
    pipeline::search_region(&om, root, REGIONS, RegionMethod::Om, "om", REGIONS).map_err(e)?;
    for c in [&cfg, &lfr, &om] {
        pipeline::train_stage(c, root, &TrainOptions { ckpt: REGIONS.into(), save_optimizer: true, ..TrainOptions::default() }).map_err(e)?;
    }
    let mut ewc = cfg.clone();
    ewc.method.method = Method::Ewc;
    pipeline::train_stage(&ewc, root, &TrainOptions { ckpt: REGIONS.into(), ..TrainOptions::default() }).map_err(e)?;
    pipeline::sweep(&lfr, root, Knob::Lambda, &[0.1, 0.4]).map_err(e)?;
    pipeline::scenario(&lfr, root).map_err(e)?;
    pipeline::report(root, lfr_core::eval::Metric::Accuracy).map_err(e)?;
    Ok(())
}

fn c10_reproducibility() -> Outcome {
    let a = tempfile::tempdir().map_err(e)?;
    let b = tempfile::tempdir().map_err(e)?;
    full_pipeline(a.path())?;
    full_pipeline(b.path())?;
    let (sa, sb) = (snapshot(a.path())?, snapshot(b.path())?);
    ensure(sa.keys().eq(sb.keys()), || "the two runs wrote different file sets".into())?;
    for (k, v) in &sa {
        ensure(&sb[k] == v, || format!("`{k}` differs between runs"))?;
    }
    // rerunning in place must reproduce the recorded artifacts
    full_pipeline(a.path())?;
    let again = snapshot(a.path())?;
    let changed: Vec<&String> = sa.iter().filter(|(k, v)| again.get(*k) != Some(*v)).map(|(k, _)| k).collect();
    ensure(again.len() == sa.len() && changed.is_empty(), || format!("rerun in the same directory changed {changed:?}"))?;
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).map_err(e)?).map_err(e)?;
    manifest.audit_previous_train()?;
    Ok(format!(
        "{} files byte-identical across runs; {} commands audited, previous-task training data never read",
        sa.len(),
        manifest.commands.len()
    ))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient correctness", c1_gradients),
    (2, "Fisher oracles", c2_fisher),
    (3, "hard-constraint exactness", c3_projection),
    (4, "freeze identity", c4_freeze_identity),
    (5, "region monotonicity", c5_monotonicity),
    (6, "forgetting demonstration", c6_forgetting),
    (7, "trade-off curve shape", c7_tradeoff),
    (8, "baseline objective oracles", c8_objectives),
    (9, "BLEU oracle", c9_bleu),
    (10, "reproducibility", c10_reproducibility),
];

fn main() {
    // `cargo test` passes harness flags; ignore them
    let selected: Option<BTreeSet<u32>> = std::env::var("LFR_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut passed = 0;
    let mut run = 0;
    for (id, title, f) in CRITERIA {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        run += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("C{id} PASS {title} ({secs:.1}s): {detail}");
            }
            Err(detail) => println!("C{id} FAIL {title} ({secs:.1}s): {detail}"),
        }
    }
    println!("acceptance: {passed}/{run} criteria pass");
}
