//! End-to-end acceptance checks. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fsad_core::calibration::{apply_platt, fit_platt, platt_nll, split_calibration, LabeledScores, PlattParams};
use fsad_core::encoder::{Condition, Image, PatchEmbeddings, PatchEncoder, ToyEncoder, CHANNELS};
use fsad_core::memory_bank::{aggregate_meantop1, MemoryBank};
use fsad_core::metrics::{auroc, average_precision, brier, ece, f1_max, g_mean_max, nll};
use fsad_core::probe_attack::{fgsm_attack, loss_input_gradient, probe_loss, AttackConfig, LinearProbe, PatchMask};
use fsad_core::runner::{run_experiment, CalibrationKind, ExperimentConfig, RunReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_embeddings(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dim: usize) -> PatchEmbeddings {
    let values = (0..rows * cols * dim).map(|_| gaussian(rng)).collect();
    PatchEmbeddings::new(rows, cols, dim, values).unwrap()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn synthetic_config_path() -> PathBuf {
    repo_root().join("configs/synthetic.toml")
}

// --- nearest-neighbour scoring -------------------------------------------

fn oracle_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    for x in a {
        na += x * x;
    }
    for x in b {
        nb += x * x;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

fn nn_scoring() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let dim = rng.random_range(1..=16);
        let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let query = random_embeddings(&mut rng, rows, cols, dim);
        let mut support = Vec::new();
        let mut remaining: usize = rng.random_range(1..=64);
        while remaining > 0 {
            let rows = rng.random_range(1..=remaining.min(16));
            support.push(random_embeddings(&mut rng, rows, 1, dim));
            remaining -= rows;
        }
        let bank_rows: Vec<&[f64]> = support.iter().flat_map(|s| s.rows()).collect();
        let bank = MemoryBank::build(support.iter().map(|s| ("support", s))).map_err(|e| e.to_string())?;
        let got = bank.patch_scores(&query).map_err(|e| e.to_string())?;
        for (j, q) in query.rows().enumerate() {
            let mut best = f64::INFINITY;
            for m in &bank_rows {
                let d = oracle_distance(q, m);
                if d < best {
                    best = d;
                }
            }
            let g = got.scores()[j];
            ensure(g.to_bits() == best.to_bits(), || {
                format!("case {case}, patch {j}: {g:e} vs oracle {best:e}")
            })?;
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok("200 instances bitwise equal".into())
}

// --- top-1% aggregation ----------------------------------------------------

fn oracle_meantop1(scores: &[f64]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (scores.len() as f64 / 100.0).ceil().max(1.0) as usize;
    let top = &sorted[sorted.len() - k..];
    top.iter().sum::<f64>() / k as f64
}

fn meantop1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut maps: Vec<Vec<f64>> = (0..199)
        .map(|_| {
            let n = rng.random_range(1..=2048);
            (0..n).map(|_| rng.random_range(0.0..2.0)).collect()
        })
        .collect();
    let ramp: Vec<f64> = (1..=1024).map(|i| i as f64 / 1024.0).collect();
    maps.push(ramp.clone());
    for (i, m) in maps.iter().enumerate() {
        let (got, want) = (aggregate_meantop1(m), oracle_meantop1(m));
        ensure((got - want).abs() <= 1e-12, || format!("map {i} (N = {}): {got} vs {want}", m.len()))?;
    }
    let r = aggregate_meantop1(&ramp);
    ensure((r - 1019.0 / 1024.0).abs() <= 1e-12, || format!("ramp gave {r}"))?;
    Ok(format!("200 maps within 1e-12, ramp = {r:.6}"))
}

// --- FGSM gradient --------------------------------------------------------

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let patch = rng.random_range(1..=4);
        let side = patch * rng.random_range(1..=(8 / patch));
        let dim = rng.random_range(1..=8);
        let encoder = ToyEncoder::new(patch, dim, rng.random()).unwrap();
        let pixels: Vec<f64> = (0..side * side * CHANNELS).map(|_| rng.random_range(0.05..0.95)).collect();
        let image = Image::new(side, side, pixels).unwrap();
        let (gr, gc) = image.patch_grid(patch).unwrap();
        let mask = PatchMask::new(gr, gc, (0..gr * gc).map(|_| rng.random_bool(0.3)).collect()).unwrap();
        let probe = LinearProbe {
            weights: (0..dim).map(|_| gaussian(&mut rng)).collect(),
            bias: gaussian(&mut rng),
        };
        let analytic = loss_input_gradient(&encoder, &probe, &image, &mask).map_err(|e| e.to_string())?;
        let loss_at = |px: Vec<f64>| {
            let img = Image::unbounded(side, side, px).unwrap();
            probe_loss(&probe, &encoder.encode(&img).unwrap(), &mask).unwrap()
        };
        let h = 1e-5;
        let numeric: Vec<f64> = (0..image.pixels().len())
            .map(|i| {
                let mut up = image.pixels().to_vec();
                let mut down = up.clone();
                up[i] += h;
                down[i] -= h;
                (loss_at(up) - loss_at(down)) / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
        let rel = diff / scale;
        worst = worst.max(rel);
        ensure(rel < 1e-5, || format!("case {case}: relative error {rel:e}"))?;

        // include saturated pixels so clamping is exercised
        let mut edge = image.pixels().to_vec();
        for v in edge.iter_mut().step_by(5) {
            *v = if rng.random_bool(0.5) { 0.0 } else { 1.0 };
        }
        let edge = Image::new(side, side, edge).unwrap();
        for x in [&image, &edge] {
            let eps = rng.random_range(0.0..0.1);
            let adv = fgsm_attack(&encoder, &probe, x, &mask, &AttackConfig::new(eps).unwrap())
                .map_err(|e| e.to_string())?;
            let linf = adv.pixels().iter().zip(x.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // one rounding step of x + eps may land an ulp past eps
            ensure(linf <= eps + 4.0 * f64::EPSILON, || format!("case {case}: |dx| {linf} > {eps}"))?;
            ensure(adv.in_unit_range(), || format!("case {case}: pixel outside [0, 1]"))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("50 instances, worst relative error {worst:.2e}"))
}

// --- Platt fit -------------------------------------------------------------

fn grid_min_mean_nll(scores: &[f64], labels: &[bool]) -> f64 {
    let steps: Vec<f64> = (0..=2000).map(|i| -10.0 + i as f64 * 0.01).collect();
    steps
        .par_iter()
        .map(|&a| {
            steps
                .iter()
                .map(|&b| platt_nll(scores, labels, &PlattParams { a, b }))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min)
        / scores.len() as f64
}

fn platt_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let n = rng.random_range(6..=14);
        let (a_true, b_true) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let s: f64 = rng.random_range(-2.0..2.0);
            let p = 1.0 / (1.0 + (-(a_true * s + b_true)).exp());
            // keep both classes
            labels.push(if i < 2 { i == 0 } else { rng.random_bool(p) });
            scores.push(s);
        }
        let ids = (0..n).map(|i| i.to_string()).collect();
        let cal = LabeledScores::new(ids, scores.clone(), labels.clone()).unwrap();
        let fit = fit_platt(&cal).map_err(|e| e.to_string())?;
        let fitted = platt_nll(&scores, &labels, &fit) / n as f64;
        let grid = grid_min_mean_nll(&scores, &labels);
        let inside = fit.a.abs() <= 10.0 && fit.b.abs() <= 10.0;
        let gap = fitted - grid;
        ensure(gap <= 1e-4, || format!("case {case}: fitted {fitted} above grid {grid}"))?;
        if inside {
            worst = worst.max(gap.abs());
        }
    }
    let cal = LabeledScores::new(
        (0..4).map(|i| i.to_string()).collect(),
        vec![-1.0, 1.0, -1.0, 1.0],
        vec![false, true, true, false],
    )
    .unwrap();
    let p = fit_platt(&cal).map_err(|e| e.to_string())?;
    ensure(p.a.abs() < 1e-3 && p.b.abs() < 1e-3, || format!("no-signal set gave {p:?}"))?;
    Ok(format!("20 sets, worst |fit - grid| {worst:.2e}; no-signal A = {:.1e}, B = {:.1e}", p.a, p.b))
}

// --- detection metrics -------------------------------------------------------

fn oracle_counts(scores: &[f64], labels: &[bool], t: f64) -> (usize, usize) {
    let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count();
    let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count();
    (tp, fp)
}

fn descending_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn oracle_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut p, mut n) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if !lj {
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / 2.0 / (p * n) as f64
}

fn oracle_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev = 0usize;
    for t in descending_thresholds(scores) {
        let (tp, fp) = oracle_counts(scores, labels, t);
        ap += (tp as f64 / pos - prev as f64 / pos) * (tp as f64 / (tp + fp) as f64);
        prev = tp;
    }
    ap
}

fn oracle_f1(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count();
    descending_thresholds(scores)
        .into_iter()
        .map(|t| {
            let (tp, fp) = oracle_counts(scores, labels, t);
            if tp == 0 {
                0.0
            } else {
                (2 * tp) as f64 / (2 * tp + fp + (pos - tp)) as f64
            }
        })
        .fold(0.0, f64::max)
}

fn oracle_g_mean(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    descending_thresholds(scores)
        .into_iter()
        .map(|t| {
            let (tp, fp) = oracle_counts(scores, labels, t);
            (tp as f64 / pos as f64 * ((neg - fp) as f64 / neg as f64)).sqrt()
        })
        .fold(0.0, f64::max)
}

fn all_metrics(scores: &[f64], labels: &[bool]) -> Result<[f64; 4], String> {
    let e = |r: fsad_core::Result<f64>| r.map_err(|e| e.to_string());
    Ok([
        e(auroc(scores, labels))?,
        e(average_precision(scores, labels))?,
        e(f1_max(scores, labels))?,
        e(g_mean_max(scores, labels))?,
    ])
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut instances = Vec::new();
    for case in 0..500 {
        let n = rng.random_range(2..=32);
        // coarse values force ties
        let levels = rng.random_range(2..=40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = all_metrics(&scores, &labels)?;
        let want = [
            oracle_auroc(&scores, &labels),
            oracle_ap(&scores, &labels),
            oracle_f1(&scores, &labels),
            oracle_g_mean(&scores, &labels),
        ];
        ensure(got == want, || format!("case {case}: {got:?} vs oracle {want:?}"))?;
        instances.push((scores, labels, got));
    }
    let maps: Vec<Box<dyn Fn(f64) -> f64>> = (0..20)
        .map(|k| -> Box<dyn Fn(f64) -> f64> {
            let a = 0.5 + k as f64 * 0.25;
            let b = k as f64 - 7.0;
            match k % 4 {
                0 => Box::new(move |x| a * x + b),
                1 => Box::new(move |x| (a * x).exp() + b),
                2 => Box::new(move |x| x * x * x + a * x + b),
                _ => Box::new(move |x| (1.0 + x).ln() * a - b),
            }
        })
        .collect();
    for (i, f) in maps.iter().enumerate() {
        for (case, (scores, labels, base)) in instances.iter().enumerate().take(100) {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let got = all_metrics(&mapped, labels)?;
            ensure(&got == base, || format!("map {i}, case {case}: {got:?} vs {base:?}"))?;
        }
    }
    Ok("500 instances exact; 20 increasing maps invariant".into())
}

// --- calibration direction -----------------------------------------------

fn calibration_direction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 2000;
    let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z = gaussian(&mut rng);
        labels.push(rng.random_bool(sigmoid(z)));
        scores.push(sigmoid(3.0 * z));
    }
    let data = LabeledScores::new((0..n).map(|i| i.to_string()).collect(), scores, labels).unwrap();
    let split = split_calibration(&data, 0.2, 0).map_err(|e| e.to_string())?;
    let params = fit_platt(&split.calibration).map_err(|e| e.to_string())?;
    let eval = &split.evaluation;
    let raw = eval.scores.clone();
    let cal: Vec<f64> = raw.iter().map(|&s| apply_platt(&params, s)).collect();
    let m = |p: &[f64]| -> Result<(f64, f64, f64), String> {
        let e = |x: fsad_core::Result<f64>| x.map_err(|e| e.to_string());
        let (ece_v, _) = ece(p, &eval.labels, 10).map_err(|e| e.to_string())?;
        Ok((ece_v, e(nll(p, &eval.labels))?, e(brier(p, &eval.labels))?))
    };
    let (e0, n0, b0) = m(&raw)?;
    let (e1, n1, b1) = m(&cal)?;
    let detail = format!("ECE {e0:.4} -> {e1:.4}, NLL {n0:.4} -> {n1:.4}, Brier {b0:.4} -> {b1:.4}");
    ensure(e1 <= 0.5 * e0 && n1 < n0 && b1 < b0, || detail.clone())?;
    Ok(detail)
}

// --- synthetic end-to-end run ----------------------------------------------

fn synthetic_run() -> Result<(RunReport, Duration), String> {
    let mut config = ExperimentConfig::load(synthetic_config_path()).map_err(|e| e.to_string())?;
    config.shots = vec![1, 4];
    config.seeds = vec![0, 1, 2];
    let start = Instant::now();
    let report = run_experiment(config).map_err(|e| e.to_string())?;
    Ok((report, start.elapsed()))
}

fn metric(report: &RunReport, i: usize, cond: Condition, cal: CalibrationKind) -> &fsad_core::metrics::MetricReport {
    &report.cells[i].row(cond, cal).expect("complete cell").metrics
}

fn entropy_separation(run: &Result<(RunReport, Duration), String>) -> Outcome {
    let (report, elapsed) = run.as_ref().map_err(Clone::clone)?;
    let mut failures = Vec::new();
    let mut min_platt = f64::INFINITY;
    let mut min_gap = f64::INFINITY;
    for (i, cell) in report.cells.iter().enumerate() {
        let delta = |cal| {
            metric(report, i, Condition::Adversarial, cal).entropy_mean - metric(report, i, Condition::Clean, cal).entropy_mean
        };
        let (dp, du) = (delta(CalibrationKind::Platt), delta(CalibrationKind::Uncalibrated));
        min_platt = min_platt.min(dp);
        min_gap = min_gap.min(dp - du);
        if !(dp > 0.0 && dp > du) {
            failures.push(format!("{} k={} seed={}: dPlatt {dp:.4}, dUncal {du:.4}", cell.category, cell.shot, cell.seed));
        }
    }
    within(*elapsed, Duration::from_secs(300))?;
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!(
        "{} cells, min dPlatt {min_platt:.4}, min dPlatt - dUncal {min_gap:.4}",
        report.cells.len()
    ))
}

fn robustness_degradation(run: &Result<(RunReport, Duration), String>) -> Outcome {
    let (report, _) = run.as_ref().map_err(Clone::clone)?;
    let mut failures = Vec::new();
    let mut drops = Vec::new();
    for (i, cell) in report.cells.iter().enumerate() {
        let clean = metric(report, i, Condition::Clean, CalibrationKind::Platt).auroc;
        let adv = metric(report, i, Condition::Adversarial, CalibrationKind::Platt).auroc;
        drops.push(clean - adv);
        if clean - adv <= 0.1 {
            failures.push(format!("{} k={} seed={}: {clean:.3} -> {adv:.3}", cell.category, cell.shot, cell.seed));
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    let min = drops.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = drops.iter().sum::<f64>() / drops.len() as f64;
    Ok(format!("{} cells, AUROC drop min {min:.3}, mean {mean:.3}", drops.len()))
}

// --- determinism -------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_fsad"))
            .arg("run")
            .arg("--config")
            .arg(synthetic_config_path())
            .arg("--output")
            .arg(&out)
            .env("RUST_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        outputs.push(std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || "metrics.csv differs between runs".into())?;
    Ok(format!("metrics.csv identical ({} bytes)", outputs[0].len()))
}

fn main() -> ExitCode {
    let synthetic = synthetic_run();
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("C1 nearest-neighbour scoring oracle", Box::new(nn_scoring)),
        ("C2 top-1% aggregation oracle", Box::new(meantop1)),
        ("C3 FGSM gradient exactness", Box::new(gradient_exactness)),
        ("C4 Platt fit optimality", Box::new(platt_optimality)),
        ("C5 detection metric oracles", Box::new(metric_oracles)),
        ("C6 calibration direction", Box::new(calibration_direction)),
        ("C7 entropy separation", Box::new(|| entropy_separation(&synthetic))),
        ("C8 robustness degradation", Box::new(|| robustness_degradation(&synthetic))),
        ("C9 determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
