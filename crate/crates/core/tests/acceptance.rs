//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-4 and 11 are exact properties and always fail the run when
//! violated. Criteria 5-10 are empirical trends on synthetic data; they are
//! reported, and only fail the process when STATERECT_ACCEPTANCE_STRICT=1.

use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use serde_json::Value;
use staterect::experiment::{self, ExperimentSpec, Variant};
use staterect::math::RngStream;
use staterect::model::{self, EmbeddingHead, SurrogateBank};
use staterect::wdbr::{self, RectifierConfig};
use staterect::wfdr::{self, DriftBuffer};

const STRICT_ENV: &str = "STATERECT_ACCEPTANCE_STRICT";

struct Outcome {
    id: u8,
    title: &'static str,
    pass: bool,
    detail: String,
    /// Exact property: a failure is always fatal.
    exact: bool,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------------------
// Exact properties

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(rng: &mut RngStream, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_rectifier(rng: &mut RngStream) -> RectifierConfig {
    let b = rng.uniform();
    match rng.below(3) {
        0 => RectifierConfig::hard(b),
        1 => RectifierConfig::soft(5.0, b),
        _ => RectifierConfig::soft(1.0 + 19.0 * rng.uniform(), b),
    }
}

/// Brute-force posterior `p_k exp(s mu_k.x) / Z`, shifted for range, and its
/// first maximizer.
fn brute_force_map(mu: &[Vec<f64>], p: &[f64], x: &[f64], scale: f64) -> usize {
    let dots: Vec<f64> = mu.iter().map(|m| dot(m, x)).collect();
    let top = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let joint: Vec<f64> = dots
        .iter()
        .zip(p)
        .map(|(d, pk)| pk * (scale * (d - top)).exp())
        .collect();
    let z: f64 = joint.iter().sum();
    let mut best = 0;
    for k in 1..joint.len() {
        if joint[k] / z > joint[best] / z {
            best = k;
        }
    }
    best
}

fn criterion_map_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(101, 0);
    let dims = [2, 8, 32];
    let ks = [2, 5, 50];
    let (mut hits, mut nullified_seen) = (0, 0);
    let total = 1000;
    for i in 0..total {
        let d = dims[i % 3];
        let k = ks[(i / 3) % 3];
        let mu: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut rng, d)).collect();
        let mut p: Vec<f64> = (0..k)
            .map(|_| {
                let cfg = random_rectifier(&mut rng);
                wdbr::rectifier(rng.uniform(), &cfg)
            })
            .collect();
        if p.iter().all(|&v| v == 0.0) {
            p[rng.below(k)] = 1.0;
        }
        nullified_seen += p.iter().filter(|&&v| v == 0.0).count();
        let x = unit(&mut rng, d);
        let bank = SurrogateBank {
            mu: mu.clone(),
            scale: model::DEFAULT_SCALE,
            p: p.clone(),
        };
        let got = wdbr::rectified_assign(&bank, &x);
        if !got.fallback && got.class == brute_force_map(&mu, &p, &x, model::DEFAULT_SCALE) {
            hits += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        title: "MAP-optimal rectified assignment",
        pass: hits == total && secs < 5.0,
        detail: format!("{hits}/{total} exact ({nullified_seen} nullified classes seen), {secs:.2} s"),
        exact: true,
    }
}

fn central_diff(f: &dyn Fn(&[f64]) -> f64, v: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = v.to_vec();
    (0..v.len())
        .map(|i| {
            let o = probe[i];
            probe[i] = o + eps;
            let a = f(&probe);
            probe[i] = o - eps;
            let b = f(&probe);
            probe[i] = o;
            (a - b) / (2.0 * eps)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = dot(a, a).sqrt().max(dot(b, b).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn surrogate_instance(rng: &mut RngStream) -> f64 {
    let input = 3 + rng.below(6);
    let embed = 2 + rng.below(5);
    let k = 2 + rng.below(5);
    let n = 2 + rng.below(4);
    let head = if rng.below(2) == 0 {
        EmbeddingHead::random(input, embed, rng)
    } else {
        let width = 2 + rng.below(6);
        EmbeddingHead::with_hidden(input, width, embed, rng)
    };
    let mu: Vec<Vec<f64>> = (0..k).map(|_| unit(rng, embed)).collect();
    // A small scale keeps the softmax away from saturation, where finite
    // differences lose all precision.
    let scale = 1.0 + 4.0 * rng.uniform();
    let bank = SurrogateBank { mu, scale, p: vec![1.0; k] };
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..input).map(|_| rng.normal()).collect()).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let g = model::surrogate_loss_grads(&head, &bank, &refs, &labels).expect("loss");

    let theta = head.params_flat();
    let f_theta = |t: &[f64]| {
        let mut h = head.clone();
        h.set_params_flat(t);
        model::surrogate_loss_grads(&h, &bank, &refs, &labels).expect("loss").loss
    };
    let e_head = rel_err(&g.grad_head.flat(), &central_diff(&f_theta, &theta, 1e-5));

    let mu_flat = bank.mu_flat();
    let f_mu = |m: &[f64]| {
        let mut b = bank.clone();
        b.set_mu_flat(m);
        model::surrogate_loss_grads(&head, &b, &refs, &labels).expect("loss").loss
    };
    let e_mu = rel_err(&g.grad_mu, &central_diff(&f_mu, &mu_flat, 1e-5));
    e_head.max(e_mu)
}

fn drift_instance(rng: &mut RngStream) -> f64 {
    let d = 2 + rng.below(5);
    let n_states = 1 + rng.below(3);
    let n = 2 * n_states + rng.below(8);
    let states: Vec<usize> = (0..n).map(|i| if i < 2 * n_states { i / 2 + 1 } else { 1 + rng.below(n_states) }).collect();
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let buffer = DriftBuffer {
        m: (0..d).map(|_| 0.5 * rng.normal()).collect(),
        sigma: (0..d).map(|_| 0.5 + rng.uniform()).collect(),
        alpha: 0.1,
    };
    let loss_of = |flat: &[f64]| {
        let ys: Vec<Vec<f64>> = flat.chunks(d).map(<[f64]>::to_vec).collect();
        let st = wfdr::batch_state_stats(&ys, &states).expect("stats");
        wfdr::drift_loss_grads(&st, &buffer, &ys).loss
    };
    let st = wfdr::batch_state_stats(&xs, &states).expect("stats");
    let analytic = wfdr::drift_loss_grads(&st, &buffer, &xs).grad_x.concat();
    rel_err(&analytic, &central_diff(&loss_of, &xs.concat(), 1e-5))
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(202, 0);
    let surr: Vec<f64> = (0..100).map(|_| surrogate_instance(&mut rng)).collect();
    let drift: Vec<f64> = (0..100).map(|_| drift_instance(&mut rng)).collect();
    let worst_s = surr.iter().cloned().fold(0.0, f64::max);
    let worst_d = drift.iter().cloned().fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 2,
        title: "analytic gradients match central differences",
        pass: worst_s <= 1e-4 && worst_d <= 1e-4 && secs < 30.0,
        detail: format!("worst rel. error: surrogate {worst_s:.2e}, drift {worst_d:.2e} (100 each), {secs:.2} s"),
        exact: true,
    }
}

fn criterion_boundary() -> Outcome {
    let mut rng = RngStream::new(303, 0);
    let scale = model::DEFAULT_SCALE;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 2 + rng.below(31);
        let mu1 = unit(&mut rng, d);
        let mu2 = unit(&mut rng, d);
        let p1 = 0.01 + 0.99 * rng.uniform();
        let p2 = 0.01 + 0.99 * rng.uniform();
        // Project a random point onto the boundary along mu1 - mu2.
        let x0 = unit(&mut rng, d);
        let diff: Vec<f64> = mu1.iter().zip(&mu2).map(|(a, b)| a - b).collect();
        let r0 = wdbr::boundary_residual(&mu1, &mu2, p1, p2, &x0, scale).expect("residual");
        let step = r0 / (scale * dot(&diff, &diff));
        let x: Vec<f64> = x0.iter().zip(&diff).map(|(xi, di)| xi - step * di).collect();
        let r = wdbr::boundary_residual(&mu1, &mu2, p1, p2, &x, scale).expect("residual");
        let s1 = scale * dot(&mu1, &x) + p1.ln();
        let s2 = scale * dot(&mu2, &x) + p2.ln();
        worst = worst.max((s1 - s2).abs()).max(r.abs());
    }
    Outcome {
        id: 3,
        title: "zero boundary residual gives equal rectified scores",
        pass: worst <= 1e-9,
        detail: format!("worst |score gap| or |residual| {worst:.2e} over 100 instances"),
        exact: true,
    }
}

// ---------------------------------------------------------------------------
// Training runs, shared across criteria

#[derive(Clone)]
struct Run {
    rank1: f64,
    drift: f64,
    active_k: usize,
    min_active_k: usize,
    fallbacks: usize,
    nullified_hits: usize,
}

/// Memoizes runs by their fully resolved configuration, so the same
/// (generator, trainer, seed) is only trained once across presets.
#[derive(Default)]
struct Runner {
    cache: HashMap<String, Run>,
    trained: usize,
}

impl Runner {
    fn run(&mut self, spec: &ExperimentSpec, variant: &Variant, seed: u64) -> Run {
        let (gen, cfg) = spec.resolve(variant, seed).expect("variant resolves");
        let key = format!(
            "{}|{}|{:?}|{:?}|{seed}",
            serde_json::to_string(&gen).expect("serializes"),
            cfg.to_json(),
            variant.train_kind,
            variant.ablation
        );
        if let Some(r) = self.cache.get(&key) {
            return r.clone();
        }
        let a = experiment::run_single(spec, variant, seed)
            .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", variant.name));
        self.trained += 1;
        let out = a.output.as_ref();
        let r = Run {
            rank1: a.report.rank1(),
            drift: a.test_drift,
            active_k: out.map_or(0, |o| o.bank.active_k()),
            min_active_k: out
                .and_then(|o| o.history.refreshes.iter().map(|r| r.active_k).min())
                .unwrap_or(0),
            fallbacks: out.map_or(0, |o| o.history.total_fallbacks()),
            nullified_hits: out.map_or(0, |o| o.history.total_nullified_hits()),
        };
        self.cache.insert(key, r.clone());
        r
    }

    /// All seeds of one named variant of `spec`.
    fn variant(&mut self, spec: &ExperimentSpec, name: &str) -> Vec<Run> {
        let v = spec
            .variants
            .iter()
            .find(|v| v.name == name)
            .unwrap_or_else(|| panic!("no variant {name}"))
            .clone();
        spec.seeds.iter().map(|&s| self.run(spec, &v, s)).collect()
    }
}

fn rank1s(runs: &[Run]) -> Vec<f64> {
    runs.iter().map(|r| r.rank1).collect()
}

fn count_ge(a: &[Run], b: &[Run]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x.rank1 >= y.rank1).count()
}

fn preset(name: &str) -> ExperimentSpec {
    experiment::preset(name).expect("preset exists")
}

fn trend_criteria(runner: &mut Runner) -> Vec<Outcome> {
    let mut out = Vec::new();
    let default = preset("default");

    let start = Instant::now();
    let pre = runner.variant(&default, "pretrained");
    let basic = runner.variant(&default, "basic");
    let hard = runner.variant(&default, "full-hard");
    let default_secs = start.elapsed().as_secs_f64();

    let wins = hard.iter().zip(&basic).filter(|(h, b)| h.rank1 > b.rank1).count();
    let gains: Vec<f64> = hard.iter().zip(&basic).map(|(h, b)| h.rank1 - b.rank1).collect();
    let over_raw = basic.iter().zip(&pre).filter(|(b, p)| b.rank1 > p.rank1).count();
    out.push(Outcome {
        id: 5,
        title: "full model beats basic model beats raw features",
        pass: wins >= 4 && median(&gains) >= 0.10 && over_raw == pre.len() && default_secs < 600.0,
        detail: format!(
            "full>basic {wins}/5, median gain {:.3}, basic>raw {over_raw}/5; rank-1 raw {} basic {} full {}; {default_secs:.0} s",
            median(&gains),
            fmt_vec(&rank1s(&pre)),
            fmt_vec(&rank1s(&basic)),
            fmt_vec(&rank1s(&hard))
        ),
        exact: false,
    });

    let d_full: Vec<f64> = hard.iter().map(|r| r.drift).collect();
    let d_basic: Vec<f64> = basic.iter().map(|r| r.drift).collect();
    let ratio = median(&d_full) / median(&d_basic);
    out.push(Outcome {
        id: 6,
        title: "drift regularization shrinks test-set drift",
        pass: ratio <= 0.5,
        detail: format!(
            "median drift full {:.4} vs basic {:.4} (ratio {ratio:.3})",
            median(&d_full),
            median(&d_basic)
        ),
        exact: false,
    });

    let soft = runner.variant(&default, "full-soft");
    let imb = preset("imbalanced");
    let imb_hard = runner.variant(&imb, "full-hard");
    let imb_soft = runner.variant(&imb, "full-soft");
    let hard_wins = count_ge(&imb_hard, &imb_soft);
    let soft_wins = count_ge(&soft, &hard);
    out.push(Outcome {
        id: 7,
        title: "hard rectifier under imbalance, soft when balanced",
        pass: hard_wins >= 3 && soft_wins >= 3,
        detail: format!(
            "imbalanced hard>=soft {hard_wins}/5 (hard {} soft {}); balanced soft>=hard {soft_wins}/5 (soft {} hard {})",
            fmt_vec(&rank1s(&imb_hard)),
            fmt_vec(&rank1s(&imb_soft)),
            fmt_vec(&rank1s(&soft)),
            fmt_vec(&rank1s(&hard))
        ),
        exact: false,
    });

    let noisy = preset("noisy");
    let levels: Vec<Vec<Run>> = ["noise-0", "noise-0.2", "noise-0.4", "noise-0.8"]
        .iter()
        .map(|n| runner.variant(&noisy, n))
        .collect();
    let drop = |runs: &[Run]| -> f64 {
        let d: Vec<f64> = levels[0].iter().zip(runs).map(|(a, b)| a.rank1 - b.rank1).collect();
        median(&d)
    };
    let (d20, d40, d80) = (drop(&levels[1]), drop(&levels[2]), drop(&levels[3]));
    out.push(Outcome {
        id: 8,
        title: "robust to moderate state-label noise",
        pass: d40.abs() <= 0.05 && d80 > 0.05,
        detail: format!(
            "median rank-1 drop vs clean: 20% {d20:.3}, 40% {d40:.3}, 80% {d80:.3}; medians {}",
            fmt_vec(&levels.iter().map(|l| median(&rank1s(l))).collect::<Vec<_>>())
        ),
        exact: false,
    });

    let th = preset("threshold");
    let mut bs: Vec<f64> = experiment::THRESHOLDS.to_vec();
    bs.sort_by(|a, b| b.total_cmp(a));
    let means: Vec<f64> = bs
        .iter()
        .map(|b| {
            let runs = runner.variant(&th, &format!("hard-b{b}"));
            runs.iter().map(|r| r.active_k as f64).sum::<f64>() / runs.len() as f64
        })
        .collect();
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    out.push(Outcome {
        id: 9,
        title: "active-K nonincreasing as the threshold drops",
        pass: monotone,
        detail: format!("b {bs:?} -> mean final active-K {}", fmt_vec(&means)),
        exact: false,
    });

    let mk = preset("multi-kind");
    let product = runner.variant(&mk, "product");
    let first = runner.variant(&mk, "first-kind");
    let mk_wins = count_ge(&product, &first);
    out.push(Outcome {
        id: 10,
        title: "product rectifier over two state kinds",
        pass: mk_wins >= 3,
        detail: format!(
            "product>=first-kind {mk_wins}/5 (product {} first {})",
            fmt_vec(&rank1s(&product)),
            fmt_vec(&rank1s(&first))
        ),
        exact: false,
    });

    // Exact invariant, but it needs the default hard runs from above.
    let hits: usize = hard.iter().map(|r| r.nullified_hits).sum();
    let falls: usize = hard.iter().map(|r| r.fallbacks).sum();
    let min_active = hard.iter().map(|r| r.min_active_k).min().unwrap_or(0);
    let k = default.train.k;
    out.push(Outcome {
        id: 4,
        title: "no assignments to nullified classes",
        pass: hits == 0 && falls == 0 && min_active < k,
        detail: format!(
            "{hits} hits, {falls} fallbacks over 5 hard runs; fewest active classes at a refresh {min_active} of {k}; final active-K {:?}",
            hard.iter().map(|r| r.active_k).collect::<Vec<_>>()
        ),
        exact: true,
    });
    out
}

// ---------------------------------------------------------------------------
// CLI determinism and file formats

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_staterect"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

/// The object's keys, in the order they appear in `line`.
fn keys_in_order(line: &str, want: &[&str]) -> Result<Value, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("{e}: {line}"))?;
    let obj = v.as_object().ok_or("not an object")?;
    if obj.len() != want.len() || want.iter().any(|k| !obj.contains_key(*k)) {
        return Err(format!("keys {:?}, want {want:?}", obj.keys().collect::<Vec<_>>()));
    }
    let pos: Vec<usize> = want
        .iter()
        .map(|k| line.find(&format!("\"{k}\":")).unwrap_or(usize::MAX))
        .collect();
    if pos.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("key order differs from {want:?}"));
    }
    Ok(v)
}

fn check_dataset(path: &Path) -> Result<usize, String> {
    let text = String::from_utf8(read(path)?).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header = keys_in_order(lines.next().ok_or("empty dataset")?, &["version", "D", "J", "split"])?;
    if header["version"] != 1 || !matches!(header["split"].as_str(), Some("train" | "test")) {
        return Err(format!("bad header {header}"));
    }
    let d = header["D"].as_u64().ok_or("D")? as usize;
    let j = header["J"].as_u64().ok_or("J")?;
    let mut n = 0;
    for line in lines {
        let r = keys_in_order(line, &["features", "state", "identity"])?;
        let f = r["features"].as_array().ok_or("features")?;
        let s = r["state"].as_u64().ok_or("state")?;
        if f.len() != d || !f.iter().all(Value::is_f64) || !(1..=j).contains(&s) {
            return Err(format!("bad record {line}"));
        }
        if !(r["identity"].is_null() || r["identity"].is_u64()) {
            return Err(format!("bad identity {line}"));
        }
        n += 1;
    }
    staterect::synth::read_dataset(path).map_err(|e| e.to_string())?;
    Ok(n)
}

fn check_train_outputs(dir: &Path) -> Result<(), String> {
    let ck_text = String::from_utf8(read(&dir.join("checkpoint.json"))?).map_err(|e| e.to_string())?;
    let ck: Value = serde_json::from_str(&ck_text).map_err(|e| e.to_string())?;
    for key in ["version", "D", "d", "K", "scale", "W", "b", "hidden", "mu", "p"] {
        if ck.get(key).is_none() {
            return Err(format!("checkpoint lacks {key}"));
        }
    }
    model::Checkpoint::load(&dir.join("checkpoint.json"))
        .and_then(model::Checkpoint::into_parts)
        .map_err(|e| e.to_string())?;

    let cfg = std::fs::read_to_string(dir.join("config.json")).map_err(|e| e.to_string())?;
    staterect::trainer::TrainConfig::from_json(&cfg).map_err(|e| e.to_string())?;

    let hist = std::fs::read_to_string(dir.join("history.csv")).map_err(|e| e.to_string())?;
    let mut rows = hist.lines();
    if rows.next() != Some("iter,L_surr,L_drift,lr,active_K,fallbacks") {
        return Err("history header".into());
    }
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != 6 || cells.iter().any(|c| c.parse::<f64>().is_err()) {
            return Err(format!("history row {row}"));
        }
    }
    let diag = std::fs::read_to_string(dir.join("diagnostics.jsonl")).map_err(|e| e.to_string())?;
    for line in diag.lines() {
        let v = keys_in_order(line, &["iter", "active_K", "R_histogram"])?;
        if !v["iter"].is_u64() || !v["active_K"].is_u64() || !v["R_histogram"].is_array() {
            return Err(format!("diagnostic {line}"));
        }
    }
    Ok(())
}

fn check_report(dir: &Path, ks: &[usize]) -> Result<(), String> {
    let text = std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    let v: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    for k in ks {
        let r = v["rank"][k.to_string()].as_f64().ok_or(format!("rank {k}"))?;
        if !(0.0..=1.0).contains(&r) {
            return Err(format!("rank {k} = {r}"));
        }
    }
    if !v["mAP"].is_f64() || !v["per_state"].is_object() {
        return Err("report lacks mAP or per_state".into());
    }
    let csv = std::fs::read_to_string(dir.join("report.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    if lines.len() != 2 || lines[0].split(',').count() != lines[1].split(',').count() {
        return Err("report.csv must be a header and one row".into());
    }
    Ok(())
}

fn determinism_round(root: &Path, tag: &str) -> Result<(Vec<Vec<u8>>, String), String> {
    let data = root.join(format!("data-{tag}"));
    let run = root.join(format!("run-{tag}"));
    let eval = root.join(format!("eval-{tag}"));
    let cfg = root.join("train.json");
    let d = data.to_str().unwrap();
    cli(&["gen", "--out", d, "--seed", "7", "--ids", "30", "--test-ids", "15", "--per-pair", "3", "--label-noise", "0.1"])?;
    let train = data.join("train.jsonl");
    let stdout = cli(&[
        "train",
        "--data",
        train.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ])?;
    let digest = stdout
        .split("sha256 ")
        .nth(1)
        .map(|s| s.trim().to_string())
        .ok_or("train did not print a digest")?;
    let ck = run.join("checkpoint.json");
    let test = data.join("test.jsonl");
    cli(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
        "--ks",
        "1,5",
        "--out",
        eval.to_str().unwrap(),
    ])?;
    if model::sha256_hex(&read(&ck)?) != digest {
        return Err("printed digest does not match checkpoint bytes".into());
    }
    let files = vec![
        read(&train)?,
        read(&test)?,
        read(&data.join("true_states.json"))?,
        read(&ck)?,
        read(&run.join("history.csv"))?,
        read(&run.join("diagnostics.jsonl"))?,
        read(&eval.join("report.json"))?,
        read(&eval.join("report.csv"))?,
    ];
    check_dataset(&train)?;
    check_dataset(&test)?;
    check_train_outputs(&run)?;
    check_report(&eval, &[1, 5])?;
    Ok((files, digest))
}

fn criterion_determinism() -> Outcome {
    let result = (|| -> Result<String, String> {
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = serde_json::json!({ "K": 40, "iterations": 80, "T": 20, "batch_size": 64, "seed": 3 });
        std::fs::write(root.path().join("train.json"), cfg.to_string()).map_err(|e| e.to_string())?;
        let (a, da) = determinism_round(root.path(), "a")?;
        let (b, db) = determinism_round(root.path(), "b")?;
        if a != b || da != db {
            let which: Vec<usize> = a.iter().zip(&b).enumerate().filter(|(_, (x, y))| x != y).map(|(i, _)| i).collect();
            return Err(format!("reruns differ in files {which:?}"));
        }
        Ok(format!("{} files byte-identical across reruns, formats valid, digest {}", a.len(), &da[..12]))
    })();
    Outcome {
        id: 11,
        title: "deterministic reruns and valid file formats",
        pass: result.is_ok(),
        detail: result.unwrap_or_else(|e| e),
        exact: true,
    }
}

fn main() -> ExitCode {
    let strict = std::env::var(STRICT_ENV).is_ok_and(|v| v == "1");
    let start = Instant::now();
    let mut outcomes = vec![criterion_map_optimality(), criterion_gradients(), criterion_boundary()];
    let mut runner = Runner::default();
    outcomes.extend(trend_criteria(&mut runner));
    outcomes.push(criterion_determinism());
    outcomes.sort_by_key(|o| o.id);

    println!();
    for o in &outcomes {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {}: {}: {}", o.id, o.title, o.detail);
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!(
        "{passed}/{} criteria passed; {} training runs, {:.0} s",
        outcomes.len(),
        runner.trained,
        start.elapsed().as_secs_f64()
    );
    let fatal = outcomes.iter().any(|o| !o.pass && (o.exact || strict));
    if fatal {
        ExitCode::FAILURE
    } else {
        if passed < outcomes.len() {
            println!("trend failures are reported only; set {STRICT_ENV}=1 to make them fatal");
        }
        ExitCode::SUCCESS
    }
}
