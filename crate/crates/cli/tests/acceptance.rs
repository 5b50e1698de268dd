//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! The two full desk trainings make this the slow target of the workspace.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rankmoe_cli::{
    run, AUDIT_EPS, AUDIT_PARAMS, AUDIT_RANKS, AUDIT_TOLERANCE, CHECKPOINT_FILE, CONFIG_FILE, RANKS_FILE,
    REPORT_FILE, TRACE_FILE,
};
use rankmoe_core::adapters::{
    fractional_forward, outer_product_sum, router_gate, selector_matrix, truncated_product, RankBudget,
};
use rankmoe_core::backbone::TemporalMode;
use rankmoe_core::checkpoint::NamedTensors;
use rankmoe_core::config::{RunConfig, Variant};
use rankmoe_core::gradcheck::audit_ops;
use rankmoe_core::model::Model;
use rankmoe_core::training::{audit_model, budget_descent, build_model, load_run, run_checkpoint};
use rankmoe_core::{rng, Ctx, ForwardOptions, Tensor};

const EXACT: f64 = 1e-12;
const INSTANCES: usize = 1000;
const AUDIT_BUDGET: Duration = Duration::from_secs(5 * 60);
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const PSNR_MARGIN: f64 = 2.0;
const ABLATION_SLACK: f64 = 0.3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_path() -> PathBuf {
    workspace().join("configs/desk.json")
}

fn desk() -> RunConfig {
    RunConfig::load(&desk_path()).expect("configs/desk.json")
}

fn cli(args: &[&str]) -> (u8, String) {
    let mut out = Vec::new();
    let mut full = vec!["rankmoe"];
    full.extend_from_slice(args);
    let code = run(full, &mut out);
    (code, String::from_utf8_lossy(&out).into_owned())
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> String {
    let p = dir.join(name);
    fs::write(&p, cfg.to_json()).unwrap();
    p.to_str().unwrap().to_string()
}

struct Run {
    dir: PathBuf,
    stdout: String,
    elapsed: Duration,
}

fn train(config: &str, dir: &Path, extra: &[&str]) -> Result<Run, String> {
    let start = Instant::now();
    let mut args = vec!["train", "--config", config, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let (code, stdout) = cli(&args);
    if code != 0 {
        return Err(format!("train exited with {code}"));
    }
    Ok(Run {
        dir: dir.to_path_buf(),
        stdout,
        elapsed: start.elapsed(),
    })
}

/// Rows of a TSV file as `(header, rows)`.
fn tsv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").split('\t').map(String::from).collect();
    let rows = lines.map(|l| l.split('\t').map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("column {name}"))
}

/// Final-epoch `(task, psnr, baseline_psnr)` from a report.
fn final_psnr(report: &str) -> Vec<(String, f64, f64)> {
    let (h, rows) = tsv(report);
    let (e, t, p, b) = (column(&h, "epoch"), column(&h, "task"), column(&h, "psnr"), column(&h, "baseline_psnr"));
    let last = rows.iter().map(|r| r[e].parse::<u64>().unwrap()).max().unwrap_or(0);
    rows.iter()
        .filter(|r| r[e].parse::<u64>().unwrap() == last)
        .map(|r| (r[t].clone(), r[p].parse().unwrap(), r[b].parse().unwrap()))
        .collect()
}

// ---- criteria ------------------------------------------------------------

fn gradient_audit() -> Outcome {
    let start = Instant::now();
    let ops = match audit_ops(10, 0, AUDIT_EPS) {
        Ok(o) => o,
        Err(e) => return outcome(false, e.to_string()),
    };
    let (worst_op, op_err) = ops
        .iter()
        .map(|a| (a.op, a.worst))
        .fold(("", 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
    let model = match audit_model(&desk(), AUDIT_PARAMS, AUDIT_RANKS, AUDIT_EPS) {
        Ok(m) => m,
        Err(e) => return outcome(false, e.to_string()),
    };
    let ranks = model.entries.iter().filter(|e| e.param.ends_with(".rank")).count();
    let elapsed = start.elapsed();
    let pass = op_err <= AUDIT_TOLERANCE
        && model.worst <= AUDIT_TOLERANCE
        && model.entries.len() == AUDIT_PARAMS
        && ranks >= AUDIT_RANKS
        && elapsed < AUDIT_BUDGET;
    outcome(
        pass,
        format!(
            "{} ops, worst {op_err:.1e} ({worst_op}); {} params incl. {ranks} ranks, worst {:.1e}; {:.0} s",
            ops.len(),
            model.entries.len(),
            model.worst,
            elapsed.as_secs_f64()
        ),
    )
}

fn random_instance(r: &mut rng::Rng) -> (Tensor, Tensor, Tensor) {
    let (n, l, k, m) = (
        r.random_range(1..=8),
        r.random_range(1..=8),
        r.random_range(1..=8),
        r.random_range(1..=8),
    );
    (
        rng::normal(r, [n, l], 1.0),
        rng::normal(r, [l, k], 1.0),
        rng::normal(r, [k, m], 1.0),
    )
}

fn truncation_oracle() -> Outcome {
    let mut r = rng::rng(2);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (x, a, b) = random_instance(&mut r);
        let k = r.random_range(0..=a.shape()[1]);
        let got = truncated_product(&x, &a, &b, k).unwrap();
        let outer = outer_product_sum(&x, &a, &b, k);
        let ident = x
            .matmul(&a)
            .unwrap()
            .matmul(&selector_matrix(a.shape()[1], k))
            .unwrap()
            .matmul(&b)
            .unwrap();
        worst = worst
            .max(got.max_abs_diff(&outer).unwrap())
            .max(got.max_abs_diff(&ident).unwrap());
    }
    outcome(worst <= EXACT, format!("{INSTANCES} instances, max deviation {worst:.1e}"))
}

fn interpolation() -> Outcome {
    let mut r = rng::rng(3);
    let (mut exact, mut bound, mut linear) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..INSTANCES {
        let (x, a, b) = random_instance(&mut r);
        let rm = a.shape()[1];
        let n = r.random_range(1..=rm);
        let g_n = truncated_product(&x, &a, &b, n).unwrap();
        exact = exact.max(fractional_forward(&x, &a, &b, n as f64).unwrap().max_abs_diff(&g_n).unwrap());
        if n == rm {
            continue;
        }
        let g_up = truncated_product(&x, &a, &b, n + 1).unwrap();
        let mut ts: Vec<f64> = (0..3).map(|_| r.random_range(0.0..1.0)).collect();
        ts.sort_by(f64::total_cmp);
        let fs: Vec<Tensor> = ts
            .iter()
            .map(|t| fractional_forward(&x, &a, &b, n as f64 + t).unwrap())
            .collect();
        for f in &fs {
            for ((v, p), q) in f.data().iter().zip(g_n.data()).zip(g_up.data()) {
                bound = bound.max(p.min(*q) - v).max(v - p.max(*q));
            }
        }
        // three samples on one interval are collinear
        let w = (ts[1] - ts[0]) / (ts[2] - ts[0]).max(f64::MIN_POSITIVE);
        for ((f0, f1), f2) in fs[0].data().iter().zip(fs[1].data()).zip(fs[2].data()) {
            linear = linear.max((f0 + w * (f2 - f0) - f1).abs());
        }
    }
    outcome(
        exact == 0.0 && bound <= EXACT && linear <= EXACT,
        format!("integer gap {exact:.1e}, bound violation {bound:.1e}, collinearity {linear:.1e}"),
    )
}

fn transparency() -> Outcome {
    let mut cfg = desk();
    cfg.backbone.temporal_mode = TemporalMode::Identity;
    let model = build_model(&cfg).unwrap();
    let off = ForwardOptions {
        adapters: false,
        ..ForwardOptions::default()
    };
    let mut r = rng::rng(4);
    let mut worst = 0.0f64;
    let mut count = 0;
    for spec in cfg.suite() {
        for _ in 0..(100 / cfg.tasks.len() + 1) {
            if count == 100 {
                break;
            }
            let x = rng::uniform(&mut r, [spec.t_in, spec.channels, spec.height, spec.width], 0.0, 1.0);
            let on = model.predict(&spec.id, &x, ForwardOptions::default()).unwrap();
            let plain = model.predict(&spec.id, &x, off).unwrap();
            worst = worst.max(on.max_abs_diff(&plain).unwrap());
            count += 1;
        }
    }
    outcome(worst <= EXACT, format!("{count} inputs, max deviation {worst:.1e}"))
}

fn budget_convergence() -> Outcome {
    let budget = RankBudget::new(48.0, 1.0).unwrap();
    let trace = budget_descent(&[4.5; 12], 8, &budget, 0.05, 200).unwrap();
    match trace.iter().position(|s| (s - 48.0).abs() < 0.5) {
        Some(i) => outcome(true, format!("|Σr - C| < 0.5 after {} steps (Σr = {:.3})", i + 1, trace[i])),
        None => outcome(false, format!("closest Σr {:.3}", trace.iter().fold(f64::INFINITY, |m, s| m.min((s - 48.0).abs())))),
    }
}

fn layer_oracle_gap(model: &Model) -> f64 {
    let mut worst = 0.0f64;
    for (_, layer) in model.moe_layers() {
        let x = rng::normal(&mut rng::rng(5), [7, layer.in_dim], 1.0);
        let mut ctx = Ctx::new(&model.store, ForwardOptions::default());
        let xv = ctx.graph.constant(x.clone());
        let y = layer.forward(&mut ctx, xv).unwrap();
        let got = ctx.graph.value(y).clone();
        let gates = router_gate(&x, model.store.value(layer.gate)).unwrap();
        let mut want = match layer.base {
            Some(w) => x.matmul(model.store.value(w)).unwrap(),
            None => Tensor::zeros([7, layer.out_dim]),
        };
        for (i, e) in layer.experts.iter().enumerate() {
            let k = model.store.rank(e.rank) as usize;
            let t = truncated_product(&x, model.store.value(e.a), model.store.value(e.b), k).unwrap();
            let g = gates.data()[i] * layer.alpha;
            want = want.zip_map(&t, |p, q| p + g * q).unwrap();
        }
        worst = worst.max(got.max_abs_diff(&want).unwrap());
    }
    worst
}

fn discretization(cfg: &RunConfig, run: &Run) -> Outcome {
    let mut model = build_model(cfg).unwrap();
    if let Err(e) = load_run(&run.dir.join(CHECKPOINT_FILE), &mut model) {
        return outcome(false, e.to_string());
    }
    let r_max = cfg.backbone.r_max as f64;
    let ranks = model.store.ranks();
    let integral = ranks.iter().all(|r| *r == r.round() && (1.0..=r_max).contains(r));
    let frozen = model.rank_ids().iter().all(|&id| !model.store.get(id).trainable);

    let (h, rows) = tsv(&fs::read_to_string(run.dir.join(REPORT_FILE)).unwrap());
    let (e, ph) = (column(&h, "epoch"), column(&h, "phase"));
    let rank_cols: Vec<usize> = (0..h.len()).filter(|&i| h[i].starts_with("rank:") || h[i] == "rank_sum").collect();
    let boundary = cfg.train.rank_epochs as u64;
    let after: Vec<&Vec<String>> = rows.iter().filter(|r| r[e].parse::<u64>().unwrap() >= boundary).collect();
    let constant = after.iter().all(|r| rank_cols.iter().all(|&c| r[c] == after[0][c]));
    let phases = rows.iter().all(|r| {
        let want = if r[e].parse::<u64>().unwrap() >= boundary { "frozen_rank" } else { "rank_search" };
        r[ph] == want
    });
    let (_, trace) = tsv(&fs::read_to_string(run.dir.join(TRACE_FILE)).unwrap());
    let spe = trace.len() / cfg.train.epochs.max(1);
    let tail = &trace[(boundary as usize * spe).min(trace.len())..];
    let trace_flat = tail.iter().all(|r| r[1] == tail[0][1]);
    let gap = layer_oracle_gap(&model);
    outcome(
        integral && frozen && constant && phases && trace_flat && gap <= EXACT,
        format!(
            "{} ranks integral in [1, {r_max}]: {integral}; constant after epoch {boundary}: {}; truncated-product gap {gap:.1e}",
            ranks.len(),
            constant && trace_flat && frozen && phases
        ),
    )
}

fn end_to_end(run: &Run) -> Outcome {
    let finals = final_psnr(&fs::read_to_string(run.dir.join(REPORT_FILE)).unwrap());
    let mut pass = run.elapsed < TRAIN_BUDGET;
    let mut parts = Vec::new();
    for (task, psnr, base) in &finals {
        let gain = psnr - base;
        if task == "diffusion" || task == "advection" {
            pass &= gain >= PSNR_MARGIN;
        }
        parts.push(format!("{task} {psnr:.2} dB vs persistence {base:.2} ({gain:+.2})"));
    }
    pass &= ["diffusion", "advection"].iter().all(|t| finals.iter().any(|f| f.0 == *t));
    outcome(pass, format!("{}; {:.1} min", parts.join(", "), run.elapsed.as_secs_f64() / 60.0))
}

fn ablation(full: &Run, fixed: &Run) -> Outcome {
    let mean = |run: &Run| {
        let f = final_psnr(&fs::read_to_string(run.dir.join(REPORT_FILE)).unwrap());
        f.iter().map(|x| x.1).sum::<f64>() / f.len() as f64
    };
    let (a, b) = (mean(full), mean(fixed));
    outcome(
        a >= b - ABLATION_SLACK,
        format!("mean PSNR {a:.2} dB with RA-MoE + temporal, {b:.2} dB fixed-rank baseline ({:+.2})", a - b),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let mut cfg = desk();
    for t in &mut cfg.tasks {
        t.spec.n_train = 64;
        t.spec.n_test = 16;
    }
    cfg.train.epochs = 3;
    cfg.train.rank_epochs = 2;
    cfg.train.eval_batch = 16;
    let config = write_config(dir, "determinism.json", &cfg);
    let runs: Vec<Run> = match ["a", "b"]
        .iter()
        .map(|n| train(&config, &dir.join(n), &["--seed", "7"]))
        .collect::<Result<_, _>>()
    {
        Ok(r) => r,
        Err(e) => return outcome(false, e),
    };
    let files = [REPORT_FILE, RANKS_FILE, TRACE_FILE, CHECKPOINT_FILE, CONFIG_FILE];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(runs[0].dir.join(f)).ok() != fs::read(runs[1].dir.join(f)).ok())
        .collect();
    outcome(
        differing.is_empty() && runs[0].stdout == runs[1].stdout,
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two seeded runs", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn round_trip(run: &Run, dir: &Path) -> Outcome {
    let path = run.dir.join(CHECKPOINT_FILE);
    let original = fs::read(&path).unwrap();
    let cfg = RunConfig::load(&run.dir.join(CONFIG_FILE)).unwrap();
    let mut model = build_model(&cfg).unwrap();
    let state = match load_run(&path, &mut model) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let resaved = dir.join("resaved.urad");
    run_checkpoint(&model, &state).save(&resaved).unwrap();
    let same_bytes = fs::read(&resaved).unwrap() == original;
    let decoded = NamedTensors::decode(&original).map(|nt| nt.encode() == original).unwrap_or(false);
    let (code, evaluated) = cli(&[
        "eval",
        "--config",
        run.dir.join(CONFIG_FILE).to_str().unwrap(),
        "--checkpoint",
        path.to_str().unwrap(),
    ]);
    let same_metrics = code == 0 && evaluated == run.stdout;
    outcome(
        same_bytes && decoded && same_metrics,
        format!(
            "save-load-save identical: {same_bytes}; eval after load matches final metrics: {same_metrics} ({} bytes)",
            original.len()
        ),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let dir = scratch.path();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report(1, "gradient audit", gradient_audit());
    report(2, "rank-truncation oracle", truncation_oracle());
    report(3, "interpolation properties", interpolation());
    report(4, "zero-init transparency", transparency());
    report(5, "budget convergence", budget_convergence());
    report(9, "determinism", determinism(dir));

    let cfg = desk();
    let full = train(desk_path().to_str().unwrap(), &dir.join("desk"), &[]);
    let mut fixed_cfg = cfg.clone();
    fixed_cfg.variant = Variant::FixedLora;
    let fixed_path = write_config(dir, "fixed_lora.json", &fixed_cfg);
    match &full {
        Ok(run) => {
            report(6, "discretization contract", discretization(&cfg, run));
            report(7, "end-to-end learning", end_to_end(run));
            report(10, "checkpoint round-trip", round_trip(run, dir));
            match train(&fixed_path, &dir.join("fixed_lora"), &[]) {
                Ok(fixed) => report(8, "ablation direction", ablation(run, &fixed)),
                Err(e) => report(8, "ablation direction", outcome(false, e)),
            }
        }
        Err(e) => {
            for (id, name) in [(6, "discretization contract"), (7, "end-to-end learning"), (10, "checkpoint round-trip"), (8, "ablation direction")] {
                report(id, name, outcome(false, e.clone()));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
