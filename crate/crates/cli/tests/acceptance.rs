//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use capmin_cli::commands::{cmd_capminv, cmd_pmap, cmd_profile, cmd_report, cmd_sweep_k, cmd_train};
use capmin_cli::{Config, Context, Format};
use capmin_core::bnn::{evaluate, predict_all, tiled_mac, BnnModel, LevelTransform, SubMacConfig};
use capmin_core::capmin_v::{capmin_v, pad_pmap};
use capmin_core::data::generate_synthetic;
use capmin_core::levels::{select_top_k, select_top_k_from, MacHistogram};
use capmin_core::neuron::{
    build_spike_time_set, capacitor_voltage, ideal_spike_time, size_capacitor, NeuronCircuitParams, SpikeTimeSet,
};
use capmin_core::seed::derive_seed_tagged;
use capmin_core::variation::{analytic_pmap, extract_pmap, ErrorMatrix, VariationModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // NaN makes the condition false, which fails the check.
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, budget_s: u64) -> Check {
    ensure!(
        elapsed <= Duration::from_secs(budget_s),
        "took {:.1} s, budget {budget_s} s",
        elapsed.as_secs_f64()
    );
    Ok(String::new())
}

/// Shared trained model and profile, produced through the pipeline commands.
struct Pipeline {
    ctx: Context,
    model: BnnModel,
    hist: MacHistogram,
    train_time: Duration,
    _dir: tempfile::TempDir,
}

fn pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(Config::default(), Some(dir.path().join("out")), None, Format::Csv);
    let start = Instant::now();
    cmd_train(&ctx).unwrap();
    let hist = cmd_profile(&ctx).unwrap();
    let train_time = start.elapsed();
    let model = BnnModel::load(&ctx.out.join("model.json")).unwrap();
    Pipeline {
        ctx,
        model,
        hist,
        train_time,
        _dir: dir,
    }
}

// 1 -------------------------------------------------------------------------

fn direct(w: &[i8], x: &[i8]) -> i64 {
    w.iter().zip(x).map(|(&a, &b)| a as i64 * b as i64).sum()
}

fn signs(bits: u32, n: usize) -> Vec<i8> {
    (0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect()
}

fn tiling() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0u64;
    for beta in 1..=12usize {
        for a in 1..=6u32 {
            let cfg = SubMacConfig::identity(a);
            // The sum depends on w and x only through their agreement
            // pattern; enumerating every x against several w covers every
            // pattern and several bit layouts of each.
            let mut ws: Vec<u32> = vec![0, (1 << beta) - 1, 0x5555_5555 & ((1 << beta) - 1)];
            ws.extend((0..5).map(|_| rng.random_range(0..1u32 << beta)));
            for &wb in &ws {
                let w = signs(wb, beta);
                for xb in 0..1u32 << beta {
                    let x = signs(xb, beta);
                    let got = tiled_mac(&w, &x, &cfg, &mut rng).map_err(|e| e.to_string())?;
                    ensure!(got == direct(&w, &x), "beta {beta} a {a} w {wb:b} x {xb:b}: {got}");
                    cases += 1;
                }
            }
        }
    }
    let cfg = SubMacConfig::identity(32);
    for _ in 0..10_000 {
        let beta = rng.random_range(1..=96);
        let w: Vec<i8> = (0..beta).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let x: Vec<i8> = (0..beta).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let got = tiled_mac(&w, &x, &cfg, &mut rng).map_err(|e| e.to_string())?;
        ensure!(got == direct(&w, &x), "a 32 beta {beta}: {got}");
        cases += 1;
    }
    within(start.elapsed(), 10)?;
    Ok(format!("{cases} cases exact"))
}

// 2 -------------------------------------------------------------------------

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Classical RK4 on dV/dt = I/C (1 - V/V0), with the crossing located by
/// linear interpolation inside the final step.
fn rk4_crossing(p: &NeuronCircuitParams, i: f64) -> f64 {
    let f = |v: f64| i / p.capacitance * (1.0 - v / p.supply_voltage);
    let h = p.threshold_voltage * p.capacitance / i / 4000.0;
    let (mut t, mut v) = (0.0, 0.0);
    loop {
        let k1 = f(v);
        let k2 = f(v + h / 2.0 * k1);
        let k3 = f(v + h / 2.0 * k2);
        let k4 = f(v + h * k3);
        let next = v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if next >= p.threshold_voltage {
            return t + h * (p.threshold_voltage - v) / (next - v);
        }
        v = next;
        t += h;
    }
}

fn physics() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_v, mut worst_ode) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let v0 = rng.random_range(0.5..1.5);
        let p = NeuronCircuitParams {
            supply_voltage: v0,
            threshold_voltage: v0 * rng.random_range(0.05..0.95),
            capacitance: log_uniform(&mut rng, 1e-14, 1e-11),
            ..NeuronCircuitParams::default()
        };
        let i = log_uniform(&mut rng, 1e-7, 1e-4);
        let t = ideal_spike_time(i, &p).map_err(|e| e.to_string())?;
        let v = capacitor_voltage(t, &p, i).map_err(|e| e.to_string())?;
        worst_v = worst_v.max((v - p.threshold_voltage).abs() / p.threshold_voltage);
        worst_ode = worst_ode.max((rk4_crossing(&p, i) - t).abs() / t);
    }
    ensure!(worst_v <= 1e-9, "voltage at spike time off by {worst_v:e}");
    ensure!(worst_ode <= 1e-3, "ODE oracle off by {worst_ode:e}");
    within(start.elapsed(), 30)?;
    Ok(format!("max rel. error {worst_v:.1e} (closed form), {worst_ode:.1e} (RK4)"))
}

// 3 -------------------------------------------------------------------------

/// Smallest C at which every included level latches on its own edge and
/// adjacent ideal crossings are at least a clock period apart, by bisection
/// on the built spike-time set.
fn sizing_oracle(levels: &[u32], p: &NeuronCircuitParams) -> f64 {
    let feasible = |c: f64| {
        build_spike_time_set(levels, &p.with_capacitance(c))
            .map(|s: SpikeTimeSet| s.is_phase_robust())
            .unwrap_or(false)
    };
    let (mut lo, mut hi) = (1e-16, 1e-9);
    assert!(!feasible(lo) && feasible(hi));
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn bell_histogram() -> MacHistogram {
    let counts = (0..=32u32)
        .map(|q| {
            let d = q as f64 - 16.0;
            (1e6 * (-d * d / 40.0).exp()).round() as u64 + 1
        })
        .collect();
    MacHistogram::from_counts(counts, "bell").unwrap()
}

fn sizing(pl: &Pipeline) -> Check {
    let start = Instant::now();
    let p = NeuronCircuitParams::default();
    let full: Vec<u32> = (1..=32).collect();
    let mid: Vec<u32> = (9..=22).collect();
    let c_full = size_capacitor(&full, &p).map_err(|e| e.to_string())?;
    let c_mid = size_capacitor(&mid, &p).map_err(|e| e.to_string())?;
    ensure!((c_full * 1e12 - 1.916).abs() < 5e-4, "C(1..32) = {c_full:e}");
    ensure!((c_mid * 1e12 - 0.892).abs() < 5e-4, "C(9..22) = {c_mid:e}");
    ensure!((c_full / c_mid - 2.147).abs() < 5e-4, "ratio {}", c_full / c_mid);
    for levels in [&full, &mid] {
        let oracle = sizing_oracle(levels, &p);
        let c = size_capacitor(levels, &p).unwrap();
        ensure!((c - oracle).abs() <= 1e-6 * oracle, "oracle {oracle:e} vs {c:e}");
    }
    for hist in [&pl.hist, &bell_histogram()] {
        let mut prev = f64::INFINITY;
        for k in (2..=33).rev() {
            let ls = select_top_k(hist, k).map_err(|e| e.to_string())?;
            let c = size_capacitor(&ls.included, &p).map_err(|e| e.to_string())?;
            ensure!(c <= prev, "{}: C rises from {prev:e} to {c:e} at k = {k}", hist.provenance);
            prev = c;
        }
    }
    within(start.elapsed(), 5)?;
    Ok(format!(
        "{:.3} pF / {:.3} pF, ratio {:.3}",
        c_full * 1e12,
        c_mid * 1e12,
        c_full / c_mid
    ))
}

// 4 -------------------------------------------------------------------------

fn pmap_fidelity() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = NeuronCircuitParams::default();
    let mut worst_slack = f64::INFINITY;
    for cfg_idx in 0..20 {
        let k = rng.random_range(2..=20u32);
        let lo = rng.random_range(1..=33 - k);
        let levels: Vec<u32> = (lo..lo + k).collect();
        let c = size_capacitor(&levels, &p).unwrap();
        let set = build_spike_time_set(&levels, &p.with_capacitance(c)).unwrap();
        let vm = VariationModel::new(rng.random_range(0.005..0.08), rng.random());
        let mc = extract_pmap(&set, &vm, 1000).map_err(|e| e.to_string())?;
        let an = analytic_pmap(&set, &vm).map_err(|e| e.to_string())?;
        ensure!(mc.max_row_sum_error() <= 1e-9, "config {cfg_idx}: MC row sums");
        ensure!(an.max_row_sum_error() <= 1e-9, "config {cfg_idx}: analytic row sums");
        for (i, (rm, ra)) in mc.p.iter().zip(&an.p).enumerate() {
            for (j, (&m, &a)) in rm.iter().zip(ra).enumerate() {
                let tol = 3.0 * (a * (1.0 - a) / 1000.0).sqrt() + 0.01;
                let slack = tol - (m - a).abs();
                ensure!(slack >= 0.0, "config {cfg_idx} entry ({i},{j}): MC {m} analytic {a}");
                worst_slack = worst_slack.min(slack);
            }
        }
        let zero = VariationModel::new(0.0, vm.seed);
        let id = ErrorMatrix::identity(set.levels(), set.ideal_times(), false);
        ensure!(extract_pmap(&set, &zero, 1000).unwrap() == id, "rho = 0 is not the identity");
    }
    within(start.elapsed(), 60)?;
    Ok(format!("20 configurations, smallest tolerance slack {worst_slack:.4}"))
}

// 5 -------------------------------------------------------------------------

fn capmin_v_correctness() -> Check {
    let start = Instant::now();
    let p = NeuronCircuitParams::default().with_capacitance(10e-12);
    let set = build_spike_time_set(&[10, 11, 12], &p).unwrap();
    let hand = ErrorMatrix {
        p: vec![vec![0.9, 0.08, 0.02], vec![0.2, 0.6, 0.2], vec![0.05, 0.15, 0.8]],
        levels: set.levels(),
        times_s: set.ideal_times(),
        padded: false,
    };
    let plan = capmin_v(&hand, &set, 1).map_err(|e| e.to_string())?;
    let want = [[0.9, 0.1], [0.05, 0.95]];
    for (i, (row, want_row)) in plan.merged_pmap.p.iter().zip(want).enumerate() {
        for (j, (&got, w)) in row.iter().zip(want_row).enumerate() {
            ensure!((got - w).abs() < 1e-15, "hand trace entry ({i},{j}) = {got}");
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut plans = 0;
    for m in 0..200 {
        let k = rng.random_range(2..=16usize);
        let levels: Vec<u32> = (1..=k as u32).collect();
        let c = size_capacitor(&levels, &NeuronCircuitParams::default()).unwrap();
        let set = build_spike_time_set(&levels, &NeuronCircuitParams::default().with_capacitance(c)).unwrap();
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let r: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let em = ErrorMatrix {
            p: rows,
            levels: set.levels(),
            times_s: set.ideal_times(),
            padded: false,
        };
        for phi in 0..k {
            let plan = capmin_v(&em, &set, phi).map_err(|e| e.to_string())?;
            let mut prev = em.min_diag();
            for step in &plan.steps {
                ensure!(step.min_diag_after >= prev, "matrix {m} phi {phi}: min diagonal fell");
                prev = step.min_diag_after;
            }
            for (row, orig) in plan.merged_pmap.p.iter().zip(&em.p) {
                let (a, b): (f64, f64) = (row.iter().sum(), orig.iter().sum());
                ensure!((a - b).abs() <= 1e-12, "matrix {m} phi {phi}: row sum {a} vs {b}");
            }
            plans += 1;
        }
    }
    within(start.elapsed(), 10)?;
    Ok(format!("hand trace exact, {plans} merge plans checked"))
}

// 6 -------------------------------------------------------------------------

fn end_to_end_identity(pl: &Pipeline) -> Check {
    let a = pl.ctx.cfg.circuit.array_size;
    let data = generate_synthetic(&{
        let mut spec = match &pl.ctx.cfg.data {
            capmin_cli::config::DataConfig::Synthetic { spec } => *spec,
            _ => unreachable!(),
        };
        spec.seed = derive_seed_tagged(pl.ctx.cfg.seeds.master, "data", 0);
        spec
    })
    .unwrap();
    let ls = select_top_k_from(&pl.hist, a as usize + 1, true).map_err(|e| e.to_string())?;
    let levels: Vec<u32> = ls.included.clone();
    let p = pl.ctx.cfg.circuit.params();
    let set = build_spike_time_set(&levels, &p.with_capacitance(size_capacitor(&levels, &p).unwrap())).unwrap();
    let id = ErrorMatrix::identity(set.levels(), set.ideal_times(), false);
    let padded = pad_pmap(&capmin_v(&id, &set, 0).unwrap(), &ls, a).map_err(|e| e.to_string())?;
    let noisy = SubMacConfig::with_transform(a, LevelTransform::ClipThenErrorModel(ls, padded), 99);
    let clean = SubMacConfig::identity(a);
    let acc_clean = evaluate(&pl.model, &data.test, &clean).unwrap();
    let acc_id = evaluate(&pl.model, &data.test, &noisy).unwrap();
    ensure!(acc_clean.to_bits() == acc_id.to_bits(), "{acc_id} vs clean {acc_clean}");
    ensure!(
        predict_all(&pl.model, &data.test, &clean).unwrap() == predict_all(&pl.model, &data.test, &noisy).unwrap(),
        "predictions differ"
    );
    Ok(format!("accuracy {acc_clean} both ways"))
}

// 7 -------------------------------------------------------------------------

fn accuracy_vs_k(pl: &Pipeline) -> Check {
    let start = Instant::now();
    let mut ctx = pl.ctx.clone();
    ctx.cfg.variation.rho = 0.0;
    ctx.cfg.variation.runs = 1;
    let rows = cmd_sweep_k(&ctx).map_err(|e| e.to_string())?;
    let a = ctx.cfg.circuit.array_size as usize;
    let base = rows.iter().find(|r| r.k == a + 1).ok_or("no full-set row")?.accuracy_clean;
    ensure!(base >= 0.90, "model accuracy {base} below 0.90");
    let (k_star, _) = capmin_cli::commands::k_star(&rows).ok_or("empty sweep")?;
    ensure!(k_star < a, "k* = {k_star} not below a = {a}");
    let at3 = rows.iter().find(|r| r.k == 3).ok_or("no k = 3 row")?.accuracy_clean;
    ensure!(base - at3 > 0.05, "drop at k = 3 only {:.4}", base - at3);
    within(start.elapsed() + pl.train_time, 300)?;
    Ok(format!(
        "baseline {base:.4}, flat to k* = {k_star}, k = 3 at {at3:.4} ({:.1} s incl. training)",
        (start.elapsed() + pl.train_time).as_secs_f64()
    ))
}

// 8 -------------------------------------------------------------------------

fn variation_effect(pl: &Pipeline) -> Check {
    let mut ctx = pl.ctx.clone();
    let k = ctx.cfg.capminv.start_k;
    ctx.cfg.capmin.k_range = [k, k];
    let mut chosen = None;
    for rho in [0.03, 0.05, 0.07, 0.1, 0.14, 0.2, 0.28] {
        ctx.cfg.variation.rho = rho;
        let row = cmd_sweep_k(&ctx).map_err(|e| e.to_string())?.remove(0);
        if row.accuracy_clean - row.accuracy_variation_mean >= 0.03 {
            chosen = Some((rho, row));
            break;
        }
    }
    let (rho, row) = chosen.ok_or("no rho in the scan costs plain CapMin 3 points")?;
    ctx.cfg.capminv.phi_range = [0, k - 1];
    cmd_pmap(&ctx).map_err(|e| e.to_string())?;
    let rows = cmd_capminv(&ctx).map_err(|e| e.to_string())?;
    ensure!(
        rows[0].accuracy_mean.to_bits() == row.accuracy_variation_mean.to_bits(),
        "phi = 0 accuracy {} differs from the sweep's {}",
        rows[0].accuracy_mean,
        row.accuracy_variation_mean
    );
    for w in rows.windows(2) {
        ensure!(w[1].min_diag >= w[0].min_diag, "min diagonal falls at phi = {}", w[1].phi);
    }
    ensure!(rows.last().unwrap().min_diag > rows[0].min_diag, "min diagonal never rises");
    let report = cmd_report(&ctx).map_err(|e| e.to_string())?;
    ensure!(report.capminv.len() == rows.len(), "report lacks the phi curve");
    let curve: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}", r.phi, r.accuracy_mean)).collect();
    Ok(format!(
        "rho {rho}: clean {:.3} -> {:.3}; min diag {:.3} -> {:.3}; acc by phi [{}]",
        row.accuracy_clean,
        row.accuracy_variation_mean,
        rows[0].min_diag,
        rows.last().unwrap().min_diag,
        curve.join(" ")
    ))
}

// 9 -------------------------------------------------------------------------

fn run_pipeline(dir: &Path, config: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_capmin"))
        .args(["--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap(), "all"])
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(status.success(), "pipeline exited with {status}");
    Ok(())
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"version": 1, "seeds": {"master": 7}, "variation": {"rho": 0.08},
            "capmin": {"k_range": [4, 20]}, "capminv": {"start_k": 12, "phi_range": [0, 6]},
            "train": {"epochs": 10}}"#,
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&a, &config)?;
    run_pipeline(&b, &config)?;
    let mut files: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    files.sort();
    ensure!(files.len() >= 8, "only {} CSV files", files.len());
    for name in &files {
        let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
        ensure!(x == y, "{} differs between runs", name.to_string_lossy());
    }
    let names: Vec<String> = files.iter().map(|n| n.to_string_lossy().into_owned()).collect();
    Ok(format!("byte-identical: {}", names.join(", ")))
}

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} {name}: PASS ({secs:.1} s) {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {id} {name}: FAIL ({secs:.1} s) {why}");
            }
        }
    };
    report(1, "tiling equivalence", &mut tiling);
    report(2, "spike-time physics", &mut physics);
    report(5, "CapMin-V correctness", &mut capmin_v_correctness);
    report(4, "P_map fidelity", &mut pmap_fidelity);
    let pl = pipeline();
    report(3, "capacitor sizing", &mut || sizing(&pl));
    report(6, "end-to-end identity", &mut || end_to_end_identity(&pl));
    report(7, "accuracy vs k shape", &mut || accuracy_vs_k(&pl));
    report(8, "variation and merging", &mut || variation_effect(&pl));
    report(9, "determinism", &mut determinism);
    println!(
        "acceptance: {} of 9 criteria passed in {:.1} s",
        9 - failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
