//! One function per CLI verb. Every command reads its inputs from the output
//! directory, so they can run as separate processes in pipeline order:
//! train, profile, size, sweep-k, pmap, capminv, report.

use std::fs;
use std::path::PathBuf;

use capmin_core::bnn::{evaluate, BnnModel, LevelTransform, SubMacConfig};
use capmin_core::capmin_v::{capmin_v, pad_pmap};
use capmin_core::data::{binarize, generate_synthetic, load_idx, Dataset};
use capmin_core::levels::{collect_histogram, select_top_k_from, LevelSet, MacHistogram};
use capmin_core::neuron::{build_spike_time_set, energy_per_mac, size_capacitor, SpikeTimeSet};
use capmin_core::seed::derive_seed_tagged;
use capmin_core::train::train;
use capmin_core::variation::{analytic_pmap, extract_pmap, ErrorMatrix};
use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

use crate::config::{Config, DataConfig};
use crate::error::{CliError, CliResult};
use crate::output::{read_table, require, write_json, write_table, Format};
use crate::svg;

pub const MODEL_FILE: &str = "model.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const PMAP_FILE: &str = "pmap_matrix.json";
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Settings shared by all commands.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: Config,
    pub out: PathBuf,
    pub format: Format,
}

impl Context {
    pub fn new(cfg: Config, out: Option<PathBuf>, seed: Option<u64>, format: Format) -> Self {
        let mut cfg = cfg;
        if let Some(s) = seed {
            cfg.seeds.master = s;
        }
        let out = out.unwrap_or_else(|| cfg.paths.out.clone());
        Self { cfg, out, format }
    }

    fn master(&self) -> u64 {
        self.cfg.seeds.master
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRow {
    pub dataset: String,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub k: usize,
    pub q_first: u32,
    pub q_last: u32,
    pub capacitance_f: f64,
    pub grt_cycles: u64,
    pub grt_s: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepKRow {
    pub k: usize,
    pub q_first: u32,
    pub q_last: u32,
    pub capacitance_f: f64,
    pub latency_s: f64,
    pub energy_j: f64,
    pub accuracy_clean: f64,
    pub accuracy_variation_mean: f64,
    pub accuracy_variation_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmapRow {
    pub from_level: u32,
    pub to_level: u32,
    pub probability: f64,
    pub probability_analytic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapminvRow {
    pub phi: usize,
    pub k_v: usize,
    pub min_diag: f64,
    pub capacitance_f: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

fn datasets(ctx: &Context) -> CliResult<(Dataset, Dataset)> {
    match &ctx.cfg.data {
        DataConfig::Synthetic { spec } => {
            let mut spec = *spec;
            spec.seed = derive_seed_tagged(ctx.master(), "data", 0);
            let data = generate_synthetic(&spec)?;
            Ok((data.train, data.test))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            threshold,
        } => {
            for p in [train_images, train_labels, test_images, test_labels] {
                if !p.is_file() {
                    return Err(CliError::Config(format!("IDX file {} not found", p.display())));
                }
            }
            let train = binarize(&load_idx(train_images, train_labels)?, *threshold, "idx-train")?;
            let mut test = binarize(&load_idx(test_images, test_labels)?, *threshold, "idx-test")?;
            test.classes = test.classes.max(train.classes);
            Ok((train, test))
        }
    }
}

fn load_model(ctx: &Context) -> CliResult<BnnModel> {
    let path = ctx.path(MODEL_FILE);
    require(&path, "train")?;
    Ok(BnnModel::load(&path)?)
}

fn load_histogram(ctx: &Context) -> CliResult<MacHistogram> {
    let path = ctx.path(HISTOGRAM_FILE);
    require(&path, "profile")?;
    let file = fs::File::open(&path)?;
    let hist = MacHistogram::read_csv(std::io::BufReader::new(file), path.display().to_string())?;
    if hist.array_size != ctx.cfg.circuit.array_size {
        return Err(CliError::Runtime(format!(
            "histogram was profiled for array size {}, config says {}; rerun `capmin profile`",
            hist.array_size, ctx.cfg.circuit.array_size
        )));
    }
    Ok(hist)
}

fn level_set(ctx: &Context, hist: &MacHistogram, k: usize) -> CliResult<LevelSet> {
    Ok(select_top_k_from(hist, k, ctx.cfg.capmin.include_zero)?)
}

/// Minimal capacitor for the set and the resulting spike times.
fn sized_spike_times(ctx: &Context, ls: &LevelSet) -> CliResult<(f64, SpikeTimeSet)> {
    let params = ctx.cfg.circuit.params();
    let c = size_capacitor(&ls.included, &params)?;
    let set = build_spike_time_set(&ls.included, &params.with_capacitance(c))?;
    Ok((c, set))
}

fn pmap_for(ctx: &Context, set: &SpikeTimeSet, k: usize) -> CliResult<ErrorMatrix> {
    let vm = ctx.cfg.variation.model(derive_seed_tagged(ctx.master(), "pmap", k as u64));
    Ok(extract_pmap(set, &vm, ctx.cfg.variation.n_mc)?)
}

fn clean_accuracy(ctx: &Context, model: &BnnModel, test: &Dataset, ls: &LevelSet) -> CliResult<f64> {
    let a = ctx.cfg.circuit.array_size;
    let cfg = SubMacConfig::with_transform(a, LevelTransform::Clip(ls.clone()), 0);
    Ok(evaluate(model, test, &cfg)?)
}

/// Accuracy under an error model, once per configured run.
fn variation_accuracies(
    ctx: &Context,
    model: &BnnModel,
    test: &Dataset,
    ls: &LevelSet,
    padded: &ErrorMatrix,
) -> CliResult<Vec<f64>> {
    let a = ctx.cfg.circuit.array_size;
    (0..ctx.cfg.variation.runs)
        .map(|run| {
            let seed = derive_seed_tagged(ctx.master(), "eval", run as u64);
            let transform = LevelTransform::ClipThenErrorModel(ls.clone(), padded.clone());
            Ok(evaluate(model, test, &SubMacConfig::with_transform(a, transform, seed))?)
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = values.mean();
    let std = if values.len() < 2 { 0.0 } else { values.std_dev() };
    (mean, std)
}

pub fn cmd_train(ctx: &Context) -> CliResult<Vec<EpochRow>> {
    let (train_set, test_set) = datasets(ctx)?;
    let mut tc = ctx.cfg.train.clone();
    tc.seed = derive_seed_tagged(ctx.master(), "train", 0);
    let outcome = train(&train_set, &tc)?;
    fs::create_dir_all(&ctx.out)?;
    outcome.model.save(&ctx.path(MODEL_FILE), true)?;
    let identity = SubMacConfig::identity(ctx.cfg.circuit.array_size);
    log::info!(
        "trained: train accuracy {:.4}, test accuracy {:.4}",
        evaluate(&outcome.model, &train_set, &identity)?,
        evaluate(&outcome.model, &test_set, &identity)?
    );
    let rows: Vec<EpochRow> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| EpochRow { epoch, loss })
        .collect();
    write_table(&ctx.out, "train", &rows, ctx.format)?;
    Ok(rows)
}

pub fn cmd_evaluate(ctx: &Context) -> CliResult<EvaluateRow> {
    let model = load_model(ctx)?;
    let (_, test) = datasets(ctx)?;
    let accuracy = evaluate(&model, &test, &SubMacConfig::identity(ctx.cfg.circuit.array_size))?;
    let row = EvaluateRow {
        dataset: test.name.clone(),
        samples: test.len(),
        accuracy,
    };
    write_table(&ctx.out, "evaluate", std::slice::from_ref(&row), ctx.format)?;
    Ok(row)
}

pub fn cmd_profile(ctx: &Context) -> CliResult<MacHistogram> {
    let model = load_model(ctx)?;
    let (train_set, _) = datasets(ctx)?;
    let hist = collect_histogram(&model, &train_set, ctx.cfg.circuit.array_size)?;
    let mut bytes = Vec::new();
    hist.write_csv(&mut bytes)?;
    crate::output::write_atomic(&ctx.path(HISTOGRAM_FILE), &bytes)?;
    log::info!("profiled {} sub-MACs, mode {}", hist.total(), hist.mode());
    Ok(hist)
}

pub fn cmd_size(ctx: &Context) -> CliResult<SizeRow> {
    let hist = load_histogram(ctx)?;
    let ls = level_set(ctx, &hist, ctx.cfg.capmin.k)?;
    let (c, set) = sized_spike_times(ctx, &ls)?;
    let row = SizeRow {
        k: ls.k,
        q_first: ls.q_first,
        q_last: ls.q_last,
        capacitance_f: c,
        grt_cycles: set.grt_cycles,
        grt_s: set.grt(),
        energy_j: energy_per_mac(c, ctx.cfg.circuit.vth),
    };
    write_table(&ctx.out, "size", std::slice::from_ref(&row), ctx.format)?;
    Ok(row)
}

pub fn cmd_sweep_k(ctx: &Context) -> CliResult<Vec<SweepKRow>> {
    let model = load_model(ctx)?;
    let hist = load_histogram(ctx)?;
    let (_, test) = datasets(ctx)?;
    let a = ctx.cfg.circuit.array_size;
    let [lo, hi] = ctx.cfg.capmin.k_range;
    let mut rows = Vec::with_capacity(hi - lo + 1);
    for k in (lo..=hi).rev() {
        let ls = level_set(ctx, &hist, k)?;
        let (c, set) = sized_spike_times(ctx, &ls)?;
        let accuracy_clean = clean_accuracy(ctx, &model, &test, &ls)?;
        let pm = pmap_for(ctx, &set, k)?;
        let padded = pad_pmap(&capmin_v(&pm, &set, 0)?, &ls, a)?;
        let (mean, std) = mean_std(&variation_accuracies(ctx, &model, &test, &ls, &padded)?);
        log::info!("k = {k}: C = {c:.4e} F, clean {accuracy_clean:.4}, variation {mean:.4}");
        rows.push(SweepKRow {
            k,
            q_first: ls.q_first,
            q_last: ls.q_last,
            capacitance_f: c,
            latency_s: set.grt(),
            energy_j: energy_per_mac(c, ctx.cfg.circuit.vth),
            accuracy_clean,
            accuracy_variation_mean: mean,
            accuracy_variation_std: std,
        });
    }
    write_table(&ctx.out, "sweep_k", &rows, ctx.format)?;
    Ok(rows)
}

pub fn cmd_pmap(ctx: &Context) -> CliResult<ErrorMatrix> {
    let hist = load_histogram(ctx)?;
    let k = ctx.cfg.capminv.start_k;
    let ls = level_set(ctx, &hist, k)?;
    let (_, set) = sized_spike_times(ctx, &ls)?;
    let pm = pmap_for(ctx, &set, k)?;
    let an = analytic_pmap(&set, &ctx.cfg.variation.model(0))?;
    write_json(&ctx.path(PMAP_FILE), &pm)?;
    let mut rows = Vec::with_capacity(pm.dim() * pm.dim());
    for (i, from) in pm.levels.iter().enumerate() {
        for (j, to) in pm.levels.iter().enumerate() {
            rows.push(PmapRow {
                from_level: *from,
                to_level: *to,
                probability: pm.p[i][j],
                probability_analytic: an.p[i][j],
            });
        }
    }
    write_table(&ctx.out, "pmap", &rows, ctx.format)?;
    log::info!("P_map over {} spike times, min diagonal {:.4}", pm.dim(), pm.min_diag());
    Ok(pm)
}

pub fn cmd_capminv(ctx: &Context) -> CliResult<Vec<CapminvRow>> {
    let model = load_model(ctx)?;
    let hist = load_histogram(ctx)?;
    let pmap_path = ctx.path(PMAP_FILE);
    require(&pmap_path, "pmap")?;
    let pm: ErrorMatrix = serde_json::from_slice(&fs::read(&pmap_path)?)?;
    let (_, test) = datasets(ctx)?;
    let k = ctx.cfg.capminv.start_k;
    let ls = level_set(ctx, &hist, k)?;
    let (c, set) = sized_spike_times(ctx, &ls)?;
    if pm.levels != set.levels() {
        return Err(CliError::Runtime(format!(
            "{} does not match the level set at k = {k}; rerun `capmin pmap`",
            pmap_path.display()
        )));
    }
    let [lo, hi] = ctx.cfg.capminv.phi_range;
    let hi = hi.min(set.len() - 1);
    let mut rows = Vec::new();
    for phi in lo..=hi {
        let plan = capmin_v(&pm, &set, phi)?;
        let padded = pad_pmap(&plan, &ls, ctx.cfg.circuit.array_size)?;
        let (mean, std) = mean_std(&variation_accuracies(ctx, &model, &test, &ls, &padded)?);
        log::info!("phi = {phi}: k_V = {}, accuracy {mean:.4}", plan.k_v);
        rows.push(CapminvRow {
            phi,
            k_v: plan.k_v,
            min_diag: plan.merged_pmap.min_diag(),
            capacitance_f: c,
            accuracy_mean: mean,
            accuracy_std: std,
        });
    }
    write_table(&ctx.out, "capminv", &rows, ctx.format)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub x_name: String,
    pub x: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub capacitance_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub master_seed: u64,
    pub rho: f64,
    pub baseline_accuracy: f64,
    /// Smallest k whose clean accuracy, and that of every larger k, stays
    /// within one point of the largest swept k.
    pub k_star: usize,
    pub capacitance_at_k_star_f: f64,
    pub size: Option<SizeRow>,
    pub sweep_k: Vec<SweepKRow>,
    pub capminv: Vec<CapminvRow>,
}

/// `k*` for rows sorted by descending k.
pub fn k_star(rows: &[SweepKRow]) -> Option<(usize, f64)> {
    let baseline = rows.first()?.accuracy_clean;
    let mut star = rows.first()?;
    for row in rows {
        if row.accuracy_clean < baseline - 0.01 {
            break;
        }
        star = row;
    }
    Some((star.k, star.capacitance_f))
}

pub fn cmd_report(ctx: &Context) -> CliResult<Report> {
    let mut sweep: Vec<SweepKRow> = read_table(&ctx.out, "sweep_k", "sweep-k", ctx.format)?;
    let capminv: Vec<CapminvRow> = read_table(&ctx.out, "capminv", "capminv", ctx.format)?;
    sweep.sort_by_key(|r| std::cmp::Reverse(r.k));
    let size: Option<SizeRow> = read_table(&ctx.out, "size", "size", ctx.format).ok().and_then(|mut v| v.pop());
    let (k_star, c_star) = k_star(&sweep).ok_or_else(|| CliError::Runtime("sweep_k table is empty".into()))?;
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        master_seed: ctx.master(),
        rho: ctx.cfg.variation.rho,
        baseline_accuracy: sweep[0].accuracy_clean,
        k_star,
        capacitance_at_k_star_f: c_star,
        size,
        sweep_k: sweep.clone(),
        capminv: capminv.clone(),
    };
    write_json(&ctx.path("report.json"), &report)?;

    let mut rows = Vec::new();
    for r in &sweep {
        rows.push(ReportRow {
            experiment: "capmin_clean".into(),
            x_name: "k".into(),
            x: r.k,
            accuracy_mean: r.accuracy_clean,
            accuracy_std: 0.0,
            capacitance_f: r.capacitance_f,
        });
    }
    for r in &sweep {
        rows.push(ReportRow {
            experiment: "capmin_variation".into(),
            x_name: "k".into(),
            x: r.k,
            accuracy_mean: r.accuracy_variation_mean,
            accuracy_std: r.accuracy_variation_std,
            capacitance_f: r.capacitance_f,
        });
    }
    for r in &capminv {
        rows.push(ReportRow {
            experiment: "capminv".into(),
            x_name: "phi".into(),
            x: r.phi,
            accuracy_mean: r.accuracy_mean,
            accuracy_std: r.accuracy_std,
            capacitance_f: r.capacitance_f,
        });
    }
    crate::output::write_atomic(&ctx.path("report.csv"), &crate::output::csv_bytes(&rows)?)?;

    if ctx.cfg.report.svg {
        let pts = |f: fn(&SweepKRow) -> f64| sweep.iter().map(|r| (r.k as f64, f(r))).collect();
        let k_plot = svg::line_chart(
            "Accuracy vs. number of spike times",
            "k",
            "test accuracy",
            &[
                ("clean", pts(|r| r.accuracy_clean)),
                ("with variation", pts(|r| r.accuracy_variation_mean)),
            ],
        );
        crate::output::write_atomic(&ctx.path("report_k.svg"), k_plot.as_bytes())?;
        let phi_plot = svg::line_chart(
            "Accuracy vs. merged spike times",
            "phi",
            "test accuracy",
            &[("mean of runs", capminv.iter().map(|r| (r.phi as f64, r.accuracy_mean)).collect())],
        );
        crate::output::write_atomic(&ctx.path("report_phi.svg"), phi_plot.as_bytes())?;
    }
    Ok(report)
}

/// Runs every stage in order.
pub fn cmd_all(ctx: &Context) -> CliResult<Report> {
    cmd_train(ctx)?;
    cmd_evaluate(ctx)?;
    cmd_profile(ctx)?;
    cmd_size(ctx)?;
    cmd_sweep_k(ctx)?;
    cmd_pmap(ctx)?;
    cmd_capminv(ctx)?;
    cmd_report(ctx)
}
