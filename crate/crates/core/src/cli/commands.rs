//! Subcommand bodies. Each returns the exit status on success; errors are
//! mapped to a status by the caller.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{self, AdaptRun, EvalRun, PretrainRun, SweepRun};
use super::{Common, EXIT_CHECK_FAILED};
use crate::adaptation::{evaluate, mean_std, AdaptConfig};
use crate::data::{load_csv, Domain, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::experiment::{
    adapt_metrics_csv, adapt_model, pretrain_metrics_csv, pretrain_seed, target_subset, write_text, Pretrained,
};
use crate::gradcheck::all_checks;
use crate::io::sig6;
use crate::nn::{checkpoint, Model};
use crate::oracle::{
    check_pinsker, kl_monte_carlo, random_gaussian, tv_distance_quadrature, tv_mean_shift_closed_form,
    Gaussian1D,
};
use crate::rng::RngState;

pub const CHECKPOINT_FILE: &str = "checkpoint.model";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const MONOTONE_FILE: &str = "monotone.csv";

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config::require_jobs(jobs)?)
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))
}

fn quick_iterations(n: usize, quick: bool) -> usize {
    if quick {
        (n / 10).max(1)
    } else {
        n
    }
}

fn seed_dir(out: &Path, seed: u64, multi: bool) -> PathBuf {
    if multi {
        out.join(format!("seed-{seed}"))
    } else {
        out.to_path_buf()
    }
}

fn load_split(train: &Path, test: &Path, domain: Domain) -> Result<Split> {
    Ok(Split {
        train: load_csv(train, domain)?,
        test: load_csv(test, domain)?,
    })
}

fn csv_pair(files: &config::DataFiles, section: &str) -> Result<Option<(PathBuf, PathBuf)>> {
    match (&files.train_csv, &files.test_csv) {
        (None, None) => Ok(None),
        (Some(a), Some(b)) => Ok(Some((a.clone(), b.clone()))),
        (Some(_), None) => Err(Error::config(format!("{section}.test_csv"), "required with train_csv")),
        (None, Some(_)) => Err(Error::config(format!("{section}.train_csv"), "required with test_csv")),
    }
}

pub fn pretrain(common: &Common) -> Result<i32> {
    let mut run: PretrainRun = config::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        run.out_dir = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        run.seeds = vec![seed];
    }
    if let Some(jobs) = common.jobs {
        run.jobs = jobs;
    }
    let out = config::require_out_dir(&run.out_dir)?;
    if run.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    run.pretrain.iterations = quick_iterations(run.pretrain.iterations, common.quick);
    let source = match csv_pair(&run.source, "source")? {
        Some((train, test)) => load_split(&train, &test, Domain::Source)?,
        None => run.benchmark.source()?,
    };
    let multi = run.seeds.len() > 1;
    let results: Vec<Result<Pretrained>> = pool(run.jobs)?.install(|| {
        run.seeds
            .par_iter()
            .map(|&seed| {
                let p = pretrain_seed(&source, &run.model, &run.pretrain, seed)?;
                let dir = seed_dir(&out, seed, multi);
                checkpoint::save(&p.model, &dir.join(CHECKPOINT_FILE))?;
                write_text(&dir.join(METRICS_FILE), &pretrain_metrics_csv(&p.log))?;
                Ok(p)
            })
            .collect()
    });
    let mut summary = String::new();
    let mut accs = Vec::new();
    for (seed, r) in run.seeds.iter().zip(results) {
        let p = r?;
        let _ = writeln!(summary, "seed {seed}: source test accuracy {}", sig6(p.source_acc));
        accs.push(p.source_acc);
    }
    let (m, s) = mean_std(&accs);
    let _ = writeln!(
        summary,
        "source test accuracy: {} ± {} over {} run(s)",
        sig6(m),
        sig6(s),
        accs.len()
    );
    write_text(&out.join(SUMMARY_FILE), &summary)?;
    print!("{summary}");
    Ok(0)
}

/// Checkpoint files named by a path: a file, a directory holding one
/// checkpoint, or a directory of `seed-<s>` subdirectories.
pub fn resolve_checkpoints(path: &Path, seed: Option<u64>) -> Result<Vec<(Option<u64>, PathBuf)>> {
    if path.is_file() {
        return Ok(vec![(None, path.to_path_buf())]);
    }
    if path.join(CHECKPOINT_FILE).is_file() {
        return Ok(vec![(None, path.join(CHECKPOINT_FILE))]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(s) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        let file = entry.path().join(CHECKPOINT_FILE);
        if file.is_file() && seed.is_none_or(|want| want == s) {
            found.push((Some(s), file));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::config(
            "checkpoint",
            format!("no checkpoint found under {}", path.display()),
        ));
    }
    Ok(found)
}

/// Outcome of adapting one checkpoint, as written to disk.
#[derive(Debug, Clone)]
struct AdaptOutcome {
    seed: u64,
    unadapted: f64,
    adapted: f64,
    initial_bnm: f64,
    final_bnm: f64,
}

fn target_split(benchmark: &crate::data::SyntheticBenchmark, files: &config::DataFiles) -> Result<Split> {
    match csv_pair(files, "target")? {
        Some((train, test)) => load_split(&train, &test, Domain::Target),
        None => benchmark.target(),
    }
}

fn check_compatible(model: &Model, data: &LabeledDataset, path: &Path) -> Result<()> {
    if model.input_dim() != data.dim() || model.classes() != data.classes {
        return Err(Error::config(
            "checkpoint",
            format!(
                "{} expects {} features / {} classes, target data has {} / {}",
                path.display(),
                model.input_dim(),
                model.classes(),
                data.dim(),
                data.classes
            ),
        ));
    }
    Ok(())
}

pub fn adapt(common: &Common, checkpoint_flag: Option<PathBuf>, lambda: Option<f64>) -> Result<i32> {
    let mut run: AdaptRun = config::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        run.out_dir = Some(out.clone());
    }
    if let Some(c) = checkpoint_flag {
        run.checkpoint = Some(c);
    }
    if let Some(l) = lambda {
        run.adapt.lambda = l;
    }
    if let Some(jobs) = common.jobs {
        run.jobs = jobs;
    }
    if common.seed.is_some() {
        run.seed = common.seed;
    }
    let out = config::require_out_dir(&run.out_dir)?;
    let ckpt = run
        .checkpoint
        .clone()
        .ok_or_else(|| Error::config("checkpoint", "no checkpoint; set `checkpoint` or pass --checkpoint"))?;
    run.adapt.iterations = quick_iterations(run.adapt.iterations, common.quick);
    run.adapt.validate()?;
    let checkpoints = resolve_checkpoints(&ckpt, if ckpt.is_dir() { run.seed } else { None })?;
    let target = target_split(&run.benchmark, &run.target)?;
    let multi = checkpoints.len() > 1 || checkpoints[0].0.is_some();
    let results: Vec<Result<AdaptOutcome>> = pool(run.jobs)?.install(|| {
        checkpoints
            .par_iter()
            .map(|(dir_seed, path)| {
                let mut model = checkpoint::load(path)?;
                check_compatible(&model, &target.test, path)?;
                if dir_seed.is_none() {
                    if let Some(seed) = run.seed {
                        model.seed = seed;
                    }
                }
                let a = adapt_model(&model, &target.train.features, &target.test, run.split_index, &run.adapt)?;
                let seed = dir_seed.unwrap_or(model.seed);
                let dir = seed_dir(&out, seed, multi);
                checkpoint::save(&a.model, &dir.join(CHECKPOINT_FILE))?;
                write_text(&dir.join(METRICS_FILE), &adapt_metrics_csv(&a.records))?;
                Ok(AdaptOutcome {
                    seed,
                    unadapted: a.unadapted_acc,
                    adapted: a.adapted_acc,
                    initial_bnm: a.initial_bnm,
                    final_bnm: a.final_bnm,
                })
            })
            .collect()
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut summary = String::new();
    for o in &outcomes {
        let _ = writeln!(
            summary,
            "seed {}: target accuracy {} -> {}, bnm loss {} -> {}",
            o.seed,
            sig6(o.unadapted),
            sig6(o.adapted),
            sig6(o.initial_bnm),
            sig6(o.final_bnm)
        );
    }
    let (um, us) = mean_std(&outcomes.iter().map(|o| o.unadapted).collect::<Vec<_>>());
    let (am, sd) = mean_std(&outcomes.iter().map(|o| o.adapted).collect::<Vec<_>>());
    let n = outcomes.len();
    let _ = writeln!(summary, "unadapted target accuracy: {} ± {} over {n} run(s)", sig6(um), sig6(us));
    let _ = writeln!(summary, "adapted target accuracy: {} ± {} over {n} run(s)", sig6(am), sig6(sd));
    write_text(&out.join(SUMMARY_FILE), &summary)?;
    print!("{summary}");
    Ok(0)
}

pub fn eval(common: &Common, checkpoint_flag: Option<PathBuf>) -> Result<i32> {
    let mut run: EvalRun = config::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        run.out_dir = Some(out.clone());
    }
    if let Some(c) = checkpoint_flag {
        run.checkpoint = Some(c);
    }
    let ckpt = run
        .checkpoint
        .clone()
        .ok_or_else(|| Error::config("checkpoint", "no checkpoint; set `checkpoint` or pass --checkpoint"))?;
    let test = match &run.test_csv {
        Some(p) => load_csv(p, run.domain)?,
        None => match run.domain {
            Domain::Source => run.benchmark.source()?.test,
            Domain::Target => run.benchmark.target()?.test,
        },
    };
    let mut csv = String::from("seed,accuracy\n");
    let mut text = String::new();
    for (dir_seed, path) in resolve_checkpoints(&ckpt, common.seed)? {
        let mut model = checkpoint::load(&path)?;
        check_compatible(&model, &test, &path)?;
        let acc = evaluate(&mut model, &test)?;
        let seed = dir_seed.unwrap_or(model.seed);
        let _ = writeln!(csv, "{seed},{}", sig6(acc));
        let _ = writeln!(text, "seed {seed}: {:?} test accuracy {}", run.domain, sig6(acc));
    }
    if let Some(out) = &run.out_dir {
        write_text(&out.join("eval.csv"), &csv)?;
    }
    print!("{text}");
    Ok(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Lambda,
    Size,
}

impl SweepKind {
    fn column(self) -> &'static str {
        match self {
            SweepKind::Lambda => "lambda",
            SweepKind::Size => "fraction",
        }
    }
}

#[derive(Debug, Clone)]
struct Cell {
    value: f64,
    seed: u64,
    acc: f64,
    monotone: Option<bool>,
    error: Option<String>,
}

fn run_cell(
    kind: SweepKind,
    value: f64,
    pretrained: &Pretrained,
    target: &Split,
    adapt_cfg: &AdaptConfig,
) -> Result<(f64, bool)> {
    let mut cfg = adapt_cfg.clone();
    let features = match kind {
        SweepKind::Lambda => {
            cfg.lambda = value;
            target.train.features.clone()
        }
        SweepKind::Size => target_subset(&target.train, value, pretrained.model.seed)?,
    };
    let a = adapt_model(&pretrained.model, &features, &target.test, None, &cfg)?;
    Ok((a.adapted_acc, a.monotone))
}

fn cell_file(out: &Path, kind: SweepKind, index: usize, seed: u64) -> PathBuf {
    out.join("cells").join(format!("{}-{index}-seed-{seed}.csv", kind.column()))
}

fn cell_csv(kind: SweepKind, cell: &Cell) -> String {
    format!(
        "{},seed,acc,monotone\n{},{},{},{}\n",
        kind.column(),
        cell.value,
        cell.seed,
        sig6(cell.acc),
        match cell.monotone {
            Some(true) => "1",
            Some(false) => "0",
            None => "nan",
        }
    )
}

fn validate_grid(kind: SweepKind, grid: &[f64]) -> Result<()> {
    let field = match kind {
        SweepKind::Lambda => "lambdas",
        SweepKind::Size => "fractions",
    };
    if grid.is_empty() {
        return Err(Error::config(field, "grid must not be empty"));
    }
    for &v in grid {
        let ok = match kind {
            SweepKind::Lambda => v.is_finite() && v >= 0.0,
            SweepKind::Size => v > 0.0 && v <= 1.0,
        };
        if !ok {
            return Err(Error::config(field, format!("invalid grid value {v}")));
        }
    }
    Ok(())
}

pub fn sweep(common: &Common, kind: SweepKind) -> Result<i32> {
    let mut run: SweepRun = config::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        run.out_dir = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        run.seeds = vec![seed];
    }
    if let Some(jobs) = common.jobs {
        run.jobs = jobs;
    }
    let out = config::require_out_dir(&run.out_dir)?;
    let grid = match kind {
        SweepKind::Lambda => run.lambdas.clone(),
        SweepKind::Size => run.fractions.clone(),
    };
    validate_grid(kind, &grid)?;
    if run.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    run.pretrain.iterations = quick_iterations(run.pretrain.iterations, common.quick);
    run.adapt.iterations = quick_iterations(run.adapt.iterations, common.quick);
    run.adapt.validate()?;
    let source = run.benchmark.source()?;
    let target = run.benchmark.target()?;
    let pool = pool(run.jobs)?;

    // One pretrained model per seed, shared by every cell of that seed.
    let pretrained: Vec<std::result::Result<Pretrained, String>> = pool.install(|| {
        run.seeds
            .par_iter()
            .map(|&seed| pretrain_seed(&source, &run.model, &run.pretrain, seed).map_err(|e| e.to_string()))
            .collect()
    });

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..run.seeds.len()).map(move |s| (g, s)))
        .collect();
    let cells: Vec<Result<Cell>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(g, s)| {
                let (value, seed) = (grid[g], run.seeds[s]);
                let outcome = match &pretrained[s] {
                    Ok(p) => run_cell(kind, value, p, &target, &run.adapt).map_err(|e| e.to_string()),
                    Err(e) => Err(format!("pretraining failed: {e}")),
                };
                let cell = match outcome {
                    Ok((acc, monotone)) => Cell {
                        value,
                        seed,
                        acc,
                        monotone: Some(monotone),
                        error: None,
                    },
                    Err(e) => Cell {
                        value,
                        seed,
                        acc: f64::NAN,
                        monotone: None,
                        error: Some(e),
                    },
                };
                write_text(&cell_file(&out, kind, g, seed), &cell_csv(kind, &cell))?;
                Ok(cell)
            })
            .collect()
    });
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;

    let col = kind.column();
    let mut sweep = format!("{col},seed,acc\n");
    let mut monotone = format!("{col},seed,monotone\n");
    let mut table = format!("{col},mean,std\n");
    let mut summary = String::new();
    for c in &cells {
        let _ = writeln!(sweep, "{},{},{}", c.value, c.seed, sig6(c.acc));
        let flag = match c.monotone {
            Some(true) => "1",
            Some(false) => "0",
            None => "nan",
        };
        let _ = writeln!(monotone, "{},{},{flag}", c.value, c.seed);
        if let Some(e) = &c.error {
            let _ = writeln!(summary, "{col}={} seed {}: FAILED: {e}", c.value, c.seed);
        }
    }
    for (g, &value) in grid.iter().enumerate() {
        let accs: Vec<f64> = cells[g * run.seeds.len()..(g + 1) * run.seeds.len()]
            .iter()
            .filter(|c| c.error.is_none())
            .map(|c| c.acc)
            .collect();
        let (m, s) = mean_std(&accs);
        let _ = writeln!(table, "{value},{},{}", sig6(m), sig6(s));
        let _ = writeln!(
            summary,
            "{col}={value}: adapted target accuracy {} ± {} over {} run(s)",
            sig6(m),
            sig6(s),
            accs.len()
        );
    }
    write_text(&out.join(SWEEP_FILE), &sweep)?;
    write_text(&out.join(SWEEP_SUMMARY_FILE), &table)?;
    write_text(&out.join(MONOTONE_FILE), &monotone)?;
    write_text(&out.join(SUMMARY_FILE), &summary)?;
    print!("{summary}");
    Ok(0)
}

/// Sample counts of the oracle self-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleRun {
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub gradient_instances: usize,
    pub kl_pairs: usize,
    pub kl_samples: usize,
    pub pinsker_pairs: usize,
}

impl Default for OracleRun {
    fn default() -> Self {
        OracleRun {
            out_dir: None,
            seed: 0,
            gradient_instances: 100,
            kl_pairs: 100,
            kl_samples: 100_000,
            pinsker_pairs: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn oracle_suite(run: &OracleRun) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    for r in all_checks(run.seed, run.gradient_instances)? {
        worst = worst.max(r.max_error);
        lines.push(CheckLine {
            name: format!("gradient/{}", r.name),
            passed: r.passed(),
            detail: format!(
                "{} instances, max rel err {:.3e} (tol {:.0e})",
                r.instances, r.max_error, r.tolerance
            ),
        });
    }
    lines.push(CheckLine {
        name: "gradient/max".into(),
        passed: lines.iter().all(|l| l.passed),
        detail: format!("max gradient-check error {worst:.3e}"),
    });

    let mut rng = RngState::with_stream(run.seed, 0x4b4c);
    let mut misses = 0;
    let mut worst_z: f64 = 0.0;
    for _ in 0..run.kl_pairs {
        let (p, q) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
        let exact = p.kl_closed_form(&q);
        let mc = kl_monte_carlo(&p, &q, run.kl_samples, &mut rng)?;
        worst_z = worst_z.max((mc.estimate - exact).abs() / mc.stderr);
        if !mc.within_sigmas(exact, 3.0) {
            misses += 1;
        }
    }
    lines.push(CheckLine {
        name: "kl/monte-carlo".into(),
        passed: misses == 0,
        detail: format!(
            "{} pairs, n={}, {misses} outside 3 stderr, worst {worst_z:.2} stderr",
            run.kl_pairs, run.kl_samples
        ),
    });

    let mut worst_tv: f64 = 0.0;
    let deltas: Vec<f64> = (0..=24).map(|k| k as f64 * 0.25).collect();
    for &d in &deltas {
        let p = Gaussian1D::new(0.0, 1.0)?;
        let q = Gaussian1D::new(d, 1.0)?;
        worst_tv = worst_tv.max((tv_distance_quadrature(&p, &q)? - tv_mean_shift_closed_form(d)).abs());
    }
    lines.push(CheckLine {
        name: "tv/closed-form".into(),
        passed: worst_tv <= 1e-4,
        detail: format!("{} shifts in [0, 6], max abs err {worst_tv:.3e}", deltas.len()),
    });

    let mut rng = RngState::with_stream(run.seed, 0x5049);
    let mut violations = 0;
    let mut asym: f64 = 0.0;
    for _ in 0..run.pinsker_pairs {
        let (p, q) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
        let r = check_pinsker(&p, &q)?;
        if !r.holds {
            violations += 1;
        }
        asym = asym.max((tv_distance_quadrature(&q, &p)? - r.tv).abs());
    }
    lines.push(CheckLine {
        name: "pinsker".into(),
        passed: violations == 0,
        detail: format!("{} pairs, {violations} violations", run.pinsker_pairs),
    });
    lines.push(CheckLine {
        name: "tv/symmetry".into(),
        passed: asym <= 1e-9,
        detail: format!("max |d(p,q) - d(q,p)| {asym:.1e}"),
    });
    Ok(lines)
}

pub fn oracle_check(common: &Common) -> Result<i32> {
    let mut run: OracleRun = config::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        run.out_dir = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if common.quick {
        run.gradient_instances = (run.gradient_instances / 2).max(1);
        run.kl_pairs = (run.kl_pairs / 2).max(1);
        run.kl_samples = (run.kl_samples / 2).max(crate::oracle::MIN_MC_SAMPLES);
        run.pinsker_pairs = (run.pinsker_pairs / 2).max(1);
    }
    let lines = oracle_suite(&run)?;
    let mut report = String::new();
    for l in &lines {
        let _ = writeln!(
            report,
            "{:<24} {}  {}",
            l.name,
            if l.passed { "PASS" } else { "FAIL" },
            l.detail
        );
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    if let Some(out) = &run.out_dir {
        write_text(&out.join("oracle_report.txt"), &report)?;
    }
    print!("{report}");
    if failed.is_empty() {
        println!("all oracle checks passed");
        Ok(0)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}
