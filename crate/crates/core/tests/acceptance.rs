//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Thresholds marked "pinned" were measured once on the finished
//! implementation at the fixed seeds below and then frozen with margin.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use bnmatch::adaptation::{adapt, mean_std, split_and_freeze, AdaptConfig, PretrainConfig};
use bnmatch::data::{save_csv, SyntheticBenchmark};
use bnmatch::experiment::{adapt_model, pretrain_seed, target_subset, Adapted, Pretrained};
use bnmatch::gradcheck::all_checks;
use bnmatch::losses::{bnm_loss, im_loss, joint_loss, StatPair};
use bnmatch::nn::{checkpoint, Topology};
use bnmatch::oracle::{
    check_pinsker, kl_monte_carlo, random_gaussian, tv_distance_quadrature, tv_mean_shift_closed_form,
    Gaussian1D,
};
use bnmatch::rng::RngState;
use bnmatch::Tensor;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

// Pinned from the reference run (source 1.000, unadapted 0.391, adapted
// 1.000, worst BNM ratio 0.0028, λ spread 0.0013, size gap 0.000).
const PINNED_SHIFT_GAP: f64 = 0.30;
const PINNED_ADAPTED_MEAN: f64 = 0.95;
const PINNED_BNM_RATIO: f64 = 0.02;
const PINNED_SIZE_GAP: f64 = 0.02;

// The pinned bounds must never be looser than the required ones.
const _: () = assert!(PINNED_BNM_RATIO <= 0.2 && PINNED_SIZE_GAP <= 0.05);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    o.detail = format!("{}; {:.1}s", o.detail, took.as_secs_f64());
    if let Some(limit) = limit {
        if took > limit {
            o.passed = false;
            o.detail = format!("{} exceeds {}s budget", o.detail, limit.as_secs());
        }
    }
    o
}

fn gradient_fidelity() -> Outcome {
    let reports = all_checks(0, 100).expect("gradient checks run");
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e} > {:.0e}", r.name, r.max_error, r.tolerance))
        .collect();
    let worst = reports
        .iter()
        .map(|r| format!("{} {:.1e}", r.name, r.max_error))
        .collect::<Vec<_>>()
        .join(", ");
    if failed.is_empty() {
        outcome(true, format!("100 instances each: {worst}"))
    } else {
        outcome(false, format!("failed: {}", failed.join("; ")))
    }
}

fn loss_identities() -> Outcome {
    let mut rng = RngState::new(11);
    let mut problems = Vec::new();
    for i in 0..1000 {
        let c = 1 + rng.below(8);
        let m = Tensor::vector((0..c).map(|_| rng.uniform_range(-3.0, 3.0)).collect());
        let v = Tensor::vector((0..c).map(|_| rng.uniform_range(0.05, 5.0)).collect());
        let same = bnm_loss(StatPair {
            batch_mean: &m,
            batch_var: &v,
            stored_mean: &m,
            stored_var: &v,
        })
        .unwrap();
        // perturb one channel in one statistic
        let ch = rng.below(c);
        let (mut m2, mut v2) = (m.clone(), v.clone());
        if i % 2 == 0 {
            m2.data_mut()[ch] += rng.uniform_range(1e-3, 1.0);
        } else {
            v2.data_mut()[ch] *= rng.uniform_range(1.01, 2.0);
        }
        let diff = bnm_loss(StatPair {
            batch_mean: &m2,
            batch_var: &v2,
            stored_mean: &m,
            stored_var: &v,
        })
        .unwrap();
        if same != 0.0 || diff.is_nan() || diff <= 0.0 {
            problems.push(format!("stat vector {i}: same {same}, perturbed {diff}"));
        }
    }

    let mut worst_onehot: f64 = 0.0;
    for k in 2..=10usize {
        for reps in 1..=3 {
            let rows: Vec<Vec<f64>> = (0..k * reps)
                .map(|i| (0..k).map(|j| if j == (i * 7) % k { 1.0 } else { 0.0 }).collect())
                .collect();
            let covers = (0..k).all(|c| rows.iter().filter(|r| r[c] == 1.0).count() == reps);
            if !covers {
                continue;
            }
            let im = im_loss(&Tensor::from_rows(&rows).unwrap()).unwrap();
            worst_onehot = worst_onehot.max((im + (k as f64).ln()).abs());
            let uniform = Tensor::filled(&[k * reps, k], 1.0 / k as f64);
            let u = im_loss(&uniform).unwrap();
            if u.abs() > 1e-15 {
                problems.push(format!("uniform K={k}: {u}"));
            }
        }
    }
    if worst_onehot > 1e-15 {
        problems.push(format!("one-hot misses -ln K by {worst_onehot:e}"));
    }

    let mut bit_mismatch = 0;
    for _ in 0..200 {
        let (b, k, c) = (2 + rng.below(10), 2 + rng.below(5), 1 + rng.below(4));
        let mut data: Vec<f64> = (0..b * k).map(|_| rng.uniform_range(0.01, 1.0)).collect();
        for r in data.chunks_mut(k) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= s);
        }
        let probs = Tensor::matrix(b, k, data).unwrap();
        let m = Tensor::vector((0..c).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let v = Tensor::vector((0..c).map(|_| rng.uniform_range(0.1, 2.0)).collect());
        let sm = Tensor::vector((0..c).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let sv = Tensor::vector((0..c).map(|_| rng.uniform_range(0.1, 2.0)).collect());
        let stats = StatPair {
            batch_mean: &m,
            batch_var: &v,
            stored_mean: &sm,
            stored_var: &sv,
        };
        let joint = joint_loss(&probs, stats, 0.0).unwrap().total;
        if joint.to_bits() != im_loss(&probs).unwrap().to_bits() {
            bit_mismatch += 1;
        }
    }
    if bit_mismatch > 0 {
        problems.push(format!("{bit_mismatch} joint(λ=0) values differ from im_loss"));
    }
    if problems.is_empty() {
        outcome(
            true,
            format!(
                "1000 stat vectors, one-hot |im + ln K| <= {worst_onehot:.1e}, uniform 0, 200 bit-exact λ=0 joints"
            ),
        )
    } else {
        outcome(false, problems.join("; "))
    }
}

fn oracle_agreement() -> Outcome {
    let mut rng = RngState::with_stream(0, 0x4b4c);
    let mut misses = 0;
    let mut worst_z: f64 = 0.0;
    for _ in 0..100 {
        let (p, q) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
        let exact = p.kl_closed_form(&q);
        let mc = kl_monte_carlo(&p, &q, 100_000, &mut rng).unwrap();
        worst_z = worst_z.max((mc.estimate - exact).abs() / mc.stderr);
        if !mc.within_sigmas(exact, 3.0) {
            misses += 1;
        }
    }
    let mut worst_tv: f64 = 0.0;
    let unit = Gaussian1D::new(0.0, 1.0).unwrap();
    for k in 0..=60 {
        let d = k as f64 * 0.1;
        let q = Gaussian1D::new(d, 1.0).unwrap();
        let err = (tv_distance_quadrature(&unit, &q).unwrap() - tv_mean_shift_closed_form(d)).abs();
        worst_tv = worst_tv.max(err);
    }
    let mut rng = RngState::with_stream(0, 0x5049);
    let violations = (0..1000)
        .filter(|_| {
            let (p, q) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
            !check_pinsker(&p, &q).unwrap().holds
        })
        .count();
    outcome(
        misses == 0 && worst_tv <= 1e-4 && violations == 0,
        format!(
            "KL: {misses}/100 beyond 3 stderr (worst {worst_z:.2}); TV max err {worst_tv:.1e} on 61 shifts; Pinsker {violations}/1000 violations"
        ),
    )
}

struct Runs {
    pretrained: Vec<Pretrained>,
    adapted: Vec<Adapted>,
}

fn standard_runs(bench: &SyntheticBenchmark) -> Runs {
    let source = bench.source().unwrap();
    let target = bench.target().unwrap();
    let pretrained: Vec<Pretrained> = SEEDS
        .par_iter()
        .map(|&s| pretrain_seed(&source, &Topology::default(), &PretrainConfig::default(), s).unwrap())
        .collect();
    let adapted: Vec<Adapted> = pretrained
        .par_iter()
        .map(|p| adapt_model(&p.model, &target.train.features, &target.test, None, &AdaptConfig::default()).unwrap())
        .collect();
    Runs { pretrained, adapted }
}

fn end_to_end(runs: &Runs) -> Outcome {
    let src: Vec<f64> = runs.pretrained.iter().map(|p| p.source_acc).collect();
    let before: Vec<f64> = runs.adapted.iter().map(|a| a.unadapted_acc).collect();
    let after: Vec<f64> = runs.adapted.iter().map(|a| a.adapted_acc).collect();
    let ratios: Vec<f64> = runs.adapted.iter().map(|a| a.final_bnm / a.initial_bnm).collect();
    let (sm, _) = mean_std(&src);
    let (bm, bs) = mean_std(&before);
    let (am, as_) = mean_std(&after);
    let worst_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    let shift_real = sm - bm >= PINNED_SHIFT_GAP;
    let gain = am - bm >= 0.10 && am >= PINNED_ADAPTED_MEAN;
    let bnm = worst_ratio < PINNED_BNM_RATIO;
    outcome(
        shift_real && gain && bnm,
        format!(
            "source {sm:.3}, unadapted target {bm:.3}±{bs:.3}, adapted {am:.3}±{as_:.3} (gain {:.1} pts), worst final/initial BNM {worst_ratio:.4}",
            100.0 * (am - bm)
        ),
    )
}

fn lambda_stability(bench: &SyntheticBenchmark, runs: &Runs) -> Outcome {
    let target = bench.target().unwrap();
    let lambdas = [0.2, 1.0, 10.0, 50.0];
    let means: Vec<f64> = lambdas
        .iter()
        .map(|&l| {
            let cfg = AdaptConfig {
                lambda: l,
                ..Default::default()
            };
            let accs: Vec<f64> = runs
                .pretrained
                .par_iter()
                .map(|p| {
                    adapt_model(&p.model, &target.train.features, &target.test, None, &cfg)
                        .unwrap()
                        .adapted_acc
                })
                .collect();
            mean_std(&accs).0
        })
        .collect();
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    let cells = lambdas
        .iter()
        .zip(&means)
        .map(|(l, m)| format!("λ={l}: {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(spread <= 0.05, format!("{cells}; spread {:.1} pts", 100.0 * spread))
}

fn size_robustness(bench: &SyntheticBenchmark, runs: &Runs) -> Outcome {
    let target = bench.target().unwrap();
    let at = |fraction: f64| -> f64 {
        let accs: Vec<f64> = runs
            .pretrained
            .par_iter()
            .map(|p| {
                let x = target_subset(&target.train, fraction, p.model.seed).unwrap();
                adapt_model(&p.model, &x, &target.test, None, &AdaptConfig::default())
                    .unwrap()
                    .adapted_acc
            })
            .collect();
        mean_std(&accs).0
    };
    let (tenth, full) = (at(0.1), at(1.0));
    let gap = full - tenth;
    outcome(
        gap <= PINNED_SIZE_GAP,
        format!("fraction 0.1: {tenth:.3}, fraction 1.0: {full:.3}, degradation {:.1} pts", 100.0 * gap),
    )
}

fn monotone(runs: &Runs) -> Outcome {
    let flags: Vec<bool> = runs.adapted.iter().map(|a| a.monotone).collect();
    let logged = runs.adapted[0].records.len();
    outcome(
        flags.iter().all(|&f| f),
        format!("5-point moving average over the last 80% of {logged} logged points, per seed: {flags:?}"),
    )
}

fn bnmatch(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_bnmatch"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap_or_default()).to_vec()
}

fn contracts(bench: &SyntheticBenchmark, runs: &Runs) -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let dir = tmp.path();
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let mut problems = Vec::new();

    // (i) the source files can vanish between pretraining and adaptation
    let source = bench.source().unwrap();
    save_csv(&source.train, &dir.join("src_train.csv")).unwrap();
    save_csv(&source.test, &dir.join("src_test.csv")).unwrap();
    fs::write(
        dir.join("pre.json"),
        format!(
            r#"{{"pretrain": {{"iterations": 300}}, "source": {{"train_csv": "{}", "test_csv": "{}"}}}}"#,
            p("src_train.csv"),
            p("src_test.csv")
        ),
    )
    .unwrap();
    fs::write(dir.join("ad.json"), r#"{"adapt": {"iterations": 500}}"#).unwrap();
    let ok = bnmatch(&["pretrain", "--config", &p("pre.json"), "--out", &p("pre")])
        && bnmatch(&["adapt", "--config", &p("ad.json"), "--checkpoint", &p("pre"), "--out", &p("with")]);
    fs::remove_file(dir.join("src_train.csv")).unwrap();
    fs::remove_file(dir.join("src_test.csv")).unwrap();
    let ok = ok && bnmatch(&["adapt", "--config", &p("ad.json"), "--checkpoint", &p("pre"), "--out", &p("without")]);
    if !ok {
        problems.push("a command failed".to_string());
    }
    for f in ["checkpoint.model", "metrics.csv"] {
        if digest(&dir.join("with").join(f)) != digest(&dir.join("without").join(f)) {
            problems.push(format!("{f} changed after deleting source data"));
        }
    }

    // (ii) the classifier is byte-identical after a full adaptation run
    let mut frozen_ok = 0;
    for (p, a) in runs.pretrained.iter().zip(&runs.adapted) {
        let before: Vec<u64> = p.model.classifier_values().iter().map(|v| v.to_bits()).collect();
        let after: Vec<u64> = a.model.classifier_values().iter().map(|v| v.to_bits()).collect();
        if before == after {
            frozen_ok += 1;
        }
    }
    if frozen_ok != runs.adapted.len() {
        problems.push(format!("classifier changed in {} runs", runs.adapted.len() - frozen_ok));
    }

    // (iii) the same run without any target labels
    let target = bench.target().unwrap();
    let mut bare = runs.pretrained[0].model.clone();
    let split = bare.last_bn_index().unwrap();
    let cfg = AdaptConfig::default();
    let stored = split_and_freeze(&mut bare, split, cfg.classifier_bn).unwrap();
    adapt(&mut bare, &target.train.features, None, &stored, &cfg).unwrap();
    if checkpoint::to_string(&bare) != checkpoint::to_string(&runs.adapted[0].model) {
        problems.push("stripping target labels changed the checkpoint".into());
    }
    if problems.is_empty() {
        outcome(
            true,
            format!(
                "source-deleted adapt hash-equal; classifier bit-identical in {frozen_ok}/5 runs; label-free checkpoint identical"
            ),
        )
    } else {
        outcome(false, problems.join("; "))
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let dir = tmp.path();
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    fs::write(dir.join("pre.json"), r#"{"seeds": [0, 1], "pretrain": {"iterations": 300}}"#).unwrap();
    fs::write(dir.join("ad.json"), r#"{"adapt": {"iterations": 300}}"#).unwrap();
    fs::write(
        dir.join("sw.json"),
        r#"{"seeds": [0, 1], "pretrain": {"iterations": 200}, "adapt": {"iterations": 200}, "lambdas": [0.2, 10], "fractions": [0.25, 1.0]}"#,
    )
    .unwrap();
    let mut files = Vec::new();
    let mut ok = true;
    for run in ["a", "b"] {
        let pre = p(&format!("{run}/pre"));
        ok &= bnmatch(&["pretrain", "--config", &p("pre.json"), "--seed", "5", "--out", &pre]);
        ok &= bnmatch(&["adapt", "--config", &p("ad.json"), "--checkpoint", &pre, "--out", &p(&format!("{run}/ad"))]);
        ok &= bnmatch(&["sweep-lambda", "--config", &p("sw.json"), "--jobs", "3", "--out", &p(&format!("{run}/swl"))]);
        ok &= bnmatch(&["sweep-size", "--config", &p("sw.json"), "--out", &p(&format!("{run}/sws"))]);
    }
    for rel in [
        "pre/checkpoint.model",
        "pre/metrics.csv",
        "ad/checkpoint.model",
        "ad/metrics.csv",
        "swl/sweep.csv",
        "swl/sweep_summary.csv",
        "sws/sweep.csv",
        "sws/monotone.csv",
    ] {
        files.push((rel, digest(&dir.join("a").join(rel)) == digest(&dir.join("b").join(rel))));
    }
    let differing: Vec<&str> = files.iter().filter(|(_, same)| !same).map(|(f, _)| *f).collect();
    outcome(
        ok && differing.is_empty(),
        if ok {
            format!("{} files hash-equal across repeated pretrain/adapt/sweep runs; differing: {differing:?}", files.len())
        } else {
            "a command failed".into()
        },
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n} ({name}): {}  {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failures += 1;
        }
    };
    report(1, "gradient fidelity", timed(Some(Duration::from_secs(10)), gradient_fidelity));
    report(2, "loss identities", timed(None, loss_identities));
    report(3, "oracle agreement", timed(Some(Duration::from_secs(60)), oracle_agreement));

    let bench = SyntheticBenchmark::default();
    let start = Instant::now();
    let runs = standard_runs(&bench);
    let e2e = end_to_end(&runs);
    let took = start.elapsed();
    report(
        4,
        "end-to-end adaptation",
        Outcome {
            passed: e2e.passed && took < Duration::from_secs(300),
            detail: format!("{}; {:.1}s", e2e.detail, took.as_secs_f64()),
        },
    );
    report(5, "lambda stability", timed(None, || lambda_stability(&bench, &runs)));
    report(6, "size robustness", timed(None, || size_robustness(&bench, &runs)));
    report(7, "monotone improvement", monotone(&runs));
    report(8, "source-free and freeze contracts", timed(None, || contracts(&bench, &runs)));
    report(9, "determinism", timed(None, determinism));

    if failures == 0 {
        println!("acceptance: all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
