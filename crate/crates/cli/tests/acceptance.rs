//! One test per acceptance criterion. Each writes a single PASS/FAIL line to
//! stderr (uncaptured) before asserting.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cpclab_cli::commands::{cmd_experiment, cmd_locality, cmd_verify, experiment_dir, verify_dir, ALL_VARIANTS};
use cpclab_cli::config::ExperimentConfig;
use cpclab_cli::experiments::{ExperimentResult, Variant};
use cpclab_cli::features::{run_featurespace, MapSpec};
use cpclab_cli::probes::VariantLocality;
use cpclab_cli::report::{verify_manifest, ArtifactSink, RunReport, REPORT_FILE};
use cpclab_cli::verify::{run_suite, Hooks, Suite, SuiteReport};

fn line(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n:>2} [{name}]: {verdict} ({detail})");
}

fn suite(s: Suite) -> (SuiteReport, Duration) {
    let start = Instant::now();
    let r = run_suite(&ExperimentConfig::default(), s, Hooks::default()).unwrap();
    (r, start.elapsed())
}

fn worst(r: &SuiteReport) -> f64 {
    r.records.iter().map(|x| x.measured).fold(f64::NEG_INFINITY, f64::max)
}

struct ExperimentRun {
    dir: tempfile::TempDir,
    results: Vec<ExperimentResult>,
    elapsed: Duration,
}

/// `verify --suite all` followed by every experiment variant, into a fresh directory.
fn full_run() -> ExperimentRun {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    cmd_verify(&cfg, Suite::All, Hooks::default(), dir.path()).unwrap();
    let start = Instant::now();
    let results = cmd_experiment(&cfg, &ALL_VARIANTS, dir.path()).unwrap();
    ExperimentRun { dir, results, elapsed: start.elapsed() }
}

fn first_run() -> &'static ExperimentRun {
    static RUN: OnceLock<ExperimentRun> = OnceLock::new();
    RUN.get_or_init(full_run)
}

#[test]
fn criterion_01_local_score_exactness() {
    let (r, dt) = suite(Suite::Lemma1);
    let probes = r.records.len() * 8 * 64;
    let pass = r.passed && r.records.len() == 4 && dt <= Duration::from_secs(30);
    line(1, "local score exactness", pass, &format!("max deviation {:e} over {probes} probes, {:.1} s", worst(&r), dt.as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_02_kl_time_derivative() {
    let (r, dt) = suite(Suite::Claim1);
    let cases = r.records.iter().filter(|x| !x.case.ends_with("closed-form")).count();
    let closed = r.records.iter().filter(|x| x.case.ends_with("closed-form")).count();
    let pass = r.passed && cases >= 10 && closed >= 1 && dt <= Duration::from_secs(60);
    line(2, "kl time derivative", pass, &format!("{cases} cases + {closed} closed-form, worst relative error {:e}, {:.1} s", worst(&r), dt.as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_03_heat_fact_refinement() {
    let (r, _) = suite(Suite::Heatfact);
    let ratios: Vec<String> = r.records.iter().map(|x| format!("{} {:.4}", x.case, x.measured)).collect();
    let pass = r.passed && r.records.len() == 3;
    line(3, "heat fact refinement", pass, &format!("residual ratio under halving, need >= 4: {}", ratios.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_04_composition_bound() {
    let (r, _) = suite(Suite::LemmaA2);
    let perturbed: Vec<_> = r.records.iter().filter(|x| x.case.starts_with("perturbed")).collect();
    let exact: Vec<_> = r.records.iter().filter(|x| x.case.starts_with("exact")).collect();
    let max_excess = perturbed.iter().map(|x| x.measured).fold(f64::NEG_INFINITY, f64::max);
    let max_exact = exact.iter().map(|x| x.measured).fold(0.0, f64::max);
    let pass = r.passed && perturbed.len() == 100 && !exact.is_empty();
    line(4, "composition bound", pass, &format!("max lhs - rhs {max_excess:e} on 100 families, exact families max {max_exact:e}"));
    assert!(pass);
}

#[test]
fn criterion_05_sup_kl_decreasing() {
    let (r, _) = suite(Suite::LemmaA3);
    let pass = r.passed && r.records.len() == 5;
    let min_drop = r.records.iter().map(|x| x.measured).fold(f64::INFINITY, f64::min);
    line(5, "sup-KL decreasing", pass, &format!("5 pairs, smallest consecutive drop {min_drop:e}"));
    assert!(pass);
}

#[test]
fn criterion_06_commutation_gap() {
    let (r, _) = suite(Suite::ClaimA4);
    let non_orth: Vec<_> = r.records.iter().filter(|x| !x.case.starts_with("orthogonal")).collect();
    let orth: Vec<_> = r.records.iter().filter(|x| x.case.starts_with("orthogonal")).collect();
    let decreasing = non_orth.iter().filter(|x| x.passed).count();
    let orth_max = orth.iter().map(|x| x.measured).fold(0.0, f64::max);
    let pass = non_orth.len() == 5 && decreasing == 5 && orth.iter().all(|x| x.passed);
    line(6, "commutation gap", pass, &format!("{decreasing}/5 non-orthogonal curves decreasing, orthogonal max gap {orth_max:e}"));
    assert!(pass);
}

#[test]
fn criterion_07_feature_space_local_score() {
    let (r, _) = suite(Suite::Corollary1);
    let pass = r.passed && r.records.len() == 20;
    line(7, "feature-space local score", pass, &format!("20 cases, max deviation {:e}", worst(&r)));
    assert!(pass);
}

#[test]
fn criterion_08_length_generalization() {
    let run = first_run();
    let k = |v: Variant| run.results.iter().find(|r| r.variant == v).unwrap().headline().kmax.k_max;
    let (e1, e2, e3) = (k(Variant::Exp1), k(Variant::Exp2), k(Variant::Exp3));
    let secs = run.elapsed.as_secs_f64();
    let pass = e1 >= 6 && e2 <= 1 && e3 >= 5 && secs <= 600.0;
    line(8, "length generalization", pass, &format!("K_max exp1 {e1}, exp2 {e2}, exp3 {e3}; {secs:.0} s"));
    assert!(pass);
}

#[test]
fn criterion_09_locality_contrast() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    cmd_locality(&cfg, &ALL_VARIANTS, dir.path()).unwrap();
    let report: RunReport<Vec<VariantLocality>> =
        serde_json::from_slice(&std::fs::read(dir.path().join("locality").join(REPORT_FILE)).unwrap()).unwrap();
    let by = |v: Variant| report.results.iter().find(|r| r.variant == v).unwrap();
    let (e1, e2, e3) = (by(Variant::Exp1), by(Variant::Exp2), by(Variant::Exp3));
    let window_zero = e3.outside_window_zero == Some(true);
    let pass = e1.expected_pattern && e2.expected_pattern && e3.expected_pattern && window_zero;
    line(
        9,
        "locality contrast",
        pass,
        &format!(
            "local-dominant share exp1 {:.2}, exp3 {:.2} (need >= 0.8); exp2 non-local-or-none share {:.2} (need >= 0.8); exp3 outside-window zero {window_zero}",
            e1.local_dominant_fraction,
            e3.local_dominant_fraction,
            1.0 - e2.local_dominant_fraction
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_disentanglement() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let mut sink = ArtifactSink::create(dir.path()).unwrap();
    let studies: Vec<_> = [MapSpec::Identity, MapSpec::OrthogonalSeeded, MapSpec::ShearSeeded, MapSpec::DenseSeeded]
        .into_iter()
        .map(|m| run_featurespace(&cfg, m, &mut sink).unwrap())
        .collect();
    let feature_max = studies.iter().map(|s| s.feature.max_off_diagonal.unwrap()).fold(0.0, f64::max);
    let dense = studies.iter().find(|s| s.map == MapSpec::DenseSeeded).unwrap();
    let dense_pixel = dense.pixel.max_off_diagonal.unwrap();
    let deviation = studies.iter().map(|s| s.empirical_deviation).fold(0.0, f64::max);
    let pass = feature_max <= 1e-9 && dense_pixel >= 0.3 && deviation <= 0.02;
    line(10, "disentanglement heuristic", pass, &format!("feature-view max off-diagonal {feature_max:e}, dense pixel-view {dense_pixel:.3}, empirical deviation {deviation:.4}"));
    assert!(pass);
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_11_determinism() {
    let a = first_run();
    let b = full_run();
    let (fa, fb) = (files_under(a.dir.path()), files_under(b.dir.path()));
    let differing: Vec<_> = fa
        .iter()
        .filter(|p| std::fs::read(a.dir.path().join(p)).ok() != std::fs::read(b.dir.path().join(p)).ok())
        .collect();
    let mut report_dirs = vec![verify_dir(Path::new(""), Suite::All)];
    report_dirs.extend(ALL_VARIANTS.iter().map(|&v| experiment_dir(Path::new(""), v)));
    let manifests_ok = report_dirs.iter().all(|d| verify_manifest(&a.dir.path().join(d)).unwrap().is_empty());
    let pass = fa == fb && differing.is_empty() && manifests_ok && !fa.is_empty();
    line(11, "determinism", pass, &format!("{} files compared, {} differ, manifests verified {manifests_ok}", fa.len(), differing.len()));
    assert!(pass);
}
