//! One function per subcommand; each writes its directory under `out` and returns
//! whether its checks passed.

use std::path::{Path, PathBuf};

use cpclab_core::sampler::{patch_sample, sample};
use cpclab_core::scores::{empirical_global_score, lcs_score, lemma1_rule};
use cpclab_core::{MatchRule, ObjectCounter, Result, Seed};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::experiments::{run_experiment, test_conditions, training_set, world_model, ExperimentResult, Variant};
use crate::features::{run_featurespace, MapSpec};
use crate::probes::run_locality;
use crate::report::ArtifactSink;
use crate::verify::{run_suite, Hooks, Suite};

pub const ALL_VARIANTS: [Variant; 3] = [Variant::Exp1, Variant::Exp2, Variant::Exp3];

pub fn verify_dir(out: &Path, suite: Suite) -> PathBuf {
    out.join("verify").join(suite.name())
}

pub fn experiment_dir(out: &Path, variant: Variant) -> PathBuf {
    out.join("experiment").join(variant.name())
}

pub fn cmd_verify(cfg: &ExperimentConfig, suite: Suite, hooks: Hooks, out: &Path) -> Result<bool> {
    let sink = ArtifactSink::create(&verify_dir(out, suite))?;
    let report = run_suite(cfg, suite, hooks)?;
    for r in report.records.iter().filter(|r| !r.passed) {
        eprintln!(
            "FAIL {} {}: measured {:e}, tolerance {:e}, inputs {}",
            r.claim, r.case, r.measured, r.tolerance, r.inputs
        );
    }
    let passed = report.passed;
    sink.finish("verify", cfg, passed, report)?;
    Ok(passed)
}

fn emit_experiment(sink: &mut ArtifactSink, res: &ExperimentResult) -> Result<()> {
    let mut counts = String::from("learner,k,sample,count,hits,extras\n");
    for l in &res.learners {
        for st in &l.kmax.per_k {
            for (i, ((c, h), e)) in st.counts.iter().zip(&st.hits).zip(&st.extras).enumerate() {
                counts.push_str(&format!("{},{},{i},{c},{h},{e}\n", l.learner, st.k));
            }
        }
        for g in &l.grids {
            let meta = serde_json::json!({"conditions": g.conditions, "detected": g.detected});
            sink.pgm(
                "samples",
                &format!("{}_k{}", l.learner, g.conditions.len()),
                g.image.shape(),
                g.image.values(),
                Some(meta),
            )?;
        }
    }
    sink.write("counts.csv", counts.as_bytes())?;
    Ok(())
}

/// Runs the variants in order; each variant's report is flushed before the next starts.
pub fn cmd_experiment(cfg: &ExperimentConfig, variants: &[Variant], out: &Path) -> Result<Vec<ExperimentResult>> {
    let mut all = Vec::new();
    for &v in variants {
        let mut sink = ArtifactSink::create(&experiment_dir(out, v))?;
        let res = run_experiment(cfg, v)?;
        emit_experiment(&mut sink, &res)?;
        for l in &res.learners {
            println!("{} {}: K_max = {}", v.name(), l.learner, l.kmax.k_max);
        }
        sink.finish("experiment", cfg, true, &res)?;
        all.push(res);
    }
    Ok(all)
}

pub fn cmd_locality(cfg: &ExperimentConfig, variants: &[Variant], out: &Path) -> Result<bool> {
    let mut sink = ArtifactSink::create(&out.join("locality"))?;
    let mut results = Vec::new();
    for &v in variants {
        let r = run_locality(cfg, v, &mut sink)?;
        println!(
            "{} {}: local-dominant fraction {:.2} at t = {}, expected pattern {}",
            v.name(),
            r.learner,
            r.local_dominant_fraction,
            r.t,
            if r.expected_pattern { "yes" } else { "no" }
        );
        results.push(r);
    }
    let passed = results.iter().all(|r| r.expected_pattern && r.outside_window_zero != Some(false));
    sink.finish("locality", cfg, passed, &results)?;
    Ok(passed)
}

pub fn cmd_featurespace(cfg: &ExperimentConfig, maps: &[MapSpec], out: &Path) -> Result<bool> {
    let mut sink = ArtifactSink::create(&out.join("featurespace"))?;
    let mut results = Vec::new();
    for &m in maps {
        let r = run_featurespace(cfg, m, &mut sink)?;
        for c in r.checks.iter().filter(|c| !c.passed) {
            eprintln!("FAIL {} {}: measured {:e}, tolerance {:e}", m.name(), c.case, c.measured, c.tolerance);
        }
        results.push(r);
    }
    let passed = results.iter().all(|r| r.checks.iter().all(|c| c.passed));
    sink.finish("featurespace", cfg, passed, &results)?;
    Ok(passed)
}

#[derive(Debug, Clone, Serialize)]
struct SampleRecord {
    variant: Variant,
    learner: String,
    k: usize,
    sample: usize,
    conditions: Vec<usize>,
    object_count: usize,
    hits: usize,
    extras: usize,
}

/// Draws `n` samples at `k` conditions from the variant's headline generator.
pub fn cmd_sample(cfg: &ExperimentConfig, variant: Variant, k: usize, n: usize, out: &Path) -> Result<()> {
    cfg.validate()?;
    let mut sink = ArtifactSink::create(&out.join("sample").join(variant.name()))?;
    let model = world_model(cfg)?;
    let counter = ObjectCounter::new(model.subset_map(), cfg.count_threshold)?;
    let base = Seed(cfg.seed).derive(0x5A5A);
    let mut records = Vec::with_capacity(n);
    let ts = match variant {
        Variant::Exp1 => None,
        _ => Some(training_set(cfg, &model, variant.policy())?),
    };
    let lcs = lcs_score(model.clone(), lemma1_rule(model.subset_map()))?;
    let emp = ts.as_ref().map(|t| empirical_global_score(t, MatchRule::Exact)).transpose()?;
    for i in 0..n {
        let seed = base.derive(k as u64).derive(i as u64);
        let conds = test_conditions(cfg, k, seed)?;
        let (learner, r) = match variant {
            Variant::Exp1 => ("lcs_reference".to_string(), sample(&lcs, &conds, &cfg.schedule, cfg.sampler, seed, &counter)?),
            Variant::Exp2 => (
                "empirical_single_label".to_string(),
                sample(emp.as_ref().expect("built above"), &conds, &cfg.schedule, cfg.sampler, seed, &counter)?,
            ),
            Variant::Exp3 => (
                format!("patch_k{}", cfg.patch_radius),
                patch_sample(ts.as_ref().expect("built above"), model.subset_map(), cfg.patch_radius, &conds, &cfg.schedule, seed, &counter)?,
            ),
        };
        let meta = serde_json::json!({"conditions": r.conditions, "detected": r.detected});
        sink.pgm("images", &format!("k{k}_{i}"), r.image.shape(), r.image.values(), Some(meta))?;
        records.push(SampleRecord {
            variant,
            learner,
            k,
            sample: i,
            conditions: r.conditions.as_slice().to_vec(),
            object_count: r.object_count,
            hits: r.hits(),
            extras: r.extras(),
        });
    }
    sink.finish("sample", cfg, true, &records)?;
    Ok(())
}
