//! The three length-generalization variants.

use cpclab_core::distributions::{default_cpc, sample_training_set, LabelingPolicy, MatchRule, TrainingSet};
use cpclab_core::grid::{ConditionSet, GridShape, Seed};
use cpclab_core::sampler::{
    kmax_evaluate, patch_sample, sample, sample_condition_set, GenerationReport, KmaxProtocol, KmaxResult,
    ObjectCounter,
};
use cpclab_core::scores::{empirical_global_score, lcs_score, lemma1_rule, ScoreField};
use cpclab_core::{CpcModel, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Exp1,
    Exp2,
    Exp3,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Exp1 => "exp1",
            Variant::Exp2 => "exp2",
            Variant::Exp3 => "exp3",
        }
    }

    pub fn policy(self) -> LabelingPolicy {
        match self {
            Variant::Exp1 => LabelingPolicy::AllLabels,
            Variant::Exp2 | Variant::Exp3 => LabelingPolicy::SingleLabel,
        }
    }

    /// Extra detections tolerated; only single-label variants get an allowance.
    pub fn allowance(self, cfg: &ExperimentConfig) -> usize {
        match self {
            Variant::Exp1 => 0,
            Variant::Exp2 | Variant::Exp3 => cfg.extra_allowance,
        }
    }
}

/// One generator evaluated under the K_max protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerResult {
    pub learner: String,
    /// Whether this learner's K_max is the variant's headline number.
    pub headline: bool,
    pub kmax: KmaxResult,
    /// First sample at each K, for image export.
    #[serde(skip)]
    pub grids: Vec<GenerationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub n_train_items: usize,
    pub learners: Vec<LearnerResult>,
}

impl ExperimentResult {
    pub fn headline(&self) -> &LearnerResult {
        self.learners.iter().find(|l| l.headline).expect("every variant has a headline learner")
    }
}

pub fn world_model(cfg: &ExperimentConfig) -> Result<CpcModel> {
    default_cpc(GridShape::new(cfg.world.height, cfg.world.width)?, cfg.world.cell, cfg.world.sigma)
}

pub fn training_set(cfg: &ExperimentConfig, model: &CpcModel, policy: LabelingPolicy) -> Result<TrainingSet> {
    let tag = match policy {
        LabelingPolicy::AllLabels => 1,
        LabelingPolicy::SingleLabel => 2,
        LabelingPolicy::RandNumLabels => 3,
        LabelingPolicy::DropOneLabel => 4,
    };
    let t = &cfg.training;
    sample_training_set(model, t.count_min, t.count_max, policy, t.n_items, Seed(cfg.seed).derive(tag))
}

/// Condition set used for sample `seed` at count `k`.
pub fn test_conditions(cfg: &ExperimentConfig, k: usize, seed: Seed) -> Result<ConditionSet> {
    let mut rng = seed.derive(0xC0DE).rng();
    sample_condition_set(cfg.world.cell_rows(), cfg.world.cell_cols(), k, cfg.min_separation, &mut rng)
}

fn protocol(cfg: &ExperimentConfig, allowance: usize) -> KmaxProtocol {
    KmaxProtocol {
        n_train: cfg.training.count_max,
        k_list: cfg.k_list.clone(),
        n_samples: cfg.n_samples,
        extra_allowance: allowance,
        overflow: cfg.overflow,
    }
}

fn evaluate<G>(cfg: &ExperimentConfig, allowance: usize, learner: &str, headline: bool, mut gen: G) -> Result<LearnerResult>
where
    G: FnMut(usize, Seed) -> Result<GenerationReport>,
{
    let mut grids: Vec<GenerationReport> = Vec::new();
    let mut last_k = usize::MAX;
    let kmax = kmax_evaluate(
        |k, seed| {
            let r = gen(k, seed)?;
            if k != last_k {
                last_k = k;
                grids.push(r.clone());
            }
            Ok(r)
        },
        &protocol(cfg, allowance),
        Seed(cfg.seed).derive(0x5A),
    )?;
    Ok(LearnerResult { learner: learner.to_string(), headline, kmax, grids })
}

fn field_generator<'a, F: ScoreField + ?Sized>(
    cfg: &'a ExperimentConfig,
    field: &'a F,
    counter: &'a ObjectCounter,
) -> impl FnMut(usize, Seed) -> Result<GenerationReport> + 'a {
    move |k, seed| {
        let conds = test_conditions(cfg, k, seed)?;
        sample(field, &conds, &cfg.schedule, cfg.sampler, seed, counter)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, variant: Variant) -> Result<ExperimentResult> {
    cfg.validate()?;
    let model = world_model(cfg)?;
    let counter = ObjectCounter::new(model.subset_map(), cfg.count_threshold)?;
    let ts = training_set(cfg, &model, variant.policy())?;
    let allowance = variant.allowance(cfg);
    let learners = match variant {
        Variant::Exp1 => {
            let lcs = lcs_score(model.clone(), lemma1_rule(model.subset_map()))?;
            let reference = evaluate(cfg, allowance, "lcs_reference", true, field_generator(cfg, &lcs, &counter))?;
            let emp = empirical_global_score(&ts, MatchRule::Exact)?;
            let learner = evaluate(cfg, allowance, "empirical_all_labels", false, field_generator(cfg, &emp, &counter))?;
            vec![reference, learner]
        }
        Variant::Exp2 => {
            let emp = empirical_global_score(&ts, MatchRule::Exact)?;
            vec![evaluate(cfg, allowance, "empirical_single_label", true, field_generator(cfg, &emp, &counter))?]
        }
        Variant::Exp3 => {
            let subsets = model.subset_map().clone();
            let k = cfg.patch_radius;
            let name = format!("patch_k{k}");
            vec![evaluate(cfg, allowance, &name, true, |kk, seed| {
                let conds = test_conditions(cfg, kk, seed)?;
                patch_sample(&ts, &subsets, k, &conds, &cfg.schedule, seed, &counter)
            })?]
        }
    };
    Ok(ExperimentResult { variant, n_train_items: ts.len(), learners })
}
