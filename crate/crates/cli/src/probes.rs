//! Locality sweeps over the experiment learners.

use cpclab_core::io::{gradient_map_sidecar, locality_csv, LocalityRow};
use cpclab_core::locality::{locality_profile, noise_draw, LocalityProfile, DOMINANCE_RATIO};
use cpclab_core::sampler::sample_condition_set;
use cpclab_core::scores::{empirical_global_score, lcs_score, lemma1_rule, patch_local_score};
use cpclab_core::{
    conditional_influence, ConditionId, ConditionSet, CpcModel, MatchRule, Result, ScoreField, Seed, SubsetMap,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiments::{training_set, world_model, Variant};
use crate::report::ArtifactSink;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub probe: usize,
    pub conditions: ConditionSet,
    pub target_cell: ConditionId,
    /// `(row, col)`.
    pub target: (usize, usize),
    pub influence: Vec<(ConditionId, f64)>,
    pub dominant: Option<ConditionId>,
    /// Top over runner-up; `None` when the top is the only nonzero entry.
    pub ratio: Option<f64>,
    /// The target's own conditioner dominates by at least the dominance ratio.
    pub local_dominant: bool,
    /// Largest influence among conditioners outside the target's window, when a window applies.
    pub outside_window_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantLocality {
    pub variant: Variant,
    pub learner: String,
    pub t: f64,
    pub probes: Vec<ProbeOutcome>,
    pub local_dominant_fraction: f64,
    /// Whether the variant shows its expected pattern in at least 80% of probes.
    pub expected_pattern: bool,
    /// Exact zero influence outside the patch window over every probe (patch learner only).
    pub outside_window_zero: Option<bool>,
    pub profiles: usize,
}

pub const REQUIRED_FRACTION: f64 = 0.8;

fn centre_pixel(subsets: &SubsetMap, j: ConditionId) -> (usize, usize) {
    let shape = subsets.shape();
    let cell = subsets.cell(j).as_slice();
    let (r0, c0) = shape.coords(cell[0]);
    let side = (cell.len() as f64).sqrt() as usize;
    (r0 + side / 2, c0 + side / 2)
}

fn chebyshev(cols: usize, a: ConditionId, b: ConditionId) -> usize {
    (a / cols).abs_diff(b / cols).max((a % cols).abs_diff(b % cols))
}

/// Probe `p`: condition set, target cell, and clean image.
fn probe_setup(cfg: &ExperimentConfig, model: &CpcModel, p: usize) -> Result<(ConditionSet, ConditionId, Vec<f64>, Seed)> {
    let seed = Seed(cfg.seed).derive(0x10C).derive(p as u64);
    let mut rng = seed.rng();
    let conds = sample_condition_set(
        cfg.world.cell_rows(),
        cfg.world.cell_cols(),
        cfg.locality.n_labels,
        cfg.min_separation,
        &mut rng,
    )?;
    let target_cell = conds.as_slice()[p % conds.len()];
    let x = model.sample_image(&conds, &mut rng)?.into_values();
    Ok((conds, target_cell, x, seed.derive(1)))
}

fn headline_field(cfg: &ExperimentConfig, variant: Variant, model: &CpcModel) -> Result<(String, Box<dyn ScoreField>)> {
    Ok(match variant {
        Variant::Exp1 => ("lcs_reference".into(), Box::new(lcs_score(model.clone(), lemma1_rule(model.subset_map()))?)),
        Variant::Exp2 => {
            let ts = training_set(cfg, model, variant.policy())?;
            ("empirical_single_label".into(), Box::new(empirical_global_score(&ts, MatchRule::Exact)?))
        }
        Variant::Exp3 => {
            let ts = training_set(cfg, model, variant.policy())?;
            let k = cfg.patch_radius;
            (format!("patch_k{k}"), Box::new(patch_local_score(&ts, model.subset_map(), k)?))
        }
    })
}

/// Dominance statistic over the seeded probes, plus gradient-map profiles at every
/// conditioned cell of the first probe and every probe time.
pub fn run_locality(cfg: &ExperimentConfig, variant: Variant, sink: &mut ArtifactSink) -> Result<VariantLocality> {
    cfg.validate()?;
    let model = world_model(cfg)?;
    let subsets = model.subset_map();
    let cols = cfg.world.cell_cols();
    let (learner, field) = headline_field(cfg, variant, &model)?;
    let t = cfg.locality.dominance_t;
    let n = model.shape().len();
    let mut probes = Vec::with_capacity(cfg.locality.n_probes);
    for p in 0..cfg.locality.n_probes {
        let (conds, target_cell, x, seed) = probe_setup(cfg, &model, p)?;
        let target = centre_pixel(subsets, target_cell);
        let eps = noise_draw(seed, 0, n);
        let xt: Vec<f64> = x.iter().zip(&eps).map(|(a, e)| a + t * e).collect();
        let inf = conditional_influence(field.as_ref(), &xt, &conds, t, target)?;
        let dom = inf.dominant();
        let ratio = dom.map(|(_, r)| r).filter(|r| r.is_finite());
        let local_dominant = matches!(dom, Some((k, r)) if k == target_cell && r >= DOMINANCE_RATIO);
        let outside_window_max = (variant == Variant::Exp3).then(|| {
            inf.values
                .iter()
                .filter(|(k, _)| chebyshev(cols, *k, target_cell) > cfg.patch_radius)
                .map(|(_, v)| *v)
                .fold(0.0, f64::max)
        });
        probes.push(ProbeOutcome {
            probe: p,
            conditions: conds,
            target_cell,
            target,
            influence: inf.values,
            dominant: dom.map(|(k, _)| k),
            ratio,
            local_dominant,
            outside_window_max,
        });
    }
    let frac = probes.iter().filter(|p| p.local_dominant).count() as f64 / probes.len() as f64;
    let expected_pattern = match variant {
        Variant::Exp1 | Variant::Exp3 => frac >= REQUIRED_FRACTION,
        Variant::Exp2 => 1.0 - frac >= REQUIRED_FRACTION,
    };
    let outside_window_zero =
        (variant == Variant::Exp3).then(|| probes.iter().all(|p| p.outside_window_max == Some(0.0)));

    let (conds, _, x, seed) = probe_setup(cfg, &model, 0)?;
    let mut profiles: Vec<LocalityProfile> = Vec::new();
    for j in conds.iter() {
        let target = centre_pixel(subsets, j);
        for &pt in &cfg.locality.probe_times {
            let prof = locality_profile(field.as_ref(), &x, &conds, pt, target, cfg.locality.batch, seed)?;
            sink.pgm(
                &format!("{}/gradient_maps", variant.name()),
                &format!("r{}_c{}_t{pt}", target.0, target.1),
                prof.gradient_map.shape,
                &prof.gradient_map.values,
                Some(gradient_map_sidecar(&prof.gradient_map)),
            )?;
            profiles.push(prof);
        }
    }
    let rows: Vec<LocalityRow<'_>> = profiles
        .iter()
        .map(|p| LocalityRow { experiment: variant.name(), variant: &learner, profile: p })
        .collect();
    sink.write(&format!("{}/locality.csv", variant.name()), &locality_csv(&rows, subsets.len())?)?;
    Ok(VariantLocality {
        variant,
        learner,
        t,
        probes,
        local_dominant_fraction: frac,
        expected_pattern,
        outside_window_zero,
        profiles: profiles.len(),
    })
}
