//! Feature-space study: cosine matrices in both views and the commutation-gap curve.

use cpclab_core::feature_space::{
    feature_world, mean_difference_cosine, mean_difference_cosine_samples, sample_condition_means, Disentanglement,
    View,
};
use cpclab_core::io::{cosine_csv, cosine_heatmap};
use cpclab_core::{CosineMatrix, FcpcModel, InvertibleLinearMap, Result, Seed};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::report::ArtifactSink;
use crate::verify::{gap_curve, VerifyRecord, GAP_TIMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MapSpec {
    #[value(name = "identity")]
    Identity,
    #[value(name = "orthogonal_seeded")]
    OrthogonalSeeded,
    #[value(name = "shear_seeded")]
    ShearSeeded,
    #[value(name = "dense_seeded")]
    DenseSeeded,
}

impl MapSpec {
    pub fn name(self) -> &'static str {
        match self {
            MapSpec::Identity => "identity",
            MapSpec::OrthogonalSeeded => "orthogonal_seeded",
            MapSpec::ShearSeeded => "shear_seeded",
            MapSpec::DenseSeeded => "dense_seeded",
        }
    }

    pub fn build(self, n: usize, seed: Seed) -> Result<InvertibleLinearMap> {
        match self {
            MapSpec::Identity => InvertibleLinearMap::identity(n),
            MapSpec::OrthogonalSeeded => InvertibleLinearMap::orthogonal_seeded(n, seed),
            MapSpec::ShearSeeded => InvertibleLinearMap::shear_seeded(n, seed),
            MapSpec::DenseSeeded => InvertibleLinearMap::dense_seeded(n, seed),
        }
    }
}

/// Samples per condition for the empirical cosine estimate.
pub const EMPIRICAL_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSummary {
    pub view: View,
    pub max_off_diagonal: Option<f64>,
    pub classification: Option<Disentanglement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStudy {
    pub map: MapSpec,
    pub pixel: ViewSummary,
    pub feature: ViewSummary,
    /// Largest entrywise gap between sampled and analytic pixel-view cosines.
    pub empirical_deviation: f64,
    pub gap_t: Vec<f64>,
    pub gap: Vec<f64>,
    pub checks: Vec<VerifyRecord>,
}

fn summary(view: View, c: &CosineMatrix) -> ViewSummary {
    ViewSummary { view, max_off_diagonal: c.max_off_diagonal(), classification: c.classify() }
}

fn max_entry_gap(a: &CosineMatrix, b: &CosineMatrix) -> f64 {
    a.values
        .iter()
        .flatten()
        .zip(b.values.iter().flatten())
        .map(|(u, v)| match (u, v) {
            (Some(u), Some(v)) => (u - v).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

fn check(case: &str, measured: f64, tolerance: f64, passed: bool) -> VerifyRecord {
    VerifyRecord {
        claim: "featurespace".into(),
        case: case.into(),
        inputs: json!(null),
        measured,
        tolerance,
        passed,
    }
}

pub fn run_featurespace(cfg: &ExperimentConfig, spec: MapSpec, sink: &mut ArtifactSink) -> Result<FeatureStudy> {
    cfg.validate()?;
    let seed = Seed(cfg.seed).derive(0xFE);
    let base = feature_world(cfg.feature_sigma)?;
    let map = spec.build(base.shape().len(), seed)?;
    let model = FcpcModel::new(base, map.clone())?;
    let pixel = mean_difference_cosine(&model, View::Pixel)?;
    let feature = mean_difference_cosine(&model, View::Feature)?;
    let (per, bg) = sample_condition_means(&model, EMPIRICAL_SAMPLES, seed.derive(1))?;
    let empirical = mean_difference_cosine_samples(&per, &bg, None)?;
    let deviation = max_entry_gap(&pixel, &empirical);
    let gap = gap_curve(&map, cfg.feature_sigma)?;

    for (stem, c) in [("cosine_pixel", &pixel), ("cosine_feature", &feature), ("cosine_pixel_empirical", &empirical)] {
        sink.write(&format!("{}/{stem}.csv", spec.name()), &cosine_csv(c)?)?;
        let (shape, values) = cosine_heatmap(c)?;
        sink.pgm(spec.name(), stem, shape, &values, Some(json!({"range": "cosine"})))?;
    }
    let mut gap_csv = String::from("t,gap\n");
    for (t, g) in GAP_TIMES.iter().zip(&gap) {
        gap_csv.push_str(&format!("{t},{g:e}\n"));
    }
    sink.write(&format!("{}/gap.csv", spec.name()), gap_csv.as_bytes())?;

    let px_off = pixel.max_off_diagonal().unwrap_or(0.0);
    let fx_off = feature.max_off_diagonal().unwrap_or(0.0);
    let mut checks = vec![
        check("feature view diagonal", fx_off, 1e-9, fx_off <= 1e-9),
        check("empirical matches analytic", deviation, 0.02, deviation <= 0.02),
    ];
    let max_gap = gap.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    match spec {
        MapSpec::Identity => checks.push(check("pixel view diagonal", px_off, 1e-9, px_off <= 1e-9)),
        MapSpec::DenseSeeded => {
            checks.push(check("pixel view entangled", px_off, 0.3, pixel.classify() == Some(Disentanglement::Entangled)));
            checks.push(check(
                "feature view disentangled",
                fx_off,
                0.1,
                feature.classify() == Some(Disentanglement::Disentangled),
            ));
        }
        MapSpec::OrthogonalSeeded => checks.push(check("gap vanishes", max_gap, 1e-10, max_gap <= 1e-10)),
        MapSpec::ShearSeeded => {}
    }
    if map.is_orthogonal() && spec != MapSpec::OrthogonalSeeded {
        checks.push(check("gap vanishes", max_gap, 1e-10, max_gap <= 1e-10));
    }
    Ok(FeatureStudy {
        map: spec,
        pixel: summary(View::Pixel, &pixel),
        feature: summary(View::Feature, &feature),
        empirical_deviation: deviation,
        gap_t: GAP_TIMES.to_vec(),
        gap,
        checks,
    })
}
