use std::path::Path;

use cpclab_core::sampler::{OverflowRule, SamplerKind, Schedule};
use cpclab_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Pixel grid, cell size and per-pixel noise of a location world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct World {
    pub height: usize,
    pub width: usize,
    pub cell: usize,
    pub sigma: f64,
}

impl World {
    fn validate(&self, what: &str) -> Result<()> {
        if self.cell == 0 || self.height % self.cell != 0 || self.width % self.cell != 0 {
            return Err(Error::Config(format!(
                "{what}: cell {} must divide the {}x{} grid",
                self.cell, self.height, self.width
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("{what}: sigma must be positive")));
        }
        Ok(())
    }

    pub fn cell_rows(&self) -> usize {
        self.height / self.cell
    }

    pub fn cell_cols(&self) -> usize {
        self.width / self.cell
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Training {
    pub count_min: usize,
    pub count_max: usize,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Locality {
    /// Noise draws per gradient map.
    pub batch: usize,
    /// Seeded probes per variant for the dominance statistic.
    pub n_probes: usize,
    /// Labels per probe condition set.
    pub n_labels: usize,
    pub probe_times: Vec<f64>,
    /// Noise level at which dominance is judged.
    pub dominance_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// World for experiments, locality probes and sampling.
    pub world: World,
    /// Smaller world for verification suites.
    pub lab: World,
    pub training: Training,
    pub schedule: Schedule,
    pub sampler: SamplerKind,
    pub k_list: Vec<usize>,
    pub n_samples: usize,
    /// Extra detections tolerated for single-label variants.
    pub extra_allowance: usize,
    pub overflow: OverflowRule,
    pub patch_radius: usize,
    pub count_threshold: f64,
    /// Minimum Chebyshev distance between test conditions, in cells.
    pub min_separation: usize,
    pub locality: Locality,
    /// Per-pixel noise of the feature-space world.
    pub feature_sigma: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: World { height: 32, width: 32, cell: 2, sigma: 0.05 },
            lab: World { height: 16, width: 16, cell: 4, sigma: 0.05 },
            training: Training { count_min: 1, count_max: 3, n_items: 1000 },
            schedule: Schedule::default(),
            sampler: SamplerKind::ProbabilityFlowOde,
            k_list: (1..=8).collect(),
            n_samples: 16,
            extra_allowance: 2,
            overflow: OverflowRule::Range,
            patch_radius: 2,
            count_threshold: 0.5,
            min_separation: 3,
            locality: Locality {
                batch: 16,
                n_probes: 20,
                n_labels: 4,
                probe_times: cpclab_core::locality::PROBE_TIMES.to_vec(),
                dominance_t: 3.0,
            },
            feature_sigma: 0.1,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every downstream precondition before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.world.validate("world")?;
        self.lab.validate("lab")?;
        self.schedule.validate()?;
        let cells = self.world.cell_rows() * self.world.cell_cols();
        let t = &self.training;
        if t.count_min > t.count_max || t.count_max > cells || t.n_items == 0 {
            return Err(Error::Config(format!(
                "training counts [{}, {}] with {} items do not fit {cells} cells",
                t.count_min, t.count_max, t.n_items
            )));
        }
        if self.k_list.is_empty() {
            return Err(Error::Config("k_list is empty".into()));
        }
        if self.k_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("k_list must be strictly ascending".into()));
        }
        if self.k_list.iter().any(|&k| k > cells) {
            return Err(Error::Config(format!("k_list exceeds the {cells} available cells")));
        }
        if self.n_samples < 8 {
            return Err(Error::Config("n_samples must be at least 8".into()));
        }
        if !(self.count_threshold > 0.0 && self.count_threshold < 1.0) {
            return Err(Error::Config("count_threshold must lie in (0, 1)".into()));
        }
        let l = &self.locality;
        if l.batch == 0 || l.n_probes == 0 || l.n_labels == 0 || l.n_labels > cells {
            return Err(Error::Config("locality batch, probes and labels must be positive and fit the grid".into()));
        }
        if l.probe_times.iter().chain([&l.dominance_t]).any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("probe times must be positive".into()));
        }
        if !(self.feature_sigma > 0.0 && self.feature_sigma.is_finite()) {
            return Err(Error::Config("feature_sigma must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sead": 3}"#).is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(partial.seed, 3);
        let mut c = ExperimentConfig::default();
        c.k_list = vec![2, 1];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::default();
        c.world.cell = 3;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.n_samples = 4;
        assert!(c.validate().is_err());
    }
}
