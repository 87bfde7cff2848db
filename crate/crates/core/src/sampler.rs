//! Reverse-diffusion sampling from any [`ScoreField`], the patch-wise loop, peak
//! counting, and the K_max protocol.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::{bump_peak, TrainingSet};
use crate::error::{Error, Result};
use crate::grid::{ConditionId, ConditionSet, Image, Seed, SubsetMap};
use crate::scores::{patch_local_score, ScoreField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Geometric,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub t_max: f64,
    pub t_min: f64,
    pub steps: usize,
    pub spacing: Spacing,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            t_max: 3.0,
            t_min: 0.01,
            steps: 200,
            spacing: Spacing::Geometric,
        }
    }
}

impl Schedule {
    pub fn new(t_max: f64, t_min: f64, steps: usize, spacing: Spacing) -> Result<Self> {
        let s = Self {
            t_max,
            t_min,
            steps,
            spacing,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_max.is_finite() && self.t_min > 0.0 && self.t_max > self.t_min) {
            return Err(Error::Config(format!(
                "schedule needs t_max > t_min > 0, got {} and {}",
                self.t_max, self.t_min
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(())
    }

    /// `steps + 1` decreasing noise levels from `t_max` to `t_min`.
    pub fn times(&self) -> Vec<f64> {
        let n = self.steps as f64;
        (0..=self.steps)
            .map(|i| {
                let f = i as f64 / n;
                match self.spacing {
                    Spacing::Geometric => self.t_max * (self.t_min / self.t_max).powf(f),
                    Spacing::Linear => self.t_max + (self.t_min - self.t_max) * f,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    ProbabilityFlowOde,
    EulerMaruyamaSde,
}

/// Threshold peak detector: a cell holds an object iff its maximum reaches
/// `threshold * peak`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCounter {
    subsets: SubsetMap,
    threshold: f64,
    peak: f64,
}

impl ObjectCounter {
    /// Counter for the bump template of a square-cell map.
    pub fn new(subsets: &SubsetMap, threshold: f64) -> Result<Self> {
        let cell = subsets
            .cell_size()
            .ok_or_else(|| Error::Geometry("object counting needs square cells".into()))?;
        Self::with_peak(subsets, threshold, bump_peak(cell))
    }

    pub fn with_peak(subsets: &SubsetMap, threshold: f64, peak: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Precondition(format!("threshold must be in (0, 1), got {threshold}")));
        }
        Ok(Self {
            subsets: subsets.clone(),
            threshold,
            peak,
        })
    }

    pub fn subsets(&self) -> &SubsetMap {
        &self.subsets
    }

    /// Detected cells and their argmax pixel `(row, col)`.
    pub fn detect(&self, x: &[f64]) -> Vec<(ConditionId, (usize, usize))> {
        let cut = self.threshold * self.peak;
        let shape = self.subsets.shape();
        let mut out = Vec::new();
        for (j, cell) in self.subsets.cells().iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for i in cell.iter() {
                if best.is_none_or(|(_, v)| x[i] > v) {
                    best = Some((i, x[i]));
                }
            }
            if let Some((i, v)) = best {
                if v >= cut {
                    out.push((j, shape.coords(i)));
                }
            }
        }
        out
    }
}

/// `(count, peak positions)` for the default bump template.
pub fn count_objects(x: &Image, subsets: &SubsetMap, threshold: f64) -> Result<(usize, Vec<(usize, usize)>)> {
    let found = ObjectCounter::new(subsets, threshold)?.detect(x.values());
    Ok((found.len(), found.into_iter().map(|(_, p)| p).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub conditions: ConditionSet,
    pub image: Image,
    /// `||x||_2` after every step.
    pub trajectory_norms: Vec<f64>,
    pub object_count: usize,
    pub detected: Vec<ConditionId>,
    pub peak_positions: Vec<(usize, usize)>,
}

impl GenerationReport {
    pub fn from_image(conditions: ConditionSet, image: Image, trajectory_norms: Vec<f64>, counter: &ObjectCounter) -> Self {
        let found = counter.detect(image.values());
        Self {
            conditions,
            image,
            trajectory_norms,
            object_count: found.len(),
            detected: found.iter().map(|(j, _)| *j).collect(),
            peak_positions: found.into_iter().map(|(_, p)| p).collect(),
        }
    }

    /// Detected objects at conditioned cells.
    pub fn hits(&self) -> usize {
        self.detected.iter().filter(|j| self.conditions.contains(**j)).count()
    }

    /// Detected objects at unconditioned cells.
    pub fn extras(&self) -> usize {
        self.object_count - self.hits()
    }
}

/// Runs the reverse process from `x ~ N(0, t_max^2 I)` and counts objects.
pub fn sample<F: ScoreField + ?Sized>(
    field: &F,
    conds: &ConditionSet,
    sch: &Schedule,
    kind: SamplerKind,
    seed: Seed,
    counter: &ObjectCounter,
) -> Result<GenerationReport> {
    sch.validate()?;
    let shape = field.shape();
    if counter.subsets().shape() != shape {
        return Err(Error::Config("counter and score field disagree on the grid".into()));
    }
    let times = sch.times();
    let mut rng = seed.rng();
    let mut x: Vec<f64> = (0..shape.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sch.t_max * z
        })
        .collect();
    let mut norms = Vec::with_capacity(sch.steps);
    for (step, w) in times.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let s = field.score(&x, conds, t)?;
        match kind {
            SamplerKind::ProbabilityFlowOde => {
                let h = (t - t_next) * t;
                for (xi, si) in x.iter_mut().zip(&s) {
                    *xi += h * si;
                }
            }
            SamplerKind::EulerMaruyamaSde => {
                let dv = t * t - t_next * t_next;
                let sd = dv.sqrt();
                for (xi, si) in x.iter_mut().zip(&s) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xi += dv * si + sd * z;
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        norms.push(x.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let image = Image::new(shape, x)?;
    Ok(GenerationReport::from_image(conds.clone(), image, norms, counter))
}

/// Patch-wise inference: each cell is denoised by the learner of its own
/// `(2k+1) x (2k+1)` window and only that centre cell is written back.
///
/// An Euler step on the patch followed by centre write-back changes each pixel by
/// exactly the step of its own cell's patch score, so all cells advance together.
pub fn patch_sample(
    ts: &TrainingSet,
    subsets: &SubsetMap,
    k: usize,
    conds: &ConditionSet,
    sch: &Schedule,
    seed: Seed,
    counter: &ObjectCounter,
) -> Result<GenerationReport> {
    let field = patch_local_score(ts, subsets, k)?;
    sample(&field, conds, sch, SamplerKind::ProbabilityFlowOde, seed, counter)
}

/// How "at least K-2 and K objects" is read for K beyond the training range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowRule {
    /// Hits in `[K-2, K]` in more than a quarter of samples.
    Range,
    /// The range condition, and exactly `K` hits in more than a quarter of samples.
    RangeAndExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmaxProtocol {
    pub n_train: usize,
    pub k_list: Vec<usize>,
    pub n_samples: usize,
    pub extra_allowance: usize,
    pub overflow: OverflowRule,
}

impl KmaxProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.k_list.is_empty() {
            return Err(Error::Domain("empty K list".into()));
        }
        if self.k_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("K list must be strictly ascending".into()));
        }
        if self.n_samples < 8 {
            return Err(Error::Config(format!(
                "at least 8 samples per K are required, got {}",
                self.n_samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KStats {
    pub k: usize,
    pub counts: Vec<usize>,
    pub hits: Vec<usize>,
    pub extras: Vec<usize>,
    pub success_fraction: f64,
    /// `None` for K = 0, which is reported descriptively.
    pub passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmaxResult {
    pub k_max: usize,
    pub per_k: Vec<KStats>,
}

/// Evaluates `generator(K, seed)` over the protocol; K_max is the largest K with
/// success at every evaluated `1 <= K' <= K`.
pub fn kmax_evaluate<G>(mut generator: G, protocol: &KmaxProtocol, seed: Seed) -> Result<KmaxResult>
where
    G: FnMut(usize, Seed) -> Result<GenerationReport>,
{
    protocol.validate()?;
    let mut per_k = Vec::with_capacity(protocol.k_list.len());
    for &k in &protocol.k_list {
        let mut counts = Vec::with_capacity(protocol.n_samples);
        let mut hits = Vec::with_capacity(protocol.n_samples);
        let mut extras = Vec::with_capacity(protocol.n_samples);
        for s in 0..protocol.n_samples {
            let r = generator(k, seed.derive(k as u64).derive(s as u64))?;
            counts.push(r.object_count);
            hits.push(r.hits());
            extras.push(r.extras());
        }
        let n = protocol.n_samples as f64;
        let clean = |h: usize, e: usize, lo: usize| h >= lo && h <= k && e <= protocol.extra_allowance;
        let (fraction, passed) = if k == 0 {
            let f = counts.iter().filter(|&&c| c <= protocol.extra_allowance).count() as f64 / n;
            (f, None)
        } else if k <= protocol.n_train {
            let f = hits.iter().zip(&extras).filter(|(&h, &e)| clean(h, e, k)).count() as f64 / n;
            (f, Some(f > 0.5))
        } else {
            let lo = k.saturating_sub(2);
            let f = hits.iter().zip(&extras).filter(|(&h, &e)| clean(h, e, lo)).count() as f64 / n;
            let ok = match protocol.overflow {
                OverflowRule::Range => f > 0.25,
                OverflowRule::RangeAndExact => {
                    let exact = hits.iter().zip(&extras).filter(|(&h, &e)| clean(h, e, k)).count() as f64 / n;
                    f > 0.25 && exact > 0.25
                }
            };
            (f, Some(ok))
        };
        per_k.push(KStats {
            k,
            counts,
            hits,
            extras,
            success_fraction: fraction,
            passed,
        });
    }
    let mut k_max = 0;
    for st in &per_k {
        match st.passed {
            None => {}
            Some(true) => k_max = st.k,
            Some(false) => break,
        }
    }
    Ok(KmaxResult { k_max, per_k })
}

/// Draws `k` distinct cells of a `rows x cols` conditioner grid with pairwise
/// Chebyshev distance at least `min_separation`.
pub fn sample_condition_set<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    k: usize,
    min_separation: usize,
    rng: &mut R,
) -> Result<ConditionSet> {
    let total = rows * cols;
    if k > total {
        return Err(Error::Precondition(format!("cannot place {k} conditions on {total} cells")));
    }
    if min_separation <= 1 {
        return Ok(sample_indices(rng, total, k).into_iter().collect());
    }
    for _ in 0..1000 {
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        let mut free: Vec<usize> = (0..total).collect();
        while chosen.len() < k && !free.is_empty() {
            let pick = free[rng.random_range(0..free.len())];
            chosen.push(pick);
            let (r, c) = (pick / cols, pick % cols);
            free.retain(|&q| (q / cols).abs_diff(r).max((q % cols).abs_diff(c)) >= min_separation);
        }
        if chosen.len() == k {
            return Ok(chosen.into_iter().collect());
        }
    }
    Err(Error::Precondition(format!(
        "could not place {k} conditions {min_separation} cells apart"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{bump_template, default_cpc, Gaussian, GaussianMixture};
    use crate::grid::{make_subset_map, GridShape};
    use crate::scores::{lcs_score, lemma1_rule, GlobalExactScore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal;

    fn tiled(shape: GridShape, cell: usize, cells: &[usize]) -> (SubsetMap, Image) {
        let sm = make_subset_map(shape, cell).unwrap();
        let mut v = vec![0.0; shape.len()];
        let b = bump_template(cell);
        for &j in cells {
            for (p, i) in sm.cell(j).iter().enumerate() {
                v[i] = b[p];
            }
        }
        (sm, Image::new(shape, v).unwrap())
    }

    #[test]
    fn schedule_endpoints_and_validation() {
        let s = Schedule::default();
        let t = s.times();
        assert_eq!(t.len(), 201);
        assert!((t[0] - 3.0).abs() < 1e-15 && (t[200] - 0.01).abs() < 1e-15);
        assert!(t.windows(2).all(|w| w[0] > w[1]));
        let ratio = t[1] / t[0];
        assert!(t.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-12));
        assert!(Schedule::new(1.0, 2.0, 10, Spacing::Linear).is_err());
        assert!(Schedule::new(1.0, 0.0, 10, Spacing::Linear).is_err());
        assert!(Schedule::new(1.0, 0.5, 0, Spacing::Linear).is_err());
        let lin = Schedule::new(1.0, 0.5, 5, Spacing::Linear).unwrap().times();
        assert!((lin[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn count_tiled_bumps() {
        let shape = GridShape::new(16, 16).unwrap();
        let (sm, x) = tiled(shape, 4, &[0, 5, 15]);
        let (n, pos) = count_objects(&x, &sm, 0.5).unwrap();
        assert_eq!(n, 3);
        assert_eq!(pos, vec![(1, 1), (5, 5), (13, 13)]);
        let (z, _) = count_objects(&Image::zeros(shape), &sm, 0.5).unwrap();
        assert_eq!(z, 0);
        assert!(count_objects(&x, &sm, 1.0).is_err());
    }

    #[test]
    fn noisy_bump_miscount_rate() {
        // 1e4 trials; 3 bumps + N(0, 0.05^2) noise at threshold 0.5
        let shape = GridShape::new(16, 16).unwrap();
        let (sm, clean) = tiled(shape, 4, &[1, 6, 11]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let counter = ObjectCounter::new(&sm, 0.5).unwrap();
        let mut wrong = 0;
        for _ in 0..10_000 {
            let x: Vec<f64> = clean.values().iter().map(|v| v + noise.sample(&mut rng)).collect();
            let found = counter.detect(&x);
            if found.iter().map(|f| f.0).collect::<Vec<_>>() != vec![1, 6, 11] {
                wrong += 1;
            }
        }
        assert!((wrong as f64) / 1e4 < 1e-3, "{wrong} miscounts");
    }

    fn gaussian_world(mu: &[f64], sigma: f64) -> (GlobalExactScore<crate::distributions::CpcModel>, ObjectCounter) {
        let shape = GridShape::new(2, 2).unwrap();
        let sm = make_subset_map(shape, 1).unwrap();
        let cells: Vec<GaussianMixture> = mu
            .iter()
            .map(|&v| GaussianMixture::single(Gaussian::isotropic(vec![v], sigma).unwrap()))
            .collect();
        let m = crate::distributions::CpcModel::new(sm.clone(), cells.clone(), cells, None).unwrap();
        (GlobalExactScore::new(m), ObjectCounter::with_peak(&sm, 0.5, 1.0).unwrap())
    }

    fn ode_moments(mu: &[f64], sigma: f64, n: u64) -> (Vec<f64>, Vec<f64>) {
        let (field, counter) = gaussian_world(mu, sigma);
        let mut sums = vec![0.0; 4];
        let mut sq = vec![0.0; 4];
        for s in 0..n {
            let r = sample(&field, &ConditionSet::empty(), &Schedule::default(), SamplerKind::ProbabilityFlowOde, Seed(1000 + s), &counter).unwrap();
            for (i, v) in r.image.values().iter().enumerate() {
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        let nf = n as f64;
        let mean: Vec<f64> = sums.iter().map(|s| s / nf).collect();
        let var = sq.iter().zip(&mean).map(|(q, m)| q / nf - m * m).collect();
        (mean, var)
    }

    #[test]
    fn ode_reproduces_gaussian_moments() {
        // 512 runs. The N(0, t_max^2) start shifts the output mean by
        // mu * sigma / sqrt(sigma^2 + t_max^2), under one standard error here.
        let mu = [0.03, -0.02, 0.0, 0.01];
        let sigma = 0.3;
        let (mean, var) = ode_moments(&mu, sigma, 512);
        let se = sigma / 512f64.sqrt();
        let var_sd = (2.0 * sigma.powi(4) / 512.0f64).sqrt();
        for i in 0..4 {
            assert!((mean[i] - mu[i]).abs() < 3.0 * se, "pixel {i}: mean {}", mean[i]);
            assert!((var[i] - sigma * sigma).abs() < 3.0 * var_sd, "pixel {i}: var {}", var[i]);
        }
    }

    #[test]
    fn ode_matches_exact_flow_for_offset_means() {
        // the exact flow maps x_T to mu + rho (x_T - mu),
        // rho = sqrt((sigma^2 + t_min^2) / (sigma^2 + T^2)); with x_T ~ N(0, T^2)
        // the output has mean mu (1 - rho) and variance T^2 rho^2
        let mu = [0.8, -0.5, 0.4, 0.0];
        let sigma = 0.3;
        let (mean, var) = ode_moments(&mu, sigma, 512);
        let (t_max, t_min) = (3.0f64, 0.01f64);
        let rho = ((sigma * sigma + t_min * t_min) / (sigma * sigma + t_max * t_max)).sqrt();
        let sd = t_max * rho;
        let se = sd / 512f64.sqrt();
        let var_sd = (2.0 * sd.powi(4) / 512.0f64).sqrt();
        for i in 0..4 {
            let m = mu[i] * (1.0 - rho);
            assert!((mean[i] - m).abs() < 3.0 * se, "pixel {i}: mean {} vs {m}", mean[i]);
            assert!((var[i] - sd * sd).abs() < 3.0 * var_sd, "pixel {i}: var {}", var[i]);
        }
    }

    #[test]
    fn one_step_stays_near_initialization() {
        let m = default_cpc(GridShape::new(8, 8).unwrap(), 4, 0.05).unwrap();
        let counter = ObjectCounter::new(m.subset_map(), 0.5).unwrap();
        let field = lcs_score(m.clone(), lemma1_rule(m.subset_map())).unwrap();
        let sch = Schedule::new(1.0, 0.999, 1, Spacing::Geometric).unwrap();
        let r = sample(&field, &ConditionSet::empty(), &sch, SamplerKind::ProbabilityFlowOde, Seed(3), &counter).unwrap();
        let mut rng = Seed(3).rng();
        let init: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (a, b) in r.image.values().iter().zip(&init) {
            assert!((a - b).abs() < 0.01);
        }
        assert_eq!(r.trajectory_norms.len(), 1);
    }

    #[test]
    fn lcs_generates_six_objects() {
        let m = default_cpc(GridShape::new(16, 16).unwrap(), 4, 0.05).unwrap();
        let counter = ObjectCounter::new(m.subset_map(), 0.5).unwrap();
        let field = lcs_score(m.clone(), lemma1_rule(m.subset_map())).unwrap();
        let conds: ConditionSet = [0, 3, 5, 10, 12, 15].into_iter().collect();
        for kind in [SamplerKind::ProbabilityFlowOde, SamplerKind::EulerMaruyamaSde] {
            let r = sample(&field, &conds, &Schedule::default(), kind, Seed(8), &counter).unwrap();
            assert_eq!(r.detected, conds.as_slice().to_vec());
            assert_eq!(r.object_count, r.peak_positions.len());
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = default_cpc(GridShape::new(8, 8).unwrap(), 4, 0.05).unwrap();
        let counter = ObjectCounter::new(m.subset_map(), 0.5).unwrap();
        let field = lcs_score(m.clone(), lemma1_rule(m.subset_map())).unwrap();
        let c = ConditionSet::single(2);
        let a = sample(&field, &c, &Schedule::default(), SamplerKind::EulerMaruyamaSde, Seed(5), &counter).unwrap();
        let b = sample(&field, &c, &Schedule::default(), SamplerKind::EulerMaruyamaSde, Seed(5), &counter).unwrap();
        assert_eq!(a, b);
    }

    struct Exploding;
    impl ScoreField for Exploding {
        fn shape(&self) -> GridShape {
            GridShape::new(4, 4).unwrap()
        }
        fn score(&self, _x: &[f64], _c: &ConditionSet, t: f64) -> Result<Vec<f64>> {
            Ok(vec![if t < 1.0 { f64::NAN } else { 0.0 }; 16])
        }
    }

    #[test]
    fn nan_reports_divergence_step() {
        let sm = make_subset_map(GridShape::new(4, 4).unwrap(), 2).unwrap();
        let counter = ObjectCounter::new(&sm, 0.5).unwrap();
        let sch = Schedule::new(2.0, 0.5, 4, Spacing::Linear).unwrap();
        // times 2.0, 1.625, 1.25, 0.875, 0.5: the fourth update sees t < 1
        let err = sample(&Exploding, &ConditionSet::empty(), &sch, SamplerKind::ProbabilityFlowOde, Seed(0), &counter).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 3 }));
    }

    fn fake(k: usize, cap: usize) -> GenerationReport {
        let conds: ConditionSet = (0..k).collect();
        let detected: Vec<usize> = (0..k.min(cap)).collect();
        GenerationReport {
            conditions: conds,
            image: Image::zeros(GridShape::new(1, 1).unwrap()),
            trajectory_norms: vec![],
            object_count: detected.len(),
            peak_positions: detected.iter().map(|&j| (0, j)).collect(),
            detected,
        }
    }

    fn protocol(overflow: OverflowRule) -> KmaxProtocol {
        KmaxProtocol {
            n_train: 3,
            k_list: (1..=8).collect(),
            n_samples: 8,
            extra_allowance: 0,
            overflow,
        }
    }

    #[test]
    fn kmax_exact_generator_reaches_max() {
        let r = kmax_evaluate(|k, _| Ok(fake(k, usize::MAX)), &protocol(OverflowRule::Range), Seed(0)).unwrap();
        assert_eq!(r.k_max, 8);
    }

    #[test]
    fn kmax_capped_generator_under_both_readings() {
        let range = kmax_evaluate(|k, _| Ok(fake(k, 3)), &protocol(OverflowRule::Range), Seed(0)).unwrap();
        // 3 objects lie in [K-2, K] for K = 4, 5 but not K = 6
        assert_eq!(range.k_max, 5);
        let strict = kmax_evaluate(|k, _| Ok(fake(k, 3)), &protocol(OverflowRule::RangeAndExact), Seed(0)).unwrap();
        assert_eq!(strict.k_max, 3);
    }

    #[test]
    fn kmax_rejects_bad_protocols() {
        let mut p = protocol(OverflowRule::Range);
        p.k_list.clear();
        assert!(matches!(kmax_evaluate(|k, _| Ok(fake(k, 9)), &p, Seed(0)), Err(Error::Domain(_))));
        let mut p = protocol(OverflowRule::Range);
        p.n_samples = 4;
        assert!(kmax_evaluate(|k, _| Ok(fake(k, 9)), &p, Seed(0)).is_err());
    }

    #[test]
    fn kmax_allowance_and_zero() {
        let mut p = protocol(OverflowRule::Range);
        p.k_list = vec![0, 1, 2];
        p.extra_allowance = 2;
        let gen = |k: usize, _| {
            let mut r = fake(k, 9);
            r.detected.push(20);
            r.object_count += 1;
            Ok(r)
        };
        let r = kmax_evaluate(gen, &p, Seed(0)).unwrap();
        assert_eq!(r.k_max, 2);
        assert_eq!(r.per_k[0].passed, None);
        p.extra_allowance = 0;
        assert_eq!(kmax_evaluate(gen, &p, Seed(0)).unwrap().k_max, 0);
    }

    #[test]
    fn separated_condition_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 1..=8 {
            let c = sample_condition_set(16, 16, k, 3, &mut rng).unwrap();
            assert_eq!(c.len(), k);
            for a in c.iter() {
                for b in c.iter().filter(|&b| b != a) {
                    let d = (a / 16).abs_diff(b / 16).max((a % 16).abs_diff(b % 16));
                    assert!(d >= 3);
                }
            }
        }
        assert!(sample_condition_set(2, 2, 2, 3, &mut rng).is_err());
    }
}
