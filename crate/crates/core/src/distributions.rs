//! Closed-form distribution families: axis-aligned Gaussian mixtures, conditional
//! projective compositions built from per-cell marginals, and synthetic labeled
//! training sets drawn from them.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{make_subset_map, ConditionSet, GridShape, Image, IndexSet, Seed, SubsetMap};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest component count a product mixture may expand to.
pub const MAX_PRODUCT_COMPONENTS: usize = 1 << 20;

/// Axis-aligned Gaussian (diagonal covariance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Gaussian {
    /// Isotropic Gaussian with standard deviation `sigma`.
    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Precondition(format!(
                "standard deviation must be positive, got {sigma}"
            )));
        }
        let var = vec![sigma * sigma; mean.len()];
        Self::diagonal(mean, var)
    }

    pub fn diagonal(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape {
                expected: mean.len(),
                got: var.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Domain("Gaussian mean must be finite".into()));
        }
        if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Precondition("variances must be positive".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// Log density with every variance inflated by `extra_var`.
    pub fn log_density_inflated(&self, x: &[f64], extra_var: f64) -> f64 {
        let mut acc = 0.0;
        for ((xi, mi), vi) in x.iter().zip(&self.mean).zip(&self.var) {
            let v = vi + extra_var;
            let d = xi - mi;
            acc += -0.5 * (LN_2PI + v.ln()) - 0.5 * d * d / v;
        }
        acc
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_inflated(x, 0.0)
    }

    fn restricted(&self, positions: &[usize]) -> Gaussian {
        Gaussian {
            mean: positions.iter().map(|&p| self.mean[p]).collect(),
            var: positions.iter().map(|&p| self.var[p]).collect(),
        }
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for ((o, m), v) in out.iter_mut().zip(&self.mean).zip(&self.var) {
            let z: f64 = StandardNormal.sample(rng);
            *o = m + v.sqrt() * z;
        }
    }
}

/// Finite mixture of [`Gaussian`] components with normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    /// Builds a mixture; weights must be positive and are renormalized to sum to one.
    pub fn new(components: Vec<(f64, Gaussian)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        let dim = components[0].1.dim();
        if let Some((_, g)) = components.iter().find(|(_, g)| g.dim() != dim) {
            return Err(Error::Shape {
                expected: dim,
                got: g.dim(),
            });
        }
        if components.iter().any(|(w, _)| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Domain("mixture weights must be positive".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        let (weights, components) = components.into_iter().map(|(w, g)| (w / total, g)).unzip();
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn single(g: Gaussian) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![g],
        }
    }

    /// Uniform-weight mixture.
    pub fn uniform(components: Vec<Gaussian>) -> Result<Self> {
        Self::new(components.into_iter().map(|g| (1.0, g)).collect())
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Gaussian)> {
        self.weights.iter().copied().zip(&self.components)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, g) in self.iter() {
            for (a, b) in m.iter_mut().zip(g.mean()) {
                *a += w * b;
            }
        }
        m
    }

    /// Log density after convolution with `N(0, t^2 I)`.
    pub fn log_density_noised(&self, x: &[f64], t: f64) -> f64 {
        let terms: Vec<f64> = self
            .iter()
            .map(|(w, g)| w.ln() + g.log_density_inflated(x, t * t))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_noised(x, 0.0)
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Marginal over the coordinates at `positions` (indices into this mixture's dimensions).
    pub fn marginal(&self, positions: &[usize]) -> Result<GaussianMixture> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.dim()) {
            return Err(Error::Index {
                index: p,
                len: self.dim(),
            });
        }
        Ok(Self {
            weights: self.weights.clone(),
            components: self.components.iter().map(|g| g.restricted(positions)).collect(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let k = if self.len() == 1 {
            0
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.len() - 1;
            for (k, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            pick
        };
        self.components[k].sample_into(rng, out);
    }

    /// Independent product of mixtures, each placed on its own pixel subset of an
    /// `n`-dimensional space. The subsets must partition `[0, n)`.
    pub fn product(parts: &[(&IndexSet, &GaussianMixture)], n: usize) -> Result<GaussianMixture> {
        let mut seen = vec![false; n];
        for (set, mix) in parts {
            if set.len() != mix.dim() {
                return Err(Error::Shape {
                    expected: set.len(),
                    got: mix.dim(),
                });
            }
            set.check_bounds(n)?;
            for i in set.iter() {
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Geometry(format!("pixel {i} assigned twice in product")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Geometry("product parts do not cover every pixel".into()));
        }
        let count = parts
            .iter()
            .try_fold(1usize, |acc, (_, m)| acc.checked_mul(m.len()))
            .filter(|&c| c <= MAX_PRODUCT_COMPONENTS)
            .ok_or_else(|| Error::Size("product mixture has too many components".into()))?;

        let mut weights = Vec::with_capacity(count);
        let mut components = Vec::with_capacity(count);
        let mut digits = vec![0usize; parts.len()];
        for _ in 0..count {
            let mut w = 1.0;
            let mut mean = vec![0.0; n];
            let mut var = vec![0.0; n];
            for ((set, mix), &k) in parts.iter().zip(&digits) {
                w *= mix.weights[k];
                let g = &mix.components[k];
                for (p, i) in set.iter().enumerate() {
                    mean[i] = g.mean[p];
                    var[i] = g.var[p];
                }
            }
            weights.push(w);
            components.push(Gaussian { mean, var });
            for (d, (_, mix)) in digits.iter_mut().zip(parts) {
                *d += 1;
                if *d < mix.len() {
                    break;
                }
                *d = 0;
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            weights,
            components,
        })
    }
}

/// Numerically stable `ln(sum(exp(v)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Convolves every component with `N(0, t^2 I)`: variances grow by `t^2`.
pub fn noise_distribution(d: &GaussianMixture, t: f64) -> Result<GaussianMixture> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Precondition(format!("noise level must be >= 0, got {t}")));
    }
    let t2 = t * t;
    Ok(GaussianMixture {
        weights: d.weights.clone(),
        components: d
            .components
            .iter()
            .map(|g| Gaussian {
                mean: g.mean.clone(),
                var: g.var.iter().map(|v| v + t2).collect(),
            })
            .collect(),
    })
}

/// A family of conditionals `p(x | c_J)` over full images, indexed by condition set.
pub trait ConditionalFamily: Sync {
    fn subsets(&self) -> &SubsetMap;

    fn conditional(&self, conds: &ConditionSet) -> Result<GaussianMixture>;

    fn num_conditions(&self) -> usize {
        self.subsets().len()
    }
}

/// Conditional projective composition with per-cell present/absent marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpcModel {
    subsets: SubsetMap,
    present: Vec<GaussianMixture>,
    absent: Vec<GaussianMixture>,
    background: Option<GaussianMixture>,
}

impl CpcModel {
    pub fn new(
        subsets: SubsetMap,
        present: Vec<GaussianMixture>,
        absent: Vec<GaussianMixture>,
        background: Option<GaussianMixture>,
    ) -> Result<Self> {
        let n = subsets.len();
        if present.len() != n || absent.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: present.len().min(absent.len()),
            });
        }
        for (j, cell) in subsets.cells().iter().enumerate() {
            for m in [&present[j], &absent[j]] {
                if m.dim() != cell.len() {
                    return Err(Error::Shape {
                        expected: cell.len(),
                        got: m.dim(),
                    });
                }
            }
        }
        match (&background, subsets.background().len()) {
            (None, 0) => {}
            (Some(b), len) if b.dim() == len && len > 0 => {}
            (b, len) => {
                return Err(Error::Shape {
                    expected: len,
                    got: b.as_ref().map_or(0, |b| b.dim()),
                })
            }
        }
        Ok(Self {
            subsets,
            present,
            absent,
            background,
        })
    }

    pub fn subset_map(&self) -> &SubsetMap {
        &self.subsets
    }

    pub fn shape(&self) -> GridShape {
        self.subsets.shape()
    }

    /// `p(x_{M_j} | c_j)`.
    pub fn present(&self, j: usize) -> &GaussianMixture {
        &self.present[j]
    }

    /// `p(x_{M_j} | no condition)`.
    pub fn absent(&self, j: usize) -> &GaussianMixture {
        &self.absent[j]
    }

    pub fn background(&self) -> Option<&GaussianMixture> {
        self.background.as_ref()
    }

    /// Marginal on `M_j` given whether `j` is active.
    pub fn cell_marginal(&self, j: usize, active: bool) -> &GaussianMixture {
        if active {
            &self.present[j]
        } else {
            &self.absent[j]
        }
    }

    /// Joint `p(x | c_J)` assembled as the product of subset marginals.
    pub fn cpc_conditional(&self, conds: &ConditionSet) -> Result<GaussianMixture> {
        conds.check_within(self.subsets.len())?;
        let mut parts: Vec<(&IndexSet, &GaussianMixture)> = self
            .subsets
            .cells()
            .iter()
            .enumerate()
            .map(|(j, cell)| (cell, self.cell_marginal(j, conds.contains(j))))
            .collect();
        if let Some(bg) = &self.background {
            parts.push((self.subsets.background(), bg));
        }
        GaussianMixture::product(&parts, self.shape().len())
    }

    /// Marginal `p(x_N | c_L)` over the pixels of `positions`, in their sorted order.
    pub fn marginal_on(&self, positions: &IndexSet, conds: &ConditionSet) -> Result<GaussianMixture> {
        conds.check_within(self.subsets.len())?;
        let n = self.shape().len();
        positions.check_bounds(n)?;
        if positions.is_empty() {
            return Err(Error::Domain("marginal over an empty pixel set".into()));
        }
        let mut local: Vec<(IndexSet, GaussianMixture)> = Vec::new();
        let mut add = |set: &IndexSet, mix: &GaussianMixture| -> Result<()> {
            let mut within = Vec::new();
            let mut rel = Vec::new();
            for (p, i) in set.iter().enumerate() {
                if let Some(r) = positions.position(i) {
                    within.push(p);
                    rel.push(r);
                }
            }
            if !within.is_empty() {
                local.push((IndexSet::from_unsorted(rel), mix.marginal(&within)?));
            }
            Ok(())
        };
        for (j, cell) in self.subsets.cells().iter().enumerate() {
            add(cell, self.cell_marginal(j, conds.contains(j)))?;
        }
        if let Some(bg) = &self.background {
            add(self.subsets.background(), bg)?;
        }
        let parts: Vec<(&IndexSet, &GaussianMixture)> = local.iter().map(|(s, m)| (s, m)).collect();
        GaussianMixture::product(&parts, positions.len())
    }

    /// Draws one image from `p(x | c_J)` subset by subset.
    pub fn sample_image<R: Rng + ?Sized>(&self, conds: &ConditionSet, rng: &mut R) -> Result<Image> {
        conds.check_within(self.subsets.len())?;
        let mut values = vec![0.0; self.shape().len()];
        let mut buf = Vec::new();
        for (j, cell) in self.subsets.cells().iter().enumerate() {
            let m = self.cell_marginal(j, conds.contains(j));
            buf.resize(cell.len(), 0.0);
            m.sample_into(rng, &mut buf);
            for (v, i) in buf.iter().zip(cell.iter()) {
                values[i] = *v;
            }
        }
        if let Some(bg) = &self.background {
            let set = self.subsets.background();
            buf.resize(set.len(), 0.0);
            bg.sample_into(rng, &mut buf);
            for (v, i) in buf.iter().zip(set.iter()) {
                values[i] = *v;
            }
        }
        Image::new(self.shape(), values)
    }
}

impl ConditionalFamily for CpcModel {
    fn subsets(&self) -> &SubsetMap {
        &self.subsets
    }

    fn conditional(&self, conds: &ConditionSet) -> Result<GaussianMixture> {
        self.cpc_conditional(conds)
    }
}

/// Object template over a `cell x cell` block, row-major:
/// `b(u, v) = exp(-((u - (c-1)/2)^2 + (v - (c-1)/2)^2) / 2)`.
pub fn bump_template(cell: usize) -> Vec<f64> {
    let center = (cell as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(cell * cell);
    for u in 0..cell {
        for v in 0..cell {
            let (du, dv) = (u as f64 - center, v as f64 - center);
            out.push((-(du * du + dv * dv) / 2.0).exp());
        }
    }
    out
}

/// Peak value of [`bump_template`].
pub fn bump_peak(cell: usize) -> f64 {
    bump_template(cell).into_iter().fold(0.0, f64::max)
}

/// Default location world: one isotropic Gaussian per cell, bump-mean when the
/// cell's conditioner is active and zero-mean otherwise.
pub fn default_cpc(shape: GridShape, cell: usize, sigma: f64) -> Result<CpcModel> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Precondition(format!("sigma must be positive, got {sigma}")));
    }
    let subsets = make_subset_map(shape, cell)?;
    let bump = bump_template(cell);
    let present = subsets
        .cells()
        .iter()
        .map(|_| Gaussian::isotropic(bump.clone(), sigma).map(GaussianMixture::single))
        .collect::<Result<Vec<_>>>()?;
    let absent = subsets
        .cells()
        .iter()
        .map(|c| Gaussian::isotropic(vec![0.0; c.len()], sigma).map(GaussianMixture::single))
        .collect::<Result<Vec<_>>>()?;
    CpcModel::new(subsets, present, absent, None)
}

/// A deliberately non-compositional family: with probability `lambda` every
/// pixel of the CPC conditional is shifted by the same offset, coupling all cells.
#[derive(Debug, Clone)]
pub struct ShiftPerturbedFamily {
    pub base: CpcModel,
    pub lambda: f64,
    pub shift: f64,
}

impl ConditionalFamily for ShiftPerturbedFamily {
    fn subsets(&self) -> &SubsetMap {
        self.base.subset_map()
    }

    fn conditional(&self, conds: &ConditionSet) -> Result<GaussianMixture> {
        let p = self.base.cpc_conditional(conds)?;
        if self.lambda <= 0.0 {
            return Ok(p);
        }
        let mut comps: Vec<(f64, Gaussian)> = p
            .iter()
            .map(|(w, g)| ((1.0 - self.lambda) * w, g.clone()))
            .collect();
        for (w, g) in p.iter() {
            let shifted = Gaussian {
                mean: g.mean.iter().map(|m| m + self.shift).collect(),
                var: g.var.clone(),
            };
            comps.push((self.lambda * w, shifted));
        }
        comps.retain(|(w, _)| *w > 0.0);
        GaussianMixture::new(comps)
    }
}

/// How the conditioner labels of a training image are produced from its objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingPolicy {
    AllLabels,
    SingleLabel,
    RandNumLabels,
    DropOneLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingItem {
    pub image: Image,
    pub true_conditions: ConditionSet,
    pub labeled_conditions: ConditionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub subsets: SubsetMap,
    pub policy: LabelingPolicy,
    pub seed: Seed,
    pub count_min: usize,
    pub count_max: usize,
    pub items: Vec<TrainingItem>,
}

impl TrainingSet {
    pub fn shape(&self) -> GridShape {
        self.subsets.shape()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Draws `n_items` labeled images: object count uniform in `[count_min, count_max]`,
/// distinct cells uniform, image from `p(x | c_true)`, labels per `policy`.
pub fn sample_training_set(
    model: &CpcModel,
    count_min: usize,
    count_max: usize,
    policy: LabelingPolicy,
    n_items: usize,
    seed: Seed,
) -> Result<TrainingSet> {
    let n_cond = model.subset_map().len();
    if n_items == 0 {
        return Err(Error::Domain("training set must contain at least one item".into()));
    }
    if !(1 <= count_min && count_min <= count_max && count_max <= n_cond) {
        return Err(Error::Precondition(format!(
            "object counts must satisfy 1 <= {count_min} <= {count_max} <= {n_cond}"
        )));
    }
    let mut rng = seed.rng();
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let count = rng.random_range(count_min..=count_max);
        let picked = sample_indices(&mut rng, n_cond, count).into_vec();
        let true_conditions: ConditionSet = picked.iter().copied().collect();
        let image = model.sample_image(&true_conditions, &mut rng)?;
        let labeled_conditions: ConditionSet = match policy {
            LabelingPolicy::AllLabels => true_conditions.clone(),
            LabelingPolicy::SingleLabel => {
                ConditionSet::single(picked[rng.random_range(0..count)])
            }
            LabelingPolicy::RandNumLabels => {
                let m = rng.random_range(1..=count);
                sample_indices(&mut rng, count, m)
                    .into_iter()
                    .map(|p| picked[p])
                    .collect()
            }
            LabelingPolicy::DropOneLabel => {
                let drop = rng.random_range(0..count);
                true_conditions.without(picked[drop])
            }
        };
        items.push(TrainingItem {
            image,
            true_conditions,
            labeled_conditions,
        });
    }
    Ok(TrainingSet {
        subsets: model.subset_map().clone(),
        policy,
        seed,
        count_min,
        count_max,
        items,
    })
}

/// Item selection rule of the memorizing learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Items whose labels equal the query; falls back to [`MatchRule::MaxOverlap`].
    Exact,
    /// Items maximizing `|labels ∩ query|`, all ties kept.
    MaxOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    Exact,
    Overlap(usize),
    /// No item overlaps a nonempty query; every item kept.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub items: Vec<usize>,
    pub kind: SelectionKind,
}

/// Selects items by comparing their label sets against `query`.
pub fn select_by_labels<'a, I>(labels: I, query: &ConditionSet, rule: MatchRule) -> Selection
where
    I: IntoIterator<Item = &'a ConditionSet>,
    I::IntoIter: Clone,
{
    let labels = labels.into_iter();
    if rule == MatchRule::Exact {
        let exact: Vec<usize> = labels
            .clone()
            .enumerate()
            .filter(|(_, l)| *l == query)
            .map(|(i, _)| i)
            .collect();
        if !exact.is_empty() {
            return Selection {
                items: exact,
                kind: SelectionKind::Exact,
            };
        }
    }
    let overlaps: Vec<usize> = labels.map(|l| l.intersection_size(query)).collect();
    let best = overlaps.iter().copied().max().unwrap_or(0);
    if best == 0 && !query.is_empty() {
        return Selection {
            items: (0..overlaps.len()).collect(),
            kind: SelectionKind::Fallback,
        };
    }
    Selection {
        items: overlaps
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == best)
            .map(|(i, _)| i)
            .collect(),
        kind: SelectionKind::Overlap(best),
    }
}

/// Training items chosen for the query `conds` under `rule`.
pub fn select_items(ts: &TrainingSet, conds: &ConditionSet, rule: MatchRule) -> Selection {
    select_by_labels(ts.items.iter().map(|it| &it.labeled_conditions), conds, rule)
}

/// The exact noised empirical measure of the selected items: a uniform mixture of
/// `N(x_i, t^2 I)` over the items matched to `conds`.
pub fn empirical_smoothed(
    ts: &TrainingSet,
    conds: &ConditionSet,
    rule: MatchRule,
    t: f64,
) -> Result<(GaussianMixture, Selection)> {
    if ts.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Precondition(format!("kernel bandwidth must be positive, got {t}")));
    }
    let sel = select_items(ts, conds, rule);
    let comps = sel
        .items
        .iter()
        .map(|&i| Gaussian::isotropic(ts.items[i].image.values().to_vec(), t))
        .collect::<Result<Vec<_>>>()?;
    Ok((GaussianMixture::uniform(comps)?, sel))
}

/// Histogram of object counts in a training set.
pub fn count_histogram(ts: &TrainingSet) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for it in &ts.items {
        *h.entry(it.true_conditions.len()).or_insert(0) += 1;
    }
    h
}

/// Standard normal log density, exposed for oracles.
pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean) * (x - mean) / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> CpcModel {
        default_cpc(GridShape::new(16, 16).unwrap(), 4, 0.05).unwrap()
    }

    #[test]
    fn bump_cell4_peak() {
        // b(1,1) with center 1.5: exp(-(0.25 + 0.25)/2) = exp(-0.25)
        let b = bump_template(4);
        let expect = (-0.25f64).exp();
        assert!((expect - 0.778_800_783_071_404_9).abs() < 1e-15);
        for (u, v) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert!((b[u * 4 + v] - expect).abs() < 1e-15);
        }
        assert!((bump_peak(4) - expect).abs() < 1e-15);
    }

    #[test]
    fn bump_cell1_is_one() {
        assert_eq!(bump_template(1), vec![1.0]);
    }

    #[test]
    fn default_cpc_rejects_zero_sigma() {
        let err = default_cpc(GridShape::new(16, 16).unwrap(), 4, 0.0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert!(matches!(
            default_cpc(GridShape::new(16, 16).unwrap(), 5, 0.05),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn conditional_empty_and_full() {
        let m = world();
        let empty = m.cpc_conditional(&ConditionSet::empty()).unwrap();
        assert_eq!(empty.len(), 1);
        assert!(empty.components()[0].mean().iter().all(|&v| v == 0.0));

        let full = m.cpc_conditional(&ConditionSet::all(16)).unwrap();
        let bump = bump_template(4);
        let sm = m.subset_map();
        for j in 0..16 {
            for (p, i) in sm.cell(j).iter().enumerate() {
                assert_eq!(full.components()[0].mean()[i], bump[p]);
            }
        }
        assert!(m.cpc_conditional(&ConditionSet::single(16)).is_err());
    }

    #[test]
    fn cross_covariance_between_cells_vanishes() {
        // 1e5 draws; empirical covariance of one pixel in M_0 and one in M_1
        let m = world();
        let conds: ConditionSet = [0, 1].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, b) = (m.subset_map().cell(0).as_slice()[5], m.subset_map().cell(1).as_slice()[5]);
        let n = 100_000;
        let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
        let mut prods = Vec::with_capacity(n);
        for _ in 0..n {
            let x = m.sample_image(&conds, &mut rng).unwrap();
            let (u, v) = (x.values()[a], x.values()[b]);
            sa += u;
            sb += v;
            sab += u * v;
            prods.push((u, v));
        }
        let nf = n as f64;
        let (ma, mb) = (sa / nf, sb / nf);
        let cov = sab / nf - ma * mb;
        let var_prod: f64 = prods
            .iter()
            .map(|(u, v)| ((u - ma) * (v - mb) - cov).powi(2))
            .sum::<f64>()
            / nf;
        let se = (var_prod / nf).sqrt();
        assert!(cov.abs() < 3.0 * se, "cov {cov} se {se}");
    }

    #[test]
    fn noise_distribution_examples() {
        let g = GaussianMixture::single(Gaussian::isotropic(vec![0.3], 0.05).unwrap());
        let n = noise_distribution(&g, 1.0).unwrap();
        assert!((n.components()[0].var()[0].sqrt() - 1.0025f64.sqrt()).abs() < 1e-15);
        assert!((1.0025f64.sqrt() - 1.001_249_219_725_039).abs() < 1e-12);
        assert_eq!(noise_distribution(&g, 0.0).unwrap(), g);
        let ab = noise_distribution(&noise_distribution(&g, 0.3).unwrap(), 0.4).unwrap();
        let direct = noise_distribution(&g, 0.5).unwrap();
        assert!((ab.components()[0].var()[0] - direct.components()[0].var()[0]).abs() < 1e-15);
        assert!(noise_distribution(&g, -1.0).is_err());
    }

    #[test]
    fn product_of_mixtures_counts_components() {
        let shape = GridShape::new(1, 4).unwrap();
        let a = IndexSet::from_unsorted(vec![0, 1]);
        let b = IndexSet::from_unsorted(vec![2, 3]);
        let two = GaussianMixture::new(vec![
            (0.3, Gaussian::isotropic(vec![0.0, 0.0], 0.1).unwrap()),
            (0.7, Gaussian::isotropic(vec![1.0, 1.0], 0.1).unwrap()),
        ])
        .unwrap();
        let three = GaussianMixture::uniform(vec![
            Gaussian::isotropic(vec![0.0, 1.0], 0.2).unwrap(),
            Gaussian::isotropic(vec![1.0, 0.0], 0.2).unwrap(),
            Gaussian::isotropic(vec![2.0, 2.0], 0.2).unwrap(),
        ])
        .unwrap();
        let p = GaussianMixture::product(&[(&a, &two), (&b, &three)], shape.len()).unwrap();
        assert_eq!(p.len(), 6);
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let x = [0.1, 0.2, 0.9, 0.1];
        let expect = two.log_density(&x[..2]) + three.log_density(&x[2..]);
        assert!((p.log_density(&x) - expect).abs() < 1e-12);
    }

    #[test]
    fn training_set_policies() {
        let m = world();
        let all = sample_training_set(&m, 1, 3, LabelingPolicy::AllLabels, 200, Seed(1)).unwrap();
        assert!(all.items.iter().all(|it| it.labeled_conditions == it.true_conditions));
        let single = sample_training_set(&m, 3, 3, LabelingPolicy::SingleLabel, 200, Seed(2)).unwrap();
        for it in &single.items {
            assert_eq!(it.labeled_conditions.len(), 1);
            assert!(it.labeled_conditions.is_subset(&it.true_conditions));
        }
        let drop = sample_training_set(&m, 1, 3, LabelingPolicy::DropOneLabel, 200, Seed(3)).unwrap();
        for it in &drop.items {
            assert_eq!(it.labeled_conditions.len() + 1, it.true_conditions.len());
            assert!(it.labeled_conditions.is_subset(&it.true_conditions));
        }
        let rand = sample_training_set(&m, 1, 3, LabelingPolicy::RandNumLabels, 200, Seed(4)).unwrap();
        for it in &rand.items {
            assert!(!it.labeled_conditions.is_empty());
            assert!(it.labeled_conditions.is_subset(&it.true_conditions));
        }
        assert!(sample_training_set(&m, 1, 3, LabelingPolicy::AllLabels, 0, Seed(1)).is_err());
        assert!(sample_training_set(&m, 0, 3, LabelingPolicy::AllLabels, 5, Seed(1)).is_err());
        assert!(sample_training_set(&m, 1, 17, LabelingPolicy::AllLabels, 5, Seed(1)).is_err());
    }

    #[test]
    fn training_counts_are_uniform() {
        // binomial sd for p=1/3, n=1e4 is 0.0047; 0.02 is > 4 sd
        let m = default_cpc(GridShape::new(8, 8).unwrap(), 4, 0.05).unwrap();
        let ts = sample_training_set(&m, 1, 3, LabelingPolicy::AllLabels, 10_000, Seed(7)).unwrap();
        let h = count_histogram(&ts);
        for c in 1..=3 {
            let f = h[&c] as f64 / 1e4;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "count {c} freq {f}");
        }
    }

    #[test]
    fn training_set_is_deterministic() {
        let m = world();
        let a = sample_training_set(&m, 1, 3, LabelingPolicy::SingleLabel, 50, Seed(9)).unwrap();
        let b = sample_training_set(&m, 1, 3, LabelingPolicy::SingleLabel, 50, Seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_exact_match() {
        let m = world();
        let ts = sample_training_set(&m, 1, 3, LabelingPolicy::AllLabels, 300, Seed(5)).unwrap();
        let q = ts.items[0].labeled_conditions.clone();
        let (mix, sel) = empirical_smoothed(&ts, &q, MatchRule::Exact, 0.5).unwrap();
        assert_eq!(sel.kind, SelectionKind::Exact);
        let expected: Vec<usize> = (0..ts.len())
            .filter(|&i| ts.items[i].labeled_conditions == q)
            .collect();
        assert_eq!(sel.items, expected);
        assert_eq!(mix.len(), expected.len());
        assert!(empirical_smoothed(&ts, &q, MatchRule::Exact, 0.0).is_err());
    }

    #[test]
    fn empirical_overlap_on_single_label_set() {
        // enumerate by hand: with one label per item, a two-label query keeps
        // exactly the items labeled with either of the two.
        let m = world();
        let ts = sample_training_set(&m, 1, 3, LabelingPolicy::SingleLabel, 20, Seed(3)).unwrap();
        let a = ts.items[0].labeled_conditions.iter().next().unwrap();
        let b = ts
            .items
            .iter()
            .map(|it| it.labeled_conditions.iter().next().unwrap())
            .find(|&l| l != a)
            .unwrap();
        let q: ConditionSet = [a, b].into_iter().collect();
        let sel = select_items(&ts, &q, MatchRule::Exact);
        assert_eq!(sel.kind, SelectionKind::Overlap(1));
        let mut brute = Vec::new();
        for (i, it) in ts.items.iter().enumerate() {
            let l = it.labeled_conditions.iter().next().unwrap();
            if l == a || l == b {
                brute.push(i);
            }
        }
        assert_eq!(sel.items, brute);
        for &i in &sel.items {
            assert_eq!(ts.items[i].labeled_conditions.intersection_size(&q), 1);
        }
    }

    #[test]
    fn empirical_empty_query_keeps_everything() {
        let m = world();
        let ts = sample_training_set(&m, 1, 3, LabelingPolicy::AllLabels, 30, Seed(3)).unwrap();
        let sel = select_items(&ts, &ConditionSet::empty(), MatchRule::Exact);
        assert_eq!(sel.items.len(), 30);
        assert_eq!(sel.kind, SelectionKind::Overlap(0));
    }

    #[test]
    fn empirical_disjoint_query_flags_fallback() {
        let m = world();
        let ts = sample_training_set(&m, 1, 1, LabelingPolicy::AllLabels, 5, Seed(3)).unwrap();
        let used: ConditionSet = ts.items.iter().flat_map(|it| it.labeled_conditions.iter()).collect();
        let unused = (0..16).find(|j| !used.contains(*j)).unwrap();
        let sel = select_items(&ts, &ConditionSet::single(unused), MatchRule::Exact);
        assert_eq!(sel.kind, SelectionKind::Fallback);
        assert_eq!(sel.items.len(), 5);
    }

    #[test]
    fn perturbed_family_weights_normalized() {
        let fam = ShiftPerturbedFamily {
            base: default_cpc(GridShape::new(4, 4).unwrap(), 2, 0.1).unwrap(),
            lambda: 0.1,
            shift: 0.5,
        };
        let p = fam.conditional(&ConditionSet::single(2)).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // The CPC joint factorizes into the product of its subset marginals.
            #[test]
            fn cpc_joint_factorizes(mask in 0u32..16, t in 0.0f64..2.0, seed in 0u64..1000) {
                let m = default_cpc(GridShape::new(4, 4).unwrap(), 2, 0.2).unwrap();
                let conds: ConditionSet = (0..4).filter(|j| mask >> j & 1 == 1).collect();
                let joint = noise_distribution(&m.cpc_conditional(&conds).unwrap(), t).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..16).map(|_| rng.random_range(-0.5..1.5)).collect();
                let mut sum = 0.0;
                for j in 0..4 {
                    let cell = m.subset_map().cell(j);
                    let xs: Vec<f64> = cell.iter().map(|i| x[i]).collect();
                    let marg = noise_distribution(m.cell_marginal(j, conds.contains(j)), t).unwrap();
                    sum += marg.log_density(&xs);
                }
                let lj = joint.log_density(&x);
                // 1e-10 relative on densities == 1e-10 absolute on log densities
                prop_assert!((lj - sum).abs() < 1e-10);
            }

            #[test]
            fn weights_stay_normalized(ws in proptest::collection::vec(0.01f64..5.0, 1..6), t in 0.0f64..3.0) {
                let comps = ws.iter().enumerate()
                    .map(|(k, w)| (*w, Gaussian::isotropic(vec![k as f64, 0.0], 0.3).unwrap()))
                    .collect();
                let m = GaussianMixture::new(comps).unwrap();
                let n = noise_distribution(&m, t).unwrap();
                let marg = n.marginal(&[1]).unwrap();
                for mix in [&m, &n, &marg] {
                    prop_assert!((mix.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
