//! Compositions that are only compositional after an invertible linear change of
//! variables `z = A x`: pushforwards, the feature-space local score, the gap
//! between noising and mapping, and the mean-difference cosine heuristic.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{log_sum_exp, CpcModel, Gaussian, GaussianMixture};
use crate::error::{Error, Result};
use crate::grid::{make_subset_map, ConditionSet, GridShape, Seed};
use crate::kl_lab::{kl, Axis, KlValue, LatticeDensity};
use crate::scores::{lcs_score, lemma1_rule, LcsScore, ScoreField};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Square invertible matrix with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertibleLinearMap {
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    orthogonal: bool,
}

impl InvertibleLinearMap {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return Err(Error::Shape { expected: n, got: matrix.ncols() });
        }
        let det = matrix.determinant();
        if !(det.abs() > 1e-12) {
            return Err(Error::Domain(format!("map is singular, det = {det:e}")));
        }
        let inverse = matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Domain("map is not invertible".into()))?;
        let eye = DMatrix::<f64>::identity(n, n);
        if (&matrix * &inverse - &eye).amax() > 1e-10 {
            return Err(Error::Domain("map is too ill-conditioned to invert within 1e-10".into()));
        }
        let orthogonal = (matrix.transpose() * &matrix - eye).amax() <= 1e-10;
        Ok(Self { matrix, inverse, orthogonal })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::new(DMatrix::identity(n, n))
    }

    /// Haar-distributed orthogonal matrix from a seeded Gaussian QR.
    pub fn orthogonal_seeded(n: usize, seed: Seed) -> Result<Self> {
        Self::new(random_orthogonal(n, &mut seed.rng()))
    }

    /// `I + s e_a e_b^T` with seeded `a != b` and `s` in `[0.5, 1.5]`.
    pub fn shear_seeded(n: usize, seed: Seed) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain("a shear needs at least two dimensions".into()));
        }
        let mut rng = seed.rng();
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        let mut m = DMatrix::identity(n, n);
        m[(a, b)] = rng.random_range(0.5..1.5);
        Self::new(m)
    }

    /// `Q (I + s U)` with seeded orthogonal `Q`, Gaussian `U / sqrt(n)` and `s = 0.6`.
    pub fn dense_seeded(n: usize, seed: Seed) -> Result<Self> {
        for attempt in 0..64 {
            let mut rng = seed.derive(attempt).rng();
            let q = random_orthogonal(n, &mut rng);
            let scale = 0.6 / (n as f64).sqrt();
            let u = DMatrix::from_fn(n, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
            let m = q * (DMatrix::identity(n, n) + u);
            if m.determinant().abs() > 1e-3 {
                return Self::new(m);
            }
        }
        Err(Error::Domain("no well-conditioned dense map found".into()))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn is_orthogonal(&self) -> bool {
        self.orthogonal
    }

    /// The map `z -> A^{-1} z`.
    pub fn inverted(&self) -> Self {
        Self {
            matrix: self.inverse.clone(),
            inverse: self.matrix.clone(),
            orthogonal: self.orthogonal,
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: len });
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok((&self.matrix * DVector::from_column_slice(x)).as_slice().to_vec())
    }

    pub fn apply_inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok((&self.inverse * DVector::from_column_slice(z)).as_slice().to_vec())
    }

    pub fn apply_transpose(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok((self.matrix.tr_mul(&DVector::from_column_slice(z))).as_slice().to_vec())
    }

    pub fn log_abs_det(&self) -> f64 {
        self.matrix.determinant().abs().ln()
    }
}

fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Gaussian with a full covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FullGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape { expected: mean.len(), got: cov.nrows() });
        }
        if Cholesky::new(cov.clone()).is_none() {
            return Err(Error::Domain("covariance is not positive definite".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn from_diagonal(g: &Gaussian) -> Self {
        Self {
            mean: DVector::from_column_slice(g.mean()),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(g.var())),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Covariance inflated by `t^2 I`.
    pub fn noised(&self, t: f64) -> Self {
        let n = self.dim();
        Self {
            mean: self.mean.clone(),
            cov: &self.cov + DMatrix::identity(n, n) * (t * t),
        }
    }

    fn chol(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.cov.clone()).ok_or_else(|| Error::Domain("covariance is not positive definite".into()))
    }

    /// Log density and score at `x`.
    fn log_density_and_score(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let ch = self.chol()?;
        let diff = x - &self.mean;
        let sol = ch.solve(&diff);
        let log_det: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = diff.dot(&sol);
        Ok((-0.5 * (quad + log_det + self.dim() as f64 * LN_2PI), -sol))
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density_and_score(&DVector::from_column_slice(x))?.0)
    }
}

/// Closed-form `KL(p || q)` between full Gaussians.
pub fn gaussian_kl(p: &FullGaussian, q: &FullGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape { expected: p.dim(), got: q.dim() });
    }
    let cp = p.chol()?;
    let cq = q.chol()?;
    let n = p.dim() as f64;
    let trace = cq.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let quad = diff.dot(&cq.solve(&diff));
    let ld = |c: &Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (trace + quad - n + ld(&cq) - ld(&cp)))
}

/// Mixture of full-covariance Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct FullMixture {
    weights: Vec<f64>,
    components: Vec<FullGaussian>,
}

impl FullMixture {
    pub fn new(weights: Vec<f64>, components: Vec<FullGaussian>) -> Result<Self> {
        if weights.len() != components.len() || components.is_empty() {
            return Err(Error::Shape { expected: components.len(), got: weights.len() });
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::Domain("mixture components differ in dimension".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || !total.is_finite() {
            return Err(Error::Domain("mixture weights must be positive".into()));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            components,
        })
    }

    pub fn from_diagonal(m: &GaussianMixture) -> Self {
        Self {
            weights: m.weights().to_vec(),
            components: m.components().iter().map(FullGaussian::from_diagonal).collect(),
        }
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

    pub fn components(&self) -> &[FullGaussian] {
        &self.components
    }

    pub fn noised(&self, t: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            components: self.components.iter().map(|c| c.noised(t)).collect(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            m += &c.mean * *w;
        }
        m.as_slice().to_vec()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check(x.len())?;
        let xv = DVector::from_column_slice(x);
        let terms = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| Ok(w.ln() + c.log_density_and_score(&xv)?.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// `grad log N_t[self](x)`.
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(x.len())?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::Precondition(format!("noise level must be nonnegative, got {t}")));
        }
        let xv = DVector::from_column_slice(x);
        let mut logs = Vec::with_capacity(self.len());
        let mut grads = Vec::with_capacity(self.len());
        for (w, c) in self.weights.iter().zip(&self.components) {
            let (l, g) = c.noised(t).log_density_and_score(&xv)?;
            logs.push(w.ln() + l);
            grads.push(g);
        }
        let z = log_sum_exp(&logs);
        let mut s = DVector::zeros(self.dim());
        for (l, g) in logs.iter().zip(&grads) {
            s += g * (l - z).exp();
        }
        Ok(s.as_slice().to_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &self.components[k];
        let ch = c.chol()?;
        let e = DVector::from_fn(c.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok((&c.mean + ch.l() * e).as_slice().to_vec())
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: len });
        }
        Ok(())
    }
}

/// `A # g`: mean `A mu`, covariance `A Sigma A^T`.
pub fn pushforward_gaussian(map: &InvertibleLinearMap, g: &FullGaussian) -> Result<FullGaussian> {
    map.check(g.dim())?;
    let a = map.matrix();
    Ok(FullGaussian {
        mean: a * &g.mean,
        cov: a * &g.cov * a.transpose(),
    })
}

/// Componentwise pushforward of a mixture.
pub fn pushforward(map: &InvertibleLinearMap, m: &FullMixture) -> Result<FullMixture> {
    Ok(FullMixture {
        weights: m.weights.clone(),
        components: m
            .components
            .iter()
            .map(|c| pushforward_gaussian(map, c))
            .collect::<Result<_>>()?,
    })
}

/// A CPC in feature coordinates `z = A x`.
#[derive(Debug, Clone)]
pub struct FcpcModel {
    pub base: CpcModel,
    pub map: InvertibleLinearMap,
}

impl FcpcModel {
    pub fn new(base: CpcModel, map: InvertibleLinearMap) -> Result<Self> {
        map.check(base.shape().len())?;
        Ok(Self { base, map })
    }

    /// `p(z | c_J)` in feature space.
    pub fn feature_conditional(&self, conds: &ConditionSet) -> Result<FullMixture> {
        Ok(FullMixture::from_diagonal(&self.base.cpc_conditional(conds)?))
    }

    /// `p(x | c_J) = A^{-1} # p(z | c_J)` in pixel space.
    pub fn pixel_conditional(&self, conds: &ConditionSet) -> Result<FullMixture> {
        pushforward(&self.map.inverted(), &self.feature_conditional(conds)?)
    }
}

/// Feature-space local conditional score: the cell-local rule applied to the base CPC.
pub struct FcpcScore {
    lcs: LcsScore,
    map: InvertibleLinearMap,
}

pub fn fcpc_score(model: &FcpcModel) -> Result<FcpcScore> {
    let rule = lemma1_rule(model.base.subset_map());
    Ok(FcpcScore {
        lcs: lcs_score(model.base.clone(), rule)?,
        map: model.map.clone(),
    })
}

impl FcpcScore {
    pub fn feature_score(&self, z: &[f64], conds: &ConditionSet, t: f64) -> Result<Vec<f64>> {
        self.lcs.score(z, conds, t)
    }

    /// Pixel-space score at `t = 0` by the chain rule: `A^T s_z(A x)`.
    pub fn pixel_score_clean(&self, x: &[f64], conds: &ConditionSet) -> Result<Vec<f64>> {
        let s = self.feature_score(&self.map.apply(x)?, conds, 0.0)?;
        self.map.apply_transpose(&s)
    }
}

/// Global feature-space score of `N_t[A # p(.|c_J)]` computed from the pixel model.
pub fn global_feature_score(model: &FcpcModel, z: &[f64], conds: &ConditionSet, t: f64) -> Result<Vec<f64>> {
    pushforward(&model.map, &model.pixel_conditional(conds)?)?.score(z, t)
}

/// Largest mixture dimension handled by lattice quadrature.
pub const MAX_QUADRATURE_DIM: usize = 2;
const QUAD_POINTS_1D: usize = 4001;
const QUAD_POINTS_2D: usize = 401;

/// `KL(N_t[A # p] || A # N_t[p])` for `p` in pixel coordinates.
pub fn commutation_gap(map: &InvertibleLinearMap, p: &FullMixture, t: f64) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Precondition(format!("noise level must be positive, got {t}")));
    }
    map.check(p.dim())?;
    let left = pushforward(map, p)?.noised(t);
    let right = pushforward(map, &p.noised(t))?;
    if p.len() == 1 {
        return gaussian_kl(&left.components[0], &right.components[0]);
    }
    if p.dim() > MAX_QUADRATURE_DIM {
        return Err(Error::Size(format!(
            "mixture gaps need quadrature, limited to {MAX_QUADRATURE_DIM} dimensions"
        )));
    }
    let points = if p.dim() == 1 { QUAD_POINTS_1D } else { QUAD_POINTS_2D };
    let axes = (0..p.dim())
        .map(|d| {
            let (lo, hi) = left
                .components
                .iter()
                .chain(&right.components)
                .map(|c| {
                    let sd = c.cov[(d, d)].sqrt();
                    (c.mean[d] - 10.0 * sd, c.mean[d] + 10.0 * sd)
                })
                .fold((f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
            Axis::new(lo, hi, points)
        })
        .collect::<Result<Vec<_>>>()?;
    let dens = |m: &FullMixture| LatticeDensity::from_fn(axes.clone(), |x| m.log_density(x).map_or(0.0, f64::exp));
    match kl(&dens(&left)?, &dens(&right)?)? {
        KlValue::Finite(v) => Ok(v),
        KlValue::Infinite => Err(Error::Domain("gap quadrature hit an empty region".into())),
    }
}

/// Off-diagonal classification thresholds.
pub const DISENTANGLED_MAX: f64 = 0.1;
pub const ENTANGLED_MIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disentanglement {
    Disentangled,
    Inconclusive,
    Entangled,
}

/// Cosines of mean-difference vectors `d_i = mu_i - mu_b`; `None` where `d_i = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub labels: Vec<usize>,
    pub values: Vec<Vec<Option<f64>>>,
    pub means: Vec<Vec<f64>>,
    pub background_mean: Vec<f64>,
}

impl CosineMatrix {
    pub fn from_means(labels: Vec<usize>, means: Vec<Vec<f64>>, background_mean: Vec<f64>) -> Result<Self> {
        if labels.len() < 2 || means.len() != labels.len() {
            return Err(Error::Precondition("need at least two conditions with means".into()));
        }
        if means.iter().any(|m| m.len() != background_mean.len()) {
            return Err(Error::Shape { expected: background_mean.len(), got: means[0].len() });
        }
        let diffs: Vec<Vec<f64>> = means
            .iter()
            .map(|m| m.iter().zip(&background_mean).map(|(a, b)| a - b).collect())
            .collect();
        let norms: Vec<f64> = diffs.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let values = (0..labels.len())
            .map(|i| {
                (0..labels.len())
                    .map(|j| {
                        if norms[i] == 0.0 || norms[j] == 0.0 {
                            return None;
                        }
                        let dot: f64 = diffs[i].iter().zip(&diffs[j]).map(|(a, b)| a * b).sum();
                        Some((dot / (norms[i] * norms[j])).clamp(-1.0, 1.0))
                    })
                    .collect()
            })
            .collect();
        Ok(Self { labels, values, means, background_mean })
    }

    /// Largest defined `|off-diagonal|`.
    pub fn max_off_diagonal(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let (true, Some(v)) = (i != j, v) {
                    best = Some(best.map_or(v.abs(), |b| b.max(v.abs())));
                }
            }
        }
        best
    }

    pub fn classify(&self) -> Option<Disentanglement> {
        self.max_off_diagonal().map(|m| {
            if m <= DISENTANGLED_MAX {
                Disentanglement::Disentangled
            } else if m >= ENTANGLED_MIN {
                Disentanglement::Entangled
            } else {
                Disentanglement::Inconclusive
            }
        })
    }
}

/// Where an observation lives relative to the model's feature coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Pixel,
    Feature,
}

/// Analytic cosine matrix over single-condition means, viewed in pixel or feature space.
pub fn mean_difference_cosine(model: &FcpcModel, view: View) -> Result<CosineMatrix> {
    let m = model.base.subset_map().len();
    let project = |v: Vec<f64>| -> Result<Vec<f64>> {
        match view {
            View::Feature => Ok(v),
            View::Pixel => model.map.apply_inverse(&v),
        }
    };
    let background = project(model.base.cpc_conditional(&ConditionSet::empty())?.mean())?;
    let means = (0..m)
        .map(|j| project(model.base.cpc_conditional(&ConditionSet::single(j))?.mean()))
        .collect::<Result<Vec<_>>>()?;
    CosineMatrix::from_means((0..m).collect(), means, background)
}

/// Empirical cosine matrix from per-condition samples, optionally mapped by `transform` first.
pub fn mean_difference_cosine_samples(
    per_condition: &[Vec<Vec<f64>>],
    background: &[Vec<f64>],
    transform: Option<&InvertibleLinearMap>,
) -> Result<CosineMatrix> {
    let mean_of = |xs: &[Vec<f64>]| -> Result<Vec<f64>> {
        let first = xs.first().ok_or_else(|| Error::Precondition("empty sample set".into()))?;
        let mut acc = vec![0.0; first.len()];
        for x in xs {
            if x.len() != acc.len() {
                return Err(Error::Shape { expected: acc.len(), got: x.len() });
            }
            acc.iter_mut().zip(x).for_each(|(a, v)| *a += v);
        }
        let mean: Vec<f64> = acc.into_iter().map(|a| a / xs.len() as f64).collect();
        match transform {
            Some(map) => map.apply(&mean),
            None => Ok(mean),
        }
    };
    let means = per_condition.iter().map(|s| mean_of(s)).collect::<Result<Vec<_>>>()?;
    CosineMatrix::from_means((0..per_condition.len()).collect(), means, mean_of(background)?)
}

/// Draws `n` pixel-space samples for each single condition and for the empty set.
pub fn sample_condition_means(model: &FcpcModel, n: usize, seed: Seed) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
    let draw = |conds: &ConditionSet, tag: u64| -> Result<Vec<Vec<f64>>> {
        let mut rng = seed.derive(tag).rng();
        (0..n)
            .map(|_| {
                let z = model.base.sample_image(conds, &mut rng)?;
                model.map.apply_inverse(z.values())
            })
            .collect()
    };
    let m = model.base.subset_map().len();
    let per = (0..m)
        .map(|j| draw(&ConditionSet::single(j), j as u64 + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok((per, draw(&ConditionSet::empty(), 0)?))
}

/// Small feature world: 4x4 grid of 2x2 cells, present cells a two-bump mixture.
pub fn feature_world(sigma: f64) -> Result<CpcModel> {
    let shape = GridShape::new(4, 4)?;
    let subsets = make_subset_map(shape, 2)?;
    let bump = crate::distributions::bump_template(2);
    let present = subsets
        .cells()
        .iter()
        .map(|_| {
            let strong = Gaussian::isotropic(bump.clone(), sigma)?;
            let weak = Gaussian::isotropic(bump.iter().map(|v| 0.5 * v).collect(), sigma)?;
            GaussianMixture::new(vec![(0.6, strong), (0.4, weak)])
        })
        .collect::<Result<Vec<_>>>()?;
    let absent = subsets
        .cells()
        .iter()
        .map(|c| Gaussian::isotropic(vec![0.0; c.len()], sigma).map(GaussianMixture::single))
        .collect::<Result<Vec<_>>>()?;
    CpcModel::new(subsets, present, absent, None)
}
