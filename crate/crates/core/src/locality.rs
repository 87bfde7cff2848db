//! Probes for where a denoiser looks: batch-averaged pixel Jacobians, conditioner
//! ablation, and energy-area metrics. Works for any [`ScoreField`].

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ConditionId, ConditionSet, GridShape, Seed};
use crate::scores::ScoreField;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Default number of noise draws per gradient map.
pub const DEFAULT_BATCH: usize = 16;
/// Default energy fraction for [`energy_area`].
pub const DEFAULT_FRACTION: f64 = 0.9;
/// Default probe noise levels.
pub const PROBE_TIMES: [f64; 4] = [0.05, 0.3, 1.0, 3.0];
/// A conditioner dominates when its influence is at least this multiple of the runner-up.
pub const DOMINANCE_RATIO: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMap {
    pub shape: GridShape,
    /// `(row, col)`.
    pub target: (usize, usize),
    pub t: f64,
    pub values: Vec<f64>,
}

impl GradientMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.shape.index(row, col)]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceVector {
    pub target: (usize, usize),
    pub t: f64,
    /// `(k, I_k)` in ascending `k`.
    pub values: Vec<(ConditionId, f64)>,
}

impl InfluenceVector {
    pub fn get(&self, k: ConditionId) -> Option<f64> {
        self.values.iter().find(|(c, _)| *c == k).map(|(_, v)| *v)
    }

    /// Largest influence and its ratio over the runner-up (infinite with one
    /// nonzero entry). `None` when every influence is zero.
    pub fn dominant(&self) -> Option<(ConditionId, f64)> {
        let mut sorted: Vec<(ConditionId, f64)> = self.values.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (k, top) = *sorted.first()?;
        if top <= 0.0 {
            return None;
        }
        let second = sorted.get(1).map_or(0.0, |s| s.1);
        Some((k, if second > 0.0 { top / second } else { f64::INFINITY }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityProfile {
    pub gradient_map: GradientMap,
    pub influence: InfluenceVector,
    /// `None` when the gradient map is identically zero.
    pub area90: Option<usize>,
    pub total_energy: f64,
}

/// Standard-normal draw `b` of a seeded stream.
pub fn noise_draw(seed: Seed, b: usize, n: usize) -> Vec<f64> {
    let mut rng = seed.derive(b as u64).rng();
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `d x0_hat[target] / d x_i` for every pixel by central differences, where
/// `x0_hat = x + t^2 s(x)`.
pub fn denoiser_jacobian_row<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    conds: &ConditionSet,
    t: f64,
    target: usize,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {h}")));
    }
    let n = field.shape().len();
    if x.len() != n {
        return Err(Error::Shape { expected: n, got: x.len() });
    }
    if target >= n {
        return Err(Error::Index { index: target, len: n });
    }
    let t2 = t * t;
    let mut row = vec![0.0; n];
    match field.local_view(conds, t, target)? {
        Some(view) => {
            let xs = view.gather(x);
            let base = view.log_terms(&xs);
            let mut shift = Vec::new();
            let mut terms = vec![0.0; base.len()];
            for (p, &i) in view.positions.iter().enumerate() {
                let mut eval = |to: f64| {
                    view.term_shift(p, xs[p], to, &mut shift);
                    for ((o, b), s) in terms.iter_mut().zip(&base).zip(&shift) {
                        *o = b + s;
                    }
                    let xt = if p == view.target_pos { to } else { xs[view.target_pos] };
                    xt + t2 * view.score_from_terms(&terms, xt)
                };
                let up = eval(xs[p] + h);
                let down = eval(xs[p] - h);
                row[i] = (up - down) / (2.0 * h);
            }
        }
        None => {
            let mut probe = x.to_vec();
            for i in 0..n {
                let orig = probe[i];
                probe[i] = orig + h;
                let up = probe[target] + t2 * field.score_at(&probe, conds, t, target)?;
                probe[i] = orig - h;
                let down = probe[target] + t2 * field.score_at(&probe, conds, t, target)?;
                probe[i] = orig;
                row[i] = (up - down) / (2.0 * h);
            }
        }
    }
    Ok(row)
}

/// `G_ij = (1/B) sum_b |d x0_hat[target] / d x_t[i, j]|` over draws `x_t = x + t eps_b`.
#[allow(clippy::too_many_arguments)]
pub fn pixel_gradient_map<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    conds: &ConditionSet,
    t: f64,
    target: (usize, usize),
    batch: usize,
    seed: Seed,
    h: f64,
) -> Result<GradientMap> {
    if batch == 0 {
        return Err(Error::Precondition("batch must be at least 1".into()));
    }
    let shape = field.shape();
    if target.0 >= shape.height || target.1 >= shape.width {
        return Err(Error::Index { index: target.0 * shape.width + target.1, len: shape.len() });
    }
    let n = shape.len();
    let ti = shape.index(target.0, target.1);
    let mut acc = vec![0.0; n];
    for b in 0..batch {
        let eps = noise_draw(seed, b, n);
        let xt: Vec<f64> = x.iter().zip(&eps).map(|(a, e)| a + t * e).collect();
        let row = denoiser_jacobian_row(field, &xt, conds, t, ti, h)?;
        for (a, r) in acc.iter_mut().zip(&row) {
            *a += r.abs();
        }
    }
    acc.iter_mut().for_each(|a| *a /= batch as f64);
    Ok(GradientMap { shape, target, t, values: acc })
}

/// `I_k = |x0_hat(J)[target] - x0_hat(J \ {k})[target]|` for each `k` in `J`, at `x`.
pub fn conditional_influence<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    conds: &ConditionSet,
    t: f64,
    target: (usize, usize),
) -> Result<InfluenceVector> {
    let shape = field.shape();
    if target.0 >= shape.height || target.1 >= shape.width {
        return Err(Error::Index { index: target.0 * shape.width + target.1, len: shape.len() });
    }
    let ti = shape.index(target.0, target.1);
    let full = field.score_at(x, conds, t, ti)?;
    let values = conds
        .iter()
        .map(|k| {
            let ablated = field.score_at(x, &conds.without(k), t, ti)?;
            Ok((k, (t * t * (full - ablated)).abs()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InfluenceVector { target, t, values })
}

/// Smallest odd side `s` whose `s x s` square around the target, shifted to stay
/// inside the grid, holds at least `fraction` of `sum G^2`. Reported sides are
/// capped at `max(height, width)`; `None` for an all-zero map.
pub fn energy_area(map: &GradientMap, fraction: f64) -> Result<Option<usize>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Precondition(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let total = total_energy(map);
    if total == 0.0 {
        return Ok(None);
    }
    let (h, w) = (map.shape.height, map.shape.width);
    let (r, c) = map.target;
    let window = |s: usize, centre: usize, len: usize| {
        let side = s.min(len);
        let start = centre.saturating_sub(s / 2).min(len - side);
        start..start + side
    };
    let mut s = 1;
    loop {
        let mut e = 0.0;
        for i in window(s, r, h) {
            for j in window(s, c, w) {
                let g = map.get(i, j);
                e += g * g;
            }
        }
        if e >= fraction * total || (s >= h && s >= w) {
            return Ok(Some(s.min(h.max(w))));
        }
        s += 2;
    }
}

/// `sum_ij G_ij^2`.
pub fn total_energy(map: &GradientMap) -> f64 {
    map.values.iter().map(|g| g * g).sum()
}

/// Full profile at one target.
#[allow(clippy::too_many_arguments)]
pub fn locality_profile<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    conds: &ConditionSet,
    t: f64,
    target: (usize, usize),
    batch: usize,
    seed: Seed,
) -> Result<LocalityProfile> {
    let gradient_map = pixel_gradient_map(field, x, conds, t, target, batch, seed, FD_STEP)?;
    // influence is read at the first noised draw of the same stream
    let eps = noise_draw(seed, 0, x.len());
    let xt: Vec<f64> = x.iter().zip(&eps).map(|(a, e)| a + t * e).collect();
    let influence = conditional_influence(field, &xt, conds, t, target)?;
    Ok(LocalityProfile {
        area90: energy_area(&gradient_map, DEFAULT_FRACTION)?,
        total_energy: total_energy(&gradient_map),
        gradient_map,
        influence,
    })
}
