//! Deterministic quadrature checks: KL on truncated lattices, Gaussian smoothing
//! by direct convolution, the heat equation, dKL/dt, sup-KL curves, and exact
//! enumeration over small discrete joints.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ConditionSet, Seed};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Renormalization corrections at or above this fail with a resolution error.
pub const MAX_RENORM_CORRECTION: f64 = 1e-6;
/// Kernel truncation, in standard deviations.
const KERNEL_REACH: f64 = 10.0;
/// Required margin beyond the support, in standard deviations.
const SUPPORT_MARGIN: f64 = 6.0;

/// Divergence value that keeps infinities explicit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlValue {
    Finite(f64),
    Infinite,
}

impl KlValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            KlValue::Finite(v) => Some(v),
            KlValue::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, KlValue::Infinite)
    }
}

/// Uniform lattice `lo, lo + dx, ..., hi` with `points` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo && points >= 3) {
            return Err(Error::Domain(format!(
                "lattice axis needs lo < hi and >= 3 points, got [{lo}, {hi}] x {points}"
            )));
        }
        Ok(Self { lo, hi, points })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.spacing()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.node(i)).collect()
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        let dx = self.spacing();
        if i == 0 || i + 1 == self.points {
            0.5 * dx
        } else {
            dx
        }
    }

    /// This axis widened by whole steps until it covers `[lo, hi]`.
    fn extended_to(&self, lo: f64, hi: f64) -> Axis {
        let dx = self.spacing();
        let left = if lo < self.lo { ((self.lo - lo) / dx).ceil() as usize } else { 0 };
        let right = if hi > self.hi { ((hi - self.hi) / dx).ceil() as usize } else { 0 };
        Axis {
            lo: self.lo - left as f64 * dx,
            hi: self.hi + right as f64 * dx,
            points: self.points + left + right,
        }
    }

    fn same_nodes(&self, other: &Axis) -> bool {
        self.points == other.points
            && (self.lo - other.lo).abs() <= 1e-12 * self.spacing()
            && (self.hi - other.hi).abs() <= 1e-12 * self.spacing()
    }
}

/// Nonnegative density on a 1-D or 2-D lattice, row-major with axis 0 outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeDensity {
    axes: Vec<Axis>,
    values: Vec<f64>,
}

impl LatticeDensity {
    /// Values must already integrate to one within `1e-8`.
    pub fn new(axes: Vec<Axis>, values: Vec<f64>) -> Result<Self> {
        let d = Self::raw(axes, values)?;
        let z = d.integral();
        if (z - 1.0).abs() > 1e-8 {
            return Err(Error::Domain(format!("lattice density integrates to {z}")));
        }
        Ok(d)
    }

    fn raw(axes: Vec<Axis>, values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::Domain(format!("lattice must be 1-D or 2-D, got {} axes", axes.len())));
        }
        let len: usize = axes.iter().map(|a| a.points).product();
        if values.len() != len {
            return Err(Error::Shape {
                expected: len,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("lattice values must be finite and nonnegative".into()));
        }
        Ok(Self { axes, values })
    }

    /// Samples `f` on the lattice and normalizes by the trapezoid integral.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(axes: Vec<Axis>, f: F) -> Result<Self> {
        let nodes: Vec<Vec<f64>> = axes.iter().map(|a| a.nodes()).collect();
        let values: Vec<f64> = match axes.len() {
            1 => nodes[0].iter().map(|&x| f(&[x])).collect(),
            2 => {
                let mut v = Vec::with_capacity(axes[0].points * axes[1].points);
                for &x0 in &nodes[0] {
                    for &x1 in &nodes[1] {
                        v.push(f(&[x0, x1]));
                    }
                }
                v
            }
            n => return Err(Error::Domain(format!("lattice must be 1-D or 2-D, got {n} axes"))),
        };
        let mut d = Self::raw(axes, values)?;
        let z = d.integral();
        if !(z > 0.0) {
            return Err(Error::Domain("density has zero mass on the lattice".into()));
        }
        d.values.iter_mut().for_each(|v| *v /= z);
        Ok(d)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Trapezoid weight of flat index `k`.
    pub fn weight(&self, k: usize) -> f64 {
        match self.axes.len() {
            1 => self.axes[0].weight(k),
            _ => {
                let n1 = self.axes[1].points;
                self.axes[0].weight(k / n1) * self.axes[1].weight(k % n1)
            }
        }
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().enumerate().map(|(k, v)| self.weight(k) * v).sum()
    }

    pub fn same_lattice(&self, other: &LatticeDensity) -> bool {
        self.axes.len() == other.axes.len()
            && self.axes.iter().zip(&other.axes).all(|(a, b)| a.same_nodes(b))
    }

    /// Node-index range per axis holding values above `1e-16 * max`.
    fn support(&self) -> Vec<(f64, f64)> {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        let cut = max * 1e-16;
        let mut lo = vec![usize::MAX; self.dims()];
        let mut hi = vec![0usize; self.dims()];
        let n1 = if self.dims() == 2 { self.axes[1].points } else { 1 };
        for (k, v) in self.values.iter().enumerate() {
            if *v > cut {
                let idx = if self.dims() == 2 { [k / n1, k % n1] } else { [k, 0] };
                for d in 0..self.dims() {
                    lo[d] = lo[d].min(idx[d]);
                    hi[d] = hi[d].max(idx[d]);
                }
            }
        }
        (0..self.dims())
            .map(|d| (self.axes[d].node(lo[d]), self.axes[d].node(hi[d])))
            .collect()
    }

    /// Axes covering this density's support plus `6t` on every side.
    pub fn required_axes(&self, t: f64) -> Vec<Axis> {
        self.support()
            .into_iter()
            .zip(&self.axes)
            .map(|((lo, hi), a)| a.extended_to(lo - SUPPORT_MARGIN * t, hi + SUPPORT_MARGIN * t))
            .collect()
    }
}

/// Axis-wise union of lattices that share spacing and phase.
pub fn union_axes(sets: &[Vec<Axis>]) -> Result<Vec<Axis>> {
    let first = sets.first().ok_or_else(|| Error::Domain("no lattices to merge".into()))?;
    let mut out = first.clone();
    for s in &sets[1..] {
        if s.len() != out.len() {
            return Err(Error::Domain("lattices differ in dimension".into()));
        }
        for (o, a) in out.iter_mut().zip(s) {
            if (o.spacing() - a.spacing()).abs() > 1e-12 * o.spacing() {
                return Err(Error::Domain("lattices differ in spacing".into()));
            }
            *o = o.extended_to(a.lo, a.hi);
        }
    }
    Ok(out)
}

/// `KL(q || r)` by trapezoid quadrature on a shared lattice.
pub fn kl(q: &LatticeDensity, r: &LatticeDensity) -> Result<KlValue> {
    if !q.same_lattice(r) {
        return Err(Error::Domain("KL needs both densities on the same lattice".into()));
    }
    let mut acc = 0.0;
    for (k, (a, b)) in q.values.iter().zip(&r.values).enumerate() {
        if *a > 0.0 {
            if *b <= 0.0 {
                return Ok(KlValue::Infinite);
            }
            acc += q.weight(k) * a * (a / b).ln();
        }
    }
    Ok(KlValue::Finite(acc))
}

#[derive(Debug, Clone, Copy)]
enum Kernel {
    Density,
    /// `d/dx` of the smoothed density: `N(x - y) (y - x) / t^2`.
    Slope,
}

/// Convolves values along one axis onto `out` nodes.
fn convolve_axis(
    input: &[f64],
    shape: (usize, usize),
    axis: usize,
    from: &Axis,
    to: &Axis,
    t: f64,
    kernel: Kernel,
) -> Vec<f64> {
    let (n0, n1) = shape;
    let dx = from.spacing();
    let reach = KERNEL_REACH * t;
    let inv_t = 1.0 / t;
    let taps: Vec<(usize, Vec<f64>)> = (0..to.points)
        .map(|o| {
            let x = to.node(o);
            let lo = (((x - reach - from.lo) / dx).ceil().max(0.0)) as usize;
            let hi_f = ((x + reach - from.lo) / dx).floor();
            if hi_f < 0.0 || lo >= from.points {
                return (0, Vec::new());
            }
            let hi = (hi_f as usize).min(from.points - 1);
            let w = (lo..=hi)
                .map(|i| {
                    let y = from.node(i);
                    let z = (x - y) * inv_t;
                    let g = INV_SQRT_2PI * inv_t * (-0.5 * z * z).exp() * from.weight(i);
                    match kernel {
                        Kernel::Density => g,
                        Kernel::Slope => g * (y - x) * inv_t * inv_t,
                    }
                })
                .collect();
            (lo, w)
        })
        .collect();
    match axis {
        0 => {
            let mut out = vec![0.0; to.points * n1];
            for (o, (lo, w)) in taps.iter().enumerate() {
                let row = &mut out[o * n1..(o + 1) * n1];
                for (k, wk) in w.iter().enumerate() {
                    let src = &input[(lo + k) * n1..(lo + k + 1) * n1];
                    for (r, s) in row.iter_mut().zip(src) {
                        *r += wk * s;
                    }
                }
            }
            out
        }
        _ => {
            let mut out = vec![0.0; n0 * to.points];
            for r in 0..n0 {
                let src = &input[r * n1..(r + 1) * n1];
                for (o, (lo, w)) in taps.iter().enumerate() {
                    out[r * to.points + o] = w.iter().zip(&src[*lo..]).map(|(a, b)| a * b).sum();
                }
            }
            out
        }
    }
}

/// Unnormalized smoothing of `q` onto `axes`, one kernel choice per axis.
fn smooth(q: &LatticeDensity, t: f64, axes: &[Axis], kernels: &[Kernel]) -> Vec<f64> {
    match q.dims() {
        1 => convolve_axis(&q.values, (q.axes[0].points, 1), 0, &q.axes[0], &axes[0], t, kernels[0]),
        _ => {
            let (n0, n1) = (q.axes[0].points, q.axes[1].points);
            let a = convolve_axis(&q.values, (n0, n1), 1, &q.axes[1], &axes[1], t, kernels[1]);
            convolve_axis(&a, (n0, axes[1].points), 0, &q.axes[0], &axes[0], t, kernels[0])
        }
    }
}

/// Result of a convolution with the renormalization it needed.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub density: LatticeDensity,
    /// `|1 - mass|` before renormalization.
    pub correction: f64,
    mass: f64,
}

/// `N_t[q]` by direct quadrature onto `axes`, renormalized.
pub fn convolve_gaussian_onto(q: &LatticeDensity, t: f64, axes: &[Axis]) -> Result<Smoothed> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Precondition(format!("noise level must be positive, got {t}")));
    }
    if axes.len() != q.dims() {
        return Err(Error::Domain("output lattice dimension mismatch".into()));
    }
    let values = smooth(q, t, axes, &[Kernel::Density; 2]);
    let raw = LatticeDensity::raw(axes.to_vec(), values)?;
    let mass = raw.integral();
    let correction = (1.0 - mass).abs();
    if !(correction < MAX_RENORM_CORRECTION) {
        return Err(Error::Resolution { correction });
    }
    let values = raw.values.iter().map(|v| v / mass).collect();
    Ok(Smoothed {
        density: LatticeDensity {
            axes: axes.to_vec(),
            values,
        },
        correction,
        mass,
    })
}

/// `N_t[q]` on a lattice extended to cover the support plus `6t`.
pub fn convolve_gaussian(q: &LatticeDensity, t: f64) -> Result<Smoothed> {
    let axes = q.required_axes(t);
    convolve_gaussian_onto(q, t, &axes)
}

/// Gradient of the renormalized `N_t[q]`, one vector per lattice dimension.
pub fn smoothed_gradient(q: &LatticeDensity, s: &Smoothed, t: f64) -> Vec<Vec<f64>> {
    let axes = s.density.axes();
    (0..q.dims())
        .map(|d| {
            let mut kernels = [Kernel::Density; 2];
            kernels[d] = Kernel::Slope;
            smooth(q, t, axes, &kernels)
                .into_iter()
                .map(|v| v / s.mass)
                .collect()
        })
        .collect()
}

/// Max-norm of `d/dt N_t[q] - t lap N_t[q]` on interior nodes.
pub fn heat_fact_residual(q: &LatticeDensity, t: f64, h_t: f64) -> Result<HeatResidual> {
    if !(t > 0.0 && h_t > 0.0 && h_t < t) {
        return Err(Error::Precondition(format!("need 0 < h_t < t, got t = {t}, h_t = {h_t}")));
    }
    let axes = q.required_axes(t + h_t);
    let plus = convolve_gaussian_onto(q, t + h_t, &axes)?.density;
    let minus = convolve_gaussian_onto(q, t - h_t, &axes)?.density;
    let mid = convolve_gaussian_onto(q, t, &axes)?.density;
    let (n0, n1) = (axes[0].points, axes.get(1).map_or(1, |a| a.points));
    let inv0 = 1.0 / axes[0].spacing().powi(2);
    let inv1 = axes.get(1).map_or(0.0, |a| 1.0 / a.spacing().powi(2));
    let f = &mid.values;
    let mut residual: f64 = 0.0;
    let mut dt_max: f64 = 0.0;
    let (lo1, hi1) = if n1 == 1 { (0, 1) } else { (1, n1 - 1) };
    for i in 1..n0 - 1 {
        for j in lo1..hi1 {
            let k = i * n1 + j;
            let mut lap = (f[k + n1] - 2.0 * f[k] + f[k - n1]) * inv0;
            if n1 > 1 {
                lap += (f[k + 1] - 2.0 * f[k] + f[k - 1]) * inv1;
            }
            let dt = (plus.values[k] - minus.values[k]) / (2.0 * h_t);
            residual = residual.max((dt - t * lap).abs());
            dt_max = dt_max.max(dt.abs());
        }
    }
    Ok(HeatResidual { residual, dt_max })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatResidual {
    pub residual: f64,
    /// `max |d/dt N_t[q]|` over the same nodes, for relative bounds.
    pub dt_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DklDt {
    pub fd_derivative: f64,
    pub formula_value: f64,
    pub kl: f64,
}

impl DklDt {
    pub fn relative_error(&self) -> f64 {
        (self.fd_derivative - self.formula_value).abs() / self.formula_value.abs()
    }
}

/// Central difference of `t -> KL(N_t q || N_t r)` against
/// `-t E_{N_t q}[|grad log(N_t q / N_t r)|^2]`.
pub fn dkl_dt_check(q: &LatticeDensity, r: &LatticeDensity, t: f64, h_t: f64) -> Result<DklDt> {
    if !q.same_lattice(r) {
        return Err(Error::Domain("q and r must share a lattice".into()));
    }
    if !(t > 0.0 && h_t > 0.0 && h_t < t) {
        return Err(Error::Precondition(format!("need 0 < h_t < t, got t = {t}, h_t = {h_t}")));
    }
    let axes = union_axes(&[q.required_axes(t + h_t), r.required_axes(t + h_t)])?;
    let kl_at = |s: f64| -> Result<f64> {
        let a = convolve_gaussian_onto(q, s, &axes)?.density;
        let b = convolve_gaussian_onto(r, s, &axes)?.density;
        kl(&a, &b)?
            .finite()
            .ok_or_else(|| Error::Domain("smoothed KL is infinite".into()))
    };
    let fd = (kl_at(t + h_t)? - kl_at(t - h_t)?) / (2.0 * h_t);
    let sq = convolve_gaussian_onto(q, t, &axes)?;
    let sr = convolve_gaussian_onto(r, t, &axes)?;
    let gq = smoothed_gradient(q, &sq, t);
    let gr = smoothed_gradient(r, &sr, t);
    let (fq, fr) = (sq.density.values(), sr.density.values());
    let mut expectation = 0.0;
    let mut kl_t = 0.0;
    for k in 0..fq.len() {
        if fq[k] <= 0.0 || fr[k] <= 0.0 {
            continue;
        }
        let mut g2 = 0.0;
        for d in 0..q.dims() {
            let g = gq[d][k] / fq[k] - gr[d][k] / fr[k];
            g2 += g * g;
        }
        let w = sq.density.weight(k);
        expectation += w * fq[k] * g2;
        kl_t += w * fq[k] * (fq[k] / fr[k]).ln();
    }
    Ok(DklDt {
        fd_derivative: fd,
        formula_value: -t * expectation,
        kl: kl_t,
    })
}

/// Law of a continuous `x` given a finite `y`.
#[derive(Debug, Clone, PartialEq)]
pub enum XLaw {
    /// One lattice density per state of `y`, all on one lattice.
    Lattice(Vec<LatticeDensity>),
    /// Point masses: `probs[y][a]` at `positions[a]`.
    Atoms { positions: Vec<f64>, probs: Vec<Vec<f64>> },
}

/// A joint of `(x, y)` with finite `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPair {
    pub prior_y: Vec<f64>,
    pub law: XLaw,
}

impl ConditionalPair {
    /// Reads a two-variable joint with `x` first; `x` states sit at `positions`.
    pub fn from_joint(joint: &DiscreteJoint, positions: Vec<f64>) -> Result<Self> {
        let ar = joint.arities();
        if ar.len() != 2 || ar[0] != positions.len() {
            return Err(Error::Domain("pair joint needs arities [|x|, |y|] matching positions".into()));
        }
        let (nx, ny) = (ar[0], ar[1]);
        let p = joint.probs();
        let prior_y: Vec<f64> = (0..ny).map(|y| (0..nx).map(|x| p[x * ny + y]).sum()).collect();
        if prior_y.iter().any(|&w| w <= 0.0) {
            return Err(Error::Domain("every y state needs positive mass".into()));
        }
        let probs = (0..ny)
            .map(|y| (0..nx).map(|x| p[x * ny + y] / prior_y[y]).collect())
            .collect();
        Ok(Self {
            prior_y,
            law: XLaw::Atoms { positions, probs },
        })
    }
}

/// Nodes per unit of `t` for exact atom smoothing.
const ATOM_LATTICE_POINTS: usize = 4001;

/// `sup_y KL(N_t[p](x) || N_t[p](x | y))` for each `t`.
pub fn sup_kl_curve(pair: &ConditionalPair, t_list: &[f64]) -> Result<Vec<f64>> {
    let ny = pair.prior_y.len();
    let total: f64 = pair.prior_y.iter().sum();
    if ny == 0 || (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain("prior over y must be a distribution".into()));
    }
    let mut out = Vec::with_capacity(t_list.len());
    for &t in t_list {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Precondition(format!("noise level must be positive, got {t}")));
        }
        let conds: Vec<LatticeDensity> = match &pair.law {
            XLaw::Lattice(ds) => {
                if ds.len() != ny {
                    return Err(Error::Shape { expected: ny, got: ds.len() });
                }
                let axes = union_axes(&ds.iter().map(|d| d.required_axes(t)).collect::<Vec<_>>())?;
                ds.iter()
                    .map(|d| convolve_gaussian_onto(d, t, &axes).map(|s| s.density))
                    .collect::<Result<_>>()?
            }
            XLaw::Atoms { positions, probs } => {
                if probs.len() != ny {
                    return Err(Error::Shape { expected: ny, got: probs.len() });
                }
                let lo = positions.iter().copied().fold(f64::INFINITY, f64::min) - 8.0 * t;
                let hi = positions.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 8.0 * t;
                let axis = Axis::new(lo, hi, ATOM_LATTICE_POINTS)?;
                probs
                    .iter()
                    .map(|py| {
                        LatticeDensity::from_fn(vec![axis], |x| {
                            py.iter()
                                .zip(positions)
                                .map(|(p, a)| {
                                    let z = (x[0] - a) / t;
                                    p * (-0.5 * z * z).exp()
                                })
                                .sum()
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        let mut marginal = vec![0.0; conds[0].values().len()];
        for (w, c) in pair.prior_y.iter().zip(&conds) {
            for (m, v) in marginal.iter_mut().zip(c.values()) {
                *m += w * v;
            }
        }
        let marginal = LatticeDensity::raw(conds[0].axes().to_vec(), marginal)?;
        let mut best: f64 = 0.0;
        for c in &conds {
            match kl(&marginal, c)? {
                KlValue::Finite(v) => best = best.max(v),
                KlValue::Infinite => return Err(Error::Domain("conditional lacks support".into())),
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Maximum variables and states per variable for exhaustive enumeration.
pub const MAX_VARS: usize = 8;
pub const MAX_STATES: usize = 4;

/// Probability table over up to 8 variables with up to 4 states each,
/// row-major with the last variable fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    arities: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(arities: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let j = Self::unchecked(arities, probs)?;
        let total: f64 = j.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("probability table sums to {total}")));
        }
        Ok(j)
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(arities: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let mut j = Self::unchecked(arities, weights)?;
        let total: f64 = j.probs.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Domain("weights have zero mass".into()));
        }
        j.probs.iter_mut().for_each(|p| *p /= total);
        Ok(j)
    }

    fn unchecked(arities: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if arities.len() > MAX_VARS || arities.iter().any(|&a| a > MAX_STATES) {
            return Err(Error::Size(format!(
                "at most {MAX_VARS} variables with {MAX_STATES} states each"
            )));
        }
        if arities.contains(&0) {
            return Err(Error::Domain("variables need at least one state".into()));
        }
        let len: usize = arities.iter().product();
        if probs.len() != len {
            return Err(Error::Shape { expected: len, got: probs.len() });
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Domain("probabilities must be finite and nonnegative".into()));
        }
        Ok(Self { arities, probs })
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_vars(&self) -> usize {
        self.arities.len()
    }

    /// States of every variable at flat index `k`.
    pub fn decode(&self, mut k: usize) -> Vec<usize> {
        let mut s = vec![0; self.arities.len()];
        for (d, a) in self.arities.iter().enumerate().rev() {
            s[d] = k % a;
            k /= a;
        }
        s
    }

    /// Flat index of `states[vars]` in the sub-table over `vars`.
    fn encode(&self, vars: &[usize], states: &[usize]) -> usize {
        vars.iter().fold(0, |acc, &v| acc * self.arities[v] + states[v])
    }

    fn sub_len(&self, vars: &[usize]) -> usize {
        vars.iter().map(|&v| self.arities[v]).product()
    }

    /// Marginal over `vars`, in that order.
    pub fn marginal(&self, vars: &[usize]) -> Result<DiscreteJoint> {
        if let Some(&v) = vars.iter().find(|&&v| v >= self.num_vars()) {
            return Err(Error::Index { index: v, len: self.num_vars() });
        }
        let mut out = vec![0.0; self.sub_len(vars)];
        for (k, p) in self.probs.iter().enumerate() {
            out[self.encode(vars, &self.decode(k))] += p;
        }
        Ok(DiscreteJoint {
            arities: vars.iter().map(|&v| self.arities[v]).collect(),
            probs: out,
        })
    }

    /// Table `[context][target]` of joint masses for the two variable groups.
    fn split(&self, target: &[usize], context: &[usize]) -> Vec<Vec<f64>> {
        let mut t = vec![vec![0.0; self.sub_len(target)]; self.sub_len(context)];
        for (k, p) in self.probs.iter().enumerate() {
            let s = self.decode(k);
            t[self.encode(context, &s)][self.encode(target, &s)] += p;
        }
        t
    }
}

/// Exact `KL(q || r)` over equal-shaped tables.
pub fn kl_discrete(q: &DiscreteJoint, r: &DiscreteJoint) -> Result<KlValue> {
    if q.arities != r.arities {
        return Err(Error::Domain("tables differ in shape".into()));
    }
    Ok(kl_vec(&q.probs, &r.probs))
}

fn kl_vec(q: &[f64], r: &[f64]) -> KlValue {
    let mut acc = 0.0;
    for (a, b) in q.iter().zip(r) {
        if *a > 0.0 {
            if *b <= 0.0 {
                return KlValue::Infinite;
            }
            acc += a * (a / b).ln();
        }
    }
    KlValue::Finite(acc)
}

fn finite(v: KlValue) -> f64 {
    v.finite().unwrap_or(f64::INFINITY)
}

/// Variable partition: one group per conditioner plus background variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarPartition {
    pub cells: Vec<Vec<usize>>,
    pub background: Vec<usize>,
}

impl VarPartition {
    fn check(&self, num_vars: usize) -> Result<()> {
        let mut seen = vec![false; num_vars];
        for &v in self.cells.iter().flatten().chain(&self.background) {
            if v >= num_vars || std::mem::replace(&mut seen[v], true) {
                return Err(Error::Geometry(format!("variable {v} misplaced in partition")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Geometry("partition does not cover every variable".into()));
        }
        Ok(())
    }

    #[cfg(test)]
    fn complement(&self, group: &[usize], num_vars: usize) -> Vec<usize> {
        (0..num_vars).filter(|v| !group.contains(v)).collect()
    }
}

/// Discrete conditional family `p(x | c_J)`, one table per subset `J` of the
/// conditioners, indexed by bitmask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteFamily {
    pub partition: VarPartition,
    tables: Vec<DiscreteJoint>,
}

impl DiscreteFamily {
    pub fn new(partition: VarPartition, tables: Vec<DiscreteJoint>) -> Result<Self> {
        let m = partition.cells.len();
        if m > MAX_VARS {
            return Err(Error::Size(format!("at most {MAX_VARS} conditioners")));
        }
        if tables.len() != 1 << m {
            return Err(Error::Shape { expected: 1 << m, got: tables.len() });
        }
        let ar = tables[0].arities().to_vec();
        if tables.iter().any(|t| t.arities() != ar.as_slice()) {
            return Err(Error::Domain("tables differ in shape".into()));
        }
        partition.check(ar.len())?;
        Ok(Self { partition, tables })
    }

    /// Exact product family: `present[j]`/`absent[j]` over cell `j`'s variables.
    pub fn exact_cpc(
        arities: Vec<usize>,
        partition: VarPartition,
        present: &[DiscreteJoint],
        absent: &[DiscreteJoint],
        background: &DiscreteJoint,
    ) -> Result<Self> {
        let m = partition.cells.len();
        let probe = DiscreteJoint::unchecked(arities.clone(), vec![0.0; arities.iter().product()])?;
        partition.check(arities.len())?;
        let mut tables = Vec::with_capacity(1 << m);
        for mask in 0..1usize << m {
            let probs = (0..probe.probs.len())
                .map(|k| {
                    let s = probe.decode(k);
                    let mut p = background.probs[probe.encode(&partition.background, &s)];
                    for (j, cell) in partition.cells.iter().enumerate() {
                        let t = if mask >> j & 1 == 1 { &present[j] } else { &absent[j] };
                        p *= t.probs[probe.encode(cell, &s)];
                    }
                    p
                })
                .collect();
            tables.push(DiscreteJoint::from_weights(arities.clone(), probs)?);
        }
        Self::new(partition, tables)
    }

    pub fn num_conditions(&self) -> usize {
        self.partition.cells.len()
    }

    pub fn table(&self, conds: &ConditionSet) -> Result<&DiscreteJoint> {
        conds.check_within(self.num_conditions())?;
        Ok(&self.tables[mask_of(conds)])
    }

    fn num_vars(&self) -> usize {
        self.tables[0].num_vars()
    }

    /// `p(x_{M_j} | c_j)` and `p(x_{M_j} | ∅)` marginals.
    fn references(&self, j: usize) -> Result<(DiscreteJoint, DiscreteJoint)> {
        let cell = &self.partition.cells[j];
        Ok((self.tables[1 << j].marginal(cell)?, self.tables[0].marginal(cell)?))
    }

    /// The factorized reference `C*_J`.
    pub fn ideal_composition(&self, conds: &ConditionSet) -> Result<DiscreteJoint> {
        let joint = self.table(conds)?;
        let bg = self.tables[0].marginal(&self.partition.background)?;
        let refs = (0..self.num_conditions())
            .map(|j| self.references(j))
            .collect::<Result<Vec<_>>>()?;
        let probs = (0..joint.probs.len())
            .map(|k| {
                let s = joint.decode(k);
                let mut p = bg.probs[joint.encode(&self.partition.background, &s)];
                for (j, cell) in self.partition.cells.iter().enumerate() {
                    let r = if conds.contains(j) { &refs[j].0 } else { &refs[j].1 };
                    p *= r.probs[joint.encode(cell, &s)];
                }
                p
            })
            .collect();
        DiscreteJoint::unchecked(joint.arities.clone(), probs)
    }
}

fn mask_of(conds: &ConditionSet) -> usize {
    conds.iter().fold(0, |m, j| m | 1 << j)
}

fn set_of(mask: usize, m: usize) -> ConditionSet {
    (0..m).filter(|j| mask >> j & 1 == 1).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSet {
    pub eps: Vec<f64>,
    pub eps_tilde: Vec<f64>,
    pub eps_b: f64,
}

/// `sup_{context} KL(p(x_group | c_J, context) || reference)` over contexts with mass.
fn sup_conditional_kl(joint: &DiscreteJoint, group: &[usize], reference: &[f64]) -> f64 {
    let context = (0..joint.num_vars()).filter(|v| !group.contains(v)).collect::<Vec<_>>();
    let mut best: f64 = 0.0;
    for row in joint.split(group, &context) {
        let mass: f64 = row.iter().sum();
        if mass <= 0.0 {
            continue;
        }
        let cond: Vec<f64> = row.iter().map(|p| p / mass).collect();
        best = best.max(finite(kl_vec(&cond, reference)));
    }
    best
}

/// Exact approximate-compositionality errors by enumeration over every `J` and
/// every complement configuration.
pub fn approx_cpc_epsilons(family: &DiscreteFamily) -> Result<EpsilonSet> {
    let m = family.num_conditions();
    let mut eps = vec![0.0f64; m];
    let mut eps_tilde = vec![0.0f64; m];
    let mut eps_b: f64 = 0.0;
    let refs = (0..m).map(|j| family.references(j)).collect::<Result<Vec<_>>>()?;
    let bg = &family.partition.background;
    let bg_ref = family.tables[0].marginal(bg)?;
    for mask in 0..1usize << m {
        let joint = &family.tables[mask];
        for (j, cell) in family.partition.cells.iter().enumerate() {
            if mask >> j & 1 == 1 {
                eps[j] = eps[j].max(sup_conditional_kl(joint, cell, &refs[j].0.probs));
            } else {
                eps_tilde[j] = eps_tilde[j].max(sup_conditional_kl(joint, cell, &refs[j].1.probs));
            }
        }
        if !bg.is_empty() {
            eps_b = eps_b.max(sup_conditional_kl(joint, bg, &bg_ref.probs));
        }
    }
    Ok(EpsilonSet { eps, eps_tilde, eps_b })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `KL(p(.|c_J) || C*_J)` by direct summation.
    pub lhs: f64,
    /// The same divergence via the background-first chain rule.
    pub lhs_chain: f64,
    pub rhs: f64,
}

/// Compares `KL(p(.|c_J) || C*_J)` with the epsilon sum for `J`.
pub fn composition_bound_check(family: &DiscreteFamily, conds: &ConditionSet) -> Result<BoundCheck> {
    let joint = family.table(conds)?;
    let ideal = family.ideal_composition(conds)?;
    let lhs = finite(kl_discrete(joint, &ideal)?);
    let e = approx_cpc_epsilons(family)?;
    let rhs = (0..family.num_conditions())
        .map(|j| if conds.contains(j) { e.eps[j] } else { e.eps_tilde[j] })
        .sum::<f64>()
        + e.eps_b;

    // chain rule, background first then cells in index order
    let n = family.num_vars();
    let mut prev: Vec<usize> = Vec::new();
    let mut lhs_chain = 0.0;
    let mut groups: Vec<(Vec<usize>, DiscreteJoint)> = vec![(
        family.partition.background.clone(),
        family.tables[0].marginal(&family.partition.background)?,
    )];
    for (j, cell) in family.partition.cells.iter().enumerate() {
        let (present, absent) = family.references(j)?;
        groups.push((cell.clone(), if conds.contains(j) { present } else { absent }));
    }
    for (group, reference) in groups {
        if group.is_empty() {
            continue;
        }
        let mut vars = prev.clone();
        vars.extend(&group);
        let sub = joint.marginal(&vars)?;
        let local: Vec<usize> = (prev.len()..vars.len()).collect();
        let context: Vec<usize> = (0..prev.len()).collect();
        for row in sub.split(&local, &context) {
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                continue;
            }
            for (p, r) in row.iter().zip(&reference.probs) {
                if *p > 0.0 {
                    lhs_chain += p * ((p / mass) / r).ln();
                }
            }
        }
        prev = vars;
    }
    debug_assert_eq!(prev.len(), n);
    Ok(BoundCheck { lhs, lhs_chain, rhs })
}

fn random_table<R: Rng + ?Sized>(arities: Vec<usize>, rng: &mut R) -> Result<DiscreteJoint> {
    let len = arities.iter().product();
    let w = (0..len).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    DiscreteJoint::from_weights(arities, w)
}

/// Seeded random exact-CPC family over at most 6 variables.
pub fn random_cpc_family(seed: Seed) -> Result<DiscreteFamily> {
    let mut rng = seed.rng();
    let m = rng.random_range(1..=3usize);
    let mut arities = Vec::new();
    let mut cells = Vec::new();
    for _ in 0..m {
        let size = rng.random_range(1..=if m == 3 { 1 } else { 2 });
        let vars: Vec<usize> = (arities.len()..arities.len() + size).collect();
        for _ in 0..size {
            arities.push(rng.random_range(2..=3usize));
        }
        cells.push(vars);
    }
    let background: Vec<usize> = if rng.random_bool(0.5) {
        arities.push(rng.random_range(2..=3usize));
        vec![arities.len() - 1]
    } else {
        Vec::new()
    };
    let partition = VarPartition { cells, background };
    let sub = |vars: &[usize]| vars.iter().map(|&v| arities[v]).collect::<Vec<_>>();
    let present = partition.cells.iter().map(|c| random_table(sub(c), &mut rng)).collect::<Result<Vec<_>>>()?;
    let absent = partition.cells.iter().map(|c| random_table(sub(c), &mut rng)).collect::<Result<Vec<_>>>()?;
    let bg = random_table(sub(&partition.background), &mut rng)?;
    DiscreteFamily::exact_cpc(arities, partition, &present, &absent, &bg)
}

/// Mixes every table of `family` with weight `lambda` of an independent random table.
pub fn perturb_family(family: &DiscreteFamily, lambda: f64, seed: Seed) -> Result<DiscreteFamily> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Precondition(format!("mixing weight must lie in [0, 1], got {lambda}")));
    }
    let mut rng = seed.rng();
    let tables = family
        .tables
        .iter()
        .map(|t| {
            let r = random_table(t.arities.clone(), &mut rng)?;
            let probs = t.probs.iter().zip(&r.probs).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
            DiscreteJoint::from_weights(t.arities.clone(), probs)
        })
        .collect::<Result<Vec<_>>>()?;
    DiscreteFamily::new(family.partition.clone(), tables)
}

/// Every condition set of a family.
pub fn all_condition_sets(family: &DiscreteFamily) -> Vec<ConditionSet> {
    let m = family.num_conditions();
    (0..1usize << m).map(|mask| set_of(mask, m)).collect()
}

/// Seeded dependent `(x, y)` joint: `x` with 4 states at `{-1.5, -0.5, 0.5, 1.5}`,
/// `y` with 2 to 4 states.
pub fn random_dependent_pair(seed: Seed) -> Result<ConditionalPair> {
    let mut rng = seed.rng();
    let ny = rng.random_range(2..=4usize);
    let joint = random_table(vec![4, ny], &mut rng)?;
    ConditionalPair::from_joint(&joint, vec![-1.5, -0.5, 0.5, 1.5])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(axis: Axis, mu: f64, sigma: f64) -> LatticeDensity {
        LatticeDensity::from_fn(vec![axis], |x| {
            let z = (x[0] - mu) / sigma;
            (-0.5 * z * z).exp()
        })
        .unwrap()
    }

    fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
        let z = (x - mu) / sigma;
        INV_SQRT_2PI / sigma * (-0.5 * z * z).exp()
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let a = gauss(Axis::new(-8.0, 8.0, 801).unwrap(), 0.3, 1.2);
        assert!(kl(&a, &a).unwrap().finite().unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_unit_gaussians_half() {
        let axis = Axis::new(-10.0, 11.0, 4096).unwrap();
        let q = gauss(axis, 0.0, 1.0);
        let r = gauss(axis, 1.0, 1.0);
        let v = kl(&q, &r).unwrap().finite().unwrap();
        assert!((v - 0.5).abs() < 1e-6, "{v}");
    }

    #[test]
    fn kl_infinite_and_mismatch() {
        let axis = Axis::new(0.0, 1.0, 3).unwrap();
        let q = LatticeDensity::new(vec![axis], vec![1.0, 1.0, 1.0]).unwrap();
        let r = LatticeDensity::new(vec![axis], vec![0.0, 2.0, 0.0]).unwrap();
        assert!(kl(&q, &r).unwrap().is_infinite());
        let other = gauss(Axis::new(0.0, 2.0, 5).unwrap(), 1.0, 1.0);
        assert!(matches!(kl(&q, &other), Err(Error::Domain(_))));
    }

    #[test]
    fn lattice_density_rejects_bad_mass() {
        let axis = Axis::new(0.0, 1.0, 3).unwrap();
        assert!(LatticeDensity::new(vec![axis], vec![1.0, 2.0, 1.0]).is_err());
        assert!(LatticeDensity::new(vec![axis], vec![1.0, -1.0, 3.0]).is_err());
    }

    #[test]
    fn spike_convolves_to_standard_normal() {
        // unit mass on the node at 0, width dx
        let axis = Axis::new(-1.0, 1.0, 201).unwrap();
        let mut v = vec![0.0; 201];
        v[100] = 1.0 / axis.spacing();
        let q = LatticeDensity::new(vec![axis], v).unwrap();
        let s = convolve_gaussian(&q, 1.0).unwrap();
        assert!(s.correction < 1e-6);
        let a = s.density.axes()[0];
        assert!(a.lo <= -6.0 && a.hi >= 6.0);
        for (i, f) in s.density.values().iter().enumerate() {
            assert!((f - normal_pdf(a.node(i), 0.0, 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_semigroup() {
        let q = gauss(Axis::new(-3.0, 3.0, 1201).unwrap(), 0.0, 0.4);
        let s = convolve_gaussian(&q, 0.7).unwrap();
        let sd = (0.16f64 + 0.49).sqrt();
        let a = s.density.axes()[0];
        for (i, f) in s.density.values().iter().enumerate() {
            assert!((f - normal_pdf(a.node(i), 0.0, sd)).abs() < 1e-6);
        }
    }

    #[test]
    fn repeated_convolution_composes() {
        let axis = Axis::new(-3.0, 3.0, 601).unwrap();
        let q = LatticeDensity::from_fn(vec![axis], |x| {
            (-(x[0] - 1.0).powi(2) / 0.08).exp() + 0.5 * (-(x[0] + 1.0).powi(2) / 0.02).exp()
        })
        .unwrap();
        let (a, b) = (0.3, 0.4);
        let ab = convolve_gaussian(&convolve_gaussian(&q, a).unwrap().density, b).unwrap().density;
        let direct = convolve_gaussian_onto(&q, 0.5, ab.axes()).unwrap().density;
        let l1: f64 = ab
            .values()
            .iter()
            .zip(direct.values())
            .enumerate()
            .map(|(k, (u, v))| ab.weight(k) * (u - v).abs())
            .sum();
        assert!(l1 < 1e-5, "{l1}");
    }

    #[test]
    fn coarse_lattice_raises_resolution_error() {
        let axis = Axis::new(-1.0, 1.0, 5).unwrap();
        let q = LatticeDensity::new(vec![axis], vec![0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert!(matches!(convolve_gaussian(&q, 0.05), Err(Error::Resolution { .. })));
    }

    #[test]
    fn heat_residual_gaussian_and_mixture() {
        let axis = Axis::new(-10.0, 10.0, 4096).unwrap();
        let g = gauss(axis, 0.0, 1.0);
        let r = heat_fact_residual(&g, 0.5, 1e-4).unwrap();
        assert!(r.residual <= 1e-4 * r.dt_max, "{r:?}");
        let mix = LatticeDensity::from_fn(vec![axis], |x| {
            0.3 * normal_pdf(x[0], -1.5, 0.5) + 0.7 * normal_pdf(x[0], 1.0, 0.8)
        })
        .unwrap();
        let r = heat_fact_residual(&mix, 1.0, 1e-4).unwrap();
        assert!(r.residual <= 1e-4 * r.dt_max, "{r:?}");
    }

    #[test]
    fn heat_residual_second_order() {
        let make = |n: usize| {
            LatticeDensity::from_fn(vec![Axis::new(-6.0, 6.0, n).unwrap()], |x| {
                0.5 * normal_pdf(x[0], -1.0, 0.4) + 0.5 * normal_pdf(x[0], 1.0, 0.6)
            })
            .unwrap()
        };
        // the next-order term has the opposite sign at the residual's peak,
        // so the ratio approaches 4 from below
        let coarse = heat_fact_residual(&make(121), 0.3, 1e-4).unwrap().residual;
        let fine = heat_fact_residual(&make(241), 0.3, 1e-4).unwrap().residual;
        let finer = heat_fact_residual(&make(481), 0.3, 1e-4).unwrap().residual;
        let (r1, r2) = (coarse / fine, fine / finer);
        assert!(r1 > 3.9 && r1 < 4.0, "{r1}");
        assert!(r2 > r1 && r2 < 4.0, "{r2}");
    }

    #[test]
    fn dkl_dt_gaussian_closed_form() {
        // KL(t) = 1 / (2 (1 + t^2)), derivative -t / (1 + t^2)^2
        let axis = Axis::new(-10.0, 11.0, 2101).unwrap();
        let q = gauss(axis, 0.0, 1.0);
        let r = gauss(axis, 1.0, 1.0);
        let t: f64 = 0.5;
        let c = dkl_dt_check(&q, &r, t, 1e-3).unwrap();
        let exact = -t / (1.0 + t * t).powi(2);
        assert!((c.fd_derivative - exact).abs() / exact.abs() < 1e-3);
        assert!((c.formula_value - exact).abs() / exact.abs() < 1e-3);
        assert!((c.kl - 0.5 / (1.0 + t * t)).abs() < 1e-6);
    }

    #[test]
    fn dkl_dt_equal_densities_vanish() {
        let axis = Axis::new(-6.0, 6.0, 601).unwrap();
        let q = gauss(axis, 0.0, 1.0);
        let c = dkl_dt_check(&q, &q, 0.5, 1e-3).unwrap();
        assert!(c.fd_derivative.abs() < 1e-10 && c.formula_value.abs() < 1e-10);
    }

    #[test]
    fn sup_kl_independent_is_zero() {
        let axis = Axis::new(-4.0, 4.0, 401).unwrap();
        let d = gauss(axis, 0.0, 1.0);
        let pair = ConditionalPair {
            prior_y: vec![0.5, 0.5],
            law: XLaw::Lattice(vec![d.clone(), d]),
        };
        for v in sup_kl_curve(&pair, &[0.1, 1.0]).unwrap() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn sup_kl_translated_gaussians_decrease() {
        let axis = Axis::new(-4.0, 4.0, 1601).unwrap();
        let pair = ConditionalPair {
            prior_y: vec![0.4, 0.6],
            law: XLaw::Lattice(vec![gauss(axis, -1.0, 0.5), gauss(axis, 1.0, 0.5)]),
        };
        let ts = [0.1, 0.2, 0.5, 1.0, 2.0, 4.0, 8.0];
        let c = sup_kl_curve(&pair, &ts).unwrap();
        assert!(c[..6].windows(2).all(|w| w[0] - w[1] > 1e-9), "{c:?}");
        assert!(c[6] < c[0] / 10.0);
    }

    #[test]
    fn discrete_joint_limits() {
        assert!(matches!(DiscreteJoint::from_weights(vec![5], vec![1.0; 5]), Err(Error::Size(_))));
        assert!(matches!(DiscreteJoint::from_weights(vec![2; 9], vec![1.0; 512]), Err(Error::Size(_))));
        assert!(DiscreteJoint::new(vec![2], vec![0.5, 0.6]).is_err());
        let j = DiscreteJoint::from_weights(vec![2, 3], (1..=6).map(f64::from).collect()).unwrap();
        let m = j.marginal(&[1]).unwrap();
        assert!((m.probs()[0] - 5.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn exact_cpc_has_zero_epsilons_and_bound() {
        for s in 0..10 {
            let f = random_cpc_family(Seed(s)).unwrap();
            let e = approx_cpc_epsilons(&f).unwrap();
            assert!(e.eps.iter().chain(&e.eps_tilde).all(|v| v.abs() < 1e-12));
            assert!(e.eps_b.abs() < 1e-12);
            for c in all_condition_sets(&f) {
                let b = composition_bound_check(&f, &c).unwrap();
                assert!(b.lhs.abs() < 1e-12 && b.rhs.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perturbed_epsilons_match_brute_force() {
        let base = random_cpc_family(Seed(5)).unwrap();
        let f = perturb_family(&base, 0.1, Seed(6)).unwrap();
        let e = approx_cpc_epsilons(&f).unwrap();
        let m = f.num_conditions();
        let n = f.tables[0].num_vars();
        // per-term recomputation: condition on each full complement assignment directly
        for j in 0..m {
            let cell = &f.partition.cells[j];
            let (pres, abs) = f.references(j).unwrap();
            let mut brute_eps: f64 = 0.0;
            let mut brute_tilde: f64 = 0.0;
            for c in all_condition_sets(&f) {
                let t = f.table(&c).unwrap();
                let comp = f.partition.complement(cell, n);
                let mut configs: Vec<Vec<usize>> = Vec::new();
                for k in 0..t.probs.len() {
                    let s = t.decode(k);
                    let key: Vec<usize> = comp.iter().map(|&v| s[v]).collect();
                    if !configs.contains(&key) {
                        configs.push(key);
                    }
                }
                for key in configs {
                    let mut cond = vec![0.0; pres.probs.len()];
                    for k in 0..t.probs.len() {
                        let s = t.decode(k);
                        if comp.iter().zip(&key).all(|(&v, &st)| s[v] == st) {
                            let idx = cell.iter().fold(0, |a, &v| a * t.arities[v] + s[v]);
                            cond[idx] += t.probs[k];
                        }
                    }
                    let z: f64 = cond.iter().sum();
                    let cond: Vec<f64> = cond.iter().map(|p| p / z).collect();
                    let r = if c.contains(j) { &pres.probs } else { &abs.probs };
                    let v: f64 = cond.iter().zip(r).map(|(a, b)| a * (a / b).ln()).sum();
                    if c.contains(j) {
                        brute_eps = brute_eps.max(v);
                    } else {
                        brute_tilde = brute_tilde.max(v);
                    }
                }
            }
            assert!(e.eps[j] > 0.0 && e.eps_tilde[j] > 0.0);
            assert!((e.eps[j] - brute_eps).abs() < 1e-12);
            assert!((e.eps_tilde[j] - brute_tilde).abs() < 1e-12);
        }
    }

    #[test]
    fn background_only_partition_has_zero_eps_b() {
        let joint = DiscreteJoint::from_weights(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = DiscreteFamily::new(VarPartition { cells: vec![], background: vec![0] }, vec![joint]).unwrap();
        let e = approx_cpc_epsilons(&f).unwrap();
        assert_eq!(e.eps_b, 0.0);
    }

    #[test]
    fn bound_holds_and_chain_rule_agrees() {
        for s in 0..30 {
            let base = random_cpc_family(Seed(100 + s)).unwrap();
            let f = perturb_family(&base, 0.05 + 0.01 * s as f64, Seed(200 + s)).unwrap();
            for c in all_condition_sets(&f) {
                let b = composition_bound_check(&f, &c).unwrap();
                assert!(b.lhs <= b.rhs + 1e-10, "{b:?}");
                assert!((b.lhs - b.lhs_chain).abs() < 1e-10, "{b:?}");
            }
        }
    }

    #[test]
    fn dependent_pairs_decrease() {
        let ts = [0.1, 0.2, 0.5, 1.0, 2.0, 4.0];
        for s in 0..3 {
            let p = random_dependent_pair(Seed(s)).unwrap();
            let c = sup_kl_curve(&p, &ts).unwrap();
            assert!(c.windows(2).all(|w| w[0] - w[1] > 1e-9), "{c:?}");
        }
    }
}
