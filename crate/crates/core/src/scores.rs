//! Score fields: closed-form mixture scores, local conditional scores built from
//! a locality rule, and memorizing empirical learners (global and patch-local).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::distributions::{
    select_by_labels, ConditionalFamily, CpcModel, GaussianMixture, MatchRule, SelectionKind,
    TrainingSet,
};
use crate::error::{Error, Result};
use crate::grid::{ConditionId, ConditionSet, GridShape, IndexSet, SubsetMap};

/// A deterministic map `(x, J, t) -> s(x | c_J)` over flattened images.
pub trait ScoreField: Sync {
    fn shape(&self) -> GridShape;

    fn score(&self, x: &[f64], conds: &ConditionSet, t: f64) -> Result<Vec<f64>>;

    /// Mixture whose noised score, read at one coordinate, equals this field's
    /// score at `target`. Fields without such a view return `None`.
    fn local_view(&self, _conds: &ConditionSet, _t: f64, _target: usize) -> Result<Option<LocalView>> {
        Ok(None)
    }

    fn score_at(&self, x: &[f64], conds: &ConditionSet, t: f64, target: usize) -> Result<f64> {
        check_len(x, self.shape().len())?;
        match self.local_view(conds, t, target)? {
            Some(view) => Ok(view.score(x)),
            None => Ok(self.score(x, conds, t)?[target]),
        }
    }
}

impl<T: ScoreField + ?Sized> ScoreField for &T {
    fn shape(&self) -> GridShape {
        (**self).shape()
    }
    fn score(&self, x: &[f64], conds: &ConditionSet, t: f64) -> Result<Vec<f64>> {
        (**self).score(x, conds, t)
    }
    fn local_view(&self, conds: &ConditionSet, t: f64, target: usize) -> Result<Option<LocalView>> {
        (**self).local_view(conds, t, target)
    }
    fn score_at(&self, x: &[f64], conds: &ConditionSet, t: f64, target: usize) -> Result<f64> {
        (**self).score_at(x, conds, t, target)
    }
}

/// Tweedie denoiser for the VE kernel: `x + t^2 s(x | c_J)`.
pub fn denoise<F: ScoreField + ?Sized>(field: &F, x: &[f64], conds: &ConditionSet, t: f64) -> Result<Vec<f64>> {
    let s = field.score(x, conds, t)?;
    Ok(x.iter().zip(&s).map(|(a, b)| a + t * t * b).collect())
}

fn check_len(x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: x.len(),
        });
    }
    Ok(())
}

fn check_t(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Precondition(format!("noise level must be >= 0, got {t}")));
    }
    Ok(())
}

/// `grad log N_t[m](x)`: `sum_k r_k(x) (mu_k - x) / (var_k + t^2)`.
pub fn mixture_score(m: &GaussianMixture, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Err(Error::Domain("empty mixture".into()));
    }
    check_len(x, m.dim())?;
    check_t(t)?;
    let t2 = t * t;
    let logs: Vec<f64> = m
        .iter()
        .map(|(w, g)| w.ln() + g.log_density_inflated(x, t2))
        .collect();
    let r = softmax(&logs);
    let mut out = vec![0.0; x.len()];
    for (rk, g) in r.iter().zip(m.components()) {
        if *rk == 0.0 {
            continue;
        }
        for (((o, xi), mu), v) in out.iter_mut().zip(x).zip(g.mean()).zip(g.var()) {
            *o += rk * (mu - xi) / (v + t2);
        }
    }
    Ok(out)
}

/// Normalized `exp(v - lse(v))`.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // exp underflows to exactly zero below -745.2; skipping the call changes nothing
    let e: Vec<f64> = v.iter().map(|a| if a - max < -746.0 { 0.0 } else { (a - max).exp() }).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|a| a / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViewVars {
    /// Every component and coordinate shares one variance.
    Common(f64),
    /// Component-major `m x d` variances.
    PerEntry(Vec<f64>),
}

/// A noised mixture over a pixel subset, with one coordinate singled out.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalView {
    pub positions: Vec<usize>,
    pub target_pos: usize,
    pub log_weights: Vec<f64>,
    /// Component-major `m x d` means.
    pub means: Vec<f64>,
    pub vars: ViewVars,
}

impl LocalView {
    pub fn from_mixture(m: &GaussianMixture, positions: Vec<usize>, target_pos: usize, t: f64) -> Self {
        let t2 = t * t;
        let mut means = Vec::with_capacity(m.len() * m.dim());
        let mut vars = Vec::with_capacity(m.len() * m.dim());
        for g in m.components() {
            means.extend_from_slice(g.mean());
            vars.extend(g.var().iter().map(|v| v + t2));
        }
        Self {
            positions,
            target_pos,
            log_weights: m.weights().iter().map(|w| w.ln()).collect(),
            means,
            vars: ViewVars::PerEntry(vars),
        }
    }

    pub fn dim(&self) -> usize {
        self.positions.len()
    }

    pub fn components(&self) -> usize {
        self.log_weights.len()
    }

    fn var(&self, k: usize, p: usize) -> f64 {
        match &self.vars {
            ViewVars::Common(v) => *v,
            ViewVars::PerEntry(v) => v[k * self.dim() + p],
        }
    }

    pub fn gather(&self, x: &[f64]) -> Vec<f64> {
        self.positions.iter().map(|&i| x[i]).collect()
    }

    /// Per-component unnormalized log responsibilities at the gathered point.
    pub fn log_terms(&self, xs: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..self.components())
            .map(|k| {
                let mu = &self.means[k * d..(k + 1) * d];
                let mut acc = self.log_weights[k];
                for p in 0..d {
                    let v = self.var(k, p);
                    let e = xs[p] - mu[p];
                    acc -= 0.5 * (v.ln() + e * e / v);
                }
                acc
            })
            .collect()
    }

    /// Score at the target given precomputed log terms.
    pub fn score_from_terms(&self, terms: &[f64], x_target: f64) -> f64 {
        let r = softmax(terms);
        let d = self.dim();
        r.iter()
            .enumerate()
            .map(|(k, rk)| rk * (self.means[k * d + self.target_pos] - x_target) / self.var(k, self.target_pos))
            .sum()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let xs = self.gather(x);
        let terms = self.log_terms(&xs);
        self.score_from_terms(&terms, xs[self.target_pos])
    }

    /// Change of each component's log term when coordinate `p` moves from `from` to `to`.
    pub fn term_shift(&self, p: usize, from: f64, to: f64, out: &mut Vec<f64>) {
        let d = self.dim();
        out.clear();
        for k in 0..self.components() {
            let mu = self.means[k * d + p];
            let v = self.var(k, p);
            let (a, b) = (from - mu, to - mu);
            out.push(-0.5 * (b * b - a * a) / v);
        }
    }
}

/// Exact score of a conditional family: the mixture score of `p(x | c_J)`.
pub struct GlobalExactScore<F> {
    family: F,
    cache: Mutex<Option<(ConditionSet, Arc<GaussianMixture>)>>,
}

impl<F: ConditionalFamily> GlobalExactScore<F> {
    pub fn new(family: F) -> Self {
        Self {
            family,
            cache: Mutex::new(None),
        }
    }

    pub fn family(&self) -> &F {
        &self.family
    }

    fn joint(&self, conds: &ConditionSet) -> Result<Arc<GaussianMixture>> {
        let mut guard = self.cache.lock().expect("score cache poisoned");
        if let Some((c, m)) = guard.as_ref() {
            if c == conds {
                return Ok(m.clone());
            }
        }
        let m = Arc::new(self.family.conditional(conds)?);
        *guard = Some((conds.clone(), m.clone()));
        Ok(m)
    }
}

impl<F: ConditionalFamily> ScoreField for GlobalExactScore<F> {
    fn shape(&self) -> GridShape {
        self.family.subsets().shape()
    }

    fn score(&self, x: &[f64], conds: &ConditionSet, t: f64) -> Result<Vec<f64>> {
        mixture_score(&*self.joint(conds)?, x, t)
    }

    fn local_view(&self, conds: &ConditionSet, t: f64, target: usize) -> Result<Option<LocalView>> {
        check_t(t)?;
        let m = self.joint(conds)?;
        if target >= m.dim() {
            return Err(Error::Index {
                index: target,
                len: m.dim(),
            });
        }
        Ok(Some(LocalView::from_mixture(&m, (0..m.dim()).collect(), target, t)))
    }
}

/// How `L_i(J)` is derived from the condition set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondRule {
    /// `{owner(i)} ∩ J`; background pixels get the empty set.
    Owner,
    /// The whole of `J`.
    Full,
    /// Always empty.
    Empty,
}

/// Time-independent neighborhoods `N_i` and conditioner subsets `L_i(J)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityRule {
    shape: GridShape,
    owners: Vec<Option<ConditionId>>,
    neighborhood_of: Vec<usize>,
    neighborhoods: Vec<IndexSet>,
    cond: CondRule,
}

impl LocalityRule {
    /// `neighborhoods[i]` must contain `i`.
    pub fn new(subsets: &SubsetMap, neighborhoods: Vec<IndexSet>, cond: CondRule) -> Result<Self> {
        let n = subsets.shape().len();
        if neighborhoods.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: neighborhoods.len(),
            });
        }
        let mut ids: HashMap<IndexSet, usize> = HashMap::new();
        let mut distinct = Vec::new();
        let mut neighborhood_of = Vec::with_capacity(n);
        for (i, nb) in neighborhoods.into_iter().enumerate() {
            nb.check_bounds(n)?;
            if !nb.contains(i) {
                return Err(Error::Config(format!("pixel {i} is not in its own neighborhood")));
            }
            let id = *ids.entry(nb.clone()).or_insert_with(|| {
                distinct.push(nb);
                distinct.len() - 1
            });
            neighborhood_of.push(id);
        }
        Ok(Self {
            shape: subsets.shape(),
            owners: (0..n).map(|i| subsets.owner(i)).collect(),
            neighborhood_of,
            neighborhoods: distinct,
            cond,
        })
    }

    pub fn neighborhood(&self, i: usize) -> &IndexSet {
        &self.neighborhoods[self.neighborhood_of[i]]
    }

    pub fn cond_subset(&self, i: usize, conds: &ConditionSet) -> ConditionSet {
        match self.cond {
            CondRule::Owner => match self.owners[i] {
                Some(j) if conds.contains(j) => ConditionSet::single(j),
                _ => ConditionSet::empty(),
            },
            CondRule::Full => conds.clone(),
            CondRule::Empty => ConditionSet::empty(),
        }
    }

    pub fn time_dependent(&self) -> bool {
        false
    }

    fn compatible_with(&self, subsets: &SubsetMap) -> bool {
        self.shape == subsets.shape()
            && self
                .owners
                .iter()
                .enumerate()
                .all(|(i, o)| *o == subsets.owner(i))
    }
}

/// `N_i = M_j, L_i(J) = {j} ∩ J` for `i ∈ M_j`; background pixels get `N_i = M_b, L_i = ∅`.
pub fn lemma1_rule(subsets: &SubsetMap) -> LocalityRule {
    let n = subsets.shape().len();
    let neighborhoods = (0..n)
        .map(|i| match subsets.owner(i) {
            Some(j) => subsets.cell(j).clone(),
            None => subsets.background().clone(),
        })
        .collect();
    LocalityRule::new(subsets, neighborhoods, CondRule::Owner).expect("subset map rule is valid")
}

/// Local conditional score `s(x|c_J)(i) = grad log p_t(x_{N_i} | c_{L_i(J)})(i)`.
pub struct LcsScore {
    model: CpcModel,
    rule: LocalityRule,
    marginals: Mutex<HashMap<(usize, ConditionSet), Arc<GaussianMixture>>>,
}

/// Builds the local score of `model` under `rule`.
pub fn lcs_score(model: CpcModel, rule: LocalityRule) -> Result<LcsScore> {
    if !rule.compatible_with(model.subset_map()) {
        return Err(Error::Config(
            "locality rule was built for a different subset map".into(),
        ));
    }
    Ok(LcsScore {
        model,
        rule,
        marginals: Mutex::new(HashMap::new()),
    })
}

impl LcsScore {
    pub fn model(&self) -> &CpcModel {
        &self.model
    }

    pub fn rule(&self) -> &LocalityRule {
        &self.rule
    }

    fn marginal(&self, nid: usize, l: &ConditionSet) -> Result<Arc<GaussianMixture>> {
        let key = (nid, l.clone());
        if let Some(m) = self.marginals.lock().expect("marginal cache poisoned").get(&key) {
            return Ok(m.clone());
        }
        let m = Arc::new(self.model.marginal_on(&self.rule.neighborhoods[nid], l)?);
        self.marginals
            .lock()
            .expect("marginal cache poisoned")
            .insert(key, m.clone());
        Ok(m)
    }
}

impl ScoreField for LcsScore {
    fn shape(&self) -> GridShape {
        self.model.shape()
    }

    fn score(&self, x: &[f64], conds: &ConditionSet, t: f64) -> Result<Vec<f64>> {
        let n = self.shape().len();
        check_len(x, n)?;
        check_t(t)?;
        conds.check_within(self.model.subset_map().len())?;
        let mut groups: HashMap<(usize, ConditionSet), Vec<usize>> = HashMap::new();
        for i in 0..n {
            let key = (self.rule.neighborhood_of[i], self.rule.cond_subset(i, conds));
            groups.entry(key).or_default().push(i);
        }
        let mut out = vec![0.0; n];
        for ((nid, l), pixels) in groups {
            let nb = &self.rule.neighborhoods[nid];
            let m = self.marginal(nid, &l)?;
            let xs: Vec<f64> = nb.iter().map(|i| x[i]).collect();
            let s = mixture_score(&m, &xs, t)?;
            for i in pixels {
                out[i] = s[nb.position(i).expect("pixel lies in its neighborhood")];
            }
        }
        Ok(out)
    }

    fn local_view(&self, conds: &ConditionSet, t: f64, target: usize) -> Result<Option<LocalView>> {
        check_t(t)?;
        if target >= self.shape().len() {
            return Err(Error::Index {
                index: target,
                len: self.shape().len(),
            });
        }
        conds.check_within(self.model.subset_map().len())?;
        let nid = self.rule.neighborhood_of[target];
        let nb = &self.rule.neighborhoods[nid];
        let m = self.marginal(nid, &self.rule.cond_subset(target, conds))?;
        let pos = nb.position(target).expect("pixel lies in its neighborhood");
        Ok(Some(LocalView::from_mixture(&m, nb.as_slice().to_vec(), pos, t)))
    }
}

/// The factorized reference `p(x_b|∅) ∏_{j∉J} p(x_{M_j}|∅) ∏_{j∈J} p(x_{M_j}|c_j)`
/// assembled from a family's single-condition marginals.
pub fn ideal_composition<F: ConditionalFamily + ?Sized>(family: &F) -> Result<CpcModel> {
    let subsets = family.subsets().clone();
    let uncond = family.conditional(&ConditionSet::empty())?;
    let mut present = Vec::with_capacity(subsets.len());
    let mut absent = Vec::with_capacity(subsets.len());
    for (j, cell) in subsets.cells().iter().enumerate() {
        let single = family.conditional(&ConditionSet::single(j))?;
        present.push(single.marginal(cell.as_slice())?);
        absent.push(uncond.marginal(cell.as_slice())?);
    }
    let background = if subsets.background().is_empty() {
        None
    } else {
        Some(uncond.marginal(subsets.background().as_slice())?)
    };
    CpcModel::new(subsets, present, absent, background)
}

/// Score of [`ideal_composition`], evaluated locally.
pub fn ideal_composition_score<F: ConditionalFamily + ?Sized>(family: &F) -> Result<LcsScore> {
    let model = ideal_composition(family)?;
    let rule = lemma1_rule(model.subset_map());
    lcs_score(model, rule)
}

/// Memorizing learner: the exact score of the noised empirical measure of the
/// training items matched to `J`, either over the whole image or per cell over a
/// `(2k+1) x (2k+1)` window of cells at the same absolute position.
pub struct EmpiricalScore {
    subsets: SubsetMap,
    /// Row-major `items x n` pixel values.
    items: Vec<f64>,
    /// Cell-major copy: per cell, `items x cell` values starting at `cell_off[j]`.
    by_cell: Vec<f64>,
    cell_off: Vec<usize>,
    labels: Vec<ConditionSet>,
    rule: MatchRule,
    radius: Option<usize>,
    plan: Mutex<Option<(ConditionSet, Arc<Plan>)>>,
}

#[derive(Debug)]
struct Plan {
    /// Items appearing in any selection.
    active: Vec<usize>,
    /// Per cell, index into `selections`.
    selection_of: Vec<usize>,
    /// Selections as indices into `active`.
    selections: Vec<Vec<usize>>,
    fallback_cells: Vec<ConditionId>,
}

/// Whole-image memorizer with kernel bandwidth equal to the evaluation `t`.
pub fn empirical_global_score(ts: &TrainingSet, rule: MatchRule) -> Result<EmpiricalScore> {
    EmpiricalScore::build(ts, rule, None)
}

/// Patch-local memorizer with cell radius `k`; windows are truncated at the borders.
pub fn patch_local_score(ts: &TrainingSet, subsets: &SubsetMap, k: usize) -> Result<EmpiricalScore> {
    if subsets != &ts.subsets {
        return Err(Error::Config("training set was drawn on a different subset map".into()));
    }
    if subsets.cell_grid().is_none() || !subsets.background().is_empty() {
        return Err(Error::Geometry("patch scores need a square-cell subset map".into()));
    }
    EmpiricalScore::build(ts, MatchRule::Exact, Some(k))
}

impl EmpiricalScore {
    fn build(ts: &TrainingSet, rule: MatchRule, radius: Option<usize>) -> Result<Self> {
        if ts.is_empty() {
            return Err(Error::Domain("empty training set".into()));
        }
        let mut items = Vec::with_capacity(ts.len() * ts.shape().len());
        for it in &ts.items {
            items.extend_from_slice(it.image.values());
        }
        let n = ts.shape().len();
        let mut by_cell = Vec::with_capacity(items.len());
        let mut cell_off = Vec::with_capacity(ts.subsets.len());
        for cell in ts.subsets.cells() {
            cell_off.push(by_cell.len());
            for k in 0..ts.len() {
                let v = &items[k * n..(k + 1) * n];
                by_cell.extend(cell.iter().map(|i| v[i]));
            }
        }
        Ok(Self {
            subsets: ts.subsets.clone(),
            items,
            by_cell,
            cell_off,
            labels: ts.items.iter().map(|it| it.labeled_conditions.clone()).collect(),
            rule,
            radius,
            plan: Mutex::new(None),
        })
    }

    pub fn radius(&self) -> Option<usize> {
        self.radius
    }

    fn n(&self) -> usize {
        self.subsets.shape().len()
    }

    fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.n()..(i + 1) * self.n()]
    }

    /// Effective window radius in cells: `None` for the global learner without a cell grid.
    fn effective_radius(&self) -> Option<usize> {
        let (rows, cols) = self.subsets.cell_grid()?;
        Some(self.radius.unwrap_or(rows.max(cols)))
    }

    /// Cells inside the window of cell `j` (all cells when no grid).
    pub fn window(&self, j: ConditionId) -> Vec<ConditionId> {
        match (self.subsets.cell_grid(), self.effective_radius()) {
            (Some((rows, cols)), Some(k)) => {
                let (r, c) = (j / cols, j % cols);
                let mut out = Vec::new();
                for rr in r.saturating_sub(k)..=(r + k).min(rows - 1) {
                    for cc in c.saturating_sub(k)..=(c + k).min(cols - 1) {
                        out.push(rr * cols + cc);
                    }
                }
                out
            }
            _ => (0..self.subsets.len()).collect(),
        }
    }

    /// Cells whose matching fell back to every item for this `J`.
    pub fn fallback_cells(&self, conds: &ConditionSet) -> Result<Vec<ConditionId>> {
        Ok(self.plan(conds)?.fallback_cells.clone())
    }

    fn plan(&self, conds: &ConditionSet) -> Result<Arc<Plan>> {
        conds.check_within(self.subsets.len())?;
        let mut guard = self.plan.lock().expect("plan cache poisoned");
        if let Some((c, p)) = guard.as_ref() {
            if c == conds {
                return Ok(p.clone());
            }
        }
        let p = Arc::new(self.make_plan(conds));
        *guard = Some((conds.clone(), p.clone()));
        Ok(p)
    }

    fn make_plan(&self, conds: &ConditionSet) -> Plan {
        let n_cells = self.subsets.len().max(1);
        let mut by_key: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut raw: Vec<Vec<usize>> = Vec::new();
        let mut selection_of = Vec::with_capacity(n_cells);
        let mut fallback_cells = Vec::new();
        let windowed = self.radius.is_some();
        let mut global: Option<(usize, bool)> = None;
        for j in 0..self.subsets.len() {
            let (sid, fell_back) = match global {
                Some(g) if !windowed => g,
                _ => {
                    let sel = if windowed {
                        let win = self.window(j);
                        let in_win = |c: &ConditionId| win.binary_search(c).is_ok();
                        let query: ConditionSet = conds.iter().filter(in_win).collect();
                        let local: Vec<ConditionSet> = self
                            .labels
                            .iter()
                            .map(|l| l.iter().filter(in_win).collect())
                            .collect();
                        select_by_labels(local.iter(), &query, self.rule)
                    } else {
                        select_by_labels(self.labels.iter(), conds, self.rule)
                    };
                    let fell_back = sel.kind == SelectionKind::Fallback;
                    let next = raw.len();
                    let sid = *by_key.entry(sel.items.clone()).or_insert_with(|| {
                        raw.push(sel.items);
                        next
                    });
                    global = Some((sid, fell_back));
                    (sid, fell_back)
                }
            };
            if fell_back {
                fallback_cells.push(j);
            }
            selection_of.push(sid);
        }
        let mut active: Vec<usize> = raw.iter().flatten().copied().collect();
        active.sort_unstable();
        active.dedup();
        let selections = raw
            .into_iter()
            .map(|s| {
                s.into_iter()
                    .map(|i| active.binary_search(&i).expect("selected item is active"))
                    .collect()
            })
            .collect();
        Plan {
            active,
            selection_of,
            selections,
            fallback_cells,
        }
    }

    /// Values of cell `j` for every item, `items x |cell|`.
    fn cell_block(&self, j: usize) -> &[f64] {
        let w = self.subsets.cell(j).len();
        &self.by_cell[self.cell_off[j]..self.cell_off[j] + self.labels.len() * w]
    }

    /// Windowed squared distances, `cells x active`.
    fn window_distances(&self, plan: &Plan, x: &[f64]) -> Vec<f64> {
        let cells = self.subsets.cells();
        let n_cells = cells.len();
        let na = plan.active.len();
        let mut per_cell = vec![0.0; n_cells * na];
        for (j, cell) in cells.iter().enumerate() {
            let xs: Vec<f64> = cell.iter().map(|i| x[i]).collect();
            let w = xs.len();
            let block = self.cell_block(j);
            for (d, &item) in per_cell[j * na..(j + 1) * na].iter_mut().zip(&plan.active) {
                let v = &block[item * w..(item + 1) * w];
                let mut acc = 0.0;
                for (a, b) in xs.iter().zip(v) {
                    let e = a - b;
                    acc += e * e;
                }
                *d = acc;
            }
        }
        match self.subsets.cell_grid().zip(self.effective_radius()) {
            Some(((rows, cols), k)) => {
                let mut rowsum = vec![0.0; n_cells * na];
                for r in 0..rows {
                    for c in 0..cols {
                        let dst = &mut rowsum[(r * cols + c) * na..(r * cols + c + 1) * na];
                        for cc in c.saturating_sub(k)..=(c + k).min(cols - 1) {
                            let src = &per_cell[(r * cols + cc) * na..(r * cols + cc + 1) * na];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
                let mut out = vec![0.0; n_cells * na];
                for r in 0..rows {
                    for c in 0..cols {
                        let dst = &mut out[(r * cols + c) * na..(r * cols + c + 1) * na];
                        for rr in r.saturating_sub(k)..=(r + k).min(rows - 1) {
                            let src = &rowsum[(rr * cols + c) * na..(rr * cols + c + 1) * na];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
                out
            }
            None => {
                let mut total = vec![0.0; na];
                for j in 0..n_cells {
                    total.iter_mut().zip(&per_cell[j * na..(j + 1) * na]).for_each(|(d, s)| *d += s);
                }
                for (d, &item) in total.iter_mut().zip(&plan.active) {
                    let v = self.item(item);
                    for i in self.subsets.background().iter() {
                        let e = x[i] - v[i];
                        *d += e * e;
                    }
                }
                let mut out = Vec::with_capacity(n_cells * na);
                for _ in 0..n_cells {
                    out.extend_from_slice(&total);
                }
                out
            }
        }
    }

    /// True when every window spans the whole grid, so all cells share one distance row.
    fn windows_cover_grid(&self) -> bool {
        match (self.subsets.cell_grid(), self.effective_radius()) {
            (Some((rows, cols)), Some(k)) => k + 1 >= rows.max(cols),
            _ => true,
        }
    }

    fn responsibilities(&self, plan: &Plan, dist: &[f64], cell: usize, t: f64) -> Vec<f64> {
        let na = plan.active.len();
        let sel = &plan.selections[plan.selection_of[cell]];
        let inv = 1.0 / (2.0 * t * t);
        let row = &dist[cell * na..(cell + 1) * na];
        let logs: Vec<f64> = sel.iter().map(|&a| -row[a] * inv).collect();
        softmax(&logs)
    }

    fn pixels_of_window(&self, j: ConditionId) -> Vec<usize> {
        if self.subsets.cell_grid().is_none() {
            return (0..self.n()).collect();
        }
        let mut px: Vec<usize> = self
            .window(j)
            .into_iter()
            .flat_map(|c| self.subsets.cell(c).iter())
            .collect();
        px.sort_unstable();
        px
    }
}

impl ScoreField for EmpiricalScore {
    fn shape(&self) -> GridShape {
        self.subsets.shape()
    }

    fn score(&self, x: &[f64], conds: &ConditionSet, t: f64) -> Result<Vec<f64>> {
        check_len(x, self.n())?;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Precondition(format!("kernel bandwidth must be positive, got {t}")));
        }
        let plan = self.plan(conds)?;
        let dist = self.window_distances(&plan, x);
        let t2 = t * t;
        let mut out = vec![0.0; self.n()];
        let mut bg_resp: Option<Vec<f64>> = None;
        let shared = self.windows_cover_grid();
        let mut cached: Option<(usize, Vec<f64>)> = None;
        let mut acc = Vec::new();
        for (j, cell) in self.subsets.cells().iter().enumerate() {
            let sid = plan.selection_of[j];
            let r = match cached.take() {
                Some((s, r)) if shared && s == sid => r,
                _ => self.responsibilities(&plan, &dist, j, t),
            };
            let sel = &plan.selections[sid];
            let w = cell.len();
            let block = self.cell_block(j);
            acc.clear();
            acc.resize(w, 0.0);
            for (rk, &a) in r.iter().zip(sel) {
                if *rk == 0.0 {
                    continue;
                }
                let v = &block[plan.active[a] * w..(plan.active[a] + 1) * w];
                acc.iter_mut().zip(v).for_each(|(s, vi)| *s += rk * vi);
            }
            for (p, i) in cell.iter().enumerate() {
                out[i] = (acc[p] - x[i]) / t2;
            }
            if bg_resp.is_none() {
                bg_resp = Some(r.clone());
            }
            cached = Some((sid, r));
        }
        let background = self.subsets.background();
        if !background.is_empty() {
            // only the global learner admits a background; every cell shares its selection
            let r = match bg_resp {
                Some(r) => r,
                None => {
                    let sel = select_by_labels(self.labels.iter(), conds, self.rule);
                    let logs: Vec<f64> = sel
                        .items
                        .iter()
                        .map(|&i| {
                            let v = self.item(i);
                            -x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * t2)
                        })
                        .collect();
                    let r = softmax(&logs);
                    for i in background.iter() {
                        let acc: f64 = r.iter().zip(&sel.items).map(|(rk, &k)| rk * self.item(k)[i]).sum();
                        out[i] = (acc - x[i]) / t2;
                    }
                    return Ok(out);
                }
            };
            let sel = &plan.selections[plan.selection_of[0]];
            for i in background.iter() {
                let mut acc = 0.0;
                for (rk, &a) in r.iter().zip(sel) {
                    acc += rk * self.item(plan.active[a])[i];
                }
                out[i] = (acc - x[i]) / t2;
            }
        }
        Ok(out)
    }

    fn local_view(&self, conds: &ConditionSet, t: f64, target: usize) -> Result<Option<LocalView>> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Precondition(format!("kernel bandwidth must be positive, got {t}")));
        }
        if target >= self.n() {
            return Err(Error::Index {
                index: target,
                len: self.n(),
            });
        }
        let plan = self.plan(conds)?;
        let cell = self.subsets.owner(target).unwrap_or(0);
        let positions = if self.subsets.owner(target).is_some() {
            self.pixels_of_window(cell)
        } else {
            (0..self.n()).collect()
        };
        let target_pos = positions.binary_search(&target).expect("target lies in its window");
        let sel: Vec<usize> = if self.subsets.is_empty() {
            select_by_labels(self.labels.iter(), conds, self.rule).items
        } else {
            plan.selections[plan.selection_of[cell]]
                .iter()
                .map(|&a| plan.active[a])
                .collect()
        };
        let mut means = Vec::with_capacity(sel.len() * positions.len());
        for &k in &sel {
            let v = self.item(k);
            means.extend(positions.iter().map(|&i| v[i]));
        }
        Ok(Some(LocalView {
            positions,
            target_pos,
            log_weights: vec![0.0; sel.len()],
            means,
            vars: ViewVars::Common(t * t),
        }))
    }
}
