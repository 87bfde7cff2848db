//! Grid geometry, pixel index sets, condition sets and seeded randomness.
//!
//! Pixels are indexed row-major: pixel `(row, col)` lives at `row * width + col`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Geometry(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// `(row, col)` of a pixel index.
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A single-channel image with finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    shape: GridShape,
    values: Vec<f64>,
}

impl Image {
    pub fn new(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Shape {
                expected: shape.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite pixel value at index {i}")));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.shape.index(row, col)]
    }
}

/// Strictly increasing set of pixel indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    /// Builds a set from arbitrary indices (sorted, deduplicated).
    pub fn from_unsorted(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    /// Accepts an already strictly increasing sequence.
    pub fn from_sorted(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(
                "index set must be strictly increasing".to_string(),
            ));
        }
        Ok(Self(indices))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn full(len: usize) -> Self {
        Self((0..len).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    /// Position of `index` within the set, if present.
    pub fn position(&self, index: usize) -> Option<usize> {
        self.0.binary_search(&index).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Self::from_unsorted(v)
    }

    pub fn is_disjoint(&self, other: &IndexSet) -> bool {
        let (mut a, mut b) = (0, 0);
        while a < self.0.len() && b < other.0.len() {
            match self.0[a].cmp(&other.0[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }

    /// Complement within `[0, len)`.
    pub fn complement(&self, len: usize) -> IndexSet {
        Self((0..len).filter(|i| !self.contains(*i)).collect())
    }

    pub fn check_bounds(&self, len: usize) -> Result<()> {
        match self.0.last() {
            Some(&max) if max >= len => Err(Error::Index { index: max, len }),
            _ => Ok(()),
        }
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        Self::from_unsorted(iter.into_iter().collect())
    }
}

/// Identifier of one conditioner (one grid cell in the location worlds).
pub type ConditionId = usize;

/// A set of active conditioners, kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionSet(Vec<ConditionId>);

impl ConditionSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(count: usize) -> Self {
        Self((0..count).collect())
    }

    pub fn single(id: ConditionId) -> Self {
        Self(vec![id])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: ConditionId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = ConditionId> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[ConditionId] {
        &self.0
    }

    pub fn without(&self, id: ConditionId) -> Self {
        Self(self.0.iter().copied().filter(|&j| j != id).collect())
    }

    pub fn with(&self, id: ConditionId) -> Self {
        let mut v = self.0.clone();
        v.push(id);
        v.into_iter().collect()
    }

    pub fn intersection(&self, other: &ConditionSet) -> Self {
        Self(self.0.iter().copied().filter(|&j| other.contains(j)).collect())
    }

    pub fn intersection_size(&self, other: &ConditionSet) -> usize {
        self.0.iter().filter(|&&j| other.contains(j)).count()
    }

    pub fn is_subset(&self, other: &ConditionSet) -> bool {
        self.0.iter().all(|&j| other.contains(j))
    }

    /// Fails when any id is outside `[0, count)`.
    pub fn check_within(&self, count: usize) -> Result<()> {
        match self.0.last() {
            Some(&j) if j >= count => Err(Error::Domain(format!(
                "unknown condition id {j} (only {count} conditions)"
            ))),
            _ => Ok(()),
        }
    }

    /// All subsets of `[0, count)`, ordered by bitmask.
    pub fn power_set(count: usize) -> Vec<ConditionSet> {
        (0u64..(1u64 << count))
            .map(|mask| Self((0..count).filter(|j| mask >> j & 1 == 1).collect()))
            .collect()
    }
}

impl FromIterator<ConditionId> for ConditionSet {
    fn from_iter<T: IntoIterator<Item = ConditionId>>(iter: T) -> Self {
        let mut v: Vec<_> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }
}

impl fmt::Display for ConditionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, j) in self.0.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{j}")?;
        }
        write!(f, "}}")
    }
}

/// Disjoint pixel subsets, one per conditioner, plus the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMap {
    shape: GridShape,
    cells: Vec<IndexSet>,
    background: IndexSet,
    cell_size: Option<usize>,
    owner: Vec<Option<ConditionId>>,
}

impl SubsetMap {
    /// Validates disjointness and coverage of the given subsets.
    pub fn from_parts(shape: GridShape, cells: Vec<IndexSet>, background: IndexSet) -> Result<Self> {
        let n = shape.len();
        let mut owner: Vec<Option<ConditionId>> = vec![None; n];
        let mut covered = vec![false; n];
        for (j, cell) in cells.iter().enumerate() {
            cell.check_bounds(n)?;
            for i in cell.iter() {
                if covered[i] {
                    return Err(Error::Geometry(format!(
                        "pixel {i} belongs to more than one subset"
                    )));
                }
                covered[i] = true;
                owner[i] = Some(j);
            }
        }
        background.check_bounds(n)?;
        for i in background.iter() {
            if covered[i] {
                return Err(Error::Geometry(format!(
                    "background pixel {i} overlaps a condition subset"
                )));
            }
            covered[i] = true;
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::Geometry(format!("pixel {i} not covered by any subset")));
        }
        Ok(Self {
            shape,
            cells,
            background,
            cell_size: None,
            owner,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    /// Number of conditioners.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, j: ConditionId) -> &IndexSet {
        &self.cells[j]
    }

    pub fn cells(&self) -> &[IndexSet] {
        &self.cells
    }

    pub fn background(&self) -> &IndexSet {
        &self.background
    }

    /// Conditioner owning pixel `i`, or `None` for background pixels.
    pub fn owner(&self, i: usize) -> Option<ConditionId> {
        self.owner[i]
    }

    /// Side length of the square cells when built by [`make_subset_map`].
    pub fn cell_size(&self) -> Option<usize> {
        self.cell_size
    }

    /// `(rows, cols)` of the conditioner grid when built from square cells.
    pub fn cell_grid(&self) -> Option<(usize, usize)> {
        self.cell_size
            .map(|c| (self.shape.height / c, self.shape.width / c))
    }

    /// Union of the subsets of `conds`.
    pub fn union_of(&self, conds: &ConditionSet) -> IndexSet {
        conds
            .iter()
            .flat_map(|j| self.cells[j].iter())
            .collect()
    }
}

/// Partitions the grid into `cell x cell` blocks, one conditioner per block in row-major order.
pub fn make_subset_map(shape: GridShape, cell: usize) -> Result<SubsetMap> {
    if cell == 0 || shape.height % cell != 0 || shape.width % cell != 0 {
        return Err(Error::Geometry(format!(
            "cell size {cell} does not divide grid {shape}"
        )));
    }
    let (rows, cols) = (shape.height / cell, shape.width / cell);
    let mut cells = Vec::with_capacity(rows * cols);
    for cr in 0..rows {
        for cc in 0..cols {
            let mut idx = Vec::with_capacity(cell * cell);
            for r in cr * cell..(cr + 1) * cell {
                for c in cc * cell..(cc + 1) * cell {
                    idx.push(shape.index(r, c));
                }
            }
            cells.push(IndexSet(idx));
        }
    }
    let mut map = SubsetMap::from_parts(shape, cells, IndexSet::empty())?;
    map.cell_size = Some(cell);
    Ok(map)
}

/// Values of `x` at the indices of `s`, in order.
pub fn restrict(x: &Image, s: &IndexSet) -> Result<Vec<f64>> {
    s.check_bounds(x.values.len())?;
    Ok(s.iter().map(|i| x.values[i]).collect())
}

/// `base` with the positions in `s` overwritten by `v`.
pub fn scatter(v: &[f64], s: &IndexSet, base: &Image) -> Result<Image> {
    if v.len() != s.len() {
        return Err(Error::Shape {
            expected: s.len(),
            got: v.len(),
        });
    }
    s.check_bounds(base.values.len())?;
    let mut out = base.clone();
    for (value, i) in v.iter().zip(s.iter()) {
        if !value.is_finite() {
            return Err(Error::Domain(format!("non-finite value scattered to {i}")));
        }
        out.values[i] = *value;
    }
    Ok(out)
}

/// Root seed for every stochastic routine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for stream `tag` (splitmix64 finalizer).
    pub fn derive(self, tag: u64) -> Seed {
        let mut z = self
            .0
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(tag.wrapping_add(1)));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}
