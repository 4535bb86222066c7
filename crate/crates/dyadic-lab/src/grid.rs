//! Dyadic cells on `[0,1)^d`, truncated trees, and piecewise-constant
//! functions with exact integration.
//!
//! Everything downstream works on one [`GridSpec`]: Haar/Wilson indices live
//! on levels `0..M-1` (the coefficient depth), functions are stored by their
//! values on level-`R` cells (the resolution), and `R >= M+1` so that shifted
//! Haar functions at level `M` are still representable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on `d * R` so value arrays stay within desk scale.
const MAX_DIM_BITS: u32 = 26;

/// Grid parameters shared by every object in one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    dim: u32,
    coeff_depth: u32,
    resolution: u32,
}

impl GridSpec {
    /// `dim` is the spatial dimension, `coeff_depth` the number of index
    /// levels (`0..coeff_depth-1`), `resolution` the level on which functions
    /// are constant. Requires `resolution >= coeff_depth + 1`.
    pub fn new(dim: u32, coeff_depth: u32, resolution: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidGrid("dimension must be >= 1".into()));
        }
        if coeff_depth == 0 {
            return Err(Error::InvalidGrid("coefficient depth must be >= 1".into()));
        }
        if resolution < coeff_depth + 1 {
            return Err(Error::InvalidGrid(format!(
                "resolution {} must be >= coefficient depth {} + 1",
                resolution, coeff_depth
            )));
        }
        if dim * resolution > MAX_DIM_BITS {
            return Err(Error::InvalidGrid(format!(
                "d*R = {} exceeds the supported maximum of {}",
                dim * resolution,
                MAX_DIM_BITS
            )));
        }
        Ok(Self {
            dim,
            coeff_depth,
            resolution,
        })
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    /// Haar/Wilson indices live on levels `0..coeff_depth()`.
    pub fn coeff_depth(&self) -> u32 {
        self.coeff_depth
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    /// Number of cells at `level`: `2^{d*level}`.
    pub fn cell_count(&self, level: u32) -> usize {
        1usize << (self.dim * level)
    }

    /// Number of stored values: cells at the resolution level.
    pub fn value_count(&self) -> usize {
        self.cell_count(self.resolution)
    }

    /// Lebesgue measure of one cell at `level`: `2^{-d*level}`.
    pub fn cell_measure(&self, level: u32) -> f64 {
        (-((self.dim * level) as f64)).exp2()
    }

    pub fn root(&self) -> CellIndex {
        CellIndex::root(self.dim)
    }

    fn short(&self) -> (u32, u32, u32) {
        (self.dim, self.coeff_depth, self.resolution)
    }

    pub(crate) fn check_match(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            let (left_d, left_m, left_r) = self.short();
            let (right_d, right_m, right_r) = other.short();
            return Err(Error::GridMismatch {
                left_d,
                left_m,
                left_r,
                right_d,
                right_m,
                right_r,
            });
        }
        Ok(())
    }
}

/// Flat lexicographic index of the cell with the given coordinates at `level`.
///
/// Axis 0 is the most significant digit: `flat = sum_i pos[i] * 2^{level*(d-1-i)}`.
pub(crate) fn flat_from_coords(level: u32, coords: &[u32]) -> usize {
    let mut flat = 0usize;
    for &c in coords {
        flat = (flat << level) | c as usize;
    }
    flat
}

/// Inverse of [`flat_from_coords`]; writes into `out` (length `d`).
pub(crate) fn coords_from_flat(dim: u32, level: u32, flat: usize, out: &mut [u32]) {
    let mask = (1usize << level) - 1;
    let mut rest = flat;
    for i in (0..dim as usize).rev() {
        out[i] = (rest & mask) as u32;
        rest >>= level;
    }
}

/// Flat index of the child cell selected by `code` (coordinate bit pattern,
/// axis 0 in the most significant bit) of the cell `(parent_level, parent_flat)`.
pub(crate) fn child_flat(dim: u32, parent_level: u32, parent_flat: usize, code: u32) -> usize {
    if dim == 1 {
        return (parent_flat << 1) | code as usize;
    }
    let mut coords = [0u32; 8];
    let coords = &mut coords[..dim as usize];
    coords_from_flat(dim, parent_level, parent_flat, coords);
    let mut flat = 0usize;
    let child_level = parent_level + 1;
    for (i, &c) in coords.iter().enumerate() {
        let bit = (code >> (dim - 1 - i as u32)) & 1;
        flat = (flat << child_level) | ((2 * c + bit) as usize);
    }
    flat
}

/// Flat index of the level-`to_level` ancestor of `(from_level, flat)`.
pub(crate) fn ancestor_flat(dim: u32, from_level: u32, flat: usize, to_level: u32) -> usize {
    debug_assert!(to_level <= from_level);
    if dim == 1 {
        return flat >> (from_level - to_level);
    }
    let shift = from_level - to_level;
    let mut coords = [0u32; 8];
    let coords = &mut coords[..dim as usize];
    coords_from_flat(dim, from_level, flat, coords);
    let mut out = 0usize;
    for &c in coords.iter() {
        out = (out << to_level) | ((c >> shift) as usize);
    }
    out
}

/// One dyadic cube: `prod_i [pos_i 2^{-level}, (pos_i+1) 2^{-level})`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellIndex {
    dim: u32,
    level: u32,
    pos: Vec<u32>,
}

impl CellIndex {
    pub fn new(dim: u32, level: u32, pos: Vec<u32>) -> Result<Self> {
        if dim == 0 || pos.len() != dim as usize {
            return Err(Error::InvalidCell(format!(
                "position has {} coordinates for dimension {}",
                pos.len(),
                dim
            )));
        }
        let bound = 1u64 << level;
        if pos.iter().any(|&p| (p as u64) >= bound) {
            return Err(Error::InvalidCell(format!(
                "position {:?} out of range for level {}",
                pos, level
            )));
        }
        Ok(Self { dim, level, pos })
    }

    pub fn root(dim: u32) -> Self {
        Self {
            dim,
            level: 0,
            pos: vec![0; dim as usize],
        }
    }

    pub fn from_flat(dim: u32, level: u32, flat: usize) -> Self {
        let mut pos = vec![0u32; dim as usize];
        coords_from_flat(dim, level, flat, &mut pos);
        Self { dim, level, pos }
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn pos(&self) -> &[u32] {
        &self.pos
    }

    pub fn flat(&self) -> usize {
        flat_from_coords(self.level, &self.pos)
    }

    /// `|I| = 2^{-d*level}`.
    pub fn measure(&self) -> f64 {
        (-((self.dim * self.level) as f64)).exp2()
    }

    /// The `2^d` level-`(level+1)` cells tiling this cell, ordered
    /// lexicographically by coordinate bit pattern. In d=1 the order is
    /// (left, right) = (minus, plus).
    pub fn children(&self) -> Vec<CellIndex> {
        let n = 1u32 << self.dim;
        (0..n).map(|code| self.child(code)).collect()
    }

    /// Child selected by coordinate bit pattern `code` (axis 0 = MSB).
    pub fn child(&self, code: u32) -> CellIndex {
        debug_assert!(code < (1 << self.dim));
        let pos = self
            .pos
            .iter()
            .enumerate()
            .map(|(i, &p)| 2 * p + ((code >> (self.dim - 1 - i as u32)) & 1))
            .collect();
        CellIndex {
            dim: self.dim,
            level: self.level + 1,
            pos,
        }
    }

    /// Left half in d=1 (the "minus" child).
    pub fn left(&self) -> CellIndex {
        self.child(0)
    }

    /// Right half in d=1 (the "plus" child).
    pub fn right(&self) -> CellIndex {
        self.child(1 << (self.dim - 1))
    }

    pub fn parent(&self) -> Option<CellIndex> {
        if self.level == 0 {
            return None;
        }
        let pos = self.pos.iter().map(|&p| p / 2).collect();
        Some(CellIndex {
            dim: self.dim,
            level: self.level - 1,
            pos,
        })
    }

    /// Whether `other` is contained in `self` (dyadic cells are nested or disjoint).
    pub fn contains(&self, other: &CellIndex) -> bool {
        if other.level < self.level || self.dim != other.dim {
            return false;
        }
        let shift = other.level - self.level;
        self.pos
            .iter()
            .zip(other.pos.iter())
            .all(|(&p, &q)| (q >> shift) == p)
    }

    /// Measure of the intersection of two dyadic cells (nested or disjoint).
    pub fn intersection_measure(&self, other: &CellIndex) -> f64 {
        if self.contains(other) {
            other.measure()
        } else if other.contains(self) {
            self.measure()
        } else {
            0.0
        }
    }
}

impl std::fmt::Display for CellIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let scale = 1u64 << self.level;
        let parts: Vec<String> = self
            .pos
            .iter()
            .map(|&p| format!("[{}/{},{}/{})", p, scale, p + 1, scale))
            .collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Per-level cell integrals of a step function; level `R` down to level 0.
#[derive(Clone, Debug)]
pub struct Pyramid {
    dim: u32,
    levels: Vec<Vec<f64>>,
}

impl Pyramid {
    fn build(f: &StepFunction) -> Self {
        let grid = f.grid;
        let r = grid.resolution;
        let d = grid.dim;
        let mut levels: Vec<Vec<f64>> = Vec::with_capacity(r as usize + 1);
        levels.resize(r as usize + 1, Vec::new());
        let cell = grid.cell_measure(r);
        levels[r as usize] = f.values.iter().map(|v| v * cell).collect();
        for level in (0..r).rev() {
            let fine = &levels[level as usize + 1];
            let mut coarse = vec![0.0; grid.cell_count(level)];
            for (flat, &v) in fine.iter().enumerate() {
                coarse[ancestor_flat(d, level + 1, flat, level)] += v;
            }
            levels[level as usize] = coarse;
        }
        Self { dim: d, levels }
    }

    /// Exact integral of the function over the cell `(level, flat)`.
    pub fn integral(&self, level: u32, flat: usize) -> f64 {
        self.levels[level as usize][flat]
    }

    /// Exact average over the cell `(level, flat)`.
    pub fn average(&self, level: u32, flat: usize) -> f64 {
        self.levels[level as usize][flat] * ((self.dim * level) as f64).exp2()
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    /// Finest stored level (the resolution).
    pub fn top_level(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn level_slice(&self, level: u32) -> &[f64] {
        &self.levels[level as usize]
    }
}

/// Per-level accumulator for sums of functions that are constant on cells at
/// levels `0..=top`; one carry-down pass materializes the total as a step
/// function at the grid resolution.
pub(crate) struct LevelAccumulator {
    grid: GridSpec,
    top: u32,
    levels: Vec<Vec<f64>>,
}

impl LevelAccumulator {
    pub(crate) fn new(grid: GridSpec, top: u32) -> Self {
        let levels = (0..=top).map(|l| vec![0.0; grid.cell_count(l)]).collect();
        Self { grid, top, levels }
    }

    pub(crate) fn add(&mut self, level: u32, pos: usize, v: f64) {
        self.levels[level as usize][pos] += v;
    }

    pub(crate) fn collect(mut self) -> Result<StepFunction> {
        let d = self.grid.dim();
        for level in 0..self.top {
            let (coarse, rest) = self.levels.split_at_mut(level as usize + 1);
            let coarse = &coarse[level as usize];
            let fine = &mut rest[0];
            for (pos, &v) in coarse.iter().enumerate() {
                if v != 0.0 {
                    for code in 0..(1u32 << d) {
                        fine[child_flat(d, level, pos, code)] += v;
                    }
                }
            }
        }
        StepFunction::from_level_values(self.grid, self.top, &self.levels[self.top as usize])
    }
}

/// A real-valued function on `[0,1)^d`, constant on level-`R` dyadic cells.
///
/// Values are stored in lexicographic cell order (axis 0 most significant).
#[derive(Clone, Debug, PartialEq)]
pub struct StepFunction {
    grid: GridSpec,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StepFunctionRepr {
    d: u32,
    #[serde(rename = "R")]
    r: u32,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn constant(grid: GridSpec, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.value_count()],
        }
    }

    pub fn zero(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.value_count() {
            return Err(Error::InvalidGrid(format!(
                "expected {} values for resolution {}, got {}",
                grid.value_count(),
                grid.resolution(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Builds the function that is constant on level-`level` cells with the
    /// given per-cell values, expanded to the grid resolution.
    pub fn from_level_values(grid: GridSpec, level: u32, vals: &[f64]) -> Result<Self> {
        if level > grid.resolution() {
            return Err(Error::LevelOutOfRange {
                level,
                limit: grid.resolution(),
            });
        }
        if vals.len() != grid.cell_count(level) {
            return Err(Error::InvalidGrid(format!(
                "expected {} values at level {}, got {}",
                grid.cell_count(level),
                level,
                vals.len()
            )));
        }
        let r = grid.resolution();
        let d = grid.dim();
        let values = (0..grid.value_count())
            .map(|j| vals[ancestor_flat(d, r, j, level)])
            .collect();
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Exact integral over `[0,1)^d`.
    pub fn integral(&self) -> f64 {
        let cell = self.grid.cell_measure(self.grid.resolution());
        self.values.iter().sum::<f64>() * cell
    }

    /// Exact mean of the function over the cell.
    pub fn average_on(&self, cell: &CellIndex) -> Result<f64> {
        let r = self.grid.resolution();
        if cell.level() > r {
            return Err(Error::LevelOutOfRange {
                level: cell.level(),
                limit: r,
            });
        }
        if cell.dim() != self.grid.dim() {
            return Err(Error::InvalidCell(format!(
                "cell dimension {} does not match grid dimension {}",
                cell.dim(),
                self.grid.dim()
            )));
        }
        let d = self.grid.dim();
        let shift = r - cell.level();
        let per_axis = 1usize << shift;
        let count = 1usize << (d * shift);
        let base: Vec<u32> = cell.pos().iter().map(|&p| p << shift).collect();
        let mut sum = 0.0;
        let mut off = vec![0u32; d as usize];
        for k in 0..count {
            let mut rest = k;
            for i in (0..d as usize).rev() {
                off[i] = (rest % per_axis) as u32;
                rest /= per_axis;
            }
            let mut flat = 0usize;
            for i in 0..d as usize {
                flat = (flat << r) | (base[i] + off[i]) as usize;
            }
            sum += self.values[flat];
        }
        Ok(sum / count as f64)
    }

    /// Unweighted L2 inner product `sum f*g * 2^{-dR}` (exact).
    pub fn inner(&self, other: &StepFunction) -> Result<f64> {
        self.grid.check_match(&other.grid)?;
        let cell = self.grid.cell_measure(self.grid.resolution());
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * cell)
    }

    /// Weighted inner product `sum f*g*w * 2^{-dR}`.
    pub fn inner_w(&self, other: &StepFunction, weight: &StepFunction) -> Result<f64> {
        self.grid.check_match(&other.grid)?;
        self.grid.check_match(&weight.grid)?;
        let cell = self.grid.cell_measure(self.grid.resolution());
        let mut sum = 0.0;
        for i in 0..self.values.len() {
            sum += self.values[i] * other.values[i] * weight.values[i];
        }
        Ok(sum * cell)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).expect("same grid").sqrt()
    }

    pub fn norm_w(&self, weight: &StepFunction) -> Result<f64> {
        Ok(self.inner_w(self, weight)?.sqrt())
    }

    pub fn add(&self, other: &StepFunction) -> Result<StepFunction> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &StepFunction) -> Result<StepFunction> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &StepFunction) -> Result<StepFunction> {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &StepFunction, op: impl Fn(f64, f64) -> f64) -> Result<StepFunction> {
        self.grid.check_match(&other.grid)?;
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| op(a, b))
            .collect();
        Ok(StepFunction {
            grid: self.grid,
            values,
        })
    }

    pub fn scale(&self, c: f64) -> StepFunction {
        self.map(|v| v * c)
    }

    pub fn powf(&self, e: f64) -> StepFunction {
        self.map(|v| v.powf(e))
    }

    pub fn recip(&self) -> StepFunction {
        self.map(|v| 1.0 / v)
    }

    pub fn sqrt(&self) -> StepFunction {
        self.map(|v| v.sqrt())
    }

    pub fn map(&self, op: impl Fn(f64) -> f64) -> StepFunction {
        StepFunction {
            grid: self.grid,
            values: self.values.iter().map(|&v| op(v)).collect(),
        }
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Whether the function is constant on every level-`level` cell
    /// (exact float equality; generated functions satisfy this by construction).
    pub fn constant_on_level(&self, level: u32) -> bool {
        if level >= self.grid.resolution() {
            return true;
        }
        let r = self.grid.resolution();
        let d = self.grid.dim();
        let mut seen: Vec<Option<f64>> = vec![None; self.grid.cell_count(level)];
        for (j, &v) in self.values.iter().enumerate() {
            let anc = ancestor_flat(d, r, j, level);
            match seen[anc] {
                None => seen[anc] = Some(v),
                Some(w) if w == v => {}
                Some(_) => return false,
            }
        }
        true
    }

    /// Coarsest level on which the function is constant per cell.
    pub fn resolution_level(&self) -> u32 {
        for level in 0..self.grid.resolution() {
            if self.constant_on_level(level) {
                return level;
            }
        }
        self.grid.resolution()
    }

    /// Cell-integral pyramid (levels `0..=R`).
    pub fn pyramid(&self) -> Pyramid {
        Pyramid::build(self)
    }

    /// JSON form `{"d":..,"R":..,"values":[..]}`; values in lexicographic
    /// cell order, written in shortest round-trip decimal form.
    pub fn to_json(&self) -> String {
        let repr = StepFunctionRepr {
            d: self.grid.dim(),
            r: self.grid.resolution(),
            values: self.values.clone(),
        };
        serde_json::to_string(&repr).expect("step function serializes")
    }

    /// Parses the JSON form; the coefficient depth is supplied by the caller
    /// (it is experiment configuration, not part of the data).
    pub fn from_json(s: &str, coeff_depth: u32) -> Result<StepFunction> {
        let repr: StepFunctionRepr = serde_json::from_str(s)?;
        let grid = GridSpec::new(repr.d, coeff_depth, repr.r)?;
        StepFunction::from_values(grid, repr.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(m: u32, r: u32) -> GridSpec {
        GridSpec::new(1, m, r).unwrap()
    }

    #[test]
    fn children_unit_interval() {
        let root = CellIndex::root(1);
        let kids = root.children();
        assert_eq!(kids.len(), 2);
        assert_eq!(kids[0], CellIndex::new(1, 1, vec![0]).unwrap());
        assert_eq!(kids[1], CellIndex::new(1, 1, vec![1]).unwrap());
        assert_eq!(root.left(), kids[0]);
        assert_eq!(root.right(), kids[1]);
    }

    #[test]
    fn children_quadrants_order() {
        let root = CellIndex::root(2);
        let kids = root.children();
        let pos: Vec<&[u32]> = kids.iter().map(|c| c.pos()).collect();
        assert_eq!(pos, vec![&[0, 0][..], &[0, 1], &[1, 0], &[1, 1]]);
    }

    #[test]
    fn children_of_right_half() {
        let cell = CellIndex::new(1, 1, vec![1]).unwrap(); // [1/2, 1)
        let kids = cell.children();
        assert_eq!(kids[0].pos(), &[2]); // [1/2, 3/4)
        assert_eq!(kids[1].pos(), &[3]); // [3/4, 1)
    }

    #[test]
    fn parent_child_roundtrip() {
        let cell = CellIndex::new(2, 3, vec![5, 2]).unwrap();
        for child in cell.children() {
            assert_eq!(child.parent().unwrap(), cell);
            assert!(cell.contains(&child));
        }
        assert_eq!(CellIndex::root(2).parent(), None);
    }

    #[test]
    fn measure_and_flat() {
        let cell = CellIndex::new(2, 2, vec![3, 1]).unwrap();
        assert_eq!(cell.measure(), 1.0 / 16.0);
        assert_eq!(cell.flat(), 3 * 4 + 1);
        assert_eq!(CellIndex::from_flat(2, 2, 13), cell);
    }

    #[test]
    fn average_constant() {
        let g = grid1(1, 2);
        let f = StepFunction::constant(g, 7.5);
        for level in 0..=2 {
            for flat in 0..g.cell_count(level) {
                let cell = CellIndex::from_flat(1, level, flat);
                assert_eq!(f.average_on(&cell).unwrap(), 7.5);
            }
        }
    }

    #[test]
    fn average_two_cell() {
        // f = (2,1) at R=1 is not a valid grid (needs R >= M+1), so embed at R=2.
        let g = grid1(1, 2);
        let f = StepFunction::from_level_values(g, 1, &[2.0, 1.0]).unwrap();
        assert_eq!(f.average_on(&CellIndex::root(1)).unwrap(), 1.5);
        assert_eq!(f.average_on(&CellIndex::root(1).left()).unwrap(), 2.0);
    }

    #[test]
    fn average_rejects_too_fine() {
        let g = grid1(1, 2);
        let f = StepFunction::constant(g, 1.0);
        let cell = CellIndex::new(1, 3, vec![0]).unwrap();
        assert!(matches!(
            f.average_on(&cell),
            Err(Error::LevelOutOfRange { .. })
        ));
    }

    #[test]
    fn inner_basics() {
        let g = grid1(1, 2);
        let one = StepFunction::constant(g, 1.0);
        assert_eq!(one.inner(&one).unwrap(), 1.0);

        let f = StepFunction::from_level_values(g, 1, &[1.0, -1.0]).unwrap();
        let w = StepFunction::from_level_values(g, 1, &[2.0, 1.0]).unwrap();
        assert_eq!(f.inner_w(&f, &w).unwrap(), 1.5);

        let h = StepFunction::from_level_values(g, 1, &[0.25, 4.0]).unwrap();
        assert_eq!(f.inner(&h).unwrap(), h.inner(&f).unwrap());
    }

    #[test]
    fn inner_rejects_mismatch() {
        let f = StepFunction::constant(grid1(1, 2), 1.0);
        let h = StepFunction::constant(grid1(1, 3), 1.0);
        assert!(matches!(f.inner(&h), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn tiling_sums_to_integral() {
        let g = GridSpec::new(2, 1, 3).unwrap();
        let values: Vec<f64> = (0..g.value_count()).map(|j| (j as f64 * 0.37).sin()).collect();
        let f = StepFunction::from_values(g, values).unwrap();
        let total = f.integral();
        for level in 0..=3 {
            let mut sum = 0.0;
            for flat in 0..g.cell_count(level) {
                let cell = CellIndex::from_flat(2, level, flat);
                sum += f.average_on(&cell).unwrap() * cell.measure();
            }
            assert!((sum - total).abs() < 1e-14, "level {level}: {sum} vs {total}");
        }
    }

    #[test]
    fn parent_average_is_mean_of_children() {
        let g = GridSpec::new(2, 1, 3).unwrap();
        let values: Vec<f64> = (0..g.value_count()).map(|j| (j as f64).cos()).collect();
        let f = StepFunction::from_values(g, values).unwrap();
        for flat in 0..g.cell_count(1) {
            let cell = CellIndex::from_flat(2, 1, flat);
            let mean: f64 = cell
                .children()
                .iter()
                .map(|c| f.average_on(c).unwrap())
                .sum::<f64>()
                / 4.0;
            assert!((f.average_on(&cell).unwrap() - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn pyramid_matches_direct_averages() {
        let g = GridSpec::new(2, 2, 4).unwrap();
        let values: Vec<f64> = (0..g.value_count()).map(|j| (j as f64 * 0.11).tan()).collect();
        let f = StepFunction::from_values(g, values).unwrap();
        let pyr = f.pyramid();
        for level in 0..=4u32 {
            for flat in 0..g.cell_count(level) {
                let cell = CellIndex::from_flat(2, level, flat);
                let direct = f.average_on(&cell).unwrap();
                assert!(
                    (pyr.average(level, flat) - direct).abs() < 1e-12 * (1.0 + direct.abs()),
                    "level {level} flat {flat}"
                );
            }
        }
    }

    #[test]
    fn resolution_level_detection() {
        let g = grid1(3, 5);
        let coarse = StepFunction::from_level_values(g, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(coarse.resolution_level(), 2);
        assert!(coarse.constant_on_level(2));
        assert!(coarse.constant_on_level(3));
        assert!(!coarse.constant_on_level(1));
    }

    #[test]
    fn json_roundtrip_exact() {
        let g = grid1(2, 3);
        let values: Vec<f64> = (0..8).map(|j| (j as f64 * 0.123).exp()).collect();
        let f = StepFunction::from_values(g, values).unwrap();
        let back = StepFunction::from_json(&f.to_json(), 2).unwrap();
        assert_eq!(f, back);
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(1, 3, 3).is_err());
        assert!(GridSpec::new(0, 1, 2).is_err());
        assert!(GridSpec::new(1, 3, 4).is_ok());
    }

    #[test]
    fn intersection_measure_nested_or_disjoint() {
        let a = CellIndex::new(1, 1, vec![0]).unwrap();
        let b = CellIndex::new(1, 2, vec![1]).unwrap();
        let c = CellIndex::new(1, 2, vec![2]).unwrap();
        assert_eq!(a.intersection_measure(&b), 0.25);
        assert_eq!(b.intersection_measure(&a), 0.25);
        assert_eq!(a.intersection_measure(&c), 0.0);
    }
}
