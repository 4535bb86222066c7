//! The 1-d Haar system, weighted Haar functions, and the disbalanced
//! decomposition.
//!
//! Conventions: `h_I = (1_{I-} - 1_{I+}) / sqrt|I|` (positive on the LEFT
//! half), `h1_I = 1_I / |I|`. The weighted Haar function `h^w_K` keeps the
//! same orientation — positive on `K-` — so that the disbalanced identity
//!
//! ```text
//! <h_K, g>_w = C_K(w) <h^w_K, g>_w + D_K(w) <h1_K, g>_w
//! ```
//!
//! holds with the nonnegative square root `C_K(w) = sqrt(<w>_{K+} <w>_{K-} / <w>_K)`
//! and `D_K(w) = w-hat_K / <w>_K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellIndex, GridSpec, Pyramid, StepFunction};
use crate::weight::Weight;

/// Index of one 1-d Haar function: the dyadic interval at `(level, pos)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HaarIndex {
    pub level: u32,
    pub pos: usize,
}

impl HaarIndex {
    pub fn new(level: u32, pos: usize) -> Self {
        Self { level, pos }
    }

    pub fn root() -> Self {
        Self { level: 0, pos: 0 }
    }

    pub fn cell(&self) -> CellIndex {
        CellIndex::from_flat(1, self.level, self.pos)
    }

    /// Index of the left child interval `I-`.
    pub fn left(&self) -> HaarIndex {
        HaarIndex::new(self.level + 1, 2 * self.pos)
    }

    /// Heap offset in a dense level-major layout.
    fn heap(&self) -> usize {
        (1usize << self.level) - 1 + self.pos
    }

    pub fn measure(&self) -> f64 {
        (-(self.level as f64)).exp2()
    }
}

/// Number of Haar indices on levels `0..depth`: `2^depth - 1`.
pub fn index_count(depth: u32) -> usize {
    (1usize << depth) - 1
}

/// All indices at levels `0..depth`, level-major, position-minor.
pub fn indices(depth: u32) -> impl Iterator<Item = HaarIndex> {
    (0..depth).flat_map(|level| (0..(1usize << level)).map(move |pos| HaarIndex { level, pos }))
}

fn check_dim1(grid: &GridSpec) -> Result<()> {
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid(format!(
            "the 1-d Haar system requires dimension 1, got {}",
            grid.dim()
        )));
    }
    Ok(())
}

fn check_representable(grid: &GridSpec, idx: HaarIndex) -> Result<()> {
    check_dim1(grid)?;
    if idx.level + 1 > grid.resolution() {
        return Err(Error::LevelOutOfRange {
            level: idx.level,
            limit: grid.resolution() - 1,
        });
    }
    if idx.pos >= grid.cell_count(idx.level) {
        return Err(Error::InvalidCell(format!(
            "position {} out of range at level {}",
            idx.pos, idx.level
        )));
    }
    Ok(())
}

/// The Haar function `h_I = (1_{I-} - 1_{I+}) / sqrt|I|`.
pub fn haar_fn(grid: GridSpec, idx: HaarIndex) -> Result<StepFunction> {
    check_representable(&grid, idx)?;
    let r = grid.resolution();
    let scale = (idx.level as f64 / 2.0).exp2(); // 1/sqrt|I|
    let block = 1usize << (r - idx.level - 1); // resolution cells per half
    let start = idx.pos << (r - idx.level);
    let mut values = vec![0.0; grid.value_count()];
    values[start..start + block].fill(scale);
    values[start + block..start + 2 * block].fill(-scale);
    StepFunction::from_values(grid, values)
}

/// The averaging function `h1_I = 1_I / |I|`.
pub fn avg_fn(grid: GridSpec, idx: HaarIndex) -> Result<StepFunction> {
    check_representable(&grid, idx)?;
    let r = grid.resolution();
    let scale = (idx.level as f64).exp2(); // 1/|I|
    let start = idx.pos << (r - idx.level);
    let len = 1usize << (r - idx.level);
    let mut values = vec![0.0; grid.value_count()];
    values[start..start + len].fill(scale);
    StepFunction::from_values(grid, values)
}

/// Haar coefficient `f-hat_I = <f, h_I>` (exact, via cell integrals).
pub fn haar_coeff(f: &StepFunction, idx: HaarIndex) -> Result<f64> {
    check_representable(&f.grid(), idx)?;
    Ok(coeff_from_pyramid(&f.pyramid(), idx))
}

/// Haar coefficient computed from a prebuilt integral pyramid.
pub(crate) fn coeff_from_pyramid(pyr: &Pyramid, idx: HaarIndex) -> f64 {
    let scale = (idx.level as f64 / 2.0).exp2();
    (pyr.integral(idx.level + 1, 2 * idx.pos) - pyr.integral(idx.level + 1, 2 * idx.pos + 1))
        * scale
}

/// Dense coefficient map on levels `0..depth` plus the global average.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMap {
    depth: u32,
    avg: f64,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CoefficientMapRepr {
    #[serde(rename = "M")]
    m: u32,
    coeffs: Vec<(u32, usize, f64)>,
    avg: f64,
}

impl CoefficientMap {
    pub fn zeros(depth: u32) -> Self {
        Self {
            depth,
            avg: 0.0,
            values: vec![0.0; index_count(depth)],
        }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn avg(&self) -> f64 {
        self.avg
    }

    pub fn set_avg(&mut self, avg: f64) {
        self.avg = avg;
    }

    pub fn get(&self, idx: HaarIndex) -> f64 {
        self.values[idx.heap()]
    }

    pub fn set(&mut self, idx: HaarIndex, v: f64) {
        self.values[idx.heap()] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (HaarIndex, f64)> + '_ {
        indices(self.depth).map(move |idx| (idx, self.values[idx.heap()]))
    }

    /// JSON form `{"M":..,"coeffs":[[level,pos,value],..],"avg":..}` with a
    /// dense entry list.
    pub fn to_json(&self) -> String {
        let coeffs = indices(self.depth)
            .map(|idx| (idx.level, idx.pos, self.get(idx)))
            .collect();
        serde_json::to_string(&CoefficientMapRepr {
            m: self.depth,
            coeffs,
            avg: self.avg,
        })
        .expect("coefficient map serializes")
    }

    /// Parses the JSON form; every index on levels `0..M` must be present.
    pub fn from_json(s: &str) -> Result<CoefficientMap> {
        let repr: CoefficientMapRepr = serde_json::from_str(s)?;
        let mut values = vec![f64::NAN; index_count(repr.m)];
        for (level, pos, v) in repr.coeffs {
            if level >= repr.m || pos >= (1usize << level) {
                return Err(Error::InvalidCell(format!(
                    "coefficient index ({level},{pos}) out of range for depth {}",
                    repr.m
                )));
            }
            values[(1usize << level) - 1 + pos] = v;
        }
        for idx in indices(repr.m) {
            if values[idx.heap()].is_nan() {
                return Err(Error::MissingCoefficient {
                    level: idx.level,
                    pos: idx.pos,
                });
            }
        }
        Ok(CoefficientMap {
            depth: repr.m,
            avg: repr.avg,
            values,
        })
    }
}

/// Full truncated Haar analysis: global average plus all coefficients on
/// levels `0..M`.
pub fn analyze(f: &StepFunction) -> Result<CoefficientMap> {
    check_dim1(&f.grid())?;
    let pyr = f.pyramid();
    Ok(analyze_pyramid(&pyr, f.grid().coeff_depth()))
}

pub(crate) fn analyze_pyramid(pyr: &Pyramid, depth: u32) -> CoefficientMap {
    let mut out = CoefficientMap::zeros(depth);
    out.set_avg(pyr.integral(0, 0));
    for idx in indices(depth) {
        out.set(idx, coeff_from_pyramid(pyr, idx));
    }
    out
}

/// Finite Haar expansion `avg + sum f-hat_I h_I` at the grid resolution.
pub fn reconstruct(grid: GridSpec, coeffs: &CoefficientMap) -> Result<StepFunction> {
    check_dim1(&grid)?;
    let m = coeffs.depth();
    if m + 1 > grid.resolution() {
        return Err(Error::LevelOutOfRange {
            level: m,
            limit: grid.resolution() - 1,
        });
    }
    // Inverse butterfly down to level M, then expansion to resolution.
    let mut cur = vec![coeffs.avg()];
    for level in 0..m {
        let scale = (level as f64 / 2.0).exp2();
        let mut next = vec![0.0; 2 * cur.len()];
        for (pos, &v) in cur.iter().enumerate() {
            let c = coeffs.get(HaarIndex::new(level, pos)) * scale;
            next[2 * pos] = v + c;
            next[2 * pos + 1] = v - c;
        }
        cur = next;
    }
    StepFunction::from_level_values(grid, m, &cur)
}

/// Values of `h^w_K` on `(K-, K+)` from the weight's integral pyramid.
/// Returned as `(value on left half, value on right half)`.
pub(crate) fn weighted_haar_values(pyr: &Pyramid, idx: HaarIndex) -> (f64, f64) {
    let wl = pyr.integral(idx.level + 1, 2 * idx.pos);
    let wr = pyr.integral(idx.level + 1, 2 * idx.pos + 1);
    let wt = wl + wr;
    ((wr / (wl * wt)).sqrt(), -(wl / (wr * wt)).sqrt())
}

/// The weighted Haar function `h^w_K`: L2(w)-normalized, mean zero against
/// `w`, positive on the left half (see the module docs for the orientation).
pub fn weighted_haar(w: &Weight, idx: HaarIndex) -> Result<StepFunction> {
    let grid = w.grid();
    check_representable(&grid, idx)?;
    let (left, right) = weighted_haar_values(w.avg(), idx);
    let r = grid.resolution();
    let block = 1usize << (r - idx.level - 1);
    let start = idx.pos << (r - idx.level);
    let mut values = vec![0.0; grid.value_count()];
    values[start..start + block].fill(left);
    values[start + block..start + 2 * block].fill(right);
    StepFunction::from_values(grid, values)
}

/// The two disbalanced constants of the decomposition
/// `h_K = haar_factor * h^w_K + avg_factor * h1_K`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisbalancedPair {
    /// `C_K(w) = sqrt(<w>_{K+} <w>_{K-} / <w>_K)`, always >= 0.
    pub haar_factor: f64,
    /// `D_K(w) = w-hat_K / <w>_K`.
    pub avg_factor: f64,
}

/// Disbalanced constants of `w` at the interval `K`, from cached averages.
pub fn disbalanced(w: &Weight, idx: HaarIndex) -> Result<DisbalancedPair> {
    check_representable(&w.grid(), idx)?;
    Ok(disbalanced_from_pyramid(w.avg(), idx))
}

pub(crate) fn disbalanced_from_pyramid(pyr: &Pyramid, idx: HaarIndex) -> DisbalancedPair {
    let al = pyr.average(idx.level + 1, 2 * idx.pos);
    let ar = pyr.average(idx.level + 1, 2 * idx.pos + 1);
    let ak = 0.5 * (al + ar);
    let coeff = coeff_from_pyramid(pyr, idx);
    DisbalancedPair {
        haar_factor: (ar * al / ak).sqrt(),
        avg_factor: coeff / ak,
    }
}
