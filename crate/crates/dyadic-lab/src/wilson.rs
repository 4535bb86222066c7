//! Wilson's pair system in d dimensions: the 2^d - 1 child-cube splits per
//! cube, the Wilson Haar basis (weighted and unweighted), the Haar multiplier,
//! d-dimensional paraproducts, and the six-term decomposition of the
//! multiplier composition.
//!
//! The pairs come from the coordinate-bit binary tree over a cube's 2^d
//! children: the node at depth j splits its set of children by the (j+1)-th
//! coordinate bit, E1 being the 0-side and E2 the 1-side. Nodes are
//! enumerated breadth-first, so `alpha = 2^j - 1 + path`. This construction
//! satisfies the equal-measure, nonemptiness and nesting properties of the
//! pair system and makes E1 and E2 disjoint.
//!
//! The Wilson Haar functions follow the convention
//! `h^{w,a}_I = (1/sqrt(w(E))) (sqrt(w(E1)/w(E2)) 1_{E2} - sqrt(w(E2)/w(E1)) 1_{E1})`
//! — positive on E2. In d=1 this is the mirror image of the `haar1d`
//! orientation, so the two disbalanced decompositions agree up to the sign of
//! the averaging factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{child_flat, CellIndex, GridSpec, LevelAccumulator, Pyramid, StepFunction};
use crate::haar1d::DisbalancedPair;
use crate::weight::Weight;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Split tables of the coordinate-bit binary tree for one dimension: for each
/// node `alpha`, the child-cube codes in either half.
#[derive(Clone, Debug)]
pub struct WilsonStructure {
    dim: u32,
    e1: Vec<Vec<u32>>,
    e2: Vec<Vec<u32>>,
}

impl WilsonStructure {
    pub fn new(dim: u32) -> Self {
        let pair_count = (1usize << dim) - 1;
        let mut e1 = Vec::with_capacity(pair_count);
        let mut e2 = Vec::with_capacity(pair_count);
        for alpha in 0..pair_count as u32 {
            let depth = depth_of(alpha);
            let path = alpha + 1 - (1 << depth); // bits chosen so far
            let mut left = Vec::new();
            let mut right = Vec::new();
            for code in 0..(1u32 << dim) {
                if (code >> (dim - depth)) != path {
                    continue;
                }
                if (code >> (dim - depth - 1)) & 1 == 0 {
                    left.push(code);
                } else {
                    right.push(code);
                }
            }
            e1.push(left);
            e2.push(right);
        }
        Self { dim, e1, e2 }
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    /// `2^d - 1`.
    pub fn pair_count(&self) -> usize {
        self.e1.len()
    }

    pub fn e1_codes(&self, alpha: u32) -> &[u32] {
        &self.e1[alpha as usize]
    }

    pub fn e2_codes(&self, alpha: u32) -> &[u32] {
        &self.e2[alpha as usize]
    }

    /// Tree depth of the node (0 = the full split by coordinate 1).
    pub fn depth(&self, alpha: u32) -> u32 {
        depth_of(alpha)
    }

    /// Measure of `E_{alpha,I}` for a cube at `level`:
    /// `2^{d-depth}` children, each of measure `2^{-d(level+1)}`.
    pub fn set_measure(&self, alpha: u32, level: u32) -> f64 {
        let count = (self.dim - self.depth(alpha)) as f64;
        (count - (self.dim * (level + 1)) as f64).exp2()
    }
}

fn depth_of(alpha: u32) -> u32 {
    31 - (alpha + 1).leading_zeros()
}

/// One Wilson pair: the cube, the node index, and the two disjoint halves as
/// explicit child-cube lists.
#[derive(Clone, Debug)]
pub struct WilsonPair {
    pub cube: CellIndex,
    pub alpha: u32,
    pub e1: Vec<CellIndex>,
    pub e2: Vec<CellIndex>,
}

impl WilsonPair {
    /// Union measure `|E| = |E1| + |E2|`.
    pub fn union_measure(&self) -> f64 {
        (self.e1.len() + self.e2.len()) as f64 * self.e1[0].measure()
    }

    /// All cubes of `E = E1 u E2`.
    pub fn union(&self) -> Vec<CellIndex> {
        let mut all = self.e1.clone();
        all.extend(self.e2.iter().cloned());
        all
    }
}

/// The `2^d - 1` Wilson pairs of a cube, `alpha` ascending (breadth-first in
/// the split tree).
pub fn build_pairs(cube: &CellIndex) -> Vec<WilsonPair> {
    let structure = WilsonStructure::new(cube.dim());
    (0..structure.pair_count() as u32)
        .map(|alpha| WilsonPair {
            cube: cube.clone(),
            alpha,
            e1: structure
                .e1_codes(alpha)
                .iter()
                .map(|&c| cube.child(c))
                .collect(),
            e2: structure
                .e2_codes(alpha)
                .iter()
                .map(|&c| cube.child(c))
                .collect(),
        })
        .collect()
}

/// Index of one Wilson Haar function: cube `(level, cube)` and node `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WilsonIndex {
    pub level: u32,
    pub cube: usize,
    pub alpha: u32,
}

impl WilsonIndex {
    pub fn new(level: u32, cube: usize, alpha: u32) -> Self {
        Self { level, cube, alpha }
    }

    pub fn cube_cell(&self, dim: u32) -> CellIndex {
        CellIndex::from_flat(dim, self.level, self.cube)
    }
}

/// Cubes on levels `0..level`: `(2^{d*level} - 1) / (2^d - 1)`.
fn cube_offset(dim: u32, level: u32) -> usize {
    ((1usize << (dim * level)) - 1) / ((1usize << dim) - 1)
}

/// Number of Wilson indices on levels `0..depth`.
pub fn wilson_index_count(dim: u32, depth: u32) -> usize {
    cube_offset(dim, depth) * ((1usize << dim) - 1)
}

/// All Wilson indices on levels `0..depth`: level-major, cube-minor,
/// alpha-minor.
pub fn wilson_indices(dim: u32, depth: u32) -> impl Iterator<Item = WilsonIndex> {
    let pairs = (1usize << dim) - 1;
    (0..depth).flat_map(move |level| {
        (0..(1usize << (dim * level))).flat_map(move |cube| {
            (0..pairs as u32).map(move |alpha| WilsonIndex { level, cube, alpha })
        })
    })
}

/// Total map from the depth-`M` Wilson index set to reals; backing storage
/// for symbols, sign patterns and coefficient sets.
#[derive(Clone, Debug, PartialEq)]
pub struct WilsonMap {
    dim: u32,
    depth: u32,
    values: Vec<f64>,
}

pub type WilsonSymbol = WilsonMap;

#[derive(Serialize, Deserialize)]
struct WilsonMapRepr {
    d: u32,
    #[serde(rename = "M")]
    m: u32,
    entries: Vec<Vec<f64>>,
}

impl WilsonMap {
    pub fn zeros(dim: u32, depth: u32) -> Self {
        Self {
            dim,
            depth,
            values: vec![0.0; wilson_index_count(dim, depth)],
        }
    }

    pub fn constant(dim: u32, depth: u32, v: f64) -> Self {
        Self {
            dim,
            depth,
            values: vec![v; wilson_index_count(dim, depth)],
        }
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    fn slot(&self, idx: WilsonIndex) -> usize {
        let pairs = (1usize << self.dim) - 1;
        (cube_offset(self.dim, idx.level) + idx.cube) * pairs + idx.alpha as usize
    }

    pub fn get(&self, idx: WilsonIndex) -> f64 {
        self.values[self.slot(idx)]
    }

    pub fn set(&mut self, idx: WilsonIndex, v: f64) {
        let slot = self.slot(idx);
        self.values[slot] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (WilsonIndex, f64)> + '_ {
        wilson_indices(self.dim, self.depth).map(move |idx| (idx, self.get(idx)))
    }

    /// JSON form `{"d":..,"M":..,"entries":[[level,pos_1..pos_d,alpha,value],..]}`.
    pub fn to_json(&self) -> String {
        let entries = wilson_indices(self.dim, self.depth)
            .map(|idx| {
                let cell = idx.cube_cell(self.dim);
                let mut row = Vec::with_capacity(self.dim as usize + 3);
                row.push(idx.level as f64);
                row.extend(cell.pos().iter().map(|&p| p as f64));
                row.push(idx.alpha as f64);
                row.push(self.get(idx));
                row
            })
            .collect();
        serde_json::to_string(&WilsonMapRepr {
            d: self.dim,
            m: self.depth,
            entries,
        })
        .expect("wilson map serializes")
    }

    pub fn from_json(s: &str) -> Result<WilsonMap> {
        let repr: WilsonMapRepr = serde_json::from_str(s)?;
        let pairs = (1u32 << repr.d) - 1;
        let mut out = WilsonMap {
            dim: repr.d,
            depth: repr.m,
            values: vec![f64::NAN; wilson_index_count(repr.d, repr.m)],
        };
        for row in &repr.entries {
            if row.len() != repr.d as usize + 3 {
                return Err(Error::InvalidCell(format!(
                    "entry length {} does not match dimension {}",
                    row.len(),
                    repr.d
                )));
            }
            let level = row[0] as u32;
            let pos: Vec<u32> = row[1..1 + repr.d as usize]
                .iter()
                .map(|&p| p as u32)
                .collect();
            let alpha = row[1 + repr.d as usize] as u32;
            let value = row[repr.d as usize + 2];
            if level >= repr.m || alpha >= pairs {
                return Err(Error::InvalidCell(format!(
                    "wilson index (level {level}, alpha {alpha}) out of range"
                )));
            }
            let cell = CellIndex::new(repr.d, level, pos)?;
            let idx = WilsonIndex::new(level, cell.flat(), alpha);
            let slot = out.slot(idx);
            out.values[slot] = value;
        }
        for idx in wilson_indices(repr.d, repr.m) {
            if out.get(idx).is_nan() {
                return Err(Error::MissingCoefficient {
                    level: idx.level,
                    pos: idx.cube * pairs as usize + idx.alpha as usize,
                });
            }
        }
        Ok(out)
    }
}

/// A total choice of signs for the Haar multiplier.
#[derive(Clone, Debug, PartialEq)]
pub struct SignPattern(WilsonMap);

impl SignPattern {
    pub fn constant(dim: u32, depth: u32, sign: f64) -> Result<Self> {
        if sign != 1.0 && sign != -1.0 {
            return Err(Error::InvalidSign(sign));
        }
        Ok(Self(WilsonMap::constant(dim, depth, sign)))
    }

    /// Seeded uniform signs.
    pub fn seeded(dim: u32, depth: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = WilsonMap::zeros(dim, depth);
        for idx in wilson_indices(dim, depth) {
            map.set(idx, if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
        Self(map)
    }

    pub fn from_map(map: WilsonMap) -> Result<Self> {
        for (_, v) in map.iter() {
            if v != 1.0 && v != -1.0 {
                return Err(Error::InvalidSign(v));
            }
        }
        Ok(Self(map))
    }

    pub fn get(&self, idx: WilsonIndex) -> f64 {
        self.0.get(idx)
    }

    pub fn map(&self) -> &WilsonMap {
        &self.0
    }

    pub fn to_json(&self) -> String {
        self.0.to_json()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_map(WilsonMap::from_json(s)?)
    }
}

/// Integrals of one function over `(E1, E2)` of every node of one cube.
pub(crate) struct NodeSums {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
}

impl NodeSums {
    pub(crate) fn total(&self, alpha: u32) -> f64 {
        self.e1[alpha as usize] + self.e2[alpha as usize]
    }
}

/// Computes the per-node set integrals of `pyr` over the children of the cube
/// `(level, cube_flat)`, in reverse breadth-first order (leaves from child
/// integrals, inner nodes from their two tree children).
pub(crate) fn node_sums(
    pyr: &Pyramid,
    structure: &WilsonStructure,
    level: u32,
    cube_flat: usize,
) -> NodeSums {
    let d = structure.dim();
    let pair_count = structure.pair_count();
    let mut child_ints = [0.0f64; 16];
    for code in 0..(1u32 << d) {
        child_ints[code as usize] = pyr.integral(level + 1, child_flat(d, level, cube_flat, code));
    }
    let mut e1 = vec![0.0; pair_count];
    let mut e2 = vec![0.0; pair_count];
    for alpha in (0..pair_count as u32).rev() {
        let depth = depth_of(alpha);
        if depth == d - 1 {
            let path = alpha + 1 - (1 << depth);
            e1[alpha as usize] = child_ints[(2 * path) as usize];
            e2[alpha as usize] = child_ints[(2 * path + 1) as usize];
        } else {
            let l = (2 * alpha + 1) as usize;
            let r = (2 * alpha + 2) as usize;
            e1[alpha as usize] = e1[l] + e2[l];
            e2[alpha as usize] = e1[r] + e2[r];
        }
    }
    NodeSums { e1, e2 }
}

/// Values `(on E1, on E2)` of the weighted Wilson Haar function given the
/// weight's set integrals at the node.
pub(crate) fn wilson_haar_node_values(w1: f64, w2: f64) -> (f64, f64) {
    let wt = w1 + w2;
    (-(w2 / (w1 * wt)).sqrt(), (w1 / (w2 * wt)).sqrt())
}

fn check_index(grid: &GridSpec, idx: WilsonIndex) -> Result<()> {
    if idx.level + 1 > grid.resolution() {
        return Err(Error::LevelOutOfRange {
            level: idx.level,
            limit: grid.resolution() - 1,
        });
    }
    if idx.cube >= grid.cell_count(idx.level) || idx.alpha as usize >= (1usize << grid.dim()) - 1 {
        return Err(Error::InvalidCell(format!(
            "wilson index (level {}, cube {}, alpha {}) out of range",
            idx.level, idx.cube, idx.alpha
        )));
    }
    Ok(())
}

/// Builds a step function from per-node values on `(E1, E2)` of one index.
fn assemble_on_sets(
    grid: GridSpec,
    structure: &WilsonStructure,
    idx: WilsonIndex,
    v1: f64,
    v2: f64,
) -> Result<StepFunction> {
    let d = grid.dim();
    let mut acc = LevelAccumulator::new(grid, idx.level + 1);
    for &code in structure.e1_codes(idx.alpha) {
        acc.add(idx.level + 1, child_flat(d, idx.level, idx.cube, code), v1);
    }
    for &code in structure.e2_codes(idx.alpha) {
        acc.add(idx.level + 1, child_flat(d, idx.level, idx.cube, code), v2);
    }
    acc.collect()
}

/// The weighted Wilson Haar function `h^{w,alpha}_I`: L2(w)-normalized, mean
/// zero against `w`, negative on E1 and positive on E2.
pub fn wilson_haar(w: &Weight, idx: WilsonIndex) -> Result<StepFunction> {
    let grid = w.grid();
    check_index(&grid, idx)?;
    let structure = WilsonStructure::new(grid.dim());
    let sums = node_sums(w.avg(), &structure, idx.level, idx.cube);
    let (v1, v2) =
        wilson_haar_node_values(sums.e1[idx.alpha as usize], sums.e2[idx.alpha as usize]);
    assemble_on_sets(grid, &structure, idx, v1, v2)
}

/// The unweighted Wilson Haar function `h^alpha_I = (1_{E2} - 1_{E1})/sqrt|E|`.
pub fn wilson_haar_unit(grid: GridSpec, idx: WilsonIndex) -> Result<StepFunction> {
    check_index(&grid, idx)?;
    let structure = WilsonStructure::new(grid.dim());
    let scale = 1.0 / structure.set_measure(idx.alpha, idx.level).sqrt();
    assemble_on_sets(grid, &structure, idx, -scale, scale)
}

/// The averaging function `h^1_{E_{alpha,I}} = 1_E / |E|`.
pub fn avg_fn_union(grid: GridSpec, idx: WilsonIndex) -> Result<StepFunction> {
    check_index(&grid, idx)?;
    let structure = WilsonStructure::new(grid.dim());
    let scale = 1.0 / structure.set_measure(idx.alpha, idx.level);
    assemble_on_sets(grid, &structure, idx, scale, scale)
}

/// All unweighted Wilson coefficients of `f` on levels `0..M`, plus the
/// global average.
#[derive(Clone, Debug)]
pub struct WilsonCoeffs {
    pub avg: f64,
    pub map: WilsonMap,
}

/// Unweighted Wilson analysis via the integral pyramid.
pub fn analyze_wilson(f: &StepFunction) -> WilsonCoeffs {
    let grid = f.grid();
    let pyr = f.pyramid();
    analyze_wilson_pyramid(&pyr, grid)
}

pub(crate) fn analyze_wilson_pyramid(pyr: &Pyramid, grid: GridSpec) -> WilsonCoeffs {
    let d = grid.dim();
    let m = grid.coeff_depth();
    let structure = WilsonStructure::new(d);
    let mut map = WilsonMap::zeros(d, m);
    for level in 0..m {
        for cube in 0..grid.cell_count(level) {
            let sums = node_sums(pyr, &structure, level, cube);
            for alpha in 0..structure.pair_count() as u32 {
                let scale = structure.set_measure(alpha, level).sqrt();
                let coeff = (sums.e2[alpha as usize] - sums.e1[alpha as usize]) / scale;
                map.set(WilsonIndex::new(level, cube, alpha), coeff);
            }
        }
    }
    WilsonCoeffs {
        avg: pyr.integral(0, 0),
        map,
    }
}

/// Finite Wilson expansion `avg + sum c_{I,alpha} h^alpha_I`.
pub fn reconstruct_wilson(grid: GridSpec, coeffs: &WilsonCoeffs) -> Result<StepFunction> {
    let d = grid.dim();
    let m = coeffs.map.depth();
    if m + 1 > grid.resolution() {
        return Err(Error::LevelOutOfRange {
            level: m,
            limit: grid.resolution() - 1,
        });
    }
    let structure = WilsonStructure::new(d);
    let mut acc = LevelAccumulator::new(grid, m);
    acc.add(0, 0, coeffs.avg);
    for (idx, c) in coeffs.map.iter() {
        if c == 0.0 {
            continue;
        }
        let scale = 1.0 / structure.set_measure(idx.alpha, idx.level).sqrt();
        for &code in structure.e1_codes(idx.alpha) {
            acc.add(
                idx.level + 1,
                child_flat(d, idx.level, idx.cube, code),
                -c * scale,
            );
        }
        for &code in structure.e2_codes(idx.alpha) {
            acc.add(
                idx.level + 1,
                child_flat(d, idx.level, idx.cube, code),
                c * scale,
            );
        }
    }
    acc.collect()
}

fn check_map(grid: &GridSpec, map: &WilsonMap) -> Result<()> {
    if map.dim() != grid.dim() || map.depth() != grid.coeff_depth() {
        return Err(Error::InvalidConfig(format!(
            "wilson map (d={}, M={}) does not match grid (d={}, M={})",
            map.dim(),
            map.depth(),
            grid.dim(),
            grid.coeff_depth()
        )));
    }
    Ok(())
}

/// The Haar multiplier `T_sigma f = sum sigma_{I,alpha} f-hat_{I,alpha} h^alpha_I`.
pub fn multiplier(sigma: &SignPattern, f: &StepFunction) -> Result<StepFunction> {
    let grid = f.grid();
    check_map(&grid, sigma.map())?;
    let coeffs = analyze_wilson(f);
    let mut flipped = coeffs.map.clone();
    for (idx, c) in coeffs.map.iter() {
        flipped.set(idx, sigma.get(idx) * c);
    }
    reconstruct_wilson(
        grid,
        &WilsonCoeffs {
            avg: 0.0,
            map: flipped,
        },
    )
}

/// d-dimensional paraproducts over Wilson indices. The three displayed kinds:
/// `(0,0)`: `sum a f-hat_{I,a} h^a_I`; `(0,1)`: `sum a <f>_{E} h^a_I`;
/// `(1,0)`: `sum a f-hat_{I,a} h^1_{E}`.
pub fn paraproduct_d(kind: (u8, u8), a: &WilsonSymbol, f: &StepFunction) -> Result<StepFunction> {
    if !matches!(kind, (0, 0) | (0, 1) | (1, 0)) {
        return Err(Error::InvalidConfig(format!(
            "wilson paraproduct kind must be (0,0), (0,1) or (1,0); got {:?}",
            kind
        )));
    }
    let grid = f.grid();
    check_map(&grid, a)?;
    let d = grid.dim();
    let m = grid.coeff_depth();
    let structure = WilsonStructure::new(d);
    let pyr = f.pyramid();
    let mut acc = LevelAccumulator::new(grid, m);
    for level in 0..m {
        for cube in 0..grid.cell_count(level) {
            let sums = node_sums(&pyr, &structure, level, cube);
            for alpha in 0..structure.pair_count() as u32 {
                let idx = WilsonIndex::new(level, cube, alpha);
                let measure = structure.set_measure(alpha, level);
                let input = match kind.1 {
                    0 => (sums.e2[alpha as usize] - sums.e1[alpha as usize]) / measure.sqrt(),
                    _ => sums.total(alpha) / measure,
                };
                let c = a.get(idx) * input;
                if c == 0.0 {
                    continue;
                }
                let (v1, v2) = match kind.0 {
                    0 => {
                        let s = c / measure.sqrt();
                        (-s, s)
                    }
                    _ => {
                        let s = c / measure;
                        (s, s)
                    }
                };
                for &code in structure.e1_codes(alpha) {
                    acc.add(level + 1, child_flat(d, level, cube, code), v1);
                }
                for &code in structure.e2_codes(alpha) {
                    acc.add(level + 1, child_flat(d, level, cube, code), v2);
                }
            }
        }
    }
    acc.collect()
}

/// Exact `<h^1_{E_{alpha,I}}, h^beta_J>` from set overlaps of the two
/// child-cube unions (no quadrature).
pub fn union_haar_overlap(dim: u32, avg_idx: (&CellIndex, u32), haar_idx: (&CellIndex, u32)) -> f64 {
    let structure = WilsonStructure::new(dim);
    let (cube_a, alpha) = avg_idx;
    let (cube_j, beta) = haar_idx;
    let union_a: Vec<CellIndex> = structure
        .e1_codes(alpha)
        .iter()
        .chain(structure.e2_codes(alpha))
        .map(|&c| cube_a.child(c))
        .collect();
    let e1_j: Vec<CellIndex> = structure
        .e1_codes(beta)
        .iter()
        .map(|&c| cube_j.child(c))
        .collect();
    let e2_j: Vec<CellIndex> = structure
        .e2_codes(beta)
        .iter()
        .map(|&c| cube_j.child(c))
        .collect();
    let overlap = |cells: &[CellIndex]| -> f64 {
        union_a
            .iter()
            .map(|a| cells.iter().map(|b| a.intersection_measure(b)).sum::<f64>())
            .sum()
    };
    let measure_a: f64 = union_a.iter().map(|c| c.measure()).sum();
    let measure_j: f64 = e1_j.iter().chain(e2_j.iter()).map(|c| c.measure()).sum();
    (overlap(&e2_j) - overlap(&e1_j)) / (measure_a * measure_j.sqrt())
}

/// Right-hand side of the product formula for the Wilson system at `(J,beta)`:
/// the full double sum plus the two boundary terms; equals `(fg)-hat_{J,beta}`
/// for `f`, `g` constant on level-`M` cells.
pub fn product_formula_rhs(f: &StepFunction, g: &StepFunction, j_idx: WilsonIndex) -> Result<f64> {
    let grid = f.grid();
    grid.check_match(&g.grid())?;
    let m = grid.coeff_depth();
    if !f.constant_on_level(m) || !g.constant_on_level(m) {
        return Err(Error::InputTooFine { max_level: m });
    }
    check_index(&grid, j_idx)?;
    let d = grid.dim();
    let structure = WilsonStructure::new(d);
    let cf = analyze_wilson(f);
    let cg = analyze_wilson(g);
    let pyr_f = f.pyramid();
    let pyr_g = g.pyramid();
    let cube_j = j_idx.cube_cell(d);

    let mut total = 0.0;
    for idx in wilson_indices(d, m) {
        let fa = cf.map.get(idx);
        let ga = cg.map.get(idx);
        if fa == 0.0 || ga == 0.0 {
            continue;
        }
        let cube_i = idx.cube_cell(d);
        let overlap = union_haar_overlap(d, (&cube_i, idx.alpha), (&cube_j, j_idx.alpha));
        total += fa * ga * overlap;
    }

    let sums_f = node_sums(&pyr_f, &structure, j_idx.level, j_idx.cube);
    let sums_g = node_sums(&pyr_g, &structure, j_idx.level, j_idx.cube);
    let measure = structure.set_measure(j_idx.alpha, j_idx.level);
    let mean_f = sums_f.total(j_idx.alpha) / measure;
    let mean_g = sums_g.total(j_idx.alpha) / measure;
    total += cf.map.get(j_idx) * mean_g + cg.map.get(j_idx) * mean_f;
    Ok(total)
}

/// Disbalanced constants of the decomposition
/// `h^beta_J = haar_factor * h^{w,beta}_J + avg_factor * h^1_{E_{beta,J}}`:
/// `C_J(w,beta) = sqrt(<w>_{E1} <w>_{E2} / <w>_E)` and
/// `D_J(w,beta) = w-hat_{J,beta} / <w>_E`.
pub fn disbalanced_d(w: &Weight, idx: WilsonIndex) -> Result<DisbalancedPair> {
    let grid = w.grid();
    check_index(&grid, idx)?;
    let structure = WilsonStructure::new(grid.dim());
    let sums = node_sums(w.avg(), &structure, idx.level, idx.cube);
    Ok(disbalanced_from_node_sums(&structure, &sums, idx))
}

fn disbalanced_from_node_sums(
    structure: &WilsonStructure,
    sums: &NodeSums,
    idx: WilsonIndex,
) -> DisbalancedPair {
    let a = idx.alpha as usize;
    let half_measure = structure.set_measure(idx.alpha, idx.level) / 2.0;
    let avg1 = sums.e1[a] / half_measure;
    let avg2 = sums.e2[a] / half_measure;
    let avg_e = 0.5 * (avg1 + avg2);
    let coeff = (sums.e2[a] - sums.e1[a]) / (2.0 * half_measure).sqrt();
    DisbalancedPair {
        haar_factor: (avg1 * avg2 / avg_e).sqrt(),
        avg_factor: coeff / avg_e,
    }
}

/// The six signed sums of the multiplier decomposition
/// `<T_sigma P^{(1,0)}_{(w^{-1/2})-hat} phi, g>_w`, their sub-splits, and the
/// directly computed left-hand side. Every term carries its sign factor.
pub fn six_terms_multiplier(
    w: &Weight,
    sigma: &SignPattern,
    phi: &StepFunction,
    g: &StepFunction,
) -> Result<crate::shiftops::TermBreakdown> {
    let grid = phi.grid();
    w.grid().check_match(&grid)?;
    grid.check_match(&g.grid())?;
    check_map(&grid, sigma.map())?;
    let m = grid.coeff_depth();
    if !phi.constant_on_level(m) {
        return Err(Error::InputTooFine { max_level: m });
    }
    let d = grid.dim();
    let structure = WilsonStructure::new(d);

    let pphi = phi.pyramid();
    let prod = w.inv_sqrt().mul(phi)?.pyramid(); // w^{-1/2} phi
    let pgw = g.mul(w.base())?.pyramid(); // g w
    let pw = w.avg();
    let pinv = w.inv_avg();
    let pinvs = w.inv_sqrt_avg();

    let mut t = crate::shiftops::TermBreakdown::zero();

    for level in 0..m {
        for cube in 0..grid.cell_count(level) {
            let s_phi = node_sums(&pphi, &structure, level, cube);
            let s_prod = node_sums(&prod, &structure, level, cube);
            let s_gw = node_sums(&pgw, &structure, level, cube);
            let s_w = node_sums(pw, &structure, level, cube);
            let s_inv = node_sums(pinv, &structure, level, cube);
            let s_invs = node_sums(pinvs, &structure, level, cube);
            for alpha in 0..structure.pair_count() as u32 {
                let idx = WilsonIndex::new(level, cube, alpha);
                let a = alpha as usize;
                let sg = sigma.get(idx);
                let measure = structure.set_measure(alpha, level);
                let root_measure = measure.sqrt();

                // coefficient pieces of the composition at (J, beta)
                let p = (s_prod.e2[a] - s_prod.e1[a]) / root_measure;
                let phi_hat = (s_phi.e2[a] - s_phi.e1[a]) / root_measure;
                let invs_hat = (s_invs.e2[a] - s_invs.e1[a]) / root_measure;
                let mean_invs = s_invs.total(alpha) / measure;
                let mean_phi = s_phi.total(alpha) / measure;
                let q = phi_hat * mean_invs;
                let r = invs_hat * mean_phi;

                // disbalanced pieces of <h^beta_J, w g>
                let disb = disbalanced_from_node_sums(&structure, &s_w, idx);
                let (v1, v2) = wilson_haar_node_values(s_w.e1[a], s_w.e2[a]);
                let inner_hw_g = v1 * s_gw.e1[a] + v2 * s_gw.e2[a];
                let mean_gw = s_gw.total(alpha) / measure;
                let u = disb.haar_factor * inner_hw_g;
                let v = disb.avg_factor * mean_gw;

                t.a1 += sg * p * u;
                t.b1 += sg * q * u;
                t.c1 += sg * r * u;
                t.a2 += sg * p * v;
                t.b2 += sg * q * v;
                t.c2 += sg * r * v;

                // sub-splits through the disbalanced pieces of w^{-1}
                let disb_inv = disbalanced_from_node_sums(&structure, &s_inv, idx);
                let (n1, n2) = wilson_haar_node_values(s_inv.e1[a], s_inv.e2[a]);
                let a_coef = n1 * s_prod.e1[a] + n2 * s_prod.e2[a];
                let s_coef = n1 * s_invs.e1[a] + n2 * s_invs.e2[a];
                let mean_prod = s_prod.total(alpha) / measure;

                t.a11 += sg * disb_inv.haar_factor * a_coef * u;
                t.a12 += sg * disb_inv.avg_factor * mean_prod * u;
                t.a21 += sg * disb_inv.haar_factor * a_coef * v;
                t.a22 += sg * disb_inv.avg_factor * mean_prod * v;
                t.c21 += sg * disb_inv.haar_factor * s_coef * mean_phi * v;
                t.c22 += sg * disb_inv.avg_factor * mean_invs * mean_phi * v;
            }
        }
    }

    t.lhs = multiplier_composition(w, sigma, phi)?.inner_w(g, w.base())?;
    Ok(t.finish())
}

/// The composition `T_sigma P^{(1,0)}_{(w^{-1/2})-hat}` applied to `phi`.
pub fn multiplier_composition(
    w: &Weight,
    sigma: &SignPattern,
    phi: &StepFunction,
) -> Result<StepFunction> {
    let grid = phi.grid();
    w.grid().check_match(&grid)?;
    if !phi.constant_on_level(grid.coeff_depth()) {
        return Err(Error::InputTooFine {
            max_level: grid.coeff_depth(),
        });
    }
    let symbol = analyze_wilson(w.inv_sqrt()).map;
    let p = paraproduct_d((1, 0), &symbol, phi)?;
    multiplier(sigma, &p)
}

/// `w^{1/2} * (T_sigma P^{(1,0)}_{(w^{-1/2})-hat} phi)` pointwise.
pub fn multiplier_target(
    w: &Weight,
    sigma: &SignPattern,
    phi: &StepFunction,
) -> Result<StepFunction> {
    let composed = multiplier_composition(w, sigma, phi)?;
    w.sqrt().mul(&composed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weight::{gen_recursive_weight, DeltaSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_level_fn(grid: GridSpec, level: u32, seed: u64) -> StepFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..grid.cell_count(level))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        StepFunction::from_level_values(grid, level, &vals).unwrap()
    }

    fn random_weight(grid: GridSpec, seed: u64) -> Weight {
        gen_recursive_weight(grid, &DeltaSpec::Seeded { seed, max: 0.7 }, 1.0).unwrap()
    }

    #[test]
    fn pairs_d1_single_split() {
        let pairs = build_pairs(&CellIndex::root(1));
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].e1, vec![CellIndex::root(1).left()]);
        assert_eq!(pairs[0].e2, vec![CellIndex::root(1).right()]);
    }

    #[test]
    fn pairs_d2_coordinate_splits() {
        let pairs = build_pairs(&CellIndex::root(2));
        assert_eq!(pairs.len(), 3);
        // alpha 0: split by coordinate 1 into two 2-cube halves
        let pos =
            |cells: &[CellIndex]| -> Vec<Vec<u32>> { cells.iter().map(|c| c.pos().to_vec()).collect() };
        assert_eq!(pos(&pairs[0].e1), vec![vec![0, 0], vec![0, 1]]);
        assert_eq!(pos(&pairs[0].e2), vec![vec![1, 0], vec![1, 1]]);
        // alpha 1,2: each half split by coordinate 2
        assert_eq!(pos(&pairs[1].e1), vec![vec![0, 0]]);
        assert_eq!(pos(&pairs[1].e2), vec![vec![0, 1]]);
        assert_eq!(pos(&pairs[2].e1), vec![vec![1, 0]]);
        assert_eq!(pos(&pairs[2].e2), vec![vec![1, 1]]);
    }

    fn union_set(p: &WilsonPair) -> Vec<usize> {
        let mut v: Vec<usize> = p.union().iter().map(|c| c.flat()).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn pairs_lemma_properties_d1_to_d4() {
        for d in 1..=4u32 {
            let root = CellIndex::root(d);
            let pairs = build_pairs(&root);
            assert_eq!(pairs.len(), (1usize << d) - 1, "d={d}");
            for p in &pairs {
                // property 1: equal measure; property 2: nonempty unions of children
                assert_eq!(p.e1.len(), p.e2.len(), "d={d} alpha={}", p.alpha);
                assert!(!p.e1.is_empty());
                // disjointness
                for a in &p.e1 {
                    assert!(p.e2.iter().all(|b| b != a));
                }
                for c in p.e1.iter().chain(p.e2.iter()) {
                    assert_eq!(c.parent().unwrap(), root);
                }
            }
            // property 4: nesting trichotomy for every ordered pair
            for pa in &pairs {
                for pb in &pairs {
                    if pa.alpha == pb.alpha {
                        continue;
                    }
                    let ua = union_set(pa);
                    let ub = union_set(pb);
                    let e1b: Vec<usize> = pb.e1.iter().map(|c| c.flat()).collect();
                    let e2b: Vec<usize> = pb.e2.iter().map(|c| c.flat()).collect();
                    let e1a: Vec<usize> = pa.e1.iter().map(|c| c.flat()).collect();
                    let e2a: Vec<usize> = pa.e2.iter().map(|c| c.flat()).collect();
                    let subset = |x: &[usize], y: &[usize]| x.iter().all(|i| y.contains(i));
                    let disjoint = ua.iter().all(|i| !ub.contains(i));
                    let ok = subset(&ua, &e1b)
                        || subset(&ua, &e2b)
                        || subset(&ub, &e1a)
                        || subset(&ub, &e2a)
                        || disjoint;
                    assert!(ok, "d={d}: trichotomy fails for ({}, {})", pa.alpha, pb.alpha);
                }
            }
        }
    }

    #[test]
    fn unit_wilson_haar_d1_is_mirrored_haar() {
        let g = GridSpec::new(1, 2, 3).unwrap();
        let idx = WilsonIndex::new(0, 0, 0);
        let h = wilson_haar_unit(g, idx).unwrap();
        let classic = crate::haar1d::haar_fn(g, crate::haar1d::HaarIndex::root()).unwrap();
        // positive on the right set: the mirror of the 1-d convention
        assert!(h.add(&classic).unwrap().max_abs() < 1e-14);
        let w = Weight::unit(g);
        let hw = wilson_haar(&w, idx).unwrap();
        assert!(hw.sub(&h).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn weighted_wilson_haar_postconditions() {
        let g = GridSpec::new(2, 3, 4).unwrap();
        let w = random_weight(g, 3);
        for idx in wilson_indices(2, 3) {
            let h = wilson_haar(&w, idx).unwrap();
            assert!(
                (h.norm_w(w.base()).unwrap() - 1.0).abs() < 1e-12,
                "{idx:?} norm"
            );
            assert!(h.inner(w.base()).unwrap().abs() < 1e-12, "{idx:?} mean");
        }
    }

    #[test]
    fn weighted_wilson_gram_random_pairs() {
        let g = GridSpec::new(2, 3, 4).unwrap();
        let w = random_weight(g, 5);
        let all: Vec<WilsonIndex> = wilson_indices(2, 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let i = all[rng.random_range(0..all.len())];
            let j = all[rng.random_range(0..all.len())];
            let hi = wilson_haar(&w, i).unwrap();
            let hj = wilson_haar(&w, j).unwrap();
            let want = if i == j { 1.0 } else { 0.0 };
            let got = hi.inner_w(&hj, w.base()).unwrap();
            assert!((got - want).abs() < 1e-11, "({i:?},{j:?}): {got}");
        }
    }

    #[test]
    fn multiplier_plus_one_is_projection() {
        let g = GridSpec::new(2, 2, 3).unwrap();
        let f = random_level_fn(g, 2, 7);
        let plus = SignPattern::constant(2, 2, 1.0).unwrap();
        let tf = multiplier(&plus, &f).unwrap();
        let want = f.sub(&StepFunction::constant(g, f.integral())).unwrap();
        assert!(tf.sub(&want).unwrap().max_abs() < 1e-13);

        let minus = SignPattern::constant(2, 2, -1.0).unwrap();
        let tm = multiplier(&minus, &f).unwrap();
        assert!(tm.add(&want).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn multiplier_is_involution_modulo_mean() {
        let g = GridSpec::new(2, 2, 3).unwrap();
        let f = random_level_fn(g, 2, 8);
        let sigma = SignPattern::seeded(2, 2, 99);
        let twice = multiplier(&sigma, &multiplier(&sigma, &f).unwrap()).unwrap();
        let want = f.sub(&StepFunction::constant(g, f.integral())).unwrap();
        assert!(twice.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn wilson_completeness_roundtrip() {
        let g = GridSpec::new(2, 3, 4).unwrap();
        let f = random_level_fn(g, 3, 9);
        let coeffs = analyze_wilson(&f);
        let back = reconstruct_wilson(g, &coeffs).unwrap();
        assert!(f.sub(&back).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn paraproduct_mg_resolution() {
        // The three paraproducts with symbols <g> and g-hat resolve
        // multiplication: their sum equals g*f - <g><f> on resolution-M inputs.
        let grid = GridSpec::new(2, 3, 4).unwrap();
        let f = random_level_fn(grid, 3, 10);
        let g = random_level_fn(grid, 3, 11);
        let ghat = analyze_wilson(&g).map;
        let pyr_g = g.pyramid();
        let structure = WilsonStructure::new(2);
        let mut gmean = WilsonMap::zeros(2, 3);
        for idx in wilson_indices(2, 3) {
            let sums = node_sums(&pyr_g, &structure, idx.level, idx.cube);
            gmean.set(
                idx,
                sums.total(idx.alpha) / structure.set_measure(idx.alpha, idx.level),
            );
        }
        let total = paraproduct_d((0, 0), &gmean, &f)
            .unwrap()
            .add(&paraproduct_d((0, 1), &ghat, &f).unwrap())
            .unwrap()
            .add(&paraproduct_d((1, 0), &ghat, &f).unwrap())
            .unwrap();
        let want = g
            .mul(&f)
            .unwrap()
            .sub(&StepFunction::constant(grid, g.integral() * f.integral()))
            .unwrap();
        let gap = total.sub(&want).unwrap().max_abs();
        assert!(gap < 1e-12, "gap {gap}");
    }

    #[test]
    fn paraproduct_single_term_and_adjoint() {
        let grid = GridSpec::new(2, 2, 3).unwrap();
        let f = random_level_fn(grid, 2, 12);
        let target = WilsonIndex::new(0, 0, 1);
        let mut a = WilsonMap::zeros(2, 2);
        a.set(target, 2.5);
        let p = paraproduct_d((1, 0), &a, &f).unwrap();
        let coeff = analyze_wilson(&f).map.get(target);
        let want = avg_fn_union(grid, target).unwrap().scale(2.5 * coeff);
        assert!(p.sub(&want).unwrap().max_abs() < 1e-13);

        // (1,0) and (0,1) are adjoint
        let g = random_level_fn(grid, 2, 13);
        let a = analyze_wilson(&random_level_fn(grid, 2, 14)).map;
        let lhs = paraproduct_d((1, 0), &a, &f).unwrap().inner(&g).unwrap();
        let rhs = f.inner(&paraproduct_d((0, 1), &a, &g).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-13);
    }

    #[test]
    fn product_formula_edge_cases() {
        let grid = GridSpec::new(2, 2, 3).unwrap();
        let g = random_level_fn(grid, 2, 15);
        let one = StepFunction::constant(grid, 1.0);
        let coeffs_g = analyze_wilson(&g);
        for idx in wilson_indices(2, 2) {
            let rhs = product_formula_rhs(&one, &g, idx).unwrap();
            assert!((rhs - coeffs_g.map.get(idx)).abs() < 1e-13, "f=1 at {idx:?}");
        }
        let c = StepFunction::constant(grid, 3.0);
        let f = random_level_fn(grid, 2, 16);
        let coeffs_f = analyze_wilson(&f);
        for idx in wilson_indices(2, 2) {
            let rhs = product_formula_rhs(&f, &c, idx).unwrap();
            assert!(
                (rhs - 3.0 * coeffs_f.map.get(idx)).abs() < 1e-12,
                "g=c at {idx:?}"
            );
        }
    }

    #[test]
    fn product_formula_matches_direct_product() {
        let grid = GridSpec::new(2, 3, 4).unwrap();
        let f = random_level_fn(grid, 3, 17);
        let g = random_level_fn(grid, 3, 18);
        let product_coeffs = analyze_wilson(&f.mul(&g).unwrap());
        for idx in wilson_indices(2, 3) {
            let rhs = product_formula_rhs(&f, &g, idx).unwrap();
            let want = product_coeffs.map.get(idx);
            assert!(crate::rel_err(rhs, want) < 1e-9, "{idx:?}: {rhs} vs {want}");
        }
    }

    #[test]
    fn disbalanced_d_unit_and_pointwise_identity() {
        let grid = GridSpec::new(2, 2, 3).unwrap();
        let unit = Weight::unit(grid);
        for idx in wilson_indices(2, 2) {
            let p = disbalanced_d(&unit, idx).unwrap();
            assert!((p.haar_factor - 1.0).abs() < 1e-14);
            assert_eq!(p.avg_factor, 0.0);
        }

        let w = random_weight(grid, 19);
        for idx in wilson_indices(2, 2) {
            let p = disbalanced_d(&w, idx).unwrap();
            let h = wilson_haar_unit(grid, idx).unwrap();
            let hw = wilson_haar(&w, idx).unwrap();
            let h1 = avg_fn_union(grid, idx).unwrap();
            let recomposed = hw
                .scale(p.haar_factor)
                .add(&h1.scale(p.avg_factor))
                .unwrap();
            assert!(
                h.sub(&recomposed).unwrap().max_abs() < 1e-12,
                "pointwise identity fails at {idx:?}"
            );
        }
    }

    #[test]
    fn disbalanced_d_estimate() {
        // C_J(w,beta)^2 <= 4 <w>_E <= 2^{d+1} <w>_J
        let grid = GridSpec::new(3, 2, 3).unwrap();
        let w = random_weight(grid, 20);
        let structure = WilsonStructure::new(3);
        for idx in wilson_indices(3, 2) {
            let p = disbalanced_d(&w, idx).unwrap();
            let sums = node_sums(w.avg(), &structure, idx.level, idx.cube);
            let avg_e = sums.total(idx.alpha) / structure.set_measure(idx.alpha, idx.level);
            let avg_j = w.average(idx.level, idx.cube);
            let c2 = p.haar_factor * p.haar_factor;
            assert!(c2 <= 4.0 * avg_e + 1e-12);
            assert!(4.0 * avg_e <= 2.0f64.powi(4) * avg_j + 1e-12);
        }
    }

    #[test]
    fn disbalanced_d1_agrees_with_haar1d() {
        // Same C; D flips sign with the mirrored orientation.
        let grid = GridSpec::new(1, 3, 4).unwrap();
        let w = random_weight(grid, 21);
        for idx in wilson_indices(1, 3) {
            let wil = disbalanced_d(&w, idx).unwrap();
            let classic =
                crate::haar1d::disbalanced(&w, crate::haar1d::HaarIndex::new(idx.level, idx.cube))
                    .unwrap();
            assert!((wil.haar_factor - classic.haar_factor).abs() < 1e-13);
            assert!((wil.avg_factor + classic.avg_factor).abs() < 1e-13);
        }
    }

    #[test]
    fn pairing_identity_for_weighted_system() {
        // <h^beta_J, w g> = C <g, h^{w,beta}_J>_w + D <w g>_E
        let grid = GridSpec::new(2, 3, 4).unwrap();
        let w = random_weight(grid, 22);
        let g = random_level_fn(grid, 4, 23);
        let structure = WilsonStructure::new(2);
        let pgw = g.mul(w.base()).unwrap().pyramid();
        for idx in wilson_indices(2, 3) {
            let h = wilson_haar_unit(grid, idx).unwrap();
            let hw = wilson_haar(&w, idx).unwrap();
            let lhs = h.inner_w(&g, w.base()).unwrap();
            let p = disbalanced_d(&w, idx).unwrap();
            let sums = node_sums(&pgw, &structure, idx.level, idx.cube);
            let mean_gw = sums.total(idx.alpha) / structure.set_measure(idx.alpha, idx.level);
            let rhs = p.haar_factor * hw.inner_w(&g, w.base()).unwrap() + p.avg_factor * mean_gw;
            assert!(crate::rel_err(lhs, rhs) < 1e-9, "{idx:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn six_terms_multiplier_unit_weight_vanishes() {
        let grid = GridSpec::new(2, 2, 3).unwrap();
        let unit = Weight::unit(grid);
        let sigma = SignPattern::seeded(2, 2, 1);
        let phi = random_level_fn(grid, 2, 24);
        let g = random_level_fn(grid, 2, 25);
        let t = six_terms_multiplier(&unit, &sigma, &phi, &g).unwrap();
        assert_eq!(t.lhs, 0.0);
        assert_eq!(t.c1, 0.0);
        assert_eq!(t.a2, 0.0);
        assert_eq!(t.b2, 0.0);
        assert_eq!(t.c2, 0.0);
        assert_eq!(t.a1, t.b1);
        assert!(t.residual < 1e-15);
    }

    #[test]
    fn six_terms_multiplier_identity_random() {
        let grid = GridSpec::new(2, 3, 5).unwrap();
        for trial in 0..5u64 {
            let w = random_weight(grid, 100 + trial);
            let sigma = SignPattern::seeded(2, 3, 200 + trial);
            let phi = random_level_fn(grid, 3, 300 + trial);
            let g = random_level_fn(grid, 3, 400 + trial);
            let t = six_terms_multiplier(&w, &sigma, &phi, &g).unwrap();
            assert!(t.residual < 1e-9, "trial {trial}: residual {}", t.residual);
            for (i, r) in t.split_residuals().iter().enumerate() {
                assert!(*r < 1e-9, "trial {trial}, split {i}: {r}");
            }
        }
    }

    #[test]
    fn six_terms_multiplier_d1_plus_sigma() {
        // d=1 with sigma = +1: the multiplier composition reduces to the
        // identity-on-coefficients analogue; sub-splits stay consistent.
        let grid = GridSpec::new(1, 4, 6).unwrap();
        let w = random_weight(grid, 30);
        let sigma = SignPattern::constant(1, 4, 1.0).unwrap();
        let phi = random_level_fn(grid, 4, 31);
        let g = random_level_fn(grid, 4, 32);
        let t = six_terms_multiplier(&w, &sigma, &phi, &g).unwrap();
        assert!(t.residual < 1e-10);
        for r in t.split_residuals() {
            assert!(r < 1e-10);
        }
    }

    #[test]
    fn multiplier_target_norm_identity() {
        let grid = GridSpec::new(2, 2, 3).unwrap();
        let w = random_weight(grid, 33);
        let sigma = SignPattern::seeded(2, 2, 34);
        let phi = random_level_fn(grid, 2, 35);
        let target = multiplier_target(&w, &sigma, &phi).unwrap();
        let composed = multiplier_composition(&w, &sigma, &phi).unwrap();
        assert!((target.norm() - composed.norm_w(w.base()).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn sign_pattern_and_symbol_json() {
        let sigma = SignPattern::seeded(2, 2, 36);
        let back = SignPattern::from_json(&sigma.to_json()).unwrap();
        assert_eq!(sigma, back);

        let mut bad = WilsonMap::constant(2, 2, 1.0);
        bad.set(WilsonIndex::new(0, 0, 1), 0.5);
        assert!(matches!(
            SignPattern::from_map(bad),
            Err(Error::InvalidSign(_))
        ));

        let grid = GridSpec::new(2, 2, 3).unwrap();
        let f = random_level_fn(grid, 2, 37);
        let map = analyze_wilson(&f).map;
        let round = WilsonMap::from_json(&map.to_json()).unwrap();
        assert_eq!(map, round);

        // missing entry rejected
        let mut repr: serde_json::Value = serde_json::from_str(&map.to_json()).unwrap();
        let entries = repr["entries"].as_array_mut().unwrap();
        entries.pop();
        assert!(matches!(
            WilsonMap::from_json(&repr.to_string()),
            Err(Error::MissingCoefficient { .. })
        ));
    }

    #[test]
    fn rejects_fine_phi() {
        let grid = GridSpec::new(2, 2, 4).unwrap();
        let w = random_weight(grid, 38);
        let sigma = SignPattern::seeded(2, 2, 39);
        let phi = random_level_fn(grid, 3, 40);
        assert!(matches!(
            multiplier_composition(&w, &sigma, &phi),
            Err(Error::InputTooFine { .. })
        ));
    }
}
