//! The measurement side: Carleson-type testing constants, shifted-pair sums,
//! square functions, and operator-norm estimation by power iteration.
//!
//! Everything here produces numbers to hold against the A2 characteristic.
//! Testing suprema run over truncated index levels `0..M` only (all the
//! sequences in play vanish below level `M` by construction). Generalized
//! eigenvalue problems are solved over explicit dense matrices (at desk
//! scale, up to `2^{dM}` coefficients) with the power-iteration contract:
//! Rayleigh-quotient convergence `|dl|/l <= 1e-10`, at most 10000 iterations,
//! all-ones start with seeded restarts if degenerate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{child_flat, CellIndex, GridSpec, LevelAccumulator, StepFunction};
use crate::haar1d;
use crate::haar1d::HaarIndex;
use crate::weight::Weight;
use crate::wilson::{
    self, wilson_index_count, wilson_indices, WilsonIndex, WilsonMap, WilsonStructure,
};

/// Power-iteration convergence tolerance on the Rayleigh quotient.
pub const POWER_TOL: f64 = 1e-10;

/// Power-iteration cap.
pub const POWER_MAX_ITERS: usize = 10_000;

/// A nonnegative sequence indexed by cells at levels `0..depth`.
#[derive(Clone, Debug)]
pub struct CellSequence {
    dim: u32,
    depth: u32,
    levels: Vec<Vec<f64>>,
}

impl CellSequence {
    pub fn zeros(dim: u32, depth: u32) -> Self {
        let levels = (0..depth)
            .map(|l| vec![0.0; 1usize << (dim * l)])
            .collect();
        Self { dim, depth, levels }
    }

    /// Fills from a function of `(level, flat)` over levels `0..M`.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(u32, usize) -> f64) -> Self {
        let mut s = Self::zeros(grid.dim(), grid.coeff_depth());
        for level in 0..s.depth {
            for flat in 0..s.levels[level as usize].len() {
                s.levels[level as usize][flat] = f(level, flat);
            }
        }
        s
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn get(&self, level: u32, flat: usize) -> f64 {
        self.levels[level as usize][flat]
    }

    pub fn set(&mut self, level: u32, flat: usize, v: f64) {
        self.levels[level as usize][flat] = v;
    }

    fn check_nonnegative(&self) -> Result<()> {
        for (level, row) in self.levels.iter().enumerate() {
            for (pos, &v) in row.iter().enumerate() {
                if v < 0.0 {
                    return Err(Error::NegativeSequenceEntry {
                        level: level as u32,
                        pos,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Subtree totals `T(J) = lambda_J + sum over children T`.
    fn subtree_sums(&self) -> Vec<Vec<f64>> {
        let mut sums = self.levels.clone();
        for level in (0..self.depth.saturating_sub(1)).rev() {
            let (coarse, fine) = {
                let (a, b) = sums.split_at_mut(level as usize + 1);
                (&mut a[level as usize], &b[0])
            };
            for (flat, slot) in coarse.iter_mut().enumerate() {
                for code in 0..(1u32 << self.dim) {
                    *slot += fine[child_flat(self.dim, level, flat, code)];
                }
            }
        }
        sums
    }
}

/// Where a testing supremum is attained.
#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum ArgmaxIndex {
    Cell { level: u32, pos: Vec<u32> },
    Wilson { level: u32, pos: Vec<u32>, alpha: u32 },
}

/// Result of one testing supremum; `budget`/`pass` are attached by sweeps.
#[derive(Clone, Debug, Serialize)]
pub struct CarlesonReport {
    pub sup: f64,
    pub argmax: ArgmaxIndex,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_root: Option<Vec<f64>>,
    pub budget: Option<f64>,
    pub pass: Option<bool>,
}

impl CarlesonReport {
    pub fn with_budget(mut self, budget: f64) -> Self {
        self.budget = Some(budget);
        self.pass = Some(self.sup <= budget);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Normalized supremum over cells at levels `0..M` of
/// `subtree_sum(J) / normalizer(J)`.
fn normalized_sup(
    seq: &CellSequence,
    mut normalizer: impl FnMut(u32, usize) -> f64,
    keep_table: bool,
) -> CarlesonReport {
    let sums = seq.subtree_sums();
    let mut best = f64::NEG_INFINITY;
    let mut arg = (0u32, 0usize);
    let mut table = if keep_table { Some(Vec::new()) } else { None };
    for level in 0..seq.depth {
        for (flat, &s) in sums[level as usize].iter().enumerate() {
            let v = s / normalizer(level, flat);
            if let Some(t) = table.as_mut() {
                t.push(v);
            }
            if v > best {
                best = v;
                arg = (level, flat);
            }
        }
    }
    let cell = CellIndex::from_flat(seq.dim, arg.0, arg.1);
    CarlesonReport {
        sup: best,
        argmax: ArgmaxIndex::Cell {
            level: arg.0,
            pos: cell.pos().to_vec(),
        },
        per_root: table,
        budget: None,
        pass: None,
    }
}

/// Plain Carleson constant: `sup_J (1/|J|) sum_{I in J} lambda_I`.
pub fn carleson_norm(grid: GridSpec, lambda: &CellSequence) -> Result<CarlesonReport> {
    if lambda.dim() != grid.dim() || lambda.depth() != grid.coeff_depth() {
        return Err(Error::InvalidConfig(
            "sequence shape does not match the grid".into(),
        ));
    }
    lambda.check_nonnegative()?;
    Ok(normalized_sup(
        lambda,
        |level, _| grid.cell_measure(level),
        true,
    ))
}

/// Weighted testing constant: `sup_J (1/(|J| <w>_J)) sum_{I in J} <w>_I^2 alpha_I`.
pub fn weighted_carleson_constant(w: &Weight, alpha: &CellSequence) -> Result<CarlesonReport> {
    let grid = w.grid();
    if alpha.dim() != grid.dim() || alpha.depth() != grid.coeff_depth() {
        return Err(Error::InvalidConfig(
            "sequence shape does not match the weight grid".into(),
        ));
    }
    alpha.check_nonnegative()?;
    let weighted = CellSequence::from_fn(grid, |level, flat| {
        let a = w.average(level, flat);
        alpha.get(level, flat) * a * a
    });
    Ok(normalized_sup(
        &weighted,
        |level, flat| grid.cell_measure(level) * w.average(level, flat),
        true,
    ))
}

/// The three testing suprema of the bilinear embedding:
/// `sum alpha <v> <= C v(J)`, `sum alpha <w> <= C w(J)`, `sum alpha <= C |J|`.
pub fn bilinear_test(
    w: &Weight,
    v: &Weight,
    alpha: &CellSequence,
) -> Result<[CarlesonReport; 3]> {
    let grid = w.grid();
    grid.check_match(&v.grid())?;
    if alpha.dim() != grid.dim() || alpha.depth() != grid.coeff_depth() {
        return Err(Error::InvalidConfig(
            "sequence shape does not match the weight grid".into(),
        ));
    }
    alpha.check_nonnegative()?;
    let with_v = CellSequence::from_fn(grid, |l, f| alpha.get(l, f) * v.average(l, f));
    let with_w = CellSequence::from_fn(grid, |l, f| alpha.get(l, f) * w.average(l, f));
    Ok([
        normalized_sup(&with_v, |l, f| v.integral(l, f), false),
        normalized_sup(&with_w, |l, f| w.integral(l, f), false),
        normalized_sup(alpha, |l, _| grid.cell_measure(l), false),
    ])
}

/// The three shifted-pair sums (d=1): with `t_I = |(w^{-1})-hat_I w-hat_{I-}|`,
/// the suprema of `sum t/<w>` against `w^{-1}(J)`, `sum t/<w^{-1}>` against
/// `w(J)`, and `sum t` against `|J|`.
pub fn petermichl_sums(w: &Weight) -> Result<[CarlesonReport; 3]> {
    let grid = w.grid();
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid(
            "the shifted-pair sums are one-dimensional".into(),
        ));
    }
    let term = |level: u32, flat: usize| -> f64 {
        let idx = HaarIndex::new(level, flat);
        let inv_hat = haar1d::coeff_from_pyramid(w.inv_avg(), idx);
        let w_hat_left = haar1d::coeff_from_pyramid(w.avg(), idx.left());
        (inv_hat * w_hat_left).abs()
    };
    let over_w = CellSequence::from_fn(grid, |l, f| term(l, f) / w.average(l, f));
    let over_inv = CellSequence::from_fn(grid, |l, f| term(l, f) / w.inv_average(l, f));
    let plain = CellSequence::from_fn(grid, term);
    Ok([
        normalized_sup(&over_w, |l, f| w.inv_integral(l, f), false),
        normalized_sup(&over_inv, |l, f| w.integral(l, f), false),
        normalized_sup(&plain, |l, _| grid.cell_measure(l), false),
    ])
}

/// Subtree totals over the Wilson index forest: for each `(I,alpha)`, the sum
/// of `summands` over all `(J,beta)` with `E_{beta,J}` inside `E_{alpha,I}`.
fn wilson_subtree_sums(grid: GridSpec, summands: &WilsonMap) -> WilsonMap {
    let d = grid.dim();
    let m = grid.coeff_depth();
    let structure = WilsonStructure::new(d);
    let pairs = structure.pair_count();
    let mut totals = WilsonMap::zeros(d, m);
    // cube_total[flat] at the level below the one being processed
    let mut cube_total_below: Vec<f64> = Vec::new();
    for level in (0..m).rev() {
        let cubes = grid.cell_count(level);
        let mut cube_total = vec![0.0; cubes];
        for cube in 0..cubes {
            let mut node_totals = vec![0.0; pairs];
            for alpha in (0..pairs as u32).rev() {
                let idx = WilsonIndex::new(level, cube, alpha);
                let mut t = summands.get(idx);
                if structure.depth(alpha) == d - 1 {
                    if level + 1 < m {
                        let path = alpha + 1 - (1 << (d - 1));
                        let c1 = child_flat(d, level, cube, 2 * path);
                        let c2 = child_flat(d, level, cube, 2 * path + 1);
                        t += cube_total_below[c1] + cube_total_below[c2];
                    }
                } else {
                    t += node_totals[(2 * alpha + 1) as usize]
                        + node_totals[(2 * alpha + 2) as usize];
                }
                node_totals[alpha as usize] = t;
                totals.set(idx, t);
            }
            cube_total[cube] = node_totals[0];
        }
        cube_total_below = cube_total;
    }
    totals
}

/// The three Wilson-indexed sums (any d, no index shift): with
/// `t_{J,b} = |w-hat_{J,b} (w^{-1})-hat_{J,b}|`, the suprema of the subtree
/// sums of `t`, `t/<w^{-1}>_E`, `t/<w>_E` against `|E|`, `w(E)`, `w^{-1}(E)`.
pub fn wilson_sums(w: &Weight) -> [CarlesonReport; 3] {
    let grid = w.grid();
    let d = grid.dim();
    let m = grid.coeff_depth();
    let structure = WilsonStructure::new(d);
    let w_coeffs = wilson::analyze_wilson_pyramid(w.avg(), grid);
    let inv_coeffs = wilson::analyze_wilson_pyramid(w.inv_avg(), grid);

    let mut plain = WilsonMap::zeros(d, m);
    let mut over_inv = WilsonMap::zeros(d, m);
    let mut over_w = WilsonMap::zeros(d, m);
    let mut w_set = WilsonMap::zeros(d, m); // w(E) per index
    let mut inv_set = WilsonMap::zeros(d, m); // w^{-1}(E) per index
    for level in 0..m {
        for cube in 0..grid.cell_count(level) {
            let sums_w = wilson::node_sums(w.avg(), &structure, level, cube);
            let sums_inv = wilson::node_sums(w.inv_avg(), &structure, level, cube);
            for alpha in 0..structure.pair_count() as u32 {
                let idx = WilsonIndex::new(level, cube, alpha);
                let t = (w_coeffs.map.get(idx) * inv_coeffs.map.get(idx)).abs();
                let measure = structure.set_measure(alpha, level);
                let wt = sums_w.total(alpha);
                let it = sums_inv.total(alpha);
                plain.set(idx, t);
                over_inv.set(idx, t / (it / measure));
                over_w.set(idx, t / (wt / measure));
                w_set.set(idx, wt);
                inv_set.set(idx, it);
            }
        }
    }

    let sup_of = |summands: &WilsonMap, normalizer: &dyn Fn(WilsonIndex) -> f64| {
        let totals = wilson_subtree_sums(grid, summands);
        let mut best = f64::NEG_INFINITY;
        let mut arg = WilsonIndex::new(0, 0, 0);
        for idx in wilson_indices(d, m) {
            let v = totals.get(idx) / normalizer(idx);
            if v > best {
                best = v;
                arg = idx;
            }
        }
        CarlesonReport {
            sup: best,
            argmax: ArgmaxIndex::Wilson {
                level: arg.level,
                pos: arg.cube_cell(d).pos().to_vec(),
                alpha: arg.alpha,
            },
            per_root: None,
            budget: None,
            pass: None,
        }
    };

    [
        sup_of(&plain, &|idx| {
            structure.set_measure(idx.alpha, idx.level)
        }),
        sup_of(&over_inv, &|idx| w_set.get(idx)),
        sup_of(&over_w, &|idx| inv_set.get(idx)),
    ]
}

fn check_resolution_m(f: &StepFunction) -> Result<()> {
    let m = f.grid().coeff_depth();
    if !f.constant_on_level(m) {
        return Err(Error::InputTooFine { max_level: m });
    }
    Ok(())
}

/// The dyadic square function `Sf = sqrt(sum |f-hat_I|^2 h^1_I)`; in d >= 2
/// the sum runs over Wilson indices with `h^1_{E_{alpha,I}}`.
pub fn square_function(f: &StepFunction) -> Result<StepFunction> {
    check_resolution_m(f)?;
    let grid = f.grid();
    let m = grid.coeff_depth();
    let mut acc = LevelAccumulator::new(grid, m);
    if grid.dim() == 1 {
        let coeffs = haar1d::analyze(f)?;
        for (idx, c) in coeffs.iter() {
            acc.add(idx.level, idx.pos, c * c * (idx.level as f64).exp2());
        }
    } else {
        let d = grid.dim();
        let structure = WilsonStructure::new(d);
        let coeffs = wilson::analyze_wilson(f);
        for (idx, c) in coeffs.map.iter() {
            let density = c * c / structure.set_measure(idx.alpha, idx.level);
            for &code in structure
                .e1_codes(idx.alpha)
                .iter()
                .chain(structure.e2_codes(idx.alpha))
            {
                acc.add(
                    idx.level + 1,
                    child_flat(d, idx.level, idx.cube, code),
                    density,
                );
            }
        }
    }
    Ok(acc.collect()?.map(f64::sqrt))
}

/// The modified square function: each term spreads over the dyadic parent,
/// `S f = sqrt(sum |f-hat_I|^2 1_{parent(I)} / |I|)`. The root's parent is
/// clamped to the root cell (the truncation boundary). One-dimensional.
pub fn modified_square_function(f: &StepFunction) -> Result<StepFunction> {
    let grid = f.grid();
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid(
            "the modified square function is one-dimensional".into(),
        ));
    }
    check_resolution_m(f)?;
    let m = grid.coeff_depth();
    let coeffs = haar1d::analyze(f)?;
    let mut acc = LevelAccumulator::new(grid, m);
    for (idx, c) in coeffs.iter() {
        let density = c * c * (idx.level as f64).exp2(); // 1/|I|
        if idx.level == 0 {
            acc.add(0, 0, density);
        } else {
            acc.add(idx.level - 1, idx.pos / 2, density);
        }
    }
    Ok(acc.collect()?.map(f64::sqrt))
}

/// `||Sf||^2_sigma` by the coefficient formula: `sum |f-hat_I|^2 <sigma>_I`
/// (d=1) or `sum |f-hat_{I,a}|^2 <sigma>_{E_{a,I}}` (d >= 2). `sigma` may be
/// any nonnegative step function.
pub fn weighted_sq_norm(f: &StepFunction, sigma: &StepFunction) -> Result<f64> {
    let grid = f.grid();
    grid.check_match(&sigma.grid())?;
    check_resolution_m(f)?;
    let pyr = sigma.pyramid();
    let mut total = 0.0;
    if grid.dim() == 1 {
        let coeffs = haar1d::analyze(f)?;
        for (idx, c) in coeffs.iter() {
            total += c * c * pyr.average(idx.level, idx.pos);
        }
    } else {
        let d = grid.dim();
        let structure = WilsonStructure::new(d);
        let coeffs = wilson::analyze_wilson(f);
        for level in 0..grid.coeff_depth() {
            for cube in 0..grid.cell_count(level) {
                let sums = wilson::node_sums(&pyr, &structure, level, cube);
                for alpha in 0..structure.pair_count() as u32 {
                    let idx = WilsonIndex::new(level, cube, alpha);
                    let c = coeffs.map.get(idx);
                    let mean = sums.total(alpha) / structure.set_measure(alpha, level);
                    total += c * c * mean;
                }
            }
        }
    }
    Ok(total)
}

/// Norm estimate from power iteration.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct NormEstimate {
    pub value: f64,
    #[serde(rename = "iters")]
    pub iterations: usize,
    pub residual: f64,
}

impl NormEstimate {
    pub fn converged(&self) -> bool {
        self.residual <= POWER_TOL
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("norm estimate serializes")
    }
}

/// Largest generalized eigenvalue of the pencil `(numerator, denominator)` by
/// power iteration on `denominator^{-1} numerator`: deterministic all-ones
/// start (seeded restarts if the start is orthogonal to the range), Rayleigh
/// quotient convergence `|dl|/l <= 1e-10`, at most 10000 iterations.
/// Non-convergence is reported through the residual, not an error.
pub fn sharp_ratio(numerator: &DMatrix<f64>, denominator: &DMatrix<f64>) -> Result<NormEstimate> {
    let (est, _) = pencil_power_iteration(numerator, denominator)?;
    Ok(est)
}

/// Power iteration core; also returns the Rayleigh-quotient history (used to
/// check monotonicity on PSD pencils).
pub(crate) fn pencil_power_iteration(
    numerator: &DMatrix<f64>,
    denominator: &DMatrix<f64>,
) -> Result<(NormEstimate, Vec<f64>)> {
    let n = numerator.nrows();
    if numerator.ncols() != n || denominator.nrows() != n || denominator.ncols() != n {
        return Err(Error::InvalidConfig(
            "pencil matrices must be square and of equal size".into(),
        ));
    }
    let chol: Cholesky<f64, Dyn> =
        Cholesky::new(denominator.clone()).ok_or(Error::SingularDenominator)?;

    if numerator.amax() == 0.0 {
        return Ok((
            NormEstimate {
                value: 0.0,
                iterations: 0,
                residual: 0.0,
            },
            vec![0.0],
        ));
    }

    // All-ones start; seeded restarts if it carries no numerator energy.
    let mut v = DVector::from_element(n, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1AD1C);
    for _attempt in 0..5 {
        if v.dot(&(numerator * &v)) > 0.0 {
            break;
        }
        v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    }
    let mut num_v = numerator * &v;
    let mut lambda = v.dot(&num_v) / v.dot(&(denominator * &v));
    let mut history = vec![lambda];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < POWER_MAX_ITERS {
        iterations += 1;
        let mut next = chol.solve(&num_v);
        let scale = next.amax();
        if scale == 0.0 {
            residual = 0.0;
            lambda = 0.0;
            history.push(lambda);
            break;
        }
        next /= scale;
        let num_next = numerator * &next;
        let new_lambda = next.dot(&num_next) / next.dot(&(denominator * &next));
        residual = (new_lambda - lambda).abs() / new_lambda.abs().max(1e-300);
        v = next;
        num_v = num_next;
        lambda = new_lambda;
        history.push(lambda);
        if residual <= POWER_TOL {
            break;
        }
    }
    Ok((
        NormEstimate {
            value: lambda,
            iterations,
            residual,
        },
        history,
    ))
}

/// The quadratic-form pencil of the square function over resolution-`M`
/// inputs: numerator `||Sf||^2_w` (diagonal in the Haar/Wilson coordinates,
/// zero on the mean), denominator `||f||^2_w` (the weighted Gram matrix of
/// the orthonormal basis). `modified` selects the parent-spread version
/// (d=1 only).
pub fn square_pencil(w: &Weight, modified: bool) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let grid = w.grid();
    let d = grid.dim();
    let m = grid.coeff_depth();
    if modified && d != 1 {
        return Err(Error::InvalidGrid(
            "the modified square function is one-dimensional".into(),
        ));
    }

    let basis = resolution_basis(grid)?;
    let n = basis.len();
    let mut numerator = DMatrix::zeros(n, n);
    // slot 0 is the constant; diagonal entries follow the index order.
    if d == 1 {
        for (i, idx) in haar1d::indices(m).enumerate() {
            let entry = if modified {
                if idx.level == 0 {
                    w.average(0, 0)
                } else {
                    2.0 * w.average(idx.level - 1, idx.pos / 2)
                }
            } else {
                w.average(idx.level, idx.pos)
            };
            numerator[(i + 1, i + 1)] = entry;
        }
    } else {
        let structure = WilsonStructure::new(d);
        for (i, idx) in wilson_indices(d, m).enumerate() {
            let sums = wilson::node_sums(w.avg(), &structure, idx.level, idx.cube);
            let mean = sums.total(idx.alpha) / structure.set_measure(idx.alpha, idx.level);
            numerator[(i + 1, i + 1)] = mean;
        }
    }

    // Gram matrix in L2(w): column j holds the basis coefficients of w*b_j.
    let mut gram = DMatrix::zeros(n, n);
    for (j, b) in basis.iter().enumerate() {
        let wb = w.base().mul(b)?;
        let col = basis_coefficients(grid, &wb)?;
        for i in 0..n {
            gram[(i, j)] = col[i];
        }
    }
    // enforce exact symmetry (the two triangles differ by rounding only)
    let gram = (&gram + gram.transpose()) * 0.5;
    Ok((numerator, gram))
}

/// Measured operator norm of the square function on `L2(w)`:
/// `sqrt` of the sharp ratio of the square-function pencil.
pub fn square_norm_ratio(w: &Weight, modified: bool) -> Result<NormEstimate> {
    let (num, den) = square_pencil(w, modified)?;
    let mut est = sharp_ratio(&num, &den)?;
    est.value = est.value.sqrt();
    Ok(est)
}

/// The orthonormal resolution-`M` basis (constant plus Haar or Wilson
/// functions) as step functions.
fn resolution_basis(grid: GridSpec) -> Result<Vec<StepFunction>> {
    let m = grid.coeff_depth();
    let mut basis = vec![StepFunction::constant(grid, 1.0)];
    if grid.dim() == 1 {
        for idx in haar1d::indices(m) {
            basis.push(haar1d::haar_fn(grid, idx)?);
        }
    } else {
        for idx in wilson_indices(grid.dim(), m) {
            basis.push(wilson::wilson_haar_unit(grid, idx)?);
        }
    }
    Ok(basis)
}

/// Coefficients of `f` against the resolution-`M` orthonormal basis.
fn basis_coefficients(grid: GridSpec, f: &StepFunction) -> Result<Vec<f64>> {
    let m = grid.coeff_depth();
    if grid.dim() == 1 {
        let coeffs = haar1d::analyze(f)?;
        let mut out = Vec::with_capacity(haar1d::index_count(m) + 1);
        out.push(coeffs.avg());
        out.extend(coeffs.iter().map(|(_, c)| c));
        Ok(out)
    } else {
        let coeffs = wilson::analyze_wilson(f);
        let mut out = Vec::with_capacity(wilson_index_count(grid.dim(), m) + 1);
        out.push(coeffs.avg);
        out.extend(coeffs.map.iter().map(|(_, c)| c));
        Ok(out)
    }
}

/// Measured norm of a linear map between weighted L2 spaces, over
/// resolution-`M` inputs: the largest singular value with respect to the two
/// weighted inner products, via power iteration on the normal form. Linearity
/// is spot-checked on seeded random triples first.
pub fn operator_norm<F>(
    grid: GridSpec,
    apply: F,
    domain_weight: Option<&Weight>,
    codomain_weight: Option<&Weight>,
) -> Result<NormEstimate>
where
    F: Fn(&StepFunction) -> Result<StepFunction>,
{
    let m = grid.coeff_depth();
    let n = grid.cell_count(m);
    let out_len = grid.value_count();

    // linearity spot-check
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11);
    for _ in 0..3 {
        let f1 = random_level_m(grid, &mut rng);
        let f2 = random_level_m(grid, &mut rng);
        let a = rng.random_range(-2.0..2.0);
        let b = rng.random_range(-2.0..2.0);
        let combined = apply(&f1.scale(a).add(&f2.scale(b))?)?;
        let separate = apply(&f1)?.scale(a).add(&apply(&f2)?.scale(b))?;
        let dev = combined.sub(&separate)?.norm();
        let scale = combined.norm().max(separate.norm()).max(1.0);
        if dev / scale > 1e-9 {
            return Err(Error::NotLinear(dev / scale));
        }
    }

    // assemble the matrix column by column on the level-M cell basis
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut all_zero = true;
    for j in 0..n {
        let mut cell_values = vec![0.0; n];
        cell_values[j] = 1.0;
        let e_j = StepFunction::from_level_values(grid, m, &cell_values)?;
        let out = apply(&e_j)?;
        grid.check_match(&out.grid())?;
        let col = out.values().to_vec();
        if all_zero && col.iter().any(|&v| v != 0.0) {
            all_zero = false;
        }
        columns.push(col);
    }
    if all_zero {
        return Ok(NormEstimate {
            value: 0.0,
            iterations: 0,
            residual: 0.0,
        });
    }

    // codomain metric: diag(w_out * 2^{-dR}); apply its square root to rows
    let cod_cell = grid.cell_measure(grid.resolution());
    let cod_scale: Vec<f64> = match codomain_weight {
        Some(w) => w.base().values().iter().map(|&v| (v * cod_cell).sqrt()).collect(),
        None => vec![cod_cell.sqrt(); out_len],
    };
    let mut scaled = DMatrix::zeros(out_len, n);
    for (j, col) in columns.iter().enumerate() {
        for i in 0..out_len {
            scaled[(i, j)] = col[i] * cod_scale[i];
        }
    }
    let normal = scaled.tr_mul(&scaled); // A^T D_cod A

    // domain metric: diag(<w>_cell |cell|)
    let dom_cell = grid.cell_measure(m);
    let dom_diag: Vec<f64> = match domain_weight {
        Some(w) => (0..n).map(|j| w.integral(m, j)).collect(),
        None => vec![dom_cell; n],
    };
    let denom = DMatrix::from_diagonal(&DVector::from_vec(dom_diag));

    let (mut est, _) = pencil_power_iteration(&normal, &denom)?;
    est.value = est.value.max(0.0).sqrt();
    Ok(est)
}

fn random_level_m(grid: GridSpec, rng: &mut ChaCha8Rng) -> StepFunction {
    let m = grid.coeff_depth();
    let vals: Vec<f64> = (0..grid.cell_count(m))
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    StepFunction::from_level_values(grid, m, &vals).expect("valid level values")
}

/// Carleson sequence derived from the square-function bound (d=1):
/// `lambda_K = ((w^{-1/2})-hat_K)^2 <w>_K`; its Carleson constant is bounded
/// by `(8 [w]_{A2})^2` under the budgets.
pub fn square_carleson_report(w: &Weight) -> Result<CarlesonReport> {
    let grid = w.grid();
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid("one-dimensional report".into()));
    }
    let seq = CellSequence::from_fn(grid, |level, flat| {
        let c = haar1d::coeff_from_pyramid(w.inv_sqrt_avg(), HaarIndex::new(level, flat));
        c * c * w.average(level, flat)
    });
    carleson_norm(grid, &seq)
}

/// Wilson-indexed analogue of [`square_carleson_report`] (any d): subtree
/// sums of `((w^{-1/2})-hat_{J,b})^2 <w>_J` against `|E_{alpha,I}|`.
pub fn wilson_square_report(w: &Weight) -> CarlesonReport {
    let grid = w.grid();
    let d = grid.dim();
    let m = grid.coeff_depth();
    let structure = WilsonStructure::new(d);
    let coeffs = wilson::analyze_wilson_pyramid(w.inv_sqrt_avg(), grid);
    let mut summands = WilsonMap::zeros(d, m);
    for (idx, c) in coeffs.map.iter() {
        summands.set(idx, c * c * w.average(idx.level, idx.cube));
    }
    let totals = wilson_subtree_sums(grid, &summands);
    let mut best = f64::NEG_INFINITY;
    let mut arg = WilsonIndex::new(0, 0, 0);
    for idx in wilson_indices(d, m) {
        let v = totals.get(idx) / structure.set_measure(idx.alpha, idx.level);
        if v > best {
            best = v;
            arg = idx;
        }
    }
    CarlesonReport {
        sup: best,
        argmax: ArgmaxIndex::Wilson {
            level: arg.level,
            pos: arg.cube_cell(d).pos().to_vec(),
            alpha: arg.alpha,
        },
        per_root: None,
        budget: None,
        pass: None,
    }
}

/// Testing constant of the unit-bounded sequence
/// `lambda_K = <w^{1/2}, h^{w^{-1}}_K>^2_{w^{-1}}` (d=1); mathematically at
/// most 1 on the truncated grid.
pub fn unit_testing_report(w: &Weight) -> Result<CarlesonReport> {
    let grid = w.grid();
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid("one-dimensional report".into()));
    }
    let seq = CellSequence::from_fn(grid, |level, flat| {
        let idx = HaarIndex::new(level, flat);
        let (nl, nr) = haar1d::weighted_haar_values(w.inv_avg(), idx);
        let c = nl * w.inv_sqrt_avg().integral(level + 1, 2 * flat)
            + nr * w.inv_sqrt_avg().integral(level + 1, 2 * flat + 1);
        c * c
    });
    carleson_norm(grid, &seq)
}

/// Testing constant of the parent-shifted square sequence (d=1):
/// `sup_J (1/(|J| <w>_J)) sum_{K in J} <w^{-1}>_K (w-hat_{K-})^2`.
pub fn shifted_square_report(w: &Weight) -> Result<CarlesonReport> {
    let grid = w.grid();
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid("one-dimensional report".into()));
    }
    let seq = CellSequence::from_fn(grid, |level, flat| {
        let idx = HaarIndex::new(level, flat);
        let c = haar1d::coeff_from_pyramid(w.avg(), idx.left());
        w.inv_average(level, flat) * c * c
    });
    Ok(normalized_sup(
        &seq,
        |level, flat| grid.cell_measure(level) * w.average(level, flat),
        false,
    ))
}
