//! 1-d paraproducts, the Haar shift, their composition, and its six-term
//! bilinear decomposition.
//!
//! The composition under study is `S P^{(1,0)}_b` with the symbol
//! `b_I = (w^{-1/2})-hat_I`. Pairing it against `g` in `L2(w)` and expanding
//! every shifted Haar function through the disbalanced decomposition yields
//! six signed sums (A1, B1, C1, A2, B2, C2); the A- and C-sums split further
//! through the disbalanced decomposition of `w^{-1}`. All of it is exact on
//! the truncated grid when the input is constant on level-`M` cells, and
//! [`six_terms`] verifies the signed sum against the directly applied
//! operator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, LevelAccumulator, Pyramid, StepFunction};
use crate::haar1d::{
    analyze_pyramid, coeff_from_pyramid, disbalanced_from_pyramid, indices, weighted_haar_values,
    CoefficientMap, HaarIndex,
};
use crate::weight::Weight;

/// Paraproduct symbols are coefficient maps over the depth-`M` index set
/// (the global-average slot is ignored).
pub type SymbolSequence = CoefficientMap;

fn check_dim1(grid: &GridSpec) -> Result<()> {
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid(format!(
            "1-d operators require dimension 1, got {}",
            grid.dim()
        )));
    }
    Ok(())
}

fn check_symbol(grid: &GridSpec, b: &SymbolSequence) -> Result<()> {
    if b.depth() != grid.coeff_depth() {
        return Err(Error::InvalidConfig(format!(
            "symbol depth {} does not match grid coefficient depth {}",
            b.depth(),
            grid.coeff_depth()
        )));
    }
    Ok(())
}

/// Symbol `{f-hat_I}` of Haar coefficients of `f` on levels `0..M`.
pub fn coeff_symbol(f: &StepFunction) -> Result<SymbolSequence> {
    check_dim1(&f.grid())?;
    let mut s = analyze_pyramid(&f.pyramid(), f.grid().coeff_depth());
    s.set_avg(0.0);
    Ok(s)
}

/// Symbol `{<f>_I}` of cell averages of `f` on levels `0..M`.
pub fn mean_symbol(f: &StepFunction) -> Result<SymbolSequence> {
    check_dim1(&f.grid())?;
    let grid = f.grid();
    let pyr = f.pyramid();
    let mut s = SymbolSequence::zeros(grid.coeff_depth());
    for idx in indices(grid.coeff_depth()) {
        s.set(idx, pyr.average(idx.level, idx.pos));
    }
    Ok(s)
}

/// Dyadic paraproduct `P^{(alpha,beta)}_b f = sum_I b_I <f, h^beta_I> h^alpha_I`
/// over index levels `0..M`; `0` selects the Haar component and `1` the
/// averaging component on either side.
pub fn paraproduct(
    alpha: u8,
    beta: u8,
    b: &SymbolSequence,
    f: &StepFunction,
) -> Result<StepFunction> {
    if alpha > 1 || beta > 1 {
        return Err(Error::InvalidConfig(format!(
            "paraproduct components must be 0 or 1, got ({alpha},{beta})"
        )));
    }
    let grid = f.grid();
    check_dim1(&grid)?;
    check_symbol(&grid, b)?;
    let m = grid.coeff_depth();
    let pyr = f.pyramid();
    let mut acc = LevelAccumulator::new(grid, m);
    for idx in indices(m) {
        let input = match beta {
            0 => coeff_from_pyramid(&pyr, idx),
            _ => pyr.average(idx.level, idx.pos),
        };
        let c = b.get(idx) * input;
        if c == 0.0 {
            continue;
        }
        match alpha {
            0 => {
                let scale = (idx.level as f64 / 2.0).exp2();
                acc.add(idx.level + 1, 2 * idx.pos, c * scale);
                acc.add(idx.level + 1, 2 * idx.pos + 1, -c * scale);
            }
            _ => {
                let scale = (idx.level as f64).exp2();
                acc.add(idx.level, idx.pos, c * scale);
            }
        }
    }
    acc.collect()
}

/// The Haar shift `S f = sum_I f-hat_I h_{I-}`; the global average is
/// annihilated. Needs `R >= M+1` so the images of level-`M-1` functions are
/// representable (guaranteed by the grid invariant).
pub fn haar_shift(f: &StepFunction) -> Result<StepFunction> {
    let grid = f.grid();
    check_dim1(&grid)?;
    let m = grid.coeff_depth();
    let pyr = f.pyramid();
    let mut acc = LevelAccumulator::new(grid, m + 1);
    for idx in indices(m) {
        let c = coeff_from_pyramid(&pyr, idx);
        if c == 0.0 {
            continue;
        }
        // h_{I-} lives on the halves of the left child.
        let scale = ((idx.level + 1) as f64 / 2.0).exp2();
        acc.add(idx.level + 2, 4 * idx.pos, c * scale);
        acc.add(idx.level + 2, 4 * idx.pos + 1, -c * scale);
    }
    acc.collect()
}

fn check_phi(grid: &GridSpec, phi: &StepFunction) -> Result<()> {
    if !phi.constant_on_level(grid.coeff_depth()) {
        return Err(Error::InputTooFine {
            max_level: grid.coeff_depth(),
        });
    }
    Ok(())
}

/// The composition `S P^{(1,0)}_{(w^{-1/2})-hat}` applied to `phi`.
///
/// `phi` must be constant on level-`M` cells; finer inputs would make the
/// truncated composition drop genuine tail terms.
pub fn shifted_paraproduct(w: &Weight, phi: &StepFunction) -> Result<StepFunction> {
    let grid = phi.grid();
    w.grid().check_match(&grid)?;
    check_phi(&grid, phi)?;
    let b = coeff_symbol(w.inv_sqrt())?;
    haar_shift(&paraproduct(1, 0, &b, phi)?)
}

/// The `h_{K-}` coefficient of `S P^{(1,0)}_{(w^{-1/2})-hat} phi`, in closed
/// form: `(w^{-1/2} phi)-hat_K - <w^{-1/2}>_K phi-hat_K - <phi>_K (w^{-1/2})-hat_K`.
pub fn composed_coeff(w: &Weight, phi: &StepFunction, k: HaarIndex) -> Result<f64> {
    let grid = phi.grid();
    w.grid().check_match(&grid)?;
    check_phi(&grid, phi)?;
    if k.level >= grid.coeff_depth() {
        return Err(Error::LevelOutOfRange {
            level: k.level,
            limit: grid.coeff_depth() - 1,
        });
    }
    let prod = w.inv_sqrt().mul(phi)?.pyramid();
    let pphi = phi.pyramid();
    Ok(composed_coeff_from_pyramids(
        w.inv_sqrt_avg(),
        &prod,
        &pphi,
        k,
    ))
}

fn composed_coeff_from_pyramids(
    inv_sqrt: &Pyramid,
    prod: &Pyramid,
    pphi: &Pyramid,
    k: HaarIndex,
) -> f64 {
    coeff_from_pyramid(prod, k)
        - inv_sqrt.average(k.level, k.pos) * coeff_from_pyramid(pphi, k)
        - pphi.average(k.level, k.pos) * coeff_from_pyramid(inv_sqrt, k)
}

/// The six bilinear terms of the decomposition, their sub-splits, and the
/// directly computed left-hand side.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TermBreakdown {
    #[serde(rename = "A1")]
    pub a1: f64,
    #[serde(rename = "B1")]
    pub b1: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "A2")]
    pub a2: f64,
    #[serde(rename = "B2")]
    pub b2: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "A11")]
    pub a11: f64,
    #[serde(rename = "A12")]
    pub a12: f64,
    #[serde(rename = "A21")]
    pub a21: f64,
    #[serde(rename = "A22")]
    pub a22: f64,
    #[serde(rename = "C21")]
    pub c21: f64,
    #[serde(rename = "C22")]
    pub c22: f64,
    pub lhs: f64,
    pub residual: f64,
}

impl TermBreakdown {
    pub(crate) fn zero() -> Self {
        Self {
            a1: 0.0,
            b1: 0.0,
            c1: 0.0,
            a2: 0.0,
            b2: 0.0,
            c2: 0.0,
            a11: 0.0,
            a12: 0.0,
            a21: 0.0,
            a22: 0.0,
            c21: 0.0,
            c22: 0.0,
            lhs: 0.0,
            residual: 0.0,
        }
    }

    pub(crate) fn finish(mut self) -> Self {
        self.residual = rel_gap(self.signed_sum(), self.lhs, self.term_scale());
        self
    }

    /// `A1 - B1 - C1 + A2 - B2 - C2`.
    pub fn signed_sum(&self) -> f64 {
        self.a1 - self.b1 - self.c1 + self.a2 - self.b2 - self.c2
    }

    fn term_scale(&self) -> f64 {
        [self.a1, self.b1, self.c1, self.a2, self.b2, self.c2]
            .iter()
            .fold(0.0f64, |m, t| m.max(t.abs()))
    }

    /// Relative residuals of the three sub-split identities
    /// `A11+A12=A1`, `A21+A22=A2`, `C21+C22=C2`.
    pub fn split_residuals(&self) -> [f64; 3] {
        [
            rel_gap(
                self.a11 + self.a12,
                self.a1,
                self.a11.abs().max(self.a12.abs()),
            ),
            rel_gap(
                self.a21 + self.a22,
                self.a2,
                self.a21.abs().max(self.a22.abs()),
            ),
            rel_gap(
                self.c21 + self.c22,
                self.c2,
                self.c21.abs().max(self.c22.abs()),
            ),
        ]
    }

    /// The twelve term values in report order
    /// (A1,B1,C1,A2,B2,C2,A11,A12,A21,A22,C21,C22).
    pub fn term_values(&self) -> [f64; 12] {
        [
            self.a1, self.b1, self.c1, self.a2, self.b2, self.c2, self.a11, self.a12, self.a21,
            self.a22, self.c21, self.c22,
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("term breakdown serializes")
    }
}

fn rel_gap(got: f64, want: f64, scale: f64) -> f64 {
    let denom = want.abs().max(scale).max(1e-300);
    (got - want).abs() / denom
}

/// Expands `<S P^{(1,0)}_{(w^{-1/2})-hat} phi, g>_w` into the six terms and
/// their sub-splits; `lhs` is computed independently by applying the
/// operators and integrating.
///
/// Summation is level-major, position-minor, so results are bitwise
/// reproducible across runs.
pub fn six_terms(w: &Weight, phi: &StepFunction, g: &StepFunction) -> Result<TermBreakdown> {
    let grid = phi.grid();
    w.grid().check_match(&grid)?;
    grid.check_match(&g.grid())?;
    check_phi(&grid, phi)?;
    let m = grid.coeff_depth();

    let pphi = phi.pyramid();
    let prod = w.inv_sqrt().mul(phi)?.pyramid(); // w^{-1/2} phi
    let pgw = g.mul(w.base())?.pyramid(); // g w
    let pw = w.avg();
    let pinv = w.inv_avg();
    let pinvs = w.inv_sqrt_avg();

    let mut t = TermBreakdown::zero();

    for k in indices(m) {
        let level = k.level;
        let pos = k.pos;
        let left = k.left();

        // coefficient pieces of the composition at K
        let p_k = coeff_from_pyramid(&prod, k);
        let q_k = pinvs.average(level, pos) * coeff_from_pyramid(&pphi, k);
        let r_k = pphi.average(level, pos) * coeff_from_pyramid(pinvs, k);

        // disbalanced pieces of <h_{K-}, g>_w
        let disb_left = disbalanced_from_pyramid(pw, left);
        let (hl, hr) = weighted_haar_values(pw, left);
        let inner_hw_g =
            hl * pgw.integral(level + 2, 4 * pos) + hr * pgw.integral(level + 2, 4 * pos + 1);
        let inner_h1_g = pgw.average(level + 1, 2 * pos);
        let u = disb_left.haar_factor * inner_hw_g;
        let v = disb_left.avg_factor * inner_h1_g;

        t.a1 += p_k * u;
        t.b1 += q_k * u;
        t.c1 += r_k * u;
        t.a2 += p_k * v;
        t.b2 += q_k * v;
        t.c2 += r_k * v;

        // sub-splits through the disbalanced decomposition of w^{-1} at K
        let disb_inv = disbalanced_from_pyramid(pinv, k);
        let (nl, nr) = weighted_haar_values(pinv, k);
        // <w^{1/2} phi, h^{w^{-1}}_K>_{w^{-1}} = int phi w^{-1/2} h^{w^{-1}}_K
        let a_k =
            nl * prod.integral(level + 1, 2 * pos) + nr * prod.integral(level + 1, 2 * pos + 1);
        // <w^{1/2}, h^{w^{-1}}_K>_{w^{-1}} = int w^{-1/2} h^{w^{-1}}_K
        let s_k =
            nl * pinvs.integral(level + 1, 2 * pos) + nr * pinvs.integral(level + 1, 2 * pos + 1);
        let mean_prod = prod.average(level, pos);
        let mean_phi = pphi.average(level, pos);
        let mean_invs = pinvs.average(level, pos);

        t.a11 += disb_inv.haar_factor * a_k * u;
        t.a12 += disb_inv.avg_factor * mean_prod * u;
        t.a21 += disb_inv.haar_factor * a_k * v;
        t.a22 += disb_inv.avg_factor * mean_prod * v;
        t.c21 += disb_inv.haar_factor * s_k * mean_phi * v;
        t.c22 += disb_inv.avg_factor * mean_invs * mean_phi * v;
    }

    t.lhs = shifted_paraproduct(w, phi)?.inner_w(g, w.base())?;
    Ok(t.finish())
}

/// `w^{1/2} * (S P^{(1,0)}_{(w^{-1/2})-hat} phi)` pointwise: the target whose
/// unweighted L2 norm equals the weighted norm of the composition.
pub fn target_operator(w: &Weight, phi: &StepFunction) -> Result<StepFunction> {
    let shifted = shifted_paraproduct(w, phi)?;
    w.sqrt().mul(&shifted)
}
