//! A2 weights: construction, the dyadic A2 characteristic, pointwise powers.
//!
//! A [`Weight`] wraps a strictly positive step function together with its
//! pointwise companions `w^{-1}`, `w^{1/2}`, `w^{-1/2}` and the cell-integral
//! pyramids of all four. The companions are exact pointwise powers of the
//! cell values, never averages of powers: every downstream identity requires
//! pointwise consistency.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{child_flat, CellIndex, GridSpec, Pyramid, StepFunction};

#[derive(Clone, Debug)]
pub struct Weight {
    base: StepFunction,
    inv: StepFunction,
    sqrt: StepFunction,
    inv_sqrt: StepFunction,
    avg: Pyramid,
    inv_avg: Pyramid,
    sqrt_avg: Pyramid,
    inv_sqrt_avg: Pyramid,
}

/// The dyadic A2 characteristic together with the cell attaining it.
#[derive(Clone, Debug)]
pub struct A2Characteristic {
    pub value: f64,
    pub argmax: CellIndex,
}

impl Weight {
    /// Wraps a strictly positive step function; rejects any value <= 0.
    pub fn new(base: StepFunction) -> Result<Self> {
        let min = base.min_value();
        if !(min > 0.0) {
            return Err(Error::NonPositiveWeight { min });
        }
        let inv = base.recip();
        let sqrt = base.sqrt();
        let inv_sqrt = inv.sqrt();
        let avg = base.pyramid();
        let inv_avg = inv.pyramid();
        let sqrt_avg = sqrt.pyramid();
        let inv_sqrt_avg = inv_sqrt.pyramid();
        Ok(Self {
            base,
            inv,
            sqrt,
            inv_sqrt,
            avg,
            inv_avg,
            sqrt_avg,
            inv_sqrt_avg,
        })
    }

    pub fn unit(grid: GridSpec) -> Self {
        Self::new(StepFunction::constant(grid, 1.0)).expect("unit weight is positive")
    }

    pub fn grid(&self) -> GridSpec {
        self.base.grid()
    }

    pub fn base(&self) -> &StepFunction {
        &self.base
    }

    /// Pointwise `w^{-1}`.
    pub fn inv(&self) -> &StepFunction {
        &self.inv
    }

    /// Pointwise `w^{1/2}`.
    pub fn sqrt(&self) -> &StepFunction {
        &self.sqrt
    }

    /// Pointwise `w^{-1/2}`.
    pub fn inv_sqrt(&self) -> &StepFunction {
        &self.inv_sqrt
    }

    pub fn avg(&self) -> &Pyramid {
        &self.avg
    }

    pub fn inv_avg(&self) -> &Pyramid {
        &self.inv_avg
    }

    pub fn sqrt_avg(&self) -> &Pyramid {
        &self.sqrt_avg
    }

    pub fn inv_sqrt_avg(&self) -> &Pyramid {
        &self.inv_sqrt_avg
    }

    /// `<w>_I` for the cell `(level, flat)`.
    pub fn average(&self, level: u32, flat: usize) -> f64 {
        self.avg.average(level, flat)
    }

    /// `w(I)`, the exact integral over the cell.
    pub fn integral(&self, level: u32, flat: usize) -> f64 {
        self.avg.integral(level, flat)
    }

    /// `<w^{-1}>_I`.
    pub fn inv_average(&self, level: u32, flat: usize) -> f64 {
        self.inv_avg.average(level, flat)
    }

    /// `w^{-1}(I)`.
    pub fn inv_integral(&self, level: u32, flat: usize) -> f64 {
        self.inv_avg.integral(level, flat)
    }

    /// Dyadic A2 characteristic: sup over all cells at levels `0..=R` of
    /// `<w>_I <w^{-1}>_I`, with the arg-max cell. Ties keep the first
    /// (coarsest, lowest position) cell.
    pub fn a2_characteristic(&self) -> A2Characteristic {
        let grid = self.grid();
        let mut best = f64::NEG_INFINITY;
        let mut arg = (0u32, 0usize);
        for level in 0..=grid.resolution() {
            for flat in 0..grid.cell_count(level) {
                let v = self.avg.average(level, flat) * self.inv_avg.average(level, flat);
                if v > best {
                    best = v;
                    arg = (level, flat);
                }
            }
        }
        A2Characteristic {
            value: best,
            argmax: CellIndex::from_flat(grid.dim(), arg.0, arg.1),
        }
    }

    /// JSON form: the step-function schema plus `"kind":"weight"`.
    pub fn to_json(&self) -> String {
        let repr = WeightRepr {
            d: self.grid().dim(),
            r: self.grid().resolution(),
            kind: "weight".to_string(),
            values: self.base.values().to_vec(),
        };
        serde_json::to_string(&repr).expect("weight serializes")
    }

    /// Parses a weight file; rejects non-positive values and wrong kinds.
    pub fn from_json(s: &str, coeff_depth: u32) -> Result<Weight> {
        let repr: WeightRepr = serde_json::from_str(s)?;
        if repr.kind != "weight" {
            return Err(Error::InvalidConfig(format!(
                "expected kind \"weight\", got \"{}\"",
                repr.kind
            )));
        }
        let grid = GridSpec::new(repr.d, coeff_depth, repr.r)?;
        Weight::new(StepFunction::from_values(grid, repr.values)?)
    }
}

#[derive(Serialize, Deserialize)]
struct WeightRepr {
    d: u32,
    #[serde(rename = "R")]
    r: u32,
    kind: String,
    values: Vec<f64>,
}

/// Per-node multiplier choice for the recursive (martingale) generator.
#[derive(Clone, Debug, PartialEq)]
pub enum DeltaSpec {
    /// The same multiplier at every node.
    Constant(f64),
    /// Independent uniform draws from `[-max, max)`, ChaCha8-seeded.
    Seeded { seed: u64, max: f64 },
}

/// Builds a weight top-down by martingale refinement: at every split node the
/// average over the first half of the node's cell set is scaled by `(1+delta)`
/// and over the second half by `(1-delta)`; values are constant below level
/// `M`. In d=1 the split is (left child, right child); in d >= 2 each cube's
/// `2^d` children are split along the coordinate-bit binary tree (the same
/// splitting that generates the Wilson pairs), with `delta` drawn once per
/// node `(cube, alpha)` in breadth-first order.
pub fn gen_recursive_weight(grid: GridSpec, spec: &DeltaSpec, root_avg: f64) -> Result<Weight> {
    match spec {
        DeltaSpec::Constant(delta) => gen_recursive_weight_with(grid, root_avg, |_, _| *delta),
        DeltaSpec::Seeded { seed, max } => {
            if !(max.abs() < 1.0) {
                return Err(Error::DeltaOutOfRange(*max));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let max = *max;
            gen_recursive_weight_with(grid, root_avg, move |_, _| {
                if max == 0.0 {
                    0.0
                } else {
                    rng.random_range(-max..max)
                }
            })
        }
    }
}

/// Core of the recursive generator with an arbitrary per-node multiplier map.
/// `delta(cube, alpha)` is called exactly once per node, level-major,
/// position-minor, alpha ascending; any value with `|delta| >= 1` is rejected.
pub fn gen_recursive_weight_with<F>(grid: GridSpec, root_avg: f64, mut delta: F) -> Result<Weight>
where
    F: FnMut(&CellIndex, u32) -> f64,
{
    if !(root_avg > 0.0) {
        return Err(Error::NonPositiveWeight { min: root_avg });
    }
    let d = grid.dim();
    let m = grid.coeff_depth();
    let node_count = (1usize << d) - 1;
    let mut avgs = vec![root_avg];
    let mut deltas = vec![0.0f64; node_count];
    for level in 0..m {
        let mut next = vec![0.0f64; grid.cell_count(level + 1)];
        for flat in 0..grid.cell_count(level) {
            let cube = CellIndex::from_flat(d, level, flat);
            for (alpha, slot) in deltas.iter_mut().enumerate() {
                let dv = delta(&cube, alpha as u32);
                if !(dv.abs() < 1.0) {
                    return Err(Error::DeltaOutOfRange(dv));
                }
                *slot = dv;
            }
            let parent = avgs[flat];
            for code in 0..(1u32 << d) {
                let mut v = parent;
                for j in 0..d {
                    let alpha = ((1u32 << j) - 1 + (code >> (d - j))) as usize;
                    let bit = (code >> (d - 1 - j)) & 1;
                    let dv = deltas[alpha];
                    v *= if bit == 0 { 1.0 + dv } else { 1.0 - dv };
                }
                next[child_flat(d, level, flat, code)] = v;
            }
        }
        avgs = next;
    }
    let base = StepFunction::from_level_values(grid, m, &avgs)?;
    Weight::new(base)
}

/// Power weight `|x|^a`. In d=1 cell values are the exact cell averages of
/// `x^a` (closed-form integrals); in d >= 2 the radial weight is sampled at
/// cell centroids, which always stay away from the origin.
pub fn gen_power_weight(grid: GridSpec, a: f64) -> Result<Weight> {
    let d = grid.dim();
    let r = grid.resolution();
    if d == 1 {
        if a <= -1.0 {
            return Err(Error::PowerExponent(a));
        }
        let n = grid.value_count();
        let scale = (-(r as f64) * a).exp2();
        let values: Vec<f64> = (0..n)
            .map(|k| {
                let k = k as f64;
                if a == 0.0 {
                    1.0
                } else {
                    scale * ((k + 1.0).powf(a + 1.0) - k.powf(a + 1.0)) / (a + 1.0)
                }
            })
            .collect();
        Weight::new(StepFunction::from_values(grid, values)?)
    } else {
        let n = grid.value_count();
        let h = (-(r as f64)).exp2();
        let mut coords = vec![0u32; d as usize];
        let values: Vec<f64> = (0..n)
            .map(|flat| {
                crate::grid::coords_from_flat(d, r, flat, &mut coords);
                let norm_sq: f64 = coords
                    .iter()
                    .map(|&c| {
                        let x = (c as f64 + 0.5) * h;
                        x * x
                    })
                    .sum();
                norm_sq.sqrt().powf(a)
            })
            .collect();
        Weight::new(StepFunction::from_values(grid, values)?)
    }
}

/// Generator description as stored in config files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(rename = "M")]
    pub m: u32,
    #[serde(rename = "R")]
    pub r: u32,
    #[serde(default = "default_dim")]
    pub d: u32,
}

fn default_dim() -> u32 {
    1
}

/// Builds the weight described by a generator config. For the recursive
/// family a present `seed` selects seeded per-node draws with `delta` as the
/// bound, otherwise `delta` is used as a constant multiplier.
pub fn generate(cfg: &GeneratorConfig) -> Result<Weight> {
    let grid = GridSpec::new(cfg.d, cfg.m, cfg.r)?;
    match cfg.family.as_str() {
        "recursive" => {
            let delta = cfg
                .delta
                .ok_or_else(|| Error::InvalidConfig("recursive family requires \"delta\"".into()))?;
            let spec = match cfg.seed {
                Some(seed) => DeltaSpec::Seeded { seed, max: delta },
                None => DeltaSpec::Constant(delta),
            };
            gen_recursive_weight(grid, &spec, 1.0)
        }
        "power" => {
            let a = cfg
                .a
                .ok_or_else(|| Error::InvalidConfig("power family requires \"a\"".into()))?;
            gen_power_weight(grid, a)
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown weight family \"{}\"",
            other
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(m: u32, r: u32) -> GridSpec {
        GridSpec::new(1, m, r).unwrap()
    }

    #[test]
    fn a2_of_unit_weight() {
        let w = Weight::unit(grid1(2, 3));
        let a2 = w.a2_characteristic();
        assert_eq!(a2.value, 1.0);
        assert_eq!(a2.argmax, CellIndex::root(1));
    }

    #[test]
    fn a2_two_cell() {
        let g = grid1(1, 2);
        let base = StepFunction::from_level_values(g, 1, &[2.0, 1.0]).unwrap();
        let w = Weight::new(base).unwrap();
        // root: (3/2)(3/4) = 9/8; halves: 1 each.
        let a2 = w.a2_characteristic();
        assert!((a2.value - 9.0 / 8.0).abs() < 1e-15);
        assert_eq!(a2.argmax.level(), 0);
    }

    #[test]
    fn a2_scale_invariance() {
        let g = grid1(3, 5);
        let w = gen_recursive_weight(g, &DeltaSpec::Seeded { seed: 11, max: 0.6 }, 1.0).unwrap();
        for c in [0.25, 3.0, 117.0] {
            let scaled = Weight::new(w.base().scale(c)).unwrap();
            let (a, b) = (w.a2_characteristic().value, scaled.a2_characteristic().value);
            assert!((a - b).abs() < 1e-12 * a, "c={c}: {a} vs {b}");
        }
    }

    #[test]
    fn a2_at_least_one_and_constant_iff_one() {
        let g = grid1(3, 5);
        let w = gen_recursive_weight(g, &DeltaSpec::Seeded { seed: 5, max: 0.5 }, 2.0).unwrap();
        let a2 = w.a2_characteristic();
        assert!(a2.value > 1.0);
        for level in 0..=g.resolution() {
            for flat in 0..g.cell_count(level) {
                let v = w.average(level, flat) * w.inv_average(level, flat);
                assert!(v >= 1.0 - 1e-13, "Cauchy-Schwarz violated: {v}");
            }
        }
        let c = Weight::new(StepFunction::constant(g, 42.0)).unwrap();
        assert!((c.a2_characteristic().value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_nonpositive() {
        let g = grid1(1, 2);
        let f = StepFunction::from_level_values(g, 1, &[1.0, 0.0]).unwrap();
        assert!(matches!(Weight::new(f), Err(Error::NonPositiveWeight { .. })));
    }

    #[test]
    fn recursive_zero_delta_is_unit() {
        let g = grid1(3, 4);
        let w = gen_recursive_weight(g, &DeltaSpec::Constant(0.0), 1.0).unwrap();
        assert!(w.base().values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn recursive_single_split() {
        let g = grid1(1, 2);
        let w = gen_recursive_weight(g, &DeltaSpec::Constant(1.0 / 3.0), 1.5).unwrap();
        let vals = w.base().values();
        assert!((vals[0] - 2.0).abs() < 1e-15);
        assert!((vals[1] - 2.0).abs() < 1e-15);
        assert!((vals[2] - 1.0).abs() < 1e-15);
        assert!((vals[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn recursive_rejects_large_delta() {
        let g = grid1(1, 2);
        assert!(matches!(
            gen_recursive_weight(g, &DeltaSpec::Constant(1.0), 1.0),
            Err(Error::DeltaOutOfRange(_))
        ));
    }

    #[test]
    fn recursive_child_average_factors() {
        let delta = 0.4;
        let g = grid1(4, 6);
        let w = gen_recursive_weight(g, &DeltaSpec::Constant(delta), 1.0).unwrap();
        for level in 0..4u32 {
            for flat in 0..g.cell_count(level) {
                let parent = w.average(level, flat);
                let left = w.average(level + 1, 2 * flat);
                let right = w.average(level + 1, 2 * flat + 1);
                assert!((left - (1.0 + delta) * parent).abs() < 1e-13 * parent);
                assert!((right - (1.0 - delta) * parent).abs() < 1e-13 * parent);
            }
        }
    }

    #[test]
    fn recursive_node_factors_2d() {
        // In d=2 the first split is by coordinate 1: the averages over the two
        // two-cube halves of each cube must carry factors (1 +- delta).
        let delta = 0.3;
        let g = GridSpec::new(2, 2, 3).unwrap();
        let w = gen_recursive_weight(g, &DeltaSpec::Constant(delta), 1.0).unwrap();
        for flat in 0..g.cell_count(1) {
            let cube = CellIndex::from_flat(2, 1, flat);
            let parent = w.average(1, cube.flat());
            let kids = cube.children();
            let half1: f64 = kids[..2]
                .iter()
                .map(|c| w.average(2, c.flat()))
                .sum::<f64>()
                / 2.0;
            let half2: f64 = kids[2..]
                .iter()
                .map(|c| w.average(2, c.flat()))
                .sum::<f64>()
                / 2.0;
            assert!((half1 - (1.0 + delta) * parent).abs() < 1e-13);
            assert!((half2 - (1.0 - delta) * parent).abs() < 1e-13);
        }
    }

    #[test]
    fn recursive_a2_monotone_in_delta() {
        let g = grid1(4, 6);
        let mut last = 0.0;
        for delta in [0.0, 0.2, 0.4, 0.6, 0.8] {
            let w = gen_recursive_weight(g, &DeltaSpec::Constant(delta), 1.0).unwrap();
            let a2 = w.a2_characteristic().value;
            assert!(a2 >= last - 1e-12, "delta={delta}: {a2} < {last}");
            last = a2;
        }
    }

    #[test]
    fn power_zero_exponent_is_unit() {
        let w = gen_power_weight(grid1(2, 4), 0.0).unwrap();
        assert!(w.base().values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn power_linear_halves() {
        // a = 1: exact averages of x over [0,1/2) and [1/2,1) are 1/4 and 3/4.
        let g = grid1(1, 2);
        let w = gen_power_weight(g, 1.0).unwrap();
        let root = CellIndex::root(1);
        assert!((w.base().average_on(&root.left()).unwrap() - 0.25).abs() < 1e-15);
        assert!((w.base().average_on(&root.right()).unwrap() - 0.75).abs() < 1e-15);
        // cell averages are exact integrals: value on [k/4,(k+1)/4) is (2k+1)/8
        for (k, &v) in w.base().values().iter().enumerate() {
            assert!((v - (2.0 * k as f64 + 1.0) / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn power_rejects_nonintegrable() {
        assert!(matches!(
            gen_power_weight(grid1(1, 2), -1.0),
            Err(Error::PowerExponent(_))
        ));
    }

    #[test]
    fn power_a2_grows_with_exponent() {
        let g = grid1(6, 8);
        let mut last = 0.0;
        for a in [0.0, 0.5, 0.9] {
            let a2 = gen_power_weight(g, a).unwrap().a2_characteristic().value;
            assert!(a2 >= last, "a={a}: {a2} < {last}");
            last = a2;
        }
        assert!(last > 1.5);
    }

    #[test]
    fn power_2d_centroid_positive() {
        let g = GridSpec::new(2, 2, 3).unwrap();
        let w = gen_power_weight(g, -0.7).unwrap();
        assert!(w.base().min_value() > 0.0);
        assert!(w.a2_characteristic().value > 1.0);
    }

    #[test]
    fn companions_are_pointwise_powers() {
        let g = grid1(3, 5);
        let w = gen_power_weight(g, 0.6).unwrap();
        for i in 0..g.value_count() {
            let v = w.base().values()[i];
            assert!((w.inv().values()[i] * v - 1.0).abs() < 1e-15);
            let s = w.sqrt().values()[i];
            assert!((s * s - v).abs() < 1e-15 * v.max(1.0));
            assert!((w.inv_sqrt().values()[i] * s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn json_roundtrip_and_kind_check() {
        let g = grid1(2, 3);
        let w = gen_recursive_weight(g, &DeltaSpec::Seeded { seed: 3, max: 0.4 }, 1.0).unwrap();
        let back = Weight::from_json(&w.to_json(), 2).unwrap();
        assert_eq!(w.base(), back.base());

        let f = StepFunction::constant(g, 1.0);
        assert!(Weight::from_json(&f.to_json(), 2).is_err());

        let bad = r#"{"d":1,"R":3,"kind":"weight","values":[0.0,1,1,1,1,1,1,1]}"#;
        assert!(matches!(
            Weight::from_json(bad, 2),
            Err(Error::NonPositiveWeight { .. })
        ));
    }

    #[test]
    fn generator_config_dispatch() {
        let cfg: GeneratorConfig =
            serde_json::from_str(r#"{"family":"recursive","delta":0.5,"seed":9,"M":3,"R":5}"#)
                .unwrap();
        let w = generate(&cfg).unwrap();
        assert_eq!(w.grid().dim(), 1);
        assert!(w.a2_characteristic().value > 1.0);

        let cfg: GeneratorConfig =
            serde_json::from_str(r#"{"family":"power","a":0.5,"M":3,"R":5}"#).unwrap();
        assert!(generate(&cfg).is_ok());

        let cfg: GeneratorConfig =
            serde_json::from_str(r#"{"family":"gauss","delta":0.5,"M":3,"R":5}"#).unwrap();
        assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))));
    }
}
