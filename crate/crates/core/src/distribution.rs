//! Distribution functions of fields and of their fractional maximal functions.

use serde::Serialize;

use crate::grid::{ScalarField, DIM};
use crate::maximal::{frac_maximal, RadiusSet};
use crate::numeric::Real;
use crate::{Error, Result};

/// Strictly increasing positive levels λ.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelGrid<T> {
    lambdas: Vec<T>,
}

impl<T: Real> LevelGrid<T> {
    pub fn new(lambdas: Vec<T>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::InvalidArgument("level grid is empty".into()));
        }
        if !(lambdas[0] > T::zero()) || lambdas.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("levels must be positive and finite".into()));
        }
        if lambdas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("levels must be strictly increasing".into()));
        }
        Ok(Self { lambdas })
    }

    /// `n ≥ 2` logarithmically spaced levels from `lo` to `hi`.
    pub fn log_spaced(lo: T, hi: T, n: usize) -> Result<Self> {
        if n < 2 || !(lo > T::zero()) || !(hi > lo) {
            return Err(Error::InvalidArgument(format!("bad log grid [{lo}, {hi}] with {n} points")));
        }
        let (a, b) = (lo.ln(), hi.ln());
        let last = T::from_usize_exact(n - 1);
        let mut v: Vec<T> = (0..n).map(|k| (a + (b - a) * T::from_usize_exact(k) / last).exp()).collect();
        v[0] = lo;
        v[n - 1] = hi;
        Self::new(v)
    }

    /// 200 log-spaced points over `[1e-4·m, 10·m]`; `m = 0` falls back to `m = 1`.
    pub fn default_for_max(m: T) -> Self {
        let m = if m > T::zero() { m } else { T::one() };
        Self::log_spaced(T::lit(1e-4) * m, T::lit(10.0) * m, 200).expect("valid default grid")
    }

    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::new(self.lambdas.iter().map(|&l| l * c).collect())
    }

    pub fn lambdas(&self) -> &[T] {
        &self.lambdas
    }
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }
    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

/// Sampled map λ ↦ |{|f| > λ}|.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelProfile<T> {
    pub levels: LevelGrid<T>,
    pub measures: Vec<T>,
    pub tag: String,
}

impl<T: Real> LevelProfile<T> {
    pub fn lambdas(&self) -> &[T] {
        self.levels.lambdas()
    }

    pub fn is_nonincreasing(&self) -> bool {
        self.measures.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Sorted absolute values of a field over a set of cells, for fast level counts.
#[derive(Clone, Debug)]
pub struct SortedLevels<T> {
    sorted: Vec<T>,
    cell: T,
}

impl<T: Real> SortedLevels<T> {
    pub fn new(f: &ScalarField<T>, cells: &[usize]) -> Self {
        let mut sorted: Vec<T> = cells.iter().map(|&k| f.get(k).abs()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        Self { sorted, cell: f.grid().cell_measure() }
    }

    /// Number of cells with |f| > λ.
    pub fn count_above(&self, lambda: T) -> usize {
        self.sorted.len() - self.sorted.partition_point(|&v| v <= lambda)
    }

    /// Measure of {|f| > λ}.
    pub fn measure_above(&self, lambda: T) -> T {
        T::from_usize_exact(self.count_above(lambda)) * self.cell
    }

    pub fn values(&self) -> &[T] {
        &self.sorted
    }

    pub fn cell_measure(&self) -> T {
        self.cell
    }

    pub fn profile(&self, levels: &LevelGrid<T>, tag: impl Into<String>) -> LevelProfile<T> {
        LevelProfile {
            measures: levels.lambdas().iter().map(|&l| self.measure_above(l)).collect(),
            levels: levels.clone(),
            tag: tag.into(),
        }
    }
}

/// d_f(Ω; λ_k) = h²·#{x ∈ Ω : |f(x)| > λ_k}.
pub fn dist_fn<T: Real>(f: &ScalarField<T>, levels: &LevelGrid<T>) -> LevelProfile<T> {
    SortedLevels::new(f, &f.grid().cells()).profile(levels, "d_f")
}

/// Distribution of `f` restricted to `cells`.
pub fn dist_fn_on<T: Real>(f: &ScalarField<T>, cells: &[usize], levels: &LevelGrid<T>) -> LevelProfile<T> {
    SortedLevels::new(f, cells).profile(levels, "d_f")
}

/// d_G^α(Ω; λ) = d_{M_α G}(Ω; λ).
pub fn fmd<T: Real>(g: &ScalarField<T>, alpha: T, radii: &RadiusSet<T>, levels: &LevelGrid<T>) -> Result<LevelProfile<T>> {
    if g.values().iter().any(|&v| v < T::zero()) {
        return Err(Error::InvalidArgument("fractional-maximal distribution expects G ≥ 0".into()));
    }
    let m = frac_maximal(g, alpha, radii)?;
    let mut p = dist_fn(&m.field, levels);
    p.tag = format!("d_G^alpha (alpha = {alpha})");
    Ok(p)
}

#[derive(Clone, Debug, Serialize)]
pub struct WeakBound<T> {
    /// sup over levels of d_G^α(ℝⁿ; λ)·(λ/‖G‖_s)^{ns/(n−αs)}.
    pub constant: T,
    pub norm_s: T,
    pub exponent: T,
    pub padding_factor: usize,
    pub maximizing_level: T,
}

/// Smallest constant C making the weak-type bound
/// d_G^α(ℝⁿ; λ) ≤ C (‖G‖_s / λ)^{ns/(n−αs)} hold on the sampled levels.
///
/// ℝⁿ is realized by a lattice padded threefold in each direction.
pub fn weak_bound_constant<T: Real>(
    g: &ScalarField<T>,
    s: T,
    alpha: T,
    levels: Option<&LevelGrid<T>>,
) -> Result<WeakBound<T>> {
    let n = T::from_usize_exact(DIM);
    if !(s >= T::one()) {
        return Err(Error::InvalidArgument(format!("exponent s = {s} must be at least 1")));
    }
    if !(alpha >= T::zero() && alpha * s < n) {
        return Err(Error::AlphaRange(alpha.to_f64_lossy()));
    }
    let norm_s = g.lq_norm(s);
    if !(norm_s > T::zero()) {
        return Err(Error::ZeroNorm("G vanishes identically".into()));
    }
    const PAD: usize = 3;
    let (big, map) = g.grid().padded_full(PAD)?;
    let big = std::sync::Arc::new(big);
    let mut vals = vec![T::zero(); big.len()];
    for (k, &kk) in map.iter().enumerate() {
        vals[kk] = g.get(k).abs();
    }
    let gb = ScalarField::from_values(big.clone(), vals)?;
    let m = frac_maximal(&gb, alpha, &RadiusSet::default_for(&big))?;
    let default;
    let levels = match levels {
        Some(l) => l,
        None => {
            default = LevelGrid::default_for_max(m.field.max_abs());
            &default
        }
    };
    let prof = dist_fn(&m.field, levels);
    let exponent = n * s / (n - alpha * s);
    let mut best = T::zero();
    let mut arg = levels.lambdas()[0];
    for (&l, &d) in prof.lambdas().iter().zip(&prof.measures) {
        let c = d * (l / norm_s).powf(exponent);
        if c > best {
            best = c;
            arg = l;
        }
    }
    Ok(WeakBound { constant: best, norm_s, exponent, padding_factor: PAD, maximizing_level: arg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DomainGrid, ShapeTag};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn sq(n: usize) -> Arc<DomainGrid<f64>> {
        Arc::new(DomainGrid::new(ShapeTag::Square, n, n, 1.0 / n as f64).unwrap())
    }

    #[test]
    fn level_grid_validation() {
        assert!(LevelGrid::<f64>::new(vec![]).is_err());
        assert!(LevelGrid::new(vec![0.0, 1.0]).is_err());
        assert!(LevelGrid::new(vec![1.0, 1.0]).is_err());
        let l = LevelGrid::default_for_max(2.0f64);
        assert_eq!(l.len(), 200);
        assert!((l.lambdas()[0] - 2e-4).abs() < 1e-18 && l.lambdas()[199] == 20.0);
    }

    #[test]
    fn constant_and_zero_fields() {
        let g = sq(8);
        let c = ScalarField::constant(g.clone(), 0.5);
        let l = LevelGrid::new(vec![0.1, 0.49, 0.5, 0.7]).unwrap();
        let p = dist_fn(&c, &l);
        assert_eq!(p.measures, vec![1.0, 1.0, 0.0, 0.0]);
        let z = dist_fn(&ScalarField::zeros(g), &l);
        assert!(z.measures.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn fmd_of_zero_and_errors() {
        let g = sq(8);
        let r = RadiusSet::default_for(&g);
        let l = LevelGrid::default_for_max(1.0);
        let p = fmd(&ScalarField::zeros(g.clone()), 0.5, &r, &l).unwrap();
        assert!(p.measures.iter().all(|&m| m == 0.0));
        let neg = ScalarField::constant(g.clone(), -1.0);
        assert!(fmd(&neg, 0.5, &r, &l).is_err());
        assert!(matches!(weak_bound_constant(&ScalarField::zeros(g.clone()), 1.0, 0.0, None), Err(Error::ZeroNorm(_))));
        let one = ScalarField::constant(g, 1.0);
        assert!(weak_bound_constant(&one, 1.0, 2.0, None).is_err());
        assert!(weak_bound_constant(&one, 0.5, 0.0, None).is_err());
    }

    #[test]
    fn weak_bound_for_indicator() {
        let c32 = weak_bound_constant(&ScalarField::constant(sq(32), 1.0), 1.0, 0.0, None).unwrap();
        assert!(c32.constant > 0.0 && c32.constant <= 10.0, "{}", c32.constant);
        let c64 = weak_bound_constant(&ScalarField::constant(sq(64), 1.0), 1.0, 0.0, None).unwrap();
        assert!((c64.constant / c32.constant - 1.0).abs() < 0.25);
    }

    #[test]
    fn layer_cake_identity() {
        let g = sq(48);
        let f = ScalarField::from_fn(g.clone(), |x, y| (3.0 * x).sin().abs() + y * y);
        let m = f.max_abs();
        let n = 4000;
        let lambdas: Vec<f64> = (1..=n).map(|k| m * k as f64 / n as f64).collect();
        let p = dist_fn(&f, &LevelGrid::new(lambdas).unwrap());
        let d0 = g.measure();
        let mut integral = 0.5 * (d0 + p.measures[0]) * p.lambdas()[0];
        for k in 1..n {
            integral += 0.5 * (p.measures[k - 1] + p.measures[k]) * (p.lambdas()[k] - p.lambdas()[k - 1]);
        }
        let direct = f.integral();
        assert!((integral / direct - 1.0).abs() < 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn profiles_match_counting(vals in prop::collection::vec(-2.0f64..2.0, 100), lams in prop::collection::vec(0.001f64..2.5, 1..20)) {
            let g = sq(10);
            let f = ScalarField::from_values(g.clone(), vals.clone()).unwrap();
            let mut lams = lams;
            lams.sort_by(|a, b| a.partial_cmp(b).unwrap());
            lams.dedup();
            let l = LevelGrid::new(lams.clone()).unwrap();
            let p = dist_fn(&f, &l);
            prop_assert!(p.is_nonincreasing());
            for (k, &lam) in lams.iter().enumerate() {
                let count = vals.iter().filter(|v| v.abs() > lam).count();
                prop_assert_eq!(p.measures[k], count as f64 * g.cell_measure());
                prop_assert!(p.measures[k] <= g.measure());
            }
            let above = LevelGrid::new(vec![f.max_abs().max(1e-9), f.max_abs().max(1e-9) * 2.0]).unwrap();
            prop_assert!(dist_fn(&f, &above).measures.iter().all(|&m| m == 0.0));
        }

        #[test]
        fn fmd_scaling(vals in prop::collection::vec(0.0f64..2.0, 100), e in -3i32..4, alpha in 0.0f64..2.0) {
            let g = sq(10);
            let f = ScalarField::from_values(g.clone(), vals).unwrap();
            let c = 2f64.powi(e);
            let r = RadiusSet::default_for(&g);
            let l = LevelGrid::default_for_max(1.0);
            let a = fmd(&f, alpha, &r, &l).unwrap();
            let b = fmd(&f.scale(c), alpha, &r, &l.scaled(c).unwrap()).unwrap();
            prop_assert_eq!(a.measures, b.measures);
        }
    }
}
