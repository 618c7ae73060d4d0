//! Discrete fractional maximal operators, their cutoff variants, and the Riesz potential.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::grid::{DomainGrid, ScalarField, DIM};
use crate::numeric::{lattice_radius_sq, BallStencil, DoubleSum, Real};
use crate::{Error, Result};

/// Strictly increasing ball radii, all at least the grid spacing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RadiusSet<T> {
    radii: Vec<T>,
}

impl<T: Real> RadiusSet<T> {
    pub fn new(radii: Vec<T>, h: T) -> Result<Self> {
        if radii.is_empty() {
            return Err(Error::InvalidArgument("radius set is empty".into()));
        }
        if radii[0] < h {
            return Err(Error::RadiusTooSmall { radius: radii[0].to_f64_lossy(), h: h.to_f64_lossy() });
        }
        if radii.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("radii must be strictly increasing".into()));
        }
        Ok(Self { radii })
    }

    /// `{h, 2h, …, ⌈diam/h⌉·h}`.
    pub fn default_for(grid: &DomainGrid<T>) -> Self {
        let h = grid.h();
        let kmax = (grid.diam() / h - T::lit(1e-9)).ceil().to_usize().unwrap_or(1).max(1);
        Self { radii: (1..=kmax).map(|k| T::from_usize_exact(k) * h).collect() }
    }

    /// `{h, 2h, …}` up to and including `max`.
    pub fn up_to(grid: &DomainGrid<T>, max: T) -> Result<Self> {
        let h = grid.h();
        let kmax = (max / h + T::lit(1e-9)).floor().to_usize().unwrap_or(0);
        Self::new((1..=kmax).map(|k| T::from_usize_exact(k) * h).collect(), h)
    }

    pub fn radii(&self) -> &[T] {
        &self.radii
    }
    pub fn min(&self) -> T {
        self.radii[0]
    }
    pub fn max(&self) -> T {
        *self.radii.last().expect("nonempty")
    }
    pub fn len(&self) -> usize {
        self.radii.len()
    }
    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }
}

/// Pointwise supremum over a radius set, with the maximizing radius per cell.
#[derive(Clone, Debug)]
pub struct MaximalResult<T> {
    pub field: ScalarField<T>,
    pub alpha: T,
    pub radii: RadiusSet<T>,
    /// Index into `radii` of the first maximizing radius; `None` when no radius was admissible.
    pub argmax: Vec<Option<usize>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MaximalMeta {
    pub alpha: f64,
    pub radii: Vec<f64>,
    pub argmax_radius_histogram: Vec<(f64, usize)>,
    pub max_value: f64,
}

impl<T: Real> MaximalResult<T> {
    pub fn meta(&self) -> MaximalMeta {
        let radii: Vec<f64> = self.radii.radii().iter().map(|r| r.to_f64_lossy()).collect();
        let mut hist = vec![0usize; radii.len()];
        for a in self.argmax.iter().flatten() {
            hist[*a] += 1;
        }
        MaximalMeta {
            alpha: self.alpha.to_f64_lossy(),
            argmax_radius_histogram: radii.iter().copied().zip(hist).filter(|(_, c)| *c > 0).collect(),
            radii,
            max_value: self.field.max_abs().to_f64_lossy(),
        }
    }
}

/// Row prefix sums of |f| carried in double-word precision, for O(rows) ball sums.
pub struct BallSummer<T> {
    grid: Arc<DomainGrid<T>>,
    prefix: Vec<DoubleSum<T>>,
    total: DoubleSum<T>,
    /// Bounding box of the support `(i0, i1, j0, j1)`, `None` for the zero field.
    support: Option<(usize, usize, usize, usize)>,
}

impl<T: Real> BallSummer<T> {
    pub fn new(f: &ScalarField<T>) -> Self {
        let grid = f.grid().clone();
        let (nx, ny) = grid.dims();
        let mut prefix = Vec::with_capacity((nx + 1) * ny);
        let mut total = DoubleSum::zero();
        let mut support: Option<(usize, usize, usize, usize)> = None;
        for j in 0..ny {
            let mut acc = DoubleSum::zero();
            prefix.push(acc);
            for i in 0..nx {
                let v = f.get(grid.index(i, j)).abs();
                if v != T::zero() {
                    support = Some(match support {
                        None => (i, i, j, j),
                        Some((a, b, c, d)) => (a.min(i), b.max(i), c.min(j), d.max(j)),
                    });
                }
                acc = acc.add_scalar(v);
                prefix.push(acc);
            }
            total = total.add(acc);
        }
        Self { grid, prefix, total, support }
    }

    fn row_sum(&self, j: usize, a: usize, b: usize) -> DoubleSum<T> {
        let base = j * (self.grid.nx() + 1);
        self.prefix[base + b + 1].sub(self.prefix[base + a])
    }

    fn covers_support(&self, ci: usize, cj: usize, st: &BallStencil<T>) -> bool {
        let Some((i0, i1, j0, j1)) = self.support else { return true };
        let dj = cj.abs_diff(j0).max(cj.abs_diff(j1));
        if dj > st.reach() {
            return false;
        }
        let di = ci.abs_diff(i0).max(ci.abs_diff(i1));
        st.half_widths[dj] >= di
    }

    /// Σ|f| over the lattice ball drawn by `st` around cell `center`.
    pub fn sum(&self, center: usize, st: &BallStencil<T>) -> DoubleSum<T> {
        let (ci, cj) = self.grid.ij(center);
        self.sum_at(ci, cj, st)
    }

    fn sum_at(&self, ci: usize, cj: usize, st: &BallStencil<T>) -> DoubleSum<T> {
        let Some((si0, si1, sj0, sj1)) = self.support else { return DoubleSum::zero() };
        if self.covers_support(ci, cj, st) {
            return self.total;
        }
        let reach = st.reach();
        let j0 = cj.saturating_sub(reach).max(sj0);
        let j1 = (cj + reach).min(sj1);
        let mut acc = DoubleSum::zero();
        if j0 > j1 {
            return acc;
        }
        for j in j0..=j1 {
            let w = st.half_widths[cj.abs_diff(j)];
            let a = ci.saturating_sub(w).max(si0);
            let b = (ci + w).min(si1);
            if a <= b {
                acc = acc.add(self.row_sum(j, a, b));
            }
        }
        acc
    }

    /// Ball average of |f| (divisor counts all lattice points of the ball).
    pub fn mean(&self, center: usize, st: &BallStencil<T>) -> T {
        self.sum(center, st).div_count(st.count)
    }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    let n = T::from_usize_exact(DIM);
    if !(alpha >= T::zero() && alpha <= n) {
        return Err(Error::AlphaRange(alpha.to_f64_lossy()));
    }
    Ok(())
}

/// Stencils and `ρ^α` weights for a list of radii.
pub(crate) fn stencils<T: Real>(radii: &[T], h: T, alpha: T) -> Vec<(BallStencil<T>, T)> {
    radii
        .iter()
        .map(|&r| {
            let st = BallStencil::new(lattice_radius_sq(r, h)).expect("radius at least h");
            (st, r.powf(alpha))
        })
        .collect()
}

/// Shared sup loop: `active` selects which radii of `radii` participate.
fn sup_over<T: Real>(f: &ScalarField<T>, alpha: T, radii: &RadiusSet<T>, active: impl Fn(T) -> bool + Sync) -> MaximalResult<T> {
    let grid = f.grid().clone();
    let summer = BallSummer::new(f);
    let st = stencils(radii.radii(), grid.h(), alpha);
    let use_r: Vec<bool> = radii.radii().iter().map(|&r| active(r)).collect();
    let out: Vec<(T, Option<usize>)> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            if !grid.in_mask(k) {
                return (T::zero(), None);
            }
            let (ci, cj) = grid.ij(k);
            let mut best = T::zero();
            let mut arg = None;
            for (idx, (s, w)) in st.iter().enumerate() {
                if !use_r[idx] {
                    continue;
                }
                let v = *w * summer.sum_at(ci, cj, s).div_count(s.count);
                if arg.is_none() || v > best {
                    best = v;
                    arg = Some(idx);
                }
            }
            (best, arg)
        })
        .collect();
    let (values, argmax): (Vec<T>, Vec<Option<usize>>) = out.into_iter().unzip();
    MaximalResult {
        field: ScalarField::from_values(grid, values).expect("finite maximal values"),
        alpha,
        radii: radii.clone(),
        argmax,
    }
}

/// M_α f(x) = max_{ρ ∈ R} ρ^α ⨍_{B_ρ(x)} |f| at every cell of Ω (f zero-extended).
pub fn frac_maximal<T: Real>(f: &ScalarField<T>, alpha: T, radii: &RadiusSet<T>) -> Result<MaximalResult<T>> {
    check_alpha(alpha)?;
    Ok(sup_over(f, alpha, radii, |_| true))
}

fn check_cutoff<T: Real>(r: T, radii: &RadiusSet<T>) -> Result<()> {
    if !(r >= radii.min() && r <= radii.max()) {
        return Err(Error::InvalidArgument(format!(
            "cutoff radius {r} outside [{}, {}]",
            radii.min(),
            radii.max()
        )));
    }
    Ok(())
}

/// Supremum over radii `ρ < r`; an empty admissible set yields 0.
pub fn cutoff_below<T: Real>(f: &ScalarField<T>, alpha: T, r: T, radii: &RadiusSet<T>) -> Result<MaximalResult<T>> {
    check_alpha(alpha)?;
    check_cutoff(r, radii)?;
    Ok(sup_over(f, alpha, radii, |rho| rho < r))
}

/// Supremum over radii `ρ ≥ r`.
pub fn cutoff_above<T: Real>(f: &ScalarField<T>, alpha: T, r: T, radii: &RadiusSet<T>) -> Result<MaximalResult<T>> {
    check_alpha(alpha)?;
    check_cutoff(r, radii)?;
    Ok(sup_over(f, alpha, radii, |rho| rho >= r))
}

/// ∫ over a disk of area h² of |z|^{α−n}: `2π (h/√π)^α / α`.
pub fn riesz_self_constant<T: Real>(h: T, alpha: T) -> T {
    let r = h / T::PI().sqrt();
    T::lit(2.0) * T::PI() * r.powf(alpha) / alpha
}

/// I_α f(x) = Σ_{y≠x} f(y) h² |x−y|^{α−n} + f(x)·c_self.
pub fn riesz_potential<T: Real>(f: &ScalarField<T>, alpha: T) -> Result<ScalarField<T>> {
    let n = T::from_usize_exact(DIM);
    if !(alpha > T::zero() && alpha < n) {
        return Err(Error::AlphaRange(alpha.to_f64_lossy()));
    }
    if f.values().iter().any(|&v| v < T::zero()) {
        return Err(Error::InvalidArgument("riesz potential expects a nonnegative field".into()));
    }
    let grid = f.grid().clone();
    let (nx, ny) = grid.dims();
    let h = grid.h();
    let hh = grid.cell_measure();
    let mut kernel = vec![T::zero(); nx * ny];
    for dj in 0..ny {
        for di in 0..nx {
            if di + dj > 0 {
                let d = h * T::from_usize_exact(di * di + dj * dj).sqrt();
                kernel[dj * nx + di] = hh * d.powf(alpha - n);
            }
        }
    }
    let c_self = riesz_self_constant(h, alpha);
    let support: Vec<(usize, usize, T)> = (0..grid.len())
        .filter(|&k| f.get(k) != T::zero())
        .map(|k| {
            let (i, j) = grid.ij(k);
            (i, j, f.get(k))
        })
        .collect();
    let values: Vec<T> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            if !grid.in_mask(k) {
                return T::zero();
            }
            let (ci, cj) = grid.ij(k);
            let mut acc = DoubleSum::zero();
            for &(i, j, v) in &support {
                let w = if i == ci && j == cj { c_self } else { kernel[cj.abs_diff(j) * nx + ci.abs_diff(i)] };
                acc = acc.add_scalar(v * w);
            }
            acc.value()
        })
        .collect();
    ScalarField::from_values(grid, values)
}

/// The dimensional constant `2^{α−n} |B₁|^{(n−α)/n}` of the pointwise bound of M_α by I_α.
pub fn riesz_domination_constant<T: Real>(alpha: T) -> T {
    let n = T::from_usize_exact(DIM);
    let unit_ball = T::PI();
    T::lit(2.0).powf(alpha - n) * unit_ball.powf((n - alpha) / n)
}
