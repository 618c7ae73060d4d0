//! Uniform 2-D lattice domains, sampled fields, and basic calculus on them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numeric::{lattice_radius_sq, BallStencil, DoubleSum, Real};
use crate::{Error, Result};

/// Spatial dimension of every domain in this crate.
pub const DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeTag {
    Square,
    Disk,
    Lshape,
    Annulus,
    /// A cell subset of another domain, used for local problems.
    Subregion,
}

impl fmt::Display for ShapeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeTag::Square => "square",
            ShapeTag::Disk => "disk",
            ShapeTag::Lshape => "lshape",
            ShapeTag::Annulus => "annulus",
            ShapeTag::Subregion => "subregion",
        };
        f.write_str(s)
    }
}

impl FromStr for ShapeTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "square" => Ok(ShapeTag::Square),
            "disk" => Ok(ShapeTag::Disk),
            "lshape" | "l-shape" => Ok(ShapeTag::Lshape),
            "annulus" => Ok(ShapeTag::Annulus),
            other => Err(Error::Domain(format!("unknown shape tag `{other}`"))),
        }
    }
}

/// Lattice of `nx × ny` square cells of side `h`; cell `(i, j)` has index `j·nx + i`
/// and center `(x0 + (i+½)h, y0 + (j+½)h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainGrid<T> {
    nx: usize,
    ny: usize,
    h: T,
    origin: (T, T),
    mask: Vec<bool>,
    boundary: Vec<bool>,
    shape: ShapeTag,
    n_mask: usize,
}

/// Header describing a grid, used by serializers.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridHeader {
    pub dims: (usize, usize),
    pub h: f64,
    pub origin: (f64, f64),
    pub shape_tag: ShapeTag,
}

impl<T: Real> DomainGrid<T> {
    /// Builds one of the model domains.
    ///
    /// `square` and `lshape` sit on `[0, nx·h] × [0, ny·h]` (the L-shape drops the
    /// upper-right quadrant). `disk` and `annulus` are centered at the origin with
    /// outer radius `min(nx, ny)·h/2`; the annulus inner radius is a quarter of it.
    pub fn new(shape: ShapeTag, nx: usize, ny: usize, h: T) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::Domain(format!("dims ({nx}, {ny}) must both be at least 4")));
        }
        if !(h > T::zero()) || !h.is_finite() {
            return Err(Error::Domain(format!("spacing h = {h} must be positive")));
        }
        let half = T::lit(0.5);
        let (origin, mask): ((T, T), Vec<bool>) = match shape {
            ShapeTag::Square => ((T::zero(), T::zero()), vec![true; nx * ny]),
            ShapeTag::Lshape => {
                let mut m = vec![true; nx * ny];
                for j in ny / 2..ny {
                    for i in nx / 2..nx {
                        m[j * nx + i] = false;
                    }
                }
                ((T::zero(), T::zero()), m)
            }
            ShapeTag::Disk | ShapeTag::Annulus => {
                let origin = (
                    -T::from_usize_exact(nx) * h * half,
                    -T::from_usize_exact(ny) * h * half,
                );
                let outer = T::from_usize_exact(nx.min(ny)) * h * half;
                let inner = if shape == ShapeTag::Annulus { outer * T::lit(0.25) } else { T::zero() };
                let mut m = vec![false; nx * ny];
                for j in 0..ny {
                    for i in 0..nx {
                        let x = origin.0 + (T::from_usize_exact(i) + half) * h;
                        let y = origin.1 + (T::from_usize_exact(j) + half) * h;
                        let r2 = x * x + y * y;
                        m[j * nx + i] = r2 < outer * outer && r2 >= inner * inner;
                    }
                }
                (origin, m)
            }
            ShapeTag::Subregion => {
                return Err(Error::Domain("subregion grids are built with `restrict`".into()))
            }
        };
        Self::from_mask(shape, nx, ny, h, origin, mask)
    }

    /// Builds a grid from an explicit membership mask.
    pub fn from_mask(
        shape: ShapeTag,
        nx: usize,
        ny: usize,
        h: T,
        origin: (T, T),
        mask: Vec<bool>,
    ) -> Result<Self> {
        if mask.len() != nx * ny {
            return Err(Error::Domain(format!("mask length {} != {nx}·{ny}", mask.len())));
        }
        let n_mask = mask.iter().filter(|&&m| m).count();
        if n_mask == 0 {
            return Err(Error::Domain("domain has no cells".into()));
        }
        let mut boundary = vec![false; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                if !mask[k] {
                    continue;
                }
                let edge = i == 0 || j == 0 || i + 1 == nx || j + 1 == ny;
                boundary[k] = edge
                    || !mask[k - 1]
                    || !mask[k + 1]
                    || !mask[k - nx]
                    || !mask[k + nx];
            }
        }
        Ok(Self { nx, ny, h, origin, mask, boundary, shape, n_mask })
    }

    /// Same lattice with Ω replaced by `cells ⊆ Ω`; boundary flags are recomputed.
    pub fn restrict(&self, cells: &[usize]) -> Result<Self> {
        let mut mask = vec![false; self.len()];
        for &k in cells {
            if k >= self.len() || !self.mask[k] {
                return Err(Error::Domain(format!("cell {k} is not in the domain")));
            }
            mask[k] = true;
        }
        Self::from_mask(ShapeTag::Subregion, self.nx, self.ny, self.h, self.origin, mask)
    }

    /// Same spacing, lattice enlarged by `factor` in each direction and centered on
    /// the original, with every lattice cell in the mask.
    pub fn padded_full(&self, factor: usize) -> Result<(Self, Vec<usize>)> {
        let factor = factor.max(1);
        let (nx, ny) = (self.nx * factor, self.ny * factor);
        let (ox, oy) = ((nx - self.nx) / 2, (ny - self.ny) / 2);
        let origin = (
            self.origin.0 - T::from_usize_exact(ox) * self.h,
            self.origin.1 - T::from_usize_exact(oy) * self.h,
        );
        let g = Self::from_mask(ShapeTag::Square, nx, ny, self.h, origin, vec![true; nx * ny])?;
        let map = (0..self.len())
            .map(|k| {
                let (i, j) = self.ij(k);
                (j + oy) * nx + i + ox
            })
            .collect();
        Ok((g, map))
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn h(&self) -> T {
        self.h
    }
    pub fn origin(&self) -> (T, T) {
        self.origin
    }
    pub fn shape(&self) -> ShapeTag {
        self.shape
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn boundary(&self) -> &[bool] {
        &self.boundary
    }
    pub fn in_mask(&self, k: usize) -> bool {
        self.mask[k]
    }
    pub fn is_boundary(&self, k: usize) -> bool {
        self.boundary[k]
    }
    pub fn cell_measure(&self) -> T {
        self.h * self.h
    }
    pub fn mask_count(&self) -> usize {
        self.n_mask
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            dims: (self.nx, self.ny),
            h: self.h.to_f64_lossy(),
            origin: (self.origin.0.to_f64_lossy(), self.origin.1.to_f64_lossy()),
            shape_tag: self.shape,
        }
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn center(&self, k: usize) -> (T, T) {
        let (i, j) = self.ij(k);
        let half = T::lit(0.5);
        (
            self.origin.0 + (T::from_usize_exact(i) + half) * self.h,
            self.origin.1 + (T::from_usize_exact(j) + half) * self.h,
        )
    }

    /// Indices of all mask cells in lattice order.
    pub fn cells(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.mask[k]).collect()
    }

    pub fn boundary_cells(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.boundary[k]).collect()
    }

    pub fn interior_cells(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.mask[k] && !self.boundary[k]).collect()
    }

    /// |Ω| as the number of mask cells times h².
    pub fn measure(&self) -> T {
        T::from_usize_exact(self.n_mask) * self.cell_measure()
    }

    /// Diameter of the union of the closed mask cells.
    pub fn diam(&self) -> T {
        let mut ext: Vec<(usize, usize)> = Vec::new();
        for j in 0..self.ny {
            let row = &self.mask[j * self.nx..(j + 1) * self.nx];
            if let (Some(a), Some(b)) = (row.iter().position(|&m| m), row.iter().rposition(|&m| m)) {
                ext.push((a, j));
                if b != a {
                    ext.push((b, j));
                }
            }
        }
        let mut best = 0usize;
        for (p, &(i1, j1)) in ext.iter().enumerate() {
            for &(i2, j2) in &ext[p..] {
                let dx = i1.abs_diff(i2) + 1;
                let dy = j1.abs_diff(j2) + 1;
                best = best.max(dx * dx + dy * dy);
            }
        }
        T::from_usize_exact(best).sqrt() * self.h
    }

    /// Cells of the surface ball Ω_ρ(center): mask cells whose centers lie in the
    /// open ball of radius `rho` around the center of cell `center`.
    pub fn ball_cells(&self, center: usize, rho: T) -> Vec<usize> {
        let r2 = lattice_radius_sq(rho, self.h);
        let Some(st) = BallStencil::new(r2) else { return Vec::new() };
        self.stencil_cells(center, &st, true)
    }

    /// Lattice cells (inside or outside Ω) covered by a stencil around `center`.
    pub(crate) fn stencil_cells(&self, center: usize, st: &BallStencil<T>, only_mask: bool) -> Vec<usize> {
        let (ci, cj) = self.ij(center);
        let mut out = Vec::new();
        let reach = st.reach();
        let j0 = cj.saturating_sub(reach);
        let j1 = (cj + reach).min(self.ny - 1);
        for j in j0..=j1 {
            let w = st.half_widths[cj.abs_diff(j)];
            let i0 = ci.saturating_sub(w);
            let i1 = (ci + w).min(self.nx - 1);
            for i in i0..=i1 {
                let k = self.index(i, j);
                if !only_mask || self.mask[k] {
                    out.push(k);
                }
            }
        }
        out
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if self.nx != other.nx || self.ny != other.ny || self.h != other.h || self.origin != other.origin {
            return Err(Error::InvalidArgument("fields live on different lattices".into()));
        }
        Ok(())
    }
}

/// One real value per lattice cell; cells outside Ω hold exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<T> {
    grid: Arc<DomainGrid<T>>,
    values: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn zeros(grid: Arc<DomainGrid<T>>) -> Self {
        let n = grid.len();
        Self { grid, values: vec![T::zero(); n] }
    }

    /// Wraps raw values; entries outside the mask are forced to zero.
    pub fn from_values(grid: Arc<DomainGrid<T>>, mut values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        for (k, v) in values.iter_mut().enumerate() {
            if !grid.in_mask(k) {
                *v = T::zero();
            } else if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite value at cell {k}")));
            }
        }
        Ok(Self { grid, values })
    }

    /// Samples `f(x, y)` at mask cell centers.
    pub fn from_fn(grid: Arc<DomainGrid<T>>, f: impl Fn(T, T) -> T) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                if grid.in_mask(k) {
                    let (x, y) = grid.center(k);
                    f(x, y)
                } else {
                    T::zero()
                }
            })
            .collect();
        Self { grid, values }
    }

    pub fn constant(grid: Arc<DomainGrid<T>>, c: T) -> Self {
        Self::from_fn(grid, |_, _| c)
    }

    pub fn grid(&self) -> &Arc<DomainGrid<T>> {
        &self.grid
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn into_values(self) -> Vec<T> {
        self.values
    }
    #[inline]
    pub fn get(&self, k: usize) -> T {
        self.values[k]
    }

    /// Cellwise map on mask cells (outside stays zero).
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| if self.grid.in_mask(k) { f(v) } else { T::zero() })
            .collect();
        Self { grid: self.grid.clone(), values }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        let values = (0..self.values.len())
            .map(|k| if self.grid.in_mask(k) { f(self.values[k], other.values[k]) } else { T::zero() })
            .collect();
        Ok(Self { grid: self.grid.clone(), values })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    /// Same values on another grid over the same lattice (e.g. a restricted one).
    pub fn with_grid(&self, grid: Arc<DomainGrid<T>>) -> Result<Self> {
        self.grid.check_same(&grid)?;
        Self::from_values(grid, self.values.clone())
    }

    /// Zero outside `cells`.
    pub fn restricted_to(&self, cells: &[usize]) -> Self {
        let mut values = vec![T::zero(); self.values.len()];
        for &k in cells {
            values[k] = self.values[k];
        }
        Self { grid: self.grid.clone(), values }
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// h² Σ_Ω f.
    pub fn integral(&self) -> T {
        let s = self.values.iter().fold(DoubleSum::zero(), |s, &v| s.add_scalar(v));
        s.value() * self.grid.cell_measure()
    }

    /// (h² Σ_Ω |f|^q)^{1/q}.
    pub fn lq_norm(&self, q: T) -> T {
        let s = self
            .values
            .iter()
            .fold(DoubleSum::zero(), |s, &v| s.add_scalar(crate::numeric::pow_or_zero(v.abs(), q)));
        (s.value() * self.grid.cell_measure()).powf(T::one() / q)
    }
}

/// Two real components per lattice cell; zero outside Ω.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    grid: Arc<DomainGrid<T>>,
    vx: Vec<T>,
    vy: Vec<T>,
}

impl<T: Real> VectorField<T> {
    pub fn zeros(grid: Arc<DomainGrid<T>>) -> Self {
        let n = grid.len();
        Self { grid, vx: vec![T::zero(); n], vy: vec![T::zero(); n] }
    }

    pub fn from_components(grid: Arc<DomainGrid<T>>, mut vx: Vec<T>, mut vy: Vec<T>) -> Result<Self> {
        if vx.len() != grid.len() || vy.len() != grid.len() {
            return Err(Error::InvalidArgument("component length mismatch".into()));
        }
        for k in 0..grid.len() {
            if !grid.in_mask(k) {
                vx[k] = T::zero();
                vy[k] = T::zero();
            } else if !vx[k].is_finite() || !vy[k].is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite vector at cell {k}")));
            }
        }
        Ok(Self { grid, vx, vy })
    }

    pub fn from_fn(grid: Arc<DomainGrid<T>>, f: impl Fn(T, T) -> (T, T)) -> Self {
        let n = grid.len();
        let (mut vx, mut vy) = (vec![T::zero(); n], vec![T::zero(); n]);
        for k in 0..n {
            if grid.in_mask(k) {
                let (x, y) = grid.center(k);
                let (a, b) = f(x, y);
                vx[k] = a;
                vy[k] = b;
            }
        }
        Self { grid, vx, vy }
    }

    pub fn grid(&self) -> &Arc<DomainGrid<T>> {
        &self.grid
    }
    pub fn vx(&self) -> &[T] {
        &self.vx
    }
    pub fn vy(&self) -> &[T] {
        &self.vy
    }
    #[inline]
    pub fn get(&self, k: usize) -> (T, T) {
        (self.vx[k], self.vy[k])
    }

    /// Cellwise Euclidean norm.
    pub fn norm(&self) -> ScalarField<T> {
        let values = (0..self.vx.len()).map(|k| (self.vx[k] * self.vx[k] + self.vy[k] * self.vy[k]).sqrt()).collect();
        ScalarField { grid: self.grid.clone(), values }
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            grid: self.grid.clone(),
            vx: self.vx.iter().map(|&v| v * c).collect(),
            vy: self.vy.iter().map(|&v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        let vx = (0..self.vx.len()).map(|k| self.vx[k] - other.vx[k]).collect();
        let vy = (0..self.vy.len()).map(|k| self.vy[k] - other.vy[k]).collect();
        Self::from_components(self.grid.clone(), vx, vy)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.sub(&other.scale(-T::one()))
    }

    pub fn with_grid(&self, grid: Arc<DomainGrid<T>>) -> Result<Self> {
        self.grid.check_same(&grid)?;
        Self::from_components(grid, self.vx.clone(), self.vy.clone())
    }
}

/// Derivative of `u` along one lattice direction at cell `k`.
///
/// `nb(s)` returns the index `s` steps away when it is a mask cell.
fn directional<T: Real>(u: &[T], k: usize, h: T, nb: impl Fn(isize) -> Option<usize>) -> T {
    let two = T::lit(2.0);
    match (nb(-1), nb(1)) {
        (Some(m), Some(p)) => (u[p] - u[m]) / (two * h),
        (None, Some(p)) => match nb(2) {
            Some(pp) => (T::lit(4.0) * (u[p] - u[k]) - (u[pp] - u[k])) / (two * h),
            None => (u[p] - u[k]) / h,
        },
        (Some(m), None) => match nb(-2) {
            Some(mm) => (T::lit(4.0) * (u[k] - u[m]) - (u[k] - u[mm])) / (two * h),
            None => (u[k] - u[m]) / h,
        },
        (None, None) => T::zero(),
    }
}

/// Finite-difference gradient: central at cells whose two neighbors along a
/// direction are in Ω, one-sided (second order when possible) otherwise.
pub fn gradient<T: Real>(u: &ScalarField<T>) -> VectorField<T> {
    let g = u.grid();
    let (nx, ny) = g.dims();
    let h = g.h();
    let n = g.len();
    let (mut vx, mut vy) = (vec![T::zero(); n], vec![T::zero(); n]);
    let vals = u.values();
    for k in 0..n {
        if !g.in_mask(k) {
            continue;
        }
        let (i, j) = g.ij(k);
        vx[k] = directional(vals, k, h, |s| {
            let ii = i as isize + s;
            (ii >= 0 && (ii as usize) < nx)
                .then(|| g.index(ii as usize, j))
                .filter(|&q| g.in_mask(q))
        });
        vy[k] = directional(vals, k, h, |s| {
            let jj = j as isize + s;
            (jj >= 0 && (jj as usize) < ny)
                .then(|| g.index(i, jj as usize))
                .filter(|&q| g.in_mask(q))
        });
    }
    VectorField { grid: g.clone(), vx, vy }
}

fn check_region<T: Real>(g: &DomainGrid<T>, region: &[usize]) -> Result<()> {
    for &k in region {
        if k >= g.len() || !g.in_mask(k) {
            return Err(Error::InvalidArgument(format!("region cell {k} is outside the domain")));
        }
    }
    Ok(())
}

/// h² Σ_{region} f.
pub fn integrate<T: Real>(f: &ScalarField<T>, region: &[usize]) -> Result<T> {
    check_region(f.grid(), region)?;
    let s = region.iter().fold(DoubleSum::zero(), |s, &k| s.add_scalar(f.get(k)));
    Ok(s.value() * f.grid().cell_measure())
}

/// Mean value of `f` over `region`.
pub fn mean<T: Real>(f: &ScalarField<T>, region: &[usize]) -> Result<T> {
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    check_region(f.grid(), region)?;
    let s = region.iter().fold(DoubleSum::zero(), |s, &k| s.add_scalar(f.get(k)));
    Ok(s.value() / T::from_usize_exact(region.len()))
}

/// Mean of |f| over the full lattice ball B_ρ(center) with `f` zero-extended:
/// the divisor counts every lattice point of ℤ² inside the ball.
pub fn ball_average<T: Real>(f: &ScalarField<T>, center: usize, radius: T) -> Result<T> {
    let g = f.grid();
    if !(radius >= g.h()) {
        return Err(Error::RadiusTooSmall { radius: radius.to_f64_lossy(), h: g.h().to_f64_lossy() });
    }
    if center >= g.len() {
        return Err(Error::InvalidArgument(format!("center {center} outside the lattice")));
    }
    let st = BallStencil::new(lattice_radius_sq(radius, g.h())).ok_or(Error::EmptyRegion)?;
    let s = g
        .stencil_cells(center, &st, false)
        .into_iter()
        .fold(DoubleSum::zero(), |s, k| s.add_scalar(f.get(k).abs()));
    Ok(s.value() / T::from_usize_exact(st.count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(n: usize) -> Arc<DomainGrid<f64>> {
        Arc::new(DomainGrid::new(ShapeTag::Square, n, n, 1.0 / n as f64).unwrap())
    }

    #[test]
    fn model_domain_measures() {
        let g = DomainGrid::<f64>::new(ShapeTag::Square, 8, 8, 0.125).unwrap();
        assert_eq!(g.mask_count(), 64);
        assert!((g.measure() - 1.0).abs() < 1e-15);
        let d = DomainGrid::<f64>::new(ShapeTag::Disk, 64, 64, 1.0 / 64.0).unwrap();
        assert!((d.measure() / (std::f64::consts::PI / 4.0) - 1.0).abs() < 0.05);
        let l = DomainGrid::<f64>::new(ShapeTag::Lshape, 8, 8, 0.125).unwrap();
        assert!((l.measure() - 0.75).abs() < 1e-15);
        let a = DomainGrid::<f64>::new(ShapeTag::Annulus, 64, 64, 2.0 / 64.0).unwrap();
        let exact = std::f64::consts::PI * (1.0 - 1.0 / 16.0);
        assert!((a.measure() / exact - 1.0).abs() < 0.05);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(DomainGrid::<f64>::new(ShapeTag::Square, 3, 8, 0.1).is_err());
        assert!(DomainGrid::<f64>::new(ShapeTag::Square, 8, 8, 0.0).is_err());
        assert!(DomainGrid::<f64>::new(ShapeTag::Subregion, 8, 8, 0.1).is_err());
        assert!("hexagon".parse::<ShapeTag>().is_err());
        assert_eq!("lshape".parse::<ShapeTag>().unwrap(), ShapeTag::Lshape);
    }

    #[test]
    fn boundary_and_diameter_invariants() {
        for shape in [ShapeTag::Square, ShapeTag::Disk, ShapeTag::Lshape, ShapeTag::Annulus] {
            let g = DomainGrid::<f64>::new(shape, 24, 20, 0.05).unwrap();
            let (nx, ny) = g.dims();
            for k in g.boundary_cells() {
                assert!(g.in_mask(k));
                let (i, j) = g.ij(k);
                let edge = i == 0 || j == 0 || i + 1 == nx || j + 1 == ny;
                assert!(edge || !g.in_mask(k - 1) || !g.in_mask(k + 1) || !g.in_mask(k - nx) || !g.in_mask(k + nx));
            }
            let bound = 0.05 * ((nx * nx + ny * ny) as f64).sqrt();
            assert!(g.diam() <= bound + 1e-12, "{shape}");
        }
        let g = sq(8);
        assert!((g.diam() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let g = sq(16);
        let c = ScalarField::constant(g.clone(), 3.0);
        let gc = gradient(&c);
        assert!(gc.vx().iter().chain(gc.vy()).all(|&v| v == 0.0));
        let lin = ScalarField::from_fn(g.clone(), |x, _| x);
        let gl = gradient(&lin);
        for k in g.interior_cells() {
            assert!((gl.get(k).0 - 1.0).abs() < 1e-12 && gl.get(k).1.abs() < 1e-12);
        }
        let g = sq(128);
        let u = ScalarField::from_fn(g.clone(), |x, y| x * x - y * y);
        let gu = gradient(&u);
        let mut err: f64 = 0.0;
        for k in g.interior_cells() {
            let (x, y) = g.center(k);
            err = err.max((gu.get(k).0 - 2.0 * x).abs()).max((gu.get(k).1 + 2.0 * y).abs());
        }
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn integrate_examples() {
        let g = sq(10);
        let c = ScalarField::constant(g.clone(), 3.0);
        assert!((integrate(&c, &g.cells()).unwrap() - 3.0).abs() < 1e-12);
        let cells: Vec<usize> = (0..10).collect();
        let chi = ScalarField::from_values(g.clone(), (0..100).map(|k| if k < 10 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!((integrate(&chi, &cells).unwrap() - 0.1).abs() < 1e-15);
        assert!(mean(&chi, &[]).is_err());
        let g = sq(256);
        let f = ScalarField::from_fn(g.clone(), |x, y| x * y);
        assert!((integrate(&f, &g.cells()).unwrap() - 0.25).abs() < 1e-4);
    }

    #[test]
    fn ball_average_examples() {
        let g = sq(40);
        let one = ScalarField::constant(g.clone(), 1.0);
        let center = g.index(20, 20);
        for r in [1.0, 2.0, 5.5, 10.0] {
            assert_eq!(ball_average(&one, center, r * g.h()).unwrap(), 1.0);
        }
        let mut v = vec![0.0; g.len()];
        v[center] = 1.0;
        let spike = ScalarField::from_values(g.clone(), v).unwrap();
        let st = BallStencil::new(9.0f64).unwrap();
        assert_eq!(ball_average(&spike, center, 3.0 * g.h()).unwrap(), 1.0 / st.count as f64);
        assert_eq!(ball_average(&spike, center, g.h()).unwrap(), 1.0);
        assert!(matches!(ball_average(&spike, center, 0.5 * g.h()), Err(Error::RadiusTooSmall { .. })));
    }

    proptest! {
        #[test]
        fn integrate_is_additive(vals in prop::collection::vec(-5.0f64..5.0, 64), w in prop::collection::vec(-5.0f64..5.0, 64)) {
            let g = sq(8);
            let f = ScalarField::from_values(g.clone(), vals).unwrap();
            let q = ScalarField::from_values(g.clone(), w).unwrap();
            let s = f.zip_map(&q, |a, b| a + b).unwrap();
            let cells = g.cells();
            let lhs = integrate(&s, &cells).unwrap();
            let rhs = integrate(&f, &cells).unwrap() + integrate(&q, &cells).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn ball_average_homogeneous(vals in prop::collection::vec(0.0f64..3.0, 144), c in 0.0f64..4.0, r in 1usize..8, k in 0usize..144) {
            let g = sq(12);
            let f = ScalarField::from_values(g.clone(), vals).unwrap();
            let cf = f.scale(c);
            let rho = r as f64 * g.h();
            let a = ball_average(&f, k, rho).unwrap();
            let b = ball_average(&cf, k, rho).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-14 * (1.0 + b.abs()));
            prop_assert_eq!(ball_average(&f, k, g.h()).unwrap(), f.get(k).abs());
        }

        #[test]
        fn gradient_of_constant_vanishes(c in -10.0f64..10.0) {
            for shape in [ShapeTag::Disk, ShapeTag::Lshape, ShapeTag::Annulus] {
                let g = Arc::new(DomainGrid::new(shape, 16, 16, 0.1).unwrap());
                let f = ScalarField::constant(g, c);
                let gr = gradient(&f);
                prop_assert!(gr.vx().iter().chain(gr.vy()).all(|&v| v == 0.0));
            }
        }
    }
}
