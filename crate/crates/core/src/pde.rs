//! Quasilinear Dirichlet problems, their reference problems and the double
//! obstacle problem, solved by minimizing a discrete energy.
//!
//! The energy lives on the P1 triangulation of the cell-center lattice: each
//! 2×2 block of mask cells `c00 c10 / c01 c11` carries the triangles
//! `(c00, c10, c01)` and `(c11, c01, c10)`. The unknowns are the mask cells
//! whose six incident triangles all exist (see [`unknown_cells`]); every other
//! mask cell holds the Dirichlet datum.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{self, DomainGrid, ScalarField, VectorField};
use crate::numeric::{norm2, pow_or_zero, DoubleSum};
use crate::{Error, Real, Result};

/// Largest exponent the solver accepts.
pub const P_MAX: f64 = 3.0;

/// Regularizers used when `ς = 0` and `p ≠ 2`, followed by a final stage at zero.
pub const CONTINUATION: [f64; 6] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

const NONE: usize = usize::MAX;
const SLOTS: [(isize, isize); 7] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)];
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const STAGE_RTOL: f64 = 1e-4;
const ACTIVE_EPS: f64 = 1e-4;

/// Right-hand side nonlinearity 𝔹 applied to the datum `F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BForm {
    /// `|ξ|^{p−2} ξ`.
    PowerLaw,
    /// `(ς² + |ξ|²)^{(p−1)/2} ξ/|ξ|`.
    Shifted,
}

/// `𝔸(x, ξ) = a(x)(ς² + |ξ|²)^{(p−2)/2} ξ` with `Λ⁻¹ ≤ a ≤ Λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec<T> {
    pub p: T,
    pub varsigma: T,
    pub lambda: T,
    pub coeff: ScalarField<T>,
}

impl<T: Real> OperatorSpec<T> {
    pub fn new(p: T, varsigma: T, lambda: T, coeff: ScalarField<T>) -> Result<Self> {
        if !(p > T::one() && p <= T::lit(P_MAX)) {
            return Err(Error::InvalidArgument(format!("exponent p = {p} must lie in (1, {P_MAX}]")));
        }
        if !(varsigma >= T::zero() && varsigma <= T::one()) {
            return Err(Error::InvalidArgument(format!("degeneracy ς = {varsigma} must lie in [0, 1]")));
        }
        if !(lambda >= T::one()) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("ellipticity Λ = {lambda} must be at least 1")));
        }
        let g = coeff.grid().clone();
        let slack = T::lit(64.0) * T::epsilon();
        for k in g.cells() {
            let a = coeff.get(k);
            if a < (T::one() - slack) / lambda || a > lambda * (T::one() + slack) {
                return Err(Error::InvalidArgument(format!(
                    "coefficient a = {a} at cell {k} outside [1/Λ, Λ] with Λ = {lambda}"
                )));
            }
        }
        Ok(Self { p, varsigma, lambda, coeff })
    }

    /// Constant coefficient `a`, with the smallest admissible `Λ`.
    pub fn constant(grid: Arc<DomainGrid<T>>, p: T, varsigma: T, a: T) -> Result<Self> {
        if !(a > T::zero()) {
            return Err(Error::InvalidArgument(format!("coefficient a = {a} must be positive")));
        }
        let lambda = a.max(T::one() / a);
        Self::new(p, varsigma, lambda, ScalarField::constant(grid, a))
    }

    /// `𝔸` with the coefficient value `a` supplied directly.
    #[inline]
    pub fn flux_with(&self, a: T, xi: (T, T)) -> (T, T) {
        let f = a * shifted_power(self.varsigma * self.varsigma, xi, self.p - T::lit(2.0));
        (f * xi.0, f * xi.1)
    }

    #[inline]
    pub fn flux(&self, k: usize, xi: (T, T)) -> (T, T) {
        self.flux_with(self.coeff.get(k), xi)
    }

    pub fn b_value(&self, form: BForm, xi: (T, T)) -> (T, T) {
        let n = norm2(xi);
        if n == T::zero() {
            return (T::zero(), T::zero());
        }
        let f = match form {
            BForm::PowerLaw => n.powf(self.p - T::lit(2.0)),
            BForm::Shifted => {
                (self.varsigma * self.varsigma + n * n).powf((self.p - T::one()) / T::lit(2.0)) / n
            }
        };
        (f * xi.0, f * xi.1)
    }

    /// Constant with which both the growth and the monotonicity conditions hold
    /// for this family: `Λ / min(1, c_p)` where `c_p = p − 1` for `p < 2` and
    /// `8^{−(p−2)/2}/4` for `p ≥ 2`.
    pub fn structure_lambda(&self) -> T {
        let two = T::lit(2.0);
        let cp = if self.p < two {
            self.p - T::one()
        } else {
            T::lit(8.0).powf(-(self.p - two) / two) / T::lit(4.0)
        };
        self.lambda / cp.min(T::one())
    }
}

/// `(c + |ξ|²)^{e/2}`, with the value at `c + |ξ|² = 0` taken as zero.
#[inline]
fn shifted_power<T: Real>(c: T, xi: (T, T), e: T) -> T {
    let w = c + xi.0 * xi.0 + xi.1 * xi.1;
    if w == T::zero() {
        T::zero()
    } else {
        w.powf(e / T::lit(2.0))
    }
}

/// `Ψ_ς(ξ₁, ξ₂) = (ς² + |ξ₁|² + |ξ₂|²)^{(p−2)/2} |ξ₁ − ξ₂|²`, zero when both vanish.
pub fn psi_varsigma<T: Real>(xi1: (T, T), xi2: (T, T), varsigma: T, p: T) -> T {
    let w = varsigma * varsigma + xi1.0 * xi1.0 + xi1.1 * xi1.1 + xi2.0 * xi2.0 + xi2.1 * xi2.1;
    let d = (xi1.0 - xi2.0, xi1.1 - xi2.1);
    let d2 = d.0 * d.0 + d.1 * d.1;
    if d2 == T::zero() || w == T::zero() {
        return T::zero();
    }
    w.powf((p - T::lit(2.0)) / T::lit(2.0)) * d2
}

/// Outcome of random sampling of the growth and monotonicity conditions with
/// constant [`OperatorSpec::structure_lambda`].
#[derive(Clone, Debug, Serialize)]
pub struct StructureCheck {
    pub samples: usize,
    pub lambda: f64,
    /// max of `|𝔸(x,ξ)| / (Λ(ς²+|ξ|²)^{(p−1)/2})`.
    pub growth_max_ratio: f64,
    /// min of `⟨𝔸(x,ξ₁)−𝔸(x,ξ₂), ξ₁−ξ₂⟩ / (Λ⁻¹Ψ_ς(ξ₁,ξ₂))`.
    pub monotone_min_ratio: f64,
    pub failures: usize,
}

fn random_vector<T: Real>(rng: &mut ChaCha8Rng) -> (T, T) {
    if rng.gen_bool(0.05) {
        return (T::zero(), T::zero());
    }
    let r = 10f64.powf(rng.gen_range(-3.0..3.0));
    let th = rng.gen_range(0.0..std::f64::consts::TAU);
    (T::lit(r * th.cos()), T::lit(r * th.sin()))
}

pub fn check_structure<T: Real>(op: &OperatorSpec<T>, samples: usize, seed: u64) -> StructureCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = op.coeff.grid().cells();
    let lam = op.structure_lambda();
    let (vs, p) = (op.varsigma, op.p);
    let tol = T::lit(1e-9);
    let mut out = StructureCheck {
        samples,
        lambda: lam.to_f64_lossy(),
        growth_max_ratio: 0.0,
        monotone_min_ratio: f64::INFINITY,
        failures: 0,
    };
    for _ in 0..samples {
        let k = cells[rng.gen_range(0..cells.len())];
        let (x1, x2) = (random_vector::<T>(&mut rng), random_vector::<T>(&mut rng));
        let a1 = op.flux(k, x1);
        let bound = lam * shifted_power(vs * vs, x1, p - T::one());
        let n1 = norm2(a1);
        if bound > T::zero() {
            let ratio = n1 / bound;
            out.growth_max_ratio = out.growth_max_ratio.max(ratio.to_f64_lossy());
            if ratio > T::one() + tol {
                out.failures += 1;
            }
        } else if n1 > T::zero() {
            out.failures += 1;
        }
        let a2 = op.flux(k, x2);
        let d = (x1.0 - x2.0, x1.1 - x2.1);
        let lhs = (a1.0 - a2.0) * d.0 + (a1.1 - a2.1) * d.1;
        let rhs = psi_varsigma(x1, x2, vs, p) / lam;
        if rhs > T::zero() {
            let ratio = lhs / rhs;
            out.monotone_min_ratio = out.monotone_min_ratio.min(ratio.to_f64_lossy());
            let rounding = T::lit(64.0) * T::epsilon() * (n1 + norm2(a2)) * norm2(d);
            if lhs < rhs * (T::one() - tol) - rounding {
                out.failures += 1;
            }
        }
    }
    out
}

/// Discrete `(δ, r₀)`-BMO seminorm of the coefficient dependence:
/// sup over centers and radii `ϱ ∈ {h, 2h, 4h, …} ∪ {r₀}` of
/// `(⨍_{Ω_ϱ(y)} (sup_ξ |𝔸(x,ξ) − Ā(ξ)| / |ξ|^{p−1})^t dx)^{1/t}`, with `ξ` over
/// `sphere_samples` unit directions. An empty `centers` uses every mask cell.
pub fn bmo_seminorm<T: Real>(
    op: &OperatorSpec<T>,
    t: T,
    r0: T,
    sphere_samples: usize,
    centers: &[usize],
) -> Result<T> {
    let g = op.coeff.grid();
    let h = g.h();
    if !(t > T::zero()) {
        return Err(Error::InvalidArgument(format!("exponent t = {t} must be positive")));
    }
    if !(r0 >= h) {
        return Err(Error::RadiusTooSmall { radius: r0.to_f64_lossy(), h: h.to_f64_lossy() });
    }
    if sphere_samples == 0 {
        return Err(Error::InvalidArgument("at least one direction is required".into()));
    }
    let dirs: Vec<(T, T)> = (0..sphere_samples)
        .map(|m| {
            let th = T::TAU() * T::from_usize_exact(m) / T::from_usize_exact(sphere_samples);
            (th.cos(), th.sin())
        })
        .collect();
    let mut radii = Vec::new();
    let mut r = h;
    while r <= r0 {
        radii.push(r);
        r = r + r;
    }
    if radii.last().is_some_and(|&l| l < r0) {
        radii.push(r0);
    }
    let centers = if centers.is_empty() { g.cells() } else { centers.to_vec() };
    for &c in &centers {
        if c >= g.len() || !g.in_mask(c) {
            return Err(Error::InvalidArgument(format!("center {c} is not a domain cell")));
        }
    }
    let pairs: Vec<(usize, T)> = centers.iter().flat_map(|&c| radii.iter().map(move |&r| (c, r))).collect();
    let values: Vec<T> = pairs
        .par_iter()
        .map(|&(c, rho)| {
            let cells = g.ball_cells(c, rho);
            if cells.is_empty() {
                return T::zero();
            }
            let n = T::from_usize_exact(cells.len());
            let means: Vec<(T, T)> = dirs
                .iter()
                .map(|&e| {
                    let (sx, sy) = cells.iter().fold((DoubleSum::zero(), DoubleSum::zero()), |(sx, sy), &k| {
                        let a = op.flux(k, e);
                        (sx.add_scalar(a.0), sy.add_scalar(a.1))
                    });
                    (sx.div_count(cells.len()), sy.div_count(cells.len()))
                })
                .collect();
            let s = cells.iter().fold(DoubleSum::zero(), |s, &k| {
                let osc = dirs.iter().zip(&means).fold(T::zero(), |m, (&e, &bar)| {
                    let a = op.flux(k, e);
                    m.max(norm2((a.0 - bar.0, a.1 - bar.1)))
                });
                s.add_scalar(pow_or_zero(osc, t))
            });
            (s.value() / n).powf(T::one() / t)
        })
        .collect();
    Ok(values.into_iter().fold(T::zero(), T::max))
}

/// Mask cells carrying an unknown: interior cells whose anti-diagonal
/// neighbours `(i+1, j−1)` and `(i−1, j+1)` are also in the mask.
pub fn unknown_cells<T: Real>(grid: &DomainGrid<T>) -> Vec<usize> {
    let nx = grid.nx();
    grid.interior_cells()
        .into_iter()
        .filter(|&k| grid.in_mask(k + 1 - nx) && grid.in_mask(k + nx - 1))
        .collect()
}

/// Which problem a [`ProblemSpec`] poses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// `−div 𝔸(x, ∇u) = −div 𝔹(x, F)` with `u = g` on the boundary.
    Dirichlet,
    /// `div 𝔸(x, ∇v) = 0` with `v = g` on the boundary of the region.
    Reference,
    /// As `Reference` with the coefficient replaced by its mean over the region.
    Frozen,
    /// Variational inequality on `{f₁ ≤ u ≤ f₂}` with trace `g`.
    DoubleObstacle,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemKind::Dirichlet => "dirichlet",
            ProblemKind::Reference => "reference",
            ProblemKind::Frozen => "frozen",
            ProblemKind::DoubleObstacle => "double_obstacle",
        })
    }
}

impl FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(ProblemKind::Dirichlet),
            "reference" => Ok(ProblemKind::Reference),
            "frozen" => Ok(ProblemKind::Frozen),
            "double_obstacle" => Ok(ProblemKind::DoubleObstacle),
            _ => Err(Error::InvalidArgument(format!("unknown problem kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProblemSpec<T> {
    pub kind: ProblemKind,
    pub op: OperatorSpec<T>,
    pub f: VectorField<T>,
    pub g: ScalarField<T>,
    pub obstacles: Option<(ScalarField<T>, ScalarField<T>)>,
    pub region: Option<Vec<usize>>,
    /// Starting iterate; defaults to `g`.
    pub initial: Option<ScalarField<T>>,
}

impl<T: Real> ProblemSpec<T> {
    pub fn dirichlet(op: OperatorSpec<T>, f: VectorField<T>, g: ScalarField<T>) -> Self {
        Self { kind: ProblemKind::Dirichlet, op, f, g, obstacles: None, region: None, initial: None }
    }

    pub fn reference(op: OperatorSpec<T>, trace: ScalarField<T>, region: Vec<usize>) -> Self {
        let f = VectorField::zeros(trace.grid().clone());
        Self { kind: ProblemKind::Reference, op, f, g: trace, obstacles: None, region: Some(region), initial: None }
    }

    pub fn frozen(op: OperatorSpec<T>, trace: ScalarField<T>, region: Vec<usize>) -> Self {
        Self { kind: ProblemKind::Frozen, ..Self::reference(op, trace, region) }
    }

    pub fn double_obstacle(
        op: OperatorSpec<T>,
        f: VectorField<T>,
        g: ScalarField<T>,
        f1: ScalarField<T>,
        f2: ScalarField<T>,
    ) -> Self {
        Self {
            kind: ProblemKind::DoubleObstacle,
            op,
            f,
            g,
            obstacles: Some((f1, f2)),
            region: None,
            initial: None,
        }
    }

    pub fn with_initial(mut self, u0: ScalarField<T>) -> Self {
        self.initial = Some(u0);
        self
    }

    pub fn with_region(mut self, cells: Vec<usize>) -> Self {
        self.region = Some(cells);
        self
    }

    pub fn b_form(&self) -> BForm {
        match self.kind {
            ProblemKind::DoubleObstacle => BForm::Shifted,
            _ => BForm::PowerLaw,
        }
    }

    /// Grid the problem is solved on: the domain, or the region carved out of it.
    pub fn solve_grid(&self) -> Result<Arc<DomainGrid<T>>> {
        let base = self.g.grid();
        match &self.region {
            Some(cells) => Ok(Arc::new(base.restrict(cells)?)),
            None => Ok(base.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let base = self.g.grid();
        base.check_same(self.op.coeff.grid())?;
        base.check_same(self.f.grid())?;
        if let Some(u0) = &self.initial {
            base.check_same(u0.grid())?;
        }
        match (self.kind, &self.obstacles) {
            (ProblemKind::DoubleObstacle, None) => {
                return Err(Error::InvalidArgument("double obstacle problem without obstacles".into()))
            }
            (ProblemKind::DoubleObstacle, Some(_)) | (_, None) => {}
            (_, Some(_)) => return Err(Error::InvalidArgument(format!("{} problem with obstacles", self.kind))),
        }
        if let Some((f1, f2)) = &self.obstacles {
            base.check_same(f1.grid())?;
            base.check_same(f2.grid())?;
            for k in base.cells() {
                if f1.get(k) > f2.get(k) {
                    return Err(Error::Infeasible(format!(
                        "f1 = {} exceeds f2 = {} at cell {k}",
                        f1.get(k),
                        f2.get(k)
                    )));
                }
            }
            let sg = self.solve_grid()?;
            let unknown = unknown_cells(&sg);
            for k in sg.cells().into_iter().filter(|k| unknown.binary_search(k).is_err()) {
                let gk = self.g.get(k);
                if f1.get(k) > gk || gk > f2.get(k) {
                    return Err(Error::Infeasible(format!(
                        "boundary value {gk} at cell {k} outside [{}, {}]",
                        f1.get(k),
                        f2.get(k)
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SolveOptions {
    /// Stop once the projected residual drops below `tol_rel` times its initial value.
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub max_iter: usize,
    /// Restrict `p` to `(1, 2]`.
    pub paper_strict: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol_rel: 1e-8, tol_abs: 1e-12, max_iter: 10_000, paper_strict: false }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StageReport {
    pub delta: f64,
    pub iterations: usize,
    pub residual: f64,
    pub target: f64,
    pub energy: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SolveMeta {
    pub kind: ProblemKind,
    pub p: f64,
    pub varsigma: f64,
    pub unknowns: usize,
    pub iterations: usize,
    pub newton_steps: usize,
    pub gradient_steps: usize,
    pub initial_residual: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub schedule: Vec<StageReport>,
}

#[derive(Clone, Debug)]
pub struct SolveReport<T> {
    /// Solution on [`ProblemSpec::solve_grid`].
    pub u: ScalarField<T>,
    pub meta: SolveMeta,
}

impl<T> SolveReport<T> {
    /// Energy after each accepted step of the final stage.
    pub fn energy(&self) -> &[f64] {
        self.meta.schedule.last().map(|s| s.energy.as_slice()).unwrap_or(&[])
    }
}

struct Tri<T> {
    v: [usize; 3],
    s: T,
    a: T,
    b: (T, T),
}

struct System<T> {
    nx: usize,
    h: T,
    area: T,
    p: T,
    tris: Vec<Tri<T>>,
    free: Vec<usize>,
    index: Vec<usize>,
    inc: Vec<Vec<(usize, usize)>>,
    nbr: Vec<[usize; 7]>,
    lo: Vec<T>,
    hi: Vec<T>,
}

fn slot(di: isize, dj: isize) -> usize {
    SLOTS.iter().position(|&o| o == (di, dj)).expect("triangle vertices are stencil neighbours")
}

impl<T: Real> System<T> {
    fn build(
        grid: &DomainGrid<T>,
        p: T,
        coeff: &ScalarField<T>,
        b: impl Fn((T, T)) -> (T, T),
        f: &VectorField<T>,
        bounds: Option<(&ScalarField<T>, &ScalarField<T>)>,
    ) -> Self {
        let (nx, ny) = grid.dims();
        let h = grid.h();
        let third = T::one() / T::lit(3.0);
        let mut tris = Vec::new();
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx - 1 {
                let c00 = grid.index(i, j);
                let (c10, c01, c11) = (c00 + 1, c00 + nx, c00 + nx + 1);
                for (v, s) in [([c00, c10, c01], T::one()), ([c11, c01, c10], -T::one())] {
                    if v.iter().all(|&k| grid.in_mask(k)) {
                        let a = (coeff.get(v[0]) + coeff.get(v[1]) + coeff.get(v[2])) * third;
                        let fx = (f.vx()[v[0]] + f.vx()[v[1]] + f.vx()[v[2]]) * third;
                        let fy = (f.vy()[v[0]] + f.vy()[v[1]] + f.vy()[v[2]]) * third;
                        tris.push(Tri { v, s, a, b: b((fx, fy)) });
                    }
                }
            }
        }
        let free = unknown_cells(grid);
        let mut index = vec![NONE; grid.len()];
        for (n, &k) in free.iter().enumerate() {
            index[k] = n;
        }
        let mut inc = vec![Vec::new(); free.len()];
        for (t, tri) in tris.iter().enumerate() {
            for (l, &v) in tri.v.iter().enumerate() {
                if index[v] != NONE {
                    inc[index[v]].push((t, l));
                }
            }
        }
        let nbr = free
            .iter()
            .map(|&k| {
                let (i, j) = grid.ij(k);
                let mut row = [NONE; 7];
                for (s, &(di, dj)) in SLOTS.iter().enumerate() {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if ii >= 0 && jj >= 0 && (ii as usize) < nx && (jj as usize) < ny {
                        row[s] = index[grid.index(ii as usize, jj as usize)];
                    }
                }
                row
            })
            .collect();
        let (lo, hi) = match bounds {
            Some((f1, f2)) => (free.iter().map(|&k| f1.get(k)).collect(), free.iter().map(|&k| f2.get(k)).collect()),
            None => (vec![T::neg_infinity(); free.len()], vec![T::infinity(); free.len()]),
        };
        Self { nx, h, area: h * h / T::lit(2.0), p, tris, free, index, inc, nbr, lo, hi }
    }

    #[inline]
    fn tri_grad(&self, t: &Tri<T>, u: &[T]) -> (T, T) {
        let [v0, v1, v2] = t.v;
        (t.s * (u[v1] - u[v0]) / self.h, t.s * (u[v2] - u[v0]) / self.h)
    }

    fn density(&self, t: &Tri<T>, xi: (T, T), c: T) -> T {
        let w = c + xi.0 * xi.0 + xi.1 * xi.1;
        self.area * (t.a * pow_or_zero(w, self.p / T::lit(2.0)) / self.p - (t.b.0 * xi.0 + t.b.1 * xi.1))
    }

    fn energy(&self, u: &[T], c: T) -> T {
        let parts: Vec<T> = self.tris.par_iter().map(|t| self.density(t, self.tri_grad(t, u), c)).collect();
        parts.into_iter().fold(DoubleSum::zero(), |s, x| s.add_scalar(x)).value()
    }

    /// `E(u + Δ) − E(u)` evaluated without forming either energy.
    fn energy_change(&self, u: &[T], du: &[T], c: T) -> T {
        let two = T::lit(2.0);
        let half_p = self.p / two;
        let parts: Vec<T> = self
            .tris
            .par_iter()
            .map(|t| {
                let d = self.tri_grad(t, du);
                if d.0 == T::zero() && d.1 == T::zero() {
                    return T::zero();
                }
                let xi = self.tri_grad(t, u);
                let w0 = c + xi.0 * xi.0 + xi.1 * xi.1;
                let dw = two * (xi.0 * d.0 + xi.1 * d.1) + d.0 * d.0 + d.1 * d.1;
                let dwp = if w0 > T::zero() {
                    w0.powf(half_p) * (half_p * (dw / w0).max(-T::one()).ln_1p()).exp_m1()
                } else {
                    pow_or_zero(dw.max(T::zero()), half_p)
                };
                self.area * (t.a * dwp / self.p - (t.b.0 * d.0 + t.b.1 * d.1))
            })
            .collect();
        parts.into_iter().fold(DoubleSum::zero(), |s, x| s.add_scalar(x)).value()
    }

    /// Per-triangle contributions `area·⟨q_t, ∂∇u_t/∂u_l⟩` for the local vertices.
    fn contributions(&self, u: &[T], c: T) -> Vec<[T; 3]> {
        let k = self.area / self.h;
        self.tris
            .par_iter()
            .map(|t| {
                let xi = self.tri_grad(t, u);
                let f = t.a * shifted_power(c, xi, self.p - T::lit(2.0));
                let q = (f * xi.0 - t.b.0, f * xi.1 - t.b.1);
                let s = t.s * k;
                [-(q.0 + q.1) * s, q.0 * s, q.1 * s]
            })
            .collect()
    }

    /// Raw energy gradient over the unknowns and the summed magnitude of its terms.
    fn gradient(&self, u: &[T], c: T) -> (Vec<T>, Vec<T>) {
        let parts = self.contributions(u, c);
        self.inc
            .par_iter()
            .map(|inc| {
                inc.iter().fold((T::zero(), T::zero()), |(g, m), &(t, l)| {
                    let x = parts[t][l];
                    (g + x, m + x.abs())
                })
            })
            .unzip()
    }

    fn hessian(&self, u: &[T], c: T) -> Vec<[T; 7]> {
        let two = T::lit(2.0);
        let k = self.area / (self.h * self.h);
        let wmax = self
            .tris
            .iter()
            .map(|t| {
                let xi = self.tri_grad(t, u);
                c + xi.0 * xi.0 + xi.1 * xi.1
            })
            .fold(T::one(), T::max);
        let floor = T::lit(1e-14) * wmax;
        let local: Vec<[[T; 3]; 3]> = self
            .tris
            .par_iter()
            .map(|t| {
                let xi = self.tri_grad(t, u);
                let w = (c + xi.0 * xi.0 + xi.1 * xi.1).max(floor);
                let f1 = w.powf((self.p - two) / two);
                let f2 = (self.p - two) * w.powf((self.p - T::lit(4.0)) / two);
                let s = t.a * k;
                let h11 = s * (f1 + f2 * xi.0 * xi.0);
                let h12 = s * f2 * xi.0 * xi.1;
                let h22 = s * (f1 + f2 * xi.1 * xi.1);
                let k01 = -(h11 + h12);
                let k02 = -(h12 + h22);
                [[h11 + two * h12 + h22, k01, k02], [k01, h11, h12], [k02, h12, h22]]
            })
            .collect();
        self.free
            .par_iter()
            .zip(self.inc.par_iter())
            .map(|(&v, inc)| {
                let mut row = [T::zero(); 7];
                for &(t, l) in inc {
                    let tri = &self.tris[t];
                    for m in 0..3 {
                        let w = tri.v[m];
                        if self.index[w] == NONE {
                            continue;
                        }
                        let s = self.lattice_slot(v, w);
                        row[s] = row[s] + local[t][l][m];
                    }
                }
                row
            })
            .collect()
    }


    fn lattice_slot(&self, v: usize, w: usize) -> usize {
        let nx = self.nx as isize;
        let (v, w) = (v as isize, w as isize);
        let (iv, jv) = (v % nx, v / nx);
        let (iw, jw) = (w % nx, w / nx);
        slot(iw - iv, jw - jv)
    }

    fn matvec(&self, hess: &[[T; 7]], skip: &[bool], x: &[T]) -> Vec<T> {
        hess.par_iter()
            .zip(self.nbr.par_iter())
            .enumerate()
            .map(|(i, (row, nb))| {
                if skip[i] {
                    return T::zero();
                }
                row.iter().zip(nb).fold(T::zero(), |s, (&hv, &n)| {
                    if n == NONE || skip[n] {
                        s
                    } else {
                        s + hv * x[n]
                    }
                })
            })
            .collect()
    }

    /// Preconditioned conjugate gradients for `(H + shift·I) d = rhs` on the
    /// unknowns not in `skip`. `None` on curvature breakdown at the first step.
    fn pcg(&self, hess: &[[T; 7]], skip: &[bool], shift: T, rhs: &[T], tol: T, maxit: usize) -> Option<Vec<T>> {
        let n = rhs.len();
        let minv: Vec<T> = (0..n)
            .map(|i| {
                let d = hess[i][0] + shift;
                if skip[i] || !(d > T::zero()) {
                    T::one()
                } else {
                    T::one() / d
                }
            })
            .collect();
        let mut x = vec![T::zero(); n];
        let mut r: Vec<T> = (0..n).map(|i| if skip[i] { T::zero() } else { rhs[i] }).collect();
        let mut z: Vec<T> = r.iter().zip(&minv).map(|(&a, &m)| a * m).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for it in 0..maxit {
            let mut ap = self.matvec(hess, skip, &p);
            for i in 0..n {
                if !skip[i] {
                    ap[i] = ap[i] + shift * p[i];
                }
            }
            let pap = dot(&p, &ap);
            if !(pap > T::zero()) {
                return if it == 0 { None } else { Some(x) };
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] = x[i] + alpha * p[i];
                r[i] = r[i] - alpha * ap[i];
            }
            if dot(&r, &r).sqrt() <= tol {
                break;
            }
            for i in 0..n {
                z[i] = r[i] * minv[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Some(x)
    }

    fn values(&self, u: &[T]) -> Vec<T> {
        self.free.iter().map(|&k| u[k]).collect()
    }

    /// Projected residual scaled to the pointwise equation (division by h²).
    fn projected(&self, x: &[T], g: &[T]) -> Vec<T> {
        let s = T::one() / (self.h * self.h);
        (0..g.len())
            .map(|i| {
                let r = g[i] * s;
                if (x[i] <= self.lo[i] && r > T::zero()) || (x[i] >= self.hi[i] && r < T::zero()) {
                    T::zero()
                } else {
                    r
                }
            })
            .collect()
    }

    /// Projected backtracking along `d`, accepting the first trial with
    /// `E(x(t)) − E(x) <= c·⟨∇E, x(t) − x⟩ < 0`.
    fn line_search(&self, u: &mut [T], x: &[T], g: &[T], d: &[T], c: T, t0: T) -> Option<(T, bool)> {
        let mut t = t0;
        let mut du = vec![T::zero(); u.len()];
        for trial in 0..MAX_HALVINGS {
            let xt: Vec<T> = (0..x.len())
                .map(|i| (x[i] + t * d[i]).max(self.lo[i]).min(self.hi[i]))
                .collect();
            let mut slope = T::zero();
            let mut moved = false;
            for i in 0..x.len() {
                let dx = xt[i] - x[i];
                du[self.free[i]] = dx;
                slope = slope + g[i] * dx;
                moved |= dx != T::zero();
            }
            if !moved {
                return None;
            }
            if slope < T::zero() {
                let de = self.energy_change(u, &du, c);
                if de <= T::lit(ARMIJO) * slope {
                    for (i, &k) in self.free.iter().enumerate() {
                        u[k] = xt[i];
                    }
                    return Some((de, trial == 0));
                }
            }
            t = t * T::lit(0.5);
        }
        None
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn masked_norm<T: Real>(v: &[T], skip: &[bool]) -> T {
    v.iter().zip(skip).filter(|(_, &s)| !s).fold(T::zero(), |s, (&x, _)| s + x * x).sqrt()
}

fn max_abs<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

struct Progress<T> {
    iterations: usize,
    newton: usize,
    gradient: usize,
    budget: usize,
    prev: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> System<T> {
    fn converged(&self, pr: &[T], noise: &[T], hess: &[[T; 7]], x: &[T], target: T) -> bool {
        let s = T::lit(64.0) * T::epsilon() / (self.h * self.h);
        (0..pr.len()).all(|i| {
            let rep = hess[i].iter().zip(&self.nbr[i]).fold(T::zero(), |m, (&hv, &n)| {
                if n == NONE {
                    m
                } else {
                    m + (hv * x[n]).abs()
                }
            });
            pr[i].abs() <= target.max(s * (noise[i] + rep))
        })
    }

    fn stage(&self, u: &mut [T], c: T, target: T, prog: &mut Progress<T>) -> Result<StageReport> {
        let mut e = self.energy(u, c);
        let mut energy = vec![e.to_f64_lossy()];
        let mut iterations = 0;
        let mut mu_rel = T::zero();
        let mut res_start = None;
        loop {
            let x = self.values(u);
            let (g, noise) = self.gradient(u, c);
            let pr = self.projected(&x, &g);
            let res = max_abs(&pr);
            let hess = self.hessian(u, c);
            if self.converged(&pr, &noise, &hess, &x, target) {
                return Ok(StageReport {
                    delta: 0.0,
                    iterations,
                    residual: res.to_f64_lossy(),
                    target: target.to_f64_lossy(),
                    energy,
                });
            }
            if prog.budget == 0 {
                return Err(Error::NoConvergence { iterations: prog.iterations, residual: res.to_f64_lossy(), energy });
            }
            prog.budget -= 1;
            prog.iterations += 1;
            iterations += 1;

            let n = x.len();
            let w: Vec<T> = hess.iter().map(|r| if r[0] > T::zero() { T::one() / r[0] } else { T::one() }).collect();
            let eps = (0..n)
                .map(|i| (x[i] - (x[i] - w[i] * g[i]).max(self.lo[i]).min(self.hi[i])).abs())
                .fold(T::zero(), T::max)
                .min(T::lit(ACTIVE_EPS));
            let active: Vec<bool> = (0..n)
                .map(|i| {
                    (x[i] <= self.lo[i] + eps && g[i] > T::zero()) || (x[i] >= self.hi[i] - eps && g[i] < T::zero())
                })
                .collect();

            let gnorm = masked_norm(&g, &active);
            let mean_diag = hess.iter().fold(T::zero(), |s, r| s + r[0].abs()) / T::from_usize_exact(n.max(1));
            let rhs: Vec<T> = g.iter().map(|&v| -v).collect();
            let start = *res_start.get_or_insert(res);
            let forcing = T::lit(0.1).min((res / start).sqrt()).max(T::lit(0.1) * target / res);
            let mut step = None;
            for _ in 0..8 {
                if step.is_some() {
                    break;
                }
                let shift = mu_rel * mean_diag;
                if let Some(mut d) = self.pcg(&hess, &active, shift, &rhs, forcing * gnorm, 4 * n + 50) {
                    for i in 0..n {
                        if active[i] {
                            d[i] = -w[i] * g[i];
                        }
                    }
                    step = self.line_search(u, &x, &g, &d, c, T::one());
                    if step.is_some() {
                        break;
                    }
                }
                mu_rel = if mu_rel == T::zero() { T::lit(1e-8) } else { mu_rel * T::lit(100.0) };
                if mu_rel > T::one() {
                    break;
                }
            }
            match step {
                Some((_, full)) => {
                    prog.newton += 1;
                    if full {
                        mu_rel = mu_rel / T::lit(10.0);
                        if mu_rel < T::lit(1e-12) {
                            mu_rel = T::zero();
                        }
                    }
                }
                None => {
                    let d: Vec<T> = g.iter().map(|&v| -v).collect();
                    let t0 = match &prog.prev {
                        Some((px, pg)) if px.len() == n => {
                            let s: Vec<T> = (0..n).map(|i| x[i] - px[i]).collect();
                            let y: Vec<T> = (0..n).map(|i| g[i] - pg[i]).collect();
                            let sy = dot(&s, &y);
                            if sy > T::zero() {
                                dot(&s, &s) / sy
                            } else {
                                w.iter().copied().fold(T::infinity(), T::min)
                            }
                        }
                        _ => w.iter().copied().fold(T::infinity(), T::min),
                    };
                    step = self.line_search(u, &x, &g, &d, c, t0);
                    if step.is_some() {
                        prog.gradient += 1;
                    }
                }
            }
            let Some((de, _)) = step else {
                return Err(Error::NoConvergence { iterations: prog.iterations, residual: res.to_f64_lossy(), energy });
            };
            assert!(de <= T::zero(), "accepted step increased the energy by {de}");
            e = e + de;
            energy.push(e.to_f64_lossy());
            prog.prev = Some((x, g));
        }
    }
}

fn prepare<T: Real>(
    spec: &ProblemSpec<T>,
    opts: &SolveOptions,
) -> Result<(Arc<DomainGrid<T>>, System<T>, Vec<T>)> {
    spec.validate()?;
    let p = spec.op.p;
    if opts.paper_strict && p > T::lit(2.0) {
        return Err(Error::InvalidArgument(format!("exponent p = {p} exceeds 2 under paper_strict")));
    }
    if !(opts.tol_rel > 0.0) || !(opts.tol_abs >= 0.0) {
        return Err(Error::InvalidArgument("tolerances must be positive".into()));
    }
    let grid = spec.solve_grid()?;
    let coeff = spec.op.coeff.with_grid(grid.clone())?;
    let coeff = if spec.kind == ProblemKind::Frozen {
        ScalarField::constant(grid.clone(), grid::mean(&coeff, &grid.cells())?)
    } else {
        coeff
    };
    let f = match spec.kind {
        ProblemKind::Reference | ProblemKind::Frozen => VectorField::zeros(grid.clone()),
        _ => spec.f.with_grid(grid.clone())?,
    };
    let bounds = match &spec.obstacles {
        Some((f1, f2)) => Some((f1.with_grid(grid.clone())?, f2.with_grid(grid.clone())?)),
        None => None,
    };
    let form = spec.b_form();
    let sys = System::build(
        &grid,
        p,
        &coeff,
        |xi| spec.op.b_value(form, xi),
        &f,
        bounds.as_ref().map(|(a, b)| (a, b)),
    );
    let init = spec.initial.as_ref().unwrap_or(&spec.g);
    let mut u = vec![T::zero(); grid.len()];
    for k in grid.cells() {
        u[k] = spec.g.get(k);
    }
    for (i, &k) in sys.free.iter().enumerate() {
        u[k] = init.get(k).max(sys.lo[i]).min(sys.hi[i]);
    }
    Ok((grid, sys, u))
}

/// Minimizes the discrete energy
/// `Σ_t |t| [a_t (ς² + |∇u_t|²)^{p/2}/p − ⟨𝔹(F_t), ∇u_t⟩]`
/// over grid functions equal to `g` off [`unknown_cells`], projected into
/// `[f₁, f₂]` for the obstacle problem.
///
/// When `ς = 0` and `p ≠ 2` the stages of [`CONTINUATION`] add `δ` to `ς²`
/// before the final stage at `δ = 0`. Each stage runs projected Newton steps
/// with a Barzilai–Borwein gradient fallback.
pub fn solve<T: Real>(spec: &ProblemSpec<T>, opts: &SolveOptions) -> Result<SolveReport<T>> {
    let (grid, sys, mut u) = prepare(spec, opts)?;
    let p = spec.op.p;
    let c0 = spec.op.varsigma * spec.op.varsigma;
    let x0 = sys.values(&u);
    let (g0, _) = sys.gradient(&u, c0);
    let r0 = max_abs(&sys.projected(&x0, &g0));
    let target = (T::lit(opts.tol_rel) * r0).max(T::lit(opts.tol_abs));
    let mut deltas: Vec<f64> = Vec::new();
    if spec.op.varsigma == T::zero() && p != T::lit(2.0) {
        deltas.extend(CONTINUATION);
    }
    deltas.push(0.0);
    let mut prog = Progress { iterations: 0, newton: 0, gradient: 0, budget: opts.max_iter, prev: None };
    let mut schedule = Vec::new();
    if !sys.free.is_empty() {
        for &delta in &deltas {
            let c = c0 + T::lit(delta);
            let t = if delta == 0.0 {
                target
            } else {
                let x = sys.values(&u);
                let (g, _) = sys.gradient(&u, c);
                (T::lit(STAGE_RTOL) * max_abs(&sys.projected(&x, &g))).max(target)
            };
            prog.prev = None;
            let mut st = sys.stage(&mut u, c, t, &mut prog)?;
            st.delta = delta;
            schedule.push(st);
        }
    }
    let residual = schedule.last().map(|s: &StageReport| s.residual).unwrap_or(0.0);
    let meta = SolveMeta {
        kind: spec.kind,
        p: p.to_f64_lossy(),
        varsigma: spec.op.varsigma.to_f64_lossy(),
        unknowns: sys.free.len(),
        iterations: prog.iterations,
        newton_steps: prog.newton,
        gradient_steps: prog.gradient,
        initial_residual: r0.to_f64_lossy(),
        residual,
        tolerance: target.to_f64_lossy(),
        schedule,
    };
    Ok(SolveReport { u: ScalarField::from_values(grid, u)?, meta })
}

/// Unconstrained residual of the discrete Euler–Lagrange equation at the
/// unknowns (scaled by 1/h²), zero elsewhere; `u` lives on [`ProblemSpec::solve_grid`].
pub fn residual_field<T: Real>(spec: &ProblemSpec<T>, u: &ScalarField<T>) -> Result<ScalarField<T>> {
    let (grid, sys, _) = prepare(spec, &SolveOptions::default())?;
    grid.check_same(u.grid())?;
    let c = spec.op.varsigma * spec.op.varsigma;
    let (g, _) = sys.gradient(u.values(), c);
    let s = T::one() / (sys.h * sys.h);
    let mut out = vec![T::zero(); grid.len()];
    for (i, &k) in sys.free.iter().enumerate() {
        out[k] = g[i] * s;
    }
    ScalarField::from_values(grid, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ShapeTag;
    use proptest::prelude::*;

    fn square(n: usize) -> Arc<DomainGrid<f64>> {
        Arc::new(DomainGrid::new(ShapeTag::Square, n, n, 1.0 / n as f64).unwrap())
    }

    fn laplace(grid: &Arc<DomainGrid<f64>>, p: f64, g: ScalarField<f64>) -> ProblemSpec<f64> {
        let op = OperatorSpec::constant(grid.clone(), p, 0.0, 1.0).unwrap();
        ProblemSpec::dirichlet(op, VectorField::zeros(grid.clone()), g)
    }

    fn max_err(u: &ScalarField<f64>, exact: impl Fn(f64, f64) -> f64) -> f64 {
        u.grid().cells().iter().map(|&k| {
            let (x, y) = u.grid().center(k);
            (u.get(k) - exact(x, y)).abs()
        }).fold(0.0, f64::max)
    }

    #[test]
    fn psi_examples() {
        assert_eq!(psi_varsigma((0.3, -0.2), (0.3, -0.2), 0.0, 1.5), 0.0);
        assert_eq!(psi_varsigma((0.0, 0.0), (0.0, 0.0), 0.0, 1.5), 0.0);
        assert!((psi_varsigma((1.0f64, 2.0), (-1.0, 0.5), 0.7, 2.0) - 6.25).abs() < 1e-14);
        assert!((psi_varsigma((1.0f64, 0.0), (0.0, 0.0), 1.0, 4.0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn operator_validation() {
        let g = square(8);
        assert!(OperatorSpec::constant(g.clone(), 1.0, 0.0, 1.0).is_err());
        assert!(OperatorSpec::constant(g.clone(), 3.5, 0.0, 1.0).is_err());
        assert!(OperatorSpec::constant(g.clone(), 2.0, 1.5, 1.0).is_err());
        assert!(OperatorSpec::new(2.0, 0.0, 2.0, ScalarField::constant(g.clone(), 3.0)).is_err());
        assert!(OperatorSpec::new(2.0, 0.0, 0.5, ScalarField::constant(g, 1.0)).is_err());
    }

    #[test]
    fn structure_conditions_hold() {
        let g = square(16);
        for &p in &[1.1, 1.5, 2.0, 2.5, 3.0] {
            for &vs in &[0.0, 0.5, 1.0] {
                let a = ScalarField::from_fn(g.clone(), |x, y| 1.0 + 0.5 * (6.0 * x).sin() * (4.0 * y).cos());
                let op = OperatorSpec::new(p, vs, 2.0, a).unwrap();
                let c = check_structure(&op, 10_000, 7);
                assert_eq!(c.failures, 0, "p = {p}, ς = {vs}: {c:?}");
            }
        }
    }

    #[test]
    fn harmonic_polynomial_is_reproduced() {
        let grid = square(64);
        let g = ScalarField::from_fn(grid.clone(), |x, y| x * x - y * y);
        let spec = laplace(&grid, 2.0, g.clone()).with_initial(ScalarField::zeros(grid.clone()));
        let rep = solve(&spec, &SolveOptions::default()).unwrap();
        assert!(max_err(&rep.u, |x, y| x * x - y * y) < 1e-6, "{:?}", rep.meta);
        let b: Vec<f64> = grid.boundary_cells().iter().map(|&k| g.get(k)).collect();
        let (lo, hi) = b.iter().fold((f64::MAX, f64::MIN), |(a, c), &v| (a.min(v), c.max(v)));
        assert!(grid.interior_cells().iter().all(|&k| rep.u.get(k) >= lo && rep.u.get(k) <= hi));
        assert!(rep.energy().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn radial_p_harmonic_on_annulus() {
        let n = 64;
        let grid = Arc::new(DomainGrid::new(ShapeTag::Annulus, n, n, 2.0 / n as f64).unwrap());
        let p = 3.0f64;
        let e = (p - 2.0) / (p - 1.0);
        let exact = move |x: f64, y: f64| (x * x + y * y).sqrt().powf(e);
        let g = ScalarField::from_fn(grid.clone(), exact);
        let spec = laplace(&grid, p, g).with_initial(ScalarField::constant(grid.clone(), 0.75));
        let rep = solve(&spec, &SolveOptions::default()).unwrap();
        let rel = grid.cells().iter().map(|&k| {
            let (x, y) = grid.center(k);
            (rep.u.get(k) / exact(x, y) - 1.0).abs()
        }).fold(0.0, f64::max);
        assert!(rel < 0.02, "relative error {rel}, {:?}", rep.meta);
        assert_eq!(rep.meta.schedule.len(), CONTINUATION.len() + 1);
        for st in &rep.meta.schedule {
            assert!(st.energy.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    fn smooth_data(grid: &Arc<DomainGrid<f64>>) -> VectorField<f64> {
        VectorField::from_fn(grid.clone(), |x, y| ((3.0 * y).sin() + x, (2.0 * x).cos() * y))
    }

    #[test]
    fn inactive_obstacles_match_dirichlet() {
        let grid = square(32);
        let op = OperatorSpec::constant(grid.clone(), 1.6, 0.0, 1.0).unwrap();
        let f = smooth_data(&grid);
        let g = ScalarField::zeros(grid.clone());
        let free = solve(&ProblemSpec::dirichlet(op.clone(), f.clone(), g.clone()), &SolveOptions::default()).unwrap();
        let lo = ScalarField::constant(grid.clone(), -1e30);
        let hi = ScalarField::constant(grid.clone(), 1e30);
        let obs = solve(&ProblemSpec::double_obstacle(op, f, g, lo, hi), &SolveOptions::default()).unwrap();
        let d = free.u.values().iter().zip(obs.u.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-8, "difference {d}");
    }

    #[test]
    fn active_obstacles_are_respected() {
        let grid = square(32);
        let op = OperatorSpec::constant(grid.clone(), 2.0, 0.5, 1.0).unwrap();
        let f = VectorField::from_fn(grid.clone(), |x, y| {
            (4.0 * (std::f64::consts::TAU * x).sin(), 4.0 * (std::f64::consts::TAU * y).sin())
        });
        let g = ScalarField::zeros(grid.clone());
        let f1 = ScalarField::from_fn(grid.clone(), |x, _| -0.02 - 0.02 * x);
        let f2 = ScalarField::from_fn(grid.clone(), |_, y| 0.02 + 0.02 * y);
        let spec = ProblemSpec::double_obstacle(op, f, g, f1.clone(), f2.clone());
        let rep = solve(&spec, &SolveOptions::default()).unwrap();
        let r = residual_field(&spec, &rep.u).unwrap();
        let (mut n_lo, mut n_hi, mut worst) = (0, 0, 0.0f64);
        for k in grid.interior_cells() {
            let u = rep.u.get(k);
            assert!(u >= f1.get(k) && u <= f2.get(k));
            if u == f1.get(k) {
                n_lo += 1;
            } else if u == f2.get(k) {
                n_hi += 1;
            }
            if u > f1.get(k) + 1e-8 && u < f2.get(k) - 1e-8 {
                worst = worst.max(r.get(k).abs());
            }
        }
        assert!(n_lo > 0 && n_hi > 0, "obstacles inactive: {n_lo} {n_hi}");
        assert!(worst <= 1e-6, "complementarity residual {worst}");
    }

    #[test]
    fn infeasible_and_strict_are_rejected() {
        let grid = square(8);
        let op = OperatorSpec::constant(grid.clone(), 2.5, 0.0, 1.0).unwrap();
        let g = ScalarField::zeros(grid.clone());
        let f = VectorField::zeros(grid.clone());
        let hi = ScalarField::constant(grid.clone(), -0.1);
        let lo = ScalarField::constant(grid.clone(), -1.0);
        let e = solve(&ProblemSpec::double_obstacle(op.clone(), f.clone(), g.clone(), lo, hi), &SolveOptions::default());
        assert!(matches!(e, Err(Error::Infeasible(_))));
        let strict = SolveOptions { paper_strict: true, ..SolveOptions::default() };
        assert!(solve(&ProblemSpec::dirichlet(op, f, g), &strict).is_err());
    }

    #[test]
    fn reference_of_a_harmonic_trace_is_itself() {
        let grid = square(32);
        let u = ScalarField::from_fn(grid.clone(), |x, y| 0.7 * x - 0.2 * y + 0.1);
        let op = OperatorSpec::new(2.0, 0.0, 2.0, ScalarField::constant(grid.clone(), 1.5)).unwrap();
        let region = grid.ball_cells(grid.index(10, 12), 6.0 / 32.0);
        let spec = ProblemSpec::reference(op.clone(), u.clone(), region.clone());
        let rep = solve(&spec, &SolveOptions::default()).unwrap();
        for &k in &region {
            assert!((rep.u.get(k) - u.get(k)).abs() < 1e-12);
        }
        let frozen = solve(&ProblemSpec::frozen(op, u.clone(), region.clone()), &SolveOptions::default()).unwrap();
        assert_eq!(frozen.u.grid().mask_count(), region.len());
    }

    #[test]
    fn bmo_examples() {
        let grid = square(32);
        let centers: Vec<usize> = (0..32 * 32).step_by(37).collect();
        let c = OperatorSpec::constant(grid.clone(), 1.7, 0.3, 1.3).unwrap();
        assert_eq!(bmo_seminorm(&c, 2.0, 0.25, 8, &centers).unwrap(), 0.0);
        let sine = |eps: f64| {
            let a = ScalarField::from_fn(grid.clone(), |x, _| 1.0 + eps * (std::f64::consts::TAU * x).sin());
            bmo_seminorm(&OperatorSpec::new(2.0, 0.0, 1.2, a).unwrap(), 1.0, 0.25, 8, &centers).unwrap()
        };
        let (b1, b2) = (sine(0.1), sine(0.01));
        assert!(b1 > 0.0 && (b1 / b2 - 10.0).abs() < 1e-6, "{b1} {b2}");
        let eps = 0.1;
        let a = ScalarField::from_fn(grid.clone(), |x, y| {
            if ((x * 2.0).floor() + (y * 2.0).floor()) as i64 % 2 == 0 { 1.0 + eps } else { 1.0 - eps }
        });
        let op = OperatorSpec::new(2.0, 0.0, 1.2, a).unwrap();
        let b = bmo_seminorm(&op, 1.0, 0.0625, 8, &[]).unwrap();
        assert!((b / eps - 1.0).abs() < 0.2, "checkerboard {b}");
        assert!(bmo_seminorm(&op, 1.0, 0.01, 8, &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn elementary_power_sum(xs in prop::collection::vec(0.0f64..10.0, 2..=5), si in 0usize..4) {
            let s = [0.5, 1.0, 2.0, 3.7][si];
            let m = xs.len() as f64;
            let lhs = xs.iter().sum::<f64>().powf(s);
            let rhs = 1f64.max(m.powf(s - 1.0)) * xs.iter().map(|x| x.powf(s)).sum::<f64>();
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn comparison_inequality_on_random_fields(
            pairs in prop::collection::vec(((-3.0f64..3.0, -3.0f64..3.0), (-3.0f64..3.0, -3.0f64..3.0)), 1..40),
            p in 1.05f64..3.0,
            vs in 0.0f64..1.0,
            ei in 0usize..2,
        ) {
            let eps: f64 = [0.5, 0.1][ei];
            let n = pairs.len() as f64;
            let (mut lhs, mut a, mut b) = (0.0, 0.0, 0.0);
            for &(x1, x2) in &pairs {
                lhs += norm2((x1.0 - x2.0, x1.1 - x2.1)).powf(p) / n;
                a += (vs.powf(p) + norm2(x1).powf(p)) / n;
                b += psi_varsigma(x1, x2, vs, p) / n;
            }
            let c = 1f64.max(8.0 * eps.powf(1.0 - 2.0 / p));
            prop_assert!(lhs <= eps * a + c * b + 1e-12);
        }

        #[test]
        fn psi_at_p2_is_squared_distance(x1 in (-5.0f64..5.0, -5.0f64..5.0), x2 in (-5.0f64..5.0, -5.0f64..5.0), vs in 0.0f64..1.0) {
            let d2 = (x1.0 - x2.0).powi(2) + (x1.1 - x2.1).powi(2);
            prop_assert!((psi_varsigma(x1, x2, vs, 2.0) - d2).abs() <= 1e-12 * (1.0 + d2));
            prop_assert!(psi_varsigma(x1, x2, vs, 2.7) >= 0.0);
            prop_assert!((psi_varsigma(x1, x2, vs, 1.5) - psi_varsigma(x2, x1, vs, 1.5)).abs() <= 1e-12 * (1.0 + d2));
        }
    }
}
