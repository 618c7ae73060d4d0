//! Empirical checks of the comparison ingredients, the good-λ level-set
//! inequalities for fractional-maximal distributions, and the norm comparisons
//! they imply.
//!
//! Existential constants of the theory (c_ε, C, σ₀, the reverse Hölder
//! exponent) are fitted on lattice data and reported together with the
//! parameters that produced them.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{LevelGrid, SortedLevels};
use crate::funcspaces::NormSpec;
use crate::grid::{self, DomainGrid, ScalarField, VectorField, DIM};
use crate::maximal::{frac_maximal, BallSummer, RadiusSet};
use crate::numeric::{lattice_radius_sq, pow_or_zero, BallStencil, DoubleSum, Real};
use crate::pde::{self, OperatorSpec, ProblemKind, ProblemSpec, SolveOptions, SolveReport};
use crate::{Error, Result};

/// Step of the γ sweep of [`gamma_sweep`].
pub const GAMMA_STEP: f64 = 0.05;
pub const GAMMA_MAX: f64 = 8.0;
/// Mode-B σ₀ doublings before the search gives up.
pub const SIGMA0_DOUBLINGS: usize = 20;
pub const SIGMA0_STABLE: f64 = 0.1;
/// Highest sine frequency of the random data of [`p1_instance`].
pub const DRAW_KMAX: usize = 8;

fn dim<T: Real>() -> T {
    T::from_usize_exact(DIM)
}

/// 3ⁿ, the lower end of the σ range in the truncation and density checks.
pub fn three_pow_n<T: Real>() -> T {
    T::lit(3.0).powi(DIM as i32)
}

fn mean_on<T: Real>(f: &ScalarField<T>, cells: &[usize]) -> T {
    cells.iter().fold(DoubleSum::zero(), |s, &k| s.add_scalar(f.get(k))).div_count(cells.len())
}

/// `(⨍ φ^γ)^{1/γ}`, scaled by the maximum so that constant data give the exact constant.
fn gamma_mean<T: Real>(phi: &ScalarField<T>, cells: &[usize], gamma: T) -> T {
    let m = cells.iter().fold(T::zero(), |m, &k| m.max(phi.get(k).abs()));
    if m == T::zero() {
        return T::zero();
    }
    let s = cells
        .iter()
        .fold(DoubleSum::zero(), |s, &k| s.add_scalar(pow_or_zero(phi.get(k).abs() / m, gamma)));
    m * s.div_count(cells.len()).powf(T::one() / gamma)
}

fn lattice_ball_measure<T: Real>(grid: &DomainGrid<T>, r: T) -> Result<T> {
    let st = BallStencil::new(lattice_radius_sq(r, grid.h())).ok_or(Error::RadiusTooSmall {
        radius: r.to_f64_lossy(),
        h: grid.h().to_f64_lossy(),
    })?;
    Ok(T::from_usize_exact(st.count) * grid.cell_measure())
}

fn check_eps<T: Real>(eps: T) -> Result<()> {
    if !(eps > T::zero() && eps < T::one()) {
        return Err(Error::InvalidArgument(format!("ε = {eps} must lie in (0, 1)")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// quasi-triangle and reverse Hölder classes

#[derive(Clone, Debug, Serialize)]
pub struct QuasiTriangleReport {
    pub c_tilde: f64,
    pub cells: usize,
    pub violations: usize,
    /// Largest `lhs / (c̃·rhs)` over cells and the three inequalities.
    pub max_ratio: f64,
    pub worst_cell: Option<usize>,
    pub passed: bool,
}

/// Checks `G ≤ c̃(φ+ψ)`, `φ ≤ c̃(G+ψ)` and `ψ ≤ c̃(G+φ)` on every cell of `region`.
pub fn check_quasi_triangle<T: Real>(
    g: &ScalarField<T>,
    phi: &ScalarField<T>,
    psi: &ScalarField<T>,
    region: &[usize],
    c_tilde: T,
) -> Result<QuasiTriangleReport> {
    g.grid().check_same(phi.grid())?;
    g.grid().check_same(psi.grid())?;
    let slack = 1.0 + 16.0 * f64::EPSILON;
    let ratio = |a: T, b: T, c: T| -> f64 {
        let (a, rhs) = (a.to_f64_lossy(), (c_tilde * (b + c)).to_f64_lossy());
        if a <= 0.0 {
            0.0
        } else if rhs <= 0.0 {
            f64::INFINITY
        } else {
            a / rhs
        }
    };
    let mut worst = (0.0f64, None);
    let mut violations = 0;
    for &k in region {
        let (a, b, c) = (g.get(k), phi.get(k), psi.get(k));
        let r = ratio(a, b, c).max(ratio(b, a, c)).max(ratio(c, a, b));
        if r > slack {
            violations += 1;
        }
        if r > worst.0 || worst.1.is_none() {
            worst = (r.max(worst.0), Some(k));
        }
    }
    Ok(QuasiTriangleReport {
        c_tilde: c_tilde.to_f64_lossy(),
        cells: region.len(),
        violations,
        max_ratio: worst.0,
        worst_cell: worst.1,
        passed: violations == 0,
    })
}

/// `(⨍_{Ω_r} φ^γ)^{1/γ} / ⨍_{Ω_{2r}} φ`; `None` when the large-ball mean vanishes.
pub fn reverse_holder_ratio<T: Real>(phi: &ScalarField<T>, center: usize, r: T, gamma: T) -> Option<T> {
    let g = phi.grid();
    let small = g.ball_cells(center, r);
    let big = g.ball_cells(center, r + r);
    if small.is_empty() || big.is_empty() {
        return None;
    }
    let den = mean_on(&phi.abs(), &big);
    if den == T::zero() {
        return None;
    }
    Some(gamma_mean(phi, &small, gamma) / den)
}

#[derive(Clone, Debug, Serialize)]
pub struct RatioRow {
    pub center: usize,
    pub radius: f64,
    /// `None` marks a skipped ball (φ ≡ 0 on Ω_{2r}).
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReverseHolderTable {
    pub gamma: f64,
    pub rows: Vec<RatioRow>,
    pub sup_ratio: f64,
    pub skipped: usize,
}

pub fn check_reverse_holder<T: Real>(
    phi: &ScalarField<T>,
    gamma: T,
    balls: &[(usize, T)],
) -> Result<ReverseHolderTable> {
    if !(gamma > T::one()) {
        return Err(Error::InvalidArgument(format!("reverse Hölder exponent γ = {gamma} must exceed 1")));
    }
    let rows: Vec<RatioRow> = balls
        .par_iter()
        .map(|&(c, r)| RatioRow {
            center: c,
            radius: r.to_f64_lossy(),
            ratio: reverse_holder_ratio(phi, c, r, gamma).map(|x| x.to_f64_lossy()),
        })
        .collect();
    let sup_ratio = rows.iter().filter_map(|r| r.ratio).fold(0.0, f64::max);
    let skipped = rows.iter().filter(|r| r.ratio.is_none()).count();
    Ok(ReverseHolderTable { gamma: gamma.to_f64_lossy(), rows, sup_ratio, skipped })
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaSweep {
    pub cap: f64,
    /// `(γ, sup ratio)` for every γ tried, in increasing order.
    pub curve: Vec<(f64, f64)>,
    /// Largest γ of the sweep whose sup ratio stays at or below the cap.
    pub gamma: Option<f64>,
    pub sup_ratio: Option<f64>,
    /// Integrability exponent `Θ = γp` of `(ς + |∇v|)` when φ is a p-th power.
    pub theta: Option<f64>,
    /// `p₀ = pΘ/(Θ − p)`.
    pub p0: Option<f64>,
    pub skipped: usize,
}

/// Sweeps γ = 1.05, 1.10, … up to [`GAMMA_MAX`] over samples `(φ, center, r)`.
///
/// The ratio is nondecreasing in γ ball by ball, so the sweep stops at the
/// first γ whose sup ratio exceeds `cap`.
pub fn gamma_sweep<T: Real>(samples: &[(&ScalarField<T>, usize, T)], p: T, cap: T) -> GammaSweep {
    let steps = ((GAMMA_MAX - 1.0) / GAMMA_STEP).round() as usize;
    let mut curve = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut skipped = 0;
    for s in 1..=steps {
        let gamma = 1.0 + GAMMA_STEP * s as f64;
        let ratios: Vec<Option<T>> = samples
            .par_iter()
            .map(|&(phi, c, r)| reverse_holder_ratio(phi, c, r, T::lit(gamma)))
            .collect();
        skipped = ratios.iter().filter(|r| r.is_none()).count();
        let sup = ratios.iter().flatten().fold(T::zero(), |m, &x| m.max(x)).to_f64_lossy();
        curve.push((gamma, sup));
        if sup > cap.to_f64_lossy() {
            break;
        }
        best = Some((gamma, sup));
    }
    let p = p.to_f64_lossy();
    GammaSweep {
        cap: cap.to_f64_lossy(),
        curve,
        gamma: best.map(|b| b.0),
        sup_ratio: best.map(|b| b.1),
        theta: best.map(|b| b.0 * p),
        p0: best.map(|b| p * b.0 / (b.0 - 1.0)),
        skipped,
    }
}

// ---------------------------------------------------------------------------
// comparison pairs

/// Which local comparison the builder realizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    /// `⨍_{B_r} ψ ≤ ε ⨍_{B_{2r}} G + c_ε ⨍_{B_{2r}} F` with φ from the reference solution.
    Averaged,
    /// The averaged bound for the frozen-coefficient solution, plus
    /// `‖φ‖_{L∞(B_r)} ≤ C ⨍_{B_{2r}} (G + F)`.
    Bounded,
}

/// `(G, φ, ψ)` on a surface ball, stored on the lattice of the pair and zero
/// outside `region`.
#[derive(Clone, Debug)]
pub struct Triplet<T> {
    pub center: usize,
    pub radius: T,
    pub region: Vec<usize>,
    pub g: ScalarField<T>,
    pub phi: ScalarField<T>,
    pub psi: ScalarField<T>,
}

pub trait TripletBuilder<T>: Send + Sync {
    /// Triplet for the ball `B_r(ν)`: lives on `Ω_{2r}(ν)` for
    /// [`LocalMode::Averaged`] and on `Ω_{3r/2}(ν)` for [`LocalMode::Bounded`].
    fn build(&self, center: usize, radius: T, mode: LocalMode) -> Result<Triplet<T>>;
}

/// `v` solves `div 𝔸(x, ∇v) = 0` on `Ω_{2r}(ν)` with `v = u` on its boundary;
/// `w` solves the same problem with the coefficient frozen to its mean over
/// `Ω_{3r/2}(ν)` and `w = v` on that ball's boundary.
#[derive(Clone, Debug)]
pub struct SolutionBuilder<T> {
    pub op: OperatorSpec<T>,
    pub u: ScalarField<T>,
    pub opts: SolveOptions,
}

impl<T: Real> SolutionBuilder<T> {
    fn triplet(&self, center: usize, radius: T, z: &ScalarField<T>) -> Result<Triplet<T>> {
        let base = self.u.grid().clone();
        let rg = z.grid().clone();
        let ur = self.u.with_grid(rg.clone())?;
        let (gu, gz) = (grid::gradient(&ur), grid::gradient(z));
        let (p, s) = (self.op.p, self.op.varsigma);
        let region = rg.cells();
        let n = base.len();
        let (mut g, mut phi, mut psi) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
        for &k in &region {
            let (a, b) = (gu.get(k), gz.get(k));
            let na = (a.0 * a.0 + a.1 * a.1).sqrt();
            let nb = (b.0 * b.0 + b.1 * b.1).sqrt();
            let (dx, dy) = (a.0 - b.0, a.1 - b.1);
            g[k] = (s + na).powf(p);
            phi[k] = (s + nb).powf(p);
            psi[k] = pow_or_zero((dx * dx + dy * dy).sqrt(), p);
        }
        Ok(Triplet {
            center,
            radius,
            region,
            g: ScalarField::from_values(base.clone(), g)?,
            phi: ScalarField::from_values(base.clone(), phi)?,
            psi: ScalarField::from_values(base, psi)?,
        })
    }
}

impl<T: Real> TripletBuilder<T> for SolutionBuilder<T> {
    fn build(&self, center: usize, radius: T, mode: LocalMode) -> Result<Triplet<T>> {
        let base = self.u.grid().clone();
        let big = base.ball_cells(center, radius + radius);
        if big.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let v = pde::solve(&ProblemSpec::reference(self.op.clone(), self.u.clone(), big), &self.opts)?.u;
        match mode {
            LocalMode::Averaged => self.triplet(center, radius, &v),
            LocalMode::Bounded => {
                let mid = base.ball_cells(center, T::lit(1.5) * radius);
                let vb = ScalarField::from_values(base.clone(), v.values().to_vec())?;
                let w = pde::solve(&ProblemSpec::frozen(self.op.clone(), vb, mid), &self.opts)?.u;
                self.triplet(center, radius, &w)
            }
        }
    }
}

type TripletKey = (usize, u64, LocalMode);

/// Maximal functions of the two functionals at one order α.
#[derive(Clone, Debug)]
pub struct Maximals<T> {
    pub alpha: T,
    pub mg: ScalarField<T>,
    pub mf: ScalarField<T>,
    pub levels_g: SortedLevels<T>,
    pub levels_f: SortedLevels<T>,
}

/// Datum functional `F`, solution functional `G`, and a procedure producing
/// the local triplets `(G, φ, ψ)`.
pub struct ComparisonPair<T> {
    pub f: ScalarField<T>,
    pub g: ScalarField<T>,
    pub c_tilde: T,
    pub radii: RadiusSet<T>,
    builder: Option<Arc<dyn TripletBuilder<T>>>,
    triplets: Mutex<HashMap<TripletKey, Arc<Triplet<T>>>>,
    maximals: Mutex<HashMap<u64, Arc<Maximals<T>>>>,
}

impl<T: Real> std::fmt::Debug for ComparisonPair<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComparisonPair")
            .field("c_tilde", &self.c_tilde)
            .field("cells", &self.f.grid().mask_count())
            .field("builder", &self.builder.is_some())
            .finish()
    }
}

impl<T: Real> ComparisonPair<T> {
    pub fn from_fields(f: ScalarField<T>, g: ScalarField<T>, c_tilde: T) -> Result<Self> {
        f.grid().check_same(g.grid())?;
        if f.values().iter().chain(g.values()).any(|&v| !(v >= T::zero())) {
            return Err(Error::InvalidArgument("comparison functionals must be nonnegative".into()));
        }
        if !(c_tilde >= T::one()) {
            return Err(Error::InvalidArgument(format!("quasi-triangle constant c̃ = {c_tilde} below 1")));
        }
        let radii = RadiusSet::default_for(f.grid());
        Ok(Self {
            f,
            g,
            c_tilde,
            radii,
            builder: None,
            triplets: Mutex::new(HashMap::new()),
            maximals: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_builder(mut self, b: Arc<dyn TripletBuilder<T>>) -> Self {
        self.builder = Some(b);
        self.triplets.lock().expect("cache lock").clear();
        self
    }

    pub fn with_radii(mut self, radii: RadiusSet<T>) -> Self {
        self.radii = radii;
        self.maximals.lock().expect("cache lock").clear();
        self
    }

    /// `F = |F|^p + |∇g|^p`, `G = (ς + |∇u|)^p` with `c̃ = 3^{p−1}`.
    pub fn p1(spec: &ProblemSpec<T>, sol: &SolveReport<T>) -> Result<Self> {
        if spec.kind != ProblemKind::Dirichlet {
            return Err(Error::InvalidArgument(format!("P1 pairing expects a dirichlet problem, got {}", spec.kind)));
        }
        let p = spec.op.p;
        let dg = grid::gradient(&spec.g).norm();
        let f = spec.f.norm().zip_map(&dg, |a, b| pow_or_zero(a, p) + pow_or_zero(b, p))?;
        Self::from_solution(spec, sol, f)
    }

    /// `F = ς^p + |F|^p + |∇f₁|^p + |∇f₂|^p`, `G = (ς + |∇u|)^p`.
    pub fn p2(spec: &ProblemSpec<T>, sol: &SolveReport<T>) -> Result<Self> {
        let Some((f1, f2)) = &spec.obstacles else {
            return Err(Error::InvalidArgument("P2 pairing expects a double obstacle problem".into()));
        };
        let p = spec.op.p;
        let sp = pow_or_zero(spec.op.varsigma, p);
        let d1 = grid::gradient(f1).norm();
        let d2 = grid::gradient(f2).norm();
        let f = spec
            .f
            .norm()
            .zip_map(&d1, |a, b| sp + pow_or_zero(a, p) + pow_or_zero(b, p))?
            .zip_map(&d2, |a, b| a + pow_or_zero(b, p))?;
        Self::from_solution(spec, sol, f)
    }

    fn from_solution(spec: &ProblemSpec<T>, sol: &SolveReport<T>, f: ScalarField<T>) -> Result<Self> {
        if spec.region.is_some() {
            return Err(Error::InvalidArgument("comparison pairs are built on the whole domain".into()));
        }
        let (p, s) = (spec.op.p, spec.op.varsigma);
        let u = sol.u.with_grid(spec.g.grid().clone())?;
        let g = grid::gradient(&u).norm().map(|a| (s + a).powf(p));
        let c_tilde = T::lit(3.0).powf(p - T::one());
        let builder = SolutionBuilder { op: spec.op.clone(), u, opts: SolveOptions::default() };
        Ok(Self::from_fields(f, g, c_tilde)?.with_builder(Arc::new(builder)))
    }

    pub fn grid(&self) -> &Arc<DomainGrid<T>> {
        self.f.grid()
    }

    /// Builds (or fetches) the triplets of `balls`, in parallel.
    pub fn triplets(&self, balls: &[(usize, T)], mode: LocalMode) -> Result<Vec<Arc<Triplet<T>>>> {
        let b = self
            .builder
            .clone()
            .ok_or_else(|| Error::Unavailable("comparison pair has no triplet builder".into()))?;
        balls
            .par_iter()
            .map(|&(c, r)| {
                let key = (c, r.to_f64_lossy().to_bits(), mode);
                if let Some(t) = self.triplets.lock().expect("cache lock").get(&key) {
                    return Ok(t.clone());
                }
                let t = Arc::new(b.build(c, r, mode)?);
                self.triplets.lock().expect("cache lock").insert(key, t.clone());
                Ok(t)
            })
            .collect()
    }

    pub fn maximals(&self, alpha: T) -> Result<Arc<Maximals<T>>> {
        let key = alpha.to_f64_lossy().to_bits();
        if let Some(m) = self.maximals.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let mg = frac_maximal(&self.g, alpha, &self.radii)?.field;
        let mf = frac_maximal(&self.f, alpha, &self.radii)?.field;
        let cells = self.grid().cells();
        let m = Arc::new(Maximals {
            alpha,
            levels_g: SortedLevels::new(&mg, &cells),
            levels_f: SortedLevels::new(&mf, &cells),
            mg,
            mf,
        });
        self.maximals.lock().expect("cache lock").insert(key, m.clone());
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// ball sampling and data

/// `interior` random interior centers and `boundary` random boundary centers,
/// each paired with every radius of {2h, 4h, 8h, …} not exceeding `r0/2`.
pub fn sample_balls<T: Real>(
    grid: &DomainGrid<T>,
    seed: u64,
    interior: usize,
    boundary: usize,
    r0: T,
) -> Result<Vec<(usize, T)>> {
    let h = grid.h();
    let mut radii = Vec::new();
    let mut r = h + h;
    while r <= r0 / T::lit(2.0) * (T::one() + T::lit(1e-12)) {
        radii.push(r);
        r = r + r;
    }
    if radii.is_empty() {
        return Err(Error::RadiusTooSmall { radius: (r0 / T::lit(2.0)).to_f64_lossy(), h: (h + h).to_f64_lossy() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |cells: Vec<usize>, m: usize| -> Vec<usize> {
        let m = m.min(cells.len());
        let mut idx: Vec<usize> = sample(&mut rng, cells.len(), m).into_iter().map(|i| cells[i]).collect();
        idx.sort_unstable();
        idx
    };
    let mut centers = pick(grid.interior_cells(), interior);
    centers.extend(pick(grid.boundary_cells(), boundary));
    Ok(centers.into_iter().flat_map(|c| radii.iter().map(move |&r| (c, r))).collect())
}

/// Random smooth vector field `F = ∇φ + (∂_yψ, −∂_xψ)` on the unit square with
/// `φ = Σ a_{ml} sin(mπx) sin(lπy) / (π|(m,l)|)` and `ψ` alike, `1 ≤ m, l ≤ kmax`.
///
/// Both potentials vanish on the boundary of the unit square and each part
/// carries L² energy ½ there, so `F` has unit energy.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SmoothDraw {
    pub seed: u64,
    pub kmax: usize,
    grad: Vec<f64>,
    curl: Vec<f64>,
}

impl SmoothDraw {
    pub fn new(seed: u64, kmax: usize) -> Self {
        let kmax = kmax.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..kmax * kmax).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // ∫|∇φ|² = Σ a²/4 over the unit square.
            let s = (2.0 / v.iter().map(|a| a * a).sum::<f64>().max(1e-300)).sqrt();
            v.iter_mut().for_each(|a| *a *= s);
            v
        };
        let grad = draw(&mut rng);
        let curl = draw(&mut rng);
        Self { seed, kmax, grad, curl }
    }

    /// Gradient part and curl part at `(x, y)`.
    pub fn parts(&self, x: f64, y: f64) -> ((f64, f64), (f64, f64)) {
        let pi = std::f64::consts::PI;
        let (mut g, mut c) = ((0.0, 0.0), (0.0, 0.0));
        for l in 1..=self.kmax {
            for m in 1..=self.kmax {
                let idx = (l - 1) * self.kmax + (m - 1);
                let kn = ((m * m + l * l) as f64).sqrt();
                let (sx, cx) = (m as f64 * pi * x).sin_cos();
                let (sy, cy) = (l as f64 * pi * y).sin_cos();
                let dx = m as f64 * cx * sy / kn;
                let dy = l as f64 * sx * cy / kn;
                g.0 += self.grad[idx] * dx;
                g.1 += self.grad[idx] * dy;
                c.0 += self.curl[idx] * dy;
                c.1 -= self.curl[idx] * dx;
            }
        }
        (g, c)
    }

    pub fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        let (g, c) = self.parts(x, y);
        (g.0 + c.0, g.1 + c.1)
    }

    pub fn field<T: Real>(&self, grid: Arc<DomainGrid<T>>) -> VectorField<T> {
        VectorField::from_fn(grid, |x, y| {
            let (a, b) = self.eval(x.to_f64_lossy(), y.to_f64_lossy());
            (T::lit(a), T::lit(b))
        })
    }
}

/// Dirichlet problem with `a ≡ 1`, `g = 0` and `F` from [`SmoothDraw`].
pub fn p1_instance<T: Real>(grid: Arc<DomainGrid<T>>, p: T, varsigma: T, seed: u64) -> Result<ProblemSpec<T>> {
    let op = OperatorSpec::constant(grid.clone(), p, varsigma, T::one())?;
    let f = SmoothDraw::new(seed, DRAW_KMAX).field(grid.clone());
    Ok(ProblemSpec::dirichlet(op, f, ScalarField::zeros(grid)))
}

/// Double obstacle problem with the data of [`p1_instance`] and tilted
/// obstacles `f₁ = −τ(1 + x/2)`, `f₂ = τ(1 + y/2)`.
pub fn p2_instance<T: Real>(
    grid: Arc<DomainGrid<T>>,
    p: T,
    varsigma: T,
    seed: u64,
    tau: T,
) -> Result<ProblemSpec<T>> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument(format!("obstacle level τ = {tau} must be positive")));
    }
    let base = p1_instance(grid.clone(), p, varsigma, seed)?;
    let half = T::lit(0.5);
    let f1 = ScalarField::from_fn(grid.clone(), |x, _| -tau * (T::one() + half * x));
    let f2 = ScalarField::from_fn(grid, |_, y| tau * (T::one() + half * y));
    Ok(ProblemSpec::double_obstacle(base.op, base.f, base.g, f1, f2))
}

// ---------------------------------------------------------------------------
// local and global comparison

#[derive(Clone, Debug, Serialize)]
pub struct LocalRow {
    pub center: usize,
    pub radius: f64,
    /// ⨍_{Ω_r} ψ.
    pub psi_mean: f64,
    /// ⨍_{Ω_{2r}} G.
    pub g_mean: f64,
    /// ⨍_{Ω_{2r}} F.
    pub f_mean: f64,
    /// ‖φ‖_{L∞(Ω_r)} / ⨍_{Ω_{2r}} (G + F), bounded mode only.
    pub linf_ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LocalComparisonTable {
    pub mode: LocalMode,
    pub eps: Vec<f64>,
    /// Smallest c_ε per ε; `None` when some ball has ⨍F = 0 but a positive excess.
    pub c_eps: Vec<Option<f64>>,
    pub linf_constant: Option<f64>,
    pub rows: Vec<LocalRow>,
}

impl LocalComparisonTable {
    pub fn c_for(&self, eps: f64) -> Option<f64> {
        self.eps.iter().position(|&e| e == eps).and_then(|i| self.c_eps[i])
    }

    pub fn all_finite(&self) -> bool {
        self.c_eps.iter().all(|c| c.is_some())
    }
}

fn local_row<T: Real>(pair: &ComparisonPair<T>, t: &Triplet<T>, mode: LocalMode) -> LocalRow {
    let grid = pair.grid();
    let small = grid.ball_cells(t.center, t.radius);
    let big = grid.ball_cells(t.center, t.radius + t.radius);
    let gm = mean_on(&pair.g, &big);
    let fm = mean_on(&pair.f, &big);
    let linf_ratio = (mode == LocalMode::Bounded).then(|| {
        let sup = small.iter().fold(T::zero(), |m, &k| m.max(t.phi.get(k)));
        let den = gm + fm;
        if sup == T::zero() {
            0.0
        } else if den == T::zero() {
            f64::INFINITY
        } else {
            (sup / den).to_f64_lossy()
        }
    });
    LocalRow {
        center: t.center,
        radius: t.radius.to_f64_lossy(),
        psi_mean: mean_on(&t.psi, &small).to_f64_lossy(),
        g_mean: gm.to_f64_lossy(),
        f_mean: fm.to_f64_lossy(),
        linf_ratio,
    }
}

/// Fits c_ε in `⨍_{Ω_r} ψ ≤ ε ⨍_{Ω_{2r}} G + c_ε ⨍_{Ω_{2r}} F` over `balls`.
pub fn check_local_comparison<T: Real>(
    pair: &ComparisonPair<T>,
    mode: LocalMode,
    eps: &[T],
    balls: &[(usize, T)],
) -> Result<LocalComparisonTable> {
    for &e in eps {
        check_eps(e)?;
    }
    let ts = pair.triplets(balls, mode)?;
    let rows: Vec<LocalRow> = ts.iter().map(|t| local_row(pair, t, mode)).collect();
    let c_eps = eps
        .iter()
        .map(|&e| {
            let e = e.to_f64_lossy();
            rows.iter().try_fold(0.0f64, |c, r| {
                let excess = r.psi_mean - e * r.g_mean;
                if excess <= 0.0 {
                    Some(c)
                } else if r.f_mean > 0.0 {
                    Some(c.max(excess / r.f_mean))
                } else {
                    None
                }
            })
        })
        .collect();
    let linf_constant = match mode {
        LocalMode::Averaged => None,
        LocalMode::Bounded => {
            let sup = rows.iter().filter_map(|r| r.linf_ratio).fold(0.0, f64::max);
            sup.is_finite().then_some(sup)
        }
    };
    Ok(LocalComparisonTable { mode, eps: eps.iter().map(|e| e.to_f64_lossy()).collect(), c_eps, linf_constant, rows })
}

/// Smallest C with `⨍_Ω F ≤ C ⨍_Ω G`.
pub fn check_global_comparison<T: Real>(pair: &ComparisonPair<T>) -> Result<T> {
    let cells = pair.grid().cells();
    let gm = mean_on(&pair.g, &cells);
    if gm == T::zero() {
        return Err(Error::ZeroNorm("G vanishes on Ω".into()));
    }
    Ok(mean_on(&pair.f, &cells) / gm)
}

/// Reverse Hölder sweep on the φ of the pair's triplets.
pub fn pair_gamma_sweep<T: Real>(
    pair: &ComparisonPair<T>,
    mode: LocalMode,
    balls: &[(usize, T)],
    p: T,
    cap: T,
) -> Result<GammaSweep> {
    let ts = pair.triplets(balls, mode)?;
    let samples: Vec<(&ScalarField<T>, usize, T)> = ts.iter().map(|t| (&t.phi, t.center, t.radius)).collect();
    Ok(gamma_sweep(&samples, p, cap))
}

/// Quasi-triangle check over every triplet of `balls`, merged into one report.
pub fn pair_quasi_triangle<T: Real>(
    pair: &ComparisonPair<T>,
    mode: LocalMode,
    balls: &[(usize, T)],
) -> Result<QuasiTriangleReport> {
    let ts = pair.triplets(balls, mode)?;
    let mut out = QuasiTriangleReport {
        c_tilde: pair.c_tilde.to_f64_lossy(),
        cells: 0,
        violations: 0,
        max_ratio: 0.0,
        worst_cell: None,
        passed: true,
    };
    for t in ts {
        let r = check_quasi_triangle(&t.g, &t.phi, &t.psi, &t.region, pair.c_tilde)?;
        out.cells += r.cells;
        out.violations += r.violations;
        if r.max_ratio > out.max_ratio || out.worst_cell.is_none() {
            out.max_ratio = r.max_ratio.max(out.max_ratio);
            out.worst_cell = r.worst_cell;
        }
        out.passed &= r.passed;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// level-set checks

#[derive(Clone, Debug, Serialize)]
pub struct DecayRow {
    pub sigma: f64,
    /// d_G^α(Ω; σλ).
    pub lhs: f64,
    /// (κ/σ)^{n/(n−α)} diam(Ω)ⁿ.
    pub bound_unit: f64,
    pub c_required: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub alpha: f64,
    pub kappa: f64,
    pub lambda: f64,
    /// Some cell of Ω has M_α F ≤ κλ.
    pub hypothesis_met: bool,
    pub rows: Vec<DecayRow>,
}

impl DecayReport {
    pub fn c_sup(&self) -> Option<f64> {
        self.hypothesis_met.then(|| self.rows.iter().map(|r| r.c_required).fold(0.0, f64::max))
    }
}

/// Global decay `d_G^α(Ω; σλ) ≤ C (κ/σ)^{n/(n−α)} diam(Ω)ⁿ`, checked only when
/// the level set {M_α F ≤ κλ} meets Ω.
pub fn check_level_decay<T: Real>(
    pair: &ComparisonPair<T>,
    alpha: T,
    kappa: T,
    lambda: T,
    sigmas: &[T],
) -> Result<DecayReport> {
    if !(alpha >= T::zero() && alpha < dim()) {
        return Err(Error::AlphaRange(alpha.to_f64_lossy()));
    }
    if !(kappa > T::zero() && lambda > T::zero()) || sigmas.iter().any(|&s| !(s > T::zero())) {
        return Err(Error::InvalidArgument("κ, λ and σ must be positive".into()));
    }
    let m = pair.maximals(alpha)?;
    let hypothesis_met = m.levels_f.values().first().is_some_and(|&v| v <= kappa * lambda);
    let mut rows = Vec::new();
    if hypothesis_met {
        let n = dim::<T>();
        let d = pair.grid().diam();
        for &s in sigmas {
            let lhs = m.levels_g.measure_above(s * lambda);
            let unit = (kappa / s).powf(n / (n - alpha)) * d.powi(DIM as i32);
            rows.push(DecayRow {
                sigma: s.to_f64_lossy(),
                lhs: lhs.to_f64_lossy(),
                bound_unit: unit.to_f64_lossy(),
                c_required: (lhs / unit).to_f64_lossy(),
            });
        }
    }
    Ok(DecayReport {
        alpha: alpha.to_f64_lossy(),
        kappa: kappa.to_f64_lossy(),
        lambda: lambda.to_f64_lossy(),
        hypothesis_met,
        rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TruncationRow {
    pub sigma: f64,
    /// Cells of Ω_ϱ(ξ) with M_α G > σλ.
    pub cells_full: usize,
    /// Cells of Ω_ϱ(ξ) with M_α(χ_{B_{2ϱ}(ξ)} G) > σλ.
    pub cells_truncated: usize,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TruncationReport {
    pub center: usize,
    pub rho: f64,
    pub lambda: f64,
    /// Some cell of Ω_ϱ(ξ) has M_α G ≤ λ.
    pub hypothesis_met: bool,
    pub rows: Vec<TruncationRow>,
}

/// Truncation bound `d_G^α(Ω_ϱ(ξ); σλ) ≤ d_{χ_{B_{2ϱ}(ξ)}G}^α(Ω_ϱ(ξ); σλ)` for `σ > 3ⁿ`.
#[allow(clippy::too_many_arguments)]
pub fn check_truncation<T: Real>(
    g: &ScalarField<T>,
    alpha: T,
    radii: &RadiusSet<T>,
    center: usize,
    rho: T,
    lambda: T,
    sigmas: &[T],
) -> Result<TruncationReport> {
    if let Some(&s) = sigmas.iter().find(|&&s| !(s > three_pow_n())) {
        return Err(Error::OutOfRange { range: "truncation range σ > 3ⁿ", detail: format!("σ = {s}") });
    }
    let grid = g.grid();
    let ball = grid.ball_cells(center, rho);
    if ball.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let mg = frac_maximal(g, alpha, radii)?.field;
    let hypothesis_met = ball.iter().any(|&k| mg.get(k) <= lambda);
    let mut rows = Vec::new();
    if hypothesis_met {
        let trunc = g.restricted_to(&grid.ball_cells(center, rho + rho));
        let mt = frac_maximal(&trunc, alpha, radii)?.field;
        for &s in sigmas {
            let level = s * lambda;
            let full = ball.iter().filter(|&&k| mg.get(k) > level).count();
            let cut = ball.iter().filter(|&&k| mt.get(k) > level).count();
            rows.push(TruncationRow { sigma: s.to_f64_lossy(), cells_full: full, cells_truncated: cut, holds: full <= cut });
        }
    }
    Ok(TruncationReport { center, rho: rho.to_f64_lossy(), lambda: lambda.to_f64_lossy(), hypothesis_met, rows })
}

/// Parameters of a local density bound.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DensityParams<T> {
    pub alpha: T,
    pub gamma: T,
    pub mode: LocalMode,
    pub eps: T,
    pub c_eps: T,
    /// Fixed σ₀ of the bounded mode (ignored in the averaged mode).
    pub sigma0: T,
}

impl<T: Real> DensityParams<T> {
    /// σ = ε^{−(n−αγ)/(nγ)} in the averaged mode, σ₀ otherwise.
    pub fn sigma(&self) -> T {
        match self.mode {
            LocalMode::Averaged => {
                let n = dim::<T>();
                self.eps.powf(-(n - self.alpha * self.gamma) / (n * self.gamma))
            }
            LocalMode::Bounded => self.sigma0,
        }
    }

    /// κ = ε / max(c_ε, 1).
    pub fn kappa(&self) -> T {
        self.eps / self.c_eps.max(T::one())
    }

    /// Density bound per unit `ϱⁿ`: σ^{−nγ/(n−αγ)} or (ε/σ)^{n/(n−α)}.
    pub fn unit(&self) -> T {
        let n = dim::<T>();
        let s = self.sigma();
        match self.mode {
            LocalMode::Averaged => s.powf(-n * self.gamma / (n - self.alpha * self.gamma)),
            LocalMode::Bounded => (self.eps / s).powf(n / (n - self.alpha)),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityReport {
    pub center: usize,
    pub rho: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub kappa: f64,
    /// Ω_ϱ(ξ) meets both {M_α G ≤ λ} and {M_α F ≤ κλ}.
    pub hypothesis_met: bool,
    /// d_G^α(Ω_ϱ(ξ); σλ).
    pub lhs: f64,
    pub bound_unit: f64,
    pub c_required: Option<f64>,
}

/// Local density `d_G^α(Ω_ϱ(ξ); σλ) ≤ C·unit·ϱⁿ`.
pub fn density_check<T: Real>(
    pair: &ComparisonPair<T>,
    params: &DensityParams<T>,
    center: usize,
    rho: T,
    lambda: T,
) -> Result<DensityReport> {
    check_eps(params.eps)?;
    let n = dim::<T>();
    let a = params.alpha;
    match params.mode {
        LocalMode::Averaged if !(params.gamma > T::one() && a >= T::zero() && a * params.gamma < n) => {
            return Err(Error::AlphaRange(a.to_f64_lossy()))
        }
        LocalMode::Bounded if !(a >= T::zero() && a < n) => return Err(Error::AlphaRange(a.to_f64_lossy())),
        _ => {}
    }
    let m = pair.maximals(a)?;
    let ball = pair.grid().ball_cells(center, rho);
    let (sigma, kappa) = (params.sigma(), params.kappa());
    let hypothesis_met = ball.iter().any(|&k| m.mg.get(k) <= lambda) && ball.iter().any(|&k| m.mf.get(k) <= kappa * lambda);
    let cells = ball.iter().filter(|&&k| m.mg.get(k) > sigma * lambda).count();
    let lhs = T::from_usize_exact(cells) * pair.grid().cell_measure();
    let unit = params.unit() * rho.powi(DIM as i32);
    Ok(DensityReport {
        center,
        rho: rho.to_f64_lossy(),
        lambda: lambda.to_f64_lossy(),
        sigma: sigma.to_f64_lossy(),
        kappa: kappa.to_f64_lossy(),
        hypothesis_met,
        lhs: lhs.to_f64_lossy(),
        bound_unit: unit.to_f64_lossy(),
        c_required: hypothesis_met.then(|| (lhs / unit).to_f64_lossy()),
    })
}

// ---------------------------------------------------------------------------
// good-λ scans

#[derive(Clone, Debug, Serialize)]
pub struct GoodLambdaRow {
    pub eps: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub kappa: f64,
    /// d_G^α(Ω; σλ).
    pub lhs: f64,
    /// d_G^α(Ω; λ).
    pub d_g: f64,
    /// d_F^α(Ω; κλ).
    pub d_f: f64,
    /// Smallest C with lhs ≤ C·ε·d_g + d_f.
    pub c_required: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GoodLambdaSummary {
    pub eps: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub c_eps: f64,
    pub c_sup: f64,
    /// σ > 3ⁿ, as the truncation step of the argument requires.
    pub sigma_above_3n: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Sigma0Step {
    pub sigma0: f64,
    pub c_sup: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GoodLambdaReport {
    pub mode: LocalMode,
    pub alpha: f64,
    pub gamma: Option<f64>,
    pub measure: f64,
    pub rows: Vec<GoodLambdaRow>,
    pub summary: Vec<GoodLambdaSummary>,
    /// σ₀ finally used in the bounded mode.
    pub sigma0: Option<f64>,
    /// max{3ⁿ, 2^{n+1} c̃ ĉ} with ĉ read as the sup constant of the bounded comparison.
    pub sigma0_guide: Option<f64>,
    pub sigma0_search: Vec<Sigma0Step>,
    pub stabilized: bool,
}

impl GoodLambdaReport {
    pub fn c_sup(&self, eps: f64) -> Option<f64> {
        self.summary.iter().find(|s| s.eps == eps).map(|s| s.c_sup)
    }
}

fn scan_rows<T: Real>(m: &Maximals<T>, eps: T, sigma: T, kappa: T, levels: &LevelGrid<T>) -> Vec<GoodLambdaRow> {
    levels
        .lambdas()
        .iter()
        .map(|&l| {
            let lhs = m.levels_g.measure_above(sigma * l);
            let dg = m.levels_g.measure_above(l);
            let df = m.levels_f.measure_above(kappa * l);
            let c = if lhs <= df {
                T::zero()
            } else if dg == T::zero() {
                T::infinity()
            } else {
                (lhs - df) / (eps * dg)
            };
            GoodLambdaRow {
                eps: eps.to_f64_lossy(),
                lambda: l.to_f64_lossy(),
                sigma: sigma.to_f64_lossy(),
                kappa: kappa.to_f64_lossy(),
                lhs: lhs.to_f64_lossy(),
                d_g: dg.to_f64_lossy(),
                d_f: df.to_f64_lossy(),
                c_required: c.to_f64_lossy(),
            }
        })
        .collect()
}

fn sup_c(rows: &[GoodLambdaRow]) -> f64 {
    rows.iter().map(|r| r.c_required).fold(0.0, f64::max)
}

/// Scans `d_G^α(Ω; σλ) ≤ C ε d_G^α(Ω; λ) + d_F^α(Ω; κλ)` over the ε of `table`.
///
/// In the averaged mode `σ = ε^{−(n−αγ)/(nγ)}`; in the bounded mode σ₀ starts at
/// 3ⁿ and doubles until the fitted constant changes by at most 10%. In both
/// modes `κ = ε / max(c_ε, 1)`.
pub fn goodlambda_scan<T: Real>(
    pair: &ComparisonPair<T>,
    alpha: T,
    gamma: Option<T>,
    table: &LocalComparisonTable,
    levels: &LevelGrid<T>,
) -> Result<GoodLambdaReport> {
    let n = dim::<T>();
    match table.mode {
        LocalMode::Averaged => {
            let g = gamma.ok_or_else(|| Error::InvalidArgument("averaged good-λ scan needs γ".into()))?;
            if !(g > T::one()) {
                return Err(Error::InvalidArgument(format!("γ = {g} must exceed 1")));
            }
            if !(alpha >= T::zero() && alpha * g < n) {
                return Err(Error::OutOfRange {
                    range: "averaged good-λ range α < n/γ",
                    detail: format!("α = {alpha}, γ = {g}"),
                });
            }
        }
        LocalMode::Bounded => {
            if !(alpha >= T::zero() && alpha < n) {
                return Err(Error::AlphaRange(alpha.to_f64_lossy()));
            }
        }
    }
    let mut eps_c = Vec::new();
    for (i, &e) in table.eps.iter().enumerate() {
        let c = table.c_eps[i].ok_or_else(|| Error::Unavailable(format!("c_ε for ε = {e}")))?;
        eps_c.push((T::lit(e), T::lit(c)));
    }
    let m = pair.maximals(alpha)?;
    let kappa = |e: T, c: T| e / c.max(T::one());
    let mut report = GoodLambdaReport {
        mode: table.mode,
        alpha: alpha.to_f64_lossy(),
        gamma: gamma.map(|g| g.to_f64_lossy()),
        measure: pair.grid().measure().to_f64_lossy(),
        rows: Vec::new(),
        summary: Vec::new(),
        sigma0: None,
        sigma0_guide: None,
        sigma0_search: Vec::new(),
        stabilized: true,
    };
    let sigmas: Vec<T> = match table.mode {
        LocalMode::Averaged => {
            let g = gamma.expect("checked above");
            eps_c.iter().map(|&(e, _)| e.powf(-(n - alpha * g) / (n * g))).collect()
        }
        LocalMode::Bounded => {
            report.sigma0_guide = table
                .linf_constant
                .map(|c_hat| three_pow_n::<f64>().max(2f64.powi(DIM as i32 + 1) * pair.c_tilde.to_f64_lossy() * c_hat));
            let mut s0 = three_pow_n::<T>();
            let mut prev: Option<f64> = None;
            report.stabilized = false;
            for _ in 0..=SIGMA0_DOUBLINGS {
                let c = eps_c
                    .iter()
                    .map(|&(e, c)| sup_c(&scan_rows(&m, e, s0, kappa(e, c), levels)))
                    .fold(0.0, f64::max);
                report.sigma0_search.push(Sigma0Step { sigma0: s0.to_f64_lossy(), c_sup: c });
                if let Some(p) = prev {
                    if (c - p).abs() <= SIGMA0_STABLE * c.max(p) {
                        report.stabilized = true;
                        break;
                    }
                }
                prev = Some(c);
                s0 = s0 + s0;
            }
            report.sigma0 = Some(s0.to_f64_lossy());
            vec![s0; eps_c.len()]
        }
    };
    for (&(e, c), &s) in eps_c.iter().zip(&sigmas) {
        let k = kappa(e, c);
        let rows = scan_rows(&m, e, s, k, levels);
        report.summary.push(GoodLambdaSummary {
            eps: e.to_f64_lossy(),
            sigma: s.to_f64_lossy(),
            kappa: k.to_f64_lossy(),
            c_eps: c.to_f64_lossy(),
            c_sup: sup_c(&rows),
            sigma_above_3n: s > three_pow_n(),
        });
        report.rows.extend(rows);
    }
    Ok(report)
}

/// Log-spaced levels spanning three decades below the largest value of M_α G.
pub fn default_scan_levels<T: Real>(pair: &ComparisonPair<T>, alpha: T, n: usize) -> Result<LevelGrid<T>> {
    let m = pair.maximals(alpha)?;
    let top = m.levels_g.values().last().copied().unwrap_or(T::zero());
    if !(top > T::zero()) {
        return Err(Error::ZeroNorm("M_α G vanishes".into()));
    }
    LevelGrid::log_spaced(top * T::lit(1e-3), top, n.max(2))
}

// ---------------------------------------------------------------------------
// covering

#[derive(Clone, Debug, Serialize)]
pub struct CoveringVerdict {
    pub eps: f64,
    pub r: f64,
    pub p_measure: f64,
    pub q_measure: f64,
    /// |P| ≤ ε|B_r|.
    pub small: bool,
    /// Every ball B_ϱ(ξ), ϱ ≤ r, with |P ∩ B_ϱ(ξ)| > ε|B_ϱ| has Ω_ϱ(ξ) ⊂ Q.
    pub density: bool,
    pub density_failures: usize,
    /// |P| / (ε|Q|) when both hypotheses hold.
    pub c_required: Option<f64>,
}

fn indicator<T: Real>(grid: &Arc<DomainGrid<T>>, cells: &[usize]) -> Result<ScalarField<T>> {
    let mut v = vec![T::zero(); grid.len()];
    for &k in cells {
        v[k] = T::one();
    }
    ScalarField::from_values(grid.clone(), v)
}

/// Tests both hypotheses of the covering argument on the balls centered at mask cells
/// with radii `h, 2h, …, r`, and fits the covering constant where they hold.
pub fn covering_check<T: Real>(grid: &Arc<DomainGrid<T>>, p: &[usize], q: &[usize], eps: T, r: T) -> Result<CoveringVerdict> {
    let h = grid.h();
    if !(eps > T::zero()) || !(r >= h) {
        return Err(Error::InvalidArgument(format!("covering check needs ε > 0 and r ≥ h, got ε = {eps}, r = {r}")));
    }
    let mut in_q = vec![false; grid.len()];
    for &k in q {
        if k >= grid.len() || !grid.in_mask(k) {
            return Err(Error::InvalidArgument(format!("Q cell {k} outside Ω")));
        }
        in_q[k] = true;
    }
    if let Some(&k) = p.iter().find(|&&k| k >= grid.len() || !in_q[k]) {
        return Err(Error::InvalidArgument(format!("P cell {k} not in Q")));
    }
    let mut pu = p.to_vec();
    pu.sort_unstable();
    pu.dedup();
    let mut qu = q.to_vec();
    qu.sort_unstable();
    qu.dedup();
    let cm = grid.cell_measure();
    let pm = T::from_usize_exact(pu.len()) * cm;
    let qm = T::from_usize_exact(qu.len()) * cm;
    let small = pm <= eps * lattice_ball_measure(grid, r)?;
    let outside: Vec<usize> = grid.cells().into_iter().filter(|&k| !in_q[k]).collect();
    let sp = BallSummer::new(&indicator(grid, &pu)?);
    let so = BallSummer::new(&indicator(grid, &outside)?);
    let steps = (r / h + T::lit(1e-9)).floor().to_usize().unwrap_or(1).max(1);
    let stencils: Vec<BallStencil<T>> = (1..=steps)
        .filter_map(|m| BallStencil::new(lattice_radius_sq(T::from_usize_exact(m) * h, h)))
        .collect();
    let density_failures: usize = grid
        .cells()
        .par_iter()
        .map(|&c| {
            stencils
                .iter()
                .filter(|st| {
                    let hits = sp.sum(c, st).value();
                    hits > eps * T::from_usize_exact(st.count) && so.sum(c, st).value() > T::zero()
                })
                .count()
        })
        .sum();
    let density = density_failures == 0;
    let c_required = (small && density).then(|| {
        if pu.is_empty() {
            0.0
        } else {
            (pm / (eps * qm)).to_f64_lossy()
        }
    });
    Ok(CoveringVerdict {
        eps: eps.to_f64_lossy(),
        r: r.to_f64_lossy(),
        p_measure: pm.to_f64_lossy(),
        q_measure: qm.to_f64_lossy(),
        small,
        density,
        density_failures,
        c_required,
    })
}

/// Random `(P, Q)` meeting both covering hypotheses by construction: Q is a
/// union of disks, and P draws at most ε|B_r|/h² cells lying at distance at
/// least 2r from Ω∖Q.
pub fn random_covering_instance<T: Real>(
    grid: &DomainGrid<T>,
    eps: T,
    r: T,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let cells = grid.cells();
    let h = grid.h();
    let mut q = Vec::new();
    let disks = rng.gen_range(1..=4);
    let mut centers = Vec::new();
    for _ in 0..disks {
        let c = cells[rng.gen_range(0..cells.len())];
        let rad = r * T::lit(rng.gen_range(3.0..6.0));
        centers.push((c, rad));
        q.extend(grid.ball_cells(c, rad));
    }
    q.sort_unstable();
    q.dedup();
    let mut in_q = vec![false; grid.len()];
    for &k in &q {
        in_q[k] = true;
    }
    let reach = r + r;
    let deep: Vec<usize> = q
        .iter()
        .copied()
        .filter(|&k| {
            let (ki, kj) = grid.ij(k);
            let m = (reach / h).ceil().to_usize().unwrap_or(0);
            let (i0, j0) = (ki.saturating_sub(m), kj.saturating_sub(m));
            let (i1, j1) = ((ki + m).min(grid.nx() - 1), (kj + m).min(grid.ny() - 1));
            (j0..=j1).all(|j| {
                (i0..=i1).all(|i| {
                    let o = grid.index(i, j);
                    let d2 = T::from_usize_exact(ki.abs_diff(i).pow(2) + kj.abs_diff(j).pow(2)) * h * h;
                    d2 > reach * reach || !grid.in_mask(o) || in_q[o]
                })
            })
        })
        .collect();
    let cap = (eps * lattice_ball_measure(grid, r)? / grid.cell_measure()).floor().to_usize().unwrap_or(0);
    let m = rng.gen_range(0..=cap.min(deep.len()));
    let mut p: Vec<usize> = sample(rng, deep.len(), m).into_iter().map(|i| deep[i]).collect();
    p.sort_unstable();
    Ok((p, q))
}

// ---------------------------------------------------------------------------
// norm comparisons

#[derive(Clone, Debug, Serialize)]
pub struct NormComparison {
    pub space: String,
    pub range: &'static str,
    pub mode: LocalMode,
    pub alpha: f64,
    pub gamma: Option<f64>,
    pub numerator: f64,
    pub denominator: f64,
    /// ‖M_α G‖ / ‖M_α F‖.
    pub ratio: f64,
}

fn p1_exponent<T: Real>(phi: &crate::funcspaces::YoungFn<T>) -> Result<T> {
    let cert = match phi.certificate {
        Some(c) => c,
        None => phi.clone().certified()?.certificate.expect("certified"),
    };
    cert.delta2
        .map(|(_, p1)| p1)
        .ok_or_else(|| Error::Young(format!("{} is not Δ₂ on the sampled range", phi.family)))
}

/// Checks the parameters against the validity range of the norm comparison and
/// returns the range name.
pub fn validate_norm_range<T: Real>(space: &NormSpec<T>, alpha: T, mode: LocalMode, gamma: Option<T>) -> Result<&'static str> {
    space.validate()?;
    let n = dim::<T>();
    let name = match space {
        NormSpec::Lorentz { .. } => "Lorentz comparison range",
        NormSpec::Orlicz { .. } => "Orlicz comparison range",
        NormSpec::OrliczLorentz { .. } => "Orlicz-Lorentz comparison range",
    };
    let refuse = |detail: String| Err(Error::OutOfRange { range: name, detail });
    if mode == LocalMode::Bounded {
        if !(alpha >= T::zero() && alpha < n) {
            return refuse(format!("α = {alpha} outside [0, n)"));
        }
        if let NormSpec::Orlicz { phi } | NormSpec::OrliczLorentz { phi, .. } = space {
            p1_exponent(phi)?;
        }
        return Ok(name);
    }
    let Some(g) = gamma else {
        return Err(Error::InvalidArgument("the averaged comparison needs γ".into()));
    };
    if !(g > T::one()) {
        return Err(Error::InvalidArgument(format!("γ = {g} must exceed 1")));
    }
    if !(alpha >= T::zero() && alpha * g < n) {
        return refuse(format!("α = {alpha} outside [0, n/γ) with γ = {g}"));
    }
    match space {
        NormSpec::Lorentz { q, .. } => {
            let cap = n * g / (n - alpha * g);
            if !(*q < cap) {
                return refuse(format!("q = {q} not below nγ/(n−αγ) = {cap}"));
            }
        }
        NormSpec::Orlicz { phi } => {
            let p1 = p1_exponent(phi)?;
            let lo = n * (T::one() / g - T::one() / p1);
            if !(alpha > lo) {
                return refuse(format!("α = {alpha} not above n(1/γ − 1/p₁) = {lo} with p₁ = {p1}"));
            }
        }
        NormSpec::OrliczLorentz { phi, q, .. } => {
            let p1 = p1_exponent(phi)?;
            let cap = n * g / (p1 * (n - g * alpha));
            if !(*q < cap) {
                return refuse(format!("q = {q} not below nγ/(p₁(n−γα)) = {cap} with p₁ = {p1}"));
            }
        }
    }
    Ok(name)
}

/// `‖M_α G‖ / ‖M_α F‖` in `space`, after range validation.
pub fn norm_comparison_report<T: Real>(
    pair: &ComparisonPair<T>,
    alpha: T,
    space: &NormSpec<T>,
    mode: LocalMode,
    gamma: Option<T>,
) -> Result<NormComparison> {
    let range = validate_norm_range(space, alpha, mode, gamma)?;
    let m = pair.maximals(alpha)?;
    let den = space.evaluate(&m.mf)?;
    if !(den > T::zero()) {
        return Err(Error::ZeroNorm(format!("‖M_α F‖ in {}", space.label())));
    }
    let num = space.evaluate(&m.mg)?;
    Ok(NormComparison {
        space: space.label(),
        range,
        mode,
        alpha: alpha.to_f64_lossy(),
        gamma: gamma.map(|g| g.to_f64_lossy()),
        numerator: num.to_f64_lossy(),
        denominator: den.to_f64_lossy(),
        ratio: (num / den).to_f64_lossy(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcspaces::YoungFn;
    use crate::grid::ShapeTag;
    use proptest::prelude::*;
    use rand::Rng;

    fn square(n: usize) -> Arc<DomainGrid<f64>> {
        Arc::new(DomainGrid::new(ShapeTag::Square, n, n, 1.0 / n as f64).unwrap())
    }

    fn random_field(grid: &Arc<DomainGrid<f64>>, seed: u64) -> ScalarField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        ScalarField::from_values(grid.clone(), v).unwrap()
    }

    fn solved_p1(n: usize, varsigma: f64, seed: u64) -> ComparisonPair<f64> {
        let spec = p1_instance(square(n), 2.0, varsigma, seed).unwrap();
        let sol = pde::solve(&spec, &SolveOptions::default()).unwrap();
        ComparisonPair::p1(&spec, &sol).unwrap()
    }

    #[test]
    fn quasi_triangle_examples() {
        let g = square(8);
        let c = |v: f64| ScalarField::constant(g.clone(), v);
        let cells = g.cells();
        let r = check_quasi_triangle(&c(2.0), &c(0.5), &c(0.5), &cells, 1.0).unwrap();
        assert!(!r.passed);
        assert_eq!(r.max_ratio, 2.0);
        let r = check_quasi_triangle(&c(0.7), &c(0.7), &c(0.0), &cells, 1.0).unwrap();
        assert!(r.passed);
        for p in [1.5, 2.0, 3.0] {
            let u = random_field(&g, 1).map(|x| x - 0.5);
            let v = random_field(&g, 2).map(|x| x - 0.5);
            let gp = u.map(|x| x.abs().powf(p));
            let vp = v.map(|x| x.abs().powf(p));
            let dp = u.zip_map(&v, |a, b| (a - b).abs().powf(p)).unwrap();
            let r = check_quasi_triangle(&gp, &vp, &dp, &cells, 2f64.powf(p - 1.0)).unwrap();
            assert!(r.passed, "p = {p}: {r:?}");
        }
    }

    #[test]
    fn reverse_holder_examples() {
        let g = square(32);
        let balls = sample_balls(&g, 3, 20, 12, 0.5).unwrap();
        let t = check_reverse_holder(&ScalarField::constant(g.clone(), 3.7), 2.5, &balls).unwrap();
        assert!(t.rows.iter().all(|r| r.ratio == Some(1.0)));
        let k = g.index(16, 16);
        let mut v = vec![0.0; g.len()];
        v[k] = 1.0;
        let spike = ScalarField::from_values(g.clone(), v).unwrap();
        let h = g.h();
        let r2 = reverse_holder_ratio(&spike, k, 2.0 * h, 2.0).unwrap();
        let r8 = reverse_holder_ratio(&spike, k, 8.0 * h, 2.0).unwrap();
        let n = |r: f64| g.ball_cells(k, r).len() as f64;
        // ⨍ χ^γ over N(r) cells is N(r)^{-1/γ}; ⨍ χ over N(2r) cells is 1/N(2r).
        assert!((r2 - n(4.0 * h) / n(2.0 * h).sqrt()).abs() < 1e-12);
        assert!(r8 > 3.0 * r2);
        assert!(check_reverse_holder(&spike, 1.0, &balls).is_err());
        let zero = ScalarField::zeros(g.clone());
        assert_eq!(check_reverse_holder(&zero, 2.0, &balls).unwrap().skipped, balls.len());
    }

    #[test]
    fn harmonic_gradient_power_is_reverse_holder() {
        let g = square(32);
        let op = OperatorSpec::constant(g.clone(), 2.0, 0.0, 1.0).unwrap();
        let trace = ScalarField::from_fn(g.clone(), |x, y| x * x - y * y + 0.3 * x);
        let spec = ProblemSpec::dirichlet(op, VectorField::zeros(g.clone()), trace);
        let u = pde::solve(&spec, &SolveOptions::default()).unwrap().u;
        let phi = grid::gradient(&u).norm().map(|a| a * a);
        let balls: Vec<(usize, f64)> = sample_balls(&g, 5, 20, 0, 0.5).unwrap();
        let t = check_reverse_holder(&phi, 2.0, &balls).unwrap();
        assert!(t.sup_ratio <= 10.0, "{}", t.sup_ratio);
    }

    #[test]
    fn sampler_is_deterministic_and_sized() {
        let g = square(64);
        let a = sample_balls(&g, 11, 20, 12, 0.5).unwrap();
        assert_eq!(a, sample_balls(&g, 11, 20, 12, 0.5).unwrap());
        // radii 2h, 4h, 8h, 16h ≤ 1/4
        assert_eq!(a.len(), 32 * 4);
        let centers: std::collections::BTreeSet<usize> = a.iter().map(|b| b.0).collect();
        assert_eq!(centers.iter().filter(|&&c| g.is_boundary(c)).count(), 12);
        assert!(sample_balls(&g, 1, 1, 1, 2.0 * g.h()).is_err());
    }

    #[test]
    fn global_comparison_examples() {
        let g = square(16);
        let f = random_field(&g, 4);
        let pair = ComparisonPair::from_fields(f.clone(), f.clone(), 1.0).unwrap();
        assert_eq!(check_global_comparison(&pair).unwrap(), 1.0);
        let pair = ComparisonPair::from_fields(f.scale(2.0), f.clone(), 1.0).unwrap();
        assert_eq!(check_global_comparison(&pair).unwrap(), 2.0);
        let pair = ComparisonPair::from_fields(f, ScalarField::zeros(g), 1.0).unwrap();
        assert!(check_global_comparison(&pair).is_err());
    }

    #[test]
    fn own_reference_solution_has_no_comparison_error() {
        let g = square(32);
        let op = OperatorSpec::constant(g.clone(), 2.0, 0.0, 1.0).unwrap();
        let trace = ScalarField::from_fn(g.clone(), |x, y| x * y + 0.5 * x);
        let spec = ProblemSpec::dirichlet(op, VectorField::zeros(g.clone()), trace);
        let sol = pde::solve(&spec, &SolveOptions::default()).unwrap();
        let pair = ComparisonPair::p1(&spec, &sol).unwrap();
        let balls = sample_balls(&g, 7, 6, 4, 0.5).unwrap();
        let t = check_local_comparison(&pair, LocalMode::Averaged, &[0.5, 0.1, 0.02], &balls).unwrap();
        assert!(t.rows.iter().all(|r| r.psi_mean < 1e-12), "{:?}", t.rows.iter().map(|r| r.psi_mean).fold(0.0, f64::max));
        assert!(t.c_eps.iter().all(|c| *c == Some(0.0)));
        let q = pair_quasi_triangle(&pair, LocalMode::Averaged, &balls).unwrap();
        assert!(q.passed, "{q:?}");
    }

    #[test]
    fn p1_local_comparison_is_finite_and_monotone() {
        let pair = solved_p1(32, 0.0, 1);
        let g = pair.grid().clone();
        let balls = sample_balls(&g, 2, 20, 12, 0.5).unwrap();
        let t = check_local_comparison(&pair, LocalMode::Averaged, &[0.02, 0.1, 0.5], &balls).unwrap();
        let c: Vec<f64> = t.c_eps.iter().map(|c| c.unwrap()).collect();
        assert!(c[0] >= c[1] && c[1] >= c[2], "{c:?}");
        assert!(c[0].is_finite() && c[0] > 0.0);
        let q = pair_quasi_triangle(&pair, LocalMode::Averaged, &balls).unwrap();
        assert!(q.passed, "{q:?}");
        let b = check_local_comparison(&pair, LocalMode::Bounded, &[0.1], &balls).unwrap();
        assert!(b.all_finite());
        assert!(b.linf_constant.is_some_and(|c| c.is_finite() && c > 0.0));
        // With a ≡ 1 freezing does nothing, so w = v on Ω_{3r/2} and ψ agrees on Ω_r.
        for (ra, rb) in t.rows.iter().zip(&b.rows) {
            assert!((ra.psi_mean - rb.psi_mean).abs() <= 1e-8 * (1.0 + ra.psi_mean), "{ra:?} {rb:?}");
        }
    }

    #[test]
    fn level_decay_examples() {
        let pair = solved_p1(32, 0.0, 3);
        let m = pair.maximals(0.5).unwrap();
        let top = *m.levels_f.values().last().unwrap();
        let r = check_level_decay(&pair, 0.5, 1e6, top, &[10.0, 100.0]).unwrap();
        assert!(r.hypothesis_met);
        assert!(r.rows.iter().all(|x| x.c_required <= 1.0));
        let lo = m.levels_f.values()[0];
        let r = check_level_decay(&pair, 0.5, 1.0, 0.5 * lo, &[10.0]).unwrap();
        assert!(!r.hypothesis_met && r.rows.is_empty() && r.c_sup().is_none());
        let lambda = 2.0 * lo;
        let a = check_level_decay(&pair, 0.5, 1.0, lambda, &[10.0, 100.0]).unwrap();
        let b = check_level_decay(&pair, 0.5, 1.0, 2.0 * lambda, &[10.0, 100.0]).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.bound_unit, y.bound_unit);
            assert!(y.lhs <= x.lhs);
        }
        assert!(a.c_sup().unwrap().is_finite());
    }

    #[test]
    fn truncation_examples() {
        let g = square(32);
        let radii = RadiusSet::default_for(&g);
        let c = g.index(16, 16);
        let rho = 4.0 * g.h();
        let bump = random_field(&g, 9).restricted_to(&g.ball_cells(c, 2.0 * rho));
        let m = frac_maximal(&bump, 0.0, &radii).unwrap().field;
        let lambda = g.ball_cells(c, rho).iter().map(|&k| m.get(k)).fold(f64::INFINITY, f64::min);
        let r = check_truncation(&bump, 0.0, &radii, c, rho, lambda, &[9.01, 20.0]).unwrap();
        assert!(r.hypothesis_met);
        assert!(r.rows.iter().all(|x| x.cells_full == x.cells_truncated));
        assert!(check_truncation(&bump, 0.0, &radii, c, rho, lambda, &[9.0]).is_err());
        let r = check_truncation(&bump, 0.0, &radii, c, rho, 0.5 * lambda, &[10.0]).unwrap();
        assert!(!r.hypothesis_met && r.rows.is_empty());
    }

    #[test]
    fn truncation_holds_on_random_fields() {
        let g = square(32);
        let radii = RadiusSet::default_for(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        for seed in 0..20 {
            let f = random_field(&g, 100 + seed).map(|x| x.powi(6));
            let m = frac_maximal(&f, 0.0, &radii).unwrap().field;
            let c = g.index(rng.gen_range(4..28), rng.gen_range(4..28));
            let rho = g.h() * rng.gen_range(2..6) as f64;
            let lambda = g.ball_cells(c, rho).iter().map(|&k| m.get(k)).fold(f64::INFINITY, f64::min);
            let r = check_truncation(&f, 0.0, &radii, c, rho, lambda, &[9.01, 12.0, 30.0]).unwrap();
            assert!(r.hypothesis_met);
            checked += r.rows.len();
            assert!(r.rows.iter().all(|x| x.holds), "seed {seed}: {:?}", r.rows);
        }
        assert_eq!(checked, 60);
    }

    #[test]
    fn density_examples() {
        let pair = solved_p1(32, 0.0, 5);
        let m = pair.maximals(0.0).unwrap();
        let top = m.levels_g.values().last().unwrap().max(10.0 * m.levels_f.values().last().unwrap());
        let params = DensityParams { alpha: 0.0, gamma: 2.0, mode: LocalMode::Averaged, eps: 0.1, c_eps: 1.0, sigma0: 9.0 };
        let g = pair.grid().clone();
        let c = g.index(10, 12);
        let r = density_check(&pair, &params, c, 4.0 * g.h(), 2.0 * top).unwrap();
        assert!(r.hypothesis_met);
        assert_eq!(r.c_required, Some(0.0));
        // σ^{−nγ/(n−αγ)} = ε in the averaged parameterization.
        assert!((r.bound_unit / (4.0 * g.h()).powi(2) - 0.1).abs() < 1e-12);
        let r = density_check(&pair, &params, c, 4.0 * g.h(), 1e-12).unwrap();
        assert!(!r.hypothesis_met && r.c_required.is_none());
    }

    #[test]
    fn goodlambda_trivial_when_levels_are_high() {
        let pair = solved_p1(32, 0.0, 6);
        let m = pair.maximals(0.0).unwrap();
        let top = *m.levels_g.values().last().unwrap();
        let levels = LevelGrid::log_spaced(top, 10.0 * top, 5).unwrap();
        let table = LocalComparisonTable {
            mode: LocalMode::Averaged,
            eps: vec![0.1, 0.01],
            c_eps: vec![Some(2.0), Some(3.0)],
            linf_constant: None,
            rows: Vec::new(),
        };
        let r = goodlambda_scan(&pair, 0.0, Some(2.0), &table, &levels).unwrap();
        assert!(r.rows.iter().all(|x| x.lhs == 0.0 && x.c_required == 0.0));
        assert!((r.summary[1].sigma - 10.0).abs() < 1e-12);
        assert!((r.summary[1].kappa - 0.01 / 3.0).abs() < 1e-15);
        let bad = LocalComparisonTable { c_eps: vec![Some(1.0), None], ..table.clone() };
        assert!(matches!(goodlambda_scan(&pair, 0.0, Some(2.0), &bad, &levels), Err(Error::Unavailable(_))));
        assert!(goodlambda_scan(&pair, 1.0, Some(2.0), &table, &levels).is_err());
    }

    #[test]
    fn goodlambda_p1_scan() {
        let pair = solved_p1(32, 0.0, 8);
        let g = pair.grid().clone();
        let balls = sample_balls(&g, 8, 20, 12, 0.5).unwrap();
        let sweep = pair_gamma_sweep(&pair, LocalMode::Averaged, &balls, 2.0, 10.0).unwrap();
        let gamma = sweep.gamma.unwrap();
        assert!(gamma >= 1.2, "{sweep:?}");
        let t = check_local_comparison(&pair, LocalMode::Averaged, &[0.1, 0.01], &balls).unwrap();
        let levels = default_scan_levels(&pair, 0.0, 61).unwrap();
        let r = goodlambda_scan(&pair, 0.0, Some(gamma), &t, &levels).unwrap();
        let (c1, c2) = (r.c_sup(0.1).unwrap(), r.c_sup(0.01).unwrap());
        assert!(c1.is_finite() && c2.is_finite(), "{c1} {c2}");
        assert!(c2 <= 5.0 * c1, "{c1} {c2}");
        for e in [0.1, 0.01] {
            let rows: Vec<&GoodLambdaRow> = r.rows.iter().filter(|x| x.eps == e).collect();
            assert!(rows.windows(2).all(|w| w[1].lhs <= w[0].lhs && w[1].d_g <= w[0].d_g && w[1].d_f <= w[0].d_f));
            assert!(rows.iter().all(|x| x.lhs <= r.measure && x.d_g <= r.measure));
        }
        let tb = check_local_comparison(&pair, LocalMode::Bounded, &[0.1, 0.01], &balls).unwrap();
        let rb = goodlambda_scan(&pair, 0.5, None, &tb, &levels).unwrap();
        assert!(rb.stabilized && rb.sigma0.unwrap() >= 9.0);
        assert!(rb.sigma0_search.len() <= SIGMA0_DOUBLINGS + 1);
    }

    #[test]
    fn covering_examples() {
        let g = square(32);
        let v = covering_check(&g, &[], &g.ball_cells(g.index(10, 10), 0.1), 0.2, 4.0 * g.h()).unwrap();
        assert_eq!(v.c_required, Some(0.0));
        let disk = g.ball_cells(g.index(16, 16), 3.0 * g.h());
        let v = covering_check(&g, &disk, &disk, 1.0, 1.0).unwrap();
        assert!(v.small && v.density);
        assert!(v.c_required.unwrap() <= 1.0);
        assert!(covering_check(&g, &[g.index(0, 0)], &disk, 1.0, 1.0).is_err());
    }

    #[test]
    fn covering_random_families() {
        let g = square(32);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let eps = rng.gen_range(0.05..0.5);
            let r = g.h() * rng.gen_range(2..5) as f64;
            let (p, q) = random_covering_instance(&g, eps, r, &mut rng).unwrap();
            let v = covering_check(&g, &p, &q, eps, r).unwrap();
            assert!(v.small && v.density, "{v:?}");
            worst = worst.max(v.c_required.unwrap());
        }
        assert!(worst <= 100.0, "{worst}");
    }

    #[test]
    fn norm_ranges_are_enforced() {
        let g = square(16);
        let f = random_field(&g, 12);
        let pair = ComparisonPair::from_fields(f.clone(), f, 1.0).unwrap();
        let p2 = YoungFn::power(2.0).unwrap().certified().unwrap();
        // q cap for the Orlicz-Lorentz comparison at α = 0 is γ/p₁.
        let gamma = 3.0;
        let over = NormSpec::OrliczLorentz { phi: p2.clone(), q: 1.51, s: 1.0 };
        match norm_comparison_report(&pair, 0.0, &over, LocalMode::Averaged, Some(gamma)) {
            Err(Error::OutOfRange { range, .. }) => assert_eq!(range, "Orlicz-Lorentz comparison range"),
            other => panic!("{other:?}"),
        }
        assert!(norm_comparison_report(&pair, 0.0, &over, LocalMode::Bounded, None).is_ok());
        let lor = NormSpec::Lorentz { q: 3.0, s: 2.0 };
        assert!(matches!(
            norm_comparison_report(&pair, 0.0, &lor, LocalMode::Averaged, Some(gamma)),
            Err(Error::OutOfRange { range: "Lorentz comparison range", .. })
        ));
        let orl = NormSpec::Orlicz { phi: p2 };
        assert!(norm_comparison_report(&pair, 0.0, &orl, LocalMode::Averaged, Some(1.5)).is_err());
        for space in [NormSpec::Lorentz { q: 1.5, s: 2.0 }, orl, NormSpec::OrliczLorentz { phi: YoungFn::power(2.0).unwrap(), q: 0.6, s: 1.0 }] {
            let r = norm_comparison_report(&pair, 0.0, &space, LocalMode::Averaged, Some(gamma)).unwrap();
            assert!((r.ratio - 1.0).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn smooth_draw_parts() {
        let d = SmoothDraw::new(17, 3);
        let e = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (x, y) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
            let c = |x, y| d.parts(x, y).1;
            let g = |x, y| d.parts(x, y).0;
            let div_c = (c(x + e, y).0 - c(x - e, y).0 + c(x, y + e).1 - c(x, y - e).1) / (2.0 * e);
            let curl_g = (g(x + e, y).1 - g(x - e, y).1 - g(x, y + e).0 + g(x, y - e).0) / (2.0 * e);
            assert!(div_c.abs() < 1e-6 && curl_g.abs() < 1e-6, "{div_c} {curl_g}");
        }
        // Tangential gradient and normal curl components vanish on the boundary.
        for t in [0.1, 0.45, 0.8] {
            assert!(d.parts(0.0, t).0 .1.abs() < 1e-12 && d.parts(t, 1.0).0 .0.abs() < 1e-12);
            assert!(d.parts(0.0, t).1 .0.abs() < 1e-12 && d.parts(t, 1.0).1 .1.abs() < 1e-12);
        }
        let n = 400;
        let (mut eg, mut ec) = (0.0, 0.0);
        for j in 0..n {
            for i in 0..n {
                let (g, c) = d.parts((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
                eg += (g.0 * g.0 + g.1 * g.1) / (n * n) as f64;
                ec += (c.0 * c.0 + c.1 * c.1) / (n * n) as f64;
            }
        }
        assert!((eg - 0.5).abs() < 1e-3 && (ec - 0.5).abs() < 1e-3, "{eg} {ec}");
        assert_eq!(d, SmoothDraw::new(17, 3));
        assert_ne!(d, SmoothDraw::new(18, 3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn norm_ratio_is_homogeneous(seed in 0u64..1000, c in 0.01f64..100.0, alpha in 0.0f64..1.0) {
            let g = square(12);
            let f = random_field(&g, seed);
            let gg = random_field(&g, seed + 1);
            let a = ComparisonPair::from_fields(f.clone(), gg.clone(), 1.0).unwrap();
            let b = ComparisonPair::from_fields(f.scale(c), gg.scale(c), 1.0).unwrap();
            for space in [NormSpec::Lorentz { q: 1.5, s: 2.0 }, NormSpec::Orlicz { phi: YoungFn::power(2.0).unwrap() }] {
                let ra = norm_comparison_report(&a, alpha, &space, LocalMode::Bounded, None).unwrap().ratio;
                let rb = norm_comparison_report(&b, alpha, &space, LocalMode::Bounded, None).unwrap().ratio;
                prop_assert!((ra - rb).abs() <= 1e-7 * ra, "{} vs {}", ra, rb);
            }
        }

        #[test]
        fn scan_measures_are_monotone_and_bounded(seed in 0u64..1000, eps in 0.001f64..0.5) {
            let g = square(16);
            let pair = ComparisonPair::from_fields(random_field(&g, seed), random_field(&g, seed + 7), 1.0).unwrap();
            let table = LocalComparisonTable {
                mode: LocalMode::Averaged, eps: vec![eps], c_eps: vec![Some(1.5)], linf_constant: None, rows: Vec::new(),
            };
            let levels = default_scan_levels(&pair, 0.0, 25).unwrap();
            let r = goodlambda_scan(&pair, 0.0, Some(2.0), &table, &levels).unwrap();
            let m = r.measure;
            prop_assert!(r.rows.windows(2).all(|w| w[1].lhs <= w[0].lhs && w[1].d_g <= w[0].d_g && w[1].d_f <= w[0].d_f));
            prop_assert!(r.rows.iter().all(|x| x.lhs <= m && x.d_g <= m && x.d_f <= m && x.lhs >= 0.0));
        }

        #[test]
        fn constant_is_reverse_holder_with_ratio_one(c in 1e-6f64..1e6, gamma in 1.01f64..8.0, seed in 0u64..100) {
            let g = square(16);
            let balls = sample_balls(&g, seed, 6, 4, 0.5).unwrap();
            let t = check_reverse_holder(&ScalarField::constant(g.clone(), c), gamma, &balls).unwrap();
            prop_assert!(t.rows.iter().all(|r| r.ratio == Some(1.0)));
        }
    }
}
