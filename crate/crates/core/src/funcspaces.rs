//! Young functions and Lorentz, Orlicz (Luxemburg) and Orlicz-Lorentz norms.

use std::fmt;

use serde::{Serialize, Serializer};

use crate::distribution::LevelProfile;
use crate::grid::ScalarField;
use crate::numeric::{pow_or_zero, DoubleSum, Real};
use crate::{Error, Result};

/// Relative tolerance of every bisection in this module.
pub const BISECTION_RTOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum YoungFamily<T> {
    /// μ^p
    Power(T),
    /// μ^p log(e + μ)
    PLog(T),
    /// e^μ − 1
    Exp,
}

impl<T: Real> fmt::Display for YoungFamily<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            YoungFamily::Power(p) => write!(f, "power({p})"),
            YoungFamily::PLog(p) => write!(f, "plog({p})"),
            YoungFamily::Exp => write!(f, "exp"),
        }
    }
}

impl<T: Real> Serialize for YoungFamily<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// Growth constants witnessed on samples: Φ(aμ) ≤ K₁a^{p₁}Φ(μ) for a > 1 and
/// Φ(aμ) ≤ K₂a^{p₂}Φ(μ) for a ∈ (0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct YoungCertificate<T> {
    pub delta2: Option<(T, T)>,
    pub nabla2: Option<(T, T)>,
    pub mu_range: (T, T),
    pub samples: usize,
}

impl<T: Real> YoungCertificate<T> {
    /// C = max{K₁, K₂} for the modular/norm sandwich.
    pub fn sandwich_constant(&self) -> Option<T> {
        match (self.delta2, self.nabla2) {
            (Some((k1, _)), Some((k2, _))) => Some(k1.max(k2)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct YoungFn<T> {
    pub family: YoungFamily<T>,
    pub certificate: Option<YoungCertificate<T>>,
}

impl<T: Real> YoungFn<T> {
    pub fn new(family: YoungFamily<T>) -> Result<Self> {
        match family {
            YoungFamily::Power(p) | YoungFamily::PLog(p) if !(p > T::one()) || !p.is_finite() => {
                Err(Error::Young(format!("{family}: exponent must exceed 1")))
            }
            _ => Ok(Self { family, certificate: None }),
        }
    }

    pub fn power(p: T) -> Result<Self> {
        Self::new(YoungFamily::Power(p))
    }

    pub fn plog(p: T) -> Result<Self> {
        Self::new(YoungFamily::PLog(p))
    }

    pub fn exp() -> Self {
        Self { family: YoungFamily::Exp, certificate: None }
    }

    /// Parses `power(p)`, `plog(p)` or `exp`.
    pub fn parse(tag: &str) -> Result<Self> {
        let t = tag.trim().to_ascii_lowercase();
        if t == "exp" {
            return Ok(Self::exp());
        }
        let arg = |name: &str| -> Option<T> {
            t.strip_prefix(name)?
                .trim()
                .strip_prefix('(')?
                .strip_suffix(')')?
                .trim()
                .parse::<f64>()
                .ok()
                .map(T::lit)
        };
        if let Some(p) = arg("power") {
            Self::power(p)
        } else if let Some(p) = arg("plog") {
            Self::plog(p)
        } else {
            Err(Error::Young(format!("unknown young function `{tag}`")))
        }
    }

    #[inline]
    pub fn eval(&self, mu: T) -> T {
        match self.family {
            YoungFamily::Power(p) => pow_or_zero(mu, p),
            YoungFamily::PLog(p) => pow_or_zero(mu, p) * (T::E() + mu).ln(),
            YoungFamily::Exp => mu.exp_m1(),
        }
    }

    /// μ with Φ(μ) = y, by bisection.
    pub fn inv(&self, y: T) -> Result<T> {
        if !(y >= T::zero()) || !y.is_finite() {
            return Err(Error::InvalidArgument(format!("cannot invert at {y}")));
        }
        if y == T::zero() {
            return Ok(T::zero());
        }
        let mut hi = T::one();
        let mut guard = 0;
        while self.eval(hi) < y {
            hi = hi * T::lit(2.0);
            guard += 1;
            if guard > 2000 {
                return Err(Error::Young("inverse bracket overflow".into()));
            }
        }
        let mut lo = T::zero();
        let tol = T::lit(BISECTION_RTOL);
        while hi - lo > tol * hi {
            let mid = (lo + hi) * T::lit(0.5);
            if self.eval(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }

    pub fn with_certificate(mut self, c: YoungCertificate<T>) -> Self {
        self.certificate = Some(c);
        self
    }

    /// Certifies with the default sample plan (see [`certify_young`]).
    pub fn certified(self) -> Result<Self> {
        let c = certify_young(&self, (T::lit(1e-6), T::lit(1e6)), &default_a_samples())?;
        Ok(self.with_certificate(c))
    }
}

/// Log-spaced dilation factors on both sides of 1, including values close to 1.
pub fn default_a_samples<T: Real>() -> Vec<T> {
    let mut a = Vec::new();
    for k in 0..48 {
        let e = -6.0 + 9.0 * k as f64 / 47.0;
        let up = 1.0 + 10f64.powf(e);
        a.push(T::lit(up));
        a.push(T::lit(1.0 / up));
    }
    a
}

/// Fits K = 1 and the extremal exponents of the doubling-type bounds on samples.
///
/// Δ₂ fails when the fitted `p₁` is unbounded (or above 64); ∇₂ is absent when
/// the fitted `p₂` does not exceed 1.
pub fn certify_young<T: Real>(phi: &YoungFn<T>, mu_range: (T, T), a_samples: &[T]) -> Result<YoungCertificate<T>> {
    let (lo, hi) = mu_range;
    if !(lo > T::zero()) || !(hi / lo >= T::lit(1e6)) {
        return Err(Error::Young("sample range must span at least six decades".into()));
    }
    if !a_samples.iter().any(|&a| a > T::one()) || !a_samples.iter().any(|&a| a > T::zero() && a < T::one()) {
        return Err(Error::Young("dilation samples must include a > 1 and a ∈ (0, 1)".into()));
    }
    let n_mu = 241usize;
    let mus: Vec<T> = crate::distribution::LevelGrid::log_spaced(lo, hi, n_mu)?.lambdas().to_vec();
    if phi.eval(T::zero()) != T::zero() {
        return Err(Error::Young("Φ(0) must vanish".into()));
    }
    let vals: Vec<T> = mus.iter().map(|&m| phi.eval(m)).collect();
    let finite: Vec<(T, T)> = mus.iter().copied().zip(vals.iter().copied()).take_while(|(_, v)| v.is_finite()).collect();
    for w in finite.windows(2) {
        if w[1].1 < w[0].1 {
            return Err(Error::Young(format!("{} is not monotone near μ = {}", phi.family, w[1].0)));
        }
    }
    let mut prev = T::zero();
    let mut prev_mu = T::zero();
    let mut prev_slope = T::neg_infinity();
    for &(m, v) in &finite {
        let slope = (v - prev) / (m - prev_mu);
        if slope < prev_slope * (T::one() - T::lit(1e-9)) {
            return Err(Error::Young(format!("{} is not convex near μ = {m}", phi.family)));
        }
        prev_slope = slope;
        prev = v;
        prev_mu = m;
    }
    let mut p1 = T::neg_infinity();
    let mut p2 = T::infinity();
    for &a in a_samples {
        if !(a > T::zero()) || a == T::one() {
            continue;
        }
        let la = a.ln();
        for (&m, &v) in mus.iter().zip(&vals) {
            let num = phi.eval(a * m);
            let q = if v.is_finite() && num.is_finite() {
                (num / v).ln() / la
            } else if a > T::one() {
                T::infinity()
            } else {
                continue;
            };
            if a > T::one() {
                p1 = p1.max(q);
            } else {
                p2 = p2.min(q);
            }
        }
    }
    let pad = T::lit(1e-9);
    let delta2 = (p1.is_finite() && p1 <= T::lit(64.0)).then(|| (T::one(), p1 * (T::one() + pad)));
    let nabla2 = (p2.is_finite() && p2 > T::one()).then(|| (T::one(), p2 * (T::one() - pad)));
    Ok(YoungCertificate { delta2, nabla2, mu_range, samples: n_mu * a_samples.len() })
}

fn check_lorentz<T: Real>(q: T, s: T) -> Result<()> {
    if !(q > T::zero() && q.is_finite()) {
        return Err(Error::InvalidArgument(format!("Lorentz index q = {q} must lie in (0, ∞)")));
    }
    if !(s > T::zero()) {
        return Err(Error::InvalidArgument(format!("Lorentz index s = {s} must lie in (0, ∞]")));
    }
    Ok(())
}

/// Distinct nonzero |f| values in decreasing order with the measure of {|f| ≥ v}.
fn step_levels<T: Real>(f: &ScalarField<T>) -> Vec<(T, T)> {
    let g = f.grid();
    let mut v: Vec<T> = g.cells().into_iter().map(|k| f.get(k).abs()).filter(|&x| x > T::zero()).collect();
    v.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let cell = g.cell_measure();
    let mut out: Vec<(T, T)> = Vec::new();
    let mut count = 0usize;
    let mut k = 0;
    while k < v.len() {
        let val = v[k];
        while k < v.len() && v[k] == val {
            count += 1;
            k += 1;
        }
        out.push((val, T::from_usize_exact(count) * cell));
    }
    out
}

/// ‖f‖_{L^{q,s}} = [q ∫₀^∞ (λ^q d_f(λ))^{s/q} dλ/λ]^{1/s}, and for s = ∞ the
/// supremum of (λ^q d_f(λ))^{1/q}.
///
/// The distribution of lattice data is a right-continuous step function of λ,
/// so the integral is evaluated exactly interval by interval.
pub fn lorentz_norm<T: Real>(f: &ScalarField<T>, q: T, s: T) -> Result<T> {
    check_lorentz(q, s)?;
    let steps = step_levels(f);
    if steps.is_empty() {
        return Ok(T::zero());
    }
    if s.is_infinite() {
        let best = steps.iter().fold(T::zero(), |b, &(v, d)| b.max(v * d.powf(T::one() / q)));
        return Ok(best);
    }
    let mut acc = DoubleSum::zero();
    for (idx, &(v, d)) in steps.iter().enumerate() {
        let below = steps.get(idx + 1).map_or(T::zero(), |x| x.0);
        acc = acc.add_scalar(d.powf(s / q) * (v.powf(s) - pow_or_zero(below, s)));
    }
    Ok((q / s * acc.value()).powf(T::one() / s))
}

/// Lorentz norm from a sampled profile by trapezoidal quadrature in log λ, with
/// the segment below the first level treated as constant.
pub fn lorentz_from_profile<T: Real>(p: &LevelProfile<T>, q: T, s: T) -> Result<T> {
    check_lorentz(q, s)?;
    let l = p.lambdas();
    let d = &p.measures;
    if s.is_infinite() {
        let best = l.iter().zip(d).fold(T::zero(), |b, (&lam, &m)| b.max(lam * m.powf(T::one() / q)));
        return Ok(best);
    }
    let g = |k: usize| (l[k].powf(q) * d[k]).powf(s / q);
    let mut acc = d[0].powf(s / q) * l[0].powf(s) / s;
    for k in 1..l.len() {
        acc = acc + T::lit(0.5) * (g(k) + g(k - 1)) * (l[k] / l[k - 1]).ln();
    }
    Ok((q * acc).powf(T::one() / s))
}

/// Geometric bisection for the smallest t with `feasible(t)` (`value(t) ≤ 1`),
/// asserting that `value` is nonincreasing along the way.
fn bisect_gauge<T: Real>(value: impl Fn(T) -> T, rtol: T) -> Result<T> {
    let mut lo = T::lit(1e-12);
    let mut v_lo = value(lo);
    if v_lo <= T::one() {
        return Ok(lo);
    }
    let mut hi = T::one();
    let mut v_hi = value(hi);
    let mut guard = 0;
    while v_hi > T::one() {
        if v_hi > v_lo {
            return Err(Error::Young("feasibility integral is not decreasing".into()));
        }
        lo = hi;
        v_lo = v_hi;
        hi = hi * T::lit(2.0);
        v_hi = value(hi);
        guard += 1;
        if guard > 2000 {
            return Err(Error::Young("gauge bracket overflow".into()));
        }
    }
    while hi / lo - T::one() > rtol {
        let mid = (lo * hi).sqrt();
        let v = value(mid);
        if v > v_lo || v < v_hi {
            return Err(Error::Young("feasibility integral is not decreasing".into()));
        }
        if v > T::one() {
            lo = mid;
            v_lo = v;
        } else {
            hi = mid;
            v_hi = v;
        }
    }
    Ok(hi)
}

/// ∫_Ω Φ(|f|).
pub fn modular<T: Real>(f: &ScalarField<T>, phi: &YoungFn<T>) -> T {
    let g = f.grid();
    let s = g.cells().into_iter().fold(DoubleSum::zero(), |s, k| s.add_scalar(phi.eval(f.get(k).abs())));
    s.value() * g.cell_measure()
}

/// inf{τ > 0 : ∫_Ω Φ(|f|/τ) ≤ 1}.
pub fn luxemburg_norm<T: Real>(f: &ScalarField<T>, phi: &YoungFn<T>) -> Result<T> {
    let m = f.max_abs();
    if m == T::zero() {
        return Ok(T::zero());
    }
    let g = f.grid();
    let scaled: Vec<T> = g.cells().into_iter().map(|k| f.get(k).abs() / m).collect();
    let cell = g.cell_measure();
    let value = |t: T| {
        let s = scaled.iter().fold(DoubleSum::zero(), |s, &v| s.add_scalar(phi.eval(v / t)));
        s.value() * cell
    };
    Ok(m * bisect_gauge(value, T::lit(BISECTION_RTOL))?)
}

/// inf{τ > 0 : ‖Φ(|f|/τ)‖_{L^{q,s}(Ω)} ≤ 1}.
pub fn orlicz_lorentz_norm<T: Real>(f: &ScalarField<T>, phi: &YoungFn<T>, q: T, s: T) -> Result<T> {
    check_lorentz(q, s)?;
    let m = f.max_abs();
    if m == T::zero() {
        return Ok(T::zero());
    }
    let scaled = f.map(|v| v.abs() / m);
    let value = |t: T| {
        let composed = scaled.map(|v| phi.eval(v / t));
        lorentz_norm(&composed, q, s).unwrap_or(T::infinity())
    };
    Ok(m * bisect_gauge(value, T::lit(BISECTION_RTOL))?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "space", rename_all = "snake_case", bound = "T: Real")]
pub enum NormSpec<T> {
    Lorentz { q: T, s: T },
    Orlicz { phi: YoungFn<T> },
    OrliczLorentz { phi: YoungFn<T>, q: T, s: T },
}

impl<T: Real> NormSpec<T> {
    pub fn validate(&self) -> Result<()> {
        match self {
            NormSpec::Lorentz { q, s } | NormSpec::OrliczLorentz { q, s, .. } => check_lorentz(*q, *s),
            NormSpec::Orlicz { .. } => Ok(()),
        }
    }

    pub fn evaluate(&self, f: &ScalarField<T>) -> Result<T> {
        match self {
            NormSpec::Lorentz { q, s } => lorentz_norm(f, *q, *s),
            NormSpec::Orlicz { phi } => luxemburg_norm(f, phi),
            NormSpec::OrliczLorentz { phi, q, s } => orlicz_lorentz_norm(f, phi, *q, *s),
        }
    }

    pub fn label(&self) -> String {
        match self {
            NormSpec::Lorentz { q, s } => format!("lorentz(q={q}, s={s})"),
            NormSpec::Orlicz { phi } => format!("orlicz({})", phi.family),
            NormSpec::OrliczLorentz { phi, q, s } => format!("orlicz_lorentz({}, q={q}, s={s})", phi.family),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NormReport {
    pub space: String,
    pub params: serde_json::Value,
    pub value: f64,
    pub quadrature_meta: serde_json::Value,
}

pub fn norm_report<T: Real>(spec: &NormSpec<T>, f: &ScalarField<T>) -> Result<NormReport> {
    let value = spec.evaluate(f)?.to_f64_lossy();
    let params = serde_json::to_value(spec).unwrap_or(serde_json::Value::Null);
    Ok(NormReport {
        space: spec.label(),
        params,
        value,
        quadrature_meta: serde_json::json!({
            "lorentz_integral": "exact on the step distribution of lattice data",
            "bisection_rtol": BISECTION_RTOL,
            "bisection_bracket_low": 1e-12,
        }),
    })
}
