//! Radial nonlinearities `phi(z) = psi(|z|) z/|z|`, their structural constants,
//! numeric verification of the structural conditions and the exponent algebra
//! that drives the decay and moment estimates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The closed-form families in the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// `psi(r) = |r|^{p-2} r`, `p in (1,2)`.
    PLaplace { p: f64 },
    /// `psi(r) = (1+r^2)^{(p-2)/2} r`, `p in (1,2)`.
    NonNewtonian { p: f64 },
    /// `psi(r) = log(1+|r|) sgn(r)`.
    LogDiffusion,
    /// `psi(r) = r / sqrt(1+r^2)`.
    MinimalSurface,
    /// `psi(r) = arctan(r)`, the curve shortening flow.
    Arctan,
    /// `psi(r) = r`, reduces the drift to the Dirichlet Laplacian.
    Linear,
}

/// Structural constants `(a, b, s, c, K, C)` and the optional constant `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub c: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "C")]
    pub growth: f64,
    #[serde(rename = "M")]
    pub m: Option<f64>,
}

/// One radial nonlinearity together with its constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    pub id: String,
    pub family: Family,
    pub constants: Constants,
}

impl fmt::Display for NonlinearitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

fn check_p(p: f64) -> Result<f64> {
    if p > 1.0 && p < 2.0 {
        Ok(p)
    } else {
        Err(Error::InvalidArgument(format!("exponent p={p} must lie in (1,2)")))
    }
}

impl NonlinearitySpec {
    pub fn p_laplace(p: f64) -> Result<Self> {
        let p = check_p(p)?;
        Ok(Self {
            id: format!("p-laplace:{p}"),
            family: Family::PLaplace { p },
            constants: Constants { a: 0.0, b: 1.0 / (p - 1.0), s: 2.0 - p, c: 1.0, k: 1.0, growth: 1.0, m: None },
        })
    }

    pub fn non_newtonian(p: f64) -> Result<Self> {
        let p = check_p(p)?;
        let ab = 1.0 / (p - 1.0);
        Ok(Self {
            id: format!("non-newtonian:{p}"),
            family: Family::NonNewtonian { p },
            constants: Constants { a: ab, b: ab, s: 2.0 - p, c: 1.0, k: 1.0, growth: 1.0, m: None },
        })
    }

    pub fn log_diffusion() -> Self {
        Self {
            id: "log-diffusion".into(),
            family: Family::LogDiffusion,
            constants: Constants { a: 1.0, b: 1.0, s: 1.0, c: 1.0, k: 2.0, growth: 1.0, m: Some(2.0) },
        }
    }

    pub fn minimal_surface() -> Self {
        Self {
            id: "minimal-surface".into(),
            family: Family::MinimalSurface,
            constants: Constants { a: 1.0, b: 1.0, s: 1.0, c: 1.0, k: 1.0, growth: 1.0, m: None },
        }
    }

    pub fn arctan() -> Self {
        Self {
            id: "arctan".into(),
            family: Family::Arctan,
            constants: Constants { a: 1.0, b: 1.0, s: 2.0, c: 1.0, k: 1.0, growth: 1.0, m: Some(4.0) },
        }
    }

    /// Heat-equation sanity entry, not part of the catalog.
    pub fn linear() -> Self {
        Self {
            id: "linear".into(),
            family: Family::Linear,
            constants: Constants { a: 1.0, b: 1.0, s: 2.0, c: 1.0, k: 0.25, growth: 1.0, m: Some(1.0) },
        }
    }

    /// Parses a catalog id such as `p-laplace:1.5`, `arctan` or `linear`.
    pub fn from_id(id: &str) -> Result<Self> {
        let id = id.trim();
        let (head, arg) = match id.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (id, None),
        };
        let parse_p = |a: Option<&str>| -> Result<f64> {
            let a = a.ok_or_else(|| Error::UnknownNonlinearity(id.to_string()))?;
            a.trim()
                .parse::<f64>()
                .map_err(|_| Error::UnknownNonlinearity(id.to_string()))
        };
        match (head, arg) {
            ("p-laplace", a) => Self::p_laplace(parse_p(a)?),
            ("non-newtonian", a) => Self::non_newtonian(parse_p(a)?),
            ("log-diffusion", None) => Ok(Self::log_diffusion()),
            ("minimal-surface", None) => Ok(Self::minimal_surface()),
            ("arctan" | "curve-shortening", None) => Ok(Self::arctan()),
            ("linear", None) => Ok(Self::linear()),
            _ => Err(Error::UnknownNonlinearity(id.to_string())),
        }
    }

    pub fn s(&self) -> f64 {
        self.constants.s
    }

    /// `psi(r)` for any real `r`, using each family's natural formula.
    #[inline]
    pub fn psi(&self, r: f64) -> f64 {
        match self.family {
            Family::PLaplace { p } => {
                if r == 0.0 {
                    0.0
                } else {
                    r.abs().powf(p - 2.0) * r
                }
            }
            Family::NonNewtonian { p } => (1.0 + r * r).powf(0.5 * (p - 2.0)) * r,
            Family::LogDiffusion => {
                if r == 0.0 {
                    0.0
                } else {
                    r.abs().ln_1p() * r.signum()
                }
            }
            Family::MinimalSurface => r / (1.0 + r * r).sqrt(),
            Family::Arctan => r.atan(),
            Family::Linear => r,
        }
    }

    /// `psi'(|r|)`; `+inf` at `r = 0` for the p-Laplace family.
    #[inline]
    pub fn psi_prime(&self, r: f64) -> f64 {
        let r = r.abs();
        match self.family {
            Family::PLaplace { p } => {
                if r == 0.0 {
                    f64::INFINITY
                } else {
                    (p - 1.0) * r.powf(p - 2.0)
                }
            }
            Family::NonNewtonian { p } => {
                let q = 1.0 + r * r;
                q.powf(0.5 * (p - 4.0)) * (1.0 + (p - 1.0) * r * r)
            }
            Family::LogDiffusion => 1.0 / (1.0 + r),
            Family::MinimalSurface => {
                let q = 1.0 + r * r;
                1.0 / (q * q.sqrt())
            }
            Family::Arctan => 1.0 / (1.0 + r * r),
            Family::Linear => 1.0,
        }
    }

    /// `psi(rho)/rho` for `rho >= 0`, continuously extended to `rho = 0`.
    #[inline]
    pub fn psi_over_r(&self, rho: f64) -> f64 {
        let rho = rho.abs();
        match self.family {
            Family::PLaplace { p } => {
                if rho == 0.0 {
                    f64::INFINITY
                } else {
                    rho.powf(p - 2.0)
                }
            }
            Family::NonNewtonian { p } => (1.0 + rho * rho).powf(0.5 * (p - 2.0)),
            Family::LogDiffusion => {
                if rho == 0.0 {
                    1.0
                } else {
                    rho.ln_1p() / rho
                }
            }
            Family::MinimalSurface => 1.0 / (1.0 + rho * rho).sqrt(),
            Family::Arctan => {
                if rho == 0.0 {
                    1.0
                } else {
                    rho.atan() / rho
                }
            }
            Family::Linear => 1.0,
        }
    }

    /// `kappa(rho) = min(psi'(rho), psi(rho)/rho)`, the smallest eigenvalue of
    /// the Hessian of the potential at a point of norm `rho`.
    #[inline]
    pub fn kappa(&self, rho: f64) -> f64 {
        self.psi_prime(rho).min(self.psi_over_r(rho))
    }

    /// The radial potential `Psi(rho) = int_0^rho psi(r) dr` in closed form.
    #[inline]
    pub fn capital_psi(&self, rho: f64) -> f64 {
        let rho = rho.abs();
        match self.family {
            Family::PLaplace { p } => rho.powf(p) / p,
            Family::NonNewtonian { p } => (0.5 * p * (rho * rho).ln_1p()).exp_m1() / p,
            Family::LogDiffusion => (1.0 + rho) * rho.ln_1p() - rho,
            Family::MinimalSurface => rho * rho / ((1.0 + rho * rho).sqrt() + 1.0),
            Family::Arctan => rho * rho.atan() - 0.5 * (rho * rho).ln_1p(),
            Family::Linear => 0.5 * rho * rho,
        }
    }

    /// `Psi(rho)` by adaptive midpoint quadrature of `psi`; used to cross-check
    /// the closed forms.
    pub fn capital_psi_quadrature(&self, rho: f64, rel_tol: f64) -> f64 {
        let rho = rho.abs();
        if rho == 0.0 {
            return 0.0;
        }
        let f = |r: f64| self.psi(r);
        let whole = rho * f(0.5 * rho);
        adaptive_midpoint(&f, 0.0, rho, whole, rel_tol, 0)
    }
}

fn adaptive_midpoint(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let mid = 0.5 * (lo + hi);
    let left = (mid - lo) * f(0.5 * (lo + mid));
    let right = (hi - mid) * f(0.5 * (mid + hi));
    let refined = left + right;
    // midpoint error shrinks by 4 per halving
    let err = (refined - whole) / 3.0;
    if depth >= 40 || err.abs() <= tol * refined.abs().max(f64::MIN_POSITIVE) {
        return refined + err;
    }
    adaptive_midpoint(f, lo, mid, left, tol, depth + 1) + adaptive_midpoint(f, mid, hi, right, tol, depth + 1)
}

/// All catalog entries, with the p-dependent ones instantiated at `p`.
pub fn catalog_with(p: f64) -> Result<Vec<NonlinearitySpec>> {
    Ok(vec![
        NonlinearitySpec::p_laplace(p)?,
        NonlinearitySpec::non_newtonian(p)?,
        NonlinearitySpec::log_diffusion(),
        NonlinearitySpec::minimal_surface(),
        NonlinearitySpec::arctan(),
    ])
}

/// The five catalog entries, p-dependent families at `p = 3/2`.
pub fn catalog() -> Vec<NonlinearitySpec> {
    catalog_with(1.5).expect("1.5 lies in (1,2)")
}

// ---------------------------------------------------------------------------
// Exponent algebra

/// Exponents derived from `(s, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentSet {
    pub s: f64,
    pub d: usize,
    pub s_star: f64,
    pub beta_star: f64,
    pub d0: f64,
    /// Algebraic decay power `s_star / s`.
    pub rate: f64,
}

/// Upper bound `min(4/d, 2)` on `s`.
pub fn s_upper(d: usize) -> f64 {
    (4.0 / d as f64).min(2.0)
}

pub fn exponents(s: f64, d: usize) -> Result<ExponentSet> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    if !(s > 0.0 && s <= s_upper(d)) {
        return Err(Error::ConditionViolation {
            condition: "C6",
            detail: format!("s={s} must satisfy 0 < s <= min(4/d,2) = {} for d={d}", s_upper(d)),
        });
    }
    let s_star = (2.0 - s).max((4.0 - s) / (2.0 + s));
    let d0 = (d as f64 / 2.0).max(1.0);
    let beta_star = ((8.0 - 2.0 * s) / (s * (2.0 + s) * d0)).min(1.0);
    Ok(ExponentSet { s, d, s_star, beta_star, d0, rate: s_star / s })
}

/// The admissible second-order integrability range for `W^{2,alpha}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlphaRange {
    /// `d = 1`: the exponent is exactly 1.
    One,
    /// `d >= 2`: the half-open interval `(1, upper]`.
    Interval { upper: f64 },
    /// The interval `(1, d(2-s)/(d-s)]` is empty.
    Empty { upper: f64 },
    /// `d(2-s)/(d-s)` is undefined (`s = d`).
    Undefined,
}

pub fn w2_alpha_range(s: f64, d: usize) -> AlphaRange {
    if d == 1 {
        return AlphaRange::One;
    }
    let df = d as f64;
    if (df - s).abs() < 1e-14 {
        return AlphaRange::Undefined;
    }
    let upper = df * (2.0 - s) / (df - s);
    if upper > 1.0 {
        AlphaRange::Interval { upper }
    } else {
        AlphaRange::Empty { upper }
    }
}

// ---------------------------------------------------------------------------
// Assumption checks

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
}

impl Condition {
    pub const ALL: [Condition; 7] = [
        Condition::C1,
        Condition::C2,
        Condition::C3,
        Condition::C4,
        Condition::C5,
        Condition::C6,
        Condition::C7,
    ];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

/// A sample radius and the slack of the condition there (negative = violated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub r: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVerdict {
    pub status: Status,
    /// Present whenever `status == Fail`.
    pub witness: Option<Witness>,
    /// The sample with the smallest margin.
    pub worst: Option<Witness>,
    pub note: Option<String>,
}

impl ConditionVerdict {
    fn from_worst(worst: Witness, pass: bool, note: Option<String>) -> Self {
        Self {
            status: if pass { Status::Pass } else { Status::Fail },
            witness: (!pass).then_some(worst),
            worst: Some(worst),
            note,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub spec_id: String,
    pub dimension: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub samples: usize,
    pub verdicts: BTreeMap<Condition, ConditionVerdict>,
}

impl AssumptionReport {
    pub fn verdict(&self, c: Condition) -> &ConditionVerdict {
        &self.verdicts[&c]
    }

    pub fn all_pass(&self, conditions: &[Condition]) -> bool {
        conditions.iter().all(|c| self.verdict(*c).passed())
    }
}

/// Decades covered below `r_max` by the log-uniform sampling grid.
const SAMPLE_DECADES: f64 = 10.0;
const C4_TOL: f64 = 1e-9;
const ROUNDING_TOL: f64 = 1e-12;

fn log_grid(r_max: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| r_max * 10f64.powf(-SAMPLE_DECADES * (1.0 - i as f64 / (n - 1) as f64)))
        .collect()
}

fn worst_of(samples: impl Iterator<Item = (f64, f64, f64)>) -> (Witness, bool) {
    // (r, margin, tolerance)
    let mut worst = Witness { r: f64::NAN, margin: f64::INFINITY };
    let mut pass = true;
    for (r, margin, tol) in samples {
        if margin < worst.margin || worst.r.is_nan() {
            worst = Witness { r, margin };
        }
        if !(margin >= -tol) {
            pass = false;
        }
    }
    (worst, pass)
}

/// Ratio `(|psi' - psi/r| + psi/r) / sqrt(kappa)` whose boundedness is (C7).
pub fn c7_ratio(spec: &NonlinearitySpec, r: f64) -> f64 {
    let dp = spec.psi_prime(r);
    let pr = spec.psi_over_r(r);
    ((dp - pr).abs() + pr) / spec.kappa(r).sqrt()
}

/// Checks (C1)–(C7) with the constants stored in `spec`.
pub fn check_assumptions(spec: &NonlinearitySpec, r_max: f64, n: usize, d: usize) -> Result<AssumptionReport> {
    check_assumptions_with(spec, r_max, n, d, spec.constants.m)
}

/// As [`check_assumptions`], with an explicit (C7) constant. When `m` is
/// `None` the (C7) verdict decides whether the ratio in [`c7_ratio`] stays
/// bounded beyond the sampled range.
pub fn check_assumptions_with(
    spec: &NonlinearitySpec,
    r_max: f64,
    n: usize,
    d: usize,
    m: Option<f64>,
) -> Result<AssumptionReport> {
    if !(r_max > 0.0) || !r_max.is_finite() {
        return Err(Error::InvalidArgument(format!("r_max={r_max} must be positive")));
    }
    if n < 100 {
        return Err(Error::InvalidArgument(format!("n={n} must be at least 100")));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let k = &spec.constants;
    let radii = log_grid(r_max, n);
    let mut verdicts = BTreeMap::new();

    let (w, ok) = worst_of(radii.iter().map(|&r| {
        let v = spec.psi_prime(r);
        // strict positivity: a zero derivative must fail
        (r, v, if v > 0.0 { f64::INFINITY } else { 0.0 })
    }));
    let ok = ok && w.margin > 0.0;
    verdicts.insert(Condition::C1, ConditionVerdict::from_worst(w, ok, None));

    let (w, ok) = worst_of(radii.iter().map(|&r| {
        let p = spec.psi(r);
        let scale = 1.0 + p.abs();
        (r, ROUNDING_TOL * scale - (p + spec.psi(-r)).abs(), 0.0)
    }));
    let zero_ok = spec.psi(0.0) == 0.0;
    verdicts.insert(
        Condition::C2,
        ConditionVerdict::from_worst(w, ok && zero_ok, (!zero_ok).then(|| "psi(0) != 0".to_string())),
    );

    let (w, ok) = worst_of(radii.iter().map(|&r| {
        let bound = k.growth * (1.0 + r);
        (r, bound - spec.psi(r), ROUNDING_TOL * bound)
    }));
    verdicts.insert(Condition::C3, ConditionVerdict::from_worst(w, ok, None));

    let (w, ok) = worst_of(radii.iter().map(|&r| {
        let v = (k.a + k.b * r.powf(k.s)) * spec.psi_prime(r);
        (r, v - (1.0 - C4_TOL), 0.0)
    }));
    verdicts.insert(Condition::C4, ConditionVerdict::from_worst(w, ok, None));

    let (w, ok) = worst_of(radii.iter().map(|&r| {
        let lhs = spec.psi(r) * r;
        let rhs = k.c * r - k.k;
        (r, lhs - rhs, ROUNDING_TOL * lhs.abs().max(rhs.abs()).max(1.0))
    }));
    verdicts.insert(Condition::C5, ConditionVerdict::from_worst(w, ok, None));

    let upper = s_upper(d);
    let c6_margin = (upper - k.s).min(k.s);
    verdicts.insert(
        Condition::C6,
        ConditionVerdict {
            status: if c6_margin >= 0.0 && k.s > 0.0 { Status::Pass } else { Status::Fail },
            witness: (c6_margin < 0.0 || k.s <= 0.0).then_some(Witness { r: f64::NAN, margin: c6_margin }),
            worst: Some(Witness { r: f64::NAN, margin: c6_margin }),
            note: Some(format!("s={} against min(4/d,2)={upper} for d={d}", k.s)),
        },
    );

    verdicts.insert(Condition::C7, check_c7(spec, &radii, m));

    Ok(AssumptionReport {
        spec_id: spec.id.clone(),
        dimension: d,
        r_min: radii[0],
        r_max,
        samples: n,
        verdicts,
    })
}

fn check_c7(spec: &NonlinearitySpec, radii: &[f64], m: Option<f64>) -> ConditionVerdict {
    match m {
        Some(m) => {
            let (w, ok) = worst_of(radii.iter().map(|&r| (r, m - c7_ratio(spec, r), ROUNDING_TOL * m)));
            ConditionVerdict::from_worst(w, ok, Some(format!("M={m}")))
        }
        None => {
            let (mut sup, mut arg) = (0.0f64, radii[0]);
            for &r in radii {
                let q = c7_ratio(spec, r);
                if q > sup {
                    sup = q;
                    arg = r;
                }
            }
            let lo = radii[0];
            let hi = radii[radii.len() - 1];
            let mut worst = Witness { r: arg, margin: 0.0 };
            for j in 1..=3 {
                let f = 10f64.powi(j);
                for r in [lo / f, hi * f] {
                    let q = c7_ratio(spec, r);
                    let margin = sup - q;
                    if margin < worst.margin {
                        worst = Witness { r, margin };
                    }
                }
            }
            // ratio still growing past the sampled range by more than 0.1%
            let unbounded = worst.margin < -1e-3 * sup;
            ConditionVerdict {
                status: if unbounded { Status::Fail } else { Status::Pass },
                witness: unbounded.then_some(worst),
                worst: Some(worst),
                note: Some(if unbounded {
                    format!("no finite M: ratio grows beyond the sampled range (sampled sup {sup:.4e})")
                } else {
                    format!("implied M ~ {sup:.6e} (attained near r={arg:.3e})")
                }),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Growth lower bound for s <= 1

/// Constants `(c2, K2)` with `psi(r) r >= c2 r^{2-s} - K2` for `r >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthBound {
    pub c2: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    pub exponent: f64,
    /// Constants before numeric tightening.
    pub analytic: (f64, f64),
}

impl GrowthBound {
    pub fn lower_bound(&self, r: f64) -> f64 {
        self.c2 * r.powf(self.exponent) - self.k2
    }
}

/// Radii used to tighten the analytic constants.
fn tightening_grid() -> Vec<f64> {
    let n = 32_000;
    let mut r: Vec<f64> = (0..n).map(|i| 10f64.powf(-8.0 + 16.0 * i as f64 / (n - 1) as f64)).collect();
    r.insert(0, 0.0);
    r
}

pub fn growth_lower_bound(spec: &NonlinearitySpec) -> Result<GrowthBound> {
    let k = &spec.constants;
    if k.s > 1.0 {
        return Err(Error::ConditionViolation {
            condition: "C4",
            detail: format!("growth lower bound requires s <= 1, got s={}", k.s),
        });
    }
    let q = 2.0 - k.s;
    // (a + b r^s) psi(r) >= r, times r^{1-s}, and r^{1-s} <= 1 + r:
    // (a+b) r psi(r) + a psi(r) >= r^{2-s}.
    let (c_an, k_an) = if k.a == 0.0 {
        (1.0 / k.b, 0.0)
    } else if q > 1.0 {
        // a psi(r) <= a C (1 + r) <= a C + 1/2 r^q + aC x*(1 - 1/q)
        let ac = k.a * k.growth;
        let x_star = (2.0 * ac / q).powf(1.0 / (q - 1.0));
        let k_young = ac + ac * x_star * (1.0 - 1.0 / q);
        (1.0 / (2.0 * (k.a + k.b)), k_young / (k.a + k.b))
    } else {
        // s = 1: the bound has the form of (C5)
        (k.c, k.k)
    };
    let grid = tightening_grid();
    let mut k_tight = 0.0f64;
    for &r in &grid {
        let gap = c_an * r.powf(q) - spec.psi(r) * r;
        if gap > ROUNDING_TOL * r.powf(q) {
            k_tight = k_tight.max(gap);
        }
    }
    let k2 = k_an.min(k_tight * (1.0 + 1e-9));
    let mut c2 = c_an;
    if k2 == 0.0 {
        let inf = grid
            .iter()
            .filter(|&&r| r > 0.0)
            .map(|&r| spec.psi(r) * r / r.powf(q))
            .fold(f64::INFINITY, f64::min);
        if inf > c2 {
            c2 = inf * (1.0 - 1e-12);
        }
    }
    Ok(GrowthBound { c2, k2, exponent: q, analytic: (c_an, k_an) })
}

/// Constants `(1, K)` so that `psi(r) r >= r^{2-s} - K`, with `K` the stored
/// constant tightened on a radius sweep (zero for the pure power law).
pub fn theta_constant(spec: &NonlinearitySpec) -> f64 {
    let q = 2.0 - spec.s();
    let mut k_tight = 0.0f64;
    for r in tightening_grid() {
        let gap = r.powf(q) - spec.psi(r) * r;
        if gap > ROUNDING_TOL * r.powf(q).max(1.0) {
            k_tight = k_tight.max(gap);
        }
    }
    spec.constants.k.min(k_tight * (1.0 + 1e-9))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn catalog_constants() {
        let pl = NonlinearitySpec::p_laplace(1.5).unwrap().constants;
        assert_eq!((pl.c, pl.growth, pl.k, pl.a), (1.0, 1.0, 1.0, 0.0));
        assert_eq!(pl.b, 2.0);
        assert_eq!(pl.s, 0.5);
        let at = NonlinearitySpec::arctan().constants;
        assert_eq!((at.growth, at.a, at.b, at.c, at.k, at.s, at.m), (1.0, 1.0, 1.0, 1.0, 1.0, 2.0, Some(4.0)));
        let lg = NonlinearitySpec::log_diffusion().constants;
        assert_eq!((lg.growth, lg.a, lg.b, lg.s, lg.c, lg.k, lg.m), (1.0, 1.0, 1.0, 1.0, 1.0, 2.0, Some(2.0)));
        let nn = NonlinearitySpec::non_newtonian(1.25).unwrap().constants;
        assert_eq!((nn.a, nn.b, nn.s), (4.0, 4.0, 0.75));
        assert_eq!(catalog().len(), 5);
    }

    #[test]
    fn ids_round_trip() {
        for spec in catalog() {
            assert_eq!(NonlinearitySpec::from_id(&spec.id).unwrap(), spec);
        }
        assert!(NonlinearitySpec::from_id("p-laplace:2.5").is_err());
        assert!(NonlinearitySpec::from_id("p-laplace").is_err());
        assert!(matches!(NonlinearitySpec::from_id("tv"), Err(Error::UnknownNonlinearity(_))));
    }

    #[test]
    fn potential_closed_forms_match_quadrature() {
        let mut specs = catalog();
        specs.push(NonlinearitySpec::linear());
        specs.push(NonlinearitySpec::p_laplace(1.2).unwrap());
        for spec in &specs {
            assert_eq!(spec.capital_psi(0.0), 0.0);
            for &rho in &[1e-3, 0.1, 0.7, 1.0, 3.0, 25.0] {
                let q = spec.capital_psi_quadrature(rho, 1e-10);
                assert_relative_eq!(spec.capital_psi(rho), q, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn potential_monotone_and_convex() {
        for spec in catalog() {
            let rs: Vec<f64> = (0..400).map(|i| i as f64 * 0.05).collect();
            let vals: Vec<f64> = rs.iter().map(|&r| spec.capital_psi(r)).collect();
            for w in vals.windows(3) {
                assert!(w[1] >= w[0]);
                assert!(w[2] - 2.0 * w[1] + w[0] >= -1e-12, "{}", spec.id);
            }
        }
    }

    #[test]
    fn psi_prime_matches_finite_differences() {
        for spec in catalog() {
            for &r in &[0.05, 0.5, 1.3, 7.0] {
                let h = 1e-6 * r;
                let fd = (spec.psi(r + h) - spec.psi(r - h)) / (2.0 * h);
                assert_relative_eq!(spec.psi_prime(r), fd, max_relative = 1e-6);
            }
        }
        assert!(NonlinearitySpec::p_laplace(1.5).unwrap().psi_prime(0.0).is_infinite());
    }

    #[test]
    fn arctan_passes_everything() {
        let rep = check_assumptions(&NonlinearitySpec::arctan(), 100.0, 10_000, 1).unwrap();
        assert!(rep.all_pass(&Condition::ALL), "{rep:#?}");
    }

    #[test]
    fn log_diffusion_passes_everything() {
        let rep = check_assumptions(&NonlinearitySpec::log_diffusion(), 100.0, 10_000, 2).unwrap();
        assert!(rep.all_pass(&Condition::ALL), "{rep:#?}");
    }

    #[test]
    fn p_laplace_fails_c7_near_zero() {
        let spec = NonlinearitySpec::p_laplace(1.5).unwrap();
        let rep = check_assumptions(&spec, 100.0, 10_000, 1).unwrap();
        assert!(rep.all_pass(&[Condition::C1, Condition::C2, Condition::C3, Condition::C4, Condition::C5]));
        let c7 = rep.verdict(Condition::C7);
        assert_eq!(c7.status, Status::Fail);
        let w = c7.witness.unwrap();
        assert!(w.margin < 0.0 && w.r < 1e-9, "{w:?}");
        // with an explicit constant the violation sits at the small end too
        let rep = check_assumptions_with(&spec, 100.0, 10_000, 1, Some(4.0)).unwrap();
        let w = rep.verdict(Condition::C7).witness.unwrap();
        assert!(w.r < 1e-3);
    }

    #[test]
    fn minimal_surface_fails_c4_and_c7() {
        let spec = NonlinearitySpec::minimal_surface();
        let rep = check_assumptions(&spec, 100.0, 10_000, 1).unwrap();
        assert!(rep.all_pass(&[Condition::C1, Condition::C2, Condition::C3, Condition::C5, Condition::C6]));
        // (1+r) psi'(r) < 1 already at r=1, the stated constants cannot satisfy (C4)
        let c4 = rep.verdict(Condition::C4);
        assert_eq!(c4.status, Status::Fail);
        assert!(c4.witness.unwrap().margin < -0.5);
        let c7 = rep.verdict(Condition::C7);
        assert_eq!(c7.status, Status::Fail);
        assert!(c7.witness.unwrap().r > 100.0);
    }

    #[test]
    fn non_newtonian_passes_c1_to_c5() {
        for p in [1.1, 1.5, 1.9] {
            let rep = check_assumptions(&NonlinearitySpec::non_newtonian(p).unwrap(), 1e3, 10_000, 1).unwrap();
            assert!(rep.all_pass(&[Condition::C1, Condition::C2, Condition::C3, Condition::C4, Condition::C5]));
            assert!(rep.verdict(Condition::C7).passed());
        }
    }

    #[test]
    fn c6_depends_on_dimension() {
        let spec = NonlinearitySpec::arctan();
        let rep = check_assumptions(&spec, 10.0, 100, 3).unwrap();
        assert_eq!(rep.verdict(Condition::C6).status, Status::Fail);
        assert!(rep.verdict(Condition::C6).witness.is_some());
    }

    #[test]
    fn rejects_bad_sampling() {
        let spec = NonlinearitySpec::arctan();
        assert!(check_assumptions(&spec, 0.0, 1000, 1).is_err());
        assert!(check_assumptions(&spec, 1.0, 99, 1).is_err());
    }

    #[test]
    fn exponent_examples() {
        let e = exponents(2.0, 1).unwrap();
        assert_eq!((e.s_star, e.beta_star, e.d0, e.rate), (0.5, 0.5, 1.0, 0.25));
        let e = exponents(1.0, 1).unwrap();
        assert_eq!((e.s_star, e.beta_star, e.d0, e.rate), (1.0, 1.0, 1.0, 1.0));
        for p in [1.01, 1.1, 1.3, 1.5, 1.77, 1.99] {
            for d in [1, 2] {
                assert_eq!(exponents(2.0 - p, d).unwrap().s_star, p);
            }
        }
        assert!(matches!(exponents(2.0, 3), Err(Error::ConditionViolation { condition: "C6", .. })));
        assert!(exponents(0.0, 1).is_err());
    }

    #[test]
    fn alpha_ranges() {
        assert_eq!(w2_alpha_range(0.5, 1), AlphaRange::One);
        assert_eq!(w2_alpha_range(0.5, 2), AlphaRange::Interval { upper: 2.0 });
        assert_eq!(w2_alpha_range(2.0, 2), AlphaRange::Undefined);
    }

    #[test]
    fn growth_bound_examples() {
        let gb = growth_lower_bound(&NonlinearitySpec::p_laplace(1.5).unwrap()).unwrap();
        assert_relative_eq!(gb.c2, 1.0, max_relative = 1e-10);
        assert_eq!(gb.k2, 0.0);
        let gb = growth_lower_bound(&NonlinearitySpec::log_diffusion()).unwrap();
        assert!(gb.c2 > 0.0 && gb.k2 <= 2.0);
        assert!(gb.lower_bound(0.0) <= 0.0);
        assert!(growth_lower_bound(&NonlinearitySpec::arctan()).is_err());
    }

    #[test]
    fn theta_constants() {
        assert_eq!(theta_constant(&NonlinearitySpec::p_laplace(1.5).unwrap()), 0.0);
        assert!(theta_constant(&NonlinearitySpec::arctan()) <= 1.0);
        assert!(theta_constant(&NonlinearitySpec::log_diffusion()) <= 2.0);
    }
}
