//! Numerical verifiers for the functional inequalities behind the decay and
//! moment estimates: pairing lower bounds for `A`, second-order bounds in
//! terms of the dissipation, and the Lyapunov bound `2<A(u),u> >= Θ(u)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::nonlinearity::{exponents, theta_constant, w2_alpha_range, AlphaRange, NonlinearitySpec};
use crate::potential::{apply_a, dissipation};
use crate::quadrature::GaussLegendre;

pub const DEFAULT_LAMBDA_NODES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictMeta {
    pub spec_id: String,
    pub grid: Grid,
    pub seed: Option<u64>,
    /// Named constants and integral components used by the check.
    pub values: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl VerdictMeta {
    fn new(spec: &NonlinearitySpec, grid: &Grid) -> Self {
        Self { spec_id: spec.id.clone(), grid: *grid, seed: None, values: BTreeMap::new(), notes: Vec::new() }
    }

    fn with(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }
}

/// `lhs >= rhs` up to `tol * max(|lhs|, |rhs|, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityVerdict {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub tol: f64,
    pub pass: bool,
    pub meta: VerdictMeta,
}

impl InequalityVerdict {
    /// Verdict for `lhs >= rhs`.
    pub fn at_least(lhs: f64, rhs: f64, tol: f64, meta: VerdictMeta) -> Self {
        let margin = lhs - rhs;
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        Self { lhs, rhs, margin, tol, pass: margin >= -tol * scale, meta }
    }

    /// Verdict for `lhs <= rhs`, stored with `margin = rhs - lhs`.
    pub fn at_most(lhs: f64, rhs: f64, tol: f64, meta: VerdictMeta) -> Self {
        let margin = rhs - lhs;
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        Self { lhs, rhs, margin, tol, pass: margin >= -tol * scale, meta }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.meta.seed = Some(seed);
        self
    }
}

fn require_dim(g: &Grid, d: usize) -> Result<()> {
    if g.dim() != d {
        return Err(Error::DimensionMismatch { required: d, actual: g.dim() });
    }
    Ok(())
}

fn same_grid(u: &Field, v: &Field) -> Result<()> {
    if u.grid() != v.grid() {
        return Err(Error::ShapeMismatch { expected: u.len(), got: v.len() });
    }
    Ok(())
}

/// `<A(u) - A(v), u - v>_h`.
pub fn monotonicity_pairing(spec: &NonlinearitySpec, u: &Field, v: &Field) -> Result<f64> {
    same_grid(u, v)?;
    apply_a(spec, u).sub(&apply_a(spec, v))?.dot(&u.sub(v)?)
}

const PAIRING_TOL: f64 = 1e-8;

/// One-dimensional pairing bound
/// `<A(u)-A(v), u-v> >= (‖u-v‖²/L) ∫_0^1 (∫_0^L 1/ψ'(γ_λ))^{-1} dλ`
/// with `γ_λ = ∇u + λ(∇v - ∇u)`.
pub fn pairing_bound_1d(spec: &NonlinearitySpec, u: &Field, v: &Field, n_lambda: usize) -> Result<InequalityVerdict> {
    let g = *u.grid();
    require_dim(&g, 1)?;
    same_grid(u, v)?;
    if n_lambda < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 quadrature nodes in lambda, got {n_lambda}")));
    }
    let lhs = monotonicity_pairing(spec, u, v)?;
    let diff_sq = u.sub(v)?.h_norm().powi(2);
    let gu = g.gradient(u)?.pieces;
    let gv = g.gradient(v)?.pieces;
    let h = g.piece_weight();
    let length = g.lengths()[0];
    let quad = GaussLegendre::new(n_lambda);
    let outer = if diff_sq == 0.0 {
        0.0
    } else {
        quad.integrate(|lam| {
            // 1/ψ' = 0 where ψ' = +inf
            let inner: f64 = gu
                .iter()
                .zip(&gv)
                .map(|(a, b)| h / spec.psi_prime(a[0] + lam * (b[0] - a[0])))
                .sum();
            if inner > 0.0 {
                1.0 / inner
            } else {
                f64::INFINITY
            }
        })
    };
    let rhs = if diff_sq == 0.0 { 0.0 } else { diff_sq / length * outer };
    let meta = VerdictMeta::new(spec, &g).with("diff_sq", diff_sq).with("lambda_integral", outer).with("length", length);
    Ok(InequalityVerdict::at_least(lhs, rhs, PAIRING_TOL, meta))
}

/// Both sides of the multi-dimensional pairing bound without its unknown
/// constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairingRatio {
    pub lhs: f64,
    pub rhs_unscaled: f64,
    /// `lhs / rhs_unscaled`; `NaN` when both vanish.
    pub ratio: f64,
}

/// `lhs = <A(u)-A(v), u-v>`, `rhs = ‖u-v‖² ∫_0^1 (∫Λ_min(γ_λ)^{-d/2})^{-2/d} dλ`.
pub fn pairing_bound_nd(spec: &NonlinearitySpec, u: &Field, v: &Field, n_lambda: usize) -> Result<PairingRatio> {
    let g = *u.grid();
    require_dim(&g, 2)?;
    same_grid(u, v)?;
    if n_lambda < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 quadrature nodes in lambda, got {n_lambda}")));
    }
    let lhs = monotonicity_pairing(spec, u, v)?;
    let diff_sq = u.sub(v)?.h_norm().powi(2);
    if diff_sq == 0.0 {
        return Ok(PairingRatio { lhs, rhs_unscaled: 0.0, ratio: f64::NAN });
    }
    let d = g.dim() as f64;
    let gu = g.gradient(u)?.pieces;
    let gv = g.gradient(v)?.pieces;
    let w = g.piece_weight();
    let quad = GaussLegendre::new(n_lambda);
    let outer = quad.integrate(|lam| {
        let inner: f64 = gu
            .iter()
            .zip(&gv)
            .map(|(a, b)| {
                let z = [a[0] + lam * (b[0] - a[0]), a[1] + lam * (b[1] - a[1])];
                w * spec.kappa(z[0].hypot(z[1])).powf(-d / 2.0)
            })
            .sum();
        inner.powf(-2.0 / d)
    });
    let rhs_unscaled = diff_sq * outer;
    Ok(PairingRatio { lhs, rhs_unscaled, ratio: lhs / rhs_unscaled })
}

/// Constants of the one-dimensional second-order bound
/// `X^α <= α D + C_b W^{q} + C_a`, with `X = ∫|u_xx|`, `D` the dissipation,
/// `W = ∫|u_x|` and `α = s*`, obtained from the Hölder/Young chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderConstants {
    pub alpha: f64,
    pub c_a: f64,
    pub c_b: f64,
    /// Exponent of `W`, `αs/(4-2α-s) = max(1, 2-s)`.
    pub w_exponent: f64,
}

pub fn second_order_constants(spec: &NonlinearitySpec, length: f64) -> Result<SecondOrderConstants> {
    let k = &spec.constants;
    let s = k.s;
    let alpha = exponents(s, 1)?.s_star;
    let gamma = alpha / (2.0 - alpha);
    // Hölder, then Young with exponents (2/α, 2/(2-α)), doubled
    let c1 = (2.0 - alpha) / 2.0 * 2f64.powf((gamma - 1.0).max(0.0));
    let c_a = 2.0 * c1 * (k.a * length).powf(gamma);
    // (∫|u_x|^s)^γ <= L^{γ(1-s/2)} (W X)^{γs/2}
    let kappa = 2.0 * c1 * k.b.powf(gamma) * length.powf(gamma * (1.0 - s / 2.0));
    let e = alpha * s / (4.0 - 2.0 * alpha);
    let p = alpha / e;
    let eps = p.powf(1.0 / p);
    let q = p / (p - 1.0);
    let c_b = (kappa / eps).powf(q) / q;
    Ok(SecondOrderConstants { alpha, c_a, c_b, w_exponent: e * q })
}

const SECOND_ORDER_TOL: f64 = 1e-9;

/// One-dimensional second-order inequality with the chain constants.
pub fn second_order_1d(spec: &NonlinearitySpec, u: &Field) -> Result<InequalityVerdict> {
    let g = *u.grid();
    require_dim(&g, 1)?;
    let k = second_order_constants(spec, g.lengths()[0])?;
    let x: f64 = g.second_differences(u).iter().map(|(w, v)| w * v.abs()).sum();
    let dis = dissipation(spec, u);
    let w = u.w11_seminorm();
    let lhs = x.powf(k.alpha);
    let rhs = k.alpha * dis + k.c_b * w.powf(k.w_exponent) + k.c_a;
    let mut meta = VerdictMeta::new(spec, &g)
        .with("alpha", k.alpha)
        .with("C_a", k.c_a)
        .with("C_b", k.c_b)
        .with("w_exponent", k.w_exponent)
        .with("int_abs_uxx", x)
        .with("dissipation", dis)
        .with("w11", w)
        // the dissipation coefficient of the doubled form before the final
        // absorption step
        .with("rhs_doubled_normalization", 0.5 * (k.alpha * dis + k.c_b * w.powf(k.w_exponent) + k.c_a));
    if !(k.c_a.is_finite() && k.c_b.is_finite()) {
        meta.notes.push("chain constant overflowed".into());
    } else if k.c_b < f64::MIN_POSITIVE && spec.constants.b > 0.0 {
        meta.notes.push("chain constant underflowed".into());
    }
    meta.notes.push("dissipation coefficient alpha; the doubled chain form carries 2 X^alpha on the left".into());
    Ok(InequalityVerdict::at_most(lhs, rhs, SECOND_ORDER_TOL, meta))
}

/// Result of a check that may not apply to the given exponents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Check {
    Verdict(InequalityVerdict),
    NotApplicable(String),
}

/// Left and right functionals of the multi-dimensional second-order bound:
/// `(Σ_ij ∫|∂_i∂_j u|^α)^{s*/α}` and `1 + D(u)`.
pub fn second_order_nd_sides(spec: &NonlinearitySpec, u: &Field, alpha: f64) -> Result<(f64, f64)> {
    let g = *u.grid();
    let s_star = exponents(spec.s(), g.dim())?.s_star;
    let sum: f64 = g.second_differences(u).iter().map(|(w, v)| w * v.abs().powf(alpha)).sum();
    Ok((sum.powf(s_star / alpha), 1.0 + dissipation(spec, u)))
}

fn admissible_alpha(spec: &NonlinearitySpec, d: usize, alpha: f64) -> Result<std::result::Result<f64, String>> {
    match w2_alpha_range(spec.s(), d) {
        AlphaRange::One => Err(Error::DimensionMismatch { required: 2, actual: 1 }),
        AlphaRange::Undefined => Ok(Err(format!("d(2-s)/(d-s) undefined for s={} and d={d}", spec.s()))),
        AlphaRange::Empty { upper } => Ok(Err(format!("admissible interval (1, {upper}] is empty"))),
        AlphaRange::Interval { upper } => {
            if alpha > 1.0 && alpha <= upper {
                Ok(Ok(upper))
            } else {
                Err(Error::InvalidArgument(format!("alpha={alpha} outside the admissible interval (1, {upper}]")))
            }
        }
    }
}

/// Frozen constant of the multi-dimensional second-order bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderCalibration {
    pub spec_id: String,
    pub grid: Grid,
    pub alpha: f64,
    pub max_ratio: f64,
    /// `max_ratio * (1 + margin)`.
    pub constant: f64,
    pub samples: usize,
}

pub const CALIBRATION_MARGIN: f64 = 0.25;

/// Calibrates the constant on `samples`: `C = (1 + margin) max lhs/rhs`.
pub fn calibrate_second_order_nd(
    spec: &NonlinearitySpec,
    samples: &[Field],
    alpha: f64,
) -> Result<std::result::Result<SecondOrderCalibration, String>> {
    let first = samples.first().ok_or(Error::EmptyStream)?;
    let g = *first.grid();
    require_dim(&g, 2)?;
    if let Err(reason) = admissible_alpha(spec, g.dim(), alpha)? {
        return Ok(Err(reason));
    }
    let mut max_ratio = 0.0f64;
    for u in samples {
        let (l, r) = second_order_nd_sides(spec, u, alpha)?;
        max_ratio = max_ratio.max(l / r);
    }
    Ok(Ok(SecondOrderCalibration {
        spec_id: spec.id.clone(),
        grid: g,
        alpha,
        max_ratio,
        constant: max_ratio * (1.0 + CALIBRATION_MARGIN),
        samples: samples.len(),
    }))
}

/// Multi-dimensional second-order inequality against a frozen constant.
pub fn second_order_nd(spec: &NonlinearitySpec, u: &Field, alpha: f64, constant: f64) -> Result<Check> {
    let g = *u.grid();
    require_dim(&g, 2)?;
    if let Err(reason) = admissible_alpha(spec, g.dim(), alpha)? {
        return Ok(Check::NotApplicable(reason));
    }
    let (l, r) = second_order_nd_sides(spec, u, alpha)?;
    let meta = VerdictMeta::new(spec, &g).with("alpha", alpha).with("constant", constant).with("one_plus_dissipation", r);
    Ok(Check::Verdict(InequalityVerdict::at_most(l, constant * r, 0.0, meta)))
}

/// `Θ(u) = 2∫|∇u|^{2-s} - 2K|O|`, `K` the tightened constant with
/// `ψ(r) r >= r^{2-s} - K`.
pub fn lyapunov_theta(spec: &NonlinearitySpec, u: &Field) -> f64 {
    let g = u.grid();
    2.0 * u.grad_power_integral(2.0 - spec.s()) - 2.0 * theta_constant(spec) * g.volume()
}

/// Checks `2<A(u),u> >= Θ(u)`.
pub fn lyapunov_check(spec: &NonlinearitySpec, u: &Field) -> InequalityVerdict {
    let lhs = 2.0 * apply_a(spec, u).dot(u).expect("same grid");
    let rhs = lyapunov_theta(spec, u);
    let meta = VerdictMeta::new(spec, u.grid()).with("K_theta", theta_constant(spec));
    InequalityVerdict::at_least(lhs, rhs, PAIRING_TOL, meta)
}
