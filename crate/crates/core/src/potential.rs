//! The divergence-form operator `A(u) = -div φ(∇u)`, its convex energy, the
//! Hessian geometry of the radial potential and the resolvent
//! `J_α = (Id + αA)^{-1}` computed as a proximal map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::nonlinearity::{Family, NonlinearitySpec};

/// `φ(z) = ψ(|z|) z/|z|`, zero at the origin.
pub fn phi_vec(spec: &NonlinearitySpec, z: &[f64]) -> Vec<f64> {
    if z.len() == 1 {
        return vec![spec.psi(z[0])];
    }
    let r = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if r == 0.0 {
        return vec![0.0; z.len()];
    }
    let k = spec.psi_over_r(r);
    z.iter().map(|x| k * x).collect()
}

#[inline]
fn phi_piece(spec: &NonlinearitySpec, dim: usize, z: [f64; 2]) -> [f64; 2] {
    if dim == 1 {
        return [spec.psi(z[0]), 0.0];
    }
    let r = z[0].hypot(z[1]);
    if r == 0.0 {
        return [0.0, 0.0];
    }
    let k = spec.psi_over_r(r);
    [k * z[0], k * z[1]]
}

/// `D²Ψ(z)` as a row-major `d×d` matrix; undefined at `z = 0`.
pub fn d2psi(spec: &NonlinearitySpec, z: &[f64]) -> Result<Vec<f64>> {
    let d = z.len();
    let r = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if r == 0.0 {
        return Err(Error::InvalidArgument("Hessian of the potential is undefined at z = 0".into()));
    }
    let (radial, tangential) = (spec.psi_prime(r), spec.psi_over_r(r));
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let p = z[i] * z[j] / (r * r);
            let id = if i == j { 1.0 } else { 0.0 };
            m[i * d + j] = radial * p + tangential * (id - p);
        }
    }
    Ok(m)
}

/// Smallest eigenvalue of `D²Ψ(z)`; at `z = 0` its right limit (possibly `+inf`).
pub fn lambda_min(spec: &NonlinearitySpec, z: &[f64]) -> f64 {
    let r = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if z.len() == 1 {
        return spec.psi_prime(r);
    }
    spec.kappa(r)
}

/// Per-piece values `φ(∇u)`.
pub fn flux(spec: &NonlinearitySpec, u: &Field) -> Vec<[f64; 2]> {
    let g = u.grid();
    let mut pieces = vec![[0.0; 2]; g.piece_count()];
    g.gradient_into(u.values(), &mut pieces);
    for p in pieces.iter_mut() {
        *p = phi_piece(spec, g.dim(), *p);
    }
    pieces
}

/// `A(u) = -div φ(∇u)`.
pub fn apply_a(spec: &NonlinearitySpec, u: &Field) -> Field {
    let g = u.grid();
    let f = flux(spec, u);
    let mut out = vec![0.0; g.len()];
    g.neg_divergence_into(&f, &mut out);
    Field::new(*g, out).expect("finite flux divergence")
}

/// `∫Ψ(∇u)` over the gradient pieces.
pub fn energy(spec: &NonlinearitySpec, u: &Field) -> f64 {
    let g = u.grid();
    let mut pieces = vec![[0.0; 2]; g.piece_count()];
    g.gradient_into(u.values(), &mut pieces);
    g.piece_weight() * pieces.iter().map(|z| spec.capital_psi(z[0].hypot(z[1]))).sum::<f64>()
}

/// Discrete `Σ_i ∫<D²Ψ(∇u)∇∂_i u, ∇∂_i u>`: for every axis, the monotonicity
/// pairing of `φ(∇u)` at pieces one cell apart, divided by `h_i²`. It is
/// nonnegative by monotonicity of `φ` and, in one dimension, equals
/// `<A(u), -Δ_h u>_h`.
pub fn dissipation(spec: &NonlinearitySpec, u: &Field) -> f64 {
    let g = u.grid();
    let mut z = vec![[0.0; 2]; g.piece_count()];
    g.gradient_into(u.values(), &mut z);
    let f: Vec<[f64; 2]> = z.iter().map(|p| phi_piece(spec, g.dim(), *p)).collect();
    let pair = |a: usize, b: usize| (f[b][0] - f[a][0]) * (z[b][0] - z[a][0]) + (f[b][1] - f[a][1]) * (z[b][1] - z[a][1]);
    match g.dim() {
        1 => {
            let h = g.h(0);
            (0..g.piece_count() - 1).map(|e| pair(e, e + 1)).sum::<f64>() / h
        }
        _ => {
            let (n0, n1) = (g.shape()[0], g.shape()[1]);
            let (hx, hy) = (g.h(0), g.h(1));
            let w = g.piece_weight();
            let idx = |i: usize, j: usize, t: usize| 2 * (i * (n1 + 1) + j) + t;
            let mut sx = 0.0;
            let mut sy = 0.0;
            for i in 0..=n0 {
                for j in 0..=n1 {
                    for t in 0..2 {
                        if i < n0 {
                            sx += pair(idx(i, j, t), idx(i + 1, j, t));
                        }
                        if j < n1 {
                            sy += pair(idx(i, j, t), idx(i, j + 1, t));
                        }
                    }
                }
            }
            w * (sx / (hx * hx) + sy / (hy * hy))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxSolveSettings {
    pub max_iters: usize,
    /// Relative stationarity tolerance: `‖v - g + αA(v)‖_H <= grad_tol (1 + ‖g‖_H)`.
    pub grad_tol: f64,
    /// Sufficient-decrease constant of the backtracking line search.
    pub armijo: f64,
    /// Step shrink factor of the line search.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for ProxSolveSettings {
    fn default() -> Self {
        Self { max_iters: 500, grad_tol: 1e-9, armijo: 1e-4, backtrack: 0.5, max_backtracks: 60 }
    }
}

impl ProxSolveSettings {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.grad_tol > 0.0 && self.grad_tol <= 1e-4) {
            bad.push(format!("grad_tol={} must lie in (0, 1e-4]", self.grad_tol));
        }
        if self.max_iters < 10 {
            bad.push(format!("max_iters={} must be at least 10", self.max_iters));
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            bad.push(format!("armijo={} must lie in (0, 0.5)", self.armijo));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            bad.push(format!("backtrack={} must lie in (0, 1)", self.backtrack));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(bad.join("; ")))
        }
    }
}

/// Outcome of one proximal solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxStats {
    pub iterations: usize,
    pub residual: f64,
    pub target: f64,
    /// Stopped at the rounding floor of `ψ` rather than at `target`.
    pub floor_limited: bool,
}

/// Residual accepted when the line search cannot make progress any more;
/// the p-Laplace flux is only Hölder near a zero gradient, so rounding in
/// `∇v` caps the reachable residual.
const ROUNDING_FLOOR_TOL: f64 = 1e-6;
/// Upper bound on `ψ'` in the Newton model relative to its value at the
/// root-mean-square gradient.
const STIFFNESS_CAP: f64 = 1e8;
/// Relative residual below which full Newton steps are taken on the
/// residual test alone.
const NEWTON_BASIN: f64 = 1e-4;

/// Reusable proximal solver for `v ↦ ½‖v - g‖²_H + α∫Ψ(∇v)`.
#[derive(Debug, Clone)]
pub struct ProxSolver {
    spec: NonlinearitySpec,
    grid: Grid,
    settings: ProxSolveSettings,
    grad: Vec<[f64; 2]>,
    flux: Vec<[f64; 2]>,
    /// Hessian of `Ψ` per piece: `[h00, h01, h11]`.
    hess: Vec<[f64; 3]>,
    resid: Vec<f64>,
    dir: Vec<f64>,
    trial: Vec<f64>,
    scratch: [Vec<f64>; 4],
    piece_scratch: Vec<[f64; 2]>,
}

impl ProxSolver {
    pub fn new(spec: &NonlinearitySpec, grid: &Grid, settings: ProxSolveSettings) -> Result<Self> {
        settings.validate()?;
        let (n, p) = (grid.len(), grid.piece_count());
        Ok(Self {
            spec: spec.clone(),
            grid: *grid,
            settings,
            grad: vec![[0.0; 2]; p],
            flux: vec![[0.0; 2]; p],
            hess: vec![[0.0; 3]; p],
            resid: vec![0.0; n],
            dir: vec![0.0; n],
            trial: vec![0.0; n],
            scratch: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            piece_scratch: vec![[0.0; 2]; p],
        })
    }

    pub fn spec(&self) -> &NonlinearitySpec {
        &self.spec
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn settings(&self) -> &ProxSolveSettings {
        &self.settings
    }

    fn h_norm(&self, x: &[f64]) -> f64 {
        (self.grid.node_weight() * x.iter().map(|a| a * a).sum::<f64>()).sqrt()
    }

    /// Fills `grad`, `flux` and `resid = v - g + αA(v)`; returns `‖resid‖_H`.
    fn residual(&mut self, v: &[f64], g: &[f64], alpha: f64) -> f64 {
        let dim = self.grid.dim();
        self.grid.gradient_into(v, &mut self.grad);
        for (f, z) in self.flux.iter_mut().zip(&self.grad) {
            *f = phi_piece(&self.spec, dim, *z);
        }
        self.grid.neg_divergence_into(&self.flux, &mut self.resid);
        for ((r, vi), gi) in self.resid.iter_mut().zip(v).zip(g) {
            *r = vi - gi + alpha * *r;
        }
        self.h_norm(&self.resid)
    }

    fn objective(&mut self, v: &[f64], g: &[f64], alpha: f64) -> f64 {
        self.grid.gradient_into(v, &mut self.piece_scratch);
        let e: f64 = self.piece_scratch.iter().map(|z| self.spec.capital_psi(z[0].hypot(z[1]))).sum();
        let q: f64 = v.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
        0.5 * self.grid.node_weight() * q + alpha * self.grid.piece_weight() * e
    }

    fn assemble_hessian(&mut self) {
        let dim = self.grid.dim();
        let spec = &self.spec;
        let count = self.grad.len() as f64;
        let rms = (self.grad.iter().map(|z| z[0] * z[0] + z[1] * z[1]).sum::<f64>() / count).sqrt();
        let cap = STIFFNESS_CAP * (1.0 + spec.psi_prime(rms).min(1e300).max(spec.psi_prime(1.0)));
        for (hp, z) in self.hess.iter_mut().zip(&self.grad) {
            if dim == 1 {
                *hp = [spec.psi_prime(z[0]).min(cap), 0.0, 0.0];
            } else {
                let r = z[0].hypot(z[1]);
                if r == 0.0 {
                    let k = spec.kappa(0.0).min(cap);
                    *hp = [k, 0.0, k];
                } else {
                    let rad = spec.psi_prime(r).min(cap);
                    let tan = spec.psi_over_r(r).min(cap);
                    let (c, s) = (z[0] / r, z[1] / r);
                    *hp = [rad * c * c + tan * s * s, (rad - tan) * c * s, rad * s * s + tan * c * c];
                }
            }
        }
    }

    /// `out = x + α (-div) D²Ψ ∇x` using the assembled Hessian.
    fn hess_apply(&mut self, x: &[f64], out: &mut [f64], alpha: f64) {
        self.grid.gradient_into(x, &mut self.piece_scratch);
        for (z, h) in self.piece_scratch.iter_mut().zip(&self.hess) {
            *z = [h[0] * z[0] + h[1] * z[1], h[1] * z[0] + h[2] * z[1]];
        }
        self.grid.neg_divergence_into(&self.piece_scratch, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + alpha * *o;
        }
    }

    /// Newton direction `dir = -H^{-1} resid`.
    fn newton_direction(&mut self, alpha: f64) {
        if self.grid.dim() == 1 {
            // tridiagonal: diag_i = 1 + α(k_i + k_{i+1})/h², off_i = -α k_{i+1}/h²
            let n = self.grid.len();
            let c = alpha / (self.grid.h(0) * self.grid.h(0));
            let [cp, dp, _, _] = &mut self.scratch;
            let k = |e: usize| self.hess[e][0];
            let mut prev_c = 0.0;
            let mut prev_d = 0.0;
            for i in 0..n {
                let diag = 1.0 + c * (k(i) + k(i + 1));
                let lower = if i > 0 { -c * k(i) } else { 0.0 };
                let upper = if i + 1 < n { -c * k(i + 1) } else { 0.0 };
                let denom = diag - lower * prev_c;
                let ci = upper / denom;
                let di = (-self.resid[i] - lower * prev_d) / denom;
                cp[i] = ci;
                dp[i] = di;
                prev_c = ci;
                prev_d = di;
            }
            self.dir[n - 1] = dp[n - 1];
            for i in (0..n - 1).rev() {
                self.dir[i] = dp[i] - cp[i] * self.dir[i + 1];
            }
        } else {
            self.conjugate_gradient(alpha);
        }
    }

    fn conjugate_gradient(&mut self, alpha: f64) {
        let n = self.grid.len();
        let mut x = std::mem::take(&mut self.dir);
        x.iter_mut().for_each(|v| *v = 0.0);
        let mut r: Vec<f64> = self.resid.iter().map(|v| -v).collect();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        let stop = rr * 1e-20;
        for _ in 0..(4 * n).max(50) {
            if rr <= stop {
                break;
            }
            self.hess_apply(&p, &mut ap, alpha);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let step = rr / pap;
            for i in 0..n {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        self.dir = x;
    }

    /// Solves the proximal problem in place: `v` holds the start on entry and
    /// the minimizer on exit.
    pub fn solve_in_place(&mut self, g: &[f64], alpha: f64, v: &mut [f64]) -> Result<ProxStats> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("resolvent parameter alpha={alpha} must be positive")));
        }
        if g.len() != self.grid.len() || v.len() != self.grid.len() {
            return Err(Error::ShapeMismatch { expected: self.grid.len(), got: g.len().min(v.len()) });
        }
        let target = self.settings.grad_tol * (1.0 + self.h_norm(g));
        let mut rn = self.residual(v, g, alpha);
        if g.iter().all(|&x| x == 0.0) && v.iter().all(|&x| x == 0.0) {
            return Ok(ProxStats { iterations: 0, residual: 0.0, target, floor_limited: false });
        }
        if let (Family::PLaplace { p }, 1) = (self.spec.family, self.grid.dim()) {
            if rn > target {
                return self.solve_flux_1d(g, alpha, v, p, target);
            }
        }
        let gn = self.h_norm(g);
        let mut obj: Option<f64> = None;
        for it in 0..self.settings.max_iters {
            if rn <= target {
                return Ok(ProxStats { iterations: it, residual: rn, target, floor_limited: false });
            }
            self.assemble_hessian();
            self.newton_direction(alpha);
            if !self.dir.iter().all(|d| d.is_finite()) {
                // fall back to the steepest-descent direction
                for (d, r) in self.dir.iter_mut().zip(&self.resid) {
                    *d = -r;
                }
            }
            // full Newton step accepted when the residual drops; outside the
            // local basin the objective must not rise either, otherwise the
            // step and the line search below can cycle
            let mut trial = std::mem::take(&mut self.trial);
            for ((t, vi), d) in trial.iter_mut().zip(v.iter()).zip(&self.dir) {
                *t = vi + d;
            }
            let saved_resid = self.resid.clone();
            let rn_full = self.residual(&trial, g, alpha);
            let mut f0 = obj;
            if rn_full < rn {
                let accept = if rn <= NEWTON_BASIN * (1.0 + gn) {
                    Some(None)
                } else {
                    let f_now = match f0 {
                        Some(f) => f,
                        None => self.objective(v, g, alpha),
                    };
                    f0 = Some(f_now);
                    let f_full = self.objective(&trial, g, alpha);
                    (f_full <= f_now).then_some(Some(f_full))
                };
                if let Some(f) = accept {
                    v.copy_from_slice(&trial);
                    self.trial = trial;
                    rn = rn_full;
                    obj = f;
                    continue;
                }
            }
            // otherwise backtrack on the objective
            self.resid.copy_from_slice(&saved_resid);
            let f0 = match f0 {
                Some(f) => f,
                None => self.objective(v, g, alpha),
            };
            let slope = self.grid.node_weight() * self.resid.iter().zip(&self.dir).map(|(r, d)| r * d).sum::<f64>();
            let mut accepted = None;
            if slope < 0.0 {
                let mut t = self.settings.backtrack;
                for _ in 0..self.settings.max_backtracks {
                    for ((tr, vi), d) in trial.iter_mut().zip(v.iter()).zip(&self.dir) {
                        *tr = vi + t * d;
                    }
                    let f = self.objective(&trial, g, alpha);
                    if f <= f0 + self.settings.armijo * t * slope {
                        accepted = Some(f);
                        break;
                    }
                    t *= self.settings.backtrack;
                }
            }
            match accepted {
                Some(f) => {
                    v.copy_from_slice(&trial);
                    self.trial = trial;
                    obj = Some(f);
                    rn = self.residual(v, g, alpha);
                }
                None => {
                    self.trial = trial;
                    let rn_now = self.residual(v, g, alpha);
                    if rn_now <= ROUNDING_FLOOR_TOL * (1.0 + self.h_norm(g)) {
                        return Ok(ProxStats { iterations: it + 1, residual: rn_now, target, floor_limited: true });
                    }
                    return Err(Error::SolverNonConvergence { iterations: it + 1, residual: rn_now, target });
                }
            }
        }
        if rn <= target {
            return Ok(ProxStats { iterations: self.settings.max_iters, residual: rn, target, floor_limited: false });
        }
        Err(Error::SolverNonConvergence { iterations: self.settings.max_iters, residual: rn, target })
    }

    /// Newton on the edge fluxes `q` for the 1-D p-Laplace, where `ψ'` is
    /// singular at zero but the inverse flux `|q|^{1/(p-1)}` is smooth. The
    /// node values are `v = g - α Dᵀq` and the stationarity condition is
    /// `φ^{-1}(q) = Dv`, the gradient of the convex dual objective
    /// `(α/2)‖Dᵀq‖² - <Dᵀq, g> + Σ_e h |q_e|^{p'}/p'`.
    fn solve_flux_1d(&mut self, g: &[f64], alpha: f64, v: &mut [f64], p: f64, target: f64) -> Result<ProxStats> {
        let n = self.grid.len();
        let h = self.grid.h(0);
        let conj = p / (p - 1.0);
        let inv_exp = 1.0 / (p - 1.0);
        let expo = (2.0 - p) / (p - 1.0);
        let z_of = |q: f64| q.abs().powf(inv_exp).copysign(q);
        let mut q: Vec<f64> = self.grad.iter().take(n + 1).map(|z| self.spec.psi(z[0])).collect();
        let nodes = |q: &[f64], out: &mut [f64]| {
            for i in 0..n {
                out[i] = g[i] - alpha * (q[i] - q[i + 1]) / h;
            }
        };
        let dual = |q: &[f64], x: &[f64]| -> f64 {
            // with x = g - α Dᵀq: (α/2)|Dᵀq|² - <Dᵀq, g> = (|x|² - |g|²)/(2α)
            let quad: f64 = x.iter().zip(g).map(|(a, b)| a * a - b * b).sum::<f64>() * h / (2.0 * alpha);
            quad + h * q.iter().map(|x| x.abs().powf(conj)).sum::<f64>() / conj
        };
        let mut x = vec![0.0; n];
        let mut trial_x = vec![0.0; n];
        let mut f = vec![0.0; n + 1];
        let mut m = vec![0.0; n + 1];
        let mut dq = vec![0.0; n + 1];
        let mut tq = vec![0.0; n + 1];
        let mut cp = vec![0.0; n + 1];
        let mut dp = vec![0.0; n + 1];
        let edge_grad = |x: &[f64], e: usize| -> f64 {
            let right = if e < n { x[e] } else { 0.0 };
            let left = if e > 0 { x[e - 1] } else { 0.0 };
            (right - left) / h
        };
        nodes(&q, &mut x);
        let mut phi = dual(&q, &x);
        let scale = 1.0 + (0..=n).map(|e| edge_grad(g, e).powi(2)).sum::<f64>().sqrt();
        for it in 0..self.settings.max_iters {
            let mut fn2 = 0.0;
            for e in 0..=n {
                f[e] = z_of(q[e]) - edge_grad(&x, e);
                fn2 += f[e] * f[e];
                m[e] = inv_exp * q[e].abs().powf(expo);
            }
            v.copy_from_slice(&x);
            let rn = self.residual(v, g, alpha);
            if rn <= target {
                return Ok(ProxStats { iterations: it, residual: rn, target, floor_limited: false });
            }
            if fn2.sqrt() <= 1e-14 * scale {
                return self.flux_floor(it, rn, target, g);
            }
            // J = α D Dᵀ + diag(m): diagonal α(2 or 1)/h² + m, off-diagonal -α/h²
            let c = alpha / (h * h);
            let mut prev_c = 0.0;
            let mut prev_d = 0.0;
            for e in 0..=n {
                let diag = m[e] + if e == 0 || e == n { c } else { 2.0 * c };
                let lower = if e > 0 { -c } else { 0.0 };
                let upper = if e < n { -c } else { 0.0 };
                let denom = diag - lower * prev_c;
                cp[e] = upper / denom;
                dp[e] = (-f[e] - lower * prev_d) / denom;
                prev_c = cp[e];
                prev_d = dp[e];
            }
            dq[n] = dp[n];
            for e in (0..n).rev() {
                dq[e] = dp[e] - cp[e] * dq[e + 1];
            }
            let slope: f64 = h * f.iter().zip(&dq).map(|(a, b)| a * b).sum::<f64>();
            if !(slope < 0.0) || !dq.iter().all(|d| d.is_finite()) {
                return self.flux_floor(it + 1, rn, target, g);
            }
            // the full step is taken whenever it shrinks the dual gradient,
            // since the objective itself flattens into rounding near the optimum
            for ((a, b), d) in tq.iter_mut().zip(&q).zip(&dq) {
                *a = b + d;
            }
            nodes(&tq, &mut trial_x);
            let full: f64 = (0..=n).map(|e| (z_of(tq[e]) - edge_grad(&trial_x, e)).powi(2)).sum();
            if full < fn2 {
                phi = dual(&tq, &trial_x);
                std::mem::swap(&mut q, &mut tq);
                std::mem::swap(&mut x, &mut trial_x);
                continue;
            }
            let mut t = self.settings.backtrack;
            let mut accepted = false;
            for _ in 0..self.settings.max_backtracks {
                for ((a, b), d) in tq.iter_mut().zip(&q).zip(&dq) {
                    *a = b + t * d;
                }
                nodes(&tq, &mut trial_x);
                let val = dual(&tq, &trial_x);
                if val <= phi + self.settings.armijo * t * slope {
                    std::mem::swap(&mut q, &mut tq);
                    std::mem::swap(&mut x, &mut trial_x);
                    phi = val;
                    accepted = true;
                    break;
                }
                t *= self.settings.backtrack;
            }
            if !accepted {
                return self.flux_floor(it + 1, rn, target, g);
            }
        }
        v.copy_from_slice(&x);
        let rn = self.residual(v, g, alpha);
        if rn <= target {
            return Ok(ProxStats { iterations: self.settings.max_iters, residual: rn, target, floor_limited: false });
        }
        self.flux_floor(self.settings.max_iters, rn, target, g)
    }

    /// Dual progress has stalled in rounding: accept below the floor
    /// tolerance, fail otherwise.
    fn flux_floor(&self, iterations: usize, residual: f64, target: f64, g: &[f64]) -> Result<ProxStats> {
        if residual <= target {
            return Ok(ProxStats { iterations, residual, target, floor_limited: false });
        }
        if residual <= ROUNDING_FLOOR_TOL * (1.0 + self.h_norm(g)) {
            return Ok(ProxStats { iterations, residual, target, floor_limited: true });
        }
        Err(Error::SolverNonConvergence { iterations, residual, target })
    }

    /// `J_α g`, warm-started from `g`.
    pub fn solve(&mut self, g: &Field, alpha: f64) -> Result<(Field, ProxStats)> {
        self.grid.check(g)?;
        let mut v = g.values().to_vec();
        let stats = self.solve_in_place(g.values(), alpha, &mut v)?;
        Ok((Field::new(self.grid, v)?, stats))
    }

    /// One linearly implicit step `v = g + d`, `(I + αA'(g)) d = -(αA(g))`.
    pub fn linearized_in_place(&mut self, g: &[f64], alpha: f64, v: &mut [f64]) -> Result<()> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("resolvent parameter alpha={alpha} must be positive")));
        }
        v.copy_from_slice(g);
        self.residual(v, g, alpha);
        self.assemble_hessian();
        self.newton_direction(alpha);
        for (vi, d) in v.iter_mut().zip(&self.dir) {
            *vi += d;
        }
        Ok(())
    }
}

/// `J_α g = (Id + αA)^{-1} g`, the minimizer of `½‖v - g‖²_H + α∫Ψ(∇v)`.
pub fn resolvent_j(spec: &NonlinearitySpec, g: &Field, alpha: f64, settings: &ProxSolveSettings) -> Result<Field> {
    Ok(ProxSolver::new(spec, g.grid(), *settings)?.solve(g, alpha)?.0)
}

/// `A_α u = (u - J_α u)/α`, which equals `A(J_α u)` at the stationary point.
pub fn yosida_a(spec: &NonlinearitySpec, u: &Field, alpha: f64, settings: &ProxSolveSettings) -> Result<Field> {
    let j = resolvent_j(spec, u, alpha, settings)?;
    Ok(u.sub(&j)?.scaled(1.0 / alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpectralBasis;
    use crate::nonlinearity::catalog;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn smooth(g: &Grid, rng: &mut ChaCha8Rng, modes: usize, amp: f64) -> Field {
        let b = SpectralBasis::new(g);
        let xi: Vec<f64> = (0..modes.min(b.len())).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        b.band_limited(&xi, amp, 1.0).unwrap()
    }

    fn all_specs() -> Vec<NonlinearitySpec> {
        let mut v = catalog();
        v.push(NonlinearitySpec::linear());
        v
    }

    #[test]
    fn phi_examples() {
        for s in all_specs() {
            assert_eq!(phi_vec(&s, &[0.0, 0.0]), vec![0.0, 0.0]);
            let a = phi_vec(&s, &[0.3, -1.2]);
            let b = phi_vec(&s, &[-0.3, 1.2]);
            assert!((a[0] + b[0]).abs() < 1e-15 && (a[1] + b[1]).abs() < 1e-15);
        }
        let at = NonlinearitySpec::arctan();
        let p = phi_vec(&at, &[1.0, 0.0]);
        assert_relative_eq!(p[0], PI / 4.0, max_relative = 1e-15);
        assert_eq!(p[1], 0.0);
        let pl = NonlinearitySpec::p_laplace(1.5).unwrap();
        let p = phi_vec(&pl, &[4.0 * 0.6, 4.0 * 0.8]);
        assert_relative_eq!(p[0].hypot(p[1]), 2.0, max_relative = 1e-14);
    }

    #[test]
    fn hessian_eigenvalues() {
        let at = NonlinearitySpec::arctan();
        let m = d2psi(&at, &[0.6, 0.8]).unwrap();
        // eigenvalues of a symmetric 2x2
        let (tr, det) = (m[0] + m[3], m[0] * m[3] - m[1] * m[2]);
        let disc = (tr * tr / 4.0 - det).sqrt();
        assert_relative_eq!(tr / 2.0 - disc, 0.5, max_relative = 1e-12);
        assert_relative_eq!(tr / 2.0 + disc, PI / 4.0, max_relative = 1e-12);
        assert_relative_eq!(lambda_min(&at, &[0.6, 0.8]), 0.5, max_relative = 1e-15);
        assert_eq!(d2psi(&at, &[2.0]).unwrap(), vec![at.psi_prime(2.0)]);
        assert!(d2psi(&at, &[0.0, 0.0]).is_err());
        assert!(lambda_min(&NonlinearitySpec::p_laplace(1.5).unwrap(), &[0.0, 0.0]).is_infinite());
    }

    #[test]
    fn monotone_and_elliptic_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for s in all_specs() {
            let mut worst_mono = f64::INFINITY;
            let mut worst_ell = f64::INFINITY;
            for _ in 0..10_000 {
                let scale = 10f64.powf(rng.random::<f64>() * 6.0 - 3.0);
                let x: Vec<f64> = (0..2).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
                let y: Vec<f64> = (0..2).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
                let (fx, fy) = (phi_vec(&s, &x), phi_vec(&s, &y));
                let m: f64 = (0..2).map(|i| (fx[i] - fy[i]) * (x[i] - y[i])).sum();
                worst_mono = worst_mono.min(m);
                let h: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let d = d2psi(&s, &x).unwrap();
                let q = h[0] * (d[0] * h[0] + d[1] * h[1]) + h[1] * (d[2] * h[0] + d[3] * h[1]);
                worst_ell = worst_ell.min(q - lambda_min(&s, &x) * (h[0] * h[0] + h[1] * h[1]));
                // sublinear growth
                let r = x[0].hypot(x[1]);
                assert!(fx[0].hypot(fx[1]) <= s.constants.growth * (1.0 + r) * (1.0 + 1e-12));
            }
            assert!(worst_mono >= -1e-12, "{} {worst_mono}", s.id);
            assert!(worst_ell >= -1e-12, "{} {worst_ell}", s.id);
        }
    }

    #[test]
    fn linear_entry_is_the_laplacian() {
        let lin = NonlinearitySpec::linear();
        for g in [Grid::line(40, 1.3).unwrap(), Grid::new(&[9, 11], &[1.0, 2.0]).unwrap()] {
            let b = SpectralBasis::new(&g);
            let e = b.mode(0);
            let a = apply_a(&lin, &e);
            assert!(a.sub(&e.scaled(b.eigenvalue(0))).unwrap().h_norm() < 1e-10 * b.eigenvalue(0));
            assert_eq!(apply_a(&lin, &g.zeros()), g.zeros());
        }
    }

    #[test]
    fn weak_form_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for g in [Grid::line(30, 1.0).unwrap(), Grid::square(8, 1.0).unwrap()] {
            for s in all_specs() {
                for _ in 0..20 {
                    let u = g.from_fn(|_| rng.random::<f64>() - 0.5);
                    let v = g.from_fn(|_| rng.random::<f64>() - 0.5);
                    let lhs = apply_a(&s, &u).dot(&v).unwrap();
                    let f = crate::grid::VectorField::new(g, flux(&s, &u)).unwrap();
                    let rhs = f.dot(&g.gradient(&v).unwrap()).unwrap();
                    assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
                }
            }
        }
    }

    #[test]
    fn arctan_on_parabola_matches_calculus() {
        let at = NonlinearitySpec::arctan();
        let mut errs = Vec::new();
        for n in [63, 127, 255] {
            let l = 1.0;
            let g = Grid::line(n, l).unwrap();
            let u = g.from_fn(|x| x[0] * (l - x[0]));
            let a = apply_a(&at, &u);
            let exact = g.from_fn(|x| 2.0 / (1.0 + (l - 2.0 * x[0]).powi(2)));
            errs.push(a.sub(&exact).unwrap().sup_norm());
        }
        assert!(errs[2] < 0.6 * errs[0] && errs[2] < 0.02, "{errs:?}");
    }

    #[test]
    fn energy_is_convex_with_gradient_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for g in [Grid::line(24, 1.0).unwrap(), Grid::square(6, 1.0).unwrap()] {
            for s in all_specs() {
                assert_eq!(energy(&s, &g.zeros()), 0.0);
                for _ in 0..5 {
                    let u = smooth(&g, &mut rng, 8, 1.0);
                    let h = smooth(&g, &mut rng, 8, 1.0);
                    let eps = 1e-5;
                    let fd = (energy(&s, &u.axpy(eps, &h).unwrap()) - energy(&s, &u.axpy(-eps, &h).unwrap())) / (2.0 * eps);
                    let an = apply_a(&s, &u).dot(&h).unwrap();
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{} {fd} {an}", s.id);
                    let mid = energy(&s, &u.add(&h).unwrap().scaled(0.5));
                    assert!(mid <= 0.5 * (energy(&s, &u) + energy(&s, &h)) + 1e-14);
                }
            }
        }
    }

    #[test]
    fn p_laplace_energy_is_homogeneous() {
        let p = 1.5;
        let s = NonlinearitySpec::p_laplace(p).unwrap();
        let g = Grid::line(30, 1.0).unwrap();
        let u = g.from_fn(|x| (3.0 * x[0]).sin() * x[0] * (1.0 - x[0]));
        for c in [0.1, 2.0, 7.5] {
            assert_relative_eq!(energy(&s, &u.scaled(c)), c.powf(p) * energy(&s, &u), max_relative = 1e-12);
        }
    }

    #[test]
    fn resolvent_of_linear_entry_is_spectral() {
        let lin = NonlinearitySpec::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for g in [Grid::line(50, 1.0).unwrap(), Grid::square(10, 1.0).unwrap()] {
            let b = SpectralBasis::new(&g);
            let u = g.from_fn(|_| rng.random::<f64>() - 0.5);
            for alpha in [1e-3, 0.1, 5.0] {
                let j = resolvent_j(&lin, &u, alpha, &ProxSolveSettings::default()).unwrap();
                let exact = b.apply_multiplier(&u, |l| 1.0 / (1.0 + alpha * l)).unwrap();
                assert!(j.sub(&exact).unwrap().h_norm() <= 1e-8 * exact.h_norm());
            }
        }
    }

    #[test]
    fn resolvent_small_alpha_limit() {
        let at = NonlinearitySpec::arctan();
        let g = Grid::line(40, 1.0).unwrap();
        let u = g.from_fn(|x| (PI * x[0]).sin());
        let mut prev = f64::INFINITY;
        for alpha in [1e-1, 1e-2, 1e-3, 1e-4] {
            let d = resolvent_j(&at, &u, alpha, &ProxSolveSettings::default()).unwrap().sub(&u).unwrap().h_norm();
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn resolvent_nonexpansive_and_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let settings = ProxSolveSettings::default();
        for g in [Grid::line(32, 1.0).unwrap(), Grid::square(8, 1.0).unwrap()] {
            for s in all_specs() {
                for _ in 0..10 {
                    let u = g.from_fn(|_| rng.random::<f64>() - 0.5);
                    let v = g.from_fn(|_| rng.random::<f64>() - 0.5);
                    let alpha = 10f64.powf(rng.random::<f64>() * 3.0 - 3.0);
                    let ju = resolvent_j(&s, &u, alpha, &settings).unwrap();
                    let jv = resolvent_j(&s, &v, alpha, &settings).unwrap();
                    assert!(ju.sub(&jv).unwrap().h_norm() <= u.sub(&v).unwrap().h_norm() * (1.0 + 1e-8), "{}", s.id);
                    let obj = |w: &Field| 0.5 * w.sub(&u).unwrap().h_norm().powi(2) + alpha * energy(&s, w);
                    let best = obj(&ju);
                    for _ in 0..5 {
                        let w = ju.axpy(1e-3, &g.from_fn(|_| rng.random::<f64>() - 0.5)).unwrap();
                        assert!(best <= obj(&w) + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn resolvent_stationarity_and_errors() {
        let pl = NonlinearitySpec::p_laplace(1.5).unwrap();
        let g = Grid::line(64, 1.0).unwrap();
        let u = g.from_fn(|x| (PI * x[0]).sin() + 0.3 * (5.0 * PI * x[0]).sin());
        let settings = ProxSolveSettings::default();
        let mut solver = ProxSolver::new(&pl, &g, settings).unwrap();
        let (j, stats) = solver.solve(&u, 0.01).unwrap();
        let resid = j.sub(&u).unwrap().axpy(0.01, &apply_a(&pl, &j)).unwrap().h_norm();
        assert!(resid <= stats.target.max(if stats.floor_limited { 1e-6 * (1.0 + u.h_norm()) } else { 0.0 }));
        assert!(resolvent_j(&pl, &u, 0.0, &settings).is_err());
        let bad = ProxSolveSettings { grad_tol: 1e-2, ..settings };
        assert!(resolvent_j(&pl, &u, 0.1, &bad).is_err());
        let bad = ProxSolveSettings { max_iters: 3, ..settings };
        assert!(ProxSolver::new(&pl, &g, bad).is_err());
    }

    #[test]
    fn yosida_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let at = NonlinearitySpec::arctan();
        let g = Grid::line(48, 1.0).unwrap();
        let settings = ProxSolveSettings::default();
        assert_eq!(yosida_a(&at, &g.zeros(), 0.1, &settings).unwrap().h_norm(), 0.0);
        for _ in 0..20 {
            let u = smooth(&g, &mut rng, 6, 1.0);
            let v = smooth(&g, &mut rng, 6, 1.0);
            let au = yosida_a(&at, &u, 0.05, &settings).unwrap();
            let av = yosida_a(&at, &v, 0.05, &settings).unwrap();
            assert!(au.h_norm() <= apply_a(&at, &u).h_norm() + 1e-6);
            assert!(au.sub(&av).unwrap().dot(&u.sub(&v).unwrap()).unwrap() >= -1e-9);
        }
        let u = g.from_fn(|x| (PI * x[0]).sin());
        let a = apply_a(&at, &u);
        let errs: Vec<f64> = [1e-3, 1e-4, 1e-6]
            .iter()
            .map(|&al| yosida_a(&at, &u, al, &settings).unwrap().sub(&a).unwrap().h_norm())
            .collect();
        assert!(errs[2] < errs[1] && errs[1] < errs[0] && errs[2] < 1e-2 * a.h_norm(), "{errs:?}");
    }

    #[test]
    fn a3_positivity_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = Grid::line(40, 1.0).unwrap();
        let b = SpectralBasis::new(&g);
        for s in all_specs() {
            for _ in 0..20 {
                let u = g.from_fn(|_| rng.random::<f64>() - 0.5);
                let a = apply_a(&s, &u);
                for n in [4.0, 16.0, 64.0] {
                    let t = b.yosida_t(&u, n).unwrap();
                    let q = a.dot(&t).unwrap();
                    assert!(q >= -1e-8 * a.h_norm() * t.h_norm().max(1.0), "{} {q}", s.id);
                }
            }
        }
    }

    #[test]
    fn dissipation_nonnegative_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let g = Grid::line(40, 1.0).unwrap();
        for s in all_specs() {
            for _ in 0..20 {
                let u = g.from_fn(|_| rng.random::<f64>() - 0.5);
                assert!(dissipation(&s, &u) >= 0.0);
            }
        }
        for s in all_specs() {
            let u = g.from_fn(|_| rng.random::<f64>() - 0.5);
            let lap = g.neg_laplacian(&u).unwrap();
            let pairing = apply_a(&s, &u).dot(&lap).unwrap();
            assert_relative_eq!(dissipation(&s, &u), pairing, max_relative = 1e-10);
        }
        let g2 = Grid::square(7, 1.0).unwrap();
        for s in all_specs() {
            let u = g2.from_fn(|_| rng.random::<f64>() - 0.5);
            assert!(dissipation(&s, &u) >= 0.0);
        }
        let lin = NonlinearitySpec::linear();
        let u = g2.from_fn(|x| x[0] * (1.0 - x[0]) * x[1]);
        let lap = g2.neg_laplacian(&u).unwrap();
        assert!(dissipation(&lin, &u) > 0.0 && lap.h_norm() > 0.0);
    }

    #[test]
    fn linearized_step_for_linear_entry_is_exact() {
        let lin = NonlinearitySpec::linear();
        let g = Grid::line(30, 1.0).unwrap();
        let b = SpectralBasis::new(&g);
        let u = g.from_fn(|x| x[0] * (1.0 - x[0]));
        let mut solver = ProxSolver::new(&lin, &g, ProxSolveSettings::default()).unwrap();
        let mut v = vec![0.0; g.len()];
        solver.linearized_in_place(u.values(), 0.1, &mut v).unwrap();
        let exact = b.apply_multiplier(&u, |l| 1.0 / (1.0 + 0.1 * l)).unwrap();
        assert!(Field::new(g, v).unwrap().sub(&exact).unwrap().h_norm() < 1e-10);
    }
}
