//! Ensemble experiments: coupled decay-rate fits, Hölder gaps of test
//! functions, invariant sampling with moment bounds, Kolmogorov-operator
//! identities and the weak law of large numbers.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, SpectralBasis};
use crate::nonlinearity::{exponents, w2_alpha_range, AlphaRange, ExponentSet, NonlinearitySpec};
use crate::potential::apply_a;
use crate::sampling::seed_lane;
use crate::sde::{simulate_coupled_with, NoiseOperator, Observable, SdeConfig, Stepper, Trajectory};
use crate::stats::{batch_means, effective_sample_size, fit_line, mean, Estimate, DEFAULT_BATCHES};

/// Differences below `CENSOR_FACTOR * eps * ‖u0 - v0‖` are rounding noise.
pub const CENSOR_FACTOR: f64 = 10.0;
pub const SENSITIVITY_T_MIN: [f64; 3] = [1.0, 2.0, 4.0];

/// Rejects `beta` outside `(0, beta*]`.
pub fn beta_gate(beta: f64, exps: &ExponentSet) -> Result<()> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta={beta} must be positive")));
    }
    if beta > exps.beta_star * (1.0 + 1e-12) {
        return Err(Error::BetaAboveThreshold { beta, beta_star: exps.beta_star });
    }
    Ok(())
}

/// One coupled pair of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub lane: u64,
    pub seed: u64,
    /// `‖u_t - v_t‖_H` at the ensemble's recorded times.
    pub distance: Vec<f64>,
    /// `f(u_t)` and `f(v_t)` when a test function was attached.
    pub f_first: Vec<f64>,
    pub f_second: Vec<f64>,
    /// Largest one-step increase of the distance.
    pub max_step_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledEnsemble {
    pub times: Vec<f64>,
    pub initial_distance: f64,
    pub members: Vec<MemberRecord>,
}

impl CoupledEnsemble {
    /// Floor below which differences are censored.
    pub fn censor_floor(&self) -> f64 {
        CENSOR_FACTOR * f64::EPSILON * self.initial_distance
    }

    /// Ensemble mean of `‖u_t - v_t‖^β` at every recorded time, with
    /// one-sigma errors across members.
    pub fn mean_power(&self, beta: f64) -> (Vec<f64>, Vec<f64>) {
        let m = self.members.len() as f64;
        (0..self.times.len())
            .map(|i| {
                let xs: Vec<f64> = self.members.iter().map(|r| r.distance[i].powf(beta)).collect();
                let mu = mean(&xs);
                let var = if xs.len() > 1 { xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (m - 1.0) } else { 0.0 };
                (mu, (var / m).sqrt())
            })
            .unzip()
    }

    /// Whether the mean curve never rises by more than `rel_tol` of itself.
    pub fn mean_is_nonincreasing(&self, beta: f64, rel_tol: f64) -> bool {
        let (m, _) = self.mean_power(beta);
        m.windows(2).all(|w| w[1] <= w[0] * (1.0 + rel_tol) + 1e-300)
    }
}

/// Runs `members` coupled pairs from fixed `(u0, v0)` on disjoint seed lanes.
pub fn coupled_ensemble(
    spec: &NonlinearitySpec,
    u0: &Field,
    v0: &Field,
    noise: &NoiseOperator,
    config: &SdeConfig,
    members: usize,
    f: Option<&CylinderFunction>,
) -> Result<CoupledEnsemble> {
    if members == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    let base = SdeConfig { observables: Vec::new(), snapshots: false, ..config.clone() };
    let runs: Vec<Result<(Vec<f64>, MemberRecord)>> = (0..members as u64)
        .into_par_iter()
        .map(|lane| {
            let seed = seed_lane(config.seed, lane);
            let cfg = SdeConfig { seed, ..base.clone() };
            let mut fa = Vec::new();
            let mut fb = Vec::new();
            let c = simulate_coupled_with(spec, u0, v0, noise, &cfg, |_, u, v| {
                if let Some(f) = f {
                    fa.push(f.value(u));
                    fb.push(f.value(v));
                }
            })?;
            let rec = MemberRecord {
                lane,
                seed,
                distance: c.distance,
                f_first: fa,
                f_second: fb,
                max_step_increase: c.max_step_increase,
            };
            Ok((c.times, rec))
        })
        .collect();
    let mut times = Vec::new();
    let mut recs = Vec::with_capacity(members);
    for r in runs {
        let (t, rec) = r?;
        times = t;
        recs.push(rec);
    }
    Ok(CoupledEnsemble { times, initial_distance: u0.sub(v0)?.h_norm(), members: recs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
    /// Points dropped below the censoring floor.
    pub censored: usize,
    /// `(t_min, exponent)` for every sensitivity start with enough points.
    pub sensitivity: Vec<(f64, f64)>,
}

/// Log-log slope of `values` on `times` inside `[t_min, t_max]`, skipping
/// values at or below `floor`.
pub fn fit_curve(times: &[f64], values: &[f64], window: (f64, f64), floor: f64) -> Result<RateFit> {
    let (t_min, t_max) = window;
    if !(t_min >= 1.0) || !(t_max > t_min) {
        return Err(Error::InvalidArgument(format!("fit window [{t_min}, {t_max}] must satisfy 1 <= t_min < t_max")));
    }
    let last = times.last().copied().unwrap_or(0.0);
    if t_max > last * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!("fit window ends at {t_max} beyond recorded time {last}")));
    }
    let core = |lo: f64| -> Result<(crate::stats::LineFit, usize)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut censored = 0;
        for (&t, &v) in times.iter().zip(values) {
            if t < lo * (1.0 - 1e-12) || t > t_max * (1.0 + 1e-12) {
                continue;
            }
            if !(v > floor) {
                censored += 1;
                continue;
            }
            xs.push(t.ln());
            ys.push(v.ln());
        }
        if xs.len() < 3 {
            return Err(Error::DegenerateData(format!(
                "{} usable points in [{lo}, {t_max}] ({censored} censored at floor {floor:.3e})",
                xs.len()
            )));
        }
        Ok((fit_line(&xs, &ys)?, censored))
    };
    let (line, censored) = core(t_min)?;
    let sensitivity = SENSITIVITY_T_MIN
        .iter()
        .filter(|&&lo| lo >= t_min && lo < t_max)
        .filter_map(|&lo| core(lo).ok().map(|(l, _)| (lo, l.slope)))
        .collect();
    Ok(RateFit {
        exponent: line.slope,
        intercept: line.intercept,
        r_squared: line.r_squared,
        t_min,
        t_max,
        points: line.points,
        censored,
        sensitivity,
    })
}

/// Fits `E‖u_t - v_t‖^β ~ t^{exponent}` on the window.
pub fn fit_decay(ensemble: &CoupledEnsemble, beta: f64, exps: &ExponentSet, window: (f64, f64)) -> Result<RateFit> {
    beta_gate(beta, exps)?;
    if ensemble.initial_distance == 0.0 || ensemble.members.iter().all(|m| m.distance.iter().all(|&d| d == 0.0)) {
        return Err(Error::DegenerateData("coupled differences vanish identically".into()));
    }
    let (m, _) = ensemble.mean_power(beta);
    fit_curve(&ensemble.times, &m, window, ensemble.censor_floor().powf(beta))
}

/// Smooth base functions `g` of the projected coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "base", rename_all = "kebab-case")]
pub enum SmoothBase {
    Constant { value: f64 },
    /// `w · c`.
    Linear { weights: Vec<f64> },
    /// `(w · c)²`.
    Quadratic { weights: Vec<f64> },
    /// `min(1, |c|^β)`, β-Hölder with seminorm 1.
    ClippedNorm { beta: f64 },
    /// `min(1, |c|²)`, Lipschitz with constant 2.
    ClippedSquare,
}

/// Which coefficients a test function reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSet {
    /// Zero-based ranks.
    Ranks(Vec<usize>),
    /// Every discrete mode, so `|c| = ‖u‖_H`.
    All,
}

/// `F(u) = g(<u, e_k>_{k in modes})`.
#[derive(Debug, Clone)]
pub struct CylinderFunction {
    basis: Arc<SpectralBasis>,
    ranks: Vec<usize>,
    base: SmoothBase,
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

impl CylinderFunction {
    pub fn new(basis: Arc<SpectralBasis>, modes: ModeSet, base: SmoothBase) -> Result<Self> {
        let ranks = match modes {
            ModeSet::Ranks(r) => r,
            ModeSet::All => (0..basis.len()).collect(),
        };
        if let Some(&bad) = ranks.iter().find(|&&k| k >= basis.len()) {
            return Err(Error::InvalidArgument(format!("mode rank {bad} beyond basis size {}", basis.len())));
        }
        match &base {
            SmoothBase::Linear { weights } | SmoothBase::Quadratic { weights } if weights.len() != ranks.len() => {
                return Err(Error::ShapeMismatch { expected: ranks.len(), got: weights.len() });
            }
            SmoothBase::ClippedNorm { beta } if !(*beta > 0.0 && *beta <= 1.0) => {
                return Err(Error::InvalidArgument(format!("clipped-norm index {beta} must lie in (0, 1]")));
            }
            _ => {}
        }
        let f = Self { basis, ranks, base };
        f.check_derivatives()?;
        Ok(f)
    }

    /// `<u, e_k>` for a single rank.
    pub fn mode_coordinate(basis: Arc<SpectralBasis>, rank: usize) -> Result<Self> {
        Self::new(basis, ModeSet::Ranks(vec![rank]), SmoothBase::Linear { weights: vec![1.0] })
    }

    /// `<u, e_k>²`.
    pub fn mode_square(basis: Arc<SpectralBasis>, rank: usize) -> Result<Self> {
        Self::new(basis, ModeSet::Ranks(vec![rank]), SmoothBase::Quadratic { weights: vec![1.0] })
    }

    pub fn constant(basis: Arc<SpectralBasis>, value: f64) -> Self {
        Self { basis, ranks: Vec::new(), base: SmoothBase::Constant { value } }
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn base(&self) -> &SmoothBase {
        &self.base
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self.base, SmoothBase::Constant { .. } | SmoothBase::ClippedNorm { .. } | SmoothBase::ClippedSquare)
    }

    /// `|f|_β` where it is known in closed form.
    pub fn holder_seminorm(&self, beta: f64) -> Option<f64> {
        match &self.base {
            SmoothBase::Constant { .. } => Some(0.0),
            SmoothBase::Linear { weights } if beta == 1.0 => Some(weights.iter().map(|w| w * w).sum::<f64>().sqrt()),
            SmoothBase::ClippedNorm { beta: b } if (beta - b).abs() < 1e-15 => Some(1.0),
            SmoothBase::ClippedSquare if beta == 1.0 => Some(2.0),
            // bounded by 1 and 2-Lipschitz, so β-Hölder with 2^β
            SmoothBase::ClippedSquare if beta > 0.0 && beta < 1.0 => Some(2f64.powf(beta)),
            _ => None,
        }
    }

    pub fn coordinates(&self, u: &Field) -> Vec<f64> {
        if self.ranks.is_empty() {
            return Vec::new();
        }
        let c = self.basis.forward(u).expect("field on the basis grid");
        self.ranks.iter().map(|&k| c[k]).collect()
    }

    pub fn value(&self, u: &Field) -> f64 {
        self.g(&self.coordinates(u))
    }

    fn g(&self, c: &[f64]) -> f64 {
        match &self.base {
            SmoothBase::Constant { value } => *value,
            SmoothBase::Linear { weights } => dot(weights, c),
            SmoothBase::Quadratic { weights } => dot(weights, c).powi(2),
            SmoothBase::ClippedNorm { beta } => dot(c, c).sqrt().powf(*beta).min(1.0),
            SmoothBase::ClippedSquare => dot(c, c).min(1.0),
        }
    }

    /// `∂g/∂c_k` in the order of `ranks`.
    pub fn gradient(&self, c: &[f64]) -> Vec<f64> {
        match &self.base {
            SmoothBase::Constant { .. } => vec![0.0; c.len()],
            SmoothBase::Linear { weights } => weights.clone(),
            SmoothBase::Quadratic { weights } => {
                let l = dot(weights, c);
                weights.iter().map(|w| 2.0 * l * w).collect()
            }
            SmoothBase::ClippedNorm { beta } => {
                let r = dot(c, c).sqrt();
                if r == 0.0 || r.powf(*beta) >= 1.0 {
                    return vec![0.0; c.len()];
                }
                c.iter().map(|x| beta * r.powf(beta - 2.0) * x).collect()
            }
            SmoothBase::ClippedSquare => {
                if dot(c, c) >= 1.0 {
                    vec![0.0; c.len()]
                } else {
                    c.iter().map(|x| 2.0 * x).collect()
                }
            }
        }
    }

    /// `∂²g/∂c_j∂c_k`, row-major.
    pub fn hessian(&self, c: &[f64]) -> Vec<f64> {
        let n = c.len();
        let mut h = vec![0.0; n * n];
        match &self.base {
            SmoothBase::Constant { .. } | SmoothBase::Linear { .. } => {}
            SmoothBase::Quadratic { weights } => {
                for j in 0..n {
                    for k in 0..n {
                        h[j * n + k] = 2.0 * weights[j] * weights[k];
                    }
                }
            }
            SmoothBase::ClippedNorm { beta } => {
                let r = dot(c, c).sqrt();
                if r > 0.0 && r.powf(*beta) < 1.0 {
                    for j in 0..n {
                        for k in 0..n {
                            let diag = if j == k { r.powf(beta - 2.0) } else { 0.0 };
                            h[j * n + k] = beta * (diag + (beta - 2.0) * r.powf(beta - 4.0) * c[j] * c[k]);
                        }
                    }
                }
            }
            SmoothBase::ClippedSquare => {
                if dot(c, c) < 1.0 {
                    for j in 0..n {
                        h[j * n + j] = 2.0;
                    }
                }
            }
        }
        h
    }

    /// `DF(u) = Σ_k ∂g/∂c_k e_k`.
    pub fn gradient_field(&self, u: &Field) -> Field {
        let c = self.coordinates(u);
        let g = self.gradient(&c);
        let mut coeffs = vec![0.0; self.ranks.iter().max().map_or(0, |m| m + 1)];
        for (&k, gk) in self.ranks.iter().zip(g) {
            coeffs[k] += gk;
        }
        self.basis.inverse(&coeffs).expect("ranks checked at construction")
    }

    /// Compares the closed-form derivatives with central differences at a
    /// point away from the kinks of the clipped bases.
    fn check_derivatives(&self) -> Result<()> {
        let n = self.ranks.len();
        if n == 0 {
            return Ok(());
        }
        let norm: f64 = (0..n).map(|k| (1.0 / (k + 2) as f64).powi(2)).sum::<f64>().sqrt();
        let c: Vec<f64> = (0..n).map(|k| 0.5 / (k + 2) as f64 / norm).collect();
        let g = self.gradient(&c);
        let h = self.hessian(&c);
        // the full-basis clipped functions are checked only on a few coordinates
        for j in 0..n.min(8) {
            let mut p = c.clone();
            let mut m = c.clone();
            p[j] += FD_STEP;
            m[j] -= FD_STEP;
            let fd = (self.g(&p) - self.g(&m)) / (2.0 * FD_STEP);
            let (gp, gm) = (self.gradient(&p), self.gradient(&m));
            if (fd - g[j]).abs() > FD_TOL * (1.0 + g[j].abs()) {
                return Err(Error::InvalidArgument(format!("gradient of {:?} fails the difference check at {j}", self.base)));
            }
            for k in 0..n.min(8) {
                let fdh = (gp[k] - gm[k]) / (2.0 * FD_STEP);
                if (fdh - h[j * n + k]).abs() > FD_TOL * (1.0 + h[j * n + k].abs()) {
                    return Err(Error::InvalidArgument(format!("hessian of {:?} fails the difference check at {j},{k}", self.base)));
                }
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|P_t f(u0) - P_t f(v0)|` estimated with shared noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderGap {
    pub times: Vec<f64>,
    pub gap: Vec<f64>,
    /// One-sigma error of the mean of `f(u_t) - f(v_t)`.
    pub std_error: Vec<f64>,
    pub seminorm: f64,
    /// Recorded (member, time) samples breaking the pathwise Hölder bound.
    pub bound_violations: usize,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
}

pub const HOLDER_SLACK: f64 = 1e-12;

#[allow(clippy::too_many_arguments)]
pub fn holder_gap(
    spec: &NonlinearitySpec,
    f: &CylinderFunction,
    beta: f64,
    u0: &Field,
    v0: &Field,
    noise: &NoiseOperator,
    config: &SdeConfig,
    members: usize,
    window: (f64, f64),
) -> Result<HolderGap> {
    let exps = exponents(spec.s(), u0.grid().dim())?;
    beta_gate(beta, &exps)?;
    let seminorm = f
        .holder_seminorm(beta)
        .ok_or_else(|| Error::InvalidArgument(format!("no closed-form {beta}-Hölder seminorm for {:?}", f.base())))?;
    let ens = coupled_ensemble(spec, u0, v0, noise, config, members, Some(f))?;
    holder_gap_curve(&ens, seminorm, beta, window)
}

/// The gap curve of an ensemble that recorded `f` values.
pub fn holder_gap_curve(ens: &CoupledEnsemble, seminorm: f64, beta: f64, window: (f64, f64)) -> Result<HolderGap> {
    let members = ens.members.len();
    if members == 0 || ens.members.iter().any(|r| r.f_first.len() != ens.times.len()) {
        return Err(Error::MissingObservable("test-function values".into()));
    }
    let m = members as f64;
    let mut gap = Vec::with_capacity(ens.times.len());
    let mut se = Vec::with_capacity(ens.times.len());
    let mut violations = 0;
    for i in 0..ens.times.len() {
        let diffs: Vec<f64> = ens.members.iter().map(|r| r.f_first[i] - r.f_second[i]).collect();
        for (r, d) in ens.members.iter().zip(&diffs) {
            if d.abs() > seminorm * r.distance[i].powf(beta) + HOLDER_SLACK {
                violations += 1;
            }
        }
        let mu = mean(&diffs);
        let var = if members > 1 { diffs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (m - 1.0) } else { 0.0 };
        gap.push(mu.abs());
        se.push((var / m).sqrt());
    }
    let floor = seminorm * ens.censor_floor().powf(beta);
    let (fit, fit_error) = if gap.iter().all(|&g| g == 0.0) {
        (None, Some("gap vanishes identically".to_string()))
    } else {
        match fit_curve(&ens.times, &gap, window, floor) {
            Ok(fit) => (Some(fit), None),
            Err(Error::DegenerateData(msg)) => (None, Some(msg)),
            Err(e) => return Err(e),
        }
    };
    Ok(HolderGap { times: ens.times.clone(), gap, std_error: se, seminorm, bound_violations: violations, fit, fit_error })
}

/// Burn-in after which the pathwise contraction factor
/// `‖u_t - v_t‖²/‖u0 - v0‖²` is bounded by `1e-2`, taking `α = 1`,
/// `l = d0`, `C = 1/max(L)` and V norms of size `v_scale`.
pub fn mixing_hint(spec: &NonlinearitySpec, grid: &crate::grid::Grid, v_scale: f64) -> f64 {
    let d0 = (grid.dim() as f64 / 2.0).max(1.0);
    let s = spec.s();
    let (a, b) = (spec.constants.a, spec.constants.b);
    let c = 1.0 / grid.lengths().iter().cloned().fold(0.0, f64::max);
    let cl = (std::f64::consts::E / d0).powf(d0);
    let average = (a * grid.volume()).powf(d0) + 2.0 * b.powf(d0) * v_scale.powf(d0 * s);
    let constant = 1.0 / (cl * (2.0 * c).powf(d0));
    (100.0 * constant * average).powf(1.0 / d0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerMeta {
    pub burn_in: f64,
    pub mixing_hint: f64,
    pub thinning: u64,
    pub dt: f64,
    pub samples: usize,
    /// Effective sample size of `‖u‖_H` over the stream.
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct InvariantSamples {
    pub samples: Vec<Field>,
    pub meta: SamplerMeta,
}

/// Thinned states of one long trajectory after burn-in. The burn-in is
/// raised to the mixing hint when shorter, with V norms scaled by
/// `sqrt(‖u0‖²_V + ‖B‖²_V)`.
pub fn invariant_sampler(
    spec: &NonlinearitySpec,
    u0: &Field,
    noise: &NoiseOperator,
    config: &SdeConfig,
    burn_in: f64,
    thinning: u64,
    samples: usize,
) -> Result<InvariantSamples> {
    let thinning = thinning.max(1);
    let (_, bv) = noise.hs_norms();
    let hint = mixing_hint(spec, u0.grid(), (u0.v_norm().powi(2) + bv).sqrt());
    let burn = burn_in.max(hint);
    let burn_steps = (burn / config.dt).ceil() as u64;
    let mut st = Stepper::new(spec, noise, config)?;
    let mut u = u0.clone();
    for k in 0..burn_steps {
        st.step(u.values_mut(), k)?;
    }
    let mut out = Vec::with_capacity(samples);
    let mut k = burn_steps;
    for _ in 0..samples {
        for _ in 0..thinning {
            st.step(u.values_mut(), k)?;
            k += 1;
        }
        out.push(u.clone());
    }
    let norms: Vec<f64> = out.iter().map(|f| f.h_norm()).collect();
    let meta = SamplerMeta {
        burn_in: burn_steps as f64 * config.dt,
        mixing_hint: hint,
        thinning,
        dt: config.dt,
        samples,
        ess: effective_sample_size(&norms),
    };
    Ok(InvariantSamples { samples: out, meta })
}

/// Batch-means estimate of a functional over a sample stream.
pub fn stream_estimate(samples: &[Field], f: impl Fn(&Field) -> f64) -> Result<Estimate> {
    if samples.is_empty() {
        return Err(Error::EmptyStream);
    }
    let xs: Vec<f64> = samples.iter().map(f).collect();
    if xs.len() < DEFAULT_BATCHES {
        return Ok(Estimate { mean: mean(&xs), std_error: f64::INFINITY, samples: xs.len(), batches: 0 });
    }
    batch_means(&xs, DEFAULT_BATCHES)
}

/// A bound check `estimate <= factor * bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub estimate: Estimate,
    pub bound: f64,
    pub factor: f64,
    pub pass: bool,
}

impl BoundCheck {
    fn new(estimate: Estimate, bound: f64, factor: f64) -> Self {
        Self { estimate, bound, factor, pass: estimate.mean <= factor * bound }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    /// Time average of the dissipation against `K1`.
    pub dissipation: BoundCheck,
    /// Time average of `∫|∇u|^{max(1,2-s)}` against `K2`.
    pub grad_power: BoundCheck,
    pub k1: f64,
    pub k2: f64,
    pub s_star: f64,
    /// Stationary moments after burn-in.
    pub v_moment: Estimate,
    pub w2_moment: Option<Estimate>,
    pub w2_alpha: Option<f64>,
    pub stationary_dissipation: Estimate,
}

pub const BOUND_FACTOR: f64 = 1.1;

/// `K1 = ½(‖u0‖²_V + ‖B‖²_V)`.
pub fn k1_bound(u0: &Field, noise: &NoiseOperator) -> f64 {
    0.5 * (u0.v_norm().powi(2) + noise.hs_norms().1)
}

/// `K2 = (‖u0‖²_H + ‖B‖²_H + K)/(2c)` with the catalog constants.
pub fn k2_bound(spec: &NonlinearitySpec, u0: &Field, noise: &NoiseOperator) -> f64 {
    (u0.h_norm().powi(2) + noise.hs_norms().0 + spec.constants.k) / (2.0 * spec.constants.c)
}

/// The second-order exponent used for stationary moments, when one exists.
pub fn moment_alpha(s: f64, d: usize) -> Option<f64> {
    match w2_alpha_range(s, d) {
        AlphaRange::One => Some(1.0),
        AlphaRange::Interval { upper } => Some(upper),
        AlphaRange::Empty { .. } | AlphaRange::Undefined => None,
    }
}

/// Observables `moment_bounds` needs.
pub fn moment_observables(spec: &NonlinearitySpec, d: usize) -> Vec<Observable> {
    let mut v = vec![
        Observable::Dissipation,
        Observable::GradPower { q: (2.0 - spec.s()).max(1.0) },
        Observable::VNorm,
    ];
    if let Some(alpha) = moment_alpha(spec.s(), d) {
        v.push(Observable::W2Alpha { alpha });
    }
    v
}

/// Time averages over the whole run against `K1`, `K2`, and stationary
/// moments over the part after `burn_in`.
pub fn moment_bounds(
    spec: &NonlinearitySpec,
    u0: &Field,
    noise: &NoiseOperator,
    trajectory: &Trajectory,
    burn_in: f64,
) -> Result<MomentReport> {
    let d = u0.grid().dim();
    let exps = exponents(spec.s(), d)?;
    let q = (2.0 - spec.s()).max(1.0);
    let diss = trajectory.observable(&Observable::Dissipation)?;
    let grad = trajectory.observable(&Observable::GradPower { q })?;
    let vn = trajectory.observable(&Observable::VNorm)?;
    let alpha = moment_alpha(spec.s(), d);
    let w2 = match alpha {
        Some(alpha) => Some(trajectory.observable(&Observable::W2Alpha { alpha })?),
        None => None,
    };
    // states after the initial one, so the average is the step-weighted
    // sum of the implicit scheme
    let whole = |xs: &[f64]| -> Result<Estimate> { estimate(&xs[1.min(xs.len())..]) };
    let start = trajectory.times.iter().position(|&t| t >= burn_in).unwrap_or(trajectory.times.len());
    let tail = |xs: &[f64], pow: f64| -> Result<Estimate> {
        let v: Vec<f64> = xs[start..].iter().map(|x| x.powf(pow)).collect();
        estimate(&v)
    };
    let k1 = k1_bound(u0, noise);
    let k2 = k2_bound(spec, u0, noise);
    Ok(MomentReport {
        dissipation: BoundCheck::new(whole(diss)?, k1, BOUND_FACTOR),
        grad_power: BoundCheck::new(whole(grad)?, k2, BOUND_FACTOR),
        k1,
        k2,
        s_star: exps.s_star,
        v_moment: tail(vn, exps.s_star)?,
        w2_moment: w2.map(|w| tail(w, exps.s_star)).transpose()?,
        w2_alpha: alpha,
        stationary_dissipation: tail(diss, 1.0)?,
    })
}

fn estimate(xs: &[f64]) -> Result<Estimate> {
    if xs.is_empty() {
        return Err(Error::EmptyStream);
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return Ok(Estimate::exact(xs[0], xs.len()));
    }
    if xs.len() < DEFAULT_BATCHES {
        return Ok(Estimate { mean: mean(xs), std_error: f64::INFINITY, samples: xs.len(), batches: 0 });
    }
    batch_means(xs, DEFAULT_BATCHES)
}

/// `J0 F(u) = ½ Tr(BB* D²F(u)) - <A(u), DF(u)>`.
pub fn kolmogorov_apply(spec: &NonlinearitySpec, noise: &NoiseOperator, f: &CylinderFunction, u: &Field) -> Result<f64> {
    Ok(kolmogorov_parts(spec, noise, f, u)?.0)
}

/// `(J0 F(u), ‖B* DF(u)‖²_U)`.
fn kolmogorov_parts(spec: &NonlinearitySpec, noise: &NoiseOperator, f: &CylinderFunction, u: &Field) -> Result<(f64, f64)> {
    let basis = noise.basis();
    basis.grid().check(u)?;
    if f.ranks().is_empty() {
        return Ok((0.0, 0.0));
    }
    let cu = basis.forward(u)?;
    let c: Vec<f64> = f.ranks().iter().map(|&k| cu[k]).collect();
    let g = f.gradient(&c);
    let h = f.hessian(&c);
    let b = |k: usize| noise.coefficients().get(k).copied().unwrap_or(0.0);
    let n = c.len();
    let trace: f64 = f.ranks().iter().enumerate().map(|(j, &k)| b(k).powi(2) * h[j * n + j]).sum();
    let au = basis.forward(&apply_a(spec, u))?;
    let drift: f64 = f.ranks().iter().zip(&g).map(|(&k, gk)| au[k] * gk).sum();
    let carre: f64 = f.ranks().iter().zip(&g).map(|(&k, gk)| (b(k) * gk).powi(2)).sum();
    Ok((0.5 * trace - drift, carre))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KolmogorovReport {
    /// Mean of `J0 F` (zero under invariance).
    pub mean_generator: Estimate,
    /// Mean of `F J0 F + ½‖B* DF‖²` (zero by the dissipativity identity).
    pub defect: Estimate,
}

pub fn invariance_and_dissipativity(
    spec: &NonlinearitySpec,
    noise: &NoiseOperator,
    f: &CylinderFunction,
    samples: &[Field],
) -> Result<KolmogorovReport> {
    if samples.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut gen = Vec::with_capacity(samples.len());
    let mut defect = Vec::with_capacity(samples.len());
    for u in samples {
        let (j, carre) = kolmogorov_parts(spec, noise, f, u)?;
        gen.push(j);
        defect.push(f.value(u) * j + 0.5 * carre);
    }
    Ok(KolmogorovReport { mean_generator: estimate(&gen)?, defect: estimate(&defect)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLln {
    pub first: Estimate,
    pub second: Estimate,
    pub difference: f64,
    /// `sqrt(se_a² + se_b²)`.
    pub combined_std_error: f64,
}

impl WeakLln {
    pub fn agrees(&self, z: f64) -> bool {
        self.difference.abs() <= z * self.combined_std_error
    }
}

/// Time averages of a bounded `f` from two starts with independent noise
/// (seed lanes 0 and 1).
pub fn weak_lln_check(
    spec: &NonlinearitySpec,
    f: &CylinderFunction,
    u0_a: &Field,
    u0_b: &Field,
    noise: &NoiseOperator,
    config: &SdeConfig,
) -> Result<WeakLln> {
    if !f.is_bounded() {
        return Err(Error::InvalidArgument(format!("weak LLN test function {:?} is unbounded", f.base())));
    }
    let run = |u0: &Field, lane: u64| -> Result<Estimate> {
        let cfg = SdeConfig { seed: seed_lane(config.seed, lane), observables: Vec::new(), snapshots: false, ..config.clone() };
        if let SmoothBase::Constant { value } = f.base() {
            return Ok(Estimate::exact(*value, cfg.total_steps() as usize));
        }
        let mut st = Stepper::new(spec, noise, &cfg)?;
        let every = match cfg.schedule {
            crate::sde::RecordSchedule::Every { steps } => steps.max(1),
            crate::sde::RecordSchedule::Dyadic { .. } => 1,
        };
        let mut u = u0.clone();
        let mut xs = Vec::new();
        for k in 0..cfg.total_steps() {
            st.step(u.values_mut(), k)?;
            if (k + 1) % every == 0 {
                xs.push(f.value(&u));
            }
        }
        estimate(&xs)
    };
    let (a, b) = rayon::join(|| run(u0_a, 0), || run(u0_b, 1));
    let (a, b) = (a?, b?);
    Ok(WeakLln { difference: a.mean - b.mean, combined_std_error: a.std_error.hypot(b.std_error), first: a, second: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::sampling::{random_band_limited, rng_from_seed};
    use crate::sde::{NoiseRule, RecordSchedule};
    use approx::assert_relative_eq;

    fn basis(n: usize, l: f64) -> Arc<SpectralBasis> {
        Arc::new(SpectralBasis::new(&Grid::line(n, l).unwrap()))
    }

    #[test]
    fn beta_gate_matches_exponents() {
        for (s, d) in [(2.0, 1), (0.5, 1), (1.0, 2), (0.5, 2)] {
            let e = exponents(s, d).unwrap();
            assert!(beta_gate(e.beta_star, &e).is_ok());
            match beta_gate(e.beta_star + 0.01, &e) {
                Err(Error::BetaAboveThreshold { beta_star, .. }) => assert_eq!(beta_star, e.beta_star),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn identical_starts_are_degenerate() {
        let b = basis(16, 1.0);
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 1.0, scale: 0.5 }, 8).unwrap();
        let at = NonlinearitySpec::arctan();
        let u = b.mode(0);
        let cfg = SdeConfig { schedule: RecordSchedule::Dyadic { per_octave: 2, t_start: 0.5 }, ..SdeConfig::new(0.05, 8.0, 1) };
        let ens = coupled_ensemble(&at, &u, &u, &noise, &cfg, 3, None).unwrap();
        let e = exponents(2.0, 1).unwrap();
        assert!(matches!(fit_decay(&ens, 0.5, &e, (1.0, 8.0)), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn fit_recovers_power_law() {
        let t: Vec<f64> = (0..20).map(|j| 2f64.powf(j as f64 / 4.0)).collect();
        let v: Vec<f64> = t.iter().map(|x| 3.0 * x.powf(-0.75)).collect();
        let f = fit_curve(&t, &v, (1.0, *t.last().unwrap()), 0.0).unwrap();
        assert_relative_eq!(f.exponent, -0.75, max_relative = 1e-12);
        assert_relative_eq!(f.intercept, 3f64.ln(), max_relative = 1e-12);
        assert_eq!(f.sensitivity.len(), 3);
        assert!(fit_curve(&t, &v, (0.5, 4.0), 0.0).is_err());
        // values at the floor are dropped
        let mut w = v.clone();
        w[19] = 0.0;
        let g = fit_curve(&t, &w, (1.0, *t.last().unwrap()), 1e-300).unwrap();
        assert_eq!(g.censored, 1);
    }

    #[test]
    fn ensemble_is_deterministic_and_monotone() {
        let b = basis(16, 1.0);
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 1.0, scale: 0.5 }, 8).unwrap();
        let at = NonlinearitySpec::arctan();
        let cfg = SdeConfig { schedule: RecordSchedule::Dyadic { per_octave: 2, t_start: 0.5 }, ..SdeConfig::new(0.01, 4.0, 1) };
        let u = b.mode(0).scaled(3.0);
        let v = b.mode(1).scaled(-2.0);
        let a = coupled_ensemble(&at, &u, &v, &noise, &cfg, 6, None).unwrap();
        let c = coupled_ensemble(&at, &u, &v, &noise, &cfg, 6, None).unwrap();
        assert_eq!(a, c);
        assert!(a.mean_is_nonincreasing(0.5, 1e-9));
    }

    #[test]
    fn cylinder_derivatives_and_seminorms() {
        let b = basis(16, 1.0);
        let all = |base| CylinderFunction::new(b.clone(), ModeSet::All, base).unwrap();
        for base in [
            SmoothBase::ClippedNorm { beta: 0.5 },
            SmoothBase::ClippedSquare,
            SmoothBase::Constant { value: 2.0 },
        ] {
            all(base);
        }
        let q = CylinderFunction::new(b.clone(), ModeSet::Ranks(vec![0, 2]), SmoothBase::Quadratic { weights: vec![1.0, -2.0] }).unwrap();
        let u = b.mode(0).scaled(0.3).add(&b.mode(2).scaled(0.1)).unwrap();
        assert_relative_eq!(q.value(&u), (0.3f64 - 0.2).powi(2), max_relative = 1e-10);
        assert!(CylinderFunction::new(b.clone(), ModeSet::Ranks(vec![99]), SmoothBase::ClippedSquare).is_err());
        let cn = all(SmoothBase::ClippedNorm { beta: 0.5 });
        assert_relative_eq!(cn.value(&u), u.h_norm().sqrt(), max_relative = 1e-10);
        // |f|_β bounds sampled quotients
        let mut rng = rng_from_seed(2);
        for _ in 0..200 {
            let x = random_band_limited(&b, 8, 0.5, 1.0, &mut rng).unwrap();
            let y = random_band_limited(&b, 8, 0.5, 1.0, &mut rng).unwrap();
            let d = x.sub(&y).unwrap().h_norm();
            assert!((cn.value(&x) - cn.value(&y)).abs() <= cn.holder_seminorm(0.5).unwrap() * d.sqrt() + 1e-12);
            let sq = all(SmoothBase::ClippedSquare);
            assert!((sq.value(&x) - sq.value(&y)).abs() <= 2.0 * d + 1e-12);
        }
    }

    #[test]
    fn holder_gap_examples() {
        let b = basis(16, 1.0);
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 2.0, scale: 0.5 }, 8).unwrap();
        let at = NonlinearitySpec::arctan();
        let cfg = SdeConfig { schedule: RecordSchedule::Dyadic { per_octave: 4, t_start: 0.25 }, ..SdeConfig::new(0.01, 8.0, 4) };
        let (u, v) = (b.mode(0).scaled(0.5), b.mode(1).scaled(-0.1));
        let c = CylinderFunction::constant(b.clone(), 1.5);
        let g = holder_gap(&at, &c, 0.5, &u, &v, &noise, &cfg, 4, (1.0, 8.0)).unwrap();
        assert!(g.gap.iter().all(|&x| x == 0.0) && g.fit.is_none());
        let f = CylinderFunction::new(b.clone(), ModeSet::All, SmoothBase::ClippedNorm { beta: 0.5 }).unwrap();
        let g = holder_gap(&at, &f, 0.5, &u, &v, &noise, &cfg, 8, (1.0, 8.0)).unwrap();
        assert_eq!(g.bound_violations, 0);
        assert!(g.gap.last().unwrap() < &g.gap[0]);
        // identical starts: the gap is exactly zero under shared noise
        let g = holder_gap(&at, &f, 0.5, &u, &u, &noise, &cfg, 4, (1.0, 8.0)).unwrap();
        assert!(g.gap.iter().all(|&x| x == 0.0));
        assert!(matches!(
            holder_gap(&at, &f, 0.75, &u, &v, &noise, &cfg, 4, (1.0, 8.0)),
            Err(Error::BetaAboveThreshold { .. })
        ));
    }

    #[test]
    fn kolmogorov_examples() {
        let b = basis(32, 1.0);
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 1.0, scale: 0.7 }, 16).unwrap();
        let mut rng = rng_from_seed(5);
        for spec in crate::nonlinearity::catalog() {
            let u = random_band_limited(&b, 8, 1.0, 1.0, &mut rng).unwrap();
            let au = apply_a(&spec, &u);
            for k in [0, 3] {
                let ek = b.mode(k);
                let lin = CylinderFunction::mode_coordinate(b.clone(), k).unwrap();
                let expect = -au.dot(&ek).unwrap();
                assert!((kolmogorov_apply(&spec, &noise, &lin, &u).unwrap() - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
                let sq = CylinderFunction::mode_square(b.clone(), k).unwrap();
                let bk = noise.coefficients()[k];
                let expect = bk * bk - 2.0 * au.dot(&ek).unwrap() * u.dot(&ek).unwrap();
                assert_relative_eq!(kolmogorov_apply(&spec, &noise, &sq, &u).unwrap(), expect, max_relative = 1e-10, epsilon = 1e-12);
            }
            let c = CylinderFunction::constant(b.clone(), 4.0);
            assert_eq!(kolmogorov_apply(&spec, &noise, &c, &u).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_function_statistics_are_exact() {
        let b = basis(16, 1.0);
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 1.0, scale: 0.5 }, 8).unwrap();
        let at = NonlinearitySpec::arctan();
        let c = CylinderFunction::constant(b.clone(), 0.25);
        let samples: Vec<Field> = (0..30).map(|k| b.mode(k % 5)).collect();
        let r = invariance_and_dissipativity(&at, &noise, &c, &samples).unwrap();
        assert_eq!((r.mean_generator.mean, r.defect.mean), (0.0, 0.0));
        assert!(matches!(invariance_and_dissipativity(&at, &noise, &c, &[]), Err(Error::EmptyStream)));
        let cfg = SdeConfig::new(0.01, 1.0, 3);
        let w = weak_lln_check(&at, &c, &b.mode(0), &b.mode(1), &noise, &cfg).unwrap();
        assert_eq!((w.first.mean, w.second.mean, w.difference), (0.25, 0.25, 0.0));
    }

    #[test]
    fn zero_noise_zero_start_moments_vanish() {
        let b = basis(16, 1.0);
        let noise = NoiseOperator::zero(b.clone());
        let pl = NonlinearitySpec::p_laplace(1.5).unwrap();
        let u0 = b.grid().zeros();
        let cfg = SdeConfig::new(0.01, 1.0, 0).with_observables(moment_observables(&pl, 1));
        let t = crate::sde::simulate(&pl, &u0, &noise, &cfg).unwrap();
        let r = moment_bounds(&pl, &u0, &noise, &t, 0.5).unwrap();
        assert_eq!(r.dissipation.estimate.mean, 0.0);
        assert_eq!(r.grad_power.estimate.mean, 0.0);
        assert!(r.dissipation.pass && r.grad_power.pass);
        assert_eq!(r.v_moment.mean, 0.0);
        let missing = crate::sde::simulate(&pl, &u0, &noise, &SdeConfig::new(0.01, 1.0, 0)).unwrap();
        assert!(matches!(moment_bounds(&pl, &u0, &noise, &missing, 0.5), Err(Error::MissingObservable(_))));
    }

    #[test]
    fn noiseless_sampler_collapses_for_p_laplace() {
        let b = basis(32, 1.0);
        let pl = NonlinearitySpec::p_laplace(1.5).unwrap();
        let noise = NoiseOperator::zero(b.clone());
        let s = invariant_sampler(&pl, &b.mode(0), &noise, &SdeConfig::new(1e-2, 1.0, 0), 1.0, 2, 10).unwrap();
        assert!(s.meta.burn_in >= s.meta.mixing_hint);
        assert!(s.samples.iter().all(|u| u.h_norm() < 1e-6));
    }
}
