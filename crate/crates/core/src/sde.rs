//! Additive noise `B dW` diagonal in the sine basis, the implicit
//! Euler–Maruyama scheme `X_{k+1} = J_dt(X_k + ΔW_k)`, the noiseless flow with
//! its extinction bound, and trajectories driven by shared noise.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, SpectralBasis};
use crate::nonlinearity::{theta_constant, NonlinearitySpec};
use crate::potential::{apply_a, dissipation, energy, ProxSolveSettings, ProxSolver, ProxStats};
use crate::sampling::{random_band_limited, rng_from_seed, standard_normal};

/// Named coefficient families for `b_k`, `k` the one-based mode rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum NoiseRule {
    /// `b_k = scale k^{-q}`.
    Poly { q: f64, scale: f64 },
    /// `b_k = scale e^{-r k}`.
    Expo { r: f64, scale: f64 },
    /// `b_k = sigma` for one `k`, zero otherwise.
    Single { k: usize, sigma: f64 },
    Zero,
}

impl NoiseRule {
    /// Parses `poly:q`, `expo:r`, `single:k,sigma` or `zero`; `scale` multiplies
    /// the first two families.
    pub fn parse(text: &str, scale: f64) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown noise rule {text:?}"));
        let (head, arg) = text.split_once(':').unwrap_or((text, ""));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        match head.trim() {
            "poly" => Ok(Self::Poly { q: num(arg)?, scale }),
            "expo" => Ok(Self::Expo { r: num(arg)?, scale }),
            "single" => {
                let (k, s) = arg.split_once(',').ok_or_else(bad)?;
                let k = k.trim().parse::<usize>().map_err(|_| bad())?;
                if k == 0 {
                    return Err(Error::InvalidArgument("mode index in single:k,sigma is one-based".into()));
                }
                Ok(Self::Single { k, sigma: num(s)? })
            }
            "zero" | "none" => Ok(Self::Zero),
            _ => Err(bad()),
        }
    }

    pub fn coefficient(&self, k: usize) -> f64 {
        let kf = k as f64;
        match *self {
            Self::Poly { q, scale } => scale * kf.powf(-q),
            Self::Expo { r, scale } => scale * (-r * kf).exp(),
            Self::Single { k: m, sigma } => {
                if m == k {
                    sigma
                } else {
                    0.0
                }
            }
            Self::Zero => 0.0,
        }
    }

    /// Whether `Σ b_k² λ_k` stays bounded as the mode count grows, with
    /// `λ_k ~ k^{2/d}` along the rank order.
    pub fn v_summable(&self, d: usize) -> bool {
        match *self {
            Self::Poly { q, .. } => 2.0 * q - 2.0 / d as f64 > 1.0,
            Self::Expo { r, .. } => r > 0.0,
            Self::Single { .. } | Self::Zero => true,
        }
    }
}

/// Diagonal Hilbert–Schmidt operator `B e_k = b_k e_k` on the first `m_B`
/// ranked modes.
#[derive(Debug, Clone)]
pub struct NoiseOperator {
    basis: Arc<SpectralBasis>,
    coeffs: Vec<f64>,
}

impl NoiseOperator {
    pub fn new(basis: Arc<SpectralBasis>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() > basis.len() {
            return Err(Error::ShapeMismatch { expected: basis.len(), got: coeffs.len() });
        }
        if let Some(bad) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise coefficient {bad} is not finite")));
        }
        Ok(Self { basis, coeffs })
    }

    pub fn zero(basis: Arc<SpectralBasis>) -> Self {
        Self { basis, coeffs: Vec::new() }
    }

    pub fn from_rule(basis: Arc<SpectralBasis>, rule: &NoiseRule, modes: usize) -> Result<Self> {
        let m = modes.min(basis.len());
        let coeffs = (1..=m).map(|k| rule.coefficient(k)).collect();
        Self::new(basis, coeffs)
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        &self.basis
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn mode_count(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&b| b == 0.0)
    }

    /// `(‖B‖²_{L2(U,H)}, ‖B‖²_{L2(U,V)}) = (Σ b_k², Σ b_k² λ_k)`.
    pub fn hs_norms(&self) -> (f64, f64) {
        let h = self.coeffs.iter().map(|b| b * b).sum();
        let v = self.coeffs.iter().zip(self.basis.eigenvalues()).map(|(b, l)| b * b * l).sum();
        (h, v)
    }

    /// Keeps only the first `m` coefficients.
    pub fn truncated(&self, m: usize) -> Self {
        Self { basis: self.basis.clone(), coeffs: self.coeffs[..m.min(self.coeffs.len())].to_vec() }
    }

    /// Standard normals `ξ_k` for step `step`: stream `step` of the
    /// generator keyed by `seed`, drawn in mode order, so each `ξ_k`
    /// depends only on `(seed, step, k)`.
    pub fn normals_into(&self, seed: u64, step: u64, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        for x in out.iter_mut() {
            *x = standard_normal(&mut rng);
        }
    }

    /// Adds `Σ_k b_k ξ_k sqrt(dt) e_k` to `out`.
    pub fn add_increment(&self, dt: f64, seed: u64, step: u64, out: &mut [f64], scratch: &mut Vec<f64>) {
        if self.coeffs.is_empty() {
            return;
        }
        scratch.resize(self.coeffs.len(), 0.0);
        self.normals_into(seed, step, scratch);
        let sq = dt.sqrt();
        for (x, b) in scratch.iter_mut().zip(&self.coeffs) {
            *x *= b * sq;
        }
        self.basis.synthesize_into(scratch, out);
    }

    pub fn sample_increment(&self, dt: f64, seed: u64, step: u64) -> Result<Field> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt={dt} must be positive")));
        }
        let mut out = self.basis.grid().zeros();
        let mut scratch = Vec::new();
        self.add_increment(dt, seed, step, out.values_mut(), &mut scratch);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// `X_{k+1} = J_dt(X_k + ΔW_k)`.
    #[default]
    Implicit,
    /// One linearized Newton step of the implicit scheme per time step.
    SemiImplicit,
}

/// Which steps to record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RecordSchedule {
    Every { steps: u64 },
    /// Time zero, then times `2^{j/per_octave}` from `t_start` on.
    Dyadic { per_octave: u32, t_start: f64 },
}

impl RecordSchedule {
    /// Sorted distinct step indices in `0..=total`, always containing `0`
    /// and `total`.
    pub fn steps(&self, dt: f64, total: u64) -> Vec<u64> {
        let mut out = vec![0u64];
        match *self {
            Self::Every { steps } => {
                let k = steps.max(1);
                let mut s = k;
                while s <= total {
                    out.push(s);
                    s += k;
                }
            }
            Self::Dyadic { per_octave, t_start } => {
                let po = per_octave.max(1) as f64;
                let t_end = total as f64 * dt;
                let mut j = (t_start.max(dt).log2() * po).ceil() as i64;
                loop {
                    let t = 2f64.powf(j as f64 / po);
                    if t > t_end * (1.0 + 1e-12) {
                        break;
                    }
                    let s = ((t / dt).round() as u64).min(total);
                    if s > *out.last().expect("nonempty") {
                        out.push(s);
                    }
                    j += 1;
                }
            }
        }
        if *out.last().expect("nonempty") != total {
            out.push(total);
        }
        out
    }
}

/// Scalar functionals recorded along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "observable", rename_all = "kebab-case")]
pub enum Observable {
    HNorm,
    VNorm,
    Energy,
    Dissipation,
    /// `∫|∇u|^q`.
    GradPower { q: f64 },
    /// `W^{2,α}` seminorm.
    W2Alpha { alpha: f64 },
    /// `<u, e_k>` for the zero-based rank `k`.
    Mode { rank: usize },
}

impl Observable {
    pub fn name(&self) -> String {
        match self {
            Self::HNorm => "h_norm".into(),
            Self::VNorm => "v_norm".into(),
            Self::Energy => "energy".into(),
            Self::Dissipation => "dissipation".into(),
            Self::GradPower { q } => format!("grad_power_{q}"),
            Self::W2Alpha { alpha } => format!("w2alpha_{alpha}"),
            Self::Mode { rank } => format!("mode_{rank}"),
        }
    }

    pub fn evaluate(&self, spec: &NonlinearitySpec, basis: &SpectralBasis, u: &Field) -> f64 {
        match *self {
            Self::HNorm => u.h_norm(),
            Self::VNorm => u.v_norm(),
            Self::Energy => energy(spec, u),
            Self::Dissipation => dissipation(spec, u),
            Self::GradPower { q } => u.grad_power_integral(q),
            Self::W2Alpha { alpha } => u.w2alpha_seminorm(alpha.max(1.0)).unwrap_or(f64::NAN),
            Self::Mode { rank } => basis.forward(u).map(|c| c[rank]).unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub schedule: RecordSchedule,
    pub observables: Vec<Observable>,
    pub scheme: Scheme,
    pub solver: ProxSolveSettings,
    pub snapshots: bool,
}

impl SdeConfig {
    pub fn new(dt: f64, t_end: f64, seed: u64) -> Self {
        Self {
            dt,
            t_end,
            seed,
            schedule: RecordSchedule::Every { steps: 1 },
            observables: vec![Observable::HNorm],
            scheme: Scheme::Implicit,
            solver: ProxSolveSettings::default(),
            snapshots: false,
        }
    }

    pub fn record_every(mut self, steps: u64) -> Self {
        self.schedule = RecordSchedule::Every { steps };
        self
    }

    pub fn with_observables(mut self, obs: Vec<Observable>) -> Self {
        self.observables = obs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt={} must be positive", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!("t_end={} must be nonnegative", self.t_end)));
        }
        if self.t_end > 0.0 && self.dt > self.t_end {
            return Err(Error::InvalidArgument(format!("dt={} exceeds t_end={}", self.dt, self.t_end)));
        }
        if let RecordSchedule::Every { steps: 0 } = self.schedule {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        self.solver.validate()
    }

    pub fn total_steps(&self) -> u64 {
        (self.t_end / self.dt).round() as u64
    }
}

/// Recorded times, one series per observable, optional snapshots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub names: Vec<String>,
    pub series: Vec<Vec<f64>>,
    pub snapshots: Vec<Field>,
}

impl Trajectory {
    fn new(names: Vec<String>) -> Self {
        let series = vec![Vec::new(); names.len()];
        Self { times: Vec::new(), names, series, snapshots: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.series[i].as_slice())
            .ok_or_else(|| Error::MissingObservable(name.to_string()))
    }

    pub fn observable(&self, o: &Observable) -> Result<&[f64]> {
        self.get(&o.name())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time");
        for n in &self.names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            s.push_str(&t.to_string());
            for col in &self.series {
                s.push(',');
                s.push_str(&col[i].to_string());
            }
            s.push('\n');
        }
        s
    }
}

/// Per-step integrator state shared by the single and coupled drivers.
#[derive(Debug, Clone)]
pub struct Stepper {
    noise: NoiseOperator,
    solver: ProxSolver,
    scheme: Scheme,
    dt: f64,
    seed: u64,
    increment: Vec<f64>,
    input: Vec<f64>,
    scratch: Vec<f64>,
    pub last_stats: Option<ProxStats>,
}

impl Stepper {
    pub fn new(spec: &NonlinearitySpec, noise: &NoiseOperator, config: &SdeConfig) -> Result<Self> {
        config.validate()?;
        let grid = *noise.basis().grid();
        Ok(Self {
            noise: noise.clone(),
            solver: ProxSolver::new(spec, &grid, config.solver)?,
            scheme: config.scheme,
            dt: config.dt,
            seed: config.seed,
            increment: vec![0.0; grid.len()],
            input: vec![0.0; grid.len()],
            scratch: Vec::new(),
            last_stats: None,
        })
    }

    fn draw(&mut self, step: u64) {
        self.increment.iter_mut().for_each(|x| *x = 0.0);
        self.noise.add_increment(self.dt, self.seed, step, &mut self.increment, &mut self.scratch);
    }

    fn advance(&mut self, state: &mut [f64], step: u64) -> Result<()> {
        for ((i, s), w) in self.input.iter_mut().zip(state.iter()).zip(&self.increment) {
            *i = s + w;
        }
        state.copy_from_slice(&self.input);
        let res = match self.scheme {
            Scheme::Implicit => self.solver.solve_in_place(&self.input, self.dt, state).map(Some),
            Scheme::SemiImplicit => self.solver.linearized_in_place(&self.input, self.dt, state).map(|_| None),
        };
        match res {
            Ok(stats) => {
                self.last_stats = stats;
                Ok(())
            }
            Err(e) => Err(Error::Step { step, source: Box::new(e) }),
        }
    }

    /// Advances one state by step `step` (zero-based).
    pub fn step(&mut self, state: &mut [f64], step: u64) -> Result<()> {
        self.draw(step);
        self.advance(state, step)
    }

    /// Advances two states with the same increment. Bitwise equal states
    /// map to bitwise equal states, so a coalesced pair costs one solve.
    pub fn step_pair(&mut self, a: &mut [f64], b: &mut [f64], step: u64) -> Result<()> {
        self.draw(step);
        let coalesced = a == b;
        self.advance(a, step)?;
        if coalesced {
            b.copy_from_slice(a);
            return Ok(());
        }
        self.advance(b, step)
    }

    /// The last increment drawn.
    pub fn increment(&self) -> &[f64] {
        &self.increment
    }
}

/// `J_dt(state + ΔW_step)` for one step.
pub fn step_implicit(
    spec: &NonlinearitySpec,
    state: &Field,
    noise: &NoiseOperator,
    dt: f64,
    step: u64,
    config: &SdeConfig,
) -> Result<Field> {
    let cfg = SdeConfig { dt, t_end: dt, ..config.clone() };
    let mut st = Stepper::new(spec, noise, &cfg)?;
    noise.basis().grid().check(state)?;
    let mut v = state.values().to_vec();
    st.step(&mut v, step)?;
    Field::new(*state.grid(), v)
}

fn record(traj: &mut Trajectory, spec: &NonlinearitySpec, basis: &SpectralBasis, obs: &[Observable], t: f64, u: &Field, snap: bool) {
    traj.times.push(t);
    for (col, o) in traj.series.iter_mut().zip(obs) {
        col.push(o.evaluate(spec, basis, u));
    }
    if snap {
        traj.snapshots.push(u.clone());
    }
}

/// Runs a single trajectory and records the configured observables.
pub fn simulate(spec: &NonlinearitySpec, u0: &Field, noise: &NoiseOperator, config: &SdeConfig) -> Result<Trajectory> {
    let basis = noise.basis().clone();
    basis.grid().check(u0)?;
    let mut st = Stepper::new(spec, noise, config)?;
    let names = config.observables.iter().map(|o| o.name()).collect();
    let mut traj = Trajectory::new(names);
    let total = config.total_steps();
    let rec = config.schedule.steps(config.dt, total);
    let mut next = 0usize;
    let mut u = u0.clone();
    for step in 0..=total {
        if rec.get(next) == Some(&step) {
            record(&mut traj, spec, &basis, &config.observables, step as f64 * config.dt, &u, config.snapshots);
            next += 1;
        }
        if step < total {
            st.step(u.values_mut(), step)?;
        }
    }
    Ok(traj)
}

/// Two trajectories driven by bit-identical increments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoupledTrajectory {
    pub times: Vec<f64>,
    /// `‖u_t - v_t‖_H`.
    pub distance: Vec<f64>,
    pub first: Trajectory,
    pub second: Trajectory,
    /// Largest per-step increase of the distance (zero for an exact
    /// contraction); rounding and solver tolerance make it slightly positive.
    pub max_step_increase: f64,
}

/// Runs the pair and calls `probe(t, u, v)` at every recorded time.
pub fn simulate_coupled_with(
    spec: &NonlinearitySpec,
    u0: &Field,
    v0: &Field,
    noise: &NoiseOperator,
    config: &SdeConfig,
    mut probe: impl FnMut(f64, &Field, &Field),
) -> Result<CoupledTrajectory> {
    let basis = noise.basis().clone();
    basis.grid().check(u0)?;
    basis.grid().check(v0)?;
    let mut st = Stepper::new(spec, noise, config)?;
    let names: Vec<String> = config.observables.iter().map(|o| o.name()).collect();
    let mut out = CoupledTrajectory {
        first: Trajectory::new(names.clone()),
        second: Trajectory::new(names),
        ..Default::default()
    };
    let total = config.total_steps();
    let rec = config.schedule.steps(config.dt, total);
    let mut next = 0usize;
    let (mut u, mut v) = (u0.clone(), v0.clone());
    let mut dist = u.sub(&v)?.h_norm();
    for step in 0..=total {
        if rec.get(next) == Some(&step) {
            let t = step as f64 * config.dt;
            out.times.push(t);
            out.distance.push(dist);
            record(&mut out.first, spec, &basis, &config.observables, t, &u, config.snapshots);
            record(&mut out.second, spec, &basis, &config.observables, t, &v, config.snapshots);
            probe(t, &u, &v);
            next += 1;
        }
        if step < total {
            st.step_pair(u.values_mut(), v.values_mut(), step)?;
            let d = h_distance(u.values(), v.values(), u.grid().node_weight());
            out.max_step_increase = out.max_step_increase.max(d - dist);
            dist = d;
        }
    }
    Ok(out)
}

pub fn simulate_coupled(
    spec: &NonlinearitySpec,
    u0: &Field,
    v0: &Field,
    noise: &NoiseOperator,
    config: &SdeConfig,
) -> Result<CoupledTrajectory> {
    simulate_coupled_with(spec, u0, v0, noise, config, |_, _, _| {})
}

fn h_distance(a: &[f64], b: &[f64], w: f64) -> f64 {
    (w * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sqrt()
}

/// Calibrated constant `C` with `<A(v),v> + K|O| >= C (‖v‖²)^{(2-s)/2}`
/// on a probe set, and the probe that attains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayConstant {
    pub c: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub probes: usize,
    pub attained_by: String,
}

fn decay_ratio(spec: &NonlinearitySpec, k: f64, v: &Field) -> f64 {
    let n2 = v.h_norm().powi(2);
    let pairing = apply_a(spec, v).dot(v).expect("same grid");
    (pairing + k * v.grid().volume()) / n2.powf((2.0 - spec.s()) / 2.0)
}

/// Minimizes the decay ratio over low modes, random band-limited fields,
/// `u0` and a projected-gradient descent started from the best probe.
pub fn calibrate_decay_constant(spec: &NonlinearitySpec, basis: &SpectralBasis, u0: &Field, seed: u64) -> DecayConstant {
    let k = theta_constant(spec);
    let scale = u0.h_norm().max(1e-3);
    let mut probes: Vec<(String, Field)> = (0..4.min(basis.len())).map(|m| (format!("mode_{m}"), basis.mode(m).scaled(scale))).collect();
    let mut rng = rng_from_seed(seed);
    for i in 0..20 {
        let f = random_band_limited(basis, 8, 1.0, 1.0, &mut rng).expect("band within basis");
        let nf = f.h_norm();
        if nf > 0.0 {
            probes.push((format!("random_{i}"), f.scaled(scale / nf)));
        }
    }
    if u0.h_norm() > 0.0 {
        probes.push(("u0".into(), u0.clone()));
    }
    let mut best = (f64::INFINITY, String::new(), basis.grid().zeros());
    for (name, f) in &probes {
        let r = decay_ratio(spec, k, f);
        if r < best.0 {
            best = (r, name.clone(), f.clone());
        }
    }
    // descent on the sphere ‖v‖ = scale with a finite-difference gradient in
    // the first spectral coefficients
    let modes = 12.min(basis.len());
    let mut c = basis.forward(&best.2).expect("own grid");
    c.truncate(modes);
    let eval = |c: &[f64]| -> f64 {
        let f = basis.inverse(c).expect("short coefficient vector");
        let n = f.h_norm();
        if n == 0.0 {
            return f64::INFINITY;
        }
        decay_ratio(spec, k, &f.scaled(scale / n))
    };
    let mut val = eval(&c);
    let mut step = 0.1 * c.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..200 {
        let mut improved = false;
        for i in 0..modes {
            for sgn in [1.0, -1.0] {
                let mut t = c.clone();
                t[i] += sgn * step;
                let tv = eval(&t);
                if tv < val {
                    c = t;
                    val = tv;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-8 * scale {
                break;
            }
        }
    }
    if val < best.0 {
        best = (val, "descent".into(), basis.grid().zeros());
    }
    DecayConstant { c: best.0, k, probes: probes.len() + 1, attained_by: best.1 }
}

/// Noiseless implicit flow alongside the comparison curve
/// `‖v_t‖² <= e^{2K|O|t} ((‖u0‖^s - C s t) ∨ 0)^{2/s}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicRun {
    pub times: Vec<f64>,
    pub norm_sq: Vec<f64>,
    pub energy: Vec<f64>,
    pub bound: Vec<f64>,
    pub constant: DecayConstant,
    /// First recorded time with `‖v_t‖_H < 1e-6`.
    pub extinction_time: Option<f64>,
    /// Zero of the comparison curve, `‖u0‖^s / (C s)`.
    pub bound_zero_time: f64,
    /// `max(‖v_t‖² - bound_t)` over recorded times.
    pub max_violation: f64,
    pub bound_holds: bool,
}

pub const EXTINCTION_THRESHOLD: f64 = 1e-6;

pub fn deterministic_flow(
    spec: &NonlinearitySpec,
    basis: &Arc<SpectralBasis>,
    u0: &Field,
    t_end: f64,
    dt: f64,
    settings: &ProxSolveSettings,
) -> Result<DeterministicRun> {
    basis.grid().check(u0)?;
    let constant = calibrate_decay_constant(spec, basis, u0, 0x5eed);
    let noise = NoiseOperator::zero(basis.clone());
    let config = SdeConfig {
        solver: *settings,
        observables: vec![Observable::HNorm, Observable::Energy],
        ..SdeConfig::new(dt, t_end, 0)
    };
    let traj = simulate(spec, u0, &noise, &config)?;
    let s = spec.s();
    let vol = basis.grid().volume();
    let n0s = u0.h_norm().powf(s);
    let bound_zero_time = if constant.c > 0.0 { n0s / (constant.c * s) } else { f64::INFINITY };
    let hn = traj.get("h_norm")?;
    let norm_sq: Vec<f64> = hn.iter().map(|x| x * x).collect();
    let bound: Vec<f64> = traj
        .times
        .iter()
        .map(|&t| (2.0 * constant.k * vol * t).exp() * (n0s - constant.c * s * t).max(0.0).powf(2.0 / s))
        .collect();
    let extinction_time = traj.times.iter().zip(hn).find(|(_, &n)| n < EXTINCTION_THRESHOLD).map(|(&t, _)| t);
    let max_violation = norm_sq.iter().zip(&bound).map(|(n, b)| n - b).fold(f64::NEG_INFINITY, f64::max);
    // rounding slack relative to the initial norm
    let slack = 1e-9 * norm_sq.first().copied().unwrap_or(0.0).max(1e-300);
    Ok(DeterministicRun {
        times: traj.times.clone(),
        norm_sq,
        energy: traj.get("energy")?.to_vec(),
        bound,
        constant,
        extinction_time,
        bound_zero_time,
        max_violation,
        bound_holds: max_violation <= slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::sampling::random_band_limited;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn setup(n: usize) -> (Grid, Arc<SpectralBasis>) {
        let g = Grid::line(n, 1.0).unwrap();
        (g, Arc::new(SpectralBasis::new(&g)))
    }

    #[test]
    fn hs_norms_examples() {
        let (_, b) = setup(64);
        let single = NoiseOperator::from_rule(b.clone(), &NoiseRule::Single { k: 1, sigma: 0.3 }, 64).unwrap();
        let (h, v) = single.hs_norms();
        assert_relative_eq!(h, 0.09, max_relative = 1e-14);
        assert_relative_eq!(v, 0.09 * b.eigenvalue(0), max_relative = 1e-14);
        let poly = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 2.0, scale: 1.0 }, 64).unwrap();
        let (h, v) = poly.hs_norms();
        let hd: f64 = (1..=64).map(|k| (k as f64).powi(-4)).sum();
        let vd: f64 = (1..=64).map(|k| (k as f64).powi(-4) * b.eigenvalue(k - 1)).sum();
        assert_relative_eq!(h, hd, max_relative = 1e-12);
        assert_relative_eq!(v, vd, max_relative = 1e-12);
        for m in [1, 10, 63] {
            let t = poly.truncated(m).hs_norms();
            assert!(t.0 <= h && t.1 <= v);
        }
        assert_eq!(NoiseOperator::zero(b.clone()).hs_norms(), (0.0, 0.0));
    }

    #[test]
    fn rule_parsing() {
        assert_eq!(NoiseRule::parse("poly:2", 0.5).unwrap(), NoiseRule::Poly { q: 2.0, scale: 0.5 });
        assert_eq!(NoiseRule::parse("single:3,0.2", 1.0).unwrap(), NoiseRule::Single { k: 3, sigma: 0.2 });
        assert!(NoiseRule::parse("single:0,1", 1.0).is_err());
        assert!(NoiseRule::parse("gauss:1", 1.0).is_err());
        assert!(!NoiseRule::Poly { q: 1.5, scale: 1.0 }.v_summable(1));
        assert!(NoiseRule::Poly { q: 1.6, scale: 1.0 }.v_summable(1));
    }

    #[test]
    fn increments_reproducible_with_right_variance() {
        let (_, b) = setup(32);
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 1.0, scale: 1.0 }, 8).unwrap();
        let dt = 0.01;
        assert_eq!(noise.sample_increment(dt, 9, 4).unwrap(), noise.sample_increment(dt, 9, 4).unwrap());
        assert_ne!(noise.sample_increment(dt, 9, 4).unwrap(), noise.sample_increment(dt, 9, 5).unwrap());
        let zero = NoiseOperator::zero(b.clone());
        assert_eq!(zero.sample_increment(dt, 1, 1).unwrap().sup_norm(), 0.0);
        let draws = 10_000;
        let mut acc = vec![0.0; 8];
        let mut mean = vec![0.0; 8];
        for step in 0..draws {
            let w = noise.sample_increment(dt, 77, step).unwrap();
            let c = b.forward(&w).unwrap();
            for k in 0..8 {
                acc[k] += c[k] * c[k];
                mean[k] += c[k];
            }
        }
        for k in 0..8 {
            let var = acc[k] / draws as f64;
            let expect = (1.0 / (k + 1) as f64).powi(2) * dt;
            // chi-square with 10^4 dof: 5% is about 3.5 sigma
            assert!((var / expect - 1.0).abs() < 0.05, "{k} {var} {expect}");
            assert!((mean[k] / draws as f64).abs() < 4.0 * (expect / draws as f64).sqrt());
        }
        // truncation does not change the lower modes
        let short = noise.truncated(3);
        let a = b.forward(&short.sample_increment(dt, 5, 2).unwrap()).unwrap();
        let full = b.forward(&noise.sample_increment(dt, 5, 2).unwrap()).unwrap();
        for k in 0..3 {
            assert_relative_eq!(a[k], full[k], max_relative = 1e-12);
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(RecordSchedule::Every { steps: 3 }.steps(0.1, 10), vec![0, 3, 6, 9, 10]);
        let d = RecordSchedule::Dyadic { per_octave: 1, t_start: 1.0 }.steps(0.01, 800);
        assert_eq!(d, vec![0, 100, 200, 400, 800]);
        assert_eq!(RecordSchedule::Every { steps: 1 }.steps(0.1, 0), vec![0]);
    }

    #[test]
    fn linear_noiseless_step_is_spectral() {
        let (g, b) = setup(40);
        let lin = NonlinearitySpec::linear();
        let u = g.from_fn(|x| x[0] * (1.0 - x[0]));
        let cfg = SdeConfig::new(0.01, 0.01, 0);
        let v = step_implicit(&lin, &u, &NoiseOperator::zero(b.clone()), 0.01, 0, &cfg).unwrap();
        let exact = b.apply_multiplier(&u, |l| 1.0 / (1.0 + 0.01 * l)).unwrap();
        assert!(v.sub(&exact).unwrap().h_norm() <= 1e-8 * exact.h_norm());
    }

    #[test]
    fn energy_inequality_of_a_step() {
        let (g, b) = setup(48);
        let mut rng = rng_from_seed(3);
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 1.0, scale: 0.5 }, 16).unwrap();
        for spec in crate::nonlinearity::catalog() {
            let u = random_band_limited(&b, 8, 1.0, 1.0, &mut rng).unwrap();
            let dt = 0.01;
            let cfg = SdeConfig::new(dt, dt, 11);
            let next = step_implicit(&spec, &u, &noise, dt, 7, &cfg).unwrap();
            let input = u.add(&noise.sample_increment(dt, 11, 7).unwrap()).unwrap();
            let lhs = energy(&spec, &next) + next.sub(&input).unwrap().h_norm().powi(2) / (2.0 * dt);
            assert!(lhs <= energy(&spec, &input) + 1e-10, "{}", spec.id);
        }
        let _ = g;
    }

    #[test]
    fn coupled_pairs_contract() {
        let (_, b) = setup(32);
        let mut rng = rng_from_seed(4);
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 1.0, scale: 1.0 }, 16).unwrap();
        let at = NonlinearitySpec::arctan();
        let cfg = SdeConfig::new(1e-3, 1e-2, 5);
        for _ in 0..100 {
            let u = random_band_limited(&b, 8, 1.0, 1.0, &mut rng).unwrap();
            let v = random_band_limited(&b, 8, 1.0, 1.0, &mut rng).unwrap();
            let c = simulate_coupled(&at, &u, &v, &noise, &cfg).unwrap();
            assert!(c.distance.windows(2).all(|w| w[1] <= w[0] + 1e-9));
            assert!(c.max_step_increase <= 1e-9);
        }
        let u = random_band_limited(&b, 8, 1.0, 1.0, &mut rng).unwrap();
        let c = simulate_coupled(&at, &u, &u, &noise, &cfg).unwrap();
        assert!(c.distance.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn trajectories_are_reproducible() {
        let (_, b) = setup(32);
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 1.0, scale: 1.0 }, 16).unwrap();
        let at = NonlinearitySpec::arctan();
        let u0 = b.mode(0);
        let cfg = SdeConfig::new(1e-3, 0.05, 8).with_observables(vec![Observable::HNorm, Observable::Energy, Observable::Dissipation]);
        let a = simulate(&at, &u0, &noise, &cfg).unwrap();
        let c = simulate(&at, &u0, &noise, &cfg).unwrap();
        assert_eq!(a.to_csv(), c.to_csv());
        let zero = SdeConfig { t_end: 0.0, ..cfg.clone() };
        let z = simulate(&at, &u0, &noise, &zero).unwrap();
        assert_eq!(z.times, vec![0.0]);
        assert!(a.get("nope").is_err());
    }

    #[test]
    fn noiseless_energy_decreases() {
        let (_, b) = setup(32);
        for spec in crate::nonlinearity::catalog() {
            let u0 = b.mode(0).scaled(2.0).add(&b.mode(3)).unwrap();
            let cfg = SdeConfig::new(1e-3, 0.1, 0).with_observables(vec![Observable::Energy]);
            let t = simulate(&spec, &u0, &NoiseOperator::zero(b.clone()), &cfg).unwrap();
            let e = t.get("energy").unwrap();
            assert!(e.windows(2).all(|w| w[1] <= w[0] + 1e-14), "{}", spec.id);
        }
    }

    #[test]
    fn galerkin_span_invariance() {
        let (_, b) = setup(32);
        let m = 4;
        let noise = NoiseOperator::from_rule(b.clone(), &NoiseRule::Poly { q: 1.0, scale: 1.0 }, m).unwrap();
        let u0 = b.galerkin_project(&b.mode(0).add(&b.mode(2)).unwrap().add(&b.mode(9)).unwrap(), m).unwrap();
        let cfg = SdeConfig { snapshots: true, ..SdeConfig::new(1e-3, 0.02, 2) };
        let lin = simulate(&NonlinearitySpec::linear(), &u0, &noise, &cfg).unwrap();
        for s in &lin.snapshots {
            let p = b.galerkin_project(s, m).unwrap();
            assert!(p.sub(s).unwrap().h_norm() <= 1e-9 * s.h_norm().max(1.0));
        }
        // a nonlinear drift leaves the span
        let at = simulate(&NonlinearitySpec::arctan(), &u0.scaled(3.0), &noise, &cfg).unwrap();
        let last = at.snapshots.last().unwrap();
        let p = b.galerkin_project(last, m).unwrap();
        assert!(p.sub(last).unwrap().h_norm() > 1e-6 * last.h_norm());
    }

    #[test]
    fn semi_implicit_close_to_implicit_for_small_dt() {
        let (_, b) = setup(32);
        let at = NonlinearitySpec::arctan();
        let u0 = b.mode(0);
        let noise = NoiseOperator::zero(b.clone());
        let cfg = SdeConfig::new(1e-4, 0.01, 0);
        let a = simulate(&at, &u0, &noise, &cfg).unwrap();
        let s = simulate(&at, &u0, &noise, &SdeConfig { scheme: Scheme::SemiImplicit, ..cfg }).unwrap();
        let (x, y) = (a.get("h_norm").unwrap(), s.get("h_norm").unwrap());
        assert!((x.last().unwrap() - y.last().unwrap()).abs() < 1e-5);
    }

    #[test]
    fn zero_initial_datum_stays_zero() {
        let (g, b) = setup(32);
        let run = deterministic_flow(&NonlinearitySpec::p_laplace(1.5).unwrap(), &b, &g.zeros(), 0.1, 1e-3, &ProxSolveSettings::default()).unwrap();
        assert!(run.norm_sq.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn p_laplace_extinction_before_bound_zero() {
        let (g, b) = setup(64);
        let pl = NonlinearitySpec::p_laplace(1.5).unwrap();
        let u0 = g.from_fn(|x| (PI * x[0]).sin() + 0.5 * (3.0 * PI * x[0]).sin());
        let run = deterministic_flow(&pl, &b, &u0, 0.5, 1e-3, &ProxSolveSettings::default()).unwrap();
        assert!(run.bound_holds, "violation {}", run.max_violation);
        let te = run.extinction_time.expect("extinction");
        assert!(te <= run.bound_zero_time, "{te} {}", run.bound_zero_time);
    }
}
