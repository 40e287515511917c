//! Experiment configuration: TOML sections layered over registry defaults.

use std::path::Path;
use std::sync::Arc;

use phiflow_core::nonlinearity::exponents;
use phiflow_core::sde::{RecordSchedule, Scheme};
use phiflow_core::{Grid, NoiseOperator, NoiseRule, NonlinearitySpec, ProxSolveSettings, SdeConfig, SpectralBasis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearitySection {
    /// Catalog ids; single-entry experiments use the first.
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub d: usize,
    /// Interior nodes per axis.
    pub n: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// `poly:q`, `expo:r`, `single:k,sigma` or `zero`.
    pub rule: String,
    pub scale: f64,
    /// Number of driven modes `m_B`.
    pub modes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSection {
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub members: usize,
    pub scheme: Scheme,
    pub record_every: u64,
    /// Dyadic recording density for rate fits.
    pub per_octave: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    pub beta: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Random draws for the inequality suites.
    pub samples: usize,
    pub amplitude: f64,
    /// Band width of random smooth fields.
    pub band: usize,
    pub r_max: f64,
    pub r_samples: usize,
    pub refinements: Vec<usize>,
    pub burn_in: f64,
    pub thinning: u64,
    pub stream: usize,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            beta: 1.0,
            t_min: 1.0,
            t_max: 10.0,
            samples: 100,
            amplitude: 1.0,
            band: 16,
            r_max: 100.0,
            r_samples: 10_000,
            refinements: vec![16, 32, 64],
            burn_in: 0.0,
            thinning: 100,
            stream: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub nonlinearity: NonlinearitySection,
    pub grid: GridSection,
    pub noise: NoiseSection,
    pub sde: SdeSection,
    pub solver: ProxSolveSettings,
    #[serde(default)]
    pub params: Params,
    pub output: OutputSection,
}

/// Deep merge of `overlay` into `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses config text, layering it over the defaults of its experiment.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        if text.trim().is_empty() {
            return Err(CliError::Usage("empty config".into()));
        }
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::invalid(format!("malformed config: {e}")))?;
        let id = table
            .get("experiment")
            .and_then(|e| e.get("id"))
            .and_then(|v| v.as_str())
            .ok_or_else(|| CliError::invalid("missing [experiment] id"))?
            .to_string();
        let defaults = registry::defaults(&id).ok_or_else(|| CliError::invalid(format!("unknown experiment id `{id}`")))?;
        let mut base = toml::Table::try_from(&defaults).map_err(|e| CliError::invalid(e.to_string()))?;
        merge(&mut base, table);
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| CliError::invalid(format!("config: {e}")))?;
        Ok(cfg)
    }

    /// A config file path, or a registry id for its defaults.
    pub fn load(target: &str) -> CliResult<Self> {
        if target.trim().is_empty() {
            return Err(CliError::Usage("empty config".into()));
        }
        let path = Path::new(target);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(target, e))?;
            return Self::from_toml(&text);
        }
        registry::defaults(target).ok_or_else(|| CliError::invalid(format!("`{target}` is neither a config file nor a registry id")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML without the output section, so the
    /// hash names the computation and not where it was written.
    pub fn hash(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        table.remove("output");
        let text = toml::to_string(&table).expect("table serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Every violated invariant, or `Ok`.
    pub fn validate(&self) -> CliResult<()> {
        let mut bad = Vec::new();
        let info = registry::find(&self.experiment.id);
        if info.is_none() {
            bad.push(format!("unknown experiment id `{}`", self.experiment.id));
        }
        if !(1..=2).contains(&self.grid.d) {
            bad.push(format!("grid.d={} must be 1 or 2", self.grid.d));
        }
        if self.grid.n < 4 {
            bad.push(format!("grid.n={} must be at least 4", self.grid.n));
        }
        if !(self.grid.length > 0.0 && self.grid.length.is_finite()) {
            bad.push(format!("grid.length={} must be positive", self.grid.length));
        }
        if self.nonlinearity.ids.is_empty() {
            bad.push("nonlinearity.ids is empty".into());
        }
        let mut specs = Vec::new();
        for id in &self.nonlinearity.ids {
            match NonlinearitySpec::from_id(id) {
                Ok(s) => specs.push(s),
                Err(e) => bad.push(format!("nonlinearity `{id}`: {e}")),
            }
        }
        let d = self.grid.d.clamp(1, 2);
        for s in &specs {
            if let Err(e) = exponents(s.s(), d) {
                bad.push(format!("{}: {e}", s.id));
            }
        }
        let uses_beta = info.is_some_and(|i| i.uses_beta);
        if uses_beta {
            for s in &specs {
                if let Ok(e) = exponents(s.s(), d) {
                    if let Err(err) = phiflow_core::ergodics::beta_gate(self.params.beta, &e) {
                        bad.push(format!("{}: {err}", s.id));
                    }
                }
            }
            let p = &self.params;
            if !(p.t_min >= 1.0 && p.t_max > p.t_min) {
                bad.push(format!("fit window [{}, {}] must satisfy 1 <= t_min < t_max", p.t_min, p.t_max));
            }
            if p.t_max > self.sde.t_end {
                bad.push(format!("fit window end {} exceeds sde.t_end={}", p.t_max, self.sde.t_end));
            }
        }
        match NoiseRule::parse(&self.noise.rule, self.noise.scale) {
            Ok(rule) => {
                if !rule.v_summable(d) {
                    bad.push(format!("noise rule `{}` violates (B1): sum b_k^2 lambda_k diverges in d={d}", self.noise.rule));
                }
                if let NoiseRule::Single { k, .. } = rule {
                    if k > self.noise.modes {
                        bad.push(format!("single:{k} lies beyond noise.modes={}", self.noise.modes));
                    }
                }
            }
            Err(e) => bad.push(format!("noise.rule: {e}")),
        }
        if !(self.noise.scale >= 0.0 && self.noise.scale.is_finite()) {
            bad.push(format!("noise.scale={} must be finite and nonnegative", self.noise.scale));
        }
        let nodes = self.grid.n.pow(self.grid.d.clamp(1, 2) as u32);
        if self.noise.modes > nodes {
            bad.push(format!("noise.modes={} exceeds the {nodes} grid modes", self.noise.modes));
        }
        let s = &self.sde;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            bad.push(format!("sde.dt={} must be positive", s.dt));
        } else if !(s.t_end >= s.dt) {
            bad.push(format!("sde.t_end={} must be at least dt={}", s.t_end, s.dt));
        }
        if s.members == 0 {
            bad.push("sde.members must be at least 1".into());
        }
        if s.record_every == 0 {
            bad.push("sde.record_every must be at least 1".into());
        }
        if s.per_octave == 0 {
            bad.push("sde.per_octave must be at least 1".into());
        }
        if let Err(e) = self.solver.validate() {
            bad.push(format!("solver: {e}"));
        }
        if self.params.thinning == 0 {
            bad.push("params.thinning must be at least 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::InvalidConfig(bad))
        }
    }

    pub fn specs(&self) -> CliResult<Vec<NonlinearitySpec>> {
        self.nonlinearity.ids.iter().map(|id| NonlinearitySpec::from_id(id).map_err(CliError::from)).collect()
    }

    pub fn spec(&self) -> CliResult<NonlinearitySpec> {
        Ok(self.specs()?.remove(0))
    }

    pub fn grid(&self) -> CliResult<Grid> {
        let g = if self.grid.d == 1 { Grid::line(self.grid.n, self.grid.length) } else { Grid::square(self.grid.n, self.grid.length) };
        Ok(g?)
    }

    pub fn basis(&self) -> CliResult<Arc<SpectralBasis>> {
        Ok(Arc::new(SpectralBasis::new(&self.grid()?)))
    }

    pub fn noise(&self, basis: &Arc<SpectralBasis>) -> CliResult<NoiseOperator> {
        let rule = NoiseRule::parse(&self.noise.rule, self.noise.scale)?;
        Ok(NoiseOperator::from_rule(basis.clone(), &rule, self.noise.modes)?)
    }

    /// Stepping settings recording every `record_every` steps.
    pub fn sde_config(&self) -> SdeConfig {
        SdeConfig {
            scheme: self.sde.scheme,
            solver: self.solver,
            schedule: RecordSchedule::Every { steps: self.sde.record_every },
            ..SdeConfig::new(self.sde.dt, self.sde.t_end, self.sde.seed)
        }
    }

    /// Stepping settings recording on a dyadic time grid from `t_start`.
    pub fn dyadic_config(&self, t_start: f64) -> SdeConfig {
        SdeConfig { schedule: RecordSchedule::Dyadic { per_octave: self.sde.per_octave, t_start }, ..self.sde_config() }
    }
}
