//! Named experiments and their desk-scale default configurations.

use phiflow_core::sde::Scheme;
use phiflow_core::ProxSolveSettings;
use serde::Serialize;

use crate::config::{
    ExperimentConfig, ExperimentSection, GridSection, NoiseSection, NonlinearitySection, OutputSection, Params, SdeSection,
};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExperimentInfo {
    pub id: &'static str,
    pub description: &'static str,
    /// The result the experiment reproduces.
    pub reproduces: &'static str,
    /// Acceptance criterion it decides, if any.
    pub criterion: Option<u8>,
    /// Whether `params.beta` and the fit window are read.
    pub uses_beta: bool,
}

const fn info(id: &'static str, description: &'static str, reproduces: &'static str, criterion: Option<u8>) -> ExperimentInfo {
    ExperimentInfo { id, description, reproduces, criterion, uses_beta: false }
}

pub const REGISTRY: &[ExperimentInfo] = &[
    info("exponent-table", "s*, beta*, rate for catalog entries and d in {1,2}", "decay exponents; s* = p for s = 2-p", Some(1)),
    info("assumptions", "conditions C1-C7 on the five catalog entries", "structural conditions on psi and the C7 constants", Some(2)),
    info("monotonicity", "monotonicity of phi and ellipticity of D^2 Psi on random vectors", "convexity of the potential", Some(3)),
    info("pairing-1d", "pairing lower bound on random pairs, d=1", "one-dimensional pairing inequality", Some(4)),
    info("pairing-2d", "pairing ratio under grid refinement, d=2", "multi-dimensional pairing inequality", Some(5)),
    info("second-order-1d", "second-order estimate with the chain constants, d=1", "second-order regularity estimate", Some(6)),
    info("det-extinction", "noiseless p-Laplace flow against the comparison curve", "finite-time extinction bound", Some(7)),
    ExperimentInfo {
        uses_beta: true,
        ..info("csf-decay", "coupled curve shortening pairs, E|u-v|^{1/2}", "algebraic semigroup decay at rate t^{-1/4}", Some(8))
    },
    ExperimentInfo {
        uses_beta: true,
        ..info("plap-decay", "coupled p-Laplace pairs, p=1.5, beta=1", "algebraic semigroup decay at rate t^{-p/(2-p)}", Some(9))
    },
    info("k1k2-bounds", "time-averaged dissipation and gradient power against K1, K2", "moment bounds of the invariant measure", Some(10)),
    info("invariant-moments", "V^{s*} moments from two starts and two thinnings", "uniqueness of the invariant measure", Some(11)),
    info("kolmogorov", "invariance and dissipativity identities of the Kolmogorov operator", "Kolmogorov operator identities", Some(12)),
    info("weak-lln", "time averages of a bounded cylinder function from two starts", "weak law of large numbers", None),
    info("yosida", "resolvent nonexpansiveness, Yosida bound and A3 positivity", "resolvent and Yosida approximation properties", Some(13)),
    ExperimentInfo {
        uses_beta: true,
        ..info("determinism", "reduced coupled ensemble run twice, summaries compared", "bit-identical reruns", Some(14))
    },
];

pub fn find(id: &str) -> Option<&'static ExperimentInfo> {
    REGISTRY.iter().find(|i| i.id == id)
}

fn catalog_ids() -> Vec<String> {
    ["p-laplace:1.5", "non-newtonian:1.5", "log-diffusion", "minimal-surface", "arctan"].map(String::from).to_vec()
}

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn base(id: &str) -> ExperimentConfig {
    ExperimentConfig {
        experiment: ExperimentSection { id: id.to_string() },
        nonlinearity: NonlinearitySection { ids: catalog_ids() },
        grid: GridSection { d: 1, n: 64, length: 1.0 },
        noise: NoiseSection { rule: "poly:2".into(), scale: 1.0, modes: 64 },
        sde: SdeSection { dt: 1e-3, t_end: 1.0, seed: 42, members: 1, scheme: Scheme::Implicit, record_every: 1, per_octave: 4 },
        solver: ProxSolveSettings::default(),
        params: Params::default(),
        output: OutputSection { dir: "out".into() },
    }
}

/// The acceptance configuration of `id`.
pub fn defaults(id: &str) -> Option<ExperimentConfig> {
    find(id)?;
    let mut c = base(id);
    match id {
        "exponent-table" | "monotonicity" => {}
        "assumptions" => {
            c.params.r_max = 100.0;
            c.params.r_samples = 10_000;
        }
        "pairing-1d" => {
            c.nonlinearity.ids = ids(&["arctan", "p-laplace:1.5"]);
            c.grid.n = 256;
            c.noise.modes = 256;
            c.params.samples = 100;
            c.params.amplitude = 2.0;
            c.params.band = 10;
        }
        "pairing-2d" => {
            c.nonlinearity.ids = ids(&["arctan", "p-laplace:1.5"]);
            c.grid = GridSection { d: 2, n: 16, length: 1.0 };
            c.noise.modes = 64;
            c.params.samples = 100;
            c.params.amplitude = 1.0;
            c.params.band = 4;
            c.params.refinements = vec![16, 32, 64];
        }
        "second-order-1d" => {
            c.grid.n = 128;
            c.noise.modes = 128;
            c.params.samples = 50;
            c.params.amplitude = 3.0;
            c.params.band = 12;
        }
        "det-extinction" => {
            c.nonlinearity.ids = ids(&["p-laplace:1.5"]);
            c.grid.n = 128;
            c.noise = NoiseSection { rule: "zero".into(), scale: 0.0, modes: 0 };
            c.sde.t_end = 1.0;
            c.params.amplitude = 1.0;
        }
        "csf-decay" => {
            c.nonlinearity.ids = ids(&["arctan"]);
            c.sde.t_end = 50.0;
            c.sde.members = 200;
            c.params.beta = 0.5;
            c.params.t_max = 50.0;
            c.params.amplitude = 2.0;
        }
        "plap-decay" => {
            c.nonlinearity.ids = ids(&["p-laplace:1.5"]);
            c.sde.t_end = 20.0;
            c.sde.members = 64;
            c.params.beta = 1.0;
            c.params.t_max = 20.0;
            c.params.amplitude = 2.0;
        }
        "determinism" => {
            c.nonlinearity.ids = ids(&["arctan"]);
            c.sde.t_end = 4.0;
            c.sde.members = 8;
            c.params.beta = 0.5;
            c.params.t_max = 4.0;
            c.params.amplitude = 2.0;
        }
        "k1k2-bounds" => {
            c.nonlinearity.ids = ids(&["arctan", "p-laplace:1.5"]);
            c.sde.t_end = 100.0;
            c.sde.record_every = 10;
            c.params.burn_in = 10.0;
            c.params.amplitude = 1.0;
        }
        "invariant-moments" | "kolmogorov" => {
            c.nonlinearity.ids = ids(&["arctan"]);
            c.params.burn_in = 10.0;
            c.params.thinning = 100;
            c.params.stream = 4000;
            c.params.amplitude = 1.0;
        }
        "weak-lln" => {
            c.nonlinearity.ids = ids(&["arctan"]);
            c.sde.t_end = 200.0;
            c.sde.record_every = 10;
            c.params.amplitude = 1.0;
        }
        "yosida" => {
            c.params.samples = 50;
            c.params.amplitude = 1.0;
            c.params.band = 8;
        }
        _ => unreachable!("registry ids are matched exhaustively"),
    }
    Some(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn ids_unique_and_complete() {
        let set: BTreeSet<_> = REGISTRY.iter().map(|i| i.id).collect();
        assert_eq!(set.len(), REGISTRY.len());
        for id in [
            "exponent-table",
            "assumptions",
            "pairing-1d",
            "pairing-2d",
            "second-order-1d",
            "det-extinction",
            "csf-decay",
            "plap-decay",
            "k1k2-bounds",
            "invariant-moments",
            "kolmogorov",
            "weak-lln",
            "yosida",
        ] {
            assert!(set.contains(id), "{id}");
        }
    }

    #[test]
    fn one_experiment_per_criterion() {
        let crit: Vec<u8> = REGISTRY.iter().filter_map(|i| i.criterion).collect();
        assert_eq!(crit, (1..=14).collect::<Vec<_>>());
    }

    #[test]
    fn defaults_validate() {
        for i in REGISTRY {
            let c = defaults(i.id).unwrap();
            assert_eq!(c.experiment.id, i.id);
            c.validate().unwrap_or_else(|e| panic!("{}: {e}", i.id));
        }
        assert!(defaults("missing").is_none());
    }
}
