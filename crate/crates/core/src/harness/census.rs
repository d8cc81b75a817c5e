use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::instance::random_instance;
use super::spec::ExperimentSpec;
use crate::attention::ModelParams;
use crate::dynamics::{integrate, Termination, Trajectory};
use crate::error::Result;
use crate::geometry::{sample_uniform_sphere, SphereConfiguration};
use crate::linalg::ValueSpectrum;
use crate::par::{map_indexed, Execution};
use crate::rng::derive_seed;
use crate::stability::{classify_equilibrium, EquilibriumClass, EquilibriumReport, Verdict};

pub const SCHEMA_VERSION: u32 = 1;

/// Class label for runs whose final state is not an equilibrium.
pub const NOT_CONVERGED: &str = "not_converged";
/// Class label for runs that failed with an error.
pub const FAILED: &str = "error";

/// `(class, k, unordered split, m)`.
pub type ClassKey = (String, Option<usize>, Option<(usize, usize)>, Option<usize>);

/// One line of census output.
///
/// `wall_ms` is the only field that depends on the machine; everything else
/// is a function of the spec and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusRecord {
    pub schema: u32,
    pub instance: usize,
    pub run: usize,
    pub seed: u64,
    pub class: String,
    pub k: Option<usize>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub m: Option<usize>,
    pub attention_rank: Option<usize>,
    pub spectral_abscissa: Option<f64>,
    pub verdict: Option<Verdict>,
    pub residual: Option<f64>,
    pub steps: u64,
    pub termination: Option<Termination>,
    pub final_time: f64,
    pub error: Option<String>,
    pub wall_ms: f64,
}

impl CensusRecord {
    fn blank(instance: usize, run: usize, seed: u64) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            instance,
            run,
            seed,
            class: FAILED.to_string(),
            k: None,
            n1: None,
            n2: None,
            m: None,
            attention_rank: None,
            spectral_abscissa: None,
            verdict: None,
            residual: None,
            steps: 0,
            termination: None,
            final_time: 0.0,
            error: None,
            wall_ms: 0.0,
        }
    }

    fn attach(&mut self, report: &EquilibriumReport) {
        self.class = report.class.name().to_string();
        self.k = report.class.k();
        if let EquilibriumClass::Bipartite { n1, n2, .. } = report.class {
            self.n1 = Some(n1);
            self.n2 = Some(n2);
        }
        self.m = Some(report.m);
        self.attention_rank = Some(report.attention_rank);
        self.spectral_abscissa = report.spectral_abscissa;
        self.verdict = report.verdict;
    }

    /// The run ended at an equilibrium that went through classification.
    pub fn is_classified(&self) -> bool {
        self.class != NOT_CONVERGED && self.class != FAILED
    }

    /// Copy with the machine-dependent timing zeroed.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        }
    }

    /// Key identifying an equilibrium class up to token order.
    pub fn class_key(&self) -> ClassKey {
        let split = match (self.n1, self.n2) {
            (Some(a), Some(b)) => Some((a.min(b), a.max(b))),
            _ => None,
        };
        let m = if self.class == "m_clustering" { self.m } else { None };
        (self.class.clone(), self.k, split, m)
    }
}

/// Model and value spectrum shared by all runs of one instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: usize,
    pub seed: u64,
    pub params: ModelParams,
    pub spectrum: ValueSpectrum,
}

pub fn instance_seed(spec: &ExperimentSpec, instance: usize) -> u64 {
    derive_seed(spec.seed, instance as u64, 0)
}

pub fn run_seed(spec: &ExperimentSpec, instance: usize, run: usize) -> u64 {
    derive_seed(spec.seed, instance as u64, run as u64 + 1)
}

pub fn make_instance(spec: &ExperimentSpec, id: usize) -> Result<Instance> {
    let seed = instance_seed(spec, id);
    let params = random_instance(spec.d, spec.beta, seed)?;
    let spectrum = params.value_spectrum()?;
    Ok(Instance {
        id,
        seed,
        params,
        spectrum,
    })
}

/// Integrates from `initial`, classifies the final state if it is an
/// equilibrium, and fills a record. Errors are stored in the record.
pub fn census_run(
    spec: &ExperimentSpec,
    instance: &Instance,
    run: usize,
    seed: u64,
    initial: &SphereConfiguration,
) -> CensusRecord {
    simulate_run(spec, instance, run, seed, initial).0
}

/// As [`census_run`], also returning the trajectory when integration succeeded.
pub fn simulate_run(
    spec: &ExperimentSpec,
    instance: &Instance,
    run: usize,
    seed: u64,
    initial: &SphereConfiguration,
) -> (CensusRecord, Option<Trajectory>) {
    let start = Instant::now();
    let mut rec = CensusRecord::blank(instance.id, run, seed);
    let mut kept = None;
    let outcome = integrate(initial, spec.system, &instance.params, &spec.integration).and_then(|traj| {
        rec.steps = traj.steps;
        rec.termination = Some(traj.termination);
        rec.final_time = traj.final_time();
        let state = traj.final_state();
        let residual = crate::dynamics::equilibrium_residual(spec.system, state, &instance.params)?;
        rec.residual = Some(residual);
        let classified = if residual < spec.tolerances.equilibrium {
            classify_equilibrium(
                state,
                &instance.params,
                spec.system,
                &instance.spectrum,
                &spec.tolerances,
            )
            .map(|report| rec.attach(&report))
        } else {
            rec.class = NOT_CONVERGED.to_string();
            Ok(())
        };
        kept = Some(traj);
        classified
    });
    if let Err(e) = outcome {
        rec.class = FAILED.to_string();
        rec.error = Some(e.to_string());
    }
    rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    (rec, kept)
}

pub fn run_census(spec: &ExperimentSpec) -> Result<Vec<CensusRecord>> {
    run_census_with(spec, Execution::Parallel)
}

/// Runs every `(instance, run)` pair and returns records ordered by
/// `(instance, run)` regardless of the execution mode.
pub fn run_census_with(spec: &ExperimentSpec, exec: Execution) -> Result<Vec<CensusRecord>> {
    spec.validate()?;
    let instances = map_indexed(exec, spec.instances, |i| make_instance(spec, i));
    let instances = instances.into_iter().collect::<Result<Vec<_>>>()?;
    let runs = spec.runs_per_instance;
    Ok(map_indexed(exec, spec.instances * runs, |idx| {
        let (i, r) = (idx / runs, idx % runs);
        let seed = run_seed(spec, i, r);
        match sample_uniform_sphere(spec.d, spec.n, seed) {
            Ok(initial) => census_run(spec, &instances[i], r, seed, &initial),
            Err(e) => {
                let mut rec = CensusRecord::blank(i, r, seed);
                rec.error = Some(e.to_string());
                rec
            }
        }
    }))
}

/// Counts of classified runs per `(class, k)`; `k` is `None` for classes
/// without an eigenvector index.
pub fn class_counts(records: &[CensusRecord]) -> BTreeMap<(String, Option<usize>), usize> {
    let mut out = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_classified()) {
        *out.entry((r.class.clone(), r.k)).or_insert(0) += 1;
    }
    out
}

/// Per instance, the set of distinct equilibrium classes reached with a
/// stable verdict.
pub fn stable_classes_per_instance(
    records: &[CensusRecord],
) -> BTreeMap<usize, BTreeSet<ClassKey>> {
    let mut out: BTreeMap<usize, BTreeSet<_>> = BTreeMap::new();
    for r in records {
        let entry = out.entry(r.instance).or_default();
        if r.is_classified() && r.verdict == Some(Verdict::Stable) {
            entry.insert(r.class_key());
        }
    }
    out
}

/// Number of instances in which at least two distinct stable classes occur.
pub fn multistable_instances(records: &[CensusRecord]) -> usize {
    stable_classes_per_instance(records)
        .values()
        .filter(|s| s.len() >= 2)
        .count()
}
