use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnsphere::harness::census::{make_instance, run_seed, simulate_run};
use attnsphere::harness::output::{summary_csv, to_jsonl, trajectory_svg, write_text};
use attnsphere::harness::{run_census, scan_bipartite, ExperimentSpec, ScanMode};
use attnsphere::linalg::{general_eigenvalues, match_multisets, real_to_complex};
use attnsphere::stability::{
    antipodal_polygon, bipartite_spectrum, bipartite_stability_test, bipartite_state, classify_equilibrium,
    clustering_certificate, consensus_spectrum, isotropic_polygon, jacobian, polygonal_certificate,
    EquilibriumClass,
};
use attnsphere::{Error, System};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "attnsphere", version, about = "Self-attention and Oja flows on spheres")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one run and classify its end state.
    Simulate(Common),
    /// Sweep instances × runs and count equilibrium classes.
    Census(Common),
    /// Stability of every consensus and bipartite consensus equilibrium.
    Scan(ScanArgs),
    /// Closed-form spectrum at a consensus or bipartite point next to the Jacobian's.
    Spectrum(PointArgs),
    /// Classify an end state (or a constructed polygonal state) and attach a certificate.
    Certify(CertifyArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment document; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    system: Option<System>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    instances: Option<usize>,
    /// Runs per instance.
    #[arg(long)]
    runs: Option<usize>,
    /// RK4 step.
    #[arg(long)]
    h: Option<f64>,
    /// Maximum integration time.
    #[arg(long)]
    tmax: Option<f64>,
    /// Convergence tolerance on the vector field.
    #[arg(long)]
    tol: Option<f64>,
    /// JSONL output (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV class summary.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// SVG of the trajectory (d = 3 only).
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exhaustive,
    Raw,
    Sample,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Number of patterns drawn in sample mode.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

#[derive(Args)]
struct PointArgs {
    #[command(flatten)]
    common: Common,
    /// Eigenvector index, 1-based.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Tokens at +v_k; all of them when absent.
    #[arg(long)]
    n1: Option<usize>,
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    common: Common,
    /// Certify a constructed polygonal state instead of a simulated end state.
    #[arg(long)]
    polygon: bool,
}

fn build_spec(c: &Common) -> Result<ExperimentSpec, Error> {
    let mut spec = match &c.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    macro_rules! set {
        ($($flag:expr => $field:expr),* $(,)?) => {
            $(if let Some(v) = $flag { $field = v; })*
        };
    }
    set!(
        c.system => spec.system,
        c.d => spec.d,
        c.n => spec.n,
        c.beta => spec.beta,
        c.seed => spec.seed,
        c.instances => spec.instances,
        c.runs => spec.runs_per_instance,
        c.h => spec.integration.h,
        c.tmax => spec.integration.max_time,
        c.tol => spec.integration.convergence_tol,
    );
    if let Some(p) = &c.out {
        spec.output.jsonl = Some(p.clone());
    }
    if let Some(p) = &c.csv {
        spec.output.csv = Some(p.clone());
    }
    if let Some(p) = &c.svg {
        spec.output.svg = Some(p.clone());
    }
    spec.validate()?;
    Ok(spec)
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(c: &Common) -> Result<(), Error> {
    let spec = build_spec(c)?;
    let instance = make_instance(&spec, 0)?;
    let seed = run_seed(&spec, 0, 0);
    let initial = attnsphere::geometry::sample_uniform_sphere(spec.d, spec.n, seed)?;
    let (rec, traj) = simulate_run(&spec, &instance, 0, seed, &initial);
    if let Some(e) = &rec.error {
        return Err(Error::Numerical(e.clone()));
    }
    emit(spec.output.jsonl.as_deref(), &to_jsonl(&[rec]))?;
    if let (Some(path), Some(t)) = (&spec.output.svg, traj) {
        write_text(path, &trajectory_svg(&t)?)?;
    }
    Ok(())
}

fn census(c: &Common) -> Result<(), Error> {
    let spec = build_spec(c)?;
    let records = run_census(&spec)?;
    emit(spec.output.jsonl.as_deref(), &to_jsonl(&records))?;
    let csv = summary_csv(&records);
    match &spec.output.csv {
        Some(p) => write_text(p, &csv)?,
        None => eprint!("{csv}"),
    }
    Ok(())
}

fn scan(a: &ScanArgs) -> Result<(), Error> {
    let mut spec = build_spec(&a.common)?;
    if let Some(m) = a.mode {
        spec.scan = Some(match m {
            ModeArg::Exhaustive => ScanMode::Exhaustive,
            ModeArg::Raw => ScanMode::ExhaustiveRaw,
            ModeArg::Sample => ScanMode::Sample(a.samples),
        });
        spec.validate()?;
    }
    let mode = spec.scan.unwrap_or(ScanMode::Exhaustive);
    let mut lines = String::new();
    for i in 0..spec.instances {
        let inst = make_instance(&spec, i)?;
        let table = scan_bipartite(&inst.params, spec.n, mode, inst.seed)?;
        eprintln!(
            "instance {i}: {} equilibria, {} stable, stable bipartite along {:?}",
            table.total_patterns(),
            table.stable_patterns(),
            table.stable_bipartite_indices()
        );
        for row in &table.rows {
            let mut v = serde_json::to_value(row).expect("rows serialize");
            let obj = v.as_object_mut().expect("row is an object");
            obj.insert("schema".into(), json!(1));
            obj.insert("instance".into(), json!(i));
            obj.insert("seed".into(), json!(inst.seed));
            lines.push_str(&v.to_string());
            lines.push('\n');
        }
    }
    emit(spec.output.jsonl.as_deref(), &lines)
}

fn spectrum(a: &PointArgs) -> Result<(), Error> {
    let spec = build_spec(&a.common)?;
    let inst = make_instance(&spec, 0)?;
    let s = &inst.spectrum;
    let n = spec.n;
    let n1 = a.n1.unwrap_or(n).min(n);
    let (analytic, state, extra) = if n1 == 0 || n1 == n {
        let state = bipartite_state(s, a.k, n1, n - n1)?;
        (consensus_spectrum(s, a.k, n)?, state, Value::Null)
    } else {
        let (coeffs, sp) = bipartite_spectrum(&inst.params, s, a.k, n1, n - n1)?;
        let test = bipartite_stability_test(&inst.params, s, a.k, n1, n - n1, spec.tolerances.margin)?;
        let extra = json!({"coefficients": coeffs, "verdict": test.verdict, "ambient_verdict": test.ambient_verdict});
        (sp, bipartite_state(s, a.k, n1, n - n1)?, extra)
    };
    let eigs = general_eigenvalues(&jacobian(System::SelfAttention, &state, &inst.params)?)?;
    let m = match_multisets(&eigs, &real_to_complex(&analytic.expanded()));
    let out = json!({
        "schema": 1,
        "seed": inst.seed,
        "lambda": s.eigenvalues(),
        "k": a.k,
        "n1": n1,
        "n2": n - n1,
        "analytic": analytic,
        "numerical": eigs.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
        "worst_match": m.worst,
        "manifold_abscissa": analytic.manifold_abscissa(),
        "bipartite": extra,
    });
    emit(spec.output.jsonl.as_deref(), &format!("{out}\n"))
}

fn certify(a: &CertifyArgs) -> Result<(), Error> {
    let spec = build_spec(&a.common)?;
    let inst = make_instance(&spec, 0)?;
    let tols = spec.tolerances;
    let state = if a.polygon {
        match spec.system {
            System::SelfAttention => isotropic_polygon(&inst.params, spec.n, spec.seed)?,
            _ => antipodal_polygon(spec.d, spec.n, spec.seed)?,
        }
    } else {
        let seed = run_seed(&spec, 0, 0);
        let initial = attnsphere::geometry::sample_uniform_sphere(spec.d, spec.n, seed)?;
        let t = attnsphere::dynamics::integrate(&initial, spec.system, &inst.params, &spec.integration)?;
        t.final_state().clone()
    };
    let report = classify_equilibrium(&state, &inst.params, spec.system, &inst.spectrum, &tols)?;
    let certificate = match report.class {
        EquilibriumClass::Polygonal => {
            let c = polygonal_certificate(&state, &inst.params, spec.system, &tols)?;
            json!({"kind": "polygonal", "max_real_part": c.max_real_part, "unstable": c.unstable,
                   "zero_modes_excluded": c.zero_modes_excluded})
        }
        EquilibriumClass::Clustering { .. } if spec.system == System::SelfAttention => {
            let c = clustering_certificate(&state, &inst.params)?;
            json!({"kind": "clustering", "gammas": c.gammas, "collinearity_residual": c.collinearity_residual,
                   "singularity_residual": c.singularity_residual})
        }
        EquilibriumClass::Bipartite { k, n1, n2 } if spec.system == System::SelfAttention => {
            let t = bipartite_stability_test(&inst.params, &inst.spectrum, k, n1, n2, tols.margin)?;
            json!({"kind": "bipartite", "verdict": t.verdict, "ambient_verdict": t.ambient_verdict,
                   "coefficients": t.coefficients})
        }
        EquilibriumClass::Consensus { k } => {
            let sp = consensus_spectrum(&inst.spectrum, k, spec.n)?;
            json!({"kind": "consensus", "manifold_abscissa": sp.manifold_abscissa()})
        }
        _ => Value::Null,
    };
    let out = json!({"schema": 1, "seed": inst.seed, "report": report, "certificate": certificate});
    emit(spec.output.jsonl.as_deref(), &format!("{out}\n"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        e if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Census(c) => census(c),
        Command::Scan(a) => scan(a),
        Command::Spectrum(a) => spectrum(a),
        Command::Certify(a) => certify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
