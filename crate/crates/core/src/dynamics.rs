//! Vector fields of the Oja, multiagent Oja and self-attention flows, and a
//! projected RK4 integrator on `(S^{d-1})^n`.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_of_tokens, influence_of_tokens, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{renormalize, SphereConfiguration};
use crate::linalg::{Matrix, ValueSpectrum, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum System {
    /// `ẋ_i = (I − x_i x_iᵀ) V x_i`, each token independently.
    #[serde(rename = "oja")]
    Oja,
    /// `ẋ_i = (1/n)(I − x_i x_iᵀ) V Σ_j x_j`.
    #[serde(rename = "moja")]
    MultiagentOja,
    /// `ẋ_i = (I − x_i x_iᵀ) V Σ_j A_ij(x) x_j`.
    #[serde(rename = "self_attention")]
    SelfAttention,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Oja => "oja",
            System::MultiagentOja => "moja",
            System::SelfAttention => "self_attention",
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oja" => Ok(System::Oja),
            "moja" | "multiagent_oja" => Ok(System::MultiagentOja),
            "self_attention" | "self-attention" | "sa" => Ok(System::SelfAttention),
            other => Err(Error::Parse(format!("unknown system '{other}'"))),
        }
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Removes the radial component of each column of `y` with respect to the
/// matching column of `x`.
fn project_columns(x: &Matrix, mut y: Matrix) -> Matrix {
    for (xi, mut yi) in x.column_iter().zip(y.column_iter_mut()) {
        let c = xi.dot(&yi);
        yi.axpy(-c, &xi, 1.0);
    }
    y
}

/// Field evaluated at raw token columns (used for RK4 stages off the sphere).
pub(crate) fn field_of_tokens(system: System, x: &Matrix, params: &ModelParams) -> Matrix {
    let v = params.v();
    match system {
        System::Oja => project_columns(x, v * x),
        System::MultiagentOja => {
            let n = x.ncols();
            let y = v * x.column_sum() / n as f64;
            let cols = Matrix::from_fn(x.nrows(), n, |r, _| y[r]);
            project_columns(x, cols)
        }
        System::SelfAttention => {
            let a = attention_of_tokens(x, params);
            project_columns(x, influence_of_tokens(x, &a, params))
        }
    }
}

/// `(I − x xᵀ) V x`.
pub fn vf_oja(x: &Vector, v: &Matrix) -> Vector {
    let vx = v * x;
    &vx - x * x.dot(&vx)
}

/// Multiagent Oja field; column `i` is `f_i`.
pub fn vf_multiagent_oja(config: &SphereConfiguration, v: &Matrix) -> Result<Matrix> {
    if v.shape() != (config.d(), config.d()) {
        return Err(Error::contract("value matrix does not match configuration dimension"));
    }
    let params = ModelParams::value_only(v.clone())?;
    Ok(field_of_tokens(System::MultiagentOja, config.tokens(), &params))
}

/// Self-attention field; column `i` is `f_i = (I − x_i x_iᵀ) y_i`.
pub fn vf_self_attention(config: &SphereConfiguration, params: &ModelParams) -> Result<Matrix> {
    vector_field(System::SelfAttention, config, params)
}

pub fn vector_field(
    system: System,
    config: &SphereConfiguration,
    params: &ModelParams,
) -> Result<Matrix> {
    if config.d() != params.d() {
        return Err(Error::contract("model does not match configuration dimension"));
    }
    Ok(field_of_tokens(system, config.tokens(), params))
}

/// The field formula at arbitrary (not necessarily unit) token columns.
pub fn ambient_field(system: System, x: &Matrix, params: &ModelParams) -> Result<Matrix> {
    if x.nrows() != params.d() || x.ncols() == 0 {
        return Err(Error::contract("token matrix does not match model dimension"));
    }
    Ok(field_of_tokens(system, x, params))
}

/// `max_i ‖f_i‖₂`.
pub fn equilibrium_residual(
    system: System,
    config: &SphereConfiguration,
    params: &ModelParams,
) -> Result<f64> {
    let f = vector_field(system, config, params)?;
    Ok(f.column_iter().map(|c| c.norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationOptions {
    pub h: f64,
    pub max_time: f64,
    pub convergence_tol: f64,
    /// Store every `record_stride`-th step (the final state is always stored).
    pub record_stride: usize,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            h: 0.05,
            max_time: 500.0,
            convergence_tol: 1e-9,
            record_stride: 20,
        }
    }
}

impl IntegrationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h <= 0.5) {
            return Err(Error::contract(format!("step must be in (0, 0.5], got {}", self.h)));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::contract("convergence tolerance must be positive"));
        }
        if !(self.max_time >= 0.0 && self.max_time.is_finite()) {
            return Err(Error::contract("max_time must be finite and non-negative"));
        }
        if self.record_stride == 0 {
            return Err(Error::contract("record_stride must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxTime,
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SphereConfiguration>,
    pub termination: Termination,
    pub steps: u64,
    /// `max_i ‖f_i‖_∞` at the final state.
    pub residual: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &SphereConfiguration {
        self.states.last().expect("trajectory always holds the initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory always holds the initial time")
    }

    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn rk4_step(system: System, x: &Matrix, params: &ModelParams, h: f64, k1: &Matrix) -> Matrix {
    let k2 = field_of_tokens(system, &(x + k1 * (h / 2.0)), params);
    let k3 = field_of_tokens(system, &(x + &k2 * (h / 2.0)), params);
    let k4 = field_of_tokens(system, &(x + &k3 * h), params);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Classical RK4 in ambient coordinates followed by renormalization of every
/// token. Stops when `max_i ‖f_i‖_∞ < convergence_tol`, or once the time
/// reaches `max_time`. A collapsed token aborts with [`Error::Degenerate`].
pub fn integrate(
    config0: &SphereConfiguration,
    system: System,
    params: &ModelParams,
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    integrate_until(config0, system, params, opts, |_, _| false)
}

/// As [`integrate`], with an extra stopping predicate evaluated on
/// `(time, state)` after every step. A run stopped by the predicate reports
/// [`Termination::MaxTime`] unless the field has also converged.
pub fn integrate_until<F>(
    config0: &SphereConfiguration,
    system: System,
    params: &ModelParams,
    opts: &IntegrationOptions,
    mut stop: F,
) -> Result<Trajectory>
where
    F: FnMut(f64, &Matrix) -> bool,
{
    opts.validate()?;
    if config0.d() != params.d() {
        return Err(Error::contract("model does not match configuration dimension"));
    }
    let mut x = config0.tokens().clone();
    let mut times = vec![0.0];
    let mut states = vec![config0.clone()];
    let mut steps: u64 = 0;
    let mut last_recorded = 0u64;
    let mut halted = false;

    let (termination, residual) = loop {
        let f = field_of_tokens(system, &x, params);
        let residual = f.amax();
        if residual < opts.convergence_tol {
            break (Termination::Converged, residual);
        }
        let t = steps as f64 * opts.h;
        if t >= opts.max_time || halted {
            break (Termination::MaxTime, residual);
        }
        let next = rk4_step(system, &x, params, opts.h, &f);
        x = renormalize(next)?.into_matrix();
        steps += 1;
        if steps.is_multiple_of(opts.record_stride as u64) {
            times.push(steps as f64 * opts.h);
            states.push(SphereConfiguration::new(x.clone())?);
            last_recorded = steps;
        }
        halted = stop(steps as f64 * opts.h, &x);
    };
    if last_recorded != steps {
        times.push(steps as f64 * opts.h);
        states.push(SphereConfiguration::new(x)?);
    }
    Ok(Trajectory {
        times,
        states,
        termination,
        steps,
        residual,
    })
}

/// `W(x) = ½(λ_1 − xᵀVx)`.
pub fn lyapunov_oja(x: &Vector, spectrum: &ValueSpectrum) -> f64 {
    0.5 * (spectrum.lambda(1) - spectrum.quadratic_form(x.as_slice()))
}

/// `W(x) = ½(λ_1 − (1/n)(Σ_j x_j)ᵀ V (Σ_j x_j))`.
pub fn lyapunov_moja(config: &SphereConfiguration, spectrum: &ValueSpectrum) -> f64 {
    let s = config.tokens().column_sum();
    0.5 * (spectrum.lambda(1) - spectrum.quadratic_form(s.as_slice()) / config.n() as f64)
}
