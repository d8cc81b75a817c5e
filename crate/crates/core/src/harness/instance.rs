use crate::attention::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::rng::SeededRng;

/// Resampling cap for the value matrix.
pub const MAX_RESAMPLES: usize = 1000;
/// Minimum accepted `λ_1 − λ_2` for generated value matrices.
pub const GAP_MIN: f64 = 1e-3;

fn gaussian(rng: &mut SeededRng, d: usize) -> Matrix {
    Matrix::from_fn(d, d, |_, _| rng.standard_normal())
}

/// Random model with i.i.d. standard normal `Q`, `K` and a symmetrized
/// Gaussian `V = (M + Mᵀ)/2`, redrawn until `λ_1 > 0` and `λ_1 − λ_2 > 1e-3`.
///
/// Draw order from one stream: `Q`, `K`, then successive `M` candidates, each
/// filled in column-major order.
pub fn random_instance(d: usize, beta: f64, seed: u64) -> Result<ModelParams> {
    if d < 2 {
        return Err(Error::contract(format!("dimension must be at least 2, got {d}")));
    }
    let mut rng = SeededRng::new(seed);
    let q = gaussian(&mut rng, d);
    let k = gaussian(&mut rng, d);
    for _ in 0..MAX_RESAMPLES {
        let m = gaussian(&mut rng, d);
        let v = (&m + m.transpose()) * 0.5;
        let s = symmetric_eigen(&v)?;
        if s.lambda(1) > 0.0 && s.principal_gap() > GAP_MIN {
            return ModelParams::new(q, k, v, beta);
        }
    }
    Err(Error::Generation {
        attempts: MAX_RESAMPLES,
    })
}
