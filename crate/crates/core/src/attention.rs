//! Softmax attention `A(x)` with inverse temperature, its derivatives, and the
//! per-token influence vectors `y_i = V Σ_j A_ij x_j`.

use crate::error::{Error, Result};
use crate::geometry::SphereConfiguration;
use crate::linalg::{max_asymmetry, symmetric_eigen, Matrix, ValueSpectrum, SYMMETRY_TOL};

/// Minimal `λ_1 − λ_2` accepted by [`ModelParams::check_assumption`] by default.
pub const DEFAULT_GAP_MIN: f64 = 1e-6;

/// One instance of the dynamics: query, key and (symmetric) value matrices
/// plus the inverse temperature `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    beta: f64,
    qtk: Matrix,
}

impl ModelParams {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, beta: f64) -> Result<Self> {
        let d = v.nrows();
        if d < 2 {
            return Err(Error::contract("dimension must be at least 2"));
        }
        for (name, m) in [("Q", &q), ("K", &k), ("V", &v)] {
            if m.shape() != (d, d) {
                return Err(Error::contract(format!(
                    "{name} must be {d}x{d}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::contract(format!("{name} has non-finite entries")));
            }
        }
        let asym = max_asymmetry(&v);
        if asym > SYMMETRY_TOL {
            return Err(Error::contract(format!("V is not symmetric ({asym:e})")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::contract(format!("beta must be finite and >= 0, got {beta}")));
        }
        let qtk = q.transpose() * &k;
        Ok(Self { q, k, v, beta, qtk })
    }

    /// Parameters for the multiagent Oja flow: no attention coupling.
    pub fn value_only(v: Matrix) -> Result<Self> {
        let d = v.nrows();
        Self::new(Matrix::zeros(d, d), Matrix::zeros(d, d), v, 0.0)
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.q.clone(), self.k.clone(), self.v.clone(), beta)
    }

    pub fn d(&self) -> usize {
        self.v.nrows()
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `QᵀK`, so that `⟨Q x_i, K x_j⟩ = x_iᵀ QᵀK x_j`.
    pub fn qtk(&self) -> &Matrix {
        &self.qtk
    }

    pub fn value_spectrum(&self) -> Result<ValueSpectrum> {
        symmetric_eigen(&self.v)
    }

    /// Checks `λ_1 > 0` and `λ_1 − λ_2 > gap_min`.
    pub fn check_assumption(&self, gap_min: f64) -> Result<ValueSpectrum> {
        let s = self.value_spectrum()?;
        if !(s.lambda(1) > 0.0) {
            return Err(Error::contract(format!("principal eigenvalue {} is not positive", s.lambda(1))));
        }
        if !(s.principal_gap() > gap_min) {
            return Err(Error::contract(format!(
                "principal eigenvalue gap {} does not exceed {gap_min}",
                s.principal_gap()
            )));
        }
        Ok(s)
    }
}

/// Row-stochastic, entrywise positive `n × n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(Matrix);

impl AttentionMatrix {
    pub fn entries(&self) -> &Matrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

fn check_dims(d: usize, params: &ModelParams) -> Result<()> {
    if d != params.d() {
        return Err(Error::contract(format!(
            "configuration dimension {d} does not match model dimension {}",
            params.d()
        )));
    }
    Ok(())
}

/// Attention of raw (not necessarily unit) token columns; log-sum-exp stabilized.
pub(crate) fn attention_of_tokens(x: &Matrix, params: &ModelParams) -> Matrix {
    let n = x.ncols();
    if params.beta == 0.0 {
        return Matrix::from_element(n, n, 1.0 / n as f64);
    }
    let mut logits = (x.transpose() * &params.qtk * x) * params.beta;
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.apply(|z| *z = (*z - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

/// `A_ij = exp(β⟨Qx_i, Kx_j⟩) / Σ_ℓ exp(β⟨Qx_i, Kx_ℓ⟩)`.
pub fn attention_matrix(
    config: &SphereConfiguration,
    params: &ModelParams,
) -> Result<AttentionMatrix> {
    check_dims(config.d(), params)?;
    Ok(AttentionMatrix(attention_of_tokens(config.tokens(), params)))
}

/// Gradients of row `i` of the attention matrix.
///
/// The result is `n × (n·d)`: row `j`, column block `h` holds `∂A_ij/∂x_h`.
pub fn attention_jacobian_slices(
    config: &SphereConfiguration,
    params: &ModelParams,
    i: usize,
) -> Result<Matrix> {
    check_dims(config.d(), params)?;
    if i >= config.n() {
        return Err(Error::contract(format!("token index {i} out of range")));
    }
    let a = attention_of_tokens(config.tokens(), params);
    Ok(attention_row_gradients(config.tokens(), &a, params, i))
}

pub(crate) fn attention_row_gradients(x: &Matrix, a: &Matrix, params: &ModelParams, i: usize) -> Matrix {
    let (d, n) = x.shape();
    let mut out = Matrix::zeros(n, n * d);
    let beta = params.beta;
    if beta == 0.0 {
        return out;
    }
    let m = &params.qtk;
    // x_iᵀ QᵀK and the rows x_jᵀ KᵀQ = (QᵀK x_j)ᵀ
    let xi_m = (x.column(i).transpose() * m) * beta;
    let m_x = (m * x) * beta; // column j = β QᵀK x_j
    let a_ii = a[(i, i)];
    let mut mean_row = Matrix::zeros(1, d);
    for l in 0..n {
        mean_row += m_x.column(l).transpose() * a[(i, l)];
    }
    for j in 0..n {
        let a_ij = a[(i, j)];
        // h = i
        let mut g = (m_x.column(j).transpose() - &xi_m * a_ii - &mean_row) * a_ij;
        if j == i {
            g += &xi_m * a_ii;
        }
        out.view_mut((j, i * d), (1, d)).copy_from(&g);
        // h ≠ i
        for h in (0..n).filter(|&h| h != i) {
            let a_ih = a[(i, h)];
            let coeff = if j == h { a_ih - a_ij * a_ih } else { -a_ij * a_ih };
            out.view_mut((j, h * d), (1, d)).copy_from(&(&xi_m * coeff));
        }
    }
    out
}

/// Influence vectors of raw token columns: column `i` is `V Σ_j A_ij x_j`.
pub(crate) fn influence_of_tokens(x: &Matrix, a: &Matrix, params: &ModelParams) -> Matrix {
    &params.v * (x * a.transpose())
}

/// `y_i = V Σ_j A_ij x_j`, returned as the columns of a `d × n` matrix.
pub fn influence_vectors(config: &SphereConfiguration, params: &ModelParams) -> Result<Matrix> {
    check_dims(config.d(), params)?;
    let a = attention_of_tokens(config.tokens(), params);
    Ok(influence_of_tokens(config.tokens(), &a, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_uniform_sphere;
    use crate::linalg::Vector;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn random_params(d: usize, beta: f64, seed: u64) -> ModelParams {
        let mut rng = SeededRng::new(seed);
        let mut g = || Matrix::from_fn(d, d, |_, _| rng.standard_normal());
        let (q, k, m) = (g(), g(), g());
        let v = (&m + m.transpose()) * 0.5;
        ModelParams::new(q, k, v, beta).unwrap()
    }

    fn bipartite(v: &Vector, n1: usize, n2: usize) -> SphereConfiguration {
        let mut cols = vec![v.clone(); n1];
        cols.extend(std::iter::repeat_n(-v.clone(), n2));
        SphereConfiguration::from_columns(&cols).unwrap()
    }

    #[test]
    fn rejects_bad_params() {
        let d = 3;
        let i = Matrix::identity(d, d);
        let mut v = i.clone();
        v[(0, 1)] = 0.1;
        assert!(ModelParams::new(i.clone(), i.clone(), v, 1.0).is_err());
        assert!(ModelParams::new(i.clone(), i.clone(), i.clone(), -1.0).is_err());
        assert!(ModelParams::new(Matrix::zeros(2, 2), i.clone(), i.clone(), 1.0).is_err());
        let p = ModelParams::new(i.clone(), i.clone(), i.clone(), 1.0).unwrap();
        let cfg = sample_uniform_sphere(4, 2, 0).unwrap();
        assert!(attention_matrix(&cfg, &p).is_err());
        // λ_1 = λ_2 violates the gap requirement
        assert!(p.check_assumption(DEFAULT_GAP_MIN).is_err());
    }

    #[test]
    fn zero_beta_is_exactly_uniform() {
        let p = random_params(4, 0.0, 1);
        let cfg = sample_uniform_sphere(4, 7, 2).unwrap();
        let a = attention_matrix(&cfg, &p).unwrap();
        assert!(a.entries().iter().all(|&x| x == 1.0 / 7.0));
    }

    #[test]
    fn consensus_is_uniform_for_any_beta() {
        for beta in [0.3, 1.0, 5.0] {
            let p = random_params(3, beta, 4);
            let s = p.value_spectrum().unwrap();
            for k in 1..=3 {
                let cfg = SphereConfiguration::from_columns(&vec![s.vector(k).clone(); 6]).unwrap();
                let a = attention_matrix(&cfg, &p).unwrap();
                assert!(a.entries().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn bipartite_entries_match_closed_form() {
        let beta = 0.8;
        let p = random_params(4, beta, 9);
        let s = p.value_spectrum().unwrap();
        let (n1, n2) = (3usize, 2usize);
        for k in 1..=4 {
            let v = s.vector(k);
            let z = beta * (v.transpose() * p.qtk() * v)[(0, 0)];
            let (a1, a2) = (z.exp(), (-z).exp());
            let b1 = n1 as f64 * a1 + n2 as f64 * a2;
            let b2 = n1 as f64 * a2 + n2 as f64 * a1;
            let a = attention_matrix(&bipartite(v, n1, n2), &p).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let expected = match (i < n1, j < n1) {
                        (true, true) => a1 / b1,
                        (true, false) => a2 / b1,
                        (false, true) => a2 / b2,
                        (false, false) => a1 / b2,
                    };
                    assert!((a.get(i, j) - expected).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn large_beta_does_not_overflow() {
        let p = random_params(3, 1e4, 5);
        let cfg = sample_uniform_sphere(3, 5, 6).unwrap();
        let a = attention_matrix(&cfg, &p).unwrap();
        assert!(a.entries().iter().all(|x| x.is_finite()));
        for r in a.entries().row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let p = random_params(4, 1.0, 10);
        let cfg = sample_uniform_sphere(4, 5, 11).unwrap();
        for i in 0..5 {
            let g = attention_jacobian_slices(&cfg, &p, i).unwrap();
            let col_sums = g.row_sum();
            assert!(col_sums.amax() < 1e-13, "{}", col_sums.amax());
        }
        let p0 = p.with_beta(0.0).unwrap();
        let g = attention_jacobian_slices(&cfg, &p0, 2).unwrap();
        assert_eq!(g.amax(), 0.0);
        assert!(attention_jacobian_slices(&cfg, &p, 5).is_err());
    }

    fn fd_row_gradients(cfg: &SphereConfiguration, p: &ModelParams, i: usize) -> Matrix {
        // central differences on the raw softmax, independent of the closed form
        let (d, n) = (cfg.d(), cfg.n());
        let step = 1e-6;
        let mut out = Matrix::zeros(n, n * d);
        for h in 0..n {
            for c in 0..d {
                let mut plus = cfg.tokens().clone();
                let mut minus = cfg.tokens().clone();
                plus[(c, h)] += step;
                minus[(c, h)] -= step;
                let row = |x: &Matrix| -> Vec<f64> {
                    let w: Vec<f64> = (0..n)
                        .map(|j| (p.beta() * (x.column(i).transpose() * p.qtk() * x.column(j))[(0, 0)]).exp())
                        .collect();
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|e| e / s).collect()
                };
                let (rp, rm) = (row(&plus), row(&minus));
                for j in 0..n {
                    out[(j, h * d + c)] = (rp[j] - rm[j]) / (2.0 * step);
                }
            }
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let p = random_params(4, 1.0, 20 + seed);
            let cfg = sample_uniform_sphere(4, 5, 40 + seed).unwrap();
            for i in 0..5 {
                let g = attention_jacobian_slices(&cfg, &p, i).unwrap();
                let fd = fd_row_gradients(&cfg, &p, i);
                assert!((&g - &fd).amax() < 1e-6, "seed {seed} row {i}: {}", (&g - &fd).amax());
            }
        }
    }

    #[test]
    fn influence_examples() {
        let p = random_params(4, 1.3, 12);
        let s = p.value_spectrum().unwrap();
        let v = s.vector(3);
        let cfg = SphereConfiguration::from_columns(&vec![v.clone(); 5]).unwrap();
        let y = influence_vectors(&cfg, &p).unwrap();
        for c in y.column_iter() {
            assert!((c - v * s.lambda(3)).amax() < 1e-13);
        }

        let cfg = sample_uniform_sphere(4, 6, 13).unwrap();
        let y = influence_vectors(&cfg, &p.with_beta(0.0).unwrap()).unwrap();
        let expected = p.v() * cfg.tokens().column_mean();
        for c in y.column_iter() {
            assert!((c - &expected).amax() < 1e-14);
        }

        // bipartite: y_i = λ_k δ_1 v_k on V1 and −λ_k δ_2 v_k on V2
        let (n1, n2) = (4usize, 2usize);
        for k in 1..=4 {
            let v = s.vector(k);
            let z = 1.3 * (v.transpose() * p.qtk() * v)[(0, 0)];
            let (a1, a2) = (z.exp(), (-z).exp());
            let b1 = n1 as f64 * a1 + n2 as f64 * a2;
            let b2 = n1 as f64 * a2 + n2 as f64 * a1;
            let d1 = (n1 as f64 * a1 - n2 as f64 * a2) / b1;
            let d2 = (n2 as f64 * a1 - n1 as f64 * a2) / b2;
            let y = influence_vectors(&bipartite(v, n1, n2), &p).unwrap();
            for i in 0..n1 + n2 {
                let expected = if i < n1 {
                    v * (s.lambda(k) * d1)
                } else {
                    v * (-s.lambda(k) * d2)
                };
                assert!((y.column(i) - expected).amax() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn row_stochastic_and_even(seed in any::<u64>(), d in 2usize..6, n in 1usize..9, beta in 0.0f64..3.0) {
            let p = random_params(d, beta, seed);
            let cfg = sample_uniform_sphere(d, n, seed ^ 0x5555).unwrap();
            let a = attention_matrix(&cfg, &p).unwrap();
            let b = attention_matrix(&cfg.negated(), &p).unwrap();
            for r in a.entries().row_iter() {
                prop_assert!((r.sum() - 1.0).abs() < 1e-12);
            }
            prop_assert!(a.entries().iter().all(|&x| x > 0.0));
            prop_assert!((a.entries() - b.entries()).amax() < 1e-14);
        }

        #[test]
        fn gradients_match_fd_property(seed in any::<u64>(), d in 2usize..7, n in 1usize..9, beta in 0.0f64..2.0) {
            let p = random_params(d, beta, seed);
            let cfg = sample_uniform_sphere(d, n, seed ^ 0xaaaa).unwrap();
            let i = (seed as usize) % n;
            let g = attention_jacobian_slices(&cfg, &p, i).unwrap();
            let fd = fd_row_gradients(&cfg, &p, i);
            for (x, y) in g.iter().zip(fd.iter()) {
                prop_assert!((x - y).abs() <= 1e-6f64.max(1e-4 * x.abs()));
            }
        }
    }
}
