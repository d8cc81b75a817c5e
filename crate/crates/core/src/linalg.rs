//! Dense real linear algebra used throughout the crate.
//!
//! Storage and the underlying decompositions come from `nalgebra`; this module
//! fixes the conventions the rest of the crate relies on: descending eigenvalue
//! order, a sign convention on eigenvectors, relative rank thresholds and
//! greedy multiset matching for spectrum comparisons.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Iteration cap for the QR-type iterations (Schur, symmetric eigen, SVD).
pub const MAX_ITERATIONS: usize = 10_000;

/// Symmetry tolerance accepted by [`symmetric_eigen`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenpairs of a symmetric matrix, eigenvalues non-increasing.
///
/// Indices in the public accessors are 1-based to match the usual
/// `λ_1 ≥ λ_2 ≥ … ≥ λ_d` labelling.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSpectrum {
    eigenvalues: Vec<f64>,
    eigenvectors: Vec<Vector>,
}

impl ValueSpectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &[Vector] {
        &self.eigenvectors
    }

    /// `λ_k`, 1-based.
    pub fn lambda(&self, k: usize) -> f64 {
        self.eigenvalues[k - 1]
    }

    /// `v_k`, 1-based.
    pub fn vector(&self, k: usize) -> &Vector {
        &self.eigenvectors[k - 1]
    }

    /// `λ_1 - λ_2`, or `+inf` in dimension one.
    pub fn principal_gap(&self) -> f64 {
        if self.eigenvalues.len() < 2 {
            f64::INFINITY
        } else {
            self.eigenvalues[0] - self.eigenvalues[1]
        }
    }

    /// Quadratic form `xᵀ V x` evaluated through the eigenbasis.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.eigenvalues
            .iter()
            .zip(&self.eigenvectors)
            .map(|(lam, v)| {
                let c: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
                lam * c * c
            })
            .sum()
    }
}

pub fn max_asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_square(m: &Matrix) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::contract(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("matrix has non-finite entries"));
    }
    Ok(())
}

/// Full orthonormal eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted in descending order and every eigenvector is signed
/// so that its first non-negligible component is positive.
pub fn symmetric_eigen(m: &Matrix) -> Result<ValueSpectrum> {
    check_square(m)?;
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::contract(format!(
            "matrix is not symmetric (max |M_ij - M_ji| = {asym:e})"
        )));
    }
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, MAX_ITERATIONS)
        .ok_or(Error::NoConvergence { rows: n, cols: n })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = order
        .iter()
        .map(|&i| {
            let mut v: Vector = eig.eigenvectors.column(i).into_owned();
            v /= v.norm();
            let pivot = v.iter().copied().find(|c| c.abs() > 1e-12).unwrap_or(1.0);
            if pivot < 0.0 {
                v = -v;
            }
            v
        })
        .collect();
    Ok(ValueSpectrum {
        eigenvalues,
        eigenvectors,
    })
}

const SCHUR_DEFLATION: [f64; 5] = [f64::EPSILON, 1e-15, 1e-14, 1e-13, 1e-12];

/// All eigenvalues of a general square matrix, with multiplicity.
///
/// Computed from a real Schur form (Hessenberg reduction followed by
/// double-shift QR). Sorted by descending real part, ties broken by
/// descending imaginary part. Non-convergence after [`MAX_ITERATIONS`]
/// sweeps is reported as [`Error::NoConvergence`].
pub fn general_eigenvalues(m: &Matrix) -> Result<Vec<Complex64>> {
    check_square(m)?;
    let n = m.nrows();
    // Deflation at machine epsilon can stall on Jacobians with large
    // degenerate eigenspaces; relax it step by step up to 1e-12.
    let schur = SCHUR_DEFLATION
        .iter()
        .find_map(|&eps| Schur::try_new(m.clone(), eps, MAX_ITERATIONS))
        .ok_or(Error::NoConvergence { rows: n, cols: n })?;
    let (_, t) = schur.unpack();
    let mut eigs = quasi_triangular_eigenvalues(&t);
    sort_spectrum(&mut eigs);
    Ok(eigs)
}

/// Eigenvalues of a real quasi-upper-triangular matrix, reading 1×1 and 2×2
/// diagonal blocks. A 2×2 block with a non-negative discriminant yields two
/// real eigenvalues.
fn quasi_triangular_eigenvalues(t: &Matrix) -> Vec<Complex64> {
    let n = t.nrows();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let mid = 0.5 * (a + d);
            let disc = 0.25 * (a - d) * (a - d) + b * c;
            if disc >= 0.0 {
                let r = disc.sqrt();
                out.push(Complex64::new(mid + r, 0.0));
                out.push(Complex64::new(mid - r, 0.0));
            } else {
                let r = (-disc).sqrt();
                out.push(Complex64::new(mid, r));
                out.push(Complex64::new(mid, -r));
            }
            i += 2;
        } else {
            out.push(Complex64::new(t[(i, i)], 0.0));
            i += 1;
        }
    }
    out
}

pub fn sort_spectrum(eigs: &mut [Complex64]) {
    eigs.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
}

/// Largest real part, or `-inf` for an empty slice.
pub fn spectral_abscissa(eigs: &[Complex64]) -> f64 {
    eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("matrix has non-finite entries"));
    }
    let (r, c) = m.shape();
    let svd = m
        .clone()
        .try_svd(false, false, f64::EPSILON, MAX_ITERATIONS)
        .ok_or(Error::NoConvergence { rows: r, cols: c })?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Number of singular values strictly above `tol * σ_max`.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::contract(format!("rank tolerance must be > 0, got {tol}")));
    }
    let s = singular_values(m)?;
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > tol * smax).count())
}

pub fn smallest_singular_value(m: &Matrix) -> Result<f64> {
    check_square(m)?;
    Ok(singular_values(m)?.last().copied().unwrap_or(0.0))
}

/// Outcome of matching two eigenvalue multisets.
#[derive(Debug, Clone, PartialEq)]
pub struct MultisetMatch {
    /// Largest distance among matched pairs.
    pub worst: f64,
    pub worst_pair: Option<(Complex64, Complex64)>,
    /// Sizes differ; nothing was matched.
    pub size_mismatch: bool,
}

impl MultisetMatch {
    pub fn within(&self, tol: f64) -> bool {
        !self.size_mismatch && self.worst <= tol
    }
}

/// Greedy minimal-distance matching: repeatedly pair the globally closest
/// unmatched elements. Reports the worst matched distance.
pub fn match_multisets(a: &[Complex64], b: &[Complex64]) -> MultisetMatch {
    if a.len() != b.len() {
        return MultisetMatch {
            worst: f64::INFINITY,
            worst_pair: None,
            size_mismatch: true,
        };
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            pairs.push(((x - y).norm(), i, j));
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut worst = 0.0f64;
    let mut worst_pair = None;
    let mut matched = 0;
    for (dist, i, j) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        matched += 1;
        if worst_pair.is_none() || dist > worst {
            worst = dist;
            worst_pair = Some((a[i], b[j]));
        }
        if matched == a.len() {
            break;
        }
    }
    MultisetMatch {
        worst,
        worst_pair,
        size_mismatch: false,
    }
}

pub fn real_to_complex(xs: &[f64]) -> Vec<Complex64> {
    xs.iter().map(|&x| Complex64::new(x, 0.0)).collect()
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}
