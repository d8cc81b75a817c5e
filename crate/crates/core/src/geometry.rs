//! States on the product of spheres `(S^{d-1})^n`.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, ValueSpectrum, Vector};
use crate::rng::SeededRng;

/// Unit-norm tolerance enforced on every stored configuration.
pub const UNIT_TOL: f64 = 1e-9;

/// Norm below which a token is considered collapsed.
pub const DEGENERATE_NORM: f64 = 1e-8;

pub const DEFAULT_CLUSTER_TOL: f64 = 1e-5;
pub const DEFAULT_ALIGN_TOL: f64 = 1e-6;

/// `n` unit vectors in `R^d`, stored as the columns of a `d × n` matrix.
///
/// Column-major storage means [`SphereConfiguration::as_stacked`] is exactly
/// the stacked state `x = [x_1ᵀ … x_nᵀ]ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereConfiguration {
    tokens: Matrix,
}

impl SphereConfiguration {
    /// Wraps `tokens` (one token per column) after checking every norm.
    pub fn new(tokens: Matrix) -> Result<Self> {
        if tokens.nrows() < 2 || tokens.ncols() < 1 {
            return Err(Error::contract(format!(
                "need d >= 2 and n >= 1, got d = {}, n = {}",
                tokens.nrows(),
                tokens.ncols()
            )));
        }
        for (i, col) in tokens.column_iter().enumerate() {
            let norm = col.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::contract(format!("token {i} has norm {norm}")));
            }
        }
        Ok(Self { tokens })
    }

    pub fn from_columns(columns: &[Vector]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::contract("configuration needs at least one token"));
        }
        Self::new(Matrix::from_columns(columns))
    }

    /// Builds a configuration from a stacked vector of length `n·d`.
    pub fn from_stacked(d: usize, stacked: &[f64]) -> Result<Self> {
        if d == 0 || !stacked.len().is_multiple_of(d) {
            return Err(Error::contract("stacked length is not a multiple of d"));
        }
        Self::new(Matrix::from_column_slice(d, stacked.len() / d, stacked))
    }

    pub fn d(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn n(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> Vector {
        self.tokens.column(i).into_owned()
    }

    pub fn as_stacked(&self) -> &[f64] {
        self.tokens.as_slice()
    }

    pub fn negated(&self) -> Self {
        Self {
            tokens: -&self.tokens,
        }
    }

    /// Reorders tokens so that token `i` of the result is token `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let cols: Vec<Vector> = perm.iter().map(|&p| self.token(p)).collect();
        Self {
            tokens: Matrix::from_columns(&cols),
        }
    }

    /// `max_i ‖x_i − y_i‖`.
    pub fn max_distance(&self, other: &Self) -> f64 {
        self.tokens
            .column_iter()
            .zip(other.tokens.column_iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn into_matrix(self) -> Matrix {
        self.tokens
    }
}

/// `y − ⟨x, y⟩ x`, the projection of `y` onto the tangent space at unit `x`.
pub fn project_tangent(x: &Vector, y: &Vector) -> Result<Vector> {
    let norm = x.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::contract(format!("base point has norm {norm}")));
    }
    if x.len() != y.len() {
        return Err(Error::contract("dimension mismatch in tangent projection"));
    }
    Ok(y - x * x.dot(y))
}

/// Scales every column of `raw` to unit length.
pub fn renormalize(mut raw: Matrix) -> Result<SphereConfiguration> {
    for (i, mut col) in raw.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::Degenerate { token: i, norm });
        }
        col /= norm;
    }
    SphereConfiguration::new(raw)
}

/// `n` independent uniform points on `S^{d-1}` (normalized Gaussians).
pub fn sample_uniform_sphere(d: usize, n: usize, seed: u64) -> Result<SphereConfiguration> {
    if d < 2 || n < 1 {
        return Err(Error::contract(format!("need d >= 2 and n >= 1, got d = {d}, n = {n}")));
    }
    let mut rng = SeededRng::new(seed);
    loop {
        let raw = Matrix::from_fn(d, n, |_, _| rng.standard_normal());
        // A Gaussian draw this close to the origin has probability ~0; redraw
        // rather than fail.
        if let Ok(cfg) = renormalize(raw) {
            return Ok(cfg);
        }
    }
}

/// Orthonormal basis of the tangent space `x^⊥` as the columns of a `d × (d−1)`
/// matrix, taken from the Householder reflector that maps `x` to a coordinate axis.
pub fn tangent_basis(x: &Vector) -> Matrix {
    let d = x.len();
    let pivot = x.iamax();
    let mut u = x.clone();
    let s = if x[pivot] >= 0.0 { 1.0 } else { -1.0 };
    u[pivot] += s;
    let uu = u.dot(&u);
    let h = Matrix::identity(d, d) - (&u * u.transpose()) * (2.0 / uu);
    let cols: Vec<Vector> = (0..d)
        .filter(|&c| c != pivot)
        .map(|c| h.column(c).into_owned())
        .collect();
    Matrix::from_columns(&cols)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    /// Cluster label per token; labels are numbered by first appearance.
    pub assignment: Vec<usize>,
    pub representatives: Vec<Vector>,
}

impl ClusterPartition {
    pub fn m(&self) -> usize {
        self.representatives.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.m()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage grouping by chordal distance `‖x_i − x_j‖ < tol`.
pub fn detect_clusters(config: &SphereConfiguration, tol: f64) -> Result<ClusterPartition> {
    if !(tol > 0.0 && tol < 0.5) {
        return Err(Error::contract(format!("cluster tolerance must be in (0, 0.5), got {tol}")));
    }
    let n = config.n();
    let x = config.tokens();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if (x.column(i) - x.column(j)).norm() < tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut label_of_root = vec![usize::MAX; n];
    let mut assignment = Vec::with_capacity(n);
    let mut sums: Vec<Vector> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        if label_of_root[root] == usize::MAX {
            label_of_root[root] = sums.len();
            sums.push(Vector::zeros(config.d()));
        }
        let label = label_of_root[root];
        sums[label] += x.column(i);
        assignment.push(label);
    }
    let representatives = sums.into_iter().map(|s| s.normalize()).collect();
    Ok(ClusterPartition {
        assignment,
        representatives,
    })
}

/// Eigenvector alignment of a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// 1-based eigenvector index.
    pub k: usize,
    /// `true` where `⟨x_i, v_k⟩ > 0`.
    pub positive: Vec<bool>,
    /// `min_i |⟨x_i, v_k⟩|`.
    pub score: f64,
}

impl Alignment {
    pub fn n_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn n_negative(&self) -> usize {
        self.positive.len() - self.n_positive()
    }
}

/// Finds the eigenvector `v_k` maximizing `min_i |⟨x_i, v_k⟩|`; `None` when that
/// minimum is below `1 − tol_align`.
pub fn alignment(
    config: &SphereConfiguration,
    spectrum: &ValueSpectrum,
    tol_align: f64,
) -> Option<Alignment> {
    let x = config.tokens();
    let mut best: Option<(usize, f64)> = None;
    for (idx, v) in spectrum.eigenvectors().iter().enumerate() {
        let score = x
            .column_iter()
            .map(|c| c.dot(v).abs())
            .fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((idx, score));
        }
    }
    let (idx, score) = best?;
    if score < 1.0 - tol_align {
        return None;
    }
    let v = &spectrum.eigenvectors()[idx];
    Some(Alignment {
        k: idx + 1,
        positive: x.column_iter().map(|c| c.dot(v) > 0.0).collect(),
        score,
    })
}
