use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::spec::{ScanMode, MAX_EXHAUSTIVE_N};
use crate::attention::ModelParams;
use crate::dynamics::System;
use crate::error::{Error, Result};
use crate::linalg::{spectral_abscissa, ValueSpectrum};
use crate::par::{map_indexed, Execution};
use crate::rng::SeededRng;
use crate::stability::{
    bipartite_spectrum, bipartite_stability_test, consensus_spectrum, signed_state, system_influence,
    tangent_eigenvalues, Verdict, DEFAULT_TOL_MARGIN,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub k: usize,
    /// Tokens at `+v_k`.
    pub n1: usize,
    /// Tokens at `−v_k`.
    pub n2: usize,
    /// Bit `i` set when token `i` sits at `+v_k`; absent for grouped rows.
    pub pattern: Option<u64>,
    /// Sign patterns represented by this row.
    pub count: u64,
    pub verdict: Verdict,
    pub ambient_verdict: Verdict,
    /// Largest real part on the tangent space.
    pub abscissa: f64,
}

impl ScanRow {
    pub fn is_consensus(&self) -> bool {
        self.n1 == 0 || self.n2 == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTable {
    pub d: usize,
    pub n: usize,
    pub mode: ScanMode,
    pub rows: Vec<ScanRow>,
}

impl ScanTable {
    pub fn total_patterns(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn stable_patterns(&self) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.verdict == Verdict::Stable)
            .map(|r| r.count)
            .sum()
    }

    /// Eigenvector indices carrying at least one stable bipartite (non-consensus) row.
    pub fn stable_bipartite_indices(&self) -> BTreeSet<usize> {
        self.rows
            .iter()
            .filter(|r| !r.is_consensus() && r.verdict == Verdict::Stable)
            .map(|r| r.k)
            .collect()
    }

    /// Verdicts of the two consensus points `±v_k` found in the table.
    pub fn consensus_verdicts(&self, k: usize) -> Vec<Verdict> {
        self.rows
            .iter()
            .filter(|r| r.k == k && r.is_consensus())
            .map(|r| r.verdict)
            .collect()
    }
}

/// Closed-form verdict for the class `(k, n1, n2)`.
pub fn analytic_row(
    params: &ModelParams,
    spectrum: &ValueSpectrum,
    k: usize,
    n1: usize,
    n2: usize,
    tol_margin: f64,
) -> Result<ScanRow> {
    let (verdict, ambient_verdict, abscissa) = if n1 == 0 || n2 == 0 {
        let s = consensus_spectrum(spectrum, k, n1 + n2)?;
        let a = s.manifold_abscissa();
        (
            Verdict::from_abscissa(a, tol_margin),
            Verdict::from_abscissa(s.ambient_abscissa(), tol_margin),
            a,
        )
    } else {
        let t = bipartite_stability_test(params, spectrum, k, n1, n2, tol_margin)?;
        let (_, s) = bipartite_spectrum(params, spectrum, k, n1, n2)?;
        (t.verdict, t.ambient_verdict, s.manifold_abscissa())
    };
    Ok(ScanRow {
        k,
        n1,
        n2,
        pattern: None,
        count: 1,
        verdict,
        ambient_verdict,
        abscissa,
    })
}

fn binomial(n: usize, r: usize) -> u64 {
    let r = r.min(n - r);
    (0..r).fold(1u64, |acc, i| acc * (n - i) as u64 / (i as u64 + 1))
}

fn signs(pattern: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| pattern >> i & 1 == 1).collect()
}

/// Verdict for one sign pattern from the assembled self-attention Jacobian.
pub fn numerical_row(
    params: &ModelParams,
    spectrum: &ValueSpectrum,
    k: usize,
    positive: &[bool],
    tol_margin: f64,
) -> Result<ScanRow> {
    let state = signed_state(spectrum, k, positive)?;
    let tangent = spectral_abscissa(&tangent_eigenvalues(System::SelfAttention, &state, params)?);
    let y = system_influence(System::SelfAttention, &state, params);
    let radial = (0..state.n())
        .map(|i| -2.0 * state.token(i).dot(&y.column(i)))
        .fold(f64::NEG_INFINITY, f64::max);
    let n1 = positive.iter().filter(|&&p| p).count();
    let pattern = (positive.len() <= 64).then(|| {
        positive
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &p)| acc | (p as u64) << i)
    });
    Ok(ScanRow {
        k,
        n1,
        n2: positive.len() - n1,
        pattern,
        count: 1,
        verdict: Verdict::from_abscissa(tangent, tol_margin),
        ambient_verdict: Verdict::from_abscissa(tangent.max(radial), tol_margin),
        abscissa: tangent,
    })
}

pub fn scan_bipartite(params: &ModelParams, n: usize, mode: ScanMode, seed: u64) -> Result<ScanTable> {
    scan_bipartite_with(params, n, mode, seed, DEFAULT_TOL_MARGIN, Execution::Parallel)
}

/// Stability of all consensus and bipartite consensus equilibria
/// `x_i = ±v_k` of the self-attention flow.
///
/// `Exhaustive` yields one row per `(k, n1)` with `count = C(n, n1)`, so the
/// counts add up to `d·2ⁿ`. `ExhaustiveRaw` yields one row per pattern.
/// `Sample(c)` draws `c` patterns (k uniform, signs fair) from `seed`.
pub fn scan_bipartite_with(
    params: &ModelParams,
    n: usize,
    mode: ScanMode,
    seed: u64,
    tol_margin: f64,
    exec: Execution,
) -> Result<ScanTable> {
    let spectrum = params.value_spectrum()?;
    let d = params.d();
    if n == 0 {
        return Err(Error::contract("n must be at least 1"));
    }
    if matches!(mode, ScanMode::Exhaustive | ScanMode::ExhaustiveRaw) && n > MAX_EXHAUSTIVE_N {
        return Err(Error::contract(format!(
            "exhaustive scans need n <= {MAX_EXHAUSTIVE_N}, got {n}"
        )));
    }
    let rows: Vec<Result<ScanRow>> = match mode {
        ScanMode::Exhaustive => map_indexed(exec, d * (n + 1), |idx| {
            let (k, n1) = (idx / (n + 1) + 1, idx % (n + 1));
            let mut row = analytic_row(params, &spectrum, k, n1, n - n1, tol_margin)?;
            row.count = binomial(n, n1);
            Ok(row)
        }),
        ScanMode::ExhaustiveRaw => {
            let per_k = 1usize << n;
            map_indexed(exec, d * per_k, |idx| {
                let k = idx / per_k + 1;
                numerical_row(params, &spectrum, k, &signs((idx % per_k) as u64, n), tol_margin)
            })
        }
        ScanMode::Sample(count) => {
            let mut rng = SeededRng::new(seed);
            let draws: Vec<(usize, Vec<bool>)> = (0..count)
                .map(|_| {
                    let k = 1 + rng.below(d as u64) as usize;
                    (k, (0..n).map(|_| rng.next_u64() >> 63 == 1).collect())
                })
                .collect();
            let mut cache: HashMap<(usize, usize), ScanRow> = HashMap::new();
            draws
                .into_iter()
                .map(|(k, positive)| {
                    let n1 = positive.iter().filter(|&&p| p).count();
                    let base = match cache.get(&(k, n1)) {
                        Some(r) => r.clone(),
                        None => {
                            let r = analytic_row(params, &spectrum, k, n1, n - n1, tol_margin)?;
                            cache.insert((k, n1), r.clone());
                            r
                        }
                    };
                    let pattern = (n <= 64).then(|| {
                        positive
                            .iter()
                            .enumerate()
                            .fold(0u64, |acc, (i, &p)| acc | (p as u64) << i)
                    });
                    Ok(ScanRow { pattern, ..base })
                })
                .collect()
        }
    };
    Ok(ScanTable {
        d,
        n,
        mode,
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::instance::random_instance;

    #[test]
    fn binomials() {
        assert_eq!(binomial(10, 0), 1);
        assert_eq!(binomial(10, 3), 120);
        assert_eq!(binomial(20, 10), 184_756);
        assert_eq!((0..=10).map(|r| binomial(10, r)).sum::<u64>(), 1024);
    }

    #[test]
    fn exhaustive_counts_patterns() {
        let p = random_instance(4, 1.0, 3).unwrap();
        let t = scan_bipartite(&p, 10, ScanMode::Exhaustive, 0).unwrap();
        assert_eq!(t.rows.len(), 44);
        assert_eq!(t.total_patterns(), 4 * 1024);
        assert_eq!(t.consensus_verdicts(1), vec![Verdict::Stable; 2]);
        let stable = t.stable_patterns();
        assert!((2..=4096).contains(&stable));
    }

    #[test]
    fn raw_scan_agrees_with_grouped() {
        for seed in 0..3 {
            let p = random_instance(3, 1.0, 100 + seed).unwrap();
            let grouped = scan_bipartite(&p, 5, ScanMode::Exhaustive, 0).unwrap();
            let raw = scan_bipartite(&p, 5, ScanMode::ExhaustiveRaw, 0).unwrap();
            assert_eq!(raw.rows.len(), 3 * 32);
            for r in &raw.rows {
                let g = grouped.rows.iter().find(|g| g.k == r.k && g.n1 == r.n1).unwrap();
                if r.abscissa.abs() > 1e-7 {
                    assert_eq!(r.verdict, g.verdict, "k {} n1 {}", r.k, r.n1);
                    assert!((r.abscissa - g.abscissa).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn sampled_scan_is_seeded() {
        let p = random_instance(4, 1.0, 8).unwrap();
        let a = scan_bipartite(&p, 12, ScanMode::Sample(50), 9).unwrap();
        let b = scan_bipartite(&p, 12, ScanMode::Sample(50), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 50);
        for r in &a.rows {
            assert_eq!(r.pattern.unwrap().count_ones() as usize, r.n1);
        }
    }
}
