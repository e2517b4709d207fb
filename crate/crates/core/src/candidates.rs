//! Restricted hypotheses space 𝒞*: graphical-lasso precision estimates over
//! a λ-grid, spectral embedding from the Laplacian of |X*|, k-means for each
//! cluster count, plus single/average-linkage baselines.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::linalg::{logdet_spd, solve_stationarity, spd_inverse, sym_eig};
use crate::model::{Clustering, SampleStats};
use crate::parallel::par_map_indices;
use crate::rng::task_rng;

/// Spectral candidate generation controls. The default λ-grid and K_max
/// match the simulation-study setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GlassoConfig {
    pub lambda_grid: Vec<f64>,
    pub k_max: usize,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        GlassoConfig {
            lambda_grid: vec![
                0.0001, 0.0005, 0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.007, 0.008, 0.009,
                0.01,
            ],
            k_max: 15,
            tol: 1e-5,
            max_iters: 5_000,
        }
    }
}

impl GlassoConfig {
    fn validate(&self) -> Result<()> {
        if self.lambda_grid.iter().any(|&l| l < 0.0) {
            return Err(Error::invalid("lambda grid must be non-negative"));
        }
        if self.k_max < 2 {
            return Err(Error::invalid("k_max must be at least 2"));
        }
        Ok(())
    }
}

/// One candidate clustering with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(flatten)]
    pub clustering: Clustering,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub k: usize,
}

/// Deduplicated set of canonical clusterings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn push_dedup(&mut self, candidate: Candidate) {
        if !self
            .candidates
            .iter()
            .any(|c| c.clustering == candidate.clustering)
        {
            self.candidates.push(candidate);
        }
    }

    /// Best agreement of any member with a reference partition.
    pub fn oracle_anmi(&self, truth: &Clustering) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for c in &self.candidates {
            best = best.max(crate::evaluation::anmi(&c.clustering, truth)?);
        }
        Ok(best)
    }
}

/// Graphical-lasso output; non-convergence is flagged, not fatal.
#[derive(Debug, Clone)]
pub struct GlassoResult {
    pub x: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub duality_gap: f64,
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn offdiag_l1(x: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            if r != c {
                acc += x[(r, c)].abs();
            }
        }
    }
    acc
}

/// Duality gap of the graphical-lasso program at a feasible primal X:
/// f(X) − log|W| − p where W projects X⁻¹ onto the dual-feasible set
/// (off-diagonals within λ of S, diagonal pinned to S).
pub fn glasso_duality_gap(x: &DMatrix<f64>, s: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let p = s.nrows();
    let x_inv = spd_inverse(x)?;
    let mut w = DMatrix::zeros(p, p);
    for r in 0..p {
        for c in 0..p {
            w[(r, c)] = if r == c {
                s[(r, c)]
            } else {
                x_inv[(r, c)].clamp(s[(r, c)] - lambda, s[(r, c)] + lambda)
            };
        }
    }
    let primal = -logdet_spd(x)? + (s * x).trace() + lambda * offdiag_l1(x);
    let dual = match logdet_spd(&w) {
        Ok(ld) => ld + p as f64,
        Err(_) => return Ok(f64::INFINITY),
    };
    Ok(primal - dual)
}

/// ℓ1-penalized precision estimate
///   argmin_{X ≻ 0} −log|X| + tr(XS) + λ Σ_{i≠j} |X_ij|
/// by ADMM: the log-det block reduces to the stationarity kernel and the
/// penalized block is an elementwise soft-threshold with unpenalized
/// diagonal. Converged means duality gap ≤ cfg.tol.
pub fn graphical_lasso(s: &DMatrix<f64>, lambda: f64, cfg: &GlassoConfig) -> Result<GlassoResult> {
    cfg.validate()?;
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    let p = s.nrows();
    let mut rho = 1.0;
    let mut z = DMatrix::<f64>::from_fn(p, p, |r, c| {
        if r == c {
            1.0 / (s[(r, r)] + 0.001)
        } else {
            0.0
        }
    });
    let mut u = DMatrix::<f64>::zeros(p, p);
    let mut x = z.clone();
    let mut gap = f64::INFINITY;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iters {
        iterations = iter;
        let rhs = (&z - &u) * rho - s;
        x = solve_stationarity(&rhs, rho)?;
        let xu = &x + &u;
        let z_old = z;
        z = DMatrix::from_fn(p, p, |r, c| {
            if r == c {
                xu[(r, c)]
            } else {
                soft_threshold(xu[(r, c)], lambda / rho)
            }
        });
        u += &x - &z;

        if iter % 10 == 0 || iter == cfg.max_iters {
            // Z is the sparse iterate; it is the one with exact zeros but may
            // sit on the PD boundary, so the gap is checked at X.
            gap = glasso_duality_gap(&x, s, lambda)?;
            if gap.abs() <= cfg.tol {
                return Ok(GlassoResult {
                    x,
                    converged: true,
                    iterations,
                    duality_gap: gap,
                });
            }
            // residual balancing keeps the small-lambda runs moving
            let primal = (&x - &z).norm();
            let dual = rho * (&z - &z_old).norm();
            if primal > 10.0 * dual && rho < 1e6 {
                rho *= 2.0;
                u /= 2.0;
            } else if dual > 10.0 * primal && rho > 1e-6 {
                rho /= 2.0;
                u *= 2.0;
            }
        }
    }
    Ok(GlassoResult {
        x,
        converged: false,
        iterations,
        duality_gap: gap,
    })
}

/// Graph Laplacian of the |X|^q weights:
/// L_ii = Σ_{k≠i}|X_ik|^q, L_ij = −|X_ij|^q. Rows sum to zero and L is PSD.
pub fn build_laplacian(x: &DMatrix<f64>, q: f64) -> DMatrix<f64> {
    let p = x.nrows();
    let mut l = DMatrix::zeros(p, p);
    for i in 0..p {
        let mut diag = 0.0;
        for j in 0..p {
            if i != j {
                let w = x[(i, j)].abs().powf(q);
                l[(i, j)] = -w;
                diag += w;
            }
        }
        l[(i, i)] = diag;
    }
    l
}

/// Ridge repair for a singular sample covariance: add 0.001·I when the
/// Cholesky factorization fails.
pub fn ridge_repair(s: &DMatrix<f64>) -> DMatrix<f64> {
    if s.clone().cholesky().is_some() {
        return s.clone();
    }
    let p = s.nrows();
    s + DMatrix::identity(p, p) * 0.001
}

/// Spectral candidate generation: for every λ in the grid, estimate the
/// precision with the graphical lasso, embed the variables with the
/// eigenvectors of the K_max lowest Laplacian eigenvalues, and k-means the
/// rows for every k in 2..=K_max. The union is deduplicated in grid order.
pub fn spectral_candidates(
    stats: &SampleStats,
    cfg: &GlassoConfig,
    seed: u64,
) -> Result<CandidateSet> {
    cfg.validate()?;
    let p = stats.p;
    if p < 2 {
        return Err(Error::invalid("spectral candidates need p >= 2"));
    }
    let s = ridge_repair(&stats.s);
    let k_max = cfg.k_max.min(p);

    let per_lambda = par_map_indices(cfg.lambda_grid.len(), |li| {
        let lambda = cfg.lambda_grid[li];
        let mut local: Vec<Candidate> = Vec::new();
        let glasso = match graphical_lasso(&s, lambda, cfg) {
            Ok(g) => g,
            Err(e) => return (local, Some(format!("lambda {lambda}: {e}"))),
        };
        let warn = if glasso.converged {
            None
        } else {
            Some(format!(
                "lambda {lambda}: glasso stopped at gap {:.2e} after {} iterations",
                glasso.duality_gap, glasso.iterations
            ))
        };
        let lap = build_laplacian(&glasso.x, 1.0);
        let eig = match sym_eig(&lap) {
            Ok(e) => e,
            Err(e) => return (local, Some(format!("lambda {lambda}: {e}"))),
        };
        for k in 2..=k_max {
            let embed = DMatrix::from_fn(p, k, |r, c| eig.eigenvectors[(r, c)]);
            let mut rng = task_rng(seed, (li * 1_000 + k) as u64);
            if let Some(labels) = kmeans(&embed, k, 10, &mut rng) {
                if let Ok(clustering) = Clustering::canonicalize(&labels) {
                    if clustering.k() == k {
                        local.push(Candidate {
                            clustering,
                            method: "spectral".into(),
                            lambda: Some(lambda),
                            k,
                        });
                    }
                }
            }
        }
        (local, warn)
    });

    let mut set = CandidateSet::default();
    for (cands, warn) in per_lambda {
        for c in cands {
            set.push_dedup(c);
        }
        if let Some(w) = warn {
            set.warnings.push(w);
        }
    }
    Ok(set)
}

/// Linkage flavor for the baseline candidate generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkageMethod {
    Single,
    Average,
}

impl LinkageMethod {
    pub fn name(&self) -> &'static str {
        match self {
            LinkageMethod::Single => "single",
            LinkageMethod::Average => "average",
        }
    }
}

/// Agglomerative clustering on d_ij = 1 − |corr(i, j)|, cut at every
/// k in 2..=k_max: exactly min(k_max, p) − 1 candidates.
pub fn linkage_candidates(
    stats: &SampleStats,
    method: LinkageMethod,
    k_max: usize,
) -> Result<CandidateSet> {
    let p = stats.p;
    if p < 2 {
        return Err(Error::invalid("linkage candidates need p >= 2"));
    }
    let mut dist = vec![vec![0.0f64; p]; p];
    for i in 0..p {
        for j in 0..p {
            if i != j {
                let denom = (stats.s[(i, i)] * stats.s[(j, j)]).sqrt();
                let corr = if denom > 0.0 {
                    stats.s[(i, j)] / denom
                } else {
                    0.0
                };
                dist[i][j] = 1.0 - corr.abs();
            }
        }
    }

    // active clusters, merged pairwise until one remains
    let mut members: Vec<Vec<usize>> = (0..p).map(|i| vec![i]).collect();
    let mut d = dist;
    let mut snapshots: Vec<(usize, Vec<usize>)> = Vec::new();
    let k_hi = k_max.min(p);

    while members.len() > 1 {
        let count = members.len();
        if count >= 2 && count <= k_hi {
            let mut labels = vec![0usize; p];
            for (cluster, mem) in members.iter().enumerate() {
                for &v in mem {
                    labels[v] = cluster;
                }
            }
            snapshots.push((count, labels));
        }

        let m = members.len();
        let mut best = (0usize, 1usize);
        let mut best_d = f64::INFINITY;
        for i in 0..m {
            for j in (i + 1)..m {
                if d[i][j] < best_d {
                    best_d = d[i][j];
                    best = (i, j);
                }
            }
        }
        let (i, j) = best;
        let size_i = members[i].len() as f64;
        let size_j = members[j].len() as f64;
        let merged_d: Vec<f64> = (0..m)
            .filter(|&c| c != i && c != j)
            .map(|c| match method {
                LinkageMethod::Single => d[i][c].min(d[j][c]),
                LinkageMethod::Average => (size_i * d[i][c] + size_j * d[j][c]) / (size_i + size_j),
            })
            .collect();

        let keep: Vec<usize> = (0..m).filter(|&c| c != i && c != j).collect();
        let mut next_members: Vec<Vec<usize>> = keep.iter().map(|&c| members[c].clone()).collect();
        let mut merged = members[i].clone();
        merged.extend(members[j].iter().copied());
        next_members.push(merged);

        let mm = next_members.len();
        let mut next_d = vec![vec![0.0f64; mm]; mm];
        for (a, &ca) in keep.iter().enumerate() {
            for (b, &cb) in keep.iter().enumerate() {
                next_d[a][b] = d[ca][cb];
            }
            next_d[a][mm - 1] = merged_d[a];
            next_d[mm - 1][a] = merged_d[a];
        }
        members = next_members;
        d = next_d;
    }

    let mut set = CandidateSet::default();
    snapshots.sort_by_key(|(k, _)| *k);
    for (k, labels) in snapshots {
        let clustering = Clustering::canonicalize(&labels)?;
        set.push_dedup(Candidate {
            clustering,
            method: method.name().into(),
            lambda: None,
            k,
        });
    }
    Ok(set)
}
