//! Scores candidate clusterings under a chosen criterion, selects the
//! argmax, and computes the posterior over the number of clusters.
//!
//! Every criterion is normalized so that higher is better (EBIC and AIC are
//! returned negated), which keeps selection down to one code path.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::candidates::CandidateSet;
use crate::error::{Error, Result};
use crate::linalg::{logdet_spd, spd_inverse};
use crate::map::{solve_map, AdmmConfig};
use crate::mcmc::{chib_log_marginal, McmcConfig};
use crate::model::{Clustering, Hyperparams, SampleStats};
use crate::parallel::par_map_indices;
use crate::vi::{analytic_log_marginal_basic, variational_from_map};

const LN_2PI: f64 = 1.8378770664093454836_f64;

/// Model-selection criterion with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Criterion {
    /// Variational marginal likelihood of the noisy-precision model.
    ProposedVi { beta: f64 },
    /// Chib MCMC marginal likelihood of the noisy-precision model.
    ProposedMcmc { beta: f64 },
    /// Analytic marginal of the basic conjugate model.
    BasicIw,
    /// Extended BIC with weight γ on the edge-count penalty.
    Ebic { gamma: f64 },
    Aic,
    /// Calinski-Harabasz index on a variable embedding.
    Chi,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::ProposedVi { .. } => "proposed-vi",
            Criterion::ProposedMcmc { .. } => "proposed-mcmc",
            Criterion::BasicIw => "basic-iw",
            Criterion::Ebic { .. } => "ebic",
            Criterion::Aic => "aic",
            Criterion::Chi => "chi",
        }
    }

    /// Parse "proposed-vi:0.02", "ebic:0.5", "aic", ...
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, param) = match text.split_once(':') {
            Some((k, p)) => (k, Some(p)),
            None => (text, None),
        };
        let num = |default: f64| -> Result<f64> {
            match param {
                None => Ok(default),
                Some(p) => p
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad criterion parameter in '{text}'"))),
            }
        };
        let crit = match kind {
            "proposed-vi" => Criterion::ProposedVi { beta: num(0.02)? },
            "proposed-mcmc" => Criterion::ProposedMcmc { beta: num(0.02)? },
            "basic-iw" => Criterion::BasicIw,
            "ebic" => Criterion::Ebic { gamma: num(0.0)? },
            "aic" => Criterion::Aic,
            "chi" => Criterion::Chi,
            _ => return Err(Error::invalid(format!("unknown criterion '{text}'"))),
        };
        match &crit {
            Criterion::ProposedVi { beta } | Criterion::ProposedMcmc { beta } => {
                if !(0.0..1.0).contains(beta) {
                    return Err(Error::invalid("beta must be in [0, 1)"));
                }
            }
            Criterion::Ebic { gamma } => {
                if *gamma < 0.0 {
                    return Err(Error::invalid("gamma must be non-negative"));
                }
            }
            _ => {}
        }
        Ok(crit)
    }

    /// Scores that are log marginal likelihoods support the posterior over k.
    pub fn is_likelihood(&self) -> bool {
        matches!(
            self,
            Criterion::ProposedVi { .. } | Criterion::ProposedMcmc { .. } | Criterion::BasicIw
        )
    }

    /// The one-cluster exclusion defaults on for EBIC/AIC and off otherwise.
    pub fn default_excludes_one_cluster(&self) -> bool {
        matches!(self, Criterion::Ebic { .. } | Criterion::Aic)
    }
}

/// Estimator settings shared by the scoring fan-out.
#[derive(Debug, Clone, Default)]
pub struct ScoreConfig {
    pub admm: AdmmConfig,
    pub mcmc: McmcConfig,
    /// Overrides the criterion's default one-cluster exclusion when set.
    pub exclude_one_cluster: Option<bool>,
}

/// Per-candidate score record; serialized as the scoring JSON interface.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreRecord {
    pub clustering: Clustering,
    pub criterion: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_marginal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_g_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_g_blocks: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_std_error: Option<f64>,
    pub converged: bool,
}

/// Selection output: the argmax candidate, all score records, and (for
/// likelihood criteria) the posterior over the number of clusters.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionResult {
    pub criterion: String,
    pub best: Clustering,
    pub scores: Vec<ScoreRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posterior_k: Option<BTreeMap<usize, f64>>,
}

/// Score one candidate under the criterion; higher is better.
pub fn score(
    stats: &SampleStats,
    candidate: &Clustering,
    criterion: &Criterion,
    cfg: &ScoreConfig,
) -> Result<ScoreRecord> {
    score_with_seed_offset(stats, candidate, criterion, cfg, 0)
}

fn score_with_seed_offset(
    stats: &SampleStats,
    candidate: &Clustering,
    criterion: &Criterion,
    cfg: &ScoreConfig,
    seed_offset: u64,
) -> Result<ScoreRecord> {
    if candidate.p() != stats.p {
        return Err(Error::Dimension {
            context: "candidate vs stats",
            expected: stats.p,
            found: candidate.p(),
        });
    }
    let mut record = ScoreRecord {
        clustering: candidate.clone(),
        criterion: criterion.name().into(),
        beta: None,
        gamma: None,
        score: f64::NAN,
        log_marginal: None,
        nu_g_eps: None,
        nu_g_blocks: None,
        mc_std_error: None,
        converged: true,
    };
    match criterion {
        Criterion::ProposedVi { beta } => {
            let hyper = Hyperparams::noninformative(candidate, *beta)?;
            let map = solve_map(stats, candidate, &hyper, &cfg.admm)?;
            let converged = map.converged;
            let fit = variational_from_map(stats, candidate, &hyper, map)?;
            record.beta = Some(*beta);
            record.score = fit.log_marginal;
            record.log_marginal = Some(fit.log_marginal);
            record.nu_g_eps = Some(fit.nu_g_eps);
            record.nu_g_blocks = Some(fit.nu_g_blocks);
            record.converged = converged;
        }
        Criterion::ProposedMcmc { beta } => {
            let hyper = Hyperparams::noninformative(candidate, *beta)?;
            let map = solve_map(stats, candidate, &hyper, &cfg.admm)?;
            let mut mcmc_cfg = cfg.mcmc.clone();
            mcmc_cfg.seed = mcmc_cfg.seed.wrapping_add(seed_offset);
            let est = chib_log_marginal(stats, candidate, &hyper, &map, &mcmc_cfg)?;
            record.beta = Some(*beta);
            record.score = est.log_marginal;
            record.log_marginal = Some(est.log_marginal);
            record.mc_std_error = Some(est.mc_std_error);
            record.converged = map.converged;
        }
        Criterion::BasicIw => {
            let hyper = Hyperparams::noninformative(candidate, 0.0)?;
            let lm = analytic_log_marginal_basic(stats, candidate, &hyper)?;
            record.score = lm;
            record.log_marginal = Some(lm);
        }
        Criterion::Ebic { gamma } => {
            record.gamma = Some(*gamma);
            record.score = ebic_score(stats, candidate, *gamma)?;
        }
        Criterion::Aic => {
            record.score = aic_score(stats, candidate)?;
        }
        Criterion::Chi => {
            let embedding = correlation_embedding(stats);
            record.score = chi_score(stats, candidate, &embedding)?;
        }
    }
    if record.score.is_nan() {
        return Err(Error::EstimateFailed("criterion produced NaN".into()));
    }
    Ok(record)
}

/// Ridge-repaired block-diagonal Gaussian log likelihood shared by EBIC and
/// AIC: Θ̂_j = (S_j + 0.001·I)⁻¹ per block,
/// ℓ = (n/2)(log|Θ̂| − tr(SΘ̂)) − (np/2)log 2π.
fn blockwise_mle_loglik(stats: &SampleStats, candidate: &Clustering) -> Result<f64> {
    let n = stats.n as f64;
    let mut logdet = 0.0;
    let mut trace = 0.0;
    for j in 0..candidate.k() {
        let sj = stats.block_cov(candidate, j)?;
        let pj = sj.nrows();
        let ridged = &sj + DMatrix::identity(pj, pj) * 0.001;
        let theta = spd_inverse(&ridged)?;
        logdet += logdet_spd(&theta)?;
        trace += (&sj * &theta).trace();
    }
    Ok(0.5 * n * (logdet - trace) - 0.5 * n * stats.p as f64 * LN_2PI)
}

/// Within-block edge count |E| = Σ_j p_j(p_j−1)/2.
fn edge_count(candidate: &Clustering) -> usize {
    candidate
        .cluster_sizes()
        .iter()
        .map(|&pj| pj * (pj - 1) / 2)
        .sum()
}

/// Negated EBIC: −(−2ℓ + |E|·log n + 4γ|E|·log p). Higher is better.
pub fn ebic_score(stats: &SampleStats, candidate: &Clustering, gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::invalid("gamma must be non-negative"));
    }
    let ll = blockwise_mle_loglik(stats, candidate)?;
    let e = edge_count(candidate) as f64;
    let n = stats.n as f64;
    let p = stats.p as f64;
    Ok(-(-2.0 * ll + e * n.ln() + 4.0 * gamma * e * p.ln()))
}

/// Negated AIC with df = p diagonals + |E| within-block off-diagonals.
pub fn aic_score(stats: &SampleStats, candidate: &Clustering) -> Result<f64> {
    let ll = blockwise_mle_loglik(stats, candidate)?;
    let df = stats.p as f64 + edge_count(candidate) as f64;
    Ok(-(-2.0 * ll + 2.0 * df))
}

/// Default CH embedding: each variable's correlation profile (its column of
/// the correlation matrix).
pub fn correlation_embedding(stats: &SampleStats) -> DMatrix<f64> {
    let p = stats.p;
    DMatrix::from_fn(p, p, |r, c| {
        let denom = (stats.s[(r, r)] * stats.s[(c, c)]).sqrt();
        if denom > 0.0 {
            stats.s[(r, c)] / denom
        } else {
            0.0
        }
    })
}

/// Calinski-Harabasz index on a variable embedding (rows = variables):
/// (B/(k−1)) / (W/(p−k)). Degenerate cases (k = 1, k = p, or zero within
/// dispersion) score −∞ so they never win selection.
pub fn chi_score(
    stats: &SampleStats,
    candidate: &Clustering,
    embedding: &DMatrix<f64>,
) -> Result<f64> {
    let p = stats.p;
    if embedding.nrows() != p {
        return Err(Error::Dimension {
            context: "embedding rows",
            expected: p,
            found: embedding.nrows(),
        });
    }
    let k = candidate.k();
    if k <= 1 || k >= p {
        return Ok(f64::NEG_INFINITY);
    }
    let dim = embedding.ncols();
    let grand: Vec<f64> = (0..dim)
        .map(|c| (0..p).map(|r| embedding[(r, c)]).sum::<f64>() / p as f64)
        .collect();
    let mut within = 0.0;
    let mut between = 0.0;
    for j in 0..k {
        let members = candidate.members(j);
        let nj = members.len() as f64;
        let centroid: Vec<f64> = (0..dim)
            .map(|c| members.iter().map(|&r| embedding[(r, c)]).sum::<f64>() / nj)
            .collect();
        between += nj
            * centroid
                .iter()
                .zip(&grand)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        for &r in &members {
            within += centroid
                .iter()
                .enumerate()
                .map(|(c, m)| (embedding[(r, c)] - m).powi(2))
                .sum::<f64>();
        }
    }
    if within <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((between / (k as f64 - 1.0)) / (within / (p - k) as f64))
}

/// P(k | 𝒳) ∝ Σ_{𝒞 ∈ 𝒞*_k} p(𝒳 | 𝒞), computed with log-sum-exp. Only valid
/// when the scores are log marginal likelihoods.
pub fn posterior_over_k(records: &[ScoreRecord], criterion: &Criterion) -> Result<BTreeMap<usize, f64>> {
    if !criterion.is_likelihood() {
        return Err(Error::invalid(
            "posterior over k needs log-marginal scores (proposed or basic criteria)",
        ));
    }
    if records.is_empty() {
        return Err(Error::Empty("score records"));
    }
    let max = records
        .iter()
        .map(|r| r.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut by_k: BTreeMap<usize, f64> = BTreeMap::new();
    for r in records {
        *by_k.entry(r.clustering.k()).or_insert(0.0) += (r.score - max).exp();
    }
    let total: f64 = by_k.values().sum();
    for v in by_k.values_mut() {
        *v /= total;
    }
    Ok(by_k)
}

/// Score every candidate (fanned out across workers) and return the records
/// in candidate order.
pub fn score_all(
    stats: &SampleStats,
    candidates: &CandidateSet,
    criterion: &Criterion,
    cfg: &ScoreConfig,
) -> Result<Vec<ScoreRecord>> {
    let results = par_map_indices(candidates.candidates.len(), |i| {
        score_with_seed_offset(
            stats,
            &candidates.candidates[i].clustering,
            criterion,
            cfg,
            i as u64,
        )
    });
    results.into_iter().collect()
}

/// Argmax selection with deterministic tie-breaking (fewer clusters first,
/// then lexicographic canonical labels).
pub fn select(
    stats: &SampleStats,
    candidates: &CandidateSet,
    criterion: &Criterion,
    cfg: &ScoreConfig,
) -> Result<SelectionResult> {
    let exclude_one = cfg
        .exclude_one_cluster
        .unwrap_or_else(|| criterion.default_excludes_one_cluster());
    let records = score_all(stats, candidates, criterion, cfg)?;
    let eligible: Vec<&ScoreRecord> = records
        .iter()
        .filter(|r| !(exclude_one && r.clustering.k() == 1))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Empty("candidate set after exclusions"));
    }
    let best = eligible
        .iter()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.clustering.k().cmp(&b.clustering.k()))
                .then(a.clustering.labels().cmp(b.clustering.labels()))
        })
        .unwrap();
    let posterior_k = if criterion.is_likelihood() {
        let scored: Vec<ScoreRecord> = eligible.iter().map(|r| (*r).clone()).collect();
        Some(posterior_over_k(&scored, criterion)?)
    } else {
        None
    };
    Ok(SelectionResult {
        criterion: criterion.name().into(),
        best: best.clustering.clone(),
        scores: records,
        posterior_k,
    })
}
