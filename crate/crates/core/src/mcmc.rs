//! Chib's-method estimate of the log marginal likelihood.
//!
//! The identity p(𝒳) = p(θ̂, 𝒳) / Πᵢ p(θ̂ᵢ | 𝒳, θ̂_{<i}) is evaluated at the
//! MAP modes with θ₁ = Σ_ε and θ₂…θ_{k+1} = Σ_1…Σ_k. Each posterior ordinate
//! is a ratio of Monte-Carlo averages of Metropolis-Hastings acceptance
//! probabilities: the numerator averages over a reduced MH-within-Gibbs run
//! with θ_{<i} clamped at the modes, the denominator pairs fresh proposal
//! draws with the stage-(i+1) reduced run. The proposals are
//! independence inverse-Wishart kernels centered at the MAP modes with an
//! effective sample size controlled by κ.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{logdet_spd, spd_inverse, sym_eig};
use crate::map::MapSolution;
use crate::model::{submatrix, Clustering, Hyperparams, SampleStats};
use crate::parallel::par_map_indices;
use crate::rng::{task_rng, TaskRng};
use crate::vi::invwishart_logpdf;

const LN_2PI: f64 = 1.8378770664093454836_f64;

/// Sampler controls. `samples` is the retained chain length M;
/// ceil(burn_in_frac·M) extra sweeps are discarded up front.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub samples: usize,
    pub burn_in_frac: f64,
    pub kappa: f64,
    pub seed: u64,
    /// With ≥ 2, extra full-posterior chains are run and the multivariate
    /// potential scale reduction factor is reported.
    pub psrf_chains: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            samples: 10_000,
            burn_in_frac: 0.10,
            kappa: 10.0,
            seed: 0,
            psrf_chains: 1,
        }
    }
}

impl McmcConfig {
    fn validate(&self) -> Result<()> {
        if self.samples < 100 {
            return Err(Error::invalid("MCMC needs at least 100 samples"));
        }
        if !(0.0..1.0).contains(&self.burn_in_frac) {
            return Err(Error::invalid("burn_in_frac must be in [0, 1)"));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::invalid("kappa must be positive"));
        }
        Ok(())
    }
}

/// Chib estimate with per-stage diagnostics. The identity
/// log_marginal = log p(θ̂, 𝒳) − Σᵢ ordinateᵢ holds exactly for the fields.
#[derive(Debug, Clone)]
pub struct ChibEstimate {
    pub log_marginal: f64,
    pub log_joint_at_modes: f64,
    pub per_stage_log_ordinates: Vec<f64>,
    pub acceptance_rates: Vec<f64>,
    pub mc_std_error: f64,
    pub psrf: Option<f64>,
}

/// Draw from InvW(ν, Ψ) by the Bartlett construction: a Wishart(ν, Ψ⁻¹)
/// factor is built from chi-square and normal draws, then inverted.
pub fn sample_invwishart<R: Rng>(nu: f64, psi: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = psi.nrows();
    if nu <= d as f64 - 1.0 {
        return Err(Error::invalid(format!(
            "inverse-Wishart sampling needs nu > dim - 1, got nu = {nu}, dim = {d}"
        )));
    }
    let psi_inv = spd_inverse(psi)?;
    let l = psi_inv.cholesky().ok_or(Error::NotPositiveDefinite {
        context: "inverse-Wishart scale",
    })?;
    let mut bartlett = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi = rand_distr::ChiSquared::new(nu - i as f64)
            .map_err(|e| Error::invalid(format!("chi-squared dof: {e}")))?;
        bartlett[(i, i)] = rand_distr::Distribution::sample(&chi, rng).sqrt();
        for j in 0..i {
            bartlett[(i, j)] = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        }
    }
    // W = (L·A)(L·A)ᵀ ~ Wishart(ν, Ψ⁻¹); Σ = W⁻¹ = F⁻ᵀF⁻¹ with F = L·A.
    let f = l.l() * bartlett;
    let f_inv = f
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or(Error::Degenerate("singular Bartlett factor".into()))?;
    let sigma = f_inv.transpose() * &f_inv;
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Independence proposal qᵢ: an inverse-Wishart whose mode sits at the MAP
/// mode of its coordinate.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub nu: f64,
    pub scale: DMatrix<f64>,
}

impl Proposal {
    /// Stage 1 targets Σ_ε with ν = βκn + ν_ε; stage i ≥ 2 targets block
    /// i−1 with ν = (1−β)κn + ν_{i−1}. Scales are mode·(ν + dim + 1).
    pub fn for_stage(
        stage: usize,
        modes: &[DMatrix<f64>],
        hyper: &Hyperparams,
        kappa: f64,
        n: usize,
    ) -> Self {
        let n = n as f64;
        if stage == 1 {
            let p = modes[0].nrows() as f64;
            let nu = hyper.beta * kappa * n + hyper.nu_eps;
            Proposal {
                nu,
                scale: &modes[0] * (nu + p + 1.0),
            }
        } else {
            let j = stage - 2;
            let pj = modes[stage - 1].nrows() as f64;
            let nu = (1.0 - hyper.beta) * kappa * n + hyper.nu_blocks[j];
            Proposal {
                nu,
                scale: &modes[stage - 1] * (nu + pj + 1.0),
            }
        }
    }

    pub fn logpdf(&self, sigma: &DMatrix<f64>) -> Result<f64> {
        invwishart_logpdf(sigma, self.nu, &self.scale)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<DMatrix<f64>> {
        sample_invwishart(self.nu, &self.scale, rng)
    }
}

/// tr(A·B) for symmetric A, B without forming the product.
fn trace_prod_sym(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for c in 0..a.ncols() {
        for r in 0..a.nrows() {
            acc += a[(r, c)] * b[(r, c)];
        }
    }
    acc
}

/// One coordinate of the chain with its cached inverse and prior density.
struct CoordCache {
    sigma: DMatrix<f64>,
    inv: DMatrix<f64>,
    prior: f64,
}

/// Precomputed pieces for fast joint-density evaluation.
struct EvalContext<'a> {
    stats: &'a SampleStats,
    hyper: &'a Hyperparams,
    members: Vec<Vec<usize>>,
    s_blocks: Vec<DMatrix<f64>>,
    ln_const: f64,
}

impl<'a> EvalContext<'a> {
    fn new(stats: &'a SampleStats, clustering: &Clustering, hyper: &'a Hyperparams) -> Self {
        let members: Vec<Vec<usize>> = (0..clustering.k()).map(|j| clustering.members(j)).collect();
        let s_blocks = members.iter().map(|m| submatrix(&stats.s, m)).collect();
        EvalContext {
            stats,
            hyper,
            members,
            s_blocks,
            ln_const: -0.5 * (stats.n * stats.p) as f64 * LN_2PI,
        }
    }

    /// Coordinate 0 is Σ_ε, coordinate j ≥ 1 is block j−1.
    fn coord_cache(&self, coord: usize, sigma: DMatrix<f64>) -> Result<CoordCache> {
        let inv = spd_inverse(&sigma)?;
        let prior = if coord == 0 {
            invwishart_logpdf(&sigma, self.hyper.nu_eps, self.hyper.scale_eps.as_matrix())?
        } else {
            invwishart_logpdf(
                &sigma,
                self.hyper.nu_blocks[coord - 1],
                self.hyper.scale_blocks[coord - 1].as_matrix(),
            )?
        };
        Ok(CoordCache { sigma, inv, prior })
    }

    /// log p(𝒳, θ) from cached coordinates.
    fn log_joint(&self, coords: &[&CoordCache]) -> Result<f64> {
        let p = self.stats.p;
        let n = self.stats.n as f64;
        let beta = self.hyper.beta;
        let mut precision = if beta > 0.0 {
            &coords[0].inv * beta
        } else {
            DMatrix::zeros(p, p)
        };
        let mut trace = if beta > 0.0 {
            beta * trace_prod_sym(&self.stats.s, &coords[0].inv)
        } else {
            0.0
        };
        for (j, idx) in self.members.iter().enumerate() {
            let inv = &coords[j + 1].inv;
            for (r, &ir) in idx.iter().enumerate() {
                for (c, &ic) in idx.iter().enumerate() {
                    precision[(ir, ic)] += inv[(r, c)];
                }
            }
            trace += trace_prod_sym(&self.s_blocks[j], inv);
        }
        let ld = logdet_spd(&precision)?;
        let mut joint = self.ln_const + 0.5 * n * ld - 0.5 * n * trace;
        for c in coords {
            joint += c.prior;
        }
        Ok(joint)
    }
}

/// MH acceptance probability for replacing coordinate `coord` (0 = Σ_ε,
/// j ≥ 1 = block j−1) while the rest of `state` stays fixed:
///   min{1, p(𝒳, …, θ')·q(θ) / (p(𝒳, …, θ)·q(θ'))},
/// computed in log space and clipped at 1.
pub fn acceptance_prob(
    stats: &SampleStats,
    clustering: &Clustering,
    hyper: &Hyperparams,
    coord: usize,
    current: &DMatrix<f64>,
    proposed: &DMatrix<f64>,
    state: &[DMatrix<f64>],
    proposal: &Proposal,
) -> Result<f64> {
    let ctx = EvalContext::new(stats, clustering, hyper);
    let mut caches = Vec::with_capacity(state.len());
    for (i, sigma) in state.iter().enumerate() {
        let value = if i == coord { current } else { sigma };
        caches.push(ctx.coord_cache(i, value.clone())?);
    }
    let refs: Vec<&CoordCache> = caches.iter().collect();
    let joint_current = ctx.log_joint(&refs)?;
    let cache_prop = ctx.coord_cache(coord, proposed.clone())?;
    let mut refs_prop = refs.clone();
    refs_prop[coord] = &cache_prop;
    let joint_proposed = ctx.log_joint(&refs_prop)?;
    if !joint_current.is_finite() || !joint_proposed.is_finite() {
        return Err(Error::EstimateFailed("non-finite joint density".into()));
    }
    let log_ratio =
        (joint_proposed + proposal.logpdf(current)?) - (joint_current + proposal.logpdf(proposed)?);
    Ok(log_ratio.min(0.0).exp())
}

/// Reduced-run output: M retained states over the free coordinates
/// (stage−1‥k in 0-based coordinates), their cached log joints, and the
/// post-burn-in acceptance rate per free coordinate.
pub struct GibbsChain {
    pub stage: usize,
    pub states: Vec<Vec<DMatrix<f64>>>,
    pub log_joints: Vec<f64>,
    pub acceptance_rates: Vec<f64>,
}

impl GibbsChain {
    /// Lower-triangle vectorization of every retained state.
    pub fn vectorized(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| vectorize_state(s)).collect()
    }
}

/// Concatenated lower triangles (diagonal included) of a parameter state.
pub fn vectorize_state(state: &[DMatrix<f64>]) -> Vec<f64> {
    let mut v = Vec::new();
    for m in state {
        for c in 0..m.ncols() {
            for r in c..m.nrows() {
                v.push(m[(r, c)]);
            }
        }
    }
    v
}

/// Algorithm: for each sweep, refresh coordinates j = stage‥k+1 in order
/// with an independence MH kernel conditioned on everything else (θ_{<stage}
/// clamped at the modes). Starts at the modes.
pub fn mh_within_gibbs(
    stage: usize,
    modes: &[DMatrix<f64>],
    stats: &SampleStats,
    clustering: &Clustering,
    hyper: &Hyperparams,
    cfg: &McmcConfig,
    rng: &mut TaskRng,
) -> Result<GibbsChain> {
    cfg.validate()?;
    let k = clustering.k();
    if stage == 0 || stage > k + 1 {
        return Err(Error::invalid(format!("stage {stage} out of 1..={}", k + 1)));
    }
    if modes.len() != k + 1 {
        return Err(Error::Dimension {
            context: "mode list",
            expected: k + 1,
            found: modes.len(),
        });
    }
    let ctx = EvalContext::new(stats, clustering, hyper);
    let mut coords: Vec<CoordCache> = modes
        .iter()
        .enumerate()
        .map(|(i, m)| ctx.coord_cache(i, m.clone()))
        .collect::<Result<_>>()?;
    let refs: Vec<&CoordCache> = coords.iter().collect();
    let mut joint = ctx.log_joint(&refs)?;

    let free = k + 2 - stage;
    let proposals: Vec<Proposal> = (stage..=k + 1)
        .map(|s| Proposal::for_stage(s, modes, hyper, cfg.kappa, stats.n))
        .collect();

    let burn = (cfg.samples as f64 * cfg.burn_in_frac).ceil() as usize;
    let total = burn + cfg.samples;
    let mut accepts = vec![0usize; free];
    let mut states = Vec::with_capacity(cfg.samples);
    let mut log_joints = Vec::with_capacity(cfg.samples);

    for t in 0..total {
        for ci in 0..free {
            let coord = stage - 1 + ci;
            let prop = &proposals[ci];
            let sigma_new = prop.sample(rng)?;
            let cache_new = ctx.coord_cache(coord, sigma_new)?;
            let old = std::mem::replace(&mut coords[coord], cache_new);
            let refs: Vec<&CoordCache> = coords.iter().collect();
            let joint_new = ctx.log_joint(&refs)?;
            let log_ratio = (joint_new + prop.logpdf(&old.sigma)?)
                - (joint + prop.logpdf(&coords[coord].sigma)?);
            let u: f64 = rng.random();
            if u.ln() < log_ratio {
                joint = joint_new;
                if t >= burn {
                    accepts[ci] += 1;
                }
            } else {
                coords[coord] = old;
            }
        }
        if t >= burn {
            states.push(coords[stage - 1..].iter().map(|c| c.sigma.clone()).collect());
            log_joints.push(joint);
        }
    }

    Ok(GibbsChain {
        stage,
        states,
        log_joints,
        acceptance_rates: accepts
            .iter()
            .map(|&a| a as f64 / cfg.samples as f64)
            .collect(),
    })
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (sum / xs.len() as f64).ln()
}

/// Standard error of log(mean of exp(log_terms)), delta method, computed
/// from log-space accumulations to dodge underflow.
fn se_of_log_mean(log_terms: &[f64]) -> f64 {
    let m = log_terms.len() as f64;
    let lm = log_mean_exp(log_terms);
    if !lm.is_finite() {
        return f64::INFINITY;
    }
    let doubled: Vec<f64> = log_terms.iter().map(|x| 2.0 * x).collect();
    let lm2 = log_mean_exp(&doubled);
    ((lm2 - 2.0 * lm).exp() - 1.0).max(0.0).sqrt() / m.sqrt()
}

/// Chib's marginal-likelihood estimate from the MAP modes.
pub fn chib_log_marginal(
    stats: &SampleStats,
    clustering: &Clustering,
    hyper: &Hyperparams,
    map: &MapSolution,
    cfg: &McmcConfig,
) -> Result<ChibEstimate> {
    cfg.validate()?;
    let k = clustering.k();
    let mut modes = Vec::with_capacity(k + 1);
    modes.push(map.sigma_eps()?);
    modes.extend(map.sigma_blocks()?);

    let ctx = EvalContext::new(stats, clustering, hyper);
    let mode_caches: Vec<CoordCache> = modes
        .iter()
        .enumerate()
        .map(|(i, m)| ctx.coord_cache(i, m.clone()))
        .collect::<Result<_>>()?;
    let mode_refs: Vec<&CoordCache> = mode_caches.iter().collect();
    let log_joint_at_modes = ctx.log_joint(&mode_refs)?;

    // Reduced runs are independent given the modes; run every stage (plus
    // any extra diagnostic chains) concurrently on its own RNG stream.
    let chain_results = par_map_indices(k + 1, |s| {
        let mut rng = task_rng(cfg.seed, (s + 1) as u64);
        mh_within_gibbs(s + 1, &modes, stats, clustering, hyper, cfg, &mut rng)
    });
    let mut chains = Vec::with_capacity(k + 1);
    for c in chain_results {
        chains.push(c?);
    }

    let psrf = if cfg.psrf_chains >= 2 {
        let extras = par_map_indices(cfg.psrf_chains - 1, |c| {
            let mut rng = task_rng(cfg.seed, 1_000 + c as u64);
            mh_within_gibbs(1, &modes, stats, clustering, hyper, cfg, &mut rng)
        });
        let mut vec_chains = vec![chains[0].vectorized()];
        for e in extras {
            vec_chains.push(e?.vectorized());
        }
        Some(gelman_rubin_mpsrf(&vec_chains)?)
    } else {
        None
    };

    let proposals: Vec<Proposal> = (1..=k + 1)
        .map(|s| Proposal::for_stage(s, &modes, hyper, cfg.kappa, stats.n))
        .collect();

    let mut ordinates = Vec::with_capacity(k + 1);
    let mut se_sq = 0.0;
    for stage in 1..=k + 1 {
        let coord = stage - 1;
        let prop = &proposals[coord];
        let log_q_at_mode = prop.logpdf(&modes[coord])?;

        // Numerator: acceptance of moving from the chain state to the mode.
        let chain = &chains[coord];
        let mut log_alpha_num = Vec::with_capacity(chain.states.len());
        for (state, &joint_state) in chain.states.iter().zip(&chain.log_joints) {
            let mut caches = Vec::with_capacity(state.len());
            for (off, sigma) in state.iter().enumerate() {
                caches.push(ctx.coord_cache(coord + off, sigma.clone())?);
            }
            let mut refs: Vec<&CoordCache> = mode_refs.clone();
            for (off, cache) in caches.iter().enumerate() {
                refs[coord + off] = cache;
            }
            refs[coord] = &mode_caches[coord];
            let joint_mode = ctx.log_joint(&refs)?;
            let log_ratio =
                (joint_mode + prop.logpdf(&state[0])?) - (joint_state + log_q_at_mode);
            log_alpha_num.push(log_ratio.min(0.0));
        }

        // Denominator: acceptance of leaving the mode toward a proposal
        // draw, with the trailing coordinates from the stage-(i+1) run.
        let mut rng = task_rng(cfg.seed, 2_000 + stage as u64);
        let m_draws = chain.states.len();
        let mut log_alpha_den = Vec::with_capacity(m_draws);
        for m in 0..m_draws {
            let draw = prop.sample(&mut rng)?;
            let cache_draw = ctx.coord_cache(coord, draw)?;
            let (joint_cond, trailing): (f64, Vec<CoordCache>) = if stage == k + 1 {
                (log_joint_at_modes, Vec::new())
            } else {
                let next = &chains[coord + 1];
                let state = &next.states[m];
                let mut caches = Vec::with_capacity(state.len());
                for (off, sigma) in state.iter().enumerate() {
                    caches.push(ctx.coord_cache(coord + 1 + off, sigma.clone())?);
                }
                (next.log_joints[m], caches)
            };
            let mut refs: Vec<&CoordCache> = mode_refs.clone();
            for (off, cache) in trailing.iter().enumerate() {
                refs[coord + 1 + off] = cache;
            }
            refs[coord] = &cache_draw;
            let joint_prop = ctx.log_joint(&refs)?;
            let log_ratio =
                (joint_prop + log_q_at_mode) - (joint_cond + prop.logpdf(&cache_draw.sigma)?);
            log_alpha_den.push(log_ratio.min(0.0));
        }

        let log_num = log_mean_exp(&log_alpha_num);
        let log_den = log_mean_exp(&log_alpha_den);
        if !log_den.is_finite() || !log_num.is_finite() {
            return Err(Error::EstimateFailed(format!(
                "stage {stage} ordinate average vanished; raise kappa to widen the proposal"
            )));
        }
        ordinates.push(log_q_at_mode + log_num - log_den);
        se_sq += se_of_log_mean(&log_alpha_num).powi(2) + se_of_log_mean(&log_alpha_den).powi(2);
    }

    let log_marginal = log_joint_at_modes - ordinates.iter().sum::<f64>();
    Ok(ChibEstimate {
        log_marginal,
        log_joint_at_modes,
        per_stage_log_ordinates: ordinates,
        acceptance_rates: chains
            .iter()
            .map(|c| c.acceptance_rates.iter().sum::<f64>() / c.acceptance_rates.len() as f64)
            .collect(),
        mc_std_error: se_sq.sqrt(),
        psrf,
    })
}

/// Multivariate potential scale reduction factor over ≥ 2 equal-length
/// chains of vectorized parameters:
///   R = sqrt((n−1)/n + (m+1)/m · λ₁(W⁻¹ B/n)).
pub fn gelman_rubin_mpsrf(chains: &[Vec<Vec<f64>>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::invalid("PSRF needs at least 2 chains"));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 10 {
        return Err(Error::invalid("PSRF needs chains of length >= 10"));
    }
    let d = chains[0][0].len();
    if chains.iter().any(|c| c.iter().any(|s| s.len() != d)) {
        return Err(Error::Dimension {
            context: "chain state dimension",
            expected: d,
            found: 0,
        });
    }

    let mut means = Vec::with_capacity(m);
    for chain in chains {
        let mut mean = vec![0.0; d];
        for state in chain.iter().take(n) {
            for (a, b) in mean.iter_mut().zip(state) {
                *a += b;
            }
        }
        for a in &mut mean {
            *a /= n as f64;
        }
        means.push(mean);
    }

    let mut within = DMatrix::<f64>::zeros(d, d);
    for (chain, mean) in chains.iter().zip(&means) {
        for state in chain.iter().take(n) {
            for r in 0..d {
                let dr = state[r] - mean[r];
                for c in 0..=r {
                    within[(r, c)] += dr * (state[c] - mean[c]);
                }
            }
        }
    }
    for r in 0..d {
        for c in 0..=r {
            within[(r, c)] /= (m * (n - 1)) as f64;
            within[(c, r)] = within[(r, c)];
        }
    }

    let grand: Vec<f64> = (0..d)
        .map(|i| means.iter().map(|mu| mu[i]).sum::<f64>() / m as f64)
        .collect();
    let mut between_over_n = DMatrix::<f64>::zeros(d, d);
    for mean in &means {
        for r in 0..d {
            let dr = mean[r] - grand[r];
            for c in 0..=r {
                between_over_n[(r, c)] += dr * (mean[c] - grand[c]);
            }
        }
    }
    for r in 0..d {
        for c in 0..=r {
            between_over_n[(r, c)] /= (m - 1) as f64;
            between_over_n[(c, r)] = between_over_n[(r, c)];
        }
    }

    // W can be rank-deficient when a sticky coordinate barely moves; work
    // on its positive eigenspace. Between-chain mass outside that subspace
    // means the chains disagree in a direction with no within variance,
    // which is an infinite scale-reduction factor, not an error.
    let w_eig = sym_eig(&within)?;
    let w_max = w_eig.eigenvalues[d - 1];
    if w_max <= 0.0 {
        return Err(Error::Degenerate(
            "zero-variance chains: within-chain covariance vanishes".into(),
        ));
    }
    let threshold = w_max * 1e-12;
    let kept: Vec<usize> = (0..d).filter(|&i| w_eig.eigenvalues[i] > threshold).collect();
    let b_total = between_over_n.trace();
    let rotated = w_eig.eigenvectors.transpose() * &between_over_n * &w_eig.eigenvectors;
    let mut projected = DMatrix::<f64>::zeros(kept.len(), kept.len());
    let mut b_inside = 0.0;
    for (a_i, &ei) in kept.iter().enumerate() {
        for (a_j, &ej) in kept.iter().enumerate() {
            let value = rotated[(ei, ej)];
            if a_i == a_j {
                b_inside += value;
            }
            projected[(a_i, a_j)] =
                value / (w_eig.eigenvalues[ei].sqrt() * w_eig.eigenvalues[ej].sqrt());
        }
    }
    if kept.len() < d && b_total > b_inside + threshold.max(1e-12) * d as f64 {
        return Ok(f64::INFINITY);
    }
    let sym = (&projected + projected.transpose()) * 0.5;
    let lambda_max = sym_eig(&sym)?.eigenvalues[kept.len() - 1].max(0.0);

    let n = n as f64;
    let m = m as f64;
    Ok(((n - 1.0) / n + (m + 1.0) / m * lambda_max).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_spd;
    use crate::map::{solve_map, AdmmConfig};
    use crate::vi::{analytic_log_marginal_basic, log_joint};
    use nalgebra::DMatrix;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 1, &[v])
    }

    #[test]
    fn invwishart_scalar_mean() {
        let (nu, psi) = (10.0, 8.0);
        let mut rng = task_rng(21, 0);
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            let x = sample_invwishart(nu, &scalar(psi), &mut rng).unwrap()[(0, 0)];
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64 - mean * mean;
        let se = (var / draws as f64).sqrt();
        let want = psi / (nu - 2.0);
        assert!((mean - want).abs() <= 3.0 * se, "mean {mean} vs {want} (se {se})");
    }

    #[test]
    fn invwishart_draws_are_spd() {
        let mut rng = task_rng(22, 0);
        let psi = random_spd(4, 1.0, &mut rng);
        for _ in 0..200 {
            let s = sample_invwishart(7.5, &psi, &mut rng).unwrap();
            assert!(s.clone().cholesky().is_some());
        }
    }

    #[test]
    fn invwishart_scalar_mode_from_histogram() {
        let (nu, psi) = (10.0, 8.0);
        let mut rng = task_rng(23, 0);
        let draws = 100_000;
        let lo = 0.0;
        let hi = 3.0;
        let bins = 60;
        let mut hist = vec![0usize; bins];
        for _ in 0..draws {
            let x = sample_invwishart(nu, &scalar(psi), &mut rng).unwrap()[(0, 0)];
            if x > lo && x < hi {
                hist[((x - lo) / (hi - lo) * bins as f64) as usize] += 1;
            }
        }
        let best = hist.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0;
        let center = lo + (best as f64 + 0.5) * (hi - lo) / bins as f64;
        let mode = psi / (nu + 2.0);
        assert!((center - mode).abs() < 0.15, "histogram mode {center} vs {mode}");
    }

    fn small_problem(
        p: usize,
        n: usize,
        labels: &[usize],
        beta: f64,
        seed: u64,
    ) -> (SampleStats, Clustering, Hyperparams, MapSolution) {
        let mut rng = task_rng(seed, 3);
        let stats = SampleStats::new(n, random_spd(p, 0.8, &mut rng)).unwrap();
        let c = Clustering::canonicalize(labels).unwrap();
        let hyper = Hyperparams::noninformative(&c, beta).unwrap();
        let map = solve_map(&stats, &c, &hyper, &AdmmConfig::default().with_tolerances(1e-9))
            .unwrap();
        (stats, c, hyper, map)
    }

    #[test]
    fn fast_joint_matches_reference_formula() {
        let (stats, c, hyper, map) = small_problem(5, 40, &[0, 1, 0, 1, 1], 0.03, 24);
        let modes: Vec<DMatrix<f64>> = std::iter::once(map.sigma_eps().unwrap())
            .chain(map.sigma_blocks().unwrap())
            .collect();
        let ctx = EvalContext::new(&stats, &c, &hyper);
        let caches: Vec<CoordCache> = modes
            .iter()
            .enumerate()
            .map(|(i, m)| ctx.coord_cache(i, m.clone()).unwrap())
            .collect();
        let refs: Vec<&CoordCache> = caches.iter().collect();
        let fast = ctx.log_joint(&refs).unwrap();
        let slow = log_joint(&stats, &c, &hyper, &modes[0], &modes[1..]).unwrap();
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn acceptance_prob_trivial_cases() {
        let (stats, c, hyper, map) = small_problem(4, 30, &[0, 0, 1, 1], 0.02, 25);
        let modes: Vec<DMatrix<f64>> = std::iter::once(map.sigma_eps().unwrap())
            .chain(map.sigma_blocks().unwrap())
            .collect();
        let prop = Proposal::for_stage(2, &modes, &hyper, 10.0, stats.n);
        // proposed == current -> ratio 1
        let a = acceptance_prob(
            &stats, &c, &hyper, 1, &modes[1], &modes[1], &modes, &prop,
        )
        .unwrap();
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn acceptance_prob_detailed_balance() {
        let (stats, c, hyper, map) = small_problem(4, 30, &[0, 0, 1, 1], 0.02, 26);
        let modes: Vec<DMatrix<f64>> = std::iter::once(map.sigma_eps().unwrap())
            .chain(map.sigma_blocks().unwrap())
            .collect();
        let prop = Proposal::for_stage(2, &modes, &hyper, 5.0, stats.n);
        let mut rng = task_rng(26, 7);
        let theta = prop.sample(&mut rng).unwrap();
        let theta2 = prop.sample(&mut rng).unwrap();

        let fwd = acceptance_prob(&stats, &c, &hyper, 1, &theta, &theta2, &modes, &prop).unwrap();
        let rev = acceptance_prob(&stats, &c, &hyper, 1, &theta2, &theta, &modes, &prop).unwrap();

        let joint_at = |value: &DMatrix<f64>| {
            let mut state = modes.clone();
            state[1] = value.clone();
            log_joint(&stats, &c, &hyper, &state[0], &state[1..]).unwrap()
        };
        // alpha(t -> t') p(t) q(t') = alpha(t' -> t) p(t') q(t)
        let lhs = fwd.ln() + joint_at(&theta) + prop.logpdf(&theta2).unwrap();
        let rhs = rev.ln() + joint_at(&theta2) + prop.logpdf(&theta).unwrap();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn conjugate_proposal_always_accepts_at_beta_zero() {
        let (stats, c, hyper, map) = small_problem(4, 50, &[0, 0, 1, 1], 0.0, 27);
        let modes: Vec<DMatrix<f64>> = std::iter::once(map.sigma_eps().unwrap())
            .chain(map.sigma_blocks().unwrap())
            .collect();
        let cfg = McmcConfig {
            samples: 400,
            kappa: 1.0,
            seed: 27,
            ..McmcConfig::default()
        };
        let mut rng = task_rng(27, 1);
        let chain = mh_within_gibbs(2, &modes, &stats, &c, &hyper, &cfg, &mut rng).unwrap();
        for rate in &chain.acceptance_rates {
            assert!(*rate > 0.999, "rate {rate}");
        }
    }

    #[test]
    fn chain_marginal_matches_conjugate_posterior_quantiles() {
        // scalar block at beta = 0: conditional posterior is
        // InvGamma((nu_j + n)/2, (scale_j0 + n S_j)/2); KS test at p > 0.01
        let (stats, c, hyper, map) = small_problem(3, 40, &[0, 0, 1], 0.0, 28);
        let modes: Vec<DMatrix<f64>> = std::iter::once(map.sigma_eps().unwrap())
            .chain(map.sigma_blocks().unwrap())
            .collect();
        let cfg = McmcConfig {
            samples: 4_000,
            kappa: 1.0,
            seed: 28,
            ..McmcConfig::default()
        };
        let mut rng = task_rng(28, 1);
        // stage 3 = scalar block 1
        let chain = mh_within_gibbs(3, &modes, &stats, &c, &hyper, &cfg, &mut rng).unwrap();
        let mut draws: Vec<f64> = chain.states.iter().map(|s| s[0][(0, 0)]).collect();
        draws.sort_by(f64::total_cmp);

        let n = stats.n as f64;
        let sj = stats.block_cov(&c, 1).unwrap()[(0, 0)];
        let alpha = 0.5 * (hyper.nu_blocks[1] + n);
        let rate = 0.5 * (1.0 + n * sj);
        let cdf = |x: f64| 1.0 - statrs::function::gamma::gamma_lr(alpha, rate / x);

        let m = draws.len() as f64;
        let mut d_stat: f64 = 0.0;
        for (i, x) in draws.iter().enumerate() {
            let f = cdf(*x);
            d_stat = d_stat.max((f - i as f64 / m).abs());
            d_stat = d_stat.max(((i + 1) as f64 / m - f).abs());
        }
        // K-S rejection threshold at alpha = 0.01 is 1.628/sqrt(M)
        assert!(
            d_stat * m.sqrt() < 1.628,
            "KS statistic {d_stat} too large for M {m}"
        );
    }

    #[test]
    fn chib_matches_analytic_at_beta_zero() {
        let (stats, c, hyper, map) = small_problem(4, 60, &[0, 1, 0, 1], 0.0, 29);
        let cfg = McmcConfig {
            samples: 2_000,
            kappa: 1.0,
            seed: 29,
            ..McmcConfig::default()
        };
        let est = chib_log_marginal(&stats, &c, &hyper, &map, &cfg).unwrap();
        let exact = analytic_log_marginal_basic(&stats, &c, &hyper).unwrap();
        let tol = (3.0 * est.mc_std_error).max(1e-6);
        assert!(
            (est.log_marginal - exact).abs() <= tol,
            "chib {} vs analytic {exact} (tol {tol})",
            est.log_marginal
        );
    }

    #[test]
    fn chib_identity_and_seed_determinism() {
        let (stats, c, hyper, map) = small_problem(4, 30, &[0, 0, 1, 1], 0.02, 30);
        let cfg = McmcConfig {
            samples: 300,
            seed: 30,
            ..McmcConfig::default()
        };
        let a = chib_log_marginal(&stats, &c, &hyper, &map, &cfg).unwrap();
        let b = chib_log_marginal(&stats, &c, &hyper, &map, &cfg).unwrap();
        assert_eq!(a.log_marginal.to_bits(), b.log_marginal.to_bits());

        let reassembled =
            a.log_joint_at_modes - a.per_stage_log_ordinates.iter().sum::<f64>();
        assert_eq!(a.log_marginal.to_bits(), reassembled.to_bits());
        for r in &a.acceptance_rates {
            assert!((0.0..=1.0).contains(r));
        }
    }

    #[test]
    fn chib_error_std_shrinks_with_samples() {
        // beta = 0 with kappa = 2: conditionals are clean conjugates (fast
        // mixing) while the mismatched proposal still exercises real MH
        // dynamics, so the estimator noise is honest Monte Carlo ~1/sqrt(M).
        let (stats, c, hyper, map) = small_problem(6, 40, &[0, 0, 1, 1, 2, 2], 0.0, 31);
        let mut sds = Vec::new();
        for m in [1_000usize, 4_000, 16_000] {
            let estimates: Vec<f64> = (0..8)
                .map(|s| {
                    let cfg = McmcConfig {
                        samples: m,
                        kappa: 2.0,
                        seed: 9_000 + s,
                        ..McmcConfig::default()
                    };
                    chib_log_marginal(&stats, &c, &hyper, &map, &cfg)
                        .unwrap()
                        .log_marginal
                })
                .collect();
            let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
            let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
                / (estimates.len() - 1) as f64;
            sds.push(var.sqrt());
        }
        // 16x more samples should shrink the spread roughly 4x; allow slack
        assert!(sds[2] < sds[0] / 2.0, "sd did not shrink: {sds:?}");
    }

    /// p = 1 ground truth for beta > 0 by 2-D quadrature over
    /// (sigma_1, sigma_eps) in log coordinates.
    fn quadrature_log_marginal(n: usize, s: f64, beta: f64, nu1: f64, nue: f64) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let prior = |sig: f64, nu: f64| {
            -0.5 * nu * std::f64::consts::LN_2 - statrs::function::gamma::ln_gamma(0.5 * nu)
                - (0.5 * (nu + 2.0)) * sig.ln()
                - 0.5 / sig
        };
        let joint = |sig1: f64, sige: f64| {
            let a = 1.0 / sig1 + beta / sige;
            -0.5 * n as f64 * ln2pi + 0.5 * n as f64 * a.ln() - 0.5 * n as f64 * s * a
                + prior(sig1, nu1)
                + prior(sige, nue)
        };
        let steps = 2_000;
        let (lo, hi) = (-14.0, 10.0);
        let h = (hi - lo) / steps as f64;
        let mut terms = Vec::with_capacity(steps * steps);
        for i in 0..steps {
            let u1 = lo + (i as f64 + 0.5) * h;
            for j in 0..steps {
                let ue = lo + (j as f64 + 0.5) * h;
                terms.push(joint(u1.exp(), ue.exp()) + u1 + ue);
            }
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t - m).exp()).sum();
        m + sum.ln() + 2.0 * h.ln()
    }

    #[test]
    fn chib_matches_quadrature_at_positive_beta() {
        let n = 20;
        let s_val = 1.7;
        let beta = 0.3;
        let stats = SampleStats::new(n, scalar(s_val)).unwrap();
        let c = Clustering::single_cluster(1);
        let hyper = Hyperparams::noninformative(&c, beta).unwrap();
        let exact = quadrature_log_marginal(n, s_val, beta, hyper.nu_blocks[0], hyper.nu_eps);

        let map = solve_map(&stats, &c, &hyper, &AdmmConfig::default().with_tolerances(1e-10))
            .unwrap();
        let cfg = McmcConfig {
            samples: 8_000,
            kappa: 1.0,
            seed: 50,
            ..McmcConfig::default()
        };
        let est = chib_log_marginal(&stats, &c, &hyper, &map, &cfg).unwrap();
        assert!(
            (est.log_marginal - exact).abs() < 0.6,
            "chib {} vs quadrature {exact}",
            est.log_marginal
        );

        // the variational mode-ratio estimate should land close too
        let vi = crate::vi::variational_log_marginal(
            &stats,
            &c,
            &hyper,
            &AdmmConfig::default().with_tolerances(1e-10),
        )
        .unwrap();
        assert!(
            (vi.log_marginal - exact).abs() < 0.5,
            "vi {} vs quadrature {exact}",
            vi.log_marginal
        );
    }

    #[test]
    fn psrf_identical_iid_chains_near_one() {
        let mut rng = task_rng(32, 0);
        let chain: Vec<Vec<f64>> = (0..1_000)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
                    })
                    .collect()
            })
            .collect();
        let r = gelman_rubin_mpsrf(&[chain.clone(), chain]).unwrap();
        assert!((r - 1.0).abs() < 0.05, "psrf {r}");
    }

    fn normal_chain(
        len: usize,
        shift: f64,
        rng: &mut crate::rng::TaskRng,
    ) -> Vec<Vec<f64>> {
        (0..len)
            .map(|_| {
                let z: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                vec![shift + z]
            })
            .collect()
    }

    #[test]
    fn psrf_detects_disjoint_means() {
        let mut rng = task_rng(33, 0);
        let a = normal_chain(500, 0.0, &mut rng);
        let b = normal_chain(500, 10.0, &mut rng);
        let r = gelman_rubin_mpsrf(&[a, b]).unwrap();
        assert!(r > 3.0, "psrf {r}");
    }

    #[test]
    fn psrf_scalar_reduces_to_univariate_formula() {
        let mut rng = task_rng(34, 0);
        let mk = |shift: f64, rng: &mut crate::rng::TaskRng| normal_chain(200, shift, rng);
        let chains = [mk(0.0, &mut rng), mk(0.4, &mut rng), mk(-0.2, &mut rng)];
        let got = gelman_rubin_mpsrf(&chains).unwrap();

        let n = 200.0;
        let m = 3.0;
        let means: Vec<f64> = chains
            .iter()
            .map(|c| c.iter().map(|s| s[0]).sum::<f64>() / n)
            .collect();
        let grand = means.iter().sum::<f64>() / m;
        let w = chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| c.iter().map(|s| (s[0] - mu).powi(2)).sum::<f64>() / (n - 1.0))
            .sum::<f64>()
            / m;
        let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
        let want = ((n - 1.0) / n + (m + 1.0) / m * b_over_n / w).sqrt();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn psrf_rejects_degenerate_chains() {
        let flat = vec![vec![1.0]; 50];
        assert!(gelman_rubin_mpsrf(&[flat.clone(), flat]).is_err());
    }

    #[test]
    fn vectorize_lower_triangles() {
        let m1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        let m2 = DMatrix::from_row_slice(1, 1, &[9.0]);
        assert_eq!(vectorize_state(&[m1, m2]), vec![1.0, 2.0, 3.0, 9.0]);
    }
}
