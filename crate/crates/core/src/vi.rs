//! Log marginal likelihood of a clustering: the analytic conjugate form at
//! β = 0 and the variational mode-ratio estimate for β > 0.
//!
//! The variational estimate is log p(θ̂, 𝒳) − log g(θ̂) where θ̂ is the MAP
//! and g is a product of inverse-Wishart factors whose scale matrices are
//! tied to the MAP modes, Σ_g = (ν_g + d + 1)·Σ̂, so each factor keeps its
//! mode at Σ̂. The remaining degrees of freedom ν_g minimize the
//! KL-divergence to the (approximate) posterior; each is a one-dimensional
//! problem solved by Brent's method.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{logdet_and_inverse, logdet_spd, spd_inverse};
use crate::map::{embed_blocks, solve_map, AdmmConfig, MapSolution};
use crate::model::{Clustering, Hyperparams, SampleStats};

const LN_PI: f64 = 1.1447298858494001741_f64;
const LN_2: f64 = std::f64::consts::LN_2;
const LN_2PI: f64 = 1.8378770664093454836_f64;

/// log Γ_p(a), the multivariate gamma, as the standard product of ordinary
/// log-gammas: p(p−1)/4·log π + Σᵢ log Γ(a + (1−i)/2).
pub fn multigamma_log(p: usize, a: f64) -> Result<f64> {
    if a <= (p as f64 - 1.0) / 2.0 {
        return Err(Error::invalid(format!(
            "multivariate gamma needs a > (p-1)/2, got a = {a}, p = {p}"
        )));
    }
    let mut acc = (p * (p - 1)) as f64 / 4.0 * LN_PI;
    for i in 1..=p {
        acc += statrs::function::gamma::ln_gamma(a + (1.0 - i as f64) / 2.0);
    }
    Ok(acc)
}

/// Digamma ψ(a); errors at the poles.
pub fn digamma(a: f64) -> Result<f64> {
    let v = statrs::function::gamma::digamma(a);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid(format!("digamma pole at {a}")))
    }
}

/// Trigamma ψ'(x) by the shift recurrence plus the asymptotic series.
fn trigamma(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NAN;
    }
    let mut acc = 0.0;
    let mut y = x;
    while y < 8.0 {
        acc += 1.0 / (y * y);
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    // 1/y + 1/(2y^2) + 1/(6y^3) - 1/(30y^5) + 1/(42y^7) - 1/(30y^9)
    acc + inv * (1.0 + inv * (0.5 + inv * (1.0 / 6.0 + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 - inv2 / 30.0)))))
}

/// Inverse-Wishart log density at `sigma` with degrees of freedom `nu` and
/// scale `psi`:
///   (ν/2)log|Ψ| − (νd/2)log 2 − log Γ_d(ν/2) − ((ν+d+1)/2)log|Σ| − tr(ΨΣ⁻¹)/2.
pub fn invwishart_logpdf(sigma: &DMatrix<f64>, nu: f64, psi: &DMatrix<f64>) -> Result<f64> {
    let d = sigma.nrows();
    if psi.nrows() != d {
        return Err(Error::Dimension {
            context: "inverse-Wishart scale",
            expected: d,
            found: psi.nrows(),
        });
    }
    if nu <= d as f64 - 1.0 {
        return Err(Error::invalid(format!(
            "inverse-Wishart needs nu > dim - 1, got nu = {nu}, dim = {d}"
        )));
    }
    let (logdet_sigma, sigma_inv) = logdet_and_inverse(sigma)?;
    let logdet_psi = logdet_spd(psi)?;
    let trace = (psi * &sigma_inv).trace();
    Ok(0.5 * nu * logdet_psi
        - 0.5 * nu * d as f64 * LN_2
        - multigamma_log(d, 0.5 * nu)?
        - 0.5 * (nu + d as f64 + 1.0) * logdet_sigma
        - 0.5 * trace)
}

/// Gaussian log likelihood of the n samples summarized by `stats`, under a
/// zero-mean normal with the given precision matrix:
///   −(np/2)log 2π + (n/2)log|A| − (n/2)tr(SA).
pub fn gaussian_loglik_precision(stats: &SampleStats, precision: &DMatrix<f64>) -> Result<f64> {
    let n = stats.n as f64;
    let p = stats.p as f64;
    let ld = logdet_spd(precision)?;
    Ok(-0.5 * n * p * LN_2PI + 0.5 * n * ld - 0.5 * n * (&stats.s * precision).trace())
}

/// Log joint density p(θ, 𝒳) of the proposed model at covariance values
/// (Σ_ε, Σ_1…Σ_k): Gaussian likelihood at precision Σ⁻¹ + βΣ_ε⁻¹ plus the
/// inverse-Wishart prior densities.
pub fn log_joint(
    stats: &SampleStats,
    clustering: &Clustering,
    hyper: &Hyperparams,
    sigma_eps: &DMatrix<f64>,
    sigma_blocks: &[DMatrix<f64>],
) -> Result<f64> {
    let x_blocks: Vec<DMatrix<f64>> = sigma_blocks
        .iter()
        .map(|s| spd_inverse(s))
        .collect::<Result<_>>()?;
    let x = embed_blocks(&x_blocks, clustering);
    let precision = &x + spd_inverse(sigma_eps)? * hyper.beta;
    let mut total = gaussian_loglik_precision(stats, &precision)?;
    total += invwishart_logpdf(sigma_eps, hyper.nu_eps, hyper.scale_eps.as_matrix())?;
    for (j, sj) in sigma_blocks.iter().enumerate() {
        total += invwishart_logpdf(sj, hyper.nu_blocks[j], hyper.scale_blocks[j].as_matrix())?;
    }
    Ok(total)
}

/// Closed-form log marginal likelihood of the basic conjugate model (β is
/// ignored), summed over the independent blocks:
///   Σ_j −(n·p_j/2)log π + log Γ_{p_j}((ν_j+n)/2) − log Γ_{p_j}(ν_j/2)
///       + (ν_j/2)log|Σ_j0| − ((ν_j+n)/2)log|Σ_j0 + nS_j|.
pub fn analytic_log_marginal_basic(
    stats: &SampleStats,
    clustering: &Clustering,
    hyper: &Hyperparams,
) -> Result<f64> {
    let n = stats.n as f64;
    let mut total = 0.0;
    for j in 0..clustering.k() {
        let sj = stats.block_cov(clustering, j)?;
        let pj = sj.nrows();
        let nu = hyper.nu_blocks[j];
        let psi = hyper.scale_blocks[j].as_matrix();
        let posterior_scale = psi + &sj * n;
        total += -0.5 * n * pj as f64 * LN_PI + multigamma_log(pj, 0.5 * (nu + n))?
            - multigamma_log(pj, 0.5 * nu)?
            + 0.5 * nu * logdet_spd(psi)?
            - 0.5 * (nu + n) * logdet_spd(&posterior_scale)?;
    }
    Ok(total)
}

/// Bounded 1-D minimization by Brent's method (golden section with
/// parabolic interpolation). Non-finite objective values are treated as +∞.
pub(crate) fn brent_min<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    xatol: f64,
    maxiter: usize,
) -> Result<(f64, f64)> {
    let eval = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    // bracket sanity: the objective must be finite somewhere
    let probes = 17;
    if !(0..=probes)
        .map(|i| eval(lo + (hi - lo) * i as f64 / probes as f64))
        .any(|v| v.is_finite())
    {
        return Err(Error::Degenerate(
            "objective non-finite over the whole bracket".into(),
        ));
    }

    let golden = 0.381_966_011_250_105_1_f64;
    let sqrt_eps = f64::EPSILON.sqrt();
    let (mut a, mut b) = (lo, hi);
    let mut x = a + golden * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = eval(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..maxiter {
        let m = 0.5 * (a + b);
        let tol1 = sqrt_eps * x.abs() + xatol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden_step = true;
        if e.abs() > tol1 {
            // try a parabolic fit through (v, w, x)
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if (u - a) < tol2 || (b - u) < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden_step = false;
            }
        }
        if golden_step {
            e = if x < m { b - x } else { a - x };
            d = golden * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d >= 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = eval(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }

    // the minimizer must not lose to the bracket endpoints
    for cand in [lo, hi] {
        let fc = eval(cand);
        if fc < fx {
            x = cand;
            fx = fc;
        }
    }
    if !fx.is_finite() {
        return Err(Error::Degenerate("minimization found no finite value".into()));
    }
    Ok((x, fx))
}

fn nu_bracket(dim: usize, nu_prior: f64, n: usize) -> (f64, f64) {
    let lo = dim as f64 - 1.0 + 1e-3;
    let hi = nu_prior + n as f64 + 10.0 * dim as f64;
    (lo, hi)
}

/// Derivative of [`nu_objective`] in ν_g. The digamma sums from the
/// multivariate-gamma and product-rule terms cancel, leaving
///   T(d+1)/(ν+d+1)² − d + d·ν_t/(ν+d+1) + (ν−ν_t)/2 · Σᵢ ψ'((ν−d+i)/2).
fn nu_objective_deriv(dim: usize, nu_target: f64, trace_term: f64, nu_g: f64) -> f64 {
    let d = dim as f64;
    let mut tri_sum = 0.0;
    for i in 1..=dim {
        tri_sum += trigamma(0.5 * (nu_g - d + i as f64));
    }
    trace_term * (d + 1.0) / (nu_g + d + 1.0).powi(2) - d + d * nu_target / (nu_g + d + 1.0)
        + 0.5 * (nu_g - nu_target) * tri_sum
}

/// Bracketed minimization of a ν objective. The initial bracket is extended
/// upward whenever the minimizer lands on its end (for β > 0 the KL
/// minimizer can sit well above ν_prior + n). Brent localizes the minimum
/// only to the √ε·|x| floor of value comparisons, so the result is refined
/// by bisecting the analytic derivative to full precision.
fn minimize_nu<F: Fn(f64) -> f64>(
    f: F,
    deriv: impl Fn(f64) -> f64,
    lo: f64,
    mut hi: f64,
) -> Result<f64> {
    let mut x;
    loop {
        let (found, _) = brent_min(&f, lo, hi, 1e-9, 500)?;
        x = found;
        if hi - x > 1e-2 * (hi - lo) || hi > 1e12 {
            break;
        }
        hi = lo + 2.0 * (hi - lo);
    }
    // root-polish on the derivative around the Brent point
    let mut a = (x - 1.0).max(lo);
    let mut b = (x + 1.0).min(hi);
    let (mut ga, mut gb) = (deriv(a), deriv(b));
    if ga.is_finite() && gb.is_finite() && ga < 0.0 && gb > 0.0 {
        for _ in 0..100 {
            let mid = 0.5 * (a + b);
            let gm = deriv(mid);
            if !gm.is_finite() {
                break;
            }
            if gm < 0.0 {
                a = mid;
                ga = gm;
            } else {
                b = mid;
                gb = gm;
            }
            if b - a <= f64::EPSILON * b.abs() {
                break;
            }
        }
        let _ = (ga, gb);
        x = 0.5 * (a + b);
    }
    Ok(x)
}

/// KL objective in ν_g for one inverse-Wishart factor with mode-matched
/// scale. `dim` is the matrix dimension, `nu_target` the degrees of freedom
/// of the KL target, `trace_term` = tr(Ψ_target·Σ̂⁻¹).
fn nu_objective(dim: usize, nu_target: f64, trace_term: f64, nu_g: f64) -> f64 {
    let d = dim as f64;
    let gamma = match multigamma_log(dim, 0.5 * nu_g) {
        Ok(v) => v,
        Err(_) => return f64::INFINITY,
    };
    let mut psi_sum = 0.0;
    for i in 1..=dim {
        match digamma(0.5 * (nu_g - d + i as f64)) {
            Ok(v) => psi_sum += v,
            Err(_) => return f64::INFINITY,
        }
    }
    nu_g / (nu_g + d + 1.0) * trace_term - 2.0 * gamma - nu_g * d
        + d * nu_target * (nu_g + d + 1.0).ln()
        + (nu_g - nu_target) * psi_sum
}

/// Fitted ν̂_{g,ε}: minimizes the KL of g_ε to InvW(ν_ε, Σ_ε0 + βnS).
pub fn fit_nu_g_eps(
    map: &MapSolution,
    stats: &SampleStats,
    hyper: &Hyperparams,
) -> Result<f64> {
    let p = stats.p;
    let n = stats.n as f64;
    let sigma_eps_inv = &map.x_eps; // X̂_ε = Σ̂_ε⁻¹
    let target_scale = hyper.scale_eps.as_matrix() + &stats.s * (hyper.beta * n);
    let trace_term = (&target_scale * sigma_eps_inv).trace();
    let (lo, hi) = nu_bracket(p, hyper.nu_eps, stats.n);
    minimize_nu(
        |nu_g| nu_objective(p, hyper.nu_eps, trace_term, nu_g),
        |nu_g| nu_objective_deriv(p, hyper.nu_eps, trace_term, nu_g),
        lo,
        hi,
    )
}

/// Fitted ν̂_{g,j}: minimizes the KL of g_j to InvW(ν_j + n, Σ_j0 + nS_j).
pub fn fit_nu_g_block(
    map: &MapSolution,
    stats: &SampleStats,
    clustering: &Clustering,
    hyper: &Hyperparams,
    j: usize,
) -> Result<f64> {
    let sj = stats.block_cov(clustering, j)?;
    let pj = sj.nrows();
    let n = stats.n as f64;
    let target_scale = hyper.scale_blocks[j].as_matrix() + &sj * n;
    let trace_term = (&target_scale * &map.x_blocks[j]).trace();
    let nu_target = hyper.nu_blocks[j] + n;
    let (lo, hi) = nu_bracket(pj, hyper.nu_blocks[j], stats.n);
    minimize_nu(
        |nu_g| nu_objective(pj, nu_target, trace_term, nu_g),
        |nu_g| nu_objective_deriv(pj, nu_target, trace_term, nu_g),
        lo,
        hi,
    )
}

/// Variational estimate of the log marginal likelihood with its fitted
/// degrees of freedom and the underlying MAP solution.
#[derive(Debug, Clone)]
pub struct VariationalFit {
    pub nu_g_eps: f64,
    pub nu_g_blocks: Vec<f64>,
    pub log_marginal: f64,
    pub map: MapSolution,
}

/// Variational log marginal: solve the MAP, fit the ν̂'s, and return
/// log p(θ̂, 𝒳) − log g(θ̂).
pub fn variational_log_marginal(
    stats: &SampleStats,
    clustering: &Clustering,
    hyper: &Hyperparams,
    cfg: &AdmmConfig,
) -> Result<VariationalFit> {
    let map = solve_map(stats, clustering, hyper, cfg)?;
    variational_from_map(stats, clustering, hyper, map)
}

/// Same as [`variational_log_marginal`] but reusing an existing MAP solve.
pub fn variational_from_map(
    stats: &SampleStats,
    clustering: &Clustering,
    hyper: &Hyperparams,
    map: MapSolution,
) -> Result<VariationalFit> {
    let sigma_eps = map.sigma_eps()?;
    let sigma_blocks = map.sigma_blocks()?;

    let nu_g_eps = fit_nu_g_eps(&map, stats, hyper)?;
    let mut nu_g_blocks = Vec::with_capacity(clustering.k());
    for j in 0..clustering.k() {
        nu_g_blocks.push(fit_nu_g_block(&map, stats, clustering, hyper, j)?);
    }

    let log_joint_at_mode = log_joint(stats, clustering, hyper, &sigma_eps, &sigma_blocks)?;

    let p = stats.p as f64;
    let mut log_g = invwishart_logpdf(
        &sigma_eps,
        nu_g_eps,
        &(&sigma_eps * (nu_g_eps + p + 1.0)),
    )?;
    for (j, sj) in sigma_blocks.iter().enumerate() {
        let pj = sj.nrows() as f64;
        log_g += invwishart_logpdf(sj, nu_g_blocks[j], &(sj * (nu_g_blocks[j] + pj + 1.0)))?;
    }

    let log_marginal = log_joint_at_mode - log_g;
    if !log_marginal.is_finite() {
        return Err(Error::EstimateFailed(
            "variational log marginal is not finite".into(),
        ));
    }
    Ok(VariationalFit {
        nu_g_eps,
        nu_g_blocks,
        log_marginal,
        map,
    })
}
