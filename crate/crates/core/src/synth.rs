//! Seeded generators for the simulation study: block covariances, noise
//! covariances, mixed-precision sampling x ~ N(0, (Σ⁻¹ + ηΣ_ε⁻¹)⁻¹), and a
//! streaming covariance accumulator so huge n never materializes more than
//! one sample at a time.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, sym_eig};
use crate::mcmc::sample_invwishart;
use crate::model::{scatter_block, Clustering, SampleStats};
use crate::rng::task_rng;

/// Covariance draw family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovDist {
    /// InvW(dim + 1, I), the non-informative inverse Wishart.
    Invw,
    /// A + (0.001 − λ_min(A))·I with A symmetric, zero diagonal and
    /// off-diagonals uniform on (−1, 1).
    Uniform,
}

/// Full description of one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub p: usize,
    pub cluster_sizes: Vec<usize>,
    pub block_dist: CovDist,
    pub noise_dist: Option<CovDist>,
    pub eta: f64,
    pub n: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_sizes.iter().sum::<usize>() != self.p {
            return Err(Error::invalid("cluster sizes must sum to p"));
        }
        if self.cluster_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("cluster sizes must be positive"));
        }
        if self.eta < 0.0 {
            return Err(Error::invalid("eta must be non-negative"));
        }
        if (self.eta == 0.0) != self.noise_dist.is_none() {
            return Err(Error::invalid(
                "eta = 0 iff noise_dist is none (set both or neither)",
            ));
        }
        if self.n == 0 {
            return Err(Error::invalid("n must be positive"));
        }
        Ok(())
    }
}

/// Covariance draw from InvW(dim + 1, I).
pub fn sample_invw_cov<R: Rng>(dim: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    sample_invwishart(dim as f64 + 1.0, &DMatrix::identity(dim, dim), rng)
}

/// The Uniform_p construction: λ_min of the result is exactly 0.001.
pub fn sample_uniform_cov<R: Rng>(dim: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = rng.random_range(-1.0..1.0);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let min = sym_eig(&a)?.eigenvalues[0];
    for i in 0..dim {
        a[(i, i)] = 0.001 - min;
    }
    Ok(a)
}

fn sample_cov<R: Rng>(dist: CovDist, dim: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    match dist {
        CovDist::Invw => sample_invw_cov(dim, rng),
        CovDist::Uniform => sample_uniform_cov(dim, rng),
    }
}

/// A generated dataset: streaming sample covariance, ground truth labels,
/// and the generating matrices.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub stats: SampleStats,
    pub truth: Clustering,
    pub sigma: DMatrix<f64>,
    pub sigma_eps: Option<DMatrix<f64>>,
}

/// Draw the dataset of `spec`: blocks assembled into block-diagonal Σ, noise
/// Σ_ε, samples from N(0, (Σ⁻¹ + ηΣ_ε⁻¹)⁻¹) accumulated one at a time into
/// Σxxᵀ. Same seed, same bytes.
pub fn generate_dataset(spec: &SynthSpec) -> Result<GeneratedDataset> {
    generate_dataset_with(spec, |_| {})
}

/// [`generate_dataset`] with a per-sample observer (used to stream raw
/// samples to disk without a second RNG pass).
pub fn generate_dataset_with<F: FnMut(&DVector<f64>)>(
    spec: &SynthSpec,
    mut on_sample: F,
) -> Result<GeneratedDataset> {
    spec.validate()?;
    let mut rng = task_rng(spec.seed, 0);
    let p = spec.p;

    let mut sigma = DMatrix::<f64>::zeros(p, p);
    let mut offset = 0;
    for &size in &spec.cluster_sizes {
        let block = sample_cov(spec.block_dist, size, &mut rng)?;
        let idx: Vec<usize> = (offset..offset + size).collect();
        scatter_block(&mut sigma, &block, &idx);
        offset += size;
    }
    let truth = Clustering::from_block_sizes(&spec.cluster_sizes)?;

    let sigma_eps = match spec.noise_dist {
        Some(dist) => Some(sample_cov(dist, p, &mut rng)?),
        None => None,
    };

    // population covariance (Σ⁻¹ + ηΣ_ε⁻¹)⁻¹, factored once
    let mut precision = spd_inverse(&sigma)?;
    if let Some(eps) = &sigma_eps {
        precision += spd_inverse(eps)? * spec.eta;
    }
    let covariance = spd_inverse(&precision)?;
    let factor = covariance
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            context: "mixed covariance",
        })?;
    let l = factor.l();

    let mut scatter = DMatrix::<f64>::zeros(p, p);
    let mut z = DVector::<f64>::zeros(p);
    for _ in 0..spec.n {
        for zi in z.iter_mut() {
            *zi = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        }
        let x = &l * &z;
        on_sample(&x);
        // accumulate the lower triangle of x xᵀ
        for c in 0..p {
            for r in c..p {
                scatter[(r, c)] += x[r] * x[c];
            }
        }
    }
    for c in 0..p {
        for r in c..p {
            let v = scatter[(r, c)] / spec.n as f64;
            scatter[(r, c)] = v;
            scatter[(c, r)] = v;
        }
    }

    Ok(GeneratedDataset {
        stats: SampleStats::new(spec.n, scatter)?,
        truth,
        sigma,
        sigma_eps,
    })
}
