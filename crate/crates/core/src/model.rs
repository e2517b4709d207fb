//! Domain types shared by every module: variable clusterings, sample
//! statistics, prior hyperparameters and SPD matrix values.
//!
//! All types are immutable after construction and safe to share across
//! threads.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// A partition of `p` variables into `k` non-empty labeled groups.
///
/// Labels are kept in canonical form: clusters are numbered by first
/// appearance, so two partitions are equal iff their label sequences are
/// equal. This makes candidate dedup an exact set-membership check.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Clustering {
    labels: Vec<usize>,
    #[serde(skip)]
    k: usize,
}

impl Clustering {
    /// Relabel by first appearance. `[2,2,0,0]` becomes `[0,0,1,1]`.
    pub fn canonicalize(labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("clustering labels"));
        }
        let mut map: Vec<(usize, usize)> = Vec::new();
        let mut canonical = Vec::with_capacity(labels.len());
        for &raw in labels {
            let id = match map.iter().find(|(orig, _)| *orig == raw) {
                Some(&(_, id)) => id,
                None => {
                    let id = map.len();
                    map.push((raw, id));
                    id
                }
            };
            canonical.push(id);
        }
        Ok(Clustering {
            labels: canonical,
            k: map.len(),
        })
    }

    /// One cluster containing all `p` variables.
    pub fn single_cluster(p: usize) -> Self {
        Clustering {
            labels: vec![0; p],
            k: 1,
        }
    }

    /// Consecutive blocks of the given sizes: `[2,3]` gives `[0,0,1,1,1]`.
    pub fn from_block_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("block sizes must be non-empty and positive"));
        }
        let mut labels = Vec::with_capacity(sizes.iter().sum());
        for (j, &s) in sizes.iter().enumerate() {
            labels.extend(std::iter::repeat(j).take(s));
        }
        Ok(Clustering {
            labels,
            k: sizes.len(),
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of variables.
    pub fn p(&self) -> usize {
        self.labels.len()
    }

    /// Number of clusters.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Size of cluster `j`.
    pub fn cluster_size(&self, j: usize) -> usize {
        self.labels.iter().filter(|&&l| l == j).count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Indices of the variables in cluster `j`, in variable order.
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == j)
            .map(|(i, _)| i)
            .collect()
    }
}

impl<'de> Deserialize<'de> for Clustering {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            labels: Vec<usize>,
        }
        let raw = Raw::deserialize(deserializer)?;
        Clustering::canonicalize(&raw.labels).map_err(serde::de::Error::custom)
    }
}

/// Sample size, dimension and the ML-normalized sample covariance
/// S = (1/n) Σ xᵢxᵢᵀ. The MAP objective pairs n·tr(SX) with n·log|X|, so the
/// unbiased (n−1) form would silently rescale the likelihood.
#[derive(Debug, Clone, Serialize)]
pub struct SampleStats {
    pub n: usize,
    pub p: usize,
    #[serde(rename = "S", serialize_with = "serialize_matrix")]
    pub s: DMatrix<f64>,
}

impl<'de> Deserialize<'de> for SampleStats {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            n: usize,
            #[serde(rename = "S")]
            s: Vec<Vec<f64>>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let dim = raw.s.len();
        if raw.s.iter().any(|r| r.len() != dim) {
            return Err(serde::de::Error::custom("S must be square"));
        }
        let s = DMatrix::from_fn(dim, dim, |r, c| raw.s[r][c]);
        SampleStats::new(raw.n, s).map_err(serde::de::Error::custom)
    }
}

impl SampleStats {
    /// Validates symmetry (1e-12 relative) and positive semi-definiteness
    /// (smallest eigenvalue ≥ −1e-8·‖S‖).
    pub fn new(n: usize, s: DMatrix<f64>) -> Result<Self> {
        let p = s.nrows();
        if s.ncols() != p {
            return Err(Error::Dimension {
                context: "sample covariance",
                expected: p,
                found: s.ncols(),
            });
        }
        let scale = s.norm().max(1.0);
        let asym = (&s - s.transpose()).norm() / scale;
        if asym > 1e-12 {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let eig = crate::linalg::sym_eig(&s)?;
        let min = eig.eigenvalues[0];
        if min < -1e-8 * s.norm() {
            return Err(Error::NotPositiveDefinite {
                context: "sample covariance has a significantly negative eigenvalue",
            });
        }
        Ok(SampleStats { n, p, s })
    }

    /// Submatrix of S on cluster `j`'s variables, preserving their order.
    pub fn block_cov(&self, clustering: &Clustering, j: usize) -> Result<DMatrix<f64>> {
        extract_block_cov(self, clustering, j)
    }
}

/// Free-function form of [`Clustering::canonicalize`].
pub fn canonicalize_labels(labels: &[usize]) -> Result<Clustering> {
    Clustering::canonicalize(labels)
}

/// S restricted to the rows/columns of cluster `j`.
pub fn extract_block_cov(
    stats: &SampleStats,
    clustering: &Clustering,
    j: usize,
) -> Result<DMatrix<f64>> {
    if clustering.p() != stats.p {
        return Err(Error::Dimension {
            context: "clustering vs stats",
            expected: stats.p,
            found: clustering.p(),
        });
    }
    if j >= clustering.k() {
        return Err(Error::invalid(format!(
            "cluster index {j} out of range (k = {})",
            clustering.k()
        )));
    }
    let idx = clustering.members(j);
    Ok(submatrix(&stats.s, &idx))
}

/// General symmetric submatrix extraction on an index set.
pub fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

/// Scatter a block back onto the given index set of a larger matrix.
pub fn scatter_block(target: &mut DMatrix<f64>, block: &DMatrix<f64>, idx: &[usize]) {
    for (r, &ir) in idx.iter().enumerate() {
        for (c, &ic) in idx.iter().enumerate() {
            target[(ir, ic)] = block[(r, c)];
        }
    }
}

/// A symmetric positive definite matrix, validated by Cholesky success.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::Dimension {
                context: "SPD matrix",
                expected: mat.nrows(),
                found: mat.ncols(),
            });
        }
        let scale = mat.norm().max(1.0);
        let asym = (&mat - mat.transpose()).norm() / scale;
        if asym > 1e-8 {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        if mat.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite {
                context: "Cholesky factorization failed",
            });
        }
        Ok(SpdMatrix { mat })
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }
}

impl std::ops::Deref for SpdMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.mat
    }
}

/// β plus the inverse-Wishart prior parameters of the model: (ν_ε, Σ_ε0) for
/// the noise covariance and (ν_j, Σ_j0) per cluster.
#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub beta: f64,
    pub nu_eps: f64,
    pub scale_eps: SpdMatrix,
    pub nu_blocks: Vec<f64>,
    pub scale_blocks: Vec<SpdMatrix>,
}

impl Hyperparams {
    /// Non-informative defaults: ν_j = p_j + 1, Σ_j0 = I, ν_ε = p + 1,
    /// Σ_ε0 = I.
    pub fn noninformative(clustering: &Clustering, beta: f64) -> Result<Self> {
        let p = clustering.p();
        let sizes = clustering.cluster_sizes();
        Hyperparams::new(
            beta,
            (p + 1) as f64,
            SpdMatrix::identity(p),
            sizes.iter().map(|&pj| (pj + 1) as f64).collect(),
            sizes.iter().map(|&pj| SpdMatrix::identity(pj)).collect(),
        )
    }

    pub fn new(
        beta: f64,
        nu_eps: f64,
        scale_eps: SpdMatrix,
        nu_blocks: Vec<f64>,
        scale_blocks: Vec<SpdMatrix>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::invalid(format!("beta must be in [0,1), got {beta}")));
        }
        if nu_blocks.len() != scale_blocks.len() {
            return Err(Error::Dimension {
                context: "nu_blocks vs scale_blocks",
                expected: nu_blocks.len(),
                found: scale_blocks.len(),
            });
        }
        let p = scale_eps.dim();
        if nu_eps <= (p - 1) as f64 {
            return Err(Error::invalid(format!(
                "nu_eps = {nu_eps} must exceed p - 1 = {}",
                p - 1
            )));
        }
        for (j, (nu, scale)) in nu_blocks.iter().zip(&scale_blocks).enumerate() {
            if *nu <= (scale.dim() - 1) as f64 {
                return Err(Error::invalid(format!(
                    "nu_blocks[{j}] = {nu} must exceed p_j - 1 = {}",
                    scale.dim() - 1
                )));
            }
        }
        Ok(Hyperparams {
            beta,
            nu_eps,
            scale_eps,
            nu_blocks,
            scale_blocks,
        })
    }

    pub fn p(&self) -> usize {
        self.scale_eps.dim()
    }

    pub fn k(&self) -> usize {
        self.nu_blocks.len()
    }

    /// a_ε = ν_ε + p + 1 from the MAP objective.
    pub fn a_eps(&self) -> f64 {
        self.nu_eps + self.p() as f64 + 1.0
    }

    /// a_j = ν_j + p_j + 1 from the MAP objective.
    pub fn a_block(&self, j: usize) -> f64 {
        self.nu_blocks[j] + self.scale_blocks[j].dim() as f64 + 1.0
    }
}

fn serialize_matrix<S: serde::Serializer>(
    m: &DMatrix<f64>,
    ser: S,
) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect();
    rows.serialize(ser)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalize_relabels_by_first_appearance() {
        let c = Clustering::canonicalize(&[2, 2, 0, 0]).unwrap();
        assert_eq!(c.labels(), &[0, 0, 1, 1]);
        assert_eq!(c.k(), 2);

        let c = Clustering::canonicalize(&[1, 0, 1, 0]).unwrap();
        assert_eq!(c.labels(), &[0, 1, 0, 1]);

        let c = Clustering::canonicalize(&[5]).unwrap();
        assert_eq!(c.labels(), &[0]);
        assert_eq!(c.k(), 1);
    }

    #[test]
    fn canonicalize_is_invariant_to_label_permutation() {
        let mut rng = crate::rng::task_rng(42, 0);
        use rand::Rng;
        for _ in 0..50 {
            let p = rng.random_range(1..12);
            let labels: Vec<usize> = (0..p).map(|_| rng.random_range(0..4)).collect();
            let base = Clustering::canonicalize(&labels).unwrap();
            // permute label ids
            let perm = [3usize, 0, 2, 1];
            let permuted: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            let c = Clustering::canonicalize(&permuted).unwrap();
            assert_eq!(base, c);
        }
    }

    #[test]
    fn cluster_sizes_sum_to_p() {
        let c = Clustering::canonicalize(&[0, 1, 2, 1, 0, 3]).unwrap();
        assert_eq!(c.cluster_sizes().iter().sum::<usize>(), c.p());
    }

    #[test]
    fn block_cov_identity() {
        let stats = SampleStats::new(10, DMatrix::identity(4, 4)).unwrap();
        let c = Clustering::canonicalize(&[0, 0, 1, 1]).unwrap();
        let b = extract_block_cov(&stats, &c, 0).unwrap();
        assert_eq!(b, DMatrix::identity(2, 2));
    }

    #[test]
    fn block_cov_interleaved_indices() {
        let mut s = DMatrix::identity(4, 4);
        s[(0, 2)] = 0.5;
        s[(2, 0)] = 0.5;
        let stats = SampleStats::new(10, s).unwrap();
        let c = Clustering::canonicalize(&[0, 1, 0, 1]).unwrap();
        let b = extract_block_cov(&stats, &c, 0).unwrap();
        // variables 0 and 2
        assert_eq!(b[(0, 1)], 0.5);
        assert_eq!(b[(1, 0)], 0.5);
        assert_eq!(b[(0, 0)], 1.0);
    }

    #[test]
    fn block_cov_single_cluster_is_full_matrix() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let stats = SampleStats::new(5, s.clone()).unwrap();
        let c = Clustering::single_cluster(2);
        assert_eq!(extract_block_cov(&stats, &c, 0).unwrap(), s);
    }

    #[test]
    fn block_cov_out_of_range_errors() {
        let stats = SampleStats::new(10, DMatrix::identity(4, 4)).unwrap();
        let c = Clustering::canonicalize(&[0, 0, 1, 1]).unwrap();
        assert!(extract_block_cov(&stats, &c, 2).is_err());
    }

    #[test]
    fn block_cov_output_is_symmetric() {
        let mut rng = crate::rng::task_rng(7, 1);
        let a = crate::linalg::random_symmetric(6, &mut rng);
        let s = &a * &a; // PSD
        let stats = SampleStats::new(3, (&s + s.transpose()) * 0.5).unwrap();
        let c = Clustering::canonicalize(&[0, 1, 0, 2, 1, 0]).unwrap();
        for j in 0..c.k() {
            let b = extract_block_cov(&stats, &c, j).unwrap();
            assert!((&b - b.transpose()).norm() < 1e-14);
        }
    }

    #[test]
    fn spd_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SpdMatrix::new(m).is_err());
        assert!(SpdMatrix::new(DMatrix::identity(3, 3)).is_ok());
    }

    #[test]
    fn hyperparams_defaults() {
        let c = Clustering::canonicalize(&[0, 0, 1]).unwrap();
        let h = Hyperparams::noninformative(&c, 0.02).unwrap();
        assert_eq!(h.nu_eps, 4.0);
        assert_eq!(h.nu_blocks, vec![3.0, 2.0]);
        assert_eq!(h.a_eps(), 8.0);
        assert_eq!(h.a_block(0), 6.0);
        assert_eq!(h.a_block(1), 4.0);
    }

    #[test]
    fn clustering_json_round_trip() {
        let c = Clustering::canonicalize(&[3, 3, 1, 2]).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, r#"{"labels":[0,0,1,2]}"#);
        let back: Clustering = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
