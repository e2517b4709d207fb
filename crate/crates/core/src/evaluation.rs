//! Clustering agreement (adjusted mutual information) and experiment
//! aggregation.

use crate::error::{Error, Result};
use crate::model::Clustering;

/// Contingency table between two partitions of the same variables.
#[derive(Debug, Clone)]
pub struct Contingency {
    pub counts: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
    pub total: usize,
}

impl Contingency {
    pub fn new(a: &Clustering, b: &Clustering) -> Result<Self> {
        if a.p() != b.p() {
            return Err(Error::Dimension {
                context: "partition lengths",
                expected: a.p(),
                found: b.p(),
            });
        }
        let mut counts = vec![vec![0usize; b.k()]; a.k()];
        for (&la, &lb) in a.labels().iter().zip(b.labels()) {
            counts[la][lb] += 1;
        }
        let row_sums: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<usize> = (0..b.k()).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        let total = a.p();
        debug_assert_eq!(row_sums.iter().sum::<usize>(), total);
        debug_assert_eq!(col_sums.iter().sum::<usize>(), total);
        Ok(Contingency {
            counts,
            row_sums,
            col_sums,
            total,
        })
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    let nij = c as f64;
                    mi += nij / n
                        * (n * nij / (self.row_sums[i] as f64 * self.col_sums[j] as f64)).ln();
                }
            }
        }
        mi
    }

    pub fn entropies(&self) -> (f64, f64) {
        let n = self.total as f64;
        let h = |sums: &[usize]| -> f64 {
            -sums
                .iter()
                .filter(|&&s| s > 0)
                .map(|&s| {
                    let p = s as f64 / n;
                    p * p.ln()
                })
                .sum::<f64>()
        };
        (h(&self.row_sums), h(&self.col_sums))
    }

    /// E[MI] under the permutation (hypergeometric) null that fixes both
    /// marginals, via the exact sum over cell counts. Factorials run in log
    /// space, so this stays stable for p in the thousands.
    pub fn expected_mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let lnf = |x: usize| statrs::function::gamma::ln_gamma(x as f64 + 1.0);
        let mut emi = 0.0;
        for &ai in &self.row_sums {
            for &bj in &self.col_sums {
                let lo = 1.max((ai + bj).saturating_sub(self.total));
                let hi = ai.min(bj);
                for nij in lo..=hi {
                    let nij_f = nij as f64;
                    let log_weight = lnf(ai) + lnf(bj) + lnf(self.total - ai)
                        + lnf(self.total - bj)
                        - lnf(self.total)
                        - lnf(nij)
                        - lnf(ai - nij)
                        - lnf(bj - nij)
                        - lnf(self.total + nij - ai - bj);
                    emi +=
                        nij_f / n * (n * nij_f / (ai as f64 * bj as f64)).ln() * log_weight.exp();
                }
            }
        }
        emi
    }
}

/// Adjusted (for chance) mutual information with the max-entropy
/// normalizer: (MI − E[MI]) / (max(H(a), H(b)) − E[MI]).
///
/// Identical partitions score exactly 1; independent partitions score ≈ 0 in
/// expectation; slightly negative values are possible.
pub fn anmi(a: &Clustering, b: &Clustering) -> Result<f64> {
    if a == b {
        return Ok(1.0);
    }
    let table = Contingency::new(a, b)?;
    let mi = table.mutual_information();
    let (ha, hb) = table.entropies();
    let emi = table.expected_mutual_information();
    let denom = ha.max(hb) - emi;
    if denom.abs() < 1e-12 {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}

/// Sample mean and (n−1)-denominator standard deviation; a single value
/// reports 0.0 spread.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// "0.95 (0.06)" formatting used by the experiment tables.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2} ({:.2})", mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn clustering(labels: &[usize]) -> Clustering {
        Clustering::canonicalize(labels).unwrap()
    }

    /// Exact E[MI] by enumerating every permutation of b's label vector:
    /// the permutation model behind the hypergeometric formula.
    fn emi_bruteforce(a: &Clustering, b: &Clustering) -> f64 {
        let p = a.p();
        let mut perm: Vec<usize> = (0..p).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        // Heap's algorithm, iterative
        let mut c = vec![0usize; p];
        let mut accumulate = |perm: &[usize]| {
            let permuted: Vec<usize> = perm.iter().map(|&i| b.labels()[i]).collect();
            let bp = clustering(&permuted);
            total += Contingency::new(a, &bp).unwrap().mutual_information();
            count += 1;
        };
        accumulate(&perm);
        let mut i = 0;
        while i < p {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                accumulate(&perm);
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_and_relabeled_partitions_score_one() {
        let a = clustering(&[0, 0, 1, 1, 2]);
        assert_eq!(anmi(&a, &a).unwrap(), 1.0);
        let relabeled = clustering(&[2, 2, 0, 0, 1]);
        assert_eq!(anmi(&a, &relabeled).unwrap(), 1.0);
    }

    #[test]
    fn expected_mi_matches_permutation_enumeration() {
        let a = clustering(&[0, 0, 1, 1]);
        let b = clustering(&[0, 1, 0, 1]);
        let exact = emi_bruteforce(&a, &b);
        let formula = Contingency::new(&a, &b).unwrap().expected_mutual_information();
        assert!((exact - formula).abs() < 1e-12, "{exact} vs {formula}");
    }

    #[test]
    fn crossed_pair_value_from_oracle() {
        let a = clustering(&[0, 0, 1, 1]);
        let b = clustering(&[0, 1, 0, 1]);
        let table = Contingency::new(&a, &b).unwrap();
        let mi = table.mutual_information();
        let (ha, hb) = table.entropies();
        let emi = emi_bruteforce(&a, &b);
        let want = (mi - emi) / (ha.max(hb) - emi);
        assert!((anmi(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_relabel_invariant_on_random_partitions() {
        let mut rng = crate::rng::task_rng(60, 0);
        for _ in 0..20 {
            let p = rng.random_range(5..200);
            let ka = rng.random_range(1..8);
            let kb = rng.random_range(1..8);
            let a = clustering(&(0..p).map(|_| rng.random_range(0..ka)).collect::<Vec<_>>());
            let b = clustering(&(0..p).map(|_| rng.random_range(0..kb)).collect::<Vec<_>>());
            let ab = anmi(&a, &b).unwrap();
            let ba = anmi(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab <= 1.0 + 1e-12);

            // permute b's label ids
            let shift: Vec<usize> = b.labels().iter().map(|&l| (l + 3) % b.k().max(1)).collect();
            let b2 = clustering(&shift);
            assert!((anmi(&a, &b2).unwrap() - ab).abs() < 1e-12);
        }
    }

    #[test]
    fn refinement_scores_below_one() {
        let a = clustering(&[0, 0, 1, 1, 1, 2, 2]);
        let singletons = clustering(&[0, 1, 2, 3, 4, 5, 6]);
        assert!(anmi(&a, &singletons).unwrap() < 1.0);
    }

    #[test]
    fn aggregate_basics() {
        assert_eq!(aggregate(&[1.0, 1.0, 1.0]).unwrap(), (1.0, 0.0));
        let (m, s) = aggregate(&[0.0, 1.0]).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        assert!((s - 0.5_f64.sqrt()).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
        assert_eq!(format_mean_std(0.954, 0.061), "0.95 (0.06)");
    }
}
