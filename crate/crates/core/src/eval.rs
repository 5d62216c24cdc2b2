//! Cross-modal retrieval metrics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{self, LorentzPoint};
use crate::losses::BatchPairing;

pub use crate::losses::containment_rate;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Recall in percent for each `k` of `ks`, both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub text_to_pc: Vec<f64>,
    pub pc_to_text: Vec<f64>,
}

impl RetrievalReport {
    /// Sum of every recall value in both directions.
    pub fn rsum(&self) -> f64 {
        self.text_to_pc.iter().chain(&self.pc_to_text).sum()
    }

    pub fn recall(&self, text_to_pc: bool, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some(if text_to_pc {
            self.text_to_pc[i]
        } else {
            self.pc_to_text[i]
        })
    }
}

/// Position of `j` in the ascending ranking of `row`, ties broken by index.
fn rank_of(row: &[f64], j: usize) -> usize {
    let dj = row[j];
    row.iter()
        .enumerate()
        .filter(|&(i, &d)| d < dj || (d == dj && i < j))
        .count()
}

/// Best rank over the positives of every query.
fn best_ranks<'a>(dist: &[Vec<f64>], positives: impl Fn(usize) -> &'a [usize]) -> Vec<usize> {
    dist.iter()
        .enumerate()
        .map(|(q, row)| {
            positives(q)
                .iter()
                .map(|&j| rank_of(row, j))
                .min()
                .unwrap_or(usize::MAX)
        })
        .collect()
}

fn recalls(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect()
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::usage("cutoffs must be a non-empty list of positive integers"));
    }
    Ok(())
}

/// Recalls from a precomputed `[n_text, n_pc]` distance matrix.
pub fn evaluate_distances(dist: &[Vec<f64>], pairing: &BatchPairing, ks: &[usize]) -> Result<RetrievalReport> {
    check_ks(ks)?;
    if dist.is_empty() || dist[0].is_empty() {
        return Err(Error::usage("empty gallery"));
    }
    if dist.len() != pairing.n_text() || dist.iter().any(|r| r.len() != pairing.n_pc()) {
        return Err(Error::usage("distance matrix does not match the pairing"));
    }
    let transposed: Vec<Vec<f64>> = (0..pairing.n_pc())
        .map(|j| dist.iter().map(|r| r[j]).collect())
        .collect();
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        text_to_pc: recalls(&best_ranks(dist, |i| pairing.positives(i)), ks),
        pc_to_text: recalls(&best_ranks(&transposed, |j| pairing.transpose(j)), ks),
    })
}

/// All-pairs Lorentzian distances, one text per parallel task.
pub fn distance_matrix(ht: &[LorentzPoint], hp: &[LorentzPoint]) -> Result<Vec<Vec<f64>>> {
    ht.par_iter()
        .map(|a| hp.iter().map(|b| geometry::lorentz_distance(a, b)).collect())
        .collect()
}

/// Ranks point clouds for each text (and texts for each point cloud) by
/// ascending distance.
pub fn evaluate(
    ht: &[LorentzPoint],
    hp: &[LorentzPoint],
    pairing: &BatchPairing,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if ht.is_empty() || hp.is_empty() {
        return Err(Error::usage("empty gallery"));
    }
    evaluate_distances(&distance_matrix(ht, hp)?, pairing, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Curvature;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Tries every ordering of the gallery and keeps the one that is sorted
    /// by (distance, index).
    fn enumeration_oracle(row: &[f64]) -> Vec<usize> {
        let n = row.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut found = None;
        let mut c = vec![0usize; n];
        let sorted = |p: &[usize]| {
            p.windows(2)
                .all(|w| row[w[0]] < row[w[1]] || (row[w[0]] == row[w[1]] && w[0] < w[1]))
        };
        if sorted(&perm) {
            found = Some(perm.clone());
        }
        // Heap's algorithm
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                if sorted(&perm) {
                    assert!(found.is_none(), "two sorted orderings");
                    found = Some(perm.clone());
                }
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        found.expect("one ordering is sorted")
    }

    fn hit(ranking: &[usize], positives: &[usize], k: usize) -> bool {
        ranking.iter().take(k).any(|j| positives.contains(j))
    }

    fn random_pairing(rng: &mut ChaCha8Rng, n: usize, m: usize) -> BatchPairing {
        // the first g entries on each side cover every group
        let g = n.min(m);
        let mut groups = |len: usize| -> Vec<usize> {
            (0..len)
                .map(|i| if i < g { i } else { rng.random_range(0..g) })
                .collect()
        };
        let text = groups(n);
        let pc = groups(m);
        BatchPairing::from_groups(&text, &pc).unwrap()
    }

    #[test]
    fn identity_gallery() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let c = Curvature::default();
        let pts: Vec<LorentzPoint> = (0..12)
            .map(|_| {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                geometry::lift(&v, c).unwrap()
            })
            .collect();
        let r = evaluate(&pts, &pts, &BatchPairing::identity(12).unwrap(), &DEFAULT_KS).unwrap();
        assert_eq!(r.recall(true, 1), Some(100.0));
        assert_eq!(r.recall(false, 1), Some(100.0));
        assert_eq!(r.rsum(), 600.0);
    }

    #[test]
    fn hand_built_three_by_three() {
        let dist = vec![vec![0.5, 0.2, 0.9], vec![0.1, 0.1, 0.3], vec![0.4, 0.8, 0.4]];
        let p = BatchPairing::identity(3).unwrap();
        let r = evaluate_distances(&dist, &p, &[1, 2, 3]).unwrap();
        // every positive lands second: t1 and t2 lose index tie-breaks
        assert_eq!(r.text_to_pc, vec![0.0, 100.0, 100.0]);
        for (q, row) in dist.iter().enumerate() {
            let ranking = enumeration_oracle(row);
            for k in 1..=3 {
                assert_eq!(hit(&ranking, &[q], k), rank_of(row, q) < k);
            }
        }
    }

    #[test]
    fn multi_positive_counts_any_hit() {
        let dist = vec![vec![0.9, 0.1, 0.5, 0.7]];
        let p = BatchPairing::new(4, vec![vec![0, 1, 2, 3]]).unwrap();
        let r = evaluate_distances(&dist, &p, &[1]).unwrap();
        assert_eq!(r.text_to_pc, vec![100.0]);
        let p = BatchPairing::new(2, vec![vec![0], vec![0, 1]]).unwrap();
        let r = evaluate_distances(&[vec![0.3, 0.1], vec![0.3, 0.1]], &p, &[1]).unwrap();
        assert_eq!(r.text_to_pc, vec![50.0]);
    }

    #[test]
    fn matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..60 {
            let (n, m) = (rng.random_range(1..=8), rng.random_range(1..=8));
            // coarse values so that ties happen
            let dist: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(0..4) as f64).collect())
                .collect();
            let p = random_pairing(&mut rng, n, m);
            let ks: Vec<usize> = (1..=m).collect();
            let r = evaluate_distances(&dist, &p, &ks).unwrap();
            let rankings: Vec<Vec<usize>> = dist.iter().map(|r| enumeration_oracle(r)).collect();
            for (ki, &k) in ks.iter().enumerate() {
                let hits = (0..n).filter(|&i| hit(&rankings[i], p.positives(i), k)).count();
                assert_eq!(r.text_to_pc[ki], 100.0 * hits as f64 / n as f64);
            }
        }
    }

    #[test]
    fn empty_gallery_is_rejected() {
        let p = BatchPairing::identity(1).unwrap();
        assert!(evaluate(&[], &[], &p, &DEFAULT_KS).is_err());
        assert!(evaluate_distances(&[vec![0.0]], &p, &[0]).is_err());
    }

    proptest! {
        #[test]
        fn recall_bounds_and_monotonicity(seed in any::<u64>(), n in 1usize..10, m in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
            let p = random_pairing(&mut rng, n, m);
            let ks: Vec<usize> = (1..=12).collect();
            let r = evaluate_distances(&dist, &p, &ks).unwrap();
            for v in [&r.text_to_pc, &r.pc_to_text] {
                prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(v.iter().all(|&x| (0.0..=100.0).contains(&x)));
            }
            let r3 = evaluate_distances(&dist, &p, &DEFAULT_KS).unwrap();
            prop_assert!((0.0..=600.0).contains(&r3.rsum()));
            let squared: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().map(|d| d * d).collect()).collect();
            prop_assert_eq!(evaluate_distances(&squared, &p, &ks).unwrap(), r);
        }
    }
}
