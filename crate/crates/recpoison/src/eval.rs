//! Attack-effectiveness and stealth metrics: hit ratio at k, the FAP
//! seed-propagation detector, ECOD outlier scores with AUROC, and
//! rating-distribution divergences.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RatingMatrix};
use crate::error::{Error, Result};
use crate::victims::{recommend_topk, VictimModel};

/// Fraction of eligible users whose top-`k` list contains the target.
pub fn hit_ratio_at_k(
    model: &VictimModel,
    target: usize,
    k: usize,
    eligible: &[usize],
) -> Result<f64> {
    if eligible.is_empty() {
        return Err(Error::EmptyEligible(target));
    }
    let mut hits = 0usize;
    for &u in eligible {
        let list = recommend_topk(model, u, k)?;
        if list.contains(&target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / eligible.len() as f64)
}

#[derive(Clone, Debug)]
pub struct FapOutcome {
    pub flagged: Vec<usize>,
    pub seeds: Vec<usize>,
    pub precision: f64,
    pub recall: f64,
    pub scores: Vec<f64>,
}

/// Iterative spam-probability propagation on the user-item bipartite graph.
///
/// Seeds (a fraction of the known fakes) start at probability 1; each
/// iteration diffuses user mass to items and back, degree-normalized, then
/// re-clamps the seeds. The top-scoring non-seed users with positive score
/// are flagged, up to `|true fakes|` of them; precision and recall are
/// computed excluding the seeds.
pub fn fap_detect(
    augmented: &RatingMatrix,
    true_fakes: &[usize],
    seed_fraction: f64,
    iters: usize,
    seed: u64,
) -> Result<FapOutcome> {
    if true_fakes.is_empty() {
        return Err(Error::Validation("FAP needs a nonempty fake set".into()));
    }
    let n = augmented.n_users;
    let m = augmented.n_items;
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "fap"));
    let n_seeds = ((true_fakes.len() as f64 * seed_fraction).ceil() as usize).max(1);
    let mut pool: Vec<usize> = true_fakes.to_vec();
    pool.shuffle(&mut rng);
    let mut seeds: Vec<usize> = pool.into_iter().take(n_seeds.min(true_fakes.len())).collect();
    seeds.sort_unstable();

    let mut user_deg = vec![0usize; n];
    let mut item_users: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (u, i, _) in augmented.iter_entries() {
        user_deg[u] += 1;
        item_users[i].push(u);
    }

    let mut p_user = vec![0.0f64; n];
    for &s in &seeds {
        p_user[s] = 1.0;
    }
    for _t in 0..iters {
        let mut p_item = vec![0.0f64; m];
        for (i, users) in item_users.iter().enumerate() {
            for &u in users {
                if user_deg[u] > 0 {
                    p_item[i] += p_user[u] / user_deg[u] as f64;
                }
            }
        }
        let mut next = vec![0.0f64; n];
        for (i, users) in item_users.iter().enumerate() {
            let deg_i = users.len();
            if deg_i == 0 {
                continue;
            }
            for &u in users {
                next[u] += p_item[i] / deg_i as f64;
            }
        }
        p_user = next;
        for &s in &seeds {
            p_user[s] = 1.0;
        }
    }

    let mut candidates: Vec<usize> = (0..n)
        .filter(|u| !seeds.contains(u) && p_user[*u] > 0.0)
        .collect();
    candidates.sort_by(|&a, &b| {
        p_user[b]
            .partial_cmp(&p_user[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    candidates.truncate(true_fakes.len());
    let flagged = candidates;

    let unknown_fakes: Vec<usize> = true_fakes
        .iter()
        .cloned()
        .filter(|u| !seeds.contains(u))
        .collect();
    let hits = flagged
        .iter()
        .filter(|u| unknown_fakes.contains(u))
        .count();
    let precision = if flagged.is_empty() {
        0.0
    } else {
        hits as f64 / flagged.len() as f64
    };
    let recall = if unknown_fakes.is_empty() {
        0.0
    } else {
        hits as f64 / unknown_fakes.len() as f64
    };
    Ok(FapOutcome {
        flagged,
        seeds,
        precision,
        recall,
        scores: p_user,
    })
}

/// Per-dimension ECOD outlier scores: negative log empirical tail
/// probabilities summed over dimensions, reported as the max of the
/// left-tail sum, right-tail sum, and the skewness-directed sum.
pub fn ecod_scores(features: &Array2<f64>) -> Vec<f64> {
    let n = features.nrows();
    let d = features.ncols();
    let mut left = vec![0.0f64; n];
    let mut right = vec![0.0f64; n];
    let mut skewed = vec![0.0f64; n];
    for j in 0..d {
        let col: Vec<f64> = features.column(j).to_vec();
        let mut sorted = col.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = col.iter().sum::<f64>() / n as f64;
        let m2 = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let m3 = col.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
        let skew = if m2 > 1e-24 { m3 / m2.powf(1.5) } else { 0.0 };
        for (u, &x) in col.iter().enumerate() {
            // #(X <= x) / n and #(X >= x) / n over the pooled sample
            let le = sorted.partition_point(|&v| v <= x) as f64 / n as f64;
            let ge = (n - sorted.partition_point(|&v| v < x)) as f64 / n as f64;
            let o_left = -le.ln();
            let o_right = -ge.ln();
            left[u] += o_left;
            right[u] += o_right;
            skewed[u] += if skew < 0.0 { o_left } else { o_right };
        }
    }
    (0..n)
        .map(|u| left[u].max(right[u]).max(skewed[u]))
        .collect()
}

/// AUROC of `scores` with `positives` as the positive class; tied pairs
/// contribute one half.
pub fn auroc(scores: &[f64], positives: &[bool]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(positives)
        .filter(|(_, &p)| p)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(positives)
        .filter(|(_, &p)| !p)
        .map(|(s, _)| *s)
        .collect();
    assert!(!pos.is_empty() && !neg.is_empty(), "both classes required");
    let mut u = 0.0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                u += 1.0;
            } else if p == q {
                u += 0.5;
            }
        }
    }
    u / (pos.len() as f64 * neg.len() as f64)
}

/// Per-user detector features: truncated-SVD row embedding, rating count,
/// mean and sample standard deviation of nonzero ratings, side features.
pub fn ecod_feature_matrix(augmented: &Dataset, r_svd: usize, seed: u64) -> Array2<f64> {
    let n = augmented.n_users();
    let dense = augmented.ratings.to_dense();
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "ecod-svd"));
    let (u, s, _) = crate::linalg::truncated_svd(&dense, r_svd, &mut rng);
    let du = augmented.user_features.dim;
    let total = r_svd + 3 + du;
    let mut out = Array2::zeros((n, total));
    for uix in 0..n {
        for k in 0..r_svd {
            out[[uix, k]] = u[[uix, k]] * s[k];
        }
        let row = augmented.ratings.row(uix);
        let cnt = row.len();
        let mean = if cnt > 0 {
            row.iter().map(|&(_, r)| r as f64).sum::<f64>() / cnt as f64
        } else {
            0.0
        };
        let std = if cnt > 1 {
            let ss: f64 = row
                .iter()
                .map(|&(_, r)| (r as f64 - mean).powi(2))
                .sum::<f64>();
            (ss / (cnt - 1) as f64).sqrt()
        } else {
            0.0
        };
        out[[uix, r_svd]] = cnt as f64;
        out[[uix, r_svd + 1]] = mean;
        out[[uix, r_svd + 2]] = std;
        for k in 0..du {
            out[[uix, r_svd + 3 + k]] = augmented.user_features.rows[[uix, k]];
        }
    }
    out
}

/// ECOD AUROC of fake users against real users over rating-behavior plus
/// side-feature vectors. Smaller means stealthier fakes.
pub fn ecod_auroc(
    augmented: &Dataset,
    true_fakes: &[usize],
    r_svd: usize,
    seed: u64,
) -> Result<f64> {
    let n = augmented.n_users();
    if true_fakes.is_empty() || true_fakes.len() >= n {
        return Err(Error::Validation(
            "ECOD needs at least one fake and one real user".into(),
        ));
    }
    let features = ecod_feature_matrix(augmented, r_svd, seed);
    let scores = ecod_scores(&features);
    let positives: Vec<bool> = (0..n).map(|u| true_fakes.contains(&u)).collect();
    Ok(auroc(&scores, &positives))
}

/// Distributions over rating values `1..=5` from all nonzero entries.
pub fn rating_distribution(ratings: &RatingMatrix) -> [f64; 5] {
    let mut counts = [0usize; 5];
    for (_, _, r) in ratings.iter_entries() {
        counts[(r - 1) as usize] += 1;
    }
    let total: usize = counts.iter().sum();
    let mut out = [0.0; 5];
    if total > 0 {
        for k in 0..5 {
            out[k] = counts[k] as f64 / total as f64;
        }
    }
    out
}

/// Total variation distance and Jensen-Shannon divergence (natural log)
/// between the rating-value distributions of two pools.
pub fn rating_divergences(real: &RatingMatrix, fake: &RatingMatrix) -> Result<(f64, f64)> {
    if real.observed() == 0 || fake.observed() == 0 {
        return Err(Error::Validation(
            "divergences need nonempty rating pools".into(),
        ));
    }
    let p = rating_distribution(real);
    let q = rating_distribution(fake);
    Ok(distribution_divergences(&p, &q))
}

pub fn distribution_divergences(p: &[f64; 5], q: &[f64; 5]) -> (f64, f64) {
    let tvd = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let kl = |a: &[f64; 5], m: &[f64; 5]| {
        a.iter()
            .zip(m)
            .map(|(&x, &mx)| if x > 0.0 { x * (x / mx).ln() } else { 0.0 })
            .sum::<f64>()
    };
    let mid = std::array::from_fn(|k| 0.5 * (p[k] + q[k]));
    let js = 0.5 * kl(p, &mid) + 0.5 * kl(q, &mid);
    (tvd, js)
}

/// One evaluation record for a round of one experiment run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub round: usize,
    pub seed: u64,
    pub target: usize,
    /// HR@k per victim kind.
    pub hr_at_k: BTreeMap<String, f64>,
    pub fap_precision: f64,
    pub fap_recall: f64,
    pub ecod_auroc: f64,
    pub tvd: f64,
    pub js: f64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let all_finite = self
            .hr_at_k
            .values()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.fap_precision.is_finite()
            && self.fap_recall.is_finite()
            && (0.0..=1.0).contains(&self.ecod_auroc)
            && (0.0..=1.0).contains(&self.tvd)
            && self.js.is_finite();
        if all_finite {
            Ok(())
        } else {
            Err(Error::Validation(format!("metrics out of range: {self:?}")))
        }
    }
}

#[allow(unused_imports)]
use Array1 as _Array1Used;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SideFeatureTable;
    use crate::victims::VictimKind;
    use ndarray::array;
    use rand::Rng;

    fn model_with_scores(scores: Array2<f64>, ratings: &RatingMatrix) -> VictimModel {
        VictimModel::from_scores(VictimKind::SvdMf, scores, ratings)
    }

    #[test]
    fn hit_ratio_counts_hits() {
        let ratings = RatingMatrix::new(3, 4);
        // target item 2; user 0 ranks it first, others do not reach top-1
        let scores = array![
            [0.0, 0.0, 9.0, 0.0],
            [9.0, 0.0, 0.0, 0.0],
            [0.0, 9.0, 0.0, 0.0]
        ];
        let model = model_with_scores(scores, &ratings);
        let hr = hit_ratio_at_k(&model, 2, 1, &[0, 1, 2]).unwrap();
        assert!((hr - 1.0 / 3.0).abs() < 1e-12);
        let hr5 = hit_ratio_at_k(&model, 2, 4, &[0, 1, 2]).unwrap();
        assert_eq!(hr5, 1.0);
        assert!(hit_ratio_at_k(&model, 2, 1, &[]).is_err());
    }

    #[test]
    fn hit_ratio_monotone_in_k() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let ratings = RatingMatrix::new(10, 15);
        let scores = Array2::from_shape_fn((10, 15), |_| rng.random::<f64>());
        let model = model_with_scores(scores, &ratings);
        let eligible: Vec<usize> = (0..10).collect();
        let mut prev = 0.0;
        for k in 1..=15 {
            let hr = hit_ratio_at_k(&model, 7, k, &eligible).unwrap();
            assert!(hr + 1e-12 >= prev, "k={k}: {hr} < {prev}");
            prev = hr;
        }
    }

    #[test]
    fn fap_disconnected_spam_component() {
        // 20 genuine users rating items 1..3, 5 fakes rating only item 0.
        let mut m = RatingMatrix::new(25, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for u in 0..20 {
            for i in 1..4 {
                if rng.random::<f64>() < 0.7 {
                    m.set(u, i, rng.random_range(1..=5)).unwrap();
                }
            }
        }
        for u in 20..25 {
            m.set(u, 0, 5).unwrap();
        }
        let fakes: Vec<usize> = (20..25).collect();
        let out = fap_detect(&m, &fakes, 0.2, 10, 7).unwrap();
        assert_eq!(out.seeds.len(), 1);
        assert_eq!(out.flagged.len(), 4);
        assert_eq!(out.precision, 1.0);
        assert_eq!(out.recall, 1.0);
        let mut remaining: Vec<usize> = fakes
            .iter()
            .cloned()
            .filter(|u| !out.seeds.contains(u))
            .collect();
        remaining.sort_unstable();
        let mut flagged = out.flagged.clone();
        flagged.sort_unstable();
        assert_eq!(flagged, remaining);
    }

    #[test]
    fn fap_zero_iterations_scores_nothing() {
        let mut m = RatingMatrix::new(6, 3);
        for u in 0..6 {
            m.set(u, 0, 5).unwrap();
        }
        let fakes = vec![4, 5];
        let out = fap_detect(&m, &fakes, 0.5, 0, 3).unwrap();
        assert!(out.flagged.is_empty());
        assert_eq!(out.precision, 0.0);
        assert_eq!(out.recall, 0.0);
    }

    #[test]
    fn fap_matches_hand_propagation_on_toy_graph() {
        // 8 users, 4 items; adjacency chosen to be hand-checkable.
        // user -> items:
        // u0: {0}, u1: {0,1}, u2: {1}, u3: {1,2}, u4: {2}, u5: {2,3}, u6: {3}, u7: {0,3}
        let edges: [&[usize]; 8] = [
            &[0],
            &[0, 1],
            &[1],
            &[1, 2],
            &[2],
            &[2, 3],
            &[3],
            &[0, 3],
        ];
        let mut m = RatingMatrix::new(8, 4);
        for (u, items) in edges.iter().enumerate() {
            for &i in *items {
                m.set(u, i, 4).unwrap();
            }
        }
        // force seed = user 0 by using a single-element fake set
        let out = fap_detect(&m, &[0], 1.0, 2, 5).unwrap();

        // hand-run the recurrence (seed u0 clamped to 1 after each step)
        let user_deg = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let item_users: [&[usize]; 4] = [&[0, 1, 7], &[1, 2, 3], &[3, 4, 5], &[5, 6, 7]];
        let mut p = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for _ in 0..2 {
            let mut pi = [0.0f64; 4];
            for (i, users) in item_users.iter().enumerate() {
                for &u in *users {
                    pi[i] += p[u] / user_deg[u];
                }
            }
            let mut next = [0.0f64; 8];
            for (i, users) in item_users.iter().enumerate() {
                for &u in *users {
                    next[u] += pi[i] / users.len() as f64;
                }
            }
            p = next;
            p[0] = 1.0;
        }
        for u in 0..8 {
            assert!(
                (out.scores[u] - p[u]).abs() < 1e-12,
                "user {u}: {} vs {}",
                out.scores[u],
                p[u]
            );
        }
    }

    #[test]
    fn auroc_separation_and_ties() {
        // perfect separation
        let scores = [5.0, 4.0, 1.0, 0.5];
        let labels = [true, true, false, false];
        assert_eq!(auroc(&scores, &labels), 1.0);
        // all identical -> 0.5
        let scores = [2.0, 2.0, 2.0, 2.0];
        assert_eq!(auroc(&scores, &labels), 0.5);
    }

    #[test]
    fn auroc_negation_complement() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..40).map(|k| k % 3 == 0).collect();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auroc(&scores, &labels);
        let b = auroc(&neg, &labels);
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ecod_matches_brute_force_oracle_on_toy() {
        let feats = array![
            [1.0, 10.0],
            [2.0, 9.0],
            [3.0, 8.0],
            [4.0, 7.0],
            [5.0, 6.0],
            [50.0, 1.0]
        ];
        let scores = ecod_scores(&feats);

        // brute-force oracle: direct ECDF enumeration per dimension
        let n = 6;
        let mut left = vec![0.0; n];
        let mut right = vec![0.0; n];
        let mut skewed = vec![0.0; n];
        for j in 0..2 {
            let col: Vec<f64> = (0..n).map(|u| feats[[u, j]]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let m2 = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let m3 = col.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
            let skew = m3 / m2.powf(1.5);
            for u in 0..n {
                let x = col[u];
                let le = col.iter().filter(|&&v| v <= x).count() as f64 / n as f64;
                let ge = col.iter().filter(|&&v| v >= x).count() as f64 / n as f64;
                left[u] += -le.ln();
                right[u] += -ge.ln();
                skewed[u] += if skew < 0.0 { -le.ln() } else { -ge.ln() };
            }
        }
        for u in 0..n {
            let expect = left[u].max(right[u]).max(skewed[u]);
            assert!(
                (scores[u] - expect).abs() < 1e-12,
                "user {u}: {} vs {expect}",
                scores[u]
            );
        }
        // the gross outlier scores highest
        let max_u = (0..n).max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        assert_eq!(max_u, Some(5));
    }

    #[test]
    fn ecod_constant_column_contributes_zero() {
        let feats = array![[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]];
        let with_const = ecod_scores(&feats);
        let feats_only = array![[1.0], [2.0], [3.0]];
        let without = ecod_scores(&feats_only);
        for u in 0..3 {
            assert!((with_const[u] - without[u]).abs() < 1e-12);
        }
    }

    #[test]
    fn ecod_invariant_under_positive_affine_transforms() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let feats = Array2::from_shape_fn((12, 3), |_| rng.random::<f64>());
        let base = ecod_scores(&feats);
        let mut transformed = feats.clone();
        for j in 0..3 {
            let a = 0.5 + rng.random::<f64>() * 3.0;
            let b = rng.random::<f64>() * 10.0 - 5.0;
            for u in 0..12 {
                transformed[[u, j]] = a * feats[[u, j]] + b;
            }
        }
        let got = ecod_scores(&transformed);
        for u in 0..12 {
            assert!((base[u] - got[u]).abs() < 1e-9);
        }
    }

    #[test]
    fn ecod_auroc_detects_planted_outliers() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut ratings = RatingMatrix::new(30, 20);
        for u in 0..25 {
            for i in 0..20 {
                if rng.random::<f64>() < 0.4 {
                    ratings.set(u, i, rng.random_range(2..=4)).unwrap();
                }
            }
        }
        // fakes: rate everything 5 (wildly unusual)
        for u in 25..30 {
            for i in 0..20 {
                ratings.set(u, i, 5).unwrap();
            }
        }
        let ds = Dataset {
            ratings,
            user_features: SideFeatureTable::new(Array2::zeros((30, 2))),
            item_features: SideFeatureTable::new(Array2::zeros((20, 2))),
            name: "toy".into(),
        };
        let fakes: Vec<usize> = (25..30).collect();
        let a = ecod_auroc(&ds, &fakes, 4, 3).unwrap();
        // identical fakes shield each other in the pooled ECDF, so the
        // separation is well above chance but not perfect
        assert!(a > 0.65, "auroc {a}");
    }

    #[test]
    fn divergences_identities() {
        let mut a = RatingMatrix::new(2, 3);
        a.set(0, 0, 1).unwrap();
        a.set(0, 1, 2).unwrap();
        let mut b = RatingMatrix::new(2, 3);
        b.set(0, 0, 1).unwrap();
        b.set(1, 1, 2).unwrap();
        let (tvd, js) = rating_divergences(&a, &b).unwrap();
        assert!(tvd.abs() < 1e-12 && js.abs() < 1e-12);

        // disjoint point masses: all-1s vs all-2s
        let mut ones = RatingMatrix::new(1, 3);
        ones.set(0, 0, 1).unwrap();
        ones.set(0, 1, 1).unwrap();
        let mut twos = RatingMatrix::new(1, 3);
        twos.set(0, 0, 2).unwrap();
        let (tvd, js) = rating_divergences(&ones, &twos).unwrap();
        assert!((tvd - 1.0).abs() < 1e-12);
        assert!((js - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn divergences_hand_evaluated_pair() {
        let p = [0.5, 0.5, 0.0, 0.0, 0.0];
        let q = [0.25, 0.25, 0.25, 0.25, 0.0];
        let (tvd, js) = distribution_divergences(&p, &q);
        assert!((tvd - 0.5).abs() < 1e-12);
        // direct summation oracle
        let m: [f64; 5] = std::array::from_fn(|k| 0.5 * (p[k] + q[k]));
        let mut expect = 0.0;
        for k in 0..5 {
            if p[k] > 0.0 {
                expect += 0.5 * p[k] * (p[k] / m[k]).ln();
            }
            if q[k] > 0.0 {
                expect += 0.5 * q[k] * (q[k] / m[k]).ln();
            }
        }
        assert!((js - expect).abs() < 1e-12);
        // symmetry and bounds
        let (tvd2, js2) = distribution_divergences(&q, &p);
        assert_eq!(tvd, tvd2);
        assert_eq!(js, js2);
        assert!(js <= 2f64.ln() + 1e-12);
    }
}
