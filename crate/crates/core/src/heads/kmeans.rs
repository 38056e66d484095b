//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const SHIFT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Effective cluster count after empty clusters were dropped.
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Total within-cluster squared distance to the final centroids.
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    /// How many of the requested clusters came up empty and were removed.
    pub dropped: usize,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == cluster)
            .map(|(i, _)| i)
    }
}

pub(crate) fn sq_dist(point: &[f32], centroid: &[f64]) -> f64 {
    // four independent accumulators so the loop vectorizes
    let mut acc = [0.0f64; 4];
    let (pc, pr) = point.split_at(point.len() - point.len() % 4);
    let (cc, cr) = centroid.split_at(pc.len());
    for (p, c) in pc.chunks_exact(4).zip(cc.chunks_exact(4)) {
        for l in 0..4 {
            let d = p[l] as f64 - c[l];
            acc[l] += d * d;
        }
    }
    let tail: f64 = pr
        .iter()
        .zip(cr)
        .map(|(&p, &c)| {
            let d = p as f64 - c;
            d * d
        })
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_points(features: &[Vec<f32>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidClusterCount(k));
    }
    if k > features.len() {
        return Err(Error::TooManyClusters {
            k,
            points: features.len(),
        });
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch("feature vectors differ in length".into()));
    }
    Ok(dim)
}

fn seed_plus_plus(features: &[Vec<f32>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to_f64 = |i: usize| features[i].iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut chosen = vec![rng.random_range(0..features.len())];
    let mut centroids = vec![to_f64(chosen[0])];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every point coincides with a center; the duplicate cluster will be dropped
            (0..features.len()).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        let c = to_f64(next);
        for (w, f) in d2.iter_mut().zip(features) {
            *w = w.min(sq_dist(f, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Nearest centroid per point, ties to the lowest index. Returns the inertia.
fn assign(features: &[Vec<f32>], centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (label, f) in labels.iter_mut().zip(features) {
        let (best, dist) = centroids
            .iter()
            .enumerate()
            .map(|(c, cen)| (c, sq_dist(f, cen)))
            .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
        *label = best;
        inertia += dist;
    }
    inertia
}

fn means(features: &[Vec<f32>], labels: &[usize], k: usize, dim: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &l) in features.iter().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(f) {
            *s += v as f64;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(mut s, c)| {
            (c > 0).then(|| {
                s.iter_mut().for_each(|v| *v /= c as f64);
                s
            })
        })
        .collect()
}

/// Clusters `features` into at most `k` groups. Deterministic given `seed`.
pub fn kmeans(features: &[Vec<f32>], k: usize, seed: u64) -> Result<ClusterAssignment> {
    let dim = check_points(features, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(features, k, &mut rng);
    let mut labels = vec![0usize; features.len()];
    let mut history = Vec::new();
    let mut dropped = 0;
    let mut iterations = 0;

    loop {
        iterations += 1;
        history.push(assign(features, &centroids, &mut labels));

        let updated = means(features, &labels, centroids.len(), dim);
        if updated.iter().any(Option::is_none) {
            // drop empty clusters and compact the labels
            let mut remap = vec![usize::MAX; updated.len()];
            let mut kept = Vec::new();
            for (old, m) in updated.iter().enumerate() {
                if m.is_some() {
                    remap[old] = kept.len();
                    kept.push(old);
                }
            }
            dropped += updated.len() - kept.len();
            labels.iter_mut().for_each(|l| *l = remap[*l]);
            centroids = kept.iter().map(|&i| centroids[i].clone()).collect();
        }
        let updated: Vec<Vec<f64>> = updated.into_iter().flatten().collect();
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < SHIFT_TOLERANCE || iterations >= MAX_ITERATIONS {
            break;
        }
    }

    let inertia = features
        .iter()
        .zip(&labels)
        .map(|(f, &l)| sq_dist(f, &centroids[l]))
        .sum();
    debug_assert!(
        history
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0)),
        "inertia increased: {history:?}"
    );
    Ok(ClusterAssignment {
        k: centroids.len(),
        labels,
        centroids,
        inertia,
        inertia_history: history,
        dropped,
        iterations,
    })
}

/// Runs [`kmeans`] once per seed and keeps the lowest inertia (first wins ties).
pub fn kmeans_best_of(features: &[Vec<f32>], k: usize, seeds: &[u64]) -> Result<ClusterAssignment> {
    let mut best: Option<ClusterAssignment> = None;
    for &s in seeds {
        let run = kmeans(features, k, s)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.ok_or(Error::EmptyInput("no seeds given"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(v: &[f32]) -> Vec<Vec<f32>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let f = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![-1.0, 1.0]];
        let a = kmeans(&f, 1, 9).unwrap();
        assert_eq!(a.labels, vec![0, 0, 0]);
        assert!((a.centroids[0][0] - 1.0).abs() < 1e-12);
        assert!((a.centroids[0][1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn separates_two_obvious_groups() {
        let a = kmeans(&pts(&[0.0, 0.1, 10.0, 10.1]), 2, 3).unwrap();
        assert_eq!(a.labels[0], a.labels[1]);
        assert_eq!(a.labels[2], a.labels[3]);
        assert_ne!(a.labels[0], a.labels[2]);
        // brute force: best 2-partition is {0,.1},{10,10.1} with SSE 2 * 0.005
        assert!((a.inertia - 0.01).abs() < 1e-6);
    }

    #[test]
    fn k_equals_points_has_zero_inertia() {
        let a = kmeans(&pts(&[4.0, -1.0, 2.5, 9.0]), 4, 0).unwrap();
        assert_eq!(a.k, 4);
        assert_eq!(a.inertia, 0.0);
        let mut l = a.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_bad_k() {
        assert!(matches!(
            kmeans(&pts(&[1.0, 2.0]), 3, 0),
            Err(Error::TooManyClusters { k: 3, points: 2 })
        ));
        assert!(kmeans(&pts(&[1.0]), 0, 0).is_err());
    }

    #[test]
    fn duplicate_points_drop_clusters() {
        let a = kmeans(&pts(&[1.0, 1.0, 1.0, 5.0]), 3, 4).unwrap();
        assert_eq!(a.k, 2);
        assert_eq!(a.dropped, 1);
        assert_eq!(a.inertia, 0.0);
        assert!(a.labels.iter().all(|&l| l < a.k));
    }

    proptest! {
        #[test]
        fn reproducible_and_monotone(v in proptest::collection::vec(-100.0f32..100.0, 3..40),
                                     k in 1usize..4, seed in any::<u64>()) {
            let f = pts(&v);
            let a = kmeans(&f, k, seed).unwrap();
            let b = kmeans(&f, k, seed).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert!(a.inertia <= *a.inertia_history.last().unwrap() + 1e-9);
            prop_assert!(a.labels.iter().all(|&l| l < a.k));
        }
    }
}
