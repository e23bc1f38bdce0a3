//! Lloyd's k-means with seeded k-means++ initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance; ties resolve to the
/// lowest index.
pub fn assign_cluster(point: &[f64], centroids: &[Vec<f64>]) -> Result<usize> {
    if centroids.is_empty() {
        return Err(Error::invalid("assign_cluster: empty centroid set"));
    }
    let mut best = 0usize;
    let mut best_d = dist2(point, &centroids[0]);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = dist2(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

fn kmeanspp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a centroid
            rng.gen_range(0..points.len())
        } else {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if r <= acc {
                    idx = i;
                    break;
                }
            }
            idx
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd's iterations from seeded k-means++ until the assignment reaches a
/// fixpoint or 100 iterations. Empty clusters keep their previous centroid.
pub fn fit_kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::invalid("fit_kmeans: k must be positive"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "fit_kmeans: {} points for k={k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(points, k, &mut rng);
    let mut assign: Vec<usize> = vec![usize::MAX; points.len()];

    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = assign_cluster(p, &centroids)?;
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
    }
    Ok(centroids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k_points_become_their_own_centroids() {
        let points = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![-3.0, 9.0]];
        let centroids = fit_kmeans(&points, 3, 1).unwrap();
        assert!(inertia(&points, &centroids) < 1e-12);
    }

    #[test]
    fn two_separated_blobs_recover_blob_means() {
        // Oracle: per-blob arithmetic means.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut points = Vec::new();
        for _ in 0..50 {
            points.push(vec![rng.gen::<f64>() * 0.5, rng.gen::<f64>() * 0.5]);
        }
        for _ in 0..50 {
            points.push(vec![10.0 + rng.gen::<f64>() * 0.5, 10.0 + rng.gen::<f64>() * 0.5]);
        }
        let mean = |ps: &[Vec<f64>]| {
            let mut m = vec![0.0; 2];
            for p in ps {
                m[0] += p[0];
                m[1] += p[1];
            }
            m.iter().map(|v| v / ps.len() as f64).collect::<Vec<_>>()
        };
        let m0 = mean(&points[..50]);
        let m1 = mean(&points[50..]);
        let mut centroids = fit_kmeans(&points, 2, 3).unwrap();
        centroids.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        for (c, m) in centroids.iter().zip([m0, m1]) {
            for (a, b) in c.iter().zip(&m) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn duplicate_points_collapse() {
        let points = vec![vec![2.0, 2.0]; 8];
        let centroids = fit_kmeans(&points, 3, 5).unwrap();
        // Brute-force oracle: every assignment must be distance 0.
        for p in &points {
            let a = assign_cluster(p, &centroids).unwrap();
            let d: f64 = p.iter().zip(&centroids[a]).map(|(x, y)| (x - y) * (x - y)).sum();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn fewer_points_than_k_errors() {
        let points = vec![vec![0.0]; 2];
        assert!(fit_kmeans(&points, 3, 0).is_err());
    }

    #[test]
    fn assign_ties_choose_lowest_index() {
        let centroids = vec![vec![0.0], vec![2.0]];
        assert_eq!(assign_cluster(&[0.0], &centroids).unwrap(), 0);
        assert_eq!(assign_cluster(&[1.0], &centroids).unwrap(), 0); // midpoint
        assert_eq!(assign_cluster(&[1.5], &centroids).unwrap(), 1);
    }

    #[test]
    fn assignment_matches_exhaustive_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let centroids: Vec<Vec<f64>> =
            (0..6).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
        for _ in 0..200 {
            let p: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
            let got = assign_cluster(&p, &centroids).unwrap();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, c) in centroids.iter().enumerate() {
                let d: f64 = p.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn lloyd_inertia_is_non_increasing() {
        // Re-run the loop manually and track inertia across iterations.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let points: Vec<Vec<f64>> =
            (0..120).map(|_| (0..3).map(|_| rng.gen::<f64>() * 4.0).collect()).collect();
        let mut centroids = super::kmeanspp_init(&points, 4, &mut rng);
        let mut last = inertia(&points, &centroids);
        for _ in 0..20 {
            let assign: Vec<usize> =
                points.iter().map(|p| assign_cluster(p, &centroids).unwrap()).collect();
            let mut sums = vec![vec![0.0; 3]; 4];
            let mut counts = vec![0usize; 4];
            for (p, &a) in points.iter().zip(&assign) {
                counts[a] += 1;
                for j in 0..3 {
                    sums[a][j] += p[j];
                }
            }
            for c in 0..4 {
                if counts[c] > 0 {
                    for j in 0..3 {
                        centroids[c][j] = sums[c][j] / counts[c] as f64;
                    }
                }
            }
            let now = inertia(&points, &centroids);
            assert!(now <= last + 1e-9, "inertia increased: {last} -> {now}");
            last = now;
        }
    }
}
