use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn sq_dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Empty clusters keep their
/// previous center. Returns `k` centers.
pub fn kmeans<const D: usize>(
    points: &[[f64; D]],
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<Vec<[f64; D]>> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= k <= {} points, got k = {k}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iterations {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = (0..k)
                .min_by(|&i, &j| sq_dist(p, &centers[i]).total_cmp(&sq_dist(p, &centers[j])))
                .expect("k > 0");
        }
        let mut sums = vec![[0.0; D]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for d in 0..D {
                sums[a][d] += p[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..D {
                    centers[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
        }
    }
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..50 {
            let e = i as f64 * 1e-3;
            pts.push([e, 0.0]);
            pts.push([10.0 + e, 10.0]);
        }
        let mut c = kmeans(&pts, 2, 20, 3).unwrap();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((c[0][0] - 0.0245).abs() < 1e-9 && c[0][1] == 0.0);
        assert!((c[1][0] - 10.0245).abs() < 1e-9 && c[1][1] == 10.0);
    }

    #[test]
    fn deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(-1.0..0.0), 0.5])
            .collect();
        let a = kmeans(&pts, 16, 10, 7).unwrap();
        assert_eq!(a, kmeans(&pts, 16, 10, 7).unwrap());
        for c in &a {
            assert!((0.0..=1.0).contains(&c[0]) && (-1.0..=0.0).contains(&c[1]) && c[2] == 0.5);
        }
        assert!(kmeans(&pts[..3], 4, 1, 0).is_err());
    }
}
