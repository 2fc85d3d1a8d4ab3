use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_N_INIT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances to the own centroid.
    pub inertia: f64,
    /// Inertia after each Lloyd assignment step of the kept restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: each new centre is drawn with probability
/// proportional to the squared distance to the nearest existing one.
fn seed_centres(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            if d2[pick] == 0.0 {
                // Rounding walked past the end; take the last positive one.
                pick = d2.iter().rposition(|&d| d > 0.0).expect("total is positive");
            }
            pick
        } else {
            // Every point coincides with a centre; take an unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    chosen
}

fn assign(x: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = x
        .rows()
        .into_iter()
        .map(|r| {
            let (best, d) = centroids
                .rows()
                .into_iter()
                .enumerate()
                .map(|(c, m)| (c, sq_dist(r, m)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            inertia += d;
            best
        })
        .collect();
    (labels, inertia)
}

fn update(x: &Array2<f64>, labels: &[usize], previous: &Array2<f64>) -> Array2<f64> {
    let k = previous.nrows();
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        sums.row_mut(c).scaled_add(1.0, &x.row(i));
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            sums.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
        } else {
            // An empty cluster keeps its centre; it can only lower inertia later.
            sums.row_mut(c).assign(&previous.row(c));
        }
    }
    sums
}

fn lloyd(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> ClusterAssignment {
    let seeds = seed_centres(x, k, rng);
    let mut centroids = x.select(Axis(0), &seeds);
    let (mut labels, mut inertia) = assign(x, &centroids);
    let mut trace = vec![inertia];
    for _ in 0..MAX_ITERATIONS {
        centroids = update(x, &labels, &centroids);
        let (next, next_inertia) = assign(x, &centroids);
        trace.push(next_inertia);
        inertia = next_inertia;
        if next == labels {
            break;
        }
        labels = next;
    }
    ClusterAssignment {
        k,
        labels,
        centroids,
        inertia,
        trace,
    }
}

/// Best of `n_init` k-means++ restarts by inertia.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, n_init: usize) -> Result<ClusterAssignment> {
    if k == 0 || n_init == 0 {
        return Err(Error::config("k and n_init must be positive"));
    }
    if k > x.nrows() {
        return Err(Error::invalid(format!("K = {k} exceeds {} vectors", x.nrows())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("vectors contain non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterAssignment> = None;
    for _ in 0..n_init {
        let run = lloyd(x, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// Kneedle knee of a decreasing inertia curve: both axes scaled to [0, 1],
/// the knee maximises `(1 - y) - x`. Ties go to the smallest K.
pub fn elbow_select(ks: &[usize], inertias: &[f64]) -> Result<usize> {
    if ks.len() != inertias.len() {
        return Err(Error::Shape(format!("{} K values for {} inertias", ks.len(), inertias.len())));
    }
    if ks.len() < 3 {
        return Err(Error::InsufficientData("elbow selection needs at least 3 grid points".into()));
    }
    if ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("K grid must be strictly ascending"));
    }
    let (k0, k1) = (ks[0] as f64, ks[ks.len() - 1] as f64);
    let lo = inertias.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = inertias.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(ks[0]);
    }
    let mut best = (f64::NEG_INFINITY, ks[0]);
    for (&k, &v) in ks.iter().zip(inertias) {
        let x = (k as f64 - k0) / (k1 - k0);
        let y = (v - lo) / (hi - lo);
        let diff = (1.0 - y) - x;
        // A 1e-12 margin absorbs rounding on exactly linear curves.
        if diff > best.0 + 1e-12 {
            best = (diff, k);
        }
    }
    Ok(best.1)
}

/// Inertia per K and the kneedle choice.
pub fn elbow_sweep(x: &Array2<f64>, ks: &[usize], seed: u64, n_init: usize) -> Result<(Vec<f64>, usize)> {
    let inertias = ks
        .iter()
        .map(|&k| kmeans(x, k, seed, n_init).map(|a| a.inertia))
        .collect::<Result<Vec<_>>>()?;
    let k = elbow_select(ks, &inertias)?;
    Ok((inertias, k))
}

/// Coordinates on the top two principal components, by power iteration with
/// deflation. Each axis is signed so its largest-magnitude loading is
/// positive.
pub fn pca_2d(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Array2::zeros((n, 2));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let centred = x - &mean;
    let mut cov = centred.t().dot(&centred) / n as f64;
    let mut axes = Vec::new();
    for _ in 0..2 {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + i as f64 / d as f64);
        v /= v.dot(&v).sqrt();
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                break;
            }
            let next = &w / norm;
            let delta = (&next - &v).mapv(f64::abs).sum();
            v = next;
            lambda = norm;
            if delta < 1e-12 {
                break;
            }
        }
        let pivot = v.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        let outer = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        cov = cov - outer * lambda;
        axes.push(v);
    }
    let mut out = Array2::zeros((n, 2));
    for (j, a) in axes.iter().enumerate() {
        out.column_mut(j).assign(&centred.dot(a));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + if j == 0 { sep * truth[i] as f64 } else { 0.0 }
        });
        (x, truth)
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (x, truth) = blobs(400, 10.0, 1);
        let a = kmeans(&x, 2, 0, DEFAULT_N_INIT).unwrap();
        let agree = a.labels.iter().zip(&truth).filter(|(l, t)| l == t).count();
        let agree = agree.max(truth.len() - agree) as f64 / truth.len() as f64;
        assert!(agree >= 0.99, "{agree}");
    }

    #[test]
    fn k_equals_n_and_k_one() {
        let (x, _) = blobs(12, 3.0, 2);
        let a = kmeans(&x, 12, 0, 3).unwrap();
        assert_eq!(a.inertia, 0.0);
        let one = kmeans(&x, 1, 0, 3).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        for (c, m) in one.centroids.row(0).iter().zip(mean.iter()) {
            assert!((c - m).abs() < 1e-12);
        }
        assert!(kmeans(&x, 13, 0, 1).is_err());
    }

    #[test]
    fn lloyd_inertia_never_increases() {
        let (x, _) = blobs(300, 1.5, 3);
        for seed in 0..5 {
            let a = kmeans(&x, 5, seed, 1).unwrap();
            assert!(a.trace.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", a.trace);
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let (x, _) = blobs(100, 2.0, 4);
        assert_eq!(kmeans(&x, 4, 9, 5).unwrap(), kmeans(&x, 4, 9, 5).unwrap());
    }

    #[test]
    fn knee_examples() {
        let ks = [1, 2, 3, 4, 5, 6];
        assert_eq!(elbow_select(&ks, &[100.0, 40.0, 20.0, 18.0, 17.0, 16.0]).unwrap(), 3);
        assert_eq!(elbow_select(&ks, &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0]).unwrap(), 1);
        assert!(elbow_select(&[1, 2], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn knee_ignores_affine_rescaling() {
        let ks = [2, 3, 4, 5, 6, 7, 8];
        let curve = [90.0, 50.0, 33.0, 30.0, 28.0, 27.0, 26.5];
        let base = elbow_select(&ks, &curve).unwrap();
        for (a, b) in [(3.0, 7.0), (0.01, 1000.0), (250.0, -10.0)] {
            let scaled: Vec<f64> = curve.iter().map(|v| a * v + b).collect();
            assert_eq!(elbow_select(&ks, &scaled).unwrap(), base);
        }
    }

    #[test]
    fn pca_finds_the_dominant_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((500, 4), |(_, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * [5.0, 2.0, 0.5, 0.1][j]
        });
        let p = pca_2d(&x);
        let var = |c: usize| p.column(c).mapv(|v| v * v).mean().unwrap();
        assert!(var(0) > var(1) && var(1) > 1.0);
        let corr: f64 = p.column(0).iter().zip(x.column(0)).map(|(a, b)| a * b).sum();
        assert!(corr.abs() > 0.0);
    }
}
