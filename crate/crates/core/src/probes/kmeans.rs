use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ProbeError;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub n_init: usize,
    pub max_iter: usize,
    /// Relative tolerance; scaled by the mean per-feature variance of the data.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            n_init: 10,
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    pub n_iter: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row<'a>(x: &'a ArrayView2<'_, f64>, i: usize) -> &'a [f64] {
    let c = x.ncols();
    &x.as_slice().expect("standard layout")[i * c..(i + 1) * c]
}

/// Greedy k-means++: each new center is the best of `2 + ln k` candidates
/// drawn proportionally to squared distance.
fn plus_plus(x: &ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = x.dim();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centers = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(row(x, i), row(x, first))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut r = rng.gen::<f64>() * total;
                let mut pick = n - 1;
                for (i, &w) in closest.iter().enumerate() {
                    if r < w {
                        pick = i;
                        break;
                    }
                    r -= w;
                }
                pick
            } else {
                rng.gen_range(0..n)
            };
            let dist: Vec<f64> = (0..n)
                .map(|i| closest[i].min(sq_dist(row(x, i), row(x, cand))))
                .collect();
            let pot: f64 = dist.iter().sum();
            if best.as_ref().map_or(true, |b| pot < b.0) {
                best = Some((pot, cand, dist));
            }
        }
        let (_, cand, dist) = best.expect("at least one trial");
        centers.row_mut(c).assign(&x.row(cand));
        closest = dist;
    }
    centers
}

fn assign(x: &ArrayView2<'_, f64>, centers: &Array2<f64>, labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let k = centers.nrows();
    let cs = centers.as_slice().expect("standard layout");
    let d = centers.ncols();
    let mut inertia = 0.0;
    for i in 0..x.nrows() {
        let xi = row(x, i);
        let (mut bj, mut bd) = (0, f64::INFINITY);
        for j in 0..k {
            let dd = sq_dist(xi, &cs[j * d..(j + 1) * d]);
            if dd < bd {
                bj = j;
                bd = dd;
            }
        }
        labels[i] = bj;
        dists[i] = bd;
        inertia += bd;
    }
    inertia
}

fn lloyd(x: &ArrayView2<'_, f64>, mut centers: Array2<f64>, cfg: &KMeansConfig, tol: f64) -> Partition {
    let (n, d) = x.dim();
    let k = centers.nrows();
    let mut labels = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut n_iter = 0;
    for it in 0..cfg.max_iter {
        n_iter = it + 1;
        trace.push(assign(x, &centers, &mut labels, &mut dists));
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut s = sums.row_mut(labels[i]);
            for (a, &b) in s.iter_mut().zip(row(x, i)) {
                *a += b;
            }
        }
        // empty clusters take the points farthest from their current centers
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i] && counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                taken[i] = true;
                let old = labels[i];
                counts[old] -= 1;
                for (s, &v) in sums.row_mut(old).iter_mut().zip(row(x, i)) {
                    *s -= v;
                }
                sums.row_mut(j).assign(&x.row(i));
                counts[j] = 1;
                labels[i] = j;
                dists[i] = 0.0;
            }
        }
        let mut new = centers.clone();
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                new.row_mut(j).assign(&sums.row(j).mapv(|v| v / c));
            }
        }
        let shift: f64 = (&new - &centers).mapv(|v| v * v).sum();
        centers = new;
        if shift <= tol {
            break;
        }
    }
    let inertia = assign(x, &centers, &mut labels, &mut dists);
    trace.push(inertia);
    Partition {
        labels,
        centers,
        inertia,
        n_iter,
        inertia_trace: trace,
    }
}

/// k-means with k-means++ seeding and the best of `n_init` restarts.
pub fn kmeans(points: &Array2<f64>, k: usize, rng_seed: u64, cfg: &KMeansConfig) -> Result<Partition, ProbeError> {
    let (n, d) = points.dim();
    if k < 2 {
        return Err(ProbeError::Input(format!("k must be at least 2, got {k}")));
    }
    if n < k {
        return Err(ProbeError::Input(format!("{n} points cannot form {k} clusters")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::Input("non-finite point".into()));
    }
    let x = points.as_standard_layout();
    let x = x.view();
    let mean_var = if n > 0 && d > 0 {
        let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
        (0..d)
            .map(|j| x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / d as f64
    } else {
        0.0
    };
    let tol = cfg.tol * mean_var;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut best: Option<Partition> = None;
    for _ in 0..cfg.n_init.max(1) {
        let init = plus_plus(&x, k, &mut rng);
        let p = lloyd(&x, init, cfg, tol);
        if best.as_ref().map_or(true, |b| p.inertia < b.inertia) {
            best = Some(p);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separated_pairs() {
        let x = array![[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]];
        let p = kmeans(&x, 2, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(p.labels[0], p.labels[1]);
        assert_eq!(p.labels[2], p.labels[3]);
        assert_ne!(p.labels[0], p.labels[2]);
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let x = array![[0.0], [1.0], [5.0], [9.0], [9.5]];
        let p = kmeans(&x, 5, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(p.inertia, 0.0);
        let mut l = p.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn duplicate_points_fewer_than_k() {
        let x = array![[1.0], [1.0], [1.0], [1.0], [2.0]];
        let p = kmeans(&x, 3, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(p.inertia, 0.0);
        assert!(p.centers.iter().all(|v| v.is_finite()));
        assert_ne!(p.labels[0], p.labels[4]);
    }

    #[test]
    fn bad_inputs() {
        let x = array![[0.0], [1.0]];
        assert!(kmeans(&x, 1, 0, &KMeansConfig::default()).is_err());
        assert!(kmeans(&x, 3, 0, &KMeansConfig::default()).is_err());
    }
}
