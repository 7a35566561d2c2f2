use ndarray::{Array1, Array2, Axis};

use super::ProbeError;

/// Eigendecomposition `M = U diag(values) U^T` with `values` descending and
/// eigenvectors in the columns of `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
    pub sweeps: usize,
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn sym_eig(m: &Array2<f64>) -> Result<SymEig, ProbeError> {
    let (n, c) = m.dim();
    if n != c {
        return Err(ProbeError::Input(format!("matrix is {n}x{c}, not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::Input("matrix has non-finite entries".into()));
    }
    let norm = frob(m);
    let asym = m
        .indexed_iter()
        .map(|((i, j), &v)| (v - m[[j, i]]).abs())
        .fold(0.0, f64::max);
    if asym > 1e-8 * norm.max(f64::MIN_POSITIVE) {
        return Err(ProbeError::Input(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    // row-major copies; rows of `vt` are the eigenvectors
    let mut a: Vec<f64> = m.iter().copied().collect();
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }
    let off = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        s.sqrt()
    };
    let target = 1e-10 * norm;
    let mut sweeps = 0;
    while off(&a) > target && sweeps < 100 {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                // A <- J^T A J with J the rotation in the (p, q) plane
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    let (np, nq) = (cs * akp - sn * akq, sn * akp + cs * akq);
                    a[k * n + p] = np;
                    a[p * n + k] = np;
                    a[k * n + q] = nq;
                    a[q * n + k] = nq;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                let (vp, vq) = vt.split_at_mut(q * n);
                for (x, y) in vp[p * n..(p + 1) * n].iter_mut().zip(&mut vq[..n]) {
                    let (xp, xq) = (*x, *y);
                    *x = cs * xp - sn * xq;
                    *y = sn * xp + cs * xq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for (r, &v) in vt[i * n..(i + 1) * n].iter().enumerate() {
            vectors[[r, col]] = v;
        }
    }
    Ok(SymEig { values, vectors, sweeps })
}

/// Top three principal axes of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca3 {
    pub mean: Array1<f64>,
    /// 3 x d, orthonormal rows (zero rows when the data has rank < 3).
    pub axes: Array2<f64>,
    /// Variance along each axis.
    pub variances: [f64; 3],
    /// Fraction of total variance along each axis.
    pub explained: [f64; 3],
    /// n x 3 projected coordinates.
    pub coords: Array2<f64>,
}

pub fn pca3(points: &Array2<f64>) -> Result<Pca3, ProbeError> {
    let (n, d) = points.dim();
    if n < 4 || d < 3 {
        return Err(ProbeError::Input(format!("pca3 needs at least 4 points of dimension 3, got {n}x{d}")));
    }
    let mean = points.mean_axis(Axis(0)).expect("non-empty");
    let centered = points - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n as f64;
    let cov = (&cov + &cov.t()) * 0.5;
    let eig = sym_eig(&cov)?;
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    let tiny = 1e-12 * total.max(f64::MIN_POSITIVE);
    let mut axes = Array2::zeros((3, d));
    let mut variances = [0.0; 3];
    let mut explained = [0.0; 3];
    let mut rank = 0;
    for k in 0..3 {
        let lam = eig.values[k];
        if lam <= tiny {
            continue;
        }
        rank += 1;
        let mut v = eig.vectors.column(k).to_owned();
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        axes.row_mut(k).assign(&v);
        variances[k] = lam;
        explained[k] = if total > 0.0 { lam / total } else { 0.0 };
    }
    if rank < 3 {
        log::warn!("point cloud has rank {rank} < 3; padding with zero axes");
    }
    let coords = centered.dot(&axes.t());
    Ok(Pca3 {
        mean,
        axes,
        variances,
        explained,
        coords,
    })
}
