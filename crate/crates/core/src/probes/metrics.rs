//! Partition agreement scores: pairwise F1, adjusted Rand index, adjusted
//! mutual information (arithmetic normalization, permutation-model expectation).

use std::collections::HashMap;

use super::ProbeError;

/// Dense relabeling of arbitrary labels to `0..k` in order of first appearance.
pub fn densify<L: Eq + std::hash::Hash + Copy>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Contingency counts `n[i][j]` with row sums `a` (pred) and column sums `b` (truth).
struct Contingency {
    n: usize,
    cells: Vec<Vec<u64>>,
    a: Vec<u64>,
    b: Vec<u64>,
}

impl Contingency {
    fn new(pred: &[usize], truth: &[usize]) -> Result<Self, ProbeError> {
        if pred.len() != truth.len() {
            return Err(ProbeError::Input(format!(
                "partitions have different lengths ({} vs {})",
                pred.len(),
                truth.len()
            )));
        }
        let (p, kp) = densify(pred);
        let (t, kt) = densify(truth);
        let mut cells = vec![vec![0u64; kt]; kp];
        for (&i, &j) in p.iter().zip(&t) {
            cells[i][j] += 1;
        }
        let a = cells.iter().map(|r| r.iter().sum()).collect();
        let b = (0..kt).map(|j| cells.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            n: pred.len(),
            cells,
            a,
            b,
        })
    }

    fn pairs(x: u64) -> f64 {
        (x * x.saturating_sub(1) / 2) as f64
    }

    fn sum_pairs_cells(&self) -> f64 {
        self.cells.iter().flatten().map(|&x| Self::pairs(x)).sum()
    }
}

/// Pair-counting F1: precision over pairs together in `pred`, recall over
/// pairs together in `truth`.
pub fn pairwise_f1(pred: &[usize], truth: &[usize]) -> Result<f64, ProbeError> {
    let c = Contingency::new(pred, truth)?;
    let both = c.sum_pairs_cells();
    let in_pred: f64 = c.a.iter().map(|&x| Contingency::pairs(x)).sum();
    let in_truth: f64 = c.b.iter().map(|&x| Contingency::pairs(x)).sum();
    Ok(match (in_pred == 0.0, in_truth == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let (p, r) = (both / in_pred, both / in_truth);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    })
}

/// Adjusted Rand index in pair-count form.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64, ProbeError> {
    let c = Contingency::new(pred, truth)?;
    let (kp, kt) = (c.a.len(), c.b.len());
    if (kp == kt && (kp <= 1 || kp == c.n)) || c.n <= 1 {
        return Ok(1.0);
    }
    let index = c.sum_pairs_cells();
    let sa: f64 = c.a.iter().map(|&x| Contingency::pairs(x)).sum();
    let sb: f64 = c.b.iter().map(|&x| Contingency::pairs(x)).sum();
    let total = Contingency::pairs(c.n as u64);
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_info(c: &Contingency) -> f64 {
    let n = c.n as f64;
    let mut mi = 0.0;
    for (i, row) in c.cells.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (c.a[i] as f64 * c.b[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Expected mutual information of two random partitions with the given
/// cluster sizes under the hypergeometric (permutation) model.
pub fn expected_mutual_info(a: &[u64], b: &[u64], n: u64) -> f64 {
    let lf: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, k| {
            *acc += (k as f64).ln();
            Some(*acc)
        }))
        .collect();
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let term = (nij as f64 / nf) * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                let lp = lf[ai as usize] + lf[bj as usize] + lf[(n - ai) as usize] + lf[(n - bj) as usize]
                    - lf[n as usize]
                    - lf[nij as usize]
                    - lf[(ai - nij) as usize]
                    - lf[(bj - nij) as usize]
                    - lf[(n + nij - ai - bj) as usize];
                emi += term * lp.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with arithmetic-mean normalization.
pub fn ami(pred: &[usize], truth: &[usize]) -> Result<f64, ProbeError> {
    let c = Contingency::new(pred, truth)?;
    let (kp, kt) = (c.a.len(), c.b.len());
    if (kp == kt && (kp <= 1 || kp == c.n)) || c.n <= 1 {
        return Ok(1.0);
    }
    let n = c.n as f64;
    let mi = mutual_info(&c);
    let emi = expected_mutual_info(&c.a, &c.b, c.n as u64);
    let norm = 0.5 * (entropy(&c.a, n) + entropy(&c.b, n));
    let mut denom = norm - emi;
    let eps = f64::EPSILON;
    denom = if denom < 0.0 { denom.min(-eps) } else { denom.max(eps) };
    Ok((mi - emi) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ClusterScores {
    pub f1: f64,
    pub ari: f64,
    pub ami: f64,
}

pub fn score_all(pred: &[usize], truth: &[usize]) -> Result<ClusterScores, ProbeError> {
    Ok(ClusterScores {
        f1: pairwise_f1(pred, truth)?,
        ari: ari(pred, truth)?,
        ami: ami(pred, truth)?,
    })
}
