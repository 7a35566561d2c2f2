//! Brute-force partition agreement scores, written from the definitions:
//! pair enumeration for F1 and ARI, and chance terms averaged over every
//! permutation of the second labeling.

#![allow(dead_code)]

use std::collections::HashMap;

/// Every set partition of `n` elements as a restricted growth string.
pub fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for l in 0..=max + 1 {
            if cur.is_empty() && l > 0 {
                break;
            }
            cur.push(l);
            let next = if cur.len() == 1 { 0 } else { max.max(l) };
            rec(cur, next, n, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return vec![vec![]];
    }
    rec(&mut Vec::new(), 0, n, &mut out);
    out
}

pub fn n_clusters(p: &[usize]) -> usize {
    let mut v = p.to_vec();
    v.sort();
    v.dedup();
    v.len()
}

/// (pairs together in both, together in pred, together in truth, all pairs)
pub fn pair_counts(pred: &[usize], truth: &[usize]) -> (u64, u64, u64, u64) {
    let (mut both, mut p, mut t, mut all) = (0, 0, 0, 0);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let sp = pred[i] == pred[j];
            let st = truth[i] == truth[j];
            both += (sp && st) as u64;
            p += sp as u64;
            t += st as u64;
            all += 1;
        }
    }
    (both, p, t, all)
}

pub fn f1(pred: &[usize], truth: &[usize]) -> f64 {
    let (both, p, t, _) = pair_counts(pred, truth);
    if p == 0 && t == 0 {
        return 1.0;
    }
    if p == 0 || t == 0 {
        return 0.0;
    }
    let (pr, rc) = (both as f64 / p as f64, both as f64 / t as f64);
    if pr + rc == 0.0 {
        0.0
    } else {
        2.0 * pr * rc / (pr + rc)
    }
}

fn entropy_of(labels: &[usize]) -> f64 {
    let mut c: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *c.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    c.values().map(|&k| -(k as f64 / n) * (k as f64 / n).ln()).sum()
}

/// `H(A) + H(B) - H(A, B)`.
pub fn mutual_info(a: &[usize], b: &[usize]) -> f64 {
    let joint: Vec<usize> = a.iter().zip(b).map(|(&x, &y)| x * 1000 + y).collect();
    (entropy_of(a) + entropy_of(b) - entropy_of(&joint)).max(0.0)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn sorted_sizes(p: &[usize]) -> Vec<usize> {
    let mut c: HashMap<usize, usize> = HashMap::new();
    for &l in p {
        *c.entry(l).or_default() += 1;
    }
    let mut v: Vec<usize> = c.into_values().collect();
    v.sort();
    v
}

fn canonical(sizes: &[usize]) -> Vec<usize> {
    sizes.iter().enumerate().flat_map(|(i, &s)| std::iter::repeat(i).take(s)).collect()
}

/// Averages of `sum C(n_ij, 2)` and MI over all relabelings `b o pi`;
/// both depend only on the two cluster-size profiles, so results are cached.
pub struct ChanceCache {
    perms: HashMap<usize, Vec<Vec<usize>>>,
    memo: HashMap<(Vec<usize>, Vec<usize>), (f64, f64)>,
}

impl ChanceCache {
    pub fn new() -> Self {
        Self {
            perms: HashMap::new(),
            memo: HashMap::new(),
        }
    }

    pub fn expected(&mut self, a: &[usize], b: &[usize]) -> (f64, f64) {
        let key = (sorted_sizes(a), sorted_sizes(b));
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let (ca, cb) = (canonical(&key.0), canonical(&key.1));
        let n = ca.len();
        let perms = self.perms.entry(n).or_insert_with(|| permutations(n));
        let (mut idx, mut mi) = (0.0, 0.0);
        for p in perms.iter() {
            let shuffled: Vec<usize> = p.iter().map(|&i| cb[i]).collect();
            idx += pair_counts(&ca, &shuffled).0 as f64;
            mi += mutual_info(&ca, &shuffled);
        }
        let v = (idx / perms.len() as f64, mi / perms.len() as f64);
        self.memo.insert(key, v);
        v
    }
}

fn degenerate(pred: &[usize], truth: &[usize]) -> bool {
    let (kp, kt) = (n_clusters(pred), n_clusters(truth));
    pred.len() <= 1 || (kp == kt && (kp <= 1 || kp == pred.len()))
}

pub fn ari(pred: &[usize], truth: &[usize], cache: &mut ChanceCache) -> f64 {
    if degenerate(pred, truth) {
        return 1.0;
    }
    let (both, p, t, _) = pair_counts(pred, truth);
    let expected = cache.expected(pred, truth).0;
    let max = 0.5 * (p + t) as f64;
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (both as f64 - expected) / (max - expected)
}

pub fn ami(pred: &[usize], truth: &[usize], cache: &mut ChanceCache) -> f64 {
    if degenerate(pred, truth) {
        return 1.0;
    }
    let mi = mutual_info(pred, truth);
    let emi = cache.expected(pred, truth).1;
    let norm = 0.5 * (entropy_of(pred) + entropy_of(truth));
    let mut denom = norm - emi;
    denom = if denom < 0.0 { denom.min(-f64::EPSILON) } else { denom.max(f64::EPSILON) };
    (mi - emi) / denom
}
