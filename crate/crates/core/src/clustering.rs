//! K-means with random restarts, cluster-to-truth matching and binary
//! classification metrics.
//!
//! Cluster labels are 1-based throughout (`1..=K`), matching the label files.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansOptions {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            k: 2,
            restarts: 20,
            max_iters: 300,
            seed: 0,
        }
    }
}

/// One Lloyd run from a single initialization.
#[derive(Clone, Debug)]
pub struct KMeansRun {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// Labels of the best restart.
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub inertias: Vec<f64>,
    pub best_restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Assigns each point to its nearest centroid (lowest index on ties) and
/// returns the total squared distance.
fn assign(points: &Matrix, centroids: &Matrix, labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for i in 0..points.rows() {
        let p = points.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..centroids.rows() {
            let d = sq_dist(p, centroids.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
        inertia += best_d;
    }
    inertia
}

/// Within-cluster sum of squared deviations for 1-based `labels`.
pub fn inertia_of(points: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    if labels.len() != points.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} points",
            labels.len(),
            points.rows()
        )));
    }
    let d = points.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 || l > k {
            return Err(Error::InvalidArgument(format!("label {l} outside 1..={k}")));
        }
        counts[l - 1] += 1;
        for (s, x) in sums.row_mut(l - 1).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let n = counts[l - 1] as f64;
        total += points
            .row(i)
            .iter()
            .zip(sums.row(l - 1))
            .map(|(x, s)| (x - s / n) * (x - s / n))
            .sum::<f64>();
    }
    Ok(total)
}

/// Lloyd iterations from `k` distinct data points chosen uniformly at random.
pub fn lloyd(points: &Matrix, k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> KMeansRun {
    let (n, d) = points.shape();
    let init = sample(rng, n, k);
    let mut centroids = Matrix::zeros(k, d);
    for (c, i) in init.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(points.row(i));
    }
    let mut labels = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut inertia_trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let inertia = assign(points, &centroids, &mut next, &mut dists);
        inertia_trace.push(inertia);
        if next == labels {
            break;
        }
        labels.copy_from_slice(&next);

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // empty cluster: re-seed from the point farthest from its centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .unwrap_or(0);
                taken[far] = true;
                dists[far] = 0.0;
                centroids.row_mut(c).copy_from_slice(points.row(far));
            }
        }
    }
    let inertia = *inertia_trace.last().unwrap_or(&0.0);
    KMeansRun {
        labels: labels.iter().map(|&l| l + 1).collect(),
        centroids,
        inertia,
        inertia_trace,
    }
}

pub fn kmeans(points: &Matrix, opts: &KMeansOptions) -> Result<KMeansResult> {
    let n = points.rows();
    if opts.k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if opts.k > n {
        return Err(Error::InvalidArgument(format!("K = {} exceeds {n} points", opts.k)));
    }
    if opts.restarts == 0 {
        return Err(Error::InvalidArgument("at least one restart is required".into()));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("embedding has non-finite entries".into()));
    }
    let runs: Vec<KMeansRun> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            lloyd(points, opts.k, opts.max_iters, &mut rng)
        })
        .collect();
    let inertias: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    let best_restart = inertias
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v < inertias[best] { i } else { best });
    let best = runs.into_iter().nth(best_restart).expect("restarts > 0");
    Ok(KMeansResult {
        labels: best.labels,
        centroids: best.centroids,
        inertia: best.inertia,
        inertias,
        best_restart,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatch {
    /// `mapping[p - 1]` is the truth label assigned to predicted label `p`.
    pub mapping: Vec<usize>,
    pub matched: Vec<usize>,
    pub accuracy: f64,
}

fn check_labels(labels: &[usize], k: usize, what: &str) -> Result<()> {
    match labels.iter().find(|&&l| l == 0 || l > k) {
        Some(l) => Err(Error::InvalidArgument(format!("{what} label {l} outside 1..={k}"))),
        None => Ok(()),
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Minimum-cost perfect assignment of a square cost matrix (Hungarian
/// method with potentials). Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Relabels predicted clusters to maximize agreement with `truth`.
///
/// Exhaustive over all permutations (identity first, first maximum kept)
/// for `k <= 6`, Hungarian assignment above.
pub fn match_labels(pred: &[usize], truth: &[usize], k: usize) -> Result<LabelMatch> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    check_labels(pred, k, "predicted")?;
    check_labels(truth, k, "truth")?;
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p - 1][t - 1] += 1;
    }
    let mapping: Vec<usize> = if k <= 6 {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = perm.clone();
        let mut best_agree = 0;
        let mut first = true;
        loop {
            let agree: usize = perm.iter().enumerate().map(|(p, &t)| counts[p][t]).sum();
            if first || agree > best_agree {
                best_agree = agree;
                best.copy_from_slice(&perm);
                first = false;
            }
            if !next_permutation(&mut perm) {
                break;
            }
        }
        best
    } else {
        let cost: Vec<Vec<f64>> = counts
            .iter()
            .map(|row| row.iter().map(|&c| -(c as f64)).collect())
            .collect();
        min_cost_assignment(&cost)
    };
    let mapping: Vec<usize> = mapping.into_iter().map(|t| t + 1).collect();
    let matched: Vec<usize> = pred.iter().map(|&p| mapping[p - 1]).collect();
    let agree = matched.iter().zip(truth).filter(|(a, b)| a == b).count();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        agree as f64 / truth.len() as f64
    };
    Ok(LabelMatch {
        mapping,
        matched,
        accuracy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A zero denominator forced precision or recall to 0.
    pub degenerate: bool,
}

/// Confusion-matrix metrics with `positive` as the positive class.
pub fn binary_metrics(matched: &[usize], truth: &[usize], positive: usize) -> Result<BinaryMetrics> {
    if matched.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truth labels",
            matched.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in matched.iter().zip(truth) {
        if p == t {
            correct += 1;
        }
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let degenerate = precision.is_none() || recall.is_none();
    let (precision, recall) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    let f1 = if precision > 0.0 && recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let accuracy = ratio(correct, truth.len()).unwrap_or(0.0);
    Ok(BinaryMetrics {
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

#[derive(Clone, Debug)]
pub struct ClusteringReport {
    pub labels: Vec<usize>,
    pub matched_labels: Vec<usize>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub inertias: Vec<f64>,
    pub best_restart: usize,
    pub degenerate: bool,
}

/// K-means on the rows of `points`, matched against `truth` and scored.
pub fn cluster_and_score(
    points: &Matrix,
    truth: &[usize],
    opts: &KMeansOptions,
    positive: usize,
) -> Result<ClusteringReport> {
    let km = kmeans(points, opts)?;
    let arity = truth.iter().copied().max().unwrap_or(0).max(opts.k);
    let m = match_labels(&km.labels, truth, arity)?;
    let metrics = binary_metrics(&m.matched, truth, positive)?;
    Ok(ClusteringReport {
        labels: km.labels,
        matched_labels: m.matched,
        accuracy: m.accuracy,
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        inertias: km.inertias,
        best_restart: km.best_restart,
        degenerate: metrics.degenerate,
    })
}
