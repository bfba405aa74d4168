//! Metrics against ground truth, the cross-validation accuracy used to rank
//! runs, and a k-means baseline.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner_solver::{fit_probe, probe_predict};
use crate::meta_opt::{sample_splits, TrainConfig};
use crate::task_encoder::{argmax, encode_with, TaskEncoder};

/// Counts indexed `[predicted][true]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(pred: &[usize], truth: &[usize], k: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Input(format!("label vectors differ in length: {} vs {}", pred.len(), truth.len())));
        }
        let mut counts = Array2::zeros((k, k));
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= k || t >= k {
                return Err(Error::Data(format!("label ({p}, {t}) out of range for K={k}")));
            }
            counts[[p, t]] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }
}

/// Minimum-cost perfect assignment on a square matrix: `perm[row] = column`.
/// Shortest augmenting paths with row/column potentials, `O(K^3)`.
pub fn hungarian_match(cost: ArrayView2<'_, f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // 1-based bookkeeping with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[col_owner[j] - 1] = j - 1;
    }
    perm
}

/// Permutation `perm[pred_class] = true_class` maximizing agreement.
pub fn best_mapping(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<usize>> {
    let confusion = ConfusionMatrix::new(pred, truth, k)?;
    let cost = confusion.counts.mapv(|c| -(c as f64));
    Ok(hungarian_match(cost.view()))
}

/// Best agreement over relabelings of `pred`.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Undefined("accuracy of an empty labeling".into()));
    }
    let confusion = ConfusionMatrix::new(pred, truth, k)?;
    let cost = confusion.counts.mapv(|c| -(c as f64));
    let perm = hungarian_match(cost.view());
    let hits: u64 = perm.iter().enumerate().map(|(p, &t)| confusion.counts[[p, t]]).sum();
    Ok(hits as f64 / pred.len() as f64)
}

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Pair-counting adjusted Rand index.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!("label vectors differ in length: {} vs {}", pred.len(), truth.len())));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::Undefined(format!("ARI needs at least two samples, got {n}")));
    }
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = Array2::<u64>::zeros((kp, kt));
    for (&p, &t) in pred.iter().zip(truth) {
        table[[p, t]] += 1;
    }
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let rows: f64 = table.sum_axis(Axis(1)).iter().map(|&c| pairs(c)).sum();
    let cols: f64 = table.sum_axis(Axis(0)).iter().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max_index = 0.5 * (rows + cols);
    if max_index == expected {
        // both partitions trivial (all singletons or one block)
        return Ok(if index == max_index { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}

/// Per-class sample counts of a hard labeling.
pub fn class_counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &l in labels {
        if l < k {
            counts[l] += 1;
        }
    }
    counts
}

/// Mean over `folds` fresh split pairs of the held-out agreement between a
/// probe fitted on the encoder's train labels and the encoder's own test
/// labels (hard labels on both sides).
pub fn cross_validation_accuracy<R: Rng + ?Sized>(
    encoder: &TaskEncoder,
    phi1_hat: ArrayView2<'_, f64>,
    phi2: ArrayView2<'_, f64>,
    config: &TrainConfig,
    folds: usize,
    rng: &mut R,
) -> Result<f64> {
    if folds == 0 {
        return Err(Error::Config("need at least one fold".into()));
    }
    let n = phi2.nrows();
    let subset = config.subset_size.min(n);
    let w1 = encoder.prototypes()?;
    let mut total = 0.0;
    for _ in 0..folds {
        let split = sample_splits(n, subset, config.train_fraction, rng)?;
        total += fold_accuracy(w1.view(), encoder.gamma(), phi1_hat, phi2, config, &split.train, &split.test)?;
    }
    Ok(total / folds as f64)
}

fn fold_accuracy(
    w1: ArrayView2<'_, f64>,
    gamma: f64,
    phi1_hat: ArrayView2<'_, f64>,
    phi2: ArrayView2<'_, f64>,
    config: &TrainConfig,
    train: &[usize],
    test: &[usize],
) -> Result<f64> {
    let tau_train = encode_with(w1, gamma, phi1_hat.select(Axis(0), train).view())?;
    let tau_test = encode_with(w1, gamma, phi1_hat.select(Axis(0), test).view())?;
    let x_train = phi2.select(Axis(0), train);
    let traj = fit_probe(
        x_train.view(),
        tau_train.view(),
        config.inner_settings(),
        Array2::zeros((w1.nrows(), phi2.ncols())),
    )?;
    let pred = probe_predict(traj.final_weights().view(), phi2.select(Axis(0), test).view());
    let hits = pred
        .axis_iter(Axis(0))
        .zip(tau_test.axis_iter(Axis(0)))
        .filter(|(p, t)| argmax(p.view()) == argmax(t.view()))
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Maximum Lloyd iterations per k-means run.
pub const KMEANS_MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansRun {
    pub seed: u64,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    pub acc: Option<f64>,
    pub ari: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansReport {
    pub k: usize,
    pub runs: Vec<KMeansRun>,
    /// Labels of the lowest-inertia run.
    pub labels: Vec<usize>,
    pub mean_acc: Option<f64>,
    pub mean_ari: Option<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or [`KMEANS_MAX_ITERS`] is reached.
pub fn kmeans_single(data: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<KMeansRun> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("need 1 <= K <= N, got K={k}, N={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut nearest: Vec<f64> = data.rows().into_iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // every point already coincides with a centroid
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), centroids.row(c)));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for (i, row) in data.rows().into_iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(row, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed || iterations == KMEANS_MAX_ITERS {
            break;
        }
        iterations += 1;

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, row) in data.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &row);
            counts[labels[i]] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = &sums.row(c) / count as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        // empty clusters take the point farthest from its own centroid
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = data
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| (i, sq_dist(r, centroids.row(labels[i]))))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                counts[labels[far]] -= 1;
                counts[c] = 1;
                labels[far] = c;
                centroids.row_mut(c).assign(&data.row(far));
            }
        }
    }
    let inertia = data.rows().into_iter().zip(&labels).map(|(r, &l)| sq_dist(r, centroids.row(l))).sum();
    Ok(KMeansRun { seed, labels, inertia, iterations, acc: None, ari: None })
}

/// `n_runs` independent k-means runs with seeds `seed..seed + n_runs`,
/// scored against `truth` when given.
pub fn kmeans(
    data: ArrayView2<'_, f64>,
    k: usize,
    n_runs: usize,
    seed: u64,
    truth: Option<&[usize]>,
) -> Result<KMeansReport> {
    if n_runs == 0 {
        return Err(Error::Config("need at least one k-means run".into()));
    }
    let mut runs = Vec::with_capacity(n_runs);
    for r in 0..n_runs as u64 {
        let mut run = kmeans_single(data, k, seed + r)?;
        if let Some(truth) = truth {
            let kk = k.max(truth.iter().max().map_or(0, |m| m + 1));
            run.acc = Some(clustering_accuracy(&run.labels, truth, kk)?);
            run.ari = Some(adjusted_rand_index(&run.labels, truth)?);
        }
        runs.push(run);
    }
    let mean = |f: fn(&KMeansRun) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = runs.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mean_acc = mean(|r| r.acc);
    let mean_ari = mean(|r| r.ari);
    let best = runs.iter().min_by(|a, b| a.inertia.total_cmp(&b.inertia)).expect("at least one run");
    Ok(KMeansReport { k, labels: best.labels.clone(), runs, mean_acc, mean_ari })
}
