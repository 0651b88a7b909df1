//! Clustering accuracy, latent reconstruction error and sample-quality
//! proxies (MMD and mode coverage) for low-dimensional data.

use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::networks::NetworkSet;
use crate::prior::GmmPrior;

/// Counts of (predicted cluster, true class) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    clusters: usize,
    classes: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    pub fn new(clusters: usize, classes: usize) -> Self {
        Self {
            clusters,
            classes,
            counts: vec![0; clusters * classes],
            total: 0,
        }
    }

    pub fn from_counts(clusters: usize, classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != clusters * classes {
            return Err(Error::ShapeMismatch {
                op: "contingency",
                lhs: vec![counts.len()],
                rhs: vec![clusters, classes],
            });
        }
        let total = counts.iter().sum();
        Ok(Self {
            clusters,
            classes,
            counts,
            total,
        })
    }

    pub fn from_labels(predicted: &[usize], truth: &[usize], clusters: usize, classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut t = Self::new(clusters, classes);
        for (&p, &c) in predicted.iter().zip(truth) {
            if p >= clusters {
                return Err(Error::IndexOutOfRange {
                    what: "predicted cluster",
                    index: p,
                    bound: clusters,
                });
            }
            if c >= classes {
                return Err(Error::IndexOutOfRange {
                    what: "true class",
                    index: c,
                    bound: classes,
                });
            }
            t.counts[p * classes + c] += 1;
            t.total += 1;
        }
        Ok(t)
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, cluster: usize, class: usize) -> u64 {
        self.counts[cluster * self.classes + class]
    }
}

/// Best one-to-one cluster→class matching, as a fraction of all samples.
/// Clusters left without a class (when there are more clusters than classes)
/// contribute nothing.
pub fn clustering_accuracy(table: &ContingencyTable) -> Result<f64> {
    if table.total == 0 {
        return Err(Error::InvalidArgument(
            "clustering accuracy of an empty table".into(),
        ));
    }
    let (k, c) = (table.clusters, table.classes);
    // The solver wants rows <= columns.
    let (rows, cols, cost): (usize, usize, Vec<i64>) = if k <= c {
        (k, c, table.counts.iter().map(|&v| -(v as i64)).collect())
    } else {
        let mut t = vec![0; k * c];
        for a in 0..k {
            for b in 0..c {
                t[b * k + a] = -(table.get(a, b) as i64);
            }
        }
        (c, k, t)
    };
    let assignment = hungarian(rows, cols, &cost);
    let matched: i64 = assignment
        .iter()
        .enumerate()
        .map(|(r, &col)| -cost[r * cols + col])
        .sum();
    Ok(matched as f64 / table.total as f64)
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`),
/// by the shortest augmenting path form of the Hungarian method. Returns the
/// chosen column per row.
pub fn hungarian(rows: usize, cols: usize, cost: &[i64]) -> Vec<usize> {
    assert!(rows <= cols, "hungarian: rows must not exceed columns");
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials; column 0 is a virtual start.
    let mut u = vec![0i64; rows + 1];
    let mut v = vec![0i64; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// `argmax_k q(y = k | z)` with `z` the encoder mean; ties go to the lowest
/// index.
pub fn assign_clusters(
    prior: &GmmPrior,
    nets: &NetworkSet,
    store: &ParameterStore,
    x: &Tensor,
) -> Result<Vec<usize>> {
    let means = nets.encode_mean(store, x)?;
    Ok((0..means.rows())
        .map(|i| argmax(&prior.log_membership(store, means.row(i))))
        .collect())
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean squared difference over all entries.
pub fn latent_mse(mean: &Tensor, z: &Tensor) -> Result<f64> {
    if mean.shape() != z.shape() {
        return Err(Error::ShapeMismatch {
            op: "latent_mse",
            lhs: mean.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    let s: f64 = mean
        .data()
        .iter()
        .zip(z.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / mean.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased squared MMD with a kernel averaging RBFs over `bandwidths`
/// (`k(a, b) = mean_h exp(-|a - b|^2 / (2 h^2))`), so `k(a, a) = 1`.
pub fn mmd_rbf(real: &Tensor, fake: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    if real.cols() != fake.cols() {
        return Err(Error::ShapeMismatch {
            op: "mmd_rbf",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    let (n, m) = (real.rows(), fake.rows());
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument(format!(
            "mmd_rbf needs at least 2 samples per side, got {n} and {m}"
        )));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "mmd_rbf: bandwidths must be positive, got {bandwidths:?}"
        )));
    }
    let coef: Vec<f64> = bandwidths.iter().map(|h| -0.5 / (h * h)).collect();
    let kernel = |a: &[f64], b: &[f64]| {
        let d = sq_dist(a, b);
        coef.iter().map(|c| (c * d).exp()).sum::<f64>() / coef.len() as f64
    };
    let within = |t: &Tensor| {
        let r = t.rows();
        let mut s = 0.0;
        for i in 0..r {
            for j in i + 1..r {
                s += kernel(t.row(i), t.row(j));
            }
        }
        2.0 * s / (r * (r - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += kernel(real.row(i), fake.row(j));
        }
    }
    Ok(within(real) + within(fake) - 2.0 * cross / (n * m) as f64)
}

/// Median pairwise distance of the pooled sample times `{0.5, 1, 2}`.
/// At most `max_points` rows of each input enter the median.
pub fn median_heuristic_bandwidths(real: &Tensor, fake: &Tensor, max_points: usize) -> Vec<f64> {
    let take = |t: &Tensor| (0..t.rows().min(max_points)).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
    let mut pts = take(real);
    pts.extend(take(fake));
    let mut d = Vec::with_capacity(pts.len() * pts.len() / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(&pts[i], &pts[j]).sqrt());
        }
    }
    let med = if d.is_empty() {
        1.0
    } else {
        d.sort_by(f64::total_cmp);
        let m = d[d.len() / 2];
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    vec![0.5 * med, med, 2.0 * med]
}

/// Fraction of `centers` with at least `min_hits` samples within `radius`.
pub fn mode_coverage(fake: &Tensor, centers: &[Vec<f64>], radius: f64, min_hits: usize) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("mode_coverage: no centers".into()));
    }
    let r2 = radius * radius;
    let covered = centers
        .iter()
        .filter(|c| {
            (0..fake.rows())
                .filter(|&i| sq_dist(fake.row(i), c) <= r2)
                .count()
                >= min_hits
        })
        .count();
    Ok(covered as f64 / centers.len() as f64)
}

/// One evaluation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub losses: LossBreakdown,
    pub acc: f64,
    pub latent_mse: f64,
    pub mmd: f64,
    /// Only defined for datasets with known mode centers.
    pub mode_coverage: Option<f64>,
}
