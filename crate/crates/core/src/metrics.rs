//! Final-stage k-means and the external clustering scores (ACC, NMI, purity).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Mat;

const LLOYD_MAX_ITER: usize = 300;

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares of the kept restart.
    pub inertia: f64,
    /// Cluster means, one row per center.
    pub centers: DMatrix<f64>,
    /// Inertia of every restart, in restart order.
    pub restart_inertias: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding, `restarts` times; the restart
/// with the smallest inertia wins (earliest on ties).
///
/// Each row of `points` is one sample. Restart `r` draws from stream `r` of a
/// ChaCha generator keyed by `seed`, so the result does not depend on how
/// restarts are scheduled across threads.
pub fn kmeans(points: &Mat, k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "kmeans needs 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    if restarts == 0 {
        return Err(Error::invalid("kmeans needs at least one restart"));
    }
    let data = RowData::new(points);
    let runs: Vec<(Vec<usize>, DMatrix<f64>, f64)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(&data, k, &mut rng)
        })
        .collect();

    let restart_inertias: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let best = restart_inertias
        .iter()
        .enumerate()
        .fold(
            0,
            |best, (i, &v)| if v < restart_inertias[best] { i } else { best },
        );
    let (labels, centers, inertia) = runs.into_iter().nth(best).expect("restarts >= 1");
    Ok(KMeansFit {
        labels,
        inertia,
        centers,
        restart_inertias,
    })
}

struct RowData {
    n: usize,
    dim: usize,
    flat: Vec<f64>,
}

impl RowData {
    fn new(points: &Mat) -> Self {
        Self {
            n: points.rows(),
            dim: points.cols(),
            flat: points.to_row_major(),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.flat[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and distance of the nearest center; ties go to the lowest index.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(data: &RowData, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = Vec::with_capacity(k);
    centers.push(data.row(rng.random_range(0..data.n)).to_vec());
    let mut d2: Vec<f64> = (0..data.n)
        .map(|i| sq_dist(data.row(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = data.n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding pushing us past the last positive weight
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..data.n)
        };
        let c = data.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd(data: &RowData, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, DMatrix<f64>, f64) {
    let mut centers = plus_plus_init(data, k, rng);
    let mut labels: Vec<usize> = (0..data.n)
        .map(|i| nearest(data.row(i), &centers).0)
        .collect();

    for _ in 0..LLOYD_MAX_ITER {
        recompute_centers(data, k, &mut labels, &mut centers);
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let (j, _) = nearest(data.row(i), &centers);
            if j != *label {
                *label = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    recompute_centers(data, k, &mut labels, &mut centers);

    let inertia = (0..data.n)
        .map(|i| sq_dist(data.row(i), &centers[labels[i]]))
        .sum();
    let center_mat = DMatrix::from_fn(k, data.dim, |r, c| centers[r][c]);
    (labels, center_mat, inertia)
}

/// Means of the current assignment. An empty cluster is reseeded at the
/// point farthest from its own center, which then joins that cluster.
fn recompute_centers(data: &RowData, k: usize, labels: &mut [usize], centers: &mut [Vec<f64>]) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let mut far = (usize::MAX, -1.0);
        for i in 0..data.n {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(data.row(i), &centers[labels[i]]);
            if d > far.1 {
                far = (i, d);
            }
        }
        if far.0 == usize::MAX {
            // every cluster is a singleton; cannot happen with k <= n
            break;
        }
        labels[far.0] = empty;
        centers[empty] = data.row(far.0).to_vec();
    }

    let mut sums = vec![vec![0.0; data.dim]; k];
    let mut counts = vec![0usize; k];
    for i in 0..data.n {
        counts[labels[i]] += 1;
        for (s, v) in sums[labels[i]].iter_mut().zip(data.row(i)) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            centers[j] = sums[j].iter().map(|s| s * inv).collect();
        }
    }
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns `assignment` with `assignment[row] = col`. Shortest augmenting
/// path formulation with row/column potentials, O(k^3).
pub fn hungarian(cost: &Mat) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::shape(
            "hungarian",
            format!("cost must be square, got {:?}", cost.shape()),
        ));
    }
    // 1-based arrays; index 0 is the virtual start column.
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
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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

    let mut assignment = vec![0; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Counts `table[p][t]` of samples with predicted label `p` and true label `t`.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "label vectors differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("label vectors are empty"));
    }
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    Ok(table)
}

/// Best-map clustering accuracy. Non-square contingency tables are padded
/// with zeros so every cluster and class can be matched.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let size = table.len().max(table[0].len());
    let mut cost = DMatrix::zeros(size, size);
    for (p, row) in table.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            cost[(p, t)] = -(c as f64);
        }
    }
    let assignment = hungarian(&Mat::from_dmatrix(cost)?)?;
    let matched: usize = assignment
        .iter()
        .enumerate()
        .filter(|&(p, &t)| p < table.len() && t < table[0].len())
        .map(|(p, &t)| table[p][t])
        .sum();
    Ok(matched as f64 / pred.len() as f64)
}

/// Mutual information normalized by the geometric mean of the two entropies.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let row_sums: Vec<f64> = table
        .iter()
        .map(|r| r.iter().sum::<usize>() as f64)
        .collect();
    let col_sums: Vec<f64> = (0..table[0].len())
        .map(|t| table.iter().map(|r| r[t]).sum::<usize>() as f64)
        .collect();

    let entropy = |sums: &[f64]| -> f64 {
        sums.iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| {
                let p = c / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_pred = entropy(&row_sums);
    let h_truth = entropy(&col_sums);
    if h_pred == 0.0 || h_truth == 0.0 {
        return Ok(if h_pred == 0.0 && h_truth == 0.0 {
            1.0
        } else {
            0.0
        });
    }

    let mut mi = 0.0;
    for (p, row) in table.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (row_sums[p] * col_sums[t])).ln();
            }
        }
    }
    Ok((mi / (h_pred * h_truth).sqrt()).clamp(0.0, 1.0))
}

/// Fraction of samples belonging to the majority class of their cluster.
pub fn purity(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let majority: usize = table
        .iter()
        .map(|r| r.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(majority as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub acc: f64,
    pub nmi: f64,
    pub purity: f64,
}

pub fn score(pred: &[usize], truth: &[usize]) -> Result<Scores> {
    Ok(Scores {
        acc: accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        purity: purity(pred, truth)?,
    })
}
