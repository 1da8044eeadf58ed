//! The late-fusion block: consensus partition, per-view rotations, and the
//! view weights `alpha` (reconstruction) and `beta` (alignment).
//!
//! Joint objective over all views:
//!
//! ```text
//! sum_v alpha_v^2 R_v - lambda tr(H sum_v beta_v H_m^(v)T W^(v))
//! s.t. H H^T = I, W W^T = I, alpha on the simplex, ||beta||_2 = 1, beta >= 0
//! ```

use nalgebra::DMatrix;

use crate::deep::ViewFactorization;
use crate::error::{Error, Result};
use crate::matrix::{polar_factor, row_orthonormality_residual, Mat};

#[derive(Clone, Debug)]
pub struct FusionState {
    /// Consensus partition, k x n with orthonormal rows.
    pub h: Mat,
    /// One k x k orthonormal rotation per view.
    pub w: Vec<Mat>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// How far a [`FusionState`] is from its feasible set.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintResiduals {
    /// `||H H^T - I||_F`
    pub consensus: f64,
    /// `||W W^T - I||_F` per view.
    pub rotations: Vec<f64>,
    /// `|sum alpha - 1|`
    pub alpha_sum: f64,
    pub alpha_min: f64,
    /// `| ||beta||_2 - 1 |`
    pub beta_norm: f64,
    pub beta_min: f64,
}

impl ConstraintResiduals {
    /// Largest violation across all constraints.
    pub fn max(&self) -> f64 {
        let mut worst = self.consensus.max(self.alpha_sum).max(self.beta_norm);
        worst = self.rotations.iter().fold(worst, |a, &b| a.max(b));
        worst.max(-self.alpha_min).max(-self.beta_min)
    }
}

impl FusionState {
    pub fn residuals(&self) -> ConstraintResiduals {
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        ConstraintResiduals {
            consensus: row_orthonormality_residual(&self.h),
            rotations: self.w.iter().map(row_orthonormality_residual).collect(),
            alpha_sum: (self.alpha.iter().sum::<f64>() - 1.0).abs(),
            alpha_min: min(&self.alpha),
            beta_norm: (self.beta.iter().map(|b| b * b).sum::<f64>().sqrt() - 1.0).abs(),
            beta_min: min(&self.beta),
        }
    }
}

/// A block update that may have hit a non-unique maximizer, in which case
/// `value` is the previous iterate.
#[derive(Clone, Debug)]
pub struct BlockUpdate<T> {
    pub value: T,
    pub degenerate: bool,
}

fn check_partitions(
    op: &'static str,
    partitions: &[&Mat],
    rotations: &[Mat],
    h_shape: (usize, usize),
) -> Result<()> {
    if partitions.is_empty() || partitions.len() != rotations.len() {
        return Err(Error::shape(
            op,
            format!(
                "{} partitions, {} rotations",
                partitions.len(),
                rotations.len()
            ),
        ));
    }
    let k = h_shape.0;
    for (v, (p, w)) in partitions.iter().zip(rotations).enumerate() {
        if p.shape() != h_shape || w.shape() != (k, k) {
            return Err(Error::shape(
                op,
                format!(
                    "view {v}: partition {:?}, rotation {:?}, expected {h_shape:?}",
                    p.shape(),
                    w.shape()
                ),
            ));
        }
    }
    Ok(())
}

/// `U = sum_v beta_v H_m^(v)T W^(v)`, n x k.
pub fn fused_partition(partitions: &[&Mat], rotations: &[Mat], beta: &[f64]) -> DMatrix<f64> {
    let (k, n) = partitions[0].shape();
    let mut u = DMatrix::zeros(n, k);
    for ((p, w), &b) in partitions.iter().zip(rotations).zip(beta) {
        if b != 0.0 {
            u += (p.as_dmatrix().transpose() * w.as_dmatrix()) * b;
        }
    }
    u
}

/// Consensus partition maximizing `tr(H U)` over row-orthonormal `H`.
/// Keeps `prev_h` when `U` is rank-deficient.
pub fn update_consensus(
    partitions: &[&Mat],
    rotations: &[Mat],
    beta: &[f64],
    prev_h: &Mat,
) -> Result<BlockUpdate<Mat>> {
    check_partitions("update_consensus", partitions, rotations, prev_h.shape())?;
    if beta.len() != partitions.len() {
        return Err(Error::shape(
            "update_consensus",
            "beta length differs from view count",
        ));
    }
    let (polar, degenerate) = polar_factor(&fused_partition(partitions, rotations, beta))?;
    Ok(if degenerate {
        BlockUpdate {
            value: prev_h.clone(),
            degenerate: true,
        }
    } else {
        BlockUpdate {
            value: Mat::from_dmatrix(polar.transpose())?,
            degenerate: false,
        }
    })
}

/// Rotation maximizing `tr(W^T Q)` with `Q = beta_v H_m^(v) H^T`.
/// Keeps `prev_w` when `Q` is rank-deficient.
pub fn update_rotation(
    partition: &Mat,
    h: &Mat,
    beta_v: f64,
    prev_w: &Mat,
) -> Result<BlockUpdate<Mat>> {
    let k = h.rows();
    if partition.shape() != h.shape() || prev_w.shape() != (k, k) {
        return Err(Error::shape(
            "update_rotation",
            format!(
                "partition {:?}, consensus {:?}, rotation {:?}",
                partition.shape(),
                h.shape(),
                prev_w.shape()
            ),
        ));
    }
    let q = partition.as_dmatrix() * h.as_dmatrix().transpose() * beta_v;
    let (w, degenerate) = polar_factor(&q)?;
    Ok(if degenerate {
        BlockUpdate {
            value: prev_w.clone(),
            degenerate: true,
        }
    } else {
        BlockUpdate {
            value: Mat::from_dmatrix(w)?,
            degenerate: false,
        }
    })
}

/// Minimizer of `sum_v alpha_v^2 R_v` over the simplex: `alpha_v ∝ 1 / R_v`.
/// Views with zero loss share all the weight equally.
pub fn update_alpha(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::invalid("update_alpha needs at least one view"));
    }
    if let Some(bad) = losses.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::invalid(format!(
            "reconstruction losses must be finite and >= 0, got {bad}"
        )));
    }
    let zeros = losses.iter().filter(|&&r| r == 0.0).count();
    if zeros > 0 {
        let share = 1.0 / zeros as f64;
        return Ok(losses
            .iter()
            .map(|&r| if r == 0.0 { share } else { 0.0 })
            .collect());
    }
    let inv: Vec<f64> = losses.iter().map(|r| 1.0 / r).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / total).collect())
}

/// Per-view alignment scores `f_v = tr(H_m^(v)T W^(v) H)`.
pub fn alignment_scores(partitions: &[&Mat], rotations: &[Mat], h: &Mat) -> Result<Vec<f64>> {
    check_partitions("alignment_scores", partitions, rotations, h.shape())?;
    Ok(partitions
        .iter()
        .zip(rotations)
        .map(|(p, w)| (w.as_dmatrix() * h.as_dmatrix()).dot(p.as_dmatrix()))
        .collect())
}

/// Maximizer of `f^T beta` on the nonnegative part of the unit sphere:
/// negative scores are clamped to zero before normalizing. When no score is
/// positive the weights fall back to uniform and the update is flagged.
pub fn update_beta(
    partitions: &[&Mat],
    rotations: &[Mat],
    h: &Mat,
) -> Result<BlockUpdate<Vec<f64>>> {
    let f = alignment_scores(partitions, rotations, h)?;
    Ok(beta_from_scores(&f))
}

pub fn beta_from_scores(f: &[f64]) -> BlockUpdate<Vec<f64>> {
    let clamped: Vec<f64> = f.iter().map(|&v| v.max(0.0)).collect();
    let norm = clamped.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        BlockUpdate {
            value: clamped.iter().map(|v| v / norm).collect(),
            degenerate: false,
        }
    } else {
        let uniform = 1.0 / (f.len() as f64).sqrt();
        BlockUpdate {
            value: vec![uniform; f.len()],
            degenerate: true,
        }
    }
}

/// The joint objective for the current state.
pub fn objective(views: &[ViewFactorization], fusion: &FusionState, lambda: f64) -> Result<f64> {
    if views.len() != fusion.w.len()
        || views.len() != fusion.alpha.len()
        || views.len() != fusion.beta.len()
    {
        return Err(Error::shape(
            "objective",
            "view count differs from fusion state",
        ));
    }
    let reconstruction: f64 = views
        .iter()
        .zip(&fusion.alpha)
        .map(|(vf, a)| a * a * vf.reconstruction_loss())
        .sum();
    let partitions: Vec<&Mat> = views.iter().map(ViewFactorization::partition).collect();
    let scores = alignment_scores(&partitions, &fusion.w, &fusion.h)?;
    let alignment: f64 = scores.iter().zip(&fusion.beta).map(|(f, b)| f * b).sum();
    Ok(reconstruction - lambda * alignment)
}
