//! The alternating optimization loop: layer-wise pretraining, then repeated
//! sweeps over consensus, per-view factorizations, rotations and weights,
//! then k-means on the consensus partition.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::alignment::{
    objective, update_alpha, update_beta, update_consensus, update_rotation, ConstraintResiduals,
    FusionState,
};
use crate::data::MultiViewDataset;
use crate::deep::{pretrain_view, LayerDims, ViewFactorization};
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::metrics::{kmeans, score, Scores};
use crate::semi_nmf::DEFAULT_PRETRAIN_ITERS;

pub const DEFAULT_MAX_ITER: usize = 150;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_KMEANS_RESTARTS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    /// Weight of the alignment term.
    pub lambda: f64,
    pub dims: LayerDims,
    pub max_iter: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    pub kmeans_restarts: usize,
    pub pretrain_iters: usize,
    pub seed: u64,
    /// Apply a plain semi-NMF step to `H_m` before the alignment-aware one.
    pub warmup_partition: bool,
}

impl HyperParams {
    pub fn new(lambda: f64, dims: LayerDims) -> Self {
        Self {
            lambda,
            dims,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            kmeans_restarts: DEFAULT_KMEANS_RESTARTS,
            pretrain_iters: DEFAULT_PRETRAIN_ITERS,
            seed: 0,
            warmup_partition: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.kmeans_restarts == 0 || self.pretrain_iters == 0 {
            return Err(Error::invalid(
                "kmeans_restarts and pretrain_iters must be >= 1",
            ));
        }
        Ok(())
    }
}

/// `[2^-12, 2^-11, ..., 2^5]`
pub fn lambda_grid() -> Vec<f64> {
    (-12..=5).map(|e| 2f64.powi(e)).collect()
}

/// Two-layer schemes `[l_1, k]` with `l_1 in {4k, 5k, 6k}`, then three-layer
/// schemes `[l_1, l_2, k]` with `l_1 in {8k, 10k, 12k}`, `l_2 in {4k, 5k, 6k}`.
pub fn layer_schemes(k: usize) -> Vec<LayerDims> {
    let mut out = Vec::with_capacity(12);
    for l1 in [4, 5, 6] {
        out.push(LayerDims::new(vec![l1 * k, k], k).expect("valid scheme"));
    }
    for l1 in [8, 10, 12] {
        for l2 in [4, 5, 6] {
            out.push(LayerDims::new(vec![l1 * k, l2 * k, k], k).expect("valid scheme"));
        }
    }
    out
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream))
}

const KMEANS_STREAM: u64 = u64::MAX;

/// Snapshot recorded at the end of every outer iteration.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub objective: f64,
    /// Reconstruction loss per view.
    pub losses: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub residuals: ConstraintResiduals,
    /// Smallest entry across every view's `H_i`.
    pub min_hidden: f64,
    pub consensus_degenerate: bool,
    pub rotation_degenerate: Vec<bool>,
    pub beta_degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Consensus partition, k x n.
    pub h: Mat,
    pub labels: Vec<usize>,
    pub history: Vec<IterationRecord>,
    pub iterations_run: usize,
    pub converged: bool,
    /// k-means inertia of the returned labels.
    pub inertia: f64,
}

impl FitResult {
    pub fn objective_trace(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.objective).collect()
    }

    pub fn scores(&self, truth: &[usize]) -> Result<Scores> {
        score(&self.labels, truth)
    }
}

fn partitions(views: &[ViewFactorization]) -> Vec<&Mat> {
    views.iter().map(ViewFactorization::partition).collect()
}

fn check_inputs(dataset: &MultiViewDataset, hp: &HyperParams) -> Result<()> {
    hp.validate()?;
    if hp.dims.k() != dataset.k {
        return Err(Error::invalid(format!(
            "last layer size {} differs from the dataset's k={}",
            hp.dims.k(),
            dataset.k
        )));
    }
    for (v, x) in dataset.views.iter().enumerate() {
        hp.dims
            .check_view(x.rows(), x.cols())
            .map_err(|e| Error::invalid(format!("view {v}: {e}")))?;
    }
    Ok(())
}

/// Pretrains every view and builds the starting fusion state: identity
/// rotations, uniform `alpha = 1/V`, `beta = 1/sqrt(V)`, and a consensus
/// obtained from one consensus update on the pretrained partitions.
pub fn init_state(
    dataset: &MultiViewDataset,
    hp: &HyperParams,
) -> Result<(Vec<ViewFactorization>, FusionState)> {
    check_inputs(dataset, hp)?;
    let views: Vec<ViewFactorization> = dataset
        .views
        .par_iter()
        .enumerate()
        .map(|(v, x)| {
            pretrain_view(
                x,
                &hp.dims,
                hp.pretrain_iters,
                derive_seed(hp.seed, v as u64),
            )
        })
        .collect::<Result<_>>()?;

    let count = views.len();
    let k = dataset.k;
    let n = dataset.samples();
    let w = vec![Mat::identity(k); count];
    let beta = vec![1.0 / (count as f64).sqrt(); count];
    let fallback = Mat::from_dmatrix(DMatrix::identity(k, n))?;
    let h = update_consensus(&partitions(&views), &w, &beta, &fallback)?.value;
    let fusion = FusionState {
        h,
        w,
        alpha: vec![1.0 / count as f64; count],
        beta,
    };
    Ok((views, fusion))
}

/// True when the last two objective values differ by less than `tol`
/// relative to the earlier one.
pub fn check_convergence(history: &[f64], tol: f64) -> bool {
    match history {
        [.., prev, last] => (last - prev).abs() / prev.abs().max(1e-12) < tol,
        _ => false,
    }
}

/// Runs the full method and clusters the consensus partition.
pub fn fit(dataset: &MultiViewDataset, hp: &HyperParams) -> Result<FitResult> {
    let (mut views, mut fusion) = init_state(dataset, hp)?;
    let mut history: Vec<IterationRecord> = Vec::with_capacity(hp.max_iter);
    let mut trace: Vec<f64> = Vec::with_capacity(hp.max_iter);
    let mut converged = false;

    for iter in 0..hp.max_iter {
        let consensus = update_consensus(&partitions(&views), &fusion.w, &fusion.beta, &fusion.h)
            .map_err(|e| e.in_block(iter, "consensus"))?;
        fusion.h = consensus.value;

        let (h, w, alpha, beta) = (&fusion.h, &fusion.w, &fusion.alpha, &fusion.beta);
        views
            .par_iter_mut()
            .enumerate()
            .map(|(v, vf)| vf.sweep(h, &w[v], alpha[v], beta[v], hp.lambda, hp.warmup_partition))
            .collect::<Result<Vec<()>>>()
            .map_err(|e| e.in_block(iter, "factorization"))?;

        let rotations: Vec<_> = views
            .par_iter()
            .zip(&fusion.w)
            .zip(&fusion.beta)
            .map(|((vf, prev), &b)| update_rotation(vf.partition(), &fusion.h, b, prev))
            .collect::<Result<_>>()
            .map_err(|e| e.in_block(iter, "rotation"))?;
        let rotation_degenerate = rotations.iter().map(|r| r.degenerate).collect();
        fusion.w = rotations.into_iter().map(|r| r.value).collect();

        let losses: Vec<f64> = views
            .iter()
            .map(ViewFactorization::reconstruction_loss)
            .collect();
        fusion.alpha = update_alpha(&losses).map_err(|e| e.in_block(iter, "alpha"))?;

        let beta = update_beta(&partitions(&views), &fusion.w, &fusion.h)
            .map_err(|e| e.in_block(iter, "beta"))?;
        fusion.beta = beta.value;

        let value =
            objective(&views, &fusion, hp.lambda).map_err(|e| e.in_block(iter, "objective"))?;
        if !value.is_finite() {
            return Err(
                Error::Numerical(format!("objective is {value}")).in_block(iter, "objective")
            );
        }
        trace.push(value);
        history.push(IterationRecord {
            objective: value,
            losses,
            alpha: fusion.alpha.clone(),
            beta: fusion.beta.clone(),
            residuals: fusion.residuals(),
            min_hidden: views
                .iter()
                .map(ViewFactorization::min_hidden_entry)
                .fold(f64::INFINITY, f64::min),
            consensus_degenerate: consensus.degenerate,
            rotation_degenerate,
            beta_degenerate: beta.degenerate,
        });
        if check_convergence(&trace, hp.tol) {
            converged = true;
            break;
        }
    }

    let clusters = kmeans(
        &fusion.h.t(),
        dataset.k,
        hp.kmeans_restarts,
        derive_seed(hp.seed, KMEANS_STREAM),
    )?;
    Ok(FitResult {
        h: fusion.h,
        labels: clusters.labels,
        iterations_run: history.len(),
        history,
        converged,
        inertia: clusters.inertia,
    })
}
