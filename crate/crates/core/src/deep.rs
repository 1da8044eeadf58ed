//! Per-view deep semi-NMF `X ~ Z_1 Z_2 ... Z_m H_m` and its three fine-tuning
//! rules: least-squares basis, multiplicative hidden-layer step, and the
//! alignment-aware multiplicative step on the partition layer `H_m`.
//!
//! Layers are indexed from 0 in code, so the partition layer is `depth - 1`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::{pinv_rel_raw, Mat};
use crate::semi_nmf::{fit_layer, multiplicative_step};

/// Layer sizes `[l_1, ..., l_m]`, strictly decreasing, ending at the number
/// of clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDims(Vec<usize>);

impl LayerDims {
    pub fn new(dims: Vec<usize>, k: usize) -> Result<Self> {
        let dims = LayerDims::unchecked(dims)?;
        if dims.k() != k {
            return Err(Error::invalid(format!(
                "last layer size {} must equal the number of clusters {k}",
                dims.k()
            )));
        }
        Ok(dims)
    }

    fn unchecked(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("layer sizes must not be empty"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        if dims.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid(format!(
                "layer sizes must be strictly decreasing, got {dims:?}"
            )));
        }
        Ok(LayerDims(dims))
    }

    /// Parses a comma list such as `"12,3"` and checks the last entry is `k`.
    pub fn parse(s: &str, k: usize) -> Result<Self> {
        let dims: LayerDims = s.parse()?;
        LayerDims::new(dims.0, k)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn k(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    /// The first layer must fit a `d x n` view.
    pub fn check_view(&self, d: usize, n: usize) -> Result<()> {
        let first = self.0[0];
        if first > d.min(n) {
            return Err(Error::invalid(format!(
                "first layer size {first} exceeds min(features, samples) = {} of a {d}x{n} view",
                d.min(n)
            )));
        }
        Ok(())
    }
}

impl fmt::Display for LayerDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LayerDims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad layer size `{p}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        LayerDims::unchecked(dims)
    }
}

/// Relative singular-value cutoff for the pseudoinverses in
/// [`ViewFactorization::update_basis`]. Inner layers wider than `k` make the
/// chained representation rank deficient, and the machine-precision default
/// then inverts rounding noise.
pub const BASIS_RANK_TOL: f64 = 1e-10;

/// One view's data and its layer stack.
#[derive(Clone, Debug)]
pub struct ViewFactorization {
    x: Mat,
    z: Vec<Mat>,
    h: Vec<Mat>,
}

impl ViewFactorization {
    pub fn new(x: Mat, z: Vec<Mat>, h: Vec<Mat>) -> Result<Self> {
        if z.is_empty() || z.len() != h.len() {
            return Err(Error::shape(
                "ViewFactorization",
                format!("{} bases for {} representations", z.len(), h.len()),
            ));
        }
        let mut rows = x.rows();
        for (i, (zi, hi)) in z.iter().zip(&h).enumerate() {
            if zi.rows() != rows || hi.rows() != zi.cols() || hi.cols() != x.cols() {
                return Err(Error::shape(
                    "ViewFactorization",
                    format!(
                        "layer {i}: Z {:?}, H {:?} after {rows} rows, {} samples",
                        zi.shape(),
                        hi.shape(),
                        x.cols()
                    ),
                ));
            }
            if hi.min_entry() < 0.0 {
                return Err(Error::invalid(format!(
                    "H of layer {i} has negative entries"
                )));
            }
            rows = zi.cols();
        }
        Ok(Self { x, z, h })
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn bases(&self) -> &[Mat] {
        &self.z
    }

    pub fn hidden(&self) -> &[Mat] {
        &self.h
    }

    pub fn depth(&self) -> usize {
        self.z.len()
    }

    /// The last-layer representation `H_m` (k x n).
    pub fn partition(&self) -> &Mat {
        self.h.last().expect("non-empty")
    }

    pub fn set_basis(&mut self, layer: usize, z: Mat) -> Result<()> {
        self.check_layer(layer)?;
        if z.shape() != self.z[layer].shape() {
            return Err(Error::shape(
                "set_basis",
                format!("expected {:?}, got {:?}", self.z[layer].shape(), z.shape()),
            ));
        }
        self.z[layer] = z;
        Ok(())
    }

    pub fn set_hidden(&mut self, layer: usize, h: Mat) -> Result<()> {
        self.check_layer(layer)?;
        if h.shape() != self.h[layer].shape() {
            return Err(Error::shape(
                "set_hidden",
                format!("expected {:?}, got {:?}", self.h[layer].shape(), h.shape()),
            ));
        }
        if h.min_entry() < 0.0 {
            return Err(Error::invalid(format!(
                "H of layer {layer} has negative entries"
            )));
        }
        self.h[layer] = h;
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.depth() {
            return Err(Error::invalid(format!(
                "layer {layer} out of range for depth {}",
                self.depth()
            )));
        }
        Ok(())
    }

    /// `Z_0 Z_1 ... Z_{end-1}`, or `None` for the empty product.
    fn basis_product(&self, end: usize) -> Option<DMatrix<f64>> {
        let mut iter = self.z[..end].iter();
        let first = iter.next()?.as_dmatrix().clone();
        Some(iter.fold(first, |acc, z| acc * z.as_dmatrix()))
    }

    /// `Z_{i+1} ... Z_{m-1} H_m`, the representation of layer `i` implied by
    /// the deeper factors.
    fn chained_hidden(&self, layer: usize) -> DMatrix<f64> {
        let m = self.depth() - 1;
        let mut acc = self.h[m].as_dmatrix().clone();
        for z in self.z[layer + 1..].iter().rev() {
            acc = z.as_dmatrix() * acc;
        }
        acc
    }

    /// Least-squares basis `Z_i = pinv(phi) X pinv(Ht_i)` with
    /// `phi = Z_0 ... Z_{i-1}` (the identity for the first layer) and
    /// `Ht_i = Z_{i+1} ... Z_{m-1} H_m`. This is the exact minimizer of the
    /// reconstruction loss over `Z_i`; the stored `H_i` of the inner layers
    /// do not enter.
    pub fn update_basis(&self, layer: usize) -> Result<Mat> {
        self.check_layer(layer)?;
        let x = self.x.as_dmatrix();
        let left = match self.basis_product(layer) {
            Some(phi) => pinv_rel_raw(&phi, BASIS_RANK_TOL)? * x,
            None => x.clone(),
        };
        Mat::from_dmatrix(left * pinv_rel_raw(&self.chained_hidden(layer), BASIS_RANK_TOL)?)
    }

    /// One multiplicative step on `H_i` for `min ||X - Phi H_i||^2`, with
    /// `Phi = Z_0 ... Z_i`.
    ///
    /// Applied to the partition layer this is the optional warm-up step that
    /// precedes the alignment-aware rule.
    pub fn update_hidden(&self, layer: usize) -> Result<Mat> {
        self.check_layer(layer)?;
        let phi = self.basis_product(layer + 1).expect("layer >= 0");
        let phi_t = phi.transpose();
        let step = multiplicative_step(
            self.h[layer].as_dmatrix(),
            &(&phi_t * self.x.as_dmatrix()),
            &(&phi_t * &phi),
            1.0,
            None,
        );
        Mat::from_dmatrix(step)
    }

    /// One multiplicative step on `H_m` for
    /// `alpha^2 ||X - Phi H_m||^2 - lambda beta tr(H H_m^T W)`.
    ///
    /// `h` is the k x n consensus partition and `w` this view's k x k rotation.
    pub fn update_partition(
        &self,
        h: &Mat,
        w: &Mat,
        alpha: f64,
        beta: f64,
        lambda: f64,
    ) -> Result<Mat> {
        let m = self.depth() - 1;
        let k = self.h[m].rows();
        if h.shape() != self.h[m].shape() || w.shape() != (k, k) {
            return Err(Error::shape(
                "update_partition",
                format!(
                    "H_m {:?}, consensus {:?}, rotation {:?}",
                    self.h[m].shape(),
                    h.shape(),
                    w.shape()
                ),
            ));
        }
        if alpha < 0.0 || beta < 0.0 || lambda < 0.0 {
            return Err(Error::invalid(format!(
                "weights must be nonnegative: alpha={alpha}, beta={beta}, lambda={lambda}"
            )));
        }
        let phi = self.basis_product(m + 1).expect("depth >= 1");
        let phi_t = phi.transpose();
        let linear = w.as_dmatrix() * h.as_dmatrix() * (lambda * beta);
        let step = multiplicative_step(
            self.h[m].as_dmatrix(),
            &(&phi_t * self.x.as_dmatrix()),
            &(&phi_t * &phi),
            2.0 * alpha * alpha,
            Some(&linear),
        );
        Mat::from_dmatrix(step)
    }

    /// `||X - Z_0 ... Z_{m-1} H_m||_F^2`
    pub fn reconstruction_loss(&self) -> f64 {
        let m = self.depth();
        self.layer_loss(m - 1)
    }

    /// `||X - Z_0 ... Z_i H_i||_F^2`, the objective of the hidden-layer rule.
    pub fn layer_loss(&self, layer: usize) -> f64 {
        let phi = self.basis_product(layer + 1).expect("layer >= 0");
        (self.x.as_dmatrix() - phi * self.h[layer].as_dmatrix()).norm_squared()
    }

    /// `tr(H H_m^T W)`
    pub fn alignment(&self, h: &Mat, w: &Mat) -> f64 {
        (w.as_dmatrix() * h.as_dmatrix()).dot(self.partition().as_dmatrix())
    }

    /// Objective minimized by [`update_partition`](Self::update_partition).
    pub fn partition_objective(&self, h: &Mat, w: &Mat, alpha: f64, beta: f64, lambda: f64) -> f64 {
        alpha * alpha * self.reconstruction_loss() - lambda * beta * self.alignment(h, w)
    }

    /// One fine-tuning sweep: for every layer refit `Z_i` and step `H_i`; the
    /// partition layer takes the alignment-aware step (optionally preceded by
    /// a plain semi-NMF step). The sweep ends by refitting the bases to the
    /// new `H_m`, so the reconstruction loss seen by the view weights is not
    /// measured against stale bases.
    pub fn sweep(
        &mut self,
        h: &Mat,
        w: &Mat,
        alpha: f64,
        beta: f64,
        lambda: f64,
        warmup_partition: bool,
    ) -> Result<()> {
        let m = self.depth() - 1;
        for layer in 0..=m {
            let z = self.update_basis(layer)?;
            self.z[layer] = z;
            if layer < m {
                let hi = self.update_hidden(layer)?;
                self.h[layer] = hi;
            }
        }
        self.balance_bases()?;
        if warmup_partition {
            let hm = self.update_hidden(m)?;
            self.h[m] = hm;
        }
        let hm = self.update_partition(h, w, alpha, beta, lambda)?;
        self.h[m] = hm;
        self.rescale_partition()?;
        self.refit_bases()
    }

    /// Replaces every `Z_i` in turn by its least-squares update, then
    /// rebalances.
    pub fn refit_bases(&mut self) -> Result<()> {
        for layer in 0..self.depth() {
            let z = self.update_basis(layer)?;
            self.z[layer] = z;
        }
        self.balance_bases()
    }

    /// Scales the columns of every inner `Z_i` to unit norm, moving the scale
    /// into the rows of `Z_{i+1}` and `H_i`. The product `Z_0 ... Z_{m-1}` is
    /// unchanged; without this the inner bases drift apart in scale until
    /// they overflow.
    pub fn balance_bases(&mut self) -> Result<()> {
        let m = self.depth() - 1;
        for i in 0..m {
            let mut zi = self.z[i].as_dmatrix().clone();
            let mut next = self.z[i + 1].as_dmatrix().clone();
            let mut hi = self.h[i].as_dmatrix().clone();
            for c in 0..zi.ncols() {
                let norm = zi.column(c).norm();
                if norm > 0.0 {
                    zi.column_mut(c).unscale_mut(norm);
                    next.row_mut(c).scale_mut(norm);
                    hi.row_mut(c).scale_mut(norm);
                }
            }
            self.z[i] = Mat::from_dmatrix(zi)?;
            self.z[i + 1] = Mat::from_dmatrix(next)?;
            self.h[i] = Mat::from_dmatrix(hi)?;
        }
        Ok(())
    }

    /// Scales every row of `H_m` to unit Euclidean norm and moves the scale
    /// into the columns of `Z_m`, leaving `Z_m H_m` unchanged. Zero rows are
    /// left alone.
    ///
    /// The alignment term is linear in `H_m` while the reconstruction weights
    /// adapt to the losses, so without this the partition of a poorly
    /// reconstructed view grows without bound.
    pub fn rescale_partition(&mut self) -> Result<()> {
        let m = self.depth() - 1;
        let mut hm = self.h[m].as_dmatrix().clone();
        let mut zm = self.z[m].as_dmatrix().clone();
        for r in 0..hm.nrows() {
            let norm = hm.row(r).norm();
            if norm > 0.0 {
                hm.row_mut(r).unscale_mut(norm);
                zm.column_mut(r).scale_mut(norm);
            }
        }
        self.h[m] = Mat::from_dmatrix(hm)?;
        self.z[m] = Mat::from_dmatrix(zm)?;
        Ok(())
    }

    /// Smallest entry over all `H_i`.
    pub fn min_hidden_entry(&self) -> f64 {
        self.h
            .iter()
            .map(Mat::min_entry)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Layer-wise pretraining: semi-NMF of `x` gives `H_1`, semi-NMF of `H_1`
/// gives `H_2`, and so on down to the partition layer. Layer `i` uses seed
/// `seed + i`.
pub fn pretrain_view(
    x: &Mat,
    dims: &LayerDims,
    iters: usize,
    seed: u64,
) -> Result<ViewFactorization> {
    dims.check_view(x.rows(), x.cols())?;
    let mut z = Vec::with_capacity(dims.depth());
    let mut h: Vec<Mat> = Vec::with_capacity(dims.depth());
    for (i, &l) in dims.as_slice().iter().enumerate() {
        let input = if i == 0 { x } else { &h[i - 1] };
        let layer = fit_layer(input, l, iters, seed.wrapping_add(i as u64))?;
        z.push(layer.z);
        h.push(layer.h);
    }
    ViewFactorization::new(x.clone(), z, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semi_nmf::DEFAULT_PRETRAIN_ITERS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_dmatrix(DMatrix::from_fn(rows, cols, |_, _| {
            rng.random_range(lo..hi)
        }))
        .unwrap()
    }

    #[test]
    fn layer_dims_validation() {
        assert!(LayerDims::new(vec![12, 3], 3).is_ok());
        assert!(LayerDims::new(vec![12, 4], 3).is_err());
        assert!(LayerDims::new(vec![3, 12, 3], 3).is_err());
        assert!(LayerDims::new(vec![], 3).is_err());
        assert!(LayerDims::new(vec![3, 3], 3).is_err());
        let d = LayerDims::parse("24, 12,3", 3).unwrap();
        assert_eq!(d.as_slice(), &[24, 12, 3]);
        assert_eq!(d.to_string(), "24,12,3");
        assert!(LayerDims::parse("12,x", 3).is_err());
        assert!(d.check_view(20, 100).is_err());
        assert!(d.check_view(40, 100).is_ok());
    }

    #[test]
    fn constructor_rejects_bad_chains() {
        let x = Mat::zeros(4, 6);
        let z = vec![Mat::zeros(4, 2)];
        assert!(ViewFactorization::new(x.clone(), z.clone(), vec![Mat::zeros(3, 6)]).is_err());
        let neg = Mat::from_dmatrix(DMatrix::from_element(2, 6, -1.0)).unwrap();
        assert!(ViewFactorization::new(x.clone(), z.clone(), vec![neg]).is_err());
        assert!(ViewFactorization::new(x, z, vec![Mat::zeros(2, 6)]).is_ok());
    }

    #[test]
    fn depth_one_matches_fit_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(10, 25, -1.0, 1.0, &mut rng);
        let dims = LayerDims::new(vec![3], 3).unwrap();
        let vf = pretrain_view(&x, &dims, 20, 5).unwrap();
        let single = fit_layer(&x, 3, 20, 5).unwrap();
        assert_eq!(vf.bases()[0], single.z);
        assert_eq!(vf.partition(), &single.h);
    }

    #[test]
    fn two_layer_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = 3;
        let x = uniform(15, 40, -1.0, 1.0, &mut rng);
        let dims = LayerDims::new(vec![2 * k, k], k).unwrap();
        let vf = pretrain_view(&x, &dims, DEFAULT_PRETRAIN_ITERS, 0).unwrap();
        assert_eq!(vf.bases()[0].shape(), (15, 2 * k));
        assert_eq!(vf.bases()[1].shape(), (2 * k, k));
        assert_eq!(vf.hidden()[0].shape(), (2 * k, 40));
        assert_eq!(vf.hidden()[1].shape(), (k, 40));
        assert!(vf.min_hidden_entry() >= 0.0);
    }

    #[test]
    fn basis_of_identity_system() {
        let vf = ViewFactorization::new(
            Mat::identity(3),
            vec![Mat::zeros(3, 3)],
            vec![Mat::identity(3)],
        )
        .unwrap();
        let z = vf.update_basis(0).unwrap();
        assert!((z.as_dmatrix() - DMatrix::<f64>::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn hidden_step_fixed_point_and_zero_lock() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z1 = uniform(8, 5, -1.0, 1.0, &mut rng);
        let z2 = uniform(5, 2, -1.0, 1.0, &mut rng);
        let h1 = uniform(5, 12, 0.1, 1.0, &mut rng);
        let h2 = uniform(2, 12, 0.1, 1.0, &mut rng);
        let x = z1.matmul(&h1).unwrap();
        let vf = ViewFactorization::new(
            x.clone(),
            vec![z1.clone(), z2.clone()],
            vec![h1.clone(), h2.clone()],
        )
        .unwrap();
        let next = vf.update_hidden(0).unwrap();
        let err = (next.as_dmatrix() - h1.as_dmatrix()).norm();
        // only the denominator guard moves it
        assert!(err < 1e-9 * h1.as_dmatrix().norm(), "{err}");

        let zero = ViewFactorization::new(x, vec![z1, z2], vec![Mat::zeros(5, 12), h2]).unwrap();
        assert_eq!(zero.update_hidden(0).unwrap(), Mat::zeros(5, 12));
    }

    #[test]
    fn partition_step_without_alignment_is_the_hidden_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 3;
        let x = uniform(9, 20, -1.0, 1.0, &mut rng);
        let z = vec![
            uniform(9, 6, -1.0, 1.0, &mut rng),
            uniform(6, k, -1.0, 1.0, &mut rng),
        ];
        let h = vec![
            uniform(6, 20, 0.0, 1.0, &mut rng),
            uniform(k, 20, 0.0, 1.0, &mut rng),
        ];
        let vf = ViewFactorization::new(x, z, h).unwrap();
        let consensus = Mat::from_dmatrix(DMatrix::identity(k, 20)).unwrap();
        let w = Mat::identity(k);
        let a = vf.update_partition(&consensus, &w, 0.7, 0.4, 0.0).unwrap();
        let b = vf.update_hidden(1).unwrap();
        assert!((a.as_dmatrix() - b.as_dmatrix()).norm() <= 1e-10 * b.as_dmatrix().norm());
    }

    #[test]
    fn partition_fixed_point_when_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = uniform(7, 3, -1.0, 1.0, &mut rng);
        let hm = uniform(3, 10, 0.1, 1.0, &mut rng);
        let x = z.matmul(&hm).unwrap();
        let vf = ViewFactorization::new(x, vec![z], vec![hm.clone()]).unwrap();
        assert!(vf.reconstruction_loss() < 1e-18);
        let consensus = Mat::from_dmatrix(DMatrix::identity(3, 10)).unwrap();
        let next = vf
            .update_partition(&consensus, &Mat::identity(3), 1.0, 1.0, 0.0)
            .unwrap();
        assert!((next.as_dmatrix() - hm.as_dmatrix()).norm() < 1e-10);
    }

    #[test]
    fn reconstruction_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = uniform(5, 8, -1.0, 1.0, &mut rng);
        let vf = ViewFactorization::new(x.clone(), vec![Mat::zeros(5, 2)], vec![Mat::zeros(2, 8)])
            .unwrap();
        assert!((vf.reconstruction_loss() - x.frobenius_sq()).abs() < 1e-14);

        let z = vec![
            uniform(5, 3, -1.0, 1.0, &mut rng),
            uniform(3, 2, -1.0, 1.0, &mut rng),
        ];
        let h = vec![
            uniform(3, 8, 0.0, 1.0, &mut rng),
            uniform(2, 8, 0.0, 1.0, &mut rng),
        ];
        let vf = ViewFactorization::new(x.clone(), z.clone(), h.clone()).unwrap();
        let mut direct = 0.0;
        for r in 0..5 {
            for c in 0..8 {
                let mut rec = 0.0;
                for a in 0..3 {
                    for b in 0..2 {
                        rec += z[0][(r, a)] * z[1][(a, b)] * h[1][(b, c)];
                    }
                }
                direct += (x[(r, c)] - rec).powi(2);
            }
        }
        assert!((vf.reconstruction_loss() - direct).abs() < 1e-12);
    }

    #[test]
    fn sweep_preserves_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = 2;
        let x = uniform(12, 30, -1.0, 1.0, &mut rng);
        let dims = LayerDims::new(vec![6, k], k).unwrap();
        let mut vf = pretrain_view(&x, &dims, 10, 1).unwrap();
        let consensus = Mat::from_dmatrix(DMatrix::identity(k, 30)).unwrap();
        for warm in [false, true] {
            for _ in 0..5 {
                vf.sweep(&consensus, &Mat::identity(k), 0.5, 0.8, 1.0, warm)
                    .unwrap();
                assert!(vf.min_hidden_entry() >= 0.0);
            }
        }
        assert!(vf.update_basis(2).is_err());
    }
}
