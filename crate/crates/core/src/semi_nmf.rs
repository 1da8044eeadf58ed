//! Single-layer semi-NMF `X ~ Z H` with `H >= 0`, the building block of the
//! layer-wise pretraining.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::{neg_raw, pinv_raw, pos_raw, Mat};
use crate::metrics::kmeans;

/// Added to every multiplicative-rule denominator.
pub const DENOM_EPS: f64 = 1e-10;
/// Offset added to the k-means indicator matrix so that every entry of the
/// initial `H` is strictly positive.
pub const INIT_OFFSET: f64 = 0.2;
pub const INIT_KMEANS_RESTARTS: usize = 10;
pub const DEFAULT_PRETRAIN_ITERS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFactors {
    /// Basis, `d x l`, any sign.
    pub z: Mat,
    /// Representation, `l x n`, nonnegative.
    pub h: Mat,
}

impl LayerFactors {
    /// `||x - z h||_F^2`
    pub fn loss(&self, x: &Mat) -> f64 {
        (x.as_dmatrix() - self.z.as_dmatrix() * self.h.as_dmatrix()).norm_squared()
    }
}

/// A refined layer together with the loss after every sweep (index 0 is the
/// loss of the starting factors).
#[derive(Clone, Debug)]
pub struct LayerFit {
    pub factors: LayerFactors,
    pub losses: Vec<f64>,
}

fn check_rank(x: &Mat, l: usize) -> Result<()> {
    let (d, n) = x.shape();
    if l == 0 || l > d.min(n) {
        return Err(Error::invalid(format!(
            "layer size {l} must lie in 1..={} for a {d}x{n} input",
            d.min(n)
        )));
    }
    Ok(())
}

/// k-means on the columns of `x` gives a cluster indicator; `h` is that
/// indicator plus [`INIT_OFFSET`] and `z = x pinv(h)`.
pub fn init_layer(x: &Mat, l: usize, seed: u64) -> Result<LayerFactors> {
    check_rank(x, l)?;
    let clusters = kmeans(&x.t(), l, INIT_KMEANS_RESTARTS, seed)?;
    let n = x.cols();
    let mut h = DMatrix::from_element(l, n, INIT_OFFSET);
    for (j, &c) in clusters.labels.iter().enumerate() {
        h[(c, j)] += 1.0;
    }
    let z = basis_for(x.as_dmatrix(), &h)?;
    Ok(LayerFactors {
        z: Mat::from_dmatrix(z)?,
        h: Mat::from_dmatrix(h)?,
    })
}

/// [`init_layer`] followed by `iters` sweeps of [`refine_layer`].
pub fn fit_layer(x: &Mat, l: usize, iters: usize, seed: u64) -> Result<LayerFactors> {
    if iters == 0 {
        return Err(Error::invalid("fit_layer needs at least one iteration"));
    }
    let init = init_layer(x, l, seed)?;
    Ok(refine_layer(x, init, iters)?.factors)
}

/// Alternates the least-squares basis `z = x pinv(h)` with one
/// multiplicative step on `h`, `iters` times.
pub fn refine_layer(x: &Mat, start: LayerFactors, iters: usize) -> Result<LayerFit> {
    let xd = x.as_dmatrix();
    if start.z.rows() != x.rows() || start.h.cols() != x.cols() || start.z.cols() != start.h.rows()
    {
        return Err(Error::shape(
            "refine_layer",
            format!(
                "x {:?}, z {:?}, h {:?}",
                x.shape(),
                start.z.shape(),
                start.h.shape()
            ),
        ));
    }
    if start.h.min_entry() < 0.0 {
        return Err(Error::invalid("starting h has negative entries"));
    }
    let mut losses = Vec::with_capacity(iters + 1);
    losses.push(start.loss(x));
    let mut h = start.h.into_dmatrix();
    let mut z = start.z.into_dmatrix();
    for _ in 0..iters {
        z = basis_for(xd, &h)?;
        let zt = z.transpose();
        h = multiplicative_step(&h, &(&zt * xd), &(&zt * &z), 1.0, None);
        losses.push((xd - &z * &h).norm_squared());
    }
    let factors = LayerFactors {
        z: Mat::from_dmatrix(z)?,
        h: Mat::from_dmatrix(h)?,
    };
    Ok(LayerFit { factors, losses })
}

fn basis_for(x: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(x * pinv_raw(h, None)?)
}

/// One nonnegativity-preserving step for `min scale*||X - Phi H||^2 - <L, H>`
/// given `phi_t_x = Phi^T X`, `gram = Phi^T Phi` and an optional linear
/// coefficient `L`:
///
/// ```text
/// H <- H .* sqrt( (scale*([Phi^T X]^+ + [Phi^T Phi]^- H) + [L]^+)
///               / (scale*([Phi^T X]^- + [Phi^T Phi]^+ H) + [L]^- + eps) )
/// ```
///
/// The Gram matrix is split before multiplying by `H`; splitting the product
/// `Phi^T Phi H` instead loses the auxiliary-function bound and diverges on
/// generic inputs.
pub(crate) fn multiplicative_step(
    h: &DMatrix<f64>,
    phi_t_x: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    scale: f64,
    linear: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let mut numer = (pos_raw(phi_t_x) + neg_raw(gram) * h) * scale;
    let mut denom = (neg_raw(phi_t_x) + pos_raw(gram) * h) * scale;
    if let Some(lin) = linear {
        numer += pos_raw(lin);
        denom += neg_raw(lin);
    }
    h.zip_zip_map(&numer, &denom, |hv, nv, dv| {
        if hv == 0.0 {
            0.0
        } else {
            hv * (nv / (dv + DENOM_EPS)).sqrt()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
    }

    fn planted(d: usize, l: usize, n: usize, seed: u64) -> (Mat, Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = uniform(d, l, -1.0, 1.0, &mut rng);
        let h = uniform(l, n, 0.0, 1.0, &mut rng);
        let x = &z * &h;
        (
            Mat::from_dmatrix(x).unwrap(),
            Mat::from_dmatrix(z).unwrap(),
            Mat::from_dmatrix(h).unwrap(),
        )
    }

    #[test]
    fn init_is_positive_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Mat::from_dmatrix(uniform(8, 4, -1.0, 1.0, &mut rng)).unwrap();
        let a = init_layer(&x, 4, 42).unwrap();
        assert_eq!(a.h.shape(), (4, 4));
        assert_eq!(a.z.shape(), (8, 4));
        assert!(a.h.min_entry() > 0.0);
        for r in 0..4 {
            assert!(a.h.row(r).iter().any(|&v| v > INIT_OFFSET));
        }
        let b = init_layer(&x, 4, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_validates_layer_size() {
        let x = Mat::zeros(3, 10);
        assert!(init_layer(&x, 0, 0).is_err());
        assert!(init_layer(&x, 4, 0).is_err());
        assert!(fit_layer(&x, 2, 0, 0).is_err());
    }

    #[test]
    fn planted_factors_are_recovered() {
        let (x, _, _) = planted(30, 4, 60, 3);
        let fit = fit_layer(&x, 4, 300, 7).unwrap();
        let rel = fit.loss(&x) / x.frobenius_sq();
        assert!(rel < 0.05, "relative reconstruction error {rel}");
    }

    #[test]
    fn true_factors_are_a_fixed_point() {
        let (x, z, h) = planted(12, 3, 20, 4);
        let start = LayerFactors {
            z: z.clone(),
            h: h.clone(),
        };
        let fit = refine_layer(&x, start, 1).unwrap();
        assert!((fit.factors.h.as_dmatrix() - h.as_dmatrix()).norm() < 1e-8);
        assert!((fit.factors.z.as_dmatrix() - z.as_dmatrix()).norm() < 1e-8);
    }

    #[test]
    fn loss_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Mat::from_dmatrix(uniform(20, 30, -1.0, 1.0, &mut rng)).unwrap();
        let start = init_layer(&x, 5, 9).unwrap();
        let fit = refine_layer(&x, start, 100).unwrap();
        for w in fit.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        assert!(fit.losses.last().unwrap() <= &fit.losses[0]);
        assert!(fit.factors.h.min_entry() >= 0.0);
    }

    #[test]
    fn zero_rows_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Mat::from_dmatrix(uniform(10, 15, -1.0, 1.0, &mut rng)).unwrap();
        let mut start = init_layer(&x, 3, 1).unwrap();
        let mut h = start.h.clone().into_dmatrix();
        h.row_mut(1).fill(0.0);
        start.h = Mat::from_dmatrix(h).unwrap();
        let fit = refine_layer(&x, start, 20).unwrap();
        assert!(fit.factors.h.row(1).iter().all(|&v| v == 0.0));
    }
}
