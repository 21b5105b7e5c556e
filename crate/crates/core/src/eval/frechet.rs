use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::diffusion::item_rng;
use crate::error::{Error, Result};

/// Projected features per sample.
pub const FRECHET_FEATURES: usize = 16;
/// Fewest samples accepted per set.
pub const FRECHET_MIN_SAMPLES: usize = 64;
/// Diagonal added to each covariance.
pub const FRECHET_REGULARIZATION: f64 = 1e-6;

/// Fixed Gaussian projection from flattened samples to [`FRECHET_FEATURES`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[features, input_dim]`, row-major.
    matrix: DMatrix<f64>,
}

impl Projection {
    pub fn new(seed: u64, input_dim: usize) -> Self {
        let mut rng = item_rng(seed, 0);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let matrix = DMatrix::from_fn(FRECHET_FEATURES, input_dim, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Projection { matrix }
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Projects every sample of a `[N, ...]` tensor; returns `[N, features]`.
    pub fn apply(&self, samples: &Tensor) -> Result<DMatrix<f64>> {
        let n = samples.shape().first().copied().unwrap_or(0);
        let per = if n == 0 { 0 } else { samples.numel() / n };
        if per != self.input_dim() {
            return Err(Error::Dimension(format!(
                "projection expects {} values per sample, got {per}",
                self.input_dim()
            )));
        }
        let x = DMatrix::from_row_slice(n, per, samples.data());
        Ok(x * self.matrix.transpose())
    }
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let mut mu = DVector::zeros(d);
    for r in 0..n {
        for c in 0..d {
            mu[c] += x[(r, c)];
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        for i in 0..d {
            let a = x[(r, i)] - mu[i];
            for j in 0..d {
                cov[(i, j)] += a * (x[(r, j)] - mu[j]);
            }
        }
    }
    cov /= (n.max(2) - 1) as f64;
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `Tr((A·B)^{1/2})` through the symmetric product `A^{1/2}·B·A^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrt_psd(a);
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// Fréchet distance between two Gaussians, each covariance regularized by
/// [`FRECHET_REGULARIZATION`]·I. Exactly symmetric and clamped at zero.
pub fn frechet_distance(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Dimension("mismatched moment shapes".into()));
    }
    let eye = DMatrix::<f64>::identity(d, d) * FRECHET_REGULARIZATION;
    let a = cov_a + &eye;
    let b = cov_b + &eye;
    let mean_term: f64 = mu_a.iter().zip(mu_b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let cross = 0.5 * (trace_sqrt_product(&a, &b) + trace_sqrt_product(&b, &a));
    let fd = mean_term + (a.trace() + b.trace()) - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::Domain("Fréchet distance is not finite".into()));
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between two sample sets after a shared random projection.
pub fn toy_frechet(a: &Tensor, b: &Tensor, projection_seed: u64) -> Result<f64> {
    for (name, s) in [("first", a), ("second", b)] {
        let n = s.shape().first().copied().unwrap_or(0);
        if n < FRECHET_MIN_SAMPLES {
            return Err(Error::Contract(format!(
                "{name} sample set has {n} samples; at least {FRECHET_MIN_SAMPLES} required"
            )));
        }
    }
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Dimension(format!(
            "sample shapes {:?} and {:?} differ",
            &a.shape()[1..],
            &b.shape()[1..]
        )));
    }
    let per = a.numel() / a.shape()[0];
    let p = Projection::new(projection_seed, per);
    let (mu_a, cov_a) = moments(&p.apply(a)?);
    let (mu_b, cov_b) = moments(&p.apply(b)?);
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::standard_normal;

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = item_rng(seed, 7);
        Tensor::new(vec![n, d], standard_normal(&mut rng, n * d)).unwrap()
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = gaussian(100, 20, 1);
        assert!(toy_frechet(&a, &a, 3).unwrap() <= 1e-8);
    }

    #[test]
    fn symmetric_and_non_negative() {
        let a = gaussian(80, 20, 1);
        let b = gaussian(90, 20, 2);
        let ab = toy_frechet(&a, &b, 5).unwrap();
        assert_eq!(ab, toy_frechet(&b, &a, 5).unwrap());
        assert!(ab >= 0.0);
    }

    #[test]
    fn unit_covariances_leave_mean_offset() {
        let d = 4;
        let eye = DMatrix::<f64>::identity(d, d);
        let mu_a = DVector::from_vec(vec![0.0, 1.0, -2.0, 0.5]);
        let mu_b = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
        let fd = frechet_distance(&mu_a, &eye, &mu_b, &eye).unwrap();
        assert!((fd - 5.25).abs() < 1e-9);
    }

    #[test]
    fn diagonal_hand_case() {
        let (va, vb) = ([2.0, 0.5], [0.5, 3.0]);
        let mu_a = DVector::from_vec(vec![0.3, -0.1]);
        let mu_b = DVector::from_vec(vec![-0.2, 0.4]);
        let fd = frechet_distance(
            &mu_a,
            &DMatrix::from_diagonal(&DVector::from_vec(va.to_vec())),
            &mu_b,
            &DMatrix::from_diagonal(&DVector::from_vec(vb.to_vec())),
        )
        .unwrap();
        let e = FRECHET_REGULARIZATION;
        let mut expect = 0.25 + 0.25;
        for i in 0..2 {
            let (a, b) = (va[i] + e, vb[i] + e);
            expect += a + b - 2.0 * (a * b).sqrt();
        }
        assert!((fd - expect).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_rejected() {
        let a = gaussian(63, 4, 1);
        let b = gaussian(64, 4, 2);
        assert!(matches!(toy_frechet(&a, &b, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn shifted_sets_are_farther() {
        let a = gaussian(200, 16, 1);
        let b = gaussian(200, 16, 2);
        let mut c = b.clone();
        c.data_mut().iter_mut().for_each(|v| *v += 1.0);
        assert!(toy_frechet(&a, &c, 4).unwrap() > toy_frechet(&a, &b, 4).unwrap());
    }
}
