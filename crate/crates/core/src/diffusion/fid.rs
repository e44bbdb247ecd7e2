use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Dimensions kept by the random projection.
pub const FID_DIMS: usize = 64;

/// Diagonal added to both covariances so rank-deficient sets stay usable.
pub const FID_REG: f64 = 1e-6;

fn features(set: &[Tensor], proj: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let d = set[0].numel();
    let raw = DMatrix::from_row_iterator(set.len(), d, set.iter().flat_map(|t| t.data().iter().copied()));
    match proj {
        Some(p) => raw * p,
        None => raw,
    }
}

fn gaussian_fit(f: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.nrows() as f64;
    let mu = f.row_mean().transpose();
    let centered = DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| f[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / n;
    for i in 0..cov.nrows() {
        cov[(i, i)] += FID_REG;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` between
/// Gaussian fits (population covariance) of two sample sets. Samples with
/// more than [`FID_DIMS`] values are first projected by a fixed Gaussian
/// matrix drawn from `seed`.
pub fn fid_proxy(generated: &[Tensor], reference: &[Tensor], seed: u64) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Domain("fid_proxy needs non-empty sample sets".into()));
    }
    let d = generated[0].numel();
    if generated.iter().chain(reference).any(|t| t.numel() != d) || d == 0 {
        return Err(Error::dim("fid_proxy samples differ in size"));
    }
    let proj = (d > FID_DIMS).then(|| {
        let p = Tensor::random_normal(&[d, FID_DIMS], (1.0 / FID_DIMS as f64).sqrt(), &mut rng::named(seed, "fid", 0));
        DMatrix::from_row_slice(d, FID_DIMS, p.data())
    });
    let (m1, s1) = gaussian_fit(&features(generated, proj.as_ref()));
    let (m2, s2) = gaussian_fit(&features(reference, proj.as_ref()));
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fd = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !fd.is_finite() {
        return Err(Error::numeric("fid_proxy produced a non-finite value"));
    }
    Ok(fd.max(0.0))
}
