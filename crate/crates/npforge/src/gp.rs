//! Exact Gaussian-process conditioning: the prediction map for the
//! kernel-backed processes, the Table-1 reference rows, and the coherent
//! posterior sampler used by Thompson sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::synthproc::{gram, kernel_eval, KernelSpec};
use crate::util::stable_cholesky;

pub use crate::autodiff::LN_2PI;

/// Posterior finite marginal at a set of target inputs.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub targets: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Error)]
pub enum GpError {
    #[error("cholesky failed on {size}x{size} matrix after jitter escalation (condition estimate {cond:.3e})")]
    Cholesky { size: usize, cond: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("non-positive posterior variance {var:.3e} at target index {index}")]
    NonPositiveVariance { index: usize, var: f64 },
}

fn chol(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, GpError> {
    stable_cholesky(m)
        .map(|(c, _)| c)
        .map_err(|e| GpError::Cholesky { size: e.size, cond: e.cond })
}

/// Exact conditioning of the kernel's joint Gaussian on the context set.
/// An empty context returns the prior marginals.
pub fn posterior(
    spec: KernelSpec,
    context: &[(f64, f64)],
    targets: &[f64],
) -> Result<GpPosterior, GpError> {
    let nt = targets.len();
    let prior_tt = gram(spec, targets);
    if context.is_empty() {
        return Ok(GpPosterior {
            targets: targets.to_vec(),
            mean: DVector::zeros(nt),
            cov: prior_tt,
        });
    }
    let cx: Vec<f64> = context.iter().map(|p| p.0).collect();
    let cy = DVector::from_iterator(context.len(), context.iter().map(|p| p.1));
    let kcc = gram(spec, &cx);
    let ktc = DMatrix::from_fn(nt, context.len(), |i, j| kernel_eval(spec, targets[i], cx[j]));
    let chol_cc = chol(&kcc)?;
    let alpha = chol_cc.solve(&cy);
    let mean = &ktc * alpha;
    // V = L^-1 Kct, cov = Ktt - V^T V
    let mut v = ktc.transpose();
    chol_cc.l().solve_lower_triangular_mut(&mut v);
    let cov = prior_tt - v.transpose() * v;
    Ok(GpPosterior { targets: targets.to_vec(), mean, cov })
}

/// Joint Gaussian log-density of `y` under the posterior, averaged per
/// target point.
pub fn full_loglik(post: &GpPosterior, y: &[f64]) -> Result<f64, GpError> {
    let n = post.mean.len();
    if y.len() != n {
        return Err(GpError::Dim { expected: n, got: y.len() });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let chol_cov = chol(&post.cov)?;
    let r = DVector::from_iterator(n, y.iter().zip(post.mean.iter()).map(|(a, b)| a - b));
    let mut z = r;
    chol_cov.l().solve_lower_triangular_mut(&mut z);
    let quad: f64 = z.dot(&z);
    let logdet: f64 = chol_cov.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Ok((-0.5 * (quad + logdet + n as f64 * LN_2PI)) / n as f64)
}

/// Sum of univariate log-densities using only the posterior diagonal,
/// averaged per target point. Variances are clamped at zero before use;
/// a zero variance after clamping is an error.
pub fn diag_loglik(post: &GpPosterior, y: &[f64]) -> Result<f64, GpError> {
    let n = post.mean.len();
    if y.len() != n {
        return Err(GpError::Dim { expected: n, got: y.len() });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..n {
        let var = post.cov[(i, i)].max(0.0);
        if var <= 0.0 {
            return Err(GpError::NonPositiveVariance { index: i, var: post.cov[(i, i)] });
        }
        let d = y[i] - post.mean[i];
        acc += -0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var);
    }
    Ok(acc / n as f64)
}

/// `n` joint draws mean + chol(cov) eps.
pub fn sample_posterior<R: Rng>(
    post: &GpPosterior,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, GpError> {
    let dim = post.mean.len();
    let chol_cov = chol(&post.cov)?;
    let l = chol_cov.l();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let eps = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)));
        let draw = &post.mean + &l * eps;
        out.push(draw.as_slice().to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_stream;

    #[test]
    fn empty_context_returns_prior() {
        let targets = vec![-1.0, 0.5, 2.0];
        let post = posterior(KernelSpec::Eq, &[], &targets).unwrap();
        assert_eq!(post.mean, DVector::zeros(3));
        assert_eq!(post.cov, gram(KernelSpec::Eq, &targets));
    }

    #[test]
    fn noiseless_interpolation_pins_observed_point() {
        let ctx = vec![(0.3, 1.7)];
        let post = posterior(KernelSpec::Eq, &ctx, &[0.3]).unwrap();
        assert!((post.mean[0] - 1.7).abs() < 1e-5);
        assert!(post.cov[(0, 0)] <= 10.0 * 1e-12 + 1e-10, "var {}", post.cov[(0, 0)]);
    }

    #[test]
    fn full_loglik_at_mean_with_identity_cov() {
        let post = GpPosterior {
            targets: vec![0.0, 1.0],
            mean: DVector::from_vec(vec![0.4, -0.6]),
            cov: DMatrix::identity(2, 2),
        };
        let ll = full_loglik(&post, &[0.4, -0.6]).unwrap();
        assert!((ll - (-0.5 * LN_2PI)).abs() < 1e-9);
    }

    #[test]
    fn one_dim_case_is_scalar_gaussian() {
        let post = GpPosterior {
            targets: vec![0.0],
            mean: DVector::from_vec(vec![0.25]),
            cov: DMatrix::from_vec(1, 1, vec![0.49]),
        };
        let y = 1.0;
        let ll = full_loglik(&post, &[y]).unwrap();
        let sigma2: f64 = 0.49 + 1e-12;
        let want = -0.5 * (LN_2PI + sigma2.ln()) - (y - 0.25) * (y - 0.25) / (2.0 * sigma2);
        assert!((ll - want).abs() < 1e-9);
        let lld = diag_loglik(&post, &[y]).unwrap();
        let want_d = -0.5 * (LN_2PI + 0.49f64.ln()) - (y - 0.25) * (y - 0.25) / (2.0 * 0.49);
        assert!((lld - want_d).abs() < 1e-12);
    }

    #[test]
    fn diag_equals_full_for_diagonal_cov() {
        let post = GpPosterior {
            targets: vec![0.0, 1.0, 2.0],
            mean: DVector::from_vec(vec![0.1, 0.2, 0.3]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.5, 2.5])),
        };
        let y = [0.6, -0.4, 1.1];
        let f = full_loglik(&post, &y).unwrap();
        let d = diag_loglik(&post, &y).unwrap();
        assert!((f - d).abs() < 1e-6, "full {f} diag {d}");
    }

    #[test]
    fn diag_matches_per_coordinate_sums() {
        let mut rng = rng_stream(77, 0);
        use rand::Rng;
        for _ in 0..20 {
            let ctx: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)))
                .collect();
            let targets: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let post = posterior(KernelSpec::Matern52, &ctx, &targets).unwrap();
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d = diag_loglik(&post, &y).unwrap();
            let mut manual = 0.0;
            for i in 0..4 {
                let var = post.cov[(i, i)].max(0.0);
                let z = (y[i] - post.mean[i]).powi(2) / var;
                manual += -0.5 * (LN_2PI + var.ln()) - 0.5 * z;
            }
            manual /= 4.0;
            assert!((d - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_covariance_draws_collapse_to_mean() {
        let post = GpPosterior {
            targets: vec![0.0, 1.0],
            mean: DVector::from_vec(vec![3.0, -2.0]),
            cov: DMatrix::zeros(2, 2),
        };
        let mut rng = rng_stream(4, 0);
        for draw in sample_posterior(&post, 5, &mut rng).unwrap() {
            assert!((draw[0] - 3.0).abs() < 1e-4);
            assert!((draw[1] + 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn posterior_sampling_is_seed_deterministic() {
        let post = posterior(KernelSpec::WeaklyPeriodic, &[(0.0, 1.0)], &[0.5, 1.5]).unwrap();
        let a = sample_posterior(&post, 3, &mut rng_stream(9, 1)).unwrap();
        let b = sample_posterior(&post, 3, &mut rng_stream(9, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_concentrates_on_posterior_mean() {
        let post = posterior(KernelSpec::Eq, &[(0.0, 2.0), (1.0, -1.0)], &[0.5]).unwrap();
        let mut rng = rng_stream(31, 0);
        let n = 100_000;
        let draws = sample_posterior(&post, n, &mut rng).unwrap();
        let mean: f64 = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let sigma = post.cov[(0, 0)].max(0.0).sqrt();
        let tol = 3.0 * sigma / (n as f64).sqrt() + 1e-6;
        assert!((mean - post.mean[0]).abs() < tol, "mean {mean} vs {}", post.mean[0]);
    }

    #[test]
    fn kolmogorov_consistency_of_marginals() {
        let ctx = vec![(-0.5, 0.3), (0.8, -1.2), (1.4, 0.9)];
        for spec in KernelSpec::ALL {
            let joint = posterior(spec, &ctx, &[0.1, 1.9]).unwrap();
            let single = posterior(spec, &ctx, &[0.1]).unwrap();
            assert!((joint.mean[0] - single.mean[0]).abs() < 1e-10);
            assert!((joint.cov[(0, 0)] - single.cov[(0, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn prediction_map_is_translation_equivariant() {
        let mut rng = rng_stream(55, 0);
        use rand::Rng;
        for trial in 0..100 {
            let spec = KernelSpec::ALL[trial % 4];
            let tau: f64 = rng.random_range(-3.0..3.0);
            let ctx: Vec<(f64, f64)> = (0..4)
                .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)))
                .collect();
            let targets: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let base = posterior(spec, &ctx, &targets).unwrap();
            let ctx_s: Vec<(f64, f64)> = ctx.iter().map(|&(x, y)| (x + tau, y)).collect();
            let targets_s: Vec<f64> = targets.iter().map(|x| x + tau).collect();
            let shifted = posterior(spec, &ctx_s, &targets_s).unwrap();
            for i in 0..3 {
                assert!((base.mean[i] - shifted.mean[i]).abs() < 1e-9);
                for j in 0..3 {
                    assert!((base.cov[(i, j)] - shifted.cov[(i, j)]).abs() < 1e-9);
                }
            }
        }
    }
}
