use super::tape::{Tape, ValueId};
use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// Central-difference check of a scalar subgraph built over a flat point.
///
/// `builder` receives a fresh tape and the leaf holding the point and must
/// return a scalar root. Returns the max over coordinates of
/// |analytic - numeric| / (|numeric| + 1e-8).
pub fn grad_check<F>(builder: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    assert!(step > 0.0, "step must be positive");
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(point.to_vec()));
    let root = builder(&mut tape, x)?;
    tape.evaluate(root);
    tape.backward(root)?;
    let analytic = tape.grad(x);

    let eval_at = |p: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(p.to_vec()));
        let root = builder(&mut t, x)?;
        Ok(t.evaluate(root).item())
    };

    let mut p = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let hi = eval_at(&p)?;
        p[i] = orig - step;
        let lo = eval_at(&p)?;
        p[i] = orig;
        let numeric = (hi - lo) / (2.0 * step);
        let err = rel_err(analytic[i], numeric);
        if !err.is_finite() {
            return Err(AutodiffError::NonFinite { what: "grad_check".into(), index: i });
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Numeric probing of selected coordinates of an externally-differentiated
/// loss. `eval_loss` must be deterministic in the flat parameter vector
/// (callers re-seed any noise per call); `analytic` is the full gradient.
pub fn grad_check_param<F>(
    mut eval_loss: F,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(point.len(), analytic.len());
    assert!(step > 0.0);
    let mut p = point.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = p[i];
        p[i] = orig + step;
        let hi = eval_loss(&p)?;
        p[i] = orig - step;
        let lo = eval_loss(&p)?;
        p[i] = orig;
        let numeric = (hi - lo) / (2.0 * step);
        let err = rel_err(analytic[i], numeric);
        if !err.is_finite() {
            return Err(AutodiffError::NonFinite { what: "grad_check_param".into(), index: i });
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_map_is_exact() {
        // d/dx (a . x) is a; finite differences of a linear map are exact.
        let a = vec![2.0, -3.0, 0.5, 7.0];
        let err = grad_check(
            |t, x| {
                let coef = t.leaf(Tensor::vector(a.clone()));
                let prod = t.mul(coef, x)?;
                Ok(t.sum(prod))
            },
            &[0.1, -0.4, 2.2, 1.0],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-10, "linear map err {err}");
    }

    #[test]
    fn logsumexp_over_four_samples() {
        let err = grad_check(|t, x| t.logsumexp(x), &[0.3, -1.2, 0.8, 0.1], 1e-4).unwrap();
        assert!(err <= 1e-6, "logsumexp err {err}");
    }

    #[test]
    fn three_layer_composite_matches_central_differences() {
        // linear -> leaky relu -> Gaussian log-density, random point.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let point: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = grad_check(
            |t, x| {
                let xm = t.reshape(x, vec![1, 4])?;
                let wv = t.leaf(Tensor::matrix(3, 4, w.clone()));
                let bv = t.leaf(Tensor::vector(vec![0.1, -0.2, 0.3]));
                let lin = t.linear(xm, wv, bv)?;
                let act = t.leaky_relu(lin, 0.1);
                let mu = t.reshape(act, vec![1, 3])?;
                let sig = t.leaf(Tensor::matrix(1, 3, vec![0.7, 1.3, 0.9]));
                let lp = t.gaussian_logpdf(Tensor::matrix(1, 3, y.clone()), mu, sig)?;
                Ok(t.sum(lp))
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "composite err {err}");
    }
}
