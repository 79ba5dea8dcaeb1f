use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, ops, Element, Tensor};
use crate::error::{Error, Result};

/// Comparison of tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_abs_err: f64,
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    fn new(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> Self {
        let max_abs_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        let max_rel_err = if scale > 0.0 { max_abs_err / scale } else { max_abs_err };
        GradcheckReport {
            analytic,
            numeric,
            max_abs_err,
            max_rel_err,
            tol,
            passed: max_rel_err <= tol && max_abs_err.is_finite(),
        }
    }
}

fn eval_scalar<T: Element>(y: &Tensor<T>, weights: Option<&[f64]>) -> Result<f64> {
    match weights {
        None if y.numel() == 1 => Ok(y.item().f64()),
        None => Err(Error::Usage(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            y.shape()
        ))),
        Some(w) => Ok(y.data().iter().zip(w).map(|(v, w)| v.f64() * w).sum()),
    }
}

fn check<T, F>(f: &F, at: &Tensor<T>, eps: f64, tol: f64, weights: Option<&[f64]>) -> Result<GradcheckReport>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("gradcheck eps must be > 0, got {eps}")));
    }
    let leaf = at.detach().requires_grad_();
    let y = f(&leaf)?;
    let loss = match weights {
        None => y.clone(),
        Some(w) => {
            let wt = Tensor::from_vec(w.iter().map(|&v| T::c(v)).collect(), y.shape())?;
            ops::sum(&ops::mul(&y, &wt)?)
        }
    };
    eval_scalar(&y, weights)?;
    let analytic: Vec<f64> = if loss.requires_grad() {
        loss.backward()?;
        leaf.grad()
            .map(|g| g.iter().map(|v| v.f64()).collect())
            .unwrap_or_else(|| vec![0.0; at.numel()])
    } else {
        vec![0.0; at.numel()]
    };

    let base = at.to_vec();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let probe = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] = T::c(base[i].f64() + delta);
            let t = Tensor::from_vec(v, at.shape())?;
            no_grad(|| eval_scalar(&f(&t)?, weights))
        };
        numeric.push((probe(eps)? - probe(-eps)?) / (2.0 * eps));
    }
    Ok(GradcheckReport::new(analytic, numeric, tol))
}

/// Checks a scalar-valued `f` at `at` with central differences of step `eps`.
pub fn gradcheck<T, F>(f: F, at: &Tensor<T>, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    check(&f, at, eps, tol, None)
}

/// Like [`gradcheck`] for any-shaped `f`, checking `Σ r ⊙ f(x)` for a fixed
/// random `r` drawn from `seed`. The projection is accumulated in f64.
pub fn gradcheck_projected<T, F>(f: F, at: &Tensor<T>, eps: f64, tol: f64, seed: u64) -> Result<GradcheckReport>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let probe = no_grad(|| f(at))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::<f64>::uniform(probe.shape(), -1.0, 1.0, &mut rng).to_vec();
    check(&f, at, eps, tol, Some(&w))
}
