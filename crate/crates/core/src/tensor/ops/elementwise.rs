use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "add",
        vec![a.clone(), b.clone()],
        |g| vec![Some(g.to_vec()), Some(g.to_vec())],
    ))
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "sub",
        vec![a.clone(), b.clone()],
        |g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
    ))
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "mul",
        vec![a.clone(), b.clone()],
        move |g| {
            let ga = g.iter().zip(bc.data()).map(|(&g, &y)| g * y).collect();
            let gb = g.iter().zip(ac.data()).map(|(&g, &x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        },
    ))
}

pub fn scale<T: Element>(a: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::c(s);
    let data = a.data().iter().map(|&x| x * s).collect();
    Tensor::from_op(data, a.shape().to_vec(), "scale", vec![a.clone()], move |g| {
        vec![Some(g.iter().map(|&v| v * s).collect())]
    })
}

/// Multiplies sample `b` of a batch-major tensor by `factors[b]`.
///
/// The factors are constants (used for stochastic depth masks).
pub fn scale_per_sample<T: Element>(a: &Tensor<T>, factors: &[T]) -> Result<Tensor<T>> {
    let batch = *a.shape().first().unwrap_or(&0);
    if batch != factors.len() {
        return Err(Error::dim("scale_per_sample", a.shape(), &[factors.len()]));
    }
    let per = a.numel() / batch;
    let data = a
        .data()
        .chunks(per)
        .zip(factors)
        .flat_map(|(chunk, &f)| chunk.iter().map(move |&x| x * f))
        .collect();
    let factors = factors.to_vec();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "scale_per_sample",
        vec![a.clone()],
        move |g| {
            let ga = g
                .chunks(per)
                .zip(&factors)
                .flat_map(|(chunk, &f)| chunk.iter().map(move |&x| x * f))
                .collect();
            vec![Some(ga)]
        },
    ))
}

pub fn reshape<T: Element>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if crate::tensor::numel(shape) != a.numel() {
        return Err(Error::dim("reshape", a.shape(), shape));
    }
    Ok(Tensor::from_op(
        a.to_vec(),
        shape.to_vec(),
        "reshape",
        vec![a.clone()],
        |g| vec![Some(g.to_vec())],
    ))
}

/// Pointwise nonlinearities with exact derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    /// `(1/beta) ln(1 + exp(beta x))`.
    Softplus { beta: f64 },
    Relu,
}

pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_t<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Overflow-free `(1/beta) ln(1 + exp(beta x))`.
pub(crate) fn softplus_t<T: Element>(x: T, beta: T) -> T {
    let z = beta * x;
    let v = if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    v / beta
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    match kind {
        Activation::Sigmoid => {
            let y: Vec<T> = x.data().iter().map(|&v| sigmoid_t(v)).collect();
            let yc = y.clone();
            Ok(Tensor::from_op(y, x.shape().to_vec(), "sigmoid", vec![x.clone()], move |g| {
                let gx = g
                    .iter()
                    .zip(&yc)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                vec![Some(gx)]
            }))
        }
        Activation::Softplus { beta } => {
            if beta <= 0.0 || !beta.is_finite() {
                return Err(Error::Config(format!("softplus beta must be > 0, got {beta}")));
            }
            let b = T::c(beta);
            let y = x.data().iter().map(|&v| softplus_t(v, b)).collect();
            let xc = x.clone();
            Ok(Tensor::from_op(y, x.shape().to_vec(), "softplus", vec![x.clone()], move |g| {
                let gx = g
                    .iter()
                    .zip(xc.data())
                    .map(|(&g, &v)| g * sigmoid_t(b * v))
                    .collect();
                vec![Some(gx)]
            }))
        }
        Activation::Relu => {
            let y = x.data().iter().map(|&v| v.max(T::zero())).collect();
            let xc = x.clone();
            Ok(Tensor::from_op(y, x.shape().to_vec(), "relu", vec![x.clone()], move |g| {
                let gx = g
                    .iter()
                    .zip(xc.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(gx)]
            }))
        }
    }
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    activation(x, Activation::Relu).expect("relu is infallible")
}
