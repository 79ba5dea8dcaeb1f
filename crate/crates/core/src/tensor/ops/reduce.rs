use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// (outer, extent, inner) split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Reduces along `axis`, or over every element when `axis` is `None`.
///
/// The reduced axis is removed from the shape; a full reduction yields a
/// scalar (rank 0). For `Max`, ties route the gradient to the first maximum.
pub fn reduce<T: Element>(x: &Tensor<T>, kind: ReduceKind, axis: Option<usize>) -> Result<Tensor<T>> {
    let (outer, n, inner, out_shape) = match axis {
        None => (1, x.numel(), 1, Vec::new()),
        Some(a) if a < x.rank() => {
            let (o, n, i) = axis_split(x.shape(), a);
            let mut s = x.shape().to_vec();
            s.remove(a);
            (o, n, i, s)
        }
        Some(a) => {
            return Err(Error::Shape(format!(
                "axis {a} out of range for shape {:?}",
                x.shape()
            )))
        }
    };
    let d = x.data();
    let mut out = vec![T::zero(); outer * inner];
    let mut argmax = vec![0usize; if kind == ReduceKind::Max { outer * inner } else { 0 }];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| d[(o * n + k) * inner + i];
            let slot = o * inner + i;
            out[slot] = match kind {
                ReduceKind::Sum => (0..n).map(at).sum(),
                ReduceKind::Mean => (0..n).map(at).sum::<T>() / T::c(n as f64),
                ReduceKind::Max => {
                    let mut best = 0;
                    for k in 1..n {
                        if at(k) > at(best) {
                            best = k;
                        }
                    }
                    argmax[slot] = best;
                    at(best)
                }
            };
        }
    }
    let total = x.numel();
    Ok(Tensor::from_op(out, out_shape, "reduce", vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); total];
        let inv = T::c(1.0 / n as f64);
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let v = if kind == ReduceKind::Mean { g[slot] * inv } else { g[slot] };
                        for k in 0..n {
                            gx[(o * n + k) * inner + i] = v;
                        }
                    }
                    ReduceKind::Max => gx[(o * n + argmax[slot]) * inner + i] = g[slot],
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Sum of all elements as a scalar.
pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    reduce(x, ReduceKind::Sum, None).expect("full reduction is infallible")
}

pub fn mean<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    reduce(x, ReduceKind::Mean, None).expect("full reduction is infallible")
}
