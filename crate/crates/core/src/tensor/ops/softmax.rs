use super::reduce::axis_split;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// In-place max-shifted softmax of one contiguous row.
pub(crate) fn softmax_row<T: Element>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total = total + *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// Gradient of a softmax row: `p ⊙ (g − ⟨g, p⟩)`, written into `out`.
pub(crate) fn softmax_row_backward<T: Element>(p: &[T], g: &[T], out: &mut [T]) {
    let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o = pi * (gi - dot);
    }
}

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut y = vec![T::zero(); x.numel()];
    let mut row = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..n {
                row[k] = x.data()[(o * n + k) * inner + i];
            }
            softmax_row(&mut row);
            for k in 0..n {
                y[(o * n + k) * inner + i] = row[k];
            }
        }
    }
    let yc = y.clone();
    Ok(Tensor::from_op(y, x.shape().to_vec(), "softmax", vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); g.len()];
        let (mut p, mut gr, mut out) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    let idx = (o * n + k) * inner + i;
                    p[k] = yc[idx];
                    gr[k] = g[idx];
                }
                softmax_row_backward(&p, &gr, &mut out);
                for k in 0..n {
                    gx[(o * n + k) * inner + i] = out[k];
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (b, c) = match *logits.shape() {
        [b, c] => (b, c),
        _ => return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len(), 0])),
    };
    if labels.len() != b {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} outside [0, {c})")));
    }
    let mut probs = logits.to_vec();
    let mut loss = 0.0f64;
    for (row, &l) in probs.chunks_mut(c).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m.f64() + row.iter().map(|&v| (v - m).f64().exp()).sum::<f64>().ln();
        loss += lse - row[l].f64();
        softmax_row(row);
    }
    let labels = labels.to_vec();
    let inv_b = T::c(1.0 / b as f64);
    Ok(Tensor::from_op(
        vec![T::c(loss / b as f64)],
        Vec::new(),
        "cross_entropy",
        vec![logits.clone()],
        move |g| {
            let scale = g[0] * inv_b;
            let mut gx = probs.clone();
            for (row, &l) in gx.chunks_mut(c).zip(&labels) {
                row[l] = row[l] - T::one();
                row.iter_mut().for_each(|v| *v = *v * scale);
            }
            vec![Some(gx)]
        },
    ))
}
