use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Row-major `c = a · b` for plain slices.
pub(crate) fn mm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, T::zero(), c, n as isize, 1,
    );
}

/// `c += a · bᵀ` with `a` m×k and `b` n×k.
pub(crate) fn mm_nt_acc<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, T::one(), c, n as isize, 1,
    );
}

/// `c += aᵀ · b` with `a` k×m and `b` k×n.
pub(crate) fn mm_tn_acc<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, T::one(), c, n as isize, 1,
    );
}

/// Matrix product of an m×k and a k×n tensor.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    mm(m, k, n, a.data(), b.data(), &mut out);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        "matmul",
        vec![a.clone(), b.clone()],
        move |g| {
            let ga = ac.requires_grad().then(|| {
                let mut ga = vec![T::zero(); m * k];
                mm_nt_acc(m, n, k, g, bc.data(), &mut ga);
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![T::zero(); k * n];
                mm_tn_acc(k, m, n, ac.data(), g, &mut gb);
                gb
            });
            vec![ga, gb]
        },
    ))
}

/// Adds `bias[j]` to every element whose last index is `j`.
pub fn add_bias_last<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().unwrap_or(&0);
    if bias.rank() != 1 || bias.shape()[0] != n {
        return Err(Error::dim("add_bias_last", x.shape(), bias.shape()));
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
        .collect();
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        "add_bias_last",
        vec![x.clone(), bias.clone()],
        move |g| {
            let mut gb = vec![T::zero(); n];
            for row in g.chunks(n) {
                gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
            }
            vec![Some(g.to_vec()), Some(gb)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn identity_and_dot() {
        let i = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap().data(), b.data());

        let r = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let c = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2, 1]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn times_zeros_has_zero_grad() {
        let a = Tensor::<f64>::from_vec(vec![1.0, -2.0, 3.0, 4.0], &[2, 2])
            .unwrap()
            .requires_grad_();
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let y = matmul(&a, &z).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        ops::sum(&y).backward().unwrap();
        assert!(a.grad().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatch_is_dimension_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }
}
