use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Statistics source for [`batch_norm`].
pub enum NormStats<'a, T> {
    /// Normalize by the batch's own per-channel mean and biased variance.
    Batch,
    /// Normalize by fixed running statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

/// Output of [`batch_norm`]; `mean`/`var` are the statistics used.
pub struct NormOutput<T: Element> {
    pub y: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel normalization of a B×C×H×W tensor followed by `gamma`/`beta`.
pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: NormStats<'_, T>,
    eps: f64,
) -> Result<NormOutput<T>> {
    let (b, c, hw) = match *x.shape() {
        [b, c, h, w] => (b, c, h * w),
        _ => return Err(Error::dim("batch_norm", x.shape(), gamma.shape())),
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("batch_norm", x.shape(), gamma.shape()));
    }
    let n = (b * hw) as f64;
    let d = x.data();
    let plane = |bi: usize, ci: usize| &d[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];

    let batch_stats = matches!(stats, NormStats::Batch);
    let (mean, var): (Vec<T>, Vec<T>) = match stats {
        NormStats::Batch => (0..c)
            .map(|ci| {
                let mut s = 0.0f64;
                for bi in 0..b {
                    s += plane(bi, ci).iter().map(|v| v.f64()).sum::<f64>();
                }
                let mu = s / n;
                let mut q = 0.0f64;
                for bi in 0..b {
                    q += plane(bi, ci).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
                }
                (T::c(mu), T::c(q / n))
            })
            .unzip(),
        NormStats::Fixed { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::dim("batch_norm", x.shape(), &[mean.len()]));
            }
            (mean.to_vec(), var.to_vec())
        }
    };
    let eps_t = T::c(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut xhat = vec![T::zero(); d.len()];
    let mut y = vec![T::zero(); d.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let (g, bt) = (gamma.data()[ci], beta.data()[ci]);
            for k in 0..hw {
                let xh = (d[base + k] - mean[ci]) * inv_std[ci];
                xhat[base + k] = xh;
                y[base + k] = g * xh + bt;
            }
        }
    }
    let gc = gamma.clone();
    let inv_std_c = inv_std.clone();
    let y = Tensor::from_op(
        y,
        x.shape().to_vec(),
        "batch_norm",
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gy| {
            let mut gx = vec![T::zero(); gy.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for ci in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * hw;
                    for k in 0..hw {
                        sum_g = sum_g + gy[base + k];
                        sum_gx = sum_gx + gy[base + k] * xhat[base + k];
                    }
                }
                gb[ci] = sum_g;
                gg[ci] = sum_gx;
                let gam = gc.data()[ci];
                let is = inv_std_c[ci];
                if batch_stats {
                    let inv_n = T::c(1.0 / n);
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            gx[base + k] = gam
                                * is
                                * (gy[base + k] - inv_n * sum_g - xhat[base + k] * inv_n * sum_gx);
                        }
                    }
                } else {
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            gx[base + k] = gam * is * gy[base + k];
                        }
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        },
    );
    Ok(NormOutput { y, mean, var })
}
