//! Image-shaped operations on B×C×H×W tensors.

use super::matmul::{mm, mm_nt_acc, mm_tn_acc};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn dims4<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::dim(op, x.shape(), &[0, 0, 0, 0])),
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one C×H×W image into a (C·kh·kw)×(oh·ow) matrix.
    fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        let n = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            *v = if jj < 0 || jj >= self.w as isize {
                                T::zero()
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back, accumulating.
    fn col2im<T: Element>(&self, cols: &[T], img: &mut [T]) {
        let n = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[jj as usize] = dst[jj as usize] + src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a B×C×H×W input with an O×C×kh×kw filter bank,
/// zero padding `padding` on every side.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    filter: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("conv2d", input)?;
    let [o, fc, kh, kw] = dims4("conv2d", filter)?;
    if fc != c {
        return Err(Error::dim("conv2d", input.shape(), filter.shape()));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::dim("conv2d", input.shape(), filter.shape()));
    }
    let g = ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
    };
    let (rows, n) = (g.rows(), g.cols());
    let mut cols = vec![T::zero(); b * rows * n];
    let mut out = vec![T::zero(); b * o * n];
    let img = c * h * w;
    for bi in 0..b {
        let cb = &mut cols[bi * rows * n..(bi + 1) * rows * n];
        g.im2col(&input.data()[bi * img..(bi + 1) * img], cb);
        mm(o, rows, n, filter.data(), cb, &mut out[bi * o * n..(bi + 1) * o * n]);
    }
    let shape = vec![b, o, g.oh, g.ow];
    let (xc, fc) = (input.clone(), filter.clone());
    Ok(Tensor::from_op(
        out,
        shape,
        "conv2d",
        vec![input.clone(), filter.clone()],
        move |grad| {
            let mut gx = xc.requires_grad().then(|| vec![T::zero(); b * img]);
            let mut gw = fc.requires_grad().then(|| vec![T::zero(); o * rows]);
            let mut dcols = vec![T::zero(); rows * n];
            for bi in 0..b {
                let gy = &grad[bi * o * n..(bi + 1) * o * n];
                let cb = &cols[bi * rows * n..(bi + 1) * rows * n];
                if let Some(gw) = gw.as_mut() {
                    mm_nt_acc(o, n, rows, gy, cb, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    dcols.fill(T::zero());
                    mm_tn_acc(rows, o, n, fc.data(), gy, &mut dcols);
                    g.col2im(&dcols, &mut gx[bi * img..(bi + 1) * img]);
                }
            }
            vec![gx, gw]
        },
    ))
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c, h, w] = dims4("add_channel_bias", x)?;
    if bias.shape() != [c] {
        return Err(Error::dim("add_channel_bias", x.shape(), bias.shape()));
    }
    let hw = h * w;
    let mut data = x.to_vec();
    for (i, plane) in data.chunks_mut(hw).enumerate() {
        let v = bias.data()[i % c];
        plane.iter_mut().for_each(|p| *p = *p + v);
    }
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        "add_channel_bias",
        vec![x.clone(), bias.clone()],
        move |g| {
            let mut gb = vec![T::zero(); c];
            for (i, plane) in g.chunks(hw).enumerate() {
                gb[i % c] = gb[i % c] + plane.iter().copied().sum::<T>();
            }
            vec![Some(g.to_vec()), Some(gb)]
        },
    ))
}

/// Zero padding by `p` pixels on every side.
pub fn pad2d<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("pad2d", x)?;
    if p == 0 {
        return Ok(x.clone());
    }
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut data = vec![T::zero(); b * c * ph * pw];
    for (src, dst) in x.data().chunks(h * w).zip(data.chunks_mut(ph * pw)) {
        for i in 0..h {
            dst[(i + p) * pw + p..(i + p) * pw + p + w].copy_from_slice(&src[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![b, c, ph, pw],
        "pad2d",
        vec![x.clone()],
        move |g| {
            let mut gx = vec![T::zero(); b * c * h * w];
            for (src, dst) in g.chunks(ph * pw).zip(gx.chunks_mut(h * w)) {
                for i in 0..h {
                    dst[i * w..(i + 1) * w]
                        .copy_from_slice(&src[(i + p) * pw + p..(i + p) * pw + p + w]);
                }
            }
            vec![Some(gx)]
        },
    ))
}

/// Keeps the `out_h`×`out_w` window starting at (`top`, `left`).
pub fn crop2d<T: Element>(
    x: &Tensor<T>,
    top: usize,
    left: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("crop2d", x)?;
    if out_h == 0 || out_w == 0 || top + out_h > h || left + out_w > w {
        return Err(Error::dim("crop2d", x.shape(), &[out_h, out_w]));
    }
    if top == 0 && left == 0 && out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let mut data = vec![T::zero(); b * c * out_h * out_w];
    for (src, dst) in x.data().chunks(h * w).zip(data.chunks_mut(out_h * out_w)) {
        for i in 0..out_h {
            let s = (top + i) * w + left;
            dst[i * out_w..(i + 1) * out_w].copy_from_slice(&src[s..s + out_w]);
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![b, c, out_h, out_w],
        "crop2d",
        vec![x.clone()],
        move |g| {
            let mut gx = vec![T::zero(); b * c * h * w];
            for (src, dst) in g.chunks(out_h * out_w).zip(gx.chunks_mut(h * w)) {
                for i in 0..out_h {
                    let d = (top + i) * w + left;
                    dst[d..d + out_w].copy_from_slice(&src[i * out_w..(i + 1) * out_w]);
                }
            }
            vec![Some(gx)]
        },
    ))
}

/// Mean over each `window`×`window` patch, stepping by `stride`.
///
/// `window = 1, stride = s` is plain subsampling of every s-th pixel.
pub fn avgpool2d<T: Element>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("avgpool2d", x)?;
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::dim("avgpool2d", x.shape(), &[window, stride]));
    }
    if window == 1 && stride == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let inv = T::c(1.0 / (window * window) as f64);
    let mut data = vec![T::zero(); b * c * oh * ow];
    for (src, dst) in x.data().chunks(h * w).zip(data.chunks_mut(oh * ow)) {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = T::zero();
                for di in 0..window {
                    for dj in 0..window {
                        acc = acc + src[(oi * stride + di) * w + oj * stride + dj];
                    }
                }
                dst[oi * ow + oj] = acc * inv;
            }
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![b, c, oh, ow],
        "avgpool2d",
        vec![x.clone()],
        move |g| {
            let mut gx = vec![T::zero(); b * c * h * w];
            for (src, dst) in g.chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let v = src[oi * ow + oj] * inv;
                        for di in 0..window {
                            for dj in 0..window {
                                let k = (oi * stride + di) * w + oj * stride + dj;
                                dst[k] = dst[k] + v;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        },
    ))
}

/// Mean over all pixels: B×C×H×W → B×C.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("global_avg_pool", x)?;
    let hw = h * w;
    let inv = T::c(1.0 / hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_op(
        data,
        vec![b, c],
        "global_avg_pool",
        vec![x.clone()],
        move |g| {
            let gx = g
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                .collect();
            vec![Some(gx)]
        },
    ))
}

/// B×C×H×W → B×(H·W)×C, pixels in row-major order.
pub fn nchw_to_tokens<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("nchw_to_tokens", x)?;
    let l = h * w;
    let data = transpose_blocks(x.data(), b, c, l);
    Ok(Tensor::from_op(
        data,
        vec![b, l, c],
        "nchw_to_tokens",
        vec![x.clone()],
        move |g| vec![Some(transpose_blocks(g, b, l, c))],
    ))
}

/// B×(H·W)×C → B×C×H×W.
pub fn tokens_to_nchw<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, l, c) = match *x.shape() {
        [b, l, c] if l == h * w => (b, l, c),
        _ => return Err(Error::dim("tokens_to_nchw", x.shape(), &[h, w])),
    };
    let data = transpose_blocks(x.data(), b, l, c);
    Ok(Tensor::from_op(
        data,
        vec![b, c, h, w],
        "tokens_to_nchw",
        vec![x.clone()],
        move |g| vec![Some(transpose_blocks(g, b, c, l))],
    ))
}

/// Transposes each of `b` consecutive rows×cols blocks.
fn transpose_blocks<T: Element>(src: &[T], b: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        let s = &src[bi * rows * cols..(bi + 1) * rows * cols];
        let d = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            for cc in 0..cols {
                d[cc * rows + r] = s[r * cols + cc];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn conv_hand_examples() {
        let x = t((1..=9).map(f64::from).collect(), &[1, 1, 3, 3]);
        let ones = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &ones, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[45.0]);

        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let k = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_delta_is_identity() {
        let x = t((0..50).map(|v| (v as f64).sin()).collect(), &[1, 2, 5, 5]);
        let mut k = vec![0.0; 2 * 2 * 9];
        k[4] = 1.0; // out 0 <- in 0
        k[3 * 9 + 4] = 1.0; // out 1 <- in 1
        let y = conv2d(&x, &t(k, &[2, 2, 3, 3]), 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &k, 1, 1), Err(Error::Dimension { .. })));
        assert!(conv2d(&x, &k, 1, 2).is_ok());
    }

    #[test]
    fn pool_examples() {
        let x = t(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        assert_eq!(avgpool2d(&x, 2, 2).unwrap().data(), &[2.5]);
        assert_eq!(avgpool2d(&x, 1, 1).unwrap().data(), x.data());
        let sub = avgpool2d(&t((0..16).map(f64::from).collect(), &[1, 1, 4, 4]), 1, 2).unwrap();
        assert_eq!(sub.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn pad_then_crop_roundtrip() {
        let x = t((0..24).map(f64::from).collect(), &[1, 2, 3, 4]);
        let p = pad2d(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 2, 7, 8]);
        let c = crop2d(&p, 2, 2, 3, 4).unwrap();
        assert_eq!(c.data(), x.data());
    }

    #[test]
    fn token_layout_roundtrip() {
        let x = t((0..24).map(f64::from).collect(), &[2, 3, 2, 2]);
        let tok = nchw_to_tokens(&x).unwrap();
        assert_eq!(tok.shape(), &[2, 4, 3]);
        // pixel 1 of image 0, channel 2 → x[0,2,0,1]
        assert_eq!(tok.data()[3 + 2], x.data()[2 * 4 + 1]);
        let back = tokens_to_nchw(&tok, 2, 2).unwrap();
        assert_eq!(back.data(), x.data());
    }
}
