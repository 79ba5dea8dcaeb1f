use super::{head_split, offsets, GpsaLayer, PositionalLogits};
use crate::error::{Error, Result};
use crate::tensor::ops::{self, mm, mm_nt_acc, mm_tn_acc, sigmoid_t, softmax_row, softmax_row_backward, softplus_t};
use crate::tensor::{grad_enabled, Element, Tensor};

/// Row-wise softmax of every head's positional logits.
fn positional_softmax<T: Element>(pl: &PositionalLogits<T>) -> Vec<T> {
    let l = pl.len();
    let mut p = pl.logits.clone();
    p.chunks_mut(l).for_each(softmax_row);
    p
}

/// Content-logit scale for a head with `len` query/key columns.
fn head_scale<T: Element>(layer: &GpsaLayer<T>, len: usize) -> T {
    if layer.config.content_scale {
        T::c(1.0 / (len as f64).sqrt())
    } else {
        T::one()
    }
}

/// `s = scale · Q_h K_hᵀ` for one image, where Q/K rows have stride `qk`.
#[allow(clippy::too_many_arguments)]
fn content_logits<T: Element>(l: usize, qk: usize, start: usize, len: usize, q: &[T], k: &[T], scale: T, s: &mut [T]) {
    T::gemm(
        l, len, l, scale, &q[start..], qk as isize, 1, &k[start..], 1, qk as isize, T::zero(), s, l as isize, 1,
    );
}

/// Per-head attention maps (N_h of L×L) for a single L×D_in input.
pub fn gated_attention<T: Element>(
    x: &Tensor<T>,
    layer: &GpsaLayer<T>,
    pl: &PositionalLogits<T>,
) -> Result<Vec<Tensor<T>>> {
    let cfg = layer.config;
    let (l, d) = match *x.shape() {
        [l, d] => (l, d),
        _ => return Err(Error::dim("gated_attention", x.shape(), &[pl.len(), cfg.d_in])),
    };
    if d != cfg.d_in {
        return Err(Error::dim("gated_attention", x.shape(), &[pl.len(), cfg.d_in]));
    }
    if l != pl.len() || pl.n_heads != cfg.n_heads {
        return Err(Error::dim("gated_attention", &[l], &[pl.height, pl.width]));
    }
    let qk = cfg.qk_dim();
    let mut q = vec![T::zero(); l * qk];
    let mut k = vec![T::zero(); l * qk];
    mm(l, d, qk, x.data(), layer.w_qry.data(), &mut q);
    mm(l, d, qk, x.data(), layer.w_key.data(), &mut k);
    let p = positional_softmax(pl);
    let mut maps = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (start, len) = head_split(qk, cfg.n_heads, h);
        let mut a = vec![T::zero(); l * l];
        content_logits(l, qk, start, len, &q, &k, head_scale(layer, len), &mut a);
        a.chunks_mut(l).for_each(softmax_row);
        let g = sigmoid_t(layer.gate.data()[h]);
        for (ai, &pi) in a.iter_mut().zip(&p[h * l * l..(h + 1) * l * l]) {
            *ai = (T::one() - g) * *ai + g * pi;
        }
        maps.push(Tensor::from_vec(a, &[l, l])?);
    }
    Ok(maps)
}

/// Multi-head gated positional self-attention over a B×L×D_in token tensor
/// laid out on an `height`×`width` grid. Returns B×L×D_out.
///
/// Differentiable with respect to the input and every layer parameter.
pub fn gpsa_forward<T: Element>(
    x: &Tensor<T>,
    layer: &GpsaLayer<T>,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    gpsa_forward_rows(x, layer, height, width, None)
}

/// Like [`gpsa_forward`] but only evaluates the query positions in `rows`
/// (row-major grid indices). Keys and values still span the whole grid, so
/// each returned row equals the matching row of the full output.
/// Returns B×rows.len()×D_out.
pub fn gpsa_forward_rows<T: Element>(
    x: &Tensor<T>,
    layer: &GpsaLayer<T>,
    height: usize,
    width: usize,
    rows: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let cfg = layer.config;
    let (b, l, d_in) = match *x.shape() {
        [b, l, d] => (b, l, d),
        _ => return Err(Error::dim("gpsa_forward", x.shape(), &[height * width, cfg.d_in])),
    };
    if d_in != cfg.d_in {
        return Err(Error::dim("gpsa_forward", x.shape(), &[b, l, cfg.d_in]));
    }
    if l != height * width {
        return Err(Error::dim("gpsa_forward", x.shape(), &[height, width]));
    }
    let qidx: Vec<usize> = match rows {
        Some(r) => r.to_vec(),
        None => (0..l).collect(),
    };
    if let Some(&bad) = qidx.iter().find(|&&i| i >= l) {
        return Err(Error::dim("gpsa_forward rows", &[bad], &[l]));
    }
    let lq = qidx.len();
    let (nh, d_v, d_out, qk) = (cfg.n_heads, cfg.d_v(), cfg.d_out, cfg.qk_dim());
    let bl = b * l;
    let blq = b * lq;
    let m2 = lq * l;
    let hv = nh * d_v;

    let pl = layer.positional_logits(height, width)?;
    let mut p = vec![T::zero(); nh * m2];
    for h in 0..nh {
        for (qi, &i) in qidx.iter().enumerate() {
            let dst = &mut p[h * m2 + qi * l..h * m2 + (qi + 1) * l];
            dst.copy_from_slice(&pl.logits[h * l * l + i * l..h * l * l + (i + 1) * l]);
            softmax_row(dst);
        }
    }
    let gates: Vec<T> = layer.gate.data().iter().map(|&v| sigmoid_t(v)).collect();

    let xd = x.data();
    let mut xq = vec![T::zero(); blq * d_in];
    for bi in 0..b {
        for (qi, &i) in qidx.iter().enumerate() {
            xq[(bi * lq + qi) * d_in..(bi * lq + qi + 1) * d_in]
                .copy_from_slice(&xd[(bi * l + i) * d_in..(bi * l + i + 1) * d_in]);
        }
    }
    let mut q = vec![T::zero(); blq * qk];
    let mut k = vec![T::zero(); bl * qk];
    let mut v = vec![T::zero(); bl * d_v];
    mm(blq, d_in, qk, &xq, layer.w_qry.data(), &mut q);
    mm(bl, d_in, qk, xd, layer.w_key.data(), &mut k);
    mm(bl, d_in, d_v, xd, layer.w_val.data(), &mut v);

    let mut parents = vec![
        x.clone(),
        layer.w_qry.clone(),
        layer.w_key.clone(),
        layer.w_val.clone(),
        layer.w_out.clone(),
        layer.alpha_raw.clone(),
        layer.centers.clone(),
        layer.gate.clone(),
    ];
    if let Some(bias) = &layer.bias {
        parents.push(bias.clone());
    }
    let record = grad_enabled() && parents.iter().any(|t| t.requires_grad());

    let mut content = if record { vec![T::zero(); b * nh * m2] } else { Vec::new() };
    let mut scratch = vec![T::zero(); m2];
    let mut a = vec![T::zero(); m2];
    let mut ycat = vec![T::zero(); blq * hv];
    for bi in 0..b {
        let qb = &q[bi * lq * qk..(bi + 1) * lq * qk];
        let kb = &k[bi * l * qk..(bi + 1) * l * qk];
        let vb = &v[bi * l * d_v..(bi + 1) * l * d_v];
        for h in 0..nh {
            let (start, len) = head_split(qk, nh, h);
            let c = if record {
                &mut content[(bi * nh + h) * m2..(bi * nh + h + 1) * m2]
            } else {
                &mut scratch[..]
            };
            T::gemm(
                lq, len, l, head_scale(layer, len), &qb[start..], qk as isize, 1, &kb[start..], 1,
                qk as isize, T::zero(), c, l as isize, 1,
            );
            c.chunks_mut(l).for_each(softmax_row);
            let g = gates[h];
            let ph = &p[h * m2..(h + 1) * m2];
            for ((ai, &ci), &pi) in a.iter_mut().zip(c.iter()).zip(ph) {
                *ai = (T::one() - g) * ci + g * pi;
            }
            T::gemm(
                lq, l, d_v, T::one(), &a, l as isize, 1, vb, d_v as isize, 1, T::zero(),
                &mut ycat[bi * lq * hv + h * d_v..], hv as isize, 1,
            );
        }
    }
    let mut out = vec![T::zero(); blq * d_out];
    mm(blq, hv, d_out, &ycat, layer.w_out.data(), &mut out);
    if let Some(bias) = &layer.bias {
        for row in out.chunks_mut(d_out) {
            row.iter_mut().zip(bias.data()).for_each(|(o, &bv)| *o = *o + bv);
        }
    }
    let shape = vec![b, lq, d_out];
    if !record {
        return Ok(Tensor::leaf(out, shape, false));
    }

    let has_bias = layer.bias.is_some();
    let scales: Vec<T> = (0..nh).map(|h| head_scale(layer, head_split(qk, nh, h).1)).collect();
    let alpha: Vec<T> = layer.alpha_raw.data().iter().map(|&a| softplus_t(a, T::c(cfg.beta))).collect();
    let alpha_raw = layer.alpha_raw.to_vec();
    let centers = layer.centers.to_vec();
    let beta = T::c(cfg.beta);
    let deltas = offsets(height, width);
    let (xc, wq, wk, wv, wo) = (
        x.clone(),
        layer.w_qry.clone(),
        layer.w_key.clone(),
        layer.w_val.clone(),
        layer.w_out.clone(),
    );

    Ok(Tensor::from_op(out, shape, "gpsa", parents, move |go| {
        let zero = T::zero();
        let mut g_wout = vec![zero; hv * d_out];
        mm_tn_acc(hv, blq, d_out, &ycat, go, &mut g_wout);
        let mut gy = vec![zero; blq * hv];
        mm_nt_acc(blq, d_out, hv, go, wo.data(), &mut gy);

        let mut gq = vec![zero; blq * qk];
        let mut gk = vec![zero; bl * qk];
        let mut gv = vec![zero; bl * d_v];
        let mut gp = vec![zero; nh * m2];
        let mut gg = vec![zero; nh];
        let mut a = vec![zero; m2];
        let mut ga = vec![zero; m2];
        let mut gs = vec![zero; m2];
        let mut gc_row = vec![zero; l];
        for bi in 0..b {
            let qb = &q[bi * lq * qk..(bi + 1) * lq * qk];
            let kb = &k[bi * l * qk..(bi + 1) * l * qk];
            let vb = &v[bi * l * d_v..(bi + 1) * l * d_v];
            for h in 0..nh {
                let (start, len) = head_split(qk, nh, h);
                let c = &content[(bi * nh + h) * m2..(bi * nh + h + 1) * m2];
                let ph = &p[h * m2..(h + 1) * m2];
                let g = gates[h];
                for ((ai, &ci), &pi) in a.iter_mut().zip(c).zip(ph) {
                    *ai = (T::one() - g) * ci + g * pi;
                }
                let gyh = &gy[bi * lq * hv + h * d_v..];
                // dA = dY Vᵀ
                T::gemm(
                    lq, d_v, l, T::one(), gyh, hv as isize, 1, vb, 1, d_v as isize, zero, &mut ga,
                    l as isize, 1,
                );
                // dV += Aᵀ dY
                T::gemm(
                    l, lq, d_v, T::one(), &a, 1, l as isize, gyh, hv as isize, 1, T::one(),
                    &mut gv[bi * l * d_v..], d_v as isize, 1,
                );
                let mut acc = zero;
                let gph = &mut gp[h * m2..(h + 1) * m2];
                for idx in 0..m2 {
                    acc = acc + ga[idx] * (ph[idx] - c[idx]);
                    gph[idx] = gph[idx] + g * ga[idx];
                }
                gg[h] = gg[h] + acc;
                let one_minus = T::one() - g;
                for i in 0..lq {
                    let row = i * l..(i + 1) * l;
                    for (dst, &src) in gc_row.iter_mut().zip(&ga[row.clone()]) {
                        *dst = one_minus * src;
                    }
                    softmax_row_backward(&c[row.clone()], &gc_row, &mut gs[row]);
                }
                let sc = scales[h];
                // dQ_h += s · dS K_h ; dK_h += s · dSᵀ Q_h
                T::gemm(
                    lq, l, len, sc, &gs, l as isize, 1, &kb[start..], qk as isize, 1, T::one(),
                    &mut gq[bi * lq * qk + start..], qk as isize, 1,
                );
                T::gemm(
                    l, lq, len, sc, &gs, 1, l as isize, &qb[start..], qk as isize, 1, T::one(),
                    &mut gk[bi * l * qk + start..], qk as isize, 1,
                );
            }
        }

        let xd = xc.data();
        let mut g_wq = vec![zero; d_in * qk];
        let mut g_wk = vec![zero; d_in * qk];
        let mut g_wv = vec![zero; d_in * d_v];
        mm_tn_acc(d_in, blq, qk, &xq, &gq, &mut g_wq);
        mm_tn_acc(d_in, bl, qk, xd, &gk, &mut g_wk);
        mm_tn_acc(d_in, bl, d_v, xd, &gv, &mut g_wv);
        let g_x = xc.requires_grad().then(|| {
            let mut gx = vec![zero; bl * d_in];
            mm_nt_acc(bl, qk, d_in, &gk, wk.data(), &mut gx);
            mm_nt_acc(bl, d_v, d_in, &gv, wv.data(), &mut gx);
            let mut gxq = vec![zero; blq * d_in];
            mm_nt_acc(blq, qk, d_in, &gq, wq.data(), &mut gxq);
            for bi in 0..b {
                for (qi, &i) in qidx.iter().enumerate() {
                    let src = &gxq[(bi * lq + qi) * d_in..(bi * lq + qi + 1) * d_in];
                    let dst = &mut gx[(bi * l + i) * d_in..(bi * l + i + 1) * d_in];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                }
            }
            gx
        });

        let mut g_alpha_raw = vec![zero; nh];
        let mut g_centers = vec![zero; nh * 2];
        let mut gl = vec![zero; l];
        for h in 0..nh {
            let (c0, c1) = (centers[2 * h].f64(), centers[2 * h + 1].f64());
            let mut d_alpha = 0.0f64;
            let (mut d_c0, mut d_c1) = (0.0f64, 0.0f64);
            for (qi, &i) in qidx.iter().enumerate() {
                let row = h * m2 + qi * l..h * m2 + (qi + 1) * l;
                softmax_row_backward(&p[row.clone()], &gp[row], &mut gl);
                for (j, &glj) in gl.iter().enumerate() {
                    let [d0, d1] = deltas[i * l + j];
                    let glj = glj.f64();
                    d_alpha -= glj * (d0 * d0 + d1 * d1 - 2.0 * c0 * d0 - 2.0 * c1 * d1);
                    d_c0 += glj * d0;
                    d_c1 += glj * d1;
                }
            }
            let two_alpha = 2.0 * alpha[h].f64();
            g_alpha_raw[h] = T::c(d_alpha) * sigmoid_t(beta * alpha_raw[h]);
            g_centers[2 * h] = T::c(two_alpha * d_c0);
            g_centers[2 * h + 1] = T::c(two_alpha * d_c1);
        }
        let g_gate: Vec<T> = gg
            .iter()
            .zip(&gates)
            .map(|(&d, &g)| d * g * (T::one() - g))
            .collect();

        let mut grads = vec![
            g_x,
            Some(g_wq),
            Some(g_wk),
            Some(g_wv),
            Some(g_wout),
            Some(g_alpha_raw),
            Some(g_centers),
            Some(g_gate),
        ];
        if has_bias {
            let mut g_bias = vec![zero; d_out];
            for row in go.chunks(d_out) {
                g_bias.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
            }
            grads.push(Some(g_bias));
        }
        grads
    }))
}

/// [`gpsa_forward`] on a B×C×H×W image tensor; returns B×D_out×H×W.
pub fn gpsa_forward_nchw<T: Element>(x: &Tensor<T>, layer: &GpsaLayer<T>) -> Result<Tensor<T>> {
    let (h, w) = match *x.shape() {
        [_, _, h, w] => (h, w),
        _ => return Err(Error::dim("gpsa_forward_nchw", x.shape(), &[0, layer.config.d_in, 0, 0])),
    };
    let tokens = ops::nchw_to_tokens(x)?;
    let y = gpsa_forward(&tokens, layer, h, w)?;
    ops::tokens_to_nchw(&y, h, w)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::{alpha_raw_for, GpsaConfig, GpsaParts};
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_content_projection_is_uniform() {
        let mut r = rng();
        let mut layer = GpsaLayer::<f64>::random(GpsaConfig::new(4, 3, 2), &mut r).unwrap();
        layer.w_qry = Tensor::zeros(&[3, 4]).requires_grad_();
        layer.w_key = Tensor::zeros(&[3, 4]).requires_grad_();
        layer.gate = Tensor::full(&[4], -40.0).requires_grad_();
        let pl = layer.positional_logits(3, 3).unwrap();
        let x = Tensor::randn(&[9, 3], 1.0, &mut r);
        for map in gated_attention(&x, &layer, &pl).unwrap() {
            for &v in map.data() {
                assert!((v - 1.0 / 9.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_gate_is_positional() {
        let mut r = rng();
        let mut layer = GpsaLayer::<f64>::random(GpsaConfig::new(4, 3, 2), &mut r).unwrap();
        layer.gate = Tensor::full(&[4], 20.0).requires_grad_();
        let pl = layer.positional_logits(3, 4).unwrap();
        let p = positional_softmax(&pl);
        let x = Tensor::randn(&[12, 3], 1.0, &mut r);
        for (h, map) in gated_attention(&x, &layer, &pl).unwrap().iter().enumerate() {
            for (a, b) in map.data().iter().zip(&p[h * 144..(h + 1) * 144]) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gate_one_mixes_with_uniform() {
        let mut r = rng();
        let mut layer = GpsaLayer::<f64>::random(GpsaConfig::new(2, 3, 2), &mut r).unwrap();
        layer.w_qry = Tensor::zeros(&[3, 3]).requires_grad_();
        layer.gate = Tensor::full(&[2], 1.0).requires_grad_();
        let pl = layer.positional_logits(2, 3).unwrap();
        let p = positional_softmax(&pl);
        let x = Tensor::randn(&[6, 3], 1.0, &mut r);
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        for (h, map) in gated_attention(&x, &layer, &pl).unwrap().iter().enumerate() {
            for (a, b) in map.data().iter().zip(&p[h * 36..(h + 1) * 36]) {
                let want = (1.0 - s1) / 6.0 + s1 * b;
                assert!((a - want).abs() < 1e-12);
            }
        }
        assert!((1.0 - s1 - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn resolution_mismatch_errors() {
        let mut r = rng();
        let layer = GpsaLayer::<f64>::random(GpsaConfig::new(2, 3, 2), &mut r).unwrap();
        let pl = layer.positional_logits(2, 2).unwrap();
        let x = Tensor::randn(&[5, 3], 1.0, &mut r);
        assert!(matches!(gated_attention(&x, &layer, &pl), Err(Error::Dimension { .. })));
        let xb = Tensor::randn(&[1, 5, 3], 1.0, &mut r);
        assert!(gpsa_forward(&xb, &layer, 2, 2).is_err());
    }

    #[test]
    fn zero_output_maps_give_bias() {
        let mut r = rng();
        let mut cfg = GpsaConfig::new(2, 3, 4);
        cfg.bias = true;
        let base = GpsaLayer::<f64>::random(cfg, &mut r).unwrap();
        let layer = GpsaLayer::from_parts(
            cfg,
            GpsaParts {
                w_qry: base.w_qry.clone(),
                w_key: base.w_key.clone(),
                w_val: base.w_val.clone(),
                w_out: Tensor::zeros(&[2, 3, 4]),
                alpha_raw: base.alpha_raw.clone(),
                centers: base.centers.clone(),
                gate: base.gate.clone(),
                bias: Some(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap()),
            },
        )
        .unwrap();
        let y = gpsa_forward(&Tensor::randn(&[2, 6, 3], 1.0, &mut r), &layer, 2, 3).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn single_head_identity_composition() {
        let mut r = rng();
        let d = 3;
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        let cfg = GpsaConfig::new(1, d, d);
        let layer = GpsaLayer::<f64>::from_parts(
            cfg,
            GpsaParts {
                w_qry: Tensor::zeros(&[d, d]),
                w_key: Tensor::zeros(&[d, d]),
                w_val: Tensor::from_vec(eye.clone(), &[d, d]).unwrap(),
                w_out: Tensor::from_vec(eye, &[1, d, d]).unwrap(),
                alpha_raw: Tensor::full(&[1], alpha_raw_for(20.0, 5.0).unwrap()),
                centers: Tensor::zeros(&[1, 2]),
                gate: Tensor::full(&[1], 20.0),
                bias: None,
            },
        )
        .unwrap();
        let x = Tensor::randn(&[2, 16, d], 1.0, &mut r);
        let y = gpsa_forward(&x, &layer, 4, 4).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }
}
