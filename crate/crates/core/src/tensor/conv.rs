//! 3-D convolution and pooling kernels.
//!
//! Layout: inputs are `[C, T, H, W]`, kernels `[C_out, C_in, kt, kh, kw]`,
//! all row-major. Convolution is cross-correlation with zero padding.

pub fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &[f64],
    (ci, t, h, w): (usize, usize, usize, usize),
    k: &[f64],
    co: usize,
    (kt, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, (usize, usize, usize)) {
    let ot = out_len(t, kt, stride[0], pad[0]).unwrap();
    let oh = out_len(h, kh, stride[1], pad[1]).unwrap();
    let ow = out_len(w, kw, stride[2], pad[2]).unwrap();
    let mut out = vec![0.0; co * ot * oh * ow];
    let xat = |c: usize, it: isize, ih: isize, iw: isize| -> f64 {
        if it < 0 || ih < 0 || iw < 0 || it as usize >= t || ih as usize >= h || iw as usize >= w {
            0.0
        } else {
            x[((c * t + it as usize) * h + ih as usize) * w + iw as usize]
        }
    };
    for oc in 0..co {
        let b = bias.map_or(0.0, |bv| bv[oc]);
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut acc = b;
                    for ic in 0..ci {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let it = (zt * stride[0] + dt) as isize - pad[0] as isize;
                                    let ih = (zh * stride[1] + dh) as isize - pad[1] as isize;
                                    let iw = (zw * stride[2] + dw) as isize - pad[2] as isize;
                                    let kv =
                                        k[(((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw];
                                    acc += kv * xat(ic, it, ih, iw);
                                }
                            }
                        }
                    }
                    out[((oc * ot + zt) * oh + zh) * ow + zw] = acc;
                }
            }
        }
    }
    (out, (ot, oh, ow))
}

/// Returns (dx, dk, dbias).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_grad(
    x: &[f64],
    (ci, t, h, w): (usize, usize, usize, usize),
    k: &[f64],
    co: usize,
    (kt, kh, kw): (usize, usize, usize),
    has_bias: bool,
    stride: [usize; 3],
    pad: [usize; 3],
    g: &[f64],
    (ot, oh, ow): (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let mut dx = vec![0.0; ci * t * h * w];
    let mut dk = vec![0.0; co * ci * kt * kh * kw];
    let mut db = if has_bias { Some(vec![0.0; co]) } else { None };
    for oc in 0..co {
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let gv = g[((oc * ot + zt) * oh + zh) * ow + zw];
                    if let Some(db) = db.as_mut() {
                        db[oc] += gv;
                    }
                    if gv == 0.0 {
                        continue;
                    }
                    for ic in 0..ci {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let it = (zt * stride[0] + dt) as isize - pad[0] as isize;
                                    let ih = (zh * stride[1] + dh) as isize - pad[1] as isize;
                                    let iw = (zw * stride[2] + dw) as isize - pad[2] as isize;
                                    if it < 0
                                        || ih < 0
                                        || iw < 0
                                        || it as usize >= t
                                        || ih as usize >= h
                                        || iw as usize >= w
                                    {
                                        continue;
                                    }
                                    let xi = ((ic * t + it as usize) * h + ih as usize) * w
                                        + iw as usize;
                                    let ki = (((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw;
                                    dx[xi] += gv * k[ki];
                                    dk[ki] += gv * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

pub fn max_pool3d(
    x: &[f64],
    (c, t, h, w): (usize, usize, usize, usize),
    window: [usize; 3],
    stride: [usize; 3],
) -> (Vec<f64>, (usize, usize, usize)) {
    let ot = out_len(t, window[0], stride[0], 0).unwrap();
    let oh = out_len(h, window[1], stride[1], 0).unwrap();
    let ow = out_len(w, window[2], stride[2], 0).unwrap();
    let mut out = vec![0.0; c * ot * oh * ow];
    for ch in 0..c {
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dt in 0..window[0] {
                        for dh in 0..window[1] {
                            for dw in 0..window[2] {
                                let v = x[((ch * t + zt * stride[0] + dt) * h
                                    + zh * stride[1]
                                    + dh)
                                    * w
                                    + zw * stride[2]
                                    + dw];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                    }
                    out[((ch * ot + zt) * oh + zh) * ow + zw] = best;
                }
            }
        }
    }
    (out, (ot, oh, ow))
}

pub fn max_pool3d_grad(
    x: &[f64],
    (c, t, h, w): (usize, usize, usize, usize),
    window: [usize; 3],
    stride: [usize; 3],
    g: &[f64],
    (ot, oh, ow): (usize, usize, usize),
) -> Vec<f64> {
    let mut dx = vec![0.0; c * t * h * w];
    for ch in 0..c {
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    // first-maximum tie-break, matching forward scan order
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0usize;
                    for dt in 0..window[0] {
                        for dh in 0..window[1] {
                            for dw in 0..window[2] {
                                let xi = ((ch * t + zt * stride[0] + dt) * h
                                    + zh * stride[1]
                                    + dh)
                                    * w
                                    + zw * stride[2]
                                    + dw;
                                if x[xi] > best {
                                    best = x[xi];
                                    arg = xi;
                                }
                            }
                        }
                    }
                    dx[arg] += g[((ch * ot + zt) * oh + zh) * ow + zw];
                }
            }
        }
    }
    dx
}
