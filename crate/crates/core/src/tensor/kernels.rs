//! Raw numeric kernels behind the tape primitives. All loops are sequential
//! so that forward and backward passes are bit-reproducible.

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
    c
}

/// C[m,k] += A[m,n] * B[k,n]^T  (accumulates into `c`)
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            c_row[p] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]  (accumulates into `c`)
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
}

/// Valid (no padding) convolution output extent: floor((in - k)/stride) + 1.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || kernel > input || stride == 0 {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// Forward convolution.
/// input:  [batch, c_in, h, w], weight: [c_out, c_in, kh, kw]
/// output: [batch, c_out, ho, wo]
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    weight: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f64> {
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    let mut out = vec![0.0; batch * c_out * ho * wo];
    for b in 0..batch {
        for co in 0..c_out {
            for ci in 0..c_in {
                let in_plane = &input[(b * c_in + ci) * h * w..];
                let w_plane = &weight[(co * c_in + ci) * kh * kw..];
                let out_plane = &mut out[(b * c_out + co) * ho * wo..(b * c_out + co + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let row = &in_plane[(oy * stride + ky) * w + ox * stride..];
                            let wk = &w_plane[ky * kw..(ky + 1) * kw];
                            for kx in 0..kw {
                                acc += row[kx] * wk[kx];
                            }
                        }
                        out_plane[oy * wo + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `conv2d` w.r.t. its input (accumulates into `d_input`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_input(
    d_out: &[f64],
    weight: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    d_input: &mut [f64],
) {
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    for b in 0..batch {
        for co in 0..c_out {
            let d_plane = &d_out[(b * c_out + co) * ho * wo..];
            for ci in 0..c_in {
                let w_plane = &weight[(co * c_in + ci) * kh * kw..];
                let di_plane = &mut d_input[(b * c_in + ci) * h * w..(b * c_in + ci + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = d_plane[oy * wo + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ky in 0..kh {
                            let row = &mut di_plane[(oy * stride + ky) * w + ox * stride..];
                            let wk = &w_plane[ky * kw..(ky + 1) * kw];
                            for kx in 0..kw {
                                row[kx] += g * wk[kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d` w.r.t. its weight (accumulates into `d_weight`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_weight(
    d_out: &[f64],
    input: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    d_weight: &mut [f64],
) {
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    for b in 0..batch {
        for co in 0..c_out {
            let d_plane = &d_out[(b * c_out + co) * ho * wo..];
            for ci in 0..c_in {
                let in_plane = &input[(b * c_in + ci) * h * w..];
                let dw_plane =
                    &mut d_weight[(co * c_in + ci) * kh * kw..(co * c_in + ci + 1) * kh * kw];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = d_plane[oy * wo + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ky in 0..kh {
                            let row = &in_plane[(oy * stride + ky) * w + ox * stride..];
                            let dwk = &mut dw_plane[ky * kw..(ky + 1) * kw];
                            for kx in 0..kw {
                                dwk[kx] += g * row[kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward transposed convolution (exact adjoint of `conv2d`'s input map).
/// input:  [batch, c_in, h, w], weight: [c_in, c_out, kh, kw]
/// output: [batch, c_out, (h-1)*stride + kh, (w-1)*stride + kw]
#[allow(clippy::too_many_arguments)]
pub fn deconv2d(
    input: &[f64],
    weight: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f64> {
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    let mut out = vec![0.0; batch * c_out * ho * wo];
    for b in 0..batch {
        for ci in 0..c_in {
            let in_plane = &input[(b * c_in + ci) * h * w..];
            for co in 0..c_out {
                let w_plane = &weight[(ci * c_out + co) * kh * kw..];
                let out_plane = &mut out[(b * c_out + co) * ho * wo..(b * c_out + co + 1) * ho * wo];
                for iy in 0..h {
                    for ix in 0..w {
                        let v = in_plane[iy * w + ix];
                        if v == 0.0 {
                            continue;
                        }
                        for ky in 0..kh {
                            let row = &mut out_plane[(iy * stride + ky) * wo + ix * stride..];
                            let wk = &w_plane[ky * kw..(ky + 1) * kw];
                            for kx in 0..kw {
                                row[kx] += v * wk[kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `deconv2d` w.r.t. its input (accumulates into `d_input`).
#[allow(clippy::too_many_arguments)]
pub fn deconv2d_grad_input(
    d_out: &[f64],
    weight: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    d_input: &mut [f64],
) {
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    for b in 0..batch {
        for ci in 0..c_in {
            let di_plane = &mut d_input[(b * c_in + ci) * h * w..(b * c_in + ci + 1) * h * w];
            for co in 0..c_out {
                let w_plane = &weight[(ci * c_out + co) * kh * kw..];
                let d_plane = &d_out[(b * c_out + co) * ho * wo..];
                for iy in 0..h {
                    for ix in 0..w {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let row = &d_plane[(iy * stride + ky) * wo + ix * stride..];
                            let wk = &w_plane[ky * kw..(ky + 1) * kw];
                            for kx in 0..kw {
                                acc += row[kx] * wk[kx];
                            }
                        }
                        di_plane[iy * w + ix] += acc;
                    }
                }
            }
        }
    }
}

/// Gradient of `deconv2d` w.r.t. its weight (accumulates into `d_weight`).
#[allow(clippy::too_many_arguments)]
pub fn deconv2d_grad_weight(
    d_out: &[f64],
    input: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    d_weight: &mut [f64],
) {
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    for b in 0..batch {
        for ci in 0..c_in {
            let in_plane = &input[(b * c_in + ci) * h * w..];
            for co in 0..c_out {
                let dw_plane =
                    &mut d_weight[(ci * c_out + co) * kh * kw..(ci * c_out + co + 1) * kh * kw];
                let d_plane = &d_out[(b * c_out + co) * ho * wo..];
                for iy in 0..h {
                    for ix in 0..w {
                        let v = in_plane[iy * w + ix];
                        if v == 0.0 {
                            continue;
                        }
                        for ky in 0..kh {
                            let row = &d_plane[(iy * stride + ky) * wo + ix * stride..];
                            let dwk = &mut dw_plane[ky * kw..(ky + 1) * kw];
                            for kx in 0..kw {
                                dwk[kx] += v * row[kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
