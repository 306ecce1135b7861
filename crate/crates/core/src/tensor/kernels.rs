//! Dense kernels shared by the forward ops and the backward pass.
//!
//! Everything is plain `f64` slices with explicit loop order so results are
//! bit-reproducible run to run.

use super::BoolMat;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = p * n;
            let orow = i * n;
            for j in 0..n {
                out[orow + j] += av * b[row + j];
            }
        }
    }
    out
}

pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            out[i * c + j] /= denom;
        }
    }
    out
}

/// dL/dx for y = softmax(x) given dL/dy, row-wise.
pub fn softmax_rows_grad(y: &[f64], g: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut dx = vec![0.0; r * c];
    for i in 0..r {
        let mut dot = 0.0;
        for j in 0..c {
            dot += g[i * c + j] * y[i * c + j];
        }
        for j in 0..c {
            dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
        }
    }
    dx
}

pub fn log_softmax_rows(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - m).exp();
        }
        let lse = m + denom.ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    out
}

pub fn log_softmax_rows_grad(y: &[f64], g: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut dx = vec![0.0; r * c];
    for i in 0..r {
        let mut sum = 0.0;
        for j in 0..c {
            sum += g[i * c + j];
        }
        for j in 0..c {
            dx[i * c + j] = g[i * c + j] - y[i * c + j].exp() * sum;
        }
    }
    dx
}

/// Softmax over the visible entries of each row. Rows with nothing visible
/// come out all-zero.
pub fn masked_softmax_rows(x: &[f64], vis: &BoolMat, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let mut m = f64::NEG_INFINITY;
        for j in 0..c {
            if vis.get(i, j) {
                m = m.max(x[i * c + j]);
            }
        }
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut denom = 0.0;
        for j in 0..c {
            if vis.get(i, j) {
                let e = (x[i * c + j] - m).exp();
                out[i * c + j] = e;
                denom += e;
            }
        }
        for j in 0..c {
            out[i * c + j] /= denom;
        }
    }
    out
}

pub fn masked_softmax_rows_grad(
    y: &[f64],
    vis: &BoolMat,
    g: &[f64],
    r: usize,
    c: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; r * c];
    for i in 0..r {
        let mut dot = 0.0;
        for j in 0..c {
            if vis.get(i, j) {
                dot += g[i * c + j] * y[i * c + j];
            }
        }
        for j in 0..c {
            if vis.get(i, j) {
                dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
            }
        }
    }
    dx
}

pub fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    r: usize,
    c: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_rows_grad(
    x: &[f64],
    gamma: &[f64],
    eps: f64,
    g: &[f64],
    r: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; r * c];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let cf = c as f64;
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let grow = &g[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / cf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv = 1.0 / (var + eps).sqrt();
        // xhat and the two reduction terms of the standard layer-norm gradient.
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..c {
            let xhat = (row[j] - mean) * inv;
            let dxhat = grow[j] * gamma[j];
            dgamma[j] += grow[j] * xhat;
            dbeta[j] += grow[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for j in 0..c {
            let xhat = (row[j] - mean) * inv;
            let dxhat = grow[j] * gamma[j];
            dx[i * c + j] = inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
