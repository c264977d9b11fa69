//! Dense row-major kernels with hand-written backward passes.
//!
//! Matrices are flat `&[f64]` slices; `x` is `rows x inner`, weights are
//! `inner x cols`.

pub const LN_EPS: f64 = 1e-5;

/// `y = x w (+ b)`.
pub fn linear(x: &[f64], rows: usize, inner: usize, w: &[f64], b: Option<&[f64]>, cols: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), inner * cols);
    let mut y = vec![0.0; rows * cols];
    for i in 0..rows {
        let yr = &mut y[i * cols..(i + 1) * cols];
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        for (k, &xv) in x[i * inner..(i + 1) * inner].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * cols..(k + 1) * cols];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dw += x^T dy`, `db += colsum(dy)` and
/// returns `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    inner: usize,
    w: &[f64],
    cols: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    for i in 0..rows {
        let dyr = &dy[i * cols..(i + 1) * cols];
        for (k, &xv) in x[i * inner..(i + 1) * inner].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (d, &g) in dw[k * cols..(k + 1) * cols].iter_mut().zip(dyr) {
                *d += xv * g;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..rows {
            for (d, &g) in db.iter_mut().zip(&dy[i * cols..(i + 1) * cols]) {
                *d += g;
            }
        }
    }
    let mut dx = vec![0.0; rows * inner];
    for i in 0..rows {
        let dyr = &dy[i * cols..(i + 1) * cols];
        for k in 0..inner {
            dx[i * inner + k] = dot(dyr, &w[k * cols..(k + 1) * cols]);
        }
    }
    dx
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (xr[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward(dy: &[f64], cache: &LnCache, rows: usize, d: usize, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// In-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += eps;
                m[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let n = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - n).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference_quotient() {
        let x = [0.3, -1.2, 0.8, 2.0, -0.1, 0.5, 0.9, -0.4];
        let g = [1.1, 0.9, -0.5, 1.3];
        let b = [0.1, 0.0, -0.2, 0.3];
        let w = [0.7, -0.2, 0.4, 1.5, -0.9, 0.3, 0.2, 0.6];
        let loss = |x: &[f64]| dot(&layer_norm(x, 2, 4, &g, &b).0, &w);
        let (_, cache) = layer_norm(&x, 2, 4, &g, &b);
        let (mut dg, mut db) = ([0.0; 4], [0.0; 4]);
        let dx = layer_norm_backward(&w, &cache, 2, 4, &g, &mut dg, &mut db);
        for (a, n) in dx.iter().zip(numeric(loss, &x)) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn linear_backward_matches_difference_quotient() {
        let x = [0.3, -1.2, 0.8, 2.0, -0.1, 0.5];
        let w = [0.7, -0.2, 0.4, 1.5, -0.9, 0.3];
        let b = [0.05, -0.1];
        let up = [1.0, -2.0, 0.5, 0.25];
        let loss_x = |x: &[f64]| dot(&linear(x, 2, 3, &w, Some(&b), 2), &up);
        let loss_w = |w: &[f64]| dot(&linear(&x, 2, 3, w, Some(&b), 2), &up);
        let mut dw = [0.0; 6];
        let mut db = [0.0; 2];
        let dx = linear_backward(&x, &up, 2, 3, &w, 2, &mut dw, Some(&mut db));
        for (a, n) in dx.iter().zip(numeric(loss_x, &x)) {
            assert!((a - n).abs() < 1e-8);
        }
        for (a, n) in dw.iter().zip(numeric(loss_w, &w)) {
            assert!((a - n).abs() < 1e-8);
        }
        assert_eq!(db, [1.5, -1.75]);
    }

    #[test]
    fn softmax_normalizes() {
        let mut r = vec![1000.0, 999.0, -5.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = log_softmax(&[1000.0, 999.0, -5.0]);
        assert!((l.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
