//! Row-major sequence kernels with hand-written backward passes.
//!
//! A sequence of `rows` tokens of width `n` is a flat `Vec<f64>` of length
//! `rows * n`. Backward functions accumulate parameter gradients into `grad`
//! (same layout as the parameter vector) and return input gradients.

use super::params::{Attn, Lin, Norm};

pub const NORM_EPS: f64 = 1e-5;

pub fn linear(p: &[f64], l: Lin, x: &[f64], rows: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * l.n_in);
    let w = &p[l.w..l.w + l.n_in * l.n_out];
    let b = &p[l.b..l.b + l.n_out];
    let mut y = vec![0.0; rows * l.n_out];
    for r in 0..rows {
        let xr = &x[r * l.n_in..(r + 1) * l.n_in];
        for (o, yo) in y[r * l.n_out..(r + 1) * l.n_out].iter_mut().enumerate() {
            let wo = &w[o * l.n_in..(o + 1) * l.n_in];
            *yo = b[o] + dot(wo, xr);
        }
    }
    y
}

/// Accumulates `dW`, `db`; returns `dx` when `need_dx`.
pub fn linear_back(p: &[f64], grad: &mut [f64], l: Lin, x: &[f64], dy: &[f64], rows: usize, need_dx: bool) -> Option<Vec<f64>> {
    let (n_in, n_out) = (l.n_in, l.n_out);
    {
        let (gw, gb) = split_two(grad, l.w, n_in * n_out, l.b, n_out);
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let dyr = &dy[r * n_out..(r + 1) * n_out];
            for o in 0..n_out {
                let d = dyr[o];
                gb[o] += d;
                if d != 0.0 {
                    axpy(d, xr, &mut gw[o * n_in..(o + 1) * n_in]);
                }
            }
        }
    }
    need_dx.then(|| {
        let w = &p[l.w..l.w + n_in * n_out];
        let mut dx = vec![0.0; rows * n_in];
        for r in 0..rows {
            let dxr = &mut dx[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let d = dy[r * n_out + o];
                if d != 0.0 {
                    axpy(d, &w[o * n_in..(o + 1) * n_in], dxr);
                }
            }
        }
        dx
    })
}

/// Disjoint mutable views of two parameter blocks.
fn split_two(grad: &mut [f64], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + alen <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + alen], &mut hi[..blen])
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

pub fn layer_norm(p: &[f64], n: Norm, x: &[f64], rows: usize) -> (Vec<f64>, NormCache) {
    let w = n.n;
    let g = &p[n.g..n.g + w];
    let b = &p[n.b..n.b + w];
    let mut y = vec![0.0; rows * w];
    let mut xhat = vec![0.0; rows * w];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * w..(r + 1) * w];
        let mean = xr.iter().sum::<f64>() / w as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let iv = 1.0 / (var + NORM_EPS).sqrt();
        inv[r] = iv;
        for i in 0..w {
            let h = (xr[i] - mean) * iv;
            xhat[r * w + i] = h;
            y[r * w + i] = g[i] * h + b[i];
        }
    }
    (y, NormCache { xhat, inv })
}

pub fn layer_norm_back(p: &[f64], grad: &mut [f64], n: Norm, cache: &NormCache, dy: &[f64], rows: usize) -> Vec<f64> {
    let w = n.n;
    let g = &p[n.g..n.g + w];
    let mut dx = vec![0.0; rows * w];
    let mut dh = vec![0.0; w];
    for r in 0..rows {
        let xh = &cache.xhat[r * w..(r + 1) * w];
        let dyr = &dy[r * w..(r + 1) * w];
        for i in 0..w {
            grad[n.g + i] += dyr[i] * xh[i];
            grad[n.b + i] += dyr[i];
            dh[i] = dyr[i] * g[i];
        }
        let m1 = dh.iter().sum::<f64>() / w as f64;
        let m2 = dot(&dh, xh) / w as f64;
        for i in 0..w {
            dx[r * w + i] = cache.inv[r] * (dh[i] - m1 - xh[i] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    xq: Vec<f64>,
    xkv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x lq x lk`, zero where masked.
    probs: Vec<f64>,
    o: Vec<f64>,
    lq: usize,
    lk: usize,
}

/// Multi-head attention of `xq` over `xkv`; with `causal`, query `i` only sees keys `j <= i`.
#[allow(clippy::too_many_arguments)]
pub fn attention(p: &[f64], a: Attn, heads: usize, xq: &[f64], lq: usize, xkv: &[f64], lk: usize, causal: bool) -> (Vec<f64>, AttnCache) {
    let w = a.q.n_out;
    let dh = w / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(p, a.q, xq, lq);
    let k = linear(p, a.k, xkv, lk);
    let v = linear(p, a.v, xkv, lk);
    let mut probs = vec![0.0; heads * lq * lk];
    let mut o = vec![0.0; lq * w];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let qi = &q[i * w + off..i * w + off + dh];
            let kmax = if causal { (i + 1).min(lk) } else { lk };
            let row = &mut probs[(h * lq + i) * lk..(h * lq + i) * lk + kmax];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * w + off..j * w + off + dh]) * scale;
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            let oi = &mut o[i * w + off..i * w + off + dh];
            for (j, s) in row.iter_mut().enumerate() {
                *s /= z;
                axpy(*s, &v[j * w + off..j * w + off + dh], oi);
            }
        }
    }
    let out = linear(p, a.o, &o, lq);
    let cache = AttnCache {
        xq: xq.to_vec(),
        xkv: xkv.to_vec(),
        q,
        k,
        v,
        probs,
        o,
        lq,
        lk,
    };
    (out, cache)
}

/// Returns `(dxq, dxkv)`.
pub fn attention_back(p: &[f64], grad: &mut [f64], a: Attn, heads: usize, c: &AttnCache, dout: &[f64], causal: bool) -> (Vec<f64>, Vec<f64>) {
    let w = a.q.n_out;
    let dh = w / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (c.lq, c.lk);
    let d_o = linear_back(p, grad, a.o, &c.o, dout, lq, true).unwrap();
    let mut dq = vec![0.0; lq * w];
    let mut dk = vec![0.0; lk * w];
    let mut dv = vec![0.0; lk * w];
    let mut dp = vec![0.0; lk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let kmax = if causal { (i + 1).min(lk) } else { lk };
            let pr = &c.probs[(h * lq + i) * lk..(h * lq + i) * lk + kmax];
            let doi = &d_o[i * w + off..i * w + off + dh];
            for j in 0..kmax {
                dp[j] = dot(doi, &c.v[j * w + off..j * w + off + dh]);
                axpy(pr[j], doi, &mut dv[j * w + off..j * w + off + dh]);
            }
            let s: f64 = (0..kmax).map(|j| pr[j] * dp[j]).sum();
            for j in 0..kmax {
                let ds = pr[j] * (dp[j] - s) * scale;
                if ds != 0.0 {
                    axpy(ds, &c.k[j * w + off..j * w + off + dh], &mut dq[i * w + off..i * w + off + dh]);
                    axpy(ds, &c.q[i * w + off..i * w + off + dh], &mut dk[j * w + off..j * w + off + dh]);
                }
            }
        }
    }
    let dxq = linear_back(p, grad, a.q, &c.xq, &dq, lq, true).unwrap();
    let mut dxkv = linear_back(p, grad, a.k, &c.xkv, &dk, lk, true).unwrap();
    let dxv = linear_back(p, grad, a.v, &c.xkv, &dv, lk, true).unwrap();
    add_assign(&mut dxkv, &dxv);
    (dxq, dxkv)
}

pub fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Sinusoidal position code for position `pos` at channel `i` of `width`.
pub fn position_code(pos: usize, i: usize, width: usize) -> f64 {
    let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
    let angle = pos as f64 * freq;
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

pub fn add_positions(x: &mut [f64], rows: usize, width: usize) {
    for r in 0..rows {
        for i in 0..width {
            x[r * width + i] += position_code(r, i, width);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // tanh-approximate GELU(1) computed by hand: 0.5 * (1 + tanh(0.7978845608 * 1.044715))
        let expected = 0.5 * (1.0 + (0.797_884_560_802_865_4f64 * 1.044_715).tanh());
        assert!((gelu(1.0) - expected).abs() < 1e-15);
        assert!((gelu(1.0) - 0.841_191_990_607_958_8).abs() < 1e-9);
        for x in [-3.0, -0.7, 0.2, 1.4, 2.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn position_codes_start_at_sin_cos_of_zero() {
        assert_eq!(position_code(0, 0, 8), 0.0);
        assert_eq!(position_code(0, 1, 8), 1.0);
        assert!((position_code(3, 0, 8) - 3f64.sin()).abs() < 1e-15);
        assert!((position_code(3, 2, 8) - (3.0 / 10.0f64).sin()).abs() < 1e-15);
    }
}
