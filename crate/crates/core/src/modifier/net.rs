//! Encoder-decoder stacks over projected token sequences.

use super::nn::{
    add_assign, attention, attention_back, gelu, gelu_grad, layer_norm, layer_norm_back, linear, linear_back, AttnCache, NormCache,
};
use super::params::{Arch, DecLayer, EncLayer, Lin};

struct Ffn {
    h: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
}

fn ffn(p: &[f64], ff1: Lin, ff2: Lin, h: Vec<f64>, rows: usize) -> (Vec<f64>, Ffn) {
    let u = linear(p, ff1, &h, rows);
    let a: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
    let y = linear(p, ff2, &a, rows);
    (y, Ffn { h, u, a })
}

fn ffn_back(p: &[f64], grad: &mut [f64], ff1: Lin, ff2: Lin, c: &Ffn, dy: &[f64], rows: usize) -> Vec<f64> {
    let mut du = linear_back(p, grad, ff2, &c.a, dy, rows, true).unwrap();
    for (d, &u) in du.iter_mut().zip(&c.u) {
        *d *= gelu_grad(u);
    }
    linear_back(p, grad, ff1, &c.h, &du, rows, true).unwrap()
}

struct EncCacheLayer {
    n1: NormCache,
    attn: AttnCache,
    n2: NormCache,
    ffn: Ffn,
}

pub(crate) struct EncCache {
    layers: Vec<EncCacheLayer>,
    final_norm: NormCache,
    rows: usize,
}

fn enc_layer(p: &[f64], l: &EncLayer, heads: usize, x: &mut [f64], rows: usize) -> EncCacheLayer {
    let (h1, n1) = layer_norm(p, l.ln1, x, rows);
    let (a, attn) = attention(p, l.attn, heads, &h1, rows, &h1, rows, false);
    add_assign(x, &a);
    let (h2, n2) = layer_norm(p, l.ln2, x, rows);
    let (f, ffn) = ffn(p, l.ff1, l.ff2, h2, rows);
    add_assign(x, &f);
    EncCacheLayer { n1, attn, n2, ffn }
}

/// Pre-norm encoder followed by a final layer norm.
pub(crate) fn encode(p: &[f64], arch: &Arch, mut x: Vec<f64>, rows: usize) -> (Vec<f64>, EncCache) {
    let layers = arch.enc.iter().map(|l| enc_layer(p, l, arch.heads, &mut x, rows)).collect();
    let (mem, final_norm) = layer_norm(p, arch.enc_norm, &x, rows);
    (mem, EncCache { layers, final_norm, rows })
}

pub(crate) fn encode_back(p: &[f64], grad: &mut [f64], arch: &Arch, c: &EncCache, dmem: &[f64]) -> Vec<f64> {
    let rows = c.rows;
    let mut dx = layer_norm_back(p, grad, arch.enc_norm, &c.final_norm, dmem, rows);
    for (l, lc) in arch.enc.iter().zip(&c.layers).rev() {
        let dh2 = ffn_back(p, grad, l.ff1, l.ff2, &lc.ffn, &dx, rows);
        add_assign(&mut dx, &layer_norm_back(p, grad, l.ln2, &lc.n2, &dh2, rows));
        let (dq, dkv) = attention_back(p, grad, l.attn, arch.heads, &lc.attn, &dx, false);
        let mut dh1 = dq;
        add_assign(&mut dh1, &dkv);
        add_assign(&mut dx, &layer_norm_back(p, grad, l.ln1, &lc.n1, &dh1, rows));
    }
    dx
}

struct DecCacheLayer {
    n1: NormCache,
    self_attn: AttnCache,
    n2: NormCache,
    cross: AttnCache,
    n3: NormCache,
    ffn: Ffn,
}

pub(crate) struct DecCache {
    layers: Vec<DecCacheLayer>,
    rows: usize,
    mem_rows: usize,
}

fn dec_layer(p: &[f64], l: &DecLayer, heads: usize, x: &mut [f64], rows: usize, mem: &[f64], mem_rows: usize) -> DecCacheLayer {
    let (h1, n1) = layer_norm(p, l.ln1, x, rows);
    let (a, self_attn) = attention(p, l.self_attn, heads, &h1, rows, &h1, rows, true);
    add_assign(x, &a);
    let (h2, n2) = layer_norm(p, l.ln2, x, rows);
    let (c, cross) = attention(p, l.cross, heads, &h2, rows, mem, mem_rows, false);
    add_assign(x, &c);
    let (h3, n3) = layer_norm(p, l.ln3, x, rows);
    let (f, ffn) = ffn(p, l.ff1, l.ff2, h3, rows);
    add_assign(x, &f);
    DecCacheLayer {
        n1,
        self_attn,
        n2,
        cross,
        n3,
        ffn,
    }
}

/// Causal pre-norm decoder with cross-attention; outputs the raw residual stream.
pub(crate) fn decode(p: &[f64], arch: &Arch, mut x: Vec<f64>, rows: usize, mem: &[f64], mem_rows: usize) -> (Vec<f64>, DecCache) {
    let layers = arch
        .dec
        .iter()
        .map(|l| dec_layer(p, l, arch.heads, &mut x, rows, mem, mem_rows))
        .collect();
    (x, DecCache { layers, rows, mem_rows })
}

/// Returns `(dx, dmem)`.
pub(crate) fn decode_back(p: &[f64], grad: &mut [f64], arch: &Arch, c: &DecCache, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = c.rows;
    let mut dx = dy.to_vec();
    let mut dmem = vec![0.0; c.mem_rows * arch.width];
    for (l, lc) in arch.dec.iter().zip(&c.layers).rev() {
        let dh3 = ffn_back(p, grad, l.ff1, l.ff2, &lc.ffn, &dx, rows);
        add_assign(&mut dx, &layer_norm_back(p, grad, l.ln3, &lc.n3, &dh3, rows));
        let (dh2, dm) = attention_back(p, grad, l.cross, arch.heads, &lc.cross, &dx, false);
        add_assign(&mut dmem, &dm);
        add_assign(&mut dx, &layer_norm_back(p, grad, l.ln2, &lc.n2, &dh2, rows));
        let (dq, dkv) = attention_back(p, grad, l.self_attn, arch.heads, &lc.self_attn, &dx, true);
        let mut dh1 = dq;
        add_assign(&mut dh1, &dkv);
        add_assign(&mut dx, &layer_norm_back(p, grad, l.ln1, &lc.n1, &dh1, rows));
    }
    (dx, dmem)
}
