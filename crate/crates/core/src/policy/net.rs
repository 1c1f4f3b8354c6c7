//! Forward and reverse passes of the encoder-decoder over a flat parameter
//! slice. Everything operates on one sentence pair at a time with row-major
//! `rows x cols` buffers.

use alloc::vec;
use alloc::vec::Vec;

use super::layout::{Attention, DecoderLayer, EncoderLayer, FeedForward, Layout, Norm};
use super::Hyperparams;
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-5;

/// `y = x W + b` for `x: rows x din`, `W: din x dout`.
fn linear<T: Scalar>(x: &[T], rows: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * dout];
    for r in 0..rows {
        let yr = &mut y[r * dout..(r + 1) * dout];
        yr.copy_from_slice(b);
        for i in 0..din {
            let xv = x[r * din + i];
            if xv == T::zero() {
                continue;
            }
            let wr = &w[i * dout..(i + 1) * dout];
            for (yo, &wo) in yr.iter_mut().zip(wr) {
                *yo += xv * wo;
            }
        }
    }
    y
}

/// Accumulates parameter gradients of [`linear`] and returns `dL/dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    din: usize,
    w: &[T],
    dy: &[T],
    dout: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * din];
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        for (g, &v) in db.iter_mut().zip(dyr) {
            *g += v;
        }
        for i in 0..din {
            let wr = &w[i * dout..(i + 1) * dout];
            let mut acc = T::zero();
            for (&a, &b) in wr.iter().zip(dyr) {
                acc += a * b;
            }
            dx[r * din + i] = acc;
            let xv = x[r * din + i];
            if xv != T::zero() {
                let dwr = &mut dw[i * dout..(i + 1) * dout];
                for (g, &v) in dwr.iter_mut().zip(dyr) {
                    *g += xv * v;
                }
            }
        }
    }
    dx
}

struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn norm_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    d: usize,
    gain: &[T],
    bias: &[T],
) -> (Vec<T>, NormCache<T>) {
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut inv_std = vec![T::zero(); rows];
    let dn = T::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
        inv_std[r] = is;
        for k in 0..d {
            let h = (xr[k] - mean) * is;
            xhat[r * d + k] = h;
            y[r * d + k] = h * gain[k] + bias[k];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn norm_backward<T: Scalar>(
    dy: &[T],
    d: usize,
    cache: &NormCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let rows = cache.inv_std.len();
    let mut dx = vec![T::zero(); rows * d];
    let dn = T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for k in 0..d {
            dgain[k] += dyr[k] * xh[k];
            dbias[k] += dyr[k];
            dxhat[k] = dyr[k] * gain[k];
            mean_dxhat += dxhat[k];
            mean_dxhat_xhat += dxhat[k] * xh[k];
        }
        mean_dxhat = mean_dxhat / dn;
        mean_dxhat_xhat = mean_dxhat_xhat / dn;
        let is = cache.inv_std[r];
        for k in 0..d {
            dx[r * d + k] = is * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
    dx
}

struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads x nq x nk`
    probs: Vec<T>,
    /// concatenated head outputs, `nq x d`
    ctx: Vec<T>,
    nq: usize,
    nk: usize,
}

struct FfCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

struct EncoderLayerCache<T> {
    norm1_out: Vec<T>,
    norm1: NormCache<T>,
    attn: AttnCache<T>,
    norm2_out: Vec<T>,
    norm2: NormCache<T>,
    ff: FfCache<T>,
}

struct DecoderLayerCache<T> {
    norm1_out: Vec<T>,
    norm1: NormCache<T>,
    self_attn: AttnCache<T>,
    norm2_out: Vec<T>,
    norm2: NormCache<T>,
    cross_attn: AttnCache<T>,
    norm3_out: Vec<T>,
    norm3: NormCache<T>,
    ff: FfCache<T>,
}

pub(crate) struct EncoderTape<T> {
    src: Vec<u32>,
    layers: Vec<EncoderLayerCache<T>>,
    norm: NormCache<T>,
    /// Final normalized encoder states, `n x d`.
    pub memory: Vec<T>,
}

pub(crate) struct DecoderTape<T> {
    input: Vec<u32>,
    layers: Vec<DecoderLayerCache<T>>,
    norm: NormCache<T>,
    hidden: Vec<T>,
}

pub(crate) fn positional_encoding<T: Scalar>(pos: usize, d: usize, out: &mut [T]) {
    for (i, o) in out.iter_mut().enumerate().take(d) {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / num_traits::Float::powf(10_000f64, 2.0 * pair / d as f64);
        *o = T::of(if i % 2 == 0 {
            num_traits::Float::sin(angle)
        } else {
            num_traits::Float::cos(angle)
        });
    }
}

pub(crate) struct Net<'a, T> {
    pub hp: &'a Hyperparams,
    pub layout: &'a Layout,
    pub params: &'a [T],
}

impl<'a, T: Scalar> Net<'a, T> {
    fn p(&self, at: usize, len: usize) -> &'a [T] {
        &self.params[at..at + len]
    }

    fn embed(&self, table: usize, ids: &[u32]) -> Vec<T> {
        let d = self.hp.d_model;
        let mut x = vec![T::zero(); ids.len() * d];
        let mut pe = vec![T::zero(); d];
        for (pos, &id) in ids.iter().enumerate() {
            positional_encoding(pos, d, &mut pe);
            let row = self.p(table + id as usize * d, d);
            for k in 0..d {
                x[pos * d + k] = row[k] + pe[k];
            }
        }
        x
    }

    fn norm(&self, n: Norm, x: &[T], rows: usize) -> (Vec<T>, NormCache<T>) {
        let d = self.hp.d_model;
        norm_forward(x, rows, d, self.p(n.gain, d), self.p(n.bias, d))
    }

    fn attention(
        &self,
        a: &Attention,
        xq: &[T],
        nq: usize,
        xkv: &[T],
        nk: usize,
        causal: bool,
    ) -> (Vec<T>, AttnCache<T>) {
        let d = self.hp.d_model;
        let heads = self.hp.heads;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let q = linear(xq, nq, d, self.p(a.wq, d * d), self.p(a.bq, d), d);
        let k = linear(xkv, nk, d, self.p(a.wk, d * d), self.p(a.bk, d), d);
        let v = linear(xkv, nk, d, self.p(a.wv, d * d), self.p(a.bv, d), d);
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut ctx = vec![T::zero(); nq * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let row = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let visible = if causal { (i + 1).min(nk) } else { nk };
                let mut max = T::neg_infinity();
                for j in 0..visible {
                    let mut s = T::zero();
                    for t in 0..dh {
                        s += q[i * d + off + t] * k[j * d + off + t];
                    }
                    row[j] = s * scale;
                    if row[j] > max {
                        max = row[j];
                    }
                }
                let mut z = T::zero();
                for r in row.iter_mut().take(visible) {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut().take(visible) {
                    *r = *r / z;
                }
                for (j, &pj) in row.iter().enumerate().take(visible) {
                    for t in 0..dh {
                        ctx[i * d + off + t] += pj * v[j * d + off + t];
                    }
                }
            }
        }
        let out = linear(&ctx, nq, d, self.p(a.wo, d * d), self.p(a.bo, d), d);
        (
            out,
            AttnCache {
                q,
                k,
                v,
                probs,
                ctx,
                nq,
                nk,
            },
        )
    }

    fn feed_forward(&self, f: &FeedForward, x: &[T], rows: usize) -> (Vec<T>, FfCache<T>) {
        let (d, ff) = (self.hp.d_model, self.hp.d_ff);
        let pre = linear(x, rows, d, self.p(f.w1, d * ff), self.p(f.b1, ff), ff);
        let act: Vec<T> = pre
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = linear(&act, rows, ff, self.p(f.w2, ff * d), self.p(f.b2, d), d);
        (out, FfCache { pre, act })
    }

    pub fn encode(&self, src: &[u32]) -> EncoderTape<T> {
        let n = src.len();
        let mut h = self.embed(self.layout.src_embed, src);
        let mut layers = Vec::with_capacity(self.layout.encoder.len());
        for l in &self.layout.encoder {
            let (norm1_out, norm1) = self.norm(l.norm1, &h, n);
            let (a, attn) = self.attention(&l.attn, &norm1_out, n, &norm1_out, n, false);
            add_in_place(&mut h, &a);
            let (norm2_out, norm2) = self.norm(l.norm2, &h, n);
            let (f, ff) = self.feed_forward(&l.ff, &norm2_out, n);
            add_in_place(&mut h, &f);
            layers.push(EncoderLayerCache {
                norm1_out,
                norm1,
                attn,
                norm2_out,
                norm2,
                ff,
            });
        }
        let (memory, norm) = self.norm(self.layout.encoder_norm, &h, n);
        EncoderTape {
            src: src.to_vec(),
            layers,
            norm,
            memory,
        }
    }

    /// Returns logits, `input.len() x tgt_vocab`.
    pub fn decode(&self, enc: &EncoderTape<T>, input: &[u32]) -> (Vec<T>, DecoderTape<T>) {
        let (d, vt) = (self.hp.d_model, self.hp.tgt_vocab);
        let m = input.len();
        let n = enc.src.len();
        let mut h = self.embed(self.layout.tgt_embed, input);
        let mut layers = Vec::with_capacity(self.layout.decoder.len());
        for l in &self.layout.decoder {
            let (norm1_out, norm1) = self.norm(l.norm1, &h, m);
            let (a, self_attn) = self.attention(&l.self_attn, &norm1_out, m, &norm1_out, m, true);
            add_in_place(&mut h, &a);
            let (norm2_out, norm2) = self.norm(l.norm2, &h, m);
            let (c, cross_attn) =
                self.attention(&l.cross_attn, &norm2_out, m, &enc.memory, n, false);
            add_in_place(&mut h, &c);
            let (norm3_out, norm3) = self.norm(l.norm3, &h, m);
            let (f, ff) = self.feed_forward(&l.ff, &norm3_out, m);
            add_in_place(&mut h, &f);
            layers.push(DecoderLayerCache {
                norm1_out,
                norm1,
                self_attn,
                norm2_out,
                norm2,
                cross_attn,
                norm3_out,
                norm3,
                ff,
            });
        }
        let (hidden, norm) = self.norm(self.layout.decoder_norm, &h, m);
        let logits = linear(
            &hidden,
            m,
            d,
            self.p(self.layout.out_w, d * vt),
            self.p(self.layout.out_b, vt),
            vt,
        );
        (
            logits,
            DecoderTape {
                input: input.to_vec(),
                layers,
                norm,
                hidden,
            },
        )
    }
}

fn add_in_place<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Reverse pass. Gradients are accumulated into `grad`, which has the same
/// layout as the parameter vector.
pub(crate) struct Backprop<'a, 'g, T> {
    pub net: &'a Net<'a, T>,
    pub grad: &'g mut [T],
}

impl<T: Scalar> Backprop<'_, '_, T> {
    fn split(&mut self, at: usize, len: usize) -> &mut [T] {
        &mut self.grad[at..at + len]
    }

    /// Mutable views of two disjoint gradient blocks; `first` must precede `second`.
    fn two_blocks(
        &mut self,
        first: usize,
        first_len: usize,
        second: usize,
        second_len: usize,
    ) -> (&mut [T], &mut [T]) {
        debug_assert!(first + first_len <= second);
        let (lo, hi) = self.grad.split_at_mut(second);
        (&mut lo[first..first + first_len], &mut hi[..second_len])
    }

    #[allow(clippy::too_many_arguments)]
    fn linear(
        &mut self,
        x: &[T],
        rows: usize,
        din: usize,
        w: usize,
        b: usize,
        dy: &[T],
        dout: usize,
    ) -> Vec<T> {
        let wv = self.net.p(w, din * dout);
        let (dw, db) = self.two_blocks(w, din * dout, b, dout);
        linear_backward(x, rows, din, wv, dy, dout, dw, db)
    }

    fn norm(&mut self, n: Norm, dy: &[T], cache: &NormCache<T>) -> Vec<T> {
        let d = self.net.hp.d_model;
        let gain = self.net.p(n.gain, d);
        let (dg, db) = self.two_blocks(n.gain, d, n.bias, d);
        norm_backward(dy, d, cache, gain, dg, db)
    }

    fn feed_forward(&mut self, f: &FeedForward, x: &[T], cache: &FfCache<T>, dy: &[T]) -> Vec<T> {
        let (d, ff) = (self.net.hp.d_model, self.net.hp.d_ff);
        let rows = x.len() / d;
        let mut dact = self.linear(&cache.act, rows, ff, f.w2, f.b2, dy, d);
        for (g, &p) in dact.iter_mut().zip(&cache.pre) {
            if p <= T::zero() {
                *g = T::zero();
            }
        }
        self.linear(x, rows, d, f.w1, f.b1, &dact, ff)
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    fn attention(
        &mut self,
        a: &Attention,
        xq: &[T],
        xkv: &[T],
        cache: &AttnCache<T>,
        dout: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let d = self.net.hp.d_model;
        let heads = self.net.hp.heads;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (nq, nk) = (cache.nq, cache.nk);
        let dctx = self.linear(&cache.ctx, nq, d, a.wo, a.bo, dout, d);
        let mut dq = vec![T::zero(); nq * d];
        let mut dk = vec![T::zero(); nk * d];
        let mut dv = vec![T::zero(); nk * d];
        let mut dp = vec![T::zero(); nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let p = &cache.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut dot = T::zero();
                for j in 0..nk {
                    let mut s = T::zero();
                    for t in 0..dh {
                        s += dctx[i * d + off + t] * cache.v[j * d + off + t];
                        dv[j * d + off + t] += p[j] * dctx[i * d + off + t];
                    }
                    dp[j] = s;
                    dot += s * p[j];
                }
                for j in 0..nk {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * d + off + t] += ds * cache.k[j * d + off + t];
                        dk[j * d + off + t] += ds * cache.q[i * d + off + t];
                    }
                }
            }
        }
        let dxq = self.linear(xq, nq, d, a.wq, a.bq, &dq, d);
        let mut dxkv = self.linear(xkv, nk, d, a.wk, a.bk, &dk, d);
        let dxv = self.linear(xkv, nk, d, a.wv, a.bv, &dv, d);
        add_in_place(&mut dxkv, &dxv);
        (dxq, dxkv)
    }

    fn embed(&mut self, table: usize, ids: &[u32], dx: &[T]) {
        let d = self.net.hp.d_model;
        for (pos, &id) in ids.iter().enumerate() {
            let row = self.split(table + id as usize * d, d);
            for k in 0..d {
                row[k] += dx[pos * d + k];
            }
        }
    }

    /// Backpropagates `dlogits` through the decoder; returns the gradient
    /// with respect to the encoder memory.
    pub fn decoder(
        &mut self,
        enc: &EncoderTape<T>,
        tape: &DecoderTape<T>,
        dlogits: &[T],
    ) -> Vec<T> {
        let net = self.net;
        let (d, vt) = (net.hp.d_model, net.hp.tgt_vocab);
        let m = tape.input.len();
        let dhidden = self.linear(
            &tape.hidden,
            m,
            d,
            net.layout.out_w,
            net.layout.out_b,
            dlogits,
            vt,
        );
        let mut dh = self.norm(net.layout.decoder_norm, &dhidden, &tape.norm);
        let mut dmemory = vec![T::zero(); enc.memory.len()];
        for (l, c) in net.layout.decoder.iter().zip(&tape.layers).rev() {
            self.decoder_layer(l, c, enc, &mut dh, &mut dmemory);
        }
        self.embed(net.layout.tgt_embed, &tape.input, &dh);
        dmemory
    }

    fn decoder_layer(
        &mut self,
        l: &DecoderLayer,
        c: &DecoderLayerCache<T>,
        enc: &EncoderTape<T>,
        dh: &mut [T],
        dmemory: &mut [T],
    ) {
        let dff_in = self.feed_forward(&l.ff, &c.norm3_out, &c.ff, dh);
        let dres = self.norm(l.norm3, &dff_in, &c.norm3);
        add_in_place(dh, &dres);

        let (dq_in, dkv) =
            self.attention(&l.cross_attn, &c.norm2_out, &enc.memory, &c.cross_attn, dh);
        add_in_place(dmemory, &dkv);
        let dres = self.norm(l.norm2, &dq_in, &c.norm2);
        add_in_place(dh, &dres);

        let (dq_in, dkv) =
            self.attention(&l.self_attn, &c.norm1_out, &c.norm1_out, &c.self_attn, dh);
        let mut dn = dq_in;
        add_in_place(&mut dn, &dkv);
        let dres = self.norm(l.norm1, &dn, &c.norm1);
        add_in_place(dh, &dres);
    }

    pub fn encoder(&mut self, enc: &EncoderTape<T>, dmemory: &[T]) {
        let net = self.net;
        let mut dh = self.norm(net.layout.encoder_norm, dmemory, &enc.norm);
        for (l, c) in net.layout.encoder.iter().zip(&enc.layers).rev() {
            self.encoder_layer(l, c, &mut dh);
        }
        self.embed(net.layout.src_embed, &enc.src, &dh);
    }

    fn encoder_layer(&mut self, l: &EncoderLayer, c: &EncoderLayerCache<T>, dh: &mut [T]) {
        let dff_in = self.feed_forward(&l.ff, &c.norm2_out, &c.ff, dh);
        let dres = self.norm(l.norm2, &dff_in, &c.norm2);
        add_in_place(dh, &dres);

        let (dq_in, dkv) = self.attention(&l.attn, &c.norm1_out, &c.norm1_out, &c.attn, dh);
        let mut dn = dq_in;
        add_in_place(&mut dn, &dkv);
        let dres = self.norm(l.norm1, &dn, &c.norm1);
        add_in_place(dh, &dres);
    }
}
