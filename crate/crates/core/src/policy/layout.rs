use alloc::vec::Vec;

use super::Hyperparams;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForward {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayer {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub ff: FeedForward,
}

/// Offsets of every tensor inside the flat parameter vector, in declaration
/// order: source embedding, target embedding, encoder layers, encoder norm,
/// decoder layers, decoder norm, output projection.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: Norm,
    pub out_w: usize,
    pub out_b: usize,
    pub total: usize,
    /// `(offset, len, fan_in)` for every matrix, used by initialization.
    pub matrices: Vec<(usize, usize, usize)>,
    pub norms: Vec<Norm>,
}

struct Cursor {
    at: usize,
    matrices: Vec<(usize, usize, usize)>,
    norms: Vec<Norm>,
}

impl Cursor {
    fn take(&mut self, len: usize) -> usize {
        let at = self.at;
        self.at += len;
        at
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> usize {
        let at = self.take(rows * cols);
        self.matrices.push((at, rows * cols, rows));
        at
    }

    fn norm(&mut self, d: usize) -> Norm {
        let n = Norm {
            gain: self.take(d),
            bias: self.take(d),
        };
        self.norms.push(n);
        n
    }

    fn attention(&mut self, d: usize) -> Attention {
        Attention {
            wq: self.matrix(d, d),
            bq: self.take(d),
            wk: self.matrix(d, d),
            bk: self.take(d),
            wv: self.matrix(d, d),
            bv: self.take(d),
            wo: self.matrix(d, d),
            bo: self.take(d),
        }
    }

    fn feed_forward(&mut self, d: usize, f: usize) -> FeedForward {
        FeedForward {
            w1: self.matrix(d, f),
            b1: self.take(f),
            w2: self.matrix(f, d),
            b2: self.take(d),
        }
    }
}

impl Layout {
    pub fn new(hp: &Hyperparams) -> Self {
        let (d, f) = (hp.d_model, hp.d_ff);
        let mut c = Cursor {
            at: 0,
            matrices: Vec::new(),
            norms: Vec::new(),
        };
        let src_embed = c.take(hp.src_vocab * d);
        let tgt_embed = c.take(hp.tgt_vocab * d);
        let encoder = (0..hp.layers)
            .map(|_| EncoderLayer {
                norm1: c.norm(d),
                attn: c.attention(d),
                norm2: c.norm(d),
                ff: c.feed_forward(d, f),
            })
            .collect();
        let encoder_norm = c.norm(d);
        let decoder = (0..hp.layers)
            .map(|_| DecoderLayer {
                norm1: c.norm(d),
                self_attn: c.attention(d),
                norm2: c.norm(d),
                cross_attn: c.attention(d),
                norm3: c.norm(d),
                ff: c.feed_forward(d, f),
            })
            .collect();
        let decoder_norm = c.norm(d);
        let out_w = c.matrix(d, hp.tgt_vocab);
        let out_b = c.take(hp.tgt_vocab);
        Self {
            src_embed,
            tgt_embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            out_w,
            out_b,
            total: c.at,
            matrices: c.matrices,
            norms: c.norms,
        }
    }
}
