//! Parameterized layers shared by the encoder, decoder and language module.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{RngState, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::normal(&[in_dim, out_dim], std, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(s, b);
                g.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }
}

/// 2D convolution with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub k: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        c_in: usize,
        c_out: usize,
        size: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (c_in * size * size) as f64;
        let k = store.add(
            format!("{name}.k"),
            Tensor::normal(&[c_out, c_in, size, size], (2.0 / fan_in).sqrt(), rng),
        )?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[c_out]))?)
        } else {
            None
        };
        Ok(Conv {
            k,
            b,
            c_in,
            c_out,
            size,
            stride,
            pad: size / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(s, self.k);
        let y = g.conv2d(x, k, self.stride, self.pad)?;
        match self.b {
            Some(b) => {
                let b = g.param(s, b);
                g.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn out_dim(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.size) / self.stride + 1
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        (self.c_out * self.c_in * self.size * self.size * ho * wo) as u64
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.size * self.size + if self.b.is_some() { self.c_out } else { 0 }
    }
}

/// Learnable scale and shift for a normalization layer.
#[derive(Clone, Debug)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Affine {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    pub fn layer_norm(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(s, self.gamma), g.param(s, self.beta));
        g.layer_norm(x, ga, be, NORM_EPS)
    }

    pub fn instance_norm(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(s, self.gamma), g.param(s, self.beta));
        g.instance_norm(x, ga, be, NORM_EPS)
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// Attends from `query[Tq×C]` over `memory[Tk×C]`. `keep` is an optional
    /// `Tq×Tk` mask of admissible (query, key) pairs.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        query: Var,
        memory: Var,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, s, query)?;
        let k = self.k.forward(g, s, memory)?;
        let v = self.v.forward(g, s, memory)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 1, h * dh, dh)?,
                    g.slice(k, 1, h * dh, dh)?,
                    g.slice(v, 1, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = match keep {
                Some(mask) => g.masked_softmax(scores, mask)?,
                None => g.softmax(scores, 1)?,
            };
            ctx.push(g.matmul(attn, vh)?);
        }
        let ctx = if ctx.len() == 1 { ctx[0] } else { g.concat(&ctx, 1)? };
        self.o.forward(g, s, ctx)
    }

    /// Multiply-accumulates for `tq` queries over `tk` keys.
    pub fn macs(&self, tq: usize, tk: usize) -> u64 {
        let c = self.dim as u64;
        let (tq, tk) = (tq as u64, tk as u64);
        // q and o projections on queries, k and v on keys, then QKᵀ and AV.
        2 * tq * c * c + 2 * tk * c * c + 2 * tq * tk * c
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.o.num_params()
    }
}

/// Two-layer position-wise feed-forward block with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(store, rng, &format!("{name}.l1"), dim, hidden, true)?,
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, s, x)?;
        let h = g.relu(h);
        self.l2.forward(g, s, h)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * (self.l1.in_dim * self.l1.out_dim + self.l2.in_dim * self.l2.out_dim)) as u64
    }

    pub fn num_params(&self) -> usize {
        self.l1.num_params() + self.l2.num_params()
    }
}

/// Sinusoidal encodings of `len` positions: row `p` holds
/// `sin(p / 10000^(2i/dim))` at column `2i` and the matching cosine at `2i+1`.
pub fn sinusoid_table(len: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::arg(format!("sinusoidal encoding needs an even width, got {dim}")));
    }
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = angle.sin();
            data[p * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[len, dim], data)
}

/// 2D sinusoidal encoding for an `h×w` grid flattened row-major into `h·w`
/// rows: the first half of the channels encode the row index, the second half
/// the column index.
pub fn sinusoid_table_2d(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(4) {
        return Err(Error::arg(format!("2D sinusoidal encoding needs width divisible by 4, got {dim}")));
    }
    let half = dim / 2;
    let ty = sinusoid_table(h, half)?;
    let tx = sinusoid_table(w, half)?;
    let mut data = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            row[..half].copy_from_slice(ty.row(y));
            row[half..].copy_from_slice(tx.row(x));
        }
    }
    Tensor::new(&[h * w, dim], data)
}
