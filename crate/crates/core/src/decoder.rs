//! Position-attention prediction layer shared by every iteration.
//!
//! Fixed sinusoidal character-order queries attend over keys produced by a
//! small U-Net on the semantic grid; the attended semantic rows are projected
//! to class logits.

use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{sinusoid_table, Conv};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{RngState, Tensor};

/// Fixed `T×C` table of character-order encodings.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    pub q: Tensor,
}

pub fn positional_encoding(t: usize, c: usize) -> Result<PositionalTable> {
    Ok(PositionalTable {
        q: sinusoid_table(t, c)?,
    })
}

#[derive(Clone, Debug)]
pub struct MiniUnet {
    pub downs: Vec<Conv>,
    pub ups: Vec<Conv>,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl MiniUnet {
    fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        c: usize,
        u: usize,
        depth: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let div = 1 << depth;
        if !grid.0.is_multiple_of(div) || !grid.1.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "grid {}x{} not divisible by 2^{depth}",
                grid.0, grid.1
            )));
        }
        let mut downs = Vec::with_capacity(depth);
        for l in 1..=depth {
            let c_in = if l == 1 { c } else { u };
            downs.push(Conv::new(store, rng, &format!("decoder.unet.down{l}"), c_in, u, 3, 2, true)?);
        }
        // ups[l-1] maps level l back to level l-1 after concatenating the skip.
        let mut ups = Vec::with_capacity(depth);
        for l in 1..=depth {
            let skip = if l == 1 { c } else { u };
            let out = if l == 1 { c } else { u };
            ups.push(Conv::new(store, rng, &format!("decoder.unet.up{l}"), u + skip, out, 3, 1, true)?);
        }
        Ok(MiniUnet {
            downs,
            ups,
            grid,
            channels: c,
        })
    }

    /// Grid sizes visited below the input level, coarsest last.
    pub fn internal_grids(&self) -> Vec<(usize, usize)> {
        (1..=self.downs.len())
            .map(|l| (self.grid.0 >> l, self.grid.1 >> l))
            .collect()
    }

    /// Maps `(HW/16)×C` rows to keys of the same shape.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, sem: Var) -> Result<Var> {
        let (h, w) = self.grid;
        let c = self.channels;
        if g.shape(sem) != [h * w, c] {
            return Err(Error::shape(format!(
                "mini U-Net input {:?}, expected {:?}",
                g.shape(sem),
                [h * w, c]
            )));
        }
        let t = g.transpose(sem)?;
        let x0 = g.reshape(t, &[c, h, w])?;
        let mut skips = vec![x0];
        let mut y = x0;
        for d in &self.downs {
            y = d.forward(g, s, y)?;
            y = g.relu(y);
            skips.push(y);
        }
        for l in (1..=self.ups.len()).rev() {
            y = g.upsample(y, 2)?;
            y = g.concat(&[y, skips[l - 1]], 0)?;
            y = self.ups[l - 1].forward(g, s, y)?;
            if l > 1 {
                y = g.relu(y);
            }
        }
        let m = g.reshape(y, &[c, h * w])?;
        g.transpose(m)
    }

    pub fn macs(&self) -> u64 {
        let (mut h, mut w) = self.grid;
        let mut total = 0;
        let mut sizes = vec![(h, w)];
        for d in &self.downs {
            total += d.macs(h, w);
            h = d.out_dim(h);
            w = d.out_dim(w);
            sizes.push((h, w));
        }
        for (l, up) in self.ups.iter().enumerate() {
            let (uh, uw) = sizes[l];
            total += up.macs(uh, uw);
        }
        total
    }

    pub fn num_params(&self) -> usize {
        self.downs.iter().chain(&self.ups).map(Conv::num_params).sum()
    }
}

#[derive(Clone, Debug)]
pub struct PositionDecoder {
    pub config: DecoderConfig,
    pub queries: PositionalTable,
    pub unet: MiniUnet,
    /// Class projection `W: C×D`.
    pub class_proj: ParamId,
}

pub const CLASS_PROJ_NAME: &str = "decoder.class_proj";

impl PositionDecoder {
    pub fn new(
        config: &DecoderConfig,
        grid: (usize, usize),
        store: &mut ParamStore,
        rng: &mut RngState,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.model_dim;
        let unet = MiniUnet::new(store, rng, c, config.unet_channels, config.unet_depth, grid)?;
        let class_proj = store.add(
            CLASS_PROJ_NAME,
            Tensor::normal(&[c, config.num_classes], (1.0 / c as f64).sqrt(), rng),
        )?;
        Ok(PositionDecoder {
            config: config.clone(),
            queries: positional_encoding(config.max_len, c)?,
            unet,
            class_proj,
        })
    }

    /// Attention weights `softmax(Q·Gᵀ/√C)` over the key axis, `T×(HW/16)`.
    pub fn attention(&self, g: &mut Graph, keys: Var) -> Result<Var> {
        let q = g.constant(self.queries.q.clone());
        let scores = g.matmul_nt(q, keys)?;
        let scores = g.scale(scores, 1.0 / (self.config.model_dim as f64).sqrt());
        g.softmax(scores, 1)
    }

    /// Logits `A·S·W` for semantic rows `sem` and keys `keys = G(S)`.
    pub fn attend(&self, g: &mut Graph, s: &ParamStore, sem: Var, keys: Var) -> Result<Var> {
        if g.shape(sem) != g.shape(keys) {
            return Err(Error::shape(format!(
                "semantic feature {:?} vs keys {:?}",
                g.shape(sem),
                g.shape(keys)
            )));
        }
        let a = self.attention(g, keys)?;
        let ctx = g.matmul(a, sem)?;
        let w = g.param(s, self.class_proj);
        g.matmul(ctx, w)
    }

    /// `T×D` logits for one semantic feature.
    pub fn decode(&self, g: &mut Graph, s: &ParamStore, sem: Var) -> Result<Var> {
        let keys = self.unet.forward(g, s, sem)?;
        self.attend(g, s, sem, keys)
    }

    pub fn macs(&self) -> u64 {
        let (t, c, d) = (self.config.max_len, self.config.model_dim, self.config.num_classes);
        let l = self.unet.grid.0 * self.unet.grid.1;
        self.unet.macs() + 2 * (t * l * c) as u64 + (t * c * d) as u64
    }

    pub fn num_params(&self) -> usize {
        self.unet.num_params() + self.config.model_dim * self.config.num_classes
    }
}

/// Argmax per position (lowest index wins ties), truncated at the first end
/// token.
pub fn greedy_text(logits: &Tensor, vocab: &crate::datagen::Vocab) -> String {
    let d = logits.cols();
    let mut out = String::new();
    for r in 0..logits.rows() {
        let row = &logits.data()[r * d..(r + 1) * d];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == vocab.end_index() {
            break;
        }
        if let Some(ch) = vocab.char_of(best) {
            out.push(ch);
        }
    }
    out
}
