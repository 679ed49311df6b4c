//! Iterative language module and gated fusion.
//!
//! The LM reads a `T×D` character distribution through a
//! probability-weighted embedding and refines it with transformer decoder
//! blocks whose queries are character-order encodings. With self-position
//! masking, output row `t` never sees input row `t`. The fusion gate mixes
//! the LM output with the vision prediction per position and class.

use crate::config::LmConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{sinusoid_table, Affine, FeedForward, Linear, MultiHeadAttention};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{RngState, Tensor};

/// Tolerance on input row sums accepted by [`LanguageModel::lm_forward`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LmBlock {
    pub attn: MultiHeadAttention,
    pub ln1: Affine,
    pub ffn: FeedForward,
    pub ln2: Affine,
}

/// Sigmoid gate over the concatenated `[y_v; y_l]` rows.
#[derive(Clone, Debug)]
pub struct FusionGate {
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub embed: ParamId,
    pub blocks: Vec<LmBlock>,
    pub out: Linear,
    pub gate: FusionGate,
    pos: Tensor,
    keep: Option<Vec<bool>>,
}

impl LanguageModel {
    pub fn new(config: &LmConfig, store: &mut ParamStore, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let (t, d, c) = (config.max_len, config.num_classes, config.model_dim);
        let embed = store.add("lm.embed", Tensor::normal(&[d, c], 1.0, rng))?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let name = format!("lm.block{}", b + 1);
            blocks.push(LmBlock {
                attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), c, config.n_heads)?,
                ln1: Affine::new(store, &format!("{name}.ln1"), c)?,
                ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), c, config.ffn_dim)?,
                ln2: Affine::new(store, &format!("{name}.ln2"), c)?,
            });
        }
        let out = Linear::new(store, rng, "lm.out", c, d, true)?;
        let gate = FusionGate {
            proj: Linear::new(store, rng, "lm.gate", 2 * d, d, true)?,
        };
        let keep = config
            .mask_self_position
            .then(|| (0..t * t).map(|i| i / t != i % t).collect());
        Ok(LanguageModel {
            config: config.clone(),
            embed,
            blocks,
            out,
            gate,
            pos: sinusoid_table(t, c)?,
            keep,
        })
    }

    fn check_dist(&self, g: &Graph, y: Var, what: &str) -> Result<()> {
        let expect = [self.config.max_len, self.config.num_classes];
        if g.shape(y) != expect {
            return Err(Error::shape(format!("{what} {:?}, expected {expect:?}", g.shape(y))));
        }
        Ok(())
    }

    /// One LM pass: `T×D` probabilities in, `T×D` probabilities out.
    pub fn lm_forward(&self, g: &mut Graph, s: &ParamStore, y_in: Var) -> Result<Var> {
        self.check_dist(g, y_in, "LM input")?;
        let v = g.value(y_in);
        for r in 0..v.rows() {
            let sum: f64 = v.row(r).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || v.row(r).iter().any(|&p| p < 0.0) {
                return Err(Error::Contract(format!(
                    "LM input row {r} is not a distribution (sum {sum})"
                )));
            }
        }
        let e = g.param(s, self.embed);
        let emb = g.matmul(y_in, e)?;
        let pos = g.constant(self.pos.clone());
        let memory = g.add(emb, pos)?;
        let mut q = pos;
        for b in &self.blocks {
            let a = b.attn.forward(g, s, q, memory, self.keep.as_deref())?;
            let h = g.add(q, a)?;
            q = b.ln1.layer_norm(g, s, h)?;
            let f = b.ffn.forward(g, s, q)?;
            let h = g.add(q, f)?;
            q = b.ln2.layer_norm(g, s, h)?;
        }
        let logits = self.out.forward(g, s, q)?;
        g.softmax(logits, 1)
    }

    /// Gated fusion `g⊙y_v + (1−g)⊙y_l`, rows renormalized.
    pub fn fuse(&self, g: &mut Graph, s: &ParamStore, y_l: Var, y_v: Var) -> Result<Var> {
        if g.shape(y_l) != g.shape(y_v) {
            return Err(Error::shape(format!(
                "fuse: LM {:?} vs vision {:?}",
                g.shape(y_l),
                g.shape(y_v)
            )));
        }
        self.check_dist(g, y_v, "fusion input")?;
        let cat = g.concat(&[y_v, y_l], 1)?;
        let z = self.gate.proj.forward(g, s, cat)?;
        let gate = g.sigmoid(z);
        let diff = g.sub(y_v, y_l)?;
        let gd = g.mul(gate, diff)?;
        let mixed = g.add(y_l, gd)?;
        Ok(g.row_normalize(mixed))
    }

    /// `M` refinement rounds. Round `j` feeds the previous fusion (the vision
    /// prediction for `j = 1`) to the LM and fuses the result with the
    /// original vision prediction. Returns `(Y_l^1..M, Y_f^1..M)`.
    pub fn refine(&self, g: &mut Graph, s: &ParamStore, y_v: Var, m: usize) -> Result<(Vec<Var>, Vec<Var>)> {
        if m < 1 {
            return Err(Error::arg("LM iteration count must be >= 1"));
        }
        let mut lm_out = Vec::with_capacity(m);
        let mut fused = Vec::with_capacity(m);
        let mut current = y_v;
        for _ in 0..m {
            let yl = self.lm_forward(g, s, current)?;
            let yf = self.fuse(g, s, yl, y_v)?;
            lm_out.push(yl);
            fused.push(yf);
            current = yf;
        }
        Ok((lm_out, fused))
    }

    /// Multiply-accumulates of one LM pass plus one fusion.
    pub fn macs_per_pass(&self) -> u64 {
        let (t, d, c) = (self.config.max_len, self.config.num_classes, self.config.model_dim);
        let mut total = (t * d * c) as u64;
        for b in &self.blocks {
            total += b.attn.macs(t, t) + b.ffn.macs(t);
        }
        total += (t * c * d) as u64;
        total += (t * 2 * d * d) as u64;
        total
    }

    pub fn num_params(&self) -> usize {
        let (d, c) = (self.config.num_classes, self.config.model_dim);
        d * c
            + self
                .blocks
                .iter()
                .map(|b| b.attn.num_params() + b.ln1.num_params() + b.ffn.num_params() + b.ln2.num_params())
                .sum::<usize>()
            + self.out.num_params()
            + self.gate.proj.num_params()
    }
}
