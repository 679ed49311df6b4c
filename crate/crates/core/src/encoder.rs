//! Iterative vision encoder.
//!
//! One pass is a 3×3 stem, five residual stages (downsampling inside stages 1
//! and 3) and a stack of pre-norm transformer units over the flattened `H/4 ×
//! W/4` grid. From the second iteration on, the previous semantic feature is
//! projected to each site's channel count, upsampled to the site's
//! resolution and added to the input of every stage and of the transformer.

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{sinusoid_table_2d, Affine, Conv, FeedForward, MultiHeadAttention};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{RngState, Tensor};

/// Number of feedback injection sites: five stage inputs plus the transformer.
pub const FEEDBACK_SITES: usize = 6;

#[derive(Clone, Debug)]
pub struct ResUnit {
    pub conv1: Conv,
    pub norm1: Affine,
    pub conv2: Conv,
    pub norm2: Affine,
    /// 1×1 projection on the skip path when stride or channels change.
    pub proj: Option<Conv>,
}

impl ResUnit {
    fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let proj = if stride != 1 || c_in != c_out {
            Some(Conv::new(store, rng, &format!("{name}.proj"), c_in, c_out, 1, stride, false)?)
        } else {
            None
        };
        Ok(ResUnit {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, stride, false)?,
            norm1: Affine::new(store, &format!("{name}.norm1"), c_out)?,
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, false)?,
            norm2: Affine::new(store, &format!("{name}.norm2"), c_out)?,
            proj,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, s, x)?;
        let h = self.norm1.instance_norm(g, s, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, s, h)?;
        let h = self.norm2.instance_norm(g, s, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, s, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.conv1.out_dim(h), self.conv1.out_dim(w));
        self.conv1.macs(h, w)
            + self.conv2.macs(ho, wo)
            + self.proj.as_ref().map_or(0, |p| p.macs(h, w))
    }

    fn num_params(&self) -> usize {
        self.conv1.num_params()
            + self.norm1.num_params()
            + self.conv2.num_params()
            + self.norm2.num_params()
            + self.proj.as_ref().map_or(0, Conv::num_params)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerUnit {
    pub ln1: Affine,
    pub attn: MultiHeadAttention,
    pub ln2: Affine,
    pub ffn: FeedForward,
}

impl TransformerUnit {
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.layer_norm(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, None)?;
        let x = g.add(x, a)?;
        let h = self.ln2.layer_norm(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        g.add(x, f)
    }
}

/// Parameters of one encoder pass (shared across iterations by default).
#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub stem: Conv,
    pub stem_norm: Affine,
    pub stages: Vec<Vec<ResUnit>>,
    pub transformer: Vec<TransformerUnit>,
}

/// One projection `W_k: C → C_{k−1}` per injection site.
#[derive(Clone, Debug)]
pub struct FeedbackProjector {
    pub sites: Vec<FeedbackSite>,
}

#[derive(Clone, Debug)]
pub struct FeedbackSite {
    pub w: ParamId,
    pub channels: usize,
    pub upsample: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub weights: Vec<EncoderWeights>,
    /// Feedback projectors for iterations `2..=N`; a single shared set when
    /// encoder weights are shared.
    pub feedback: Vec<FeedbackProjector>,
    pos: Tensor,
}

/// Spatial downsampling factor after stage `k` (1-based, 0 = stem).
fn stage_scale(k: usize) -> usize {
    match k {
        0 => 1,
        1 | 2 => 2,
        _ => 4,
    }
}

impl Encoder {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let copies = if config.share_encoder_weights { 1 } else { config.n_iterations };
        let mut weights = Vec::with_capacity(copies);
        for copy in 0..copies {
            let prefix = if config.share_encoder_weights {
                "encoder".to_string()
            } else {
                format!("encoder{}", copy + 1)
            };
            weights.push(Self::build_weights(config, store, rng, &prefix)?);
        }
        let projector_sets = if config.n_iterations < 2 {
            0
        } else if config.share_encoder_weights {
            1
        } else {
            config.n_iterations - 1
        };
        let mut feedback = Vec::with_capacity(projector_sets);
        for set in 0..projector_sets {
            let prefix = if config.share_encoder_weights {
                "feedback".to_string()
            } else {
                format!("feedback{}", set + 2)
            };
            let mut sites = Vec::with_capacity(FEEDBACK_SITES);
            for k in 1..=FEEDBACK_SITES {
                let channels = Self::site_channels(config, k);
                let w = store.add(
                    format!("{prefix}.site{k}"),
                    Tensor::zeros(&[config.model_dim, channels]),
                )?;
                sites.push(FeedbackSite {
                    w,
                    channels,
                    upsample: 4 / stage_scale(k - 1),
                });
            }
            feedback.push(FeedbackProjector { sites });
        }
        let (gh, gw) = config.grid();
        let pos = if config.positional_encoding {
            sinusoid_table_2d(gh, gw, config.model_dim)?
        } else {
            Tensor::zeros(&[gh * gw, config.model_dim])
        };
        Ok(Encoder {
            config: config.clone(),
            weights,
            feedback,
            pos,
        })
    }

    /// Channel count of the input at site `k` (1..=5 stages, 6 transformer).
    pub(crate) fn site_channels(config: &EncoderConfig, k: usize) -> usize {
        match k {
            1 => config.stem_channels,
            6 => config.model_dim,
            _ => config.stage_channels[k - 2],
        }
    }

    fn build_weights(
        config: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut RngState,
        prefix: &str,
    ) -> Result<EncoderWeights> {
        let stem = Conv::new(
            store,
            rng,
            &format!("{prefix}.stem"),
            config.input_channels,
            config.stem_channels,
            3,
            1,
            false,
        )?;
        let stem_norm = Affine::new(store, &format!("{prefix}.stem_norm"), config.stem_channels)?;
        let mut stages = Vec::with_capacity(5);
        let mut c_in = config.stem_channels;
        for k in 0..5 {
            let c_out = config.stage_channels[k];
            let mut units = Vec::with_capacity(config.stage_units[k]);
            for u in 0..config.stage_units[k] {
                let stride = if u == 0 && (k == 0 || k == 2) { 2 } else { 1 };
                let unit_in = if u == 0 { c_in } else { c_out };
                units.push(ResUnit::new(
                    store,
                    rng,
                    &format!("{prefix}.stage{}.unit{}", k + 1, u + 1),
                    unit_in,
                    c_out,
                    stride,
                )?);
            }
            stages.push(units);
            c_in = c_out;
        }
        let c = config.model_dim;
        let mut transformer = Vec::with_capacity(config.n_transformer_units);
        for t in 0..config.n_transformer_units {
            let name = format!("{prefix}.transformer{}", t + 1);
            transformer.push(TransformerUnit {
                ln1: Affine::new(store, &format!("{name}.ln1"), c)?,
                attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), c, config.n_heads)?,
                ln2: Affine::new(store, &format!("{name}.ln2"), c)?,
                ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), c, config.ffn_dim)?,
            });
        }
        Ok(EncoderWeights {
            stem,
            stem_norm,
            stages,
            transformer,
        })
    }

    fn weights_for(&self, iteration: usize) -> &EncoderWeights {
        if self.config.share_encoder_weights {
            &self.weights[0]
        } else {
            &self.weights[iteration - 1]
        }
    }

    fn feedback_for(&self, iteration: usize) -> Result<&FeedbackProjector> {
        if iteration < 2 {
            return Err(Error::Contract("iteration 1 never injects feedback".into()));
        }
        let idx = if self.config.share_encoder_weights { 0 } else { iteration - 2 };
        self.feedback
            .get(idx)
            .ok_or_else(|| Error::arg(format!("iteration {iteration} exceeds configured N={}", self.config.n_iterations)))
    }

    /// Expected `(C, H, W)` of the stage-`k` output (`k = 0` is the stem).
    pub fn stage_shape(&self, k: usize) -> [usize; 3] {
        let c = if k == 0 {
            self.config.stem_channels
        } else {
            self.config.stage_channels[k - 1]
        };
        let f = stage_scale(k);
        [c, self.config.input_h / f, self.config.input_w / f]
    }

    /// 3×3 stem convolution, per-channel normalization and ReLU.
    pub fn stem(&self, g: &mut Graph, s: &ParamStore, image: Var, iteration: usize) -> Result<Var> {
        let e = &self.config;
        let expect = [e.input_channels, e.input_h, e.input_w];
        if g.shape(image) != expect {
            return Err(Error::shape(format!(
                "image {:?} does not match configured input {expect:?}",
                g.shape(image)
            )));
        }
        let w = self.weights_for(iteration);
        let x = w.stem.forward(g, s, image)?;
        let x = w.stem_norm.instance_norm(g, s, x)?;
        Ok(g.relu(x))
    }

    /// Residual stage `k` (1-based).
    pub fn res_stage(&self, g: &mut Graph, s: &ParamStore, k: usize, x: Var, iteration: usize) -> Result<Var> {
        if !(1..=5).contains(&k) {
            return Err(Error::arg(format!("stage index {k} outside 1..=5")));
        }
        let expect = self.stage_shape(k - 1);
        if g.shape(x) != expect {
            return Err(Error::shape(format!(
                "stage {k} input {:?}, expected {expect:?}",
                g.shape(x)
            )));
        }
        let mut h = x;
        for unit in &self.weights_for(iteration).stages[k - 1] {
            h = unit.forward(g, s, h)?;
        }
        Ok(h)
    }

    /// `C×h×w` map to `(h·w)×C` rows.
    pub fn flatten(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let m = g.reshape(x, &[sh[0], sh[1] * sh[2]])?;
        g.transpose(m)
    }

    /// Positional encoding followed by the transformer units, on an already
    /// flattened `(HW/16)×C` input.
    pub fn transformer_units(&self, g: &mut Graph, s: &ParamStore, flat: Var, iteration: usize) -> Result<Var> {
        let expect = [self.config.seq_len(), self.config.model_dim];
        if g.shape(flat) != expect {
            return Err(Error::shape(format!(
                "transformer input {:?}, expected {expect:?}",
                g.shape(flat)
            )));
        }
        let mut x = if self.config.positional_encoding {
            let pe = g.constant(self.pos.clone());
            g.add(flat, pe)?
        } else {
            flat
        };
        for unit in &self.weights_for(iteration).transformer {
            x = unit.forward(g, s, x)?;
        }
        Ok(x)
    }

    /// Adds the projected previous semantic feature at `site` (1..=5 for the
    /// stage inputs, 6 for the flattened transformer input).
    pub fn feedback_inject(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        site: usize,
        x: Var,
        s_prev: Var,
        iteration: usize,
    ) -> Result<Var> {
        if !(1..=FEEDBACK_SITES).contains(&site) {
            return Err(Error::arg(format!("feedback site {site} outside 1..=6")));
        }
        let proj = &self.feedback_for(iteration)?.sites[site - 1];
        let seq = [self.config.seq_len(), self.config.model_dim];
        if g.shape(s_prev) != seq {
            return Err(Error::shape(format!(
                "semantic feature {:?}, expected {seq:?}",
                g.shape(s_prev)
            )));
        }
        let w = g.param(s, proj.w);
        let p = g.matmul(s_prev, w)?;
        if site == FEEDBACK_SITES {
            return g.add(x, p);
        }
        let (gh, gw) = self.config.grid();
        let pt = g.transpose(p)?;
        let map = g.reshape(pt, &[proj.channels, gh, gw])?;
        let up = if proj.upsample == 1 { map } else { g.upsample(map, proj.upsample)? };
        g.add(x, up)
    }

    /// One encoder pass. `s_prev` must be absent exactly when `iteration == 1`.
    pub fn encode_iteration(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        image: Var,
        s_prev: Option<Var>,
        iteration: usize,
    ) -> Result<Var> {
        if (iteration == 1) != s_prev.is_none() {
            return Err(Error::Contract(format!(
                "iteration {iteration} called {} a previous semantic feature",
                if s_prev.is_some() { "with" } else { "without" }
            )));
        }
        if iteration > self.config.n_iterations {
            return Err(Error::arg(format!(
                "iteration {iteration} exceeds N={}",
                self.config.n_iterations
            )));
        }
        let mut x = self.stem(g, s, image, iteration)?;
        for k in 1..=5 {
            if let Some(sp) = s_prev {
                x = self.feedback_inject(g, s, k, x, sp, iteration)?;
            }
            x = self.res_stage(g, s, k, x, iteration)?;
        }
        let mut flat = self.flatten(g, x)?;
        if let Some(sp) = s_prev {
            flat = self.feedback_inject(g, s, FEEDBACK_SITES, flat, sp, iteration)?;
        }
        self.transformer_units(g, s, flat, iteration)
    }

    /// `[S¹, …, Sⁿ]` for one image.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, image: Var, n: usize) -> Result<Vec<Var>> {
        if n < 1 {
            return Err(Error::arg("iteration count must be >= 1"));
        }
        if n != self.config.n_iterations {
            return Err(Error::arg(format!(
                "requested {n} iterations, encoder configured for {}",
                self.config.n_iterations
            )));
        }
        let mut feats = Vec::with_capacity(n);
        let mut prev = None;
        for i in 1..=n {
            let f = self.encode_iteration(g, s, image, prev, i)?;
            feats.push(f);
            prev = Some(f);
        }
        Ok(feats)
    }

    /// Multiply-accumulates of one pass without feedback.
    pub fn macs_per_pass(&self) -> u64 {
        let w = &self.weights[0];
        let e = &self.config;
        let mut total = w.stem.macs(e.input_h, e.input_w);
        for (k, units) in w.stages.iter().enumerate() {
            let [_, mut h, mut wd] = self.stage_shape(k);
            for u in units {
                total += u.macs(h, wd);
                h = u.conv1.out_dim(h);
                wd = u.conv1.out_dim(wd);
            }
        }
        let l = e.seq_len();
        for t in &w.transformer {
            total += t.attn.macs(l, l) + t.ffn.macs(l);
        }
        total
    }

    /// Multiply-accumulates of the six feedback projections of one iteration.
    pub fn feedback_macs(&self) -> u64 {
        let l = self.config.seq_len();
        (1..=FEEDBACK_SITES)
            .map(|k| (l * self.config.model_dim * Self::site_channels(&self.config, k)) as u64)
            .sum()
    }

    pub fn feedback_params(&self) -> usize {
        self.feedback.len()
            * (1..=FEEDBACK_SITES)
                .map(|k| self.config.model_dim * Self::site_channels(&self.config, k))
                .sum::<usize>()
    }

    /// Parameters of one encoder pass (excluding feedback).
    pub fn params_per_pass(&self) -> usize {
        let w = &self.weights[0];
        let mut n = w.stem.num_params() + w.stem_norm.num_params();
        n += w.stages.iter().flatten().map(ResUnit::num_params).sum::<usize>();
        n += w
            .transformer
            .iter()
            .map(|t| t.ln1.num_params() + t.attn.num_params() + t.ln2.num_params() + t.ffn.num_params())
            .sum::<usize>();
        n
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() * self.params_per_pass() + self.feedback_params()
    }
}
