//! The assembled recognizer: iterative encoder, shared decoder and iterative
//! language module over one parameter store.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::config::ModelConfig;
use crate::decoder::PositionDecoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lm::LanguageModel;
use crate::param::ParamStore;
use crate::tensor::{RngState, Tensor};

/// Counts of encoder passes, decodes and LM passes since the last reset.
#[derive(Debug, Default)]
pub struct CallCounters {
    pub encoder_passes: AtomicUsize,
    pub decodes: AtomicUsize,
    pub lm_passes: AtomicUsize,
}

impl CallCounters {
    pub fn snapshot(&self) -> (usize, usize, usize) {
        (
            self.encoder_passes.load(Ordering::Relaxed),
            self.decodes.load(Ordering::Relaxed),
            self.lm_passes.load(Ordering::Relaxed),
        )
    }

    pub fn reset(&self) {
        self.encoder_passes.store(0, Ordering::Relaxed);
        self.decodes.store(0, Ordering::Relaxed);
        self.lm_passes.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub struct IterNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: PositionDecoder,
    pub lm: LanguageModel,
    pub counters: CallCounters,
}

impl Clone for IterNet {
    fn clone(&self) -> Self {
        IterNet {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            lm: self.lm.clone(),
            counters: CallCounters::default(),
        }
    }
}

/// Graph nodes produced by one training-style forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub semantic: Vec<Var>,
    /// `Y_v^i` logits, one per decoded iteration.
    pub vm_logits: Vec<Var>,
    /// `Y_l^{i,j}` and `Y_f^{i,j}` per decoded iteration (empty without LM).
    pub lm_dists: Vec<Vec<Var>>,
    pub fused_dists: Vec<Vec<Var>>,
    /// 1-based iteration index of each decoded entry.
    pub decoded_iterations: Vec<usize>,
}

impl IterNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut store, &mut rng)?;
        let decoder = PositionDecoder::new(&config.decoder, config.encoder.grid(), &mut store, &mut rng)?;
        let lm = LanguageModel::new(&config.lm, &mut store, &mut rng)?;
        Ok(IterNet {
            config: config.clone(),
            store,
            encoder,
            decoder,
            lm,
            counters: CallCounters::default(),
        })
    }

    pub fn n_iterations(&self) -> usize {
        self.config.encoder.n_iterations
    }

    pub fn m_iterations(&self) -> usize {
        self.config.lm.n_iterations
    }

    pub fn image_var(&self, g: &mut Graph, image: &Tensor) -> Var {
        g.constant(image.clone())
    }

    /// `[S¹..Sᴺ]`.
    pub fn semantic_features(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        self.semantic_features_with(g, &self.store, image)
    }

    fn semantic_features_with(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Vec<Var>> {
        let n = self.n_iterations();
        let feats = self.encoder.forward(g, store, image, n)?;
        self.counters.encoder_passes.fetch_add(n, Ordering::Relaxed);
        Ok(feats)
    }

    pub fn decode(&self, g: &mut Graph, sem: Var) -> Result<Var> {
        self.decode_with(g, &self.store, sem)
    }

    fn decode_with(&self, g: &mut Graph, store: &ParamStore, sem: Var) -> Result<Var> {
        self.counters.decodes.fetch_add(1, Ordering::Relaxed);
        self.decoder.decode(g, store, sem)
    }

    pub fn refine(&self, g: &mut Graph, vm_logits: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        self.refine_with(g, &self.store, vm_logits)
    }

    fn refine_with(&self, g: &mut Graph, store: &ParamStore, vm_logits: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let y_v = g.softmax(vm_logits, 1)?;
        let m = self.m_iterations();
        let out = self.lm.refine(g, store, y_v, m)?;
        self.counters.lm_passes.fetch_add(m, Ordering::Relaxed);
        Ok(out)
    }

    /// Full training-time forward. `all_iterations` decodes (and, with
    /// `with_lm`, refines) every `Sⁱ`; otherwise only `Sᴺ`.
    pub fn forward(&self, g: &mut Graph, image: &Tensor, all_iterations: bool, with_lm: bool) -> Result<ForwardOutputs> {
        self.forward_with(g, &self.store, image, all_iterations, with_lm)
    }

    /// [`IterNet::forward`] reading parameters from `store`, which must have
    /// been built alongside this model (e.g. a perturbed copy of `self.store`).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
        all_iterations: bool,
        with_lm: bool,
    ) -> Result<ForwardOutputs> {
        let img = self.image_var(g, image);
        let semantic = self.semantic_features_with(g, store, img)?;
        let n = semantic.len();
        let decoded_iterations: Vec<usize> = if all_iterations { (1..=n).collect() } else { vec![n] };
        let mut out = ForwardOutputs {
            semantic: semantic.clone(),
            vm_logits: Vec::new(),
            lm_dists: Vec::new(),
            fused_dists: Vec::new(),
            decoded_iterations: decoded_iterations.clone(),
        };
        for &i in &decoded_iterations {
            let logits = self.decode_with(g, store, semantic[i - 1])?;
            out.vm_logits.push(logits);
            if with_lm {
                let (yl, yf) = self.refine_with(g, store, logits)?;
                out.lm_dists.push(yl);
                out.fused_dists.push(yf);
            }
        }
        Ok(out)
    }

    /// Logits of the last vision iteration and, when `with_lm`, the final
    /// fused distribution `Y_f^{N,M}`, as used at test time.
    pub fn predict(&self, image: &Tensor, with_lm: bool) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, image, false, with_lm)?;
        let logits = g.value(out.vm_logits[0]).clone();
        let fused = out
            .fused_dists
            .first()
            .and_then(|f| f.last())
            .map(|&v| g.value(v).clone());
        Ok((logits, fused))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        if &self.config != other {
            return Err(Error::Config("model configuration mismatch".into()));
        }
        Ok(())
    }
}
