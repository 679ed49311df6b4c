//! Analytic multiply-accumulate and parameter accounting.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::{Encoder, FEEDBACK_SITES};
use crate::error::Result;
use crate::model::IterNet;

/// Costs of one invocation of each component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitCosts {
    pub encoder_pass_macs: u64,
    pub feedback_macs: u64,
    pub decoder_macs: u64,
    pub lm_pass_macs: u64,
    pub encoder_pass_params: usize,
    pub feedback_set_params: usize,
    pub decoder_params: usize,
    pub lm_params: usize,
}

/// Test-time costs of a model with `n` vision iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationCost {
    pub n: usize,
    /// `n` encoder passes plus `n − 1` feedback projections.
    pub encoder_macs: u64,
    /// One decode of `Sᴺ`; intermediate decodes are skipped at test time.
    pub decoder_macs: u64,
    /// `M` LM passes with fusion.
    pub lm_macs: u64,
    pub total_macs_vm_only: u64,
    pub total_macs_full: u64,
    pub encoder_params: usize,
    pub decoder_params: usize,
    pub lm_params: usize,
    pub total_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub unit: UnitCosts,
    pub m_iterations: usize,
    pub shared_encoder_weights: bool,
    pub rows: Vec<IterationCost>,
}

impl UnitCosts {
    pub fn for_n(&self, n: usize, m: usize, shared: bool) -> IterationCost {
        let fb = n.saturating_sub(1);
        let encoder_macs = n as u64 * self.encoder_pass_macs + fb as u64 * self.feedback_macs;
        let lm_macs = m as u64 * self.lm_pass_macs;
        let encoder_params = if shared {
            self.encoder_pass_params + if n > 1 { self.feedback_set_params } else { 0 }
        } else {
            n * self.encoder_pass_params + fb * self.feedback_set_params
        };
        IterationCost {
            n,
            encoder_macs,
            decoder_macs: self.decoder_macs,
            lm_macs,
            total_macs_vm_only: encoder_macs + self.decoder_macs,
            total_macs_full: encoder_macs + self.decoder_macs + lm_macs,
            encoder_params,
            decoder_params: self.decoder_params,
            lm_params: self.lm_params,
            total_params: encoder_params + self.decoder_params + self.lm_params,
        }
    }
}

/// Per-component costs of `config` and of the same model at `N = 1..=max_n`.
pub fn count_flops_params(config: &ModelConfig, max_n: usize) -> Result<FlopReport> {
    config.validate()?;
    let probe = IterNet::new(&config.clone().with_iterations(2, config.lm.n_iterations), 0)?;
    let e = &probe.encoder;
    let unit = UnitCosts {
        encoder_pass_macs: e.macs_per_pass(),
        feedback_macs: e.feedback_macs(),
        decoder_macs: probe.decoder.macs(),
        lm_pass_macs: probe.lm.macs_per_pass(),
        encoder_pass_params: e.params_per_pass(),
        feedback_set_params: (1..=FEEDBACK_SITES)
            .map(|k| config.encoder.model_dim * Encoder::site_channels(&config.encoder, k))
            .sum(),
        decoder_params: probe.decoder.num_params(),
        lm_params: probe.lm.num_params(),
    };
    let m = config.lm.n_iterations;
    let shared = config.encoder.share_encoder_weights;
    let rows = (1..=max_n).map(|n| unit.for_n(n, m, shared)).collect();
    Ok(FlopReport {
        unit,
        m_iterations: m,
        shared_encoder_weights: shared,
        rows,
    })
}
