//! Multi-task objectives, Adam, the training loop and evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Objective, TrainConfig};
use crate::datagen::{normalize_text, Sample, Vocab};
use crate::decoder::greedy_text;
use crate::error::{Error, Result};
use crate::graph::{Graph, Gradients, Var};
use crate::kernels;
use crate::model::IterNet;
use crate::param::ParamStore;
use crate::tensor::{RngState, Tensor};

/// Target classes and loss mask for one label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Character classes, then the end token, then masked padding.
pub fn encode_labels(text: &str, vocab: &Vocab, t: usize) -> Result<Labels> {
    let n = text.chars().count();
    if n + 1 > t {
        return Err(Error::arg(format!("label {text:?} has {n} chars; at most {} fit", t.saturating_sub(1))));
    }
    let mut targets = Vec::with_capacity(t);
    for c in text.chars() {
        targets.push(
            vocab
                .index_of(c)
                .ok_or_else(|| Error::arg(format!("label {text:?} contains {c:?}, not in vocab")))?,
        );
    }
    targets.push(vocab.end_index());
    let mask = (0..t).map(|i| i <= n).collect();
    targets.resize(t, vocab.end_index());
    Ok(Labels { targets, mask })
}

pub fn vm_term_name(i: usize) -> String {
    format!("L_v^{i}")
}

pub fn lm_term_name(i: usize, j: usize) -> String {
    format!("L_l^{i},{j}")
}

pub fn fused_term_name(i: usize, j: usize) -> String {
    format!("L_f^{i},{j}")
}

/// Named loss terms in a fixed order plus their unit-weighted sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.terms.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// Loss terms recorded on a graph, with their summed total.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub terms: Vec<(String, Var)>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            terms: self.terms.iter().map(|(n, v)| (n.clone(), g.value(*v).item())).collect(),
            total: g.value(self.total).item(),
        }
    }
}

fn sum_terms(g: &mut Graph, terms: Vec<(String, Var)>) -> Result<LossVars> {
    let mut iter = terms.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Contract("loss with no terms".into()))?
        .1;
    let mut total = first;
    for (_, v) in iter {
        total = g.add(total, *v)?;
    }
    Ok(LossVars { terms, total })
}

/// `Σᵢ L_v^i`: masked cross-entropy on each decoded iteration's logits.
/// `iterations[k]` is the 1-based iteration of `vm_logits[k]`.
pub fn vm_loss_vars(g: &mut Graph, vm_logits: &[Var], iterations: &[usize], labels: &Labels) -> Result<LossVars> {
    if vm_logits.len() != iterations.len() {
        return Err(Error::Contract(format!(
            "{} logits for {} iterations",
            vm_logits.len(),
            iterations.len()
        )));
    }
    let mut terms = Vec::with_capacity(vm_logits.len());
    for (&v, &i) in vm_logits.iter().zip(iterations) {
        terms.push((vm_term_name(i), g.cross_entropy(v, &labels.targets, &labels.mask)?));
    }
    sum_terms(g, terms)
}

/// `Σᵢ L_v^i + Σᵢ Σⱼ (L_l^{i,j} + L_f^{i,j})`, ordered by iteration `i`
/// with the vision term first.
pub fn full_loss_vars(
    g: &mut Graph,
    vm_logits: &[Var],
    lm_dists: &[Vec<Var>],
    fused_dists: &[Vec<Var>],
    iterations: &[usize],
    labels: &Labels,
) -> Result<LossVars> {
    let n = vm_logits.len();
    if iterations.len() != n || lm_dists.len() != n || fused_dists.len() != n {
        return Err(Error::Contract(format!(
            "loss needs LM and fused terms for all {n} vision iterations, got {} and {}",
            lm_dists.len(),
            fused_dists.len()
        )));
    }
    let m = lm_dists.first().map_or(0, Vec::len);
    if m == 0 || lm_dists.iter().chain(fused_dists).any(|d| d.len() != m) {
        return Err(Error::Contract("LM and fused terms must cover j = 1..M for every i".into()));
    }
    let mut terms = Vec::with_capacity(n * (1 + 2 * m));
    for k in 0..n {
        let i = iterations[k];
        terms.push((vm_term_name(i), g.cross_entropy(vm_logits[k], &labels.targets, &labels.mask)?));
        for j in 0..m {
            terms.push((lm_term_name(i, j + 1), g.nll_probs(lm_dists[k][j], &labels.targets, &labels.mask)?));
            terms.push((
                fused_term_name(i, j + 1),
                g.nll_probs(fused_dists[k][j], &labels.targets, &labels.mask)?,
            ));
        }
    }
    sum_terms(g, terms)
}

/// Vision-only objective on concrete logits, iterations numbered from 1.
pub fn loss_vm(vm_logits: &[Tensor], labels: &Labels) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = vm_logits.iter().map(|t| g.constant(t.clone())).collect();
    let iters: Vec<usize> = (1..=vars.len()).collect();
    Ok(vm_loss_vars(&mut g, &vars, &iters, labels)?.breakdown(&g))
}

/// Full objective on concrete logits and distributions.
pub fn loss_full(
    vm_logits: &[Tensor],
    lm_dists: &[Vec<Tensor>],
    fused_dists: &[Vec<Tensor>],
    labels: &Labels,
) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let mut lift = |ts: &[Tensor]| -> Vec<Var> { ts.iter().map(|t| g.constant(t.clone())).collect() };
    let vm = lift(vm_logits);
    let lm: Vec<Vec<Var>> = lm_dists.iter().map(|d| lift(d)).collect();
    let fu: Vec<Vec<Var>> = fused_dists.iter().map(|d| lift(d)).collect();
    let iters: Vec<usize> = (1..=vm.len()).collect();
    Ok(full_loss_vars(&mut g, &vm, &lm, &fu, &iters, labels)?.breakdown(&g))
}

/// Builds the training objective for one sample. Returns the graph, the
/// loss nodes and the forward outputs.
pub fn sample_loss(model: &IterNet, sample: &Sample, cfg: &TrainConfig, vocab: &Vocab) -> Result<(Graph, LossVars)> {
    let labels = encode_labels(&sample.text, vocab, model.config.decoder.max_len)?;
    let mut g = Graph::new();
    let with_lm = cfg.objective == Objective::Full;
    let out = model.forward(&mut g, &sample.image, cfg.intermediate_supervision, with_lm)?;
    let loss = if with_lm {
        full_loss_vars(
            &mut g,
            &out.vm_logits,
            &out.lm_dists,
            &out.fused_dists,
            &out.decoded_iterations,
            &labels,
        )?
    } else {
        vm_loss_vars(&mut g, &out.vm_logits, &out.decoded_iterations, &labels)?
    };
    Ok((g, loss))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter from its stored grad.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer state has {} slots for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in store.params_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if m.len() != p.grad.len() {
            return Err(Error::Contract(format!("optimizer state size mismatch for {}", p.name)));
        }
        let value = std::sync::Arc::make_mut(&mut p.value).data_mut();
        for (((x, &g), mi), vi) in value.iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Summary of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub last: Option<LossBreakdown>,
}

/// Header of the metrics log.
pub fn metrics_header(term_names: &[&str]) -> String {
    let mut h = String::from("step\tepoch\tlr\ttotal");
    for n in term_names {
        h.push('\t');
        h.push_str(n);
    }
    h
}

/// Sample order of epoch `epoch` (0-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RngState::derive(seed, epoch as u64).shuffle(&mut order);
    order
}

/// Mean loss and gradients of one batch. Gradients are summed in sample
/// order, so the result does not depend on the worker count.
pub fn batch_step(model: &IterNet, batch: &[&Sample], cfg: &TrainConfig, vocab: &Vocab) -> Result<(LossBreakdown, Vec<Gradients>)> {
    let scale = 1.0 / batch.len() as f64;
    let per_sample: Vec<Result<(LossBreakdown, Gradients)>> = kernels::install(|| {
        batch
            .par_iter()
            .map(|s| {
                let (mut g, loss) = sample_loss(model, s, cfg, vocab)?;
                let b = loss.breakdown(&g);
                let root = g.scale(loss.total, scale);
                Ok((b, g.backward(root)?))
            })
            .collect()
    });
    let mut grads = Vec::with_capacity(batch.len());
    let mut mean: Option<LossBreakdown> = None;
    for r in per_sample {
        let (b, gr) = r?;
        grads.push(gr);
        match &mut mean {
            None => mean = Some(b),
            Some(acc) => {
                for ((_, a), (_, x)) in acc.terms.iter_mut().zip(&b.terms) {
                    *a += x;
                }
                acc.total += b.total;
            }
        }
    }
    let mut mean = mean.ok_or_else(|| Error::arg("empty batch"))?;
    for (_, v) in mean.terms.iter_mut() {
        *v *= scale;
    }
    mean.total *= scale;
    Ok((mean, grads))
}

/// Trains `model` on `data`, writing one metrics line per optimizer step.
pub fn train(model: &mut IterNet, data: &[Sample], cfg: &TrainConfig, log: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let vocab = Vocab::default();
    let adam = AdamConfig::from(cfg);
    let mut state = AdamState::new(&model.store);
    let mut step = 0;
    let mut last = None;
    let mut header_written = false;
    let log_err = |e: std::io::Error| Error::io("metrics log", e);
    'epochs: for epoch in 0..cfg.total_epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = batch_step(model, &batch, cfg, &vocab)?;
            step += 1;
            if let Some((name, _)) = loss.terms.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite { term: name.clone(), step });
            }
            if !loss.total.is_finite() {
                return Err(Error::NonFinite { term: "total".into(), step });
            }
            model.store.zero_grad();
            for g in &grads {
                g.accumulate_into(&mut model.store);
            }
            adam_step(&mut model.store, &mut state, lr, adam)?;
            if !header_written {
                writeln!(log, "{}", metrics_header(&loss.names())).map_err(log_err)?;
                header_written = true;
            }
            let mut line = format!("{step}\t{epoch}\t{lr:e}\t{:.17e}", loss.total);
            for (_, v) in &loss.terms {
                line.push_str(&format!("\t{v:.17e}"));
            }
            writeln!(log, "{line}").map_err(log_err)?;
            last = Some(loss);
        }
    }
    log.flush().map_err(log_err)?;
    let epochs = if step == 0 { 0 } else { cfg.total_epochs };
    Ok(TrainSummary { steps: step, epochs, last })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Scores `Y_v^N`.
    VmOnly,
    /// Scores `Y_f^{N,M}`.
    Full,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vm-only" => Ok(EvalMode::VmOnly),
            "full" => Ok(EvalMode::Full),
            _ => Err(Error::arg(format!("unknown eval mode {s:?} (expected vm-only or full)"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::VmOnly => "vm-only",
            EvalMode::Full => "full",
        })
    }
}

/// Case-insensitive alphanumeric string match.
pub fn is_match(prediction: &str, label: &str) -> bool {
    normalize_text(prediction) == normalize_text(label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: usize,
    pub label: String,
    pub prediction: String,
    pub correct: bool,
    pub severity: f64,
    /// Greedy decode of each `Sⁱ` (empty unless per-iteration decoding ran).
    pub iteration_predictions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    pub severity: f64,
    pub n_samples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n_samples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub per_severity: Vec<SeverityRow>,
    /// Vision accuracy of each iteration `1..=N` (empty unless requested).
    pub per_iteration: Vec<f64>,
    pub results: Vec<SampleResult>,
}

impl EvalReport {
    /// Aggregates per-sample results.
    pub fn from_results(mode: EvalMode, results: Vec<SampleResult>) -> Self {
        let n = results.len();
        let correct = results.iter().filter(|r| r.correct).count();
        let mut buckets: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
        for r in &results {
            // Non-negative floats order like their bit patterns.
            let e = buckets.entry(r.severity.to_bits()).or_insert((r.severity, 0, 0));
            e.1 += 1;
            e.2 += r.correct as usize;
        }
        let per_severity = buckets
            .into_values()
            .map(|(severity, n_samples, n_correct)| SeverityRow {
                severity,
                n_samples,
                n_correct,
                accuracy: n_correct as f64 / n_samples as f64,
            })
            .collect();
        let n_iter = results.first().map_or(0, |r| r.iteration_predictions.len());
        let per_iteration = (0..n_iter)
            .map(|i| {
                results
                    .iter()
                    .filter(|r| r.iteration_predictions.get(i).is_some_and(|p| is_match(p, &r.label)))
                    .count() as f64
                    / n as f64
            })
            .collect();
        EvalReport {
            mode,
            n_samples: n,
            n_correct: correct,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            per_severity,
            per_iteration,
            results,
        }
    }

    /// Accuracy on samples whose severity equals `severity`.
    pub fn severity_accuracy(&self, severity: f64) -> Option<f64> {
        self.per_severity
            .iter()
            .find(|r| r.severity == severity)
            .map(|r| r.accuracy)
    }
}

/// Predicts one sample: the scored string and, with `per_iteration`, the
/// greedy decode of every `Sⁱ`. Runs `N` encoder passes and, in full mode,
/// `M` LM passes on `Y_v^N` only.
pub fn predict_sample(model: &IterNet, image: &Tensor, mode: EvalMode, per_iteration: bool) -> Result<(String, Vec<String>)> {
    let vocab = Vocab::default();
    let mut g = Graph::inference();
    let img = model.image_var(&mut g, image);
    let sem = model.semantic_features(&mut g, img)?;
    let n = sem.len();
    let mut iteration_predictions = Vec::new();
    let mut last = None;
    for (k, &s) in sem.iter().enumerate() {
        if !per_iteration && k + 1 < n {
            continue;
        }
        let logits = model.decode(&mut g, s)?;
        if per_iteration {
            iteration_predictions.push(greedy_text(g.value(logits), &vocab));
        }
        last = Some(logits);
    }
    let logits = last.expect("N >= 1");
    let prediction = match mode {
        EvalMode::VmOnly => greedy_text(g.value(logits), &vocab),
        EvalMode::Full => {
            let (_, fused) = model.refine(&mut g, logits)?;
            greedy_text(g.value(*fused.last().expect("M >= 1")), &vocab)
        }
    };
    Ok((prediction, iteration_predictions))
}

/// Scores `data` under `mode`.
pub fn evaluate(model: &IterNet, data: &[Sample], mode: EvalMode, per_iteration: bool) -> Result<EvalReport> {
    let results: Vec<SampleResult> = kernels::install(|| {
        data.par_iter()
            .enumerate()
            .map(|(index, s)| {
                let (prediction, iteration_predictions) = predict_sample(model, &s.image, mode, per_iteration)?;
                Ok(SampleResult {
                    index,
                    correct: is_match(&prediction, &s.text),
                    label: s.text.clone(),
                    prediction,
                    severity: s.severity,
                    iteration_predictions,
                })
            })
            .collect::<Result<_>>()
    })?;
    Ok(EvalReport::from_results(mode, results))
}

/// Every intermediate decode of one image: `N` vision strings, `M` fused
/// strings and the final output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub vm_iterations: Vec<String>,
    pub lm_iterations: Vec<String>,
    pub final_prediction: String,
}

impl TraceRow {
    pub fn len(&self) -> usize {
        self.vm_iterations.len() + self.lm_iterations.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Decodes every `Sⁱ` and every `Y_f^{N,j}`, including the intermediate
/// ones inference normally skips.
pub fn trace_image(model: &IterNet, image: &Tensor) -> Result<TraceRow> {
    let vocab = Vocab::default();
    let mut g = Graph::inference();
    let img = model.image_var(&mut g, image);
    let sem = model.semantic_features(&mut g, img)?;
    let mut vm_iterations = Vec::with_capacity(sem.len());
    let mut last = None;
    for &s in &sem {
        let logits = model.decode(&mut g, s)?;
        vm_iterations.push(greedy_text(g.value(logits), &vocab));
        last = Some(logits);
    }
    let (_, fused) = model.refine(&mut g, last.expect("N >= 1"))?;
    let lm_iterations: Vec<String> = fused.iter().map(|&f| greedy_text(g.value(f), &vocab)).collect();
    Ok(TraceRow {
        final_prediction: lm_iterations.last().cloned().unwrap_or_default(),
        vm_iterations,
        lm_iterations,
    })
}
