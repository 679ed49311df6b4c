//! Command implementations behind the `itervm` binary.
//!
//! Each command returns the text it would print on stdout, so tests can run
//! commands in-process.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use itervm::checkpoint;
use itervm::config::{Objective, RunConfig};
use itervm::datagen::{self, Sample};
use itervm::flops::count_flops_params;
use itervm::training::{self, EvalMode, EvalReport, TraceRow};
use itervm::{Error, IterNet, Result};

#[derive(Debug, Parser)]
#[command(name = "itervm", version, about = "Iterative vision/language text recognition at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Show every intermediate prediction for an image or dataset.
    Trace(TraceArgs),
    /// Report multiply-accumulates and parameter counts.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Vm,
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log path (default: `<out>.metrics.tsv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long = "iterations-vm")]
    pub iterations_vm: Option<usize>,
    #[arg(long = "iterations-lm")]
    pub iterations_lm: Option<usize>,
    /// Attach losses to the last vision iteration only.
    #[arg(long = "no-intermediate-supervision")]
    pub no_intermediate_supervision: bool,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "max-steps")]
    pub max_steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    VmOnly,
    Full,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    /// Emit JSON instead of TSV.
    #[arg(long)]
    pub json: bool,
    /// Write per-sample results (TSV) to this path.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Also decode every vision iteration and report its accuracy.
    #[arg(long = "per-iteration")]
    pub per_iteration: bool,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Largest vision iteration count reported.
    #[arg(long = "max-n", default_value_t = 4)]
    pub max_n: usize,
    #[arg(long)]
    pub json: bool,
}

/// Parses `args` (without the program name) and runs the command.
pub fn run_args<I, S>(args: I) -> std::result::Result<String, String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(std::iter::once("itervm".into()).chain(args.into_iter().map(Into::into)))
        .map_err(|e| e.to_string())?;
    run(cli.command).map_err(|e| e.to_string())
}

pub fn run(command: Command) -> Result<String> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Trace(a) => cmd_trace(&a),
        Command::Flops(a) => cmd_flops(&a),
    }
}

/// Reads and validates a run config; defaults when `path` is `None`.
pub fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            RunConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<String> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(n) = a.n {
        cfg.data.n = n;
    }
    if let Some(seed) = a.seed {
        cfg.data.seed = seed;
    }
    let entries = datagen::generate_dataset(&cfg.data, &cfg.render, &a.out)?;
    Ok(format!("wrote {} samples to {}\n", entries.len(), a.out.display()))
}

fn samples(dir: &Path) -> Result<(Vec<PathBuf>, Vec<Sample>)> {
    Ok(datagen::load_dataset(dir)?.into_iter().map(|l| (l.path, l.sample)).unzip())
}

/// The run config after command-line overrides.
pub fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = read_config(a.config.as_deref())?;
    let n = a.iterations_vm.unwrap_or(cfg.model.encoder.n_iterations);
    let m = a.iterations_lm.unwrap_or(cfg.model.lm.n_iterations);
    cfg.model = cfg.model.with_iterations(n, m);
    if a.no_intermediate_supervision {
        cfg.train.intermediate_supervision = false;
    }
    if let Some(o) = a.objective {
        cfg.train.objective = match o {
            ObjectiveArg::Vm => Objective::Vm,
            ObjectiveArg::Full => Objective::Full,
        };
    }
    if let Some(e) = a.epochs {
        cfg.train.total_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.max_steps {
        cfg.train.max_steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn metrics_path(a: &TrainArgs) -> PathBuf {
    a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.tsv");
        PathBuf::from(p)
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let cfg = train_config(a)?;
    let (_, data) = samples(&a.data)?;
    let mut model = IterNet::new(&cfg.model, cfg.train.seed)?;
    let mpath = metrics_path(a);
    let file = fs::File::create(&mpath).map_err(|e| Error::Io {
        path: mpath.clone(),
        source: e,
    })?;
    let mut log = BufWriter::new(file);
    let summary = training::train(&mut model, &data, &cfg.train, &mut log)?;
    checkpoint::save(&a.out, &cfg, &model.store)?;
    let total = summary.last.map_or(f64::NAN, |l| l.total);
    Ok(format!(
        "trained {} steps, final loss {total:.6}; checkpoint {} metrics {}\n",
        summary.steps,
        a.out.display(),
        mpath.display()
    ))
}

fn report_tsv(r: &EvalReport) -> String {
    let mut s = format!("{}\tall\t{}\t{}\t{:.6}\n", r.mode, r.n_samples, r.n_correct, r.accuracy);
    for row in &r.per_severity {
        s.push_str(&format!(
            "{}\tseverity={}\t{}\t{}\t{:.6}\n",
            r.mode, row.severity, row.n_samples, row.n_correct, row.accuracy
        ));
    }
    for (i, acc) in r.per_iteration.iter().enumerate() {
        s.push_str(&format!("{}\titeration={}\t{}\t-\t{acc:.6}\n", r.mode, i + 1, r.n_samples));
    }
    s
}

pub const RESULTS_HEADER: &str = "mode\tindex\tfile\tlabel\tprediction\tcorrect\tseverity";

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let (_, model) = checkpoint::load_model(&a.checkpoint)?;
    let (paths, data) = samples(&a.data)?;
    let modes: &[EvalMode] = match a.mode {
        ModeArg::VmOnly => &[EvalMode::VmOnly],
        ModeArg::Full => &[EvalMode::Full],
        ModeArg::Both => &[EvalMode::VmOnly, EvalMode::Full],
    };
    let mut reports = Vec::with_capacity(modes.len());
    for &m in modes {
        reports.push(training::evaluate(&model, &data, m, a.per_iteration)?);
    }
    if let Some(path) = &a.results {
        let mut s = format!("{RESULTS_HEADER}\n");
        for r in &reports {
            for x in &r.results {
                let file = paths[x.index].file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
                s.push_str(&format!(
                    "{}\t{}\t{file}\t{}\t{}\t{}\t{}\n",
                    r.mode, x.index, x.label, x.prediction, x.correct as u8, x.severity
                ));
            }
        }
        fs::write(path, s).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    if a.json {
        let slim: Vec<EvalReport> = reports
            .into_iter()
            .map(|mut r| {
                r.results.clear();
                r
            })
            .collect();
        return Ok(to_json(&slim)? + "\n");
    }
    let mut out = String::from("mode\tsubset\tn\tcorrect\taccuracy\n");
    for r in &reports {
        out.push_str(&report_tsv(r));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceEntry {
    pub input: String,
    #[serde(flatten)]
    pub row: TraceRow,
    pub ground_truth: Option<String>,
}

/// One trace entry per input, in dataset order.
pub fn trace_entries(a: &TraceArgs) -> Result<Vec<TraceEntry>> {
    let (_, model) = checkpoint::load_model(&a.checkpoint)?;
    let inputs: Vec<(PathBuf, itervm::Tensor, Option<String>)> = match (&a.image, &a.data) {
        (Some(p), _) => vec![(p.clone(), datagen::read_ppm(p)?, None)],
        (None, Some(d)) => datagen::load_dataset(d)?
            .into_iter()
            .map(|l| (l.path, l.sample.image, Some(l.sample.text)))
            .collect(),
        (None, None) => return Err(Error::Argument("trace needs --image or --data".into())),
    };
    inputs
        .into_iter()
        .map(|(path, image, truth)| {
            Ok(TraceEntry {
                input: path.display().to_string(),
                row: training::trace_image(&model, &image)?,
                ground_truth: truth,
            })
        })
        .collect()
}

pub fn cmd_trace(a: &TraceArgs) -> Result<String> {
    let entries = trace_entries(a)?;
    if a.json {
        return Ok(to_json(&entries)? + "\n");
    }
    let (n, m) = entries
        .first()
        .map_or((0, 0), |e| (e.row.vm_iterations.len(), e.row.lm_iterations.len()));
    let mut out = String::from("input");
    for i in 1..=n {
        out.push_str(&format!("\tvm{i}"));
    }
    for j in 1..=m {
        out.push_str(&format!("\tlm{j}"));
    }
    out.push_str("\tfinal\ttruth\n");
    for e in &entries {
        out.push_str(&e.input);
        for s in e.row.vm_iterations.iter().chain(&e.row.lm_iterations) {
            out.push('\t');
            out.push_str(s);
        }
        out.push_str(&format!(
            "\t{}\t{}\n",
            e.row.final_prediction,
            e.ground_truth.as_deref().unwrap_or("-")
        ));
    }
    Ok(out)
}

pub fn cmd_flops(a: &FlopsArgs) -> Result<String> {
    let cfg = read_config(a.config.as_deref())?;
    let report = count_flops_params(&cfg.model, a.max_n)?;
    if a.json {
        return Ok(to_json(&report)? + "\n");
    }
    let mut out = String::from(
        "n\tencoder_macs\tdecoder_macs\tlm_macs\ttotal_macs_vm_only\ttotal_macs_full\tencoder_params\tdecoder_params\tlm_params\ttotal_params\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.n,
            r.encoder_macs,
            r.decoder_macs,
            r.lm_macs,
            r.total_macs_vm_only,
            r.total_macs_full,
            r.encoder_params,
            r.decoder_params,
            r.lm_params,
            r.total_params
        ));
    }
    Ok(out)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Argument(format!("JSON encoding: {e}")))
}
