//! `ptq`: calibrate, apply and compare post-training quantization on
//! `QYM1` models with `QYT1` sample directories.

mod io;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ptq_core::exec::execute_all;
use ptq_core::histogram::observe_uh_traced;
use ptq_core::quant::fake_quantize;
use ptq_core::toy::generate_toy;
use ptq_core::{calibrate, evaluate, CalibConfig, EvalMetrics, QuantAssignment, QuantMode, Scheme, Tensor};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Calibration(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Calibration(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Calibration(m) => m,
        }
    }
}

fn calib_err(e: ptq_core::QuantError) -> CliError {
    CliError::Calibration(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ptq", version, about = "Post-training quantization calibration and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate clipping ranges; writes assignment.json and report.json.
    Calibrate,
    /// Bake a saved assignment's weight quantization into a new model.
    Quantize {
        /// Assignment JSON written by `calibrate`.
        #[arg(long)]
        assignment: PathBuf,
    },
    /// Compare a saved assignment against full precision; writes eval.json.
    Evaluate {
        /// Assignment JSON written by `calibrate`.
        #[arg(long)]
        assignment: PathBuf,
    },
    /// Run every scheme at each bit-width; writes compare.csv and compare.json.
    Compare {
        /// Bit-widths used for both weights and activations.
        #[arg(long, value_delimiter = ',', default_value = "4,6,8", value_parser = parse_bits)]
        bits: Vec<u32>,
        /// Cross-check searches and convolutions against brute-force references.
        #[arg(long)]
        audit: bool,
    },
    /// Dump one node's activation histogram; writes histogram.csv.
    InspectHistogram {
        /// Node whose output is histogrammed.
        #[arg(long)]
        node: String,
        /// Also write the search trace to trace.json.
        #[arg(long)]
        trace: bool,
    },
    /// Write the seeded toy model with calibration and evaluation samples.
    GenToy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Minmax,
    Percentile,
    Mse,
    Uh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    WeightsOnly,
    ActivationOnly,
    Both,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Model description (QYM1 JSON).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Weight blob referenced by the model.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Directory of calibration samples (sample_NNNN.qyt).
    #[arg(long, global = true)]
    calib_dir: Option<PathBuf>,
    /// Directory of evaluation samples (sample_NNNN.qyt).
    #[arg(long, global = true)]
    eval_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for synthetic data; recorded in every report.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Weight bit-width (2..=8, or 32 for full precision).
    #[arg(long, global = true, default_value_t = 8, value_parser = parse_bits)]
    bits_w: u32,
    /// Activation bit-width (2..=8, or 32 for full precision).
    #[arg(long, global = true, default_value_t = 8, value_parser = parse_bits)]
    bits_a: u32,
    /// Activation range observer.
    #[arg(long, global = true, value_enum, default_value_t = SchemeArg::Uh)]
    scheme: SchemeArg,
    /// Signed symmetric activation codes instead of unsigned asymmetric.
    #[arg(long, global = true)]
    act_symmetric: bool,
    /// Which tensors are quantized.
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    /// Keep the first and last conv in full precision.
    #[arg(long, global = true, value_enum, default_value_t = Switch::On)]
    skip_first_last: Switch,
    /// Central mass kept by the percentile observer, in (0, 1].
    #[arg(long, global = true, default_value_t = 0.9999)]
    percentile_keep: f64,
    /// Candidate count of the MSE range search.
    #[arg(long, global = true, default_value_t = 100)]
    mse_grid_steps: usize,
    /// Fixed lower bound of the histogram search.
    #[arg(long, global = true, default_value_t = ptq_core::SILU_LOWER_BOUND, allow_negative_numbers = true)]
    uh_fixed_lower: f32,
    /// Merged levels of the histogram search.
    #[arg(long, global = true, default_value_t = 128)]
    uh_levels: usize,
    /// First prefix length tried by the histogram search.
    #[arg(long, global = true, default_value_t = 128)]
    uh_start_index: usize,
    /// Maximum number of calibration samples used.
    #[arg(long, global = true, default_value_t = 1500)]
    calib_sample_limit: usize,
}

fn parse_bits(s: &str) -> Result<u32, String> {
    let b: u32 = s.parse().map_err(|_| format!("{s:?} is not an integer"))?;
    if (2..=8).contains(&b) || b == 32 {
        Ok(b)
    } else {
        Err(format!("{b} is outside 2..=8 and is not 32"))
    }
}

impl GlobalArgs {
    fn config(&self) -> Result<CalibConfig, CliError> {
        let mut cfg = CalibConfig {
            weight_bits: self.bits_w,
            act_bits: self.bits_a,
            act_symmetric: self.act_symmetric,
            mode: match self.mode {
                ModeArg::WeightsOnly => QuantMode::WeightsOnly,
                ModeArg::ActivationOnly => QuantMode::ActivationOnly,
                ModeArg::Both => QuantMode::Both,
            },
            skip_first_last: self.skip_first_last == Switch::On,
            calib_sample_limit: self.calib_sample_limit,
            ..CalibConfig::default()
        };
        let o = &mut cfg.act_observer;
        o.scheme = match self.scheme {
            SchemeArg::Minmax => Scheme::MinMax,
            SchemeArg::Percentile => Scheme::Percentile,
            SchemeArg::Mse => Scheme::Mse,
            SchemeArg::Uh => Scheme::Uh,
        };
        o.percentile_keep = self.percentile_keep;
        o.mse_grid_steps = self.mse_grid_steps;
        o.uh_fixed_lower = self.uh_fixed_lower;
        o.uh_levels = self.uh_levels;
        o.uh_start_index = self.uh_start_index;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    v.as_deref().ok_or_else(|| CliError::Usage(format!("{flag} is required for this subcommand")))
}

/// Paths every subcommand may touch, checked before any work starts.
struct Inputs<'a> {
    model: &'a Path,
    weights: &'a Path,
    out: &'a Path,
}

fn inputs(g: &GlobalArgs) -> Result<Inputs<'_>, CliError> {
    Ok(Inputs { model: required(&g.model, "--model")?, weights: required(&g.weights, "--weights")?, out: required(&g.out, "--out")? })
}

#[derive(Serialize)]
struct EvalReport<'a> {
    seed: u64,
    #[serde(flatten)]
    metrics: &'a EvalMetrics,
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let g = &cli.global;
    let cfg = g.config()?;
    match &cli.command {
        Command::GenToy => {
            let out = required(&g.out, "--out")?;
            let toy = generate_toy(g.seed);
            io::write_model(out, &toy.model, &toy.weights)?;
            io::write_samples(&out.join(io::CALIB_DIR), &toy.calib)?;
            io::write_samples(&out.join(io::EVAL_DIR), &toy.eval)?;
            Ok(format!(
                "wrote toy model (seed {}) with {} calibration and {} evaluation samples to {}",
                g.seed,
                toy.calib.len(),
                toy.eval.len(),
                out.display()
            ))
        }
        Command::Calibrate => {
            let p = inputs(g)?;
            let calib_dir = required(&g.calib_dir, "--calib-dir")?;
            let (model, weights) = io::load_model(p.model, p.weights)?;
            let calib = io::load_samples(calib_dir)?;
            let cal = calibrate(&model, &weights, &calib, &cfg).map_err(calib_err)?;
            let mut report = cal.report;
            report.seed = Some(g.seed);
            report.wall_time_ms = None;
            io::write_atomic(&p.out.join("assignment.json"), io::to_json(&cal.assignment).as_bytes())?;
            io::write_atomic(&p.out.join("report.json"), report.to_json().as_bytes())?;
            Ok(format!(
                "calibrated {} nodes on {} samples: output cosine {:.6}, output mse {:.6e}",
                report.nodes.len(),
                report.calib_samples,
                report.output_cosine,
                report.output_mse
            ))
        }
        Command::Quantize { assignment } => {
            let p = inputs(g)?;
            let (model, mut weights) = io::load_model(p.model, p.weights)?;
            let qa: QuantAssignment = io::read_json(assignment)?;
            qa.validate(&model).map_err(calib_err)?;
            let mut baked = 0;
            for (id, w) in weights.convs.iter_mut() {
                if let Some(qp) = qa.weight_qp(id) {
                    w.kernel = fake_quantize(&w.kernel, qp).map_err(calib_err)?;
                    baked += 1;
                }
            }
            io::write_model(p.out, &model, &weights)?;
            Ok(format!("quantized weights of {baked} convs into {}", p.out.display()))
        }
        Command::Evaluate { assignment } => {
            let p = inputs(g)?;
            let eval_dir = required(&g.eval_dir, "--eval-dir")?;
            let (model, weights) = io::load_model(p.model, p.weights)?;
            let qa: QuantAssignment = io::read_json(assignment)?;
            let eval = io::load_samples(eval_dir)?;
            let m = evaluate(&model, &weights, &qa, &eval).map_err(calib_err)?;
            let report = EvalReport { seed: g.seed, metrics: &m };
            io::write_atomic(&p.out.join("eval.json"), io::to_json(&report).as_bytes())?;
            Ok(format!("evaluated {} samples: output cosine {:.6}, output mse {:.6e}", m.samples, m.output_cosine, m.output_mse))
        }
        Command::Compare { bits, audit } => {
            let p = inputs(g)?;
            let calib_dir = required(&g.calib_dir, "--calib-dir")?;
            let eval_dir = required(&g.eval_dir, "--eval-dir")?;
            let (model, weights) = io::load_model(p.model, p.weights)?;
            let calib = io::load_samples(calib_dir)?;
            let eval = io::load_samples(eval_dir)?;
            let mut cmp = ptq_core::compare::compare_schemes(&model, &weights, &calib, &eval, bits, &cfg, *audit)
                .map_err(calib_err)?;
            cmp.seed = Some(g.seed);
            let csv = cmp.to_csv();
            io::write_atomic(&p.out.join("compare.csv"), csv.as_bytes())?;
            io::write_atomic(&p.out.join("compare.json"), cmp.to_json().as_bytes())?;
            if let Some(a) = cmp.audit.as_ref().filter(|a| !a.passed()) {
                return Err(CliError::Calibration(format!(
                    "audit found mismatches: uh {:?}, mse {:?}, conv {:?}",
                    a.uh_mismatches, a.mse_mismatches, a.conv_mismatches
                )));
            }
            Ok(csv.trim_end().to_string())
        }
        Command::InspectHistogram { node, trace } => {
            let p = inputs(g)?;
            let calib_dir = required(&g.calib_dir, "--calib-dir")?;
            let (model, weights) = io::load_model(p.model, p.weights)?;
            if model.node(node).is_none() {
                return Err(CliError::Usage(format!("unknown node {node:?}")));
            }
            let calib = io::load_samples(calib_dir)?;
            let limit = calib.len().min(cfg.calib_sample_limit);
            let acts: Vec<Tensor> = calib[..limit]
                .iter()
                .map(|x| {
                    let all = execute_all(&model, &weights, x, None)?;
                    Ok(all.by_id(&model, node).expect("node checked above").clone())
                })
                .collect::<ptq_core::Result<_>>()
                .map_err(calib_err)?;
            let max = acts.iter().flat_map(|t| t.data()).copied().fold(f32::NEG_INFINITY, f32::max);
            let obs = observe_uh_traced(acts.iter(), &cfg.act_observer, max).map_err(calib_err)?;
            let h = &obs.histogram;
            let mut csv = String::from("bin_index,left_edge,count\n");
            for (j, c) in h.counts().iter().enumerate() {
                writeln!(csv, "{j},{},{c}", h.left_edge(j)).expect("write to String");
            }
            writeln!(csv, "clamped_low,,{}", h.clamped_low()).expect("write to String");
            io::write_atomic(&p.out.join("histogram.csv"), csv.as_bytes())?;
            if *trace {
                io::write_atomic(&p.out.join("trace.json"), io::to_json(&obs.trace).as_bytes())?;
            }
            Ok(format!(
                "{node}: {} values, range ({}, {}), best index {}",
                h.total(),
                obs.range.lower,
                obs.range.upper,
                obs.trace.best_index
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ptq: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
