use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cfq_core::adaptive::{adaptive_round, write_trace_csv, AdaptiveRoundConfig};
use cfq_core::artifact::Artifact;
use cfq_core::manifest::{write_f32_file, write_f32_matrix, read_f32_matrix, ModelManifest, Role};
use cfq_core::optim::AdamConfig;
use cfq_core::paired::{
    optimize_paired, transformed_relative_pqe, PairedInit, PairedLossKind, PairedOptConfig, PairedOptimizer,
    PairedTransform,
};
use cfq_core::pipeline::{quantize_to_dir, resolve_block_size, Method, PipelineConfig};
use cfq_core::report::{self, write_rows};
use cfq_core::single::{optimize_single, transformed_relative_error, BlockDiagTransform, SingleLossConfig};
use cfq_core::{quantize, relative_error, selfcheck, Axis, DenseMatrix, QuantConfig, Seed};

#[derive(Parser)]
#[command(name = "cfq", version, about = "Calibration-free weight quantization")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize every tensor of a manifest into an artifact directory.
    Quantize(QuantizeArgs),
    /// Decode an artifact back to f32 tensor files plus a manifest.
    Reconstruct {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Undo paired transforms instead of emitting the transformed pair.
        #[arg(long)]
        reverse_paired: bool,
    },
    /// Print aggregate errors and FLOP overhead; optionally write the per-tensor CSV.
    Report {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the built-in correctness checks.
    Selfcheck,
    /// Learn a block-diagonal transform for one tensor.
    LearnSingle(LearnSingleArgs),
    /// Learn a paired transform for one V/O pair.
    LearnPaired(LearnPairedArgs),
    /// Adaptive rounding of one V/O pair, optionally after a stored transform.
    AdaptiveRound(AdaptiveArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON pipeline config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    bits: Option<u8>,
    /// Block size of single transforms, or `none` for one dense block.
    #[arg(long, value_parser = parse_block_size)]
    block_size: Option<BlockSize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quantize_embedding: bool,
}

#[derive(Clone, Copy)]
struct BlockSize(Option<usize>);

fn parse_block_size(s: &str) -> std::result::Result<BlockSize, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(BlockSize(None));
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("expected a positive integer or `none`, got {s:?}")),
        Ok(k) => Ok(BlockSize(Some(k))),
    }
}

#[derive(Args)]
struct PairSelect {
    #[arg(long)]
    manifest: PathBuf,
    /// Layer whose attn_v/attn_o pair to use.
    #[arg(long, conflicts_with_all = ["first", "second"])]
    layer: Option<i64>,
    /// First member by name (contraction side of the pair).
    #[arg(long, requires = "second")]
    first: Option<String>,
    #[arg(long, requires = "first")]
    second: Option<String>,
}

#[derive(Args)]
struct LearnSingleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    tensor: String,
    #[arg(long, default_value_t = 128)]
    block_size: usize,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    hadamard_factors: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the blocks as consecutive row-major f32 matrices.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Lse,
    SumSq,
    SumSqWted,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Cayley,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Identity,
    Rotation,
    Hadamard,
}

#[derive(Args)]
struct LearnPairedArgs {
    #[command(flatten)]
    pair: PairSelect,
    #[arg(long, value_enum, default_value = "lse")]
    loss: LossArg,
    /// Log-sum-exp temperature.
    #[arg(long, default_value_t = 5.0)]
    t: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Adam β₁, or the Cayley momentum.
    #[arg(long, default_value_t = 0.1)]
    momentum: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    #[arg(long, value_enum, default_value = "identity")]
    init: InitArg,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write M as a row-major f32 matrix.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptiveArgs {
    #[command(flatten)]
    pair: PairSelect,
    /// Paired transform M (row-major f32, h×h) applied before rounding.
    #[arg(long)]
    transform: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn quantize_cmd(a: QuantizeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(b) = a.bits {
        cfg.quant.bits = b;
        cfg.single.bits = b;
        cfg.paired.track_quant.bits = b;
    }
    if let Some(BlockSize(k)) = a.block_size {
        cfg.block_size = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = Seed(s);
    }
    cfg.quantize_embedding |= a.quantize_embedding;
    cfg.validate()?;

    let artifact = quantize_to_dir(&a.manifest, &cfg, &a.out)?;
    let rows = artifact.reports();
    let csv = a.out.join("report.csv");
    report::write_csv(&rows, create(&csv)?)?;
    print!("{}", report::summary(&rows));
    println!(
        "wrote {} tensors to {} (report: {})",
        rows.len(),
        a.out.display(),
        csv.display()
    );
    Ok(())
}

fn load_canonical(manifest: &Path, name: &str) -> Result<(DenseMatrix, ModelManifest)> {
    let (m, base) = ModelManifest::load(manifest)?;
    let entry = m
        .tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| anyhow!("no tensor named {name:?} in {}", manifest.display()))?;
    let w = entry.to_canonical(m.load_tensor(&base, entry)?);
    Ok((w, m))
}

/// Canonical `(W₁, W₂)` for the selected pair.
fn load_pair(sel: &PairSelect) -> Result<(DenseMatrix, DenseMatrix, String)> {
    let (m, base) = ModelManifest::load(&sel.manifest)?;
    let (first, second) = match (&sel.layer, &sel.first, &sel.second) {
        (Some(layer), _, _) => {
            let (pairs, _) = m.vo_pairs();
            let p = pairs
                .iter()
                .find(|p| m.tensors[p.v].layer_index == *layer)
                .ok_or_else(|| anyhow!("layer {layer} has no conformable attn_v/attn_o pair"))?;
            (p.v, p.o)
        }
        (None, Some(f), Some(s)) => {
            let idx = |n: &str| {
                m.tensors
                    .iter()
                    .position(|t| t.name == n)
                    .ok_or_else(|| anyhow!("no tensor named {n:?}"))
            };
            (idx(f)?, idx(s)?)
        }
        _ => bail!("select a pair with --layer or with --first and --second"),
    };
    let load = |i: usize| -> Result<DenseMatrix> {
        let e = &m.tensors[i];
        Ok(e.to_canonical(m.load_tensor(&base, e)?))
    };
    let (w1, w2) = (load(first)?, load(second)?);
    if w1.cols() != w2.rows() {
        bail!(
            "{} and {} are not conformable: {:?} vs {:?}",
            m.tensors[first].name,
            m.tensors[second].name,
            w1.shape(),
            w2.shape()
        );
    }
    if m.tensors[first].role != Role::AttnV || m.tensors[second].role != Role::AttnO {
        log::warn!("pairing tensors that are not an attn_v/attn_o pair");
    }
    Ok((w1, w2, format!("{} / {}", m.tensors[first].name, m.tensors[second].name)))
}

fn learn_single_cmd(a: LearnSingleArgs) -> Result<()> {
    let (w, _) = load_canonical(&a.manifest, &a.tensor)?;
    let k = resolve_block_size(w.rows(), Some(a.block_size));
    if k != a.block_size {
        log::warn!("block size {} does not divide {}; using {k}", a.block_size, w.rows());
    }
    let cfg = SingleLossConfig {
        bits: a.bits,
        adam: AdamConfig::new(a.lr),
        iterations: a.iterations,
        hadamard_factors: a.hadamard_factors,
        ..SingleLossConfig::default()
    };
    let q = QuantConfig::per_channel(a.bits, Axis::Rows);
    let out = optimize_single(&w, k, &cfg, Seed(a.seed))?;
    let plain = relative_error(&w, &quantize(&w, &q)?.dequantize())?;
    let init = BlockDiagTransform::init_composed(w.rows(), k, Seed(a.seed), a.hadamard_factors)?;
    let rotated = transformed_relative_error(&w, &init, &q)?;
    let learned = transformed_relative_error(&w, &out.transform, &q)?;
    println!("tensor {} {:?}, block size {k}", a.tensor, w.shape());
    println!("surrogate loss      {:.6e} -> {:.6e}", out.initial_loss, out.final_loss);
    println!("relative error      plain {plain:.6}  init {rotated:.6}  learned {learned:.6}");
    if let Some(p) = &a.out {
        let blocks = out.transform.rounded_to_f32()?;
        write_f32_file(p, blocks.blocks().iter().flat_map(|b| b.data().iter().map(|&x| x as f32)))?;
        println!("wrote {} blocks of {k}x{k} to {}", blocks.blocks().len(), p.display());
    }
    if let Some(p) = &a.trace {
        write_rows(&out.trace, create(p)?)?;
    }
    Ok(())
}

fn learn_paired_cmd(a: LearnPairedArgs) -> Result<()> {
    let (w1, w2, label) = load_pair(&a.pair)?;
    let kind = match a.loss {
        LossArg::Lse => PairedLossKind::LogSumExp { t: a.t },
        LossArg::SumSq => PairedLossKind::SumSq,
        LossArg::SumSqWted => PairedLossKind::SumSqWted,
    };
    let optimizer = match a.optimizer {
        OptimizerArg::Adam => PairedOptimizer::Adam(AdamConfig::new(a.lr).with_beta1(a.momentum)),
        OptimizerArg::Cayley => PairedOptimizer::CayleySgd {
            lr: a.lr,
            momentum: a.momentum,
        },
    };
    let cfg = PairedOptConfig {
        optimizer,
        lambda_orth: a.lambda,
        iterations: a.iterations,
        checkpoint_every: a.checkpoint_every,
        track_quant: QuantConfig::per_channel(a.bits, Axis::Rows),
        init: match a.init {
            InitArg::Identity => PairedInit::Identity,
            InitArg::Rotation => PairedInit::RandomRotation,
            InitArg::Hadamard => PairedInit::Hadamard,
        },
    };
    info!("learning paired transform for {label}");
    let out = optimize_paired(&w1, &w2, &cfg, kind, Seed(a.seed))?;
    let stored = out.transform.rounded_to_f32()?;
    let pqe = transformed_relative_pqe(&w1, &w2, &stored, &cfg.track_quant)?;
    println!("pair {label}, h = {}", w1.cols());
    println!("relative PQE        initial {:.6}  learned {pqe:.6}", out.initial_relative_pqe);
    println!("{}", serde_json::to_string_pretty(&out.transform.provenance)?);
    if let Some(p) = &a.out {
        write_f32_matrix(p, stored.matrix())?;
        println!("wrote M to {}", p.display());
    }
    if let Some(p) = &a.trace {
        write_rows(&out.trace, create(p)?)?;
    }
    Ok(())
}

fn adaptive_cmd(a: AdaptiveArgs) -> Result<()> {
    let (mut w1, mut w2, label) = load_pair(&a.pair)?;
    let exact_norm = w1.matmul(&w2)?.frobenius();
    if let Some(p) = &a.transform {
        let h = w1.cols();
        let t = PairedTransform::from_matrix(read_f32_matrix(p, h, h)?)?;
        (w1, w2) = t.apply(&w1, &w2)?;
    }
    let mut cfg = AdaptiveRoundConfig::with_quantizer(a.iterations, QuantConfig::per_channel(a.bits, Axis::Rows));
    cfg.early_stop = !a.no_early_stop;
    let out = adaptive_round(&w1, &w2, &cfg)?;
    let rel = |x: f64| if exact_norm > 0.0 { x / exact_norm } else { x };
    println!("pair {label}");
    println!(
        "relative PQE        independent {:.6}  adaptive {:.6} (best step {})",
        rel(out.independent_pqe),
        rel(out.pqe),
        out.best_step
    );
    if let Some(note) = &out.note {
        println!("note: {note}");
    }
    if let Some(p) = &a.trace {
        write_trace_csv(&out.trace, create(p)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Quantize(a) => quantize_cmd(a)?,
        Command::Reconstruct {
            artifact,
            out,
            reverse_paired,
        } => {
            let art = Artifact::read(&artifact)?;
            let m = art.write_reconstruction(&out, reverse_paired)?;
            println!("wrote {} tensors to {}", m.tensors.len(), out.display());
        }
        Command::Report { artifact, csv } => {
            let header = Artifact::read_header(&artifact)?;
            let rows: Vec<_> = header.tensors.iter().map(|t| t.report.clone()).collect();
            println!("model {} ({}, seed {})", header.model_name, header.method.label(), header.seed.0);
            print!("{}", report::summary(&rows));
            if let Some(p) = csv {
                report::write_csv(&rows, create(&p)?)?;
            }
        }
        Command::Selfcheck => {
            let r = selfcheck::run();
            print!("{r}");
            if !r.passed() {
                for c in r.failures() {
                    eprintln!("selfcheck failed: {}", c.name);
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::LearnSingle(a) => learn_single_cmd(a)?,
        Command::LearnPaired(a) => learn_paired_cmd(a)?,
        Command::AdaptiveRound(a) => adaptive_cmd(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
