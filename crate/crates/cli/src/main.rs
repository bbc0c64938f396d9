//! `aaac` command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use aaac::eval::{compare, evaluate_packed, EvalReport};
use aaac::learn::learn;
use aaac::pack::{pack, unpack, PackedModel};
use aaac::quant::{if4_layer, rtn_layer};
use aaac::tensor::WeightDistribution;
use aaac::{
    load_tensor_archive, save_tensor_archive, synth_layer, AaacConfig, BaseFormat, LayerBundle,
    Method, ScaleMode, SynthSpec,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

#[derive(Parser)]
#[command(
    name = "aaac",
    version,
    about = "Activation-aware adaptive codebook 4-bit weight quantization"
)]
struct Cli {
    /// Worker threads for per-layer work (AAAC_THREADS overrides; default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic safetensors archive (weights + calibration activations)
    Synth(SynthArgs),
    /// Quantize every layer of an archive into an .aaacq file
    Quantize(QuantizeArgs),
    /// Expand an .aaacq file back to f32 weights in a safetensors archive
    Dequantize(DequantizeArgs),
    /// Evaluate an .aaacq file against its source archive
    Eval(EvalArgs),
    /// Run several methods on an archive (or a synthetic suite) and report
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    Gaussian,
    Laplace,
    Mixture,
    /// Cycle gaussian, laplace, mixture across layers
    Mixed,
}

#[derive(Args)]
struct SuiteArgs {
    /// JSON file holding one synthetic layer spec or a list of them
    #[arg(long, conflicts_with_all = ["layers", "rows", "cols", "tokens", "dist"])]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Output features N
    #[arg(long, default_value_t = 64)]
    rows: usize,
    /// Input features K
    #[arg(long, default_value_t = 256)]
    cols: usize,
    /// Calibration tokens T
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, value_enum, default_value_t = Dist::Mixed)]
    dist: Dist,
    /// Base seed; layer i uses seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantArgs {
    /// nvfp4 or int4
    #[arg(long, default_value = "nvfp4")]
    format: BaseFormat,
    /// Scale group size (default: 16 for nvfp4, 128 for int4)
    #[arg(short = 'g', long = "group-size")]
    g: Option<usize>,
    /// Selection group size (default: g)
    #[arg(short = 'S', long = "selection-size")]
    s: Option<usize>,
    #[arg(long, default_value_t = AaacConfig::DEFAULT_OUTER)]
    iters_outer: usize,
    #[arg(long, default_value_t = AaacConfig::DEFAULT_INNER)]
    iters_inner: usize,
    /// exact-bf16 or emulate-e4m3
    #[arg(long, default_value = "exact-bf16")]
    scale_mode: ScaleMode,
}

impl QuantArgs {
    fn config(&self) -> AaacConfig {
        let g = self.g.unwrap_or(self.format.default_group_size());
        let mut cfg = AaacConfig::for_format(self.format)
            .with_groups(g, self.s.unwrap_or(g))
            .with_iterations(self.iters_outer, self.iters_inner);
        cfg.scale_mode = self.scale_mode;
        cfg
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Emit the full report as JSON
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    /// Emit one CSV row per layer and method
    #[arg(long)]
    csv: bool,
    /// Write the report here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ReportArgs {
    fn emit(&self, report: &EvalReport) -> Result<()> {
        let text = if self.json {
            report.to_json() + "\n"
        } else if self.csv {
            report.to_csv()
        } else {
            report.to_text()
        };
        match &self.out {
            Some(path) => {
                std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
            }
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input safetensors archive
    #[arg(long)]
    archive: PathBuf,
    /// Output .aaacq file
    #[arg(long)]
    out: PathBuf,
    /// rtn, if4 or aaac
    #[arg(long, default_value = "aaac")]
    method: Method,
    #[command(flatten)]
    quant: QuantArgs,
}

#[derive(Args)]
struct DequantizeArgs {
    #[arg(long)]
    pack: PathBuf,
    /// Output safetensors archive (f32 `<layer>.weight` tensors)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pack: PathBuf,
    /// Source archive the pack was quantized from
    #[arg(long)]
    archive: PathBuf,
    /// Feed FP8 (E4M3) per-tensor quantized activations to the quantized layer
    #[arg(long)]
    w4a8: bool,
    #[command(flatten)]
    report: ReportArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Input archive; without it a synthetic suite is generated from the suite flags
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Comma-separated subset of rtn, if4, aaac
    #[arg(long, value_delimiter = ',', default_value = "rtn,if4,aaac")]
    methods: Vec<String>,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long)]
    w4a8: bool,
    #[command(flatten)]
    report: ReportArgs,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    let start = Instant::now();
    match cli.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::Quantize(a) => cmd_quantize(a)?,
        Command::Dequantize(a) => cmd_dequantize(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Compare(a) => cmd_compare(a)?,
    }
    eprintln!("done in {:.3} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let threads = match std::env::var("AAAC_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .with_context(|| format!("AAAC_THREADS=`{v}` is not a count"))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn suite_specs(a: &SuiteArgs) -> Result<Vec<SynthSpec>> {
    if let Some(path) = &a.config {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let specs: Vec<SynthSpec> = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            vec![serde_json::from_value(value)?]
        };
        return Ok(specs);
    }
    if a.layers == 0 {
        bail!("--layers must be at least 1");
    }
    Ok((0..a.layers)
        .map(|i| {
            let kind = match a.dist {
                Dist::Mixed => [Dist::Gaussian, Dist::Laplace, Dist::Mixture][i % 3],
                d => d,
            };
            let distribution = match kind {
                Dist::Gaussian => WeightDistribution::Gaussian { sigma: 1.0 },
                Dist::Laplace => WeightDistribution::Laplace { scale: 1.0 },
                _ => WeightDistribution::Mixture {
                    weights: vec![0.9, 0.1],
                    sigmas: vec![1.0, 6.0],
                },
            };
            SynthSpec {
                name: format!("layer{i:02}"),
                distribution,
                rows: a.rows,
                cols: a.cols,
                tokens: a.tokens,
                seed: a.seed.wrapping_add(i as u64),
            }
        })
        .collect())
}

fn synth_suite(a: &SuiteArgs) -> Result<Vec<LayerBundle>> {
    let mut bundles = suite_specs(a)?
        .iter()
        .map(|s| synth_layer(s).with_context(|| format!("synthesizing `{}`", s.name)))
        .collect::<Result<Vec<_>>>()?;
    bundles.sort_by(|x, y| x.name.cmp(&y.name));
    if let Some(w) = bundles.windows(2).find(|w| w[0].name == w[1].name) {
        bail!("duplicate synthetic layer name `{}`", w[0].name);
    }
    Ok(bundles)
}

fn load(path: &Path) -> Result<Vec<LayerBundle>> {
    let bundles =
        load_tensor_archive(path).with_context(|| format!("loading {}", path.display()))?;
    if bundles.is_empty() {
        bail!("{} holds no `.weight` tensors", path.display());
    }
    eprintln!("loaded {} layers from {}", bundles.len(), path.display());
    Ok(bundles)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let bundles = synth_suite(&a.suite)?;
    save_tensor_archive(&a.out, &bundles)
        .with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "wrote {} synthetic layers to {}",
        bundles.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let cfg = a.quant.config();
    cfg.check()?;
    let bundles = load(&a.archive)?;
    let method = a.method;
    let layers = bundles
        .par_iter()
        .map(|b| -> Result<(String, aaac::PackedLayer)> {
            let t = Instant::now();
            let q = match method {
                Method::Rtn => rtn_layer(&b.weights, cfg.format, cfg.g, cfg.scale_mode),
                Method::If4 => if4_layer(&b.weights, cfg.g),
                Method::Aaac => learn(b, &cfg).map(|out| {
                    eprintln!(
                        "  {}: objective {:.6e} -> {:.6e} ({} groups on table 1 of {})",
                        b.name,
                        out.initial_t0_objective,
                        out.final_objective(),
                        out.layer.selection.count_ones(),
                        out.layer.selection.len()
                    );
                    out.layer
                }),
            }
            .and_then(|q| pack(&q))
            .with_context(|| format!("quantizing layer `{}`", b.name))?;
            eprintln!(
                "  {}: {} in {:.3} s",
                b.name,
                method,
                t.elapsed().as_secs_f64()
            );
            Ok((b.name.clone(), q))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = PackedModel::new(layers)?;
    model
        .write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "wrote {} layers ({} bytes) to {}",
        model.layers.len(),
        model.byte_len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_dequantize(a: DequantizeArgs) -> Result<()> {
    let model =
        PackedModel::read(&a.pack).with_context(|| format!("reading {}", a.pack.display()))?;
    let bundles = model
        .layers
        .iter()
        .map(|(name, p)| -> Result<LayerBundle> {
            let w = unpack(p)
                .and_then(|q| q.dequantize())
                .with_context(|| format!("decoding layer `{name}`"))?;
            Ok(LayerBundle::new(name.clone(), w, None)?)
        })
        .collect::<Result<Vec<_>>>()?;
    save_tensor_archive(&a.out, &bundles)
        .with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} layers to {}", bundles.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model =
        PackedModel::read(&a.pack).with_context(|| format!("reading {}", a.pack.display()))?;
    let bundles = load(&a.archive)?;
    let report = evaluate_packed(&model, &bundles, a.w4a8)?;
    a.report.emit(&report)
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<aaac::Result<Vec<_>>>()?;
    let cfg = a.quant.config();
    cfg.check()?;
    let bundles = match &a.archive {
        Some(path) => load(path)?,
        None => {
            let b = synth_suite(&a.suite)?;
            eprintln!("synthesized {} layers (seed {})", b.len(), a.suite.seed);
            b
        }
    };
    let report = compare(&bundles, &methods, &cfg, a.w4a8)?;
    a.report.emit(&report)
}
