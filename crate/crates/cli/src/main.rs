use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mattekit::dgm::{heatmap, response_map, Normalize};
use mattekit::harness::ablate::{ablate, loss_variants, module_variants, Variant};
use mattekit::harness::checkpoint;
use mattekit::harness::config::parse_override;
use mattekit::harness::train::{apply_trimap, train, TrainOptions};
use mattekit::harness::ExperimentConfig;
use mattekit::metrics::{self, MetricParams, MetricReport};
use mattekit::net::Network;
use mattekit::pngio::{self, AlphaDepth};
use mattekit::synth::{synthesize_dataset, DatasetManifest};
use mattekit::trimap;

#[derive(Parser)]
#[command(
    name = "mattekit",
    version,
    about = "Trimap-based alpha matting: data, training and scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic foreground/background dataset and its manifest.
    Synth(SynthArgs),
    /// Derive a trimap from an alpha matte.
    Trimap(TrimapArgs),
    /// Render the Gaussian loss-weighting map of an alpha matte as a heatmap.
    DgmMap(DgmMapArgs),
    /// Train a model; writes checkpoints, loss CSV, predictions and metrics.
    Train(TrainArgs),
    /// Score predictions against a manifest.
    Eval(EvalArgs),
    /// Predict alpha mattes for every manifest entry from a checkpoint.
    Infer(InferArgs),
    /// Train a set of variants over several seeds and tabulate the results.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and the whole network.
    Gradcheck(GradcheckArgs),
}

/// Options shared by commands that read an experiment config.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file (dotted keys select sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable, applied after every flag.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, flags: Vec<(String, String)>) -> Result<ExperimentConfig> {
        let mut overrides = flags;
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        let config = match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides)?,
            None => ExperimentConfig::from_parts(None, &overrides)?,
        };
        Ok(config)
    }
}

fn flag<T: ToString>(out: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.to_string()));
    }
}

fn path_value(p: &Path) -> String {
    // Quoted so the override parser reads it as a string.
    format!("{:?}", p.display().to_string())
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_fg: Option<usize>,
    #[arg(long)]
    bgs_per_fg: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrimapMethod {
    Morphology,
    Distance,
}

#[derive(Args)]
struct TrimapArgs {
    #[arg(long)]
    alpha: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "morphology")]
    method: TrimapMethod,
    /// Odd square structuring-element side, for `morphology`.
    #[arg(long, default_value_t = 11)]
    kernel: usize,
    /// Band radius in pixels, for `distance`.
    #[arg(long, default_value_t = 5.0)]
    radius: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizeArg {
    RawPdf,
    PeakOne,
}

#[derive(Args)]
struct DgmMapArgs {
    #[arg(long)]
    alpha: PathBuf,
    #[arg(long)]
    sigma2: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    #[arg(long, value_enum, default_value = "raw-pdf")]
    normalize: NormalizeArg,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train on an existing dataset instead of synthesizing one.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<id>.png` predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Per-image CSV report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config the checkpoint was trained with; defaults to the run's
    /// `config.snapshot` next to its `checkpoints` directory.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantSet {
    Losses,
    Modules,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Built-in variant set.
    #[arg(long, value_enum)]
    variants: Option<VariantSet>,
    /// Custom variant `name:key=value,key=value`; repeatable.
    #[arg(long = "variant")]
    custom: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut flags = Vec::new();
    flag(&mut flags, "data.num_fg", a.num_fg);
    flag(&mut flags, "data.bgs_per_fg", a.bgs_per_fg);
    flag(&mut flags, "data.size", a.size);
    let config = a.config.load(flags)?;
    let manifest = synthesize_dataset(&config.data.synth_config(), &a.out, a.seed)?;
    println!("wrote {} entries to {}", manifest.len(), a.out.display());
    Ok(())
}

fn run_trimap(a: TrimapArgs) -> Result<()> {
    let alpha = pngio::read_alpha(&a.alpha)?;
    let t = match a.method {
        TrimapMethod::Morphology => trimap::from_alpha_morphology(&alpha, a.kernel)?,
        TrimapMethod::Distance => trimap::from_alpha_distance(&alpha, a.radius)?,
    };
    pngio::write_trimap(&a.out, &t)?;
    let [bg, unknown, fg] = t.histogram();
    println!("background {bg} unknown {unknown} foreground {fg}");
    Ok(())
}

fn run_dgm_map(a: DgmMapArgs) -> Result<()> {
    let alpha = pngio::read_alpha(&a.alpha)?;
    let normalize = match a.normalize {
        NormalizeArg::RawPdf => Normalize::RawPdf,
        NormalizeArg::PeakOne => Normalize::PeakOne,
    };
    let map = response_map(&alpha, a.mu, a.sigma2, normalize)?;
    pngio::write_alpha(&a.out, &heatmap(&map)?, AlphaDepth::Sixteen)?;
    Ok(())
}

fn print_report(label: &str, r: &MetricReport) {
    println!(
        "{label}: SAD {:.4}  MSE {:.6}  Grad {:.4}  Conn {:.4}  (unknown pixels {})",
        r.sad, r.mse, r.grad, r.conn, r.unknown_pixel_count
    );
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut flags = vec![("seed".to_string(), a.seed.to_string())];
    flag(&mut flags, "out_dir", a.out.as_deref().map(path_value));
    flag(&mut flags, "epochs", a.epochs);
    flag(&mut flags, "batch_size", a.batch_size);
    flag(&mut flags, "optimizer.lr_init", a.lr);
    flag(
        &mut flags,
        "data.manifest",
        a.manifest.as_deref().map(path_value),
    );
    let config = a.config.load(flags)?;
    let options = TrainOptions {
        resume: a.resume,
        ..TrainOptions::default()
    };
    let outcome = train(&config, &options)?;
    println!(
        "{} iterations, run directory {}",
        outcome.iterations,
        outcome.run_dir.display()
    );
    if let (Some(i), Some(f)) = (&outcome.initial, &outcome.final_) {
        print_report("initial", &i.aggregate);
        print_report("final", &f.aggregate);
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let report = metrics::evaluate(&manifest, &a.pred, &MetricParams::default())?;
    if let Some(out) = &a.out {
        report.write_csv(out)?;
    }
    print_report("aggregate", &report.aggregate);
    let missing = report.missing();
    if !missing.is_empty() {
        bail!(
            "{} of {} predictions missing (first: {})",
            missing.len(),
            report.rows.len(),
            missing[0]
        );
    }
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let config_path = match a.config {
        Some(p) => p,
        None => a
            .checkpoint
            .parent()
            .and_then(Path::parent)
            .map(|run| run.join("config.snapshot"))
            .context("cannot locate the run's config.snapshot; pass --config")?,
    };
    let config = ExperimentConfig::load(&config_path, &[])?;
    let (net, template) = Network::new(&config.net, config.seed)?;
    let params = checkpoint::load_params(&a.checkpoint, &template)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    for (i, entry) in manifest.entries.iter().enumerate() {
        let sample = manifest.load_sample(i)?;
        let alpha = net
            .infer(&params, &[&sample.composite], &[&sample.trimap])?
            .remove(0);
        let alpha = apply_trimap(&alpha, &sample.trimap)?;
        pngio::write_alpha(
            &metrics::prediction_path(&a.out, &entry.id()),
            &alpha,
            AlphaDepth::Eight,
        )?;
    }
    println!(
        "wrote {} predictions to {}",
        manifest.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_variant(text: &str) -> Result<Variant> {
    let (name, rest) = text.split_once(':').unwrap_or((text, ""));
    if name.is_empty() {
        bail!("variant `{text}` has no name");
    }
    let overrides = rest
        .split(',')
        .filter(|s| !s.is_empty())
        .map(parse_override)
        .collect::<mattekit::Result<Vec<_>>>()?;
    Ok(Variant {
        name: name.to_string(),
        overrides,
    })
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let mut flags = Vec::new();
    flag(&mut flags, "out_dir", Some(path_value(&a.out)));
    let base = a.config.load(flags)?;
    let mut variants = match a.variants {
        Some(VariantSet::Losses) => loss_variants(),
        Some(VariantSet::Modules) => module_variants(),
        None => Vec::new(),
    };
    for v in &a.custom {
        variants.push(parse_variant(v)?);
    }
    if variants.is_empty() {
        bail!("no variants: pass --variants or --variant");
    }
    let table = ablate(&base, &variants, &a.seeds)?;
    print!("{}", table.to_text());
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = mattekit::gradcheck::run_all(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} max rel err {:.3e} (< {:.0e})  {status}",
            r.name, r.max_rel_error, r.tolerance
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MATTEKIT_THREADS") else {
        return Ok(());
    };
    let n: usize =
        value.parse().ok().filter(|&n| n > 0).with_context(|| {
            format!("MATTEKIT_THREADS must be a positive integer, got `{value}`")
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

/// Error chain joined with `: `, skipping causes the outer message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 and usage text on unknown flags.
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Trimap(a) => run_trimap(a),
        Command::DgmMap(a) => run_dgm_map(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
