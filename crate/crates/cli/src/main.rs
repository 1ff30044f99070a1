use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fusion_probe::dataset::{load_manifest, read_embeddings, write_embeddings, DescriptionCache, SampleRecord};
use fusion_probe::descriptions::{Describer, PromptSpec, DEFAULT_K, DEFAULT_PROMPT};
use fusion_probe::embedding::FusionStrategy;
use fusion_probe::encoder::{
    EncoderAdapter, EncoderGateway, EncoderProfile, FileAdapter, GatewayError, Modality, RemoteAdapter,
};
use fusion_probe::harness::{
    compare_to_targets, replay, run_ablation, synth_dataset, write_synth, RunReport, RunSpec, SynthConfig, TARGET_TOLERANCE,
    UCF101_TARGETS,
};
use fusion_probe::probe::{Optimizer, TrainConfig};
use fusion_probe::service::{RetryPolicy, SidecarClient};

#[derive(Debug, Parser)]
#[command(name = "fusion-probe", version, about = "Linear probes over fused image and description embeddings")]
struct Cli {
    /// Overrides the training (or synthesis) seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config: a run spec for train/ablate, a synth config for synth.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (train, ablate, synth) or file (embed).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fetch and cache descriptions for every sample in a manifest.
    Describe(DescribeArgs),
    /// Build an embedding store for a manifest and its cached descriptions.
    Embed(EmbedArgs),
    /// Train and evaluate a probe for one strategy.
    Train(TrainArgs),
    /// Train and evaluate a probe per strategy under one config.
    Ablate(TrainArgs),
    /// Print a run's accuracy table, optionally replaying it.
    Report(ReportArgs),
    /// Write a seeded synthetic manifest and embedding store.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct ServiceArgs {
    /// Base URL of the model sidecar.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    service: String,
    /// Maximum requests in flight.
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Retries on transient failures.
    #[arg(long, default_value_t = 4)]
    retries: u32,
}

impl ServiceArgs {
    fn client(&self) -> Result<SidecarClient> {
        SidecarClient::new(&self.service, self.concurrency, Duration::from_secs(self.timeout_secs))
            .context("building sidecar client")
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.retries,
            ..RetryPolicy::default()
        }
    }
}

#[derive(Debug, Args)]
struct DescribeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    desc_cache: PathBuf,
    #[arg(long, default_value = DEFAULT_PROMPT)]
    prompt: String,
    /// Descriptions kept per image.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[command(flatten)]
    service: ServiceArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AdapterKind {
    /// Serve vectors from a precomputed store (--source).
    File,
    /// Call the sidecar's embed endpoints.
    Remote,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Description cache; required for text embeddings with the remote adapter.
    #[arg(long)]
    desc_cache: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "remote")]
    adapter: AdapterKind,
    /// Store read by the file adapter.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Encoder profile key (vit-l-14, vit-b-32, vit-b-16).
    #[arg(long, default_value = "vit-l-14")]
    profile: String,
    /// Existing store to extend; already-embedded ids are not re-requested.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[command(flatten)]
    service: ServiceArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Gd,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Store holding image (and, unless --text-embeddings is set, text) vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    text_embeddings: Option<PathBuf>,
    #[arg(long)]
    desc_cache: Option<PathBuf>,
    /// Strategy (repeatable). Defaults: CONCAT for train, all four for ablate.
    #[arg(long = "strategy")]
    strategies: Vec<FusionStrategy>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    tolerate_missing: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory containing report.jsonl.
    run: PathBuf,
    /// Re-run the recorded spec (into --out, default <run>/replay) and compare.
    #[arg(long)]
    verify: bool,
    /// Compare against the full-scale UCF-101 reference accuracies.
    #[arg(long)]
    compare_reference: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    image_signal: Option<f64>,
    #[arg(long)]
    text_signal: Option<f64>,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Describe(a) => describe(a),
        Command::Embed(a) => embed(&cli, a),
        Command::Train(a) => train(&cli, a, false),
        Command::Ablate(a) => train(&cli, a, true),
        Command::Report(a) => report(&cli, a),
        Command::Synth(a) => synth(&cli, a),
    }
}

fn describe(a: &DescribeArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let cache = DescriptionCache::open(&a.desc_cache, a.k)?;
    let client = a.service.client()?;
    let prompt = PromptSpec::new(a.prompt.clone(), a.k)?;
    let describer = Describer::new(&client, &cache, prompt, a.service.retry());
    let report = describer.describe_all(&manifest.samples, a.service.concurrency);
    println!(
        "described {} samples: {} cached, {} fetched, {} padded, {} failed",
        report.total(),
        report.from_cache,
        report.fetched,
        report.padded.len(),
        report.failures.len()
    );
    for (id, e) in &report.failures {
        println!("  {id}: {e}");
    }
    Ok(())
}

fn embed(cli: &Cli, a: &EmbedArgs) -> Result<()> {
    let out = cli.out.clone().context("--out <store.femb> is required")?;
    let manifest = load_manifest(&a.manifest)?;
    let profile = |m| EncoderProfile::named(&a.profile, m);
    let cache = a
        .desc_cache
        .as_deref()
        .map(|p| DescriptionCache::open(p, a.k))
        .transpose()?;
    match a.adapter {
        AdapterKind::File => {
            let source = a.source.as_deref().context("--source is required with --adapter file")?;
            let adapter = FileAdapter::new(read_embeddings(source)?);
            let gw = EncoderGateway::new(adapter, profile(Modality::Image)?, profile(Modality::Text)?, a.k, RetryPolicy::none())?;
            embed_all(&gw, &manifest.samples, cache.as_ref(), a, &out)
        }
        AdapterKind::Remote => {
            let client = a.service.client()?;
            let remote = client.profile().context("querying sidecar profile")?;
            let expected = profile(Modality::Image)?;
            if remote.dim != expected.dim {
                bail!("sidecar serves {} (d={}), profile {} expects d={}", remote.model_name, remote.dim, a.profile, expected.dim);
            }
            let gw = EncoderGateway::new(
                RemoteAdapter::new(client),
                profile(Modality::Image)?,
                profile(Modality::Text)?,
                a.k,
                a.service.retry(),
            )?;
            embed_all(&gw, &manifest.samples, cache.as_ref(), a, &out)
        }
    }
}

fn embed_all<A: EncoderAdapter>(
    gw: &EncoderGateway<A>,
    samples: &[SampleRecord],
    cache: Option<&DescriptionCache>,
    a: &EmbedArgs,
    out: &Path,
) -> Result<()> {
    if let Some(prev) = &a.resume {
        gw.preload(&read_embeddings(prev)?)?;
    }
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(String, GatewayError)>> = Mutex::default();
    let missing_desc = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..a.service.concurrency.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sample) = samples.get(i) else { break };
                if let Err(e) = gw.embed_image(sample) {
                    failures.lock().unwrap().push((sample.id.clone(), e));
                }
                match cache.and_then(|c| c.get(&sample.id)) {
                    Some(entry) => {
                        if let Err(e) = gw.embed_texts(&entry.descriptions) {
                            failures.lock().unwrap().push((sample.id.clone(), e));
                        }
                    }
                    None => {
                        missing_desc.fetch_add(1, Ordering::Relaxed);
                    }
                }
            });
        }
    });
    let store = gw.snapshot();
    write_embeddings(&store, out)?;
    let failures = failures.into_inner().unwrap();
    println!(
        "wrote {}: {} image and {} text embeddings (d={}), {} samples without cached descriptions, {} failures",
        out.display(),
        store.num_images(),
        store.num_texts(),
        store.dim(),
        missing_desc.into_inner(),
        failures.len()
    );
    for (id, e) in &failures {
        println!("  {id}: {e}");
    }
    Ok(())
}

fn run_spec(cli: &Cli, a: &TrainArgs, ablate: bool) -> Result<RunSpec> {
    let mut spec = match &cli.config {
        Some(path) => RunSpec::load(path)?,
        None => RunSpec {
            manifest: a.manifest.clone().context("--manifest (or --config) is required")?,
            image_embeddings: None,
            text_embeddings: None,
            desc_cache: None,
            strategies: Vec::new(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("run"),
            normalize: false,
            tolerate_missing: false,
            encoder_profile: None,
        },
    };
    if let Some(m) = &a.manifest {
        spec.manifest = m.clone();
    }
    if let Some(e) = &a.embeddings {
        spec.image_embeddings = Some(e.clone());
    }
    if let Some(e) = &a.text_embeddings {
        spec.text_embeddings = Some(e.clone());
    }
    if let Some(c) = &a.desc_cache {
        spec.desc_cache = Some(c.clone());
    }
    if !a.strategies.is_empty() {
        spec.strategies = a.strategies.clone();
    }
    if spec.strategies.is_empty() {
        spec.strategies = if ablate {
            FusionStrategy::ALL.to_vec()
        } else {
            vec![FusionStrategy::Concat]
        };
    }
    if !ablate && spec.strategies.len() != 1 {
        bail!("train takes exactly one strategy; use ablate for several");
    }
    if let Some(v) = a.epochs {
        spec.train.epochs = v;
    }
    if let Some(v) = a.lr {
        spec.train.learning_rate = v;
    }
    if let Some(v) = a.optimizer {
        spec.train.optimizer = match v {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Gd => Optimizer::GradientDescent,
        };
    }
    if let Some(v) = a.batch_size {
        spec.train.batch_size = v;
    }
    if let Some(v) = &a.profile {
        spec.encoder_profile = Some(v.clone());
    }
    spec.normalize |= a.normalize;
    spec.tolerate_missing |= a.tolerate_missing;
    if let Some(s) = cli.seed {
        spec.train.seed = s;
    }
    if let Some(o) = &cli.out {
        spec.out_dir = o.clone();
    }
    Ok(spec)
}

fn train(cli: &Cli, a: &TrainArgs, ablate: bool) -> Result<()> {
    let spec = run_spec(cli, a, ablate)?;
    let report = run_ablation(&spec)?;
    print!("{}", report.render_table());
    println!("\noutputs in {}", spec.out_dir.display());
    Ok(())
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let report = RunReport::load(&a.run.join("report.jsonl"))?;
    print!("{}", report.render_table());
    if a.compare_reference {
        println!();
        for d in compare_to_targets(&report, &UCF101_TARGETS, TARGET_TOLERANCE) {
            println!(
                "{:<10} reference {:>7.3}  actual {:>7.3}  {}",
                d.strategy.as_str(),
                d.target,
                d.actual,
                if d.within_tolerance { "ok" } else { "OUT OF TOLERANCE" }
            );
        }
    }
    if a.verify {
        let out = cli.out.clone().unwrap_or_else(|| a.run.join("replay"));
        let outcome = replay(&report, &out)?;
        if !outcome.is_exact() {
            for m in &outcome.mismatches {
                println!("mismatch: {m}");
            }
            bail!("replay differs from the recorded run");
        }
        println!("\nreplay into {} matches bit-for-bit", out.display());
    }
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.samples {
        config.samples = v;
    }
    if let Some(v) = a.classes {
        config.classes = v;
    }
    if let Some(v) = a.dim {
        config.dim = v;
    }
    if let Some(v) = a.image_signal {
        config.image_signal = v;
    }
    if let Some(v) = a.text_signal {
        config.text_signal = v;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let out = cli.out.clone().context("--out <dir> is required")?;
    let files = write_synth(&synth_dataset(&config)?, &out)?;
    println!("wrote {} and {}", files.manifest.display(), files.embeddings.display());
    Ok(())
}
