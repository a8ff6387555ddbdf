//! `leakmark` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use leakmark::attacks::{
    baseline_attack, evade, forge, forge_only_stage2, AttackConfig, BaselineKind, ChannelSelection, FeatureSpace,
};
use leakmark::codecs::learnable::{resume_training, train_learnable_codec};
use leakmark::codecs::{LearnableCodecState, TrainingConfig, WatermarkCodec};
use leakmark::features::{Extractor, LayerTag};
use leakmark::metrics::{bit_accuracy, psnr, ssim, DetectionRule};
use leakmark::rng::{stream, RandomSeedContext};
use leakmark::theory::{channel_capacity, embeddable_threshold_estimate, feasibility_check, TradeoffInstance};
use leakmark::{ImageBuffer, Projection, WatermarkPayload};
use leakmark_harness::config::{CodecSpec, CorpusSource, ExperimentConfig};
use leakmark_harness::corpus::{load_source, normalise};
use leakmark_harness::records::{read_records, ResultRecord};
use leakmark_harness::report::{emit_report, load_external_rows};
use leakmark_harness::runner::{audit_records, run_experiment_with_progress};
use leakmark_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "leakmark", version, about = "Watermark codecs, feature-space attacks and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the learnable codec and write its state file.
    TrainCodec(TrainArgs),
    /// Embed a payload into an image.
    Embed(EmbedArgs),
    /// Extract a payload from an image.
    Extract(ExtractArgs),
    /// Feature-space evasion of one watermarked image.
    AttackEvade(EvadeArgs),
    /// Two-stage forgery from a watermarked source onto a clean target.
    AttackForge(ForgeArgs),
    /// Apply an image-degradation baseline.
    Baseline(BaselineArgs),
    /// Run an experiment config, audit it and write the report.
    Evaluate(EvaluateArgs),
    /// Run an experiment config once per epsilon.
    Sweep(SweepArgs),
    /// Feasibility verdict for one tradeoff instance.
    Feasibility(FeasibilityArgs),
    /// Capacity and feasibility table over an entropy × noise grid.
    Capacity(CapacityArgs),
    /// Summary CSV and plots from a records file.
    Report(ReportArgs),
}

/// Accepts `0.0314` or `8/255`.
fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{s}: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} is not finite"))
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| parse_fraction(v).map_err(HarnessError::Config))
        .collect()
}

#[derive(Args, Clone)]
struct CodecArgs {
    /// `dwtdct`, `dwtdctsvd` or `learnable`.
    #[arg(long, default_value = "dwtdctsvd")]
    codec: String,
    /// State file of the learnable codec.
    #[arg(long)]
    state: Option<PathBuf>,
    /// QIM step of the classical codecs.
    #[arg(long, value_parser = parse_fraction)]
    strength: Option<f64>,
    #[arg(long)]
    payload_length: Option<usize>,
}

impl CodecArgs {
    fn spec(&self) -> Result<CodecSpec> {
        let mut spec = CodecSpec::from_name(&self.codec, self.state.as_deref())?;
        match &mut spec {
            CodecSpec::Dwtdct {
                payload_length,
                strength,
            }
            | CodecSpec::Dwtdctsvd {
                payload_length,
                strength,
            } => {
                if let Some(s) = self.strength {
                    *strength = s;
                }
                if let Some(n) = self.payload_length {
                    *payload_length = n;
                }
            }
            CodecSpec::Learnable { .. } => {
                if self.strength.is_some() || self.payload_length.is_some() {
                    return Err(HarnessError::Config(
                        "strength and payload length of the learnable codec come from its state".into(),
                    ));
                }
            }
        }
        Ok(spec)
    }

    fn build(&self) -> Result<Box<dyn WatermarkCodec>> {
        self.spec()?.build()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProjectionArg {
    Rescale,
    Clip,
}

#[derive(Args, Clone)]
struct AttackArgs {
    /// TOML file with an attack config; flags below override it.
    #[arg(long)]
    attack_config: Option<PathBuf>,
    /// L∞ budget, e.g. `10/255`.
    #[arg(long, value_parser = parse_fraction)]
    epsilon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// `stem`, `dense1`..`dense4`.
    #[arg(long)]
    layer: Option<LayerTag>,
    #[arg(long)]
    attack_seed: Option<u64>,
    #[arg(long, value_enum)]
    projection: Option<ProjectionArg>,
    /// Use every channel instead of the located ones.
    #[arg(long)]
    all_channels: bool,
    /// Optimise the distance in pixel space.
    #[arg(long)]
    pixel_space: bool,
}

impl AttackArgs {
    fn apply(&self, config: &mut AttackConfig) {
        if let Some(e) = self.epsilon {
            config.epsilon = e;
        }
        if let Some(s) = self.steps {
            config.steps = s;
        }
        if let Some(lr) = self.learning_rate {
            config.learning_rate = lr;
        }
        if let Some(l) = self.layer {
            config.layer_tag = l;
        }
        if let Some(s) = self.attack_seed {
            config.seed = s;
        }
        if let Some(p) = self.projection {
            config.projection = match p {
                ProjectionArg::Rescale => Projection::GlobalRescale,
                ProjectionArg::Clip => Projection::ElementClip,
            };
        }
        if self.all_channels {
            config.channel_selection = ChannelSelection::All;
        }
        if self.pixel_space {
            config.feature_space = FeatureSpace::Pixel;
        }
    }

    fn config(&self) -> Result<AttackConfig> {
        let mut config = match &self.attack_config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|source| HarnessError::ConfigParse {
                    path: path.clone(),
                    source,
                })?
            }
            None => AttackConfig::default(),
        };
        self.apply(&mut config);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of training images; synthetic images when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 220)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    /// Seed of corpus sampling or synthesis.
    #[arg(long, default_value_t = 0)]
    corpus_seed: u64,
    /// TOML training config; flags below override it.
    #[arg(long)]
    training_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this state instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    codec: CodecArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Payload as a `0`/`1` string; random from `--payload-seed` otherwise.
    #[arg(long)]
    payload: Option<String>,
    #[arg(long, default_value_t = 0)]
    payload_seed: u64,
    /// Resize to a square of this side before embedding.
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    codec: CodecArgs,
    #[arg(long)]
    input: PathBuf,
    /// Expected payload; reports bit accuracy and detection when given.
    #[arg(long)]
    payload: Option<String>,
}

#[derive(Args)]
struct EvadeArgs {
    #[command(flatten)]
    attack: AttackArgs,
    /// Watermarked image.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Score against this codec and payload when both are given.
    #[command(flatten)]
    codec: CodecArgs,
    #[arg(long)]
    payload: Option<String>,
}

#[derive(Args)]
struct ForgeArgs {
    #[command(flatten)]
    attack: AttackArgs,
    /// Watermarked source image.
    #[arg(long)]
    source: PathBuf,
    /// Clean target image.
    #[arg(long)]
    target: PathBuf,
    /// Output of Stage I+II (or Stage II alone with `--only-stage2`).
    #[arg(long)]
    output: PathBuf,
    /// Also write the Stage I image here.
    #[arg(long)]
    stage1_output: Option<PathBuf>,
    #[arg(long)]
    only_stage2: bool,
    #[command(flatten)]
    codec: CodecArgs,
    #[arg(long)]
    payload: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Jpeg,
    Noise,
    Blur,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    kind: BaselineArg,
    /// JPEG quality, or noise / blur σ.
    #[arg(long)]
    intensity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct RunOverrides {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Overrides epsilon of every feature-space attack.
    #[arg(long, value_parser = parse_fraction)]
    epsilon: Option<f64>,
    /// Comma-separated detection thresholds.
    #[arg(long)]
    thresholds: Option<String>,
}

impl RunOverrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(d) = &self.output_dir {
            c.output_dir = d.clone();
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
        if let Some(s) = self.image_size {
            c.image_size = s;
        }
        if let Some(n) = self.count {
            c.corpus.count = n;
        }
        if let Some(e) = self.epsilon {
            set_epsilon(&mut c, e);
        }
        if let Some(t) = &self.thresholds {
            c.detection.thresholds = parse_list(t)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn set_epsilon(config: &mut ExperimentConfig, epsilon: f64) {
    for a in &mut config.attacks {
        if let Some(ac) = a.attack_config_mut() {
            ac.epsilon = epsilon;
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Fraction of records re-extracted from disk after the run.
    #[arg(long, default_value_t = 0.05)]
    audit_fraction: f64,
    /// Pre-computed comparison rows to include in the report.
    #[arg(long)]
    external: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Comma-separated budgets, e.g. `4/255,8/255,16/255`.
    #[arg(long)]
    epsilons: String,
}

#[derive(Args)]
struct FeasibilityArgs {
    /// Message entropy in bits.
    #[arg(long)]
    entropy: f64,
    #[arg(long)]
    noise_std: f64,
    #[arg(long, default_value_t = 35.0)]
    visual_floor: f64,
    #[arg(long, default_value_t = 0.05)]
    bit_error_budget: f64,
    /// Estimate `C(I)`, `‖I‖` and `‖W‖` from this image and `--codec`.
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    codec: CodecArgs,
    #[arg(long)]
    image_norm: Option<f64>,
    #[arg(long)]
    embeddable_threshold: Option<f64>,
    #[arg(long)]
    signal_norm: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    embedding_strength: f64,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CapacityArgs {
    #[command(flatten)]
    codec: CodecArgs,
    /// Cover image; a synthetic one from `--seed` otherwise.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    #[arg(long, default_value = "30,35,40")]
    visual_floors: String,
    #[arg(long, default_value = "1,2,4,8,16,32")]
    entropies: String,
    /// Noise σ on the 0–255 pixel scale.
    #[arg(long, default_value = "0.5,2,8,32")]
    noise_stds: String,
    /// Write the table as CSV here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more `records.jsonl` files.
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    external: Option<PathBuf>,
}

fn load_image(path: &Path) -> Result<ImageBuffer> {
    Ok(ImageBuffer::load(path)?)
}

fn save_image(image: &ImageBuffer, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(image.quantize_8bit().save_png(path)?)
}

fn parse_payload(s: &str) -> Result<WatermarkPayload> {
    Ok(WatermarkPayload::parse(s.trim())?)
}

fn score(codec: &CodecArgs, payload: Option<&str>, image: &ImageBuffer) -> Result<()> {
    if let Some(p) = payload {
        let codec = codec.build()?;
        let expected = parse_payload(p)?;
        let got = codec.extract(image)?;
        let acc = bit_accuracy(&expected, &got)?;
        println!("extracted     {got}");
        println!(
            "bit accuracy  {acc:.4} (detected at {:.3}: {})",
            codec.descriptor().headline_threshold,
            acc >= codec.descriptor().headline_threshold
        );
    }
    Ok(())
}

fn quality(reference: &ImageBuffer, attacked: &ImageBuffer) -> Result<()> {
    println!("linf          {:.5} ({:.2}/255)", attacked.linf_distance(reference)?, attacked.linf_distance(reference)? * 255.0);
    println!("psnr          {:.3} dB", psnr(reference, attacked)?);
    println!("ssim          {:.4}", ssim(reference, attacked)?);
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let source = match &args.corpus {
        Some(p) => CorpusSource::Dir { path: p.clone() },
        None => CorpusSource::Synthetic { seed: args.corpus_seed },
    };
    let images: Vec<ImageBuffer> = load_source(&source, args.count, args.corpus_seed, args.image_size)?
        .into_iter()
        .map(|c| c.image)
        .collect();
    let mut config: TrainingConfig = match &args.training_config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|source| HarnessError::ConfigParse {
                path: path.clone(),
                source,
            })?
        }
        None => TrainingConfig::default(),
    };
    if let Some(e) = args.epochs {
        config.max_epochs = e;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    let state = match &args.resume {
        Some(p) => {
            let mut s = LearnableCodecState::load(p)?;
            s.config.max_epochs = config.max_epochs;
            resume_training(s, &images, Some(&args.out))?
        }
        None => train_learnable_codec(&images, &config, Some(&args.out))?,
    };
    state.save(&args.out)?;
    for e in &state.log {
        println!(
            "epoch {:3}  loss {:.5}  clean {:.4}  distorted {:.4}",
            e.epoch, e.loss, e.clean_accuracy, e.distorted_accuracy
        );
    }
    println!("converged {}  state {}", state.converged, args.out.display());
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let codec = args.codec.build()?;
    let mut image = load_image(&args.input)?;
    if let Some(s) = args.image_size {
        image = normalise(&image, s);
    }
    let payload = match &args.payload {
        Some(p) => parse_payload(p)?,
        None => WatermarkPayload::random(
            codec.descriptor().payload_length,
            RandomSeedContext::new(args.payload_seed, stream::PAYLOAD),
        ),
    };
    let marked = codec.embed(&image, &payload)?.quantize_8bit();
    save_image(&marked, &args.output)?;
    println!("payload       {payload}");
    quality(&image, &marked)
}

fn extract(args: ExtractArgs) -> Result<()> {
    let codec = args.codec.build()?;
    let image = load_image(&args.input)?;
    let got = codec.extract(&image)?;
    println!("extracted     {got}");
    if let Some(p) = &args.payload {
        let rule = DetectionRule::default();
        let acc = bit_accuracy(&parse_payload(p)?, &got)?;
        println!("bit accuracy  {acc:.4}");
        for t in &rule.thresholds {
            println!("detected@{t:<5} {}", acc >= *t);
        }
    }
    Ok(())
}

fn attack_evade(args: EvadeArgs) -> Result<()> {
    let config = args.attack.config()?;
    let image = load_image(&args.input)?;
    let out = evade(&image, &Extractor::from_env()?, &config)?;
    let attacked = out.attacked.quantize_8bit();
    save_image(&attacked, &args.output)?;
    quality(&image, &attacked)?;
    score(&args.codec, args.payload.as_deref(), &attacked)
}

fn attack_forge(args: ForgeArgs) -> Result<()> {
    let config = args.attack.config()?;
    let source = load_image(&args.source)?;
    let target = load_image(&args.target)?;
    let extractor = Extractor::from_env()?;
    let attacked = if args.only_stage2 {
        forge_only_stage2(&source, &target, &extractor, &config)?.attacked
    } else {
        let f = forge(&source, &target, &extractor, &config)?;
        if let Some(p) = &args.stage1_output {
            save_image(&f.stage1.attacked, p)?;
        }
        f.stage12.attacked
    }
    .quantize_8bit();
    save_image(&attacked, &args.output)?;
    quality(&target, &attacked)?;
    score(&args.codec, args.payload.as_deref(), &attacked)
}

fn baseline(args: BaselineArgs) -> Result<()> {
    let kind = match args.kind {
        BaselineArg::Jpeg => {
            if !(1.0..=100.0).contains(&args.intensity) {
                return Err(HarnessError::Config(format!("JPEG quality {} outside 1..=100", args.intensity)));
            }
            BaselineKind::Jpeg {
                quality: args.intensity.round() as u8,
            }
        }
        BaselineArg::Noise => BaselineKind::GaussianNoise { sigma: args.intensity },
        BaselineArg::Blur => BaselineKind::GaussianBlur { sigma: args.intensity },
    };
    let image = load_image(&args.input)?;
    let out = baseline_attack(&image, kind, RandomSeedContext::new(args.seed, stream::NOISE))?.quantize_8bit();
    save_image(&out, &args.output)?;
    quality(&image, &out)
}

fn print_progress(r: &ResultRecord) {
    eprintln!(
        "{:<10} {:<20} {:<18} #{:<4} acc {:.3} psnr {:>6.2} ssim {:.3}",
        r.codec, r.attack, r.stage, r.index, r.metrics.bit_accuracy, r.metrics.psnr, r.metrics.ssim
    );
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let config = args.run.load()?;
    let records = run_experiment_with_progress(&config, print_progress)?;
    let checked = audit_records(&config, &records, args.audit_fraction, config.seed)?;
    let external = match &args.external {
        Some(p) => load_external_rows(p)?,
        None => Vec::new(),
    };
    let files = emit_report(&records, &config.detection, &config.output_dir, &external)?;
    print_rows(&files.rows);
    println!("audited {checked} records; summary {}", files.summary_csv.display());
    Ok(())
}

fn print_rows(rows: &[leakmark_harness::report::SummaryRow]) {
    println!(
        "{:<10} {:<22} {:<18} {:>5} {:>8} {:>8} {:>8}",
        "codec", "attack", "stage", "n", "SR", "SSIM", "PSNR"
    );
    for r in rows {
        println!(
            "{:<10} {:<22} {:<18} {:>5} {:>8.3} {:>8.4} {:>8.2}",
            r.codec, r.attack, r.stage, r.images, r.sr_headline, r.mean_ssim, r.mean_psnr
        );
    }
}

fn sweep(args: SweepArgs) -> Result<()> {
    let base = args.run.load()?;
    let epsilons = parse_list(&args.epsilons)?;
    if epsilons.is_empty() {
        return Err(HarnessError::Config("--epsilons is empty".into()));
    }
    let mut all = Vec::new();
    for eps in epsilons {
        let mut config = base.clone();
        set_epsilon(&mut config, eps);
        let tag = format!("eps-{:.2}", eps * 255.0);
        config.output_dir = base.output_dir.join(&tag);
        config.validate()?;
        let records = run_experiment_with_progress(&config, print_progress)?;
        all.extend(records.into_iter().map(|mut r| {
            if r.epsilon.is_some() {
                r.attack = format!("{}@{:.2}/255", r.attack, eps * 255.0);
            }
            r.attacked_path = Path::new(&tag).join(&r.attacked_path);
            r
        }));
    }
    // baselines are identical across budgets; keep one copy
    let mut seen = std::collections::HashSet::new();
    all.retain(|r| seen.insert(r.key()));
    let files = emit_report(&all, &base.detection, &base.output_dir, &[])?;
    print_rows(&files.rows);
    Ok(())
}

fn instance_from_args(args: &FeasibilityArgs) -> Result<TradeoffInstance> {
    let mut inst = TradeoffInstance {
        embedding_strength: args.embedding_strength,
        signal_norm: args.signal_norm.unwrap_or(1.0),
        noise_std: args.noise_std,
        message_entropy: args.entropy,
        image_norm: args.image_norm.unwrap_or(1.0),
        visual_floor: args.visual_floor,
        bit_error_budget: args.bit_error_budget,
        embeddable_threshold: args.embeddable_threshold.unwrap_or(1.0),
    };
    if let Some(path) = &args.image {
        let codec = args.codec.build()?;
        let image = normalise(&load_image(path)?, args.image_size);
        let (norm, ratio) = measure(&image, codec.as_ref(), args.visual_floor)?;
        inst.image_norm = args.image_norm.unwrap_or(norm);
        inst.embeddable_threshold = args.embeddable_threshold.unwrap_or(ratio.max(f64::MIN_POSITIVE));
        inst.signal_norm = args.signal_norm.unwrap_or(inst.embeddable_threshold * norm);
        inst.embedding_strength = 1.0;
    } else if args.image_norm.is_none() || args.embeddable_threshold.is_none() || args.signal_norm.is_none() {
        return Err(HarnessError::Config(
            "give --image, or all of --image-norm, --embeddable-threshold and --signal-norm".into(),
        ));
    }
    Ok(inst)
}

/// `‖I‖₂` (on the 0–255 scale) and `C(I)` at `floor`.
fn measure(image: &ImageBuffer, codec: &dyn WatermarkCodec, floor: f64) -> Result<(f64, f64)> {
    let norm = image.as_slice().iter().map(|v| (v * 255.0).powi(2)).sum::<f64>().sqrt();
    let est = embeddable_threshold_estimate(image, floor, codec)?;
    Ok((norm, if est.reachable { est.ratio } else { 0.0 }))
}

fn feasibility(args: FeasibilityArgs) -> Result<()> {
    let inst = instance_from_args(&args)?;
    let verdict = feasibility_check(&inst)?;
    let capacity = channel_capacity(&inst)?;
    if args.json {
        println!(
            "{}",
            serde_json::json!({ "instance": inst, "verdict": verdict, "capacity_bits": capacity })
        );
    } else {
        println!("capacity        {capacity:.4} bits");
        println!("required signal {:.4}", verdict.required_signal);
        println!("signal budget   {:.4}", verdict.signal_budget);
        println!("slack           {:.4}", verdict.slack);
        println!("verdict         {:?}", verdict.verdict);
    }
    Ok(())
}

fn capacity(args: CapacityArgs) -> Result<()> {
    let codec = args.codec.build()?;
    let image = match &args.image {
        Some(p) => normalise(&load_image(p)?, args.image_size),
        None => leakmark::synth::corpus(1, args.image_size, args.seed).remove(0).quantize_8bit(),
    };
    let (entropies, noise_stds) = (parse_list(&args.entropies)?, parse_list(&args.noise_stds)?);
    let header = "visual_floor,c_of_i,signal_budget,entropy,noise_std,capacity_at_budget,required_signal,verdict";
    let mut lines = vec![header.to_string()];
    println!(
        "{:>6} {:>9} {:>9} {:>7} {:>7} {:>10} {:>12} {:>10}",
        "TV", "C(I)", "budget", "H", "sigma", "cap@budget", "required", "verdict"
    );
    for floor in parse_list(&args.visual_floors)? {
        let (norm, ratio) = measure(&image, codec.as_ref(), floor)?;
        for &h in &entropies {
            for &sigma in &noise_stds {
                let budget = ratio * norm;
                let inst = TradeoffInstance {
                    embedding_strength: 1.0,
                    signal_norm: budget.max(f64::MIN_POSITIVE),
                    noise_std: sigma,
                    message_entropy: h,
                    image_norm: norm,
                    visual_floor: floor,
                    bit_error_budget: 0.05,
                    embeddable_threshold: ratio.max(f64::MIN_POSITIVE),
                };
                let v = feasibility_check(&inst)?;
                let cap = channel_capacity(&inst)?;
                println!(
                    "{floor:>6.1} {ratio:>9.5} {budget:>9.3} {h:>7.1} {sigma:>7.3} {cap:>10.3} {:>12.4e} {:>10?}",
                    v.required_signal, v.verdict
                );
                lines.push(format!(
                    "{floor},{ratio},{budget},{h},{sigma},{cap},{},{:?}",
                    v.required_signal, v.verdict
                ));
            }
        }
    }
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(out, lines.join("\n") + "\n")?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut records = Vec::new();
    for p in &args.records {
        records.extend(read_records(p, true)?);
    }
    let mut rule = DetectionRule::default();
    if let Some(t) = &args.thresholds {
        rule.thresholds = parse_list(t)?;
    }
    rule.validate()?;
    let external = match &args.external {
        Some(p) => load_external_rows(p)?,
        None => Vec::new(),
    };
    let files = emit_report(&records, &rule, &args.out, &external)?;
    print_rows(&files.rows);
    for p in &files.plots {
        println!("plot {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainCodec(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Extract(a) => extract(a),
        Command::AttackEvade(a) => attack_evade(a),
        Command::AttackForge(a) => attack_forge(a),
        Command::Baseline(a) => baseline(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Feasibility(a) => feasibility(a),
        Command::Capacity(a) => capacity(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
