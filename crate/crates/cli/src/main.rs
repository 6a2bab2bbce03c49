use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crackseg::data::manifest::{split_manifest, DatasetManifest, Split};
use crackseg::data::prepare::{prepare_dataset, PrepareOptions, SourceSpec, MANIFEST_FILE};
use crackseg::data::crack_proportion;
use crackseg::losses::{LossKind, LossSpec};
use crackseg::model::{ModelConfig, PathMode};
use crackseg::train::experiments::{SINGLE_LOSSES, SWEEP_LAMBDAS};
use crackseg::train::{self, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "crackseg", version, about = "Crack segmentation: data preparation, training and evaluation")]
struct Cli {
    /// Base directory for relative output paths.
    #[arg(long, env = "CRACKSEG_OUTPUT_ROOT", default_value = ".", global = true)]
    output_root: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Harmonize masks, tile, augment and write a manifest.
    Prepare(PrepareArgs),
    /// Assign train/val/test splits to a manifest.
    Split(SplitArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train one model per loss configuration and report test metrics.
    Sweep(SweepArgs),
    /// Train fused, CNN-only and transformer-only models and report test metrics.
    Ablate(AblateArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Export binary masks for images.
    Predict(PredictArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Crack dataset as NAME=DIR with images/ and masks/ subdirectories.
    #[arg(long = "source", value_name = "NAME=DIR")]
    sources: Vec<String>,
    /// Image-only dataset as NAME=DIR; its tiles get empty masks.
    #[arg(long = "non-crack", value_name = "NAME=DIR")]
    non_crack: Vec<String>,
    /// Source whose masks mark cracks dark on light.
    #[arg(long = "invert", value_name = "NAME")]
    invert: Vec<String>,
    /// Source whose masks get morphological closing.
    #[arg(long = "morph-source", value_name = "NAME")]
    morph_sources: Vec<String>,
    #[arg(long, default_value_t = 3)]
    morph_kernel: u32,
    #[arg(long, default_value_t = 256)]
    tile: u32,
    #[arg(long, default_value_t = 5000)]
    augment_threshold: u64,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "dataset")]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "0.8,0.1,0.1", value_delimiter = ',', num_args = 3)]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest; defaults to rewriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Reduced,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    /// TOML file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Square input side; must match the tile size.
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Safetensors file with torchvision-named ResNet weights.
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    common: TrainOverrides,
    /// bce, dice, bce_dice or recall_ce
    #[arg(long)]
    loss: Option<String>,
    /// BCE weight for bce_dice.
    #[arg(long)]
    lambda: Option<f64>,
    /// fused, cnn or transformer
    #[arg(long)]
    paths: Option<String>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    common: TrainOverrides,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_LAMBDAS.to_vec())]
    lambdas: Vec<f64>,
    /// Single losses to include (dice, bce, recall_ce).
    #[arg(long, value_delimiter = ',', default_value = "dice,bce,recall_ce")]
    singles: Vec<String>,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    common: TrainOverrides,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// JSON record path; defaults to evaluation_<split>.json next to the checkpoint.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write a side-by-side overlay per image.
    #[arg(long)]
    overlay: bool,
}

fn under(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn name_dir(s: &str) -> Result<(String, PathBuf)> {
    let (name, dir) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected NAME=DIR, got `{s}`"))?;
    if name.is_empty() {
        bail!("empty source name in `{s}`");
    }
    Ok((name.to_string(), PathBuf::from(dir)))
}

fn prepare(root: &Path, a: PrepareArgs) -> Result<()> {
    let mut opts = PrepareOptions::new(under(root, &a.out));
    for s in &a.sources {
        let (name, dir) = name_dir(s)?;
        opts.sources.push(SourceSpec {
            invert: a.invert.contains(&name),
            morph_kernel: a.morph_sources.contains(&name).then_some(a.morph_kernel),
            ..SourceSpec::crack(name, dir)
        });
    }
    for s in &a.non_crack {
        let (name, dir) = name_dir(s)?;
        opts.sources.push(SourceSpec::non_crack(name, dir));
    }
    for n in a.invert.iter().chain(&a.morph_sources) {
        if !opts.sources.iter().any(|s| &s.name == n) {
            bail!("flag names unknown source `{n}`");
        }
    }
    opts.tile = a.tile;
    opts.augment = !a.no_augment;
    opts.augment_threshold = a.augment_threshold;
    opts.noise_sigma = a.noise_sigma;
    opts.seed = a.seed;
    let (manifest, summary) = prepare_dataset(&opts)?;
    println!(
        "{} images -> {} tiles, {} augmented, {} too small; crack pixels {:.2}%",
        summary.images,
        summary.tiles,
        summary.augmented,
        summary.dropped_images,
        100.0 * crack_proportion(&manifest).unwrap_or(0.0)
    );
    println!("manifest: {}", opts.out_dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn split(root: &Path, a: SplitArgs) -> Result<()> {
    let input = under(root, &a.manifest);
    let manifest = DatasetManifest::load(&input).with_context(|| format!("reading {}", input.display()))?;
    let ratios: [f64; 3] = a.ratios.as_slice().try_into().context("need three ratios")?;
    let out = a.out.map(|p| under(root, &p)).unwrap_or(input);
    let mut m = split_manifest(&manifest, ratios, a.seed)?;
    if out.parent().unwrap_or(Path::new("")) != manifest.base_dir {
        // tile paths are relative to the manifest, so pin them when it moves
        for r in &mut m.records {
            r.tile_path = std::path::absolute(manifest.resolve(&r.tile_path))?;
            r.mask_path = std::path::absolute(manifest.resolve(&r.mask_path))?;
        }
    }
    m.save(&out)?;
    for s in Split::ALL {
        let recs = m.subset(s);
        let aug = recs.iter().filter(|r| r.augmented).count();
        println!("{s:<5} {:>6} tiles ({aug} augmented)", recs.len());
    }
    Ok(())
}

fn build_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let side = o.input_size.unwrap_or(cfg.model.input_size.0);
    match o.preset {
        Some(Preset::Reduced) => cfg.model = ModelConfig::reduced(side).with_paths(cfg.model.paths),
        Some(Preset::Default) => cfg.model = ModelConfig::default().with_paths(cfg.model.paths),
        None => {}
    }
    if let Some(n) = o.input_size {
        cfg.model.input_size = (n, n);
    }
    if let Some(v) = o.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = o.patience {
        cfg.early_stop_patience = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.threshold {
        cfg.threshold = v;
    }
    if let Some(p) = &o.pretrained {
        cfg.model.cnn.pretrained_weights = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split_manifest(root: &Path, p: &Path) -> Result<DatasetManifest> {
    let path = under(root, p);
    let m = DatasetManifest::load(&path).with_context(|| format!("reading {}", path.display()))?;
    if m.split_meta.is_none() {
        bail!("{} has no split; run `crackseg split` first", path.display());
    }
    Ok(m)
}

fn train_cmd(root: &Path, a: TrainArgs) -> Result<()> {
    let mut cfg = build_config(&a.common)?;
    if let Some(k) = &a.loss {
        let kind: LossKind = k.parse()?;
        cfg.loss = match kind {
            LossKind::Bce => LossSpec::bce(),
            LossKind::Dice => LossSpec::dice(),
            LossKind::BceDice => LossSpec::bce_dice(a.lambda.unwrap_or(cfg.loss.lambda)),
            LossKind::RecallCe => LossSpec::recall_ce(),
        };
    } else if let Some(l) = a.lambda {
        cfg.loss.lambda = l;
    }
    if let Some(p) = &a.paths {
        cfg.model = cfg.model.with_paths(p.parse::<PathMode>()?);
    }
    cfg.validate()?;
    let manifest = load_split_manifest(root, &a.manifest)?;
    let out = under(root, &a.out);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let trainer = Trainer::new(cfg, &out)?;
    let (_, record) = trainer.fit_manifest(&manifest)?;
    let best = record.best().ok_or_else(|| anyhow!("no epoch recorded"))?;
    println!(
        "stopped after {} epochs ({:?}); best epoch {} val loss {:.6}",
        record.epochs.len(),
        record.stop_reason,
        record.best_epoch,
        record.best_val_loss
    );
    println!("validation  {}", best.val_metrics);
    println!("checkpoint: {}", record.best_checkpoint.display());
    Ok(())
}

fn sweep_cmd(root: &Path, a: SweepArgs) -> Result<()> {
    let cfg = build_config(&a.common)?;
    let singles = a
        .singles
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<LossKind>())
        .collect::<crackseg::Result<Vec<_>>>()?;
    if let Some(bad) = singles.iter().find(|k| !SINGLE_LOSSES.contains(k)) {
        bail!("`{}` is swept through --lambdas, not --singles", bad.name());
    }
    let manifest = load_split_manifest(root, &a.manifest)?;
    let out = under(root, &a.out);
    let table = train::run_loss_sweep(&manifest, &cfg, &a.lambdas, &singles, &out)?;
    print!("{}", table.render());
    Ok(())
}

fn ablate_cmd(root: &Path, a: AblateArgs) -> Result<()> {
    let cfg = build_config(&a.common)?;
    let manifest = load_split_manifest(root, &a.manifest)?;
    let out = under(root, &a.out);
    let table = train::run_ablation(&manifest, &cfg, &out)?;
    print!("{}", table.render());
    Ok(())
}

fn evaluate_cmd(root: &Path, a: EvaluateArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let manifest = load_split_manifest(root, &a.manifest)?;
    let ckpt = under(root, &a.checkpoint);
    let record = match a.record {
        Some(p) => under(root, &p),
        None => ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("evaluation_{split}.json")),
    };
    let report = train::evaluate(&ckpt, &manifest, split, a.threshold, Some(&record))?;
    println!("{:<10}  {}", "split", "acc   prec  rec   f1    iou");
    println!("{split:<10}  {report}");
    println!("record: {}", record.display());
    Ok(())
}

fn predict_cmd(root: &Path, a: PredictArgs) -> Result<()> {
    let (model, _) = crackseg::checkpoint::load(&under(root, &a.checkpoint), &crackseg::Device::Cpu)?;
    let out = under(root, &a.out);
    let notes = train::predict_files(&model, &a.images, &out, a.threshold, a.overlay)?;
    for n in notes {
        println!(
            "{} -> {} ({} tiles, {} crack pixels)",
            n.input.display(),
            n.mask.display(),
            n.tiles,
            n.crack_pixels
        );
        if let Some(note) = n.note {
            println!("  note: {note}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::Prepare(a) => prepare(&root, a),
        Command::Split(a) => split(&root, a),
        Command::Train(a) => train_cmd(&root, a),
        Command::Sweep(a) => sweep_cmd(&root, a),
        Command::Ablate(a) => ablate_cmd(&root, a),
        Command::Evaluate(a) => evaluate_cmd(&root, a),
        Command::Predict(a) => predict_cmd(&root, a),
    }
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
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
