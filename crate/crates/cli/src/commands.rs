use std::path::{Path, PathBuf};

use clap::Args;
use fakeprint::accounting::{pipeline_macs, AttentionCounting, PipelineConfigs, PipelineMode};
use fakeprint::detector::{self, BackboneFamily, Composer, Detector, DetectorCheckpoint, Init};
use fakeprint::evaluation;
use fakeprint::experiment::{self, RunConfig};
use fakeprint::manifest::{self, DatasetManifest, Label};
use fakeprint::reconstruction::{self, SavePolicy};
use fakeprint::robustness::{self, SweepKind, SweepSpec};
use fakeprint::textures;
use fakeprint::{Error, Result};

use crate::{Cli, Command, GlobalArgs};

// A closed stdout (e.g. piped into `head`) must not abort a run whose outputs
// are already on disk.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const OUT_ENV: &str = "FAKEPRINT_OUT";

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// `real` or `fake`.
    #[arg(long)]
    pub label: Label,
    #[arg(long = "source")]
    pub source_tag: String,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenTexturesArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub side: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainAeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Manifest of real images.
    #[arg(long)]
    pub manifest: PathBuf,
    /// `toy:<dir>` for a trained toy autoencoder or `identity:<f>`.
    #[arg(long)]
    pub autoencoder: String,
    /// `match`, `png` or `jpeg:<lo>-<hi>`.
    #[arg(long)]
    pub save_policy: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated fractions summing to 1.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    pub fractions: Vec<f64>,
    /// Keep `source_tag` proportions in every split.
    #[arg(long)]
    pub stratified: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// `random` or `sync`.
    #[arg(long)]
    pub composer: Option<Composer>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Side of the square training crops.
    #[arg(long)]
    pub crop: Option<u32>,
    /// `small-cnn` or `resnet50-like`.
    #[arg(long)]
    pub backbone: Option<String>,
    /// `random`, `pretrained-imagenet` or `external:<path>`.
    #[arg(long)]
    pub init: Option<Init>,
    /// Keep the stride and pooling of the backbone stem.
    #[arg(long)]
    pub keep_stem_downsampling: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Where to write the calibrated checkpoint; in place when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Overrides the checkpoint's threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub target_fpr: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// One or more checkpoints; their curves share one plot.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `resize`, `blur`, `noise`, `jpeg`, `webp` or `downsample`.
    #[arg(long)]
    pub kind: Option<SweepKind>,
    /// Comma-separated strictly monotone grid; a default grid when absent.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MacsArgs {
    #[arg(long, value_parser = parse_mode, default_value = "both")]
    pub pipeline: PipelineMode,
    /// Directory with encoder.json, decoder.json and optionally unet.json and
    /// text_encoder.json; the bundled configs when absent.
    #[arg(long)]
    pub configs: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub steps: u64,
    #[arg(long, default_value_t = 1)]
    pub n: u64,
    /// Count attention token mixing as two products (`full`) or one (`single`).
    #[arg(long, default_value = "full", value_parser = parse_attention)]
    pub attention: AttentionCounting,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecipeArgs {
    /// Paired pool the training subsets are drawn from.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated training sizes in pairs.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<PipelineMode, String> {
    match s {
        "denoise" => Ok(PipelineMode::Denoise),
        "reconstruct" => Ok(PipelineMode::Reconstruct),
        "both" => Ok(PipelineMode::Both),
        _ => Err(format!("{s:?} is not denoise, reconstruct or both")),
    }
}

fn parse_attention(s: &str) -> std::result::Result<AttentionCounting, String> {
    match s {
        "full" => Ok(AttentionCounting::Full),
        "single" => Ok(AttentionCounting::SingleProduct),
        _ => Err(format!("{s:?} is not full or single")),
    }
}

fn parse_family(s: &str) -> Result<BackboneFamily> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Error::InvalidArgument(format!("backbone {s:?} is not small-cnn or resnet50-like")))
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// `--out`, then `paths.out` from the config, then `$FAKEPRINT_OUT`, then
/// `./fakeprint-out`; the last three get a per-subcommand directory. The
/// directory is created, so call this only once the inputs have loaded.
fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig, sub: &str) -> Result<PathBuf> {
    let dir = match flag {
        Some(p) => p.clone(),
        None => default_root(cfg).join(sub),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn default_root(cfg: &RunConfig) -> PathBuf {
    cfg
        .paths
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("fakeprint-out"))
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::NotFound(p.display().to_string()));
    }
    Ok(())
}

fn read_manifest(p: &Path) -> Result<DatasetManifest> {
    require_file(p)?;
    DatasetManifest::read(p)
}

fn read_checkpoint(dir: &Path) -> Result<(Detector, DetectorCheckpoint)> {
    require_file(&dir.join(detector::CHECKPOINT_FILE))?;
    DetectorCheckpoint::load(dir)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write(path, text.as_bytes())
}

fn finish(out: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.write_snapshot(out)?;
    log::info!("outputs in {}", out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Ingest(a) => {
            let got = manifest::ingest_directory(&a.root, a.label, &a.source_tag)?;
            for w in &got.warnings {
                log::warn!("{w}");
            }
            got.manifest.write(&a.out)?;
            let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            say!("{} records, {} skipped", got.manifest.len(), got.warnings.len());
            finish(dir, &cfg.resolved())
        }
        Command::GenTextures(a) => {
            if let Some(n) = a.n {
                cfg.textures.n = n;
            }
            if let Some(s) = a.side {
                cfg.textures.side = s;
            }
            let cfg = cfg.resolved();
            let out = out_dir(&a.out, &cfg, "textures")?;
            let m = textures::generate_dataset(&cfg.textures, &out)?;
            m.write(&out.join("manifest.jsonl"))?;
            say!("{} textures in {}", m.len(), out.display());
            finish(&out, &cfg)
        }
        Command::TrainAe(a) => {
            let m = read_manifest(&a.manifest)?;
            if let Some(e) = a.epochs {
                cfg.autoencoder.epochs = e;
            }
            let cfg = cfg.resolved();
            cfg.autoencoder.validate()?;
            let out = out_dir(&a.out, &cfg, "autoencoder")?;
            let trained = reconstruction::train_toy_autoencoder(&cfg.autoencoder, &m)?;
            trained.autoencoder.save(&out)?;
            write_json(
                &out.join("training.json"),
                &serde_json::json!({
                    "train_loss": trained.train_loss,
                    "held_out_mse": trained.held_out_mse,
                    "missed_target": trained.missed_target,
                }),
            )?;
            say!("held-out MSE {:.5}", trained.held_out_mse);
            finish(&out, &cfg)
        }
        Command::Reconstruct(a) => {
            let m = read_manifest(&a.manifest)?;
            if let Some(p) = &a.save_policy {
                cfg.save_policy = SavePolicy::parse(p)?;
            }
            let ae = reconstruction::load_external_autoencoder(&a.autoencoder)?;
            let cfg = cfg.resolved();
            let out = out_dir(&a.out, &cfg, "reconstruct")?;
            let got = reconstruction::reconstruct_dataset(
                ae.as_ref(),
                &m,
                &out.join("images"),
                cfg.save_policy,
                cfg.seed_for("reconstruct"),
            )?;
            got.manifest.write(&out.join("fake.jsonl"))?;
            DatasetManifest::merge(&[&m, &got.manifest])?.write(&out.join("dataset.jsonl"))?;
            say!(
                "{} reconstructions, {} skipped, {} MACs",
                got.manifest.len(),
                got.warnings.len(),
                got.total_macs.map_or("unknown".into(), |m| m.to_string())
            );
            finish(&out, &cfg)
        }
        Command::Split(a) => {
            let m = read_manifest(&a.manifest)?;
            let cfg = cfg.resolved();
            let seed = cfg.seed_for("split");
            let parts = if a.stratified {
                manifest::split_manifest_stratified(&m, &a.fractions, seed)?
            } else {
                manifest::split_manifest(&m, &a.fractions, seed)?
            };
            let out = out_dir(&a.out, &cfg, "split")?;
            for (k, p) in parts.iter().enumerate() {
                p.write(&out.join(format!("split_{k}.jsonl")))?;
                say!("split_{k}: {} records", p.len());
            }
            finish(&out, &cfg)
        }
        Command::Train(a) => {
            let train_m = read_manifest(&a.train)?;
            let val_m = read_manifest(&a.val)?;
            let t = &mut cfg.train;
            if let Some(c) = a.composer {
                t.composer = c;
            }
            if let Some(e) = a.epochs {
                t.max_epochs = e;
            }
            if let Some(b) = a.batch_size {
                t.batch_size = b;
            }
            if let Some(lr) = a.lr {
                t.schedule.initial_lr = lr;
            }
            if let Some(c) = a.crop {
                t.augmentation.train_crop_side = c;
            }
            if let Some(b) = &a.backbone {
                cfg.backbone.family = parse_family(b)?;
            }
            if let Some(i) = a.init {
                cfg.backbone.init = i;
            }
            if a.keep_stem_downsampling {
                cfg.backbone.stem_downsampling_removed = false;
            }
            let cfg = cfg.resolved();
            cfg.train.validate()?;
            let det = detector::build_detector(&cfg.backbone, cfg.seed_for("detector/init"))?;
            let out = out_dir(&a.out, &cfg, "detector")?;
            let outcome = detector::train(det, &train_m, &val_m, &cfg.train)?;
            outcome.checkpoint.save(&out, &outcome.detector)?;
            say!(
                "best validation accuracy {:.4} at epoch {} ({})",
                outcome.checkpoint.best_accuracy, outcome.checkpoint.best_epoch, outcome.checkpoint.stop_reason
            );
            finish(&out, &cfg)
        }
        Command::Calibrate(a) => {
            let (det, mut ck) = read_checkpoint(&a.checkpoint)?;
            let val = read_manifest(&a.val)?;
            let cfg = cfg.resolved();
            let scores = evaluation::score(&det, &val)?;
            ck.threshold = evaluation::calibrate_threshold(&scores)?;
            let acc = evaluation::accuracy_at_threshold(&scores, ck.threshold)?.overall;
            let out = a.out.clone().unwrap_or_else(|| a.checkpoint.clone());
            ck.save(&out, &det)?;
            write_json(
                &out.join("calibration.json"),
                &serde_json::json!({
                    "threshold": ck.threshold,
                    "val_accuracy": acc,
                    "val_manifest": val.content_hash(),
                }),
            )?;
            say!("threshold {:.6}, validation accuracy {acc:.4}", ck.threshold);
            finish(&out, &cfg)
        }
        Command::Eval(a) => {
            let (det, ck) = read_checkpoint(&a.checkpoint)?;
            let m = read_manifest(&a.manifest)?;
            let cfg = cfg.resolved();
            let threshold = a.threshold.unwrap_or(ck.threshold);
            let scores = evaluation::score(&det, &m)?;
            let report = evaluation::evaluate(&scores, threshold, a.target_fpr)?;
            let out = out_dir(&a.out, &cfg, "eval")?;
            scores.write(&out.join("scores.json"))?;
            write_json(&out.join("report.json"), &report)?;
            write(&out.join("groups.csv"), report.groups_csv().as_bytes())?;
            say!(
                "accuracy {:.4} (t={threshold:.4}), AP {}, TPR@{}FPR {}",
                report.accuracy.overall,
                report.average_precision.map_or("n/a".into(), |v| format!("{v:.4}")),
                a.target_fpr,
                report.tpr_at_fpr.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            finish(&out, &cfg)
        }
        Command::Sweep(a) => {
            let dets = a.checkpoint.iter().map(|c| read_checkpoint(c)).collect::<Result<Vec<_>>>()?;
            let m = read_manifest(&a.manifest)?;
            let kind = a.kind.or_else(|| cfg.sweeps.first().map(|s| s.kind)).ok_or_else(|| {
                Error::InvalidArgument("sweep needs --kind or a [[sweeps]] entry in the config".into())
            })?;
            let levels = a
                .levels
                .clone()
                .or_else(|| cfg.sweeps.iter().find(|s| s.kind == kind).map(|s| s.levels.clone()))
                .unwrap_or_else(|| SweepSpec::default_grid(kind));
            if !cfg.sweeps.iter().any(|s| s.kind == kind) {
                cfg.sweeps.push(SweepSpec::new(kind, levels.clone()));
            }
            let cfg = cfg.resolved();
            let mut spec = cfg.sweeps.iter().find(|s| s.kind == kind).cloned().expect("sweep present");
            spec.levels = levels;
            spec.validate()?;
            let out = out_dir(&a.out, &cfg, "sweep")?;
            let mut curves = Vec::new();
            for (i, (det, _)) in dets.iter().enumerate() {
                let c = robustness::sweep(det, &m, &spec)?;
                let stem = if dets.len() == 1 { kind.name().to_string() } else { format!("{}_{i}", kind.name()) };
                robustness::export_curve(&c, &out.join(format!("{stem}.csv")))?;
                write_json(&out.join(format!("{stem}.json")), &c)?;
                curves.push(c);
            }
            robustness::render_plot(&curves.iter().collect::<Vec<_>>(), &out.join(format!("{}.svg", kind.name())))?;
            for c in &curves {
                say!("{}: {}", c.label, robustness::curve_csv(c).trim_end().replace('\n', " | "));
            }
            finish(&out, &cfg)
        }
        Command::Postprocess(a) => {
            let m = read_manifest(&a.manifest)?;
            let cfg = cfg.resolved();
            cfg.postprocess.validate()?;
            let out = out_dir(&a.out, &cfg, "postprocess")?;
            let got = robustness::build_postprocessed_manifest(&m, &cfg.postprocess, &out.join("images"))?;
            got.manifest.write(&out.join("manifest.jsonl"))?;
            say!("{} images, {} skipped", got.manifest.len(), got.warnings.len());
            finish(&out, &cfg)
        }
        Command::Macs(a) => {
            let dir = a.configs.clone().or_else(|| cfg.paths.accounting_configs.clone());
            let configs = match &dir {
                Some(d) => {
                    if !d.is_dir() {
                        return Err(Error::NotFound(d.display().to_string()));
                    }
                    PipelineConfigs::load_dir(d)?
                }
                None => PipelineConfigs::reference(),
            };
            let cfg = cfg.resolved();
            let report = pipeline_macs(&configs, a.steps, a.n, a.pipeline, a.attention)?;
            let out = out_dir(&a.out, &cfg, "macs")?;
            write_json(&out.join("report.json"), &report)?;
            say!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            finish(&out, &cfg)
        }
        Command::Recipe(a) => {
            let pool = read_manifest(&a.train)?;
            let val = read_manifest(&a.val)?;
            let test = read_manifest(&a.test)?;
            if let Some(s) = &a.sizes {
                cfg.recipe.sizes = s.clone();
            }
            let cfg = cfg.resolved();
            cfg.validate()?;
            let out = out_dir(&a.out, &cfg, "recipe")?;
            let table = experiment::experiment_recipe(&cfg, &pool, &val, &test, Some(&out))?;
            say!("{}", table.csv().trim_end());
            finish(&out, &cfg)
        }
    }
}
