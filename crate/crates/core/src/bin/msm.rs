use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use msm::backbone::{build_backbone, train_identity, BackboneConfig, LossKind, SwinConfig, TrainedBackbone, UnetConfig};
use msm::denoise::{
    sodium_pairs, train_fixed_noise_denoiser, train_sodium_denoiser, DenoiserArch, DenoiserModel, NoiseRange,
};
use msm::distort::{build_ladder, write_ladder, DistortionKind};
use msm::error::{MsmError, Result};
use msm::harness::{
    run_experiment, write_scores, AblationGrid, BackboneRecipe, DatasetSource, ExperimentConfig, ExperimentKind,
    LadderSpec, PairsSpec, RunOptions, ScoreRow, ServerState, SweepSpec,
};
use msm::imaging::{load_image, phantom_set, save_image, ImageFormat, ImageGrid};
use msm::metrics::{msm_scores, DifferenceMeasure};

#[derive(Parser)]
#[command(name = "msm", version, about = "Label-free image quality assessment by model specialization")]
struct Cli {
    /// JSON experiment or training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded scoring.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantoms as 16-bit PNGs.
    Phantom {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Write a distortion ladder of one image.
    Distort {
        /// Input image; a phantom from `--seed` when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        kind: DistortionKind,
        /// Comma-separated levels; the standard ladder when omitted.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<f64>,
    },
    /// Train an identity backbone and save its checkpoint.
    TrainBackbone {
        #[arg(long, default_value = "unet")]
        arch: String,
        #[arg(long, default_value = "perceptual")]
        loss: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a denoiser and save its checkpoint.
    TrainDenoiser {
        #[arg(long, default_value = "unet")]
        arch: String,
        /// Fixed Gaussian training noise; sodium noise over 0.05..0.2 when omitted.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Score images with a backbone checkpoint into a score CSV.
    Score {
        #[arg(long)]
        backbone: PathBuf,
        /// Image files or directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long = "measure", default_value = "L2")]
        measures: Vec<DifferenceMeasure>,
    },
    /// Denoiser specialization sweep over test noise levels.
    Sweep,
    /// MSM-versus-distortion correlations over grouped folds.
    Correlate,
    /// Correlations over a grid of backbones, losses and measures.
    Ablate,
    /// Build a blinded pairwise rating session.
    Pairs,
    /// Serve the rating API.
    Serve {
        /// Directory holding session files and `images/`.
        #[arg(long)]
        sessions: PathBuf,
        /// Ratings JSONL; `<sessions>/ratings.jsonl` when omitted.
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Score CSVs to compare with raters in session reports.
        #[arg(long = "scores")]
        scores: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Kappa report over a rated session.
    Report,
}

#[derive(Args)]
struct DataArgs {
    /// Training images; phantoms when omitted.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<Vec<ImageGrid>> {
        match &self.images {
            Some(path) => DatasetSource::Directory { path: path.clone() }.load(),
            None => phantom_set(seed, self.count, self.size),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = cli_out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Phantom { count, size } => {
            let dir = out_dir(&cli.out)?;
            for (i, img) in phantom_set(seed, *count, *size)?.iter().enumerate() {
                save_image(img, dir.join(format!("phantom_{}.png", seed + i as u64)), ImageFormat::Png16)?;
            }
            Ok(())
        }
        Command::Distort { input, kind, levels } => {
            let image = match input {
                Some(p) => load_image(p)?,
                None => phantom_set(seed, 1, 64)?.remove(0),
            };
            let levels = if levels.is_empty() { LadderSpec::standard(*kind).levels } else { levels.clone() };
            let ladder = build_ladder(&image, *kind, &levels, seed)?;
            write_ladder(&ladder, out_dir(&cli.out)?, ImageFormat::Png16)?;
            Ok(())
        }
        Command::TrainBackbone { arch, loss, epochs, data } => {
            let mut recipe = match &cli.config {
                Some(p) => serde_json::from_str(&read(p)?)?,
                None => BackboneRecipe {
                    config: backbone_config(arch)?,
                    loss: LossKind::from_name(loss)?,
                    ..BackboneRecipe::default()
                },
            };
            if let Some(e) = epochs {
                recipe.hyper.epochs = *e;
            }
            recipe.hyper.seed = seed;
            let init = build_backbone(&recipe.config, seed)?;
            let model = train_identity(&init, &data.load(seed)?, &recipe.loss, &recipe.hyper, None)?;
            let path = out_dir(&cli.out)?.join("backbone.ckpt");
            model.save(&path)?;
            println!("{} {}", path.display(), model.weights_hash());
            Ok(())
        }
        Command::TrainDenoiser { arch, sigma, epochs, data } => {
            let arch = denoiser_arch(arch)?;
            let hyper = msm::backbone::TrainingHyper { epochs: *epochs, lr_decay: 0.98, seed, ..Default::default() };
            let clean = data.load(seed)?;
            let model = match (arch.is_learned(), sigma) {
                (false, _) => DenoiserModel::build(&arch, seed)?,
                (true, Some(s)) => train_fixed_noise_denoiser(&arch, &clean, *s, &hyper)?,
                (true, None) => train_sodium_denoiser(&arch, &sodium_pairs(&clean, NoiseRange::default(), seed)?, &hyper)?,
            };
            let path = out_dir(&cli.out)?.join("denoiser.ckpt");
            model.save(&path)?;
            println!("{} {}", path.display(), model.model_hash());
            Ok(())
        }
        Command::Score { backbone, inputs, measures } => {
            let model = TrainedBackbone::load(backbone)?;
            let (ids, images) = collect_images(inputs)?;
            let scores = msm_scores(&model, &images, measures)?;
            let rows: Vec<ScoreRow> = ids
                .iter()
                .zip(scores)
                .flat_map(|(id, per)| {
                    per.into_iter().map(move |q| ScoreRow {
                        image_id: id.clone(),
                        distortion_kind: "none".into(),
                        level: 0.0,
                        measure: q.measure,
                        value: q.value,
                        orientation: q.orientation,
                        backbone_hash: q.backbone_hash,
                    })
                })
                .collect();
            write_scores(out_dir(&cli.out)?.join("scores.csv"), &rows)
        }
        Command::Serve { sessions, ratings, scores, addr } => {
            let ratings = ratings.clone().unwrap_or_else(|| sessions.join("ratings.jsonl"));
            let state = Arc::new(ServerState::load(sessions, ratings, scores)?);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            eprintln!("listening on http://{addr}");
            rt.block_on(msm::harness::serve(state, *addr))
        }
        Command::Sweep => experiment(&cli, ExperimentKind::Sweep),
        Command::Correlate => experiment(&cli, ExperimentKind::Correlate),
        Command::Ablate => experiment(&cli, ExperimentKind::Ablate),
        Command::Pairs => experiment(&cli, ExperimentKind::Pairs),
        Command::Report => experiment(&cli, ExperimentKind::Report),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| MsmError::InvalidArgument(format!("{}: {e}", path.display())))
}

fn backbone_config(arch: &str) -> Result<BackboneConfig> {
    match arch {
        "unet" => Ok(BackboneConfig::Unet(UnetConfig { depth: 3, base_channels: 8 })),
        "swin-lite" => Ok(BackboneConfig::SwinLite(SwinConfig { embed_dim: 16, n_blocks: 2, ..SwinConfig::default() })),
        other => Err(MsmError::InvalidArgument(format!("unknown backbone {other:?}"))),
    }
}

fn denoiser_arch(arch: &str) -> Result<DenoiserArch> {
    match arch {
        "unet" => Ok(DenoiserArch::unet()),
        "dncnn" => Ok(DenoiserArch::dncnn()),
        _ => match arch.strip_prefix("median") {
            Some(w) => Ok(DenoiserArch::Median { window: w.trim_start_matches('-').parse().unwrap_or(3) }),
            None => Err(MsmError::InvalidArgument(format!("unknown denoiser {arch:?}"))),
        },
    }
}

/// Images of every file argument and of every image in directory arguments;
/// ids are file stems.
fn collect_images(inputs: &[PathBuf]) -> Result<(Vec<String>, Vec<ImageGrid>)> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| matches!(f.extension().and_then(|e| e.to_str()), Some("png" | "msmf")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let ids = files.iter().map(|f| f.file_stem().unwrap_or_default().to_string_lossy().into_owned()).collect();
    let images = files.iter().map(load_image).collect::<Result<_>>()?;
    Ok((ids, images))
}

fn experiment(cli: &Cli, kind: ExperimentKind) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => {
            let mut value: serde_json::Value = serde_json::from_str(&read(p)?)?;
            if let Some(obj) = value.as_object_mut() {
                obj.entry("kind").or_insert_with(|| kind.as_str().into());
                if let Some(s) = cli.seed {
                    obj.insert("seed".into(), s.into());
                }
            }
            let config: ExperimentConfig = serde_json::from_value(value)?;
            if config.kind != kind {
                return Err(MsmError::InvalidArgument(format!(
                    "config is a {} experiment, not {}",
                    config.kind.as_str(),
                    kind.as_str()
                )));
            }
            config
        }
        None => default_config(kind, cli.seed.unwrap_or(0))?,
    };
    if let Some(o) = &cli.out {
        config.out = Some(o.clone());
    }
    let dir = out_dir(&config.out)?;
    let outcome = run_experiment(&config, RunOptions { deterministic: cli.deterministic })?;
    outcome.write(&dir)?;
    for row in &outcome.report.correlations {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        println!("{} {} {} {}: |SRCC| {}", row.arch, row.loss, row.measure, row.distortion, fmt(row.srcc));
    }
    for c in &outcome.report.sweep {
        println!("train sigma {}: argmax {}", c.train_sigma, c.argmax_sigma);
    }
    println!("{}", dir.join("report.json").display());
    Ok(())
}

fn default_config(kind: ExperimentKind, seed: u64) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::new(kind, seed);
    match kind {
        ExperimentKind::Sweep => c.sweep = Some(SweepSpec::default()),
        ExperimentKind::Pairs => c.pairs = Some(PairsSpec::default()),
        ExperimentKind::Ablate => {
            c.ablation = Some(AblationGrid {
                archs: vec![backbone_config("unet")?, backbone_config("swin-lite")?],
                losses: vec![LossKind::L2, LossKind::perceptual()],
                measures: vec![DifferenceMeasure::L2, DifferenceMeasure::SSsim],
            })
        }
        ExperimentKind::Correlate => {}
        ExperimentKind::Report => return Err(MsmError::InvalidArgument("report needs --config".into())),
    }
    Ok(c)
}
