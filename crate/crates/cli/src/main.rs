//! `wobseg`: dataset synthesis, mask generation, training, prediction,
//! and evaluation from the command line.
//!
//! Exit codes: 0 success; 1 configuration or validation problem; 2 I/O or
//! corrupted-store problem; 3 infeasible run (the patch pool can never
//! reach its minimum fill).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use serde::Deserialize;

use wobseg_core::annotate::{annotate_slide, mask_iou, AnnotateParams, GENERATED_MASK};
use wobseg_core::augment::AugmentPipeline;
use wobseg_core::error::Error;
use wobseg_core::hem::{run_protocol, write_stats_csv, SamplerConfig};
use wobseg_core::metrics::{quantize_prob, slide_metrics, write_reports, Histogram, PrCurve};
use wobseg_core::model::{
    compound_predict, load_params, predict_slide, save_params, FcnConfig, InferOpts, Params,
    COMPOUND_CHANNEL_LEVELS,
};
use wobseg_core::raster::Raster;
use wobseg_core::slide::{open_slide, update_slide_masks, MaskKind, Slide};
use wobseg_core::synth::{generate_dataset, DatasetListing, SynthParams};
use wobseg_core::Result;

#[derive(Parser)]
#[command(
    name = "wobseg",
    version,
    about = "Whole-slide WOB segmentation: synthesis, annotation, training, prediction, evaluation"
)]
struct Cli {
    /// Seed for all randomness. Defaults to 0; never the wall clock.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for tiled prediction (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print progress details to stderr (repeat for more).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slide dataset from a JSON job file.
    Synth {
        /// JSON job: {"params": {...}, "n_train": N, "n_test": M}.
        job: PathBuf,
        /// Output dataset directory (receives *.slab dirs + dataset.json).
        out_dir: PathBuf,
    },
    /// Derive a WOB mask from a slide's immunofluorescence channels.
    Annotate {
        /// Slide directory (*.slab).
        slide: PathBuf,
        /// Density-filter standard deviation, micrometers.
        #[arg(long)]
        sigma: Option<f64>,
        /// Ratio stabilizer epsilon.
        #[arg(long)]
        eps: Option<f64>,
        /// Binarization threshold on the combined heatmap.
        #[arg(long)]
        tau: Option<f64>,
        /// Minimum connected-component area, square micrometers.
        #[arg(long = "min-area")]
        min_area: Option<f64>,
        /// Epithelial-density gate.
        #[arg(long = "tissue-tau")]
        tissue_tau: Option<f64>,
        /// Heatmap agreement band half-width.
        #[arg(long = "agree-delta")]
        agree_delta: Option<f64>,
        /// Level (microns per pixel) to run at.
        #[arg(long)]
        level: Option<f64>,
        /// Mask to union in (required when named). Without the flag an
        /// "idcp_override" mask is used if the slide has one.
        #[arg(long = "override")]
        override_mask: Option<String>,
    },
    /// Train (or finetune) a model with the two-worker protocol.
    Train {
        /// JSON run config; see README for the schema.
        config: PathBuf,
        /// Warm-start parameter file (finetuning).
        #[arg(long = "init-from")]
        init_from: Option<PathBuf>,
        /// Base-model parameter file; trains on 4-channel compound views.
        #[arg(long)]
        compound: Option<PathBuf>,
    },
    /// Run a model over one slide and store the probability plane.
    Predict {
        /// Parameter file.
        params: PathBuf,
        /// Slide directory (*.slab).
        slide: PathBuf,
        /// Base-model parameter file for two-stage compound prediction.
        #[arg(long)]
        compound: Option<PathBuf>,
        /// Mask name under which the probability plane is stored.
        #[arg(long, default_value = "pred")]
        out: String,
        /// Level (microns per pixel) to predict at.
        #[arg(long)]
        level: Option<f64>,
        /// Architecture of the parameter file: "base", "head", or a path
        /// to a predictor config JSON. Auto-detected when omitted.
        #[arg(long)]
        model: Option<String>,
    },
    /// Evaluate stored predictions and write the four report files.
    Eval {
        /// dataset.json (with --split) or a JSON array of slide dirs.
        listing: PathBuf,
        /// Report output directory.
        #[arg(long)]
        out: PathBuf,
        /// Which split of a dataset listing to use.
        #[arg(long, default_value = "test")]
        split: String,
        /// Mask name of the stored prediction plane.
        #[arg(long, default_value = "pred")]
        pred: String,
        /// Mask name of the ground truth.
        #[arg(long, default_value = "wob")]
        truth: String,
        /// Fixed threshold for per-slide metrics (default: the max-F1
        /// threshold of the pooled PR curve).
        #[arg(long)]
        threshold: Option<f64>,
        /// Restrict evaluation to pixels where this mask is 1.
        #[arg(long)]
        domain: Option<String>,
    },
}

fn exit_class(e: &Error) -> u8 {
    match e {
        Error::Io { .. }
        | Error::AlreadyExists(_)
        | Error::CorruptPlane { .. }
        | Error::Manifest(_) => 2,
        Error::PoolInfeasible { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = wobseg_core::configure_threads(n) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Synth { job, out_dir } => cmd_synth(&job, &out_dir, cli.seed, verbose),
        Command::Annotate {
            slide,
            sigma,
            eps,
            tau,
            min_area,
            tissue_tau,
            agree_delta,
            level,
            override_mask,
        } => {
            let mut params = AnnotateParams::default();
            if let Some(v) = sigma {
                params.sigma_um = v;
            }
            if let Some(v) = eps {
                params.eps = v;
            }
            if let Some(v) = tau {
                params.tau = v;
            }
            if let Some(v) = min_area {
                params.min_area_um2 = v;
            }
            if let Some(v) = tissue_tau {
                params.tissue_tau = v;
            }
            if let Some(v) = agree_delta {
                params.agree_delta = v;
            }
            if let Some(v) = level {
                params.level_mpp = v;
            }
            params.override_mask = override_mask;
            cmd_annotate(&slide, &params)
        }
        Command::Train {
            config,
            init_from,
            compound,
        } => cmd_train(&config, init_from.as_deref(), compound.as_deref(), cli.seed, verbose),
        Command::Predict {
            params,
            slide,
            compound,
            out,
            level,
            model,
        } => cmd_predict(
            &params,
            &slide,
            compound.as_deref(),
            &out,
            level,
            model.as_deref(),
            verbose,
        ),
        Command::Eval {
            listing,
            out,
            split,
            pred,
            truth,
            threshold,
            domain,
        } => cmd_eval(
            &listing,
            &out,
            &split,
            &pred,
            &truth,
            threshold,
            domain.as_deref(),
            verbose,
        ),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Resolves `p` relative to the directory holding `anchor`.
fn relative_to(anchor: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        anchor.parent().unwrap_or(Path::new(".")).join(p)
    }
}

// ---------------------------------------------------------------- synth

#[derive(Deserialize)]
struct SynthJob {
    #[serde(default)]
    params: SynthParams,
    n_train: usize,
    n_test: usize,
}

fn cmd_synth(job_path: &Path, out_dir: &Path, seed: Option<u64>, verbose: u8) -> Result<()> {
    let mut job: SynthJob = read_json(job_path)?;
    if let Some(s) = seed {
        job.params.seed = s;
    }
    let listing = generate_dataset(&job.params, job.n_train, job.n_test, out_dir)?;
    if verbose > 0 {
        eprintln!(
            "synthesized {} train + {} test slides (seed {})",
            listing.train.len(),
            listing.test.len(),
            job.params.seed
        );
    }
    println!("{}", out_dir.join("dataset.json").display());
    Ok(())
}

// ------------------------------------------------------------- annotate

fn cmd_annotate(slide_dir: &Path, params: &AnnotateParams) -> Result<()> {
    let mut slide = open_slide(slide_dir)?;
    annotate_slide(&mut slide, params)?;
    update_slide_masks(&slide, slide_dir)?;
    let li = slide.level_index(params.level_mpp)?;
    if let (Some(generated), Some(truth)) =
        (slide.mask(GENERATED_MASK, li), slide.mask("wob", li))
    {
        println!("IoU vs wob: {:.4}", mask_iou(generated, truth)?);
    }
    Ok(())
}

// ---------------------------------------------------------------- train

/// Architecture selector: one of the two reference names or an inline
/// predictor config.
#[derive(Deserialize)]
#[serde(untagged)]
enum PredictorSpec {
    Named(String),
    Inline(FcnConfig),
}

impl PredictorSpec {
    fn config(&self) -> Result<FcnConfig> {
        match self {
            PredictorSpec::Named(name) => match name.as_str() {
                "base" => Ok(FcnConfig::base_reference()),
                "head" => Ok(FcnConfig::head_reference()),
                other => Err(Error::InvalidConfig(format!(
                    "unknown predictor {other:?}; use \"base\", \"head\", or an inline config"
                ))),
            },
            PredictorSpec::Inline(cfg) => Ok(cfg.clone()),
        }
    }
}

fn default_split() -> String {
    "train".into()
}

#[derive(Deserialize)]
struct TrainRunConfig {
    /// Path to a dataset listing (dataset.json), relative to this file.
    dataset: PathBuf,
    #[serde(default = "default_split")]
    split: String,
    #[serde(default)]
    sampler: SamplerConfig,
    /// Optional augmentation pipeline text file, relative to this file.
    #[serde(default)]
    augment: Option<PathBuf>,
    predictor: PredictorSpec,
    #[serde(default)]
    seed: Option<u64>,
    /// Output parameter file, relative to this file.
    params_out: PathBuf,
    /// Output statistics CSV, relative to this file.
    stats_out: PathBuf,
}

fn load_split(listing_path: &Path, split: &str) -> Result<Vec<Slide>> {
    let listing = DatasetListing::load(listing_path)?;
    let entries = match split {
        "train" => &listing.train,
        "test" => &listing.test,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown split {other:?}; use \"train\" or \"test\""
            )))
        }
    };
    if entries.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    entries
        .iter()
        .map(|e| open_slide(&relative_to(listing_path, Path::new(&e.path))))
        .collect()
}

fn cmd_train(
    config_path: &Path,
    init_from: Option<&Path>,
    compound: Option<&Path>,
    cli_seed: Option<u64>,
    verbose: u8,
) -> Result<()> {
    let cfg: TrainRunConfig = read_json(config_path)?;
    let model_cfg = cfg.predictor.config()?;
    let listing_path = relative_to(config_path, &cfg.dataset);
    let mut slides = load_split(&listing_path, &cfg.split)?;

    if let Some(base_path) = compound {
        let base = load_reference_params(base_path, Some("base"))?;
        let opts = InferOpts::auto(&base.config);
        slides = slides
            .iter()
            .map(|s| {
                wobseg_core::model::materialize_compound_view(
                    &base,
                    s,
                    COMPOUND_CHANNEL_LEVELS.0,
                    &opts,
                )
            })
            .collect::<Result<Vec<Slide>>>()?;
        if verbose > 0 {
            eprintln!("materialized {} compound views", slides.len());
        }
    }

    let pipeline = match &cfg.augment {
        Some(p) => {
            let path = relative_to(config_path, p);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            AugmentPipeline::parse(&text)?
        }
        None => AugmentPipeline::identity(),
    };

    let init = match init_from {
        Some(p) => Some(load_params(&model_cfg, p)?),
        None => None,
    };

    let seed = cfg.seed.or(cli_seed).unwrap_or(0);
    let (params, stats) = run_protocol(&slides, &cfg.sampler, &pipeline, &model_cfg, init, seed)?;

    let params_out = relative_to(config_path, &cfg.params_out);
    if let Some(dir) = params_out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_params(&params, &params_out)?;
    let stats_out = relative_to(config_path, &cfg.stats_out);
    if let Some(dir) = stats_out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_stats_csv(&stats_out, &stats)?;
    if verbose > 0 {
        let trained = stats.iter().filter(|s| s.loss_mean > 0.0).count();
        let last_loss = stats
            .iter()
            .rev()
            .find(|s| s.loss_mean > 0.0)
            .map(|s| s.loss_mean)
            .unwrap_or(f64::NAN);
        eprintln!(
            "ran {} cycles ({} with training), final mean loss {last_loss:.4}",
            stats.len(),
            trained
        );
    }
    println!("{}", params_out.display());
    Ok(())
}

// -------------------------------------------------------------- predict

/// Loads a parameter file whose architecture is named on the command line
/// ("base", "head", a config JSON path) or, when unspecified, matched
/// against the two reference architectures by the stored config hash.
fn load_reference_params(path: &Path, model: Option<&str>) -> Result<Params> {
    match model {
        Some("base") => load_params(&FcnConfig::base_reference(), path),
        Some("head") => load_params(&FcnConfig::head_reference(), path),
        Some(cfg_path) => {
            let cfg: FcnConfig = read_json(Path::new(cfg_path))?;
            load_params(&cfg, path)
        }
        None => load_params(&FcnConfig::base_reference(), path).or_else(|base_err| {
            load_params(&FcnConfig::head_reference(), path).map_err(|_| base_err)
        }),
    }
}

fn cmd_predict(
    params_path: &Path,
    slide_dir: &Path,
    compound: Option<&Path>,
    out_name: &str,
    level: Option<f64>,
    model: Option<&str>,
    verbose: u8,
) -> Result<()> {
    let mut slide = open_slide(slide_dir)?;
    let prob = if let Some(base_path) = compound {
        let head = match model {
            None => load_reference_params(params_path, Some("head"))?,
            spec => load_reference_params(params_path, spec)?,
        };
        let base = load_reference_params(base_path, Some("base"))?;
        let base_mpp = level.map(|l| l / 2.0).unwrap_or(COMPOUND_CHANNEL_LEVELS.0);
        let opts = InferOpts::auto(&base.config);
        compound_predict(&base, &head, &slide, base_mpp, &opts)?
    } else {
        let params = load_reference_params(params_path, model)?;
        let mpp = level.unwrap_or(COMPOUND_CHANNEL_LEVELS.0);
        let opts = InferOpts::auto(&params.config);
        predict_slide(&params, &slide, mpp, &opts)?
    };

    let li = slide.level_index(prob.mpp)?;
    let floats = prob.raster.floats()?;
    let quantized: Vec<u8> = floats.iter().map(|&p| quantize_prob(p)).collect();
    let plane = Raster::from_bytes(prob.raster.width(), prob.raster.height(), 1, quantized)?;
    slide.set_mask(out_name, MaskKind::Prob, li, plane)?;
    update_slide_masks(&slide, slide_dir)?;
    if verbose > 0 {
        eprintln!(
            "stored {}x{} probability plane at {} mpp",
            prob.raster.width(),
            prob.raster.height(),
            prob.mpp
        );
    }
    println!("{out_name}@{}mpp -> {}", prob.mpp, slide_dir.display());
    Ok(())
}

// ----------------------------------------------------------------- eval

/// The level at which a slide stores the named mask; errors when the mask
/// is absent everywhere.
fn mask_level(slide: &Slide, name: &str) -> Result<usize> {
    (0..slide.levels().len())
        .find(|&li| slide.mask(name, li).is_some())
        .ok_or_else(|| Error::MissingMask(format!("{name} (slide {})", slide.id)))
}

fn eval_slide_paths(listing_path: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(listing_path).map_err(|e| Error::io(listing_path, e))?;
    if let Ok(paths) = serde_json::from_str::<Vec<String>>(&text) {
        return Ok(paths
            .iter()
            .map(|p| relative_to(listing_path, Path::new(p)))
            .collect());
    }
    let listing = DatasetListing::load(listing_path)?;
    let entries = match split {
        "train" => &listing.train,
        "test" => &listing.test,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown split {other:?}; use \"train\" or \"test\""
            )))
        }
    };
    Ok(entries
        .iter()
        .map(|e| relative_to(listing_path, Path::new(&e.path)))
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    listing: &Path,
    out: &Path,
    split: &str,
    pred: &str,
    truth: &str,
    threshold: Option<f64>,
    domain: Option<&str>,
    verbose: u8,
) -> Result<()> {
    let paths = eval_slide_paths(listing, split)?;
    if paths.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let mut pooled = Histogram::new();
    let mut planes: Vec<(String, Raster, Raster, Option<Raster>)> = Vec::new();
    for path in &paths {
        let slide = open_slide(path)?;
        let li = mask_level(&slide, pred)?;
        let probs = slide
            .mask(pred, li)
            .expect("level found above")
            .clone();
        let labels = slide
            .mask(truth, li)
            .ok_or_else(|| Error::MissingMask(format!("{truth} (slide {})", slide.id)))?
            .clone();
        let dom = match domain {
            Some(name) => Some(
                slide
                    .mask(name, li)
                    .ok_or_else(|| Error::MissingMask(format!("{name} (slide {})", slide.id)))?
                    .clone(),
            ),
            None => None,
        };
        pooled.accumulate(&probs, &labels, dom.as_ref())?;
        if verbose > 0 {
            eprintln!("accumulated {}", slide.id);
        }
        planes.push((slide.id.clone(), probs, labels, dom));
    }

    let curve = PrCurve::from_histogram(&pooled)?;
    let thr = threshold.unwrap_or_else(|| curve.max_f1().1);
    let mut per_slide = Vec::new();
    for (id, probs, labels, dom) in &planes {
        per_slide.push((id.clone(), slide_metrics(probs, labels, thr, dom.as_ref())?));
    }
    write_reports(out, &curve, &per_slide, thr)?;
    let (mf1, _) = curve.max_f1();
    println!("auc {:.4} max_f1 {:.4} threshold {:.4}", curve.auc, mf1, thr);
    Ok(())
}
