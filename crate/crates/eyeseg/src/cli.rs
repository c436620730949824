//! Command-line interface.
//!
//! Subcommands: `eval`, `loss`, `violations`, `phantom`, `optimize`,
//! `gradcheck`. Exit codes: 0 success, 1 usage error, 2 validation
//! error, 3 numerical failure. Errors go to standard error with a
//! machine-parseable `error[<class>]:` prefix. Given the same
//! configuration and seed, every run writes byte-identical artifacts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde_json::json;

use crate::composite::{finite_diff_check, smooth_pixel_mask, total_loss, total_loss_on_probs, LossBreakdown};
use crate::constraints::iu_loss;
use crate::error::{Error, Result};
use crate::grid::{argmax_mask, normalize, one_hot, LabelMask, LogitGrid, ProbMap};
use crate::io::{
    export_heatmap, read_mask, read_probmap, write_color_mask, write_mask, write_probmap, RunConfig,
};
use crate::metrics::{compute_report, violation_count};
use crate::optimize::fit;
use crate::phantom::{corrupt, generate, random_spec};
use crate::seeds;

#[derive(Parser, Debug)]
#[command(
    name = "eyeseg",
    about = "Constrained segmentation losses, metrics, and phantom tooling",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (falls back to the config `out`, then ".").
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for parallel sections; 0 picks automatically.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
enum PredKind {
    /// Raw logits; normalized with the per-pixel softmax before the loss.
    #[default]
    Logits,
    /// Probabilities; validated and used as-is.
    Probs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate a directory of predicted masks against ground truth.
    Eval {
        /// Directory of predicted masks (8-bit PNG).
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth masks; files pair by stem.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Loss breakdown of one prediction against one ground-truth mask.
    Loss {
        /// Prediction grid in the probability-map format.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth mask (8-bit PNG).
        #[arg(long)]
        gt: PathBuf,
        /// How to interpret the prediction file.
        #[arg(long, value_enum, default_value_t)]
        kind: PredKind,
        /// Write the loss gradient to this probability-map file.
        #[arg(long)]
        grad_out: Option<PathBuf>,
    },
    /// Export constraint heatmaps and violation counts of a prediction.
    Violations {
        /// Prediction: probability map (.pmap) or hard mask (.png).
        #[arg(long)]
        pred: PathBuf,
    },
    /// Generate a phantom mask dataset from the configuration.
    Phantom,
    /// Fit a logit grid to a target mask by gradient descent.
    Optimize {
        /// Target mask file; defaults to the configured phantom.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck,
}

/// Maps an error to the process exit code contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::GradientMismatch { .. } => 3,
        _ => 2,
    }
}

fn error_class(err: &Error) -> &'static str {
    match exit_code(err) {
        3 => "numeric",
        _ => "validation",
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("error[usage]: {e}");
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error[{}]: {}", error_class(&err), err);
            exit_code(&err)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));

    match cli.command {
        Command::Eval { pred, gt } => cmd_eval(&config, &pred, &gt, &out),
        Command::Loss { pred, gt, kind, grad_out } => {
            cmd_loss(&config, &pred, &gt, kind, grad_out.as_deref())
        }
        Command::Violations { pred } => cmd_violations(&config, &pred, &out),
        Command::Phantom => cmd_phantom(&config, &out),
        Command::Optimize { target } => cmd_optimize(&config, target.as_deref(), &out),
        Command::Gradcheck => cmd_gradcheck(&config),
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("{}: no .png masks found", dir.display())));
    }
    Ok(out)
}

fn cmd_eval(config: &RunConfig, pred_dir: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    let classes = config.classes.class_set()?;
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    let missing_gt: Vec<&String> = preds.keys().filter(|s| !gts.contains_key(*s)).collect();
    let missing_pred: Vec<&String> = gts.keys().filter(|s| !preds.contains_key(*s)).collect();
    if !missing_gt.is_empty() || !missing_pred.is_empty() {
        return Err(Error::Validation(format!(
            "unpaired masks: {missing_gt:?} lack ground truth, {missing_pred:?} lack predictions"
        )));
    }
    let pairs: Vec<(String, LabelMask, LabelMask)> = preds
        .iter()
        .map(|(stem, pred_path)| {
            Ok((
                stem.clone(),
                read_mask(pred_path, &classes)?,
                read_mask(&gts[stem], &classes)?,
            ))
        })
        .collect::<Result<_>>()?;
    let report = compute_report(
        &pairs,
        &classes,
        config.bootstrap.resamples,
        config.bootstrap.level,
        config.seed,
    )?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("report.json"), report.to_json())?;
    let agg = &report.aggregate;
    println!(
        "evaluated {} images: mean dice {:.4} [{:.4}, {:.4}], mean hd95 {:.3} [{:.3}, {:.3}]",
        report.images.len(),
        agg.dice_mean.mean,
        agg.dice_mean.lower,
        agg.dice_mean.upper,
        agg.hd95_mean.mean,
        agg.hd95_mean.lower,
        agg.hd95_mean.upper
    );
    println!("wrote {} and {}", out.join("report.csv").display(), out.join("report.json").display());
    Ok(())
}

fn breakdown_json(b: &LossBreakdown, config: &RunConfig) -> serde_json::Value {
    json!({
        "multiscale": b.multiscale,
        "constraint": b.constraint,
        "pixel": b.pixel,
        "total": b.total,
        "weights": {
            "multiscale": config.loss.weights.multiscale,
            "constraint": config.loss.weights.constraint,
            "pixel": config.loss.weights.pixel,
        },
    })
}

fn cmd_loss(
    config: &RunConfig,
    pred: &Path,
    gt: &Path,
    kind: PredKind,
    grad_out: Option<&Path>,
) -> Result<()> {
    let classes = config.classes.class_set()?;
    let mask = read_mask(gt, &classes)?;
    let (c, h, w, data) = read_probmap(pred)?;
    let breakdown = match kind {
        PredKind::Logits => {
            let logits = LogitGrid::new(c, h, w, data)?;
            total_loss(&logits, &mask, &classes, &config.loss)?
        }
        PredKind::Probs => {
            let probs = ProbMap::new(c, h, w, data)?;
            total_loss_on_probs(&probs, &mask, &classes, &config.loss)?
        }
    };
    if let Some(path) = grad_out {
        write_probmap(c, h, w, breakdown.grad.data(), path)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&breakdown_json(&breakdown, config)).expect("serializable")
    );
    Ok(())
}

fn cmd_violations(config: &RunConfig, pred: &Path, out: &Path) -> Result<()> {
    let classes = config.classes.class_set()?;
    let probs = match pred.extension().and_then(|e| e.to_str()) {
        Some("png") => one_hot(&read_mask(pred, &classes)?, &classes)?,
        _ => {
            let (c, h, w, data) = read_probmap(pred)?;
            ProbMap::new(c, h, w, data)?
        }
    };
    let loss = iu_loss(&probs, config.loss.constraint_reduction)?;
    fs::create_dir_all(out)?;
    export_heatmap(&loss.maps.exclusion, &out.join("exclusion.png"))?;
    export_heatmap(&loss.maps.sclera_iris, &out.join("sclera_iris.png"))?;
    export_heatmap(&loss.maps.iris_pupil, &out.join("iris_pupil.png"))?;
    let counts = violation_count(&argmax_mask(&probs));
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "constraint_loss": loss.value,
            "map_sums": {
                "exclusion": loss.maps.exclusion.sum(),
                "sclera_iris": loss.maps.sclera_iris.sum(),
                "iris_pupil": loss.maps.iris_pupil.sum(),
            },
            "argmax_violations": counts,
        }))
        .expect("serializable")
    );
    eprintln!("wrote heatmaps to {}", out.display());
    Ok(())
}

fn cmd_phantom(config: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut written = 0usize;
    for i in 0..config.phantom.count {
        let spec = if config.phantom.randomize {
            random_spec(seeds::derive_seed(config.seed, i as u64))
        } else {
            let mut spec = config.phantom.spec.clone();
            spec.seed = config.seed;
            spec
        };
        let mut phantom = generate(&spec)?;
        if let Some(op) = config.phantom.corruption {
            phantom = corrupt(&phantom, op, seeds::derive_seed(config.seed, 1000 + i as u64))?.phantom;
        }
        let path = out.join(format!("phantom_{i:03}.png"));
        write_mask(&phantom.mask, &path)?;
        if config.phantom.preview {
            write_color_mask(&phantom.mask, &phantom.classes, &out.join(format!("preview_{i:03}.png")))?;
        }
        written += 1;
    }
    println!("wrote {written} mask(s) to {}", out.display());
    Ok(())
}

fn cmd_optimize(config: &RunConfig, target: Option<&Path>, out: &Path) -> Result<()> {
    let classes = config.classes.class_set()?;
    let target_mask = match target {
        Some(path) => read_mask(path, &classes)?,
        None => {
            let mut phantom = generate(&config.phantom.spec)?;
            if let Some(op) = config.phantom.corruption {
                phantom = corrupt(&phantom, op, seeds::derive_seed(config.seed, 1000))?.phantom;
            }
            phantom.mask
        }
    };
    let optim = config.optimize.to_optim_config(config.loss.clone(), config.seed);
    let result = fit(&target_mask, &classes, None, &optim)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("trace.csv"), result.trace.to_csv())?;
    let final_mask = argmax_mask(&result.probs);
    write_mask(&final_mask, &out.join("final_mask.png"))?;
    write_probmap(
        result.probs.channels(),
        result.probs.height(),
        result.probs.width(),
        result.probs.data(),
        &out.join("final_probs.pmap"),
    )?;
    let last = result.trace.final_point().expect("trace has a final point");
    println!("{}", serde_json::to_string_pretty(last).expect("serializable"));
    eprintln!("wrote trace.csv, final_mask.png, final_probs.pmap to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig) -> Result<()> {
    let classes = config.classes.class_set()?;
    let (c, h, w) = (classes.len(), 8usize, 8usize);
    let mut rng = seeds::rng(config.seed);
    let logits = LogitGrid::new(
        c,
        h,
        w,
        (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .expect("finite by construction");
    let mask_data: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c as u8)).collect();
    let mask = LabelMask::new(h, w, mask_data, &classes)?;

    let breakdown = total_loss(&logits, &mask, &classes, &config.loss)?;
    let probs = normalize(&logits);
    let g1 = one_hot(&mask, &classes)?;
    let pixel_mask = smooth_pixel_mask(&probs, &g1, &config.loss, 1e-3);
    let report = finite_diff_check(
        |z| Ok(total_loss(z, &mask, &classes, &config.loss)?.total),
        &logits,
        &breakdown.grad,
        1e-5,
        Some(&pixel_mask),
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "max_rel_error": report.max_rel_error,
            "checked_coordinates": report.checked,
            "worst_coordinate": report.worst_coordinate,
        }))
        .expect("serializable")
    );
    if report.max_rel_error > 1e-3 {
        return Err(Error::GradientMismatch {
            max_rel_error: report.max_rel_error,
            coordinate: report.worst_coordinate.unwrap_or(0),
        });
    }
    Ok(())
}
