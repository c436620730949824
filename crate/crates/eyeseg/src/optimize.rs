//! Gradient-descent demonstrator: fits a free logit grid directly to a
//! target mask by descending the composite loss.
//!
//! This stands in for network training at desk scale. Because every
//! pixel owns its logits, the pixel term alone can fit any target; the
//! interesting question the demonstrator answers is how the multi-scale
//! and region-constraint terms change what is learned — in particular
//! how quickly anatomically implausible supervision (label noise) is
//! absorbed. Plain gradient descent keeps the dynamics auditable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composite::{total_loss, LossConfig};
use crate::error::{Error, Result};
use crate::grid::{argmax_mask, normalize, ClassSet, LabelMask, LogitGrid, ProbMap};
use crate::metrics::{bootstrap_ci, dice_score, hd95, violation_count, CiEstimate, ViolationCounts};
use crate::seeds;
use rand_distr::{Distribution, Normal};

/// Number of iterations between the loss samples compared by the
/// plateau stop.
const STOP_WINDOW: usize = 10;

/// Configuration of a single fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub step_size: f64,
    pub max_iters: usize,
    /// Plateau stop: halt once `|total(t) - total(t-10)| < tolerance`.
    /// Zero disables the stop, making runs bit-deterministic in length.
    pub tolerance: f64,
    pub loss: LossConfig,
    /// Trace every `log_stride` iterations (plus the final state).
    pub log_stride: usize,
    pub seed: u64,
    /// Standard deviation of the random logit initialization.
    pub init_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            step_size: 1.0,
            max_iters: 2000,
            tolerance: 0.0,
            loss: LossConfig::default(),
            log_stride: 50,
            seed: 0,
            init_scale: 0.02,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size.is_nan() || self.step_size <= 0.0 {
            return Err(Error::InvalidConfig(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max iterations must be >= 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::InvalidConfig(format!("tolerance must be >= 0, got {}", self.tolerance)));
        }
        if self.log_stride < 1 {
            return Err(Error::InvalidConfig("log stride must be >= 1".into()));
        }
        if self.init_scale.is_nan() || self.init_scale < 0.0 {
            return Err(Error::InvalidConfig(format!("init scale must be >= 0, got {}", self.init_scale)));
        }
        self.loss.validate()
    }
}

/// One logged state of a fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub multiscale: f64,
    pub constraint: f64,
    pub pixel: f64,
    pub total: f64,
    /// Mean Dice of the argmax mask against the supervision target,
    /// over non-background classes.
    pub dice_mean: f64,
    pub violations: ViolationCounts,
}

/// Loss and quality trajectory of a fit.
#[derive(Debug, Clone, Default)]
pub struct OptimTrace {
    pub points: Vec<TracePoint>,
}

impl OptimTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iteration,multiscale,constraint,pixel,total,dice_mean,viol_exclusion,viol_sclera_iris,viol_iris_pupil\n",
        );
        for p in &self.points {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.6},{},{},{}\n",
                p.iteration,
                p.multiscale,
                p.constraint,
                p.pixel,
                p.total,
                p.dice_mean,
                p.violations.exclusion,
                p.violations.sclera_iris,
                p.violations.iris_pupil
            ));
        }
        out
    }

    pub fn final_point(&self) -> Option<&TracePoint> {
        self.points.last()
    }
}

/// Result of a fit: the converged probability map and its trace.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub probs: ProbMap,
    pub trace: OptimTrace,
    pub iterations_run: usize,
}

fn random_init(channels: usize, height: usize, width: usize, scale: f64, seed: u64) -> LogitGrid {
    let mut rng = seeds::rng(seed);
    let normal = Normal::new(0.0, scale.max(f64::MIN_POSITIVE)).expect("valid stddev");
    let data: Vec<f64> = (0..channels * height * width)
        .map(|_| if scale == 0.0 { 0.0 } else { normal.sample(&mut rng) })
        .collect();
    LogitGrid::new(channels, height, width, data).expect("finite by construction")
}

fn mean_dice(pred: &LabelMask, target: &LabelMask, classes: &ClassSet) -> Result<f64> {
    let mut sum = 0.0;
    for c in 1..classes.len() {
        sum += dice_score(pred, target, c as u8)?;
    }
    Ok(sum / (classes.len() - 1) as f64)
}

/// Fits logits to `target` by plain gradient descent on the composite
/// loss. Deterministic in `(target, init, cfg)`; with `tolerance = 0`
/// the run is bit-deterministic in length as well.
pub fn fit(
    target: &LabelMask,
    classes: &ClassSet,
    init: Option<LogitGrid>,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let (h, w) = (target.height(), target.width());
    let mut logits = match init {
        Some(grid) => {
            if grid.channels() != classes.len() || grid.height() != h || grid.width() != w {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{h}x{w}", classes.len()),
                    got: format!("{}x{}x{}", grid.channels(), grid.height(), grid.width()),
                });
            }
            grid
        }
        None => random_init(classes.len(), h, w, cfg.init_scale, cfg.seed),
    };

    let mut trace = OptimTrace::default();
    let mut totals: Vec<f64> = Vec::with_capacity(cfg.max_iters);
    let mut iterations_run = 0;

    for t in 0..cfg.max_iters {
        let breakdown = total_loss(&logits, target, classes, &cfg.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged { iteration: t, step_size: cfg.step_size });
        }
        if t % cfg.log_stride == 0 {
            trace.points.push(trace_point(t, &breakdown, &logits, target, classes)?);
        }
        totals.push(breakdown.total);
        if cfg.tolerance > 0.0
            && t >= STOP_WINDOW
            && (totals[t - STOP_WINDOW] - totals[t]).abs() < cfg.tolerance
        {
            iterations_run = t;
            break;
        }
        let data = logits.data_mut();
        for (z, g) in data.iter_mut().zip(breakdown.grad.data().iter()) {
            *z -= cfg.step_size * g;
        }
        iterations_run = t + 1;
    }

    let final_breakdown = total_loss(&logits, target, classes, &cfg.loss)?;
    trace
        .points
        .push(trace_point(iterations_run, &final_breakdown, &logits, target, classes)?);
    Ok(FitResult { probs: normalize(&logits), trace, iterations_run })
}

fn trace_point(
    iteration: usize,
    breakdown: &crate::composite::LossBreakdown,
    logits: &LogitGrid,
    target: &LabelMask,
    classes: &ClassSet,
) -> Result<TracePoint> {
    let pred = argmax_mask(&normalize(logits));
    Ok(TracePoint {
        iteration,
        multiscale: breakdown.multiscale,
        constraint: breakdown.constraint,
        pixel: breakdown.pixel,
        total: breakdown.total,
        dice_mean: mean_dice(&pred, target, classes)?,
        violations: violation_count(&pred),
    })
}

/// One supervision/evaluation pair for an ablation run. Supervising on
/// corrupted labels while evaluating against the clean mask emulates
/// training with unreliable annotations.
#[derive(Debug, Clone)]
pub struct AblationTarget {
    pub supervise: LabelMask,
    pub evaluate: LabelMask,
}

impl AblationTarget {
    pub fn clean(mask: LabelMask) -> Self {
        AblationTarget { supervise: mask.clone(), evaluate: mask }
    }
}

/// Aggregate outcome of one loss configuration across all targets.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub dice_mean: CiEstimate,
    pub hd95_mean: CiEstimate,
    pub violations_total: CiEstimate,
}

/// Comparison table over loss configurations.
#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Per-(config, target) final metrics backing the aggregates:
    /// `per_run[config][target] = (dice_mean, hd95_mean, violations)`.
    pub per_run: Vec<Vec<(f64, f64, usize)>>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "config,dice_mean,dice_lower,dice_upper,hd95_mean,hd95_lower,hd95_upper,violations_mean,violations_lower,violations_upper\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.config,
                r.dice_mean.mean,
                r.dice_mean.lower,
                r.dice_mean.upper,
                r.hd95_mean.mean,
                r.hd95_mean.lower,
                r.hd95_mean.upper,
                r.violations_total.mean,
                r.violations_total.lower,
                r.violations_total.upper
            ));
        }
        out
    }
}

/// Runs `fit` for every (target, config) pair and aggregates the final
/// metrics per config with bootstrap CIs over targets.
///
/// Runs are paired: target `i` uses the derived seed `(cfg.seed, i)` for
/// its initialization in every config, so configs sharing a base seed
/// see identical inits per target.
pub fn ablate(
    targets: &[AblationTarget],
    configs: &[(String, OptimConfig)],
    classes: &ClassSet,
    bootstrap_resamples: usize,
    confidence_level: f64,
) -> Result<AblationTable> {
    if targets.is_empty() || configs.is_empty() {
        return Err(Error::EmptyInput("ablation needs at least one target and one config"));
    }
    let runs: Vec<Result<(f64, f64, usize)>> = configs
        .par_iter()
        .flat_map(|(_, cfg)| {
            targets.par_iter().enumerate().map(move |(i, target)| {
                let mut run_cfg = cfg.clone();
                run_cfg.seed = seeds::derive_seed(cfg.seed, i as u64);
                let result = fit(&target.supervise, classes, None, &run_cfg)?;
                let pred = argmax_mask(&result.probs);
                let dice = mean_dice(&pred, &target.evaluate, classes)?;
                let mut hd = 0.0;
                for c in 1..classes.len() {
                    hd += hd95(&pred, &target.evaluate, c as u8)?;
                }
                hd /= (classes.len() - 1) as f64;
                Ok((dice, hd, violation_count(&pred).total()))
            })
        })
        .collect();

    let mut per_run: Vec<Vec<(f64, f64, usize)>> = Vec::with_capacity(configs.len());
    let mut it = runs.into_iter();
    for _ in configs {
        let mut row = Vec::with_capacity(targets.len());
        for _ in targets {
            row.push(it.next().expect("run count matches")?);
        }
        per_run.push(row);
    }

    let mut rows = Vec::with_capacity(configs.len());
    for ((name, cfg), runs) in configs.iter().zip(per_run.iter()) {
        let ci = |values: Vec<f64>, col: u64| -> Result<CiEstimate> {
            if values.len() == 1 {
                return Ok(CiEstimate { mean: values[0], lower: values[0], upper: values[0] });
            }
            bootstrap_ci(&values, bootstrap_resamples, confidence_level, seeds::derive_seed(cfg.seed, 1000 + col))
        };
        rows.push(AblationRow {
            config: name.clone(),
            dice_mean: ci(runs.iter().map(|r| r.0).collect(), 0)?,
            hd95_mean: ci(runs.iter().map(|r| r.1).collect(), 1)?,
            violations_total: ci(runs.iter().map(|r| r.2 as f64).collect(), 2)?,
        });
    }
    Ok(AblationTable { rows, per_run })
}
