//! Replication harness: detection-delay runs, false-alarm run lengths and
//! tail-exponent fitting.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::change_model::{ChangeModel, LlrStats};
use crate::detector::{run_until_threshold, ChangePoint, StoppingRecord};
use crate::error::{Error, Result};
use crate::gating::GateStrategy;
use crate::rng::replicate;
use crate::stats::{correlation, ks_statistic, linear_fit, Moments};

/// Below this many uncensored false-alarm runs no tail fit is attempted.
pub const MIN_TAIL_POINTS: usize = 500;
pub const DEFAULT_TAIL_WINDOW: (f64, f64) = (0.1, 0.9);
/// Censoring above this fraction of runs flags the result.
pub const CENSORING_LIMIT: f64 = 0.01;

#[derive(Clone)]
pub struct ExperimentConfig {
    pub model: ChangeModel,
    pub gates: Arc<dyn GateStrategy>,
    pub h: f64,
    pub n_runs: usize,
    pub master_seed: u64,
    pub max_steps: u64,
    pub change_point: ChangePoint,
    /// Quantile window of the tail fit.
    pub tail_window: (f64, f64),
}

impl fmt::Debug for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExperimentConfig")
            .field("model", &self.model)
            .field("gate_mode", &self.gates.name())
            .field("h", &self.h)
            .field("n_runs", &self.n_runs)
            .field("master_seed", &self.master_seed)
            .field("max_steps", &self.max_steps)
            .field("change_point", &self.change_point)
            .finish()
    }
}

impl ExperimentConfig {
    /// Delay experiment with the change at slot 1.
    pub fn delay(model: ChangeModel, gates: Arc<dyn GateStrategy>, h: f64, n_runs: usize, master_seed: u64) -> Self {
        Self {
            model,
            gates,
            h,
            n_runs,
            master_seed,
            max_steps: 1_000_000,
            change_point: ChangePoint::At(1),
            tail_window: DEFAULT_TAIL_WINDOW,
        }
    }

    /// False-alarm experiment with [`default_fa_max_steps`].
    pub fn false_alarm(
        model: ChangeModel,
        gates: Arc<dyn GateStrategy>,
        h: f64,
        n_runs: usize,
        master_seed: u64,
    ) -> Result<Self> {
        let max_steps = default_fa_max_steps(&model.llr_stats()?, h);
        Ok(Self {
            model,
            gates,
            h,
            n_runs,
            master_seed,
            max_steps,
            change_point: ChangePoint::Never,
            tail_window: DEFAULT_TAIL_WINDOW,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::InvalidParameter("n_runs must be >= 1".into()));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidParameter(format!("threshold must be > 0, got {}", self.h)));
        }
        let (lo, hi) = self.tail_window;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::InvalidParameter(format!("bad tail window [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Generous horizon for false-alarm runs: 50·e^h/I_KL slots, far beyond
/// the e^h/β mean for any exponent this model produces.
pub fn default_fa_max_steps(stats: &LlrStats, h: f64) -> u64 {
    (50.0 * h.exp() / stats.i_kl).ceil().min(1e15) as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub mean_stop: f64,
    pub stderr: f64,
    pub n_runs: usize,
    pub censored_count: usize,
    pub records: Vec<StoppingRecord>,
    pub tail_fit: Option<TailFit>,
    pub censoring_warning: bool,
}

impl ExperimentResult {
    /// Uncensored stop times, in run order.
    pub fn run_lengths(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.stopped).map(|r| r.stop_time as f64).collect()
    }

    pub fn fitted_exponent(&self) -> Option<f64> {
        self.tail_fit.map(|f| f.exponent)
    }

    pub fn fit_r2(&self) -> Option<f64> {
        self.tail_fit.map(|f| f.r2)
    }
}

fn run_all(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let records = replicate(cfg.n_runs, cfg.master_seed, |_, streams| {
        let mut gates = cfg.gates.spawn();
        run_until_threshold(&cfg.model, gates.as_mut(), cfg.h, cfg.change_point, cfg.max_steps, streams)
    })?;
    let mut m = Moments::default();
    for r in records.iter().filter(|r| r.stopped) {
        m.push(r.stop_time as f64);
    }
    let censored_count = cfg.n_runs - m.count() as usize;
    Ok(ExperimentResult {
        mean_stop: m.mean(),
        stderr: m.stderr(),
        n_runs: cfg.n_runs,
        censored_count,
        records,
        tail_fit: None,
        censoring_warning: censored_count as f64 > CENSORING_LIMIT * cfg.n_runs as f64,
    })
}

pub fn run_delay_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.change_point == ChangePoint::Never {
        return Err(Error::InvalidParameter("delay experiment needs a finite change point".into()));
    }
    run_all(cfg)
}

pub fn run_fa_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.change_point != ChangePoint::Never {
        return Err(Error::InvalidParameter("false-alarm experiment needs change_point = never".into()));
    }
    let mut result = run_all(cfg)?;
    let lengths = result.run_lengths();
    if lengths.len() >= MIN_TAIL_POINTS {
        // A degenerate sample (e.g. all runs stopping at slot 1) has no tail to fit.
        result.tail_fit = fit_tail_window(&lengths, cfg.h, cfg.tail_window).ok();
    }
    Ok(result)
}

/// Empirical `(x, ln P(X > x))` at each distinct `x = e^{-h}·τ`, dropping
/// the last point where the survival is zero.
pub fn survival_curve(run_lengths: &[f64], h: f64) -> Vec<(f64, f64)> {
    let scale = (-h).exp();
    let mut xs: Vec<f64> = run_lengths.iter().map(|t| t * scale).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut out = Vec::new();
    let mut i = 0;
    while i < xs.len() {
        let mut j = i;
        while j < xs.len() && xs[j] == xs[i] {
            j += 1;
        }
        let above = (xs.len() - j) as f64;
        if above > 0.0 {
            out.push((xs[i], (above / n).ln()));
        }
        i = j;
    }
    out
}

pub fn fit_tail_exponent(run_lengths: &[f64], h: f64) -> Result<(f64, f64)> {
    let fit = fit_tail_window(run_lengths, h, DEFAULT_TAIL_WINDOW)?;
    Ok((fit.exponent, fit.r2))
}

/// Least-squares slope of the log-survival of `e^{-h}·τ` over the given
/// quantile window, with a free intercept.
pub fn fit_tail_window(run_lengths: &[f64], h: f64, window: (f64, f64)) -> Result<TailFit> {
    if run_lengths.len() < MIN_TAIL_POINTS {
        return Err(Error::InvalidParameter(format!(
            "tail fit needs at least {MIN_TAIL_POINTS} run lengths, got {}",
            run_lengths.len()
        )));
    }
    let mut sorted: Vec<f64> = run_lengths.iter().map(|t| t * (-h).exp()).collect();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| sorted[((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
    let (lo, hi) = (quantile(window.0), quantile(window.1));
    let (xs, ys): (Vec<f64>, Vec<f64>) = survival_curve(run_lengths, h)
        .into_iter()
        .filter(|&(x, _)| x >= lo && x <= hi)
        .unzip();
    let fit = linear_fit(&xs, &ys)
        .filter(|f| f.r2.is_finite())
        .ok_or_else(|| Error::Degenerate("run lengths have no spread inside the tail-fit window".into()))?;
    Ok(TailFit {
        exponent: -fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        points: xs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalityCheck {
    /// KS distance of the standardized delays from N(0, 1).
    pub ks: f64,
    /// Sample correlation between standardized delay and overshoot.
    pub overshoot_correlation: f64,
    pub samples: usize,
}

/// Standardizes `τ̄ = (τ − h/I)/sqrt(h σ1²/I³)` over stopped runs.
pub fn normality_of(records: &[StoppingRecord], stats: &LlrStats, h: f64) -> Result<NormalityCheck> {
    let i = stats.i_kl;
    let scale = (h * stats.z_variance_post / i.powi(3)).sqrt();
    let (taus, kappas): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter(|r| r.stopped)
        .map(|r| ((r.stop_time as f64 - h / i) / scale, r.overshoot))
        .unzip();
    if taus.len() < 2 {
        return Err(Error::Degenerate("fewer than two stopped runs".into()));
    }
    let normal = Normal::standard();
    Ok(NormalityCheck {
        ks: ks_statistic(&taus, |x| normal.cdf(x)),
        overshoot_correlation: correlation(&taus, &kappas),
        samples: taus.len(),
    })
}

pub fn delay_distribution_check(cfg: &ExperimentConfig) -> Result<NormalityCheck> {
    let stats = cfg.model.llr_stats()?;
    let result = run_delay_experiment(cfg)?;
    normality_of(&result.records, &stats, cfg.h)
}

pub fn write_runs_csv<W: Write>(records: &[StoppingRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "run_index,stop_time,overshoot,censored")?;
    for (i, r) in records.iter().enumerate() {
        if r.stopped {
            writeln!(out, "{i},{},{},0", r.stop_time, r.overshoot)?;
        } else {
            writeln!(out, "{i},{},,1", r.stop_time)?;
        }
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `key,value` rows: a config echo followed by the result.
pub fn write_summary_csv<W: Write>(cfg: &ExperimentConfig, result: &ExperimentResult, mut out: W) -> std::io::Result<()> {
    let change_point = match cfg.change_point {
        ChangePoint::At(nu) => nu.to_string(),
        ChangePoint::Never => "never".into(),
    };
    let rows: Vec<(&str, String)> = vec![
        ("m0", cfg.model.m0.to_string()),
        ("m1", cfg.model.m1.to_string()),
        ("sigma", cfg.model.sigma.to_string()),
        ("gate_mode", cfg.gates.name().into()),
        ("sampling_rate", cfg.gates.sampling_rate().to_string()),
        ("h", cfg.h.to_string()),
        ("n_runs", cfg.n_runs.to_string()),
        ("master_seed", cfg.master_seed.to_string()),
        ("max_steps", cfg.max_steps.to_string()),
        ("change_point", change_point),
        ("mean_stop", result.mean_stop.to_string()),
        ("stderr", result.stderr.to_string()),
        ("censored_count", result.censored_count.to_string()),
        ("censoring_warning", result.censoring_warning.to_string()),
        ("fitted_exponent", opt(result.fitted_exponent())),
        ("fit_r2", opt(result.fit_r2())),
    ];
    writeln!(out, "key,value")?;
    for (k, v) in rows {
        writeln!(out, "{k},{v}")?;
    }
    Ok(())
}

pub fn write_survival_csv<W: Write>(curve: &[(f64, f64)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "x,log_survival")?;
    for (x, s) in curve {
        writeln!(out, "{x},{s}")?;
    }
    Ok(())
}
