//! Closed-form asymptotic predictions.
//!
//! Surplus regime (`H̄ ≥ E_s`), ungated constants:
//!
//! ```text
//! E1[τ(h)] ≈ (h + E[S_{T+}²]/E[S_{T+}] − E1[Z²]/(2 I_KL)) / I_KL
//! β̄        = I_KL · δ̄²,             E∞[τ] ≈ e^h / β̄
//! ```
//!
//! Deficit regime (`H̄ < E_s`), gated constants and sampling rate `π1`:
//!
//! ```text
//! E1[τ̂(h)] ≈ (h + E[S̃_{T+}²]/(2 E[S̃_{T+}]) − η̄) / (π1 · I_KL)
//! β_MRW    = π1 · I0 · c(∞) / (−E∞[S̃_{K1}]),   E∞[τ̂] ≈ e^h / β_MRW
//! ```

use std::io::Write;

use crate::change_model::LlrStats;
use crate::error::{Error, Result};
use crate::renewal::RenewalConstants;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Surplus,
    Deficit,
}

impl Regime {
    /// `H̄ ≥ E_s` is surplus.
    pub fn of(harvest_mean: f64, sense_cost: f64) -> Self {
        if harvest_mean >= sense_cost {
            Regime::Surplus
        } else {
            Regime::Deficit
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Surplus => "surplus",
            Regime::Deficit => "deficit",
        }
    }
}

fn check_ladder(consts: &RenewalConstants) -> Result<(f64, f64)> {
    let (m, s) = (consts.ladder_mean.value, consts.ladder_second.value);
    if !(m > 0.0 && s > 0.0 && m.is_finite() && s.is_finite()) {
        return Err(Error::InvalidParameter("ladder moments missing from renewal constants".into()));
    }
    Ok((m, s))
}

pub fn predict_delay_surplus(stats: &LlrStats, consts: &RenewalConstants, h: f64) -> Result<f64> {
    let (mean, second) = check_ladder(consts)?;
    Ok((h + second / mean - stats.z_second_moment_post / (2.0 * stats.i_kl)) / stats.i_kl)
}

/// `pi1 = 1` with ungated constants reproduces [`predict_delay_surplus`]
/// up to Monte Carlo error in the constants.
pub fn predict_delay_deficit(stats: &LlrStats, consts: &RenewalConstants, pi1: f64, h: f64) -> Result<f64> {
    if !(pi1 > 0.0 && pi1 <= 1.0) {
        return Err(Error::InvalidParameter(format!("sampling rate pi1 must be in (0, 1], got {pi1}")));
    }
    let (mean, second) = check_ladder(consts)?;
    let eta_bar = consts.perturbation_bar.value;
    if !eta_bar.is_finite() {
        return Err(Error::InvalidParameter("eta-bar missing from renewal constants".into()));
    }
    Ok((h + second / (2.0 * mean) - eta_bar) / (pi1 * stats.i_kl))
}

/// `(β̄, e^h/β̄)`.
pub fn predict_fa_surplus(stats: &LlrStats, consts: &RenewalConstants, h: f64) -> Result<(f64, f64)> {
    let delta = consts.delta_bar.value;
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParameter(format!("delta-bar must be in (0, 1], got {delta}")));
    }
    let beta = stats.i_kl * delta * delta;
    Ok((beta, h.exp() / beta))
}

/// `(β_MRW, e^h/β_MRW)`.
pub fn predict_fa_deficit(stats: &LlrStats, consts: &RenewalConstants, pi1: f64, h: f64) -> Result<(f64, f64)> {
    let s_k1 = consts.s_k1_mean.value;
    if !(s_k1 < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "first negative ladder mean must be < 0, got {s_k1}"
        )));
    }
    if !(pi1 > 0.0 && pi1 <= 1.0) {
        return Err(Error::InvalidParameter(format!("sampling rate pi1 must be in (0, 1], got {pi1}")));
    }
    let beta = -pi1 * stats.i0 * consts.c_inf.value / s_k1;
    Ok((beta, h.exp() / beta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub regime: Regime,
    pub harvest_mean: f64,
    pub sense_cost: f64,
    pub threshold: f64,
    pub pi1: f64,
    pub expected_delay: f64,
    /// `β̄` (surplus) or `β_MRW` (deficit).
    pub fa_exponent: f64,
    pub arl2fa: f64,
    /// `π1 · β̄`, the cross-check printed next to `β_MRW`.
    pub pi1_beta_bar: f64,
}

pub const PREDICTION_CSV_HEADER: &str =
    "regime,harvest_mean,sense_cost,h,pi1,predicted_delay,fa_exponent,arl2fa,pi1_beta_bar";

impl Prediction {
    /// Routes `H̄ ≥ E_s` to the surplus formulas; deficit rows need gated
    /// constants and the stationary sampling rate.
    pub fn new(
        stats: &LlrStats,
        surplus: &RenewalConstants,
        deficit: Option<(&RenewalConstants, f64)>,
        harvest_mean: f64,
        sense_cost: f64,
        h: f64,
    ) -> Result<Self> {
        let regime = Regime::of(harvest_mean, sense_cost);
        let (beta_bar, _) = predict_fa_surplus(stats, surplus, h)?;
        let (pi1, expected_delay, fa_exponent, arl2fa) = match regime {
            Regime::Surplus => {
                let (b, arl) = predict_fa_surplus(stats, surplus, h)?;
                (1.0, predict_delay_surplus(stats, surplus, h)?, b, arl)
            }
            Regime::Deficit => {
                let (gated, pi1) = deficit.ok_or_else(|| {
                    Error::InvalidParameter(format!("deficit row H = {harvest_mean} needs gated constants"))
                })?;
                let (b, arl) = predict_fa_deficit(stats, gated, pi1, h)?;
                (pi1, predict_delay_deficit(stats, gated, pi1, h)?, b, arl)
            }
        };
        Ok(Self {
            regime,
            harvest_mean,
            sense_cost,
            threshold: h,
            pi1,
            expected_delay,
            fa_exponent,
            arl2fa,
            pi1_beta_bar: pi1 * beta_bar,
        })
    }

    pub fn write_csv_row<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            self.regime.as_str(),
            self.harvest_mean,
            self.sense_cost,
            self.threshold,
            self.pi1,
            self.expected_delay,
            self.fa_exponent,
            self.arl2fa,
            self.pi1_beta_bar
        )
    }
}
