//! CUSUM recursions and first-passage runs.
//!
//! ```text
//! W_k = max(0, W_{k-1} + Z_k)          classic
//! W̄_k = max(0, W̄_{k-1} + ξ_k·Z_k)      gated
//! τ(h) = inf{n ≥ 1 : W_n > h}
//! ```

use crate::change_model::{ChangeModel, Hypothesis};
use crate::error::{ensure_finite, Error, Result};
use crate::gating::GateProcess;
use crate::rng::RunStreams;

/// Reflected statistic together with the unreflected walk it is built from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CusumState {
    pub statistic: f64,
    pub steps_elapsed: u64,
    /// Sum of the applied increments, `S_n` or `S̃_n`.
    pub walk: f64,
    /// `min_{0≤k≤n}` of the walk; always ≤ 0.
    pub path_min: f64,
}

impl CusumState {
    #[inline]
    fn apply(&mut self, z: f64) {
        self.statistic = (self.statistic + z).max(0.0);
        self.walk += z;
        self.path_min = self.path_min.min(self.walk);
    }

    /// `-min_k S_k`, the perturbation term `ζ_n` (or `η_n` when gated).
    pub fn perturbation(&self) -> f64 {
        -self.path_min
    }
}

pub fn cusum_step(mut state: CusumState, z: f64) -> Result<CusumState> {
    ensure_finite("llr increment", z)?;
    state.apply(z);
    state.steps_elapsed += 1;
    Ok(state)
}

/// Skipped slots (`gate = false`) advance the clock and nothing else.
pub fn gated_cusum_step(mut state: CusumState, z: f64, gate: bool) -> Result<CusumState> {
    ensure_finite("llr increment", z)?;
    if gate {
        state.apply(z);
    }
    state.steps_elapsed += 1;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangePoint {
    /// Observations from slot `k` on follow `f1`.
    At(u64),
    Never,
}

impl ChangePoint {
    #[inline]
    pub fn hypothesis(&self, slot: u64) -> Hypothesis {
        match *self {
            ChangePoint::At(nu) if slot >= nu => Hypothesis::Post,
            _ => Hypothesis::Pre,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoppingRecord {
    /// First slot with statistic above the threshold, or `max_steps` when censored.
    pub stop_time: u64,
    /// `W_τ − h`; NaN for censored runs.
    pub overshoot: f64,
    pub stopped: bool,
}

/// Runs the (gated) CUSUM until it exceeds `h` or `max_steps` slots pass.
///
/// An observation is drawn only in slots where the gate is open, so the
/// sequence of applied increments does not depend on the gate process.
pub fn run_until_threshold(
    model: &ChangeModel,
    gates: &mut dyn GateProcess,
    h: f64,
    change_point: ChangePoint,
    max_steps: u64,
    streams: &mut RunStreams,
) -> Result<StoppingRecord> {
    model.llr_stats()?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("threshold must be > 0, got {h}")));
    }
    if max_steps == 0 {
        return Err(Error::InvalidParameter("max_steps must be >= 1".into()));
    }
    let mut w = 0.0f64;
    for slot in 1..=max_steps {
        if gates.next_gate(streams) {
            let z = model.sample_llr(change_point.hypothesis(slot), &mut streams.observation);
            w = (w + z).max(0.0);
            if w > h {
                return Ok(StoppingRecord {
                    stop_time: slot,
                    overshoot: w - h,
                    stopped: true,
                });
            }
        }
    }
    Ok(StoppingRecord {
        stop_time: max_steps,
        overshoot: f64::NAN,
        stopped: false,
    })
}
