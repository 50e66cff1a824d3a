//! Monte Carlo estimates of the renewal-theoretic constants behind the
//! asymptotic delay and false-alarm formulas.
//!
//! | quantity                  | walk            | stops at                      |
//! |---------------------------|-----------------|-------------------------------|
//! | `E[S_{T+}]`, `E[S_{T+}²]` | `f1`, gated     | first `S̃_n > 0`               |
//! | `ζ̄` / `η̄`                 | `f1`, gated     | `E[−min_{k≤n} S̃_k]` at `n`    |
//! | `δ̄`                       | `f1`, ungated   | first `S_n > h_probe`         |
//! | `E[e^{S_{T−}}]`, `E[T−]`  | `f0`, ungated   | first `S_n ≤ 0`               |
//! | `E[S̃_{K1}]`               | `f0`, gated     | first `S̃_n < 0`               |
//!
//! Every replication draws from its own streams, so estimates are bit-stable
//! for a given seed whatever the worker count.

use std::io::{BufRead, Write};

use crate::change_model::{ChangeModel, Hypothesis, LlrStats};
use crate::error::{Error, Result};
use crate::gating::{AlwaysOn, GateStrategy};
use crate::rng::{replicate, sub_seed, RunStreams};
use crate::stats::{covariance, Estimate, Moments};

/// Hard cap on the length of one ladder or crossing replication.
pub const STEP_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderMoments {
    pub mean: Estimate,
    pub second: Estimate,
    /// `E[S_{T+}²] / (2 E[S_{T+}])`, delta-method standard error.
    pub kappa_inf: Estimate,
}

/// Walks a gated `f1` random walk to its first strictly positive value.
fn positive_ladder(model: &ChangeModel, gates: &dyn GateStrategy, index: u64, streams: &mut RunStreams) -> Result<f64> {
    let mut gate = gates.spawn();
    let mut s = 0.0;
    for _ in 0..STEP_CAP {
        if gate.next_gate(streams) {
            s += model.sample_llr(Hypothesis::Post, &mut streams.observation);
            if s > 0.0 {
                return Ok(s);
            }
        }
    }
    Err(Error::StepCap { replication: index, cap: STEP_CAP })
}

fn ratio_estimate(num: &[f64], den: &[f64], scale: f64) -> Estimate {
    // value = scale * mean(num) / mean(den)
    let n = num.len() as f64;
    let (mn, md) = (Moments::from_slice(num).mean(), Moments::from_slice(den).mean());
    let (gn, gd) = (scale / md, -scale * mn / (md * md));
    let var = gn * gn * covariance(num, num) + gd * gd * covariance(den, den) + 2.0 * gn * gd * covariance(num, den);
    Estimate {
        value: scale * mn / md,
        stderr: (var / n).sqrt(),
    }
}

pub fn estimate_pos_ladder(
    model: &ChangeModel,
    gates: &dyn GateStrategy,
    n_reps: usize,
    seed: u64,
) -> Result<LadderMoments> {
    model.llr_stats()?;
    let heights = replicate(n_reps, seed, |i, s| positive_ladder(model, gates, i, s))?;
    let squares: Vec<f64> = heights.iter().map(|h| h * h).collect();
    Ok(LadderMoments {
        mean: Estimate::from_samples(&heights),
        second: Estimate::from_samples(&squares),
        kappa_inf: ratio_estimate(&squares, &heights, 0.5),
    })
}

/// `E[−min_{0≤k≤n} S̃_k]` at `n = horizon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationBar {
    pub value: Estimate,
    /// Growth of the estimate between `horizon/2` and `horizon`.
    pub half_horizon_increment: f64,
    pub horizon: u64,
}

pub fn estimate_zeta_eta_bar(
    model: &ChangeModel,
    gates: &dyn GateStrategy,
    n_reps: usize,
    horizon: u64,
    seed: u64,
) -> Result<PerturbationBar> {
    model.llr_stats()?;
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    let half = horizon / 2;
    let pairs = replicate(n_reps, seed, |_, streams| {
        let mut gate = gates.spawn();
        let (mut s, mut min, mut min_half) = (0.0f64, 0.0f64, 0.0f64);
        for slot in 1..=horizon {
            if gate.next_gate(streams) {
                s += model.sample_llr(Hypothesis::Post, &mut streams.observation);
                min = min.min(s);
            }
            if slot == half {
                min_half = min;
            }
        }
        Ok((-min, -min_half))
    })?;
    let at_end: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let at_half: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let value = Estimate::from_samples(&at_end);
    let increment = value.value - Moments::from_slice(&at_half).mean();
    // no half-horizon comparison point exists for horizon 1
    if half >= 1 && increment > 3.0 * value.stderr {
        return Err(Error::NonConvergence {
            what: "running-minimum mean (increase the horizon)",
            iterations: horizon as usize,
            residual: increment,
        });
    }
    Ok(PerturbationBar {
        value,
        half_horizon_increment: increment,
        horizon,
    })
}

/// `E1[exp(−(S_τ − h_probe))]` for the ungated `f1` walk crossing `h_probe`.
pub fn estimate_delta_bar(model: &ChangeModel, h_probe: f64, n_reps: usize, seed: u64) -> Result<Estimate> {
    let stats = model.llr_stats()?;
    if !(h_probe >= 10.0 * stats.i_kl) {
        return Err(Error::InvalidParameter(format!(
            "delta-bar probe threshold {h_probe} is below 10·I_KL = {}",
            10.0 * stats.i_kl
        )));
    }
    let samples = replicate(n_reps, seed, |i, streams| {
        let mut s = 0.0;
        for _ in 0..STEP_CAP {
            s += model.sample_llr(Hypothesis::Post, &mut streams.observation);
            if s > h_probe {
                return Ok((-(s - h_probe)).exp());
            }
        }
        Err(Error::StepCap { replication: i, cap: STEP_CAP })
    })?;
    Ok(Estimate::from_samples(&samples))
}

/// Default probe threshold `25·I_KL`.
pub fn default_h_probe(stats: &LlrStats) -> f64 {
    25.0 * stats.i_kl
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegLadder {
    /// `E0[exp(S_{T−})]`
    pub exp_height: Estimate,
    /// `E0[T−]`
    pub epoch: Estimate,
    /// `E0[S_{T−}]`
    pub height: Estimate,
    /// `(1 − E0[e^{S_{T−}}])² / (I_KL · E0[T−])`
    pub c_inf: Estimate,
}

impl NegLadder {
    /// I.i.d. false-alarm exponent `c(∞)/E0[T−]`.
    pub fn iid_exponent(&self) -> f64 {
        self.c_inf.value / self.epoch.value
    }
}

pub fn estimate_neg_ladder(model: &ChangeModel, n_reps: usize, seed: u64) -> Result<NegLadder> {
    let stats = model.llr_stats()?;
    let reps = replicate(n_reps, seed, |i, streams| {
        let mut s = 0.0;
        for n in 1..=STEP_CAP {
            s += model.sample_llr(Hypothesis::Pre, &mut streams.observation);
            if s <= 0.0 {
                return Ok((s, n as f64));
            }
        }
        Err(Error::StepCap { replication: i, cap: STEP_CAP })
    })?;
    let heights: Vec<f64> = reps.iter().map(|r| r.0).collect();
    let exps: Vec<f64> = heights.iter().map(|s| s.exp()).collect();
    let epochs: Vec<f64> = reps.iter().map(|r| r.1).collect();
    let exp_height = Estimate::from_samples(&exps);
    let epoch = Estimate::from_samples(&epochs);
    let (e, t, i) = (exp_height.value, epoch.value, stats.i_kl);
    let c = (1.0 - e).powi(2) / (i * t);
    let (ge, gt) = (-2.0 * (1.0 - e) / (i * t), -c / t);
    let var = ge * ge * covariance(&exps, &exps) + gt * gt * covariance(&epochs, &epochs) + 2.0 * ge * gt * covariance(&exps, &epochs);
    Ok(NegLadder {
        exp_height,
        epoch,
        height: Estimate::from_samples(&heights),
        c_inf: Estimate {
            value: c,
            stderr: (var / n_reps as f64).sqrt(),
        },
    })
}

/// `E0[S̃_{K1}]`: mean of the gated `f0` walk at its first negative value.
pub fn estimate_s_k1(model: &ChangeModel, gates: &dyn GateStrategy, n_reps: usize, seed: u64) -> Result<Estimate> {
    model.llr_stats()?;
    let samples = replicate(n_reps, seed, |i, streams| {
        let mut gate = gates.spawn();
        let mut s = 0.0;
        for _ in 0..STEP_CAP {
            if gate.next_gate(streams) {
                s += model.sample_llr(Hypothesis::Pre, &mut streams.observation);
                if s < 0.0 {
                    return Ok(s);
                }
            }
        }
        Err(Error::StepCap { replication: i, cap: STEP_CAP })
    })?;
    Ok(Estimate::from_samples(&samples))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenewalSettings {
    pub ladder_reps: usize,
    pub zeta_reps: usize,
    pub horizon: u64,
    pub delta_reps: usize,
    /// `None` selects [`default_h_probe`].
    pub h_probe: Option<f64>,
    pub neg_reps: usize,
}

impl Default for RenewalSettings {
    fn default() -> Self {
        Self {
            ladder_reps: 1_000_000,
            zeta_reps: 100_000,
            horizon: 400,
            delta_reps: 100_000,
            h_probe: None,
            neg_reps: 1_000_000,
        }
    }
}

/// Every constant the asymptotic formulas need, for one gate process.
#[derive(Debug, Clone, PartialEq)]
pub struct RenewalConstants {
    pub gate_mode: String,
    pub sampling_rate: f64,
    pub ladder_mean: Estimate,
    pub ladder_second: Estimate,
    pub kappa_inf: Estimate,
    /// `ζ̄` for the ungated walk, `η̄` for a gated one.
    pub perturbation_bar: Estimate,
    pub delta_bar: Estimate,
    pub neg_ladder_exp: Estimate,
    pub neg_ladder_epoch: Estimate,
    pub neg_ladder_height: Estimate,
    pub c_inf: Estimate,
    pub s_k1_mean: Estimate,
}

const TAG_LADDER: u64 = 1;
const TAG_ZETA: u64 = 2;
const TAG_DELTA: u64 = 3;
const TAG_NEG: u64 = 4;
const TAG_SK1: u64 = 5;

pub fn estimate_constants(
    model: &ChangeModel,
    gates: &dyn GateStrategy,
    settings: &RenewalSettings,
    seed: u64,
) -> Result<RenewalConstants> {
    let stats = model.llr_stats()?;
    let ladder = estimate_pos_ladder(model, gates, settings.ladder_reps, sub_seed(seed, TAG_LADDER))?;
    let zeta = estimate_zeta_eta_bar(model, gates, settings.zeta_reps, settings.horizon, sub_seed(seed, TAG_ZETA))?;
    let h_probe = settings.h_probe.unwrap_or_else(|| default_h_probe(&stats));
    let delta_bar = estimate_delta_bar(model, h_probe, settings.delta_reps, sub_seed(seed, TAG_DELTA))?;
    let neg = estimate_neg_ladder(model, settings.neg_reps, sub_seed(seed, TAG_NEG))?;
    let s_k1 = estimate_s_k1(model, gates, settings.neg_reps, sub_seed(seed, TAG_SK1))?;
    Ok(RenewalConstants {
        gate_mode: gates.name().to_string(),
        sampling_rate: gates.sampling_rate(),
        ladder_mean: ladder.mean,
        ladder_second: ladder.second,
        kappa_inf: ladder.kappa_inf,
        perturbation_bar: zeta.value,
        delta_bar,
        neg_ladder_exp: neg.exp_height,
        neg_ladder_epoch: neg.epoch,
        neg_ladder_height: neg.height,
        c_inf: neg.c_inf,
        s_k1_mean: s_k1,
    })
}

/// Ungated constants.
pub fn estimate_surplus_constants(model: &ChangeModel, settings: &RenewalSettings, seed: u64) -> Result<RenewalConstants> {
    estimate_constants(model, &AlwaysOn, settings, seed)
}

impl RenewalConstants {
    /// `κ∞` from the running-minimum route: `E1[Z²]/(2 I_KL) − ζ̄`.
    pub fn kappa_inf_alternative(&self, stats: &LlrStats) -> Estimate {
        Estimate {
            value: stats.z_second_moment_post / (2.0 * stats.i_kl) - self.perturbation_bar.value,
            stderr: self.perturbation_bar.stderr,
        }
    }

    fn fields(&self) -> [(&'static str, Estimate); 11] {
        [
            ("ladder_mean", self.ladder_mean),
            ("ladder_second", self.ladder_second),
            ("kappa_inf", self.kappa_inf),
            ("perturbation_bar", self.perturbation_bar),
            ("delta_bar", self.delta_bar),
            ("neg_ladder_exp", self.neg_ladder_exp),
            ("neg_ladder_epoch", self.neg_ladder_epoch),
            ("neg_ladder_height", self.neg_ladder_height),
            ("c_inf", self.c_inf),
            ("s_k1_mean", self.s_k1_mean),
            ("sampling_rate", Estimate::exact(self.sampling_rate)),
        ]
    }

    /// Rows `group,name,value,stderr`; pass `header = true` for the first group of a file.
    pub fn write_csv<W: Write>(&self, group: &str, header: bool, mut out: W) -> std::io::Result<()> {
        if header {
            writeln!(out, "group,name,value,stderr")?;
        }
        writeln!(out, "{group},gate_mode,{},0", self.gate_mode)?;
        for (name, e) in self.fields() {
            writeln!(out, "{group},{name},{},{}", e.value, e.stderr)?;
        }
        Ok(())
    }

    /// Reads every group written by [`Self::write_csv`], in file order.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<(String, RenewalConstants)>> {
        type Rows = Vec<(String, String, String)>;
        let mut groups: Vec<(String, Rows)> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let [group, name, value, stderr] = cols[..] else {
                return Err(Error::Config(format!("constants line {}: expected 4 columns", lineno + 1)));
            };
            if groups.last().is_none_or(|g| g.0 != group) {
                groups.push((group.to_string(), Vec::new()));
            }
            let rows = &mut groups.last_mut().expect("just pushed").1;
            rows.push((name.to_string(), value.to_string(), stderr.to_string()));
        }
        groups
            .into_iter()
            .map(|(group, rows)| {
                let text = |key: &str| {
                    rows.iter()
                        .find(|r| r.0 == key)
                        .ok_or_else(|| Error::MissingKey(format!("{group}.{key}")))
                };
                let est = |key: &str| -> Result<Estimate> {
                    let r = text(key)?;
                    let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("{group}.{key}: {e}")));
                    Ok(Estimate {
                        value: parse(&r.1)?,
                        stderr: parse(&r.2)?,
                    })
                };
                let c = RenewalConstants {
                    gate_mode: text("gate_mode")?.1.clone(),
                    sampling_rate: est("sampling_rate")?.value,
                    ladder_mean: est("ladder_mean")?,
                    ladder_second: est("ladder_second")?,
                    kappa_inf: est("kappa_inf")?,
                    perturbation_bar: est("perturbation_bar")?,
                    delta_bar: est("delta_bar")?,
                    neg_ladder_exp: est("neg_ladder_exp")?,
                    neg_ladder_epoch: est("neg_ladder_epoch")?,
                    neg_ladder_height: est("neg_ladder_height")?,
                    c_inf: est("c_inf")?,
                    s_k1_mean: est("s_k1_mean")?,
                };
                Ok((group, c))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::StationaryChain;
    use crate::rng::{stream, Lane};
    use crate::stationary::XiChain;

    fn model() -> ChangeModel {
        ChangeModel::new(0.0, 0.5, 1.0).unwrap()
    }

    #[test]
    fn ladder_reproducible_across_seeds() {
        let a = estimate_pos_ladder(&model(), &AlwaysOn, 200_000, 1).unwrap();
        let b = estimate_pos_ladder(&model(), &AlwaysOn, 200_000, 2).unwrap();
        assert!(a.mean.agrees_with(&b.mean, 4.0));
        assert!(a.second.agrees_with(&b.second, 4.0));
    }

    #[test]
    fn huge_drift_ladder_is_one_step() {
        // gap of 10σ: P(Z1 <= 0) = Φ(−5) ≈ 3e-7
        let m = ChangeModel::new(0.0, 10.0, 1.0).unwrap();
        let l = estimate_pos_ladder(&m, &AlwaysOn, 100_000, 3).unwrap();
        let i_kl = m.llr_stats().unwrap().i_kl;
        assert!((l.mean.value - i_kl).abs() < 4.0 * l.mean.stderr + 1e-3, "{:?}", l.mean);
    }

    #[test]
    fn zeta_one_step_is_negative_part() {
        let m = model();
        let z = estimate_zeta_eta_bar(&m, &AlwaysOn, 400_000, 1, 4).unwrap();
        // independent one-step oracle: E[max(0, −Z1)] under f1
        let mut rng = stream(99, 0, Lane::Observation);
        let direct: Vec<f64> = (0..400_000).map(|_| (-m.sample_llr(Hypothesis::Post, &mut rng)).max(0.0)).collect();
        assert!(z.value.agrees_with(&Estimate::from_samples(&direct), 4.0));
    }

    #[test]
    fn zeta_short_horizon_is_flagged() {
        let err = estimate_zeta_eta_bar(&model(), &AlwaysOn, 50_000, 4, 5).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn always_open_chain_matches_ungated() {
        // a chain that never leaves state 1 in practice
        let chain = StationaryChain {
            chain: XiChain::new(0.5, 1.0 - 1e-15).unwrap(),
            initial_gate: true,
        };
        let a = estimate_zeta_eta_bar(&model(), &AlwaysOn, 20_000, 200, 6).unwrap();
        let b = estimate_zeta_eta_bar(&model(), &chain, 20_000, 200, 6).unwrap();
        assert_eq!(a.value, b.value);
        let a = estimate_s_k1(&model(), &AlwaysOn, 20_000, 7).unwrap();
        let b = estimate_s_k1(&model(), &chain, 20_000, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn delta_bar_bounds_and_precondition() {
        let d = estimate_delta_bar(&model(), 3.125, 20_000, 8).unwrap();
        assert!(d.value > 0.0 && d.value <= 1.0);
        assert!(estimate_delta_bar(&model(), 1.0, 10, 8).is_err());
    }

    #[test]
    fn neg_ladder_bounds() {
        let n = estimate_neg_ladder(&model(), 100_000, 9).unwrap();
        assert!(n.exp_height.value > 0.0 && n.exp_height.value < 1.0);
        assert!(n.height.value < 0.0);
        assert!(n.epoch.value > 1.0);
        // Wald: E[S_{T−}] = −I0·E[T−]
        assert!((n.height.value + 0.125 * n.epoch.value).abs() < 0.02);
    }

    #[test]
    fn huge_negative_drift_epoch_is_one() {
        let m = ChangeModel::new(0.0, 10.0, 1.0).unwrap();
        let n = estimate_neg_ladder(&m, 50_000, 10).unwrap();
        assert!((n.epoch.value - 1.0).abs() < 1e-3);
    }

    #[test]
    fn s_k1_is_negative() {
        let chain = StationaryChain {
            chain: XiChain::new(0.4, 0.8).unwrap(),
            initial_gate: true,
        };
        assert!(estimate_s_k1(&model(), &chain, 20_000, 11).unwrap().value < 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let settings = RenewalSettings {
            ladder_reps: 2_000,
            zeta_reps: 2_000,
            horizon: 200,
            delta_reps: 2_000,
            h_probe: None,
            neg_reps: 2_000,
        };
        let c = estimate_surplus_constants(&model(), &settings, 12).unwrap();
        let mut buf = Vec::new();
        c.write_csv("surplus", true, &mut buf).unwrap();
        c.write_csv("deficit:0.4", false, &mut buf).unwrap();
        let back = RenewalConstants::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1, c);
        assert_eq!(back[1].0, "deficit:0.4");
    }
}
