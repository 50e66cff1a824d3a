//! Gate processes deciding, slot by slot, whether the sensor can sample.
//!
//! Every mode implements [`GateStrategy`] and is looked up by name in a
//! [`GateRegistry`]:
//!
//! | name               | gate sequence                                          |
//! |--------------------|--------------------------------------------------------|
//! | `always-on`        | `ξ_k ≡ 1`, the ungated CUSUM                           |
//! | `full-battery`     | battery recursion driven by the harvest distribution   |
//! | `stationary-chain` | two-state Markov chain with the stationary `(α̃, β̃)`   |
//!
//! A strategy is immutable and shared across workers; each replication
//! spawns its own [`GateProcess`] state machine.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::harvest::{BatteryState, HarvestModel};
use crate::rng::RunStreams;
use crate::stationary::XiChain;

pub const ALWAYS_ON: &str = "always-on";
pub const FULL_BATTERY: &str = "full-battery";
pub const STATIONARY_CHAIN: &str = "stationary-chain";

/// Per-replication gate state machine.
pub trait GateProcess {
    /// Gate of the next slot. Draws from the harvest or gate lane only.
    fn next_gate(&mut self, streams: &mut RunStreams) -> bool;
}

pub trait GateStrategy: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    /// Long-run fraction of slots with gate = 1.
    fn sampling_rate(&self) -> f64;
    fn spawn(&self) -> Box<dyn GateProcess>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysOn;

struct AlwaysOnProcess;

impl GateProcess for AlwaysOnProcess {
    #[inline]
    fn next_gate(&mut self, _: &mut RunStreams) -> bool {
        true
    }
}

impl GateStrategy for AlwaysOn {
    fn name(&self) -> &'static str {
        ALWAYS_ON
    }
    fn sampling_rate(&self) -> f64 {
        1.0
    }
    fn spawn(&self) -> Box<dyn GateProcess> {
        Box::new(AlwaysOnProcess)
    }
}

/// Gates from the battery recursion, starting at `initial`.
///
/// The battery first runs `warmup` slots on its own (sensing whenever it
/// can), so monitoring starts from a sensor that has been in service.
#[derive(Debug, Clone)]
pub struct FullBattery {
    pub harvest: HarvestModel,
    pub initial: BatteryState,
    pub warmup: u64,
}

struct BatteryProcess {
    harvest: HarvestModel,
    state: BatteryState,
    warmup: u64,
}

impl GateProcess for BatteryProcess {
    #[inline]
    fn next_gate(&mut self, streams: &mut RunStreams) -> bool {
        if self.warmup > 0 {
            for _ in 0..std::mem::take(&mut self.warmup) {
                let h = self.harvest.sample_harvest(&mut streams.harvest);
                self.state.advance(h);
            }
        }
        let h = self.harvest.sample_harvest(&mut streams.harvest);
        self.state.advance(h)
    }
}

impl GateStrategy for FullBattery {
    fn name(&self) -> &'static str {
        FULL_BATTERY
    }
    fn sampling_rate(&self) -> f64 {
        (self.harvest.mean() / self.initial.sense_cost).min(1.0)
    }
    fn spawn(&self) -> Box<dyn GateProcess> {
        Box::new(BatteryProcess {
            harvest: self.harvest.clone(),
            state: self.initial,
            warmup: self.warmup,
        })
    }
}

/// Two-state gate chain. The first slot uses `initial_gate`; later slots
/// follow the transition matrix.
#[derive(Debug, Clone, Copy)]
pub struct StationaryChain {
    pub chain: XiChain,
    pub initial_gate: bool,
}

struct ChainProcess {
    stay_off: f64,
    stay_on: f64,
    state: Option<bool>,
    initial: bool,
}

impl GateProcess for ChainProcess {
    #[inline]
    fn next_gate(&mut self, streams: &mut RunStreams) -> bool {
        let next = match self.state {
            None => self.initial,
            Some(prev) => {
                let u: f64 = streams.gate.random();
                if prev {
                    u < self.stay_on
                } else {
                    u >= self.stay_off
                }
            }
        };
        self.state = Some(next);
        next
    }
}

impl GateStrategy for StationaryChain {
    fn name(&self) -> &'static str {
        STATIONARY_CHAIN
    }
    fn sampling_rate(&self) -> f64 {
        self.chain.pi1
    }
    fn spawn(&self) -> Box<dyn GateProcess> {
        Box::new(ChainProcess {
            stay_off: self.chain.alpha,
            stay_on: self.chain.beta,
            state: None,
            initial: self.initial_gate,
        })
    }
}

/// Inputs a gate factory may need.
#[derive(Debug, Clone, Default)]
pub struct GateContext {
    pub harvest: Option<HarvestModel>,
    pub sense_cost: Option<f64>,
    /// Starting battery level; defaults to one sensing cost.
    pub initial_level: Option<f64>,
    pub chain: Option<XiChain>,
    /// Battery slots simulated before monitoring starts.
    pub warmup: u64,
}

pub type GateFactory = fn(&GateContext) -> Result<Arc<dyn GateStrategy>>;

/// Gate strategies by name.
pub struct GateRegistry {
    factories: BTreeMap<&'static str, GateFactory>,
}

impl Default for GateRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register(ALWAYS_ON, |_| Ok(Arc::new(AlwaysOn)));
        r.register(FULL_BATTERY, |ctx| {
            let harvest = ctx
                .harvest
                .clone()
                .ok_or_else(|| Error::InvalidParameter("full-battery gating requires a harvest model".into()))?;
            let cost = ctx
                .sense_cost
                .ok_or_else(|| Error::InvalidParameter("full-battery gating requires a sensing cost".into()))?;
            let initial = BatteryState::new(ctx.initial_level.unwrap_or(cost), cost)?;
            Ok(Arc::new(FullBattery {
                harvest,
                initial,
                warmup: ctx.warmup,
            }))
        });
        r.register(STATIONARY_CHAIN, |ctx| {
            let chain = ctx
                .chain
                .ok_or_else(|| Error::InvalidParameter("stationary-chain gating requires a solved gate chain".into()))?;
            Ok(Arc::new(StationaryChain {
                chain,
                initial_gate: true,
            }))
        });
        r
    }
}

impl GateRegistry {
    pub fn register(&mut self, name: &'static str, factory: GateFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, name: &str, ctx: &GateContext) -> Result<Arc<dyn GateStrategy>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown gate mode `{name}` (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(alpha: f64, beta: f64) -> XiChain {
        XiChain::new(alpha, beta).unwrap()
    }

    #[test]
    fn registry_builds_every_mode() {
        let reg = GateRegistry::default();
        let ctx = GateContext {
            harvest: Some(HarvestModel::exponential(0.4).unwrap()),
            sense_cost: Some(0.5),
            initial_level: None,
            chain: Some(chain(0.3, 0.8)),
            warmup: 0,
        };
        for name in reg.names().collect::<Vec<_>>() {
            let s = reg.build(name, &ctx).unwrap();
            assert_eq!(s.name(), name);
        }
        assert_eq!(reg.build("solar", &ctx).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn modes_report_missing_inputs() {
        let reg = GateRegistry::default();
        assert!(reg.build(FULL_BATTERY, &GateContext::default()).is_err());
        assert!(reg.build(STATIONARY_CHAIN, &GateContext::default()).is_err());
    }

    #[test]
    fn chain_frequencies_match_transition_matrix() {
        let xi = chain(0.25, 0.85);
        let strategy = StationaryChain { chain: xi, initial_gate: true };
        let mut p = strategy.spawn();
        let mut streams = RunStreams::new(1, 0);
        assert!(p.next_gate(&mut streams));
        let gates: Vec<bool> = (0..1_000_000).map(|_| p.next_gate(&mut streams)).collect();
        let on = gates.iter().filter(|&&g| g).count() as f64 / gates.len() as f64;
        assert!((on - xi.pi1).abs() < 0.005, "{on} vs {}", xi.pi1);
        let (mut off_off, mut off) = (0usize, 0usize);
        for w in gates.windows(2) {
            if !w[0] {
                off += 1;
                off_off += usize::from(!w[1]);
            }
        }
        assert!((off_off as f64 / off as f64 - 0.25).abs() < 0.005);
    }

    #[test]
    fn warmup_reaches_the_stationary_sampling_rate() {
        let cold = FullBattery {
            harvest: HarvestModel::exponential(0.3).unwrap(),
            initial: BatteryState::charged(0.5).unwrap(),
            warmup: 0,
        };
        let warm = FullBattery { warmup: 500, ..cold.clone() };
        let first_gate_rate = |s: &FullBattery| {
            let n = 20_000;
            let on = (0..n)
                .filter(|&i| s.spawn().next_gate(&mut RunStreams::new(4, i)))
                .count();
            on as f64 / n as f64
        };
        assert_eq!(first_gate_rate(&cold), 1.0);
        assert!((first_gate_rate(&warm) - 0.6).abs() < 0.02);
    }

    #[test]
    fn battery_mode_starts_charged() {
        let s = FullBattery {
            harvest: HarvestModel::exponential(0.2).unwrap(),
            initial: BatteryState::charged(0.5).unwrap(),
            warmup: 0,
        };
        let mut p = s.spawn();
        assert!(p.next_gate(&mut RunStreams::new(2, 0)));
    }
}
