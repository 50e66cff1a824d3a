//! Harvested-energy distributions and the battery recursion
//!
//! ```text
//! ξ_k     = 1{B_k ≥ E_s}
//! B_{k+1} = B_k + H_k − ξ_k·E_s
//! ```
//!
//! Energy harvested in slot `k` only becomes usable in slot `k+1`, and the
//! battery is unbounded. Harvest families implement [`HarvestDistribution`]
//! and are looked up by name in a [`HarvestRegistry`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// An absolutely continuous law on `[0, ∞)` with finite mean.
pub trait HarvestDistribution: Send + Sync + fmt::Debug {
    /// Registry name of the family.
    fn family(&self) -> &'static str;
    fn mean(&self) -> f64;
    fn sample(&self, rng: &mut SimRng) -> f64;
    fn pdf(&self, x: f64) -> f64;
    fn cdf(&self, x: f64) -> f64;
    /// `E[exp(θH)]`, `None` where it diverges.
    fn mgf(&self, theta: f64) -> Option<f64>;
    /// Extra shape parameters, echoed into manifests.
    fn params(&self) -> HarvestParams {
        HarvestParams::new()
    }
}

pub type HarvestParams = BTreeMap<String, f64>;

pub type HarvestFactory = fn(mean: f64, params: &HarvestParams) -> Result<Arc<dyn HarvestDistribution>>;

fn check_mean(mean: f64) -> Result<()> {
    if mean.is_finite() && mean > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("harvest mean must be > 0, got {mean}")))
    }
}

#[derive(Debug, Clone)]
pub struct Exponential {
    mean: f64,
    dist: Exp<f64>,
}

impl Exponential {
    pub fn new(mean: f64) -> Result<Self> {
        check_mean(mean)?;
        let dist = Exp::new(1.0 / mean).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(Self { mean, dist })
    }
}

impl HarvestDistribution for Exponential {
    fn family(&self) -> &'static str {
        "exponential"
    }
    fn mean(&self) -> f64 {
        self.mean
    }
    fn sample(&self, rng: &mut SimRng) -> f64 {
        self.dist.sample(rng)
    }
    fn pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            0.0
        } else {
            (-x / self.mean).exp() / self.mean
        }
    }
    fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            -(-x / self.mean).exp_m1()
        }
    }
    fn mgf(&self, theta: f64) -> Option<f64> {
        (theta * self.mean < 1.0).then(|| 1.0 / (1.0 - theta * self.mean))
    }
}

/// Uniform on `[0, 2·mean]`.
#[derive(Debug, Clone)]
pub struct Uniform {
    mean: f64,
}

impl Uniform {
    pub fn new(mean: f64) -> Result<Self> {
        check_mean(mean)?;
        Ok(Self { mean })
    }
}

impl HarvestDistribution for Uniform {
    fn family(&self) -> &'static str {
        "uniform"
    }
    fn mean(&self) -> f64 {
        self.mean
    }
    fn sample(&self, rng: &mut SimRng) -> f64 {
        2.0 * self.mean * rng.random::<f64>()
    }
    fn pdf(&self, x: f64) -> f64 {
        if (0.0..=2.0 * self.mean).contains(&x) {
            0.5 / self.mean
        } else {
            0.0
        }
    }
    fn cdf(&self, x: f64) -> f64 {
        (x / (2.0 * self.mean)).clamp(0.0, 1.0)
    }
    fn mgf(&self, theta: f64) -> Option<f64> {
        let a = 2.0 * self.mean * theta;
        Some(if a.abs() < 1e-12 { 1.0 } else { a.exp_m1() / a })
    }
}

/// `N(location, scale²)` conditioned on `[0, ∞)`, with the location solved
/// so that the truncated mean equals `mean`. `scale` defaults to `mean`.
#[derive(Debug, Clone)]
pub struct TruncatedGaussian {
    mean: f64,
    location: f64,
    scale: f64,
    /// `P(N(location, scale²) ≥ 0)`
    mass: f64,
}

impl TruncatedGaussian {
    pub fn new(mean: f64, scale: f64) -> Result<Self> {
        check_mean(mean)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter(format!("truncated-gaussian scale must be > 0, got {scale}")));
        }
        let std = Normal::standard();
        let truncated_mean = |mu: f64| {
            let a = -mu / scale;
            mu + scale * std.pdf(a) / std.sf(a)
        };
        // truncated mean is increasing in the location; bracket then bisect
        let (mut lo, mut hi) = (-scale, mean);
        while truncated_mean(lo) > mean {
            lo -= scale;
            if lo < -40.0 * scale {
                return Err(Error::InvalidParameter(format!(
                    "truncated-gaussian: mean {mean} unreachable with scale {scale}"
                )));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if truncated_mean(mid) < mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let location = 0.5 * (lo + hi);
        Ok(Self {
            mean,
            location,
            scale,
            mass: std.sf(-location / scale),
        })
    }

    pub fn location(&self) -> f64 {
        self.location
    }
}

impl HarvestDistribution for TruncatedGaussian {
    fn family(&self) -> &'static str {
        "truncated-gaussian"
    }
    fn mean(&self) -> f64 {
        self.mean
    }
    fn sample(&self, rng: &mut SimRng) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            let x = self.location + self.scale * z;
            if x >= 0.0 {
                return x;
            }
        }
    }
    fn pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        Normal::standard().pdf((x - self.location) / self.scale) / (self.scale * self.mass)
    }
    fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let std = Normal::standard();
        let a = std.sf(-self.location / self.scale);
        let b = std.sf((x - self.location) / self.scale);
        ((a - b) / self.mass).clamp(0.0, 1.0)
    }
    fn mgf(&self, theta: f64) -> Option<f64> {
        let (mu, s) = (self.location, self.scale);
        let tail = Normal::standard().sf(-(mu + s * s * theta) / s);
        Some((mu * theta + 0.5 * s * s * theta * theta).exp() * tail / self.mass)
    }
    fn params(&self) -> HarvestParams {
        HarvestParams::from([("scale".to_string(), self.scale)])
    }
}

/// Shared handle on a harvest distribution.
#[derive(Clone)]
pub struct HarvestModel(Arc<dyn HarvestDistribution>);

impl fmt::Debug for HarvestModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl HarvestModel {
    pub fn new(dist: Arc<dyn HarvestDistribution>) -> Self {
        Self(dist)
    }

    pub fn exponential(mean: f64) -> Result<Self> {
        Ok(Self(Arc::new(Exponential::new(mean)?)))
    }

    pub fn uniform(mean: f64) -> Result<Self> {
        Ok(Self(Arc::new(Uniform::new(mean)?)))
    }

    pub fn family(&self) -> &'static str {
        self.0.family()
    }
    pub fn mean(&self) -> f64 {
        self.0.mean()
    }
    pub fn params(&self) -> HarvestParams {
        self.0.params()
    }
    pub fn pdf(&self, x: f64) -> f64 {
        self.0.pdf(x)
    }
    pub fn cdf(&self, x: f64) -> f64 {
        self.0.cdf(x)
    }
    pub fn mgf(&self, theta: f64) -> Option<f64> {
        self.0.mgf(theta)
    }

    #[inline]
    pub fn sample_harvest(&self, rng: &mut SimRng) -> f64 {
        self.0.sample(rng)
    }
}

/// Harvest families by name.
pub struct HarvestRegistry {
    factories: BTreeMap<&'static str, HarvestFactory>,
}

impl Default for HarvestRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("exponential", |mean, _| Ok(Arc::new(Exponential::new(mean)?)));
        r.register("uniform", |mean, _| Ok(Arc::new(Uniform::new(mean)?)));
        r.register("truncated-gaussian", |mean, params| {
            let scale = params.get("scale").copied().unwrap_or(mean);
            Ok(Arc::new(TruncatedGaussian::new(mean, scale)?))
        });
        r
    }
}

impl HarvestRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, family: &'static str, factory: HarvestFactory) {
        self.factories.insert(family, factory);
    }

    pub fn families(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, family: &str, mean: f64, params: &HarvestParams) -> Result<HarvestModel> {
        let factory = self.factories.get(family).ok_or_else(|| {
            Error::Config(format!(
                "unknown harvest family `{family}` (known: {})",
                self.families().collect::<Vec<_>>().join(", ")
            ))
        })?;
        Ok(HarvestModel(factory(mean, params)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub level: f64,
    pub sense_cost: f64,
}

impl BatteryState {
    pub fn new(level: f64, sense_cost: f64) -> Result<Self> {
        if !(sense_cost.is_finite() && sense_cost > 0.0) {
            return Err(Error::InvalidParameter(format!("sense cost must be > 0, got {sense_cost}")));
        }
        if !(level.is_finite() && level >= 0.0) {
            return Err(Error::InvalidParameter(format!("battery level must be >= 0, got {level}")));
        }
        Ok(Self { level, sense_cost })
    }

    /// Battery holding exactly one sensing worth of energy.
    pub fn charged(sense_cost: f64) -> Result<Self> {
        Self::new(sense_cost, sense_cost)
    }

    #[inline]
    pub fn gate(&self) -> bool {
        self.level >= self.sense_cost
    }

    /// Infallible step for validated, nonnegative harvests.
    #[inline]
    pub fn advance(&mut self, harvested: f64) -> bool {
        let gate = self.gate();
        self.level += harvested - if gate { self.sense_cost } else { 0.0 };
        gate
    }
}

/// One slot of the battery recursion. Returns the next state and the gate of this slot.
pub fn battery_step(state: BatteryState, harvested: f64) -> Result<(BatteryState, bool)> {
    if !(harvested >= 0.0 && harvested.is_finite()) {
        return Err(Error::InvalidParameter(format!("harvested energy must be >= 0, got {harvested}")));
    }
    let mut next = state;
    let gate = next.advance(harvested);
    Ok((next, gate))
}

pub fn sample_harvest(model: &HarvestModel, rng: &mut SimRng) -> f64 {
    model.sample_harvest(rng)
}

/// Iterator over `(level before the slot, gate)` pairs of a simulated battery.
pub struct BatteryWalk<'a> {
    model: &'a HarvestModel,
    state: BatteryState,
    rng: &'a mut SimRng,
}

impl<'a> BatteryWalk<'a> {
    pub fn new(model: &'a HarvestModel, initial: BatteryState, rng: &'a mut SimRng) -> Self {
        Self { model, state: initial, rng }
    }

    pub fn state(&self) -> BatteryState {
        self.state
    }
}

impl Iterator for BatteryWalk<'_> {
    type Item = (f64, bool);

    fn next(&mut self) -> Option<Self::Item> {
        let level = self.state.level;
        let h = self.model.sample_harvest(self.rng);
        Some((level, self.state.advance(h)))
    }
}

#[derive(Debug, Clone)]
pub struct BatteryPath {
    pub gates: Vec<bool>,
    pub final_state: BatteryState,
    /// Fraction of slots with gate = 1.
    pub empirical_pi1: f64,
}

impl BatteryPath {
    /// Fraction of gate = 1 slots among the last `n` slots.
    pub fn tail_pi1(&self, n: usize) -> f64 {
        let tail = &self.gates[self.gates.len().saturating_sub(n)..];
        tail.iter().filter(|&&g| g).count() as f64 / tail.len() as f64
    }
}

pub fn simulate_battery_path(
    model: &HarvestModel,
    initial: BatteryState,
    steps: usize,
    rng: &mut SimRng,
) -> Result<BatteryPath> {
    if steps == 0 {
        return Err(Error::InvalidParameter("battery path needs at least one step".into()));
    }
    let mut walk = BatteryWalk::new(model, initial, rng);
    let gates: Vec<bool> = walk.by_ref().take(steps).map(|(_, g)| g).collect();
    let on = gates.iter().filter(|&&g| g).count();
    Ok(BatteryPath {
        final_state: walk.state(),
        empirical_pi1: on as f64 / steps as f64,
        gates,
    })
}
