//! Stationary battery density in the deficit regime, the induced two-state
//! gate chain, and the Perron root of its transform matrix.
//!
//! The stationary density solves the linear integral equation
//!
//! ```text
//! f_B(z) = ∫_{E_s}^{z+E_s} f_H(z+E_s−b) f_B(b) db + ∫_0^{min(z,E_s)} f_H(z−b) f_B(b) db
//! ```
//!
//! Substituting `u = b − E_s` in the first term, both integrals are causal
//! convolutions with `f_H`, so one FFT pair per iteration applies the whole
//! trapezoidal operator. `E_s` is always a grid node because the density has
//! a kink there.

use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::change_model::ChangeModel;
use crate::error::{Error, Result};
use crate::harvest::HarvestModel;

pub const DEFAULT_N_POINTS: usize = 4096;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 100_000;

/// Stationary density sampled on a uniform grid over `[0, grid_max]`.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub grid_max: f64,
    pub n_points: usize,
    pub step: f64,
    pub values: Vec<f64>,
    /// Grid index of `E_s`.
    pub sense_index: usize,
    pub iterations: usize,
    /// Sup-norm change of one normalized operator application at the solution.
    pub residual: f64,
}

/// Two-state gate chain with `alpha = P(0→0)` and `beta = P(1→1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XiChain {
    pub alpha: f64,
    pub beta: f64,
    pub pi0: f64,
    pub pi1: f64,
}

impl XiChain {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, p) in [("alpha", alpha), ("beta", beta)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Degenerate(format!("gate chain {name} = {p} is outside (0, 1)")));
            }
        }
        let (leave_off, leave_on) = (1.0 - alpha, 1.0 - beta);
        let total = leave_off + leave_on;
        Ok(Self {
            alpha,
            beta,
            pi0: leave_on / total,
            pi1: leave_off / total,
        })
    }

    /// Rows are the current state (0 then 1).
    pub fn transition_matrix(&self) -> [[f64; 2]; 2] {
        [[self.alpha, 1.0 - self.alpha], [1.0 - self.beta, self.beta]]
    }
}

fn trapezoid(values: &[f64], step: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, inner @ .., last] => step * (0.5 * (first + last) + inner.iter().sum::<f64>()),
    }
}

impl DensityGrid {
    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.step
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().enumerate().map(|(i, &v)| (self.node(i), v))
    }

    pub fn mass(&self) -> f64 {
        trapezoid(&self.values, self.step)
    }

    /// Stationary probability that the battery can sample, `∫_{E_s}^∞ f_B`.
    pub fn pi1(&self) -> f64 {
        trapezoid(&self.values[self.sense_index..], self.step)
    }

    /// Piecewise-linear CDF at the grid nodes (cumulative trapezoid).
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.values.len());
        out.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * self.step * (w[0] + w[1]);
            out.push(acc);
        }
        out
    }

    /// CDF at an arbitrary level by linear interpolation of [`Self::cdf`].
    pub fn cdf_at(&self, cdf: &[f64], b: f64) -> f64 {
        if b <= 0.0 {
            return 0.0;
        }
        let pos = b / self.step;
        let i = pos.floor() as usize;
        if i + 1 >= cdf.len() {
            return 1.0;
        }
        let t = pos - i as f64;
        cdf[i] + t * (cdf[i + 1] - cdf[i])
    }

    /// `b,f_B` CSV with LF line endings.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "b,f_B")?;
        for (b, v) in self.nodes() {
            writeln!(out, "{b},{v}")?;
        }
        Ok(())
    }
}

/// Exponential decay rate of the stationary battery tail: the positive root
/// of `E[exp(θ(H − E_s))] = 1`.
pub fn tail_decay_rate(harvest: &HarvestModel, e_s: f64) -> Option<f64> {
    let phi = |t: f64| harvest.mgf(t).map(|m| m.ln() - t * e_s);
    let mut hi = 1.0 / e_s;
    loop {
        match phi(hi) {
            Some(v) if v <= 0.0 => hi *= 2.0,
            _ => break,
        }
        if hi > 1e6 {
            return None;
        }
    }
    let mut lo = hi / 2.0;
    while phi(lo).is_none_or(|v| v > 0.0) {
        lo /= 2.0;
        if lo < 1e-12 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match phi(mid) {
            Some(v) if v <= 0.0 => lo = mid,
            _ => hi = mid,
        }
    }
    Some(lo)
}

/// `max(E_s + 12·H̄, E_s + ln(10¹⁰)/θ)`, with `θ` from [`tail_decay_rate`].
pub fn default_grid_max(harvest: &HarvestModel, e_s: f64) -> f64 {
    let base = e_s + 12.0 * harvest.mean();
    match tail_decay_rate(harvest, e_s) {
        Some(theta) => base.max(e_s + 1e10f64.ln() / theta),
        None => base,
    }
}

struct Operator {
    n: usize,
    k_e: usize,
    step: f64,
    kernel: Vec<f64>,
    kernel_hat: Vec<Complex<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    buffer: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Operator {
    fn new(harvest: &HarvestModel, n: usize, k_e: usize, step: f64) -> Self {
        let len = (2 * n).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let kernel: Vec<f64> = (0..n).map(|m| harvest.pdf(m as f64 * step)).collect();
        let mut kernel_hat = vec![Complex::default(); len];
        kernel_hat.iter_mut().zip(&kernel).for_each(|(c, &k)| c.re = k);
        let scratch_len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        let mut scratch = vec![Complex::default(); scratch_len];
        forward.process_with_scratch(&mut kernel_hat, &mut scratch);
        Self {
            n,
            k_e,
            step,
            kernel,
            kernel_hat,
            forward,
            inverse,
            buffer: vec![Complex::default(); len],
            scratch,
        }
    }

    /// Unnormalized trapezoidal application of the integral operator.
    fn apply(&mut self, f: &[f64], out: &mut [f64]) {
        let (n, k_e) = (self.n, self.k_e);
        // low part: f on [0, E_s]; shifted part: f(u + E_s)
        let low = |j: usize| if j <= k_e { f[j] } else { 0.0 };
        let high = |j: usize| if j + k_e < n { f[j + k_e] } else { 0.0 };
        for (j, c) in self.buffer.iter_mut().enumerate() {
            *c = if j < n { Complex::new(low(j) + high(j), 0.0) } else { Complex::default() };
        }
        self.forward.process_with_scratch(&mut self.buffer, &mut self.scratch);
        self.buffer.iter_mut().zip(&self.kernel_hat).for_each(|(b, k)| *b *= k);
        self.inverse.process_with_scratch(&mut self.buffer, &mut self.scratch);
        let scale = 1.0 / self.buffer.len() as f64;
        let a = &self.kernel;
        for i in 0..n {
            let m = i.min(k_e);
            let end_low = 0.5 * (a[i] * low(0) + a[i - m] * low(m));
            let end_high = 0.5 * (a[i] * high(0) + a[0] * high(i));
            out[i] = (self.step * (self.buffer[i].re * scale - end_low - end_high)).max(0.0);
        }
    }
}

fn normalize(values: &mut [f64], step: f64) -> f64 {
    let mass = trapezoid(values, step);
    values.iter_mut().for_each(|v| *v /= mass);
    mass
}

/// Fixed point of the discretized stationary-density operator.
///
/// `grid_max` is rounded so that `E_s` lands on a node; `tol` bounds the
/// sup-norm change between successive normalized iterates.
pub fn solve_stationary_density(
    harvest: &HarvestModel,
    e_s: f64,
    grid_max: f64,
    n_points: usize,
    tol: f64,
) -> Result<DensityGrid> {
    if !(e_s > 0.0 && e_s.is_finite()) {
        return Err(Error::InvalidParameter(format!("sensing cost must be > 0, got {e_s}")));
    }
    if harvest.mean() >= e_s {
        return Err(Error::Regime("surplus regime: stationary density undefined".into()));
    }
    if !(grid_max > e_s) || n_points < 8 {
        return Err(Error::InvalidParameter(format!(
            "grid must extend past E_s with >= 8 points (grid_max {grid_max}, n_points {n_points})"
        )));
    }
    let k_e = ((e_s * (n_points - 1) as f64 / grid_max).round() as usize).max(1);
    let step = e_s / k_e as f64;
    let n = n_points;
    let mut op = Operator::new(harvest, n, k_e, step);

    let mut f = vec![1.0; n];
    normalize(&mut f, step);
    let mut next = vec![0.0; n];
    let mut delta = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        op.apply(&f, &mut next);
        normalize(&mut next, step);
        delta = f.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut f, &mut next);
        iterations += 1;
        if delta < tol {
            break;
        }
    }
    if delta >= tol {
        return Err(Error::NonConvergence {
            what: "stationary density",
            iterations,
            residual: delta,
        });
    }
    op.apply(&f, &mut next);
    normalize(&mut next, step);
    let residual = f.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DensityGrid {
        grid_max: (n - 1) as f64 * step,
        n_points: n,
        step,
        values: f,
        sense_index: k_e,
        iterations,
        residual,
    })
}

/// [`solve_stationary_density`] with the default grid and tolerance.
pub fn solve_stationary_density_default(harvest: &HarvestModel, e_s: f64) -> Result<DensityGrid> {
    solve_stationary_density(harvest, e_s, default_grid_max(harvest, e_s), DEFAULT_N_POINTS, DEFAULT_TOL)
}

/// Gate-chain transition probabilities by quadrature against the density.
pub fn transition_probs(density: &DensityGrid, harvest: &HarvestModel, e_s: f64) -> Result<XiChain> {
    let k = density.sense_index;
    if (density.node(k) - e_s).abs() > 1e-9 * e_s {
        return Err(Error::InvalidParameter(format!(
            "density grid was solved for E_s = {}, not {e_s}",
            density.node(k)
        )));
    }
    let low = &density.values[..=k];
    let high = &density.values[k..];
    let (low_mass, high_mass) = (trapezoid(low, density.step), trapezoid(high, density.step));
    if !(low_mass > 0.0 && high_mass > 0.0) {
        return Err(Error::Degenerate("stationary density puts no mass on one side of E_s".into()));
    }
    let stay_off: Vec<f64> = low
        .iter()
        .enumerate()
        .map(|(i, f)| harvest.cdf(e_s - density.node(i)) * f)
        .collect();
    let stay_on: Vec<f64> = high
        .iter()
        .enumerate()
        .map(|(i, f)| (1.0 - harvest.cdf(e_s - density.node(i))) * f)
        .collect();
    XiChain::new(
        trapezoid(&stay_off, density.step) / low_mass,
        trapezoid(&stay_on, density.step) / high_mass,
    )
}

/// Solves the density and derives the gate chain in one go.
pub fn solve_chain(harvest: &HarvestModel, e_s: f64) -> Result<(DensityGrid, XiChain)> {
    let density = solve_stationary_density_default(harvest, e_s)?;
    let chain = transition_probs(&density, harvest, e_s)?;
    Ok((density, chain))
}

/// Perron root `ρ(γ)` of
///
/// ```text
/// Φ(γ) = [ α̃      (1−α̃)·M(γ) ]
///        [ 1−β̃    β̃·M(γ)     ]      M(γ) = E_0[exp(γZ)]
/// ```
pub fn spectral_check(chain: &XiChain, model: &ChangeModel, gamma: f64) -> f64 {
    let m = model.pre_change_mgf(gamma);
    let (a, b) = (chain.alpha, chain.beta);
    // eigenvalues of [[a, (1-a)m], [1-b, b m]]; the discriminant is a sum of squares
    let half_gap = 0.5 * (a - b * m);
    let disc = half_gap * half_gap + (1.0 - a) * (1.0 - b) * m;
    0.5 * (a + b * m) + disc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harvest::{BatteryState, BatteryWalk};
    use crate::rng::{stream, Lane};
    use approx::assert_relative_eq;

    #[test]
    fn surplus_rejected() {
        let h = HarvestModel::exponential(0.5).unwrap();
        let err = solve_stationary_density(&h, 0.5, 10.0, 512, 1e-10).unwrap_err();
        assert_eq!(err.to_string(), "surplus regime: stationary density undefined");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn tail_rate_for_exponential_harvest() {
        let h = HarvestModel::exponential(0.4).unwrap();
        let theta = tail_decay_rate(&h, 0.5).unwrap();
        // E[exp(θ(H − E_s))] = exp(−θ E_s)/(1 − θ H̄) = 1
        assert_relative_eq!((-theta * 0.5).exp() / (1.0 - 0.4 * theta), 1.0, epsilon = 1e-9);
        assert!(default_grid_max(&h, 0.5) > 20.0);
    }

    #[test]
    fn flow_balance_for_exponential_harvest() {
        for mean in [0.2, 0.3, 0.4] {
            let h = HarvestModel::exponential(mean).unwrap();
            let d = solve_stationary_density_default(&h, 0.5).unwrap();
            assert_relative_eq!(d.mass(), 1.0, epsilon = 1e-8);
            assert!(d.values.iter().all(|&v| v >= 0.0));
            assert!((d.pi1() - mean / 0.5).abs() < 0.01, "{mean}: {}", d.pi1());
            assert!(d.residual < 1e-8);
            let chain = transition_probs(&d, &h, 0.5).unwrap();
            assert!((chain.pi1 - mean / 0.5).abs() < 1e-4, "{mean}: {} vs {}", chain.pi1, d.pi1());
        }
    }

    #[test]
    fn density_matches_simulated_battery() {
        let h = HarvestModel::exponential(0.3).unwrap();
        let d = solve_stationary_density_default(&h, 0.5).unwrap();
        let cdf = d.cdf();
        let mut rng = stream(31, 0, Lane::Harvest);
        let walk = BatteryWalk::new(&h, BatteryState::charged(0.5).unwrap(), &mut rng);
        let mut levels: Vec<f64> = walk.skip(10_000).take(1_000_000).map(|(b, _)| b).collect();
        levels.sort_by(f64::total_cmp);
        let n = levels.len() as f64;
        let ks = levels
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let f = d.cdf_at(&cdf, b);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "ks = {ks}");
    }

    #[test]
    fn alpha_matches_transition_counts() {
        let h = HarvestModel::exponential(0.2).unwrap();
        let (_, chain) = solve_chain(&h, 0.5).unwrap();
        let mut rng = stream(32, 0, Lane::Harvest);
        let walk = BatteryWalk::new(&h, BatteryState::charged(0.5).unwrap(), &mut rng);
        let gates: Vec<bool> = walk.skip(1000).take(2_000_000).map(|(_, g)| g).collect();
        let (mut off, mut off_off) = (0usize, 0usize);
        for w in gates.windows(2) {
            if !w[0] {
                off += 1;
                off_off += usize::from(!w[1]);
            }
        }
        let empirical = off_off as f64 / off as f64;
        assert!((empirical - chain.alpha).abs() < 0.01, "{empirical} vs {}", chain.alpha);
    }

    #[test]
    fn chain_invariants() {
        let c = XiChain::new(0.3, 0.9).unwrap();
        assert_relative_eq!(c.pi0 + c.pi1, 1.0, epsilon = 1e-15);
        for row in c.transition_matrix() {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        }
        assert!(XiChain::new(0.0, 0.5).is_err());
        assert!(XiChain::new(0.5, 1.0).is_err());
    }

    #[test]
    fn perron_root_endpoints_and_interior() {
        let model = ChangeModel::new(0.0, 0.5, 1.0).unwrap();
        let c = XiChain::new(0.35, 0.82).unwrap();
        assert!((spectral_check(&c, &model, 1.0) - 1.0).abs() < 1e-12);
        assert!((spectral_check(&c, &model, 0.0) - 1.0).abs() < 1e-12);
        assert!(spectral_check(&c, &model, 0.5) < 1.0);
    }

    #[test]
    fn perron_root_matches_power_iteration() {
        let model = ChangeModel::new(0.0, 0.5, 1.0).unwrap();
        let c = XiChain::new(0.35, 0.82).unwrap();
        for gamma in [0.2, 0.7, 1.6] {
            let m = model.pre_change_mgf(gamma);
            let phi = [[c.alpha, (1.0 - c.alpha) * m], [1.0 - c.beta, c.beta * m]];
            let mut v = [1.0, 1.0];
            let mut lambda = 0.0;
            for _ in 0..500 {
                let w = [phi[0][0] * v[0] + phi[0][1] * v[1], phi[1][0] * v[0] + phi[1][1] * v[1]];
                lambda = w[0].max(w[1]) / v[0].max(v[1]);
                v = w;
            }
            assert_relative_eq!(spectral_check(&c, &model, gamma), lambda, epsilon = 1e-10);
        }
    }
}
