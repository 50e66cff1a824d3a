//! The deficit-regime analysis replaces the battery by its stationary gate
//! chain; both must give the same detection delays.

use std::sync::Arc;

use harvest_cusum::change_model::ChangeModel;
use harvest_cusum::gating::{FullBattery, StationaryChain};
use harvest_cusum::harvest::{BatteryState, HarvestModel};
use harvest_cusum::montecarlo::{run_delay_experiment, ExperimentConfig};
use harvest_cusum::stationary::solve_chain;

#[test]
fn stationary_chain_matches_battery_delays() {
    let model = ChangeModel::new(0.0, 0.5, 1.0).unwrap();
    for (i, mean) in [0.2, 0.3, 0.4].into_iter().enumerate() {
        let harvest = HarvestModel::exponential(mean).unwrap();
        let (_, chain) = solve_chain(&harvest, 0.5).unwrap();
        let battery = FullBattery {
            harvest,
            initial: BatteryState::charged(0.5).unwrap(),
            warmup: 2_000,
        };
        let seed = 100 + i as u64;
        let a = run_delay_experiment(&ExperimentConfig::delay(model, Arc::new(battery), 10.0, 20_000, seed)).unwrap();
        // The chain starts with the gate open, as in the analysis.
        let b = run_delay_experiment(&ExperimentConfig::delay(
            model,
            Arc::new(StationaryChain { chain, initial_gate: true }),
            10.0,
            20_000,
            seed + 50,
        ))
        .unwrap();
        let se = a.stderr.hypot(b.stderr);
        assert!(
            (a.mean_stop - b.mean_stop).abs() < 4.0 * se,
            "H = {mean}: battery {} vs chain {} (stderr {se})",
            a.mean_stop,
            b.mean_stop
        );
    }
}
