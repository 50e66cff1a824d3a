use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use toml::{Table, Value};

use super::config::Config;
use super::manifest::Manifest;
use crate::asymptotics::{Prediction, PREDICTION_CSV_HEADER};
use crate::detector::ChangePoint;
use crate::error::{Error, Result};
use crate::gating::{GateContext, GateRegistry, GateStrategy, StationaryChain, STATIONARY_CHAIN};
use crate::harvest::{HarvestModel, HarvestRegistry};
use crate::montecarlo::{
    run_delay_experiment, run_fa_experiment, survival_curve, write_runs_csv, write_summary_csv, write_survival_csv,
    ExperimentConfig,
};
use crate::renewal::{estimate_constants, estimate_surplus_constants, RenewalConstants};
use crate::stationary::{default_grid_max, solve_stationary_density, transition_probs, DensityGrid, XiChain};

pub const CONSTANTS_FILE: &str = "constants.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SIMULATIONS_FILE: &str = "simulations.csv";
pub const REPORT_FILE: &str = "report.csv";

const SIMULATIONS_HEADER: &str =
    "mode,harvest_mean,sense_cost,h,gate_mode,mean_stop,stderr,n_runs,censored_count,fitted_exponent,fit_r2";

/// Sections whose values feed the renewal constants; a cached constants
/// file is reused only if these match.
const CONSTANTS_KEYS: [&str; 4] = ["model", "harvest", "stationary", "constants"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    Delay,
    FalseAlarm,
}

impl SimMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SimMode::Delay => "delay",
            SimMode::FalseAlarm => "fa",
        }
    }
}

pub struct Context {
    pub cfg: Config,
    pub out: PathBuf,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn is_deficit(cfg: &Config, mean: f64) -> bool {
    mean < cfg.sense_cost
}

impl Context {
    fn harvest(&self, mean: f64) -> Result<HarvestModel> {
        HarvestRegistry::default().build(&self.cfg.harvest_family, mean, &self.cfg.harvest_params)
    }

    fn solve(&self, harvest: &HarvestModel) -> Result<(DensityGrid, XiChain)> {
        let s = &self.cfg.stationary;
        let grid_max = s.grid_max.unwrap_or_else(|| default_grid_max(harvest, self.cfg.sense_cost));
        let density = solve_stationary_density(harvest, self.cfg.sense_cost, grid_max, s.n_points, s.tol)?;
        let chain = transition_probs(&density, harvest, self.cfg.sense_cost)?;
        Ok((density, chain))
    }

    fn gate_strategy(&self, harvest: &HarvestModel) -> Result<Arc<dyn GateStrategy>> {
        let chain = if self.cfg.gate_mode == STATIONARY_CHAIN {
            Some(self.solve(harvest)?.1)
        } else {
            None
        };
        let ctx = GateContext {
            harvest: Some(harvest.clone()),
            sense_cost: Some(self.cfg.sense_cost),
            initial_level: self.cfg.initial_level,
            chain,
            warmup: self.cfg.warmup,
        };
        GateRegistry::default().build(&self.cfg.gate_mode, &ctx)
    }

    fn write_manifest(&self, command: &str, outputs: Vec<String>) -> Result<PathBuf> {
        Manifest::new(command, self.cfg.seed, outputs, self.cfg.table.clone()).write(&self.out)
    }
}

pub fn cmd_stationary(ctx: &Context) -> Result<PathBuf> {
    let mut outputs = Vec::new();
    let mut chains = create(&ctx.out, "chain.csv")?;
    writeln!(chains, "harvest_mean,alpha,beta,pi0,pi1,iterations,residual")?;
    let (deficit, surplus): (Vec<f64>, Vec<f64>) = ctx.cfg.harvest_means.iter().partition(|&&m| is_deficit(&ctx.cfg, m));
    if deficit.is_empty() {
        return Err(Error::Regime("surplus regime: stationary density undefined".into()));
    }
    for mean in surplus {
        eprintln!("note: H = {mean} is in the surplus regime (stationary density undefined); skipped");
    }
    for mean in deficit {
        let harvest = ctx.harvest(mean)?;
        let (density, chain) = ctx.solve(&harvest)?;
        let name = format!("density_H{mean}.csv");
        density.write_csv(create(&ctx.out, &name)?)?;
        outputs.push(name);
        writeln!(
            chains,
            "{mean},{},{},{},{},{},{}",
            chain.alpha, chain.beta, chain.pi0, chain.pi1, density.iterations, density.residual
        )?;
        println!(
            "H = {mean}: alpha = {:.6}, beta = {:.6}, pi0 = {:.6}, pi1 = {:.6}",
            chain.alpha, chain.beta, chain.pi0, chain.pi1
        );
    }
    chains.flush()?;
    outputs.push("chain.csv".into());
    ctx.write_manifest("stationary", outputs)
}

fn group_name(mean: Option<f64>) -> String {
    match mean {
        None => "surplus".into(),
        Some(m) => format!("deficit:{m}"),
    }
}

/// Ungated constants plus one gated set per deficit harvest mean.
fn estimate_all(ctx: &Context) -> Result<Vec<(String, RenewalConstants)>> {
    let cfg = &ctx.cfg;
    let surplus = estimate_surplus_constants(&cfg.model, &cfg.renewal, cfg.seed)?;
    let mut groups = vec![(group_name(None), surplus.clone())];
    for &mean in cfg.harvest_means.iter().filter(|&&m| is_deficit(cfg, m)) {
        let (_, chain) = ctx.solve(&ctx.harvest(mean)?)?;
        let strategy = StationaryChain { chain, initial_gate: true };
        let mut gated = estimate_constants(&cfg.model, &strategy, &cfg.renewal, cfg.seed)?;
        if !cfg.gated_ladder {
            gated.ladder_mean = surplus.ladder_mean;
            gated.ladder_second = surplus.ladder_second;
            gated.kappa_inf = surplus.kappa_inf;
            gated.perturbation_bar = surplus.perturbation_bar;
        }
        groups.push((group_name(Some(mean)), gated));
    }
    Ok(groups)
}

fn write_constants(ctx: &Context, groups: &[(String, RenewalConstants)]) -> Result<PathBuf> {
    let mut out = create(&ctx.out, CONSTANTS_FILE)?;
    for (i, (name, c)) in groups.iter().enumerate() {
        c.write_csv(name, i == 0, &mut out)?;
    }
    out.flush()?;
    ctx.write_manifest("constants", vec![CONSTANTS_FILE.into()])
}

pub fn cmd_constants(ctx: &Context) -> Result<PathBuf> {
    let groups = estimate_all(ctx)?;
    for (name, c) in &groups {
        println!(
            "{name}: kappa_inf = {:.4}, perturbation_bar = {:.4}, delta_bar = {:.4}, c_inf = {:.4}, s_k1 = {:.4}",
            c.kappa_inf.value, c.perturbation_bar.value, c.delta_bar.value, c.c_inf.value, c.s_k1_mean.value
        );
    }
    write_constants(ctx, &groups)
}

fn sections(table: &Table, keys: &[&str]) -> Table {
    keys.iter()
        .filter_map(|k| table.get(*k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

/// Reuses `constants.csv` from the output directory when its manifest was
/// produced from the same model, harvest and estimator settings and seed.
fn cached_constants(ctx: &Context) -> Result<Option<Vec<(String, RenewalConstants)>>> {
    let manifest_path = ctx.out.join(Manifest::file_name("constants"));
    let csv = ctx.out.join(CONSTANTS_FILE);
    if !manifest_path.exists() || !csv.exists() {
        return Ok(None);
    }
    let manifest = Manifest::read(&manifest_path)?;
    if manifest.master_seed != ctx.cfg.seed
        || sections(&manifest.config, &CONSTANTS_KEYS) != sections(&ctx.cfg.table, &CONSTANTS_KEYS)
    {
        return Ok(None);
    }
    Ok(Some(RenewalConstants::read_csv(BufReader::new(File::open(csv)?))?))
}

pub fn cmd_predict(ctx: &Context) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let groups = match cached_constants(ctx)? {
        Some(g) => g,
        None => {
            let g = estimate_all(ctx)?;
            write_constants(ctx, &g)?;
            g
        }
    };
    let find = |name: &str| {
        groups
            .iter()
            .find(|(g, _)| g == name)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::MissingKey(format!("constants group {name}")))
    };
    let stats = cfg.model.llr_stats()?;
    let surplus = find(&group_name(None))?;
    let mut out = create(&ctx.out, PREDICTIONS_FILE)?;
    writeln!(out, "{PREDICTION_CSV_HEADER}")?;
    for &mean in &cfg.harvest_means {
        let deficit = if is_deficit(cfg, mean) {
            let c = find(&group_name(Some(mean)))?;
            Some((c, c.sampling_rate))
        } else {
            None
        };
        for &h in &cfg.thresholds {
            let p = Prediction::new(&stats, surplus, deficit, mean, cfg.sense_cost, h)?;
            p.write_csv_row(&mut out)?;
            println!(
                "H = {mean}, h = {h}: {} delay = {:.4}, exponent = {:.5}, ARL2FA = {:.4e}",
                p.regime.as_str(),
                p.expected_delay,
                p.fa_exponent,
                p.arl2fa
            );
        }
    }
    out.flush()?;
    ctx.write_manifest("predict", vec![PREDICTIONS_FILE.into(), CONSTANTS_FILE.into()])
}

pub fn cmd_simulate(ctx: &Context, mode: SimMode) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let mut outputs = Vec::new();
    let mut table = create(&ctx.out, SIMULATIONS_FILE)?;
    writeln!(table, "{SIMULATIONS_HEADER}")?;
    for &mean in &cfg.harvest_means {
        let harvest = ctx.harvest(mean)?;
        let gates = ctx.gate_strategy(&harvest)?;
        for &h in &cfg.thresholds {
            let mut exp = match mode {
                SimMode::Delay => {
                    let mut e = ExperimentConfig::delay(cfg.model, gates.clone(), h, cfg.n_runs, cfg.seed);
                    e.change_point = ChangePoint::At(cfg.change_point);
                    e
                }
                SimMode::FalseAlarm => ExperimentConfig::false_alarm(cfg.model, gates.clone(), h, cfg.n_runs, cfg.seed)?,
            };
            if let Some(m) = cfg.max_steps {
                exp.max_steps = m;
            }
            exp.tail_window = cfg.tail_window;
            let result = match mode {
                SimMode::Delay => run_delay_experiment(&exp)?,
                SimMode::FalseAlarm => run_fa_experiment(&exp)?,
            };
            let tag = format!("{}_H{mean}_h{h}", mode.as_str());
            let runs = format!("runs_{tag}.csv");
            let summary = format!("summary_{tag}.csv");
            write_runs_csv(&result.records, create(&ctx.out, &runs)?)?;
            write_summary_csv(&exp, &result, create(&ctx.out, &summary)?)?;
            outputs.extend([runs, summary]);
            if mode == SimMode::FalseAlarm {
                let survival = format!("survival_{tag}.csv");
                write_survival_csv(&survival_curve(&result.run_lengths(), h), create(&ctx.out, &survival)?)?;
                outputs.push(survival);
            }
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                table,
                "{},{mean},{},{h},{},{},{},{},{},{},{}",
                mode.as_str(),
                cfg.sense_cost,
                gates.name(),
                result.mean_stop,
                result.stderr,
                result.n_runs,
                result.censored_count,
                opt(result.fitted_exponent()),
                opt(result.fit_r2())
            )?;
            println!(
                "{} H = {mean}, h = {h}: mean = {:.4} ± {:.4} ({} censored)",
                mode.as_str(),
                result.mean_stop,
                result.stderr,
                result.censored_count
            );
            if result.censoring_warning {
                eprintln!(
                    "warning: {} of {} runs censored at {} steps; increase experiment.max_steps",
                    result.censored_count, result.n_runs, exp.max_steps
                );
            }
        }
    }
    table.flush()?;
    outputs.push(SIMULATIONS_FILE.into());
    ctx.write_manifest(&format!("simulate-{}", mode.as_str()), outputs)
}

type Rows = Vec<BTreeMap<String, String>>;

fn read_rows(path: &Path) -> Result<Rows> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header: Vec<String> = match lines.next() {
        Some(line) => line?.split(',').map(str::to_string).collect(),
        None => return Ok(Vec::new()),
    };
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        rows.push(header.iter().cloned().zip(line.split(',').map(str::to_string)).collect());
    }
    Ok(rows)
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Option<f64> {
    row.get(key)?.parse().ok()
}

fn flatten(table: &Table, prefix: &str, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(t, &key, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Keys that must agree between joined manifests: the model and every
/// harvest setting except the mean grid, which the join itself matches.
fn comparable(table: &Table) -> BTreeMap<String, Value> {
    let mut flat = BTreeMap::new();
    flatten(&sections(table, &["model", "harvest"]), "", &mut flat);
    flat.remove("harvest.mean");
    flat
}

fn relative_error(theory: f64, sim: f64) -> f64 {
    (theory - sim) / sim
}

pub fn cmd_report(manifest_paths: &[PathBuf], out: &Path) -> Result<PathBuf> {
    if manifest_paths.len() < 2 {
        return Err(Error::Config(
            "report needs at least one prediction and one simulation manifest".into(),
        ));
    }
    let mut predictions: Rows = Vec::new();
    let mut delays: Rows = Vec::new();
    let mut alarms: Rows = Vec::new();
    let mut reference: Option<(PathBuf, BTreeMap<String, Value>, Table)> = None;
    for path in manifest_paths {
        let m = Manifest::read(path)?;
        let keys = comparable(&m.config);
        match &reference {
            None => reference = Some((path.clone(), keys, m.config.clone())),
            Some((first, ref_keys, _)) => {
                let all: std::collections::BTreeSet<&String> = ref_keys.keys().chain(keys.keys()).collect();
                let differing: Vec<String> = all
                    .into_iter()
                    .filter(|k| ref_keys.get(*k) != keys.get(*k))
                    .map(|k| {
                        let show = |v: Option<&Value>| v.map_or("<unset>".to_string(), |v| v.to_string());
                        format!("{k} ({} vs {})", show(ref_keys.get(k)), show(keys.get(k)))
                    })
                    .collect();
                if !differing.is_empty() {
                    return Err(Error::Config(format!(
                        "{} and {} have mismatched configs: {}",
                        first.display(),
                        path.display(),
                        differing.join(", ")
                    )));
                }
            }
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        match m.command.as_str() {
            "predict" => predictions.extend(read_rows(&dir.join(PREDICTIONS_FILE))?),
            "simulate-delay" => delays.extend(read_rows(&dir.join(SIMULATIONS_FILE))?),
            "simulate-fa" => alarms.extend(read_rows(&dir.join(SIMULATIONS_FILE))?),
            other => {
                return Err(Error::Config(format!(
                    "{}: `{other}` manifests cannot be reported",
                    path.display()
                )))
            }
        }
    }
    if predictions.is_empty() || (delays.is_empty() && alarms.is_empty()) {
        return Err(Error::Config(
            "report needs at least one prediction and one simulation manifest".into(),
        ));
    }

    let find = |rows: &Rows, mean: f64, h: f64| {
        rows.iter()
            .find(|r| num(r, "harvest_mean") == Some(mean) && num(r, "h") == Some(h))
            .cloned()
    };
    let mut csv = create(out, REPORT_FILE)?;
    writeln!(
        csv,
        "harvest_mean,h,regime,pi1,theoretical_delay,simulated_delay,delay_stderr,delay_relative_error,\
         fa_exponent,pi1_beta_bar,theoretical_arl2fa,simulated_arl2fa,arl2fa_relative_error,fitted_exponent"
    )?;
    println!(
        "{:>6} {:>6} {:>8} {:>12} {:>12} {:>9} {:>10} {:>10}",
        "H", "h", "regime", "theoretical", "simulated", "rel.err", "exponent", "pi1*beta"
    );
    for p in &predictions {
        let (Some(mean), Some(h)) = (num(p, "harvest_mean"), num(p, "h")) else {
            continue;
        };
        let theory = num(p, "predicted_delay").unwrap_or(f64::NAN);
        let arl = num(p, "arl2fa").unwrap_or(f64::NAN);
        let delay = find(&delays, mean, h);
        let fa = find(&alarms, mean, h);
        let sim = delay.as_ref().and_then(|r| num(r, "mean_stop"));
        let sim_arl = fa.as_ref().and_then(|r| num(r, "mean_stop"));
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let text = |r: Option<&BTreeMap<String, String>>, k: &str| r.and_then(|r| r.get(k).cloned()).unwrap_or_default();
        let regime = p.get("regime").cloned().unwrap_or_default();
        writeln!(
            csv,
            "{mean},{h},{regime},{},{theory},{},{},{},{},{},{arl},{},{},{}",
            text(Some(p), "pi1"),
            cell(sim),
            text(delay.as_ref(), "stderr"),
            cell(sim.map(|s| relative_error(theory, s))),
            text(Some(p), "fa_exponent"),
            text(Some(p), "pi1_beta_bar"),
            cell(sim_arl),
            cell(sim_arl.map(|s| relative_error(arl, s))),
            text(fa.as_ref(), "fitted_exponent"),
        )?;
        let show = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
        println!(
            "{mean:>6} {h:>6} {regime:>8} {theory:>12.4} {:>12} {:>9} {:>10} {:>10}",
            show(sim, 4),
            sim.map_or("-".to_string(), |s| format!("{:+.2}%", 100.0 * relative_error(theory, s))),
            show(num(p, "fa_exponent"), 5),
            if regime == "deficit" { show(num(p, "pi1_beta_bar"), 5) } else { "-".into() },
        );
    }
    csv.flush()?;
    let (_, _, config) = reference.expect("at least two manifests were read");
    let seed = config
        .get("experiment")
        .and_then(|e| e.get("seed"))
        .and_then(Value::as_integer)
        .unwrap_or(0) as u64;
    Manifest::new("report", seed, vec![REPORT_FILE.into()], config).write(out)
}
