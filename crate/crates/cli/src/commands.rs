//! Subcommand implementations. Each command reads the experiment config,
//! runs fully deterministic simulations, and writes plain CSV and text
//! artifacts into the output directory; plotting is left to external tools.

use std::path::Path;
use std::str::FromStr;

use hopsim::deeprl::{
    load_checkpoint, qvalue_grid, save_checkpoint, training_driver, CheckpointMeta, DeepRlStrategy,
    QNetwork,
};
use hopsim::error::{Error, Result};
use hopsim::features::{action_feature_names, state_feature_names};
use hopsim::mobility::{generate_rwp_trace, MobilityTrace};
use hopsim::sim::{generate_traffic, mean_ci, Metrics, RoundRow, Strategy, World};
use hopsim::strategies::{optimal_oracle, DirectTransmission, SeekAndFocus, UtilityRoute};
use hopsim::Real;

use crate::config::ExperimentConfig;
use crate::csv::{self, Csv};

/// The routing strategies the evaluation commands know how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Direct,
    Utility,
    SeekFocus,
    DeepRl,
    Oracle,
}

impl StrategyKind {
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Direct => "direct",
            StrategyKind::Utility => "utility",
            StrategyKind::SeekFocus => "seek_focus",
            StrategyKind::DeepRl => "deeprl",
            StrategyKind::Oracle => "oracle",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(StrategyKind::Direct),
            "utility" => Ok(StrategyKind::Utility),
            "seek_focus" => Ok(StrategyKind::SeekFocus),
            "deeprl" => Ok(StrategyKind::DeepRl),
            "oracle" => Ok(StrategyKind::Oracle),
            other => Err(Error::config(format!(
                "unknown strategy {other:?}; expected direct, utility, seek_focus, deeprl, or oracle"
            ))),
        }
    }
}

/// Resolves the strategy list: explicit names win; otherwise every strategy
/// that can run (the agent needs a checkpoint) is included.
pub fn resolve_strategies(names: &[String], has_checkpoint: bool) -> Result<Vec<StrategyKind>> {
    if names.is_empty() {
        let mut kinds = vec![StrategyKind::Direct, StrategyKind::Utility, StrategyKind::SeekFocus];
        if has_checkpoint {
            kinds.push(StrategyKind::DeepRl);
        }
        kinds.push(StrategyKind::Oracle);
        return Ok(kinds);
    }
    let kinds: Vec<StrategyKind> = names
        .iter()
        .map(|n| n.parse())
        .collect::<Result<_>>()?;
    if kinds.contains(&StrategyKind::DeepRl) && !has_checkpoint {
        return Err(Error::config("the deeprl strategy requires --checkpoint"));
    }
    Ok(kinds)
}

pub fn generate_mobility(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let trace = generate_rwp_trace(&config.mobility_config(config.mobility.seed))?;
    csv::write_text(out, &trace.to_text())?;
    eprintln!(
        "generate-mobility: {} devices over {} s -> {}",
        config.mobility.device_count,
        config.mobility.duration,
        out.display()
    );
    Ok(())
}

pub fn train(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    config.check_trace_covers(config.train.steps, "training")?;
    let trace = generate_rwp_trace(&config.mobility_config(config.mobility.seed))?;
    let sim = config.train_sim_config();
    let rl = config.rl_config();
    let output = training_driver(&trace, &sim, &rl, config.train.seed)?;

    let meta = CheckpointMeta { n_history: rl.n_history, ttl_reference: sim.ttl_reference };
    let checkpoint_path = out_dir.join("agent.qnet");
    if let Some(parent) = checkpoint_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&checkpoint_path, &output.net, &meta)?;

    let mut curve = Csv::new("round,mean_delay,mean_forwards");
    for row in &output.curves {
        curve.row(&[csv::count(row.round), csv::opt(row.mean_delay), csv::opt(row.mean_forwards)]);
    }
    curve.write(&out_dir.join("training_curve.csv"))?;

    let last = output.curves.last();
    eprintln!(
        "train: {} rounds, {} delivered, final cumulative delay {} forwards {} -> {}",
        output.curves.len(),
        output.metrics.delivered.len(),
        csv::opt(last.and_then(|r| r.mean_delay)),
        csv::opt(last.and_then(|r| r.mean_forwards)),
        checkpoint_path.display()
    );
    Ok(())
}

/// Per-run results shared by `evaluate` and `sweep`.
struct RunStats {
    created: usize,
    delivered: usize,
    dropped: usize,
    delivery_rate: Real,
    mean_delay: Option<Real>,
    mean_forwards: Option<Real>,
    avg_queue: Real,
    max_queue: usize,
    rounds: Vec<RoundRow<Real>>,
}

impl RunStats {
    fn from_metrics(m: &Metrics<Real>) -> Self {
        RunStats {
            created: m.created,
            delivered: m.delivered.len(),
            dropped: m.dropped,
            delivery_rate: m.delivery_rate(),
            mean_delay: m.mean_delay(),
            mean_forwards: m.mean_forwards(),
            avg_queue: m.avg_queue,
            max_queue: m.max_queue,
            rounds: m.rounds.clone(),
        }
    }
}

/// Runs one seeded simulation of one strategy. Run `index` offsets the
/// mobility and traffic seeds so replications are independent; a fixed index
/// always reproduces the same world.
fn run_one(
    config: &ExperimentConfig,
    kind: StrategyKind,
    index: usize,
    agent: Option<&(QNetwork<Real>, CheckpointMeta<Real>)>,
) -> Result<RunStats> {
    let trace = generate_rwp_trace(
        &config.mobility_config(config.mobility.seed.wrapping_add(index as u64)),
    )?;
    let (n_history, ttl_reference) = match agent {
        Some((_, meta)) => (meta.n_history, meta.ttl_reference),
        None => (config.rl.n_history, config.train.ttl as Real),
    };
    let sim =
        config.eval_sim_config(config.sim.seed.wrapping_add(index as u64), n_history, ttl_reference);
    let schedule = generate_traffic(&sim)?;

    if kind == StrategyKind::Oracle {
        let outcome = optimal_oracle(&trace, &schedule, sim.range, sim.total_steps)?;
        return Ok(RunStats::from_metrics(&outcome.metrics()));
    }

    let mut strategy: Box<dyn Strategy<Real>> = match kind {
        StrategyKind::Direct => Box::new(DirectTransmission),
        StrategyKind::Utility => {
            Box::new(UtilityRoute { threshold: config.strategy.utility_threshold })
        }
        StrategyKind::SeekFocus => Box::new(SeekAndFocus::new(config.seek_focus_params())?),
        StrategyKind::DeepRl => {
            let (net, _) = agent.expect("checked by resolve_strategies");
            Box::new(DeepRlStrategy::new(net.clone(), config.rl.epsilon_test))
        }
        StrategyKind::Oracle => unreachable!("handled above"),
    };
    let mut world = World::new(&trace, sim, schedule)?;
    world.run_to_end(strategy.as_mut())?;
    Ok(RunStats::from_metrics(&world.into_metrics()))
}

/// Aggregate over runs: delivery pooled over all packets, delay and
/// forwards as mean ± 95% half-width over the per-run means.
struct Aggregate {
    runs: usize,
    created: usize,
    delivered: usize,
    dropped: usize,
    delivery_rate: Real,
    mean_delay: Option<Real>,
    delay_ci95: Option<Real>,
    mean_forwards: Option<Real>,
    forwards_ci95: Option<Real>,
    avg_queue: Real,
}

fn aggregate(stats: &[RunStats]) -> Aggregate {
    let created: usize = stats.iter().map(|s| s.created).sum();
    let delivered: usize = stats.iter().map(|s| s.delivered).sum();
    let dropped: usize = stats.iter().map(|s| s.dropped).sum();
    let (mean_delay, delay_ci95) = ci_over(stats.iter().filter_map(|s| s.mean_delay));
    let (mean_forwards, forwards_ci95) = ci_over(stats.iter().filter_map(|s| s.mean_forwards));
    let avg_queue = stats.iter().map(|s| s.avg_queue).sum::<Real>() / stats.len() as Real;
    Aggregate {
        runs: stats.len(),
        created,
        delivered,
        dropped,
        delivery_rate: if created == 0 { 1.0 } else { delivered as Real / created as Real },
        mean_delay,
        delay_ci95,
        mean_forwards,
        forwards_ci95,
        avg_queue,
    }
}

fn ci_over(values: impl Iterator<Item = Real>) -> (Option<Real>, Option<Real>) {
    let values: Vec<Real> = values.collect();
    match mean_ci(&values) {
        Ok(ci) => (Some(ci.mean), ci.half_width),
        Err(_) => (None, None),
    }
}

/// Per-round time series averaged across runs (entries missing in a run —
/// no deliveries yet — are skipped, not counted as zero).
fn averaged_rounds(stats: &[RunStats]) -> Vec<[String; 7]> {
    let rounds = stats.iter().map(|s| s.rounds.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(rounds);
    for i in 0..rounds {
        let at: Vec<&RoundRow<Real>> = stats.iter().filter_map(|s| s.rounds.get(i)).collect();
        let (delay, _) = ci_over(at.iter().filter_map(|r| r.mean_delay));
        let (forwards, _) = ci_over(at.iter().filter_map(|r| r.mean_forwards));
        let n = at.len() as Real;
        let queue = at.iter().map(|r| r.avg_queue).sum::<Real>() / n;
        let delivered = at.iter().map(|r| r.delivered as Real).sum::<Real>() / n;
        let dropped = at.iter().map(|r| r.dropped as Real).sum::<Real>() / n;
        out.push([
            csv::count(i + 1),
            csv::count(at[0].step),
            csv::opt(delay),
            csv::opt(forwards),
            csv::real(queue),
            csv::real(delivered),
            csv::real(dropped),
        ]);
    }
    out
}

fn load_agent(path: Option<&Path>) -> Result<Option<(QNetwork<Real>, CheckpointMeta<Real>)>> {
    path.map(load_checkpoint).transpose()
}

fn aggregate_cells(agg: &Aggregate) -> Vec<String> {
    vec![
        csv::count(agg.runs),
        csv::real(agg.delivery_rate),
        csv::opt(agg.mean_delay),
        csv::opt(agg.delay_ci95),
        csv::opt(agg.mean_forwards),
        csv::opt(agg.forwards_ci95),
        csv::real(agg.avg_queue),
        csv::count(agg.created),
        csv::count(agg.delivered),
        csv::count(agg.dropped),
    ]
}

pub fn evaluate(
    config: &ExperimentConfig,
    strategy_names: &[String],
    checkpoint: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    config.check_trace_covers(config.sim.total_steps, "evaluation")?;
    if config.run.seeds == 0 {
        return Err(Error::config("run.seeds must be at least 1"));
    }
    let agent = load_agent(checkpoint)?;
    let kinds = resolve_strategies(strategy_names, agent.is_some())?;

    let mut runs = Csv::new(
        "strategy,run,created,delivered,dropped,delivery_rate,mean_delay,mean_forwards,avg_queue,max_queue",
    );
    let mut summary = Csv::new(
        "strategy,runs,delivery_rate,mean_delay,delay_ci95,mean_forwards,forwards_ci95,avg_queue,created,delivered,dropped",
    );

    for &kind in &kinds {
        let mut stats = Vec::with_capacity(config.run.seeds);
        for index in 0..config.run.seeds {
            let s = run_one(config, kind, index, agent.as_ref())?;
            runs.row(&[
                kind.label().to_string(),
                csv::count(index),
                csv::count(s.created),
                csv::count(s.delivered),
                csv::count(s.dropped),
                csv::real(s.delivery_rate),
                csv::opt(s.mean_delay),
                csv::opt(s.mean_forwards),
                csv::real(s.avg_queue),
                csv::count(s.max_queue),
            ]);
            stats.push(s);
        }
        let agg = aggregate(&stats);
        let mut cells = vec![kind.label().to_string()];
        cells.extend(aggregate_cells(&agg));
        summary.row(&cells);
        eprintln!(
            "evaluate: {} over {} runs — delivery {} delay {} forwards {}",
            kind.label(),
            agg.runs,
            csv::real(agg.delivery_rate),
            csv::opt(agg.mean_delay),
            csv::opt(agg.mean_forwards),
        );

        if kind != StrategyKind::Oracle {
            let mut rounds =
                Csv::new("round,step,mean_delay,mean_forwards,avg_queue,delivered,dropped");
            for cells in averaged_rounds(&stats) {
                rounds.row(&cells);
            }
            rounds.write(&out_dir.join(format!("rounds_{}.csv", kind.label())))?;
        }
    }

    runs.write(&out_dir.join("evaluate_runs.csv"))?;
    summary.write(&out_dir.join("evaluate_summary.csv"))?;
    Ok(())
}

/// Scenario axis a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Devices,
    Range,
}

impl Axis {
    fn label(self) -> &'static str {
        match self {
            Axis::Devices => "devices",
            Axis::Range => "range",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "devices" => Ok(Axis::Devices),
            "range" => Ok(Axis::Range),
            other => Err(Error::config(format!(
                "unknown sweep axis {other:?}; expected devices or range"
            ))),
        }
    }
}

pub fn sweep(
    config: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    strategy_names: &[String],
    checkpoint: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one --values entry"));
    }
    if config.run.seeds == 0 {
        return Err(Error::config("run.seeds must be at least 1"));
    }
    let agent = load_agent(checkpoint)?;
    let kinds = resolve_strategies(strategy_names, agent.is_some())?;

    let mut table = Csv::new(
        "strategy,axis,value,runs,delivery_rate,mean_delay,delay_ci95,mean_forwards,forwards_ci95,avg_queue,created,delivered,dropped",
    );
    for raw in values {
        let mut scenario = config.clone();
        let value_label = match axis {
            Axis::Devices => {
                let n: usize = raw
                    .parse()
                    .map_err(|_| Error::config(format!("device count {raw:?} is not an integer")))?;
                scenario.mobility.device_count = n;
                csv::count(n)
            }
            Axis::Range => {
                let x: Real = raw
                    .parse()
                    .map_err(|_| Error::config(format!("range {raw:?} is not a number")))?;
                scenario.sim.range = x;
                csv::real(x)
            }
        };
        scenario.check_trace_covers(scenario.sim.total_steps, "evaluation")?;

        for &kind in &kinds {
            let mut stats = Vec::with_capacity(scenario.run.seeds);
            for index in 0..scenario.run.seeds {
                stats.push(run_one(&scenario, kind, index, agent.as_ref())?);
            }
            let agg = aggregate(&stats);
            let mut cells =
                vec![kind.label().to_string(), axis.label().to_string(), value_label.clone()];
            cells.extend(aggregate_cells(&agg));
            table.row(&cells);
            eprintln!(
                "sweep: {}={} {} — delivery {} delay {} forwards {}",
                axis.label(),
                value_label,
                kind.label(),
                csv::real(agg.delivery_rate),
                csv::opt(agg.mean_delay),
                csv::opt(agg.mean_forwards),
            );
        }
    }
    table.write(&out_dir.join("sweep.csv"))?;
    Ok(())
}

pub fn qgrid(
    checkpoint: &Path,
    x: &str,
    y: &str,
    resolution: usize,
    fixed: &[String],
    out: &Path,
) -> Result<()> {
    let (net, meta) = load_checkpoint::<Real>(checkpoint)?;
    let mut names = state_feature_names();
    names.extend(action_feature_names(meta.n_history));
    if names.len() != net.input_dim() {
        return Err(Error::config(format!(
            "checkpoint input width {} does not match its declared context length",
            net.input_dim()
        )));
    }
    let index_of = |name: &str| {
        names.iter().position(|n| n == name).ok_or_else(|| {
            Error::config(format!(
                "unknown feature {name:?}; valid names: {}",
                names.join(", ")
            ))
        })
    };
    let axis_x = index_of(x)?;
    let axis_y = index_of(y)?;

    // Non-axis coordinates sit at mid-range unless pinned explicitly.
    let mut template = vec![0.5 as Real; names.len()];
    for entry in fixed {
        let (name, raw) = entry
            .split_once('=')
            .ok_or_else(|| Error::config(format!("fixed value {entry:?} is not name=value")))?;
        let value: Real = raw
            .parse()
            .map_err(|_| Error::config(format!("fixed value {raw:?} is not a number")))?;
        let i = index_of(name)?;
        if i == axis_x || i == axis_y {
            return Err(Error::config(format!("{name:?} is a grid axis; it cannot be fixed")));
        }
        template[i] = value;
    }

    let cells = qvalue_grid(&net, axis_x, axis_y, &template, resolution)?;
    let mut table = Csv::new(&format!("{x},{y},q"));
    for cell in &cells {
        table.row(&[csv::real(cell.x), csv::real(cell.y), csv::real(cell.q)]);
    }
    table.write(out)?;
    eprintln!("qgrid: {}x{resolution} grid of {x} vs {y} -> {}", resolution, out.display());
    Ok(())
}

/// Parses a trace file produced by `generate-mobility`, for tools that want
/// to re-check artifacts.
#[allow(dead_code)]
pub fn read_trace(path: &Path) -> Result<MobilityTrace<Real>> {
    hopsim::mobility::parse_trace(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_parse_and_label_round_trip() {
        for kind in [
            StrategyKind::Direct,
            StrategyKind::Utility,
            StrategyKind::SeekFocus,
            StrategyKind::DeepRl,
            StrategyKind::Oracle,
        ] {
            assert_eq!(kind.label().parse::<StrategyKind>().unwrap(), kind);
        }
        assert!("flooding".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn default_strategy_list_tracks_checkpoint_presence() {
        let without = resolve_strategies(&[], false).unwrap();
        assert!(!without.contains(&StrategyKind::DeepRl));
        let with = resolve_strategies(&[], true).unwrap();
        assert!(with.contains(&StrategyKind::DeepRl));
        assert!(with.contains(&StrategyKind::Oracle));
    }

    #[test]
    fn deeprl_without_checkpoint_is_a_config_error() {
        let err = resolve_strategies(&["deeprl".to_string()], false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn aggregate_pools_counts_and_averages_means() {
        let stats = vec![
            RunStats {
                created: 10,
                delivered: 10,
                dropped: 0,
                delivery_rate: 1.0,
                mean_delay: Some(100.0),
                mean_forwards: Some(2.0),
                avg_queue: 1.0,
                max_queue: 3,
                rounds: Vec::new(),
            },
            RunStats {
                created: 30,
                delivered: 15,
                dropped: 15,
                delivery_rate: 0.5,
                mean_delay: Some(200.0),
                mean_forwards: Some(4.0),
                avg_queue: 3.0,
                max_queue: 5,
                rounds: Vec::new(),
            },
        ];
        let agg = aggregate(&stats);
        assert_eq!(agg.runs, 2);
        assert_eq!(agg.created, 40);
        assert_eq!(agg.delivered, 25);
        // Pooled rate, not the mean of the per-run rates.
        assert_eq!(agg.delivery_rate, 0.625);
        assert_eq!(agg.mean_delay, Some(150.0));
        assert_eq!(agg.mean_forwards, Some(3.0));
        assert_eq!(agg.avg_queue, 2.0);
        assert!(agg.delay_ci95.unwrap() > 0.0);
    }

    #[test]
    fn axis_names_parse() {
        assert_eq!("devices".parse::<Axis>().unwrap(), Axis::Devices);
        assert_eq!("range".parse::<Axis>().unwrap(), Axis::Range);
        assert!("speed".parse::<Axis>().is_err());
    }
}
