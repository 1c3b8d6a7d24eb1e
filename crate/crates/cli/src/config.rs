//! Experiment configuration: a TOML file with one section per concern,
//! defaulting to the standard desk-scale scenario (25 devices in a 500 m
//! square, 50 m radios). Every key can also be overridden from the command
//! line with `--set section.key=value`.

use std::path::Path;

use hopsim::deeprl::RLConfig;
use hopsim::error::{Error, Result};
use hopsim::mobility::MobilityConfig;
use hopsim::sim::SimConfig;
use hopsim::strategies::SeekFocusParams;
use hopsim::Real;
use serde::{Deserialize, Serialize};

/// Top-level configuration for every subcommand. Unknown keys are rejected
/// so typos fail loudly instead of silently running the defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mobility: MobilitySection,
    pub sim: SimSection,
    pub train: TrainSection,
    pub rl: RlSection,
    pub strategy: StrategySection,
    pub run: RunSection,
}

/// Random-waypoint trace generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilitySection {
    pub device_count: usize,
    /// Area extents in meters, width then height.
    pub area: [Real; 2],
    /// Speeds are drawn uniformly from mean ± delta (m/s).
    pub mean_speed: Real,
    pub speed_delta: Real,
    /// Trace length in seconds; must cover the longest run it feeds.
    pub duration: Real,
    pub seed: u64,
}

impl Default for MobilitySection {
    fn default() -> Self {
        MobilitySection {
            device_count: 25,
            area: [500.0, 500.0],
            mean_speed: 3.0,
            speed_delta: 2.0,
            duration: 110_000.0,
            seed: 1,
        }
    }
}

/// Evaluation-world parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Transmission range in meters.
    pub range: Real,
    pub queue_capacity: usize,
    /// Mean new flows per timestep; omitted, it scales with the population
    /// as 0.001 · device_count / 25.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_rate: Option<Real>,
    pub flow_duration: Real,
    pub packet_rate: Real,
    /// Hop budget stamped on packets during evaluation.
    pub ttl: usize,
    pub total_steps: usize,
    /// Trailing traffic-free window; lets in-flight packets resolve.
    pub cooldown_steps: usize,
    /// Metrics cadence for the per-round time series.
    pub round_steps: usize,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            range: 50.0,
            queue_capacity: 200,
            flow_rate: None,
            flow_duration: 5000.0,
            packet_rate: 0.01,
            ttl: 3000,
            total_steps: 100_000,
            cooldown_steps: 10_000,
            round_steps: 1000,
            seed: 1,
        }
    }
}

/// Training-world parameters; the remaining world settings (population,
/// range, traffic) are shared with `[sim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    /// Hop budget during training; also the frozen normalization reference
    /// the trained network carries into evaluation.
    pub ttl: usize,
    pub cooldown_steps: usize,
    /// Seeds the training traffic, exploration, and network initialization.
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { steps: 90_000, ttl: 300, cooldown_steps: 0, seed: 42 }
    }
}

/// Agent hyperparameters, mirroring [`RLConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    pub gamma: Real,
    pub epsilon_train: Real,
    pub epsilon_test: Real,
    pub r_stay: Real,
    pub r_transmit: Real,
    pub r_delivery: Real,
    pub iterations: usize,
    pub t_round: usize,
    pub dropout: Real,
    pub n_history: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: Real,
    pub batch_size: usize,
    pub batches_per_iteration: usize,
    pub max_grad_norm: Real,
}

impl Default for RlSection {
    fn default() -> Self {
        let d = RLConfig::<Real>::default();
        RlSection {
            gamma: d.gamma,
            epsilon_train: d.epsilon_train,
            epsilon_test: d.epsilon_test,
            r_stay: d.r_stay,
            r_transmit: d.r_transmit,
            r_delivery: d.r_delivery,
            iterations: d.iterations,
            t_round: d.t_round,
            dropout: d.dropout,
            n_history: d.n_history,
            hidden: d.hidden,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            batches_per_iteration: d.batches_per_iteration,
            max_grad_norm: d.max_grad_norm,
        }
    }
}

/// Classical-strategy knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    /// Utility routing forwards when the neighbor's timer beats the holder's
    /// by more than this margin.
    pub utility_threshold: Real,
    pub seek_focus: SeekFocusSection,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection { utility_threshold: 10.0, seek_focus: SeekFocusSection::default() }
    }
}

/// Seek-and-focus knobs, mirroring [`SeekFocusParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeekFocusSection {
    pub prob: Real,
    pub utility_threshold: Real,
    pub focus_threshold: Real,
    pub focus_patience: usize,
    pub seek_patience: usize,
    pub decoupling: usize,
}

impl Default for SeekFocusSection {
    fn default() -> Self {
        let d = SeekFocusParams::<Real>::default();
        SeekFocusSection {
            prob: d.prob,
            utility_threshold: d.utility_threshold,
            focus_threshold: d.focus_threshold,
            focus_patience: d.focus_patience,
            seek_patience: d.seek_patience,
            decoupling: d.decoupling,
        }
    }
}

/// Replication and artifact settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Independent runs per evaluation; run i offsets the mobility and
    /// traffic seeds by i.
    pub seeds: usize,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seeds: 50, out_dir: "out".to_string() }
    }
}

impl ExperimentConfig {
    /// Loads a config file if given, then applies `--set key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut value: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::config(format!("config file: {e}")))?;
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        value.try_into().map_err(|e| Error::config(e.to_string()))
    }

    /// Effective flow arrival rate: the explicit key, or the default that
    /// scales with the population so per-device load stays constant.
    pub fn flow_rate(&self) -> Real {
        self.sim
            .flow_rate
            .unwrap_or(0.001 * self.mobility.device_count as Real / 25.0)
    }

    /// Trace-generation parameters; `seed` varies per run.
    pub fn mobility_config(&self, seed: u64) -> MobilityConfig<Real> {
        MobilityConfig {
            device_count: self.mobility.device_count,
            area: (self.mobility.area[0], self.mobility.area[1]),
            mean_speed: self.mobility.mean_speed,
            speed_delta: self.mobility.speed_delta,
            duration: self.mobility.duration,
            seed,
        }
    }

    /// Evaluation-world parameters for one run. The context length and the
    /// frozen TTL reference follow the agent under test (checkpoint
    /// metadata), falling back to the training section for classical runs.
    pub fn eval_sim_config(&self, seed: u64, n_history: usize, ttl_reference: Real) -> SimConfig<Real> {
        SimConfig {
            device_count: self.mobility.device_count,
            range: self.sim.range,
            queue_capacity: self.sim.queue_capacity,
            flow_rate: self.flow_rate(),
            flow_duration: self.sim.flow_duration,
            packet_rate: self.sim.packet_rate,
            ttl_initial: self.sim.ttl,
            total_steps: self.sim.total_steps,
            cooldown_steps: self.sim.cooldown_steps,
            round_steps: self.sim.round_steps,
            n_history,
            ttl_reference,
            mean_speed: self.mobility.mean_speed,
            seed,
        }
    }

    /// Training-world parameters.
    pub fn train_sim_config(&self) -> SimConfig<Real> {
        SimConfig {
            device_count: self.mobility.device_count,
            range: self.sim.range,
            queue_capacity: self.sim.queue_capacity,
            flow_rate: self.flow_rate(),
            flow_duration: self.sim.flow_duration,
            packet_rate: self.sim.packet_rate,
            ttl_initial: self.train.ttl,
            total_steps: self.train.steps,
            cooldown_steps: self.train.cooldown_steps,
            round_steps: self.rl.t_round,
            n_history: self.rl.n_history,
            ttl_reference: self.train.ttl as Real,
            mean_speed: self.mobility.mean_speed,
            seed: self.train.seed,
        }
    }

    pub fn rl_config(&self) -> RLConfig<Real> {
        RLConfig {
            gamma: self.rl.gamma,
            epsilon_train: self.rl.epsilon_train,
            epsilon_test: self.rl.epsilon_test,
            r_stay: self.rl.r_stay,
            r_transmit: self.rl.r_transmit,
            r_delivery: self.rl.r_delivery,
            iterations: self.rl.iterations,
            t_round: self.rl.t_round,
            dropout: self.rl.dropout,
            n_history: self.rl.n_history,
            hidden: self.rl.hidden.clone(),
            learning_rate: self.rl.learning_rate,
            batch_size: self.rl.batch_size,
            batches_per_iteration: self.rl.batches_per_iteration,
            max_grad_norm: self.rl.max_grad_norm,
        }
    }

    pub fn seek_focus_params(&self) -> SeekFocusParams<Real> {
        let s = &self.strategy.seek_focus;
        SeekFocusParams {
            prob: s.prob,
            utility_threshold: s.utility_threshold,
            focus_threshold: s.focus_threshold,
            focus_patience: s.focus_patience,
            seek_patience: s.seek_patience,
            decoupling: s.decoupling,
        }
    }

    /// The trace must outlast the discrete steps it will be sampled at.
    pub fn check_trace_covers(&self, steps: usize, what: &str) -> Result<()> {
        if self.mobility.duration < (steps as Real) {
            return Err(Error::config(format!(
                "mobility.duration {} is shorter than the {steps}-step {what} run",
                self.mobility.duration
            )));
        }
        Ok(())
    }
}

/// Applies one `section.key=value` override onto the parsed TOML tree. The
/// value is parsed as TOML (numbers, booleans, arrays); anything that does
/// not parse is taken as a bare string.
fn apply_override(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {entry:?} is not key=value")))?;
    let parsed: toml::Value = match toml::from_str::<ValueHolder>(&format!("v = {raw}")) {
        Ok(holder) => holder.v,
        Err(_) => toml::Value::String(raw.to_string()),
    };

    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override key {path:?} has an empty segment")));
    }
    for segment in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key {path:?} crosses a non-table")))?;
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override key {path:?} crosses a non-table")))?;
    table.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

#[derive(Deserialize)]
struct ValueHolder {
    v: toml::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = ExperimentConfig::default();
        let text = toml::to_string(&config).unwrap();
        let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[sim]\nrnage = 60.0\n");
        assert!(err.is_err());
    }

    #[test]
    fn overrides_set_nested_keys() {
        let config = ExperimentConfig::load(
            None,
            &[
                "sim.range=60.5".to_string(),
                "mobility.device_count=64".to_string(),
                "rl.hidden=[32, 16]".to_string(),
                "run.out_dir=artifacts".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.sim.range, 60.5);
        assert_eq!(config.mobility.device_count, 64);
        assert_eq!(config.rl.hidden, vec![32, 16]);
        assert_eq!(config.run.out_dir, "artifacts");
    }

    #[test]
    fn override_of_unknown_key_fails_typed_parse() {
        let err = ExperimentConfig::load(None, &["sim.rnage=60".to_string()]);
        assert!(err.is_err());
    }

    #[test]
    fn flow_rate_scales_with_population_unless_pinned() {
        let mut config = ExperimentConfig::default();
        assert_eq!(config.flow_rate(), 0.001);
        config.mobility.device_count = 100;
        assert_eq!(config.flow_rate(), 0.004);
        config.sim.flow_rate = Some(0.002);
        assert_eq!(config.flow_rate(), 0.002);
    }

    #[test]
    fn malformed_override_reports_config_error() {
        let err = ExperimentConfig::load(None, &["sim.range".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
