//! Experiment configuration in TOML.
//!
//! Every key has an embedded default, so a file only needs the keys it
//! changes. Precedence, lowest first: defaults, the config file, then
//! `section.key=value` overrides in the order given.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::network::NetConfig;
use crate::node::PipelineConfig;
use crate::scenario::{NoiseConfig, ScenarioConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Experiment families with a runnable sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Estimator accuracy and time against window size, per method.
    Tab1,
    /// Pipeline accuracy per stage against window size and PCM significance.
    Tab2,
    /// Residual landscape over the search grid.
    Fig4,
    /// Estimator accuracy and time against the angular step.
    Fig6,
    /// Estimator accuracy against ranging limit and ranging noise.
    Fig7,
    /// Estimator accuracy against odometry noise.
    Fig8,
    /// Per-operation timing and communication against DPGO rate.
    Tab4,
}

impl SweepKind {
    pub const ALL: [SweepKind; 7] = [
        SweepKind::Tab1,
        SweepKind::Tab2,
        SweepKind::Fig4,
        SweepKind::Fig6,
        SweepKind::Fig7,
        SweepKind::Fig8,
        SweepKind::Tab4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Tab1 => "tab1",
            SweepKind::Tab2 => "tab2",
            SweepKind::Fig4 => "fig4",
            SweepKind::Fig6 => "fig6",
            SweepKind::Fig7 => "fig7",
            SweepKind::Fig8 => "fig8",
            SweepKind::Tab4 => "tab4",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Overrides that turn the defaults into this family's experiment.
    pub fn preset(self) -> Vec<String> {
        let mut o = vec![format!("sweep.kind={}", self.name())];
        let extra: &[&str] = match self {
            SweepKind::Tab1 => &["pipeline.estimator.search.delta=0.1"],
            SweepKind::Tab2 => &["pipeline.estimator.search.delta=0.1"],
            SweepKind::Fig4 => &["pipeline.estimator.tau=50", "sweep.delta=[0.1]"],
            SweepKind::Fig6 | SweepKind::Fig7 | SweepKind::Fig8 => {
                &["pipeline.estimator.tau=100", "pipeline.estimator.search.delta=0.1"]
            }
            SweepKind::Tab4 => &[
                "pipeline.estimator.tau=50",
                "pipeline.estimator.search.delta=0.1",
                "pipeline.pcm.epsilon=0.1",
            ],
        };
        o.extend(extra.iter().map(|s| s.to_string()));
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset file to read; empty means generate from `[scenario]` and `[noise]`.
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Window sizes, in the unit of `pipeline.estimator.tau_unit`.
    pub tau: Vec<f64>,
    /// Angular search steps (rad).
    pub delta: Vec<f64>,
    /// PCM significance levels.
    pub epsilon: Vec<f64>,
    /// Ranging limit as a fraction of the largest true distance.
    pub range_fraction: Vec<f64>,
    /// Ranging noise sigmas (m).
    pub uwb_sigma: Vec<f64>,
    /// Multipliers applied to both odometry noise sigmas.
    pub odom_noise_scale: Vec<f64>,
    /// DPGO rounds per second.
    pub dpgo_rate: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Spacing of evaluation windows in estimator sweeps (s).
    pub eval_stride: f64,
    /// Largest window span accepted in estimator sweeps, as a multiple of τ.
    pub max_span_factor: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: SweepKind::Tab1,
            tau: vec![10.0, 25.0, 50.0, 100.0],
            delta: vec![0.05, 0.1, 0.2, 0.3, 0.5],
            epsilon: vec![0.01, 0.05, 0.1, 0.2, 0.5, 0.8],
            range_fraction: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            uwb_sigma: vec![0.0, 0.1, 0.2],
            odom_noise_scale: vec![0.0, 1.0, 2.0, 5.0, 10.0],
            dpgo_rate: vec![1.0, 10.0],
            seeds: vec![0, 1, 2],
            eval_stride: 20.0,
            max_span_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub scenario: ScenarioConfig,
    pub noise: NoiseConfig,
    pub pipeline: PipelineConfig,
    pub network: NetConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        resolve(Some(text), &[])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.sweep.seeds.is_empty() {
            return invalid("sweep.seeds must list at least one seed".into());
        }
        if self.scenario.robots < 2 {
            return invalid("scenario.robots must be >= 2".into());
        }
        if !(self.scenario.duration > 0.0 && self.scenario.speed_limit > 0.0) {
            return invalid("scenario.duration and scenario.speed_limit must be > 0".into());
        }
        self.noise.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pipeline.validate().map_err(ConfigError::Invalid)?;
        self.network.validate().map_err(ConfigError::Invalid)?;
        if !(self.sweep.eval_stride > 0.0 && self.sweep.max_span_factor >= 1.0) {
            return invalid("sweep.eval_stride must be > 0 and sweep.max_span_factor >= 1".into());
        }
        Ok(())
    }

    /// Non-empty check of the lists used by a sweep family.
    pub fn validate_sweep(&self) -> Result<(), ConfigError> {
        let s = &self.sweep;
        let lists: Vec<(&str, usize)> = match s.kind {
            SweepKind::Tab1 => vec![("tau", s.tau.len())],
            SweepKind::Tab2 => vec![("tau", s.tau.len()), ("epsilon", s.epsilon.len())],
            SweepKind::Fig4 => vec![("delta", s.delta.len())],
            SweepKind::Fig6 => vec![("delta", s.delta.len())],
            SweepKind::Fig7 => vec![("range_fraction", s.range_fraction.len()), ("uwb_sigma", s.uwb_sigma.len())],
            SweepKind::Fig8 => vec![("odom_noise_scale", s.odom_noise_scale.len())],
            SweepKind::Tab4 => vec![("dpgo_rate", s.dpgo_rate.len())],
        };
        for (name, len) in lists {
            if len == 0 {
                return Err(ConfigError::Invalid(format!(
                    "sweep.{name} must be non-empty for sweep kind {}",
                    s.kind.name()
                )));
            }
        }
        Ok(())
    }

    /// The same experiment with every random stream keyed to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.scenario.seed = seed;
        c.noise.rng_seed = seed;
        c.network.seed = seed;
        c.pipeline.outlier_seed = seed;
        c
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Integers written where the default holds floats become floats.
fn coerce(base: Option<&Value>, value: Value) -> Value {
    match (base, value) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
        (Some(Value::Array(b)), Value::Array(v)) if matches!(b.first(), Some(Value::Float(_))) => Value::Array(
            v.into_iter()
                .map(|x| match x {
                    Value::Integer(i) => Value::Float(i as f64),
                    x => x,
                })
                .collect(),
        ),
        (_, v) => v,
    }
}

/// Set `section.key=value` in a TOML tree, creating tables on the way.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(assignment.to_string());
    let (path, raw) = assignment.split_once('=').ok_or_else(bad)?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad());
    }
    let (last, parents) = keys.split_last().ok_or_else(bad)?;
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry.as_table_mut().ok_or_else(bad)?;
    }
    let value = coerce(node.get(*last), parse_value(raw));
    node.insert(last.to_string(), value);
    Ok(())
}

/// Defaults as a TOML tree, used as the base for overrides.
pub fn default_table() -> Table {
    Table::try_from(ExperimentConfig::default()).expect("defaults serialize")
}

/// Config from an optional file text and overrides, on top of the defaults.
pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut table = default_table();
    if let Some(text) = file {
        let user: Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut table, user);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u),
            (b, v) => {
                let v = coerce(b.as_deref(), v);
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::TauUnit;

    #[test]
    fn defaults_round_trip() {
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&d.to_toml()).unwrap(), d);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), d);
    }

    #[test]
    fn overrides_take_precedence_over_file() {
        let file = "[pipeline.estimator]\ntau = 25\ntau_unit = \"samples\"\n[sweep]\nseeds = [1, 2]\n";
        let cfg = resolve(Some(file), &["pipeline.estimator.tau=75".into(), "noise.uwb_sigma=0.3".into()]).unwrap();
        assert_eq!(cfg.pipeline.estimator.tau, 75.0);
        assert_eq!(cfg.pipeline.estimator.tau_unit, TauUnit::Samples);
        assert_eq!(cfg.noise.uwb_sigma, 0.3);
        assert_eq!(cfg.sweep.seeds, vec![1, 2]);
    }

    #[test]
    fn string_and_list_overrides() {
        let cfg = resolve(
            None,
            &["run.output_dir=results".into(), "sweep.kind=fig6".into(), "sweep.delta=[0.1, 0.2]".into(), "sweep.tau=[10, 20]".into()],
        )
        .unwrap();
        assert_eq!(cfg.run.output_dir, PathBuf::from("results"));
        assert_eq!(cfg.sweep.kind, SweepKind::Fig6);
        assert_eq!(cfg.sweep.delta, vec![0.1, 0.2]);
        assert_eq!(cfg.sweep.tau, vec![10.0, 20.0]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(resolve(None, &["pipeline.nope=1".into()]), Err(ConfigError::Parse(_))));
        assert!(matches!(resolve(None, &["no_equals".into()]), Err(ConfigError::Override(_))));
        assert!(matches!(resolve(None, &["sweep.seeds=[]".into()]), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            resolve(None, &["pipeline.pcm.epsilon=1.5".into()]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn empty_sweep_list_rejected_for_its_kind() {
        let cfg = resolve(None, &["sweep.kind=tab4".into(), "sweep.tau=[]".into()]).unwrap();
        assert!(cfg.validate_sweep().is_ok());
        let cfg = resolve(None, &["sweep.kind=tab1".into(), "sweep.tau=[]".into()]).unwrap();
        assert!(cfg.validate_sweep().is_err());
    }

    #[test]
    fn every_preset_resolves() {
        for kind in SweepKind::ALL {
            let cfg = resolve(None, &kind.preset()).unwrap();
            assert_eq!(cfg.sweep.kind, kind);
            cfg.validate_sweep().unwrap();
            assert_eq!(SweepKind::parse(kind.name()), Some(kind));
        }
    }

    #[test]
    fn seed_reaches_every_stream() {
        let c = ExperimentConfig::default().with_seed(9);
        assert_eq!(
            (c.scenario.seed, c.noise.rng_seed, c.network.seed, c.pipeline.outlier_seed),
            (9, 9, 9, 9)
        );
    }
}
