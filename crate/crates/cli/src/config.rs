use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use racbf::barrier::BarrierConfig;
use racbf::dynamics::InputBounds;
use racbf::learning::{SuiteSpec, TrainConfig};
use racbf::responsibility::PositionalRule;
use racbf::sim::{RolloutConfig, ScenarioKind, ScenarioParams};
use serde::Deserialize;

/// Config file contents. Every section is optional and every key falls back
/// to its library default; unknown keys are rejected.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub barrier: BarrierConfig,
    pub bounds: InputBounds,
    pub scenario: ScenarioParams,
    pub rollout: RolloutSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub simulate: SimulateSection,
    pub analyze: AnalyzeSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub ego_accel_bias: f64,
    pub slack_weight: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Scenario kind name to count.
    pub suite: BTreeMap<String, usize>,
    /// Ground-truth allocation of the trailing and leading agent.
    pub gamma_trailing: f64,
    pub gamma_leading: f64,
    /// Fraction of scenarios withheld from training for validation.
    pub held_out_fraction: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub suite: BTreeMap<String, usize>,
    pub name: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Moving-average window used when only positions are available.
    pub window: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            barrier: BarrierConfig::default(),
            bounds: InputBounds::default(),
            scenario: ScenarioParams::default(),
            rollout: RolloutSection::default(),
            data: DataSection::default(),
            train: TrainConfig::default(),
            simulate: SimulateSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

impl Default for RolloutSection {
    fn default() -> Self {
        let r = RolloutConfig::default();
        Self { ego_accel_bias: r.ego_accel_bias, slack_weight: r.slack_weight }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            suite: [("car_follow", 30), ("intersection", 30), ("merge", 30)]
                .into_iter()
                .map(|(k, n)| (k.to_string(), n))
                .collect(),
            gamma_trailing: 0.3,
            gamma_leading: -0.3,
            held_out_fraction: 0.2,
        }
    }
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            suite: [("car_follow", 14), ("intersection", 14), ("merge", 12)]
                .into_iter()
                .map(|(k, n)| (k.to_string(), n))
                .collect(),
            name: "synthetic".into(),
        }
    }
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { window: 5 }
    }
}

/// Suite entries in canonical kind order.
pub fn parse_suite(map: &BTreeMap<String, usize>) -> Result<Vec<(ScenarioKind, usize)>> {
    let mut entries = Vec::new();
    for (name, &count) in map {
        let kind: ScenarioKind = name.parse().map_err(anyhow::Error::from)?;
        entries.push((kind, count));
    }
    entries.sort_by_key(|e| ScenarioKind::ALL.iter().position(|k| *k == e.0));
    if entries.iter().all(|e| e.1 == 0) {
        bail!("suite is empty");
    }
    Ok(entries)
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: Self = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.barrier.validate()?;
        self.bounds.validate()?;
        self.scenario.validate()?;
        self.train.validate()?;
        parse_suite(&self.data.suite).context("[data] suite")?;
        parse_suite(&self.simulate.suite).context("[simulate] suite")?;
        self.ground_truth()?;
        if !(0.0..1.0).contains(&self.data.held_out_fraction) {
            bail!("held_out_fraction must lie in [0, 1), got {}", self.data.held_out_fraction);
        }
        if !(self.rollout.slack_weight > 0.0 && self.rollout.slack_weight.is_finite()) {
            bail!("slack_weight must be positive and finite, got {}", self.rollout.slack_weight);
        }
        if !self.rollout.ego_accel_bias.is_finite() {
            bail!("ego_accel_bias must be finite");
        }
        if self.analyze.window == 0 || self.analyze.window.is_multiple_of(2) {
            bail!("analyze window must be odd and positive, got {}", self.analyze.window);
        }
        if self.simulate.name.contains([',', '"', '\n']) {
            bail!("simulate name must not contain commas, quotes or newlines");
        }
        Ok(())
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            barrier: self.barrier,
            bounds: self.bounds,
            ego_accel_bias: self.rollout.ego_accel_bias,
            slack_weight: self.rollout.slack_weight,
        }
    }

    pub fn ground_truth(&self) -> Result<PositionalRule> {
        Ok(PositionalRule::new(self.data.gamma_trailing, self.data.gamma_leading)?)
    }

    pub fn data_suite(&self) -> Result<SuiteSpec> {
        Ok(SuiteSpec { entries: parse_suite(&self.data.suite)?, params: self.scenario.clone() })
    }
}
