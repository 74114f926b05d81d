//! Scenario configuration files and their resolution into simulation inputs.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::MonteCarloError;
use crate::canonical::{build_energy_only, build_energy_reserve, CanonicalMpp, MarketKind, ReserveSpec};
use crate::netcase::{parse_case, Network};
use crate::solver::{SolveStatus, Solver};
use crate::stats::ReportOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindFarm {
    /// External bus id.
    pub bus: i64,
    /// Mean output, MW.
    pub mu: f64,
    /// Standard deviation as a fraction of `mu`.
    #[serde(default = "default_wind_std")]
    pub rel_std: f64,
}

fn default_wind_std() -> f64 {
    0.03
}

fn default_scale() -> f64 {
    1.0
}

/// Mean net-load trajectory `d_t`, t = 1..T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanTrajectory {
    /// Every interval uses the case's bus load means, scaled.
    Constant {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Bus load means scaled by a per-interval factor read from a CSV file
    /// with a `factor` column; interval t uses row `start_index + t - 1`.
    Profile {
        file: String,
        #[serde(default)]
        start_index: usize,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Explicit `T x buses` table, MW, buses in case order.
    Inline { values: Vec<Vec<f64>> },
}

impl Default for MeanTrajectory {
    fn default() -> Self {
        MeanTrajectory::Constant { scale: 1.0 }
    }
}

fn default_market() -> MarketKind {
    MarketKind::EnergyOnly
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub case: String,
    #[serde(default = "default_market")]
    pub market: MarketKind,
    #[serde(rename = "horizon_T")]
    pub horizon: usize,
    #[serde(rename = "runs_M")]
    pub runs: usize,
    pub seed: u64,
    /// Relative standard deviation of each bus load.
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub windfarms: Vec<WindFarm>,
    #[serde(default)]
    pub mean_trajectory: MeanTrajectory,
    /// Dispatch before the first interval; solved at the first mean point
    /// without ramp limits when absent.
    #[serde(default)]
    pub initial_dispatch: Option<Vec<f64>>,
    #[serde(default)]
    pub reserve_spec: Option<ReserveSpec>,
    #[serde(default)]
    pub report: ReportOptions,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, MonteCarloError> {
        serde_json::from_str(text).map_err(|e| MonteCarloError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), MonteCarloError> {
        let bad = |m: String| Err(MonteCarloError::Config(m));
        if self.horizon == 0 {
            return bad("horizon_T must be at least 1".into());
        }
        if self.runs == 0 {
            return bad("runs_M must be at least 1".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be a nonnegative number, got {}", self.eta));
        }
        for w in &self.windfarms {
            if !(w.mu.is_finite() && w.rel_std >= 0.0 && w.rel_std.is_finite()) {
                return bad(format!("windfarm at bus {} has invalid mu or rel_std", w.bus));
            }
        }
        match (self.market, &self.reserve_spec) {
            (MarketKind::EnergyReserve, None) => bad("market energy-reserve requires reserve_spec".into()),
            (MarketKind::EnergyOnly, Some(_)) => bad("reserve_spec is only valid with market energy-reserve".into()),
            _ => Ok(()),
        }
    }
}

/// Where file references in a config are resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum ResourceBase {
    Dir(PathBuf),
    /// Bundled presets: references resolve by file name against bundled data.
    Bundled,
}

const BUNDLED: &[(&str, &str)] = &[
    ("twobus.json", include_str!("../../data/cases/twobus.json")),
    ("twobus_quadratic.json", include_str!("../../data/cases/twobus_quadratic.json")),
    ("threebus.json", include_str!("../../data/cases/threebus.json")),
    ("ieee14.json", include_str!("../../data/cases/ieee14.json")),
    ("ieee14_quadratic.json", include_str!("../../data/cases/ieee14_quadratic.json")),
    ("duck_curve.csv", include_str!("../../data/profiles/duck_curve.csv")),
];

const PRESETS: &[(&str, &str)] = &[
    ("twobus-steady", include_str!("../../data/presets/twobus-steady.json")),
    ("twobus-boundary", include_str!("../../data/presets/twobus-boundary.json")),
    ("twobus-boundary-quadratic", include_str!("../../data/presets/twobus-boundary-quadratic.json")),
    ("ieee14-duck", include_str!("../../data/presets/ieee14-duck.json")),
    ("ieee14-duck-quadratic", include_str!("../../data/presets/ieee14-duck-quadratic.json")),
    ("ieee14-duck-steady", include_str!("../../data/presets/ieee14-duck-steady.json")),
    ("ieee14-duck-crossing", include_str!("../../data/presets/ieee14-duck-crossing.json")),
    ("ieee14-reserve", include_str!("../../data/presets/ieee14-reserve.json")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

impl ResourceBase {
    pub fn read(&self, reference: &str) -> Result<String, MonteCarloError> {
        match self {
            ResourceBase::Dir(dir) => {
                let path = dir.join(reference);
                std::fs::read_to_string(&path).map_err(|e| MonteCarloError::Io(format!("{}: {e}", path.display())))
            }
            ResourceBase::Bundled => {
                let name = Path::new(reference).file_name().and_then(|n| n.to_str()).unwrap_or(reference);
                BUNDLED
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t.to_string())
                    .ok_or_else(|| MonteCarloError::Io(format!("no bundled resource named {name}")))
            }
        }
    }
}

/// A config resolved into its network and parametric program.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub network: Network,
    pub mpp: CanonicalMpp,
    /// Mean bus loads per interval, before wind.
    pub mean_loads: Vec<DVector<f64>>,
    /// `(bus index, mean, std)` per wind farm.
    pub wind: Vec<(usize, f64, f64)>,
    pub initial_dispatch: DVector<f64>,
}

impl Scenario {
    /// Loads `reference`: a file path, or `preset:<name>` for a bundled preset.
    pub fn load(reference: &str) -> Result<Scenario, MonteCarloError> {
        let (text, base) = Self::read_config(reference)?;
        Scenario::from_config(ScenarioConfig::from_json(&text)?, &base)
    }

    pub fn read_config(reference: &str) -> Result<(String, ResourceBase), MonteCarloError> {
        if let Some(name) = reference.strip_prefix("preset:") {
            let text = preset_text(name).ok_or_else(|| {
                let known: Vec<_> = preset_names().collect();
                MonteCarloError::Config(format!("unknown preset {name}; known: {}", known.join(", ")))
            })?;
            return Ok((text.to_string(), ResourceBase::Bundled));
        }
        let path = Path::new(reference);
        let text =
            std::fs::read_to_string(path).map_err(|e| MonteCarloError::Io(format!("{}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((text, ResourceBase::Dir(dir)))
    }

    pub fn from_config(config: ScenarioConfig, base: &ResourceBase) -> Result<Scenario, MonteCarloError> {
        config.validate()?;
        let network = parse_case(&base.read(&config.case)?)?;
        let mpp = match (&config.market, &config.reserve_spec) {
            (MarketKind::EnergyReserve, Some(spec)) => build_energy_reserve(&network, spec)?,
            _ => build_energy_only(&network)?,
        };
        let mean_loads = resolve_trajectory(&config, &network, base)?;
        let mut wind = Vec::new();
        for w in &config.windfarms {
            let bus = network
                .bus_index(w.bus)
                .ok_or_else(|| MonteCarloError::Config(format!("windfarm references unknown bus {}", w.bus)))?;
            wind.push((bus, w.mu, w.rel_std * w.mu.abs()));
        }
        let mut scenario = Scenario {
            config,
            network,
            mpp,
            mean_loads,
            wind,
            initial_dispatch: DVector::zeros(0),
        };
        scenario.initial_dispatch = match &scenario.config.initial_dispatch {
            Some(g) => {
                if g.len() != scenario.network.n_generators() {
                    return Err(MonteCarloError::Config(format!(
                        "initial_dispatch has {} values, case has {} generators",
                        g.len(),
                        scenario.network.n_generators()
                    )));
                }
                DVector::from_vec(g.clone())
            }
            None => scenario.unramped_dispatch()?,
        };
        Ok(scenario)
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn runs(&self) -> usize {
        self.config.runs
    }

    /// Expected net load at interval `t` (1-based): mean loads minus mean wind.
    pub fn mean_net_load(&self, t: usize) -> DVector<f64> {
        let mut d = self.mean_loads[t - 1].clone();
        for &(bus, mu, _) in &self.wind {
            d[bus] -= mu;
        }
        d
    }

    /// Parameter vector from loads and the previous dispatch.
    pub fn theta(&self, d: &DVector<f64>, g_prev: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(d.len() + g_prev.len(), d.iter().chain(g_prev.iter()).copied())
    }

    fn unramped_dispatch(&self) -> Result<DVector<f64>, MonteCarloError> {
        let relaxed = self.mpp.without_rows(|tag| tag.is_ramp());
        let zero = DVector::zeros(self.network.n_generators());
        let theta = self.theta(&self.mean_net_load(1), &zero);
        let res = Solver::new().solve(&relaxed, &theta)?;
        match res.status {
            SolveStatus::Optimal | SolveStatus::Degenerate => Ok(relaxed.dispatch(&res.x_star).into_owned()),
            other => Err(MonteCarloError::Infeasible(format!(
                "initial dispatch at the first mean load: {other:?}"
            ))),
        }
    }
}

fn resolve_trajectory(
    config: &ScenarioConfig,
    network: &Network,
    base: &ResourceBase,
) -> Result<Vec<DVector<f64>>, MonteCarloError> {
    let means = DVector::from_vec(network.load_means());
    let horizon = config.horizon;
    match &config.mean_trajectory {
        MeanTrajectory::Constant { scale } => Ok(vec![&means * *scale; horizon]),
        MeanTrajectory::Profile { file, start_index, scale } => {
            let factors = read_profile(&base.read(file)?, file)?;
            if start_index + horizon > factors.len() {
                return Err(MonteCarloError::Config(format!(
                    "profile {file} has {} rows; start_index {start_index} with horizon {horizon} runs past the end",
                    factors.len()
                )));
            }
            Ok(factors[*start_index..start_index + horizon]
                .iter()
                .map(|f| &means * (f * scale))
                .collect())
        }
        MeanTrajectory::Inline { values } => {
            if values.len() != horizon {
                return Err(MonteCarloError::Config(format!(
                    "inline mean_trajectory has {} rows, horizon_T is {horizon}",
                    values.len()
                )));
            }
            values
                .iter()
                .enumerate()
                .map(|(t, row)| {
                    if row.len() != network.n_buses() {
                        Err(MonteCarloError::Config(format!(
                            "inline mean_trajectory row {} has {} values, case has {} buses",
                            t + 1,
                            row.len(),
                            network.n_buses()
                        )))
                    } else {
                        Ok(DVector::from_vec(row.clone()))
                    }
                })
                .collect()
        }
    }
}

/// Reads the `factor` column of a profile CSV.
pub fn read_profile(text: &str, name: &str) -> Result<Vec<f64>, MonteCarloError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| MonteCarloError::Config(format!("{name}: {e}")))?
        .clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == "factor")
        .ok_or_else(|| MonteCarloError::Config(format!("{name}: no factor column")))?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| MonteCarloError::Config(format!("{name}: {e}")))?;
        let v: f64 = rec
            .get(col)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| MonteCarloError::Config(format!("{name}: bad factor on data row {}", row + 1)))?;
        out.push(v);
    }
    Ok(out)
}
