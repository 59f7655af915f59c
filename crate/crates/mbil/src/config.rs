//! Experiment configuration: one TOML tree plus dotted-path overrides.
//!
//! Resolution order: built-in defaults for the chosen environment, then the
//! config file, then each `--set key=value` in order. Values given to
//! `--set` are parsed as TOML (`3`, `0.5`, `true`, `[1, 3]`, `"nll"`) and
//! fall back to a bare string. Unknown keys are errors.

use std::path::{Path, PathBuf};

use mbil_core::envs::gridworld::{GridExpert, Prob};
use mbil_core::envs::{BuiltinEnv, BuiltinExpert, GridWorld, PointMass, PointMassExpert};
use mbil_core::flow::DensityFitConfig;
use mbil_core::mbil::{DensityEstimator, MbilConfig, PolicyTrainConfig, Selection};
use mbil_core::policy::PolicyLossKind;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{io, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Gridworld,
    Pointmass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    pub width: usize,
    pub height: usize,
    /// Rational, written as `"1/10"` or `"0.1"`.
    pub p_slip: String,
    pub epsilon: String,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSettings {
    pub dt: f64,
    pub sigma: f64,
    pub bound: f64,
    pub start: f64,
    pub horizon: usize,
    pub expert_gain: f64,
    pub expert_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    pub gridworld: GridSettings,
    pub pointmass: PointSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Expert pool file; generated from the expert when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Size of the generated pool.
    pub pool: usize,
    pub pool_seed: u64,
    /// Dataset sizes for `train` sweeps.
    pub n_trajectories: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mbil,
    Bc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Episodes per periodic evaluation during training.
    pub episodes: usize,
    /// Episodes for the final evaluation of θ*.
    pub final_episodes: usize,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub seed: u64,
    pub n_seeds: usize,
    pub out: PathBuf,
    /// Worker threads for sweeps.
    pub parallelism: usize,
    /// Write a metrics row every this many iterations (evaluation
    /// iterations and the last one are always written).
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    pub n_trajectories: usize,
    /// `[alpha, beta]` pairs.
    pub grid: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityCheckSettings {
    /// Held-out expert trajectories generated for the check.
    pub trajectories: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub data: DataConfig,
    pub method: Method,
    pub mbil: MbilConfig,
    pub eval: EvalSettings,
    pub run: RunSettings,
    pub ablation: AblationSettings,
    pub density_check: DensityCheckSettings,
}

impl ExperimentConfig {
    pub fn defaults(env: EnvName) -> Self {
        let discrete = env == EnvName::Gridworld;
        let mut mbil = MbilConfig {
            alpha: 0.001,
            beta: 1.0,
            train: PolicyTrainConfig {
                loss: PolicyLossKind::Nll,
                iterations: 5000,
                batch_size: 64,
                eval_every: 500,
                selection: Selection::Final,
                ..PolicyTrainConfig::default()
            },
            ..MbilConfig::default()
        };
        if discrete {
            mbil.train.iterations = 2000;
            mbil.density.hidden = 32;
            mbil.density.fit = DensityFitConfig {
                steps: 500,
                batch_size: 64,
                ..DensityFitConfig::default()
            };
        }
        Self {
            env: EnvConfig {
                name: env,
                gridworld: GridSettings {
                    width: 5,
                    height: 5,
                    p_slip: "1/10".into(),
                    epsilon: "1/20".into(),
                    horizon: 50,
                },
                pointmass: PointSettings {
                    dt: 0.1,
                    sigma: 0.1,
                    bound: 2.0,
                    start: 0.8,
                    horizon: 100,
                    expert_gain: 1.0,
                    expert_noise: 0.05,
                },
            },
            data: DataConfig {
                path: None,
                pool: if discrete { 1000 } else { 100 },
                pool_seed: 0,
                n_trajectories: vec![1, 3, 7, 10, 15],
            },
            method: Method::Mbil,
            mbil,
            eval: EvalSettings {
                episodes: if discrete { 300 } else { 10 },
                final_episodes: if discrete { 300 } else { 100 },
                deterministic: true,
            },
            run: RunSettings {
                seed: 0,
                n_seeds: if discrete { 10 } else { 5 },
                out: PathBuf::from("runs"),
                parallelism: 1,
                log_every: 100,
            },
            ablation: AblationSettings {
                n_trajectories: 1,
                grid: vec![[1.0, 0.0], [0.0, 1.0], [1.0, 0.001], [0.001, 1.0]],
            },
            density_check: DensityCheckSettings {
                trajectories: 20,
                seed: 12345,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mbil.validate().map_err(|e| Error::Config(e.to_string()))?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.data.n_trajectories.is_empty() || self.data.n_trajectories.contains(&0) {
            return bad("data.n_trajectories must list positive sizes");
        }
        if self.run.n_seeds == 0 {
            return bad("run.n_seeds must be at least 1");
        }
        if self.run.parallelism == 0 || self.run.log_every == 0 {
            return bad("run.parallelism and run.log_every must be at least 1");
        }
        if self.eval.final_episodes == 0 {
            return bad("eval.final_episodes must be at least 1");
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(Error::Config(format!("data.path {} does not exist", p.display())));
            }
        }
        if self.env.name == EnvName::Gridworld && self.mbil.train.loss == PolicyLossKind::Mse {
            return bad("mbil.train.loss = \"mse\" needs continuous actions; gridworld is discrete");
        }
        parse_prob(&self.env.gridworld.p_slip)?;
        parse_prob(&self.env.gridworld.epsilon)?;
        let pm = &self.env.pointmass;
        if !(pm.dt > 0.0 && pm.sigma > 0.0 && pm.expert_noise > 0.0 && pm.start > 0.0 && pm.bound > pm.start) {
            return bad("env.pointmass needs dt, sigma, expert_noise, start > 0 and bound > start");
        }
        self.env()?;
        Ok(())
    }

    pub fn env(&self) -> Result<BuiltinEnv> {
        Ok(match self.env.name {
            EnvName::Gridworld => {
                let g = &self.env.gridworld;
                if g.width < 2 || g.height < 2 {
                    return Err(Error::Config("gridworld needs at least 2x2 cells".into()));
                }
                let p = parse_prob(&g.p_slip)?;
                let mut grid = GridWorld::new(g.width, g.height, p);
                grid.horizon = g.horizon;
                BuiltinEnv::GridWorld(grid)
            }
            EnvName::Pointmass => {
                let p = &self.env.pointmass;
                BuiltinEnv::PointMass(PointMass {
                    dt: p.dt,
                    sigma: p.sigma,
                    bound: p.bound,
                    start: p.start,
                    horizon: p.horizon,
                })
            }
        })
    }

    pub fn expert(&self) -> Result<BuiltinExpert> {
        Ok(match self.env()? {
            BuiltinEnv::GridWorld(g) => BuiltinExpert::Grid(GridExpert::optimal(&g, parse_prob(&self.env.gridworld.epsilon)?)),
            BuiltinEnv::PointMass(p) => BuiltinExpert::Point(PointMassExpert {
                env: p,
                gain: self.env.pointmass.expert_gain,
                noise: self.env.pointmass.expert_noise,
            }),
        })
    }

    pub fn horizon(&self) -> usize {
        match self.env.name {
            EnvName::Gridworld => self.env.gridworld.horizon,
            EnvName::Pointmass => self.env.pointmass.horizon,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Defaults → `file` → `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io(p))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut user = Value::Table(user);
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut user, key.trim(), parse_value(raw.trim()))?;
        }
        let env = match user.get("env").and_then(|e| e.get("name")) {
            None => EnvName::Pointmass,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("env.name: {e}")))?,
        };
        let mut tree = Value::try_from(Self::defaults(env)).expect("defaults serialize");
        merge(&mut tree, user, "")?;
        let cfg: Self = tree.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Keys that may appear in a config without a default value.
const OPTIONAL_KEYS: &[&str] = &["data.path"];

fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None if OPTIONAL_KEYS.contains(&path.as_str()) => {
                        b.insert(k, v);
                    }
                    None => return Err(Error::Config(format!("unknown key {path:?}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            // integers are accepted where the default is a float
            *slot = match (&*slot, v) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    for p in &parts[..parts.len() - 1] {
        let Value::Table(t) = cur else {
            return Err(Error::Config(format!("override {key:?} descends into a non-table")));
        };
        cur = t.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
    }
    let Value::Table(t) = cur else {
        return Err(Error::Config(format!("override {key:?} descends into a non-table")));
    };
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// `"p/q"`, an integer, or a finite decimal such as `"0.05"`.
pub fn parse_prob(s: &str) -> Result<Prob> {
    let bad = || Error::Config(format!("{s:?} is not a probability"));
    let p = if let Some((int, frac)) = s.split_once('.') {
        if frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10i64.pow(frac.len() as u32);
        let int: i64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Prob::new(int * den + frac, den)
    } else {
        s.parse::<Prob>().map_err(|_| bad())?
    };
    if p < Prob::from_integer(0) || p > Prob::from_integer(1) {
        return Err(bad());
    }
    Ok(p)
}

pub fn estimator_name(e: DensityEstimator) -> &'static str {
    match e {
        DensityEstimator::Flow => "flow",
        DensityEstimator::Tabular => "tabular",
    }
}

