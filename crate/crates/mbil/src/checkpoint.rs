//! Versioned JSON checkpoints.
//!
//! A checkpoint is a model header plus a flat name → array map:
//!
//! ```json
//! {"format":"mbil-checkpoint","version":1,
//!  "model":{"kind":"policy","policy":"gaussian","state_dim":2,"action_space":{...},"hidden":64},
//!  "params":[{"name":"trunk.0.weight","shape":[2,64],"data":[...]}, ...]}
//! ```
//!
//! Flow headers record `x_dim`, `c_dim`, block count `k`, hidden width,
//! conditioning width, clamp limit `s_max`, the split scheme and the
//! training noise. Loading rebuilds the model from its header and then
//! requires every parameter name and shape to match.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use mbil_core::data::ActionSpace;
use mbil_core::flow::{FlowConfig, FlowModel, Frozen};
use mbil_core::nn::ParamStore;
use mbil_core::policy::Policy;
use mbil_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const FORMAT: &str = "mbil-checkpoint";
pub const VERSION: u32 = 1;
pub const SPLIT_SCHEME: &str = "ceil_half_alternating";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelHeader {
    Policy {
        policy: String,
        state_dim: usize,
        action_space: ActionSpace,
        hidden: usize,
    },
    Flow {
        x_dim: usize,
        c_dim: usize,
        k: usize,
        hidden: usize,
        cond_width: usize,
        s_max: f64,
        split: String,
        noise_sigma: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelHeader,
    pub params: Vec<ParamEntry>,
}

fn entries(store: &ParamStore) -> Vec<ParamEntry> {
    store
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

fn to_store(params: &[ParamEntry]) -> mbil_core::Result<ParamStore> {
    let mut store = ParamStore::new();
    for p in params {
        store.add(p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, action_space: ActionSpace) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: ModelHeader::Policy {
                policy: policy.kind_name().into(),
                state_dim: policy.state_dim(),
                action_space,
                hidden: policy.hidden(),
            },
            params: entries(policy.store()),
        }
    }

    pub fn from_flow(flow: &FlowModel, noise_sigma: f64) -> Self {
        let c = flow.config;
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: ModelHeader::Flow {
                x_dim: c.x_dim,
                c_dim: c.c_dim,
                k: c.blocks,
                hidden: c.hidden,
                cond_width: c.cond_width,
                s_max: c.clamp,
                split: SPLIT_SCHEME.into(),
                noise_sigma,
            },
            params: entries(&flow.store),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Checkpoint {
            path: path.into(),
            msg: e.to_string(),
        })?;
        w.flush().map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint { path: path.into(), msg };
        let f = File::open(path).map_err(io(path))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(f)).map_err(|e| bad(e.to_string()))?;
        if ck.format != FORMAT {
            return Err(bad(format!("format {:?}, expected {FORMAT:?}", ck.format)));
        }
        if ck.version != VERSION {
            return Err(bad(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn into_policy(self) -> mbil_core::Result<(Policy, ActionSpace)> {
        let ModelHeader::Policy {
            policy: kind,
            state_dim,
            action_space,
            hidden,
        } = self.model
        else {
            return Err(mbil_core::Error::Unsupported("checkpoint does not hold a policy".into()));
        };
        let mut policy = Policy::for_space(state_dim, &action_space, hidden, 0);
        if policy.kind_name() != kind {
            return Err(mbil_core::Error::Unsupported(format!(
                "policy kind {kind:?} does not fit action space {action_space:?}"
            )));
        }
        policy.store_mut().load_from(&to_store(&self.params)?)?;
        Ok((policy, action_space))
    }

    pub fn into_flow(self) -> mbil_core::Result<(Frozen<FlowModel>, f64)> {
        let ModelHeader::Flow {
            x_dim,
            c_dim,
            k,
            hidden,
            cond_width,
            s_max,
            split,
            noise_sigma,
        } = self.model
        else {
            return Err(mbil_core::Error::Unsupported("checkpoint does not hold a flow".into()));
        };
        if split != SPLIT_SCHEME {
            return Err(mbil_core::Error::Unsupported(format!("split scheme {split:?}")));
        }
        let config = FlowConfig {
            x_dim,
            c_dim,
            blocks: k,
            hidden,
            clamp: s_max,
            cond_width,
        };
        let mut flow = FlowModel::new(config, 0)?;
        flow.store.load_from(&to_store(&self.params)?)?;
        Ok((Frozen::new(flow), noise_sigma))
    }
}

pub fn save_policy(policy: &Policy, action_space: ActionSpace, path: &Path) -> Result<()> {
    Checkpoint::from_policy(policy, action_space).save(path)
}

pub fn load_policy(path: &Path) -> Result<(Policy, ActionSpace)> {
    Checkpoint::load(path)?.into_policy().map_err(|e| Error::Checkpoint {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub fn save_flow(flow: &FlowModel, noise_sigma: f64, path: &Path) -> Result<()> {
    Checkpoint::from_flow(flow, noise_sigma).save(path)
}

pub fn load_flow(path: &Path) -> Result<(Frozen<FlowModel>, f64)> {
    Checkpoint::load(path)?.into_flow().map_err(|e| Error::Checkpoint {
        path: path.into(),
        msg: e.to_string(),
    })
}
