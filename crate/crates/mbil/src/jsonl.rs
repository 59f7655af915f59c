//! Trajectory datasets as line-delimited JSON.
//!
//! Line 1 is a header:
//!
//! ```json
//! {"format":"mbil-trajectories","version":1,"env":{"name":"gridworld","state_dim":2,"action_space":{"kind":"discrete","n":4},"horizon":50},"n_trajectories":1}
//! ```
//!
//! followed by one record per `(s, a)` pair:
//!
//! ```json
//! {"traj_id":0,"t":0,"s":[0.0,1.0],"a":3,"done":false}
//! ```
//!
//! Records of a trajectory are contiguous, `traj_id` counts up from 0, `t`
//! counts up from 0 in steps of 1, and `done` is true exactly on the last
//! record of each trajectory. Discrete actions are integers, continuous
//! actions are arrays. Reals are written in shortest round-trip form, so a
//! save/load cycle is bit-exact. There is no reward field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mbil_core::data::{Action, Dataset, EnvDescriptor, Trajectory};
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const FORMAT: &str = "mbil-trajectories";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub env: EnvDescriptor,
    pub n_trajectories: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub traj_id: usize,
    pub t: usize,
    pub s: Vec<f64>,
    pub a: Action,
    pub done: bool,
}

pub fn write_dataset(dataset: &Dataset, mut w: impl Write) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        env: dataset.env.clone(),
        n_trajectories: dataset.trajectories.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for (traj_id, tr) in dataset.trajectories.iter().enumerate() {
        for (t, (s, a)) in tr.states.iter().zip(&tr.actions).enumerate() {
            let rec = Record {
                traj_id,
                t,
                s: s.clone(),
                a: a.clone(),
                done: t + 1 == tr.len(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    write_dataset(dataset, &mut w).map_err(io(path))?;
    w.flush().map_err(io(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(io(path))?;
    read_dataset(BufReader::new(f), path)
}

/// Parses and validates a dataset; `path` only labels error messages.
pub fn read_dataset(r: impl BufRead, path: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header: Header = match lines.next() {
        None => return Err(err(1, "empty file, expected a header".into())),
        Some((n, l)) => {
            let l = l.map_err(io(path))?;
            serde_json::from_str(&l).map_err(|e| err(n, format!("bad header: {e}")))?
        }
    };
    if header.format != FORMAT {
        return Err(err(1, format!("format {:?}, expected {FORMAT:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(err(1, format!("unsupported version {} (this build reads {VERSION})", header.version)));
    }
    let env = header.env;
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut open = false;
    let mut last_line = 1;
    for (n, l) in lines {
        last_line = n;
        let l = l.map_err(io(path))?;
        if l.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&l).map_err(|e| err(n, format!("bad record: {e}")))?;
        if open {
            let cur = trajectories.len() - 1;
            if rec.traj_id != cur {
                return Err(err(
                    n,
                    format!("traj_id {} starts before traj_id {cur} reached done", rec.traj_id),
                ));
            }
        } else {
            if rec.traj_id != trajectories.len() {
                return Err(err(
                    n,
                    format!("traj_id {}, expected {}", rec.traj_id, trajectories.len()),
                ));
            }
            trajectories.push(Trajectory::default());
            open = true;
        }
        let tr = trajectories.last_mut().expect("pushed above");
        if rec.t != tr.len() {
            return Err(err(
                n,
                format!("traj_id {}: t = {} after t = {}, expected {}", rec.traj_id, rec.t, tr.len() as i64 - 1, tr.len()),
            ));
        }
        if rec.s.len() != env.state_dim {
            return Err(err(
                n,
                format!("state has {} entries, header says state_dim = {}", rec.s.len(), env.state_dim),
            ));
        }
        if rec.s.iter().any(|v| !v.is_finite()) {
            return Err(err(n, "non-finite state entry".into()));
        }
        if !env.action_space.contains(&rec.a) {
            return Err(err(n, format!("action {:?} is not in {:?}", rec.a, env.action_space)));
        }
        tr.push(rec.s, rec.a);
        if rec.done {
            open = false;
        }
    }
    if open {
        return Err(err(last_line, format!("traj_id {} ends without a done record", trajectories.len() - 1)));
    }
    if trajectories.len() != header.n_trajectories {
        return Err(err(
            1,
            format!("header promises {} trajectories, file has {}", header.n_trajectories, trajectories.len()),
        ));
    }
    Ok(Dataset { env, trajectories })
}
