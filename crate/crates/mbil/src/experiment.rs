//! The commands behind the CLI.
//!
//! Each run gets its own directory with `config.resolved` (a config file
//! that reproduces exactly that run), `metrics.csv`, `result.json`,
//! `policy.json` and, for flow density models, `flow_p.json` and
//! `flow_t.json`. Sweeps also write `runs.csv` and `summary.csv` at the top
//! of the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use mbil_core::bc;
use mbil_core::data::{ActionSpace, Dataset};
use mbil_core::envs::{generate_demonstrations, BuiltinEnv, Environment, Expert};
use mbil_core::eval::{self, EvalConfig, EvalStats};
use mbil_core::mbil::{self, Buffers, Densities, DensityModel, MbilConfig, TrainReport};
use mbil_core::policy::Policy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::error::{io, Error, Result};
use crate::jsonl;
use crate::metrics::{self, RunRow};

/// The expert pool: loaded from `data.path` or generated.
pub fn expert_pool(cfg: &ExperimentConfig) -> Result<Dataset> {
    let env = cfg.env()?;
    let want = env.descriptor();
    match &cfg.data.path {
        Some(p) => {
            let ds = jsonl::load_dataset(p)?;
            if ds.env.state_dim != want.state_dim || ds.env.action_space != want.action_space {
                return Err(Error::Config(format!(
                    "{}: dataset env {:?} does not match configured env {:?}",
                    p.display(),
                    ds.env,
                    want
                )));
            }
            Ok(ds)
        }
        None => Ok(generate_demonstrations(
            &env,
            &cfg.expert()?,
            cfg.data.pool,
            cfg.horizon(),
            cfg.data.pool_seed,
        )?),
    }
}

/// Mean returns of the expert and of uniformly random actions, used to
/// normalize scores: `(R - R_random) / (R_expert - R_random)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub expert: f64,
    pub random: f64,
}

impl References {
    pub fn normalize(&self, ret: f64) -> f64 {
        eval::normalized_score(ret, self.random, self.expert)
    }
}

pub fn final_eval_config(cfg: &ExperimentConfig, seed: u64) -> EvalConfig {
    EvalConfig {
        episodes: cfg.eval.final_episodes,
        horizon: cfg.horizon(),
        seed,
        deterministic: cfg.eval.deterministic,
    }
}

pub fn references(cfg: &ExperimentConfig, episodes: usize, seed: u64) -> Result<References> {
    let env = cfg.env()?;
    let ec = EvalConfig {
        episodes,
        ..final_eval_config(cfg, seed)
    };
    Ok(References {
        expert: eval::evaluate_expert(&env, &cfg.expert()?, &ec)?.mean,
        random: eval::evaluate_random(&env, &ec)?.mean,
    })
}

/// Subsampled dataset with its buffers and, for MBIL, fitted densities and
/// per-tuple gaps. Shared across `(α, β)` settings with the same seed.
///
/// A subsample of single-step trajectories has no tuples; there is nothing
/// to fit and the objective keeps only its policy term.
pub struct Prepared {
    pub dataset: Dataset,
    pub buffers: Buffers,
    pub densities: Option<Densities>,
    pub gaps: Vec<f64>,
}

pub fn prepare(cfg: &ExperimentConfig, pool: &Dataset, n: usize, seed: u64, with_densities: bool) -> Result<Prepared> {
    let dataset = pool.subsample(n, seed)?;
    let buffers = mbil::build_tuples(&dataset)?;
    let space = dataset.env.action_space;
    let (densities, gaps) = if with_densities && !buffers.tuples.is_empty() {
        let d = mbil::fit_densities(&buffers.tuples, &space, &cfg.mbil.density, seed)?;
        let g = d.gaps(&buffers.tuples, &space)?;
        (Some(d), g)
    } else {
        (None, Vec::new())
    };
    Ok(Prepared {
        dataset,
        buffers,
        densities,
        gaps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub n_trajectories: usize,
    pub seed: u64,
}

impl RunSpec {
    /// Config that reproduces exactly this run.
    pub fn resolved(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.method = self.method;
        c.mbil.alpha = self.alpha;
        c.mbil.beta = self.beta;
        c.data.n_trajectories = vec![self.n_trajectories];
        c.run.seed = self.seed;
        c.run.n_seeds = 1;
        c
    }

    fn mbil_config(&self, cfg: &ExperimentConfig) -> MbilConfig {
        let mut m = cfg.mbil;
        m.alpha = self.alpha;
        m.beta = self.beta;
        m.train.seed = self.seed;
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub n_trajectories: usize,
    pub seed: u64,
    pub return_mean: f64,
    pub return_std: f64,
    pub normalized: f64,
    pub selected_iteration: usize,
    /// `(s, a, s', a')` tuples behind the balance term; 0 means it was absent.
    pub n_tuples: usize,
}

pub struct RunOutput {
    pub result: RunResult,
    pub report: TrainReport,
    pub policy: Policy,
}

/// Trains one policy on prepared data and evaluates it.
pub fn train_prepared(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    spec: &RunSpec,
    refs: &References,
) -> Result<RunOutput> {
    let env = cfg.env()?;
    let space = prep.dataset.env.action_space;
    let periodic = EvalConfig {
        episodes: cfg.eval.episodes,
        horizon: cfg.horizon(),
        seed: spec.seed,
        deterministic: cfg.eval.deterministic,
    };
    let mut evaluator = |p: &Policy| -> mbil_core::Result<(f64, f64)> {
        let s = eval::evaluate_policy(&env, p, &periodic)?;
        Ok((s.mean, s.std))
    };
    let ev: Option<&mut mbil::Evaluator<'_>> = if cfg.eval.episodes > 0 {
        Some(&mut evaluator)
    } else {
        None
    };
    let m = spec.mbil_config(cfg);
    let (policy, report) = match spec.method {
        Method::Bc => bc::train_bc_pairs(&prep.buffers.pairs, &space, &m.train, ev)?,
        Method::Mbil => mbil::train_policy(&prep.buffers, &space, &prep.gaps, &m, ev)?,
    };
    let stats = eval::evaluate_policy(&env, &policy, &final_eval_config(cfg, spec.seed))?;
    Ok(RunOutput {
        result: RunResult {
            run_id: spec.run_id.clone(),
            method: spec.method,
            alpha: spec.alpha,
            beta: spec.beta,
            n_trajectories: spec.n_trajectories,
            seed: spec.seed,
            return_mean: stats.mean,
            return_std: stats.std,
            normalized: refs.normalize(stats.mean),
            selected_iteration: report.selected_iteration,
            n_tuples: prep.buffers.tuples.len(),
        },
        report,
        policy,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    out: &RunOutput,
    densities: Option<&Densities>,
    space: ActionSpace,
) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("config.resolved"), &spec.resolved(cfg).to_toml())?;
    let rows = metrics::metrics_rows(&spec.run_id, spec.seed, &out.report, cfg.run.log_every);
    metrics::write_csv(&rows, &dir.join("metrics.csv"))?;
    write_text(
        &dir.join("result.json"),
        &serde_json::to_string_pretty(&out.result).expect("result serializes"),
    )?;
    checkpoint::save_policy(&out.policy, space, &dir.join("policy.json"))?;
    if let Some(d) = densities {
        let sigma = cfg.mbil.density.fit.noise_sigma;
        if let DensityModel::Flow(f) = &d.chain {
            checkpoint::save_flow(f, sigma, &dir.join("flow_p.json"))?;
        }
        if let DensityModel::Flow(f) = &d.kernel {
            checkpoint::save_flow(f, sigma, &dir.join("flow_t.json"))?;
        }
    }
    Ok(())
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

fn with_context(run: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::Run {
        run: run.to_string(),
        source: Box::new(e),
    }
}

fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.run.n_seeds as u64).map(|i| cfg.run.seed + i).collect()
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Mbil => "mbil",
        Method::Bc => "bc",
    }
}

fn run_row(r: &RunResult) -> RunRow {
    RunRow {
        run_id: r.run_id.clone(),
        method: method_name(r.method).into(),
        alpha: r.alpha,
        beta: r.beta,
        n_trajectories: r.n_trajectories,
        seed: r.seed,
        return_mean: r.return_mean,
        return_std: r.return_std,
        normalized: r.normalized,
    }
}

fn write_tables(out: &Path, results: &[RunResult], refs: &References) -> Result<()> {
    let rows: Vec<RunRow> = results.iter().map(run_row).collect();
    metrics::write_csv(&rows, &out.join("runs.csv"))?;
    metrics::write_csv(&metrics::summarize(&rows), &out.join("summary.csv"))?;
    write_text(
        &out.join("references.json"),
        &serde_json::to_string_pretty(refs).expect("references serialize"),
    )
}

/// Dataset-size × seed sweep of the configured method.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    let out = &cfg.run.out;
    create_dir(out)?;
    write_text(&out.join("config.resolved"), &cfg.to_toml())?;
    let pool = expert_pool(cfg)?;
    let refs = references(cfg, cfg.eval.final_episodes, cfg.run.seed)?;
    let alpha_beta = (cfg.mbil.alpha, cfg.mbil.beta);
    let specs: Vec<RunSpec> = cfg
        .data
        .n_trajectories
        .iter()
        .flat_map(|&n| {
            seeds(cfg).into_iter().map(move |seed| RunSpec {
                run_id: format!("{}_n{n}_seed{seed}", method_name(cfg.method)),
                method: cfg.method,
                alpha: alpha_beta.0,
                beta: alpha_beta.1,
                n_trajectories: n,
                seed,
            })
        })
        .collect();
    let space = pool.env.action_space;
    let results: Vec<Result<RunResult>> = in_pool(cfg.run.parallelism, || {
        specs
            .par_iter()
            .map(|spec| {
                let go = || -> Result<RunResult> {
                    let prep = prepare(cfg, &pool, spec.n_trajectories, spec.seed, spec.method == Method::Mbil)?;
                    let o = train_prepared(cfg, &prep, spec, &refs)?;
                    write_run(&out.join(&spec.run_id), cfg, spec, &o, prep.densities.as_ref(), space)?;
                    Ok(o.result)
                };
                go().map_err(with_context(&spec.run_id))
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_tables(out, &results, &refs)?;
    Ok(results)
}

fn fmt_weight(w: f64) -> String {
    format!("{w}")
}

/// The `(α, β)` grid on one dataset size; densities are fitted once per seed
/// and shared by all four settings.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    let out = &cfg.run.out;
    create_dir(out)?;
    write_text(&out.join("config.resolved"), &cfg.to_toml())?;
    let pool = expert_pool(cfg)?;
    let refs = references(cfg, cfg.eval.final_episodes, cfg.run.seed)?;
    let n = cfg.ablation.n_trajectories;
    let space = pool.env.action_space;
    let per_seed: Vec<Result<Vec<(RunResult, Vec<metrics::MetricsRow>)>>> = in_pool(cfg.run.parallelism, || {
        seeds(cfg)
            .par_iter()
            .map(|&seed| {
                let ctx = format!("ablation seed {seed}");
                let go = || -> Result<Vec<(RunResult, Vec<metrics::MetricsRow>)>> {
                    let prep = prepare(cfg, &pool, n, seed, true)?;
                    let mut v = Vec::new();
                    for &[alpha, beta] in &cfg.ablation.grid {
                        let tag = format!("a{}_b{}", fmt_weight(alpha), fmt_weight(beta));
                        let spec = RunSpec {
                            run_id: format!("{tag}_seed{seed}"),
                            method: Method::Mbil,
                            alpha,
                            beta,
                            n_trajectories: n,
                            seed,
                        };
                        let o = train_prepared(cfg, &prep, &spec, &refs).map_err(with_context(&spec.run_id))?;
                        write_run(&out.join(&tag).join(format!("seed{seed}")), cfg, &spec, &o, prep.densities.as_ref(), space)?;
                        let rows = metrics::metrics_rows(&spec.run_id, seed, &o.report, cfg.run.log_every);
                        v.push((o.result, rows));
                    }
                    Ok(v)
                };
                go().map_err(with_context(&ctx))
            })
            .collect()
    });
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for (k, &[alpha, beta]) in cfg.ablation.grid.iter().enumerate() {
        let rows: Vec<metrics::MetricsRow> = per_seed.iter().flat_map(|v| v[k].1.clone()).collect();
        let tag = format!("a{}_b{}", fmt_weight(alpha), fmt_weight(beta));
        metrics::write_csv(&rows, &out.join(format!("ablation_{tag}.csv")))?;
        results.extend(per_seed.iter().map(|v| v[k].0.clone()));
    }
    write_tables(out, &results, &refs)?;
    Ok(results)
}

/// Writes the expert pool to `<out>/dataset.jsonl`.
pub fn cmd_gen_expert(cfg: &ExperimentConfig) -> Result<PathBuf> {
    create_dir(&cfg.run.out)?;
    let env = cfg.env()?;
    let ds = generate_demonstrations(&env, &cfg.expert()?, cfg.data.pool, cfg.horizon(), cfg.data.pool_seed)?;
    let path = cfg.run.out.join("dataset.jsonl");
    jsonl::save_dataset(&ds, &path)?;
    write_text(&cfg.run.out.join("config.resolved"), &cfg.to_toml())?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub episodes: usize,
    pub seed: u64,
    pub return_mean: f64,
    pub return_std: f64,
    pub expert_mean: f64,
    pub random_mean: f64,
    pub normalized: f64,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, episodes: usize, seed: u64) -> Result<EvaluateReport> {
    let (policy, space) = checkpoint::load_policy(checkpoint)?;
    let env = cfg.env()?;
    let desc = env.descriptor();
    if space != desc.action_space || policy.state_dim() != desc.state_dim {
        return Err(Error::Config(format!(
            "{}: policy for state_dim {} / {:?} does not fit env {:?}",
            checkpoint.display(),
            policy.state_dim(),
            space,
            desc
        )));
    }
    let ec = EvalConfig {
        episodes,
        ..final_eval_config(cfg, seed)
    };
    let stats: EvalStats = eval::evaluate_policy(&env, &policy, &ec)?;
    let refs = references(cfg, episodes, seed)?;
    Ok(EvaluateReport {
        episodes,
        seed,
        return_mean: stats.mean,
        return_std: stats.std,
        expert_mean: refs.expert,
        random_mean: refs.random,
        normalized: refs.normalize(stats.mean),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCheckReport {
    pub tuples: usize,
    /// Tuples whose true density is only approximate (clip boundary).
    pub inexact: usize,
    pub nll_p_hat: f64,
    pub nll_p_true: f64,
    pub nll_t_hat: f64,
    pub nll_t_true: f64,
    pub mean_abs_err_p: f64,
    pub mean_abs_err_t: f64,
    /// Mean of `(log P̂ - log π_D - log T̂)²` with the true expert `π_D`.
    pub balance_residual_expert: f64,
    /// The same with the true `P` and `T`; zero up to rounding.
    pub balance_residual_oracle: f64,
}

/// Held-out comparison of `P̂`, `T̂` against the environment's true densities.
pub fn density_check(
    env: &BuiltinEnv,
    expert: &impl Expert,
    chain: &impl mbil::ConditionalDensity,
    kernel: &impl mbil::ConditionalDensity,
    chain_offset: f64,
    held_out: &Dataset,
) -> Result<DensityCheckReport> {
    let b = mbil::build_tuples(held_out)?;
    let space = held_out.env.action_space;
    let inp = mbil::density_inputs(&b.tuples, &space)?;
    let p_hat: Vec<f64> = chain
        .log_density(&inp.chain_x, &inp.cond)?
        .into_iter()
        .map(|v| v + chain_offset)
        .collect();
    let t_hat = kernel.log_density(&inp.kernel_x, &inp.cond)?;
    let n = b.tuples.len();
    let (mut acc, mut inexact) = ([0.0f64; 8], 0usize);
    let actions = |a: &mbil_core::data::Actions, i: usize| match a {
        mbil_core::data::Actions::Discrete(v) => mbil_core::data::Action::Discrete(v[i]),
        mbil_core::data::Actions::Continuous(t) => mbil_core::data::Action::Continuous(t.row(i).to_vec()),
    };
    for i in 0..n {
        let (s, s2) = (b.tuples.states.row(i), b.tuples.next_states.row(i));
        let (a, a2) = (actions(&b.tuples.actions, i), actions(&b.tuples.next_actions, i));
        let td = env.transition_logpdf(s, &a, s2)?;
        if !td.exact {
            inexact += 1;
        }
        let pi = expert.logpdf(s2, &a2)?;
        let p_true = pi + td.log_density;
        let vals = [
            -p_hat[i],
            -p_true,
            -t_hat[i],
            -td.log_density,
            (p_hat[i] - p_true).abs(),
            (t_hat[i] - td.log_density).abs(),
            mbil::balance_residual(p_hat[i], pi, t_hat[i]),
            mbil::balance_residual(p_true, pi, td.log_density),
        ];
        for (a, v) in acc.iter_mut().zip(vals) {
            *a += v;
        }
    }
    let m = acc.map(|v| v / n as f64);
    Ok(DensityCheckReport {
        tuples: n,
        inexact,
        nll_p_hat: m[0],
        nll_p_true: m[1],
        nll_t_hat: m[2],
        nll_t_true: m[3],
        mean_abs_err_p: m[4],
        mean_abs_err_t: m[5],
        balance_residual_expert: m[6],
        balance_residual_oracle: m[7],
    })
}

/// Loads `flow_p.json` and `flow_t.json` from `run_dir` and checks them on
/// fresh expert trajectories.
pub fn cmd_density_check(cfg: &ExperimentConfig, run_dir: &Path) -> Result<DensityCheckReport> {
    let (chain, sigma) = checkpoint::load_flow(&run_dir.join("flow_p.json"))?;
    let (kernel, _) = checkpoint::load_flow(&run_dir.join("flow_t.json"))?;
    let env = cfg.env()?;
    let expert = cfg.expert()?;
    let held_out = generate_demonstrations(
        &env,
        &expert,
        cfg.density_check.trajectories,
        cfg.horizon(),
        cfg.density_check.seed,
    )?;
    let offset = match held_out.env.action_space {
        ActionSpace::Discrete { n } if cfg.mbil.density.onehot_correction => mbil::onehot_log_mass_offset(n, sigma),
        _ => 0.0,
    };
    let report = density_check(&env, &expert, &chain, &kernel, offset, &held_out)?;
    write_text(
        &run_dir.join("density_check.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(report)
}
