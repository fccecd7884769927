//! Experiment runner: flat key=value configs, benchmark presets, CSV and
//! checkpoint artifacts with a reproducibility manifest.
//!
//! Commands:
//! - `run <config>`: execute one experiment; exit 0 on success, 1 on config
//!   errors, 2 on pipeline failures (partial outputs retained, manifest says
//!   why).
//! - `bench <suite>`: quick property suites (`oracles`, `gradients`,
//!   `sinkhorn`, `lq-fast`) printing measured values and pass/fail.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffnum::ScalarDiffMap;
use crate::igt::{
    self, HjbBatchMode, IgtConfig, InitMode, RoundReport,
};
use crate::mfg::{self, MfgConfig};
use crate::nets::{
    save_checkpoint, Generator, GeneratorSpec, Transition, ValueNet, ValueNetSpec,
};
use crate::problems::{
    acceleration_mfg, default_obstacle_problem, lq_mfg, lq_problem, obstacle_mfg,
    quadcopter_problem, ControlProblem, MfgProblem,
};
use crate::sinkhorn::Sinkhorn;
use crate::tpbvp;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
}

const EXPERIMENTS: &[&str] = &[
    "lq_oc",
    "quadcopter",
    "obstacle_oc",
    "lq_mfg",
    "acceleration_mfg",
    "obstacle_mfg",
];

/// Env var overriding where run outputs are rooted.
pub const OUTPUT_ROOT_ENV: &str = "IGT_OUTPUT_ROOT";

#[derive(Debug, Clone)]
pub struct NetSettings {
    pub value_width: usize,
    pub value_layers: usize,
    pub transition: Transition,
    pub gen_width: usize,
    pub gen_layers: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub d: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub igt: IgtConfig,
    pub mfg: MfgConfig,
    pub nets: NetSettings,
}

fn parse_sections(text: &str) -> Result<BTreeMap<(String, String), String>, CliError> {
    let mut out = BTreeMap::new();
    let mut section = String::from("experiment");
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        out.insert(
            (section.clone(), key.trim().to_string()),
            value.trim().to_string(),
        );
    }
    Ok(out)
}

fn parse_as<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse::<T>()
        .map_err(|_| CliError::Config(format!("[{section}] {key}: cannot parse {value:?}")))
}

/// Benchmark presets mirroring the published run parameters.
fn preset(experiment: &str, d: usize) -> Result<ExperimentConfig, CliError> {
    let mut igt = IgtConfig::defaults();
    let mut mfgc = MfgConfig::defaults();
    let mut nets = NetSettings {
        value_width: 128,
        value_layers: 3,
        transition: Transition::Phi1,
        gen_width: 128,
        gen_layers: 4,
    };
    match experiment {
        "lq_oc" => {
            igt.rounds = 3;
            igt.hjb_batch = 1000;
            igt.ic_batch = 128;
            igt.lambda1 = 1.0;
            igt.init_mode = InitMode::Dgm;
            igt.tpbvp_tol = 1e-8;
        }
        "quadcopter" => {
            igt.rounds = 2;
            igt.ic_batch = 32;
            igt.lambda1 = 0.01;
            igt.init_mode = InitMode::CDgm;
            igt.hjb_batch_mode = HjbBatchMode::ReuseDatasetPoints;
            igt.hjb_batch = 256;
            igt.tpbvp_tol = 1e-6;
            igt.init_sweeps = 12;
            nets.transition = Transition::Phi2;
        }
        "obstacle_oc" => {
            igt.rounds = 2;
            igt.ic_batch = 32;
            igt.lambda1 = 1.0;
            igt.init_mode = InitMode::CDgm;
            igt.hjb_batch = 256;
            igt.tpbvp_tol = 1e-6;
            igt.tpbvp_max_nodes = 1500;
            igt.guess_max_nodes = 120;
            igt.costate_search = if d <= 3 {
                Some(crate::igt::CostateSearch::defaults())
            } else {
                None
            };
            nets.transition = Transition::Phi2;
        }
        "lq_mfg" => {
            igt.rounds = 1;
            igt.hjb_batch = if d <= 1 { 256 } else { 500 };
            igt.ic_batch = if d <= 1 { 32 } else { 64 };
            igt.lambda1 = 1.0;
            igt.tpbvp_tol = 1e-8;
            mfgc.eval_batch = if d <= 1 { 1000 } else { 4000 };
            mfgc.traj_batch = if d <= 1 { 128 } else { 256 };
            mfgc.ode_batch = if d <= 1 { 128 } else { 256 };
            mfgc.lambda2 = 0.5;
            mfgc.epsilon = 0.5;
            mfgc.tol = 1e-6;
            mfgc.k_max = 20;
            mfgc.q_max = 4;
            if d <= 1 {
                mfgc.init_gaussian = Some((1.0, 0.105));
            }
        }
        "acceleration_mfg" => {
            igt.rounds = 1;
            igt.hjb_batch = 256;
            igt.ic_batch = 64;
            igt.lambda1 = 1.0;
            igt.tpbvp_tol = 1e-6;
            mfgc.eval_batch = 500;
            mfgc.traj_batch = 128;
            mfgc.ode_batch = 128;
            mfgc.lambda2 = 0.5;
            mfgc.k_max = 20;
            mfgc.q_max = 5;
            mfgc.tol = 1e-6;
        }
        "obstacle_mfg" => {
            igt.rounds = if d <= 2 { 2 } else { 3 };
            igt.hjb_batch = if d <= 2 { 264 } else { 500 };
            igt.ic_batch = 32;
            igt.lambda1 = if d <= 2 { 1.0 } else { 0.5 };
            igt.tpbvp_tol = 1e-6;
            mfgc.eval_batch = if d <= 2 { 264 } else { 500 };
            mfgc.traj_batch = 128;
            mfgc.ode_batch = 128;
            mfgc.lambda2 = if d <= 2 { 0.01 } else { 0.001 };
            mfgc.k_max = if d <= 2 { 15 } else { 10 };
            mfgc.q_max = 2;
            mfgc.tol = 1e-3;
        }
        other => {
            return Err(CliError::Config(format!(
                "experiment: unknown name {other:?}; expected one of {EXPERIMENTS:?}"
            )))
        }
    }
    Ok(ExperimentConfig {
        experiment: experiment.to_string(),
        d,
        seed: 0,
        output_dir: PathBuf::from(format!("out-{experiment}-d{d}")),
        igt,
        mfg: mfgc,
        nets,
    })
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<ExperimentConfig, CliError> {
        let kv = parse_sections(text)?;
        let name = kv
            .get(&("experiment".to_string(), "name".to_string()))
            .ok_or_else(|| CliError::Config("experiment: missing key name".to_string()))?
            .clone();
        let d = match kv.get(&("experiment".to_string(), "d".to_string())) {
            Some(v) => parse_as::<usize>("experiment", "d", v)?,
            None => default_dim(&name),
        };
        if d == 0 {
            return Err(CliError::Config("experiment: d must be positive".to_string()));
        }
        let mut cfg = preset(&name, d)?;
        for ((section, key), value) in &kv {
            apply_override(&mut cfg, section, key, value)?;
        }
        cfg.igt.seed = cfg.seed;
        cfg.mfg.seed = cfg.seed;
        cfg.mfg.igt = cfg.igt.clone();
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_text(&text)
    }
}

fn default_dim(name: &str) -> usize {
    match name {
        "quadcopter" => 12,
        "acceleration_mfg" => 4,
        "obstacle_oc" | "obstacle_mfg" => 2,
        _ => 1,
    }
}

fn apply_override(
    cfg: &mut ExperimentConfig,
    section: &str,
    key: &str,
    value: &str,
) -> Result<(), CliError> {
    match (section, key) {
        ("experiment", "name") | ("experiment", "d") => {} // consumed above
        ("experiment", "seed") => cfg.seed = parse_as(section, key, value)?,
        ("experiment", "output_dir") => cfg.output_dir = PathBuf::from(value),
        ("igt", "rounds") => cfg.igt.rounds = parse_as(section, key, value)?,
        ("igt", "hjb_batch") => cfg.igt.hjb_batch = parse_as(section, key, value)?,
        ("igt", "ic_batch") => cfg.igt.ic_batch = parse_as(section, key, value)?,
        ("igt", "lambda1") => cfg.igt.lambda1 = parse_as(section, key, value)?,
        ("igt", "init_mode") => {
            cfg.igt.init_mode = match value {
                "dgm" => InitMode::Dgm,
                "cdgm" => InitMode::CDgm,
                _ => return Err(CliError::Config(format!("[igt] init_mode: {value:?}"))),
            }
        }
        ("igt", "hjb_batch_mode") => {
            cfg.igt.hjb_batch_mode = match value {
                "fresh" => HjbBatchMode::FreshUniform,
                "reuse" => HjbBatchMode::ReuseDatasetPoints,
                _ => return Err(CliError::Config(format!("[igt] hjb_batch_mode: {value:?}"))),
            }
        }
        ("igt", "max_init_steps") => cfg.igt.max_init_steps = parse_as(section, key, value)?,
        ("igt", "max_round_steps") => cfg.igt.max_round_steps = parse_as(section, key, value)?,
        ("igt", "init_sweeps") => cfg.igt.init_sweeps = parse_as(section, key, value)?,
        ("igt", "minibatch") => cfg.igt.minibatch = parse_as(section, key, value)?,
        ("igt", "lr") => cfg.igt.lr = parse_as(section, key, value)?,
        ("igt", "tpbvp_tol") => cfg.igt.tpbvp_tol = parse_as(section, key, value)?,
        ("igt", "tpbvp_max_nodes") => cfg.igt.tpbvp_max_nodes = parse_as(section, key, value)?,
        ("igt", "rollout_rtol") => cfg.igt.rollout_rtol = parse_as(section, key, value)?,
        ("mfg", "eval_batch") => cfg.mfg.eval_batch = parse_as(section, key, value)?,
        ("mfg", "traj_batch") => cfg.mfg.traj_batch = parse_as(section, key, value)?,
        ("mfg", "ode_batch") => cfg.mfg.ode_batch = parse_as(section, key, value)?,
        ("mfg", "lambda2") => cfg.mfg.lambda2 = parse_as(section, key, value)?,
        ("mfg", "k_max") => cfg.mfg.k_max = parse_as(section, key, value)?,
        ("mfg", "q_max") => cfg.mfg.q_max = parse_as(section, key, value)?,
        ("mfg", "tol") => cfg.mfg.tol = parse_as(section, key, value)?,
        ("mfg", "epsilon") => cfg.mfg.epsilon = parse_as(section, key, value)?,
        ("mfg", "n_store_times") => cfg.mfg.n_store_times = parse_as(section, key, value)?,
        ("mfg", "max_gen_steps") => cfg.mfg.max_gen_steps = parse_as(section, key, value)?,
        ("mfg", "gen_minibatch") => cfg.mfg.gen_minibatch = parse_as(section, key, value)?,
        ("mfg", "coupling_cap") => cfg.mfg.coupling_cap = parse_as(section, key, value)?,
        ("nets", "value_width") => cfg.nets.value_width = parse_as(section, key, value)?,
        ("nets", "value_layers") => cfg.nets.value_layers = parse_as(section, key, value)?,
        ("nets", "gen_width") => cfg.nets.gen_width = parse_as(section, key, value)?,
        ("nets", "gen_layers") => cfg.nets.gen_layers = parse_as(section, key, value)?,
        ("nets", "transition") => {
            cfg.nets.transition = match value {
                "phi1" => Transition::Phi1,
                "phi2" => Transition::Phi2,
                _ => return Err(CliError::Config(format!("[nets] transition: {value:?}"))),
            }
        }
        _ => {
            return Err(CliError::Config(format!(
                "unknown config key [{section}] {key}"
            )))
        }
    }
    Ok(())
}

/// 17-significant-digit decimal, round-trip exact for 64-bit floats.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::Pipeline(format!("write {}: {e}", path.display())))
}

struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(cfg: &ExperimentConfig) -> Result<RunDir, CliError> {
        let root = std::env::var(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from("."));
        let dir = root.join(&cfg.output_dir);
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Pipeline(format!("create {}: {e}", dir.display())))?;
        Ok(RunDir {
            dir,
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn manifest(&self, cfg: &ExperimentConfig, status: &str, wall: f64) -> serde_json::Value {
        serde_json::json!({
            "artifact_version": env!("CARGO_PKG_VERSION"),
            "experiment": cfg.experiment,
            "d": cfg.d,
            "seed": cfg.seed,
            "status": status,
            "wall_secs": wall,
            "files": self.files,
            "config": {
                "igt": cfg.igt,
                "mfg": cfg.mfg,
            },
        })
    }

    fn write_manifest(&self, cfg: &ExperimentConfig, status: &str, wall: f64) -> Result<(), CliError> {
        let path = self.dir.join("manifest.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(&self.manifest(cfg, status, wall)).expect("manifest json"),
        )
        .map_err(|e| CliError::Pipeline(format!("write {}: {e}", path.display())))
    }
}

fn build_control_problem(cfg: &ExperimentConfig) -> Result<ControlProblem, CliError> {
    match cfg.experiment.as_str() {
        "lq_oc" => Ok(lq_problem(cfg.d)),
        "quadcopter" => Ok(quadcopter_problem()),
        "obstacle_oc" => Ok(default_obstacle_problem(cfg.d)),
        other => Err(CliError::Config(format!("{other} is not a control experiment"))),
    }
}

fn build_mfg_problem(cfg: &ExperimentConfig) -> Result<MfgProblem, CliError> {
    match cfg.experiment.as_str() {
        "lq_mfg" => Ok(lq_mfg(cfg.d)),
        "acceleration_mfg" => Ok(acceleration_mfg()),
        "obstacle_mfg" => Ok(obstacle_mfg(cfg.d)),
        other => Err(CliError::Config(format!("{other} is not a mean-field experiment"))),
    }
}

fn value_spec(cfg: &ExperimentConfig, d: usize, horizon: f64) -> ValueNetSpec {
    let mut spec = ValueNetSpec::defaults(d, horizon);
    spec.width = cfg.nets.value_width;
    spec.layers = cfg.nets.value_layers;
    spec.transition = cfg.nets.transition;
    spec
}

fn rounds_rows(reports: &[RoundReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                r.round.to_string(),
                r.converged.to_string(),
                r.attempted.to_string(),
                fmt17(r.loss_value),
                fmt17(r.loss_grad),
                fmt17(r.loss_hjb),
                r.train_steps.to_string(),
                fmt17(r.wall_secs),
            ]
        })
        .collect()
}

const ROUNDS_HEADER: &str =
    "round,converged,attempted,loss_value,loss_grad,loss_hjb,train_steps,wall_secs";
const MFG_HEADER: &str =
    "cycle,iter,divergence,exploitability,igt_converged,igt_attempted,gen_steps,wall_secs";

fn run_control(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    let problem = build_control_problem(cfg)?;
    let net = ValueNet::new(
        value_spec(cfg, problem.d, problem.horizon),
        Arc::clone(&problem.terminal),
    );
    let outcome = igt::run_igt(&problem, &net, &cfg.igt)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    write_csv(
        &out.path("rounds.csv"),
        ROUNDS_HEADER,
        &rounds_rows(&outcome.reports),
    )?;
    // relative error table against the closed form where available
    if let Some(exact) = &problem.exact_value {
        let grid = Array2::from_shape_fn((problem.d, 1000), |(i, k)| {
            let (lo, hi) = problem.sample_domain.x_ranges[i];
            lo + (hi - lo) * (k as f64 + 0.5) / 1000.0
        });
        let approx = |t: f64, x: &[f64]| net.value(&outcome.params, t, x).unwrap_or(f64::NAN);
        let exact_fn = |t: f64, x: &[f64]| exact(t, x);
        let ts: Vec<f64> = (0..5).map(|i| problem.horizon * i as f64 / 4.0).collect();
        let rows = igt::relative_errors(&approx, &exact_fn, &ts, &grid)
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
        write_csv(
            &out.path("errors.csv"),
            "t,e2,einf",
            &rows
                .iter()
                .map(|(t, e2, ei)| vec![fmt17(*t), fmt17(*e2), fmt17(*ei)])
                .collect::<Vec<_>>(),
        )?;
    }
    // a few closed-loop rollouts for plotting
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57);
    let x0s = igt::sample_initial_states(&problem, 5, &mut rng);
    let mut rows = Vec::new();
    for k in 0..x0s.ncols() {
        let x0: Vec<f64> = (0..problem.d).map(|i| x0s[(i, k)]).collect();
        if let Ok(sol) = igt::rollout_feedback(&problem, &net, &outcome.params, &x0, 1e-6) {
            for (t, x) in sol.times.iter().zip(&sol.states) {
                let mut row = vec![k.to_string(), fmt17(*t)];
                row.extend(x.iter().map(|v| fmt17(*v)));
                rows.push(row);
            }
        }
    }
    let coord_cols: Vec<String> = (1..=problem.d).map(|i| format!("x{i}")).collect();
    write_csv(
        &out.path("trajectories.csv"),
        &format!("ic_index,t,{}", coord_cols.join(",")),
        &rows,
    )?;
    save_checkpoint(
        &out.path("value_params.ckpt"),
        &serde_json::json!({"experiment": cfg.experiment, "seed": cfg.seed, "kind": "value"}),
        &outcome.params,
    )
    .map_err(|e| CliError::Pipeline(format!("checkpoint: {e}")))?;
    if !outcome.success {
        return Err(CliError::Pipeline(
            "no trajectory solves converged in the final round".to_string(),
        ));
    }
    Ok(())
}

fn run_mean_field(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    let problem = Arc::new(build_mfg_problem(cfg)?);
    let net = ValueNet::new(
        value_spec(cfg, problem.d, problem.horizon),
        Arc::clone(&problem.terminal),
    );
    let mut gspec = GeneratorSpec::defaults(problem.d, problem.horizon);
    gspec.width = cfg.nets.gen_width;
    gspec.layers = cfg.nets.gen_layers;
    let gen = Generator::new(gspec);
    let outcome = mfg::run_igt_mfg(Arc::clone(&problem), &net, &gen, &cfg.mfg)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    write_csv(
        &out.path("mfg.csv"),
        MFG_HEADER,
        &outcome
            .report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.cycle.to_string(),
                    r.iter.to_string(),
                    fmt17(r.divergence),
                    fmt17(r.exploitability),
                    r.igt_converged.to_string(),
                    r.igt_attempted.to_string(),
                    r.gen_steps.to_string(),
                    fmt17(r.wall_secs),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    write_csv(
        &out.path("rounds.csv"),
        ROUNDS_HEADER,
        &rounds_rows(&outcome.igt_rounds),
    )?;
    if let Some(exact) = &problem.exact {
        let grid = Array2::from_shape_fn((problem.d, 1000), |(i, k)| {
            let (lo, hi) = problem.sample_domain.x_ranges[i];
            lo + (hi - lo) * (k as f64 + 0.5) / 1000.0
        });
        let approx =
            |t: f64, x: &[f64]| net.value(&outcome.value_params, t, x).unwrap_or(f64::NAN);
        let exact_fn = |t: f64, x: &[f64]| exact.value(t, x);
        let ts: Vec<f64> = (0..5).map(|i| problem.horizon * i as f64 / 4.0).collect();
        let rows = igt::relative_errors(&approx, &exact_fn, &ts, &grid)
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
        write_csv(
            &out.path("errors.csv"),
            "t,e2,einf",
            &rows
                .iter()
                .map(|(t, e2, ei)| vec![fmt17(*t), fmt17(*e2), fmt17(*ei)])
                .collect::<Vec<_>>(),
        )?;
    }
    // generator flow of a small particle batch for plotting
    let batch = (problem.m0_sampler)(cfg.seed ^ 0x9a7, 10);
    let nst = cfg.mfg.n_store_times.max(2);
    let store_times: Vec<f64> = (0..nst)
        .map(|i| problem.horizon * i as f64 / (nst - 1) as f64)
        .collect();
    let cloud = mfg::best_response_cloud(&gen, &outcome.gen_params, &batch, &store_times)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut rows = Vec::new();
    for (ti, t) in cloud.store_times.iter().enumerate() {
        for k in 0..cloud.n_particles() {
            let mut row = vec![k.to_string(), fmt17(*t)];
            for i in 0..problem.d {
                row.push(fmt17(cloud.positions[ti][(i, k)]));
            }
            rows.push(row);
        }
    }
    let coord_cols: Vec<String> = (1..=problem.d).map(|i| format!("x{i}")).collect();
    write_csv(
        &out.path("trajectories.csv"),
        &format!("particle,t,{}", coord_cols.join(",")),
        &rows,
    )?;
    save_checkpoint(
        &out.path("value_params.ckpt"),
        &serde_json::json!({"experiment": cfg.experiment, "seed": cfg.seed, "kind": "value"}),
        &outcome.value_params,
    )
    .map_err(|e| CliError::Pipeline(format!("checkpoint: {e}")))?;
    save_checkpoint(
        &out.path("generator_params.ckpt"),
        &serde_json::json!({"experiment": cfg.experiment, "seed": cfg.seed, "kind": "generator"}),
        &outcome.gen_params,
    )
    .map_err(|e| CliError::Pipeline(format!("checkpoint: {e}")))?;
    Ok(())
}

/// Executes the configured experiment; artifacts land in the output dir.
pub fn run(config_path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_file(config_path)?;
    run_config(&cfg)
}

pub fn run_config(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let mut out = RunDir::create(cfg)?;
    out.write_manifest(cfg, "running", 0.0)?;
    let result = match cfg.experiment.as_str() {
        "lq_oc" | "quadcopter" | "obstacle_oc" => run_control(cfg, &mut out),
        _ => run_mean_field(cfg, &mut out),
    };
    let wall = started.elapsed().as_secs_f64();
    match &result {
        Ok(()) => out.write_manifest(cfg, "ok", wall)?,
        Err(e) => {
            let msg = format!("failed: {e}");
            out.write_manifest(cfg, &msg, wall)?;
        }
    }
    result
}

/// Quick property suites; returns whether every check passed.
pub fn bench(suite: &str) -> Result<bool, CliError> {
    match suite {
        "oracles" => bench_oracles(),
        "gradients" => bench_gradients(),
        "sinkhorn" => bench_sinkhorn(),
        "lq-fast" => bench_lq_fast(),
        other => Err(CliError::Config(format!(
            "unknown bench suite {other:?}; expected oracles|gradients|sinkhorn|lq-fast"
        ))),
    }
}

/// Closed-form boundary-value oracle for the linear-quadratic problem.
pub fn lq_tpbvp_errors(tol: f64) -> Result<(f64, f64, f64), CliError> {
    let problem = lq_problem(1);
    let bvp = tpbvp::BvpProblem {
        dim: 3,
        rhs: |t: f64, y: &[f64]| igt::augmented_rhs(&problem, t, y),
        bc: |ya: &[f64], yb: &[f64]| igt::augmented_bc(&problem, &[1.0], ya, yb),
        t0: 0.0,
        tf: 1.0,
    };
    let n0 = 11;
    let mesh: Vec<f64> = (0..n0).map(|i| i as f64 / (n0 - 1) as f64).collect();
    let guess: Vec<Vec<f64>> = mesh.iter().map(|_| vec![1.0, 1.0, 1.0]).collect();
    let sol = tpbvp::solve(&bvp, &mesh, &guess, tol, 2000)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    if !sol.converged {
        return Err(CliError::Pipeline("oracle solve did not converge".to_string()));
    }
    let e = std::f64::consts::E;
    let x1 = 2.0 * e / (1.0 + e * e);
    let p0 = 4.0 * e * e / (1.0 + e * e);
    let v0 = 2.0 / (1.0 + (-2.0f64).exp());
    let y0 = &sol.y_nodes[0];
    let yt = sol.y_nodes.last().unwrap();
    Ok(((yt[1] - x1).abs(), (y0[2] - p0).abs(), (y0[0] - v0).abs()))
}

fn bench_oracles() -> Result<bool, CliError> {
    let (ex, ep, ev) = lq_tpbvp_errors(1e-8)?;
    let worst = ex.max(ep).max(ev);
    let pass = worst <= 1e-6;
    println!(
        "oracles: |x(1)| err {ex:.3e}, |p(0)| err {ep:.3e}, |v(0)| err {ev:.3e} -> {}",
        if pass { "pass" } else { "FAIL" }
    );
    Ok(pass)
}

/// Max relative finite-difference mismatch of the value-network input
/// gradients over random probes.
pub fn gradient_probe_worst(probes: usize, seed: u64) -> f64 {
    let problem = lq_problem(2);
    let net = ValueNet::new(ValueNetSpec::defaults(2, 1.0), Arc::clone(&problem.terminal));
    let params = net.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let t: f64 = rng.gen_range(0.05..0.95);
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xs = Array2::from_shape_vec((2, 1), x.clone()).unwrap();
        let (v, dt, dx) = net.grads_batch(&params, &[t], &xs).unwrap();
        let _ = v;
        let h = 1e-6;
        let fd_t = (net.value(&params, t + h, &x).unwrap() - net.value(&params, t - h, &x).unwrap())
            / (2.0 * h);
        worst = worst.max((dt[0] - fd_t).abs() / (1.0 + fd_t.abs()));
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (net.value(&params, t, &xp).unwrap() - net.value(&params, t, &xm).unwrap())
                / (2.0 * h);
            worst = worst.max((dx[(j, 0)] - fd).abs() / (1.0 + fd.abs()));
        }
    }
    worst
}

fn bench_gradients() -> Result<bool, CliError> {
    let worst = gradient_probe_worst(100, 12);
    let pass = worst <= 1e-5;
    println!(
        "gradients: max FD mismatch {worst:.3e} over 100 probes -> {}",
        if pass { "pass" } else { "FAIL" }
    );
    Ok(pass)
}

fn bench_sinkhorn() -> Result<bool, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for eps in [0.1, 0.5, 2.0] {
        let x = Array2::from_shape_fn((2, 40), |_| rng.gen_range(-1.0..1.0));
        let s = Sinkhorn::new(eps);
        let d = s
            .divergence(x.view(), &[], x.view(), &[])
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
        worst = worst.max(d.abs());
    }
    let pass = worst <= 1e-10;
    println!(
        "sinkhorn: max self-divergence {worst:.3e} -> {}",
        if pass { "pass" } else { "FAIL" }
    );
    Ok(pass)
}

fn bench_lq_fast() -> Result<bool, CliError> {
    let problem = lq_problem(1);
    let mut spec = ValueNetSpec::defaults(1, 1.0);
    spec.width = 64;
    let net = ValueNet::new(spec, Arc::clone(&problem.terminal));
    let mut cfg = IgtConfig::defaults();
    cfg.rounds = 1;
    cfg.ic_batch = 16;
    cfg.hjb_batch = 256;
    cfg.max_init_steps = 800;
    cfg.max_round_steps = 1500;
    cfg.tpbvp_tol = 1e-8;
    cfg.seed = 7;
    let outcome = igt::run_igt(&problem, &net, &cfg).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let grid = Array2::from_shape_fn((1, 200), |(_, k)| -1.0 + (k as f64 + 0.5) / 100.0);
    let approx = |t: f64, x: &[f64]| net.value(&outcome.params, t, x).unwrap_or(f64::NAN);
    let exact = |t: f64, x: &[f64]| 2.0 * x[0] * x[0] / (1.0 + (2.0 * (t - 1.0)).exp());
    let rows = igt::relative_errors(&approx, &exact, &[0.0], &grid)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let pass = outcome.success && rows[0].1 <= 5e-2;
    println!(
        "lq-fast: {}/{} converged, E2(0) = {:.3e} -> {}",
        outcome.reports[0].converged,
        cfg.ic_batch,
        rows[0].1,
        if pass { "pass" } else { "FAIL" }
    );
    Ok(pass)
}

/// Argument dispatch shared by the binary and tests. Returns the exit code.
pub fn main_with_args(args: &[String]) -> i32 {
    match args {
        [cmd, path] if cmd == "run" => match run(Path::new(path)) {
            Ok(()) => 0,
            Err(CliError::Config(msg)) => {
                eprintln!("{msg}");
                1
            }
            Err(CliError::Pipeline(msg)) => {
                eprintln!("{msg}");
                2
            }
        },
        [cmd, suite] if cmd == "bench" => match bench(suite) {
            Ok(true) => 0,
            Ok(false) => 2,
            Err(CliError::Config(msg)) => {
                eprintln!("{msg}");
                1
            }
            Err(CliError::Pipeline(msg)) => {
                eprintln!("{msg}");
                2
            }
        },
        _ => {
            eprintln!("usage: igt run <config> | igt bench <oracles|gradients|sinkhorn|lq-fast>");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_and_validation() {
        let cfg = ExperimentConfig::from_text(
            "[experiment]\nname=lq_oc\nd=2\nseed=7\n[igt]\nrounds=1\nlambda1=0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment, "lq_oc");
        assert_eq!(cfg.d, 2);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.igt.rounds, 1);
        assert!((cfg.igt.lambda1 - 0.25).abs() < 1e-15);
        assert_eq!(cfg.igt.seed, 7, "seed propagates into sub-configs");

        let err = ExperimentConfig::from_text("[experiment]\nname=warp_drive\n").unwrap_err();
        assert!(err.to_string().contains("warp_drive"), "{err}");
        let err = ExperimentConfig::from_text("[experiment]\nname=lq_oc\n[igt]\nbogus=1\n")
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_text("[experiment]\nname=lq_oc\nnot a pair\n").unwrap_err();
        assert!(err.to_string().contains("key=value"), "{err}");
    }

    #[test]
    fn presets_match_published_parameters() {
        let lq = preset("lq_oc", 1).unwrap();
        assert_eq!(lq.igt.rounds, 3);
        assert_eq!(lq.igt.hjb_batch, 1000);
        assert_eq!(lq.igt.ic_batch, 128);
        let quad = preset("quadcopter", 12).unwrap();
        assert_eq!(quad.igt.init_mode, InitMode::CDgm);
        assert!((quad.igt.lambda1 - 0.01).abs() < 1e-15);
        let omfg = preset("obstacle_mfg", 2).unwrap();
        assert_eq!(omfg.mfg.k_max, 15);
        assert!((omfg.mfg.lambda2 - 0.01).abs() < 1e-15);
        assert!((omfg.mfg.tol - 1e-3).abs() < 1e-18);
        let lqm = preset("lq_mfg", 1).unwrap();
        assert_eq!(lqm.mfg.eval_batch, 1000);
        assert_eq!(lqm.mfg.init_gaussian, Some((1.0, 0.105)));
    }

    #[test]
    fn fmt17_round_trips() {
        for x in [1.0 / 3.0, 2.0f64.sqrt(), -1e-17, 6.02e23] {
            let s = fmt17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }

    #[test]
    fn bench_oracle_and_sinkhorn_suites_pass() {
        assert!(bench("oracles").unwrap());
        assert!(bench("sinkhorn").unwrap());
        assert!(matches!(bench("nonsense"), Err(CliError::Config(_))));
    }

    #[test]
    fn same_config_and_seed_give_identical_error_tables() {
        let tmp = std::env::temp_dir().join(format!("igt-cli-det-{}", std::process::id()));
        let text = "[experiment]\nname=lq_oc\nd=1\nseed=3\n\
                    [igt]\nrounds=1\nic_batch=4\nhjb_batch=64\nmax_init_steps=150\n\
                    max_round_steps=200\nminibatch=64\ntpbvp_tol=1e-8\n\
                    [nets]\nvalue_width=16\n";
        let mut tables = Vec::new();
        for rep in 0..2 {
            let mut cfg = ExperimentConfig::from_text(text).unwrap();
            cfg.output_dir = tmp.join(format!("rep{rep}"));
            run_config(&cfg).unwrap();
            let dir = cfg.output_dir;
            tables.push(fs::read_to_string(dir.join("errors.csv")).unwrap());
            assert!(dir.join("manifest.json").exists());
            assert!(dir.join("rounds.csv").exists());
            assert!(dir.join("value_params.ckpt").exists());
        }
        assert_eq!(tables[0], tables[1], "errors.csv must be reproducible");
        let _ = fs::remove_dir_all(&tmp);
    }

    #[test]
    fn unknown_cli_usage_is_exit_one() {
        assert_eq!(main_with_args(&[]), 1);
        assert_eq!(main_with_args(&["bench".into(), "nope".into()]), 1);
    }
}
