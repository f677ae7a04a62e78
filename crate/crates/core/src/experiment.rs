//! Experiment runner: parses a TOML config, executes the requested method
//! across seeds, emits trace/trajectory/density/curve CSVs plus a
//! machine-readable JSON report, and compares runs against the benchmark
//! oracles.
//!
//! All emitted CSVs carry a header row and print numbers with 17
//! significant digits, so fixed seeds reproduce byte-identical files.
//! Seeds run in parallel (capped by `threads`), each writing into its own
//! `seed_<s>` subdirectory; aggregation is a final single-threaded pass.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{
    self, pde_solve_common_noise_lq, pde_solve_hjb_fp, riccati_lq_solve, riccati_systemic_solve,
    BenchError, PdeGrid, PicardSettings,
};
use crate::bench::pde::{AtanMfgPdeProblem, LqPdeProblem, MinLqgPdeProblem};
use crate::model::{
    make_atan_mfg, make_common_noise_lq, make_lq, make_minlqg, make_sincos_fbsde,
    make_systemic_risk, AtanMfg, CommonNoiseLq, FbsdeModel, LqMfc, MinLqg, Model, ModelError,
    SinCosFbsde, SystemicRisk,
};
use crate::nn::{self, NetParams};
use crate::simulate::{
    dump_histogram_csv, dump_trajectories_csv, histogram, sample_noise, Ensemble, SimError,
    TimeGrid,
};
use crate::solver_fbsde::{
    eval_fbsde, fbsde_rollout, train_fbsde, y0_vs_rho_curve, FbsdeTrainConfig,
};
use crate::solver_mfc::{
    eval_rollout, eval_rollout_with, train, TrainConfig, TrainError, TrainTrace,
};
use crate::util::{fmt_f64, substream};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum ExperimentError {
    /// Config file failed to parse; the message carries the field path.
    Parse(String),
    /// Config parsed but is semantically invalid.
    Invalid(String),
    /// The requested method cannot run on the requested preset.
    Incompatible {
        preset: String,
        method: String,
        reason: String,
    },
    Train(TrainError),
    Sim(SimError),
    Bench(BenchError),
    Model(ModelError),
    Io(String),
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Parse(m) => write!(f, "config parse error: {m}"),
            ExperimentError::Invalid(m) => write!(f, "invalid config: {m}"),
            ExperimentError::Incompatible {
                preset,
                method,
                reason,
            } => write!(
                f,
                "method '{method}' cannot run on preset '{preset}': {reason}"
            ),
            ExperimentError::Train(e) => write!(f, "{e}"),
            ExperimentError::Sim(e) => write!(f, "{e}"),
            ExperimentError::Bench(e) => write!(f, "{e}"),
            ExperimentError::Model(e) => write!(f, "{e}"),
            ExperimentError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for ExperimentError {}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        ExperimentError::Train(e)
    }
}
impl From<SimError> for ExperimentError {
    fn from(e: SimError) -> Self {
        ExperimentError::Sim(e)
    }
}
impl From<BenchError> for ExperimentError {
    fn from(e: BenchError) -> Self {
        ExperimentError::Bench(e)
    }
}
impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        ExperimentError::Model(e)
    }
}
impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Preset parameter tables
// ---------------------------------------------------------------------------

/// Linear-quadratic test case. The coefficient values below are this
/// toolkit's benchmark defaults; they are echoed in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqParams {
    pub a: f64,
    pub abar: f64,
    pub b: f64,
    pub q: f64,
    pub qbar: f64,
    pub r: f64,
    pub s: f64,
    pub q_t: f64,
    pub qbar_t: f64,
    pub s_t: f64,
    pub sigma: f64,
    pub mu0_mean: f64,
    pub mu0_std: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        LqParams {
            a: 0.5,
            abar: 0.25,
            b: 1.0,
            q: 0.25,
            qbar: 0.5,
            r: 0.5,
            s: 1.0,
            q_t: 1.0,
            qbar_t: 0.5,
            s_t: 1.0,
            sigma: 0.3,
            mu0_mean: 0.5,
            mu0_std: 0.3,
        }
    }
}

impl LqParams {
    pub fn build(&self) -> Result<LqMfc, ModelError> {
        make_lq(
            self.a,
            self.abar,
            self.b,
            self.q,
            self.qbar,
            self.r,
            self.s,
            self.q_t,
            self.qbar_t,
            self.s_t,
            self.sigma,
            self.mu0_mean,
            self.mu0_std,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinLqgParams {
    pub xi1: f64,
    pub xi2: f64,
    pub sigma: f64,
    pub mu0_mean: f64,
    pub mu0_std: f64,
}

impl Default for MinLqgParams {
    fn default() -> Self {
        MinLqgParams {
            xi1: 0.25,
            xi2: 0.75,
            sigma: 0.3,
            mu0_mean: 1.0,
            mu0_std: 0.2,
        }
    }
}

impl MinLqgParams {
    pub fn build(&self) -> Result<MinLqg, ModelError> {
        make_minlqg(self.xi1, self.xi2, self.sigma, self.mu0_mean, self.mu0_std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnLqParams {
    pub c_t: f64,
    pub k_t: f64,
    pub sigma: f64,
    pub mu0_mean: f64,
    pub mu0_std: f64,
    pub jump_time: f64,
}

impl Default for CnLqParams {
    fn default() -> Self {
        CnLqParams {
            c_t: 1.5,
            k_t: 0.5,
            sigma: 0.3,
            mu0_mean: 0.0,
            mu0_std: 0.3,
            jump_time: 0.5,
        }
    }
}

impl CnLqParams {
    pub fn build(&self) -> Result<CommonNoiseLq, ModelError> {
        make_common_noise_lq(
            self.c_t,
            self.k_t,
            self.sigma,
            self.mu0_mean,
            self.mu0_std,
            self.jump_time,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinCosParams {
    pub rho: f64,
    pub sigma: f64,
    pub x0: f64,
}

impl Default for SinCosParams {
    fn default() -> Self {
        SinCosParams {
            rho: 0.0,
            sigma: 0.5,
            x0: 1.0,
        }
    }
}

impl SinCosParams {
    pub fn build(&self) -> SinCosFbsde {
        make_sincos_fbsde(self.rho, self.sigma, self.x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtanMfgParams {
    pub rho: f64,
    pub sigma: f64,
    pub x0: f64,
}

impl Default for AtanMfgParams {
    fn default() -> Self {
        AtanMfgParams {
            rho: 0.5,
            sigma: 0.5,
            x0: 1.0,
        }
    }
}

impl AtanMfgParams {
    pub fn build(&self) -> AtanMfg {
        make_atan_mfg(self.rho, self.sigma, self.x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemicRiskParams {
    pub a: f64,
    pub q: f64,
    pub eps: f64,
    pub c: f64,
    pub rho: f64,
    pub sigma: f64,
    pub x0_mean: f64,
    pub x0_std: f64,
}

impl Default for SystemicRiskParams {
    fn default() -> Self {
        SystemicRiskParams {
            a: 1.0,
            q: 0.5,
            eps: 1.5,
            c: 1.0,
            rho: 0.5,
            sigma: 0.5,
            x0_mean: 0.0,
            x0_std: 0.25,
        }
    }
}

impl SystemicRiskParams {
    pub fn build(&self) -> Result<SystemicRisk, ModelError> {
        make_systemic_risk(
            self.a,
            self.q,
            self.eps,
            self.c,
            self.rho,
            self.sigma,
            self.x0_mean,
            self.x0_std,
        )
    }
}

/// The six bundled test cases, addressable by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Lq(LqParams),
    Minlqg(MinLqgParams),
    CnLq(CnLqParams),
    Sincos(SinCosParams),
    AtanMfg(AtanMfgParams),
    SystemicRisk(SystemicRiskParams),
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Lq(_) => "lq",
            Preset::Minlqg(_) => "minlqg",
            Preset::CnLq(_) => "cn-lq",
            Preset::Sincos(_) => "sincos",
            Preset::AtanMfg(_) => "atan-mfg",
            Preset::SystemicRisk(_) => "systemic-risk",
        }
    }

    /// Presets whose solution concept is a game equilibrium rather than a
    /// central-planner optimum. Direct cost minimization does not apply.
    pub fn is_mfg(&self) -> bool {
        matches!(self, Preset::AtanMfg(_) | Preset::SystemicRisk(_))
    }

    pub fn all_names() -> [&'static str; 6] {
        ["lq", "minlqg", "cn-lq", "sincos", "atan-mfg", "systemic-risk"]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mfc,
    Fbsde,
    BenchRiccati,
    BenchPde,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mfc => "mfc",
            Method::Fbsde => "fbsde",
            Method::BenchRiccati => "bench-riccati",
            Method::BenchPde => "bench-pde",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdeSettings {
    pub n_x: usize,
    pub n_steps: usize,
    /// Space domain; when absent it is auto-sized to the initial mean
    /// +- 6 free-diffusion standard deviations.
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub horizon: f64,
    pub max_iters: usize,
    pub damping: f64,
    pub tol: f64,
    /// Mollification width for point-mass initial laws (defaults to 3 dx).
    pub m0_std: Option<f64>,
}

impl Default for PdeSettings {
    fn default() -> Self {
        PdeSettings {
            n_x: 400,
            n_steps: 200,
            x_min: None,
            x_max: None,
            horizon: 1.0,
            max_iters: 120,
            damping: 0.5,
            tol: 1e-9,
            m0_std: None,
        }
    }
}

impl PdeSettings {
    pub fn picard(&self) -> PicardSettings {
        PicardSettings {
            max_iters: self.max_iters,
            damping: self.damping,
            tol: self.tol,
        }
    }

    pub fn grid_x(&self, center: f64, spread: f64) -> Result<PdeGrid, BenchError> {
        match (self.x_min, self.x_max) {
            (Some(lo), Some(hi)) => PdeGrid::new(lo, hi, self.n_x),
            _ => PdeGrid::auto(center, spread, self.n_x),
        }
    }

    pub fn grid_t(&self) -> Result<TimeGrid, SimError> {
        TimeGrid::new(self.horizon, self.n_steps)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareTargets {
    pub riccati: bool,
    pub pde: bool,
}

/// Full experiment description, as parsed from the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub preset: Preset,
    pub method: Method,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub fbsde_train: Option<FbsdeTrainConfig>,
    /// When present with method `fbsde`, train one model per rho and emit
    /// the Y0-versus-rho curve.
    #[serde(default)]
    pub rho_list: Option<Vec<f64>>,
    #[serde(default)]
    pub pde: Option<PdeSettings>,
    #[serde(default)]
    pub compare: CompareTargets,
    /// Aggregate metric means above these values flag the run (nonzero
    /// exit status).
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ExperimentError::Invalid(
                "name must be non-empty and path-safe".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Invalid("need at least one seed".into()));
        }
        let incompatible = |reason: &str| {
            Err(ExperimentError::Incompatible {
                preset: self.preset.name().into(),
                method: self.method.name().into(),
                reason: reason.into(),
            })
        };
        match self.method {
            Method::Mfc => {
                if self.preset.is_mfg() {
                    return incompatible(
                        "this preset is a mean field game; direct cost minimization \
                         targets a central-planner optimum, use the fbsde method",
                    );
                }
                if matches!(self.preset, Preset::Sincos(_)) {
                    return incompatible(
                        "this preset is a bare FBSDE with no cost functional to minimize",
                    );
                }
                if self.train.is_none() {
                    return Err(ExperimentError::Invalid(
                        "[train] section required for method mfc".into(),
                    ));
                }
            }
            Method::Fbsde => {
                if !matches!(
                    self.preset,
                    Preset::Sincos(_) | Preset::AtanMfg(_) | Preset::SystemicRisk(_)
                ) {
                    return incompatible(
                        "no FBSDE form is bundled for this preset; the shooting solver \
                         targets the sincos, atan-mfg and systemic-risk systems",
                    );
                }
                if self.fbsde_train.is_none() {
                    return Err(ExperimentError::Invalid(
                        "[fbsde_train] section required for method fbsde".into(),
                    ));
                }
            }
            Method::BenchRiccati => {
                if !matches!(self.preset, Preset::Lq(_) | Preset::SystemicRisk(_)) {
                    return incompatible("Riccati benchmarks exist for lq and systemic-risk");
                }
            }
            Method::BenchPde => {
                if !matches!(
                    self.preset,
                    Preset::Lq(_) | Preset::Minlqg(_) | Preset::AtanMfg(_) | Preset::CnLq(_)
                ) {
                    return incompatible(
                        "PDE benchmarks exist for lq, minlqg, atan-mfg and cn-lq",
                    );
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub dir: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub name: String,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedReport>,
    pub aggregate: BTreeMap<String, AggregateStat>,
    pub breaches: Vec<String>,
    pub runtime_secs: f64,
}

impl Report {
    fn aggregate_from(per_seed: &[SeedReport]) -> BTreeMap<String, AggregateStat> {
        let mut agg = BTreeMap::new();
        if per_seed.is_empty() {
            return agg;
        }
        for key in per_seed[0].metrics.keys() {
            let vals: Vec<f64> = per_seed
                .iter()
                .filter_map(|s| s.metrics.get(key).copied())
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            agg.insert(
                key.clone(),
                AggregateStat {
                    mean,
                    std: var.sqrt(),
                },
            );
        }
        agg
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Executes the experiment across its seeds (at most `threads` at a time),
/// writes per-seed files plus `report.json` under `out_root/<name>/`, and
/// returns the report. Threshold breaches are listed in the report; the
/// command-line front end turns them into a nonzero exit status.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_root: &Path,
    threads: usize,
) -> Result<Report, ExperimentError> {
    config.validate()?;
    let started = std::time::Instant::now();
    let out_dir = out_root.join(&config.name);
    fs::create_dir_all(&out_dir)?;

    let threads = threads.max(1);
    let mut results: Vec<Option<Result<SeedReport, ExperimentError>>> =
        (0..config.seeds.len()).map(|_| None).collect();
    for chunk in (0..config.seeds.len()).collect::<Vec<_>>().chunks(threads) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &idx in chunk {
                let seed = config.seeds[idx];
                let dir = out_dir.join(format!("seed_{seed}"));
                let cfg = config;
                handles.push((idx, scope.spawn(move || run_seed(cfg, seed, &dir))));
            }
            for (idx, handle) in handles {
                let res = handle.join().expect("seed worker panicked");
                results[idx] = Some(res);
            }
        });
    }

    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for res in results.into_iter().flatten() {
        per_seed.push(res?);
    }
    let aggregate = Report::aggregate_from(&per_seed);
    let mut breaches = Vec::new();
    for (metric, cap) in &config.thresholds {
        match aggregate.get(metric) {
            Some(stat) if stat.mean.abs() > *cap => breaches.push(format!(
                "{metric}: |mean| {} exceeds threshold {cap}",
                stat.mean
            )),
            None => breaches.push(format!("{metric}: thresholded metric was not produced")),
            _ => {}
        }
    }

    let report = Report {
        version: VERSION.to_string(),
        name: config.name.clone(),
        config: config.clone(),
        per_seed,
        aggregate,
        breaches,
        runtime_secs: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| ExperimentError::Io(e.to_string()))?;
    fs::write(out_dir.join("report.json"), json)?;
    Ok(report)
}

fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
) -> Result<SeedReport, ExperimentError> {
    fs::create_dir_all(dir)?;
    let metrics = match config.method {
        Method::Mfc => run_mfc_seed(config, seed, dir)?,
        Method::Fbsde => run_fbsde_seed(config, seed, dir)?,
        Method::BenchRiccati => run_bench_riccati(config, dir)?,
        Method::BenchPde => run_bench_pde(config, dir)?,
    };
    Ok(SeedReport {
        seed,
        dir: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        metrics,
    })
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_trace_csv(path: &Path, trace: &TrainTrace) -> Result<(), ExperimentError> {
    let mut w = csv_writer(path)?;
    writeln!(w, "iteration,loss,l2_error")?;
    for r in &trace.records {
        let l2 = r.l2_error.map(fmt_f64).unwrap_or_default();
        writeln!(w, "{},{},{}", r.iteration, fmt_f64(r.eval_loss), l2)?;
    }
    Ok(())
}

fn run_mfc_seed(
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
) -> Result<BTreeMap<String, f64>, ExperimentError> {
    let mut tc = config.train.clone().expect("validated");
    tc.seed = seed;
    let grid = tc.grid()?;
    let mut metrics = BTreeMap::new();

    match &config.preset {
        Preset::Lq(p) => {
            let model = p.build()?;
            let oracle_sol = if config.compare.riccati {
                Some(riccati_lq_solve(&model, &grid)?)
            } else {
                None
            };
            let oracle_fn = oracle_sol
                .as_ref()
                .map(|sol| move |t: f64, x: &[f64]| vec![sol.feedback(t, x[0])]);
            let oracle_dyn: Option<Box<dyn Fn(f64, &[f64]) -> Vec<f64>>> = match &oracle_fn {
                Some(f) => Some(Box::new(f)),
                None => None,
            };

            let out = run_mfc_core(&model, &tc, oracle_dyn.as_deref(), dir)?;
            fill_mfc_metrics(&mut metrics, &out);

            if let Some(sol) = &oracle_sol {
                let mut w = csv_writer(&dir.join("riccati.csv"))?;
                sol.dump_csv(&mut w)?;
                // cost of the oracle feedback under the evaluation seeds
                let eval_seed = substream(seed, u64::MAX);
                let n = tc.eval_batch.unwrap_or(tc.batch);
                let oracle_ctl = |t: f64, x: &[f64]| vec![sol.feedback(t, x[0])];
                let oracle_run = eval_rollout_with(&oracle_ctl, &model, &grid, n, eval_seed)?;
                metrics.insert("oracle_cost".into(), oracle_run.total_cost);
                let rel = (out.trace.last().unwrap().eval_loss - oracle_run.total_cost).abs()
                    / oracle_run.total_cost.abs().max(1e-12);
                metrics.insert("cost_rel_gap".into(), rel);
                write_gap_csv(
                    &dir.join("gaps.csv"),
                    &[
                        ("eval_cost_vs_oracle_rel", rel),
                        (
                            "l2_control_error_final",
                            out.trace.last().unwrap().l2_error.unwrap_or(f64::NAN),
                        ),
                    ],
                )?;
            }
        }
        Preset::Minlqg(p) => {
            let model = p.build()?;
            let out = run_mfc_core(&model, &tc, None, dir)?;
            fill_mfc_metrics(&mut metrics, &out);
        }
        Preset::CnLq(p) => {
            let model = p.build()?;
            if model.jump_time >= tc.horizon {
                return Err(ExperimentError::Invalid(format!(
                    "jump time {} must lie inside the horizon {}",
                    model.jump_time, tc.horizon
                )));
            }
            let out = run_mfc_core(&model, &tc, None, dir)?;
            fill_mfc_metrics(&mut metrics, &out);
            // scenario-conditional statistics and Fig.5-style densities
            let stats = cn_scenario_stats(
                &out.params,
                &model,
                &grid,
                tc.eval_batch.unwrap_or(tc.batch),
                32,
                substream(seed, 0xC0),
            )?;
            metrics.insert("cond_mean_plus".into(), stats.mean_plus);
            metrics.insert("cond_mean_minus".into(), stats.mean_minus);
            metrics.insert(
                "pre_jump_gap".into(),
                (stats.pre_mean_plus - stats.pre_mean_minus).abs(),
            );
            let lo = -model.c_t - 1.0;
            let hi = model.c_t + 1.0;
            let mut scen = Vec::new();
            for (label, vals) in [
                ("terminal_minus", &stats.terminal_minus),
                ("terminal_plus", &stats.terminal_plus),
            ] {
                let (edges, counts) = histogram(vals, 40, lo, hi);
                scen.push((label.to_string(), edges, counts));
            }
            let mut w = csv_writer(&dir.join("histogram.csv"))?;
            dump_histogram_csv(&mut w, &scen)?;
        }
        _ => unreachable!("validated"),
    }
    Ok(metrics)
}

struct MfcRun {
    params: NetParams,
    trace: TrainTrace,
}

fn run_mfc_core<M: Model>(
    model: &M,
    tc: &TrainConfig,
    oracle: Option<&(dyn Fn(f64, &[f64]) -> Vec<f64>)>,
    dir: &Path,
) -> Result<MfcRun, ExperimentError> {
    let grid = tc.grid()?;
    let ckpt_dir = dir.to_path_buf();
    let out = train(model, tc, oracle, |iter, params, _rec| {
        let _ = nn::save_params(ckpt_dir.join(format!("params_iter{iter}.bin")), params);
    })?;
    nn::save_params(dir.join("params.bin"), &out.params)
        .map_err(|e| ExperimentError::Io(e.to_string()))?;
    write_trace_csv(&dir.join("trace.csv"), &out.trace)?;

    // final evaluation rollout: trajectories and terminal density
    let eval_seed = substream(tc.seed, u64::MAX);
    let n = tc.eval_batch.unwrap_or(tc.batch);
    let run = eval_rollout(&out.params, model, &grid, n, eval_seed, tc.clamp.as_ref())?;
    let mut w = csv_writer(&dir.join("trajectories.csv"))?;
    dump_trajectories_csv(&mut w, &grid, &run)?;
    let terminal = run.terminal_ensemble();
    let lo = terminal.states.iter().cloned().fold(f64::INFINITY, f64::min) - 0.1;
    let hi = terminal
        .states
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        + 0.1;
    let (edges, counts) = histogram(&terminal.states, 40, lo, hi);
    let mut w = csv_writer(&dir.join("terminal_histogram.csv"))?;
    dump_histogram_csv(&mut w, &[("terminal".to_string(), edges, counts)])?;

    Ok(MfcRun {
        params: out.params,
        trace: out.trace,
    })
}

fn fill_mfc_metrics(metrics: &mut BTreeMap<String, f64>, out: &MfcRun) {
    let last = out.trace.last().expect("trace has records");
    metrics.insert("final_eval_loss".into(), last.eval_loss);
    metrics.insert("final_loss_avg".into(), last.loss_avg);
    if let Some(l2) = last.l2_error {
        metrics.insert("final_l2_error".into(), l2);
    }
    if let Some(first) = out.trace.records.first() {
        if let Some(l2) = first.l2_error {
            metrics.insert("first_l2_error".into(), l2);
        }
    }
}

fn write_gap_csv(path: &Path, rows: &[(&str, f64)]) -> Result<(), ExperimentError> {
    let mut w = csv_writer(path)?;
    writeln!(w, "quantity,value")?;
    for (name, value) in rows {
        writeln!(w, "{name},{}", fmt_f64(*value))?;
    }
    Ok(())
}

fn run_fbsde_seed(
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
) -> Result<BTreeMap<String, f64>, ExperimentError> {
    let mut fc = config.fbsde_train.clone().expect("validated");
    fc.seed = seed;
    let grid = fc.grid()?;
    let mut metrics = BTreeMap::new();

    // Y0-versus-rho curve mode
    if let Some(rhos) = &config.rho_list {
        let curve = match &config.preset {
            Preset::Sincos(p) => {
                let base = p.clone();
                y0_vs_rho_curve(
                    |rho| {
                        let mut q = base.clone();
                        q.rho = rho;
                        q.build()
                    },
                    rhos,
                    &fc,
                )
            }
            Preset::AtanMfg(p) => {
                let base = p.clone();
                y0_vs_rho_curve(
                    |rho| {
                        let mut q = base.clone();
                        q.rho = rho;
                        q.build()
                    },
                    rhos,
                    &fc,
                )
            }
            _ => {
                return Err(ExperimentError::Invalid(
                    "rho_list curves are defined for the sincos and atan-mfg presets".into(),
                ))
            }
        };

        // optional PDE benchmark per rho
        let pde_y0: Option<Vec<f64>> = if config.compare.pde {
            match &config.preset {
                Preset::AtanMfg(p) => {
                    let mut vals = Vec::with_capacity(rhos.len());
                    for &rho in rhos {
                        let mut q = p.clone();
                        q.rho = rho;
                        vals.push(atan_pde_y0(&q, config.pde.as_ref())?);
                    }
                    Some(vals)
                }
                _ => None,
            }
        } else {
            None
        };

        let mut w = csv_writer(&dir.join("curve.csv"))?;
        writeln!(w, "rho,y0_estimate,eval_loss,seed,pde_y0,gap")?;
        let mut prev_ok: Option<f64> = None;
        let mut max_jump: f64 = 0.0;
        let mut max_gap: f64 = 0.0;
        for (k, point) in curve.iter().enumerate() {
            match &point.outcome {
                Ok((y0, eval_loss)) => {
                    let (pde_s, gap_s) = match pde_y0.as_ref().map(|v| v[k]) {
                        Some(p) => {
                            let gap = (y0 - p).abs();
                            max_gap = max_gap.max(gap);
                            (fmt_f64(p), fmt_f64(gap))
                        }
                        None => (String::new(), String::new()),
                    };
                    writeln!(
                        w,
                        "{},{},{},{},{},{}",
                        fmt_f64(point.rho),
                        fmt_f64(*y0),
                        fmt_f64(*eval_loss),
                        point.seed,
                        pde_s,
                        gap_s
                    )?;
                    if let Some(prev) = prev_ok {
                        max_jump = max_jump.max((y0 - prev).abs());
                    }
                    prev_ok = Some(*y0);
                }
                Err(msg) => {
                    log::warn!("rho = {}: {msg}", point.rho);
                    writeln!(w, "{},,,{},,", fmt_f64(point.rho), point.seed)?;
                    prev_ok = None;
                }
            }
        }
        metrics.insert("y0_max_adjacent_jump".into(), max_jump);
        if pde_y0.is_some() {
            metrics.insert("y0_max_pde_gap".into(), max_gap);
        }
        return Ok(metrics);
    }

    // single-model training
    macro_rules! run_single {
        ($model:expr) => {{
            let model = $model;
            let out = train_fbsde(&model, &fc, |iter, y0, z, _| {
                let _ = nn::save_params(dir.join(format!("y0_iter{iter}.bin")), y0);
                let _ = nn::save_params(dir.join(format!("z_iter{iter}.bin")), z);
            })?;
            nn::save_params(dir.join("y0.bin"), &out.y0)
                .map_err(|e| ExperimentError::Io(e.to_string()))?;
            nn::save_params(dir.join("z.bin"), &out.z)
                .map_err(|e| ExperimentError::Io(e.to_string()))?;
            write_trace_csv(&dir.join("trace.csv"), &out.trace)?;
            let last = out.trace.last().expect("trace has records");
            metrics.insert("final_eval_loss".into(), last.eval_loss);

            // sample paths for the trajectory figures
            let eval_seed = substream(seed, u64::MAX);
            let n = fc.eval_batch.unwrap_or(fc.batch);
            let run = eval_fbsde(&out.y0, &out.z, &model, &grid, n, eval_seed)?;
            let mut w = csv_writer(&dir.join("xy_paths.csv"))?;
            writeln!(w, "particle,time,x,y")?;
            for i in 0..n.min(16) {
                for s in 0..=grid.n_steps() {
                    writeln!(
                        w,
                        "{},{},{},{}",
                        i,
                        fmt_f64(grid.time(s)),
                        fmt_f64(run.x(s, i, 0)),
                        fmt_f64(run.y(s, i, 0))
                    )?;
                }
            }
            if let Some(x0) = model.x0_point() {
                let y0_val = nn::forward(&out.y0.arch, &out.y0.theta, &x0)[0];
                metrics.insert("y0_estimate".into(), y0_val);
            }
            out
        }};
    }

    match &config.preset {
        Preset::Sincos(p) => {
            let _ = run_single!(p.build());
        }
        Preset::AtanMfg(p) => {
            let _ = run_single!(p.build());
            if config.compare.pde {
                let pde_y0 = atan_pde_y0(p, config.pde.as_ref())?;
                metrics.insert("pde_y0".into(), pde_y0);
                if let Some(y0) = metrics.get("y0_estimate").copied() {
                    metrics.insert("y0_pde_gap".into(), (y0 - pde_y0).abs());
                }
            }
        }
        Preset::SystemicRisk(p) => {
            let model = p.build()?;
            let out = run_single!(model);
            if config.compare.riccati {
                let model = p.build()?;
                let sol = riccati_systemic_solve(&model, &grid)?;
                let mut w = csv_writer(&dir.join("riccati_eta.csv"))?;
                sol.dump_csv(&mut w)?;
                let (gap_x, gap_y) = systemic_oracle_gap(
                    &out.y0,
                    &out.z,
                    &model,
                    &grid,
                    fc.eval_batch.unwrap_or(fc.batch),
                    substream(seed, 0xFB),
                    16,
                )?;
                metrics.insert("oracle_gap_x".into(), gap_x);
                metrics.insert("oracle_gap_y".into(), gap_y);
            }
        }
        _ => unreachable!("validated"),
    }
    Ok(metrics)
}

/// PDE-benchmark value of Y0 = u_x(0, x0) for the arctan game.
pub fn atan_pde_y0(
    params: &AtanMfgParams,
    settings: Option<&PdeSettings>,
) -> Result<f64, ExperimentError> {
    let defaults = PdeSettings::default();
    let s = settings.unwrap_or(&defaults);
    let model = params.build();
    // free-diffusion spread plus the drift range |rho| * pi/2 * T
    let spread = model.sigma * s.horizon.sqrt()
        + model.rho.abs() * std::f64::consts::FRAC_PI_2 * s.horizon;
    let grid_x = s.grid_x(model.x0, spread)?;
    let grid_t = s.grid_t()?;
    let m0_std = s.m0_std.unwrap_or(3.0 * grid_x.dx());
    let sol = pde_solve_hjb_fp(
        &AtanMfgPdeProblem { model: model.clone(), m0_std },
        &grid_x,
        &grid_t,
        &s.picard(),
    )?;
    Ok(sol.grad_u_at(0, model.x0))
}

fn run_bench_riccati(
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<BTreeMap<String, f64>, ExperimentError> {
    let mut metrics = BTreeMap::new();
    let horizon = config
        .train
        .as_ref()
        .map(|t| (t.horizon, t.n_steps))
        .or_else(|| config.fbsde_train.as_ref().map(|t| (t.horizon, t.n_steps)))
        .unwrap_or((1.0, 100));
    let grid = TimeGrid::new(horizon.0, horizon.1)?;
    match &config.preset {
        Preset::Lq(p) => {
            let model = p.build()?;
            let sol = riccati_lq_solve(&model, &grid)?;
            let mut w = csv_writer(&dir.join("riccati.csv"))?;
            sol.dump_csv(&mut w)?;
            metrics.insert("p_state_0".into(), sol.p_state[0]);
            metrics.insert("p_mean_0".into(), sol.p_mean[0]);
            metrics.insert(
                "optimal_cost".into(),
                sol.optimal_cost(model.mu0_mean, model.mu0_std * model.mu0_std),
            );
        }
        Preset::SystemicRisk(p) => {
            let model = p.build()?;
            let sol = riccati_systemic_solve(&model, &grid)?;
            let mut w = csv_writer(&dir.join("riccati_eta.csv"))?;
            sol.dump_csv(&mut w)?;
            metrics.insert("eta_0".into(), sol.eta[0]);
        }
        _ => unreachable!("validated"),
    }
    Ok(metrics)
}

fn run_bench_pde(
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<BTreeMap<String, f64>, ExperimentError> {
    let defaults = PdeSettings::default();
    let s = config.pde.as_ref().unwrap_or(&defaults);
    let grid_t = s.grid_t()?;
    let picard = s.picard();
    let mut metrics = BTreeMap::new();

    let dump = |sol: &bench::PdeSolution, prefix: &str| -> Result<(), ExperimentError> {
        let mut w = csv_writer(&dir.join(format!("{prefix}_m.csv")))?;
        sol.dump_csv(&mut w, "m")?;
        let mut w = csv_writer(&dir.join(format!("{prefix}_u.csv")))?;
        sol.dump_csv(&mut w, "u")?;
        Ok(())
    };

    match &config.preset {
        Preset::Lq(p) => {
            let model = p.build()?;
            let spread =
                (model.mu0_std * model.mu0_std + model.sigma * model.sigma * s.horizon).sqrt();
            let grid_x = s.grid_x(model.mu0_mean, spread)?;
            let sol = pde_solve_hjb_fp(&LqPdeProblem { lq: model }, &grid_x, &grid_t, &picard)?;
            dump(&sol, "pde")?;
            fill_pde_metrics(&mut metrics, &sol, grid_t.n_steps());
        }
        Preset::Minlqg(p) => {
            let model = p.build()?;
            let spread =
                (model.mu0_std * model.mu0_std + model.sigma * model.sigma * s.horizon).sqrt();
            let grid_x = s.grid_x(model.mu0_mean, spread + 1.0)?;
            let sol =
                pde_solve_hjb_fp(&MinLqgPdeProblem { model }, &grid_x, &grid_t, &picard)?;
            dump(&sol, "pde")?;
            fill_pde_metrics(&mut metrics, &sol, grid_t.n_steps());
        }
        Preset::AtanMfg(p) => {
            let model = p.build();
            let spread = model.sigma * s.horizon.sqrt()
                + model.rho.abs() * std::f64::consts::FRAC_PI_2 * s.horizon;
            let grid_x = s.grid_x(model.x0, spread)?;
            let m0_std = s.m0_std.unwrap_or(3.0 * grid_x.dx());
            let x0 = model.x0;
            let sol = pde_solve_hjb_fp(
                &AtanMfgPdeProblem { model, m0_std },
                &grid_x,
                &grid_t,
                &picard,
            )?;
            dump(&sol, "pde")?;
            fill_pde_metrics(&mut metrics, &sol, grid_t.n_steps());
            metrics.insert("y0".into(), sol.grad_u_at(0, x0));
        }
        Preset::CnLq(p) => {
            let model = p.build()?;
            let spread = (model.mu0_std * model.mu0_std
                + model.sigma * model.sigma * s.horizon)
                .sqrt()
                + model.c_t;
            let grid_x = s.grid_x(model.mu0_mean, spread)?;
            let sol = pde_solve_common_noise_lq(&model, &grid_x, &grid_t, &picard)?;
            dump(&sol.pre, "pde_pre")?;
            dump(&sol.post_minus, "pde_minus")?;
            dump(&sol.post_plus, "pde_plus")?;
            metrics.insert("cond_mean_minus".into(), sol.terminal_means.0);
            metrics.insert("cond_mean_plus".into(), sol.terminal_means.1);
            let last = sol.post_plus.times.len() - 1;
            metrics.insert(
                "mass_error".into(),
                (sol.post_plus.mass(last) - 1.0)
                    .abs()
                    .max((sol.post_minus.mass(last) - 1.0).abs()),
            );
        }
        _ => unreachable!("validated"),
    }
    Ok(metrics)
}

fn fill_pde_metrics(metrics: &mut BTreeMap<String, f64>, sol: &bench::PdeSolution, n_t: usize) {
    let mass_err = (0..=n_t)
        .map(|n| (sol.mass(n) - 1.0).abs())
        .fold(0.0f64, f64::max);
    metrics.insert("mass_error".into(), mass_err);
    metrics.insert("min_m".into(), sol.min_m());
    metrics.insert(
        "picard_iterations".into(),
        sol.residuals.len() as f64,
    );
}

// ---------------------------------------------------------------------------
// Shared evaluation helpers (also used by the acceptance suite)
// ---------------------------------------------------------------------------

/// Scenario-conditional statistics of a trained common-noise control:
/// pools particles from `n_rollouts` evaluation rollouts by realized
/// scenario.
pub struct ScenarioStats {
    pub mean_plus: f64,
    pub mean_minus: f64,
    /// Conditional means at the jump-time grid node (the state there is
    /// built from pre-jump controls only).
    pub pre_mean_plus: f64,
    pub pre_mean_minus: f64,
    pub n_plus: usize,
    pub n_minus: usize,
    pub terminal_plus: Vec<f64>,
    pub terminal_minus: Vec<f64>,
}

pub fn cn_scenario_stats(
    params: &NetParams,
    model: &CommonNoiseLq,
    grid: &TimeGrid,
    n: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<ScenarioStats, SimError> {
    let jump_idx = (model.jump_time / grid.dt()).round() as usize;
    let mut terminal_plus = Vec::new();
    let mut terminal_minus = Vec::new();
    let mut pre_plus = Vec::new();
    let mut pre_minus = Vec::new();
    for k in 0..n_rollouts {
        let run_seed = substream(seed, k as u64);
        let run = eval_rollout(params, model, grid, n, run_seed, None)?;
        // recover the realized scenario from the sampled bundle
        let noise = sample_noise(
            grid,
            n,
            model.dim_w(),
            &model.common_noise(),
            substream(run_seed, 2),
        )?;
        let up = match &noise.common {
            crate::simulate::CommonPath::Jump { value, .. } => *value > 0.0,
            _ => unreachable!("cn-lq always carries jump noise"),
        };
        for i in 0..n {
            let xt = run.state(grid.n_steps(), i, 0);
            let xj = run.state(jump_idx, i, 0);
            if up {
                terminal_plus.push(xt);
                pre_plus.push(xj);
            } else {
                terminal_minus.push(xt);
                pre_minus.push(xj);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(ScenarioStats {
        mean_plus: mean(&terminal_plus),
        mean_minus: mean(&terminal_minus),
        pre_mean_plus: mean(&pre_plus),
        pre_mean_minus: mean(&pre_minus),
        n_plus: terminal_plus.len(),
        n_minus: terminal_minus.len(),
        terminal_plus,
        terminal_minus,
    })
}

/// Time-averaged L2 gaps between trained (X, Y) trajectories and the
/// Riccati-oracle system driven by the same underlying noise. The oracle is
/// simulated on a grid `ref_refine` times finer (shared Brownian refinement)
/// with the exact eta coefficients, and compared at the solver's grid nodes.
pub fn systemic_oracle_gap(
    y0: &NetParams,
    z: &NetParams,
    model: &SystemicRisk,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    ref_refine: usize,
) -> Result<(f64, f64), ExperimentError> {
    let fine_grid = TimeGrid::new(grid.horizon(), grid.n_steps() * ref_refine)?;
    let sol = riccati_systemic_solve(model, &fine_grid)?;
    let fine_noise = sample_noise(
        &fine_grid,
        n,
        model.dim_w(),
        &model.common_noise(),
        substream(seed, 2),
    )?;
    let ens0 = Ensemble::sample_x0_fbsde(model, n, substream(seed, 1));

    // oracle system on the fine grid: alpha = (q + eta)(mbar - x)
    let dt_f = fine_grid.dt();
    let mut xs = ens0.states.clone();
    let mut oracle_x = vec![0.0; (grid.n_steps() + 1) * n];
    let mut oracle_y = vec![0.0; (grid.n_steps() + 1) * n];
    let record = |xs: &[f64], step_f: usize, ox: &mut [f64], oy: &mut [f64], sol_t: f64| {
        if step_f % ref_refine == 0 {
            let coarse = step_f / ref_refine;
            let mbar: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
            for i in 0..xs.len() {
                ox[coarse * xs.len() + i] = xs[i];
                oy[coarse * xs.len() + i] = sol.eta_at(sol_t) * (xs[i] - mbar);
            }
        }
    };
    record(&xs, 0, &mut oracle_x, &mut oracle_y, 0.0);
    for step in 0..fine_grid.n_steps() {
        let t = fine_grid.time(step);
        let mbar: f64 = xs.iter().sum::<f64>() / n as f64;
        let eta = sol.eta_at(t);
        for i in 0..n {
            let alpha = (model.q + eta) * (mbar - xs[i]);
            let drift = model.a * (mbar - xs[i]) + alpha;
            let dw = crate::simulate::mixed_increment(&fine_noise, step, i, 0);
            xs[i] += drift * dt_f + model.sigma * dw;
        }
        record(
            &xs,
            step + 1,
            &mut oracle_x,
            &mut oracle_y,
            fine_grid.time(step + 1),
        );
    }

    // trained system on the coarse grid, same Brownian paths
    let coarse_noise = fine_noise.coarsen(ref_refine)?;
    let run = fbsde_rollout::<f64, _>(
        (),
        model,
        &y0.arch,
        &y0.theta,
        &z.arch,
        &z.theta,
        &ens0,
        &coarse_noise,
        grid,
    )
    .map_err(ExperimentError::Sim)?
    .rollout;

    let mut acc_x = 0.0;
    let mut acc_y = 0.0;
    for step in 0..=grid.n_steps() {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for i in 0..n {
            let dx = run.x(step, i, 0) - oracle_x[step * n + i];
            let dy = run.y(step, i, 0) - oracle_y[step * n + i];
            gx += dx * dx;
            gy += dy * dy;
        }
        acc_x += gx / n as f64;
        acc_y += gy / n as f64;
    }
    let norm = (grid.n_steps() + 1) as f64;
    Ok(((acc_x / norm).sqrt(), (acc_y / norm).sqrt()))
}

// ---------------------------------------------------------------------------
// CSV comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub column: String,
    pub l2_gap: f64,
    pub sup_gap: f64,
}

/// Compares two aligned CSV files column by column: root-mean-square and
/// sup gaps for numeric columns. Headers and row counts must match, and
/// non-numeric cells must be identical (they are treated as grid keys).
pub fn compare_csvs(a: &Path, b: &Path) -> Result<Vec<GapRow>, ExperimentError> {
    let ta = parse_csv(a)?;
    let tb = parse_csv(b)?;
    if ta.header != tb.header {
        return Err(ExperimentError::Invalid(format!(
            "header mismatch: {:?} vs {:?}",
            ta.header, tb.header
        )));
    }
    if ta.rows.len() != tb.rows.len() {
        return Err(ExperimentError::Invalid(format!(
            "row count mismatch: {} vs {}",
            ta.rows.len(),
            tb.rows.len()
        )));
    }
    let n_cols = ta.header.len();
    let mut rows = Vec::with_capacity(n_cols);
    for c in 0..n_cols {
        let mut sum_sq = 0.0;
        let mut sup: f64 = 0.0;
        let mut numeric = true;
        for (ra, rb) in ta.rows.iter().zip(&tb.rows) {
            match (ra[c].parse::<f64>(), rb[c].parse::<f64>()) {
                (Ok(x), Ok(y)) => {
                    let d = (x - y).abs();
                    sum_sq += d * d;
                    sup = sup.max(d);
                }
                _ => {
                    if ra[c] != rb[c] {
                        return Err(ExperimentError::Invalid(format!(
                            "non-numeric cells differ in column '{}': '{}' vs '{}'",
                            ta.header[c], ra[c], rb[c]
                        )));
                    }
                    numeric = false;
                }
            }
        }
        if numeric && !ta.rows.is_empty() {
            rows.push(GapRow {
                column: ta.header[c].clone(),
                l2_gap: (sum_sq / ta.rows.len() as f64).sqrt(),
                sup_gap: sup,
            });
        }
    }
    Ok(rows)
}

pub fn write_gap_summary<W: Write>(w: &mut W, rows: &[GapRow]) -> std::io::Result<()> {
    writeln!(w, "column,l2_gap,sup_gap")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.column, fmt_f64(r.l2_gap), fmt_f64(r.sup_gap))?;
    }
    Ok(())
}

struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn parse_csv(path: &Path) -> Result<CsvTable, ExperimentError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| ExperimentError::Invalid(format!("{}: empty file", path.display())))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if row.len() != header.len() {
            return Err(ExperimentError::Invalid(format!(
                "{}: row {} has {} cells, header has {}",
                path.display(),
                k + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}
