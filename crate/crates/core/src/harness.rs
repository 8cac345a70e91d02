//! Experiment harness: scenario files, the dataset-collection sweep, and
//! tuner cost/quality comparisons. Everything here is deterministic given
//! (input files, seed) so result files are byte-reproducible.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{run_online_controller, ControllerOptions, GroupRecord, RunRecord};
use crate::metanet::{FeatureVector, MetaNetParams, TrainingSample};
use crate::simcore::{
    collect_metrics, simulate_iterations, RuntimeMetrics, SchedulerConfig, SimOptions,
};
use crate::tuners::{bayes_opt, grid_search, meta_select, SearchSpace, TunerReport};
use crate::workload::{
    bandwidth_at, load_cluster, load_profile, load_trace, BandwidthTrace, ClusterSpec,
    ModelProfile, TraceSegment,
};
use crate::{Error, Result};

pub const GROUP_ITERS: usize = 10;
/// Measurement window: mean speed over iterations 10..60 (or to the end of
/// shorter runs) after the 10-iteration warm-up.
pub const WARMUP_ITERS: usize = 10;
pub const MEASURE_END: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TunerKind {
    None,
    Grid,
    Bo,
    Meta,
}

impl TunerKind {
    pub fn label(&self) -> &'static str {
        match self {
            TunerKind::None => "none",
            TunerKind::Grid => "grid",
            TunerKind::Bo => "bo",
            TunerKind::Meta => "meta",
        }
    }
}

impl std::str::FromStr for TunerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(TunerKind::None),
            "grid" => Ok(TunerKind::Grid),
            "bo" => Ok(TunerKind::Bo),
            "meta" | "online" => Ok(TunerKind::Meta),
            other => Err(Error::Validation(format!("unknown tuner '{other}'"))),
        }
    }
}

fn default_bo_budget() -> usize {
    15
}

fn default_eval_iters() -> usize {
    12
}

fn default_initial_partition() -> u64 {
    4 << 20
}

fn default_initial_credit() -> u32 {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchGrid {
    pub partition_grid: Vec<u64>,
    pub credit_grid: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Paths are resolved relative to the scenario file's directory.
    pub profile: PathBuf,
    pub cluster: PathBuf,
    pub trace: PathBuf,
    pub tuner: TunerKind,
    pub n_iters: usize,
    pub seed: u64,
    /// Meta-network checkpoint; required when tuner = meta.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default = "default_bo_budget")]
    pub bo_budget: usize,
    /// Simulated iterations spent per tuner evaluation.
    #[serde(default = "default_eval_iters")]
    pub eval_iters: usize,
    #[serde(default = "default_initial_partition")]
    pub initial_partition_bytes: u64,
    #[serde(default = "default_initial_credit")]
    pub initial_credit: u32,
    /// Optional search-space override (defaults to the full grid).
    #[serde(default)]
    pub search: Option<SearchGrid>,
}

/// A scenario with its referenced files loaded and validated.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub profile: ModelProfile,
    pub cluster: ClusterSpec,
    pub trace: BandwidthTrace,
    pub params: Option<MetaNetParams>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<LoadedScenario> {
        let path = path.as_ref();
        let scenario: Scenario = read_json_file(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        scenario.load_refs(&base)
    }

    pub fn load_refs(self, base: &Path) -> Result<LoadedScenario> {
        if self.n_iters < 20 {
            return Err(Error::Validation(format!(
                "scenario '{}': n_iters must be >= 20",
                self.name
            )));
        }
        let cluster = load_cluster(resolve(base, &self.cluster))?;
        let profile = load_profile(resolve(base, &self.profile))?;
        let trace = load_trace(resolve(base, &self.trace), cluster.n_workers)?;
        let params = match (&self.tuner, &self.model) {
            (TunerKind::Meta, Some(p)) => Some(MetaNetParams::load(&resolve(base, p))?),
            (TunerKind::Meta, None) => {
                return Err(Error::Validation(format!(
                    "scenario '{}': tuner 'meta' requires a model checkpoint",
                    self.name
                )))
            }
            _ => None,
        };
        if let Some(grid) = &self.search {
            SearchSpace {
                partition_grid: grid.partition_grid.clone(),
                credit_grid: grid.credit_grid.clone(),
            }
            .validate()?;
        }
        Ok(LoadedScenario {
            scenario: self,
            profile,
            cluster,
            trace,
            params,
        })
    }

    pub fn space(&self) -> SearchSpace {
        match &self.search {
            Some(g) => SearchSpace {
                partition_grid: g.partition_grid.clone(),
                credit_grid: g.credit_grid.clone(),
            },
            None => SearchSpace::default(),
        }
    }

    pub fn initial_config(&self) -> SchedulerConfig {
        SchedulerConfig::new(self.initial_partition_bytes, self.initial_credit)
    }
}

/// The trace as seen at iteration 0, used by static tuners: the first
/// segment extended forever, with jobs not yet active dropped.
pub fn static_environment(trace: &BandwidthTrace) -> BandwidthTrace {
    BandwidthTrace {
        segments: vec![TraceSegment {
            start_iteration: 0,
            up_gbps: trace.segments[0].up_gbps.clone(),
            down_gbps: trace.segments[0].down_gbps.clone(),
        }],
        jobs: trace
            .jobs
            .iter()
            .filter(|j| j.arrive_iter + j.init_iters == 0)
            .cloned()
            .collect(),
    }
}

/// Simulator-backed evaluator: speed of `config` on the frozen initial
/// environment, measured over `eval_iters` with a 2-iteration warm-up.
pub fn simulation_evaluator<'a>(
    profile: &'a ModelProfile,
    cluster: &'a ClusterSpec,
    static_trace: &'a BandwidthTrace,
    eval_iters: usize,
    opts: SimOptions,
) -> impl Fn(&SchedulerConfig) -> Result<(f64, u64)> + Sync + 'a {
    move |config: &SchedulerConfig| {
        let res = simulate_iterations(profile, cluster, *config, static_trace, eval_iters, 0, opts)?;
        let measured = &res.iteration_times[2.min(eval_iters - 1)..];
        let mean = measured.iter().sum::<f64>() / measured.len() as f64;
        Ok((profile.batch_size as f64 / mean, eval_iters as u64))
    }
}

/// Runtime metrics assembled without simulation, for zero-cost selection:
/// compute times come from the profile, bandwidth from the trace's first
/// measurement window, and the observed-speed slot is left at zero (it is
/// not part of the predictor's input).
pub fn probe_metrics(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    trace: &BandwidthTrace,
    config: &SchedulerConfig,
) -> RuntimeMetrics {
    let n = cluster.n_workers;
    let mut b_up = vec![0.0; n];
    let mut b_down = vec![0.0; n];
    for k in 0..GROUP_ITERS as u64 {
        for w in 0..n {
            let (up, down) = bandwidth_at(trace, k, w);
            b_up[w] += up;
            b_down[w] += down;
        }
    }
    for w in 0..n {
        b_up[w] /= GROUP_ITERS as f64;
        b_down[w] /= GROUP_ITERS as f64;
    }
    RuntimeMetrics {
        s_p: config.partition_bytes,
        s_c: config.credit_multiplier,
        n,
        l: profile.n_layers(),
        model_embedding: profile.model_embedding.clone(),
        arch_embedding: cluster.arch_embedding.clone(),
        b_down,
        b_up,
        t: (0..profile.n_layers())
            .map(|i| {
                (0..n)
                    .map(|w| profile.layers[i].bp_time * cluster.compute_scale[w])
                    .collect()
            })
            .collect(),
        layer_bytes: profile.layers.iter().map(|l| l.param_bytes).collect(),
        v: vec![0.0; n],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub tuner: String,
    /// Mean per-worker speed (samples/s) over the measured window,
    /// reconfiguration penalties included.
    pub mean_speed: f64,
    pub measured_iters: [usize; 2],
    pub initial_config: SchedulerConfig,
    pub final_config: SchedulerConfig,
    pub configs_used: Vec<SchedulerConfig>,
    /// Simulated iterations spent searching before/while the run.
    pub tuner_cost_iterations: u64,
    pub n_reconfigs: usize,
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub summary: ScenarioSummary,
    pub record: RunRecord,
}

fn record_from_plain_run(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    trace: &BandwidthTrace,
    config: SchedulerConfig,
    iteration_times: Vec<f64>,
) -> RunRecord {
    let n_groups = iteration_times.len() / GROUP_ITERS;
    let groups = (0..n_groups)
        .map(|g| {
            let start = g * GROUP_ITERS;
            let times = &iteration_times[start..start + GROUP_ITERS];
            let metrics = collect_metrics(profile, cluster, trace, &config, start as u64, times);
            GroupRecord {
                group: g,
                iter_start: start as u64,
                s_p: config.partition_bytes,
                s_c: config.credit_multiplier,
                observed_speed: metrics.v.iter().sum::<f64>() / metrics.v.len() as f64,
                predicted_speed: 0.0,
                action: "keep".into(),
                drift: 0.0,
                predicted_gain: 0.0,
                penalty_s: 0.0,
            }
        })
        .collect();
    RunRecord {
        groups,
        reconfig_log: Vec::new(),
        iteration_times,
        total_penalty_s: 0.0,
        n_workers: cluster.n_workers,
        batch_size: profile.batch_size,
    }
}

/// Executes the scenario's pipeline and returns the record and summary
/// without touching the filesystem.
pub fn execute_scenario(loaded: &LoadedScenario) -> Result<ScenarioOutcome> {
    let s = &loaded.scenario;
    let ctx = format!("scenario '{}'", s.name);
    execute_scenario_inner(loaded).map_err(|e| e.in_scenario(ctx))
}

fn execute_scenario_inner(loaded: &LoadedScenario) -> Result<ScenarioOutcome> {
    let s = &loaded.scenario;
    let opts = SimOptions::default();
    let space = s.space();
    let (record, initial_config, tuner_cost) = match s.tuner {
        TunerKind::None => {
            let config = SchedulerConfig::baseline();
            let res = simulate_iterations(
                &loaded.profile,
                &loaded.cluster,
                config,
                &loaded.trace,
                s.n_iters,
                0,
                opts,
            )?;
            let record = record_from_plain_run(
                &loaded.profile,
                &loaded.cluster,
                &loaded.trace,
                config,
                res.iteration_times,
            );
            (record, config, 0u64)
        }
        TunerKind::Grid | TunerKind::Bo => {
            let static_trace = static_environment(&loaded.trace);
            let evaluator = simulation_evaluator(
                &loaded.profile,
                &loaded.cluster,
                &static_trace,
                s.eval_iters,
                opts,
            );
            let report = match s.tuner {
                TunerKind::Grid => grid_search(&space, &evaluator)?,
                _ => bayes_opt(&space, &evaluator, s.bo_budget, s.seed)?,
            };
            let res = simulate_iterations(
                &loaded.profile,
                &loaded.cluster,
                report.best_config,
                &loaded.trace,
                s.n_iters,
                0,
                opts,
            )?;
            let record = record_from_plain_run(
                &loaded.profile,
                &loaded.cluster,
                &loaded.trace,
                report.best_config,
                res.iteration_times,
            );
            (record, report.best_config, report.total_cost_iterations)
        }
        TunerKind::Meta => {
            let params = loaded.params.clone().expect("validated at load");
            let record = run_online_controller(
                &loaded.profile,
                &loaded.cluster,
                &loaded.trace,
                s.initial_config(),
                params,
                s.n_iters,
                space,
                ControllerOptions::default(),
                opts,
            )?;
            (record, s.initial_config(), 0u64)
        }
    };
    let end = s.n_iters.min(MEASURE_END);
    let mean_speed = record.mean_speed(WARMUP_ITERS..end);
    let mut configs_used = vec![initial_config];
    for ev in &record.reconfig_log {
        configs_used.push(ev.new);
    }
    let summary = ScenarioSummary {
        name: s.name.clone(),
        tuner: s.tuner.label().into(),
        mean_speed,
        measured_iters: [WARMUP_ITERS, end],
        initial_config,
        final_config: *configs_used.last().unwrap(),
        configs_used,
        tuner_cost_iterations: tuner_cost,
        n_reconfigs: record.reconfig_log.len(),
    };
    Ok(ScenarioOutcome { summary, record })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs the scenario and writes `<name>_record.csv`, `<name>_speed5.csv`
/// (5-iteration plot granularity) and `<name>_summary.json` into `out_dir`.
pub fn run_scenario(loaded: &LoadedScenario, out_dir: &Path) -> Result<ScenarioOutcome> {
    let outcome = execute_scenario(loaded)?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let name = &loaded.scenario.name;
    let mut csv = Vec::new();
    outcome.record.write_csv(&mut csv).expect("vec write");
    write_file(&out_dir.join(format!("{name}_record.csv")), &csv)?;
    let mut fine = String::from("iter_start,mean_speed\n");
    let times = &outcome.record.iteration_times;
    let batch = outcome.record.batch_size as f64;
    for start in (0..times.len() - times.len() % 5).step_by(5) {
        let mean = times[start..start + 5].iter().sum::<f64>() / 5.0;
        fine.push_str(&format!("{},{}\n", start, batch / mean));
    }
    write_file(&out_dir.join(format!("{name}_speed5.csv")), fine.as_bytes())?;
    let summary_json = serde_json::to_string_pretty(&outcome.summary).expect("summary serialize");
    write_file(
        &out_dir.join(format!("{name}_summary.json")),
        summary_json.as_bytes(),
    )?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Dataset collection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub profiles: Vec<PathBuf>,
    pub cluster: PathBuf,
    pub traces: Vec<PathBuf>,
    pub partition_grid: Vec<u64>,
    pub credit_grid: Vec<u32>,
    /// Iterations simulated per (profile, trace, config) point; one sample
    /// is emitted per 10-iteration group.
    pub iters_per_point: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<(DatasetSpec, PathBuf)> {
        let path = path.as_ref();
        let spec: DatasetSpec = read_json_file(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok((spec, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() || self.traces.is_empty() {
            return Err(Error::Validation("dataset spec needs >= 1 profile and trace".into()));
        }
        let space = SearchSpace {
            partition_grid: self.partition_grid.clone(),
            credit_grid: self.credit_grid.clone(),
        };
        space.validate()?;
        let full = SearchSpace::default();
        if self.partition_grid.iter().any(|sp| {
            *sp < *full.partition_grid.first().unwrap() || *sp > *full.partition_grid.last().unwrap()
        }) || self
            .credit_grid
            .iter()
            .any(|sc| *sc < *full.credit_grid.first().unwrap() || *sc > *full.credit_grid.last().unwrap())
        {
            return Err(Error::Validation("dataset grids outside the search space".into()));
        }
        if self.iters_per_point < GROUP_ITERS {
            return Err(Error::Validation(format!(
                "iters_per_point must be >= {GROUP_ITERS}"
            )));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.profiles.len()
            * self.traces.len()
            * self.partition_grid.len()
            * self.credit_grid.len()
            * (self.iters_per_point / GROUP_ITERS)
    }
}

/// Sweeps configs x models x traces in the simulator, emitting one sample
/// per 10-iteration group. Points run in parallel; output order is the
/// deterministic sweep order (profile, trace, S_p, S_c, group).
pub fn collect_dataset(spec: &DatasetSpec, base: &Path) -> Result<Vec<TrainingSample>> {
    spec.validate()?;
    let cluster = load_cluster(resolve(base, &spec.cluster))?;
    let profiles: Vec<ModelProfile> = spec
        .profiles
        .iter()
        .map(|p| load_profile(resolve(base, p)))
        .collect::<Result<_>>()?;
    let traces: Vec<BandwidthTrace> = spec
        .traces
        .iter()
        .map(|p| load_trace(resolve(base, p), cluster.n_workers))
        .collect::<Result<_>>()?;
    let mut points = Vec::new();
    for profile in &profiles {
        for trace in &traces {
            for &sp in &spec.partition_grid {
                for &sc in &spec.credit_grid {
                    points.push((profile, trace, SchedulerConfig::new(sp, sc)));
                }
            }
        }
    }
    let opts = SimOptions::default();
    let groups = spec.iters_per_point / GROUP_ITERS;
    let per_point: Vec<Vec<TrainingSample>> = points
        .par_iter()
        .map(|(profile, trace, config)| {
            let res = simulate_iterations(
                profile,
                &cluster,
                *config,
                trace,
                groups * GROUP_ITERS,
                0,
                opts,
            )?;
            Ok((0..groups)
                .map(|g| {
                    let start = g * GROUP_ITERS;
                    let times = &res.iteration_times[start..start + GROUP_ITERS];
                    let metrics =
                        collect_metrics(profile, &cluster, trace, config, start as u64, times);
                    TrainingSample {
                        features: FeatureVector::from_metrics(&metrics, config),
                        label: metrics.v.clone(),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Tuner comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunerComparison {
    pub tuner: String,
    pub best_config: SchedulerConfig,
    pub best_speed: f64,
    /// Simulated iterations consumed by the search itself.
    pub cost_iterations: u64,
    pub evaluations: usize,
    /// Not written to the output table (non-deterministic).
    pub wall_clock_s: f64,
}

/// Runs each tuner on the scenario's frozen initial environment and
/// reports cost and quality. Meta consumes zero simulated iterations; its
/// pick is still scored with one excluded-from-cost evaluation so the
/// quality column is comparable.
pub fn compare_tuners(loaded: &LoadedScenario, tuners: &[TunerKind]) -> Result<Vec<TunerComparison>> {
    let s = &loaded.scenario;
    let space = s.space();
    let static_trace = static_environment(&loaded.trace);
    let opts = SimOptions::default();
    let evaluator = simulation_evaluator(&loaded.profile, &loaded.cluster, &static_trace, s.eval_iters, opts);
    let mut rows = Vec::new();
    for kind in tuners {
        let start = Instant::now();
        let row = match kind {
            TunerKind::None => {
                return Err(Error::Validation("compare_tuners expects grid, bo or meta".into()))
            }
            TunerKind::Grid => from_report(kind, grid_search(&space, &evaluator)?),
            TunerKind::Bo => from_report(kind, bayes_opt(&space, &evaluator, s.bo_budget, s.seed)?),
            TunerKind::Meta => {
                let params = loaded
                    .params
                    .as_ref()
                    .ok_or_else(|| Error::Validation("meta tuner requires a model checkpoint".into()))?;
                let metrics =
                    probe_metrics(&loaded.profile, &loaded.cluster, &static_trace, &s.initial_config());
                let (best, _, scores) = meta_select(params, &metrics, &space)?;
                let (speed, _) = evaluator(&best)?;
                TunerComparison {
                    tuner: "meta".into(),
                    best_config: best,
                    best_speed: speed,
                    cost_iterations: 0,
                    evaluations: scores.len(),
                    wall_clock_s: 0.0,
                }
            }
        };
        rows.push(TunerComparison {
            wall_clock_s: start.elapsed().as_secs_f64(),
            ..row
        });
    }
    Ok(rows)
}

fn from_report(kind: &TunerKind, report: TunerReport) -> TunerComparison {
    TunerComparison {
        tuner: kind.label().into(),
        best_config: report.best_config,
        best_speed: report.best_speed,
        cost_iterations: report.total_cost_iterations,
        evaluations: report.evaluations.len(),
        wall_clock_s: 0.0,
    }
}

/// Deterministic table (wall-clock excluded so fixed-seed runs are
/// byte-identical).
pub fn write_comparison_csv(rows: &[TunerComparison], mut w: impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "tuner,best_S_p,best_S_c,best_speed,cost_iterations,evaluations")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.tuner,
            r.best_config.partition_bytes,
            r.best_config.credit_multiplier,
            r.best_speed,
            r.cost_iterations,
            r.evaluations
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{
        embedding_for_name, serialize_cluster, serialize_profile, serialize_trace, Architecture,
        JobSpec, LayerSpec,
    };

    fn toy_profile() -> ModelProfile {
        ModelProfile {
            name: "toy".into(),
            batch_size: 32,
            layers: (0..3)
                .map(|i| LayerSpec {
                    index: i,
                    param_bytes: (4 + 2 * i as u64) << 20,
                    fp_time: 1e-3,
                    bp_time: 2e-3,
                })
                .collect(),
            model_embedding: embedding_for_name("toy"),
        }
    }

    fn write_assets(dir: &Path) {
        std::fs::write(dir.join("toy.json"), serialize_profile(&toy_profile())).unwrap();
        std::fs::write(
            dir.join("cluster.json"),
            serialize_cluster(&ClusterSpec::homogeneous(4, Architecture::ParameterServer)),
        )
        .unwrap();
        std::fs::write(
            dir.join("trace.json"),
            serialize_trace(&BandwidthTrace::constant(10.0)),
        )
        .unwrap();
    }

    fn small_grid() -> Option<SearchGrid> {
        Some(SearchGrid {
            partition_grid: vec![1 << 20, 4 << 20, 16 << 20],
            credit_grid: vec![1, 2, 4],
        })
    }

    fn toy_scenario(dir: &Path, tuner: TunerKind) -> LoadedScenario {
        write_assets(dir);
        Scenario {
            name: "toy".into(),
            profile: "toy.json".into(),
            cluster: "cluster.json".into(),
            trace: "trace.json".into(),
            tuner,
            n_iters: 40,
            seed: 7,
            model: None,
            bo_budget: 5,
            eval_iters: 6,
            initial_partition_bytes: 4 << 20,
            initial_credit: 2,
            search: small_grid(),
        }
        .load_refs(dir)
        .unwrap()
    }

    #[test]
    fn scenario_rejects_short_runs_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_assets(dir.path());
        let mut s = Scenario {
            name: "bad".into(),
            profile: "toy.json".into(),
            cluster: "cluster.json".into(),
            trace: "trace.json".into(),
            tuner: TunerKind::None,
            n_iters: 10,
            seed: 0,
            model: None,
            bo_budget: 5,
            eval_iters: 6,
            initial_partition_bytes: 4 << 20,
            initial_credit: 2,
            search: None,
        };
        assert!(s.clone().load_refs(dir.path()).is_err());
        s.n_iters = 40;
        s.profile = "missing.json".into();
        assert!(s.clone().load_refs(dir.path()).is_err());
        s.profile = "toy.json".into();
        s.tuner = TunerKind::Meta; // no model checkpoint
        assert!(s.load_refs(dir.path()).is_err());
    }

    #[test]
    fn grid_beats_baseline_on_static_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let base = toy_scenario(dir.path(), TunerKind::None);
        let tuned = toy_scenario(dir.path(), TunerKind::Grid);
        let base_out = execute_scenario(&base).unwrap();
        let tuned_out = execute_scenario(&tuned).unwrap();
        assert!(tuned_out.summary.mean_speed >= base_out.summary.mean_speed);
        assert_eq!(tuned_out.summary.tuner_cost_iterations, 9 * 6);
    }

    #[test]
    fn summary_matches_record_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let loaded = toy_scenario(dir.path(), TunerKind::Grid);
        let out_dir = dir.path().join("out");
        let outcome = run_scenario(&loaded, &out_dir).unwrap();
        // Recompute the window mean from the emitted iteration times.
        let end = 40usize.min(MEASURE_END);
        let recomputed = outcome.record.mean_speed(WARMUP_ITERS..end);
        assert_eq!(outcome.summary.mean_speed, recomputed);
        for suffix in ["record.csv", "speed5.csv", "summary.json"] {
            assert!(out_dir.join(format!("toy_{suffix}")).exists());
        }
    }

    #[test]
    fn dataset_grouping_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        write_assets(dir.path());
        let spec = DatasetSpec {
            profiles: vec!["toy.json".into()],
            cluster: "cluster.json".into(),
            traces: vec!["trace.json".into()],
            partition_grid: vec![1 << 20, 8 << 20],
            credit_grid: vec![2],
            iters_per_point: 100,
            seed: 1,
        };
        let samples = collect_dataset(&spec, dir.path()).unwrap();
        assert_eq!(samples.len(), 2 * 10);
        assert_eq!(samples.len(), spec.n_samples());
        // Same spec twice is byte-identical on disk.
        let f1 = dir.path().join("d1.jsonl");
        let f2 = dir.path().join("d2.jsonl");
        crate::metanet::save_dataset(&f1, &samples).unwrap();
        let again = collect_dataset(&spec, dir.path()).unwrap();
        crate::metanet::save_dataset(&f2, &again).unwrap();
        assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());
    }

    #[test]
    fn dataset_labels_ignore_credit_without_bottleneck() {
        // With zero per-chunk overhead and an effectively infinite link the
        // credit multiplier cannot matter.
        let profile = toy_profile();
        let cluster = ClusterSpec::homogeneous(4, Architecture::ParameterServer);
        let trace = BandwidthTrace::constant(1e6);
        let opts = SimOptions::zero_overhead();
        let mut labels = Vec::new();
        for sc in [1u32, 4, 16] {
            let res = simulate_iterations(
                &profile,
                &cluster,
                SchedulerConfig::new(1 << 20, sc),
                &trace,
                20,
                0,
                opts,
            )
            .unwrap();
            let times = &res.iteration_times[10..];
            labels.push(times.iter().sum::<f64>() / times.len() as f64);
        }
        assert!(labels.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn compare_tuners_costs() {
        let dir = tempfile::tempdir().unwrap();
        let loaded = toy_scenario(dir.path(), TunerKind::Grid);
        let rows = compare_tuners(&loaded, &[TunerKind::Grid, TunerKind::Bo]).unwrap();
        assert_eq!(rows[0].cost_iterations, 9 * 6); // 3x3 grid, 6 iters each
        assert_eq!(rows[1].evaluations, 5); // bo budget
        assert_eq!(rows[1].cost_iterations, 5 * 6);
        let mut buf = Vec::new();
        write_comparison_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tuner,best_S_p,best_S_c"));
        assert_eq!(text.lines().count(), 3);
        assert!(!text.contains("wall"));
    }

    #[test]
    fn static_environment_freezes_trace_and_jobs() {
        let mut trace = BandwidthTrace::constant(10.0);
        trace.segments.push(TraceSegment {
            start_iteration: 20,
            up_gbps: vec![3.0],
            down_gbps: vec![3.0],
        });
        trace.jobs.push(JobSpec {
            arrive_iter: 5,
            init_iters: 15,
        });
        let frozen = static_environment(&trace);
        assert_eq!(frozen.segments.len(), 1);
        assert!(frozen.jobs.is_empty());
        let (up, _) = bandwidth_at(&frozen, 1000, 0);
        assert_eq!(up, 10.0);
    }
}
