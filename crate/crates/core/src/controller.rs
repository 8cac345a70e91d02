//! Online reconfiguration loop: every 10-iteration group it collects
//! runtime metrics, checks prediction drift (adapt the predictor online)
//! and predicted gain (reconfigure through checkpoint-restart), and
//! otherwise keeps the current configuration.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::metanet::{adapt_online, forward, FeatureVector, MetaNetParams, TrainingSample};
use crate::simcore::{collect_metrics, RuntimeMetrics, SchedulerConfig, SimOptions, Simulator};
use crate::tuners::{meta_select, SearchSpace};
use crate::workload::{BandwidthTrace, ClusterSpec, ModelProfile};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ControllerOptions {
    /// Minimum predicted relative gain before reconfiguring.
    pub gain_threshold: f64,
    /// Relative prediction error that triggers online adaptation.
    pub drift_threshold: f64,
    /// Iterations per decision group.
    pub group_iters: usize,
    /// Checkpoint-restart cost, in multiples of the group's mean
    /// iteration time.
    pub restart_penalty_iters: f64,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    pub buffer_capacity: usize,
    /// Compare the candidate's predicted speed against the observed speed
    /// instead of the current config's predicted speed.
    pub gain_vs_observed: bool,
}

impl Default for ControllerOptions {
    fn default() -> Self {
        ControllerOptions {
            gain_threshold: 0.05,
            drift_threshold: 0.10,
            group_iters: 10,
            restart_penalty_iters: 1.0,
            adapt_steps: 50,
            adapt_lr: 1e-4,
            buffer_capacity: 64,
            gain_vs_observed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Keep,
    Reconfigure(SchedulerConfig),
    AdaptThenDecide,
}

impl Action {
    pub fn label(&self) -> &'static str {
        match self {
            Action::Keep => "keep",
            Action::Reconfigure(_) => "reconfigure",
            Action::AdaptThenDecide => "adapt",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconfigEvent {
    pub iteration: u64,
    pub old: SchedulerConfig,
    pub new: SchedulerConfig,
    pub predicted_gain: f64,
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    pub current_config: SchedulerConfig,
    pub params: MetaNetParams,
    /// Mean predicted speed for the current config on the latest metrics.
    pub last_prediction: f64,
    pub sample_buffer: VecDeque<TrainingSample>,
    pub reconfig_log: Vec<ReconfigEvent>,
    pub opts: ControllerOptions,
    pub space: SearchSpace,
}

impl ControllerState {
    pub fn new(
        initial_config: SchedulerConfig,
        params: MetaNetParams,
        space: SearchSpace,
        opts: ControllerOptions,
    ) -> Self {
        ControllerState {
            current_config: initial_config,
            params,
            last_prediction: 0.0,
            sample_buffer: VecDeque::new(),
            reconfig_log: Vec::new(),
            opts,
            space,
        }
    }

    fn push_sample(&mut self, sample: TrainingSample) {
        if self.sample_buffer.len() == self.opts.buffer_capacity {
            self.sample_buffer.pop_front();
        }
        self.sample_buffer.push_back(sample);
    }
}

/// The pure trigger rule on scalar summaries, separated from prediction so
/// the hysteresis properties can be tested on arbitrary streams.
/// `v_obs`: observed mean speed; `v_pred_cur`: predicted speed of the
/// current config; `v_best`/`best`: top candidate from the selector.
pub fn decide(
    v_obs: f64,
    v_pred_cur: f64,
    v_best: f64,
    best: SchedulerConfig,
    current: SchedulerConfig,
    opts: &ControllerOptions,
) -> (Action, f64, f64) {
    let drift = (v_pred_cur - v_obs).abs() / v_obs.max(1e-12);
    if drift > opts.drift_threshold {
        return (Action::AdaptThenDecide, drift, 0.0);
    }
    let reference = if opts.gain_vs_observed { v_obs } else { v_pred_cur };
    let gain = (v_best - reference) / reference.max(1e-12);
    if gain > opts.gain_threshold && best != current {
        (Action::Reconfigure(best), drift, gain)
    } else {
        (Action::Keep, drift, gain)
    }
}

/// One trigger evaluation from a completed group's metrics: drift check
/// first, then the predicted-gain check over all candidates.
pub fn trigger_decide(state: &ControllerState, metrics: &RuntimeMetrics) -> Result<(Action, f64, f64, f64)> {
    let v_obs = metrics.v.iter().sum::<f64>() / metrics.v.len() as f64;
    let cur_features = FeatureVector::from_metrics(metrics, &state.current_config);
    let pred = forward(&state.params, &cur_features)?;
    let v_pred_cur = pred.iter().sum::<f64>() / pred.len() as f64;
    let drift = (v_pred_cur - v_obs).abs() / v_obs.max(1e-12);
    if drift > state.opts.drift_threshold {
        return Ok((Action::AdaptThenDecide, drift, 0.0, v_pred_cur));
    }
    let (best, v_best, _) = meta_select(&state.params, metrics, &state.space)?;
    let (action, drift, gain) = decide(v_obs, v_pred_cur, v_best, best, state.current_config, &state.opts);
    Ok((action, drift, gain, v_pred_cur))
}

/// Applies a reconfiguration: validates, swaps the config, appends to the
/// log. Returns the checkpoint-restart cost in seconds given the group's
/// mean iteration time.
pub fn execute_reconfigure(
    state: &mut ControllerState,
    new_config: SchedulerConfig,
    iteration: u64,
    predicted_gain: f64,
    mean_iter_time: f64,
) -> Result<f64> {
    new_config.validate()?;
    if new_config == state.current_config {
        return Err(Error::InvalidConfig("reconfigure to the current config".into()));
    }
    if let Some(last) = state.reconfig_log.last() {
        debug_assert!(iteration > last.iteration);
    }
    state.reconfig_log.push(ReconfigEvent {
        iteration,
        old: state.current_config,
        new: new_config,
        predicted_gain,
    });
    state.current_config = new_config;
    Ok(state.opts.restart_penalty_iters * mean_iter_time)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group: usize,
    pub iter_start: u64,
    pub s_p: u64,
    pub s_c: u32,
    /// Mean per-worker observed speed, samples/s.
    pub observed_speed: f64,
    pub predicted_speed: f64,
    pub action: String,
    pub drift: f64,
    pub predicted_gain: f64,
    /// Restart cost charged at the end of this group, seconds.
    pub penalty_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub groups: Vec<GroupRecord>,
    pub reconfig_log: Vec<ReconfigEvent>,
    pub iteration_times: Vec<f64>,
    /// Sum of restart penalties charged across the run, seconds.
    pub total_penalty_s: f64,
    pub n_workers: usize,
    pub batch_size: u32,
}

impl RunRecord {
    /// Aggregate speed over an iteration range, with restart penalties from
    /// groups ending inside the range charged to the denominator.
    pub fn mean_speed(&self, range: std::ops::Range<usize>) -> f64 {
        let times: f64 = self.iteration_times[range.clone()].iter().sum();
        let penalties: f64 = self
            .groups
            .iter()
            .filter(|g| {
                let end = g.iter_start as usize + 10;
                end > range.start && end <= range.end
            })
            .map(|g| g.penalty_s)
            .sum();
        let n = range.len() as f64;
        self.n_workers as f64 * self.batch_size as f64 * n / (times + penalties)
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(
            w,
            "group,iter_start,S_p,S_c,observed_speed,predicted_speed,action,drift,predicted_gain"
        )?;
        for g in &self.groups {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                g.group,
                g.iter_start,
                g.s_p,
                g.s_c,
                g.observed_speed,
                g.predicted_speed,
                g.action,
                g.drift,
                g.predicted_gain
            )?;
        }
        Ok(())
    }
}

/// Full control loop: simulate one group, decide, act, repeat.
#[allow(clippy::too_many_arguments)]
pub fn run_online_controller(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    trace: &BandwidthTrace,
    initial_config: SchedulerConfig,
    params: MetaNetParams,
    n_iters: usize,
    space: SearchSpace,
    opts: ControllerOptions,
    sim_opts: SimOptions,
) -> Result<RunRecord> {
    if n_iters < opts.group_iters {
        return Err(Error::Validation("n_iters smaller than one group".into()));
    }
    let mut state = ControllerState::new(initial_config, params, space, opts);
    let mut sim = Simulator::new(profile, cluster, initial_config, trace, 0, sim_opts)?;
    // Absolute iteration index at which the current simulator instance
    // started (a reconfigure is a checkpoint-restart: the pipeline is torn
    // down and a fresh simulator continues from the next iteration).
    let mut sim_base = 0usize;
    let mut all_times: Vec<f64> = Vec::with_capacity(n_iters);
    let n_groups = n_iters / opts.group_iters;
    let mut groups = Vec::with_capacity(n_groups);
    let mut total_penalty = 0.0;
    for g in 0..n_groups {
        sim.run_iters(opts.group_iters)?;
        let res = sim.result();
        let start = g * opts.group_iters;
        let times = &res.iteration_times[start - sim_base..start - sim_base + opts.group_iters];
        let metrics = collect_metrics(profile, cluster, trace, &state.current_config, start as u64, times);
        let v_obs = metrics.v.iter().sum::<f64>() / metrics.v.len() as f64;
        let mean_iter_time = times.iter().sum::<f64>() / times.len() as f64;
        state.push_sample(TrainingSample {
            features: FeatureVector::from_metrics(&metrics, &state.current_config),
            label: metrics.v.clone(),
        });
        let (mut action, mut drift, mut gain, mut v_pred) = trigger_decide(&state, &metrics)?;
        let mut label = action.label().to_string();
        if action == Action::AdaptThenDecide {
            let buf: Vec<TrainingSample> = state.sample_buffer.iter().cloned().collect();
            state.params = adapt_online(&state.params, &buf, state.opts.adapt_steps, state.opts.adapt_lr)?;
            // Re-decide within the same group with the adapted predictor.
            let (a2, d2, g2, p2) = trigger_decide(&state, &metrics)?;
            drift = d2;
            gain = g2;
            v_pred = p2;
            label = format!("adapt+{}", a2.label());
            action = match a2 {
                // A second drift trip in the same group falls back to Keep;
                // adaptation already did its best on this buffer.
                Action::AdaptThenDecide => Action::Keep,
                other => other,
            };
        }
        let mut penalty = 0.0;
        if let Action::Reconfigure(new_cfg) = &action {
            penalty = execute_reconfigure(
                &mut state,
                *new_cfg,
                ((g + 1) * opts.group_iters) as u64,
                gain,
                mean_iter_time,
            )?;
            total_penalty += penalty;
            // Checkpoint-restart: finalize the old pipeline and continue
            // with a fresh one under the new config.
            sim.drain();
            all_times.extend(sim.result().iteration_times);
            let next = (g + 1) * opts.group_iters;
            sim = Simulator::new(profile, cluster, *new_cfg, trace, next as u64, sim_opts)?;
            sim_base = next;
        }
        state.last_prediction = v_pred;
        groups.push(GroupRecord {
            group: g,
            iter_start: start as u64,
            // Config that was active during this group (before any switch).
            s_p: metrics.s_p,
            s_c: metrics.s_c,
            observed_speed: v_obs,
            predicted_speed: v_pred,
            action: label,
            drift,
            predicted_gain: gain,
            penalty_s: penalty,
        });
    }
    sim.drain();
    all_times.extend(sim.result().iteration_times);
    Ok(RunRecord {
        groups,
        reconfig_log: state.reconfig_log,
        iteration_times: all_times,
        total_penalty_s: total_penalty,
        n_workers: cluster.n_workers,
        batch_size: profile.batch_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::simulate_iterations;
    use crate::workload::{embedding_for_name, Architecture, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_profile() -> ModelProfile {
        ModelProfile {
            name: "ctl".into(),
            batch_size: 32,
            layers: (0..3)
                .map(|i| LayerSpec {
                    index: i,
                    param_bytes: (2 + i as u64) << 20,
                    fp_time: 1e-3,
                    bp_time: 2e-3,
                })
                .collect(),
            model_embedding: embedding_for_name("ctl"),
        }
    }

    fn cfg(sp: u64, sc: u32) -> SchedulerConfig {
        SchedulerConfig::new(sp, sc)
    }

    #[test]
    fn decide_examples() {
        let opts = ControllerOptions::default();
        let cur = cfg(1 << 22, 2);
        let best = cfg(1 << 20, 4);
        // gain 4%, drift 2% -> Keep
        let (a, _, _) = decide(100.0, 102.0, 106.08, best, cur, &opts);
        assert_eq!(a, Action::Keep);
        // gain 12%, drift 2% -> Reconfigure
        let (a, _, g) = decide(100.0, 102.0, 114.24, best, cur, &opts);
        assert_eq!(a, Action::Reconfigure(best));
        assert!((g - 0.12).abs() < 1e-9);
        // drift 15% -> AdaptThenDecide regardless of gain
        let (a, d, _) = decide(100.0, 115.0, 200.0, best, cur, &opts);
        assert_eq!(a, Action::AdaptThenDecide);
        assert!((d - 0.15).abs() < 1e-9);
        // best == current never reconfigures
        let (a, _, _) = decide(100.0, 100.0, 120.0, cur, cur, &opts);
        assert_eq!(a, Action::Keep);
    }

    #[test]
    fn hysteresis_over_random_streams() {
        // No Reconfigure ever fires with gain <= threshold, over many
        // random metric streams.
        let opts = ControllerOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let grid: Vec<SchedulerConfig> = (0..6).map(|i| cfg(1 << (20 + i), 1 + i as u32)).collect();
        for _stream in 0..1000 {
            let mut current = grid[rng.gen_range(0..grid.len())];
            for _group in 0..20 {
                let v_obs = rng.gen_range(50.0..150.0);
                let v_pred = v_obs * rng.gen_range(0.85..1.15);
                let v_best = v_pred * rng.gen_range(0.9..1.2);
                let best = grid[rng.gen_range(0..grid.len())];
                let (action, _, gain) = decide(v_obs, v_pred, v_best, best, current, &opts);
                if let Action::Reconfigure(new_cfg) = action {
                    assert!(gain > opts.gain_threshold);
                    assert_ne!(new_cfg, current);
                    current = new_cfg;
                }
            }
        }
    }

    #[test]
    fn infinite_thresholds_reproduce_plain_simulation() {
        let profile = toy_profile();
        let cluster = ClusterSpec::homogeneous(4, Architecture::ParameterServer);
        let trace = BandwidthTrace::constant(10.0);
        let config = cfg(1 << 20, 2);
        let opts = ControllerOptions {
            gain_threshold: f64::INFINITY,
            drift_threshold: f64::INFINITY,
            ..Default::default()
        };
        let record = run_online_controller(
            &profile,
            &cluster,
            &trace,
            config,
            MetaNetParams::zeros(4, 4, 8),
            40,
            SearchSpace::default(),
            opts,
            SimOptions::default(),
        )
        .unwrap();
        let plain = simulate_iterations(&profile, &cluster, config, &trace, 40, 0, SimOptions::default()).unwrap();
        assert_eq!(record.iteration_times, plain.iteration_times);
        assert!(record.reconfig_log.is_empty());
        assert_eq!(record.total_penalty_s, 0.0);
        assert!(record.groups.iter().all(|g| g.action == "keep"));
    }

    #[test]
    fn fixed_point_params_never_reconfigure() {
        // A zero network scores every candidate identically, so the gain is
        // never positive and the config never changes.
        let profile = toy_profile();
        let cluster = ClusterSpec::homogeneous(2, Architecture::ParameterServer);
        let trace = BandwidthTrace::constant(10.0);
        let opts = ControllerOptions {
            drift_threshold: f64::INFINITY, // isolate the gain rule
            ..Default::default()
        };
        let record = run_online_controller(
            &profile,
            &cluster,
            &trace,
            cfg(1 << 20, 2),
            MetaNetParams::zeros(4, 4, 8),
            40,
            SearchSpace::default(),
            opts,
            SimOptions::default(),
        )
        .unwrap();
        assert!(record.reconfig_log.is_empty());
        assert_eq!(record.groups.last().unwrap().s_p, 1 << 20);
    }

    #[test]
    fn execute_reconfigure_guards_and_logs() {
        let mut state = ControllerState::new(
            cfg(8 << 20, 3),
            MetaNetParams::zeros(4, 4, 8),
            SearchSpace::default(),
            ControllerOptions::default(),
        );
        let err = execute_reconfigure(&mut state, cfg(8 << 20, 3), 10, 0.1, 1e-2);
        assert!(err.is_err());
        assert!(state.reconfig_log.is_empty());
        let penalty = execute_reconfigure(&mut state, cfg(1 << 20, 4), 10, 0.1, 1e-2).unwrap();
        assert!((penalty - 1e-2).abs() < 1e-12);
        assert_eq!(state.reconfig_log.len(), 1);
        assert_eq!(state.current_config, cfg(1 << 20, 4));
        assert_eq!(state.reconfig_log[0].old, cfg(8 << 20, 3));
    }

    #[test]
    fn sample_buffer_evicts_oldest() {
        let opts = ControllerOptions {
            buffer_capacity: 3,
            ..Default::default()
        };
        let mut state = ControllerState::new(
            cfg(1 << 20, 1),
            MetaNetParams::zeros(4, 4, 8),
            SearchSpace::default(),
            opts,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..5 {
            let f = crate::metanet::test_support::random_features(&mut rng, 2, 2);
            state.push_sample(TrainingSample {
                features: f,
                label: vec![k as f64, k as f64],
            });
        }
        assert_eq!(state.sample_buffer.len(), 3);
        assert_eq!(state.sample_buffer.front().unwrap().label[0], 2.0);
    }

    #[test]
    fn run_record_csv_shape() {
        let profile = toy_profile();
        let cluster = ClusterSpec::homogeneous(2, Architecture::ParameterServer);
        let trace = BandwidthTrace::constant(10.0);
        let opts = ControllerOptions {
            gain_threshold: f64::INFINITY,
            drift_threshold: f64::INFINITY,
            ..Default::default()
        };
        let record = run_online_controller(
            &profile,
            &cluster,
            &trace,
            cfg(1 << 20, 2),
            MetaNetParams::zeros(4, 4, 8),
            30,
            SearchSpace::default(),
            opts,
            SimOptions::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        record.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4); // header + 3 groups
        assert!(lines[0].starts_with("group,iter_start,S_p,S_c"));
    }
}
