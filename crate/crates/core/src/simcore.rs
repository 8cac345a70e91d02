//! Discrete-event simulator of one training job's iteration pipeline.
//!
//! Backward propagation emits prioritized tensor chunks, a credit-windowed
//! priority scheduler transmits them over a bandwidth-limited link, and
//! forward propagation of the next iteration starts layer-by-layer as
//! parameters arrive. A run is single-threaded and deterministic;
//! independent runs may execute in parallel with no shared state.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::workload::{bandwidth_at, Architecture, BandwidthTrace, ClusterSpec, ModelProfile};
use crate::{Error, Result};

/// Smallest partition size explored anywhere.
pub const MIN_PARTITION_BYTES: u64 = 4096;

/// Residual-byte tolerance when deciding that a transfer has drained.
const EPS_BYTES: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Partition threshold S_p in bytes; tensors larger than this are split.
    pub partition_bytes: u64,
    /// Credit window S_c, in multiples of the partition size.
    pub credit_multiplier: u32,
    /// false = vanilla baseline: BP, full-model communication and FP are
    /// strictly sequential with no partitioning.
    pub scheduling_enabled: bool,
}

impl SchedulerConfig {
    pub fn new(partition_bytes: u64, credit_multiplier: u32) -> Self {
        SchedulerConfig {
            partition_bytes,
            credit_multiplier,
            scheduling_enabled: true,
        }
    }

    pub fn baseline() -> Self {
        SchedulerConfig {
            partition_bytes: u64::MAX,
            credit_multiplier: 1,
            scheduling_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scheduling_enabled && self.partition_bytes < MIN_PARTITION_BYTES {
            return Err(Error::InvalidConfig(format!(
                "partition_bytes must be >= {}",
                MIN_PARTITION_BYTES
            )));
        }
        if self.credit_multiplier < 1 {
            return Err(Error::InvalidConfig("credit_multiplier must be >= 1".into()));
        }
        Ok(())
    }
}

impl std::fmt::Display for SchedulerConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.scheduling_enabled {
            write!(
                f,
                "<Sp={},Sc={}X>",
                human_bytes(self.partition_bytes),
                self.credit_multiplier
            )
        } else {
            write!(f, "<baseline>")
        }
    }
}

fn human_bytes(b: u64) -> String {
    if b >= 1 << 20 && b % (1 << 20) == 0 {
        format!("{}MB", b >> 20)
    } else if b >= 1 << 10 && b % (1 << 10) == 0 {
        format!("{}KB", b >> 10)
    } else {
        format!("{}B", b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    /// Layer index; doubles as priority, lower = higher priority.
    pub layer: usize,
    /// Creation order within the layer.
    pub seq: usize,
    pub bytes: u64,
}

/// Splits each layer's gradient tensor into chunks of at most the
/// partition size. With scheduling disabled every tensor stays whole.
pub fn partition_tensors(profile: &ModelProfile, config: &SchedulerConfig) -> Vec<Vec<Chunk>> {
    profile
        .layers
        .iter()
        .map(|layer| {
            let b = layer.param_bytes;
            if b == 0 {
                return Vec::new();
            }
            if !config.scheduling_enabled {
                return vec![Chunk {
                    layer: layer.index,
                    seq: 0,
                    bytes: b,
                }];
            }
            let sp = config.partition_bytes;
            let n = b.div_ceil(sp);
            (0..n)
                .map(|i| Chunk {
                    layer: layer.index,
                    seq: i as usize,
                    bytes: if i == n - 1 { b - (n - 1) * sp } else { sp },
                })
                .collect()
        })
        .collect()
}

/// Ideal time to move `bytes` through an otherwise idle link.
pub fn comm_time(
    bytes: u64,
    gbps: f64,
    architecture: Architecture,
    n_workers: usize,
    overhead_s: f64,
) -> f64 {
    bytes as f64 * architecture.comm_factor(n_workers) / (gbps / 8.0 * 1e9) + overhead_s
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimOptions {
    /// Fixed per-chunk scheduling latency; paid before the chunk starts
    /// occupying link bandwidth, so a credit window >= 2 can hide it.
    pub per_chunk_overhead_s: f64,
    /// Fixed per-chunk framing/serialization bytes that travel on the
    /// wire alongside the payload; cheap on fast links, expensive on
    /// slow ones.
    pub per_chunk_wire_bytes: u64,
    /// Retain per-chunk timings and the full event log.
    pub record_timeline: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            per_chunk_overhead_s: 200e-6,
            per_chunk_wire_bytes: 16 * 1024,
            record_timeline: false,
        }
    }
}

impl SimOptions {
    pub fn recorded() -> Self {
        SimOptions {
            record_timeline: true,
            ..Default::default()
        }
    }

    pub fn zero_overhead() -> Self {
        SimOptions {
            per_chunk_overhead_s: 0.0,
            per_chunk_wire_bytes: 0,
            record_timeline: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChunkTiming {
    pub layer: usize,
    pub seq: usize,
    pub bytes: u64,
    pub admit_time: f64,
    pub finish_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimEvent {
    pub t_s: f64,
    pub kind: String,
    pub layer: usize,
    pub seq: Option<usize>,
    pub worker: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IterationTimeline {
    pub iteration: u64,
    pub start: f64,
    pub end: f64,
    pub iteration_time: f64,
    /// Worker-0 per-layer (start, end) spans.
    pub fp_spans: Vec<(f64, f64)>,
    pub bp_spans: Vec<(f64, f64)>,
    /// Worker-0 chunk admit/finish times for this iteration's gradients.
    pub chunks: Vec<ChunkTiming>,
    /// Fraction of worker-0 communication time overlapped with computation.
    pub overlap_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub start_iter: u64,
    pub n_workers: usize,
    pub batch_size: u32,
    pub iteration_times: Vec<f64>,
    pub timelines: Vec<IterationTimeline>,
    pub events: Vec<SimEvent>,
}

impl SimResult {
    /// Aggregate training speed in samples/s over the iteration range.
    pub fn mean_speed(&self, range: std::ops::Range<usize>) -> f64 {
        let times = &self.iteration_times[range];
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        self.n_workers as f64 * self.batch_size as f64 / mean
    }

    pub fn per_worker_speed(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        let times = &self.iteration_times[range];
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        vec![self.batch_size as f64 / mean; self.n_workers]
    }

    pub fn write_event_log(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut w, ev)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Runtime feature bundle measured over one 10-iteration group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuntimeMetrics {
    pub s_p: u64,
    pub s_c: u32,
    pub n: usize,
    pub l: usize,
    pub model_embedding: Vec<f64>,
    pub arch_embedding: Vec<f64>,
    /// Window-average download rate per worker, Gbps.
    pub b_down: Vec<f64>,
    /// Window-average upload rate per worker, Gbps.
    pub b_up: Vec<f64>,
    /// l x n layer-wise BP compute times, seconds.
    pub t: Vec<Vec<f64>>,
    /// Per-layer parameter bytes.
    pub layer_bytes: Vec<u64>,
    /// Window-average per-worker training speed, samples/s.
    pub v: Vec<f64>,
}

/// Assembles the runtime-metrics bundle for a group of iterations whose
/// simulated durations are `iter_times` and which starts at absolute
/// iteration `group_start`.
pub fn collect_metrics(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    trace: &BandwidthTrace,
    config: &SchedulerConfig,
    group_start: u64,
    iter_times: &[f64],
) -> RuntimeMetrics {
    assert!(!iter_times.is_empty());
    let n = cluster.n_workers;
    let l = profile.n_layers();
    let mean_time = iter_times.iter().sum::<f64>() / iter_times.len() as f64;
    let mut b_up = vec![0.0; n];
    let mut b_down = vec![0.0; n];
    for k in 0..iter_times.len() {
        for w in 0..n {
            let (up, down) = bandwidth_at(trace, group_start + k as u64, w);
            b_up[w] += up;
            b_down[w] += down;
        }
    }
    for w in 0..n {
        b_up[w] /= iter_times.len() as f64;
        b_down[w] /= iter_times.len() as f64;
    }
    let t = (0..l)
        .map(|i| {
            (0..n)
                .map(|w| profile.layers[i].bp_time * cluster.compute_scale[w])
                .collect()
        })
        .collect();
    RuntimeMetrics {
        s_p: config.partition_bytes,
        s_c: config.credit_multiplier,
        n,
        l,
        model_embedding: profile.model_embedding.clone(),
        arch_embedding: cluster.arch_embedding.clone(),
        b_down,
        b_up,
        t,
        layer_bytes: profile.layers.iter().map(|l| l.param_bytes).collect(),
        v: vec![profile.batch_size as f64 / mean_time; n],
    }
}

// ---------------------------------------------------------------------------
// Event-driven engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Payload {
    /// Earliest possible completion of the current transfer set.
    TransferDue,
    /// A chunk's fixed scheduling latency elapsed; it starts occupying
    /// link bandwidth.
    OverheadDone { bytes: u64 },
    BpFinish,
    FpFinish,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    t: f64,
    /// Equal-time processing order: chunk events, then BP, then FP.
    rank: u8,
    layer: usize,
    seq: usize,
    worker: usize,
    gen: u64,
    payload: Payload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.rank.cmp(&other.rank))
            .then(self.layer.cmp(&other.layer))
            .then(self.seq.cmp(&other.seq))
            .then(self.worker.cmp(&other.worker))
    }
}

#[derive(Debug, Clone)]
struct Transfer {
    layer: usize,
    seq: usize,
    rem: f64,
}

#[derive(Debug, Clone, Default)]
struct Link {
    /// Ready chunks keyed (layer asc, seq asc).
    ready: BinaryHeap<std::cmp::Reverse<(usize, usize)>>,
    transfers: Vec<Transfer>,
    in_flight: usize,
    last_t: f64,
    /// Effective link rate in bytes/s for the current comm iteration.
    rate: f64,
    gen: u64,
    busy_since: f64,
}

impl Link {
    fn advance(&mut self, now: f64) {
        if now > self.last_t && !self.transfers.is_empty() {
            let share = self.rate * (now - self.last_t) / self.transfers.len() as f64;
            for tr in &mut self.transfers {
                tr.rem -= share;
            }
        }
        self.last_t = now;
    }
}

#[derive(Debug, Clone)]
struct WorkerState {
    fp_iter: usize,
    bp_iter: usize,
    /// FP layer waiting for its parameters to arrive.
    blocked_fp: Option<usize>,
    link: Link,
    /// Open worker-0 chunk timings: ((layer, seq), index into rec.chunks).
    open_chunks: Vec<((usize, usize), usize)>,
}

#[derive(Debug, Clone)]
struct CommState {
    /// Local iteration whose gradients are (or were last) in flight.
    iter: i64,
    remaining: Vec<usize>,
    /// Workers that have not yet emitted this layer's chunks.
    pending_emit: Vec<usize>,
    done: Vec<Option<f64>>,
}

/// Per-iteration raw recording for worker 0.
#[derive(Debug, Clone, Default)]
struct IterRec {
    fp_spans: Vec<(f64, f64)>,
    bp_spans: Vec<(f64, f64)>,
    chunks: Vec<ChunkTiming>,
    comm_busy: Vec<(f64, f64)>,
}

pub struct Simulator {
    profile: ModelProfile,
    cluster: ClusterSpec,
    config: SchedulerConfig,
    trace: BandwidthTrace,
    opts: SimOptions,
    start_iter: u64,
    /// 1 when the cluster and trace are homogeneous, else n_workers.
    n_sim: usize,
    factor: f64,
    template: Vec<Vec<u64>>,
    heap: BinaryHeap<std::cmp::Reverse<Event>>,
    workers: Vec<WorkerState>,
    comm: CommState,
    /// gates[k] = start time of iteration k's FP layer 0.
    gates: Vec<f64>,
    target: usize,
    pending_fp0: Option<usize>,
    recs: Vec<IterRec>,
    events: Vec<SimEvent>,
}

impl Simulator {
    pub fn new(
        profile: &ModelProfile,
        cluster: &ClusterSpec,
        config: SchedulerConfig,
        trace: &BandwidthTrace,
        start_iter: u64,
        opts: SimOptions,
    ) -> Result<Self> {
        profile.validate()?;
        cluster.validate()?;
        config.validate()?;
        trace.validate(cluster.n_workers)?;
        let uniform_trace = trace.segments.iter().all(|s| {
            [&s.up_gbps, &s.down_gbps]
                .iter()
                .all(|v| v.len() == 1 || v.iter().all(|&b| b == v[0]))
        });
        let n_sim = if cluster.is_homogeneous() && uniform_trace {
            1
        } else {
            cluster.n_workers
        };
        let factor = cluster.architecture.comm_factor(cluster.n_workers);
        let template = chunk_template(profile, &config);
        let l = profile.n_layers();
        let mut sim = Simulator {
            profile: profile.clone(),
            cluster: cluster.clone(),
            config,
            trace: trace.clone(),
            opts,
            start_iter,
            n_sim,
            factor,
            template,
            heap: BinaryHeap::new(),
            workers: (0..n_sim)
                .map(|_| WorkerState {
                    fp_iter: 0,
                    bp_iter: 0,
                    blocked_fp: None,
                    link: Link::default(),
                    open_chunks: Vec::new(),
                })
                .collect(),
            comm: CommState {
                iter: -1,
                remaining: vec![0; l],
                pending_emit: vec![0; l],
                done: vec![None; l],
            },
            gates: vec![0.0],
            target: 0,
            pending_fp0: None,
            recs: Vec::new(),
            events: Vec::new(),
        };
        if sim.config.scheduling_enabled {
            for w in 0..n_sim {
                sim.schedule_fp(w, 0, 0, 0.0);
            }
        }
        Ok(sim)
    }

    pub fn current_iteration(&self) -> u64 {
        self.start_iter + (self.gates.len() as u64 - 1)
    }

    /// Switches the tunable pair for iterations that have not started yet.
    /// Must be called on a drained pipeline (after `drain`): queued chunks
    /// index into the current template and cannot survive a switch.
    pub fn set_config(&mut self, config: SchedulerConfig) -> Result<()> {
        config.validate()?;
        if config.scheduling_enabled != self.config.scheduling_enabled {
            return Err(Error::InvalidConfig(
                "cannot toggle scheduling_enabled mid-run".into(),
            ));
        }
        self.config = config;
        self.template = chunk_template(&self.profile, &self.config);
        Ok(())
    }

    pub fn run_iters(&mut self, n: usize) -> Result<()> {
        self.target += n;
        if !self.config.scheduling_enabled {
            self.run_baseline();
            return Ok(());
        }
        if let Some(k) = self.pending_fp0.take() {
            let gate = self.gates[k];
            self.schedule_all_fp0(k, gate);
        }
        while self.gates.len() < self.target + 1 {
            let ev = match self.heap.pop() {
                Some(std::cmp::Reverse(ev)) => ev,
                None => {
                    return Err(Error::Validation(
                        "simulation stalled: event queue empty before target iteration".into(),
                    ))
                }
            };
            self.dispatch(ev);
        }
        Ok(())
    }

    /// Processes residual communication events after the last requested
    /// iteration gate, so that final timelines are complete.
    pub fn drain(&mut self) {
        while let Some(std::cmp::Reverse(ev)) = self.heap.pop() {
            self.dispatch(ev);
        }
    }

    pub fn result(&self) -> SimResult {
        let n_done = self.gates.len() - 1;
        let iteration_times: Vec<f64> = (0..n_done)
            .map(|k| self.gates[k + 1] - self.gates[k])
            .collect();
        let mut timelines = Vec::with_capacity(n_done);
        for k in 0..n_done {
            let rec = self.recs.get(k).cloned().unwrap_or_default();
            let compute: Vec<(f64, f64)> = rec
                .fp_spans
                .iter()
                .chain(rec.bp_spans.iter())
                .copied()
                .collect();
            let comm_total: f64 = rec.comm_busy.iter().map(|(a, b)| b - a).sum();
            let overlap = if comm_total > 0.0 {
                let mut ov = 0.0;
                for &(a, b) in &rec.comm_busy {
                    for &(c, d) in &compute {
                        let lo = a.max(c);
                        let hi = b.min(d);
                        if hi > lo {
                            ov += hi - lo;
                        }
                    }
                }
                ov / comm_total
            } else {
                0.0
            };
            timelines.push(IterationTimeline {
                iteration: self.start_iter + k as u64,
                start: self.gates[k],
                end: self.gates[k + 1],
                iteration_time: self.gates[k + 1] - self.gates[k],
                fp_spans: rec.fp_spans,
                bp_spans: rec.bp_spans,
                chunks: rec.chunks,
                overlap_fraction: overlap,
            });
        }
        SimResult {
            start_iter: self.start_iter,
            n_workers: self.cluster.n_workers,
            batch_size: self.profile.batch_size,
            iteration_times,
            timelines,
            events: self.events.clone(),
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    // -- baseline ----------------------------------------------------------

    fn run_baseline(&mut self) {
        let l = self.profile.n_layers();
        while self.gates.len() < self.target + 1 {
            let k = self.gates.len() - 1;
            let abs = self.start_iter + k as u64;
            let start = self.gates[k];
            let mut worst = 0.0f64;
            for w in 0..self.cluster.n_workers {
                let scale = self.cluster.compute_scale[w];
                let (up, down) = bandwidth_at(&self.trace, abs, w);
                let rate = up.min(down) / 8.0 * 1e9;
                let fp: f64 = self.profile.total_fp_time() * scale;
                let bp: f64 = self.profile.total_bp_time() * scale;
                let comm = self.profile.total_param_bytes() as f64 * self.factor / rate;
                worst = worst.max(fp + bp + comm);
            }
            self.gates.push(start + worst);
            if self.opts.record_timeline {
                let scale = self.cluster.compute_scale[0];
                let mut t = start;
                let mut rec = IterRec::default();
                for i in 0..l {
                    let d = self.profile.layers[i].fp_time * scale;
                    rec.fp_spans.push((t, t + d));
                    t += d;
                }
                for i in (0..l).rev() {
                    let d = self.profile.layers[i].bp_time * scale;
                    rec.bp_spans.push((t, t + d));
                    t += d;
                }
                rec.bp_spans.reverse();
                let (up, down) = bandwidth_at(&self.trace, abs, 0);
                let rate = up.min(down) / 8.0 * 1e9;
                let mut ct = t;
                for i in 0..l {
                    let d = self.profile.layers[i].param_bytes as f64 * self.factor / rate;
                    rec.chunks.push(ChunkTiming {
                        layer: i,
                        seq: 0,
                        bytes: self.profile.layers[i].param_bytes,
                        admit_time: ct,
                        finish_time: ct + d,
                    });
                    ct += d;
                }
                rec.comm_busy.push((t, ct));
                self.ensure_rec(k).fp_spans = rec.fp_spans;
                let r = self.ensure_rec(k);
                r.bp_spans = rec.bp_spans;
                r.chunks = rec.chunks;
                r.comm_busy = rec.comm_busy;
            }
        }
    }

    // -- event machinery ---------------------------------------------------

    fn ensure_rec(&mut self, iter: usize) -> &mut IterRec {
        while self.recs.len() <= iter {
            self.recs.push(IterRec::default());
        }
        &mut self.recs[iter]
    }

    fn log(&mut self, t: f64, kind: &str, layer: usize, seq: Option<usize>, worker: usize) {
        if self.opts.record_timeline {
            self.events.push(SimEvent {
                t_s: t,
                kind: kind.to_string(),
                layer,
                seq,
                worker,
            });
        }
    }

    fn schedule_fp(&mut self, w: usize, iter: usize, layer: usize, now: f64) {
        let dur = self.profile.layers[layer].fp_time * self.cluster.compute_scale[w];
        self.workers[w].fp_iter = iter;
        self.log(now, "fp_start", layer, None, w);
        self.heap.push(std::cmp::Reverse(Event {
            t: now + dur,
            rank: 3,
            layer,
            seq: 0,
            worker: w,
            gen: 0,
            payload: Payload::FpFinish,
        }));
    }

    fn schedule_bp(&mut self, w: usize, layer: usize, now: f64) {
        let dur = self.profile.layers[layer].bp_time * self.cluster.compute_scale[w];
        self.heap.push(std::cmp::Reverse(Event {
            t: now + dur,
            rank: 2,
            layer,
            seq: 0,
            worker: w,
            gen: 0,
            payload: Payload::BpFinish,
        }));
    }

    fn schedule_all_fp0(&mut self, iter: usize, gate: f64) {
        for w in 0..self.n_sim {
            self.workers[w].blocked_fp = None;
            self.schedule_fp(w, iter, 0, gate);
        }
    }

    fn gate_open(&self, fp_iter: usize, layer: usize) -> bool {
        if fp_iter == 0 {
            return true;
        }
        let prev = (fp_iter - 1) as i64;
        match self.comm.iter.cmp(&prev) {
            Ordering::Greater => true,
            Ordering::Equal => self.comm.done[layer].is_some(),
            Ordering::Less => false,
        }
    }

    fn dispatch(&mut self, ev: Event) {
        match ev.payload {
            Payload::FpFinish => self.on_fp_finish(ev),
            Payload::BpFinish => self.on_bp_finish(ev),
            Payload::OverheadDone { bytes } => self.on_overhead_done(ev, bytes),
            Payload::TransferDue => self.on_transfer_due(ev),
        }
    }

    fn on_fp_finish(&mut self, ev: Event) {
        let w = ev.worker;
        let i = ev.layer;
        let t = ev.t;
        let iter = self.workers[w].fp_iter;
        let dur = self.profile.layers[i].fp_time * self.cluster.compute_scale[w];
        if w == 0 && self.opts.record_timeline {
            self.ensure_rec(iter).fp_spans.push((t - dur, t));
        }
        self.log(t, "fp_finish", i, None, w);
        let l = self.profile.n_layers();
        if i + 1 < l {
            if self.gate_open(iter, i + 1) {
                self.schedule_fp(w, iter, i + 1, t);
            } else {
                self.workers[w].blocked_fp = Some(i + 1);
            }
        } else {
            self.workers[w].bp_iter = iter;
            self.schedule_bp(w, l - 1, t);
        }
    }

    fn on_bp_finish(&mut self, ev: Event) {
        let w = ev.worker;
        let i = ev.layer;
        let t = ev.t;
        let iter = self.workers[w].bp_iter;
        let dur = self.profile.layers[i].bp_time * self.cluster.compute_scale[w];
        if w == 0 && self.opts.record_timeline {
            self.ensure_rec(iter).bp_spans.push((t - dur, t));
        }
        self.log(t, "bp_finish", i, None, w);
        self.init_comm_if_needed(iter, t);
        // Emit this layer's chunks into the worker's ready queue.
        for seq in 0..self.template[i].len() {
            self.workers[w].link.ready.push(std::cmp::Reverse((i, seq)));
        }
        self.comm.pending_emit[i] -= 1;
        self.try_admit(w, t);
        self.check_layer_done(i, t);
        if i > 0 {
            self.schedule_bp(w, i - 1, t);
        }
    }

    fn init_comm_if_needed(&mut self, iter: usize, now: f64) {
        if self.comm.iter == iter as i64 {
            return;
        }
        debug_assert!(self.comm.iter < iter as i64);
        debug_assert!(self.comm.done.iter().all(|d| d.is_some()) || self.comm.iter < 0);
        let l = self.profile.n_layers();
        self.comm.iter = iter as i64;
        self.comm.remaining = self.template.iter().map(|c| c.len() * self.n_sim).collect();
        self.comm.pending_emit = vec![self.n_sim; l];
        self.comm.done = vec![None; l];
        let abs = self.start_iter + iter as u64;
        for w in 0..self.n_sim {
            let (up, down) = bandwidth_at(&self.trace, abs, w);
            let link = &mut self.workers[w].link;
            debug_assert!(link.transfers.is_empty() && link.in_flight == 0);
            link.last_t = now;
            link.rate = up.min(down) / 8.0 * 1e9;
        }
    }

    fn try_admit(&mut self, w: usize, now: f64) {
        let credit = self.config.credit_multiplier as usize;
        loop {
            let link = &mut self.workers[w].link;
            if link.in_flight >= credit {
                break;
            }
            let (layer, seq) = match link.ready.pop() {
                Some(std::cmp::Reverse(key)) => key,
                None => break,
            };
            if link.in_flight == 0 {
                link.busy_since = now;
            }
            link.in_flight += 1;
            let bytes = self.template[layer][seq];
            if w == 0 && self.opts.record_timeline {
                let iter = self.comm.iter as usize;
                let idx = {
                    let rec = self.ensure_rec(iter);
                    rec.chunks.push(ChunkTiming {
                        layer,
                        seq,
                        bytes,
                        admit_time: now,
                        finish_time: f64::NAN,
                    });
                    rec.chunks.len() - 1
                };
                self.workers[w].open_chunks.push(((layer, seq), idx));
            }
            self.log(now, "chunk_admit", layer, Some(seq), w);
            let o = self.opts.per_chunk_overhead_s;
            if o > 0.0 {
                self.heap.push(std::cmp::Reverse(Event {
                    t: now + o,
                    rank: 1,
                    layer,
                    seq,
                    worker: w,
                    gen: 0,
                    payload: Payload::OverheadDone { bytes },
                }));
            } else {
                self.insert_transfer(w, now, layer, seq, bytes);
            }
        }
    }

    fn effective_bytes(&self, bytes: u64) -> f64 {
        ((bytes + self.opts.per_chunk_wire_bytes) as f64 * self.factor).max(EPS_BYTES)
    }

    fn insert_transfer(&mut self, w: usize, now: f64, layer: usize, seq: usize, bytes: u64) {
        let rem = self.effective_bytes(bytes);
        let link = &mut self.workers[w].link;
        link.advance(now);
        link.transfers.push(Transfer { layer, seq, rem });
        self.reschedule_link(w, now);
    }

    fn reschedule_link(&mut self, w: usize, now: f64) {
        let link = &mut self.workers[w].link;
        link.gen += 1;
        if link.transfers.is_empty() {
            return;
        }
        let mut best = 0;
        for (i, tr) in link.transfers.iter().enumerate() {
            let b = &link.transfers[best];
            if (tr.rem, tr.layer, tr.seq) < (b.rem, b.layer, b.seq) {
                best = i;
            }
        }
        let tr = &link.transfers[best];
        let due = now + tr.rem * link.transfers.len() as f64 / link.rate;
        let (layer, seq, gen) = (tr.layer, tr.seq, link.gen);
        self.heap.push(std::cmp::Reverse(Event {
            t: due,
            rank: 0,
            layer,
            seq,
            worker: w,
            gen,
            payload: Payload::TransferDue,
        }));
    }

    fn on_overhead_done(&mut self, ev: Event, bytes: u64) {
        self.insert_transfer(ev.worker, ev.t, ev.layer, ev.seq, bytes);
    }

    fn on_transfer_due(&mut self, ev: Event) {
        let w = ev.worker;
        if ev.gen != self.workers[w].link.gen {
            return;
        }
        let now = ev.t;
        self.workers[w].link.advance(now);
        let mut completed: Vec<(usize, usize)> = Vec::new();
        self.workers[w].link.transfers.retain(|tr| {
            if tr.rem <= EPS_BYTES {
                completed.push((tr.layer, tr.seq));
                false
            } else {
                true
            }
        });
        if completed.is_empty() && !self.workers[w].link.transfers.is_empty() {
            // The due event targeted the minimum-remaining transfer; when the
            // drain interval underflows f64 resolution the residual never
            // reaches zero, so complete that transfer directly.
            let link = &mut self.workers[w].link;
            let idx = (0..link.transfers.len())
                .min_by(|&a, &b| {
                    let ta = &link.transfers[a];
                    let tb = &link.transfers[b];
                    (ta.rem, ta.layer, ta.seq)
                        .partial_cmp(&(tb.rem, tb.layer, tb.seq))
                        .unwrap()
                })
                .unwrap();
            let tr = link.transfers.swap_remove(idx);
            completed.push((tr.layer, tr.seq));
        }
        completed.sort_unstable();
        for &(layer, seq) in &completed {
            let link = &mut self.workers[w].link;
            link.in_flight -= 1;
            if link.in_flight == 0 && w == 0 && self.opts.record_timeline {
                let since = link.busy_since;
                let iter = self.comm.iter as usize;
                self.ensure_rec(iter).comm_busy.push((since, now));
            }
            if w == 0 && self.opts.record_timeline {
                if let Some(pos) = self.workers[w]
                    .open_chunks
                    .iter()
                    .position(|&(key, _)| key == (layer, seq))
                {
                    let (_, idx) = self.workers[w].open_chunks.swap_remove(pos);
                    let iter = self.comm.iter as usize;
                    self.recs[iter].chunks[idx].finish_time = now;
                }
            }
            self.log(now, "chunk_finish", layer, Some(seq), w);
            self.comm.remaining[layer] -= 1;
        }
        self.try_admit(w, now);
        self.reschedule_link(w, now);
        for &(layer, _) in &completed {
            self.check_layer_done(layer, now);
        }
    }

    fn check_layer_done(&mut self, layer: usize, now: f64) {
        if self.comm.remaining[layer] != 0
            || self.comm.pending_emit[layer] != 0
            || self.comm.done[layer].is_some()
        {
            return;
        }
        self.comm.done[layer] = Some(now);
        let next_iter = (self.comm.iter + 1) as usize;
        // Unblock FP layers waiting on these parameters.
        for w in 0..self.n_sim {
            if self.workers[w].blocked_fp == Some(layer) && self.workers[w].fp_iter == next_iter {
                self.workers[w].blocked_fp = None;
                self.schedule_fp(w, next_iter, layer, now);
            }
        }
        if layer == 0 {
            debug_assert_eq!(self.gates.len(), next_iter);
            self.gates.push(now);
            if next_iter < self.target {
                self.schedule_all_fp0(next_iter, now);
            } else {
                self.pending_fp0 = Some(next_iter);
            }
        }
    }
}

fn chunk_template(profile: &ModelProfile, config: &SchedulerConfig) -> Vec<Vec<u64>> {
    partition_tensors(profile, config)
        .into_iter()
        .map(|chunks| chunks.into_iter().map(|c| c.bytes).collect())
        .collect()
}

/// Runs `n_iters` iterations from scratch and returns the result. The
/// first simulated iteration is a cold start; measurement windows should
/// begin after a 1-iteration warm-up.
pub fn simulate_iterations(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    config: SchedulerConfig,
    trace: &BandwidthTrace,
    n_iters: usize,
    start_iter: u64,
    opts: SimOptions,
) -> Result<SimResult> {
    if n_iters < 1 {
        return Err(Error::Validation("n_iters must be >= 1".into()));
    }
    let mut sim = Simulator::new(profile, cluster, config, trace, start_iter, opts)?;
    sim.run_iters(n_iters)?;
    sim.drain();
    Ok(sim.result())
}
