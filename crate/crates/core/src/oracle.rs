//! Brute-force scheduling oracle for tiny instances.
//!
//! Independently re-simulates the iteration pipeline under a *forced*
//! chunk-admission ranking and enumerates every ranking (≤ 6 chunks, so at
//! most 720 permutations). Every realized admission order of any
//! work-conserving policy is reproduced by some ranking, so the minimum over
//! rankings is the minimum over credit-admissible schedules. Orders that
//! never admit a chunk while one with a strictly smaller (layer, seq) key is
//! waiting are the priority-admissible subset.
//!
//! The implementation here deliberately shares no machinery with the main
//! event-driven engine: it is scan-based, re-derives partitioning, and keeps
//! its own pipeline state.

use crate::simcore::{SchedulerConfig, SimOptions};
use crate::workload::{Architecture, ModelProfile};
use crate::{Error, Result};

use rand::Rng;

#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub profile: ModelProfile,
    pub n_workers: usize,
    pub architecture: Architecture,
    pub gbps: f64,
    pub config: SchedulerConfig,
    pub opts: SimOptions,
}

#[derive(Debug, Clone)]
pub struct OracleOutcome {
    /// Minimum steady-state iteration time over priority-admissible orders.
    pub best_admissible: f64,
    /// Minimum over all credit-admissible orders, priorities ignored.
    pub best_any: f64,
    /// A ranking achieving `best_admissible`, as (layer, seq) pairs.
    pub best_ranking: Vec<(usize, usize)>,
    /// Number of distinct rankings evaluated.
    pub n_rankings: usize,
}

/// Chunk list re-derived independently of `partition_tensors`.
fn chunk_list(inst: &OracleInstance) -> Vec<(usize, usize, u64)> {
    let mut chunks = Vec::new();
    for layer in &inst.profile.layers {
        let b = layer.param_bytes;
        if b == 0 {
            continue;
        }
        let sp = if inst.config.scheduling_enabled {
            inst.config.partition_bytes
        } else {
            u64::MAX
        };
        let mut off = 0u64;
        let mut seq = 0usize;
        while off < b {
            let sz = sp.min(b - off);
            chunks.push((layer.index, seq, sz));
            off += sz;
            seq += 1;
        }
    }
    chunks
}

const WARMUP_ITERS: usize = 4;

/// Steady-state iteration time under a forced admission ranking.
/// `ranking[i]` is the preference position of chunk i (lower = earlier).
/// Also reports whether the realized order was priority-admissible.
fn forced_steady_time(inst: &OracleInstance, chunks: &[(usize, usize, u64)], order: &[usize]) -> (f64, bool) {
    let l = inst.profile.n_layers();
    let factor = inst.architecture.comm_factor(inst.n_workers);
    let rate = inst.gbps / 8.0 * 1e9; // bytes/s
    let o = inst.opts.per_chunk_overhead_s;
    let wire = inst.opts.per_chunk_wire_bytes;
    let credit = inst.config.credit_multiplier as usize;
    let eff = |bytes: u64| ((bytes + wire) as f64 * factor).max(1e-9);

    #[derive(Clone, Copy, PartialEq)]
    enum Compute {
        Fp(usize, usize),      // (iter, layer)
        Bp(usize, usize),
        Idle,
    }

    let mut gates = vec![0.0f64];
    let mut compute = Compute::Fp(0, 0);
    let mut compute_end = inst.profile.layers[0].fp_time;
    let mut blocked: Option<(usize, usize)> = None; // FP (iter, layer) awaiting params

    // Communication state for the current comm iteration.
    let mut comm_iter: i64 = -1;
    let mut ready: Vec<usize> = Vec::new(); // chunk ids
    let mut latency: Vec<(usize, f64)> = Vec::new(); // (chunk, wire-start time)
    let mut inflight: Vec<(usize, f64)> = Vec::new(); // (chunk, eff bytes left)
    let mut last_drain = 0.0f64;
    let mut layer_left: Vec<usize> = vec![0; l];
    let mut bp_left = 0usize; // BP layers not yet finished this comm iteration
    let mut comm_done: Vec<Option<f64>> = vec![None; l];
    let mut admissible = true;

    let target = WARMUP_ITERS + 1;
    let mut guard = 0usize;
    while gates.len() <= target {
        guard += 1;
        assert!(guard < 100_000, "oracle failed to converge");

        // Next event time: compute finish, latency maturation, or drain.
        let mut next = f64::INFINITY;
        if compute != Compute::Idle {
            next = next.min(compute_end);
        }
        for &(_, due) in &latency {
            next = next.min(due);
        }
        if !inflight.is_empty() {
            let min_rem = inflight.iter().map(|&(_, r)| r).fold(f64::INFINITY, f64::min);
            next = next.min(last_drain + min_rem * inflight.len() as f64 / rate);
        }
        assert!(next.is_finite(), "oracle deadlocked");
        // Drain processor-shared transfers up to `next`.
        if !inflight.is_empty() {
            let share = rate * (next - last_drain) / inflight.len() as f64;
            for tr in &mut inflight {
                tr.1 -= share;
            }
        }
        last_drain = next;
        let t = next;

        // 1. Transfer completions.
        let mut finished: Vec<usize> = inflight
            .iter()
            .filter(|&&(_, r)| r <= 1e-4)
            .map(|&(c, _)| c)
            .collect();
        finished.sort_unstable_by_key(|&c| (chunks[c].0, chunks[c].1));
        inflight.retain(|&(_, r)| r > 1e-4);
        for &c in &finished {
            layer_left[chunks[c].0] -= 1;
        }

        // 2. Latency phases ending: chunk starts consuming bandwidth.
        let mut matured: Vec<usize> = Vec::new();
        latency.retain(|&(c, due)| {
            if due <= t + 1e-15 {
                matured.push(c);
                false
            } else {
                true
            }
        });
        matured.sort_unstable_by_key(|&c| (chunks[c].0, chunks[c].1));
        for c in matured {
            inflight.push((c, eff(chunks[c].2)));
        }

        // 3. Compute completion.
        if compute != Compute::Idle && compute_end <= t + 1e-15 {
            match compute {
                Compute::Fp(iter, i) => {
                    if i + 1 < l {
                        let gate_ok = iter == 0
                            || comm_iter > (iter - 1) as i64
                            || (comm_iter == (iter - 1) as i64 && comm_done[i + 1].is_some());
                        if gate_ok {
                            compute = Compute::Fp(iter, i + 1);
                            compute_end = t + inst.profile.layers[i + 1].fp_time;
                        } else {
                            compute = Compute::Idle;
                            blocked = Some((iter, i + 1));
                        }
                    } else {
                        compute = Compute::Bp(iter, l - 1);
                        compute_end = t + inst.profile.layers[l - 1].bp_time;
                    }
                }
                Compute::Bp(iter, i) => {
                    if comm_iter != iter as i64 {
                        comm_iter = iter as i64;
                        comm_done = vec![None; l];
                        bp_left = l;
                        for (idx, layer) in inst.profile.layers.iter().enumerate() {
                            layer_left[idx] = chunks
                                .iter()
                                .filter(|&&(li, _, _)| li == layer.index)
                                .count();
                        }
                    }
                    for (c, &(li, _, _)) in chunks.iter().enumerate() {
                        if li == i {
                            ready.push(c);
                        }
                    }
                    bp_left -= 1;
                    if i > 0 {
                        compute = Compute::Bp(iter, i - 1);
                        compute_end = t + inst.profile.layers[i - 1].bp_time;
                    } else {
                        compute = Compute::Idle;
                    }
                }
                Compute::Idle => unreachable!(),
            }
        }

        // 4. Work-conserving admission under the forced ranking.
        while inflight.len() + latency.len() < credit && !ready.is_empty() {
            let pick = *ready.iter().min_by_key(|&&c| order[c]).unwrap();
            if ready
                .iter()
                .any(|&c| (chunks[c].0, chunks[c].1) < (chunks[pick].0, chunks[pick].1))
            {
                admissible = false;
            }
            ready.retain(|&c| c != pick);
            if o > 0.0 {
                latency.push((pick, t + o));
            } else {
                inflight.push((pick, eff(chunks[pick].2)));
            }
        }

        // 5. Newly completed comm layers.
        if comm_iter >= 0 {
            for i in 0..l {
                let emitted = bp_left <= i; // BP descends l-1..0, so layer i has
                                            // emitted once bp_left ≤ i
                if comm_done[i].is_none() && emitted && layer_left[i] == 0 {
                    comm_done[i] = Some(t);
                    if let Some((iter, bl)) = blocked {
                        if bl == i && iter as i64 == comm_iter + 1 {
                            blocked = None;
                            compute = Compute::Fp(iter, i);
                            compute_end = t + inst.profile.layers[i].fp_time;
                        }
                    }
                    if i == 0 {
                        gates.push(t);
                        let next_iter = (comm_iter + 1) as usize;
                        if gates.len() <= target && compute == Compute::Idle && blocked.is_none() {
                            compute = Compute::Fp(next_iter, 0);
                            compute_end = t + inst.profile.layers[0].fp_time;
                        }
                    }
                }
            }
        }
    }
    (gates[target] - gates[target - 1], admissible)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for sub in permutations(n - 1) {
        for pos in 0..=sub.len() {
            let mut p = sub.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Exhaustive enumeration of forced admission orders for a tiny instance.
pub fn brute_force(inst: &OracleInstance) -> Result<OracleOutcome> {
    inst.config.validate()?;
    inst.profile.validate()?;
    let chunks = chunk_list(inst);
    if chunks.len() > 6 || inst.profile.n_layers() > 3 {
        return Err(Error::Validation(format!(
            "oracle limited to <=3 layers and <=6 chunks, got {} layers / {} chunks",
            inst.profile.n_layers(),
            chunks.len()
        )));
    }
    if chunks.is_empty() {
        return Err(Error::Validation("oracle instance has no chunks".into()));
    }
    let mut best_admissible = f64::INFINITY;
    let mut best_any = f64::INFINITY;
    let mut best_ranking = Vec::new();
    let perms = permutations(chunks.len());
    let n_rankings = perms.len();
    for perm in perms {
        // perm[pos] = chunk id at preference position pos; invert.
        let mut order = vec![0usize; chunks.len()];
        for (pos, &c) in perm.iter().enumerate() {
            order[c] = pos;
        }
        let (time, admissible) = forced_steady_time(inst, &chunks, &order);
        if time < best_any {
            best_any = time;
        }
        if admissible && time < best_admissible {
            best_admissible = time;
            best_ranking = perm.iter().map(|&c| (chunks[c].0, chunks[c].1)).collect();
        }
    }
    Ok(OracleOutcome {
        best_admissible,
        best_any,
        best_ranking,
        n_rankings,
    })
}

/// Steady-state iteration time of the main engine on the same instance.
pub fn engine_steady_time(inst: &OracleInstance) -> Result<f64> {
    use crate::simcore::simulate_iterations;
    use crate::workload::{BandwidthTrace, ClusterSpec};
    let cluster = ClusterSpec::homogeneous(inst.n_workers, inst.architecture);
    let trace = BandwidthTrace::constant(inst.gbps);
    let mut opts = inst.opts;
    opts.record_timeline = false;
    let res = simulate_iterations(
        &inst.profile,
        &cluster,
        inst.config,
        &trace,
        WARMUP_ITERS + 1,
        0,
        opts,
    )?;
    Ok(res.iteration_times[WARMUP_ITERS])
}

/// Samples a random tiny instance suitable for `brute_force`.
pub fn random_instance(rng: &mut impl Rng) -> OracleInstance {
    use crate::workload::{embedding_for_name, LayerSpec};
    let n_layers = rng.gen_range(1..=3usize);
    let sp: u64 = 64 * 1024 << rng.gen_range(0..3);
    // Distribute at most 6 chunks over the layers.
    let mut counts = vec![1usize; n_layers];
    let mut extra = rng.gen_range(0..=(6 - n_layers));
    while extra > 0 {
        let i = rng.gen_range(0..n_layers);
        counts[i] += 1;
        extra -= 1;
    }
    let layers = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let jitter = rng.gen_range(0..sp / 2);
            LayerSpec {
                index: i,
                param_bytes: c as u64 * sp - jitter,
                fp_time: rng.gen_range(0.1e-3..3e-3),
                bp_time: rng.gen_range(0.1e-3..3e-3),
            }
        })
        .collect();
    let architecture = if rng.gen_bool(0.5) {
        Architecture::ParameterServer
    } else {
        Architecture::RingAllReduce
    };
    OracleInstance {
        profile: ModelProfile {
            name: "oracle".into(),
            batch_size: 32,
            layers,
            model_embedding: embedding_for_name("oracle"),
        },
        n_workers: rng.gen_range(2..=8),
        architecture,
        gbps: rng.gen_range(1.0..20.0),
        config: SchedulerConfig::new(sp, rng.gen_range(1..=4)),
        opts: SimOptions {
            per_chunk_overhead_s: *[0.0, 50e-6, 200e-6].get(rng.gen_range(0..3)).unwrap(),
            per_chunk_wire_bytes: if rng.gen_bool(0.5) { 0 } else { 8 * 1024 },
            record_timeline: false,
        },
    }
}
