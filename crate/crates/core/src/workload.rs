//! Model profiles, cluster specifications and bandwidth traces.
//!
//! Everything here is immutable after load and safe to share read-only
//! across threads.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dimension of the model-type and architecture-type embedding vectors.
pub const EMBED_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// 0-based position; layer 0 is the front layer, executed first in FP.
    pub index: usize,
    pub param_bytes: u64,
    /// Forward-pass compute time in seconds for an unscaled worker.
    pub fp_time: f64,
    /// Backward-pass compute time in seconds for an unscaled worker.
    pub bp_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub batch_size: u32,
    pub layers: Vec<LayerSpec>,
    /// Fixed-length model-type embedding. Derived deterministically from
    /// the name when the profile file does not carry one.
    pub model_embedding: Vec<f64>,
}

impl ModelProfile {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_param_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.param_bytes).sum()
    }

    pub fn total_fp_time(&self) -> f64 {
        self.layers.iter().map(|l| l.fp_time).sum()
    }

    pub fn total_bp_time(&self) -> f64 {
        self.layers.iter().map(|l| l.bp_time).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation(format!(
                "profile {} has no layers",
                self.name
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.index != i {
                return Err(Error::Validation(format!(
                    "profile {}: layer indices must be contiguous 0..l-1, found {} at position {}",
                    self.name, layer.index, i
                )));
            }
            if layer.fp_time < 0.0 || layer.bp_time < 0.0 {
                return Err(Error::Validation(format!(
                    "profile {}: negative compute time at layer {}",
                    self.name, i
                )));
            }
            if !layer.fp_time.is_finite() || !layer.bp_time.is_finite() {
                return Err(Error::Validation(format!(
                    "profile {}: non-finite compute time at layer {}",
                    self.name, i
                )));
            }
        }
        if self.total_param_bytes() == 0 {
            return Err(Error::Validation(format!(
                "profile {}: total parameter bytes must be > 0",
                self.name
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation(format!(
                "profile {}: batch_size must be positive",
                self.name
            )));
        }
        if self.model_embedding.len() != EMBED_DIM {
            return Err(Error::Validation(format!(
                "profile {}: model_embedding must have length {}",
                self.name, EMBED_DIM
            )));
        }
        Ok(())
    }
}

/// Deterministic embedding vector for a model or architecture name.
/// Profiles that do not ship an explicit embedding get one derived from
/// their name so that equal names always map to equal vectors.
pub fn embedding_for_name(name: &str) -> Vec<f64> {
    let mut seed = [0u8; 32];
    for (i, b) in name.bytes().enumerate() {
        seed[i % 32] ^= b.wrapping_mul(31).wrapping_add(i as u8);
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    ParameterServer,
    RingAllReduce,
}

impl Architecture {
    /// Per-worker traffic multiplier on the tensor bytes: push then pull
    /// for PS, and the bandwidth-optimal 2(n-1)/n for a ring.
    pub fn comm_factor(self, n_workers: usize) -> f64 {
        match self {
            Architecture::ParameterServer => 2.0,
            Architecture::RingAllReduce => 2.0 * (n_workers as f64 - 1.0) / n_workers as f64,
        }
    }

    pub fn embedding(self) -> Vec<f64> {
        let mut v = vec![0.0; EMBED_DIM];
        match self {
            Architecture::ParameterServer => v[0] = 1.0,
            Architecture::RingAllReduce => v[1] = 1.0,
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub n_workers: usize,
    pub architecture: Architecture,
    /// Per-worker multiplier applied to fp/bp compute times.
    pub compute_scale: Vec<f64>,
    pub arch_embedding: Vec<f64>,
}

impl ClusterSpec {
    pub fn homogeneous(n_workers: usize, architecture: Architecture) -> Self {
        ClusterSpec {
            n_workers,
            architecture,
            compute_scale: vec![1.0; n_workers],
            arch_embedding: architecture.embedding(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 {
            return Err(Error::Validation("n_workers must be >= 1".into()));
        }
        if self.compute_scale.len() != self.n_workers {
            return Err(Error::Validation(format!(
                "compute_scale must have length n_workers ({})",
                self.n_workers
            )));
        }
        if self.compute_scale.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Validation(
                "compute_scale entries must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn is_homogeneous(&self) -> bool {
        self.compute_scale
            .iter()
            .all(|&s| s == self.compute_scale[0])
    }
}

/// A competing training job: it occupies a fair share of the link once
/// its initialization completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub arrive_iter: u64,
    pub init_iters: u64,
}

/// One piecewise-constant segment of per-worker bandwidth. Vectors of
/// length 1 broadcast to every worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSegment {
    pub start_iteration: u64,
    pub up_gbps: Vec<f64>,
    pub down_gbps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthTrace {
    pub segments: Vec<TraceSegment>,
    #[serde(default)]
    pub jobs: Vec<JobSpec>,
}

impl BandwidthTrace {
    pub fn constant(gbps: f64) -> Self {
        BandwidthTrace {
            segments: vec![TraceSegment {
                start_iteration: 0,
                up_gbps: vec![gbps],
                down_gbps: vec![gbps],
            }],
            jobs: Vec::new(),
        }
    }

    pub fn validate(&self, n_workers: usize) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Validation("trace has no segments".into()));
        }
        if self.segments[0].start_iteration != 0 {
            return Err(Error::Validation(
                "first trace segment must start at iteration 0".into(),
            ));
        }
        let mut prev = None;
        for seg in &self.segments {
            if let Some(p) = prev {
                if seg.start_iteration <= p {
                    return Err(Error::Validation(
                        "segment start_iterations must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(seg.start_iteration);
            for v in [&seg.up_gbps, &seg.down_gbps] {
                if v.len() != 1 && v.len() != n_workers {
                    return Err(Error::Validation(format!(
                        "segment bandwidth vectors must have length 1 or {}",
                        n_workers
                    )));
                }
                if v.iter().any(|&b| b <= 0.0 || !b.is_finite()) {
                    return Err(Error::Validation(
                        "all bandwidth values must be > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of jobs sharing the link at `iteration`, including the
    /// measured job itself. A competing job becomes active once its
    /// initialization completes.
    pub fn active_jobs(&self, iteration: u64) -> usize {
        1 + self
            .jobs
            .iter()
            .filter(|j| iteration >= j.arrive_iter + j.init_iters)
            .count()
    }

    fn segment_at(&self, iteration: u64) -> &TraceSegment {
        // Last segment whose start <= iteration; the last segment extends
        // indefinitely once the trace is exhausted.
        let idx = match self
            .segments
            .binary_search_by_key(&iteration, |s| s.start_iteration)
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        &self.segments[idx]
    }
}

fn broadcast(v: &[f64], worker: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[worker]
    }
}

/// Bandwidth available to the measured job for `worker` at `iteration`,
/// as `(up_gbps, down_gbps)`. The raw segment capacity is divided by the
/// max-min fair share over jobs active at that iteration.
pub fn bandwidth_at(trace: &BandwidthTrace, iteration: u64, worker: usize) -> (f64, f64) {
    let seg = trace.segment_at(iteration);
    let share = trace.active_jobs(iteration) as f64;
    (
        broadcast(&seg.up_gbps, worker) / share,
        broadcast(&seg.down_gbps, worker) / share,
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })
}

/// On-disk profile schema; times are in milliseconds.
#[derive(Debug, Serialize, Deserialize)]
struct ProfileFile {
    name: String,
    batch_size: u32,
    layers: Vec<ProfileLayer>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_embedding: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileLayer {
    param_bytes: u64,
    fp_time_ms: f64,
    bp_time_ms: f64,
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<ModelProfile> {
    let file: ProfileFile = read_json(path.as_ref())?;
    let embedding = file
        .model_embedding
        .unwrap_or_else(|| embedding_for_name(&file.name));
    let profile = ModelProfile {
        name: file.name,
        batch_size: file.batch_size,
        layers: file
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| LayerSpec {
                index: i,
                param_bytes: l.param_bytes,
                fp_time: l.fp_time_ms / 1e3,
                bp_time: l.bp_time_ms / 1e3,
            })
            .collect(),
        model_embedding: embedding,
    };
    profile.validate()?;
    Ok(profile)
}

pub fn serialize_profile(profile: &ModelProfile) -> String {
    let file = ProfileFile {
        name: profile.name.clone(),
        batch_size: profile.batch_size,
        layers: profile
            .layers
            .iter()
            .map(|l| ProfileLayer {
                param_bytes: l.param_bytes,
                fp_time_ms: l.fp_time * 1e3,
                bp_time_ms: l.bp_time * 1e3,
            })
            .collect(),
        model_embedding: Some(profile.model_embedding.clone()),
    };
    serde_json::to_string_pretty(&file).expect("profile serialization cannot fail")
}

pub fn load_trace(path: impl AsRef<Path>, n_workers: usize) -> Result<BandwidthTrace> {
    let trace: BandwidthTrace = read_json(path.as_ref())?;
    trace.validate(n_workers)?;
    Ok(trace)
}

pub fn serialize_trace(trace: &BandwidthTrace) -> String {
    serde_json::to_string_pretty(trace).expect("trace serialization cannot fail")
}

/// On-disk cluster schema; the architecture embedding is derived, and a
/// missing compute_scale means a homogeneous cluster.
#[derive(Debug, Serialize, Deserialize)]
struct ClusterFile {
    n_workers: usize,
    architecture: Architecture,
    #[serde(skip_serializing_if = "Option::is_none")]
    compute_scale: Option<Vec<f64>>,
}

pub fn load_cluster(path: impl AsRef<Path>) -> Result<ClusterSpec> {
    let file: ClusterFile = read_json(path.as_ref())?;
    let cluster = ClusterSpec {
        n_workers: file.n_workers,
        compute_scale: file
            .compute_scale
            .unwrap_or_else(|| vec![1.0; file.n_workers]),
        arch_embedding: file.architecture.embedding(),
        architecture: file.architecture,
    };
    cluster.validate()?;
    Ok(cluster)
}

pub fn serialize_cluster(cluster: &ClusterSpec) -> String {
    let file = ClusterFile {
        n_workers: cluster.n_workers,
        architecture: cluster.architecture,
        compute_scale: Some(cluster.compute_scale.clone()),
    };
    serde_json::to_string_pretty(&file).expect("cluster serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_profile_maps_fields() {
        let f = write_tmp(
            r#"{"name":"toy","batch_size":32,"layers":[
                {"param_bytes":8388608,"fp_time_ms":2.0,"bp_time_ms":3.0},
                {"param_bytes":2097152,"fp_time_ms":1.0,"bp_time_ms":1.0}]}"#,
        );
        let p = load_profile(f.path()).unwrap();
        assert_eq!(p.n_layers(), 2);
        assert_eq!(p.total_param_bytes(), 10 * 1024 * 1024);
        assert_eq!(p.layers[0].fp_time, 2.0e-3);
        assert_eq!(p.layers[1].bp_time, 1.0e-3);
    }

    #[test]
    fn empty_profile_rejected() {
        let f = write_tmp(r#"{"name":"empty","batch_size":32,"layers":[]}"#);
        assert!(matches!(load_profile(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn negative_time_rejected() {
        let f = write_tmp(
            r#"{"name":"bad","batch_size":32,"layers":[
                {"param_bytes":1024,"fp_time_ms":-1.0,"bp_time_ms":1.0}]}"#,
        );
        assert!(matches!(load_profile(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn profile_round_trip_is_identical() {
        let f = write_tmp(
            r#"{"name":"toy","batch_size":16,"layers":[
                {"param_bytes":1000,"fp_time_ms":1.5,"bp_time_ms":2.5},
                {"param_bytes":2000,"fp_time_ms":0.5,"bp_time_ms":0.25}]}"#,
        );
        let p = load_profile(f.path()).unwrap();
        let g = write_tmp(&serialize_profile(&p));
        let q = load_profile(g.path()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn bandwidth_segment_lookup() {
        let trace = BandwidthTrace {
            segments: vec![
                TraceSegment {
                    start_iteration: 0,
                    up_gbps: vec![10.0],
                    down_gbps: vec![10.0],
                },
                TraceSegment {
                    start_iteration: 20,
                    up_gbps: vec![3.0],
                    down_gbps: vec![3.0],
                },
            ],
            jobs: Vec::new(),
        };
        assert_eq!(bandwidth_at(&trace, 19, 0), (10.0, 10.0));
        // Boundary is inclusive of the new segment.
        assert_eq!(bandwidth_at(&trace, 20, 0), (3.0, 3.0));
        // Trace exhaustion extends the last segment.
        assert_eq!(bandwidth_at(&trace, 10_000, 0), (3.0, 3.0));
    }

    #[test]
    fn fair_share_with_competing_job() {
        let trace = BandwidthTrace {
            segments: vec![TraceSegment {
                start_iteration: 0,
                up_gbps: vec![20.0],
                down_gbps: vec![20.0],
            }],
            jobs: vec![JobSpec {
                arrive_iter: 5,
                init_iters: 15,
            }],
        };
        // Job initializes through iteration 19 and competes from 20 on.
        assert_eq!(bandwidth_at(&trace, 19, 0), (20.0, 20.0));
        assert_eq!(bandwidth_at(&trace, 20, 0), (10.0, 10.0));
        // Shares over all active jobs sum back to the segment capacity.
        let share = bandwidth_at(&trace, 20, 0).0;
        assert_eq!(share * trace.active_jobs(20) as f64, 20.0);
    }

    #[test]
    fn embedding_is_deterministic_per_name() {
        assert_eq!(embedding_for_name("resnet50"), embedding_for_name("resnet50"));
        assert_ne!(embedding_for_name("resnet50"), embedding_for_name("vgg16"));
        assert_eq!(embedding_for_name("resnet50").len(), EMBED_DIM);
    }

    #[test]
    fn ring_comm_factor() {
        assert_eq!(Architecture::RingAllReduce.comm_factor(4), 1.5);
        assert_eq!(Architecture::ParameterServer.comm_factor(4), 2.0);
    }
}
