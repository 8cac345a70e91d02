//! Configuration-search strategies over the ⟨partition size, credit⟩ grid:
//! exhaustive grid search, one-shot Bayesian optimization, and single-
//! inference candidate ranking with the trained speed predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metanet::{forward, FeatureVector, MetaNetParams};
use crate::simcore::{RuntimeMetrics, SchedulerConfig, MIN_PARTITION_BYTES};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Partition sizes in bytes, ascending.
    pub partition_grid: Vec<u64>,
    /// Credit multipliers, ascending.
    pub credit_grid: Vec<u32>,
}

impl Default for SearchSpace {
    /// 4 KB … 1024 MB in powers of two × credits 1..16.
    fn default() -> Self {
        SearchSpace {
            partition_grid: (12..=30).map(|e| 1u64 << e).collect(),
            credit_grid: (1..=16).collect(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.partition_grid.is_empty() || self.credit_grid.is_empty() {
            return Err(Error::Validation("empty search space".into()));
        }
        if !self.partition_grid.windows(2).all(|w| w[0] < w[1])
            || !self.credit_grid.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::Validation("search grids must be strictly ascending".into()));
        }
        for &sp in &self.partition_grid {
            if sp < MIN_PARTITION_BYTES {
                return Err(Error::Validation(format!("partition size {} below minimum", sp)));
            }
        }
        for &sc in &self.credit_grid {
            SchedulerConfig::new(self.partition_grid[0], sc).validate()?;
        }
        Ok(())
    }

    /// Grid points in canonical order (S_p ascending, then S_c ascending),
    /// which is also the tie-break preference order.
    pub fn points(&self) -> Vec<SchedulerConfig> {
        self.partition_grid
            .iter()
            .flat_map(|&sp| self.credit_grid.iter().map(move |&sc| SchedulerConfig::new(sp, sc)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.partition_grid.len() * self.credit_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub config: SchedulerConfig,
    pub speed: f64,
    pub cost_iterations: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunerReport {
    pub best_config: SchedulerConfig,
    pub best_speed: f64,
    pub evaluations: Vec<Evaluation>,
    pub total_cost_iterations: u64,
}

impl TunerReport {
    fn from_evaluations(evaluations: Vec<Evaluation>) -> Self {
        let mut best = 0usize;
        for (i, ev) in evaluations.iter().enumerate() {
            if ev.speed > evaluations[best].speed {
                best = i;
            } else if ev.speed == evaluations[best].speed {
                let a = (ev.config.partition_bytes, ev.config.credit_multiplier);
                let b = (
                    evaluations[best].config.partition_bytes,
                    evaluations[best].config.credit_multiplier,
                );
                if a < b {
                    best = i;
                }
            }
        }
        TunerReport {
            best_config: evaluations[best].config,
            best_speed: evaluations[best].speed,
            total_cost_iterations: evaluations.iter().map(|e| e.cost_iterations).sum(),
            evaluations,
        }
    }
}

/// An evaluator maps a candidate config to (measured speed, cost in
/// simulated iterations). It must be deterministic for reports to be
/// reproducible.
pub trait Evaluator: Sync {
    fn evaluate(&self, config: &SchedulerConfig) -> Result<(f64, u64)>;
}

impl<F> Evaluator for F
where
    F: Fn(&SchedulerConfig) -> Result<(f64, u64)> + Sync,
{
    fn evaluate(&self, config: &SchedulerConfig) -> Result<(f64, u64)> {
        self(config)
    }
}

/// Exhaustive evaluation of every grid point; evaluations run in parallel
/// but the report order is the canonical grid order.
pub fn grid_search(space: &SearchSpace, evaluator: &dyn Evaluator) -> Result<TunerReport> {
    space.validate()?;
    let points = space.points();
    let evaluations: Vec<Evaluation> = points
        .par_iter()
        .map(|cfg| {
            let (speed, cost) = evaluator.evaluate(cfg).map_err(|e| Error::Evaluator {
                config: cfg.to_string(),
                message: e.to_string(),
            })?;
            Ok(Evaluation {
                config: *cfg,
                speed,
                cost_iterations: cost,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TunerReport::from_evaluations(evaluations))
}

fn norm_cdf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26 erf approximation, |error| < 1.5e-7.
    let z = x / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * z.abs());
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-z * z).exp();
    let erf = if z >= 0.0 { erf } else { -erf };
    0.5 * (1.0 + erf)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// In-place Cholesky factorization; None when the matrix is not positive
/// definite.
fn cholesky(a: &mut [f64], n: usize) -> Option<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                a[i * n + j] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    Some(())
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    // Solve L Lᵀ x = b.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

const GP_LENGTH_SCALE: f64 = 0.25;

fn gp_features(cfg: &SchedulerConfig) -> [f64; 2] {
    [
        ((cfg.partition_bytes as f64).log2() - 12.0) / 18.0,
        (cfg.credit_multiplier as f64 - 1.0) / 15.0,
    ]
}

fn se_kernel(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    (-d2 / (2.0 * GP_LENGTH_SCALE * GP_LENGTH_SCALE)).exp()
}

/// Gaussian-process Bayesian optimization with expected-improvement
/// acquisition: 3 seeded random initial points, then budget − 3
/// acquisitions over the remaining grid.
pub fn bayes_opt(
    space: &SearchSpace,
    evaluator: &dyn Evaluator,
    budget: usize,
    seed: u64,
) -> Result<TunerReport> {
    space.validate()?;
    if budget < 3 {
        return Err(Error::Validation("bayes_opt budget must be >= 3".into()));
    }
    let points = space.points();
    let budget = budget.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observed_idx: Vec<usize> = Vec::new();
    let mut evaluations: Vec<Evaluation> = Vec::new();

    let eval_point = |idx: usize, evals: &mut Vec<Evaluation>| -> Result<f64> {
        let cfg = points[idx];
        let (speed, cost) = evaluator.evaluate(&cfg).map_err(|e| Error::Evaluator {
            config: cfg.to_string(),
            message: e.to_string(),
        })?;
        evals.push(Evaluation {
            config: cfg,
            speed,
            cost_iterations: cost,
        });
        Ok(speed)
    };

    // Random initialization.
    while observed_idx.len() < 3.min(budget) {
        let idx = rng.gen_range(0..points.len());
        if observed_idx.contains(&idx) {
            continue;
        }
        observed_idx.push(idx);
        eval_point(idx, &mut evaluations)?;
    }

    while evaluations.len() < budget {
        let ys: Vec<f64> = evaluations.iter().map(|e| e.speed).collect();
        let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = y_max - y_min;
        let next_idx = if range <= 1e-12 * y_max.abs().max(1.0) {
            // Degenerate observations: fall back to random sampling.
            random_unobserved(&mut rng, points.len(), &observed_idx)
        } else {
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            let yn: Vec<f64> = ys.iter().map(|y| (y - mean) / range).collect();
            let m = observed_idx.len();
            let noise = 0.01f64.powi(2) + 1e-8;
            let mut k = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    let a = gp_features(&points[observed_idx[i]]);
                    let b = gp_features(&points[observed_idx[j]]);
                    k[i * m + j] = se_kernel(&a, &b) + if i == j { noise } else { 0.0 };
                }
            }
            if cholesky(&mut k, m).is_none() {
                random_unobserved(&mut rng, points.len(), &observed_idx)
            } else {
                let alpha = chol_solve(&k, m, &yn);
                let best_y = yn.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut best: Option<(f64, usize)> = None;
                for (idx, cfg) in points.iter().enumerate() {
                    if observed_idx.contains(&idx) {
                        continue;
                    }
                    let x = gp_features(cfg);
                    let ks: Vec<f64> = observed_idx
                        .iter()
                        .map(|&o| se_kernel(&x, &gp_features(&points[o])))
                        .collect();
                    let mu: f64 = ks.iter().zip(&alpha).map(|(a, b)| a * b).sum();
                    let v = chol_solve(&k, m, &ks);
                    let var = (1.0 + noise - ks.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()).max(1e-12);
                    let sd = var.sqrt();
                    let z = (mu - best_y) / sd;
                    let ei = (mu - best_y) * norm_cdf(z) + sd * norm_pdf(z);
                    let better = match &best {
                        None => true,
                        Some((b_ei, _)) => ei > *b_ei,
                    };
                    if better {
                        best = Some((ei, idx));
                    }
                }
                best.map(|(_, idx)| idx).unwrap_or_else(|| {
                    random_unobserved(&mut rng, points.len(), &observed_idx)
                })
            }
        };
        observed_idx.push(next_idx);
        eval_point(next_idx, &mut evaluations)?;
    }
    Ok(TunerReport::from_evaluations(evaluations))
}

fn random_unobserved(rng: &mut impl Rng, n: usize, observed: &[usize]) -> usize {
    loop {
        let idx = rng.gen_range(0..n);
        if !observed.contains(&idx) {
            return idx;
        }
    }
}

/// Scores every candidate with one predictor inference each (no simulation)
/// and returns the argmax of the mean predicted per-worker speed, the
/// winning score, and all candidate scores in canonical grid order.
pub fn meta_select(
    params: &MetaNetParams,
    metrics: &RuntimeMetrics,
    space: &SearchSpace,
) -> Result<(SchedulerConfig, f64, Vec<(SchedulerConfig, f64)>)> {
    space.validate()?;
    let points = space.points();
    let scores: Vec<(SchedulerConfig, f64)> = points
        .par_iter()
        .map(|cfg| {
            let f = FeatureVector::from_metrics(metrics, cfg);
            let v = forward(params, &f)?;
            Ok((*cfg, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0usize;
    for (i, (_, s)) in scores.iter().enumerate() {
        if *s > scores[best].1 {
            best = i;
        }
    }
    Ok((scores[best].0, scores[best].1, scores))
}
