//! Ensembles, simulator-versus-solver error, and gelation diagnostics.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CoagError, Result};
use crate::flory::{build_grid_from_states, solve, FloryTrajectory, GridSpec, SolverConfig};
use crate::kernels::{ConservedQuantity, KernelSpec};
use crate::simulator::{
    replica_seed, run, ParticleSystem, SnapshotPlan, StopRules, SystemOptions, Trajectory,
};
use crate::state::{bl_distance, ClusterState, DiscreteMeasure, TestFunction};

#[derive(Debug, Clone)]
pub enum InitialCondition {
    /// `N` i.i.d. draws from a probability measure.
    Iid(DiscreteMeasure),
    /// `round(w N)` copies of each support state.
    Counts(DiscreteMeasure),
}

impl InitialCondition {
    pub fn build(
        &self,
        kernel: Arc<KernelSpec>,
        n: u64,
        seed: u64,
        opts: SystemOptions,
    ) -> Result<ParticleSystem> {
        match self {
            InitialCondition::Iid(mu) => ParticleSystem::init_iid(kernel, mu, n, seed, opts),
            InitialCondition::Counts(mu) => {
                let counts: Vec<(ClusterState, u64)> = mu
                    .iter()
                    .map(|(x, w)| (x.clone(), (w * n as f64).round() as u64))
                    .collect();
                ParticleSystem::init_counts(kernel, &counts, n, seed, opts)
            }
        }
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        match self {
            InitialCondition::Iid(mu) | InitialCondition::Counts(mu) => mu,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub kernel: Arc<KernelSpec>,
    pub init: InitialCondition,
    pub n_values: Vec<u64>,
    pub replicas: usize,
    pub base_seed: u64,
    pub t_end: f64,
    pub plan: SnapshotPlan,
    pub stop: StopRules,
    pub options: SystemOptions,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoagError::InvalidParameter(
                "n_values must be non-empty and strictly increasing".into(),
            ));
        }
        if self.n_values[0] == 0 {
            return Err(CoagError::InvalidParameter("N must be at least 1".into()));
        }
        if self.replicas == 0 {
            return Err(CoagError::InvalidParameter("replicas must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReplicaResult {
    pub n: u64,
    pub replica: usize,
    pub seed: u64,
    /// A failed replica keeps its error message; the ensemble continues.
    pub outcome: std::result::Result<Trajectory, String>,
}

#[derive(Debug, Clone)]
pub struct EnsembleResults {
    /// Sorted by `(n, replica)`.
    pub entries: Vec<ReplicaResult>,
}

impl EnsembleResults {
    pub fn for_n(&self, n: u64) -> impl Iterator<Item = &ReplicaResult> {
        self.entries.iter().filter(move |e| e.n == n)
    }

    pub fn n_values(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.entries.iter().map(|e| e.n).collect();
        v.dedup();
        v
    }
}

pub fn run_replica(cfg: &EnsembleConfig, n: u64, replica: usize) -> ReplicaResult {
    let seed = replica_seed(cfg.base_seed, n, replica as u64);
    let outcome = cfg
        .init
        .build(cfg.kernel.clone(), n, seed, cfg.options.clone())
        .and_then(|mut sys| run(&mut sys, cfg.t_end, &cfg.plan, &cfg.stop))
        .map_err(|e| e.to_string());
    ReplicaResult {
        n,
        replica,
        seed,
        outcome,
    }
}

/// Runs every `(N, replica)` pair in parallel; the result order does not
/// depend on scheduling.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleResults> {
    cfg.validate()?;
    let jobs: Vec<(u64, usize)> = cfg
        .n_values
        .iter()
        .flat_map(|n| (0..cfg.replicas).map(move |r| (*n, r)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|(n, r)| run_replica(cfg, *n, *r))
        .collect();
    Ok(EnsembleResults { entries })
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Sample quantile with linear interpolation between order statistics
/// (`(n - 1) p` positions).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Least-squares slope of `ln y` against `ln x`. `None` with fewer than two
/// points or non-positive values.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let s = sxy / sxx;
    s.is_finite().then_some(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n: u64,
    pub time: f64,
    pub replicas: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub family: Vec<String>,
    pub rows: Vec<ConvergenceRow>,
    /// `(time, slope)` of median error against `N` on log-log axes.
    pub slopes: Vec<(f64, Option<f64>)>,
    pub failed_replicas: usize,
}

impl ConvergenceReport {
    pub fn median_at(&self, n: u64, time: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n && r.time == time).map(|r| r.median)
    }

    pub fn slope_at(&self, time: f64) -> Option<f64> {
        self.slopes.iter().find(|(t, _)| *t == time).and_then(|(_, s)| *s)
    }
}

/// Distance between each replica's snapshot measures and the solver
/// solution at the same times, summarised per `(N, time)`.
pub fn lln_report(
    results: &EnsembleResults,
    flory: &FloryTrajectory,
    fs: &[TestFunction],
) -> Result<ConvergenceReport> {
    if fs.is_empty() {
        return Err(CoagError::EmptyFamily);
    }
    let mut rows = Vec::new();
    let mut failed = 0;
    let mut times: Vec<f64> = Vec::new();
    for n in results.n_values() {
        let mut per_time: Vec<(f64, Vec<f64>)> = Vec::new();
        for entry in results.for_n(n) {
            let traj = match &entry.outcome {
                Ok(t) => t,
                Err(_) => {
                    failed += 1;
                    continue;
                }
            };
            for (k, snap) in traj.snapshots.iter().enumerate() {
                let measure = snap.measure.as_ref().ok_or_else(|| {
                    CoagError::InvalidParameter("snapshots need record_full_measure".into())
                })?;
                let target = flory.measure_at(snap.time)?;
                let d = bl_distance(measure, &target, fs)?;
                if per_time.len() <= k {
                    per_time.push((snap.time, Vec::new()));
                }
                per_time[k].1.push(d);
            }
        }
        for (time, ds) in per_time {
            if !times.contains(&time) {
                times.push(time);
            }
            rows.push(ConvergenceRow {
                n,
                time,
                replicas: ds.len(),
                median: median(&ds),
                q1: quantile(&ds, 0.25),
                q3: quantile(&ds, 0.75),
            });
        }
    }
    let slopes = times
        .iter()
        .map(|t| {
            let pts: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.time == *t).collect();
            let xs: Vec<f64> = pts.iter().map(|r| r.n as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|r| r.median).collect();
            (*t, loglog_slope(&xs, &ys))
        })
        .collect();
    Ok(ConvergenceReport {
        family: fs.iter().map(|f| f.name().to_string()).collect(),
        rows,
        slopes,
        failed_replicas: failed,
    })
}

/// First time the largest cluster holds at least `eps` of the total mass.
pub fn stochastic_gel_time(traj: &Trajectory, eps: f64) -> Result<Option<f64>> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CoagError::InvalidParameter(format!("eps must lie in (0, 1), got {eps}")));
    }
    Ok(traj
        .largest_record
        .iter()
        .find(|(_, m)| m / traj.total_mass >= eps)
        .map(|(t, _)| *t))
}

/// Earlier of the first stored time with gel mass above `1e-6 <m, u0>` and
/// the first with `m2` above the threshold.
pub fn deterministic_gel_onset(traj: &FloryTrajectory, m2_threshold: f64) -> Result<Option<f64>> {
    if !(m2_threshold > 0.0) {
        return Err(CoagError::InvalidParameter("m2 threshold must be positive".into()));
    }
    let mass_tol = 1e-6 * traj.initial_mass;
    Ok(traj
        .times
        .iter()
        .enumerate()
        .find(|(k, _)| traj.gel_mass[*k] > mass_tol || traj.m2[*k] > m2_threshold)
        .map(|(_, t)| *t))
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct WindowDiff {
    pub m0: f64,
    pub m1: f64,
    pub weights: f64,
}

impl WindowDiff {
    pub fn max(&self) -> f64 {
        self.m0.max(self.m1).max(self.weights)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscrepancyReport {
    pub split_time: f64,
    /// Sup differences over `t <= split_time`.
    pub pre: WindowDiff,
    /// Sup differences over `t > split_time`.
    pub post: WindowDiff,
    pub phi_symmetric: bool,
    #[serde(skip)]
    pub flory: FloryTrajectory,
    #[serde(skip)]
    pub smoluchowski: FloryTrajectory,
}

/// Solves with `phi` and with `phi == 0` on the same states and compares
/// moments (every step) and weights (record times) before and after
/// `split_time`.
pub fn flory_vs_smoluchowski(
    kernel: &KernelSpec,
    phi: &ConservedQuantity,
    u0: &[f64],
    states: &[ClusterState],
    cfg: &SolverConfig,
    split_time: f64,
) -> Result<DiscrepancyReport> {
    let with_phi = build_grid_from_states(states.to_vec(), kernel, phi)?;
    let without = build_grid_from_states(states.to_vec(), kernel, &ConservedQuantity::zero())?;
    discrepancy_on_grids(&with_phi, &without, u0, cfg, split_time)
}

pub fn discrepancy_on_grids(
    with_phi: &GridSpec,
    without: &GridSpec,
    u0: &[f64],
    cfg: &SolverConfig,
    split_time: f64,
) -> Result<DiscrepancyReport> {
    let flory = solve(u0, with_phi, cfg)?;
    let smol = solve(u0, without, cfg)?;
    let mut pre = WindowDiff::default();
    let mut post = WindowDiff::default();
    for k in 0..flory.times.len() {
        let w = if flory.times[k] <= split_time { &mut pre } else { &mut post };
        w.m0 = w.m0.max((flory.m0[k] - smol.m0[k]).abs());
        w.m1 = w.m1.max((flory.m1[k] - smol.m1[k]).abs());
    }
    for k in 0..flory.record_times.len() {
        let w = if flory.record_times[k] <= split_time { &mut pre } else { &mut post };
        let d = flory.weights[k]
            .iter()
            .zip(&smol.weights[k])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        w.weights = w.weights.max(d);
    }
    Ok(DiscrepancyReport {
        split_time,
        pre,
        post,
        phi_symmetric: with_phi.phi_symmetric(),
        flory,
        smoluchowski: smol,
    })
}
