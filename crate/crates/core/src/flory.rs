//! Fixed-step solver for the multi-type Flory equation on a truncated grid.
//!
//! For weights `u` over grid states,
//!
//! ```text
//! du_i/dt = 1/2 sum_{child(j,k) = i} kbar_jk u_j u_k - u_i sum_j kbar_ij u_j - g_i u_i
//! g_i     = sum_j phi_ji (u0_j - u_j)
//! ```
//!
//! With `phi == 0` this is the Smoluchowski equation. Merges whose child
//! lies beyond the grid send their mass to an overflow account.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{AbortReason, CoagError, Result};
use crate::kernels::{phi_value, ConservedQuantity, KernelSpec};
use crate::state::{ClusterState, DiscreteMeasure, StateKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildIndex {
    Grid(u32),
    Overflow,
}

#[derive(Debug, Clone, Copy)]
struct GainTerm {
    j: u32,
    k: u32,
    child: u32,
    coef: f64,
}

#[derive(Debug, Clone, Copy)]
struct OverflowTerm {
    j: u32,
    k: u32,
    coef: f64,
    mass: f64,
}

/// A finite grid of states with precomputed rate, phi and merge tables.
#[derive(Debug, Clone)]
pub struct GridSpec {
    states: Vec<ClusterState>,
    masses: Vec<f64>,
    kbar: Vec<f64>,
    phi: Option<Vec<f64>>,
    phi_symmetric: bool,
    /// Outcomes of each unordered pair `j <= k`, CSR over the pair id.
    pair_start: Vec<usize>,
    outcomes: Vec<(ChildIndex, f64)>,
    gain: Vec<GainTerm>,
    overflow: Vec<OverflowTerm>,
}

/// States `1..=max_mass`, crossed with `attribute_points` when given.
pub fn build_grid(
    max_mass: u64,
    attribute_points: Option<&[Vec<f64>]>,
    kernel: &KernelSpec,
    phi: &ConservedQuantity,
) -> Result<GridSpec> {
    if max_mass == 0 {
        return Err(CoagError::Grid("max mass must be at least 1".into()));
    }
    let mut states = Vec::new();
    for m in 1..=max_mass {
        match attribute_points {
            None => states.push(ClusterState::integer(m)),
            Some(points) => {
                for p in points {
                    states.push(ClusterState::integer(m).with_attributes(p.clone())?);
                }
            }
        }
    }
    build_grid_from_states(states, kernel, phi)
}

/// Grid over an explicit list of states, in the given order. A child whose
/// mass exceeds the largest grid mass goes to overflow; any other child must
/// be a grid state.
pub fn build_grid_from_states(
    states: Vec<ClusterState>,
    kernel: &KernelSpec,
    phi: &ConservedQuantity,
) -> Result<GridSpec> {
    let n = states.len();
    if n == 0 {
        return Err(CoagError::Grid("empty grid".into()));
    }
    if n > u32::MAX as usize {
        return Err(CoagError::Grid("grid too large".into()));
    }
    let mut lookup: HashMap<StateKey, u32> = HashMap::with_capacity(n);
    for (i, s) in states.iter().enumerate() {
        if lookup.insert(s.key(), i as u32).is_some() {
            return Err(CoagError::Grid(format!("duplicate grid state {s}")));
        }
    }
    let max_mass = states.iter().map(ClusterState::m).fold(0.0, f64::max);
    let masses: Vec<f64> = states.iter().map(ClusterState::m).collect();

    let mut kbar = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.kbar(&states[i], &states[j])?;
            kbar[i * n + j] = v;
            kbar[j * n + i] = v;
        }
    }

    let (phi_table, phi_symmetric) = if phi.is_zero() {
        (None, true)
    } else {
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let v = phi_value(phi, &states[i], &states[j]);
                if !v.is_finite() {
                    return Err(CoagError::Grid(format!(
                        "phi is not finite ({v}) at {} / {}",
                        states[i], states[j]
                    )));
                }
                t[i * n + j] = v;
            }
        }
        let sym = (0..n).all(|i| (0..i).all(|j| t[i * n + j] == t[j * n + i]));
        (Some(t), sym)
    };

    let mut pair_start = Vec::with_capacity(n * (n + 1) / 2 + 1);
    let mut outcomes = Vec::new();
    let mut gain = Vec::new();
    let mut overflow = Vec::new();
    for j in 0..n {
        for k in j..n {
            pair_start.push(outcomes.len());
            let rate = kbar[j * n + k];
            let half = if j == k { 0.5 } else { 1.0 };
            for (z, p) in kernel.offspring_outcomes(&states[j], &states[k])? {
                let child = if z.m() > max_mass {
                    ChildIndex::Overflow
                } else {
                    match lookup.get(&z.key()) {
                        Some(c) => ChildIndex::Grid(*c),
                        None => {
                            return Err(CoagError::Grid(format!(
                                "child {z} of {} / {} is not a grid state",
                                states[j], states[k]
                            )))
                        }
                    }
                };
                outcomes.push((child, p));
                let coef = rate * p * half;
                if coef == 0.0 {
                    continue;
                }
                match child {
                    ChildIndex::Grid(c) => gain.push(GainTerm {
                        j: j as u32,
                        k: k as u32,
                        child: c,
                        coef,
                    }),
                    ChildIndex::Overflow => overflow.push(OverflowTerm {
                        j: j as u32,
                        k: k as u32,
                        coef,
                        mass: z.m(),
                    }),
                }
            }
        }
    }
    pair_start.push(outcomes.len());

    Ok(GridSpec {
        states,
        masses,
        kbar,
        phi: phi_table,
        phi_symmetric,
        pair_start,
        outcomes,
        gain,
        overflow,
    })
}

impl GridSpec {
    pub fn states(&self) -> &[ClusterState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn kbar(&self, i: usize, j: usize) -> f64 {
        self.kbar[i * self.len() + j]
    }

    pub fn phi(&self, i: usize, j: usize) -> f64 {
        self.phi.as_ref().map_or(0.0, |t| t[i * self.len() + j])
    }

    pub fn has_phi(&self) -> bool {
        self.phi.is_some()
    }

    pub fn phi_symmetric(&self) -> bool {
        self.phi_symmetric
    }

    /// Offspring outcomes of the pair `(i, j)` with their probabilities.
    pub fn children(&self, i: usize, j: usize) -> &[(ChildIndex, f64)] {
        let p = self.pair_offset(i, j);
        &self.outcomes[self.pair_start[p]..self.pair_start[p + 1]]
    }

    /// The child of `(i, j)` for deterministic offspring laws.
    pub fn child_index(&self, i: usize, j: usize) -> ChildIndex {
        self.children(i, j)[0].0
    }

    fn pair_offset(&self, i: usize, j: usize) -> usize {
        let (a, b) = (i.min(j), i.max(j));
        let n = self.len();
        // Pairs (r, k) with r < a come first: sum_{r < a} (n - r).
        a * n - a * a.saturating_sub(1) / 2 + (b - a)
    }

    /// Grid weights of a measure supported on grid states.
    pub fn weights_of(&self, mu: &DiscreteMeasure) -> Result<Vec<f64>> {
        let lookup: HashMap<StateKey, usize> =
            self.states.iter().enumerate().map(|(i, s)| (s.key(), i)).collect();
        let mut w = vec![0.0; self.len()];
        for (x, v) in mu.iter() {
            match lookup.get(&x.key()) {
                Some(i) => w[*i] += v,
                None => return Err(CoagError::Grid(format!("{x} is not a grid state"))),
            }
        }
        Ok(w)
    }

    /// `sum_j phi_ji u0_j` for each `i`.
    pub fn phi_column_sums(&self, u0: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut c = vec![0.0; n];
        if let Some(t) = &self.phi {
            for (j, w) in u0.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                let row = &t[j * n..(j + 1) * n];
                for (ci, p) in c.iter_mut().zip(row) {
                    *ci += p * w;
                }
            }
        }
        c
    }

    pub fn moments(&self, u: &[f64]) -> [f64; 3] {
        let mut m = [0.0; 3];
        for (w, x) in u.iter().zip(&self.masses) {
            m[0] += w;
            m[1] += w * x;
            m[2] += w * x * x;
        }
        m
    }

    pub fn measure(&self, u: &[f64]) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(self.states.clone(), u.iter().map(|w| w.max(0.0)).collect())
    }
}

/// Rates of the scalar accumulators alongside `du`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FluxRates {
    /// Mass sent past the grid per unit time.
    pub overflow_mass: f64,
    /// Second moment of that mass, each child counted at its formation mass.
    pub overflow_m2: f64,
    /// `sum_{i,j} kbar_ij u_i u_j`, the total loss rate.
    pub loss: f64,
    pub min_g: f64,
}

#[derive(Debug, Clone)]
pub struct Rhs {
    pub du: Vec<f64>,
    pub g: Vec<f64>,
    pub flux: FluxRates,
}

fn rhs_into(u: &[f64], phi_col0: &[f64], grid: &GridSpec, du: &mut [f64], g: &mut [f64]) -> FluxRates {
    let n = grid.len();
    let mut loss_total = 0.0;
    for i in 0..n {
        let row = &grid.kbar[i * n..(i + 1) * n];
        let s: f64 = row.iter().zip(u).map(|(k, w)| k * w).sum();
        du[i] = -u[i] * s;
        loss_total += u[i] * s;
    }
    for t in &grid.gain {
        du[t.child as usize] += t.coef * u[t.j as usize] * u[t.k as usize];
    }
    let mut flux = FluxRates {
        loss: loss_total,
        ..FluxRates::default()
    };
    for t in &grid.overflow {
        let r = t.coef * u[t.j as usize] * u[t.k as usize];
        flux.overflow_mass += r * t.mass;
        flux.overflow_m2 += r * t.mass * t.mass;
    }
    if let Some(phi) = &grid.phi {
        g.copy_from_slice(phi_col0);
        for (j, w) in u.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let row = &phi[j * n..(j + 1) * n];
            for (gi, p) in g.iter_mut().zip(row) {
                *gi -= p * w;
            }
        }
        let mut min_g = f64::INFINITY;
        for i in 0..n {
            du[i] -= g[i] * u[i];
            min_g = min_g.min(g[i]);
        }
        flux.min_g = min_g;
    } else {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    flux
}

/// Right-hand side at `u` with initial weights `u0`.
pub fn rhs(u: &[f64], u0: &[f64], grid: &GridSpec) -> Result<Rhs> {
    let n = grid.len();
    if u.len() != n || u0.len() != n {
        return Err(CoagError::Grid(format!("weight vectors must have length {n}")));
    }
    let col0 = grid.phi_column_sums(u0);
    let mut du = vec![0.0; n];
    let mut g = vec![0.0; n];
    let flux = rhs_into(u, &col0, grid, &mut du, &mut g);
    Ok(Rhs { du, g, flux })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk4Fixed,
    /// Every step is also taken as two half steps; a component difference
    /// of 1e-8 or more aborts the run. The full-step result is kept.
    Rk4WithHalvingCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    ToGel,
    ReflectError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RecordPlan {
    /// Weights at these times (plus 0 and `t_end`).
    Times(Vec<f64>),
    /// Weights after every `k`-th step (plus 0 and `t_end`).
    EveryStep(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub dt: f64,
    pub method: Method,
    pub t_end: f64,
    pub positivity_clamp: f64,
    pub overflow_policy: OverflowPolicy,
    pub record: RecordPlan,
}

pub const HALVING_TOL: f64 = 1e-8;

impl SolverConfig {
    pub fn new(dt: f64, t_end: f64) -> Self {
        Self {
            dt,
            method: Method::Rk4Fixed,
            t_end,
            positivity_clamp: 1e-14,
            overflow_policy: OverflowPolicy::ToGel,
            record: RecordPlan::Times(Vec::new()),
        }
    }

    pub fn with_record(mut self, record: RecordPlan) -> Self {
        self.record = record;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(CoagError::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(CoagError::InvalidParameter(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        if !(self.positivity_clamp >= 0.0) {
            return Err(CoagError::InvalidParameter("positivity clamp must be >= 0".into()));
        }
        match &self.record {
            RecordPlan::Times(ts) => {
                if ts.iter().any(|t| !(*t >= 0.0 && *t <= self.t_end)) {
                    return Err(CoagError::InvalidParameter(
                        "record times must lie in [0, t_end]".into(),
                    ));
                }
                if ts.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(CoagError::InvalidParameter(
                        "record times must be strictly increasing".into(),
                    ));
                }
            }
            RecordPlan::EveryStep(0) => {
                return Err(CoagError::InvalidParameter("record stride must be >= 1".into()))
            }
            RecordPlan::EveryStep(_) => {}
        }
        Ok(())
    }
}

/// Solution on the grid: scalar series at every step, weights at the
/// recorded times.
#[derive(Debug, Clone, Serialize)]
pub struct FloryTrajectory {
    pub states: Vec<ClusterState>,
    pub times: Vec<f64>,
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    /// Second moment of mass sent to overflow, frozen at formation.
    pub reservoir_m2: Vec<f64>,
    /// `<m, u0> - <m, u_t>` on the grid; includes the overflow mass.
    pub gel_mass: Vec<f64>,
    /// Cumulative mass sent past the grid.
    pub overflow_mass: Vec<f64>,
    /// Cumulative `int sum_ij kbar_ij u_i u_j dt`.
    pub loss_integral: Vec<f64>,
    pub record_times: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub initial_mass: f64,
    /// Smallest `g_i` seen at any stage; `+inf` without a gel term.
    pub min_g: f64,
    pub phi_symmetric: bool,
    /// Largest clamped-away negative weight magnitude.
    pub max_clamped: f64,
}

impl FloryTrajectory {
    fn new(grid: &GridSpec, u0: &[f64]) -> Self {
        let [m0, m1, m2] = grid.moments(u0);
        Self {
            states: grid.states.clone(),
            times: vec![0.0],
            m0: vec![m0],
            m1: vec![m1],
            m2: vec![m2],
            reservoir_m2: vec![0.0],
            gel_mass: vec![0.0],
            overflow_mass: vec![0.0],
            loss_integral: vec![0.0],
            record_times: vec![0.0],
            weights: vec![u0.to_vec()],
            initial_mass: m1,
            min_g: f64::INFINITY,
            phi_symmetric: grid.phi_symmetric,
            max_clamped: 0.0,
        }
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("trajectory has t = 0")
    }

    fn check_range(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.end_time()) {
            return Err(CoagError::OutOfRange {
                t,
                start: 0.0,
                end: self.end_time(),
            });
        }
        Ok(())
    }

    fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
        let k = times.partition_point(|s| *s < t);
        if k < times.len() && times[k] == t {
            return values[k];
        }
        if k == 0 {
            return values[0];
        }
        if k >= times.len() {
            return values[times.len() - 1];
        }
        let (t0, t1) = (times[k - 1], times[k]);
        let a = (t - t0) / (t1 - t0);
        values[k - 1] + a * (values[k] - values[k - 1])
    }

    /// Linear interpolation of a per-step series.
    pub fn series_at(&self, series: &[f64], t: f64) -> Result<f64> {
        self.check_range(t)?;
        Ok(Self::interpolate(&self.times, series, t))
    }

    /// Weights at `t`, linearly interpolated between recorded times.
    pub fn weights_at(&self, t: f64) -> Result<Vec<f64>> {
        self.check_range(t)?;
        let k = self.record_times.partition_point(|s| *s < t);
        if k < self.record_times.len() && self.record_times[k] == t {
            return Ok(self.weights[k].clone());
        }
        if k == 0 || k >= self.record_times.len() {
            return Err(CoagError::OutOfRange {
                t,
                start: self.record_times[0],
                end: *self.record_times.last().unwrap(),
            });
        }
        let (t0, t1) = (self.record_times[k - 1], self.record_times[k]);
        let a = (t - t0) / (t1 - t0);
        Ok(self.weights[k - 1]
            .iter()
            .zip(&self.weights[k])
            .map(|(w0, w1)| w0 + a * (w1 - w0))
            .collect())
    }

    /// The solution measure `u_t` on the grid states.
    pub fn measure_at(&self, t: f64) -> Result<DiscreteMeasure> {
        let w = self.weights_at(t)?;
        DiscreteMeasure::new(self.states.clone(), w.into_iter().map(|v| v.max(0.0)).collect())
    }

    /// `sum_{m(x_i) < cutoff} m(x_i) u_i` at a recorded time.
    pub fn mass_below(&self, t: f64, cutoff: f64) -> Result<f64> {
        let w = self.weights_at(t)?;
        Ok(self
            .states
            .iter()
            .zip(&w)
            .filter(|(s, _)| s.m() < cutoff)
            .map(|(s, v)| s.m() * v)
            .sum())
    }
}

/// `<m, u0> - <m, u_t>`, linearly interpolated between steps.
pub fn gel_mass_at(traj: &FloryTrajectory, t: f64) -> Result<f64> {
    traj.series_at(&traj.gel_mass, t)
}

struct Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    g: Vec<f64>,
    col0: Vec<f64>,
}

/// Scalar accumulators integrated alongside the weights.
#[derive(Clone, Copy, Default)]
struct Acc {
    overflow: f64,
    m2: f64,
    loss: f64,
}

fn rk4_step(
    u: &[f64],
    h: f64,
    grid: &GridSpec,
    ws: &mut Workspace,
    out: &mut [f64],
    min_g: &mut f64,
) -> Acc {
    let n = u.len();
    let mut rates = [FluxRates::default(); 4];
    let stages = [0.0, 0.5, 0.5, 1.0];
    for s in 0..4 {
        if s == 0 {
            ws.tmp.copy_from_slice(u);
        } else {
            let (prev, _) = ws.k.split_at(s);
            let kp = &prev[s - 1];
            for i in 0..n {
                ws.tmp[i] = u[i] + stages[s] * h * kp[i];
            }
        }
        let (tmp, g, col0) = (&ws.tmp, &mut ws.g, &ws.col0);
        rates[s] = rhs_into(tmp, col0, grid, &mut ws.k[s], g);
        if grid.phi.is_some() {
            *min_g = min_g.min(rates[s].min_g);
        }
    }
    for i in 0..n {
        out[i] = u[i] + h / 6.0 * (ws.k[0][i] + 2.0 * ws.k[1][i] + 2.0 * ws.k[2][i] + ws.k[3][i]);
    }
    let comb = |f: fn(&FluxRates) -> f64| {
        h / 6.0 * (f(&rates[0]) + 2.0 * f(&rates[1]) + 2.0 * f(&rates[2]) + f(&rates[3]))
    };
    Acc {
        overflow: comb(|r| r.overflow_mass),
        m2: comb(|r| r.overflow_m2),
        loss: comb(|r| r.loss),
    }
}

fn abort(time: f64, reason: AbortReason, traj: FloryTrajectory) -> CoagError {
    CoagError::SolverAbort {
        time,
        reason,
        partial: Some(Box::new(traj)),
    }
}

/// Integrates from `u0` to `cfg.t_end` with classical RK4. Record times are
/// hit exactly: each segment between them is split into equal steps no
/// longer than `dt`.
pub fn solve(u0: &[f64], grid: &GridSpec, cfg: &SolverConfig) -> Result<FloryTrajectory> {
    cfg.validate()?;
    let n = grid.len();
    if u0.len() != n {
        return Err(CoagError::Grid(format!("initial weights must have length {n}")));
    }
    if u0.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(CoagError::InvalidMeasure("initial weights must be finite and >= 0".into()));
    }

    let mut targets: Vec<f64> = match &cfg.record {
        RecordPlan::Times(ts) => ts.iter().copied().filter(|t| *t > 0.0).collect(),
        RecordPlan::EveryStep(_) => Vec::new(),
    };
    if targets.last() != Some(&cfg.t_end) && cfg.t_end > 0.0 {
        targets.push(cfg.t_end);
    }
    let stride = match cfg.record {
        RecordPlan::EveryStep(k) => Some(k),
        RecordPlan::Times(_) => None,
    };

    let mut traj = FloryTrajectory::new(grid, u0);
    let mut ws = Workspace {
        k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        tmp: vec![0.0; n],
        g: vec![0.0; n],
        col0: grid.phi_column_sums(u0),
    };
    let mut u = u0.to_vec();
    let mut next = vec![0.0; n];
    let mut half = vec![0.0; n];
    let mut check = vec![0.0; n];
    let mut acc = Acc::default();
    let mut t = 0.0;
    let mut step_no = 0usize;

    for (seg, target) in targets.iter().enumerate() {
        let len = target - t;
        let steps = ((len / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = len / steps as f64;
        let seg_start = t;
        for s in 0..steps {
            let mut min_g = traj.min_g;
            let d = rk4_step(&u, h, grid, &mut ws, &mut next, &mut min_g);
            if cfg.method == Method::Rk4WithHalvingCheck {
                let mut scratch_g = min_g;
                rk4_step(&u, h / 2.0, grid, &mut ws, &mut half, &mut scratch_g);
                rk4_step(&half.clone(), h / 2.0, grid, &mut ws, &mut check, &mut scratch_g);
                let diff = next
                    .iter()
                    .zip(&check)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if !(diff < HALVING_TOL) {
                    return Err(abort(t, AbortReason::StepSizeCheck, traj));
                }
            }
            traj.min_g = min_g;
            let t_new = if s + 1 == steps { *target } else { seg_start + (s + 1) as f64 * h };
            for w in next.iter_mut() {
                if !w.is_finite() {
                    return Err(abort(t_new, AbortReason::NonFinite, traj));
                }
                if *w < 0.0 {
                    if *w < -cfg.positivity_clamp {
                        return Err(abort(t_new, AbortReason::NegativeWeight, traj));
                    }
                    traj.max_clamped = traj.max_clamped.max(-*w);
                    *w = 0.0;
                }
            }
            if cfg.overflow_policy == OverflowPolicy::ReflectError && d.overflow > 0.0 {
                return Err(abort(t_new, AbortReason::OverflowReached, traj));
            }
            std::mem::swap(&mut u, &mut next);
            acc.overflow += d.overflow;
            acc.m2 += d.m2;
            acc.loss += d.loss;
            if !acc.loss.is_finite() {
                return Err(abort(t_new, AbortReason::NonFinite, traj));
            }
            t = t_new;
            step_no += 1;

            let [m0, m1, m2] = grid.moments(&u);
            traj.times.push(t);
            traj.m0.push(m0);
            traj.m1.push(m1);
            traj.m2.push(m2);
            traj.reservoir_m2.push(acc.m2);
            traj.gel_mass.push(traj.initial_mass - m1);
            traj.overflow_mass.push(acc.overflow);
            traj.loss_integral.push(acc.loss);
            let at_end = seg + 1 == targets.len() && s + 1 == steps;
            let record = match stride {
                Some(k) => step_no.is_multiple_of(k) || at_end,
                None => s + 1 == steps,
            };
            if record {
                traj.record_times.push(t);
                traj.weights.push(u.clone());
            }
        }
    }
    Ok(traj)
}
