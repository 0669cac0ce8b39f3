//! Exact simulation of the normalised cluster coagulation process.
//!
//! Each unordered pair `{i, j}` merges at rate `kbar(x_i, x_j) / N` on the
//! rescaled clock. The default strategy caches row sums
//! `S_i = sum_{j != i} kbar(x_i, x_j)`, picks `i` with probability
//! `S_i / sum S` and then `j` with probability `kbar(x_i, x_j) / S_i`.
//! The optional rejection strategy proposes pairs from a product majorant
//! `xi(m_i) xi(m_j)` and thins them.

use std::collections::HashMap;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{CoagError, Result};
use crate::kernels::{KernelSpec, MajorantSpec, PairFunction, Xi};
use crate::state::{integrate, ClusterState, DiscreteMeasure, Mass, StateKey, TestFunction};

/// Default number of events between rate-cache and mass audits.
pub const DEFAULT_AUDIT_INTERVAL: u64 = 1_000;
const RATE_CACHE_TOL: f64 = 1e-9;
const FLOAT_MASS_TOL: f64 = 1e-9;

/// Derives the seed for replica `replica` of an ensemble at scale `n`.
pub fn replica_seed(base_seed: u64, n: u64, replica: u64) -> u64 {
    let mut s = base_seed;
    for v in [n, replica] {
        s = splitmix64(s ^ splitmix64(v));
    }
    s
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Strategy {
    #[default]
    Exact,
    /// Thinning against `xi(m(x)) xi(m(y))`; needs `kbar <= xi xi` everywhere.
    Rejection(Xi),
}

#[derive(Debug, Clone)]
pub struct SystemOptions {
    pub strategy: Strategy,
    /// Events between cache audits; 0 disables periodic audits.
    pub audit_interval: u64,
}

impl Default for SystemOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Exact,
            audit_interval: DEFAULT_AUDIT_INTERVAL,
        }
    }
}

impl SystemOptions {
    pub fn rejection(majorant: &MajorantSpec) -> Result<Self> {
        let xi = majorant.xi().ok_or_else(|| {
            CoagError::InvalidParameter("rejection sampling needs a product majorant".into())
        })?;
        Ok(Self {
            strategy: Strategy::Rejection(xi),
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EventRecord {
    pub index: u64,
    pub time: f64,
    pub idx_x: usize,
    pub idx_y: usize,
    pub mass_x: Mass,
    pub mass_y: Mass,
    pub child: ClusterState,
}

#[derive(Debug, Clone)]
pub enum StepOutcome {
    Event(EventRecord),
    /// No further merge is possible; the clock did not move.
    Absorbed,
    /// The next event would fall after the limit; the clock now sits at it.
    Horizon,
}

/// Fenwick tree over non-negative weights with prefix-sum sampling.
#[derive(Debug, Clone)]
struct Fenwick {
    tree: Vec<f64>,
    values: Vec<f64>,
}

impl Fenwick {
    fn new(values: &[f64]) -> Self {
        let mut f = Self {
            tree: vec![0.0; values.len() + 1],
            values: vec![0.0; values.len()],
        };
        for (i, v) in values.iter().enumerate() {
            f.set(i, *v);
        }
        f
    }

    fn set(&mut self, i: usize, v: f64) {
        let delta = v - self.values[i];
        self.values[i] = v;
        let mut k = i + 1;
        while k < self.tree.len() {
            self.tree[k] += delta;
            k += k & k.wrapping_neg();
        }
    }

    /// Smallest index whose prefix sum exceeds `target`.
    fn find(&self, mut target: f64, len: usize) -> usize {
        let mut pos = 0;
        let mut step = self.tree.len().next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next < self.tree.len() && self.tree[next] <= target {
                target -= self.tree[next];
                pos = next;
            }
            step >>= 1;
        }
        pos.min(len.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
struct RejectionState {
    xi: Xi,
    weights: Fenwick,
    sum: f64,
    sum_sq: f64,
}

/// The `n`-cluster state of the normalised process.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    kernel: Arc<KernelSpec>,
    clusters: Vec<ClusterState>,
    n_scale: u64,
    clock: f64,
    row_sums: Vec<f64>,
    /// `sum_{i < j} kbar(x_i, x_j)`; the total rate is this over `N`.
    pair_sum: f64,
    rng: ChaCha8Rng,
    event_count: u64,
    initial_count: usize,
    audit_interval: u64,
    rejection: Option<RejectionState>,
    initial_mass: Mass,
    largest: f64,
    integer_mode: bool,
    proposals: u64,
    scratch: Vec<f64>,
    /// Pair sum at the last resynchronisation of the rate cache.
    audit_scale: f64,
}

impl ParticleSystem {
    /// `N` clusters drawn i.i.d. from the probability measure `mu`.
    pub fn init_iid(
        kernel: Arc<KernelSpec>,
        mu: &DiscreteMeasure,
        n: u64,
        seed: u64,
        opts: SystemOptions,
    ) -> Result<Self> {
        if n == 0 {
            return Err(CoagError::InvalidParameter("N must be at least 1".into()));
        }
        let total = mu.total_variation();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CoagError::InvalidMeasure(format!(
                "initial law must be a probability measure, total weight {total}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index = WeightedIndex::new(mu.weights())
            .map_err(|e| CoagError::InvalidMeasure(e.to_string()))?;
        let clusters = (0..n)
            .map(|_| mu.support()[index.sample(&mut rng)].clone())
            .collect();
        Self::from_clusters(kernel, clusters, n, rng, opts)
    }

    /// A deterministic configuration with the given multiplicities.
    pub fn init_counts(
        kernel: Arc<KernelSpec>,
        counts: &[(ClusterState, u64)],
        n: u64,
        seed: u64,
        opts: SystemOptions,
    ) -> Result<Self> {
        if counts.is_empty() {
            return Err(CoagError::InvalidParameter("empty initial count list".into()));
        }
        if n == 0 {
            return Err(CoagError::InvalidParameter("N must be at least 1".into()));
        }
        let mut clusters = Vec::new();
        for (x, c) in counts {
            if *c == 0 {
                return Err(CoagError::InvalidParameter(format!("multiplicity 0 for {x}")));
            }
            clusters.extend(std::iter::repeat_n(x.clone(), *c as usize));
        }
        Self::from_clusters(kernel, clusters, n, ChaCha8Rng::seed_from_u64(seed), opts)
    }

    fn from_clusters(
        kernel: Arc<KernelSpec>,
        clusters: Vec<ClusterState>,
        n_scale: u64,
        rng: ChaCha8Rng,
        opts: SystemOptions,
    ) -> Result<Self> {
        let integer_mode = clusters.iter().all(|c| c.mass().is_integer());
        let initial_mass = total_mass_of(&clusters)?;
        let largest = clusters.iter().map(ClusterState::m).fold(0.0, f64::max);
        let mut sys = Self {
            kernel,
            initial_count: clusters.len(),
            clusters,
            n_scale,
            clock: 0.0,
            row_sums: Vec::new(),
            pair_sum: 0.0,
            rng,
            event_count: 0,
            audit_interval: opts.audit_interval,
            rejection: None,
            initial_mass,
            largest,
            integer_mode,
            proposals: 0,
            scratch: Vec::new(),
            audit_scale: 0.0,
        };
        match opts.strategy {
            Strategy::Exact => {
                let (rows, total) = sys.recompute_rows()?;
                sys.row_sums = rows;
                sys.pair_sum = total;
                sys.audit_scale = total;
            }
            Strategy::Rejection(xi) => {
                if !xi.is_subadditive() {
                    return Err(CoagError::InvalidParameter(
                        "rejection majorant must be sub-additive".into(),
                    ));
                }
                let vals: Vec<f64> = sys.clusters.iter().map(|c| xi.eval(c.m())).collect();
                sys.rejection = Some(RejectionState {
                    xi,
                    weights: Fenwick::new(&vals),
                    sum: vals.iter().sum(),
                    sum_sq: vals.iter().map(|v| v * v).sum(),
                });
                sys.pair_sum = sys.recompute_rows()?.1;
            }
        }
        Ok(sys)
    }

    /// Row sums and pair total from scratch. Identical states share a row,
    /// so the cost is quadratic in the number of distinct states.
    fn recompute_rows(&self) -> Result<(Vec<f64>, f64)> {
        let n = self.clusters.len();
        let mut group_of = Vec::with_capacity(n);
        let mut reps: Vec<usize> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut index: HashMap<StateKey, usize> = HashMap::new();
        for (i, c) in self.clusters.iter().enumerate() {
            let g = *index.entry(c.key()).or_insert_with(|| {
                reps.push(i);
                counts.push(0.0);
                reps.len() - 1
            });
            counts[g] += 1.0;
            group_of.push(g);
        }
        let d = reps.len();
        if d * d <= n * n / 2 {
            let mut group_rows = vec![0.0; d];
            for a in 0..d {
                let x = &self.clusters[reps[a]];
                let mut s = 0.0;
                for b in 0..d {
                    let k = self.kernel.kbar(x, &self.clusters[reps[b]])?;
                    s += if a == b { (counts[b] - 1.0) * k } else { counts[b] * k };
                }
                group_rows[a] = s;
            }
            let rows: Vec<f64> = group_of.iter().map(|g| group_rows[*g]).collect();
            let total = rows.iter().sum::<f64>() / 2.0;
            return Ok((rows, total));
        }
        let mut rows = vec![0.0; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let k = self.kernel.kbar(&self.clusters[i], &self.clusters[j])?;
                rows[i] += k;
                rows[j] += k;
            }
        }
        let total = rows.iter().sum::<f64>() / 2.0;
        Ok((rows, total))
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn clusters(&self) -> &[ClusterState] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn n_scale(&self) -> u64 {
        self.n_scale
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn event_count(&self) -> u64 {
        self.event_count
    }

    pub fn initial_count(&self) -> usize {
        self.initial_count
    }

    pub fn initial_mass(&self) -> Mass {
        self.initial_mass
    }

    pub fn largest_mass(&self) -> f64 {
        self.largest
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    /// Majorant proposals drawn so far (rejection strategy only).
    pub fn proposals(&self) -> u64 {
        self.proposals
    }

    /// `(1 / 2N) sum_{i != j} kbar(x_i, x_j)`. Under the rejection strategy
    /// no row cache is kept and the value is recomputed.
    pub fn total_rate(&self) -> f64 {
        if self.rejection.is_some() {
            return self.recompute_rows().map_or(f64::NAN, |r| r.1) / self.n_scale as f64;
        }
        self.pair_sum / self.n_scale as f64
    }

    /// `L_t = (1/N) sum_i delta_{x_i}`.
    pub fn empirical_measure(&self) -> DiscreteMeasure {
        DiscreteMeasure::from_states(self.clusters.iter(), 1.0 / self.n_scale as f64)
    }

    /// Recomputes the rate cache and the total mass and checks both.
    pub fn audit(&mut self) -> Result<()> {
        let mass = total_mass_of(&self.clusters)?;
        let ok = match (mass, self.initial_mass) {
            (Mass::Integer(a), Mass::Integer(b)) => a == b,
            (a, b) => (a.value() - b.value()).abs() <= FLOAT_MASS_TOL * b.value(),
        };
        if !ok || self.clusters.len() as u64 + self.event_count != self.initial_count as u64 {
            return Err(CoagError::MassViolation {
                event: self.event_count,
            });
        }
        if let Some(rej) = &mut self.rejection {
            let vals: Vec<f64> = self.clusters.iter().map(|c| rej.xi.eval(c.m())).collect();
            let sum: f64 = vals.iter().sum();
            check_drift(rej.sum, sum, 0.0)?;
            rej.sum = sum;
            rej.sum_sq = vals.iter().map(|v| v * v).sum();
            rej.weights = Fenwick::new(&vals);
            return Ok(());
        }
        let (rows, total) = self.recompute_rows()?;
        check_drift(self.pair_sum, total, self.audit_scale)?;
        // Resynchronise so rounding cannot accumulate across audit windows.
        self.row_sums = rows;
        self.pair_sum = total;
        self.audit_scale = total;
        Ok(())
    }

    /// One event with no time limit.
    pub fn step(&mut self) -> Result<StepOutcome> {
        self.step_until(f64::INFINITY)
    }

    /// Advances to the next event unless it would fall after `t_limit`, in
    /// which case the clock is moved to `t_limit` (memorylessness makes the
    /// discarded draw harmless).
    pub fn step_until(&mut self, t_limit: f64) -> Result<StepOutcome> {
        if self.clusters.len() < 2 {
            return Ok(StepOutcome::Absorbed);
        }
        let outcome = if self.rejection.is_some() {
            self.step_rejection(t_limit)?
        } else {
            self.step_exact(t_limit)?
        };
        if let StepOutcome::Event(_) = outcome {
            if self.audit_interval > 0 && self.event_count.is_multiple_of(self.audit_interval) {
                self.audit()?;
            }
        }
        Ok(outcome)
    }

    fn draw_wait(&mut self, rate: f64) -> f64 {
        let e: f64 = Exp1.sample(&mut self.rng);
        e / rate
    }

    fn step_exact(&mut self, t_limit: f64) -> Result<StepOutcome> {
        if self.pair_sum <= 0.0 {
            return Ok(StepOutcome::Absorbed);
        }
        let rate = self.pair_sum / self.n_scale as f64;
        let wait = self.draw_wait(rate);
        if self.clock + wait > t_limit {
            self.clock = t_limit;
            return Ok(StepOutcome::Horizon);
        }

        let (i, j) = match self.select_pair()? {
            Some(p) => p,
            None => {
                // Cached rates were rounding residue: the true total is zero.
                let (rows, total) = self.recompute_rows()?;
                self.row_sums = rows;
                self.pair_sum = total;
                if total <= 0.0 {
                    return Ok(StepOutcome::Absorbed);
                }
                self.select_pair()?.ok_or(CoagError::RateCacheDrift {
                    cached: self.pair_sum,
                    recomputed: total,
                })?
            }
        };
        self.clock += wait;
        let record = self.merge(i, j)?;
        Ok(StepOutcome::Event(record))
    }

    /// Picks `i` proportional to `S_i`, then `j` proportional to
    /// `kbar(x_i, x_j)`. Leaves the row of `i` in `scratch`.
    fn select_pair(&mut self) -> Result<Option<(usize, usize)>> {
        let total: f64 = self.row_sums.iter().sum();
        if total <= 0.0 {
            return Ok(None);
        }
        let mut target = self.rng.gen::<f64>() * total;
        let mut i = self.row_sums.len() - 1;
        for (k, s) in self.row_sums.iter().enumerate() {
            if target < *s {
                i = k;
                break;
            }
            target -= s;
        }
        if self.row_sums[i] <= 0.0 {
            i = match self.row_sums.iter().rposition(|s| *s > 0.0) {
                Some(k) => k,
                None => return Ok(None),
            };
        }

        let xi = &self.clusters[i];
        self.scratch.clear();
        let mut row_total = 0.0;
        for (k, y) in self.clusters.iter().enumerate() {
            let v = if k == i { 0.0 } else { self.kernel.kbar(xi, y)? };
            row_total += v;
            self.scratch.push(v);
        }
        if row_total <= 0.0 {
            return Ok(None);
        }
        let mut target = self.rng.gen::<f64>() * row_total;
        let mut j = None;
        for (k, v) in self.scratch.iter().enumerate() {
            if *v > 0.0 {
                j = Some(k);
                if target < *v {
                    break;
                }
                target -= v;
            }
        }
        Ok(j.map(|j| (i, j)))
    }

    fn merge(&mut self, i: usize, j: usize) -> Result<EventRecord> {
        let x = self.clusters[i].clone();
        let y = self.clusters[j].clone();
        let child = self.kernel.draw_child(&x, &y, &mut self.rng)?;
        if self.integer_mode {
            let exact = matches!(
                (child.mass(), x.mass(), y.mass()),
                (Mass::Integer(c), Mass::Integer(a), Mass::Integer(b)) if c == a + b
            );
            if !exact {
                return Err(CoagError::MassViolation {
                    event: self.event_count + 1,
                });
            }
        }

        if self.rejection.is_none() {
            // `scratch` holds the row of i.
            let kij = self.scratch[j];
            let mut child_row_sum = 0.0;
            for k in 0..self.clusters.len() {
                if k == i || k == j {
                    continue;
                }
                let other = &self.clusters[k];
                let kjk = self.kernel.kbar(&y, other)?;
                let kzk = self.kernel.kbar(&child, other)?;
                self.row_sums[k] += kzk - self.scratch[k] - kjk;
                child_row_sum += kzk;
            }
            self.pair_sum += child_row_sum - self.row_sums[i] - self.row_sums[j] + kij;
            remove_pair(&mut self.row_sums, i, j);
            self.row_sums.push(child_row_sum);
            if self.row_sums.len() == 1 {
                self.row_sums[0] = 0.0;
                self.pair_sum = 0.0;
            }
        }
        if let Some(rej) = &mut self.rejection {
            let (xi_x, xi_y, xi_z) = (rej.xi.eval(x.m()), rej.xi.eval(y.m()), rej.xi.eval(child.m()));
            rej.sum += xi_z - xi_x - xi_y;
            rej.sum_sq += xi_z * xi_z - xi_x * xi_x - xi_y * xi_y;
            let last = self.clusters.len() - 1;
            let (hi, lo) = (i.max(j), i.min(j));
            // Mirror the two swap_removes below, then append the child.
            let v = rej.weights.values[last];
            rej.weights.set(hi, v);
            rej.weights.set(last, 0.0);
            let v = rej.weights.values[last - 1];
            rej.weights.set(lo, v);
            rej.weights.set(last - 1, xi_z);
        }

        remove_pair(&mut self.clusters, i, j);
        self.largest = self.largest.max(child.m());
        self.clusters.push(child.clone());
        self.event_count += 1;
        Ok(EventRecord {
            index: self.event_count,
            time: self.clock,
            idx_x: i,
            idx_y: j,
            mass_x: x.mass(),
            mass_y: y.mass(),
            child,
        })
    }

    fn step_rejection(&mut self, t_limit: f64) -> Result<StepOutcome> {
        loop {
            let n = self.clusters.len();
            let rej = self.rejection.as_ref().expect("rejection state");
            let majorant = (rej.sum * rej.sum - rej.sum_sq).max(0.0) / 2.0;
            if majorant <= 0.0 {
                return Ok(StepOutcome::Absorbed);
            }
            let wait = self.draw_wait(majorant / self.n_scale as f64);
            if self.clock + wait > t_limit {
                self.clock = t_limit;
                return Ok(StepOutcome::Horizon);
            }
            self.clock += wait;
            self.proposals += 1;
            let rej = self.rejection.as_ref().expect("rejection state");
            let total = rej.sum;
            let i = rej.weights.find(self.rng.gen::<f64>() * total, n);
            let j = loop {
                let j = rej.weights.find(self.rng.gen::<f64>() * total, n);
                if j != i {
                    break j;
                }
            };
            let bound = rej.weights.values[i] * rej.weights.values[j];
            let k = self.kernel.kbar(&self.clusters[i], &self.clusters[j])?;
            if k > bound * (1.0 + 1e-12) {
                return Err(CoagError::InvalidParameter(format!(
                    "majorant {bound} below rate {k} for {} / {}",
                    self.clusters[i], self.clusters[j]
                )));
            }
            if k > 0.0 && self.rng.gen::<f64>() * bound < k {
                let record = self.merge(i, j)?;
                return Ok(StepOutcome::Event(record));
            }
        }
    }
}

/// Relative drift check. `floor` is the value at the previous
/// resynchronisation: when the true total collapses towards zero, rounding
/// residue is measured against the magnitudes that produced it.
fn check_drift(cached: f64, recomputed: f64, floor: f64) -> Result<()> {
    let scale = recomputed.abs().max(floor.abs());
    if (cached - recomputed).abs() > RATE_CACHE_TOL * scale {
        return Err(CoagError::RateCacheDrift { cached, recomputed });
    }
    Ok(())
}

fn total_mass_of(clusters: &[ClusterState]) -> Result<Mass> {
    let mut it = clusters.iter();
    let first = match it.next() {
        Some(c) => c.mass(),
        None => return Ok(Mass::Integer(0)),
    };
    it.try_fold(first, |acc, c| acc.checked_add(c.mass()))
}

/// Removes indices `i != j`, the larger first so the smaller stays valid.
fn remove_pair<T>(v: &mut Vec<T>, i: usize, j: usize) {
    let (hi, lo) = (i.max(j), i.min(j));
    v.swap_remove(hi);
    v.swap_remove(lo);
}

#[derive(Debug, Clone)]
pub struct SnapshotPlan {
    times: Vec<f64>,
    pub observables: Vec<TestFunction>,
    pub record_full_measure: bool,
}

impl SnapshotPlan {
    pub fn new(times: Vec<f64>, observables: Vec<TestFunction>, record_full_measure: bool) -> Result<Self> {
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(CoagError::InvalidParameter("snapshot times must be finite and >= 0".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoagError::InvalidParameter(
                "snapshot times must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            times,
            observables,
            record_full_measure,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

#[derive(Debug, Clone, Default)]
pub struct StopRules {
    pub max_events: Option<u64>,
    /// Stop once the largest cluster holds at least this fraction of the mass.
    pub largest_fraction: Option<f64>,
    pub log_events: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    Horizon,
    Absorbed { time: f64 },
    MaxEvents { time: f64 },
    LargestFraction { time: f64 },
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: f64,
    pub cluster_count: usize,
    /// Observable values in plan order.
    pub observables: Vec<f64>,
    pub measure: Option<DiscreteMeasure>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub n_scale: u64,
    pub initial_count: usize,
    pub total_mass: f64,
    pub snapshots: Vec<Snapshot>,
    pub events: Vec<EventRecord>,
    /// `(time, largest mass)` each time the largest mass grew, starting at 0.
    pub largest_record: Vec<(f64, f64)>,
    pub stop: StopReason,
    pub event_count: u64,
    pub end_time: f64,
}

impl Trajectory {
    pub fn observable_trace(&self, k: usize) -> Vec<(f64, f64)> {
        self.snapshots.iter().map(|s| (s.time, s.observables[k])).collect()
    }
}

fn take_snapshot(sys: &ParticleSystem, time: f64, plan: &SnapshotPlan) -> Result<Snapshot> {
    let measure = sys.empirical_measure();
    let observables = plan
        .observables
        .iter()
        .map(|f| integrate(f, &measure))
        .collect::<Result<Vec<_>>>()?;
    Ok(Snapshot {
        time,
        cluster_count: sys.len(),
        observables,
        measure: plan.record_full_measure.then_some(measure),
    })
}

/// Runs `sys` to the horizon `t_end`, taking a snapshot at each plan time
/// (the state with the last event at or before it) and feeding `monitors`.
pub fn run_monitored(
    sys: &mut ParticleSystem,
    t_end: f64,
    plan: &SnapshotPlan,
    stop: &StopRules,
    monitors: &mut [ConservationMonitor],
) -> Result<Trajectory> {
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(CoagError::InvalidParameter(format!("horizon must be >= 0, got {t_end}")));
    }
    let total_mass = sys.initial_mass.value();
    let mut traj = Trajectory {
        n_scale: sys.n_scale,
        initial_count: sys.initial_count,
        total_mass,
        snapshots: Vec::new(),
        events: Vec::new(),
        largest_record: vec![(sys.clock, sys.largest)],
        stop: StopReason::Horizon,
        event_count: 0,
        end_time: sys.clock,
    };
    // At most len - 1 events remain, fewer under an event cap.
    let horizon = stop.max_events.unwrap_or(u64::MAX);
    let cadence = ((sys.len().saturating_sub(1) as u64).min(horizon) / 100).max(1);
    let mut targets: Vec<f64> = plan.times.iter().copied().filter(|t| *t <= t_end).collect();
    if targets.last() != Some(&t_end) {
        targets.push(t_end);
    }
    let planned = plan.times.iter().filter(|t| **t <= t_end).count();
    let start_events = sys.event_count;

    'outer: for (k, target) in targets.iter().enumerate() {
        loop {
            match sys.step_until(*target)? {
                StepOutcome::Event(ev) => {
                    if ev.child.m() > traj.largest_record.last().map_or(0.0, |r| r.1) {
                        traj.largest_record.push((ev.time, ev.child.m()));
                    }
                    let time = ev.time;
                    if stop.log_events {
                        traj.events.push(ev);
                    }
                    let done = sys.event_count - start_events;
                    if done.is_multiple_of(cadence) {
                        for m in monitors.iter_mut() {
                            m.observe(sys);
                        }
                    }
                    if stop.largest_fraction.is_some_and(|eps| sys.largest / total_mass >= eps) {
                        traj.stop = StopReason::LargestFraction { time };
                        break 'outer;
                    }
                    if stop.max_events.is_some_and(|m| done >= m) {
                        traj.stop = StopReason::MaxEvents { time };
                        break 'outer;
                    }
                }
                StepOutcome::Horizon => break,
                StepOutcome::Absorbed => {
                    if !matches!(traj.stop, StopReason::Absorbed { .. }) {
                        traj.stop = StopReason::Absorbed { time: sys.clock };
                    }
                    break;
                }
            }
        }
        if k < planned {
            traj.snapshots.push(take_snapshot(sys, *target, plan)?);
            for m in monitors.iter_mut() {
                m.observe(sys);
            }
        }
    }
    traj.event_count = sys.event_count - start_events;
    traj.end_time = match traj.stop {
        StopReason::Horizon | StopReason::Absorbed { .. } => t_end.max(sys.clock),
        StopReason::MaxEvents { time } | StopReason::LargestFraction { time } => time,
    };
    Ok(traj)
}

pub fn run(sys: &mut ParticleSystem, t_end: f64, plan: &SnapshotPlan, stop: &StopRules) -> Result<Trajectory> {
    run_monitored(sys, t_end, plan, stop, &mut [])
}

/// `(1/N) sum_i f(x_i, q)`, summed in cluster order.
pub fn single_statistic(sys: &ParticleSystem, f: &dyn PairFunction, q: &ClusterState) -> f64 {
    sys.clusters.iter().map(|x| f.pair_value(x, q)).sum::<f64>() / sys.n_scale as f64
}

/// `(1/N^2) sum_{i != j} f(x_i, x_j)`.
pub fn pair_statistic(sys: &ParticleSystem, f: &dyn PairFunction) -> f64 {
    let n = sys.n_scale as f64;
    f.ordered_pair_sum(&sys.clusters) / (n * n)
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditPoint {
    pub event: u64,
    pub time: f64,
    pub single: Vec<f64>,
    pub pair: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub function: String,
    pub probes: Vec<ClusterState>,
    pub initial_single: Vec<f64>,
    pub initial_pair: f64,
    pub points: Vec<AuditPoint>,
    /// Audits where a single statistic left its initial value by more than
    /// the relative tolerance.
    pub single_violations: usize,
    /// Audits where the pair statistic rose above its previous value.
    pub pair_increases: usize,
    pub max_single_rel_dev: f64,
    pub tol: f64,
}

/// Tracks the single and pair statistics of a function along a run.
pub struct ConservationMonitor {
    f: Arc<dyn PairFunction>,
    report: AuditReport,
    last_pair: f64,
    track_pair: bool,
}

impl ConservationMonitor {
    pub fn new(f: Arc<dyn PairFunction>, probes: Vec<ClusterState>, sys: &ParticleSystem) -> Self {
        Self::with_options(f, probes, sys, true)
    }

    /// `track_pair = false` skips the O(n^2) pair statistic for functions
    /// without a fast path.
    pub fn with_options(
        f: Arc<dyn PairFunction>,
        probes: Vec<ClusterState>,
        sys: &ParticleSystem,
        track_pair: bool,
    ) -> Self {
        let initial_single: Vec<f64> = probes.iter().map(|q| single_statistic(sys, f.as_ref(), q)).collect();
        let initial_pair = if track_pair { pair_statistic(sys, f.as_ref()) } else { 0.0 };
        Self {
            report: AuditReport {
                function: f.name(),
                probes,
                initial_single,
                initial_pair,
                points: Vec::new(),
                single_violations: 0,
                pair_increases: 0,
                max_single_rel_dev: 0.0,
                tol: 1e-9,
            },
            f,
            last_pair: initial_pair,
            track_pair,
        }
    }

    pub fn observe(&mut self, sys: &ParticleSystem) {
        let f = self.f.as_ref();
        let single: Vec<f64> = self.report.probes.iter().map(|q| single_statistic(sys, f, q)).collect();
        let mut violated = false;
        for (v, v0) in single.iter().zip(&self.report.initial_single) {
            let dev = if *v0 == 0.0 { v.abs() } else { (v - v0).abs() / v0.abs() };
            self.report.max_single_rel_dev = self.report.max_single_rel_dev.max(dev);
            violated |= dev > self.report.tol;
        }
        if violated {
            self.report.single_violations += 1;
        }
        let pair = if self.track_pair { pair_statistic(sys, f) } else { 0.0 };
        if pair > self.last_pair * (1.0 + 1e-12) + f64::MIN_POSITIVE {
            self.report.pair_increases += 1;
        }
        self.last_pair = pair;
        self.report.points.push(AuditPoint {
            event: sys.event_count,
            time: sys.clock,
            single,
            pair,
        });
    }

    pub fn report(&self) -> &AuditReport {
        &self.report
    }

    pub fn into_report(self) -> AuditReport {
        self.report
    }
}

/// One-shot audit of the current state against the stored initial values.
pub fn conservation_audit(monitor: &mut ConservationMonitor, sys: &ParticleSystem) -> AuditReport {
    monitor.observe(sys);
    monitor.report.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{ConservedQuantity, EllPreset, Matrix};

    fn unit() -> ClusterState {
        ClusterState::integer(1)
    }

    fn arc(k: KernelSpec) -> Arc<KernelSpec> {
        Arc::new(k)
    }

    #[test]
    fn init_examples() {
        let mu = DiscreteMeasure::dirac(unit(), 1.0).unwrap();
        let sys = ParticleSystem::init_iid(arc(KernelSpec::multiplicative()), &mu, 100, 1, SystemOptions::default())
            .unwrap();
        assert_eq!(sys.len(), 100);
        assert_eq!(sys.empirical_measure().total_mass(), 1.0);

        let mu = DiscreteMeasure::new(vec![unit(), ClusterState::integer(2)], vec![0.5, 0.5]).unwrap();
        let c = arc(KernelSpec::constant(1.0).unwrap());
        let sys = ParticleSystem::init_iid(c.clone(), &mu, 10_000, 7, SystemOptions::default()).unwrap();
        assert_eq!(sys.total_rate(), 4999.5);
        let again = ParticleSystem::init_iid(c.clone(), &mu, 10_000, 7, SystemOptions::default()).unwrap();
        assert!(sys.clusters().iter().zip(again.clusters()).all(|(a, b)| a.same_bits(b)));
        assert!(ParticleSystem::init_iid(c.clone(), &mu, 0, 7, SystemOptions::default()).is_err());
        let half = DiscreteMeasure::dirac(unit(), 0.5).unwrap();
        assert!(ParticleSystem::init_iid(c, &half, 10, 7, SystemOptions::default()).is_err());
    }

    #[test]
    fn init_counts_examples() {
        let k = arc(KernelSpec::constant(1.0).unwrap());
        let sys = ParticleSystem::init_counts(k.clone(), &[(unit(), 50)], 50, 0, SystemOptions::default()).unwrap();
        assert_eq!(sys.len(), 50);
        let sys = ParticleSystem::init_counts(
            k.clone(),
            &[(unit(), 30), (ClusterState::integer(2), 10)],
            40,
            0,
            SystemOptions::default(),
        )
        .unwrap();
        assert_eq!(sys.empirical_measure().total_mass(), 1.25);
        assert!(ParticleSystem::init_counts(k.clone(), &[(unit(), 0)], 40, 0, SystemOptions::default()).is_err());
        assert!(ParticleSystem::init_counts(k, &[], 40, 0, SystemOptions::default()).is_err());
    }

    #[test]
    fn total_rate_examples() {
        let k = arc(KernelSpec::constant(1.0).unwrap());
        let sys = ParticleSystem::init_counts(k.clone(), &[(unit(), 2)], 2, 0, SystemOptions::default()).unwrap();
        assert_eq!(sys.total_rate(), 0.5);
        let sys = ParticleSystem::init_counts(k, &[(unit(), 1)], 1, 0, SystemOptions::default()).unwrap();
        assert_eq!(sys.total_rate(), 0.0);
        let m = arc(KernelSpec::multiplicative());
        let sys = ParticleSystem::init_counts(m, &[(unit(), 37)], 50, 0, SystemOptions::default()).unwrap();
        assert_eq!(sys.total_rate(), 37.0 * 36.0 / 2.0 / 50.0);
    }

    #[test]
    fn step_examples() {
        let k = arc(KernelSpec::constant(1.0).unwrap());
        let mut sys = ParticleSystem::init_counts(k, &[(unit(), 2)], 2, 3, SystemOptions::default()).unwrap();
        let ev = match sys.step().unwrap() {
            StepOutcome::Event(ev) => ev,
            other => panic!("{other:?}"),
        };
        assert_eq!(ev.child.mass(), Mass::Integer(2));
        assert_eq!(sys.len(), 1);
        assert_eq!(sys.empirical_measure().total_mass(), 1.0);
        assert!(matches!(sys.step().unwrap(), StepOutcome::Absorbed));

        let zero = arc(KernelSpec::constant(0.0).unwrap());
        let mut sys = ParticleSystem::init_counts(zero, &[(unit(), 5)], 5, 3, SystemOptions::default()).unwrap();
        assert!(matches!(sys.step().unwrap(), StepOutcome::Absorbed));
        assert_eq!(sys.clock(), 0.0);
    }

    #[test]
    fn orthogonal_bilinear_absorbs() {
        let k = arc(KernelSpec::bilinear(Matrix::identity(2)).unwrap());
        let x = ClusterState::from_components(&[1.0, 0.0]).unwrap();
        let y = ClusterState::from_components(&[0.0, 1.0]).unwrap();
        let mut sys =
            ParticleSystem::init_counts(k, &[(x, 1), (y, 1)], 2, 3, SystemOptions::default()).unwrap();
        assert!(matches!(sys.step().unwrap(), StepOutcome::Absorbed));
    }

    #[test]
    fn row_cache_matches_recomputation() {
        let mu = DiscreteMeasure::new(
            (1..=5).map(ClusterState::integer).collect(),
            vec![0.2; 5],
        )
        .unwrap();
        for k in [KernelSpec::additive(), KernelSpec::min_log(0.5).unwrap()] {
            let opts = SystemOptions {
                audit_interval: 1,
                ..SystemOptions::default()
            };
            let mut sys = ParticleSystem::init_iid(arc(k), &mu, 300, 9, opts).unwrap();
            for _ in 0..250 {
                sys.step().unwrap();
            }
            let (rows, total) = sys.recompute_rows().unwrap();
            for (a, b) in rows.iter().zip(sys.row_sums()) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
            assert!((total - sys.pair_sum).abs() <= 1e-9 * total);
        }
    }

    #[test]
    fn rejection_path_conserves_and_tracks_weights() {
        let k = KernelSpec::additive();
        let mj = k.default_majorant().unwrap();
        let mut opts = SystemOptions::rejection(&mj).unwrap();
        opts.audit_interval = 50;
        let mut sys = ParticleSystem::init_counts(arc(k), &[(unit(), 400)], 400, 2, opts).unwrap();
        for _ in 0..399 {
            assert!(matches!(sys.step().unwrap(), StepOutcome::Event(_)));
        }
        assert!(matches!(sys.step().unwrap(), StepOutcome::Absorbed));
        assert_eq!(sys.clusters()[0].mass(), Mass::Integer(400));
        assert!(sys.proposals() >= 399);
    }

    #[test]
    fn horizon_moves_clock_to_limit() {
        let k = arc(KernelSpec::constant(1.0).unwrap());
        let mut sys = ParticleSystem::init_counts(k, &[(unit(), 10)], 10, 3, SystemOptions::default()).unwrap();
        assert!(matches!(sys.step_until(0.0).unwrap(), StepOutcome::Horizon));
        assert_eq!(sys.clock(), 0.0);
        assert_eq!(sys.len(), 10);
    }

    #[test]
    fn zero_horizon_run_snapshots_initial_measure() {
        let k = arc(KernelSpec::constant(1.0).unwrap());
        let mut sys = ParticleSystem::init_counts(k, &[(unit(), 10)], 10, 3, SystemOptions::default()).unwrap();
        let plan = SnapshotPlan::new(vec![0.0], vec![TestFunction::constant(1.0)], true).unwrap();
        let traj = run(&mut sys, 0.0, &plan, &StopRules::default()).unwrap();
        assert_eq!(traj.snapshots.len(), 1);
        assert_eq!(traj.snapshots[0].observables, vec![1.0]);
        assert_eq!(traj.event_count, 0);
        let m = traj.snapshots[0].measure.as_ref().unwrap();
        assert_eq!(m.weights(), &[1.0]);
    }

    #[test]
    fn snapshot_plan_validation() {
        assert!(SnapshotPlan::new(vec![1.0, 1.0], vec![], false).is_err());
        assert!(SnapshotPlan::new(vec![-1.0], vec![], false).is_err());
    }

    #[test]
    fn replica_seeds_differ() {
        let a = replica_seed(1, 100, 0);
        assert_ne!(a, replica_seed(1, 100, 1));
        assert_ne!(a, replica_seed(1, 1000, 0));
        assert_ne!(a, replica_seed(2, 100, 0));
        assert_eq!(a, replica_seed(1, 100, 0));
    }

    #[test]
    fn single_cluster_pair_statistic_is_zero() {
        let k = arc(KernelSpec::constant(1.0).unwrap());
        let sys = ParticleSystem::init_counts(k, &[(unit(), 1)], 1, 0, SystemOptions::default()).unwrap();
        assert_eq!(pair_statistic(&sys, &MajorantSpec::min()), 0.0);
        assert_eq!(pair_statistic(&sys, &ConservedQuantity::mass_times_ell(EllPreset::One)), 0.0);
    }

    #[test]
    fn fast_pair_sums_match_brute_force() {
        let states: Vec<ClusterState> = [3u64, 1, 4, 1, 5, 9, 2, 6].iter().map(|m| ClusterState::integer(*m)).collect();
        let brute = |f: &dyn Fn(&ClusterState, &ClusterState) -> f64| {
            let mut acc = 0.0;
            for (i, x) in states.iter().enumerate() {
                for (j, y) in states.iter().enumerate() {
                    if i != j {
                        acc += f(x, y);
                    }
                }
            }
            acc
        };
        let min = MajorantSpec::min();
        assert_eq!(min.ordered_pair_sum(&states), brute(&|x, y| x.m().min(y.m())));
        let q = ConservedQuantity::mass_product();
        assert_eq!(q.ordered_pair_sum(&states), brute(&|x, y| x.m() * y.m()));
        let sq = MajorantSpec::product(Xi::sqrt());
        let b = brute(&|x, y| (x.m() * y.m()).sqrt());
        assert!((sq.ordered_pair_sum(&states) - b).abs() <= 1e-12 * b);
    }
}
