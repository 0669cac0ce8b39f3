//! Mode dispatch, output files and exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use coag_core::analysis::{
    lln_report, median, run_ensemble, stochastic_gel_time, EnsembleConfig, EnsembleResults,
    InitialCondition,
};
use coag_core::io::{
    emit_plot_data, plot_rows_from_convergence, plot_rows_from_moments, write_events_csv,
    write_measures_csv, write_moments_csv, write_weights_csv,
};
use coag_core::kernels::{ComponentSampler, IntegerMassSampler, SpatialSampler};
use coag_core::simulator::Snapshot;
use coag_core::{
    build_grid, classify_quantity, eventually_conservative_check, replica_seed, run, solve,
    test_family, ClusterState, CoagError, DiscreteMeasure, FloryTrajectory, GridSpec, Method,
    OverflowPolicy, ParticleSystem, RecordPlan, SnapshotPlan, SolverConfig, StopRules,
    SystemOptions, TestFunction,
};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{
    to_toml, ConfigError, InitKind, KernelSection, MethodName, Mode, OverflowName, RunConfig,
    StrategyName,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoagError),
    /// Outputs were written but part of the computation failed numerically.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_INVALID,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Core(e) => match e {
                CoagError::SolverAbort { .. }
                | CoagError::NonFiniteEvaluation { .. }
                | CoagError::RateOverflow { .. }
                | CoagError::RateCacheDrift { .. }
                | CoagError::MassViolation { .. } => EXIT_NUMERICAL,
                _ => EXIT_INVALID,
            },
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn invalid(message: impl Into<String>) -> CliError {
    CliError::Config(ConfigError {
        line: None,
        message: message.into(),
    })
}

/// What a finished run reports back to `main`.
#[derive(Debug)]
pub struct Report {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path).map_err(io_err(format!("cannot create {}", path.display())))?;
        f.write_all(bytes).map_err(io_err(format!("cannot write {}", path.display())))?;
        self.files.push(path);
        Ok(())
    }
}

fn buffer<F>(f: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> coag_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Appends a failure marker row `ABORTED,<time>,<reason>` padded to the
/// header width, so a truncated table is distinguishable from a complete one.
fn with_marker(mut csv: Vec<u8>, time: f64, reason: &str) -> Vec<u8> {
    let width = csv
        .split(|b| *b == b'\n')
        .next()
        .map_or(1, |h| h.iter().filter(|b| **b == b',').count() + 1);
    let mut fields = vec!["ABORTED".to_string(), format!("{time:?}"), format!("\"{}\"", reason.replace('"', "\"\""))];
    fields.resize(width.max(3), String::new());
    csv.extend_from_slice(fields.join(",").as_bytes());
    csv.push(b'\n');
    csv
}

pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(to_toml(cfg).as_bytes()))
}

fn write_manifest(out: &mut Outputs, cfg: &RunConfig, mode: Mode, threads: usize) -> Result<(), CliError> {
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "tool": "coag",
        "version": env!("CARGO_PKG_VERSION"),
        "mode": mode.as_str(),
        "seed": cfg.run.seed,
        "config_sha256": config_hash(cfg),
        "config": to_toml(cfg),
        "threads": threads,
        "timestamp_unix": timestamp,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| invalid(e.to_string()))?;
    out.write("manifest.json", text.as_bytes())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| invalid(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Validates `cfg` for `mode`, prepares the output directory and runs.
pub fn execute(cfg: &RunConfig, mode: Mode, threads: usize) -> Result<Report, CliError> {
    cfg.check_mode(mode)?;
    let dir = PathBuf::from(cfg.output_dir());
    fs::create_dir_all(&dir).map_err(io_err(format!("cannot create output directory {}", dir.display())))?;
    let mut out = Outputs { dir, files: Vec::new() };
    write_manifest(&mut out, cfg, mode, threads)?;
    let ctx = Context::new(cfg)?;
    let (exit_code, summary) = match mode {
        Mode::Simulate => simulate(&ctx, &mut out)?,
        Mode::Solve => solve_mode(&ctx, &mut out)?,
        Mode::Compare => compare(&ctx, &mut out)?,
        Mode::CheckKernel => check_kernel(&ctx, &mut out)?,
        Mode::GelTime => gel_time(&ctx, &mut out)?,
        Mode::Ensemble => ensemble(&ctx, &mut out)?,
    };
    Ok(Report {
        exit_code,
        files: out.files,
        summary,
    })
}

struct Context<'a> {
    cfg: &'a RunConfig,
    kernel: Arc<coag_core::KernelSpec>,
    init: InitialCondition,
    options: SystemOptions,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self, CliError> {
        let kernel = Arc::new(cfg.kernel_spec().map_err(invalid)?);
        let mu = cfg.initial_measure().map_err(invalid)?;
        let init = match cfg.init.kind {
            InitKind::Counts => InitialCondition::Counts(mu),
            InitKind::Iid => InitialCondition::Iid(mu),
        };
        let mut options = match cfg.run.strategy {
            StrategyName::Exact => SystemOptions::default(),
            StrategyName::Rejection => SystemOptions::rejection(&cfg.majorant_spec().map_err(invalid)?)?,
        };
        options.audit_interval = cfg.run.audit_interval;
        Ok(Self {
            cfg,
            kernel,
            init,
            options,
        })
    }

    fn t_end(&self) -> f64 {
        self.cfg.run.t_end.expect("checked by check_mode")
    }

    fn attribute_dims(&self) -> usize {
        self.init.measure().support().iter().map(ClusterState::dim).max().unwrap_or(0)
    }

    fn family(&self) -> Result<Vec<TestFunction>, CliError> {
        Ok(test_family(&self.cfg.run.family, self.attribute_dims())?)
    }

    /// Snapshot times with `t_end` appended when missing.
    fn snapshot_times(&self) -> Vec<f64> {
        let mut times = self.cfg.run.snapshot_times.clone();
        if times.last() != Some(&self.t_end()) {
            times.push(self.t_end());
        }
        times
    }

    fn stop_rules(&self) -> StopRules {
        StopRules {
            max_events: self.cfg.run.max_events,
            largest_fraction: None,
            log_events: false,
        }
    }

    fn ensemble_config(&self, n_values: Vec<u64>, plan: SnapshotPlan, stop: StopRules) -> EnsembleConfig {
        EnsembleConfig {
            kernel: self.kernel.clone(),
            init: self.init.clone(),
            n_values,
            replicas: self.cfg.run.replicas.expect("checked by check_mode"),
            base_seed: self.cfg.run.seed,
            t_end: self.t_end(),
            plan,
            stop,
            options: self.options.clone(),
        }
    }

    fn grid(&self) -> Result<GridSpec, CliError> {
        let max_mass = self.cfg.run.max_mass.expect("checked by check_mode");
        let phi = self.cfg.phi().map_err(invalid)?;
        let mu = self.init.measure();
        if mu.support().iter().any(|s| !matches!(s.mass(), coag_core::Mass::Integer(_))) {
            return Err(invalid("the solver grid needs integer initial masses"));
        }
        let mut points: Vec<Vec<f64>> = Vec::new();
        for s in mu.support() {
            if !points.iter().any(|p| p.as_slice() == s.attributes()) {
                points.push(s.attributes().to_vec());
            }
        }
        let attrs = (self.attribute_dims() > 0).then_some(points.as_slice());
        Ok(build_grid(max_mass, attrs, &self.kernel, &phi)?)
    }

    fn solver_config(&self, record: RecordPlan) -> SolverConfig {
        let r = &self.cfg.run;
        let mut sc = SolverConfig::new(r.dt.expect("checked by check_mode"), self.t_end()).with_record(record);
        sc.method = match r.method {
            MethodName::Rk4 => Method::Rk4Fixed,
            MethodName::Rk4HalvingCheck => Method::Rk4WithHalvingCheck,
        };
        sc.overflow_policy = match r.overflow {
            OverflowName::ToGel => OverflowPolicy::ToGel,
            OverflowName::ReflectError => OverflowPolicy::ReflectError,
        };
        sc
    }
}

fn snapshot_measures(snaps: &[Snapshot]) -> Vec<(f64, &DiscreteMeasure)> {
    snaps.iter().filter_map(|s| s.measure.as_ref().map(|m| (s.time, m))).collect()
}

fn observables_csv(snaps: &[Snapshot], family: &[TestFunction]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["time".to_string(), "cluster_count".to_string()];
    header.extend(family.iter().map(|f| f.name().to_string()));
    w.write_record(&header).expect("in-memory write");
    for s in snaps {
        let mut rec = vec![format!("{:?}", s.time), s.cluster_count.to_string()];
        rec.extend(s.observables.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

fn simulate(ctx: &Context, out: &mut Outputs) -> Result<(i32, String), CliError> {
    let n = ctx.cfg.run.n.expect("checked by check_mode");
    let seed = replica_seed(ctx.cfg.run.seed, n, 0);
    let mut sys: ParticleSystem = ctx.init.build(ctx.kernel.clone(), n, seed, ctx.options.clone())?;
    let plan = SnapshotPlan::new(ctx.snapshot_times(), Vec::new(), true)?;
    let stop = StopRules {
        log_events: ctx.cfg.output.events,
        ..ctx.stop_rules()
    };
    let traj = run(&mut sys, ctx.t_end(), &plan, &stop)?;
    out.write(
        &format!("simulate_{n}_0.csv"),
        &buffer(|b| write_measures_csv(b, &snapshot_measures(&traj.snapshots)))?,
    )?;
    if ctx.cfg.output.events {
        out.write(&format!("simulate_{n}_0_events.csv"), &buffer(|b| write_events_csv(b, &traj.events))?)?;
    }
    Ok((
        EXIT_OK,
        format!(
            "{} events, {} clusters at t = {}, stop: {:?}",
            traj.event_count,
            sys.len(),
            traj.end_time,
            traj.stop
        ),
    ))
}

fn write_solution(out: &mut Outputs, prefix: &str, traj: &FloryTrajectory, plot: bool) -> Result<(), CliError> {
    out.write(&format!("{prefix}_moments.csv"), &buffer(|b| write_moments_csv(b, traj))?)?;
    out.write(&format!("{prefix}_weights.csv"), &buffer(|b| write_weights_csv(b, traj))?)?;
    if plot {
        out.write(&format!("{prefix}_plot.csv"), &buffer(|b| emit_plot_data(b, &plot_rows_from_moments(traj)))?)?;
    }
    Ok(())
}

fn solve_mode(ctx: &Context, out: &mut Outputs) -> Result<(i32, String), CliError> {
    let grid = ctx.grid()?;
    let u0 = grid.weights_of(ctx.init.measure())?;
    let sc = ctx.solver_config(RecordPlan::Times(ctx.cfg.run.snapshot_times.clone()));
    match solve(&u0, &grid, &sc) {
        Ok(traj) => {
            write_solution(out, "solve", &traj, ctx.cfg.output.plot)?;
            let last = traj.times.len() - 1;
            Ok((
                EXIT_OK,
                format!(
                    "solved to t = {} on {} states; m0 = {:.6}, m1 = {:.6}, gel mass = {:.6}",
                    traj.times[last],
                    grid.len(),
                    traj.m0[last],
                    traj.m1[last],
                    traj.gel_mass[last]
                ),
            ))
        }
        Err(CoagError::SolverAbort { time, reason, partial }) => {
            let reason_text = reason.to_string();
            if let Some(traj) = partial {
                out.write(
                    "solve_moments.csv",
                    &with_marker(buffer(|b| write_moments_csv(b, &traj))?, time, &reason_text),
                )?;
                out.write(
                    "solve_weights.csv",
                    &with_marker(buffer(|b| write_weights_csv(b, &traj))?, time, &reason_text),
                )?;
            }
            Err(CliError::Numerical(format!("solver aborted at t = {time}: {reason_text}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn failed_replicas(results: &EnsembleResults) -> Vec<String> {
    results
        .entries
        .iter()
        .filter_map(|e| e.outcome.as_ref().err().map(|m| format!("N={} replica {}: {m}", e.n, e.replica)))
        .collect()
}

fn compare(ctx: &Context, out: &mut Outputs) -> Result<(i32, String), CliError> {
    let r = &ctx.cfg.run;
    let times = ctx.snapshot_times();
    let grid = ctx.grid()?;
    let u0 = grid.weights_of(ctx.init.measure())?;
    let flory = solve(&u0, &grid, &ctx.solver_config(RecordPlan::Times(times.clone())))?;
    let family = ctx.family()?;
    let plan = SnapshotPlan::new(times, Vec::new(), true)?;
    let n_values = r.n_values.clone().expect("checked by check_mode");
    let results = run_ensemble(&ctx.ensemble_config(n_values.clone(), plan, ctx.stop_rules()))?;
    let report = lln_report(&results, &flory, &family)?;
    out.write("compare_convergence.csv", &buffer(|b| emit_plot_data(b, &plot_rows_from_convergence(&report)))?)?;

    let t = ctx.t_end();
    let n_lo = *n_values.iter().min().expect("non-empty");
    let n_hi = *n_values.iter().max().expect("non-empty");
    let err_lo = report.median_at(n_lo, t);
    let err_hi = report.median_at(n_hi, t);
    let slope = report.slope_at(t);
    let mut failures = Vec::new();
    match err_hi {
        Some(e) if e < r.max_error => {}
        other => failures.push(format!("median error at N={n_hi} is {other:?}, limit {}", r.max_error)),
    }
    if n_lo != n_hi {
        if !matches!((err_lo, err_hi), (Some(a), Some(b)) if a > b) {
            failures.push(format!("error does not decrease from N={n_lo} to N={n_hi}"));
        }
        if !slope.is_some_and(|s| (r.slope_range[0]..=r.slope_range[1]).contains(&s)) {
            failures.push(format!("slope {slope:?} outside {:?}", r.slope_range));
        }
    }
    let summary = json!({
        "time": t,
        "n_values": n_values,
        "median_error_smallest_n": err_lo,
        "median_error_largest_n": err_hi,
        "slope": slope,
        "max_error": r.max_error,
        "slope_range": r.slope_range,
        "passed": failures.is_empty(),
        "failures": failures,
        "report": report,
    });
    out.write("compare_report.json", &to_json(&summary)?)?;
    let failed = failed_replicas(&results);
    if !failed.is_empty() {
        return Err(CliError::Numerical(format!("{} replicas failed: {}", failed.len(), failed.join("; "))));
    }
    let text = format!("err(N={n_lo}) = {err_lo:?}, err(N={n_hi}) = {err_hi:?}, slope = {slope:?}");
    if failures.is_empty() {
        Ok((EXIT_OK, format!("check passed: {text}")))
    } else {
        Ok((EXIT_CHECK_FAILED, format!("check failed ({}): {text}", failures.join("; "))))
    }
}

fn check_kernel(ctx: &Context, out: &mut Outputs) -> Result<(i32, String), CliError> {
    let r = &ctx.cfg.run;
    let phi = ctx.cfg.phi().map_err(invalid)?;
    let dims = ctx.attribute_dims();
    let report = match &ctx.cfg.kernel {
        KernelSection::Bilinear { matrix } => {
            let mut s = ComponentSampler::new(matrix.len(), r.sample_max_mass, r.seed);
            classify_quantity(&phi, &ctx.kernel, &mut s, r.samples, 1e-9)?
        }
        _ if dims > 0 => {
            let mut s = SpatialSampler::new(r.sample_max_mass, dims, r.sample_extent, r.seed);
            classify_quantity(&phi, &ctx.kernel, &mut s, r.samples, 1e-9)?
        }
        _ => {
            let mut s = IntegerMassSampler::new(r.sample_max_mass, r.seed);
            classify_quantity(&phi, &ctx.kernel, &mut s, r.samples, 0.0)?
        }
    };
    let flags = report.flags();
    // The eventually-conservative predicate on masses 1..=max_mass.
    let eventual = match r.radius {
        Some(radius) if dims == 0 => {
            let grid: Vec<ClusterState> = (1..=r.max_mass.unwrap_or(10)).map(ClusterState::integer).collect();
            Some(eventually_conservative_check(&ctx.kernel, &phi, ctx.init.measure(), &grid, radius, r.c_bound)?)
        }
        Some(_) => return Err(invalid("run.radius applies to mass-only initial conditions")),
        None => None,
    };
    let holds = eventual.as_ref().map(|e| e.holds());
    out.write(
        "check_kernel.json",
        &to_json(&json!({
            "kernel": ctx.kernel.name(),
            "phi": phi.name(),
            "flags": flags,
            "classification": report,
            "eventually_conservative": eventual,
        }))?,
    )?;
    Ok((
        EXIT_OK,
        format!(
            "{}: conservative {}, sub-conservative {}, doubly conservative {}, doubly sub-conservative {}{}",
            phi.name(),
            flags.is_conservative,
            flags.is_sub_conservative,
            flags.is_doubly_conservative,
            flags.is_doubly_sub_conservative,
            holds.map_or(String::new(), |h| format!(", eventually conservative {h}"))
        ),
    ))
}

fn gel_time(ctx: &Context, out: &mut Outputs) -> Result<(i32, String), CliError> {
    let r = &ctx.cfg.run;
    let n = r.n.expect("checked by check_mode");
    let eps = r.eps.expect("checked by check_mode");
    let stop = StopRules {
        largest_fraction: Some(eps),
        ..ctx.stop_rules()
    };
    let results = run_ensemble(&ctx.ensemble_config(vec![n], SnapshotPlan::new(Vec::new(), Vec::new(), false)?, stop))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["replica", "seed", "gel_time"]).expect("in-memory write");
    let mut times = Vec::new();
    for e in &results.entries {
        let t = match &e.outcome {
            Ok(traj) => stochastic_gel_time(traj, eps)?,
            Err(_) => None,
        };
        times.push(t.unwrap_or(f64::INFINITY));
        let cell = t.map_or(String::new(), |v| format!("{v:?}"));
        w.write_record([e.replica.to_string(), e.seed.to_string(), cell]).expect("in-memory write");
    }
    out.write(&format!("gel_time_{n}.csv"), &w.into_inner().expect("in-memory write"))?;
    let med = median(&times);
    let reached = times.iter().filter(|t| t.is_finite()).count();
    out.write(
        &format!("gel_time_{n}_summary.json"),
        &to_json(&json!({
            "n": n,
            "eps": eps,
            "replicas": times.len(),
            "reached": reached,
            "median": med.is_finite().then_some(med),
        }))?,
    )?;
    let failed = failed_replicas(&results);
    if !failed.is_empty() {
        return Err(CliError::Numerical(format!("{} replicas failed: {}", failed.len(), failed.join("; "))));
    }
    Ok((EXIT_OK, format!("median gel time {med} ({reached} of {} replicas reached eps = {eps})", times.len())))
}

fn ensemble(ctx: &Context, out: &mut Outputs) -> Result<(i32, String), CliError> {
    let family = ctx.family()?;
    let plan = SnapshotPlan::new(ctx.snapshot_times(), family.clone(), ctx.cfg.output.full_measure)?;
    let n_values = ctx.cfg.run.n_values.clone().expect("checked by check_mode");
    let results = run_ensemble(&ctx.ensemble_config(n_values, plan, ctx.stop_rules()))?;
    for e in &results.entries {
        let name = format!("ensemble_{}_{}", e.n, e.replica);
        match &e.outcome {
            Ok(traj) => {
                out.write(&format!("{name}.csv"), &observables_csv(&traj.snapshots, &family))?;
                if ctx.cfg.output.full_measure {
                    out.write(
                        &format!("{name}_measure.csv"),
                        &buffer(|b| write_measures_csv(b, &snapshot_measures(&traj.snapshots)))?,
                    )?;
                }
            }
            Err(msg) => out.write(&format!("{name}.csv"), &with_marker(observables_csv(&[], &family), f64::NAN, msg))?,
        }
    }
    let failed = failed_replicas(&results);
    if !failed.is_empty() {
        return Err(CliError::Numerical(format!("{} replicas failed: {}", failed.len(), failed.join("; "))));
    }
    Ok((EXIT_OK, format!("{} replicas written", results.entries.len())))
}

/// Reads and parses a config file, mapping I/O failures to exit code 1.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(format!("cannot read {}", path.display())))?;
    Ok(crate::config::parse_config(&text)?)
}
