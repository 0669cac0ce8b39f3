use std::sync::Arc;

use coag_core::simulator::{
    pair_statistic, run, run_monitored, ConservationMonitor, SnapshotPlan, StepOutcome, StopRules,
    SystemOptions,
};
use coag_core::{
    ClusterState, ConservedQuantity, DiscreteMeasure, EllPreset, KernelSpec, MajorantSpec, Mass,
    OffspringForm, ParticleSystem, PairFunction, Placement, TestFunction, Xi,
};
use coag_core::kernels::SpatialRate;
use proptest::prelude::*;
use rayon::prelude::*;

fn unit() -> ClusterState {
    ClusterState::integer(1)
}

fn first_wait(kernel: &Arc<KernelSpec>, n: u64, seed: u64) -> (f64, f64) {
    let mut sys =
        ParticleSystem::init_counts(kernel.clone(), &[(unit(), n)], n, seed, SystemOptions::default()).unwrap();
    let rate = sys.total_rate();
    match sys.step().unwrap() {
        StepOutcome::Event(ev) => (ev.time, rate),
        other => panic!("{other:?}"),
    }
}

#[test]
fn first_waiting_time_passes_ks_test() {
    let kernel = Arc::new(KernelSpec::constant(1.0).unwrap());
    let reps = 1_000u64;
    let samples: Vec<(f64, f64)> = (0..reps).into_par_iter().map(|r| first_wait(&kernel, 100, 10_000 + r)).collect();
    let rate = samples[0].1;
    assert_eq!(rate, 49.5);
    let mut times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    times.sort_by(f64::total_cmp);
    let n = times.len() as f64;
    let d = times
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let f = 1.0 - (-rate * t).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
}

#[test]
fn mean_first_wait_multiplicative() {
    let kernel = Arc::new(KernelSpec::multiplicative());
    let n = 10_000u64;
    let samples: Vec<f64> = (0..1_000u64).into_par_iter().map(|r| first_wait(&kernel, n, 77 + r).0).collect();
    let expected = 2.0 * n as f64 / (n as f64 * (n as f64 - 1.0));
    assert!((expected - 2.0002e-4).abs() < 1e-8);
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    // Exponential: standard deviation equals the mean.
    let se = expected / (samples.len() as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * se, "mean {mean} vs {expected}");
}

#[test]
fn event_logs_are_reproducible() {
    let kernel = Arc::new(KernelSpec::additive());
    let mu = DiscreteMeasure::new(vec![unit(), ClusterState::integer(3)], vec![0.75, 0.25]).unwrap();
    let plan = SnapshotPlan::new(vec![0.2, 0.4], vec![TestFunction::constant(1.0)], true).unwrap();
    let stop = StopRules {
        log_events: true,
        ..StopRules::default()
    };
    let go = || {
        let mut sys = ParticleSystem::init_iid(kernel.clone(), &mu, 2_000, 5, SystemOptions::default()).unwrap();
        run(&mut sys, 0.5, &plan, &stop).unwrap()
    };
    let (a, b) = (go(), go());
    assert_eq!(a.events.len(), b.events.len());
    for (x, y) in a.events.iter().zip(&b.events) {
        assert_eq!(x.time.to_bits(), y.time.to_bits());
        assert_eq!((x.idx_x, x.idx_y), (y.idx_x, y.idx_y));
        assert!(x.child.same_bits(&y.child));
    }
    assert!(a.events.windows(2).all(|w| w[0].time < w[1].time));
}

#[test]
fn snapshots_follow_last_event_before_plan_time() {
    let kernel = Arc::new(KernelSpec::constant(1.0).unwrap());
    let plan = SnapshotPlan::new(vec![0.1, 0.3], vec![TestFunction::constant(1.0)], false).unwrap();
    let stop = StopRules {
        log_events: true,
        ..StopRules::default()
    };
    let mut sys = ParticleSystem::init_counts(kernel, &[(unit(), 500)], 500, 8, SystemOptions::default()).unwrap();
    let traj = run(&mut sys, 0.5, &plan, &stop).unwrap();
    for snap in &traj.snapshots {
        let merged = traj.events.iter().filter(|e| e.time <= snap.time).count();
        assert_eq!(snap.cluster_count, 500 - merged);
        assert!((snap.observables[0] - snap.cluster_count as f64 / 500.0).abs() < 1e-12);
    }
}

#[test]
fn rejection_and_exact_strategies_agree_in_law() {
    // Mean cluster count at t = 1 for the additive kernel from 400 units.
    let kernel = Arc::new(KernelSpec::additive());
    let mj = kernel.default_majorant().unwrap();
    let plan = SnapshotPlan::new(vec![1.0], vec![TestFunction::constant(1.0)], false).unwrap();
    let count = |opts: SystemOptions, seed: u64| {
        let mut sys = ParticleSystem::init_counts(kernel.clone(), &[(unit(), 400)], 400, seed, opts).unwrap();
        run(&mut sys, 1.0, &plan, &StopRules::default()).unwrap().snapshots[0].observables[0]
    };
    let reps = 200u64;
    let exact: Vec<f64> = (0..reps).into_par_iter().map(|r| count(SystemOptions::default(), r)).collect();
    let rej: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| count(SystemOptions::rejection(&mj).unwrap(), 1_000 + r))
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let se = ((var(&exact) + var(&rej)) / reps as f64).sqrt();
    assert!((mean(&exact) - mean(&rej)).abs() < 4.0 * se + 1e-12);
    // Mean-field count for the additive kernel from a monodisperse start: exp(-t).
    assert!((mean(&exact) - (-1.0f64).exp()).abs() < 0.01);
}

#[test]
fn conservative_statistic_is_constant_and_pair_statistic_decreases() {
    let kernel = Arc::new(
        KernelSpec::spatial_toy(
            SpatialRate {
                ell: EllPreset::Bump,
                interaction: 1.0,
            },
            OffspringForm::DeltaSum(Placement::MassWeighted),
        )
        .unwrap(),
    );
    let support: Vec<ClusterState> = (0..4)
        .map(|k| ClusterState::integer(1 + k).with_attributes(vec![k as f64 * 0.5, -(k as f64)]).unwrap())
        .collect();
    let mu = DiscreteMeasure::new(support, vec![0.25; 4]).unwrap();
    let mut sys = ParticleSystem::init_iid(kernel, &mu, 800, 3, SystemOptions::default()).unwrap();
    let probes = vec![unit().with_attributes(vec![0.0, 0.0]).unwrap(), ClusterState::integer(5).with_attributes(vec![1.0, 2.0]).unwrap()];
    let mut monitors = vec![
        ConservationMonitor::with_options(Arc::new(ConservedQuantity::mass_times_ell(EllPreset::Bump)), probes.clone(), &sys, false),
        ConservationMonitor::new(Arc::new(MajorantSpec::min()), probes.clone(), &sys),
        ConservationMonitor::new(Arc::new(MajorantSpec::product(Xi::sqrt())), probes, &sys),
    ];
    let plan = SnapshotPlan::new(vec![], vec![], false).unwrap();
    let stop = StopRules {
        max_events: Some(700),
        ..StopRules::default()
    };
    run_monitored(&mut sys, f64::MAX, &plan, &stop, &mut monitors).unwrap();
    let reports: Vec<_> = monitors.into_iter().map(|m| m.into_report()).collect();
    assert!(reports[0].points.len() >= 100);
    assert_eq!(reports[0].single_violations, 0, "{}", reports[0].max_single_rel_dev);
    assert_eq!(reports[1].pair_increases, 0);
    assert_eq!(reports[2].pair_increases, 0);
    assert_eq!(pair_statistic(&sys, &MajorantSpec::min()), reports[1].points.last().unwrap().pair);
}

fn kernels() -> Vec<KernelSpec> {
    vec![
        KernelSpec::constant(2.0).unwrap(),
        KernelSpec::additive(),
        KernelSpec::multiplicative(),
        KernelSpec::min_log(0.5).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mass_is_bitwise_conserved(seed in 0u64..10_000, kidx in 0usize..4, n in 2u64..120) {
        let kernel = Arc::new(kernels().swap_remove(kidx));
        let support: Vec<ClusterState> = (1..=4).map(ClusterState::integer).collect();
        let mu = DiscreteMeasure::new(support, vec![0.25; 4]).unwrap();
        let opts = SystemOptions { audit_interval: 7, ..SystemOptions::default() };
        let mut sys = ParticleSystem::init_iid(kernel, &mu, n, seed, opts).unwrap();
        let initial = sys.initial_mass();
        let mut events = 0u64;
        loop {
            match sys.step().unwrap() {
                StepOutcome::Event(ev) => {
                    events += 1;
                    match (ev.mass_x, ev.mass_y, ev.child.mass()) {
                        (Mass::Integer(a), Mass::Integer(b), Mass::Integer(c)) => prop_assert_eq!(a + b, c),
                        _ => prop_assert!(false),
                    }
                    prop_assert_eq!(sys.len() as u64, n - events);
                }
                StepOutcome::Absorbed => break,
                StepOutcome::Horizon => unreachable!(),
            }
        }
        let total: u64 = sys.clusters().iter().map(|c| match c.mass() { Mass::Integer(m) => m, _ => 0 }).sum();
        prop_assert_eq!(Mass::Integer(total), initial);
        prop_assert_eq!(sys.len(), 1);
    }

    #[test]
    fn min_pair_statistic_never_rises(seed in 0u64..10_000) {
        let kernel = Arc::new(KernelSpec::constant(1.0).unwrap());
        let support: Vec<ClusterState> = (1..=6).map(ClusterState::integer).collect();
        let mu = DiscreteMeasure::new(support, vec![1.0 / 6.0; 6]).unwrap();
        let mut sys = ParticleSystem::init_iid(kernel, &mu, 60, seed, SystemOptions::default()).unwrap();
        let f = MajorantSpec::min();
        let mut prev = f.ordered_pair_sum(sys.clusters());
        while let StepOutcome::Event(_) = sys.step().unwrap() {
            let cur = f.ordered_pair_sum(sys.clusters());
            prop_assert!(cur <= prev);
            prev = cur;
        }
    }
}
