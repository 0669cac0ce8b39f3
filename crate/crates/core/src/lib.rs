//! Cluster coagulation: an exact stochastic simulator of the normalised
//! Marcus–Lushnikov process on a general cluster space, a fixed-step solver
//! for the multi-type Flory equation, and the checks that compare them.

pub mod analysis;
pub mod error;
pub mod flory;
pub mod io;
pub mod kernels;
pub mod simulator;
pub mod state;

pub use error::{AbortReason, CoagError, Result};
pub use flory::{
    build_grid, build_grid_from_states, gel_mass_at, rhs, solve, ChildIndex, FloryTrajectory,
    GridSpec, Method, OverflowPolicy, RecordPlan, SolverConfig,
};
pub use kernels::{
    classify_quantity, eventually_conservative_check, majorant_value, phi_value,
    ConservedQuantity, EllPreset, KernelSpec, MajorantSpec, Matrix, OffspringForm, PairFunction,
    Placement, RateForm, Xi,
};
pub use simulator::{
    replica_seed, run, run_monitored, ConservationMonitor, EventRecord, ParticleSystem,
    SnapshotPlan, StepOutcome, StopReason, StopRules, SystemOptions, Trajectory,
};
pub use state::{
    bl_distance, integrate, standard_family, test_family, total_mass, ClusterState,
    DiscreteMeasure, Mass, TestFunction,
};
