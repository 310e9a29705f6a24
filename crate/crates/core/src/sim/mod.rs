//! Deterministic discrete-event highway simulator.
//!
//! Vehicles drive on a straight multi-lane road, broadcast beacons through
//! their protocol stacks over a lossy shared channel, and react to emergency
//! braking either by sight or by radio warning.

pub mod channel;
pub mod config;
pub mod metrics;
pub mod mobility;
pub mod runner;
pub mod sweep;
pub mod trace;

pub use channel::{Channel, ChannelStats, Delivery};
pub use config::{
    BrakingConfig, EngineConfig, MetricsConfig, PseudonymConfig, RadioConfig, ScenarioConfig, SecurityConfig,
    SecurityMode, StrategyKind, TrafficConfig,
};
pub use metrics::{percentile, to_csv_string, write_csv, Metrics, QueueSample, CSV_COLUMNS};
pub use mobility::{mobility_step, Kinematics, VehicleKinematics};
pub use runner::{epoch_ms, run, run_with_trace, RunOutput};
pub use sweep::{grid_points, point_config, sweep, GridAxis, SweepError};
pub use trace::{BrakeCause, Trace, TraceEvent};
