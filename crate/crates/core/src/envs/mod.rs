//! Built-in benchmark environments, their safety functions and scripted
//! experts.

mod expert;
pub mod lane_keep;
pub mod mountain_car;

pub use expert::{lane_expert, mc_expert};
pub use lane_keep::{LaneKeepEnv, LanePhi};
pub use mountain_car::{MountainCarEnv, MountainCarPhi};

use rand_chacha::ChaCha8Rng;

use crate::types::{DynamicsModel, SafetyFn, State};

/// Common environment surface used by the repair loops and the CLI.
pub trait Environment: Sync {
    fn name(&self) -> &'static str;
    fn dynamics(&self) -> &dyn DynamicsModel;
    fn phi(&self) -> &dyn SafetyFn;
    /// Draw an initial state from the declared support.
    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> State;
    /// Episode stops early when this holds.
    fn is_terminal(&self, x: &State) -> bool;
    /// Hard cap on episode length.
    fn episode_cap(&self) -> usize;
    /// Default MPSC look-ahead horizon for this environment.
    fn sc_horizon(&self) -> usize;
    /// Constraint margin the MPSC prefers when planning, in the units of
    /// `phi`. Plans inside the margin are still accepted as a fallback.
    fn sc_margin(&self) -> f64 {
        0.0
    }
    /// Scripted expert control at `x` (used for behavioral cloning).
    fn expert(&self, x: &State) -> crate::types::Control;
}
