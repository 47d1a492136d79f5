//! Imitation learning of action and mode-switching policies from partially
//! automated demonstrations, robustified by disturbance injection.
//!
//! The crate bundles a kinematic pick-and-place simulator ([`env`]), a
//! scripted operator ([`operator`]), a small neural-network trainer ([`nn`]),
//! the learned policy layer ([`policy`]), the iterative learner covering all
//! comparison methods ([`learner`]), experiment drivers ([`harness`]) and a
//! live teleoperation server ([`teleop`]).

pub mod env;
pub mod harness;
pub mod learner;
pub mod nn;
pub mod operator;
pub mod policy;
pub mod rng;
pub mod teleop;
pub mod trajfile;
pub mod types;

pub use learner::{MethodVariant, SigmaReading};
pub use env::{EnvConfig, EnvState, PickPlaceEnv, Threshold};
pub use operator::{Operator, OperatorConfig};
pub use rng::RngStream;
pub use types::{ActionDelta, DisturbanceLevel, Mode, Step, Trajectory};
