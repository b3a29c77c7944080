//! Robust stability of feedback loops whose plant and controller talk
//! through a cascade of uncertain two-port channels.
//!
//! The loop is `F = [[I, C], [P, I]]` acting on `[u1; y2]` (positive feedback).
//! Its stability margin `b = 1/‖Π‖∞` bounds how much channel uncertainty the
//! loop tolerates: robust stability holds when `Σ arcsin r_k < arcsin b`.

pub mod analysis;
pub mod cone;
pub mod graphsym;
pub mod linalg;
pub mod lti;
pub mod margin;
pub mod signal;
pub mod sim;
pub mod syntax;
pub mod twoport;

pub use analysis::{Channel, NetworkModel, StabilityReport, Verdict};
pub use lti::{FrequencyGrid, LtiError, StateSpaceModel};
pub use signal::{SignalError, SignalTrace};
