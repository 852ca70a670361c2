//! Control framings over diffusion models: trajectory planners, action
//! policies, action selection and observation windows.

pub mod context;
pub mod planner;
pub mod policy;
pub mod select;

pub use context::{build_context, ContextWindow};
pub use planner::{Plan, PlannerDmc};
pub use policy::PolicyDmc;
pub use select::{argmax, select_candidate, ActionSelector, SelectorKind};
