//! Parameter-efficient tuning methods behind one attachment interface.

mod attach;
mod config;
pub mod hooks;
pub mod ops;

pub use attach::{method_shapes, AttachedModel};
pub use config::{PeftConfig, PrefixPlacement};
pub use hooks::{AttachPoint, HookTable, PeftHooks, Projection, ScaleShape};
