//! The `DS/A-B-k-θ` detector family.
//!
//! [`ArchSpec`] holds a configuration. [`shape_trace`] and [`count_params`] describe it
//! statically, and [`Model`] executes it on the tensor core.

mod build;
mod model;
mod spec;
mod trace;

pub use build::{build_network, Heads, NetBuilder};
pub use model::{flatten_predictions, ForwardOut, Model};
pub use spec::{default_anchors, default_scale_channels, parse_arch_string, ArchSpec, Compression, PredictionStyle, MAX_ANCHORS};
pub use trace::{closed_form_params, count_params, scale_grids, shape_trace, LayerTrace, ParamKind, ParamSpec, TraceRow};
