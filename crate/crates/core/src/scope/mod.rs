//! Router observability: entropy telemetry, collapse detection, routing
//! embeddings with the filter/steer pipeline, trace file IO, and the
//! emissions estimator.

mod embedding;
mod emissions;
mod metrics;
mod trace_io;

pub use embedding::{
    cluster_embeddings, domain_embedding, filter_embedding, routing_embedding, steering_bias,
    steering_plan, RoutingEmbedding, RoutingTrace,
};
pub use emissions::{co2_estimate, EmissionsInput};
pub use metrics::{
    default_collapse_threshold, detect_collapse, h_sparsity, h_utilization, TelemetryReport,
};
pub use trace_io::{read_embedding, read_traces, trace_samples, write_embedding, write_traces};
