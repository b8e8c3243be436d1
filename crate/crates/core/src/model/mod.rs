//! MoE transformer model: configuration, parameters, routing, the tape
//! forward pass used for training, the plain forward pass used for
//! inference and tracing, and checkpoint IO.

mod checkpoint;
pub mod config;
mod infer;
mod net;
mod params;
pub mod router;

pub use config::{abf_base_for_context, GateMode, ModelConfig};
pub use infer::InferOutput;
pub use net::{attn_scale, causal_mask, gated_mlp, rmsnorm, MoeLm, Staged, SteeringPlan, TapeForward, RMS_EPS};
pub use params::{expert_prefix, Param, ParamRegistry};
pub use router::{
    affinity_distribution, gates_for, router_forward, select_top_k, LayerActivationRecord,
    RouterOutput,
};
