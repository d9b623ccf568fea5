//! Memory-budgeted CNN inference for devices with a few hundred kilobytes of
//! activation memory.
//!
//! The input image is split into overlapping patches ([`segmentation`]),
//! each patch runs through its own chain of lightweight ops (a patch
//! tunnel), and the pooled tunnel outputs are summed before a single fully
//! connected head ([`runtime`]). Inverted-residual bottlenecks run one
//! expanded channel at a time ([`bottleneck`]), which keeps their working
//! set independent of the expansion ratio. [`planner`] computes the peak
//! activation footprint statically; the runtime's arena reproduces it
//! exactly.
//!
//! Kernels are generic over [`Scalar`]; the aliases below fix the common
//! precisions.

pub mod arena;
pub mod bottleneck;
pub mod error;
pub mod modelio;
pub mod network;
pub mod planner;
pub mod runtime;
pub mod scalar;
pub mod segmentation;
pub mod synth;
pub mod tensor;

pub use arena::{Arena, Frame};
pub use bottleneck::{
    bottleneck_footprint, bottleneck_reordered, bottleneck_standard, AffineParams, BottleneckSpec,
    BottleneckWeights, StageAffine,
};
pub use error::{Error, Result};
pub use network::{BlockConfig, HeadSpec, NetworkSpec, NetworkWeights, StemSpec, TunnelSpec, TunnelWeights};
pub use planner::{layer_footprint, max_cout_under_budget, plan_network, ExecMode, MemoryBudget, MemoryPlan};
pub use runtime::{execute_network, make_arena, run_tunnel, verify_equivalence, EquivalenceReport, ExecutionTrace};
pub use scalar::Scalar;
pub use segmentation::{extract_patches, patch_area_ratio, plan_regions, PatchLayout, PatchRegion};
pub use tensor::{ConvParams, ElemKind, Tensor, TensorShape};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Arena32 = Arena<f32>;
pub type Arena64 = Arena<f64>;
pub type BottleneckWeights32 = BottleneckWeights<f32>;
pub type BottleneckWeights64 = BottleneckWeights<f64>;
pub type NetworkWeights32 = NetworkWeights<f32>;
pub type NetworkWeights64 = NetworkWeights<f64>;
