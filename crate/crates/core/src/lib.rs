//! Toolkit for a family of small pose-estimation CNNs deployed on a
//! multi-core microcontroller: graph analysis, post-training 8-bit
//! quantization, bit-exact integer inference, memory-hierarchy-aware
//! deployment planning, an operating-point cost model and a closed-loop
//! human-following simulator.

pub mod augment;
pub mod control;
pub mod cost_model;
pub mod engine;
pub mod graph;
pub mod image;
pub mod planner;
pub mod pose;
pub mod quantizer;
pub mod tensor;

pub use graph::{analyze, build_frontnet, infer_shapes, GraphStats, LayerKind, LayerSpec, NetGraph, Shape3, Variant};
pub use tensor::{QTensor, QuantParams, RTensor, Requant};
pub use image::GrayImage;
pub use pose::Pose;
pub use engine::{infer_float, infer_int, InferenceResult, IntEngine};
pub use quantizer::{calibrate, convert, CalibrationSet, FloatModel, QuantizedGraph};
pub use planner::{plan, tile_layer, DeploymentPlan, MemoryHierarchy, PlanOptions, WeightPolicy};
pub use cost_model::{calibrate_params, estimate, sweep, CostEstimate, CostParams, OperatingPoint};
