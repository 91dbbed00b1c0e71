//! Post-training quantization engine.
//!
//! * [`quant`]: uniform affine quantizer (scale/zero-point, quantize,
//!   dequantize, fake quantization).
//! * [`range`], [`histogram`]: clipping-range observers, including the
//!   unilateral histogram search for SiLU activations.
//! * [`graph`], [`exec`], [`model_file`]: a small compute graph, its
//!   reference executor, and the `QYM1`/`QYT1` file formats.
//! * [`calib`], [`compare`]: the calibration driver and evaluation harness.
//! * [`oracle`]: brute-force references used by tests and audits.

pub mod calib;
pub mod compare;
pub mod error;
pub mod exec;
pub mod graph;
pub mod histogram;
pub mod model_file;
pub mod oracle;
pub mod quant;
pub mod range;
pub mod tensor;
pub mod toy;

pub use calib::{calibrate, evaluate, CalibConfig, Calibration, CalibrationReport, EvalMetrics, QuantMode};
pub use error::{QuantError, Result};
pub use graph::{GraphModel, NodeSpec, OpKind, QuantAssignment, WeightBundle};
pub use histogram::{ActivationHistogram, UhSearchTrace, HISTOGRAM_BINS, SILU_LOWER_BOUND};
pub use quant::{ClipRange, QuantParams};
pub use range::{ObserverConfig, Scheme};
pub use tensor::{IntTensor, Tensor};
