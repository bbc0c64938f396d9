//! Activation-aware adaptive codebook (AAAC) 4-bit weight quantization.
//!
//! A linear layer's weights are split into scale groups of `g` contiguous
//! in-row elements sharing one positive scale. Instead of rounding every
//! normalized weight onto the fixed base-format grid (NVFP4 or INT4), AAAC
//! learns two scalar codebooks per layer from calibration activations and
//! lets every selection group of `S` weights pick whichever codebook gives
//! the lower activation-weighted reconstruction error. When `S == g` the
//! choice rides in the sign bit of the group's scale.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: weight/activation matrices, safetensors ingestion, synthetic layers.
//! - [`grids`]: base tables, per-group scales, BF16 and FP8 E4M3 rounding.
//! - [`quant`]: nearest-entry reconstruction, RTN and IF4 baselines, dequantization.
//! - [`learn`]: the codebook learner.
//! - [`pack`]: the bit-exact `.aaacq` container.
//! - [`eval`]: error metrics, gap recovery, W4A8 simulation and method comparison.

pub mod error;
pub mod eval;
pub mod grids;
pub mod learn;
pub mod pack;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use eval::{
    compare, gap_recovery, layer_output_mse, simulate_w4a8, Direction, EvalReport, LayerMetrics,
};
pub use grids::{
    base_table, compute_scales, round_bf16, round_e4m3, BaseFormat, ScaleMode, ScaleVector,
};
pub use learn::{importance, learn, weighted_error, AaacConfig, ImportanceVector, LearnOutput};
pub use pack::{pack, unpack, PackedLayer, PackedModel};
pub use quant::{
    dequantize, if4_quantize, recon, rtn_quantize, CodeMatrix, Codebook, Method, QuantizedLayer,
    SelectionMap,
};
pub use tensor::{
    load_tensor_archive, save_tensor_archive, synth_layer, ActivationMatrix, LayerBundle,
    SynthSpec, WeightMatrix,
};
