//! Extremely-low-bit, mixed-precision binary-code quantization for
//! transformer weight matrices.
//!
//! A weight row `w` is approximated as `Σ αᵢ bᵢ` with `bᵢ ∈ {−1,+1}ᵖ`
//! ([`bcq`]). The binary codes are packed 32 per word and multiplied
//! against full-precision activations either directly or through
//! subset-sum lookup tables ([`kernel`]). [`planner`] decides how many
//! bits every weight group receives and accounts for the resulting model
//! size, [`container`] persists dense and quantized tensors, and
//! [`toynmt`] is a small encoder-decoder transformer used to exercise
//! quantization-aware retraining end to end.

pub mod bcq;
pub mod container;
pub mod error;
pub mod kernel;
pub mod planner;
pub mod tensor;
pub mod toynmt;

pub use bcq::{
    dequantize, greedy_quantize_vector, quantization_error, quantize_matrix, BitCluster,
    QuantizedRow, QuantizedTensor, MAX_BITS,
};
pub use container::{read_checkpoint, write_checkpoint, Checkpoint, Tensor};
pub use error::{Error, Result};
pub use kernel::{build_lut, gemv_direct, gemv_lut, memory_footprint, pack_row, LutTable};
pub use planner::{
    assign_word_bits, average_bits_embedding, cluster_embedding, model_size, quantize_model,
    ClusterSpec,
    FrequencyTable, ModelDims, PrecisionPlan,
};
pub use tensor::DenseTensor;
