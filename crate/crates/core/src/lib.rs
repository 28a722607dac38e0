//! Dynamic sparse attention by mix-precision multi-round filtering, together
//! with a cycle-level model of a filtering/attention co-processor and a
//! closed-form pipeline model.
//!
//! * [`tensor`]: dense matrices, softmax and reference multi-head attention.
//! * [`quant`]: INT16 quantization and truncated 2/4-bit views.
//! * [`mrf`]: the multi-round filter that selects keys per query.
//! * [`sparse`]: high-precision attention over the selected keys.
//! * [`sim`]: the cycle-level simulator.
//! * [`perf`]: the analytical load/compute model.
//! * [`cli`]: file formats and the command-line front end.

pub mod cli;
pub mod error;
pub mod mrf;
pub mod perf;
pub mod quant;
pub mod sim;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
