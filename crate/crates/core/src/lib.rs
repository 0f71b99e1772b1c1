pub mod bench;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod io;
pub mod layer;
pub mod synth;
pub mod tensor;
pub mod toy;
pub mod tvl1;

pub use error::{Error, Result};
pub use field::{DualField, FlowField};
pub use tensor::{FeatureMap, Kernel2D, PaddingSpec, Real};
pub use tvl1::{tv_energy, tvl1_flow, TvParams};
