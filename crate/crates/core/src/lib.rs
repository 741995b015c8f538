//! CTC scene-text recognition: multi-size resizing, a local/global mixing
//! backbone, feature rearrangement, semantic guidance, and CTC training.

pub mod backbone;
pub mod ctc;
pub mod error;
pub mod frm;
pub mod gradcheck;
pub mod model;
pub mod msr;
pub mod nn;
pub mod optim;
pub mod sgm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
