//! Speech-driven emotional facial animation on a 52-channel blendshape rig.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rig;
pub mod training;

pub use error::{Error, Result};
