//! Active deferred neural rendering on the CPU.
//!
//! The crate covers the whole pipeline: procedural scenes and cameras
//! ([`scene`]), G-buffer rasterization and Whitted ray tracing ([`imaging`]),
//! a reverse-mode tensor tape ([`diff`]), neural textures and the per-modality
//! texture aggregator ([`texture`]), the SH-conditioned U-Net renderer
//! ([`render`]), the training losses ([`loss`]), the Q-learning view selector
//! ([`select`]) and the two-step training driver ([`train`]).

pub mod diff;
pub mod imaging;
pub mod loss;
pub mod render;
pub mod scene;
pub mod select;
pub mod texture;
pub mod train;
#[doc(hidden)]
pub mod testing;
