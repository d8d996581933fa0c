//! Images, G-buffer rasterization, preview shading, the ray-traced reference
//! renderer and the multi-view dataset.

mod dataset;
mod gbuffer;
mod image;
mod shading;

pub use dataset::{render_view, Dataset, DatasetSpec, Split, ViewSample, VIEW_FILES};
pub use gbuffer::{rasterize_gbuffer, GBuffer};
pub use image::{quantize, Image};
pub use shading::{ray_trace, shade_rasterized, LightingSetup, Material, PointLight};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ::image::ImageError),
}
