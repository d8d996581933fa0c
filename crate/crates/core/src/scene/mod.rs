//! Geometry, pinhole cameras, procedural toy objects and OBJ ingestion.

mod camera;
mod mesh;
mod obj;

pub use camera::{camera_ring, Camera, Intrinsics, Projection, ViewSet};
pub use mesh::{make_toy_scene, procedural_albedo, vertex_normals, ToyScene, Triangle, TriangleMesh, ALBEDO_RES};
pub use obj::{load_obj, parse_obj};

use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("malformed OBJ at line {line}: {msg}")]
    MalformedObj { line: usize, msg: String },
    #[error("mesh has no texture coordinates")]
    MissingUv,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid view set: {0}")]
    InvalidViewSet(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
