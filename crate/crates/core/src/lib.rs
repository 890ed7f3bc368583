//! 3D hand mesh recovery building blocks: spiral mesh convolutions over a
//! decimation hierarchy, a constrained parametric hand model fitted to 2D
//! keypoints, a small encoder/decoder trained with a direct mesh loss, and
//! the usual pose and mesh evaluation metrics.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod fitting;
pub mod geom;
pub mod hand;
pub mod mesh;
pub mod metrics;
pub mod network;
pub mod render;
pub mod sampling;
pub mod sparse;
pub mod spiral;

pub use error::{Error, Result};
pub use mesh::{load_mesh, save_mesh, TriMesh, VertexAdjacency};
