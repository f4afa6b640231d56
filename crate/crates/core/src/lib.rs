pub mod als;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod tile;
pub mod training;

pub use als::{GridSpec, PointCloud, StructureRaster, Variable};
pub use dataset::{Dataset, SceneData, Split, SplitSpec};
pub use error::{Error, ErrorKind, Result};
pub use tensor::{Scalar, Tensor};
