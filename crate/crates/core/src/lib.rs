pub mod checkpoint;
mod cloud;
mod dataset;
pub mod datagen;
pub mod energy;
mod error;
pub mod forward;
pub mod icnn;
pub mod jko;
pub mod metrics;
pub mod optim;
pub mod ot;
pub mod trainer;

pub use cloud::PointCloud;
pub use error::{Error, Result};
pub use dataset::{load_dataset, save_dataset, GeneratorInfo, Manifest, SnapshotDataset, FORMAT_VERSION};
