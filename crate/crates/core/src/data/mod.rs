//! Array files, image preprocessing, datasets, and the synthetic generator.

pub mod dataset;
pub mod npy;
pub mod preprocess;
pub mod synth;

pub use dataset::{partition, partition_sizes, Boundaries, ImageDataset, Manifest, Provenance};
pub use npy::{load_array_file, save_array_file, DType};
pub use preprocess::{gaussian_blur_5x5, gaussian_kernel, minmax_normalize, Normalized};
pub use synth::{synthesize_dataset, SynthSpec};
