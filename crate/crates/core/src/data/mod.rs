//! Datasets, checkpoints and metrics.

pub mod checkpoint;
pub mod cifar;
pub mod metrics;
pub mod ppm;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cifar::{load_cifar10, load_cifar10_file, load_cifar10_test, LabeledImages, RECORD_BYTES};
pub use metrics::{read_metrics, write_metrics, write_pairs, MetricsRecord};
pub use ppm::write_ppm_grid;
pub use synthetic::{gen_synthetic, synthetic_image, SyntheticSpec, PALETTE};
