//! Synthetic phantoms, PGM I/O and dataset preparation.

pub mod dataset;
pub mod pgm;
pub mod phantom;

pub use dataset::{cache_memberships, prepare_dataset, read_dataset, split_dataset, write_dataset, DatasetSplit};
pub use pgm::{load_pgm, save_labels_pgm, save_pgm, BitDepth, GrayImage};
pub use phantom::{generate_phantom, generate_phantoms, LabeledImage, PhantomConfig};
