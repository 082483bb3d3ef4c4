//! Synthetic data, image codecs and augmentation.

pub mod augment;
pub mod dataset;
pub mod netpbm;
pub mod scene;

pub use augment::{apply as augment, flip_horizontal, AugmentDraw};
pub use dataset::{load_split, read_manifest, write_dataset, Dataset, Manifest, Split};
pub use scene::{expected_class_frequency, gen_scene, Sample, SceneSpec, ShapeKind};
