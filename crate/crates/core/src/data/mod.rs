//! Frame data: synthetic generation, the on-disk layout, augmentation and
//! the rotation / stack-of-differences transforms.

pub mod augment;
pub mod dataset;
pub mod ppm;
pub mod split;
pub mod synthetic;
pub mod transforms;

pub use augment::{augment, AugmentationConfig};
pub use dataset::{load_all_videos, load_dataset, load_video};
pub use split::{split_videos, Split};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use transforms::{rotate90, stack_of_differences};
