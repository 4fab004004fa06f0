//! Volume ingestion, preprocessing, augmentation, phantom generation and
//! the on-disk slice cache.

pub mod augment;
pub mod cache;
pub mod io;
pub mod phantom;
pub mod preprocess;
pub mod split;
pub mod volume;

pub use augment::{augment, AugmentParams};
pub use io::{load_volume, save_volume};
pub use phantom::{generate_phantom_dataset, PhantomOptions};
pub use preprocess::{
    clip_and_normalize, crop_axial, filter_slices, preprocess_volume, resize_slices,
    PreprocessParams,
};
pub use split::{split_dataset, DatasetSplit, SplitName};
pub use volume::{Modality, MriVolume, SlicePair};
