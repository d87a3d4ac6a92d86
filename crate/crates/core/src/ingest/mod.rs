//! On-disk session store and the clip preprocessing pipeline.

pub mod container;
mod preprocess;
mod store;

pub use container::{decode_clip, encode_clip, encode_clip_u8, FormatError, CLIP_MAGIC, WEIGHTS_MAGIC};
pub use preprocess::{
    crop, encode_answer, encode_time, expand_crop, resize_bilinear, to_grayscale, uniform_indices, uniform_sample,
    CropBox, PreprocessError, Preprocessor, CROP_EXPANSION, LUMA,
};
pub use store::{
    clip_file_name, list_sessions, read_manifest, read_session, read_store, write_session, write_store, ManifestEntry,
    SessionManifest, StoreError, MANIFEST_FILE,
};
