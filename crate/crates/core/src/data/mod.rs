//! On-disk formats, preprocessing, batching and the synthetic generator.

mod dataset;
mod manifest;
mod preprocess;
mod synth;
mod tensor_file;

pub use dataset::{batch_iter, batch_order, load_sample, Batch, BatchIter, Dataset, Sample};
pub use manifest::{BandStat, Geometry, Manifest, SampleEntry, Split, MANIFEST_FILE, MANIFEST_VERSION};
pub use preprocess::{
    band_stats, center_crop, denormalize, filter_non_rainy, normalize, select_bands, target_volume, FilterCount,
    FilterReport,
};
pub use synth::{synth_generate, synth_sample, SynthConfig, SynthSample, BANDS};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor_file, write_tensor_file};
