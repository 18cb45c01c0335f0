//! Volumes, reports and everything needed to turn them into training samples.

pub mod crop;
pub mod io;
pub mod manifest;
pub mod phantom;
pub mod tokenizer;
pub mod volume;

pub use crop::{make_views, random_crop, Crop, DEFAULT_VIEWS};
pub use io::{decode_volume, encode_volume, read_volume, write_volume};
pub use manifest::{assign_splits, read_manifest, write_manifest, Corpus, SampleRecord, Split};
pub use phantom::{generate_phantom, write_corpus, CatalogEntry, Phantom, PhantomSpec};
pub use tokenizer::{tokenize, TokenSequence, Vocab, CLS_ID, PAD_ID, UNK_ID};
pub use volume::{hu_window, resample, resize, Preprocess, Volume};
