//! Frame-feature archives, their text sidecars, and the synthetic corpus
//! generator.

mod archive;
mod synth;

pub use archive::{FeatureArchive, Utterance, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use synth::{
    symbol_char, synth_generate, SynthCorpus, SynthSpec, CLASS_SEPARATION, SYNTH_ALPHABET,
    SYNTH_FRAME_SECONDS,
};
