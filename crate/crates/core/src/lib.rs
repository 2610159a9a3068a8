pub mod audio_prep;
pub mod features;
pub mod normalize;
pub mod ladder;
pub mod elm;
pub mod svm;
pub mod harness;
pub mod cli;
