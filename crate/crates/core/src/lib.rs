//! Phylogeny-structured quantized embeddings.
//!
//! Encodes feature maps into "imageome" sequences of discrete codebook
//! indices whose segments carry ancestry information at successive levels of
//! a phylogeny, plus the training loop, synthetic data generator, sequence
//! sampler, and the analysis toolkit (code histograms, entropies,
//! Jensen-Shannon distance matrices, rank correlations, translations).

pub mod analysis;
pub mod codec;
pub mod graph;
pub mod phylogeny;
pub mod quantizer;
pub mod sampler;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use codec::{CodecConfig, Imageome, PhyloCodec};
pub use graph::{Graph, Var};
pub use phylogeny::{DistanceMatrix, LevelMap, PhyloTree};
pub use quantizer::Codebook;
pub use tensor::{Tensor, TensorError};
pub use trainer::Trainer;
