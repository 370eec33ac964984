//! Text-video retrieval over multi-modal hypergraphs.
//!
//! A text-video pair is encoded as one joint hypergraph: nodes are a
//! video-global summary, selected keyframes and the word tokens; hyperedges
//! tie them together globally, within each modality and across modalities.
//! Node states flow through attention-based hypergraph layers, a variational
//! graph head produces Gaussian node representations, and an attention
//! readout scores the pair. Training is contrastive over in-batch similarity
//! matrices with exact reverse-mode gradients and decoupled-weight-decay Adam.
//!
//! The `hypertvr` binary exposes the pipeline as subcommands: `synth`,
//! `train`, `eval`, `retrieve`, `gradcheck`, `inspect`.

pub mod autodiff;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evalcli;
pub mod hypergraph;
pub mod numerics;
pub mod scoring;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
pub use numerics::{DenseMatrix, SeededRng};
