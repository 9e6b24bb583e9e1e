//! Review-based rating prediction with an asymmetric hierarchical attention
//! network and a factorization-machine head.
//!
//! The crate is organized along the pipeline:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff on a tape.
//! - [`corpus`]: raw review ingestion, t-core filtering, splits, vocabulary,
//!   and the on-disk encoded-documents format.
//! - [`model`]: the network itself — shared BiLSTM sentence encoding, gated
//!   attention on the item side, co-attention on the user side, latent-id
//!   embeddings, and the factorization-machine prediction layer.
//! - [`train`]: Adam, the MSE objective, the epoch loop with validation-based
//!   model selection, and checkpoint serialization.
//! - [`baselines`]: ablation variants sharing the training harness, plus the
//!   synthetic corpora used by the verification experiments.
//! - [`explain`]: attention-weight export for inspecting single predictions.
//! - [`cli`]: the operator-facing subcommands.

mod binio;

pub mod baselines;
pub mod cli;
pub mod corpus;
pub mod explain;
pub mod model;
pub mod tensor;
pub mod train;
