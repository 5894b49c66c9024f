//! Training-free image manipulation localization driven by a multimodal chat
//! model.
//!
//! The pipeline filters a forensic rule set down to the cues relevant for an
//! image ([`rulebase`]), runs a coarse-to-fine reasoning loop in which the
//! model proposes and refines candidate regions over lossless crops
//! ([`chain`], [`messages`], [`tools`]), and converts the final boxes into a
//! pixel mask with a promptable segmenter ([`backends`]). [`evaluation`]
//! scores predictions with pixel-level AUC, AP and F1 and image-level F1.

pub mod backends;
pub mod chain;
pub mod evaluation;
pub mod messages;
pub mod rulebase;
pub mod tools;

pub use backends::{BackendError, BackendErrorKind, Backends};
pub use chain::{run_chain, ChainConfig, ChainError, ChainFailure, ForensicResult};
pub use messages::{BoundingBox, Label, ReasoningMessage};
pub use rulebase::{Rule, RuleIndex, RuleSet};
pub use tools::{ImageBuffer, MaskImage};
