//! Visual-attention analysis and attention steering for multimodal
//! transformers.
//!
//! The crate works on attention rows of the question-end token: it measures
//! how much and how narrowly each head looks at the image, picks the heads
//! that ground the answer in the image, builds a background-subtracted map of
//! the question-relevant visual tokens and turns it into reweighting or
//! masking plans. A small trainable transformer ([`toy`]) reproduces the
//! mechanisms end to end.
//!
//! The crate is `no_std` and only needs `alloc`; file formats and the command
//! line live in the `vrga` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dump;
pub mod error;
pub mod layout;
pub mod localize;
pub mod metrics;
pub mod select;
pub mod steer;
pub mod synth;
pub mod toy;

pub use dump::{AttentionDump, DumpKind, DumpShape, RowCheck, RowSumWarning};
pub use error::{Error, Result};
pub use layout::{bbox_to_tokens, Grid, MaskSource, PixelBox, RegionMask, Span, TokenLayout};
pub use localize::{refine_map, select_tokens, Aggregation, RefineConfig, RefinedMap};
pub use metrics::{HeadMetrics, HeadTable, MetricsConfig, PromptMode, RegressionFit, RegressionStats, ScoreInput};
pub use select::{HeadId, HeadSelection, SelectionConfig, SelectionRule};
pub use steer::{MaskPlan, Plan, ReweightPlan};
pub use synth::{generate, SynthLabels, SynthSpec};
