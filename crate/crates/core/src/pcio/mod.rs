//! Text file formats: clouds with labels and features, pipeline config,
//! taxonomies and candidate dumps.

mod candidates;
mod cloud;
mod config;
mod number;
mod taxonomy;

pub use candidates::{
    format_candidate, format_candidate_blocks, parse_candidate_blocks, read_candidate_blocks, write_candidate_blocks,
    CandidateBlock,
};
pub use cloud::{format_cloud, is_feature_column, parse_cloud, read_cloud, write_cloud, CloudData, FeatureColumns};
pub(crate) use config::parse_value;
pub use config::{parse_config, parse_entries, read_config, Entry, PipelineConfig, Profile};
pub use number::format_sig9;
pub use taxonomy::{format_taxonomy, parse_taxonomy, read_taxonomy};
