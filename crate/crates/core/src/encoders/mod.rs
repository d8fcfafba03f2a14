//! Frozen vision and language encoders and the adapter-bearing domain encoder.

mod attention;
mod config;
mod language;
mod vision;

pub use attention::{
    causal_mask, lora_attention, run_blocks, AdapterBank, AdapterSpec, Attention, AttentionTrace, Block, LayerAdapters,
    LowRank,
};
pub use config::{EncoderConfig, EncoderInput};
pub use language::LanguageEncoder;
pub use vision::VisionEncoder;
