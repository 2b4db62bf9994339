//! Attamba and baseline language models over byte tokens.
//!
//! An Attamba block keeps the dense query projection but produces keys and
//! values with two selective SSMs that restart at every chunk boundary, so a
//! chunk's final SSM output summarizes the whole chunk. Blocks are pre-norm
//! with a GELU MLP; the output head is tied to the embedding and no
//! positional encoding is used (the recurrences carry order).

mod config;
mod forward;
mod params;

pub use config::{Mode, ModelConfig};
pub use forward::{
    attamba_block_forward, baseline_block_forward, lm_forward, lm_forward_tape, lm_loss, ForwardOptions, LayerTrace,
    LmTrace,
};
pub use params::{collect_grads, init_params, AttambaBlock, BaselineBlock, Block, Ffn, ModelParams};
