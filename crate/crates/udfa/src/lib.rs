//! U-DFA: a frozen ViT encoder fused with a trainable CNN adapter branch,
//! decoded by a cascade UNet decoder.
//!
//! The encoder runs a patch-embedded token stream through `N` stages of
//! frozen transformer blocks. Before each stage a fusion adapter injects
//! multi-scale CNN tokens into the frozen stream by cross-attention, and
//! after it the CNN tokens are refreshed from the stage output. The CNN
//! feature maps double as decoder skip connections.

pub mod backbone;
pub mod checkpoint;
pub mod config_io;
pub mod data;
pub mod error;
pub mod figures;
pub mod lgfa;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod runner;
pub mod spa;
pub mod tokens;

pub use error::{Result, UdfaError};
pub use model::{ParameterReport, UDfa};
pub use tokens::TokenStream;
