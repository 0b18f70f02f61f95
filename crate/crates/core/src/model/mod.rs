//! The columnar spatio-temporal auto-encoder, its classifier head, parameter storage
//! and checkpoints.

mod checkpoint;
pub mod layers;
mod network;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use network::{ColumnPass, ForwardPass, Mode, Network, OutputGrads};
pub use params::{
    init_params, skeleton, AttnIds, BnIds, ColumnIds, ConvIds, DecoderIds, Layout, LstmIds, ParamEntry, ParamId,
    ParamStore, DEC_KERNEL,
};
