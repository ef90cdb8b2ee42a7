//! Learnable reconstruction models: encoder-decoder networks over xt or xf
//! representations with optional data-consistency and temporal-average skip
//! connection, an iterative time-frequency network, input assembly,
//! checkpointing and prediction.

pub mod checkpoint;
pub mod ctfnet;
pub mod graph;
pub mod predict;
pub mod unet;
pub mod variant;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{assemble_input, Model, ModelInput};
pub use predict::model_predict;
pub use unet::UNet;
pub use variant::{
    all_variants, canonical_variants, multicoil_variants, variant_by_name, AuxInput, CoilMode,
    DcMode, ModelKind, ModelVariant, NetDim, ProcDomain,
};
